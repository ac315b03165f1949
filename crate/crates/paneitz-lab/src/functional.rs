//! The Euler energy `J`, its asymptotic expansion at a bubble configuration,
//! quadrature-based gradient pairings, the correction-term bound, and the
//! normal form `Ψ` near a blow-up point.
//!
//! `J(u) = ‖u‖²_P / (∫ K |u|^{2n/(n−4)})^{(n−4)/n}` is degree-0 homogeneous;
//! its positive critical points solve `P u = K u^{(n+4)/(n−4)}` up to a
//! multiplicative constant. Everything here works on the finite-dimensional
//! bubble configurations; the infinite-dimensional correction `v` appears
//! only through its norm bound ([`vbar_bound`]) and in the axisymmetric
//! discretisation.
//!
//! Normalisation: the expansion coefficients assume `‖u‖_P = 1` (the
//! functional is studied on the unit sphere of `H²₂`), so a single bubble is
//! weighted by `α = S_n^{−1/2}` (see [`unit_norm_alpha`]) whenever a
//! prediction is compared against a quadrature pairing.

use crate::bubbles::{
    bubble_constants, bubble_derivatives_in_frame, bubble_eval, epsilon_ij, inner_product_p,
    Bubble, BubbleConstants, BubbleExpr, Configuration,
};
use crate::sphere::{build_quadrature, tangent_frame, Dim, KField, Point, QuadratureRule};
use crate::{Error, Result};
use nalgebra::DVector;

/// Thresholds used by the neighborhood diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct FunctionalTolerances {
    /// `η` in the positive-part neighborhood `V_η(Σ⁺)`.
    pub eta: f64,
    /// `ε` of the bubble neighborhood `V(p, ε)`.
    pub eps_neighborhood: f64,
    /// Node budget for quadrature rules built on demand.
    pub quad_budget: usize,
}

impl FunctionalTolerances {
    pub fn new(eta: f64, eps_neighborhood: f64, quad_budget: usize) -> Result<Self> {
        if eta <= 0.0 || eps_neighborhood <= 0.0 || quad_budget == 0 {
            return Err(Error::Domain("tolerances must be positive".into()));
        }
        Ok(FunctionalTolerances { eta, eps_neighborhood, quad_budget })
    }
}

/// The weight that puts a single bubble on the unit sphere of `‖·‖_P`:
/// `α = S_n^{−1/2}`.
pub fn unit_norm_alpha(consts: &BubbleConstants) -> f64 {
    consts.s_n.powf(-0.5)
}

/// Evaluate `J` at a bubble configuration by quadrature.
///
/// The numerator is assembled from pairings `⟨δ̃_i, δ̃_j⟩_P` by bilinearity;
/// the denominator is `∫ K |u|^{2n/(n−4)}` on the same rule.
pub fn j_value(config: &Configuration, k: &KField, quad: &QuadratureRule) -> Result<f64> {
    let dim = config.dim;
    let bubbles: Vec<Bubble> = config.parts.iter().map(|p| p.bubble.clone()).collect();
    let mut norm2 = 0.0;
    for i in 0..bubbles.len() {
        for j in i..bubbles.len() {
            let pair =
                inner_product_p(&bubbles, BubbleExpr::Bubble(i), BubbleExpr::Bubble(j), dim, quad);
            let w = config.parts[i].alpha * config.parts[j].alpha;
            norm2 += if i == j { w * pair } else { 2.0 * w * pair };
        }
    }
    let q = dim.crit_exponent();
    let denom_integral = quad.integrate(|x| k.value(x) * config.eval(x).abs().powf(q));
    if denom_integral <= 0.0 {
        return Err(Error::Domain(format!(
            "∫ K |u|^(2n/(n-4)) = {denom_integral:e} is not positive; K must be positive and u nonzero"
        )));
    }
    Ok(norm2 / denom_integral.powf((dim.nf() - 4.0) / dim.nf()))
}

/// The displayed expansion of `J` at `Σ α_i δ̃_i` (the `v = 0` instance), term
/// by term.
#[derive(Debug, Clone)]
pub struct ExpansionBreakdown {
    /// `(Σ α_i²) S_n^{4/n} / (Σ α_i^{2n/(n−4)} K(a_i))^{(n−4)/n}`.
    pub leading: f64,
    /// `c_2 (n−4)/n · Σ_i 4 ΔK(a_i) α_i^{2n/(n−4)} / (λ_i² Σ_j α_j^{2n/(n−4)} K(a_j) S_n)`.
    pub laplacian_term: f64,
    /// `c_1 Σ_{i≠j} α_i α_j ε_ij (1/(Σ α² S_n) − 2 α_i^{8/(n−4)} K(a_i)/(Σ α^{2n/(n−4)} K S_n))`.
    pub interaction_term: f64,
    /// `leading · (1 − laplacian_term + interaction_term)`.
    pub total: f64,
}

/// Evaluate the expansion of `J` with the correction `v = 0` and the
/// remainder dropped.
pub fn expansion_j(
    config: &Configuration,
    k: &KField,
    consts: &BubbleConstants,
) -> ExpansionBreakdown {
    let dim = config.dim;
    let n = dim.nf();
    let q = dim.crit_exponent();
    let sum_a2: f64 = config.parts.iter().map(|p| p.alpha * p.alpha).sum();
    let sum_aq_k: f64 =
        config.parts.iter().map(|p| p.alpha.powf(q) * k.value(&p.bubble.a)).sum();
    let leading = sum_a2 * consts.s_n.powf(4.0 / n) / sum_aq_k.powf((n - 4.0) / n);

    let mut laplacian_term = 0.0;
    for p in &config.parts {
        let lap = k.laplacian(&p.bubble.a);
        laplacian_term +=
            4.0 * lap * p.alpha.powf(q) / (p.bubble.lambda.powi(2) * sum_aq_k * consts.s_n);
    }
    laplacian_term *= consts.c_2 * (n - 4.0) / n;

    let mut interaction_term = 0.0;
    let parts = &config.parts;
    for i in 0..parts.len() {
        for j in 0..parts.len() {
            if i == j {
                continue;
            }
            let eps = epsilon_ij(&parts[i].bubble, &parts[j].bubble, dim);
            let bracket = 1.0 / (sum_a2 * consts.s_n)
                - 2.0 * parts[i].alpha.powf(8.0 / (n - 4.0)) * k.value(&parts[i].bubble.a)
                    / (sum_aq_k * consts.s_n);
            interaction_term += consts.c_1 * parts[i].alpha * parts[j].alpha * eps * bracket;
        }
    }

    ExpansionBreakdown {
        leading,
        laplacian_term,
        interaction_term,
        total: leading * (1.0 - laplacian_term + interaction_term),
    }
}

/// Gradient pairings of `J` at `u = α δ̃` against the scaled parameter
/// directions, computed by quadrature.
#[derive(Debug, Clone)]
pub struct GradPairings {
    /// `⟨∇J(u), λ ∂δ̃/∂λ⟩_P`.
    pub g_lambda: f64,
    /// `⟨∇J(u), (1/λ) ∂δ̃/∂a_j⟩_P` in the tangent frame at `a`.
    pub g_a: DVector<f64>,
}

/// Exact first-variation pairing
///
/// ```text
/// ⟨∇J(u), h⟩ = (2/D) [ ⟨u, h⟩_P − (‖u‖²/I) ∫ K |u|^{8/(n−4)} u h ],
/// I = ∫ K |u|^{2n/(n−4)},   D = I^{(n−4)/n},
/// ```
///
/// valid for any `α` (it is the honest Fréchet derivative of the
/// degree-0-homogeneous `J`, so it coincides with the unit-sphere gradient
/// when `‖u‖_P = 1`). The pairings `⟨u, h⟩_P` reduce through `P δ̃` as usual.
pub fn grad_j_pairings(
    b: &Bubble,
    alpha: f64,
    k: &KField,
    dim: Dim,
    quad: &QuadratureRule,
) -> Result<GradPairings> {
    let bubbles = [b.clone()];
    let frame = tangent_frame(&b.a);
    let q = dim.crit_exponent();

    let delta2 =
        inner_product_p(&bubbles, BubbleExpr::Bubble(0), BubbleExpr::Bubble(0), dim, quad);
    let norm2 = alpha * alpha * delta2;
    let i_val = quad.integrate(|x| {
        k.value(x) * (alpha * bubble_eval(b, x, dim)).abs().powf(q)
    });
    if i_val <= 0.0 {
        return Err(Error::Domain("∫ K |u|^(2n/(n-4)) must be positive".into()));
    }
    let d_val = i_val.powf((dim.nf() - 4.0) / dim.nf());
    let apow = alpha.powf(dim.power());

    let pair = |h: BubbleExpr| -> f64 {
        let u_h = alpha * inner_product_p(&bubbles, BubbleExpr::Bubble(0), h, dim, quad);
        let nonlinear = apow
            * quad.integrate(|x| {
                let hv = match h {
                    BubbleExpr::ScaledLambdaDeriv(_) => {
                        bubble_derivatives_in_frame(b, x, dim, &frame).d_lambda
                    }
                    BubbleExpr::ScaledLocDeriv(_, j) => {
                        bubble_derivatives_in_frame(b, x, dim, &frame).d_a[j]
                    }
                    BubbleExpr::Bubble(_) => bubble_eval(b, x, dim),
                };
                k.value(x) * bubble_eval(b, x, dim).powf(dim.power()) * hv
            });
        2.0 / d_val * (u_h - norm2 / i_val * nonlinear)
    };

    let g_lambda = pair(BubbleExpr::ScaledLambdaDeriv(0));
    let g_a = DVector::from_fn(frame.len(), |j, _| pair(BubbleExpr::ScaledLocDeriv(0, j)));
    Ok(GradPairings { g_lambda, g_a })
}

/// Predicted single-bubble gradient pairings from the asymptotic expansions,
/// with the location coefficient `c_3` taken from a calibration run.
#[derive(Debug, Clone)]
pub struct GradPrediction {
    /// `(8(n−4)/n) c_2 α^{(n+4)/(n−4)} J^{(2n−4)/(n−4)} ΔK(a) / λ²`.
    pub g_lambda_pred: f64,
    /// `−2 c_3 J^{(2n−4)/(n−4)} ∇K(a)/λ` in the tangent frame at `a`;
    /// `None` when no calibration is available (the direction is then known
    /// only up to the positive factor `c_3`).
    pub g_a_pred: Option<DVector<f64>>,
    /// `−2 J^{(2n−4)/(n−4)} ∇K(a)/λ` — the prediction with the unknown `c_3`
    /// divided out, always available.
    pub g_a_shape: DVector<f64>,
    /// The calibration value used, if any.
    pub c3_estimate: Option<f64>,
}

/// Evaluate the predicted gradient pairings at `u = α δ̃_(a,λ)`. `J` is taken
/// from the expansion's leading term (the difference is beyond the stated
/// remainder order).
pub fn expansion_grad(
    b: &Bubble,
    alpha: f64,
    k: &KField,
    consts: &BubbleConstants,
    dim: Dim,
    c3: Option<&C3Calibration>,
) -> GradPrediction {
    let n = dim.nf();
    let config = Configuration::single(alpha, b.a.clone(), b.lambda, dim).unwrap();
    let j = expansion_j(&config, k, consts).leading;
    let jpow = j.powf((2.0 * n - 4.0) / (n - 4.0));
    let g_lambda_pred = 8.0 * (n - 4.0) / n
        * consts.c_2
        * alpha.powf(dim.power())
        * jpow
        * k.laplacian(&b.a)
        / (b.lambda * b.lambda);
    let frame = tangent_frame(&b.a);
    let grad = k.gradient(&b.a);
    let g_a_shape =
        DVector::from_fn(frame.len(), |j_idx, _| -2.0 * jpow * frame[j_idx].dot(&grad) / b.lambda);
    let c3_estimate = c3.map(|c| c.c3);
    GradPrediction {
        g_lambda_pred,
        g_a_pred: c3_estimate.map(|c| &g_a_shape * c),
        g_a_shape,
        c3_estimate,
    }
}

/// Result of fitting the undetermined location coefficient `c_3`.
#[derive(Debug, Clone)]
pub struct C3Calibration {
    pub c3: f64,
    /// Relative spread `(max − min)/mean` of the per-λ estimates.
    pub drift: f64,
    pub lambda_window: (f64, f64),
    /// `(λ, c_3(λ))` samples.
    pub samples: Vec<(f64, f64)>,
}

/// Calibrate `c_3` for dimension `n` by regressing quadrature location
/// pairings against `−2 J^{(2n−4)/(n−4)} ∇K(a)/λ` over a λ-decade, at unit
/// `‖·‖_P` norm. The standard setup uses `K = 1 + x_1/10` and a bubble
/// centered on the equator of the `x_1` axis, where `|∇K| = 1/10` exactly.
pub fn calibrate_c3(dim: Dim, quad_budget: usize) -> Result<C3Calibration> {
    let consts = bubble_constants(dim)?;
    let mut lin = DVector::zeros(dim.ambient());
    lin[0] = 0.1;
    let k = KField::affine(1.0, lin);
    let a = Point::basis(dim, 1);
    let alpha = unit_norm_alpha(&consts);
    let lambdas = [100.0, 178.0, 316.0, 562.0, 1000.0];
    let mut samples = Vec::with_capacity(lambdas.len());
    for &lam in &lambdas {
        let b = Bubble::new(a.clone(), lam)?;
        let quad = build_quadrature(dim, Some((&a, lam)), quad_budget)?;
        let pair = grad_j_pairings(&b, alpha, &k, dim, &quad)?;
        let config = Configuration::single(alpha, a.clone(), lam, dim)?;
        let j = j_value(&config, &k, &quad)?;
        let jpow = j.powf((2.0 * dim.nf() - 4.0) / (dim.nf() - 4.0));
        let grad = k.gradient(&a);
        let gnorm = grad.norm();
        let frame = tangent_frame(&a);
        let dir = DVector::from_fn(frame.len(), |i, _| frame[i].dot(&grad) / gnorm);
        let g_par = pair.g_a.dot(&dir);
        samples.push((lam, -g_par * lam / (2.0 * jpow * gnorm)));
    }
    let mean = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
    let max = samples.iter().map(|s| s.1).fold(f64::MIN, f64::max);
    let min = samples.iter().map(|s| s.1).fold(f64::MAX, f64::min);
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::InternalConsistency(format!(
            "c_3 calibration produced a non-positive estimate {mean:e}"
        )));
    }
    Ok(C3Calibration {
        c3: mean,
        drift: (max - min) / mean,
        lambda_window: (lambdas[0], *lambdas.last().unwrap()),
        samples,
    })
}

/// The correction-norm bound
///
/// ```text
/// Σ_i (|∇K(a_i)|/λ_i + 1/λ_i²)
///   + Σ_{i≠j} ε_ij^{min(1, (n+4)/(2(n−4)))} (log ε_ij^{−1})^{min((n−4)/n, (n+4)/(2n))}
/// ```
///
/// returned as a raw value (the non-constructive constant in front is not
/// known, so only relative comparisons are meaningful).
pub fn vbar_bound(config: &Configuration, k: &KField) -> f64 {
    let dim = config.dim;
    let n = dim.nf();
    let mut total = 0.0;
    for p in &config.parts {
        let gnorm = k.gradient(&p.bubble.a).norm();
        total += gnorm / p.bubble.lambda + 1.0 / (p.bubble.lambda * p.bubble.lambda);
    }
    let e_exp = 1.0f64.min((n + 4.0) / (2.0 * (n - 4.0)));
    let log_exp = ((n - 4.0) / n).min((n + 4.0) / (2.0 * n));
    for i in 0..config.parts.len() {
        for j in 0..config.parts.len() {
            if i == j {
                continue;
            }
            let eps = epsilon_ij(&config.parts[i].bubble, &config.parts[j].bubble, dim);
            if eps > 0.0 {
                // the ε → 0 limit of ε^e (log 1/ε)^l is 0; guard the log
                total += eps.powf(e_exp) * (1.0 / eps).ln().max(0.0).powf(log_exp);
            }
        }
    }
    total
}

/// The exponents used by [`vbar_bound`], exposed for the arithmetic checks.
pub fn vbar_exponents(dim: Dim) -> (f64, f64) {
    let n = dim.nf();
    (1.0f64.min((n + 4.0) / (2.0 * (n - 4.0))), ((n - 4.0) / n).min((n + 4.0) / (2.0 * n)))
}

/// Normal form of the reduced functional near a blow-up point `y` with
/// `−ΔK(y) > 0`:
///
/// ```text
/// Ψ(ā, λ̄) = S_n^{4/n} / K(ā)^{(n−4)/n} · (1 − (4(n−4)/(n S_n)) c_2 (1−η)/λ̄² · ΔK(y)/K(y))
/// ```
pub fn normal_form_psi(
    a_bar: &Point,
    l_bar: f64,
    k: &KField,
    y: &Point,
    eta_nf: f64,
    consts: &BubbleConstants,
    dim: Dim,
) -> Result<f64> {
    let lap = k.laplacian(y);
    if -lap <= 0.0 {
        return Err(Error::Domain(format!(
            "normal form requires −ΔK(y) > 0 at the blow-up point, got ΔK = {lap:e}"
        )));
    }
    if !(0.0 < eta_nf && eta_nf < 1.0) {
        return Err(Error::Domain("η must lie in (0, 1)".into()));
    }
    if l_bar <= 0.0 {
        return Err(Error::Domain("λ̄ must be positive".into()));
    }
    let n = dim.nf();
    let head = consts.s_n.powf(4.0 / n) / k.value(a_bar).powf((n - 4.0) / n);
    let correction = 4.0 * (n - 4.0) / (n * consts.s_n) * consts.c_2 * (1.0 - eta_nf)
        / (l_bar * l_bar)
        * lap
        / k.value(y);
    Ok(head * (1.0 - correction))
}

/// Least-squares slope of `log y` against `log x`, skipping non-positive
/// values. Used for remainder-order verification.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let m = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let denom = m * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return None;
    }
    Some((m * sxy - sx * sy) / denom)
}

// The positive-part neighborhood measure `V_η` lives with the axisymmetric
// discretisation that realises its argument:
pub use crate::axisym::v_eta_measure;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn d5() -> Dim {
        Dim::new(5).unwrap()
    }

    fn k_affine_x6(slope: f64) -> KField {
        let mut lin = DVector::zeros(6);
        lin[5] = slope;
        KField::affine(1.0, lin)
    }

    #[test]
    fn j_of_exact_solution_is_sn_to_the_4n() {
        let dim = d5();
        let consts = bubble_constants(dim).unwrap();
        let k = KField::Constant(1.0);
        let a = Point::north(dim);
        let quad = build_quadrature(dim, Some((&a, 13.0)), 150_000).unwrap();
        for alpha in [0.3, 1.0, 4.0] {
            let config = Configuration::single(alpha, a.clone(), 13.0, dim).unwrap();
            let j = j_value(&config, &k, &quad).unwrap();
            assert_relative_eq!(j, consts.s_n.powf(0.8), max_relative = 1e-6);
        }
    }

    #[test]
    fn j_scales_with_constant_k() {
        let dim = d5();
        let consts = bubble_constants(dim).unwrap();
        let a = Point::north(dim);
        let quad = build_quadrature(dim, Some((&a, 5.0)), 150_000).unwrap();
        let config = Configuration::single(1.0, a.clone(), 5.0, dim).unwrap();
        let j2 = j_value(&config, &KField::Constant(2.0), &quad).unwrap();
        let expect = 2f64.powf(-0.2) * consts.s_n.powf(0.8);
        assert_relative_eq!(j2, expect, max_relative = 1e-6);
    }

    #[test]
    fn j_is_scale_invariant_in_u() {
        let dim = d5();
        let k = k_affine_x6(0.1);
        let a = Point::north(dim);
        let quad = build_quadrature(dim, Some((&a, 20.0)), 120_000).unwrap();
        let base = j_value(&Configuration::single(1.0, a.clone(), 20.0, dim).unwrap(), &k, &quad)
            .unwrap();
        for t in [0.5, 2.0, 10.0] {
            let j = j_value(&Configuration::single(t, a.clone(), 20.0, dim).unwrap(), &k, &quad)
                .unwrap();
            assert_relative_eq!(j, base, max_relative = 1e-12);
        }
    }

    #[test]
    fn expansion_constant_k_degenerates() {
        let dim = d5();
        let consts = bubble_constants(dim).unwrap();
        let config = Configuration::single(1.0, Point::north(dim), 50.0, dim).unwrap();
        let b = expansion_j(&config, &KField::Constant(1.0), &consts);
        assert_eq!(b.laplacian_term, 0.0);
        assert_eq!(b.interaction_term, 0.0);
        assert_relative_eq!(b.total, consts.s_n.powf(0.8), max_relative = 1e-14);
    }

    #[test]
    fn expansion_remainder_decays_superquadratically() {
        // single bubble at the critical point of K = 1 + 0.1 x_6 (the pole):
        // |J_quad − expansion| must decay faster than λ^{−2}
        let dim = d5();
        let consts = bubble_constants(dim).unwrap();
        let k = k_affine_x6(0.1);
        let a = Point::north(dim);
        let mut pts = Vec::new();
        for &lam in &[10.0, 30.0, 90.0] {
            let quad = build_quadrature(dim, Some((&a, lam)), 150_000).unwrap();
            let config = Configuration::single(1.0, a.clone(), lam, dim).unwrap();
            let j = j_value(&config, &k, &quad).unwrap();
            let e = expansion_j(&config, &k, &consts);
            pts.push((lam, (j - e.total).abs()));
        }
        let slope = -fit_loglog_slope(&pts).unwrap();
        assert!(slope >= 2.2, "remainder slope {slope} too shallow: {pts:?}");
    }

    #[test]
    fn two_bubble_expansion_tracks_quadrature() {
        // antipodal pair at λ = 50: the interaction term has the sign the
        // bracket dictates, and the expansion matches J within its own error
        // budget ε + λ^{−2}
        let dim = d5();
        let consts = bubble_constants(dim).unwrap();
        let k = KField::Constant(1.0);
        let a = Point::north(dim);
        let lam = 50.0;
        let parts = vec![
            crate::bubbles::WeightedBubble::new(1.0, Bubble::new(a.clone(), lam).unwrap())
                .unwrap(),
            crate::bubbles::WeightedBubble::new(1.0, Bubble::new(a.antipode(), lam).unwrap())
                .unwrap(),
        ];
        let config = Configuration::new(parts, dim).unwrap();
        let quad = build_quadrature(dim, Some((&a, lam)), 250_000).unwrap();
        let j = j_value(&config, &k, &quad).unwrap();
        let e = expansion_j(&config, &k, &consts);
        let eps = epsilon_ij(&config.parts[0].bubble, &config.parts[1].bubble, dim);
        // equal weights, equal K: bracket = 1/(2 S_n) − 2/(2 S_n) < 0
        assert!(e.interaction_term < 0.0);
        let budget = eps + 1.0 / (lam * lam);
        assert!(
            (j - e.total).abs() < budget,
            "two-bubble expansion off: J = {j}, total = {}, budget = {budget:e}",
            e.total
        );
    }

    #[test]
    fn gradient_vanishes_on_the_solution_manifold() {
        let dim = d5();
        let k = KField::Constant(1.0);
        let a = Point::north(dim);
        let lam = 10.0;
        let quad = build_quadrature(dim, Some((&a, lam)), 150_000).unwrap();
        let b = Bubble::new(a, lam).unwrap();
        let consts = bubble_constants(dim).unwrap();
        let g = grad_j_pairings(&b, unit_norm_alpha(&consts), &k, dim, &quad).unwrap();
        assert!(g.g_lambda.abs() < 1e-8, "g_lambda = {:e}", g.g_lambda);
        assert!(g.g_a.norm() < 1e-8, "g_a = {:e}", g.g_a.norm());
    }

    #[test]
    fn g_lambda_matches_directional_finite_difference() {
        let dim = d5();
        let k = k_affine_x6(0.1);
        let a = Point::north(dim);
        let lam = 30.0;
        let alpha = 1.0;
        let quad = build_quadrature(dim, Some((&a, lam)), 150_000).unwrap();
        let b = Bubble::new(a.clone(), lam).unwrap();
        let g = grad_j_pairings(&b, alpha, &k, dim, &quad).unwrap();
        // J along λ ↦ λ e^t differentiates to ⟨∇J, α λ ∂λ δ̃⟩ = α g_lambda
        let h: f64 = 1e-4;
        let jp = {
            let lamp = lam * h.exp();
            let quad = build_quadrature(dim, Some((&a, lamp)), 150_000).unwrap();
            j_value(&Configuration::single(alpha, a.clone(), lamp, dim).unwrap(), &k, &quad)
                .unwrap()
        };
        let jm = {
            let lamm = lam * (-h).exp();
            let quad = build_quadrature(dim, Some((&a, lamm)), 150_000).unwrap();
            j_value(&Configuration::single(alpha, a.clone(), lamm, dim).unwrap(), &k, &quad)
                .unwrap()
        };
        let fd = (jp - jm) / (2.0 * h);
        assert!(
            (fd - alpha * g.g_lambda).abs() / fd.abs() < 1e-4,
            "fd {fd:e} vs α·g_lambda {:e}",
            alpha * g.g_lambda
        );
    }

    #[test]
    fn predicted_g_lambda_vanishes_with_flat_laplacian() {
        let dim = d5();
        let consts = bubble_constants(dim).unwrap();
        let k = KField::Constant(3.0);
        let b = Bubble::new(Point::north(dim), 40.0).unwrap();
        let pred = expansion_grad(&b, 1.0, &k, &consts, dim, None);
        assert_eq!(pred.g_lambda_pred, 0.0);
        assert!(pred.c3_estimate.is_none());
        assert!(pred.g_a_pred.is_none());
    }

    #[test]
    fn gradient_expansion_ratio_approaches_one() {
        let dim = d5();
        let consts = bubble_constants(dim).unwrap();
        let k = k_affine_x6(0.1);
        let a = Point::north(dim);
        let alpha = unit_norm_alpha(&consts);
        let mut prev_dev = f64::INFINITY;
        for &lam in &[50.0, 200.0] {
            let quad = build_quadrature(dim, Some((&a, lam)), 150_000).unwrap();
            let b = Bubble::new(a.clone(), lam).unwrap();
            let g = grad_j_pairings(&b, alpha, &k, dim, &quad).unwrap();
            let pred = expansion_grad(&b, alpha, &k, &consts, dim, None);
            let dev = (g.g_lambda / pred.g_lambda_pred - 1.0).abs();
            assert!(dev < prev_dev, "deviation not shrinking at λ = {lam}");
            prev_dev = dev;
        }
        assert!(prev_dev < 0.01, "ratio deviation {prev_dev:e}");
    }

    #[test]
    fn vbar_bound_examples() {
        let dim = d5();
        let (e_exp, log_exp) = vbar_exponents(dim);
        assert_eq!(e_exp, 1.0); // min(1, 9/2)
        assert_eq!(log_exp, 0.2); // min(1/5, 9/10)

        let k = KField::Constant(2.0);
        let config = Configuration::single(1.0, Point::north(dim), 10.0, dim).unwrap();
        assert_relative_eq!(vbar_bound(&config, &k), 0.01, epsilon = 1e-15);

        // doubling every λ strictly shrinks the bound
        let config2 = Configuration::single(1.0, Point::north(dim), 20.0, dim).unwrap();
        let k_var = k_affine_x6(0.1);
        assert!(vbar_bound(&config2, &k_var) < vbar_bound(&config, &k_var));
    }

    #[test]
    fn normal_form_limits_and_monotonicity() {
        let dim = d5();
        let consts = bubble_constants(dim).unwrap();
        let k = k_affine_x6(0.1);
        let y = Point::north(dim); // ΔK(y) = −0.5, so −ΔK > 0
        let head = consts.s_n.powf(0.8) / k.value(&y).powf(0.2);
        let psi_inf = normal_form_psi(&y, 1e9, &k, &y, 0.1, &consts, dim).unwrap();
        assert_relative_eq!(psi_inf, head, max_relative = 1e-12);

        // ΔK(y) < 0 forces Ψ strictly decreasing in λ̄
        let psi10 = normal_form_psi(&y, 10.0, &k, &y, 0.1, &consts, dim).unwrap();
        let psi20 = normal_form_psi(&y, 20.0, &k, &y, 0.1, &consts, dim).unwrap();
        assert!(psi10 > psi20 && psi20 > psi_inf);

        // the λ̄ = 10 gap over the asymptote is a positive multiple of 1/100
        let gap = psi10 - head;
        let coef = head * 4.0 * (dim.nf() - 4.0) / (dim.nf() * consts.s_n)
            * consts.c_2
            * 0.9
            * 0.5
            / k.value(&y);
        assert_relative_eq!(gap, coef / 100.0, max_relative = 1e-12);

        // at the south pole −ΔK < 0 and the normal form is not claimed
        let s = y.antipode();
        assert!(normal_form_psi(&s, 10.0, &k, &s, 0.1, &consts, dim).is_err());
    }

    #[test]
    fn slope_fit_recovers_power_laws() {
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&x: &f64| (x, 3.0 * x.powf(-2.5)))
            .collect();
        assert_relative_eq!(fit_loglog_slope(&pts).unwrap(), -2.5, epsilon = 1e-12);
    }
}
