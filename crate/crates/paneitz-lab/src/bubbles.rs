//! The standard bubble family on `S^n`, its parameter derivatives, the
//! interaction coefficient `ε_ij`, the integral constants `S_n`, `c_1`, `c_2`
//! and the pairing `⟨·,·⟩_P` reduced to plain `L²` integrals.
//!
//! For `K ≡ 1` the fourth-order equation admits the explicit solutions
//!
//! ```text
//! δ̃_(a,λ)(x) = β_n 2^{−(n−4)/2} λ^{(n−4)/2} / (1 + ((λ²−1)/2)(1 − cos d(x,a)))^{(n−4)/2}
//! ```
//!
//! with `β_n = [(n−4)(n−2)n(n+2)]^{(n−4)/8}`. Because `P δ̃ = δ̃^{(n+4)/(n−4)}`
//! holds exactly, every pairing against bubbles and their parameter
//! derivatives reduces to an `L²` integral — no fourth-order numerical
//! differentiation is ever performed on the sphere.

use crate::sphere::{
    beta_half, constants, gauss_gegenbauer, sphere_volume, tangent_frame, Dim, Point,
    QuadratureRule,
};
use crate::{Error, Result};
use nalgebra::DVector;
use std::f64::consts::PI;

/// A single concentration profile: center `a ∈ S^n` and scale `λ > 0`.
#[derive(Debug, Clone)]
pub struct Bubble {
    pub a: Point,
    pub lambda: f64,
}

impl Bubble {
    pub fn new(a: Point, lambda: f64) -> Result<Self> {
        if lambda <= 0.0 || !lambda.is_finite() {
            return Err(Error::Domain(format!("bubble scale λ = {lambda} must be positive")));
        }
        Ok(Bubble { a, lambda })
    }
}

/// `α_i δ̃_(a_i, λ_i)` — one summand of a finite-dimensional configuration.
#[derive(Debug, Clone)]
pub struct WeightedBubble {
    pub alpha: f64,
    pub bubble: Bubble,
}

impl WeightedBubble {
    pub fn new(alpha: f64, bubble: Bubble) -> Result<Self> {
        if alpha <= 0.0 || !alpha.is_finite() {
            return Err(Error::Domain(format!("bubble weight α = {alpha} must be positive")));
        }
        Ok(WeightedBubble { alpha, bubble })
    }
}

/// A sum `Σ α_i δ̃_i` of weighted bubbles — the finite-dimensional reduction
/// variables. The orthogonal correction `v` lives only in the axisymmetric
/// discretisation.
#[derive(Debug, Clone)]
pub struct Configuration {
    pub parts: Vec<WeightedBubble>,
    pub dim: Dim,
}

impl Configuration {
    pub fn new(parts: Vec<WeightedBubble>, dim: Dim) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Domain("a configuration needs at least one bubble".into()));
        }
        Ok(Configuration { parts, dim })
    }

    pub fn single(alpha: f64, a: Point, lambda: f64, dim: Dim) -> Result<Self> {
        Configuration::new(vec![WeightedBubble::new(alpha, Bubble::new(a, lambda)?)?], dim)
    }

    /// Evaluate `Σ α_i δ̃_i` at `x`.
    pub fn eval(&self, x: &Point) -> f64 {
        self.parts.iter().map(|p| p.alpha * bubble_eval(&p.bubble, x, self.dim)).sum()
    }

    /// Interaction coefficients `ε_ij` for all ordered pairs `i ≠ j`.
    pub fn epsilon_matrix(&self) -> Vec<Vec<f64>> {
        let p = self.parts.len();
        let mut eps = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    eps[i][j] = epsilon_ij(&self.parts[i].bubble, &self.parts[j].bubble, self.dim);
                }
            }
        }
        eps
    }
}

/// Evaluate `δ̃_(a,λ)` at `x`.
pub fn bubble_eval(b: &Bubble, x: &Point, dim: Dim) -> f64 {
    let s = (dim.nf() - 4.0) / 2.0;
    let t = 1.0 - x.dot(&b.a);
    let denom = 1.0 + 0.5 * (b.lambda * b.lambda - 1.0) * t;
    constants(dim).beta_n * (0.5 * b.lambda / denom).powf(s)
}

/// Scaled parameter derivatives of the bubble at `x`:
/// `λ ∂δ̃/∂λ` and the components of `(1/λ) ∂δ̃/∂a` in the deterministic
/// orthonormal tangent frame at `a` (differentiation along unit-speed
/// geodesics).
pub struct BubbleDerivatives {
    /// `λ ∂δ̃/∂λ (x)`.
    pub d_lambda: f64,
    /// `(1/λ) ∂δ̃/∂a_j (x)` for each frame direction `j`.
    pub d_a: DVector<f64>,
}

pub fn bubble_derivatives(b: &Bubble, x: &Point, dim: Dim) -> BubbleDerivatives {
    bubble_derivatives_in_frame(b, x, dim, &tangent_frame(&b.a))
}

/// Same as [`bubble_derivatives`] with a caller-supplied tangent frame at the
/// bubble center (hot loops compute the frame once).
pub fn bubble_derivatives_in_frame(
    b: &Bubble,
    x: &Point,
    dim: Dim,
    frame: &[DVector<f64>],
) -> BubbleDerivatives {
    let s = (dim.nf() - 4.0) / 2.0;
    let lam = b.lambda;
    let t = 1.0 - x.dot(&b.a);
    let denom = 1.0 + 0.5 * (lam * lam - 1.0) * t;
    let value = bubble_eval(b, x, dim);
    // λ ∂λ B = λ² t, so λ ∂λ δ̃ = s δ̃ (B − λ² t)/B
    let d_lambda = s * value * (denom - lam * lam * t) / denom;
    // ∂_{a,E} (1 − ⟨x,a⟩) = −⟨x, E⟩ along the geodesic through a with speed E
    let coeff = s * (lam * lam - 1.0) / (2.0 * lam) * value / denom;
    let d_a = DVector::from_fn(frame.len(), |j, _| coeff * frame[j].dot(x.coords()));
    BubbleDerivatives { d_lambda, d_a }
}

/// Interaction magnitude between two bubbles:
/// `(λ_i/λ_j + λ_j/λ_i + (λ_i λ_j / 2)(1 − cos d(a_i,a_j)))^{−(n−4)/2}`.
pub fn epsilon_ij(bi: &Bubble, bj: &Bubble, dim: Dim) -> f64 {
    let s = (dim.nf() - 4.0) / 2.0;
    let t = 1.0 - bi.a.dot(&bj.a);
    let bracket = bi.lambda / bj.lambda + bj.lambda / bi.lambda + 0.5 * bi.lambda * bj.lambda * t;
    bracket.powf(-s)
}

// ---------------------------------------------------------------------------
// Integral constants
// ---------------------------------------------------------------------------

/// The three positive constants of the energy expansion, with
///
/// ```text
/// S_n = ∫_{R^n} δ_(0,1)^{2n/(n−4)},
/// c_1 = β_n^{2n/(n−4)} ∫_{R^n} (1+|x|²)^{−(n+4)/2},
/// c_2 = (1/2n) ∫_{R^n} |x|² δ_(0,1)^{2n/(n−4)}.
/// ```
#[derive(Debug, Clone, Copy)]
pub struct BubbleConstants {
    pub s_n: f64,
    pub c_1: f64,
    pub c_2: f64,
}

/// `β_n^{2n/(n−4)}` — the prefactor shared by all three constants.
fn beta_pow(dim: Dim) -> f64 {
    constants(dim).beta_n.powf(dim.crit_exponent())
}

/// Radial integrals `∫_0^∞ r^p (1+r²)^{−e} dr` by panel Gauss–Legendre after
/// the substitution `r = tan ψ` (the integrand becomes `sin^p ψ cos^{2e−p−2} ψ`,
/// analytic on `[0, π/2]`).
fn radial_integral(p: u32, double_e: u32) -> f64 {
    let (nodes, weights) = gauss_gegenbauer(24, 0);
    let mut total = 0.0;
    let n_panels = 8;
    for k in 0..n_panels {
        let a = PI / 2.0 * k as f64 / n_panels as f64;
        let b = PI / 2.0 * (k + 1) as f64 / n_panels as f64;
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        for (t, w) in nodes.iter().zip(weights.iter()) {
            let psi = mid + half * t;
            let cos_pow = f64::from(double_e) - f64::from(p) - 2.0;
            total += w * half * psi.sin().powi(p as i32) * psi.cos().powf(cos_pow);
        }
    }
    total
}

/// Same integral truncated at `r = R` — exposed for tail-decay diagnostics of
/// the `c_2` integrand (`~ r^{1−n}` at infinity).
pub fn c2_radial_truncated(dim: Dim, r_max: f64) -> f64 {
    let (nodes, weights) = gauss_gegenbauer(24, 0);
    let psi_max = r_max.atan();
    let mut total = 0.0;
    let n_panels = 12;
    for k in 0..n_panels {
        let a = psi_max * k as f64 / n_panels as f64;
        let b = psi_max * (k + 1) as f64 / n_panels as f64;
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        for (t, w) in nodes.iter().zip(weights.iter()) {
            let psi = mid + half * t;
            total += w
                * half
                * psi.sin().powi(dim.n() as i32 + 1)
                * psi.cos().powi(dim.n() as i32 - 3);
        }
    }
    total
}

/// Closed Beta-function forms of the three constants.
fn constants_closed_form(dim: Dim) -> BubbleConstants {
    let n = dim.n();
    let omega = sphere_volume(n - 1);
    let bp = beta_pow(dim);
    BubbleConstants {
        s_n: bp * omega * beta_half(n, n) / 2.0,
        c_1: bp * omega * beta_half(n, 4) / 2.0,
        c_2: bp * omega * beta_half(n + 2, n - 2) / (4.0 * dim.nf()),
    }
}

/// Radial-quadrature evaluation of the three constants.
fn constants_by_quadrature(dim: Dim) -> BubbleConstants {
    let n = dim.n();
    let omega = sphere_volume(n - 1);
    let bp = beta_pow(dim);
    BubbleConstants {
        s_n: bp * omega * radial_integral(n - 1, 2 * n),
        c_1: bp * omega * radial_integral(n - 1, n + 4),
        c_2: bp * omega * radial_integral(n + 1, 2 * n) / (2.0 * dim.nf()),
    }
}

/// Compute `S_n`, `c_1`, `c_2` two independent ways — adaptive radial
/// quadrature and Beta-function closed forms — and return the closed-form
/// values after checking agreement to relative `1e−10`.
pub fn bubble_constants(dim: Dim) -> Result<BubbleConstants> {
    let cf = constants_closed_form(dim);
    let quad = constants_by_quadrature(dim);
    for (name, a, b) in [
        ("S_n", cf.s_n, quad.s_n),
        ("c_1", cf.c_1, quad.c_1),
        ("c_2", cf.c_2, quad.c_2),
    ] {
        let rel = (a - b).abs() / a.abs();
        if rel > 1e-10 {
            return Err(Error::InternalConsistency(format!(
                "{name}: Beta closed form {a:.17e} vs radial quadrature {b:.17e} (rel {rel:.3e})"
            )));
        }
    }
    Ok(cf)
}

// ---------------------------------------------------------------------------
// The ⟨·,·⟩_P pairing
// ---------------------------------------------------------------------------

/// Symbolic expressions the pairing reduction accepts: a bubble or one of its
/// scaled parameter derivatives, indexed into a bubble list. The location
/// derivative is taken along direction `j` of the deterministic tangent frame
/// at the bubble's center.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BubbleExpr {
    /// `δ̃_i`
    Bubble(usize),
    /// `λ_i ∂δ̃_i/∂λ_i`
    ScaledLambdaDeriv(usize),
    /// `(1/λ_i) ∂δ̃_i/∂(a_i)_j`
    ScaledLocDeriv(usize, usize),
}

impl BubbleExpr {
    fn index(self) -> usize {
        match self {
            BubbleExpr::Bubble(i)
            | BubbleExpr::ScaledLambdaDeriv(i)
            | BubbleExpr::ScaledLocDeriv(i, _) => i,
        }
    }
}

fn expr_eval(
    bubbles: &[Bubble],
    frames: &[Vec<DVector<f64>>],
    e: BubbleExpr,
    x: &Point,
    dim: Dim,
) -> f64 {
    match e {
        BubbleExpr::Bubble(i) => bubble_eval(&bubbles[i], x, dim),
        BubbleExpr::ScaledLambdaDeriv(i) => {
            bubble_derivatives_in_frame(&bubbles[i], x, dim, &frames[i]).d_lambda
        }
        BubbleExpr::ScaledLocDeriv(i, j) => {
            bubble_derivatives_in_frame(&bubbles[i], x, dim, &frames[i]).d_a[j]
        }
    }
}

/// `P` applied to an expression, via `P δ̃ = δ̃^{(n+4)/(n−4)}` and its
/// parameter derivatives (`P ∂δ̃ = (n+4)/(n−4) δ̃^{8/(n−4)} ∂δ̃`).
fn expr_p_apply(
    bubbles: &[Bubble],
    frames: &[Vec<DVector<f64>>],
    e: BubbleExpr,
    x: &Point,
    dim: Dim,
) -> f64 {
    let i = e.index();
    let val = bubble_eval(&bubbles[i], x, dim);
    match e {
        BubbleExpr::Bubble(_) => val.powf(dim.power()),
        BubbleExpr::ScaledLambdaDeriv(_) => {
            dim.power()
                * val.powf(8.0 / (dim.nf() - 4.0))
                * bubble_derivatives_in_frame(&bubbles[i], x, dim, &frames[i]).d_lambda
        }
        BubbleExpr::ScaledLocDeriv(_, j) => {
            dim.power()
                * val.powf(8.0 / (dim.nf() - 4.0))
                * bubble_derivatives_in_frame(&bubbles[i], x, dim, &frames[i]).d_a[j]
        }
    }
}

/// The pairing `⟨u, h⟩_P = ∫_{S^n} (P u) h` for expressions drawn from the
/// bubble family, reduced to an `L²` quadrature.
///
/// When exactly one side is a plain bubble, `P` is applied to that side (the
/// reduction is cheapest and best conditioned there); the pairing is
/// symmetric either way.
pub fn inner_product_p(
    bubbles: &[Bubble],
    u: BubbleExpr,
    h: BubbleExpr,
    dim: Dim,
    quad: &QuadratureRule,
) -> f64 {
    let frames: Vec<Vec<DVector<f64>>> =
        bubbles.iter().map(|b| tangent_frame(&b.a)).collect();
    let (reduce, other) = match (u, h) {
        (BubbleExpr::Bubble(_), _) => (u, h),
        (_, BubbleExpr::Bubble(_)) => (h, u),
        _ => (u, h),
    };
    quad.integrate(|x| {
        expr_p_apply(bubbles, &frames, reduce, x, dim) * expr_eval(bubbles, &frames, other, x, dim)
    })
}
