//! Geometry of the round sphere `S^n`, dimension constants, curvature-function
//! families with derivative oracles, and concentration-adapted quadrature.
//!
//! Everything downstream works in ambient coordinates: a point of `S^n` is a
//! unit vector in `R^{n+1}`. The stereographic chart convention is fixed once
//! and for all here (the equator of the projection axis maps to the unit
//! sphere of the chart), and every other module inherits it.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::{Error, Result};

/// Ambient-space dimension bookkeeping. Holds `n` with the standing
/// assumption `n ≥ 5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dim(u32);

impl Dim {
    pub fn new(n: u32) -> Result<Self> {
        if n < 5 {
            return Err(Error::Domain(format!("dimension n = {n} but n >= 5 is required")));
        }
        Ok(Dim(n))
    }

    #[inline]
    pub fn n(self) -> u32 {
        self.0
    }

    #[inline]
    pub fn nf(self) -> f64 {
        f64::from(self.0)
    }

    /// Dimension of the ambient Euclidean space, `n + 1`.
    #[inline]
    pub fn ambient(self) -> usize {
        self.0 as usize + 1
    }

    /// Critical Sobolev exponent `2n/(n−4)`.
    #[inline]
    pub fn crit_exponent(self) -> f64 {
        2.0 * self.nf() / (self.nf() - 4.0)
    }

    /// The nonlinearity power `(n+4)/(n−4)`.
    #[inline]
    pub fn power(self) -> f64 {
        (self.nf() + 4.0) / (self.nf() - 4.0)
    }
}

/// A point on `S^n`: a unit vector in `R^{n+1}` (enforced to `1e−12`).
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    coords: DVector<f64>,
}

impl Point {
    /// Wrap an ambient vector, requiring unit norm within `1e−12`.
    pub fn new(coords: DVector<f64>) -> Result<Self> {
        let norm = coords.norm();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "point is not on the sphere: |x| = {norm:.17} differs from 1 by more than 1e-12"
            )));
        }
        Ok(Point { coords })
    }

    /// Normalize an arbitrary nonzero vector onto the sphere.
    pub fn project(coords: DVector<f64>) -> Result<Self> {
        let norm = coords.norm();
        if norm < 1e-14 {
            return Err(Error::Domain("cannot project the zero vector to the sphere".into()));
        }
        Ok(Point { coords: coords / norm })
    }

    /// The `k`-th ambient basis point `e_k` (zero-based).
    pub fn basis(dim: Dim, k: usize) -> Self {
        let mut v = DVector::zeros(dim.ambient());
        v[k] = 1.0;
        Point { coords: v }
    }

    /// North pole `e_{n+1}` — the distinguished axis point used by the
    /// axisymmetric solver and most built-in examples.
    pub fn north(dim: Dim) -> Self {
        Point::basis(dim, dim.ambient() - 1)
    }

    pub fn antipode(&self) -> Self {
        Point { coords: -self.coords.clone() }
    }

    #[inline]
    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    #[inline]
    pub fn dot(&self, other: &Point) -> f64 {
        self.coords.dot(&other.coords)
    }

    /// Walk along the geodesic from `self` in tangent direction `dir`
    /// (assumed unit, orthogonal to `self`) for arclength `t`.
    pub fn geodesic_step(&self, dir: &DVector<f64>, t: f64) -> Point {
        Point { coords: &self.coords * t.cos() + dir * t.sin() }
    }
}

/// Geodesic distance on `S^n`, in `[0, π]`.
///
/// The ambient inner product is clamped to `[−1, 1]` before `arccos`, so
/// coincident and antipodal points are handled exactly.
pub fn geodesic_distance(a: &Point, b: &Point) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

/// Deterministic orthonormal frame of the tangent space at `a`: Gram–Schmidt
/// of the ambient basis vectors projected onto `a^⊥`, keeping the first `n`
/// that survive with norm above `1e−3`.
pub fn tangent_frame(a: &Point) -> Vec<DVector<f64>> {
    let dim = a.coords.len();
    let mut frame: Vec<DVector<f64>> = Vec::with_capacity(dim - 1);
    for k in 0..dim {
        if frame.len() == dim - 1 {
            break;
        }
        let mut v = DVector::zeros(dim);
        v[k] = 1.0;
        v -= a.coords() * a.coords()[k];
        for e in &frame {
            let c = e.dot(&v);
            v -= e * c;
        }
        let norm = v.norm();
        if norm > 1e-3 {
            frame.push(v / norm);
        }
    }
    debug_assert_eq!(frame.len(), dim - 1);
    frame
}

// ---------------------------------------------------------------------------
// Dimension constants
// ---------------------------------------------------------------------------

/// The dimension-dependent constants of the fourth-order operator and the
/// bubble normalizer.
#[derive(Debug, Clone, Copy)]
pub struct Constants {
    /// Coefficient of `−Δ` in `P`: `(n² − 2n − 4)/2`.
    pub c_n: f64,
    /// Zeroth-order coefficient: `n (n² − 4)(n − 4)/16`.
    pub d_n: f64,
    /// Bubble normalizer `[(n−4)(n−2)n(n+2)]^{(n−4)/8}`.
    pub beta_n: f64,
    /// `(n−2)² + 4) / (2(n−1)(n−2))` — general-operator coefficient, kept for
    /// reference only; nothing on the round sphere uses it.
    pub a_n: f64,
    /// `−4/(n−2)` — likewise informational.
    pub b_n: f64,
    /// Total measure of the unit `n`-sphere.
    pub vol_sn: f64,
}

/// Closed-form evaluation of [`Constants`].
pub fn constants(dim: Dim) -> Constants {
    let n = dim.nf();
    Constants {
        c_n: 0.5 * (n * n - 2.0 * n - 4.0),
        d_n: n * (n * n - 4.0) * (n - 4.0) / 16.0,
        beta_n: ((n - 4.0) * (n - 2.0) * n * (n + 2.0)).powf((n - 4.0) / 8.0),
        a_n: ((n - 2.0) * (n - 2.0) + 4.0) / (2.0 * (n - 1.0) * (n - 2.0)),
        b_n: -4.0 / (n - 2.0),
        vol_sn: sphere_volume(dim.n()),
    }
}

/// `c_n² − 4 d_n = 4` as an exact integer identity:
/// `(n² − 2n − 4)² − n(n² − 4)(n − 4) = 16`.
pub fn discriminant_identity_holds(n: u32) -> bool {
    let n = i128::from(n);
    let c2 = (n * n - 2 * n - 4).pow(2);
    let d4 = n * (n * n - 4) * (n - 4);
    c2 - d4 == 16
}

/// `Γ(half/2)` for positive integer `half`, computed exactly by the
/// recursion `Γ(x+1) = xΓ(x)` from `Γ(1/2) = √π` and `Γ(1) = 1`.
pub fn gamma_half(half: u32) -> f64 {
    assert!(half >= 1);
    if half == 1 {
        PI.sqrt()
    } else if half == 2 {
        1.0
    } else {
        (f64::from(half) / 2.0 - 1.0) * gamma_half(half - 2)
    }
}

/// Measure of the unit `k`-sphere `S^k ⊂ R^{k+1}`: `2 π^{(k+1)/2} / Γ((k+1)/2)`.
pub fn sphere_volume(k: u32) -> f64 {
    2.0 * PI.powf((k as f64 + 1.0) / 2.0) / gamma_half(k + 1)
}

/// Euler Beta function at half-integer arguments (`2a`, `2b` are the doubled
/// arguments), exact up to floating-point rounding.
pub fn beta_half(twice_a: u32, twice_b: u32) -> f64 {
    gamma_half(twice_a) * gamma_half(twice_b) / gamma_half(twice_a + twice_b)
}

// ---------------------------------------------------------------------------
// Stereographic chart
// ---------------------------------------------------------------------------

/// Stereographic projection with projection point `pole`. The chart is
/// centered at `−pole` (which maps to the origin) and normalized so that the
/// equator of the pole axis maps to the unit sphere `|y| = 1`.
///
/// Explicitly `y_i = ⟨x, E_i⟩ / (1 − ⟨x, pole⟩)` in the deterministic tangent
/// frame `{E_i}` at the pole.
pub fn stereographic(pole: &Point, x: &Point) -> Result<DVector<f64>> {
    let t = x.dot(pole);
    let denom = 1.0 - t;
    if denom < 1e-14 {
        return Err(Error::ChartSingularity);
    }
    let frame = tangent_frame(pole);
    let mut y = DVector::zeros(frame.len());
    for (i, e) in frame.iter().enumerate() {
        y[i] = e.dot(x.coords()) / denom;
    }
    Ok(y)
}

/// Inverse of [`stereographic`]: `x = (2 Σ y_i E_i + (|y|² − 1) pole) / (1 + |y|²)`.
pub fn stereographic_inverse(pole: &Point, y: &DVector<f64>) -> Point {
    let frame = tangent_frame(pole);
    let y2 = y.norm_squared();
    let mut x = pole.coords() * (y2 - 1.0);
    for (i, e) in frame.iter().enumerate() {
        x += e * (2.0 * y[i]);
    }
    x /= 1.0 + y2;
    Point::project(x).expect("stereographic inverse always lands on the sphere")
}

// ---------------------------------------------------------------------------
// Gauss rules
// ---------------------------------------------------------------------------

/// Gauss nodes and weights for the Gegenbauer weight `(1−t²)^γ` on `[−1, 1]`
/// (γ = 0 is Gauss–Legendre), via Golub–Welsch. `2γ` must be a nonnegative
/// integer so the zeroth moment is exact.
pub fn gauss_gegenbauer(q: usize, twice_gamma: u32) -> (Vec<f64>, Vec<f64>) {
    let g = f64::from(twice_gamma) / 2.0;
    // mu0 = ∫ (1−t²)^γ dt = √π Γ(γ+1)/Γ(γ+3/2)
    let mu0 = PI.sqrt() * gamma_half(twice_gamma + 2) / gamma_half(twice_gamma + 3);
    let mut jac = DMatrix::zeros(q, q);
    for k in 1..q {
        let kf = k as f64;
        // monic Jacobi (α = β = γ) recurrence coefficient
        let b = 4.0 * kf * (kf + g).powi(2) * (kf + 2.0 * g)
            / ((2.0 * kf + 2.0 * g).powi(2) * (2.0 * kf + 2.0 * g + 1.0) * (2.0 * kf + 2.0 * g - 1.0));
        let sb = b.sqrt();
        jac[(k - 1, k)] = sb;
        jac[(k, k - 1)] = sb;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..q)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Gauss–Legendre rule mapped to `[a, b]`.
fn gauss_legendre_on(q: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (t, w) = gauss_gegenbauer(q, 0);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        t.iter().map(|ti| mid + half * ti).collect(),
        w.iter().map(|wi| wi * half).collect(),
    )
}

// ---------------------------------------------------------------------------
// Angular rules on S^{m−1}
// ---------------------------------------------------------------------------

/// Nodes (unit vectors in `R^m`) and weights summing to `ω_{m−1}`.
struct AngularRule {
    nodes: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

/// Product Gauss–Gegenbauer rule on `S^{m−1}` via the recursive spherical
/// parametrization; exact for polynomials of degree `≤ 2q−1`.
fn angular_product(m: usize, q: usize) -> AngularRule {
    // angle k = 1..m−2 has weight sin^{m−1−k}, i.e. Gegenbauer γ = (m−2−k)/2
    let per_angle: Vec<(Vec<f64>, Vec<f64>)> =
        (1..=m - 2).map(|k| gauss_gegenbauer(q, (m - 2 - k) as u32)).collect();
    let n_phi = (2 * q).max(4);
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    // tensor product over the t-angles, then the periodic angle φ
    let mut idx = vec![0usize; m - 2];
    loop {
        let mut w = 1.0;
        let mut sin_prod = 1.0;
        let mut coords = vec![0.0; m];
        for (k, &i) in idx.iter().enumerate() {
            let t = per_angle[k].0[i];
            w *= per_angle[k].1[i];
            coords[k] = sin_prod * t;
            sin_prod *= (1.0 - t * t).max(0.0).sqrt();
        }
        for j in 0..n_phi {
            let phi = 2.0 * PI * (j as f64 + 0.5) / n_phi as f64;
            let mut c = coords.clone();
            c[m - 2] = sin_prod * phi.cos();
            c[m - 1] = sin_prod * phi.sin();
            nodes.push(DVector::from_vec(c));
            weights.push(w * 2.0 * PI / n_phi as f64);
        }
        // advance the multi-index
        let mut k = 0;
        loop {
            if k == idx.len() {
                return AngularRule { nodes, weights };
            }
            idx[k] += 1;
            if idx[k] < q {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Degree-5 fully symmetric rule on `S^{m−1}` with positive weights:
/// the orbit `±e_i` (weight `ω/(m(m+2))`) plus the scaled hypercube vertices
/// `(±1, …, ±1)/√m` (weight `ω·m/(2^m (m+2))`). Cheap enough for large `m`,
/// and exact on every integrand whose angular dependence has degree ≤ 5.
fn angular_orbit_degree5(m: usize) -> AngularRule {
    let omega = sphere_volume(m as u32 - 1);
    let mf = m as f64;
    let w_axis = omega / (mf * (mf + 2.0));
    let w_cube = omega * mf / (2f64.powi(m as i32) * (mf + 2.0));
    let mut nodes = Vec::with_capacity(2 * m + (1 << m));
    let mut weights = Vec::with_capacity(nodes.capacity());
    for i in 0..m {
        for s in [1.0, -1.0] {
            let mut v = DVector::zeros(m);
            v[i] = s;
            nodes.push(v);
            weights.push(w_axis);
        }
    }
    let scale = 1.0 / mf.sqrt();
    for mask in 0u64..(1 << m) {
        let v = DVector::from_fn(m, |i, _| if mask >> i & 1 == 1 { -scale } else { scale });
        nodes.push(v);
        weights.push(w_cube);
    }
    AngularRule { nodes, weights }
}

// ---------------------------------------------------------------------------
// Quadrature on S^n
// ---------------------------------------------------------------------------

/// Concentration metadata attached to an adapted rule.
#[derive(Debug, Clone)]
pub struct ConcentrationMeta {
    pub center: Point,
    pub lambda: f64,
    /// Clustering scale used near the antipode (for two-bubble integrands
    /// with a nearly antipodal partner).
    pub lambda_far: f64,
}

/// A quadrature rule on `S^n`: explicit nodes with positive weights summing
/// to the sphere volume.
///
/// The structure is polar around an axis point: geodesic-radius panels with
/// Gauss–Legendre nodes, clustered geometrically at the axis with scale
/// `1/λ` when concentration metadata is present, tensored with a
/// deterministic angular rule on `S^{n−1}` (product Gauss for `n ≤ 6`, a
/// degree-5 symmetric orbit rule for larger `n`).
pub struct QuadratureRule {
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
    pub concentration: Option<ConcentrationMeta>,
}

impl std::fmt::Debug for QuadratureRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "QuadratureRule {{ nodes: {}, concentration: {:?} }}", self.nodes.len(), self.concentration)
    }
}

/// Smallest budget [`build_quadrature`] accepts for dimension `n`.
pub fn min_quadrature_budget(dim: Dim) -> usize {
    40 * angular_count_lower_bound(dim.n() as usize)
}

fn angular_count_lower_bound(m: usize) -> usize {
    if m <= 6 {
        3usize.pow(m as u32 - 2) * 6
    } else {
        2 * m + (1 << m)
    }
}

/// Build a quadrature rule with roughly `budget` nodes.
///
/// With `concentration = Some((a, λ))` the radial panels cluster at geodesic
/// distance `~1/λ` from `a` (and symmetrically at the antipode, so integrands
/// with a second bubble near `−a` stay resolved). Without concentration the
/// rule is a uniform polar product around the north pole.
///
/// Budgets below [`min_quadrature_budget`] are refused.
pub fn build_quadrature(
    dim: Dim,
    concentration: Option<(&Point, f64)>,
    budget: usize,
) -> Result<QuadratureRule> {
    let required = min_quadrature_budget(dim);
    if budget < required {
        return Err(Error::BudgetTooSmall { given: budget, required });
    }
    let m = dim.n() as usize;
    let (axis, lam) = match concentration {
        Some((a, l)) => {
            if l <= 0.0 {
                return Err(Error::Domain("concentration scale λ must be positive".into()));
            }
            (a.clone(), l)
        }
        None => (Point::north(dim), 1.0),
    };

    // Radial panels: geometric doubling from both poles toward the equator.
    let scale = (1.0 / lam).min(PI / 8.0);
    let mut breaks = vec![0.0];
    let mut h = scale;
    while *breaks.last().unwrap() + h < PI / 2.0 {
        let next = breaks.last().unwrap() + h;
        breaks.push(next);
        h *= 2.0;
    }
    breaks.push(PI / 2.0);
    let mut all_breaks = breaks.clone();
    for b in breaks.iter().rev().skip(1) {
        all_breaks.push(PI - b);
    }
    let n_panels = all_breaks.len() - 1;

    // Split the budget: favour the radial direction (it carries the
    // concentration), then pick the angular order from what is left.
    let mut q_ang = if m <= 6 { 10usize } else { 0 };
    let mut ang = loop {
        let ang = if m <= 6 { angular_product(m, q_ang) } else { angular_orbit_degree5(m) };
        let q_rad_try = budget / (ang.nodes.len() * n_panels);
        if m > 6 || q_rad_try >= 6 || q_ang == 3 {
            break ang;
        }
        q_ang -= 1;
    };
    let q_rad = (budget / (ang.nodes.len() * n_panels)).clamp(6, 24);

    // Orient the angular rule in the tangent frame at the axis point.
    let frame = tangent_frame(&axis);
    let nf = dim.nf();
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for p in 0..n_panels {
        let (ts, ws) = gauss_legendre_on(q_rad, all_breaks[p], all_breaks[p + 1]);
        for (theta, w_rad) in ts.iter().zip(ws.iter()) {
            let sin_t = theta.sin();
            let radial_weight = w_rad * sin_t.powf(nf - 1.0);
            let cos_t = theta.cos();
            for (dir, w_ang) in ang.nodes.iter_mut().zip(ang.weights.iter()) {
                let mut x = axis.coords() * cos_t;
                for (i, e) in frame.iter().enumerate() {
                    x += e * (sin_t * dir[i]);
                }
                nodes.push(Point::project(x).expect("polar node is on the sphere"));
                weights.push(radial_weight * w_ang);
            }
        }
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        concentration: concentration.map(|(a, l)| ConcentrationMeta {
            center: a.clone(),
            lambda: l,
            lambda_far: l,
        }),
    })
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrate `f` over `S^n`. Deterministic compensated summation.
    pub fn integrate<F: Fn(&Point) -> f64>(&self, f: F) -> f64 {
        let mut sum = 0.0;
        let mut comp = 0.0;
        for (x, w) in self.nodes.iter().zip(self.weights.iter()) {
            let term = w * f(x);
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum
    }
}

// ---------------------------------------------------------------------------
// Curvature fields
// ---------------------------------------------------------------------------

/// A Gaussian bump summand `h·exp(−|x−c|²/(2w²))` in ambient coordinates.
#[derive(Clone)]
pub struct GaussBump {
    pub height: f64,
    pub center: Point,
    pub width: f64,
}

/// A compactly supported quadratic correction in normal coordinates around a
/// point, used by the Laplacian-sign-flipping perturbation. The correction is
/// `χ(θ)·½ Σ_k μ_k s_k²` with `s_k` the normal coordinate along `frame[k]`
/// and `χ(θ) = (1 − (θ/ρ)²)⁴` on `θ < ρ` (a `C³` bump).
#[derive(Clone)]
pub struct QuadPatch {
    pub center: Point,
    pub rho: f64,
    pub frame: Vec<DVector<f64>>,
    pub mu: Vec<f64>,
}

/// The prescribed curvature function `K` with derivative oracles.
///
/// Built-in families are analytic (values and ambient gradients in closed
/// form); `Custom` fields fall back to central finite differences and carry a
/// warning flag. All fields are assumed `C³`.
#[derive(Clone)]
pub enum KField {
    Constant(f64),
    /// `c0 + ⟨l, x⟩ + xᵀ Q x` restricted to the sphere (`Q` symmetric).
    AmbientPoly { c0: f64, linear: DVector<f64>, quad: DMatrix<f64> },
    BumpSum { base: f64, bumps: Vec<GaussBump> },
    Perturbed { base: Box<KField>, patches: Vec<QuadPatch> },
    Custom(Arc<dyn Fn(&Point) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for KField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KField::Constant(c) => write!(f, "KField::Constant({c})"),
            KField::AmbientPoly { c0, .. } => write!(f, "KField::AmbientPoly {{ c0: {c0}, .. }}"),
            KField::BumpSum { base, bumps } => {
                write!(f, "KField::BumpSum {{ base: {base}, bumps: {} }}", bumps.len())
            }
            KField::Perturbed { patches, .. } => {
                write!(f, "KField::Perturbed {{ patches: {} }}", patches.len())
            }
            KField::Custom(_) => write!(f, "KField::Custom(..)"),
        }
    }
}

/// `θ/sin θ`, stable near `θ = 0`.
fn theta_over_sin(theta: f64) -> f64 {
    if theta < 1e-4 {
        1.0 + theta * theta / 6.0 + 7.0 * theta.powi(4) / 360.0
    } else {
        theta / theta.sin()
    }
}

/// Derivative of `θ/sin θ`.
fn theta_over_sin_prime(theta: f64) -> f64 {
    if theta < 1e-4 {
        theta / 3.0 + 7.0 * theta.powi(3) / 90.0
    } else {
        (theta.sin() - theta * theta.cos()) / theta.sin().powi(2)
    }
}

fn chi_bump(s: f64) -> f64 {
    if s >= 1.0 {
        0.0
    } else {
        (1.0 - s * s).powi(4)
    }
}

fn chi_bump_prime(s: f64) -> f64 {
    if s >= 1.0 {
        0.0
    } else {
        -8.0 * s * (1.0 - s * s).powi(3)
    }
}

impl QuadPatch {
    fn value(&self, x: &Point) -> f64 {
        let theta = geodesic_distance(&self.center, x);
        if theta >= self.rho {
            return 0.0;
        }
        let a = theta_over_sin(theta);
        let s2: f64 = self
            .frame
            .iter()
            .zip(self.mu.iter())
            .map(|(e, &mu)| mu * e.dot(x.coords()).powi(2))
            .sum();
        chi_bump(theta / self.rho) * 0.5 * a * a * s2
    }

    /// Ambient gradient of the patch (as a function of `t = ⟨x, z⟩` and the
    /// frame components `u_k = ⟨x, e_k⟩`).
    fn ambient_grad(&self, x: &Point) -> DVector<f64> {
        let dim = x.coords().len();
        let theta = geodesic_distance(&self.center, x);
        if theta >= self.rho {
            return DVector::zeros(dim);
        }
        let a = theta_over_sin(theta);
        let ap = theta_over_sin_prime(theta);
        let chi = chi_bump(theta / self.rho);
        let chip = chi_bump_prime(theta / self.rho) / self.rho;
        let s2: f64 = self
            .frame
            .iter()
            .zip(self.mu.iter())
            .map(|(e, &mu)| mu * e.dot(x.coords()).powi(2))
            .sum();
        // dθ/dx = −z/sin θ; the coefficient vanishes like θ³, so guard the pole.
        let coef = 0.5 * chip * a * a * s2 + chi * a * ap * s2;
        let mut grad = if theta > 1e-9 {
            self.center.coords() * (coef / theta.sin())
        } else {
            DVector::zeros(dim)
        };
        for (e, &mu) in self.frame.iter().zip(self.mu.iter()) {
            grad += e * (chi * a * a * mu * e.dot(x.coords()));
        }
        grad
    }
}

impl KField {
    /// Affine field `c0 + Σ l_i x_i`.
    pub fn affine(c0: f64, linear: DVector<f64>) -> Self {
        let d = linear.len();
        KField::AmbientPoly { c0, linear, quad: DMatrix::zeros(d, d) }
    }

    /// Whether derivative oracles fall back to finite differences.
    pub fn uses_finite_differences(&self) -> bool {
        match self {
            KField::Custom(_) => true,
            KField::Perturbed { base, .. } => base.uses_finite_differences(),
            _ => false,
        }
    }

    pub fn value(&self, x: &Point) -> f64 {
        match self {
            KField::Constant(c) => *c,
            KField::AmbientPoly { c0, linear, quad } => {
                c0 + linear.dot(x.coords()) + (x.coords().transpose() * quad * x.coords())[(0, 0)]
            }
            KField::BumpSum { base, bumps } => {
                base + bumps
                    .iter()
                    .map(|b| {
                        let d2 = (x.coords() - b.center.coords()).norm_squared();
                        b.height * (-d2 / (2.0 * b.width * b.width)).exp()
                    })
                    .sum::<f64>()
            }
            KField::Perturbed { base, patches } => {
                base.value(x) + patches.iter().map(|p| p.value(x)).sum::<f64>()
            }
            KField::Custom(f) => f(x),
        }
    }

    /// Ambient gradient of the extension used by each family.
    fn ambient_grad(&self, x: &Point) -> DVector<f64> {
        let dim = x.coords().len();
        match self {
            KField::Constant(_) => DVector::zeros(dim),
            KField::AmbientPoly { linear, quad, .. } => linear + 2.0 * (quad * x.coords()),
            KField::BumpSum { bumps, .. } => {
                let mut g = DVector::zeros(dim);
                for b in bumps {
                    let diff = x.coords() - b.center.coords();
                    let v = b.height * (-diff.norm_squared() / (2.0 * b.width * b.width)).exp();
                    g += diff * (-v / (b.width * b.width));
                }
                g
            }
            KField::Perturbed { base, patches } => {
                let mut g = base.ambient_grad(x);
                for p in patches {
                    g += p.ambient_grad(x);
                }
                g
            }
            KField::Custom(f) => {
                // central differences in ambient coordinates, then the caller projects
                let h = 1e-5;
                DVector::from_fn(dim, |i, _| {
                    let mut xp = x.coords().clone();
                    let mut xm = x.coords().clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let xp = Point::project(xp).unwrap();
                    let xm = Point::project(xm).unwrap();
                    (f(&xp) - f(&xm)) / (2.0 * h)
                })
            }
        }
    }

    fn ambient_hess(&self, x: &Point) -> DMatrix<f64> {
        let dim = x.coords().len();
        match self {
            KField::Constant(_) => DMatrix::zeros(dim, dim),
            KField::AmbientPoly { quad, .. } => 2.0 * quad.clone(),
            KField::BumpSum { bumps, .. } => {
                let mut h = DMatrix::zeros(dim, dim);
                for b in bumps {
                    let diff = x.coords() - b.center.coords();
                    let w2 = b.width * b.width;
                    let v = b.height * (-diff.norm_squared() / (2.0 * w2)).exp();
                    h += (&diff * diff.transpose()) * (v / (w2 * w2));
                    for i in 0..dim {
                        h[(i, i)] -= v / w2;
                    }
                }
                h
            }
            _ => unreachable!("ambient Hessian is only requested for closed-form families"),
        }
    }

    /// Intrinsic gradient: tangential projection of the ambient gradient,
    /// returned as an ambient vector orthogonal to `x`.
    pub fn gradient(&self, x: &Point) -> DVector<f64> {
        let g = self.ambient_grad(x);
        &g - x.coords() * g.dot(x.coords())
    }

    /// Covariant Hessian in the given orthonormal tangent frame:
    /// `H_ij = E_iᵀ D²F E_j − ⟨x, ∇F⟩ δ_ij` for closed-form families,
    /// symmetric differences of the gradient otherwise.
    pub fn hessian_in_frame(&self, x: &Point, frame: &[DVector<f64>]) -> DMatrix<f64> {
        let n = frame.len();
        match self {
            KField::Constant(_) | KField::AmbientPoly { .. } | KField::BumpSum { .. } => {
                let hess = self.ambient_hess(x);
                let radial = self.ambient_grad(x).dot(x.coords());
                DMatrix::from_fn(n, n, |i, j| {
                    let v = (frame[i].transpose() * &hess * &frame[j])[(0, 0)];
                    if i == j {
                        v - radial
                    } else {
                        v
                    }
                })
            }
            KField::Perturbed { .. } | KField::Custom(_) => {
                // second-order differences of the intrinsic gradient along geodesics
                let h = 1e-4;
                let mut m = DMatrix::zeros(n, n);
                for i in 0..n {
                    let xp = x.geodesic_step(&frame[i], h);
                    let xm = x.geodesic_step(&frame[i], -h);
                    let gp = self.gradient(&xp);
                    let gm = self.gradient(&xm);
                    for j in 0..n {
                        m[(i, j)] = (frame[j].dot(&gp) - frame[j].dot(&gm)) / (2.0 * h);
                    }
                }
                // symmetrize: the transport error is antisymmetric to leading order
                for i in 0..n {
                    for j in 0..i {
                        let s = 0.5 * (m[(i, j)] + m[(j, i)]);
                        m[(i, j)] = s;
                        m[(j, i)] = s;
                    }
                }
                m
            }
        }
    }

    /// Laplace–Beltrami of `K` at `x`:
    /// `Δ_S F = Δ F − xᵀ D²F x − n ⟨x, ∇F⟩` for closed-form families.
    pub fn laplacian(&self, x: &Point) -> f64 {
        let n = x.coords().len() - 1;
        match self {
            KField::Constant(_) => 0.0,
            KField::AmbientPoly { .. } | KField::BumpSum { .. } => {
                let hess = self.ambient_hess(x);
                let grad = self.ambient_grad(x);
                hess.trace()
                    - (x.coords().transpose() * &hess * x.coords())[(0, 0)]
                    - n as f64 * grad.dot(x.coords())
            }
            KField::Perturbed { .. } | KField::Custom(_) => {
                let frame = tangent_frame(x);
                self.hessian_in_frame(x, &frame).trace()
            }
        }
    }

    /// The field `x ↦ K(Rᵀ x)` for an orthogonal `R` (rotates the geometry of
    /// `K` forward by `R`). Only closed-form families rotate.
    pub fn rotated(&self, r: &DMatrix<f64>) -> Result<KField> {
        match self {
            KField::Constant(c) => Ok(KField::Constant(*c)),
            KField::AmbientPoly { c0, linear, quad } => Ok(KField::AmbientPoly {
                c0: *c0,
                linear: r * linear,
                quad: r * quad * r.transpose(),
            }),
            KField::BumpSum { base, bumps } => Ok(KField::BumpSum {
                base: *base,
                bumps: bumps
                    .iter()
                    .map(|b| GaussBump {
                        height: b.height,
                        center: Point::project(r * b.center.coords()).unwrap(),
                        width: b.width,
                    })
                    .collect(),
            }),
            _ => Err(Error::NotImplemented("rotation of perturbed/custom fields".into())),
        }
    }

    /// Check positivity of `K` on the nodes of a rule (assumption `(A0)`).
    pub fn positive_on(&self, quad: &QuadratureRule) -> bool {
        quad.nodes.iter().all(|x| self.value(x) > 0.0)
    }
}

/// Validate a field's derivative oracles against central finite differences
/// at `samples` deterministic points. Returns the worst relative error of
/// (gradient, laplacian).
pub fn derivative_check(dim: Dim, field: &KField, samples: usize, seed: u64) -> (f64, f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut worst_grad: f64 = 0.0;
    let mut worst_lap: f64 = 0.0;
    for _ in 0..samples {
        let x = random_point(dim, &mut rng);
        let frame = tangent_frame(&x);
        let grad = field.gradient(&x);
        let scale = 1.0 + grad.norm();
        for e in &frame {
            let fd = (field.value(&x.geodesic_step(e, h)) - field.value(&x.geodesic_step(e, -h)))
                / (2.0 * h);
            worst_grad = worst_grad.max((fd - grad.dot(e)).abs() / scale);
        }
        // Δ via the sum of second differences along the frame
        let mut lap_fd = 0.0;
        let f0 = field.value(&x);
        for e in &frame {
            lap_fd += (field.value(&x.geodesic_step(e, h)) + field.value(&x.geodesic_step(e, -h))
                - 2.0 * f0)
                / (h * h);
        }
        let lap = field.laplacian(&x);
        worst_lap = worst_lap.max((lap_fd - lap).abs() / (1.0 + lap.abs()));
    }
    (worst_grad, worst_lap)
}

/// Uniform random point on `S^n` (Gaussian direction method).
pub fn random_point<R: rand::Rng>(dim: Dim, rng: &mut R) -> Point {
    loop {
        let v = DVector::from_fn(dim.ambient(), |_, _| {
            // Box–Muller; avoids a rand_distr dependency for one Gaussian
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
        });
        if v.norm() > 1e-6 {
            return Point::project(v).unwrap();
        }
    }
}

/// A deterministic random rotation of `R^{n+1}` (QR of a Gaussian matrix).
pub fn random_rotation<R: rand::Rng>(dim: Dim, rng: &mut R) -> DMatrix<f64> {
    let d = dim.ambient();
    let a = DMatrix::from_fn(d, d, |_, _| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    });
    let qr = a.qr();
    let mut q = qr.q();
    // fix signs so the result is a proper deterministic orthogonal matrix
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}
