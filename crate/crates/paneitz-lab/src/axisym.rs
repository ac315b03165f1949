//! Axially symmetric reduction: `u = u(θ)` on a collocation grid, the
//! discretised operator `P = Δ² − c_n Δ + d_n`, a damped Newton solver for
//! the full equation, the negative-part machinery, and single-bubble fitting.
//!
//! # Discretisation
//!
//! On zonal functions the Laplace–Beltrami operator reduces to
//! `Δu = u'' + (n−1) cot θ · u'`. Smooth axisymmetric functions are even
//! around both poles, so they are cosine series in θ; to resolve bubbles of
//! scale `1/λ` near a pole on a few hundred nodes the angle is reparametrised
//! through the clustering map
//!
//! ```text
//! θ = g(τ) = τ − a sin τ,        g'(0) = 1 − a,
//! ```
//!
//! (default `a = 0.8`, pole nodes 5× denser than uniform), and the basis is
//! `cos(kτ)` on the uniform grid `τ_j = jπ/M`. Composing with the odd map `g`
//! preserves evenness at both poles, so every representable function is
//! pole-regular by construction, and `Δ` applied to a basis mode has a closed
//! form. At the poles the operator takes its regular limit `Δu = n·u''(θ)`.
//!
//! Operator applications go through the cosine transform with the
//! coefficients truncated at the rounding floor (relative `1e−14`): the
//! fourth-order symbol reaches `~(n k²/g'(0)²)²` at the poles and would
//! otherwise amplify transform noise on empty modes into `O(1)` garbage. The
//! unfiltered operator matrix is kept alongside for Newton Jacobians and
//! linear solves, where the collocation system must stay exactly linear.

use crate::bubbles::{bubble_constants, BubbleConstants};
use crate::sphere::{constants, sphere_volume, tangent_frame, Dim, KField, Point};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use std::sync::Arc;

/// Collocation grid for zonal functions on `S^n`, with the discrete
/// Laplacian, the fourth-order operator, and quadrature weights for the
/// volume element `ω_{n−1} sin^{n−1}θ dθ`.
pub struct AxisymGrid {
    pub dim: Dim,
    /// Number of intervals; the grid carries `m + 1` nodes.
    pub m: usize,
    /// Strength of the pole-clustering map `θ = τ − a sin τ`.
    pub map_a: f64,
    pub theta: Vec<f64>,
    /// Quadrature weights (trapezoidal in τ, spectrally accurate for smooth
    /// even integrands).
    pub weights: Vec<f64>,
    /// `Δ[cos kτ]` at node `j` — column `k` holds the mode's Laplacian values.
    mode_vals: DMatrix<f64>,
    /// `P[cos kτ]` at node `j`, each column evaluated through the filtered
    /// spectral path (the modes are analytic, so the columns are clean).
    p_modes: DMatrix<f64>,
    /// DCT-I analysis matrix: node values → cosine coefficients.
    analysis: DMatrix<f64>,
    /// Synthesis table `cos(kτ_j)`.
    synthesis: DMatrix<f64>,
    /// Collocation matrix of `P`, for linear solves.
    paneitz: DMatrix<f64>,
}

impl std::fmt::Debug for AxisymGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AxisymGrid {{ n: {}, m: {}, map_a: {} }}", self.dim.n(), self.m, self.map_a)
    }
}

impl AxisymGrid {
    pub fn new(dim: Dim, m: usize) -> Result<Arc<Self>> {
        AxisymGrid::with_map(dim, m, 0.8)
    }

    pub fn with_map(dim: Dim, m: usize, map_a: f64) -> Result<Arc<Self>> {
        if m < 16 {
            return Err(Error::Domain(format!("grid needs at least 16 intervals, got {m}")));
        }
        if !(0.0..1.0).contains(&map_a) {
            return Err(Error::Domain("clustering strength must lie in [0, 1)".into()));
        }
        let n = dim.nf();
        let tau: Vec<f64> = (0..=m).map(|j| PI * j as f64 / m as f64).collect();
        let g = |t: f64| t - map_a * t.sin();
        let gp = |t: f64| 1.0 - map_a * t.cos();
        let gpp = |t: f64| map_a * t.sin();
        let theta: Vec<f64> = tau.iter().map(|&t| g(t)).collect();

        let omega = sphere_volume(dim.n() - 1);
        let weights: Vec<f64> = (0..=m)
            .map(|j| {
                let c = if j == 0 || j == m { 0.5 } else { 1.0 };
                omega * (PI / m as f64) * c * gp(tau[j]) * theta[j].sin().powf(n - 1.0)
            })
            .collect();

        // cos/sin of kτ_j = πkj/M with the integer product reduced mod 2M
        // first: for M not a power of two the raw angle πkj/M carries
        // argument-reduction noise ~ eps·kj that the fourth-order pole symbol
        // would amplify into O(1) garbage.
        let cos_kt = |k: usize, j: usize| -> f64 {
            (PI * ((k * j) % (2 * m)) as f64 / m as f64).cos()
        };
        let sin_kt = |k: usize, j: usize| -> f64 {
            (PI * ((k * j) % (2 * m)) as f64 / m as f64).sin()
        };

        // Δ applied to the basis mode cos(kτ), evaluated at node j.
        let mode_lap = |k: usize, j: usize| -> f64 {
            let kf = k as f64;
            let t = tau[j];
            if j == 0 {
                return -n * kf * kf / gp(0.0).powi(2);
            }
            if j == m {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                return -n * kf * kf * sign / gp(PI).powi(2);
            }
            let th = theta[j];
            let d1 = gp(t);
            let u_tt = -kf * kf * cos_kt(k, j);
            let u_t = -kf * sin_kt(k, j);
            let u_thth = u_tt / (d1 * d1) - u_t * gpp(t) / d1.powi(3);
            // sin(kτ)/sin(θ) is a stable ratio of same-order small quantities
            let cot_term = (n - 1.0) * th.cos() * (u_t / th.sin()) / d1;
            u_thth + cot_term
        };

        // analysis matrix: values at nodes → cosine coefficients (DCT-I)
        let mp1 = m + 1;
        let mut analysis = DMatrix::zeros(mp1, mp1);
        for k in 0..=m {
            let norm = if k == 0 || k == m { 1.0 / m as f64 } else { 2.0 / m as f64 };
            for j in 0..=m {
                let c = if j == 0 || j == m { 0.5 } else { 1.0 };
                analysis[(k, j)] = norm * c * cos_kt(k, j);
            }
        }
        let mut mode_vals = DMatrix::zeros(mp1, mp1);
        for k in 0..=m {
            for j in 0..=m {
                mode_vals[(j, k)] = mode_lap(k, j);
            }
        }
        let mut synthesis = DMatrix::zeros(mp1, mp1);
        for j in 0..=m {
            for k in 0..=m {
                synthesis[(j, k)] = cos_kt(k, j);
            }
        }

        // partially built grid to route P[mode k] through the filtered path
        let mut grid = AxisymGrid {
            dim,
            m,
            map_a,
            theta,
            weights,
            mode_vals,
            p_modes: DMatrix::zeros(mp1, mp1),
            analysis,
            synthesis,
            paneitz: DMatrix::zeros(mp1, mp1),
        };
        let mut p_modes = DMatrix::zeros(mp1, mp1);
        for k in 0..=m {
            let col = grid.paneitz_filtered(&grid.synthesis.column(k).clone_owned());
            p_modes.set_column(k, &col);
        }
        grid.paneitz = &p_modes * &grid.analysis;
        grid.p_modes = p_modes;
        Ok(Arc::new(grid))
    }

    pub fn nodes(&self) -> usize {
        self.m + 1
    }

    /// Cosine coefficients of a grid function with the rounding floor
    /// removed: coefficients below `1e−14 · max|coeff|` are zeroed so the
    /// operator symbols never differentiate transform noise.
    fn filtered_coeffs(&self, values: &DVector<f64>) -> DVector<f64> {
        let mut coeffs = &self.analysis * values;
        let top = coeffs.iter().fold(0.0f64, |a, &c| a.max(c.abs()));
        let floor = 1e-14 * top;
        for c in coeffs.iter_mut() {
            if c.abs() < floor {
                *c = 0.0;
            }
        }
        coeffs
    }

    /// Spectral Laplacian through the truncated transform.
    fn lap_filtered(&self, values: &DVector<f64>) -> DVector<f64> {
        let coeffs = self.filtered_coeffs(values);
        let mut out = DVector::zeros(values.len());
        for (k, &c) in coeffs.iter().enumerate() {
            if c != 0.0 {
                out.axpy(c, &self.mode_vals.column(k).clone_owned(), 1.0);
            }
        }
        out
    }

    /// `P u` through the truncated transform.
    fn paneitz_filtered(&self, values: &DVector<f64>) -> DVector<f64> {
        let cns = constants(self.dim);
        let lap1 = self.lap_filtered(values);
        let lap2 = self.lap_filtered(&lap1);
        lap2 - lap1 * cns.c_n + values * cns.d_n
    }

    /// Largest mode index carrying spectral content of `values` above
    /// `rel_floor · max|coeff|`.
    fn active_band(&self, values: &DVector<f64>, rel_floor: f64) -> usize {
        let coeffs = &self.analysis * values;
        let top = coeffs.iter().fold(0.0f64, |a, &c| a.max(c.abs()));
        let floor = rel_floor * top;
        (0..coeffs.len()).rev().find(|&k| coeffs[k].abs() >= floor).unwrap_or(0)
    }


    /// Quadrature of a grid function against the axisymmetric volume element.
    pub fn integrate(&self, values: &DVector<f64>) -> f64 {
        self.weights.iter().zip(values.iter()).map(|(w, v)| w * v).sum()
    }

    /// `L^p` norm of a grid function.
    pub fn lp_norm(&self, values: &DVector<f64>, p: f64) -> f64 {
        self.weights
            .iter()
            .zip(values.iter())
            .map(|(w, v)| w * v.abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }
}

/// An axially symmetric function sampled on an [`AxisymGrid`].
#[derive(Clone)]
pub struct AxisymField {
    pub grid: Arc<AxisymGrid>,
    pub values: DVector<f64>,
}

impl std::fmt::Debug for AxisymField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AxisymField {{ nodes: {}, sup: {:.6e} }}", self.values.len(), self.sup_norm())
    }
}

/// Which pole of the axis a profile concentrates at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisPole {
    North,
    South,
}

impl AxisymField {
    pub fn from_fn<F: Fn(f64) -> f64>(grid: &Arc<AxisymGrid>, f: F) -> Result<Self> {
        let values = DVector::from_fn(grid.nodes(), |j, _| f(grid.theta[j]));
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("field has non-finite values on the grid".into()));
        }
        Ok(AxisymField { grid: grid.clone(), values })
    }

    /// Discretised bubble profile `δ̃_λ` centered at the given pole.
    pub fn bubble(grid: &Arc<AxisymGrid>, lambda: f64, pole: AxisPole) -> Result<Self> {
        if lambda <= 0.0 {
            return Err(Error::Domain("bubble scale must be positive".into()));
        }
        let dim = grid.dim;
        let s = (dim.nf() - 4.0) / 2.0;
        let beta = constants(dim).beta_n;
        AxisymField::from_fn(grid, |theta| {
            let t = match pole {
                AxisPole::North => 1.0 - theta.cos(),
                AxisPole::South => 1.0 + theta.cos(),
            };
            let denom = 1.0 + 0.5 * (lambda * lambda - 1.0) * t;
            beta * (0.5 * lambda / denom).powf(s)
        })
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// One-sided first derivative in θ at the poles of the cosine-interpolant
    /// representation. Structurally zero for this basis; exposed as a
    /// regularity diagnostic.
    pub fn pole_derivative(&self) -> (f64, f64) {
        // symmetric second-order stencil on the first two interior nodes
        let g = &self.grid;
        let d0 = (self.values[1] - self.values[0]) / (g.theta[1] - g.theta[0]);
        let m = g.m;
        let d1 = (self.values[m] - self.values[m - 1]) / (g.theta[m] - g.theta[m - 1]);
        (d0 * (g.theta[1] - g.theta[0]), d1 * (g.theta[m] - g.theta[m - 1]))
    }
}

/// Spectral Laplacian `Δu = u'' + (n−1) cot θ u'`, with the regular limit
/// `Δu = n u''` at the poles.
pub fn laplacian_axisym(u: &AxisymField) -> AxisymField {
    AxisymField { grid: u.grid.clone(), values: u.grid.lap_filtered(&u.values) }
}

/// The fourth-order operator `P u = Δ(Δu) − c_n Δu + d_n u` on the grid.
pub fn paneitz_apply(u: &AxisymField) -> AxisymField {
    AxisymField { grid: u.grid.clone(), values: u.grid.paneitz_filtered(&u.values) }
}

/// `⟨P u, v⟩` under the grid quadrature.
pub fn p_pairing(u: &AxisymField, v: &AxisymField) -> f64 {
    let pu = u.grid.paneitz_filtered(&u.values);
    u.grid
        .weights
        .iter()
        .zip(pu.iter().zip(v.values.iter()))
        .map(|(w, (a, b))| w * a * b)
        .sum()
}

/// `‖u‖²_P = ⟨P u, u⟩` on the grid.
pub fn p_norm_squared(u: &AxisymField) -> f64 {
    p_pairing(u, u)
}

/// Zonal spherical harmonic of degree `k` (Gegenbauer `C_k^{(n−1)/2}(cos θ)`)
/// sampled on the grid.
pub fn zonal_harmonic(grid: &Arc<AxisymGrid>, k: usize) -> AxisymField {
    let alpha = (grid.dim.nf() - 1.0) / 2.0;
    let values = DVector::from_fn(grid.nodes(), |j, _| {
        let s = grid.theta[j].cos();
        gegenbauer(k, alpha, s)
    });
    AxisymField { grid: grid.clone(), values }
}

fn gegenbauer(k: usize, alpha: f64, s: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => 2.0 * alpha * s,
        _ => {
            let mut cm2 = 1.0;
            let mut cm1 = 2.0 * alpha * s;
            for i in 2..=k {
                let i = i as f64;
                let c = (2.0 * (i - 1.0 + alpha) * s * cm1 - (i - 2.0 + 2.0 * alpha) * cm2) / i;
                cm2 = cm1;
                cm1 = c;
            }
            cm1
        }
    }
}

/// Eigenvalue of `P` on degree-`k` spherical harmonics:
/// `Λ_k = (μ_k + n(n−2)/4)(μ_k + (n−4)(n+2)/4)` with `μ_k = k(k+n−1)`.
/// The factorisation is equivalent to the exact identity `c_n² − 4d_n = 4`.
pub fn zonal_eigenvalue(dim: Dim, k: usize) -> f64 {
    let n = dim.nf();
    let mu = k as f64 * (k as f64 + n - 1.0);
    (mu + n * (n - 2.0) / 4.0) * (mu + (n - 4.0) * (n + 2.0) / 4.0)
}

// ---------------------------------------------------------------------------
// The prescribed function along the axis
// ---------------------------------------------------------------------------

/// `K` sampled along a meridian: `K(θ)` on the grid. Exact whenever `K` is
/// axially symmetric about the chosen axis.
#[derive(Clone)]
pub struct AxisymK {
    pub values: DVector<f64>,
}

impl AxisymK {
    pub fn constant(grid: &Arc<AxisymGrid>, c: f64) -> Self {
        AxisymK { values: DVector::from_element(grid.nodes(), c) }
    }

    pub fn from_profile<F: Fn(f64) -> f64>(grid: &Arc<AxisymGrid>, f: F) -> Self {
        AxisymK { values: DVector::from_fn(grid.nodes(), |j, _| f(grid.theta[j])) }
    }

    /// Sample a [`KField`] along the meridian through `axis` and the first
    /// tangent-frame direction there.
    pub fn from_field(grid: &Arc<AxisymGrid>, k: &KField, axis: &Point) -> Self {
        let frame = tangent_frame(axis);
        AxisymK {
            values: DVector::from_fn(grid.nodes(), |j, _| {
                k.value(&axis.geodesic_step(&frame[0], grid.theta[j]))
            }),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

// ---------------------------------------------------------------------------
// Newton solver
// ---------------------------------------------------------------------------

/// Options for [`solve_equation3`].
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Convergence threshold on the normalized sup residual.
    pub tol: f64,
    pub max_iters: usize,
    /// Smallest accepted line-search fraction before declaring stagnation.
    pub min_step: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 5e-9, max_iters: 60, min_step: 1e-4 }
    }
}

/// Result of a bubble fit (see [`fit_single_bubble`]).
#[derive(Debug, Clone, serde::Serialize)]
pub struct BubbleFit {
    pub alpha: f64,
    pub pole: String,
    pub lambda: f64,
    /// `‖u − α δ̃‖_P / ‖u‖_P`.
    pub fit_residual: f64,
    /// Present when the residual had a second local minimum in λ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub secondary: Option<(f64, f64)>,
}

/// Outcome report of a Newton solve.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SolveReport {
    pub converged: bool,
    /// `sup|P u − K u₊^p| / max(1, sup|K u₊^p|)` — the normalized residual;
    /// raw sups at bubble scale `λ ~ 100` sit at `u^p ~ 10^9` where an
    /// absolute threshold would be below machine resolution.
    pub residual_sup: f64,
    pub newton_iters: usize,
    pub positivity: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bubble_fit: Option<BubbleFit>,
    /// `V_η` membership measure of the converged field.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_eta: Option<f64>,
    /// Normalized residual after each accepted step (monotone by the
    /// line-search contract).
    pub residual_history: Vec<f64>,
}

fn residual_with(
    pu: DVector<f64>,
    k: &AxisymK,
    u: &DVector<f64>,
    p: f64,
) -> (DVector<f64>, f64) {
    let mut rhs_sup = 0.0f64;
    let mut res = pu;
    for j in 0..u.len() {
        let up = u[j].max(0.0);
        let nl = k.values[j] * up.powf(p);
        rhs_sup = rhs_sup.max(nl.abs());
        res[j] -= nl;
    }
    let sup = res.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    (res, sup / rhs_sup.max(1.0))
}

fn normalized_residual(grid: &AxisymGrid, k: &AxisymK, u: &DVector<f64>) -> (DVector<f64>, f64) {
    residual_with(grid.paneitz_filtered(u), k, u, grid.dim.power())
}

/// Damped Newton iteration on `F(u) = P u − K u₊^{(n+4)/(n−4)}` with a
/// backtracking line search on the residual norm. The positive part in the
/// nonlinearity keeps fractional powers real during the iteration; if the
/// converged field dips negative that is reported, never hidden.
pub fn solve_equation3(
    k: &AxisymK,
    init: &AxisymField,
    opts: &SolveOptions,
) -> Result<(AxisymField, SolveReport)> {
    let grid = init.grid.clone();
    if k.min() <= 0.0 {
        return Err(Error::Domain("K must be positive along the axis".into()));
    }
    let p = grid.dim.power();
    let mp1 = grid.nodes();

    // Galerkin-collocation on a frozen cosine band: the unknowns are the
    // coefficients of the modes the warm start resolves (plus headroom), so
    // the iterate stays band-limited and the iteration map is smooth — an
    // adaptive keep-set would flip discontinuously under tiny changes of u.
    let nb = (grid.active_band(&init.values, 1e-13) + 17).min(grid.m + 1);
    let b_band = grid.synthesis.columns(0, nb).clone_owned();
    let p_band = grid.p_modes.columns(0, nb).clone_owned();
    let a_band = grid.analysis.rows(0, nb).clone_owned();

    let mut c = &a_band * &init.values;
    let eval = |c: &DVector<f64>| -> (DVector<f64>, DVector<f64>, f64) {
        let u = &b_band * c;
        let (res, rn) = residual_with(&p_band * c, k, &u, p);
        (u, res, rn)
    };
    let (mut u, mut res_vec, mut res_norm) = eval(&c);
    let mut history = vec![res_norm];
    let mut iters = 0;

    while res_norm >= opts.tol * 0.01 && iters < opts.max_iters {
        iters += 1;
        // Jacobian of the projected system: A (P − diag(p K u₊^{p−1})) B
        let mut j_nodes = p_band.clone();
        for j in 0..mp1 {
            let up = u[j].max(0.0);
            let d = p * k.values[j] * up.powf(p - 1.0);
            for col in 0..nb {
                j_nodes[(j, col)] -= d * b_band[(j, col)];
            }
        }
        let j_c = &a_band * &j_nodes;
        let f_c = &a_band * &res_vec;
        let Some(step) = j_c.lu().solve(&(-f_c)) else {
            break; // singular Jacobian: report stagnation below
        };
        let mut t = 1.0;
        let mut accepted = false;
        while t >= opts.min_step {
            let trial = &c + &step * t;
            let (ut, rv, rn) = eval(&trial);
            if rn < res_norm {
                c = trial;
                u = ut;
                res_vec = rv;
                res_norm = rn;
                history.push(rn);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break; // stagnation at the band's floor
        }
    }

    let converged = res_norm < opts.tol;
    let field = AxisymField { grid: grid.clone(), values: u };
    let positivity = field.values.iter().all(|&v| v > 0.0);
    let bubble_fit = fit_single_bubble(&field).ok();
    let v_eta = v_eta_measure(&field, k).ok();
    Ok((
        field,
        SolveReport {
            converged,
            residual_sup: res_norm,
            newton_iters: iters,
            positivity,
            bubble_fit,
            v_eta,
            residual_history: history,
        },
    ))
}

// ---------------------------------------------------------------------------
// Negative-part machinery
// ---------------------------------------------------------------------------

/// Quantities of the positivity argument: the negative part `u⁻ = max(0, −u)`,
/// the auxiliary solution of `P w⁻ = −K (u⁻)^{(n+4)/(n−4)}`, the first-chain
/// ratio `‖w⁻‖_P / |u⁻|_q^{(n+4)/(n−4)}`, and the comparison chain
/// `(c_K |u⁻|_q^{2n/(n−4)}, ‖w⁻‖², |u⁻|_q^{2(n+4)/(n−4)})`.
#[derive(Debug, Clone)]
pub struct NegativePartReport {
    pub u_minus_norm: f64,
    pub w_minus: AxisymField,
    pub w1_ratio: f64,
    pub chain: (f64, f64, f64),
}

/// `P` is invertible on the grid (all zonal eigenvalues are positive for
/// `n ≥ 5`), so the auxiliary problem is a single linear solve.
pub fn negative_part_machinery(u: &AxisymField, k: &AxisymK) -> Result<NegativePartReport> {
    let grid = u.grid.clone();
    let dim = grid.dim;
    let q = dim.crit_exponent();
    let p = dim.power();
    let u_minus = DVector::from_fn(u.values.len(), |j, _| (-u.values[j]).max(0.0));
    let u_minus_norm = grid.lp_norm(&u_minus, q);
    if u_minus_norm == 0.0 {
        let zero = AxisymField { grid: grid.clone(), values: DVector::zeros(u.values.len()) };
        return Ok(NegativePartReport {
            u_minus_norm: 0.0,
            w_minus: zero,
            w1_ratio: 0.0,
            chain: (0.0, 0.0, 0.0),
        });
    }
    let rhs = DVector::from_fn(u.values.len(), |j, _| -k.values[j] * u_minus[j].powf(p));
    let w = grid
        .paneitz
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InternalConsistency("discrete P is singular".into()))?;
    let w_field = AxisymField { grid: grid.clone(), values: w };
    // ‖w⁻‖² = ⟨P w⁻, w⁻⟩ = ⟨rhs, w⁻⟩ up to the solve residual
    let w_norm2: f64 = grid
        .weights
        .iter()
        .zip(rhs.iter().zip(w_field.values.iter()))
        .map(|(wt, (r, wv))| wt * r * wv)
        .sum();
    let w_norm = w_norm2.max(0.0).sqrt();
    let c_k = k.min();
    Ok(NegativePartReport {
        u_minus_norm,
        w1_ratio: w_norm / u_minus_norm.powf(p),
        chain: (c_k * u_minus_norm.powf(q), w_norm2, u_minus_norm.powf(2.0 * p)),
        w_minus: w_field,
    })
}

/// The `V_η(Σ⁺)` membership measure
/// `J(u)^{(2n−4)/(n−4)} e^{2J(u)} |u⁻|_{L^{2n/(n−4)}}^{8/(n−4)}`;
/// membership holds when the measure is below `η`.
pub fn v_eta_measure(u: &AxisymField, k: &AxisymK) -> Result<f64> {
    let grid = &u.grid;
    let dim = grid.dim;
    if u.sup_norm() == 0.0 {
        return Err(Error::Domain("V_η measure is undefined at u ≡ 0".into()));
    }
    let q = dim.crit_exponent();
    let u_minus = DVector::from_fn(u.values.len(), |j, _| (-u.values[j]).max(0.0));
    let minus_norm = grid.lp_norm(&u_minus, q);
    if minus_norm == 0.0 {
        return Ok(0.0); // positive fields sit at measure zero exactly
    }
    let norm2 = p_norm_squared(u);
    let denom: f64 = grid
        .weights
        .iter()
        .zip(k.values.iter().zip(u.values.iter()))
        .map(|(w, (kv, uv))| w * kv * uv.abs().powf(q))
        .sum();
    if denom <= 0.0 {
        return Err(Error::Domain("∫ K |u|^q must be positive".into()));
    }
    let j = norm2 / denom.powf((dim.nf() - 4.0) / dim.nf());
    Ok(j.powf((2.0 * dim.nf() - 4.0) / (dim.nf() - 4.0))
        * (2.0 * j).exp()
        * minus_norm.powf(8.0 / (dim.nf() - 4.0)))
}

// ---------------------------------------------------------------------------
// Bubble fitting
// ---------------------------------------------------------------------------

/// Minimize `‖u − α δ̃‖_P` over `α > 0`, `λ > 0` and the two axis poles.
///
/// For fixed `(pole, λ)` the optimal weight is the closed-form least-squares
/// `α = ⟨u, δ̃⟩_P / S_n`, with the pairing reduced through `P δ̃ = δ̃^{(n+4)/(n−4)}`;
/// the scan over `log λ` is a coarse grid followed by golden-section
/// refinement. `λ` is capped at `0.1·M` so candidate bubbles stay resolvable.
pub fn fit_single_bubble(u: &AxisymField) -> Result<BubbleFit> {
    let grid = u.grid.clone();
    let dim = grid.dim;
    if u.sup_norm() == 0.0 {
        return Err(Error::Domain("cannot fit a bubble to the zero field".into()));
    }
    let consts: BubbleConstants = bubble_constants(dim)?;
    let norm2 = p_norm_squared(u);
    let p = dim.power();

    // ⟨u, δ̃_λ⟩_P via the exact P-reduction, as a function of (pole, λ)
    let pairing = |pole: AxisPole, lambda: f64| -> f64 {
        let profile = AxisymField::bubble(&grid, lambda, pole).expect("λ > 0");
        grid.weights
            .iter()
            .zip(profile.values.iter().zip(u.values.iter()))
            .map(|(w, (d, uv))| w * d.powf(p) * uv)
            .sum()
    };
    let res2 = |pole: AxisPole, ln_lam: f64| -> f64 {
        let pr = pairing(pole, ln_lam.exp());
        norm2 - pr * pr / consts.s_n
    };

    let lam_min = 0.2f64;
    let lam_max = 0.1 * grid.m as f64;
    let coarse = 48usize;
    let mut best: Vec<(AxisPole, f64, f64)> = Vec::new(); // (pole, ln λ, res²) local minima
    for pole in [AxisPole::North, AxisPole::South] {
        let lo = lam_min.ln();
        let hi = lam_max.ln();
        let vals: Vec<f64> = (0..coarse)
            .map(|i| res2(pole, lo + (hi - lo) * i as f64 / (coarse - 1) as f64))
            .collect();
        for i in 0..coarse {
            let left = if i == 0 { f64::INFINITY } else { vals[i - 1] };
            let right = if i == coarse - 1 { f64::INFINITY } else { vals[i + 1] };
            if vals[i] <= left && vals[i] <= right {
                let x = lo + (hi - lo) * i as f64 / (coarse - 1) as f64;
                let h = (hi - lo) / (coarse - 1) as f64;
                // golden-section refinement inside the bracketing interval
                let (mut a, mut b) = ((x - h).max(lo), (x + h).min(hi));
                let phi = 0.618_033_988_749_894_9;
                for _ in 0..60 {
                    let c = b - phi * (b - a);
                    let d = a + phi * (b - a);
                    if res2(pole, c) < res2(pole, d) {
                        b = d;
                    } else {
                        a = c;
                    }
                }
                let xm = 0.5 * (a + b);
                best.push((pole, xm, res2(pole, xm)));
            }
        }
    }
    best.sort_by(|x, y| x.2.partial_cmp(&y.2).unwrap());
    let (pole, ln_lam, r2) = best[0];
    let lambda = ln_lam.exp();
    let alpha = pairing(pole, lambda) / consts.s_n;
    let fit_residual = (r2.max(0.0) / norm2).sqrt();
    let secondary = best.get(1).and_then(|&(_, l2, rr2)| {
        // report a genuine second basin, not the refinement twin of the first
        if (l2 - ln_lam).abs() > 0.2 {
            Some((l2.exp(), (rr2.max(0.0) / norm2).sqrt()))
        } else {
            None
        }
    });
    Ok(BubbleFit {
        alpha,
        pole: match pole {
            AxisPole::North => "north".into(),
            AxisPole::South => "south".into(),
        },
        lambda,
        fit_residual,
        secondary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn d5() -> Dim {
        Dim::new(5).unwrap()
    }

    fn grid_400() -> Arc<AxisymGrid> {
        AxisymGrid::new(d5(), 400).unwrap()
    }

    #[test]
    fn laplacian_of_first_zonal_harmonic() {
        let grid = grid_400();
        let u = AxisymField::from_fn(&grid, |t| t.cos()).unwrap();
        let lap = laplacian_axisym(&u);
        for j in 0..grid.nodes() {
            assert!(
                (lap.values[j] + 5.0 * grid.theta[j].cos()).abs() < 1e-10,
                "Δcos θ ≠ −n cos θ at node {j}: {}",
                lap.values[j]
            );
        }
    }

    #[test]
    fn laplacian_kills_constants() {
        let grid = grid_400();
        let u = AxisymField::from_fn(&grid, |_| 1.0).unwrap();
        let lap = laplacian_axisym(&u);
        assert!(lap.sup_norm() < 1e-12);
    }

    #[test]
    fn laplacian_of_degree_two_zonal() {
        // cos²θ − 1/(n+1) spans the degree-2 zonal direction: Δu = −2(n+1)u
        let grid = grid_400();
        let n = 5.0;
        let u = AxisymField::from_fn(&grid, |t| t.cos().powi(2) - 1.0 / (n + 1.0)).unwrap();
        let lap = laplacian_axisym(&u);
        for j in 0..grid.nodes() {
            let expect = -2.0 * (n + 1.0) * u.values[j];
            assert!((lap.values[j] - expect).abs() < 1e-8, "node {j}");
        }
    }

    #[test]
    fn paneitz_on_constants_is_dn() {
        let grid = grid_400();
        let u = AxisymField::from_fn(&grid, |_| 1.0).unwrap();
        let pu = paneitz_apply(&u);
        for v in pu.values.iter() {
            assert_relative_eq!(*v, 105.0 / 16.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn spectral_factorization_on_zonal_harmonics() {
        let grid = grid_400();
        let dim = d5();
        assert_relative_eq!(zonal_eigenvalue(dim, 0), 105.0 / 16.0, epsilon = 1e-12);
        assert_relative_eq!(zonal_eigenvalue(dim, 1), 59.0625, epsilon = 1e-12);
        for k in 0..=20 {
            let u = zonal_harmonic(&grid, k);
            let pu = paneitz_apply(&u);
            let lam = zonal_eigenvalue(dim, k);
            let scale = u.sup_norm() * lam;
            let mut worst = 0.0f64;
            for j in 0..grid.nodes() {
                worst = worst.max((pu.values[j] - lam * u.values[j]).abs());
            }
            assert!(worst / scale < 1e-8, "k = {k}: rel {:.3e}", worst / scale);
        }
    }

    #[test]
    fn zonal_eigenvalues_positive_for_many_dims() {
        for n in 5..=10 {
            let dim = Dim::new(n).unwrap();
            for k in 0..=20 {
                assert!(zonal_eigenvalue(dim, k) > 0.0);
            }
        }
    }

    #[test]
    fn discrete_p_is_symmetric_under_the_grid_pairing() {
        let grid = AxisymGrid::new(d5(), 200).unwrap();
        let u = AxisymField::from_fn(&grid, |t| (t.cos() * 1.3).exp()).unwrap();
        let v = AxisymField::from_fn(&grid, |t| 1.0 / (2.0 + t.cos())).unwrap();
        let a = p_pairing(&u, &v);
        let b = p_pairing(&v, &u);
        assert!((a - b).abs() / a.abs() < 1e-8, "⟨Pu,v⟩ = {a}, ⟨u,Pv⟩ = {b}");
    }

    #[test]
    fn bubble_is_a_discrete_solution() {
        let grid = grid_400();
        let p = d5().power();
        for &lam in &[1.0, 10.0, 100.0] {
            let u = AxisymField::bubble(&grid, lam, AxisPole::North).unwrap();
            let pu = paneitz_apply(&u);
            let mut worst = 0.0f64;
            let mut scale = 1.0f64;
            for j in 0..grid.nodes() {
                let rhs = u.values[j].powf(p);
                scale = scale.max(rhs.abs());
                worst = worst.max((pu.values[j] - rhs).abs());
            }
            assert!(worst / scale < 1e-6, "λ = {lam}: normalized sup residual {:.3e}", worst / scale);
        }
    }

    #[test]
    fn bubble_residual_improves_with_refinement() {
        let dim = d5();
        let lam = 30.0;
        let p = dim.power();
        let res_at = |m: usize| -> f64 {
            let grid = AxisymGrid::new(dim, m).unwrap();
            let u = AxisymField::bubble(&grid, lam, AxisPole::North).unwrap();
            let pu = paneitz_apply(&u);
            let mut worst = 0.0f64;
            let mut scale = 1.0f64;
            for j in 0..grid.nodes() {
                let rhs = u.values[j].powf(p);
                scale = scale.max(rhs);
                worst = worst.max((pu.values[j] - rhs).abs());
            }
            worst / scale
        };
        let r64 = res_at(64);
        let r128 = res_at(128);
        assert!(
            r128 < r64 / 4.0 || r128 < 1e-12,
            "no spectral refinement trend: {r64:e} → {r128:e}"
        );
    }

    #[test]
    fn pole_regularity_is_structural() {
        let grid = grid_400();
        let u = AxisymField::bubble(&grid, 50.0, AxisPole::North).unwrap();
        let (d0, d1) = u.pole_derivative();
        // scaled first differences at the pole vanish quadratically
        assert!(d0.abs() < 1e-3 * u.sup_norm());
        assert!(d1.abs() < 1e-6 * u.sup_norm());
    }

    #[test]
    fn newton_converges_from_perturbed_bubble() {
        let grid = AxisymGrid::with_map(d5(), 200, 0.3).unwrap();
        let k = AxisymK::constant(&grid, 1.0);
        let exact = AxisymField::bubble(&grid, 2.0, AxisPole::North).unwrap();
        let init = AxisymField {
            grid: grid.clone(),
            values: DVector::from_fn(grid.nodes(), |j, _| {
                exact.values[j] * (1.0 + 0.01 * (7.0 * grid.theta[j]).cos())
            }),
        };
        let (u, report) = solve_equation3(&k, &init, &SolveOptions::default()).unwrap();
        assert!(report.converged, "report: {report:?}");
        assert!(report.residual_sup < 1e-8);
        assert!(report.positivity);
        assert!(u.values.iter().all(|&v| v > 0.0));
        let fit = report.bubble_fit.unwrap();
        assert!(fit.fit_residual < 1e-6, "fit residual {:e}", fit.fit_residual);
        assert!((fit.lambda - 2.0).abs() < 0.2, "λ drifted to {}", fit.lambda);
        // residual decreases monotonically along accepted steps
        for w in report.residual_history.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert_eq!(report.v_eta, Some(0.0));
    }

    #[test]
    fn constant_k_rescales_the_solution() {
        let grid = AxisymGrid::with_map(d5(), 200, 0.3).unwrap();
        let c = 3.0f64;
        let k = AxisymK::constant(&grid, c);
        let scale = c.powf(-(d5().nf() - 4.0) / 8.0);
        let exact = AxisymField::bubble(&grid, 2.0, AxisPole::North).unwrap();
        let init = AxisymField {
            grid: grid.clone(),
            values: exact.values.clone() * scale * 1.01,
        };
        let (_, report) = solve_equation3(&k, &init, &SolveOptions::default()).unwrap();
        assert!(report.converged);
        let fit = report.bubble_fit.unwrap();
        assert_relative_eq!(fit.alpha, scale, max_relative = 1e-6);
    }

    #[test]
    fn fit_recovers_an_exact_bubble() {
        let grid = grid_400();
        let u = AxisymField::bubble(&grid, 7.0, AxisPole::North).unwrap();
        let fit = fit_single_bubble(&u).unwrap();
        assert_eq!(fit.pole, "north");
        assert!((fit.alpha - 1.0).abs() < 1e-8, "α = {}", fit.alpha);
        assert!((fit.lambda - 7.0).abs() / 7.0 < 1e-8, "λ = {}", fit.lambda);
        assert!(fit.fit_residual < 1e-10);
    }

    #[test]
    fn fit_survives_noise() {
        let grid = grid_400();
        let clean = AxisymField::bubble(&grid, 7.0, AxisPole::South).unwrap();
        let noisy = AxisymField {
            grid: grid.clone(),
            values: DVector::from_fn(grid.nodes(), |j, _| {
                clean.values[j] * (1.0 + 0.01 * (31.0 * grid.theta[j]).sin())
            }),
        };
        let fit = fit_single_bubble(&noisy).unwrap();
        assert_eq!(fit.pole, "south");
        assert!((fit.lambda - 7.0).abs() / 7.0 < 0.01, "λ = {}", fit.lambda);
        // the fit residual matches the perturbation's own relative P-norm
        // (the high-frequency content is what the fit cannot absorb)
        let noise = AxisymField {
            grid: grid.clone(),
            values: &noisy.values - &clean.values,
        };
        let rel_noise = (p_norm_squared(&noise) / p_norm_squared(&noisy)).sqrt();
        assert!(
            fit.fit_residual > 0.3 * rel_noise && fit.fit_residual < 1.5 * rel_noise,
            "fit residual {:e} vs noise norm {rel_noise:e}",
            fit.fit_residual
        );
    }

    #[test]
    fn constant_field_is_a_unit_scale_bubble() {
        let grid = grid_400();
        let c = constants(d5());
        let value = c.beta_n / 2f64.sqrt(); // the λ = 1 bubble is this constant
        let u = AxisymField::from_fn(&grid, |_| value).unwrap();
        let fit = fit_single_bubble(&u).unwrap();
        assert!((fit.lambda - 1.0).abs() < 1e-6, "λ = {}", fit.lambda);
        assert!(fit.fit_residual < 1e-8);
    }

    #[test]
    fn negative_part_of_positive_field_is_trivial() {
        let grid = AxisymGrid::new(d5(), 128).unwrap();
        let k = AxisymK::constant(&grid, 1.0);
        let u = AxisymField::bubble(&grid, 3.0, AxisPole::North).unwrap();
        let rep = negative_part_machinery(&u, &k).unwrap();
        assert_eq!(rep.u_minus_norm, 0.0);
        assert_eq!(rep.w1_ratio, 0.0);
        assert!(rep.w_minus.sup_norm() == 0.0);
        assert_eq!(v_eta_measure(&u, &k).unwrap(), 0.0);
    }

    #[test]
    fn w_minus_scales_exactly() {
        // replacing u⁻ by t·u⁻ scales ‖w⁻‖ by t^{(n+4)/(n−4)} (linearity of P)
        let grid = AxisymGrid::new(d5(), 200).unwrap();
        let k = AxisymK::from_profile(&grid, |t| 1.0 + 0.1 * t.cos());
        let base = AxisymField::from_fn(&grid, |t| {
            let s = (t - 2.6).max(0.0);
            -(s * s * (s - 0.4).max(0.0))
        })
        .unwrap();
        let p = d5().power();
        let r1 = negative_part_machinery(&base, &k).unwrap();
        for t in [0.3, 2.0, 9.0f64] {
            let scaled = AxisymField { grid: grid.clone(), values: base.values.clone() * t };
            let r2 = negative_part_machinery(&scaled, &k).unwrap();
            let got = r2.w1_ratio * r2.u_minus_norm.powf(p);
            let want = t.powf(p) * r1.w1_ratio * r1.u_minus_norm.powf(p);
            assert_relative_eq!(got, want, max_relative = 1e-8);
        }
    }

    #[test]
    fn v_eta_measure_positive_on_signed_field() {
        let grid = AxisymGrid::new(d5(), 200).unwrap();
        let k = AxisymK::constant(&grid, 1.0);
        let bubble = AxisymField::bubble(&grid, 3.0, AxisPole::North).unwrap();
        let dented = AxisymField {
            grid: grid.clone(),
            values: DVector::from_fn(grid.nodes(), |j, _| {
                let t = grid.theta[j];
                bubble.values[j] - 2.0 * (-(PI - t).powi(2) * 40.0).exp()
            }),
        };
        let m = v_eta_measure(&dented, &k).unwrap();
        assert!(m > 0.0);
        let zero = AxisymField { grid: grid.clone(), values: DVector::zeros(grid.nodes()) };
        assert!(v_eta_measure(&zero, &k).is_err());
    }
}
