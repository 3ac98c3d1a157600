//! Integral-action subspace predictive control with flap-saturation limits.
//!
//! Predictions are written in increments so that a constant disturbance
//! cannot leave a steady offset:
//! `Ŷ^f = 𝟙⊗y(k) + S·L_W·ΔW^p + S·L_u·ΔU^f`.
//! The amplitude bounds `U_min ≤ u(k−1) + S·ΔU ≤ U_max` become
//! `M_con·ΔU ≤ γ_con` with `M_con = [−S; S]`, and the QP is solved in its dual
//! by Hildreth coordinate descent. Because the two halves of `M_con` are
//! negatives of each other, the dual Hessian is `[[Z, −Z], [−Z, Z]]` with
//! `Z = S E⁻¹ Sᵀ` and each coordinate pair `(λ⁻_i, λ⁺_i)` is minimized jointly;
//! at most one of the pair is nonzero.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Result, RspcError};
use crate::estimator::{EstimatorSettings, PredictorGains, RecursiveEstimator, DEFAULT_DELTA};
use crate::plant::{output_map, FLAP_LIMIT_DEG, N_U, N_Y, SAMPLE_PERIOD};
use crate::scalar::{lit, to_f64, Real};
use crate::subspace::{block_cumsum_cols, block_cumsum_rows, replicate};

pub const QP_RIDGE: f64 = 1e-8;

/// Scalar weight or per-entry diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

impl Weight {
    /// Diagonal over a horizon of `span` blocks of size `n`; a diagonal of
    /// length `n` is repeated over the horizon.
    pub fn diagonal<T: Real>(&self, n: usize, span: usize, what: &str) -> Result<DVector<T>> {
        let d: Vec<f64> = match self {
            Weight::Scalar(s) => vec![*s; n * span],
            Weight::Diagonal(v) if v.len() == n => (0..n * span).map(|i| v[i % n]).collect(),
            Weight::Diagonal(v) if v.len() == n * span => v.clone(),
            Weight::Diagonal(v) => {
                return Err(RspcError::Config(format!(
                    "{what} diagonal must have {n} or {} entries, got {}",
                    n * span,
                    v.len()
                )))
            }
        };
        if d.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(RspcError::Config(format!("{what} must be positive definite")));
        }
        Ok(DVector::from_iterator(d.len(), d.into_iter().map(lit::<T>)))
    }
}

/// Output reference `y_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceChoice {
    /// The plant's zero-yaw steady output at the scenario's grid height.
    ZeroYaw,
    /// Zero gradients and the zero-yaw level raised by `uplift`.
    Symmetric { uplift: f64 },
    Explicit { value: [f64; 3] },
}

impl ReferenceChoice {
    pub fn resolve(&self, zero_yaw_output: [f64; 3]) -> [f64; 3] {
        match self {
            Self::ZeroYaw => zero_yaw_output,
            Self::Symmetric { uplift } => [0.0, 0.0, zero_yaw_output[2] + uplift],
            Self::Explicit { value } => *value,
        }
    }
}

fn d_rho() -> usize {
    30
}
fn d_ell() -> usize {
    40
}
fn d_q() -> Weight {
    Weight::Scalar(1.0)
}
fn d_r() -> Weight {
    Weight::Scalar(0.1)
}
fn d_lambda() -> f64 {
    0.999
}
fn d_delta() -> f64 {
    DEFAULT_DELTA
}
fn d_u_min() -> f64 {
    -FLAP_LIMIT_DEG
}
fn d_u_max() -> f64 {
    FLAP_LIMIT_DEG
}
fn d_max_iter() -> usize {
    200
}
fn d_tol() -> f64 {
    1e-8
}
fn d_dwell() -> f64 {
    10.0
}
fn d_excitation() -> f64 {
    2.0
}
fn d_hold() -> usize {
    3
}
fn d_reference() -> ReferenceChoice {
    ReferenceChoice::ZeroYaw
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Past window, samples.
    #[serde(default = "d_rho")]
    pub rho: usize,
    /// Prediction horizon, samples.
    #[serde(default = "d_ell")]
    pub ell: usize,
    #[serde(default = "d_q")]
    pub q: Weight,
    #[serde(default = "d_r")]
    pub r: Weight,
    #[serde(default = "d_lambda")]
    pub lambda_e: f64,
    #[serde(default = "d_lambda")]
    pub lambda_y: f64,
    /// Initial covariance scale `P₀ = δI`.
    #[serde(default = "d_delta")]
    pub delta: f64,
    /// Flap bounds in degrees, same for every flap.
    #[serde(default = "d_u_min")]
    pub u_min: f64,
    #[serde(default = "d_u_max")]
    pub u_max: f64,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
    /// Estimation-only time after the windows have filled, seconds.
    #[serde(default = "d_dwell")]
    pub dwell: f64,
    /// PRBS amplitude during the dwell (0 holds the flaps at 0°).
    #[serde(default = "d_excitation")]
    pub excitation: f64,
    /// Samples each PRBS level is held.
    #[serde(default = "d_hold")]
    pub excitation_hold: usize,
    #[serde(default = "d_reference")]
    pub reference: ReferenceChoice,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            rho: d_rho(),
            ell: d_ell(),
            q: d_q(),
            r: d_r(),
            lambda_e: d_lambda(),
            lambda_y: d_lambda(),
            delta: d_delta(),
            u_min: d_u_min(),
            u_max: d_u_max(),
            max_iter: d_max_iter(),
            tol: d_tol(),
            dwell: d_dwell(),
            excitation: d_excitation(),
            excitation_hold: d_hold(),
            reference: d_reference(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RspcError::Config(m));
        if self.rho == 0 || self.ell == 0 {
            return bad("rho and ell must be at least 1".into());
        }
        for (name, l) in [("lambda_e", self.lambda_e), ("lambda_y", self.lambda_y)] {
            if !(l > 0.0 && l <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {l}"));
            }
        }
        if !(self.u_min < self.u_max) || self.u_min < -FLAP_LIMIT_DEG || self.u_max > FLAP_LIMIT_DEG {
            return bad(format!(
                "bounds [{}, {}] must be ordered and inside ±{FLAP_LIMIT_DEG}",
                self.u_min, self.u_max
            ));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return bad("max_iter and tol must be positive".into());
        }
        if !(self.dwell >= 0.0) || !(self.excitation >= 0.0) || !(self.delta > 0.0) {
            return bad("dwell, excitation and delta must be non-negative (delta positive)".into());
        }
        self.q.diagonal::<f64>(N_Y, self.ell, "Q")?;
        self.r.diagonal::<f64>(N_U, self.ell, "R")?;
        Ok(())
    }

    /// Samples before control engages: window fill plus dwell.
    pub fn warm_up_samples(&self) -> usize {
        self.rho + self.ell + (self.dwell / SAMPLE_PERIOD).round() as usize
    }
}

/// `Y_r = 𝟙⊗y_r` with diagonal `Q` (over outputs) and `R` (over input increments).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlObjective<T: Real> {
    pub y_r: DVector<T>,
    pub q: DVector<T>,
    pub r: DVector<T>,
}

impl<T: Real> ControlObjective<T> {
    pub fn new(y_ref: &DVector<T>, q: DVector<T>, r: DVector<T>, ell: usize) -> Result<Self> {
        let n_y = y_ref.len();
        dim_check("Q diagonal", n_y * ell, q.len())?;
        if q.iter().chain(r.iter()).any(|w| !(*w > T::zero())) {
            return Err(RspcError::Config("Q and R must be positive definite".into()));
        }
        Ok(Self {
            y_r: replicate(y_ref, ell),
            q,
            r,
        })
    }
}

/// `L_Wᵢ = S·L_W`, `L_uᵢ = S·L_u` and the hold anchor `𝟙⊗y(k)`.
#[derive(Clone, Debug)]
pub struct IncrementalPredictor<T: Real> {
    pub l_wi: DMatrix<T>,
    pub l_ui: DMatrix<T>,
    pub y_anchor: DVector<T>,
    pub n_u: usize,
    pub n_y: usize,
    pub ell: usize,
}

impl<T: Real> IncrementalPredictor<T> {
    pub fn predict(&self, dw_past: &DVector<T>, du_future: &DVector<T>) -> DVector<T> {
        &self.y_anchor + &self.l_wi * dw_past + &self.l_ui * du_future
    }
}

pub fn build_incremental<T: Real>(gains: &PredictorGains<T>, y_now: &DVector<T>) -> Result<IncrementalPredictor<T>> {
    let n_y = gains.n_y();
    dim_check("current output", n_y, y_now.len())?;
    Ok(IncrementalPredictor {
        l_wi: block_cumsum_rows(&gains.l_w().into_owned(), n_y),
        l_ui: block_cumsum_rows(&gains.l_u().into_owned(), n_y),
        y_anchor: replicate(y_now, gains.ell()),
        n_u: gains.n_u(),
        n_y,
        ell: gains.ell(),
    })
}

/// `min ½ΔUᵀEΔU + ΔUᵀF` s.t. `M_con·ΔU ≤ γ_con`, with `M_con = [−S; S]`,
/// `γ_con = [γ⁻; γ⁺] = [𝟙⊗u_prev − U_min; U_max − 𝟙⊗u_prev]`.
#[derive(Clone, Debug)]
pub struct QpProblem<T: Real> {
    e: DMatrix<T>,
    e_inv: DMatrix<T>,
    f: DVector<T>,
    gamma_lower: DVector<T>,
    gamma_upper: DVector<T>,
    u_prev: DVector<T>,
    n_u: usize,
    ell: usize,
    ridged: bool,
}

impl<T: Real> QpProblem<T> {
    pub fn new(
        e: DMatrix<T>,
        f: DVector<T>,
        u_prev: &DVector<T>,
        u_min: &DVector<T>,
        u_max: &DVector<T>,
        ell: usize,
    ) -> Result<Self> {
        let n_u = u_prev.len();
        dim_check("E rows", n_u * ell, e.nrows())?;
        dim_check("E columns", n_u * ell, e.ncols())?;
        dim_check("F", n_u * ell, f.len())?;
        dim_check("U_min", n_u, u_min.len())?;
        dim_check("U_max", n_u, u_max.len())?;
        let e = (&e + e.transpose()) * lit::<T>(0.5);
        let (e, e_inv, ridged) = match e.clone().cholesky() {
            Some(ch) => (e, ch.inverse(), false),
            None => {
                let n = e.nrows();
                let ridged = e + DMatrix::identity(n, n) * lit::<T>(QP_RIDGE);
                let ch = ridged
                    .clone()
                    .cholesky()
                    .ok_or_else(|| RspcError::Numerical("QP Hessian is not positive definite".into()))?;
                (ridged, ch.inverse(), true)
            }
        };
        let anchor = replicate(u_prev, ell);
        let gamma_lower = &anchor - replicate(u_min, ell);
        let gamma_upper = replicate(u_max, ell) - &anchor;
        if !gamma_lower.iter().chain(gamma_upper.iter()).chain(f.iter()).all(|v| v.is_finite()) {
            return Err(RspcError::Numerical("QP data are not finite".into()));
        }
        Ok(Self {
            e,
            e_inv,
            f,
            gamma_lower,
            gamma_upper,
            u_prev: u_prev.clone(),
            n_u,
            ell,
            ridged,
        })
    }

    pub fn e(&self) -> &DMatrix<T> {
        &self.e
    }
    pub fn f(&self) -> &DVector<T> {
        &self.f
    }
    pub fn u_prev(&self) -> &DVector<T> {
        &self.u_prev
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn ell(&self) -> usize {
        self.ell
    }
    /// True when `E` needed the `QP_RIDGE` shift to factor.
    pub fn ridged(&self) -> bool {
        self.ridged
    }

    pub fn m_con(&self) -> DMatrix<T> {
        let n = self.n_u * self.ell;
        let s = block_cumsum_rows(&DMatrix::identity(n, n), self.n_u);
        let mut m = DMatrix::zeros(2 * n, n);
        m.rows_mut(0, n).copy_from(&(-&s));
        m.rows_mut(n, n).copy_from(&s);
        m
    }

    pub fn gamma_con(&self) -> DVector<T> {
        let n = self.gamma_lower.len();
        let mut g = DVector::zeros(2 * n);
        g.rows_mut(0, n).copy_from(&self.gamma_lower);
        g.rows_mut(n, n).copy_from(&self.gamma_upper);
        g
    }

    pub fn unconstrained(&self) -> DVector<T> {
        -(&self.e_inv * &self.f)
    }

    fn s_transpose_mul(&self, x: &DVector<T>) -> DVector<T> {
        // Sᵀx: reverse running sum over blocks
        let n = self.n_u;
        let mut out = x.clone();
        for b in (0..self.ell.saturating_sub(1)).rev() {
            for c in 0..n {
                let next = out[(b + 1) * n + c];
                out[b * n + c] += next;
            }
        }
        out
    }
}

pub fn build_qp<T: Real>(
    pred: &IncrementalPredictor<T>,
    obj: &ControlObjective<T>,
    dw_past: &DVector<T>,
    u_prev: &DVector<T>,
    u_min: &DVector<T>,
    u_max: &DVector<T>,
) -> Result<QpProblem<T>> {
    dim_check("ΔW^p", pred.l_wi.ncols(), dw_past.len())?;
    dim_check("Y_r", pred.l_ui.nrows(), obj.y_r.len())?;
    dim_check("R diagonal", pred.l_ui.ncols(), obj.r.len())?;
    let mut qlu = pred.l_ui.clone();
    for (mut row, q) in qlu.row_iter_mut().zip(obj.q.iter()) {
        row *= *q;
    }
    let mut e = pred.l_ui.transpose() * &qlu;
    for (i, r) in obj.r.iter().enumerate() {
        e[(i, i)] += *r;
    }
    let free_response = &obj.y_r - &pred.l_wi * dw_past - &pred.y_anchor;
    let f = -(qlu.transpose() * free_response);
    QpProblem::new(e, f, u_prev, u_min, u_max, pred.ell)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution<T: Real> {
    /// Multipliers of the lower-bound rows `−S·ΔU ≤ γ⁻`.
    pub lambda_lower: DVector<T>,
    /// Multipliers of the upper-bound rows `S·ΔU ≤ γ⁺`.
    pub lambda_upper: DVector<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> DualSolution<T> {
    /// `λ` stacked in `M_con` row order.
    pub fn stacked(&self) -> DVector<T> {
        let n = self.lambda_lower.len();
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&self.lambda_lower);
        out.rows_mut(n, n).copy_from(&self.lambda_upper);
        out
    }
}

/// Dual data `Z = S E⁻¹ Sᵀ`, `K⁺ = γ⁺ + S E⁻¹ F`, `K⁻ = γ⁻ − S E⁻¹ F`.
struct DualData<T: Real> {
    z: DMatrix<T>,
    k_upper: DVector<T>,
    k_lower: DVector<T>,
}

fn dual_data<T: Real>(qp: &QpProblem<T>, with_z: bool) -> DualData<T> {
    let v_f = block_cumsum_rows(&DMatrix::from_column_slice(qp.f.len(), 1, (&qp.e_inv * &qp.f).as_slice()), qp.n_u)
        .column(0)
        .into_owned();
    let z = if with_z {
        block_cumsum_cols(&block_cumsum_rows(&qp.e_inv, qp.n_u), qp.n_u)
    } else {
        DMatrix::zeros(0, 0)
    };
    DualData {
        z,
        k_upper: &qp.gamma_upper + &v_f,
        k_lower: &qp.gamma_lower - &v_f,
    }
}

/// `½λᵀHλ + λᵀK` with `H = M_con E⁻¹ M_conᵀ`, `K = γ_con + M_con E⁻¹ F`.
pub fn dual_objective<T: Real>(qp: &QpProblem<T>, dual: &DualSolution<T>) -> T {
    let d = dual_data(qp, true);
    let w = &dual.lambda_upper - &dual.lambda_lower;
    (w.transpose() * &d.z * &w)[(0, 0)] * lit::<T>(0.5) + dual.lambda_upper.dot(&d.k_upper) + dual.lambda_lower.dot(&d.k_lower)
}

/// Hildreth dual coordinate descent; returns the last iterate with
/// `converged = false` when `max_iter` sweeps are not enough.
pub fn hildreth_solve<T: Real>(qp: &QpProblem<T>, max_iter: usize, tol: f64) -> DualSolution<T> {
    hildreth_solve_observed(qp, max_iter, tol, |_| {})
}

/// As [`hildreth_solve`], calling `observe` with the iterate after every sweep.
pub fn hildreth_solve_observed<T: Real>(
    qp: &QpProblem<T>,
    max_iter: usize,
    tol: f64,
    mut observe: impl FnMut(&DualSolution<T>),
) -> DualSolution<T> {
    let n = qp.f.len();
    let mut sol = DualSolution {
        lambda_lower: DVector::zeros(n),
        lambda_upper: DVector::zeros(n),
        iterations: 0,
        converged: true,
    };
    let probe = dual_data(qp, false);
    // λ = 0 is optimal when the unconstrained trajectory is inside the bounds
    if probe.k_upper.iter().chain(probe.k_lower.iter()).all(|k| *k >= T::zero()) {
        return sol;
    }
    let DualData { z, k_upper, k_lower } = dual_data(qp, true);
    let tol = lit::<T>(tol);
    // w = λ⁺ − λ⁻ and zw = Z·w are kept current so each coordinate costs O(1)
    let mut w = DVector::<T>::zeros(n);
    let mut zw = DVector::<T>::zeros(n);
    sol.converged = false;
    for sweep in 1..=max_iter {
        let mut max_change = T::zero();
        for i in 0..n {
            let zii = z[(i, i)];
            let cross = zw[i] - zii * w[i];
            let r_up = k_upper[i] + cross;
            let r_lo = k_lower[i] - cross;
            let (up, lo) = if r_up < T::zero() {
                (-r_up / zii, T::zero())
            } else {
                (T::zero(), (-r_lo / zii).max(T::zero()))
            };
            let change = (up - sol.lambda_upper[i]).abs().max((lo - sol.lambda_lower[i]).abs());
            max_change = max_change.max(change);
            let new_w = up - lo;
            let dw = new_w - w[i];
            if dw != T::zero() {
                zw.axpy(dw, &z.column(i), T::one());
                w[i] = new_w;
            }
            sol.lambda_upper[i] = up;
            sol.lambda_lower[i] = lo;
        }
        sol.iterations = sweep;
        observe(&sol);
        if max_change < tol {
            sol.converged = true;
            break;
        }
    }
    sol
}

/// `ΔU = −E⁻¹(F + M_conᵀλ)`; the applied command is `u_prev + ΔU[0..n_u]`.
#[derive(Clone, Debug)]
pub struct Recovered<T: Real> {
    pub delta_u: DVector<T>,
    pub u: DVector<T>,
}

pub fn recover_control<T: Real>(qp: &QpProblem<T>, dual: &DualSolution<T>) -> Recovered<T> {
    let mt_lambda = qp.s_transpose_mul(&(&dual.lambda_upper - &dual.lambda_lower));
    let delta_u = -(&qp.e_inv * (&qp.f + mt_lambda));
    let u = &qp.u_prev + delta_u.rows(0, qp.n_u);
    Recovered { delta_u, u }
}

/// Largest violations of the KKT conditions at `(ΔU, λ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub dual_sign: f64,
}

pub fn kkt_residuals<T: Real>(qp: &QpProblem<T>, delta_u: &DVector<T>, dual: &DualSolution<T>) -> KktResiduals {
    let m = qp.m_con();
    let lambda = dual.stacked();
    let stationarity = (&qp.e * delta_u + &qp.f + m.transpose() * &lambda).amax();
    let slack = &m * delta_u - qp.gamma_con();
    let feasibility = slack.iter().fold(T::zero(), |acc, s| acc.max(*s));
    let complementarity = lambda.zip_map(&slack, |l, s| (l * s).abs()).amax();
    let dual_sign = lambda.iter().fold(T::zero(), |acc, l| acc.max(-*l));
    KktResiduals {
        stationarity: to_f64(stationarity),
        feasibility: to_f64(feasibility),
        complementarity: to_f64(complementarity),
        dual_sign: to_f64(dual_sign),
    }
}

/// Seeded random QP with `n_u` inputs over `ell` steps and bounds `±7`; the
/// gradient is scaled so that some bounds are usually active.
pub fn random_qp(seed: u64, n_u: usize, ell: usize) -> QpProblem<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_u * ell;
    let scale = 1.0 / (n as f64).sqrt();
    let a = DMatrix::from_fn(n, n, |_, _| scale * rng.random_range(-1.0..1.0));
    let e = a.transpose() * a + DMatrix::identity(n, n) * 0.2;
    let f = DVector::from_fn(n, |_, _| rng.random_range(-20.0..20.0));
    let u_prev = DVector::from_fn(n_u, |_, _| rng.random_range(-7.0..7.0));
    let bound = DVector::from_element(n_u, FLAP_LIMIT_DEG);
    QpProblem::new(e, f, &u_prev, &-&bound, &bound, ell).expect("random QP is well formed")
}

/// Where the controller is in its start-up sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Flaps at 0° while the windows fill, then PRBS excitation for the dwell.
    WarmUp,
    Active,
    /// An estimator fault made the controller hold its previous command.
    Holding,
}

#[derive(Clone, Debug)]
pub struct ControlStep<T: Real> {
    pub command: DVector<T>,
    pub y: DVector<T>,
    pub e_hat: Option<DVector<T>>,
    pub dual_iterations: usize,
    pub converged: bool,
    pub phase: Phase,
    pub fault: Option<String>,
}

/// Recursive SPC loop: call [`step`](Self::step) with each measurement, send
/// the command to the actuator, then report what was applied with
/// [`apply`](Self::apply).
#[derive(Clone, Debug)]
pub struct RspcController<T: Real> {
    config: ControllerConfig,
    objective: ControlObjective<T>,
    estimator: RecursiveEstimator<T>,
    u_min: DVector<T>,
    u_max: DVector<T>,
    u_prev: DVector<T>,
    excitation: ChaCha8Rng,
    excitation_level: DVector<T>,
    warm_up: usize,
    samples: usize,
}

impl<T: Real> RspcController<T> {
    pub fn new(config: &ControllerConfig, y_ref: [f64; 3], seed: u64) -> Result<Self> {
        config.validate()?;
        let ell = config.ell;
        let y_ref = DVector::from_iterator(N_Y, y_ref.iter().map(|v| lit::<T>(*v)));
        let objective = ControlObjective::new(
            &y_ref,
            config.q.diagonal(N_Y, ell, "Q")?,
            config.r.diagonal(N_U, ell, "R")?,
            ell,
        )?;
        let estimator = RecursiveEstimator::new(EstimatorSettings {
            rho: config.rho,
            ell,
            n_u: N_U,
            n_y: N_Y,
            lambda_e: config.lambda_e,
            lambda_y: config.lambda_y,
            delta: config.delta,
        })?;
        Ok(Self {
            objective,
            estimator,
            u_min: DVector::from_element(N_U, lit(config.u_min)),
            u_max: DVector::from_element(N_U, lit(config.u_max)),
            u_prev: DVector::zeros(N_U),
            excitation: ChaCha8Rng::seed_from_u64(seed),
            excitation_level: DVector::zeros(N_U),
            warm_up: config.warm_up_samples(),
            samples: 0,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }
    pub fn objective(&self) -> &ControlObjective<T> {
        &self.objective
    }
    pub fn estimator(&self) -> &RecursiveEstimator<T> {
        &self.estimator
    }
    pub fn warm_up_samples(&self) -> usize {
        self.warm_up
    }

    /// Replaces the warm-up length (in samples, including window fill).
    pub fn set_warm_up_samples(&mut self, samples: usize) {
        self.warm_up = samples;
    }

    pub fn step_sensors(&mut self, dcp: &DVector<T>) -> Result<ControlStep<T>> {
        self.step(&(output_map::<T>() * dcp))
    }

    pub fn step(&mut self, y: &DVector<T>) -> Result<ControlStep<T>> {
        let outcome = self.estimator.observe(y)?;
        let k = self.samples;
        self.samples += 1;
        let mut out = ControlStep {
            command: self.u_prev.clone(),
            y: y.clone(),
            e_hat: outcome.e_hat,
            dual_iterations: 0,
            converged: true,
            phase: Phase::WarmUp,
            fault: outcome.fault,
        };
        if out.fault.is_some() {
            out.phase = Phase::Holding;
            return Ok(out);
        }
        if k < self.warm_up {
            if k < self.config.rho + self.config.ell {
                out.command = DVector::zeros(N_U);
                return Ok(out);
            }
            if self.config.excitation > 0.0 && (k - self.config.rho - self.config.ell).is_multiple_of(self.config.excitation_hold.max(1)) {
                let amp = self.config.excitation;
                let rng = &mut self.excitation;
                self.excitation_level =
                    DVector::from_fn(N_U, |_, _| lit(if rng.random::<bool>() { amp } else { -amp }));
            }
            out.command = self.excitation_level.clone();
            return Ok(out);
        }
        let Some(dw) = self.estimator.past_increments() else {
            return Ok(out);
        };
        out.phase = Phase::Active;
        let pred = build_incremental(&self.estimator.gains(), y)?;
        let qp = build_qp(&pred, &self.objective, &dw, &self.u_prev, &self.u_min, &self.u_max)?;
        let dual = hildreth_solve(&qp, self.config.max_iter, self.config.tol);
        out.command = recover_control(&qp, &dual).u;
        out.dual_iterations = dual.iterations;
        out.converged = dual.converged;
        Ok(out)
    }

    pub fn apply(&mut self, u_applied: &DVector<T>) -> Result<()> {
        self.estimator.record_input(u_applied)?;
        self.u_prev = u_applied.clone();
        Ok(())
    }
}
