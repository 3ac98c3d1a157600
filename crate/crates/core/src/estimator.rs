//! Subspace predictor estimation from closed-loop data.
//!
//! Under feedback the future inputs correlate with past noise, so a plain fit
//! of `Y^f` on `[W^p; U^f]` is biased. Estimating the innovations first and
//! adding `Ê^f` as an extra regressor removes that correlation. Both the batch
//! path (projection + QR least squares) and the recursive path (two RLS
//! estimators with exponential forgetting) live here.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{dim_check, Result, RspcError};
use crate::scalar::{lit, to_f64, Real};
use crate::subspace::{hankel, hstack, toeplitz, vstack, IoHankel, LtiRealization, Signal};

pub const DEFAULT_DELTA: f64 = 1e4;
pub const RANK_RIDGE: f64 = 1e-8;
/// Diagonal floor on `P`; falling below it triggers a covariance reset.
pub const COVARIANCE_FLOOR: f64 = 1e-12;
const RANK_TOL: f64 = 1e-10;

/// `L = [L_W, L_u, L_e]` mapping `[W^p; U^f; Ê^f]` to `Ŷ^f`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorGains<T: Real> {
    l: DMatrix<T>,
    rho: usize,
    ell: usize,
    n_u: usize,
    n_y: usize,
}

impl<T: Real> PredictorGains<T> {
    pub fn new(l: DMatrix<T>, rho: usize, ell: usize, n_u: usize, n_y: usize) -> Result<Self> {
        dim_check("predictor rows", ell * n_y, l.nrows())?;
        dim_check("predictor columns", (n_u + n_y) * (rho + ell), l.ncols())?;
        if !l.iter().all(|v| v.is_finite()) {
            return Err(RspcError::EstimatorFault("predictor gains are not finite".into()));
        }
        Ok(Self { l, rho, ell, n_u, n_y })
    }

    pub fn zeros(rho: usize, ell: usize, n_u: usize, n_y: usize) -> Self {
        Self {
            l: DMatrix::zeros(ell * n_y, (n_u + n_y) * (rho + ell)),
            rho,
            ell,
            n_u,
            n_y,
        }
    }

    pub fn rho(&self) -> usize {
        self.rho
    }
    pub fn ell(&self) -> usize {
        self.ell
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn full(&self) -> &DMatrix<T> {
        &self.l
    }

    pub fn l_w(&self) -> DMatrixView<'_, T> {
        self.l.columns(0, (self.n_u + self.n_y) * self.rho)
    }

    pub fn l_u(&self) -> DMatrixView<'_, T> {
        self.l.columns((self.n_u + self.n_y) * self.rho, self.n_u * self.ell)
    }

    pub fn l_e(&self) -> DMatrixView<'_, T> {
        self.l
            .columns((self.n_u + self.n_y) * self.rho + self.n_u * self.ell, self.n_y * self.ell)
    }
}

/// One recursive least-squares estimator `target ≈ Θ·φ` with forgetting.
#[derive(Clone, Debug)]
pub struct RlsState<T: Real> {
    p: DMatrix<T>,
    theta: DMatrix<T>,
    lambda: T,
    delta: T,
    resets: usize,
}

impl<T: Real> RlsState<T> {
    pub fn new(n_regressors: usize, n_outputs: usize, lambda: f64, delta: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(RspcError::Config(format!("forgetting factor must lie in (0, 1], got {lambda}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(RspcError::Config(format!("initial covariance scale must be positive, got {delta}")));
        }
        Ok(Self {
            p: DMatrix::identity(n_regressors, n_regressors) * lit::<T>(delta),
            theta: DMatrix::zeros(n_outputs, n_regressors),
            lambda: lit(lambda),
            delta: lit(delta),
            resets: 0,
        })
    }

    pub fn p(&self) -> &DMatrix<T> {
        &self.p
    }
    pub fn theta(&self) -> &DMatrix<T> {
        &self.theta
    }
    pub fn lambda(&self) -> T {
        self.lambda
    }
    /// Number of covariance resets triggered by the diagonal floor.
    pub fn resets(&self) -> usize {
        self.resets
    }
    pub fn n_regressors(&self) -> usize {
        self.p.nrows()
    }

    /// `ξ = Pφ`, `Z = ξ/(λ + φᵀξ)`, `Θ ← Θ + (target − Θφ)Zᵀ`, `P ← (P − ξZᵀ)/λ`.
    ///
    /// Returns the a priori residual `target − Θφ`. Nothing is modified when
    /// the update would produce non-finite values.
    pub fn update(&mut self, phi: &DVector<T>, target: &DVector<T>) -> Result<DVector<T>> {
        dim_check("regressor", self.p.nrows(), phi.len())?;
        dim_check("target", self.theta.nrows(), target.len())?;
        let xi = &self.p * phi;
        let denom = self.lambda + phi.dot(&xi);
        let residual = target - &self.theta * phi;
        let finite = denom.is_finite()
            && denom > T::zero()
            && xi.iter().all(|v| v.is_finite())
            && residual.iter().all(|v| v.is_finite());
        if !finite {
            return Err(RspcError::EstimatorFault(format!(
                "non-finite RLS update (denominator {denom})"
            )));
        }
        let z = &xi / denom;
        self.theta.ger(T::one(), &residual, &z, T::one());

        // lower triangle from the symmetric product, mirrored: P stays exactly symmetric
        let inv_lambda = T::one() / self.lambda;
        let n = self.p.nrows();
        let mut floor_hit = false;
        for j in 0..n {
            let xj = z[j];
            for i in j..n {
                let v = (self.p[(i, j)] - xi[i] * xj) * inv_lambda;
                self.p[(i, j)] = v;
                self.p[(j, i)] = v;
            }
            floor_hit |= !(self.p[(j, j)] > lit::<T>(COVARIANCE_FLOOR));
        }
        if floor_hit {
            self.p = DMatrix::identity(n, n) * self.delta;
            self.resets += 1;
        }
        Ok(residual)
    }
}

/// `(ŷ, ê)` from one innovation update: regress `y(k)` on `W_{k−ℓ,ℓ}`, then
/// `ŷ = Γ_e(k)·W`, `ê = y − ŷ` with the freshly updated coefficients.
pub fn rls_innovation_update<T: Real>(
    state: &mut RlsState<T>,
    w_past: &DVector<T>,
    y_now: &DVector<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    state.update(w_past, y_now)?;
    let y_hat = &state.theta * w_past;
    let e_hat = y_now - &y_hat;
    Ok((y_hat, e_hat))
}

/// Predictor update with regressor `γ = [W^p; U^f; Ê^f]` and target `Y^f`.
pub fn rls_predictor_update<T: Real>(
    state: &mut RlsState<T>,
    gamma: &DVector<T>,
    y_future: &DVector<T>,
    rho: usize,
    ell: usize,
    n_u: usize,
    n_y: usize,
) -> Result<PredictorGains<T>> {
    dim_check("predictor regressor", (n_u + n_y) * (rho + ell), gamma.len())?;
    dim_check("predictor target", n_y * ell, y_future.len())?;
    state.update(gamma, y_future)?;
    PredictorGains::new(state.theta.clone(), rho, ell, n_u, n_y)
}

/// Least squares `min ‖Y − Θ·X‖² + ridge·‖Θ‖²` by QR of the (augmented) `Xᵀ`.
/// Regressors are the columns of `x`. Returns `Θ` and whether `X` was rank
/// deficient (in which case a ridge of at least [`RANK_RIDGE`] is applied).
pub fn least_squares<T: Real>(x: &DMatrix<T>, y: &DMatrix<T>, ridge: f64) -> Result<(DMatrix<T>, bool)> {
    dim_check("least-squares columns", x.ncols(), y.ncols())?;
    let p = x.nrows();
    let m = x.ncols();
    let solve = |ridge: f64| -> (Option<DMatrix<T>>, DVector<T>) {
        let extra = if ridge > 0.0 { p } else { 0 };
        let mut a = DMatrix::zeros(m + extra, p);
        a.rows_mut(0, m).copy_from(&x.transpose());
        let mut b = DMatrix::zeros(m + extra, y.nrows());
        b.rows_mut(0, m).copy_from(&y.transpose());
        if extra > 0 {
            a.rows_mut(m, p).fill_diagonal(lit::<T>(ridge.sqrt()));
        }
        let qr = a.qr();
        qr.q_tr_mul(&mut b);
        let r = qr.r();
        let coeffs = r.solve_upper_triangular(&b.rows(0, p).into_owned());
        (coeffs.map(|c| c.transpose()), r.diagonal())
    };
    let well_posed = |diag: &DVector<T>| {
        let max = diag.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
        max > T::zero() && diag.iter().all(|v| v.abs() > max * lit::<T>(RANK_TOL))
    };

    let mut full_rank = false;
    if p <= m {
        let (theta, diag) = solve(0.0);
        full_rank = well_posed(&diag);
        if full_rank && ridge == 0.0 {
            if let Some(theta) = theta {
                return Ok((theta, false));
            }
        }
    }
    let effective = if full_rank { ridge } else { ridge.max(RANK_RIDGE) };
    let theta = solve(effective)
        .0
        .filter(|t| t.iter().all(|v| v.is_finite()))
        .ok_or_else(|| RspcError::Numerical("regularized least squares failed".into()))?;
    Ok((theta, !full_rank))
}

/// Innovation sequence estimated by projection onto past data.
#[derive(Clone, Debug)]
pub struct BatchInnovation<T: Real> {
    /// Zero before `first`.
    pub e_hat: Signal<T>,
    pub first: usize,
    pub rank: usize,
    pub rank_deficient: bool,
}

impl<T: Real> BatchInnovation<T> {
    /// Wraps a known innovation sequence (all samples valid).
    pub fn known(e: Signal<T>) -> Self {
        Self {
            rank: 0,
            e_hat: e,
            first: 0,
            rank_deficient: false,
        }
    }
}

/// `ê(k) = y(k) − (Y/W)(k)` with `Y/W = Y·W†·W` over past windows of span `ρ`.
/// Singular values below `max(σ)·max(dim)·ε` are truncated in `W†`.
pub fn batch_innovation<T: Real>(u: &Signal<T>, y: &Signal<T>, rho: usize) -> Result<BatchInnovation<T>> {
    dim_check("input/output lengths", u.len(), y.len())?;
    let n = y.len();
    if rho == 0 || n <= rho {
        return Err(RspcError::Range(format!(
            "innovation estimate needs more than rho = {rho} samples, got {n}"
        )));
    }
    let cols = n - rho;
    let w = IoHankel::new(u, y, 0, rho, cols)?.stacked();
    let y1 = hankel(y, rho, 1, cols)?.into_data();
    let svd = w.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().fold(T::zero(), |acc, v| acc.max(*v));
    let tol = max_sv * lit::<T>(w.nrows().max(w.ncols()) as f64) * T::default_epsilon();
    let rank = svd.rank(tol);
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|m| RspcError::Numerical(format!("pseudo-inverse failed: {m}")))?;
    let fitted = (&y1 * pinv) * &w;
    let residual = y1 - fitted;
    let mut e_hat = Signal::zeros(y.dim(), n);
    for j in 0..cols {
        e_hat.set_sample(rho + j, &residual.column(j).into_owned());
    }
    Ok(BatchInnovation {
        e_hat,
        first: rho,
        rank,
        rank_deficient: rank < w.nrows(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    /// Include `Ê^f` as a regressor; without it `L_e` is returned as zero.
    pub with_innovation: bool,
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            with_innovation: true,
            ridge: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchFit<T: Real> {
    pub gains: PredictorGains<T>,
    pub rank_deficient: bool,
}

/// Regressor columns `[W^p; U^f; Ê^f]` and targets `Y^f` for every window
/// whose future part lies where `ê` is valid.
pub fn predictor_regressors<T: Real>(
    u: &Signal<T>,
    y: &Signal<T>,
    innov: &BatchInnovation<T>,
    rho: usize,
    ell: usize,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    dim_check("input/output lengths", u.len(), y.len())?;
    dim_check("innovation length", y.len(), innov.e_hat.len())?;
    let start = innov.first.saturating_sub(rho);
    let needed = start + rho + ell;
    if rho == 0 || ell == 0 || y.len() < needed {
        return Err(RspcError::Range(format!(
            "predictor fit needs at least {needed} samples, got {}",
            y.len()
        )));
    }
    let cols = y.len() - needed + 1;
    let past = IoHankel::new(u, y, start, rho, cols)?.stacked();
    let uf = hankel(u, start + rho, ell, cols)?.into_data();
    let ef = hankel(&innov.e_hat, start + rho, ell, cols)?.into_data();
    let yf = hankel(y, start + rho, ell, cols)?.into_data();
    Ok((vstack(&[&past, &uf, &ef]), yf))
}

/// Fits `L` by least squares of `Y^f` on `[W^p; U^f; Ê^f]` (or `[W^p; U^f]`).
pub fn batch_fit_predictor<T: Real>(
    u: &Signal<T>,
    y: &Signal<T>,
    innov: &BatchInnovation<T>,
    rho: usize,
    ell: usize,
    opts: FitOptions,
) -> Result<BatchFit<T>> {
    let (n_u, n_y) = (u.dim(), y.dim());
    let (x, yf) = predictor_regressors(u, y, innov, rho, ell)?;
    let keep = if opts.with_innovation { x.nrows() } else { (n_u + n_y) * rho + n_u * ell };
    let (theta, rank_deficient) = least_squares(&x.rows(0, keep).into_owned(), &yf, opts.ridge)?;
    let l = if opts.with_innovation {
        theta
    } else {
        hstack(&[&theta, &DMatrix::zeros(n_y * ell, n_y * ell)])
    };
    Ok(BatchFit {
        gains: PredictorGains::new(l, rho, ell, n_u, n_y)?,
        rank_deficient,
    })
}

/// Markov-parameter errors of the naive and innovation-augmented fits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasReport {
    /// `‖L_u − H_ℓ‖_F` without `Ê^f`.
    pub biased_error: f64,
    /// `‖L_u − H_ℓ‖_F` with `Ê^f`.
    pub unbiased_error: f64,
    /// `‖H_ℓ‖_F`.
    pub reference_norm: f64,
}

pub fn bias_comparison<T: Real>(
    real: &LtiRealization<T>,
    u: &Signal<T>,
    y: &Signal<T>,
    rho: usize,
    ell: usize,
) -> Result<BiasReport> {
    let innov = batch_innovation(u, y, rho)?;
    let truth = toeplitz(real, ell);
    let err = |with_innovation| -> Result<f64> {
        let fit = batch_fit_predictor(u, y, &innov, rho, ell, FitOptions { with_innovation, ridge: 0.0 })?;
        Ok(to_f64((fit.gains.l_u() - &truth).norm()))
    };
    Ok(BiasReport {
        biased_error: err(false)?,
        unbiased_error: err(true)?,
        reference_norm: to_f64(truth.norm()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorSettings {
    pub rho: usize,
    pub ell: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub lambda_e: f64,
    pub lambda_y: f64,
    pub delta: f64,
}

/// What one call to [`RecursiveEstimator::observe`] did.
#[derive(Clone, Debug)]
pub struct ObserveOutcome<T: Real> {
    pub e_hat: Option<DVector<T>>,
    /// `‖Y^f − L·γ‖` before the predictor update, when one happened.
    pub prediction_error: Option<T>,
    pub fault: Option<String>,
}

/// Both recursive estimators plus the input/output/innovation history they share.
///
/// At sample `k` the histories hold `u(0..k−1)`, `y(0..k−1)`. [`observe`](Self::observe)
/// takes `y(k)`, regresses it on `W_{k−ℓ,ℓ}` to get `ê(k)`, then updates the
/// predictor with `γ = [W_{k−ℓ−ρ,ρ}; U_{k−ℓ,ℓ}; Ê_{k−ℓ,ℓ}]` against `Y_{k−ℓ,ℓ}`,
/// the latest window that `u(k)` does not enter. [`record_input`](Self::record_input)
/// then appends `u(k)`.
#[derive(Clone, Debug)]
pub struct RecursiveEstimator<T: Real> {
    settings: EstimatorSettings,
    innovation: RlsState<T>,
    predictor: RlsState<T>,
    u_hist: VecDeque<DVector<T>>,
    y_hist: VecDeque<DVector<T>>,
    e_hist: VecDeque<DVector<T>>,
    samples: usize,
    inputs: usize,
    predictor_updates: usize,
    fault: Option<String>,
}

impl<T: Real> RecursiveEstimator<T> {
    pub fn new(settings: EstimatorSettings) -> Result<Self> {
        let s = settings;
        if s.rho == 0 || s.ell == 0 {
            return Err(RspcError::Config("rho and ell must be at least 1".into()));
        }
        Ok(Self {
            innovation: RlsState::new((s.n_u + s.n_y) * s.ell, s.n_y, s.lambda_e, s.delta)?,
            predictor: RlsState::new((s.n_u + s.n_y) * (s.rho + s.ell), s.n_y * s.ell, s.lambda_y, s.delta)?,
            settings,
            u_hist: VecDeque::new(),
            y_hist: VecDeque::new(),
            e_hist: VecDeque::new(),
            samples: 0,
            inputs: 0,
            predictor_updates: 0,
            fault: None,
        })
    }

    pub fn settings(&self) -> &EstimatorSettings {
        &self.settings
    }
    pub fn innovation_state(&self) -> &RlsState<T> {
        &self.innovation
    }
    pub fn predictor_state(&self) -> &RlsState<T> {
        &self.predictor
    }
    pub fn predictor_updates(&self) -> usize {
        self.predictor_updates
    }
    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    pub fn gains(&self) -> PredictorGains<T> {
        let s = &self.settings;
        PredictorGains {
            l: self.predictor.theta.clone(),
            rho: s.rho,
            ell: s.ell,
            n_u: s.n_u,
            n_y: s.n_y,
        }
    }

    fn capacity(&self) -> usize {
        self.settings.rho + self.settings.ell + 1
    }

    /// Sample `back` steps before the newest stored one (`back = 1` is newest).
    fn stacked(hist: &VecDeque<DVector<T>>, from_back: usize, span: usize) -> impl Iterator<Item = &DVector<T>> {
        hist.range(hist.len() - from_back..hist.len() - from_back + span)
    }

    fn gather(parts: &[(&VecDeque<DVector<T>>, usize, usize)]) -> DVector<T> {
        let mut out = Vec::new();
        for &(hist, from_back, span) in parts {
            for v in Self::stacked(hist, from_back, span) {
                out.extend(v.iter().copied());
            }
        }
        DVector::from_vec(out)
    }

    /// Estimator faults do not abort: the failing update is skipped (gains stay
    /// frozen), the history still advances, and the reason is reported in the outcome.
    pub fn observe(&mut self, y_now: &DVector<T>) -> Result<ObserveOutcome<T>> {
        let s = self.settings;
        dim_check("measured output", s.n_y, y_now.len())?;
        if self.inputs != self.samples {
            return Err(RspcError::EstimatorFault("record_input must follow every observe".into()));
        }
        let mut outcome = ObserveOutcome { e_hat: None, prediction_error: None, fault: None };
        let k = self.samples;

        let mut e_now = DVector::zeros(s.n_y);
        if k >= s.ell {
            let w = Self::gather(&[(&self.u_hist, s.ell, s.ell), (&self.y_hist, s.ell, s.ell)]);
            match rls_innovation_update(&mut self.innovation, &w, y_now) {
                Ok((_, e)) => {
                    e_now = e.clone();
                    outcome.e_hat = Some(e);
                }
                Err(err) => outcome.fault = Some(err.to_string()),
            }
        }

        // innovations are meaningful from sample ℓ on
        if outcome.fault.is_none() && k >= s.ell + s.ell.max(s.rho) {
            let back = s.ell + s.rho;
            let gamma = Self::gather(&[
                (&self.u_hist, back, s.rho),
                (&self.y_hist, back, s.rho),
                (&self.u_hist, s.ell, s.ell),
                (&self.e_hist, s.ell, s.ell),
            ]);
            let target = Self::gather(&[(&self.y_hist, s.ell, s.ell)]);
            match self.predictor.update(&gamma, &target) {
                Ok(residual) => {
                    outcome.prediction_error = Some(residual.norm());
                    self.predictor_updates += 1;
                }
                Err(err) => outcome.fault = Some(err.to_string()),
            }
        }
        if let Some(f) = &outcome.fault {
            self.fault = Some(f.clone());
        }

        self.y_hist.push_back(y_now.clone());
        self.e_hist.push_back(e_now);
        if self.y_hist.len() > self.capacity() {
            self.y_hist.pop_front();
            self.e_hist.pop_front();
        }
        self.samples += 1;
        Ok(outcome)
    }

    /// `ΔW^p = [Δu(k−ρ..k−1); Δy(k−ρ..k−1)]` after `y(k)` has been observed,
    /// or `None` while fewer than `ρ + 1` past samples exist.
    pub fn past_increments(&self) -> Option<DVector<T>> {
        let rho = self.settings.rho;
        if self.inputs != self.samples - 1 || self.u_hist.len() < rho + 1 || self.y_hist.len() < rho + 2 {
            return None;
        }
        let mut out = Vec::with_capacity((self.settings.n_u + self.settings.n_y) * rho);
        let nu = self.u_hist.len();
        for j in nu - rho..nu {
            out.extend((&self.u_hist[j] - &self.u_hist[j - 1]).iter().copied());
        }
        let ny = self.y_hist.len() - 1;
        for j in ny - rho..ny {
            out.extend((&self.y_hist[j] - &self.y_hist[j - 1]).iter().copied());
        }
        Some(DVector::from_vec(out))
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn record_input(&mut self, u: &DVector<T>) -> Result<()> {
        dim_check("applied input", self.settings.n_u, u.len())?;
        if self.inputs + 1 != self.samples {
            return Err(RspcError::EstimatorFault("record_input called twice for one sample".into()));
        }
        self.u_hist.push_back(u.clone());
        self.inputs += 1;
        if self.u_hist.len() > self.capacity() {
            self.u_hist.pop_front();
        }
        Ok(())
    }

    /// Writes `P_e`, `Gamma_e`, `P_y` and `L` as CSV matrices into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (name, m) in [
            ("P_e", self.innovation.p()),
            ("Gamma_e", self.innovation.theta()),
            ("P_y", self.predictor.p()),
            ("L", self.predictor.theta()),
        ] {
            let path = dir.join(format!("{name}.csv"));
            write_matrix_csv(&path, m)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Row-major CSV: header `rows,cols`, the two dimensions, then one line per row.
pub fn write_matrix_csv<T: Real>(path: &Path, m: &DMatrix<T>) -> Result<()> {
    let csv_err = |source| RspcError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(["rows", "cols"]).map_err(csv_err)?;
    w.write_record([m.nrows().to_string(), m.ncols().to_string()]).map_err(csv_err)?;
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| format!("{:e}", to_f64(*v))))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|source| RspcError::Io { path: path.to_path_buf(), source })
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let csv_err = |source| RspcError::Csv { path: path.to_path_buf(), source };
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let mut records = r.records();
    let bad = |what: &str| RspcError::Config(format!("{}: {what}", path.display()));
    let dims = records.next().ok_or_else(|| bad("missing dimensions"))?.map_err(csv_err)?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("bad dimension"));
    let (rows, cols) = (parse(&dims[0])?, parse(&dims[1])?);
    let mut data = Vec::with_capacity(rows * cols);
    for rec in records {
        for field in rec.map_err(csv_err)?.iter() {
            data.push(field.trim().parse::<f64>().map_err(|_| bad("bad value"))?);
        }
    }
    dim_check("matrix entries", rows * cols, data.len())?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}
