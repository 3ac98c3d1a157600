//! Block-structured linear algebra behind subspace predictors: stacked
//! windows, block Hankel matrices, the cumulative-sum operator `S` and its
//! companion stack of identities, extended observability/controllability,
//! block-Toeplitz Markov matrices and the noise-free data equation.
//!
//! Past input/output data are always stacked inputs first: `W = [U; Y]`.

use nalgebra::{DMatrix, DVector, DVectorView, Dyn, U1};

use crate::error::{dim_check, Result, RspcError};
use crate::scalar::{lit, Real};

/// Frobenius bound on `Ã^ρ` below which the state can be replaced by past data.
pub const TRUNCATION_TOLERANCE: f64 = 1e-6;

/// Time-indexed sequence of equally sized vectors; column `t` holds `x(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal<T: Real> {
    data: DMatrix<T>,
}

impl<T: Real> Signal<T> {
    pub fn from_matrix(data: DMatrix<T>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize, len: usize) -> Self {
        Self {
            data: DMatrix::zeros(dim, len),
        }
    }

    /// `f(component, t)`.
    pub fn from_fn(dim: usize, len: usize, f: impl FnMut(usize, usize) -> T) -> Self {
        Self {
            data: DMatrix::from_fn(dim, len, f),
        }
    }

    pub fn from_samples(samples: &[DVector<T>]) -> Result<Self> {
        let dim = samples.first().map_or(0, |s| s.len());
        for (t, s) in samples.iter().enumerate() {
            dim_check(&format!("sample {t} length"), dim, s.len())?;
        }
        Ok(Self {
            data: DMatrix::from_fn(dim, samples.len(), |i, t| samples[t][i]),
        })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn sample(&self, t: usize) -> DVectorView<'_, T> {
        self.data.column(t)
    }

    pub fn set_sample(&mut self, t: usize, value: &DVector<T>) {
        self.data.set_column(t, value);
    }

    pub fn set_component(&mut self, component: usize, t: usize, value: T) {
        self.data[(component, t)] = value;
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.data
    }

    fn require(&self, first: usize, last: usize) -> Result<()> {
        if last < self.len() && first <= last {
            Ok(())
        } else {
            Err(RspcError::Range(format!(
                "window [{first}, {last}] outside signal of length {}",
                self.len()
            )))
        }
    }
}

/// Column `[x(k); x(k+1); …; x(k+span-1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedVector<T: Real> {
    origin: usize,
    span: usize,
    block_dim: usize,
    data: DVector<T>,
}

impl<T: Real> StackedVector<T> {
    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn span(&self) -> usize {
        self.span
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn data(&self) -> &DVector<T> {
        &self.data
    }

    pub fn into_data(self) -> DVector<T> {
        self.data
    }

    pub fn block(&self, b: usize) -> DVectorView<'_, T> {
        self.data.rows(b * self.block_dim, self.block_dim)
    }
}

/// Block Hankel matrix whose column `j` is the stacked window starting at `origin + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct HankelMatrix<T: Real> {
    origin: usize,
    rows_span: usize,
    cols: usize,
    block_dim: usize,
    data: DMatrix<T>,
}

impl<T: Real> HankelMatrix<T> {
    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn rows_span(&self) -> usize {
        self.rows_span
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn data(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<T> {
        self.data
    }

    /// Block `(i, j)`, i.e. `x(origin + i + j)`.
    pub fn block(&self, i: usize, j: usize) -> DVectorView<'_, T> {
        self.data
            .generic_view((i * self.block_dim, j), (Dyn(self.block_dim), U1))
    }

    pub fn column(&self, j: usize) -> StackedVector<T> {
        StackedVector {
            origin: self.origin + j,
            span: self.rows_span,
            block_dim: self.block_dim,
            data: self.data.column(j).into_owned(),
        }
    }
}

pub fn stack_vector<T: Real>(signal: &Signal<T>, k: usize, span: usize) -> Result<StackedVector<T>> {
    if span == 0 {
        return Err(RspcError::Range("stack span must be at least 1".into()));
    }
    signal.require(k, k + span - 1)?;
    let n = signal.dim();
    let mut data = DVector::zeros(n * span);
    for b in 0..span {
        data.rows_mut(b * n, n).copy_from(&signal.sample(k + b));
    }
    Ok(StackedVector {
        origin: k,
        span,
        block_dim: n,
        data,
    })
}

pub fn hankel<T: Real>(
    signal: &Signal<T>,
    k: usize,
    span: usize,
    cols: usize,
) -> Result<HankelMatrix<T>> {
    if span == 0 || cols == 0 {
        return Err(RspcError::Range(format!(
            "hankel needs span >= 1 and cols >= 1 (got {span}, {cols})"
        )));
    }
    signal.require(k, k + span + cols - 2)?;
    let n = signal.dim();
    let mut data = DMatrix::zeros(n * span, cols);
    for j in 0..cols {
        for b in 0..span {
            data.view_mut((b * n, j), (n, 1))
                .copy_from(&signal.sample(k + j + b));
        }
    }
    Ok(HankelMatrix {
        origin: k,
        rows_span: span,
        cols,
        block_dim: n,
        data,
    })
}

/// Input and output Hankel matrices over the same window, stacked as `[U; Y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IoHankel<T: Real> {
    pub inputs: HankelMatrix<T>,
    pub outputs: HankelMatrix<T>,
}

impl<T: Real> IoHankel<T> {
    pub fn new(u: &Signal<T>, y: &Signal<T>, k: usize, span: usize, cols: usize) -> Result<Self> {
        Ok(Self {
            inputs: hankel(u, k, span, cols)?,
            outputs: hankel(y, k, span, cols)?,
        })
    }

    pub fn span(&self) -> usize {
        self.inputs.rows_span
    }

    pub fn cols(&self) -> usize {
        self.inputs.cols
    }

    pub fn stacked(&self) -> DMatrix<T> {
        vstack(&[self.inputs.data(), self.outputs.data()])
    }
}

/// `[U_{k,span}; Y_{k,span}]` for a single window.
pub fn io_stack<T: Real>(u: &Signal<T>, y: &Signal<T>, k: usize, span: usize) -> Result<DVector<T>> {
    let su = stack_vector(u, k, span)?;
    let sy = stack_vector(y, k, span)?;
    let mut out = DVector::zeros(su.data.len() + sy.data.len());
    out.rows_mut(0, su.data.len()).copy_from(&su.data);
    out.rows_mut(su.data.len(), sy.data.len()).copy_from(&sy.data);
    Ok(out)
}

pub(crate) fn vstack<T: Real>(parts: &[&DMatrix<T>]) -> DMatrix<T> {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.view_mut((r, 0), (p.nrows(), cols)).copy_from(*p);
        r += p.nrows();
    }
    out
}

pub(crate) fn hstack<T: Real>(parts: &[&DMatrix<T>]) -> DMatrix<T> {
    let rows = parts.first().map_or(0, |p| p.nrows());
    let cols = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for p in parts {
        out.view_mut((0, c), (rows, p.ncols())).copy_from(*p);
        c += p.ncols();
    }
    out
}

/// `S_{ℓ,n}` (block lower-triangular identities) and `𝟙_{ℓ,n}` (stacked identities).
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralMatrices<T: Real> {
    pub span: usize,
    pub block_dim: usize,
    pub s_lower: DMatrix<T>,
    pub ones_stack: DMatrix<T>,
}

pub fn structural<T: Real>(span: usize, n: usize) -> StructuralMatrices<T> {
    let s_lower = DMatrix::from_fn(span * n, span * n, |r, c| {
        if r / n >= c / n && r % n == c % n {
            T::one()
        } else {
            T::zero()
        }
    });
    let ones_stack = DMatrix::from_fn(span * n, n, |r, c| if r % n == c { T::one() } else { T::zero() });
    StructuralMatrices {
        span,
        block_dim: n,
        s_lower,
        ones_stack,
    }
}

/// `S_{ℓ,n}·m` computed as a running sum over row blocks of height `n`.
pub fn block_cumsum_rows<T: Real>(m: &DMatrix<T>, n: usize) -> DMatrix<T> {
    let mut out = m.clone();
    let blocks = m.nrows() / n;
    for b in 1..blocks {
        for r in 0..n {
            let prev = out.row((b - 1) * n + r).into_owned();
            let mut cur = out.row_mut(b * n + r);
            cur += prev;
        }
    }
    out
}

/// `m·S_{ℓ,n}ᵀ`: running sum over column blocks of width `n`.
pub fn block_cumsum_cols<T: Real>(m: &DMatrix<T>, n: usize) -> DMatrix<T> {
    let mut out = m.clone();
    let blocks = m.ncols() / n;
    for b in 1..blocks {
        for c in 0..n {
            let prev = out.column((b - 1) * n + c).into_owned();
            let mut cur = out.column_mut(b * n + c);
            cur += prev;
        }
    }
    out
}

/// `𝟙_{span,n}·v`.
pub fn replicate<T: Real>(v: &DVector<T>, span: usize) -> DVector<T> {
    let n = v.len();
    DVector::from_fn(n * span, |r, _| v[r % n])
}

/// Innovation-form state-space model `x⁺ = Ax + Bu + Ke`, `y = Cx + Du + e`, `cov(e) = R_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiRealization<T: Real> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    c: DMatrix<T>,
    d: DMatrix<T>,
    k: DMatrix<T>,
    re: DMatrix<T>,
}

impl<T: Real> LtiRealization<T> {
    pub fn new(
        a: DMatrix<T>,
        b: DMatrix<T>,
        c: DMatrix<T>,
        d: DMatrix<T>,
        k: DMatrix<T>,
        re: DMatrix<T>,
    ) -> Result<Self> {
        let nx = a.nrows();
        dim_check("A columns", nx, a.ncols())?;
        dim_check("B rows", nx, b.nrows())?;
        dim_check("C columns", nx, c.ncols())?;
        let (nu, ny) = (b.ncols(), c.nrows());
        dim_check("D rows", ny, d.nrows())?;
        dim_check("D columns", nu, d.ncols())?;
        dim_check("K rows", nx, k.nrows())?;
        dim_check("K columns", ny, k.ncols())?;
        dim_check("R_e rows", ny, re.nrows())?;
        dim_check("R_e columns", ny, re.ncols())?;
        Ok(Self { a, b, c, d, k, re })
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<T> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<T> {
        &self.d
    }
    pub fn k(&self) -> &DMatrix<T> {
        &self.k
    }
    pub fn re(&self) -> &DMatrix<T> {
        &self.re
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// `Ã = A − KC`.
    pub fn predictor_a(&self) -> DMatrix<T> {
        &self.a - &self.k * &self.c
    }

    /// `B̃ = B − KD`.
    pub fn predictor_b(&self) -> DMatrix<T> {
        &self.b - &self.k * &self.d
    }

    /// Steady-state gain `C(I − A)⁻¹B + D`.
    pub fn dc_gain(&self) -> Result<DMatrix<T>> {
        let i_minus_a = DMatrix::identity(self.n_x(), self.n_x()) - &self.a;
        let x = i_minus_a
            .lu()
            .solve(&self.b)
            .ok_or_else(|| RspcError::Numerical("I − A is singular".into()))?;
        Ok(&self.c * x + &self.d)
    }

    pub fn is_observable(&self) -> bool {
        let obs = extended_observability(&self.a, &self.c, self.n_x());
        let sv = obs.singular_values();
        let max = sv.max();
        let tol = max * lit::<T>(1e-10) * lit::<T>(obs.nrows().max(obs.ncols()) as f64);
        sv.iter().filter(|s| **s > tol).count() == self.n_x()
    }

    /// Checks: `Ã` strictly stable, `(A, C)` observable, `R_e` symmetric positive semidefinite.
    pub fn check_invariants(&self) -> Result<()> {
        let rho = spectral_radius(&self.predictor_a());
        if rho >= T::one() {
            return Err(RspcError::Config(format!(
                "predictor matrix A − KC not stable (spectral radius {rho})"
            )));
        }
        if !self.is_observable() {
            return Err(RspcError::Config("(A, C) is not observable".into()));
        }
        let asym = (&self.re - self.re.transpose()).abs().max();
        if asym > lit::<T>(1e-12) {
            return Err(RspcError::Config("R_e is not symmetric".into()));
        }
        let min_eig = self.re.clone().symmetric_eigenvalues().min();
        if min_eig < -lit::<T>(1e-12) {
            return Err(RspcError::Config(format!(
                "R_e is not positive semidefinite (min eigenvalue {min_eig})"
            )));
        }
        Ok(())
    }
}

pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| (z.re * z.re + z.im * z.im).sqrt())
        .fold(T::zero(), |acc, v| acc.max(v))
}

/// `Γ_ℓ(A, C)`: row block `i` is `C·Aⁱ`.
pub fn extended_observability<T: Real>(a: &DMatrix<T>, c: &DMatrix<T>, span: usize) -> DMatrix<T> {
    let (ny, nx) = (c.nrows(), c.ncols());
    let mut out = DMatrix::zeros(ny * span, nx);
    let mut block = c.clone();
    for i in 0..span {
        out.view_mut((i * ny, 0), (ny, nx)).copy_from(&block);
        block = &block * a;
    }
    out
}

pub fn observability<T: Real>(real: &LtiRealization<T>, span: usize) -> DMatrix<T> {
    extended_observability(&real.a, &real.c, span)
}

/// `𝒦_ℓ(A, B) = [A^{ℓ−1}B, …, AB, B]`.
pub fn controllability<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, span: usize) -> DMatrix<T> {
    let (nx, nu) = (b.nrows(), b.ncols());
    let mut out = DMatrix::zeros(nx, nu * span);
    let mut block = b.clone();
    for j in (0..span).rev() {
        out.view_mut((0, j * nu), (nx, nu)).copy_from(&block);
        block = a * &block;
    }
    out
}

/// `H_ℓ(A, B, C, D)`: lower block-triangular, `D` on the diagonal and `C A^{j−1} B`
/// on the `j`-th sub-diagonal.
pub fn block_toeplitz<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    c: &DMatrix<T>,
    d: &DMatrix<T>,
    span: usize,
) -> DMatrix<T> {
    let (ny, nu) = (d.nrows(), d.ncols());
    let mut markov = Vec::with_capacity(span);
    markov.push(d.clone());
    let mut ab = b.clone();
    for _ in 1..span {
        markov.push(c * &ab);
        ab = a * ab;
    }
    let mut out = DMatrix::zeros(ny * span, nu * span);
    for i in 0..span {
        for j in 0..=i {
            out.view_mut((i * ny, j * nu), (ny, nu)).copy_from(&markov[i - j]);
        }
    }
    out
}

pub fn toeplitz<T: Real>(real: &LtiRealization<T>, span: usize) -> DMatrix<T> {
    block_toeplitz(&real.a, &real.b, &real.c, &real.d, span)
}

/// Future outputs reconstructed from past data, future inputs and future innovations.
#[derive(Clone, Debug)]
pub struct DataEquation<T: Real> {
    pub y_future: DMatrix<T>,
    /// `‖Ã^ρ‖_F`.
    pub truncation_norm: T,
    /// False when `Ã` is unstable or the truncation exceeds [`TRUNCATION_TOLERANCE`].
    pub valid: bool,
}

/// `Γ_ℓ(A,C)·𝒦·W^p + H_ℓ(A,B,C,D)·U^f + H_ℓ(A,K,C,I)·E^f` with
/// `𝒦 = [𝒦_ρ(Ã, B̃), 𝒦_ρ(Ã, K)]`.
pub fn data_equation_rhs<T: Real>(
    real: &LtiRealization<T>,
    past: &IoHankel<T>,
    future_u: &HankelMatrix<T>,
    future_e: &HankelMatrix<T>,
) -> Result<DataEquation<T>> {
    let (nu, ny) = (real.n_u(), real.n_y());
    dim_check("past input block", nu, past.inputs.block_dim())?;
    dim_check("past output block", ny, past.outputs.block_dim())?;
    dim_check("past output span", past.span(), past.outputs.rows_span())?;
    dim_check("past output columns", past.cols(), past.outputs.cols())?;
    dim_check("future input block", nu, future_u.block_dim())?;
    dim_check("future innovation block", ny, future_e.block_dim())?;
    dim_check("future innovation span", future_u.rows_span(), future_e.rows_span())?;
    dim_check("future input columns", past.cols(), future_u.cols())?;
    dim_check("future innovation columns", past.cols(), future_e.cols())?;

    let rho = past.span();
    let span = future_u.rows_span();
    let at = real.predictor_a();
    let bt = real.predictor_b();
    let state_map = hstack(&[&controllability(&at, &bt, rho), &controllability(&at, &real.k, rho)]);
    let gamma = observability(real, span);
    let h_u = toeplitz(real, span);
    let h_e = block_toeplitz(&real.a, &real.k, &real.c, &DMatrix::identity(ny, ny), span);

    let y_future =
        gamma * (state_map * past.stacked()) + h_u * future_u.data() + h_e * future_e.data();

    let truncation_norm = at.pow(rho as u32).norm();
    let valid = spectral_radius(&at) < T::one() && truncation_norm < lit(TRUNCATION_TOLERANCE);
    Ok(DataEquation {
        y_future,
        truncation_norm,
        valid,
    })
}

/// Observer gain `K` placing the eigenvalues of `A − KC` at `poles`.
///
/// Solves `T·A − diag(poles)·T = G·C` row by row (`t_i = g_i C (A − p_i I)⁻¹`)
/// and returns `K = T⁻¹G`. Poles must differ from the eigenvalues of `A`.
pub fn assign_observer_poles<T: Real>(
    a: &DMatrix<T>,
    c: &DMatrix<T>,
    poles: &[T],
    g: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let nx = a.nrows();
    dim_check("pole count", nx, poles.len())?;
    dim_check("G rows", nx, g.nrows())?;
    dim_check("G columns", c.nrows(), g.ncols())?;
    let mut t = DMatrix::zeros(nx, nx);
    for (i, &p) in poles.iter().enumerate() {
        let shifted = a - DMatrix::identity(nx, nx) * p;
        let rhs = (g.row(i) * c).transpose();
        let row = shifted
            .transpose()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| RspcError::Numerical(format!("pole {p} coincides with an eigenvalue of A")))?;
        t.row_mut(i).copy_from(&row.transpose());
    }
    t.lu()
        .solve(g)
        .ok_or_else(|| RspcError::Numerical("pole assignment transform is singular".into()))
}
