//! Scheduled LPV stand-in for the four-flap bluff body: anchor realizations
//! over yaw angle and grid height, bilinear interpolation between them, the
//! sensor-to-output map, actuator limits, scheduling profiles and PRBS input.
//!
//! Each anchor has eight states: four wake states driven by the flaps and four
//! first-order sensor filters standing in for the low-pass stage of the
//! pressure acquisition. A constant affine term `b(p)` in the state equation
//! carries the operating-point pressure offsets, so the zero-input steady
//! output moves with `β` (horizontal gradient) and `h_g` (vertical gradient).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Result, RspcError};
use crate::scalar::{lit, Real};
use crate::subspace::{assign_observer_poles, LtiRealization, Signal};

pub const N_X: usize = 8;
pub const N_U: usize = 4;
pub const N_SENSORS: usize = 4;
pub const N_Y: usize = 3;
pub const SAMPLE_PERIOD: f64 = 0.1;
pub const FLAP_LIMIT_DEG: f64 = 7.0;
pub const FLAP_RATE_DEG_PER_S: f64 = 10.0;
/// Largest change of a flap angle over one sample.
pub const FLAP_STEP_DEG: f64 = FLAP_RATE_DEG_PER_S * SAMPLE_PERIOD;

pub const BETA_RANGE: (f64, f64) = (-5.0, 5.0);
pub const H_G_RANGE: (f64, f64) = (-200.0, 100.0);
pub const ANCHOR_BETAS: [f64; 11] = [-5., -4., -3., -2., -1., 0., 1., 2., 3., 4., 5.];
pub const ANCHOR_H_G: [f64; 4] = [-200., -100., 0., 100.];

/// Rows: horizontal gradient, vertical gradient, level. Columns: sensors
/// top-left, top-right, bottom-left, bottom-right.
pub const OUTPUT_MAP: [[f64; 4]; 3] = [[1., -1., 1., -1.], [1., 1., -1., -1.], [1., 1., 1., 1.]];

const SENSOR_POLES: [f64; 4] = [0.15, 0.2, 0.25, 0.3];
const SENSOR_COUPLING: f64 = 0.2;
const WAKE_MIXING: [[f64; 4]; 4] = [
    [0.0, 0.07, 0.02, -0.03],
    [0.04, 0.0, 0.01, 0.05],
    [0.02, -0.04, 0.0, 0.06],
    [0.03, 0.05, -0.02, 0.0],
];
/// Sensor pattern invisible to the output map and the flap gain it receives.
const NULL_PATTERN: [f64; 4] = [0.5, -0.5, -0.5, 0.5];
const NULL_GAIN: [f64; 4] = [0.02, 0.02, -0.03, -0.03];
const OBSERVER_POLES: [f64; 8] = [0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45];
const OBSERVER_SHAPE: [[f64; 3]; 8] = [
    [1., 0., 0.],
    [0., 1., 0.],
    [0., 0., 1.],
    [1., 1., 0.],
    [0., 1., 1.],
    [1., 0., 1.],
    [1., 1., 0.],
    [0., 0., 1.],
];

fn default_dc_gain() -> [[f64; 4]; 3] {
    [
        [0.02, -0.02, 0.12, -0.12],
        [0.11, -0.12, 0.01, -0.02],
        [0.05, 0.06, 0.045, 0.055],
    ]
}

fn default_reference_offset() -> [f64; 3] {
    [0.0, -0.20, -0.60]
}

fn default_noise_std() -> f64 {
    0.01
}

fn default_lipschitz() -> f64 {
    1e-3
}

fn default_plant_seed() -> u64 {
    7
}

/// Plant calibration constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    /// Steady-state flap-to-output gain at zero yaw (degrees to output units).
    #[serde(default = "default_dc_gain")]
    pub dc_gain: [[f64; 4]; 3],
    /// Zero-input steady output at `β = 0`, `h_g = −200`.
    #[serde(default = "default_reference_offset")]
    pub reference_offset: [f64; 3],
    /// Standard deviation of each innovation channel.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Frobenius bound on `‖A(p) − A(p′)‖` for `|β − β′| ≤ 0.1°`.
    #[serde(default = "default_lipschitz")]
    pub lipschitz_bound: f64,
    #[serde(default = "default_plant_seed")]
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            dc_gain: default_dc_gain(),
            reference_offset: default_reference_offset(),
            noise_std: default_noise_std(),
            lipschitz_bound: default_lipschitz(),
            seed: default_plant_seed(),
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(RspcError::Config(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        if !(self.lipschitz_bound > 0.0) {
            return Err(RspcError::Config("lipschitz_bound must be positive".into()));
        }
        let all_finite = self.dc_gain.iter().flatten().chain(&self.reference_offset).all(|v| v.is_finite());
        if !all_finite {
            return Err(RspcError::Config("plant calibration constants must be finite".into()));
        }
        Ok(())
    }

    /// Zero-input steady output at `p`.
    pub fn steady_offset(&self, p: SchedulingPoint) -> [f64; 3] {
        let (b, h) = (p.beta, (p.h_g - H_G_RANGE.0) / (H_G_RANGE.1 - H_G_RANGE.0));
        let r = self.reference_offset;
        [
            r[0] + 0.06 * b,
            r[1] + 0.03 * b + 0.15 * h,
            r[2] - 0.02 * b * b + 0.01 * b + 0.05 * h,
        ]
    }
}

/// Operating point: yaw angle in degrees, grid height in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulingPoint {
    pub beta: f64,
    pub h_g: f64,
}

impl SchedulingPoint {
    pub fn new(beta: f64, h_g: f64) -> Result<Self> {
        let p = Self { beta, h_g };
        p.validate()?;
        Ok(p)
    }

    pub fn reference() -> Self {
        Self { beta: 0.0, h_g: -200.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if inside(self.beta, BETA_RANGE) && inside(self.h_g, H_G_RANGE) {
            Ok(())
        } else {
            Err(RspcError::Range(format!(
                "scheduling point (beta {}, h_g {}) outside [{}, {}] x [{}, {}]",
                self.beta, self.h_g, BETA_RANGE.0, BETA_RANGE.1, H_G_RANGE.0, H_G_RANGE.1
            )))
        }
    }
}

pub fn output_map<T: Real>() -> DMatrix<T> {
    DMatrix::from_fn(N_Y, N_SENSORS, |r, c| lit(OUTPUT_MAP[r][c]))
}

#[derive(Clone, Debug)]
struct Anchor<T: Real> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    k: DMatrix<T>,
    bias: DVector<T>,
}

/// Grid of anchor realizations with bilinear interpolation over `(β, h_g)`.
#[derive(Clone, Debug)]
pub struct PlantModel<T: Real> {
    config: PlantConfig,
    anchors: Vec<Anchor<T>>,
    c_sensors: DMatrix<T>,
    c: DMatrix<T>,
    re: DMatrix<T>,
}

impl<T: Real> PlantModel<T> {
    pub fn new(config: &PlantConfig) -> Result<Self> {
        config.validate()?;
        let c_sensors = DMatrix::<f64>::from_fn(N_SENSORS, N_X, |r, c| if c == r + N_U { 1.0 } else { 0.0 });
        let c = output_map::<f64>() * &c_sensors;
        let mut anchors = Vec::with_capacity(ANCHOR_BETAS.len() * ANCHOR_H_G.len());
        for &beta in &ANCHOR_BETAS {
            for &h_g in &ANCHOR_H_G {
                anchors.push(build_anchor(config, SchedulingPoint { beta, h_g }, &c_sensors, &c)?);
            }
        }
        let re = DMatrix::identity(N_Y, N_Y) * (config.noise_std * config.noise_std);
        Ok(Self {
            config: config.clone(),
            anchors,
            c_sensors: cast(&c_sensors),
            c: cast(&c),
            re: cast(&re),
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    /// Sensor read-out `C_s` (states to the four pressure taps).
    pub fn sensor_matrix(&self) -> &DMatrix<T> {
        &self.c_sensors
    }

    pub fn realization_at(&self, p: SchedulingPoint) -> Result<LtiRealization<T>> {
        p.validate()?;
        let w = self.weights(p);
        let blend = |f: &dyn Fn(&Anchor<T>) -> &DMatrix<T>| {
            let mut out = f(&self.anchors[w[0].0]) * lit::<T>(w[0].1);
            for &(i, wi) in &w[1..] {
                out += f(&self.anchors[i]) * lit::<T>(wi);
            }
            out
        };
        LtiRealization::new(
            blend(&|a| &a.a),
            blend(&|a| &a.b),
            self.c.clone(),
            DMatrix::zeros(N_Y, N_U),
            blend(&|a| &a.k),
            self.re.clone(),
        )
    }

    /// Affine state term `b(p)`.
    pub fn bias_at(&self, p: SchedulingPoint) -> Result<DVector<T>> {
        p.validate()?;
        let w = self.weights(p);
        let mut out = DVector::zeros(N_X);
        for (i, wi) in w {
            out += &self.anchors[i].bias * lit::<T>(wi);
        }
        Ok(out)
    }

    fn weights(&self, p: SchedulingPoint) -> [(usize, f64); 4] {
        let cell = |v: f64, lo: f64, step: f64, cells: usize| {
            let s = (v - lo) / step;
            let i = (s.floor() as usize).min(cells - 1);
            (i, s - i as f64)
        };
        let (ib, fb) = cell(p.beta, ANCHOR_BETAS[0], 1.0, ANCHOR_BETAS.len() - 1);
        let (ih, fh) = cell(p.h_g, ANCHOR_H_G[0], 100.0, ANCHOR_H_G.len() - 1);
        let idx = |b: usize, h: usize| b * ANCHOR_H_G.len() + h;
        [
            (idx(ib, ih), (1.0 - fb) * (1.0 - fh)),
            (idx(ib + 1, ih), fb * (1.0 - fh)),
            (idx(ib, ih + 1), (1.0 - fb) * fh),
            (idx(ib + 1, ih + 1), fb * fh),
        ]
    }
}

fn cast<T: Real>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(lit::<T>)
}

fn build_anchor<T: Real>(
    cfg: &PlantConfig,
    p: SchedulingPoint,
    c_sensors: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<Anchor<T>> {
    let h_n = (p.h_g - H_G_RANGE.0) / (H_G_RANGE.1 - H_G_RANGE.0);
    let wake_pole = 0.78 + 0.02 * p.beta.abs() / 5.0 + 0.01 * h_n;

    let mut a = DMatrix::<f64>::zeros(N_X, N_X);
    for i in 0..4 {
        for j in 0..4 {
            a[(i, j)] = WAKE_MIXING[i][j] + if i == j { wake_pole } else { 0.0 };
        }
        a[(4 + i, i)] = 1.0 - SENSOR_POLES[i];
        a[(4 + i, 4 + i)] = SENSOR_POLES[i];
        a[(4 + i, 4 + (i + 1) % 4)] += SENSOR_COUPLING;
    }

    // sensor-level steady gain: Mᵀ·G/4 (seen by the outputs) plus a pattern the outputs cannot see
    let m_out = output_map::<f64>();
    let g_y = DMatrix::from_fn(N_Y, N_U, |r, col| cfg.dc_gain[r][col]);
    let null = DVector::from_row_slice(&NULL_PATTERN) * DVector::from_row_slice(&NULL_GAIN).transpose();
    let g_s = (m_out.transpose() * g_y / 4.0 + null) * (1.0 - 0.04 * p.beta.abs() / 5.0);
    let d_s = m_out.transpose() * DVector::from_row_slice(&cfg.steady_offset(p)) / 4.0;

    let resolvent = (DMatrix::identity(N_X, N_X) - &a)
        .try_inverse()
        .ok_or_else(|| RspcError::Numerical("anchor I − A is singular".into()))?;
    let wake_to_sensor = c_sensors * resolvent.columns(0, 4);
    let lu = wake_to_sensor.lu();
    let bw = lu.solve(&g_s).ok_or_else(|| RspcError::Numerical("wake-to-sensor map is singular".into()))?;
    let biasw = lu.solve(&d_s).ok_or_else(|| RspcError::Numerical("wake-to-sensor map is singular".into()))?;
    let mut b = DMatrix::zeros(N_X, N_U);
    b.rows_mut(0, 4).copy_from(&bw);
    let mut bias = DVector::zeros(N_X);
    bias.rows_mut(0, 4).copy_from(&biasw);

    let shape = DMatrix::from_fn(N_X, N_Y, |r, col| OBSERVER_SHAPE[r][col]);
    let k = assign_observer_poles(&a, c, &OBSERVER_POLES, &shape)?;

    Ok(Anchor {
        a: cast(&a),
        b: cast(&b),
        k: cast(&k),
        bias: bias.map(lit::<T>),
    })
}

/// One innovation-form step: `x⁺ = A(p)x + B(p)u + b(p) + Ke`; returns `(x⁺, dCp)`
/// where `dCp = C_s x + Mᵀe/4`, so that `M·dCp = Cx + e`.
pub fn plant_step<T: Real>(
    model: &PlantModel<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    p: SchedulingPoint,
    e: &DVector<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    dim_check("state", N_X, x.len())?;
    dim_check("input", N_U, u.len())?;
    dim_check("innovation", N_Y, e.len())?;
    let real = model.realization_at(p)?;
    let dcp = model.sensor_matrix() * x + output_map::<T>().transpose() * e * lit::<T>(0.25);
    let next = real.a() * x + real.b() * u + model.bias_at(p)? + real.k() * e;
    Ok((next, dcp))
}

/// Predictor-form step `x⁺ = Ã(p)x + B̃(p)u + Ky + b(p)` driven by measured outputs.
pub fn predictor_step<T: Real>(
    model: &PlantModel<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    y: &DVector<T>,
    p: SchedulingPoint,
) -> Result<DVector<T>> {
    dim_check("state", N_X, x.len())?;
    dim_check("input", N_U, u.len())?;
    dim_check("output", N_Y, y.len())?;
    let real = model.realization_at(p)?;
    Ok(real.predictor_a() * x + real.predictor_b() * u + real.k() * y + model.bias_at(p)?)
}

/// Clamp to `±FLAP_LIMIT_DEG`, then limit the move from `previous` to `±FLAP_STEP_DEG`.
pub fn saturate_and_rate_limit<T: Real>(requested: &DVector<T>, previous: &DVector<T>) -> DVector<T> {
    let limit = lit::<T>(FLAP_LIMIT_DEG);
    let step = lit::<T>(FLAP_STEP_DEG);
    requested.zip_map(previous, |r, prev| {
        let clamped = r.clamp(-limit, limit);
        clamped.clamp(prev - step, prev + step)
    })
}

/// Independent two-level sequences, one per channel, each level held for
/// `switch_period` samples.
pub fn prbs<T: Real>(length: usize, n_channels: usize, seed: u64, switch_period: usize, amplitude: f64) -> Signal<T> {
    let hold = switch_period.max(1);
    let mut out = Signal::zeros(n_channels, length);
    for ch in 0..n_channels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ch as u64 + 1);
        let mut level = 0.0;
        for t in 0..length {
            if t % hold == 0 {
                level = if rng.random::<bool>() { amplitude } else { -amplitude };
            }
            out.set_component(ch, t, lit(level));
        }
    }
    out
}

fn default_h_g() -> f64 {
    -200.0
}
fn default_sin_amplitude() -> f64 {
    3.0
}
fn default_sin_period() -> f64 {
    200.0
}
fn default_step_table() -> Vec<[f64; 2]> {
    [0., 3., -2., 5., -5., 1., -3., 4., 2., -4.]
        .iter()
        .enumerate()
        .map(|(i, &b)| [30.0 * i as f64, b])
        .collect()
}
fn default_dwell() -> f64 {
    30.0
}
fn default_sweep_start() -> f64 {
    -5.0
}
fn default_sweep_stop() -> f64 {
    5.0
}
fn default_sweep_increment() -> f64 {
    1.0
}

/// Shape of the scheduling trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileKind {
    Constant {
        #[serde(default)]
        beta: f64,
        #[serde(default = "default_h_g")]
        h_g: f64,
    },
    /// `β(t) = amplitude · sin(2πt / period)`.
    Sinusoid {
        #[serde(default = "default_sin_amplitude")]
        amplitude: f64,
        #[serde(default = "default_sin_period")]
        period: f64,
        #[serde(default = "default_h_g")]
        h_g: f64,
    },
    /// `(start time, β)` pairs, sorted by time; `β` holds until the next entry.
    Steps {
        #[serde(default = "default_step_table")]
        table: Vec<[f64; 2]>,
        #[serde(default = "default_h_g")]
        h_g: f64,
    },
    /// Static grid `start, start + increment, …, stop`, each held for `dwell` seconds.
    Sweep {
        #[serde(default = "default_dwell")]
        dwell: f64,
        #[serde(default = "default_sweep_start")]
        start: f64,
        #[serde(default = "default_sweep_stop")]
        stop: f64,
        #[serde(default = "default_sweep_increment")]
        increment: f64,
        #[serde(default = "default_h_g")]
        h_g: f64,
    },
}

impl ProfileKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Constant { .. } => "constant",
            Self::Sinusoid { .. } => "sinusoid",
            Self::Steps { .. } => "steps",
            Self::Sweep { .. } => "sweep",
        }
    }

    pub fn default_for(name: &str) -> Result<Self> {
        Ok(match name {
            "constant" => Self::Constant { beta: 0.0, h_g: default_h_g() },
            "sinusoid" => Self::Sinusoid {
                amplitude: default_sin_amplitude(),
                period: default_sin_period(),
                h_g: default_h_g(),
            },
            "steps" => Self::Steps { table: default_step_table(), h_g: default_h_g() },
            "sweep" => Self::Sweep {
                dwell: default_dwell(),
                start: default_sweep_start(),
                stop: default_sweep_stop(),
                increment: default_sweep_increment(),
                h_g: default_h_g(),
            },
            other => return Err(RspcError::Config(format!("unknown scenario kind '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
// `deny_unknown_fields` cannot be combined with `flatten`; the tagged kind still rejects unknown keys
pub struct ScenarioProfile {
    #[serde(flatten)]
    pub kind: ProfileKind,
    /// Seconds.
    pub duration: f64,
}

// absorbs float noise in `k · 0.1` sample times at step boundaries
const TIME_EPS: f64 = 1e-9;

impl ScenarioProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(RspcError::Config(format!("scenario duration must be positive, got {}", self.duration)));
        }
        match &self.kind {
            ProfileKind::Sinusoid { period, .. } if !(*period > 0.0) => {
                return Err(RspcError::Config("sinusoid period must be positive".into()))
            }
            ProfileKind::Steps { table, .. } => {
                if table.is_empty() || table[0][0] > 0.0 {
                    return Err(RspcError::Config("step table must start at t = 0".into()));
                }
                if table.windows(2).any(|w| w[1][0] <= w[0][0]) {
                    return Err(RspcError::Config("step table times must increase".into()));
                }
            }
            ProfileKind::Sweep { dwell, increment, .. } if !(*dwell > 0.0 && *increment > 0.0) => {
                return Err(RspcError::Config("sweep dwell and increment must be positive".into()))
            }
            _ => {}
        }
        // every point the profile can produce must be inside the scheduling range
        let n = (self.duration / SAMPLE_PERIOD).round() as usize;
        for i in 0..=n {
            schedule(self, (i as f64 * SAMPLE_PERIOD).min(self.duration))?.validate()?;
        }
        Ok(())
    }
}

pub fn schedule(profile: &ScenarioProfile, t: f64) -> Result<SchedulingPoint> {
    if !(t >= 0.0 && t <= profile.duration) {
        return Err(RspcError::Range(format!(
            "time {t} outside scenario [0, {}]",
            profile.duration
        )));
    }
    Ok(match &profile.kind {
        ProfileKind::Constant { beta, h_g } => SchedulingPoint { beta: *beta, h_g: *h_g },
        ProfileKind::Sinusoid { amplitude, period, h_g } => SchedulingPoint {
            beta: amplitude * (2.0 * std::f64::consts::PI * t / period).sin(),
            h_g: *h_g,
        },
        ProfileKind::Steps { table, h_g } => {
            let beta = table
                .iter()
                .take_while(|entry| entry[0] <= t + TIME_EPS)
                .last()
                .map_or(0.0, |entry| entry[1]);
            SchedulingPoint { beta, h_g: *h_g }
        }
        ProfileKind::Sweep { dwell, start, stop, increment, h_g } => {
            let level = ((t + TIME_EPS) / dwell).floor();
            SchedulingPoint { beta: (start + level * increment).min(*stop), h_g: *h_g }
        }
    })
}

/// Output of the sensors at the current sample.
#[derive(Clone, Debug)]
pub struct Measurement<T: Real> {
    pub dcp: DVector<T>,
    pub y: DVector<T>,
    pub e: DVector<T>,
}

/// Stateful plant: draw the innovation and read the sensors with
/// [`Plant::measure`], then apply the flap angles with [`Plant::advance`].
#[derive(Clone, Debug)]
pub struct Plant<T: Real> {
    model: PlantModel<T>,
    x: DVector<T>,
    e: DVector<T>,
    rng: ChaCha8Rng,
    step: usize,
}

impl<T: Real> Plant<T> {
    pub fn new(model: PlantModel<T>, seed: u64) -> Self {
        Self {
            model,
            x: DVector::zeros(N_X),
            e: DVector::zeros(N_Y),
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        }
    }

    pub fn model(&self) -> &PlantModel<T> {
        &self.model
    }

    pub fn state(&self) -> &DVector<T> {
        &self.x
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Places the state at the zero-input equilibrium of `p`.
    pub fn settle(&mut self, p: SchedulingPoint) -> Result<()> {
        let real = self.model.realization_at(p)?;
        let i_minus_a = DMatrix::identity(N_X, N_X) - real.a();
        self.x = i_minus_a
            .lu()
            .solve(&self.model.bias_at(p)?)
            .ok_or_else(|| RspcError::Numerical("I − A is singular".into()))?;
        Ok(())
    }

    pub fn measure(&mut self) -> Measurement<T> {
        let std = self.model.config.noise_std;
        self.e = DVector::from_fn(N_Y, |_, _| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            lit::<T>(std * z)
        });
        let dcp = self.model.sensor_matrix() * &self.x + output_map::<T>().transpose() * &self.e * lit::<T>(0.25);
        let y = &self.model.c * &self.x + &self.e;
        Measurement { dcp, y, e: self.e.clone() }
    }

    pub fn advance(&mut self, u: &DVector<T>, p: SchedulingPoint) -> Result<()> {
        let (next, _) = plant_step(&self.model, &self.x, u, p, &self.e)?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(RspcError::PlantFault {
                step: self.step,
                reason: "non-finite state".into(),
            });
        }
        self.x = next;
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::spectral_radius;
    use approx::assert_relative_eq;

    fn model() -> PlantModel<f64> {
        PlantModel::new(&PlantConfig::default()).unwrap()
    }

    fn all_anchors() -> impl Iterator<Item = SchedulingPoint> {
        ANCHOR_BETAS
            .iter()
            .flat_map(|&beta| ANCHOR_H_G.iter().map(move |&h_g| SchedulingPoint { beta, h_g }))
    }

    #[test]
    fn zero_step_is_zero_without_bias() {
        let m = model();
        let p = SchedulingPoint::reference();
        let real = m.realization_at(p).unwrap();
        let x = DVector::zeros(N_X);
        let next = real.a() * &x + real.b() * DVector::zeros(N_U) + real.k() * DVector::zeros(N_Y);
        assert!(next.iter().all(|v| *v == 0.0));
        let (_, dcp) = plant_step(&m, &x, &DVector::zeros(N_U), p, &DVector::zeros(N_Y)).unwrap();
        assert!(dcp.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn anchors_satisfy_realization_invariants() {
        let m = model();
        for p in all_anchors() {
            let real = m.realization_at(p).unwrap();
            real.check_invariants().unwrap();
            assert!(spectral_radius(real.a()) <= 0.9);
            assert!(real.d().iter().all(|v| *v == 0.0));
            assert!(real.predictor_a().pow(30).norm() < 1e-6);
        }
    }

    #[test]
    fn dense_sweep_keeps_invariants_and_lipschitz_bound() {
        let m = model();
        let bound = m.config().lipschitz_bound;
        for &h_g in &[-200.0, -150.0, -37.5, 0.0, 100.0] {
            let mut prev = m.realization_at(SchedulingPoint { beta: -5.0, h_g }).unwrap();
            for i in 1..=100 {
                let p = SchedulingPoint { beta: -5.0 + 0.1 * i as f64, h_g };
                let real = m.realization_at(p).unwrap();
                real.check_invariants().unwrap();
                assert!((real.a() - prev.a()).norm() <= bound, "at {p:?}");
                prev = real;
            }
        }
    }

    #[test]
    fn dc_gain_oracle_by_simulation() {
        let m = model();
        let p = SchedulingPoint::reference();
        let real = m.realization_at(p).unwrap();
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let mut x = DVector::zeros(N_X);
        let bias = m.bias_at(p).unwrap();
        let zero = DVector::zeros(N_Y);
        for _ in 0..500 {
            x = plant_step(&m, &x, &u, p, &zero).unwrap().0;
        }
        let y = real.c() * &x;
        let i_minus_a = DMatrix::identity(N_X, N_X) - real.a();
        let expected = real.c() * i_minus_a.lu().solve(&(real.b() * &u + bias)).unwrap();
        assert_relative_eq!(y, expected, epsilon = 1e-10);
        // the flap part of the steady output is the configured gain
        let g = real.dc_gain().unwrap();
        let cfg = DMatrix::from_fn(3, 4, |r, c| PlantConfig::default().dc_gain[r][c]);
        assert_relative_eq!(g, cfg, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_deflection_leaves_horizontal_gradient() {
        let g = model().realization_at(SchedulingPoint::reference()).unwrap().dc_gain().unwrap();
        assert!(g.row(0).sum().abs() < 1e-12);
    }

    #[test]
    fn reference_steady_output_is_calibrated() {
        let mut plant = Plant::new(model(), 0);
        let p = SchedulingPoint::reference();
        plant.settle(p).unwrap();
        let mut x = plant.state().clone();
        let m = plant.model().clone();
        for _ in 0..50 {
            x = plant_step(&m, &x, &DVector::zeros(N_U), p, &DVector::zeros(N_Y)).unwrap().0;
        }
        let y = m.realization_at(p).unwrap().c() * x;
        assert!(y[0].abs() < 1e-12);
        assert_relative_eq!(y[1], -0.20, epsilon = 1e-12);
        assert_relative_eq!(y[2], -0.60, epsilon = 1e-12);
    }

    #[test]
    fn horizontal_offset_tracks_yaw() {
        let m = model();
        let mut last = f64::NEG_INFINITY;
        for &beta in &ANCHOR_BETAS {
            let p = SchedulingPoint { beta, h_g: -200.0 };
            let mut plant = Plant::new(m.clone(), 0);
            plant.settle(p).unwrap();
            let y0 = (m.realization_at(p).unwrap().c() * plant.state())[0];
            assert!(y0 > last);
            last = y0;
        }
    }

    #[test]
    fn innovation_and_predictor_forms_agree() {
        let m = model();
        let mut plant = Plant::new(m.clone(), 3);
        let mut xp = DVector::zeros(N_X);
        let u_seq = prbs::<f64>(1000, N_U, 1, 3, 2.0);
        for t in 0..1000 {
            let p = SchedulingPoint { beta: 3.0 * (t as f64 * 0.01).sin(), h_g: -120.0 };
            let meas = plant.measure();
            let u = u_seq.sample(t).into_owned();
            let xi = plant.state().clone();
            assert!((&xi - &xp).abs().max() < 1e-10);
            xp = predictor_step(&m, &xp, &u, &meas.y, p).unwrap();
            plant.advance(&u, p).unwrap();
        }
    }

    #[test]
    fn single_step_substitution() {
        let m = model();
        let p = SchedulingPoint { beta: 1.3, h_g: -50.0 };
        let real = m.realization_at(p).unwrap();
        let x = DVector::from_fn(N_X, |i, _| (i as f64 * 0.37).sin());
        let u = DVector::from_vec(vec![1.0, -0.5, 2.0, 0.0]);
        let e = DVector::from_vec(vec![0.01, -0.02, 0.005]);
        let y = real.c() * &x + &e;
        let a = predictor_step(&m, &x, &u, &y, p).unwrap();
        let (b, dcp) = plant_step(&m, &x, &u, p, &e).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-14);
        assert_relative_eq!(output_map::<f64>() * dcp, y, epsilon = 1e-14);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let mut plant = Plant::new(model(), 11);
            let mut out = Vec::new();
            for _ in 0..200 {
                out.push(plant.measure().y);
                plant.advance(&DVector::from_element(N_U, 1.0), SchedulingPoint::reference()).unwrap();
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_state_faults() {
        let mut plant = Plant::new(model(), 0);
        plant.measure();
        let err = plant.advance(&DVector::from_element(N_U, f64::NAN), SchedulingPoint::reference());
        assert!(matches!(err, Err(RspcError::PlantFault { step: 0, .. })));
    }

    #[test]
    fn actuator_limits() {
        let v = |a: f64| DVector::from_element(1, a);
        assert_eq!(saturate_and_rate_limit(&v(10.0), &v(6.5))[0], 7.0);
        assert_eq!(saturate_and_rate_limit(&v(-10.0), &v(0.0))[0], -1.0);
        assert_eq!(saturate_and_rate_limit(&v(0.4), &v(0.0))[0], 0.4);
    }

    #[test]
    fn prbs_properties() {
        let one = prbs::<f64>(1, 4, 9, 1, 5.0);
        assert!(one.as_matrix().iter().all(|v| v.abs() == 5.0));
        let a = prbs::<f64>(4000, 4, 9, 1, 5.0);
        assert_eq!(a, prbs::<f64>(4000, 4, 9, 1, 5.0));
        let m = a.as_matrix();
        for i in 0..4 {
            for j in i + 1..4 {
                let r = m.row(i).dot(&m.row(j)) / (m.row(i).norm() * m.row(j).norm());
                assert!(r.abs() < 0.1, "channels {i},{j}: {r}");
            }
        }
        let held = prbs::<f64>(30, 2, 1, 3, 2.0);
        for t in (0..30).step_by(3) {
            assert_eq!(held.sample(t), held.sample(t + 2));
        }
    }

    #[test]
    fn schedule_profiles() {
        let sin = ScenarioProfile { kind: ProfileKind::default_for("sinusoid").unwrap(), duration: 300.0 };
        assert_eq!(schedule(&sin, 0.0).unwrap().beta, 0.0);
        assert_relative_eq!(schedule(&sin, 50.0).unwrap().beta, 3.0, epsilon = 1e-12);
        assert!(matches!(schedule(&sin, 300.1), Err(RspcError::Range(_))));
        assert!(schedule(&sin, -0.1).is_err());

        let steps = ScenarioProfile {
            kind: ProfileKind::Steps { table: vec![[0.0, 0.0], [30.0, 3.0]], h_g: -200.0 },
            duration: 60.0,
        };
        assert_eq!(schedule(&steps, 29.9).unwrap().beta, 0.0);
        assert_eq!(schedule(&steps, 30.0).unwrap().beta, 3.0);
        assert_eq!(schedule(&steps, 300.0 * 0.1).unwrap().beta, 3.0);

        let sweep = ScenarioProfile { kind: ProfileKind::default_for("sweep").unwrap(), duration: 330.0 };
        let levels: Vec<f64> = (0..11).map(|i| schedule(&sweep, 30.0 * i as f64 + 1.0).unwrap().beta).collect();
        assert_eq!(levels, ANCHOR_BETAS.to_vec());
        sweep.validate().unwrap();
    }

    #[test]
    fn profile_validation() {
        let bad = ScenarioProfile { kind: ProfileKind::Constant { beta: 6.0, h_g: -200.0 }, duration: 10.0 };
        assert!(bad.validate().is_err());
        let zero = ScenarioProfile { kind: ProfileKind::default_for("steps").unwrap(), duration: 0.0 };
        assert!(matches!(zero.validate(), Err(RspcError::Config(_))));
    }

    #[test]
    fn single_precision_model() {
        let m = PlantModel::<f32>::new(&PlantConfig::default()).unwrap();
        let real = m.realization_at(SchedulingPoint { beta: 2.5, h_g: 0.0 }).unwrap();
        assert!(spectral_radius(&real.predictor_a()) < 0.5);
    }
}
