//! Scenario runs on the synthetic plant, paired on/off comparisons, metrics
//! and CSV export.
//!
//! Every run first spends the controller's warm-up (window fill plus the
//! estimation dwell) and then `run.settle` seconds at the scenario's starting
//! point. That pre-roll is not recorded, and an uncontrolled run spends it too
//! with the flaps at 0°, so paired runs see the same noise realization sample
//! for sample.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::RunConfig;
use crate::controller::{hildreth_solve, kkt_residuals, random_qp, recover_control, Phase, RspcController};
use crate::error::{Result, RspcError};
use crate::estimator::{bias_comparison, BiasReport};
use crate::plant::{
    saturate_and_rate_limit, schedule, Plant, PlantConfig, PlantModel, SchedulingPoint, N_U, N_Y, SAMPLE_PERIOD,
};
use crate::subspace::{LtiRealization, Signal};

/// 3 s at 10 Hz.
pub const SLIDING_WINDOW: usize = 30;

// keeps the excitation bits independent of the noise draws when both seeds match
const EXCITATION_SALT: u64 = 0x5eed_f1a9;

/// One sample of a run, already rounded to the precision written to CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub t: f64,
    pub beta: f64,
    pub h_g: f64,
    pub u_cmd: [f64; N_U],
    pub u_app: [f64; N_U],
    pub dcp: [f64; 4],
    pub y: [f64; N_Y],
    pub y_r: [f64; N_Y],
    /// Missing while the innovation estimator has no window, and in uncontrolled runs.
    pub e_hat: Option<[f64; N_Y]>,
    pub dual_iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: RunConfig,
    pub rows: Vec<Row>,
    /// Set when the plant faulted; `rows` stops at the faulting sample.
    pub fault: Option<String>,
    /// Time at which the controller first solved a QP; negative inside the pre-roll.
    pub engaged_at: Option<f64>,
}

impl RunRecord {
    pub fn cb_analog(&self) -> Vec<f64> {
        self.rows.iter().map(|r| -r.y[2]).collect()
    }
}

/// Rounds to six significant digits, switching to exponent form outside `[1e-4, 1e6)`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let mag = v.abs().log10().floor();
    if (-4.0..6.0).contains(&mag) {
        format!("{:.*}", (5.0 - mag) as usize, v)
    } else {
        format!("{v:.5e}")
    }
}

fn quantize(v: f64) -> f64 {
    format_sig6(v).parse().expect("formatted float parses")
}

fn q_array<const N: usize>(v: &DVector<f64>) -> [f64; N] {
    std::array::from_fn(|i| quantize(v[i]))
}

pub fn pre_roll_samples(cfg: &RunConfig) -> usize {
    cfg.controller.warm_up_samples() + (cfg.run.settle / SAMPLE_PERIOD).round() as usize
}

pub fn run_scenario(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let profile = &cfg.run.scenario;
    let p0 = schedule(profile, 0.0)?;
    let zero_yaw = cfg.plant.steady_offset(SchedulingPoint { beta: 0.0, h_g: p0.h_g });
    let y_ref = cfg.controller.reference.resolve(zero_yaw);
    let mut plant = Plant::new(PlantModel::<f64>::new(&cfg.plant)?, cfg.plant.seed);
    plant.settle(p0)?;
    let mut ctrl = match cfg.run.control {
        true => Some(RspcController::<f64>::new(&cfg.controller, y_ref, cfg.run.seed ^ EXCITATION_SALT)?),
        false => None,
    };
    let pre = pre_roll_samples(cfg);
    let n = (profile.duration / SAMPLE_PERIOD).round() as usize;
    let mut record = RunRecord {
        config: cfg.clone(),
        rows: Vec::with_capacity(n),
        fault: None,
        engaged_at: None,
    };
    let y_r = y_ref.map(quantize);
    let mut applied = DVector::zeros(N_U);
    for k in 0..pre + n {
        let i = k.checked_sub(pre);
        let t = (k as f64 - pre as f64) * SAMPLE_PERIOD;
        let p = match i {
            Some(i) => schedule(profile, (i as f64 * SAMPLE_PERIOD).min(profile.duration))?,
            None => p0,
        };
        let meas = plant.measure();
        let (command, e_hat, iterations, converged) = match ctrl.as_mut() {
            Some(c) => {
                let s = c.step(&meas.y)?;
                if s.phase == Phase::Active && record.engaged_at.is_none() {
                    record.engaged_at = Some(t);
                }
                (s.command, s.e_hat, s.dual_iterations, s.converged)
            }
            None => (DVector::zeros(N_U), None, 0, true),
        };
        applied = saturate_and_rate_limit(&command, &applied);
        if let Some(c) = ctrl.as_mut() {
            c.apply(&applied)?;
        }
        if i.is_some() {
            record.rows.push(Row {
                t: quantize(t),
                beta: quantize(p.beta),
                h_g: quantize(p.h_g),
                u_cmd: q_array(&command),
                u_app: q_array(&applied),
                dcp: q_array(&meas.dcp),
                y: q_array(&meas.y),
                y_r,
                e_hat: e_hat.as_ref().map(q_array),
                dual_iterations: iterations,
                converged,
            });
        }
        match plant.advance(&applied, p) {
            Ok(()) => {}
            Err(e @ RspcError::PlantFault { .. }) => {
                record.fault = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(record)
}

/// Runs the configuration with control on and off on two threads.
pub fn run_pair(cfg: &RunConfig) -> Result<(RunRecord, RunRecord)> {
    let mut on = cfg.clone();
    on.run.control = true;
    let mut off = cfg.clone();
    off.run.control = false;
    std::thread::scope(|s| {
        let h = s.spawn(|| run_scenario(&off));
        let on = run_scenario(&on)?;
        let off = h.join().map_err(|_| RspcError::Numerical("uncontrolled run panicked".into()))??;
        Ok((on, off))
    })
}

/// Centered moving average over `window` samples, the sample at `i` covering
/// `[i − window/2, i + window/2 − 1]`; windows are truncated at the ends.
pub fn sliding_mean(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || series.len() < window {
        return Err(RspcError::Range(format!(
            "sliding mean needs at least {window} samples, got {}",
            series.len()
        )));
    }
    let mut prefix = Vec::with_capacity(series.len() + 1);
    prefix.push(0.0);
    for v in series {
        prefix.push(prefix.last().unwrap() + v);
    }
    let half = window / 2;
    Ok((0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(series.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    /// RMS of `y − y_r` per output.
    pub tracking_rms: [f64; N_Y],
    /// Mean of the base-pressure analog `−y₃`.
    pub cb_mean: f64,
    /// RMS of `−y₃` about `−y_r₃`.
    pub cb_deviation_rms: f64,
    /// Peak-to-peak of the 3 s sliding mean of `−y₃`.
    pub cb_sliding_p2p: f64,
    #[serde(skip)]
    pub cb_sliding: Vec<f64>,
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

pub fn run_metrics(record: &RunRecord) -> Result<RunMetrics> {
    let rows = &record.rows;
    let cb = record.cb_analog();
    let cb_sliding = sliding_mean(&cb, SLIDING_WINDOW)?;
    let (lo, hi) = cb_sliding
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    Ok(RunMetrics {
        tracking_rms: std::array::from_fn(|c| rms(rows.iter().map(|r| r.y[c] - r.y_r[c]))),
        cb_mean: cb.iter().sum::<f64>() / cb.len() as f64,
        cb_deviation_rms: rms(rows.iter().map(|r| r.y_r[2] - r.y[2])),
        cb_sliding_p2p: hi - lo,
        cb_sliding,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub on: RunMetrics,
    pub off: RunMetrics,
    /// `100·(off − on)/off` on the base-pressure deviation RMS.
    pub improvement_pct: f64,
    /// `on/off` tracking RMS per output.
    pub tracking_ratio: [f64; N_Y],
    /// `on/off` sliding-mean peak-to-peak.
    pub p2p_ratio: f64,
}

fn ratio(on: f64, off: f64) -> f64 {
    if off == 0.0 && on == 0.0 {
        1.0
    } else {
        on / off
    }
}

/// Pairs two runs that share scenario, plant and seeds.
pub fn compare_runs(on: &RunRecord, off: &RunRecord) -> Result<Comparison> {
    let same = on.config.run.scenario == off.config.run.scenario
        && on.config.plant == off.config.plant
        && on.rows.len() == off.rows.len()
        && on.rows.iter().zip(&off.rows).all(|(a, b)| a.t == b.t && a.beta == b.beta && a.h_g == b.h_g);
    if !same {
        return Err(RspcError::Config("compared runs differ in scenario, plant or length".into()));
    }
    let m_on = run_metrics(on)?;
    let m_off = run_metrics(off)?;
    Ok(Comparison {
        improvement_pct: 100.0 * (1.0 - ratio(m_on.cb_deviation_rms, m_off.cb_deviation_rms)),
        tracking_ratio: std::array::from_fn(|c| ratio(m_on.tracking_rms[c], m_off.tracking_rms[c])),
        p2p_ratio: ratio(m_on.cb_sliding_p2p, m_off.cb_sliding_p2p),
        on: m_on,
        off: m_off,
    })
}

pub fn timeseries_header() -> Vec<String> {
    let mut h: Vec<String> = vec!["t".into(), "beta".into(), "h_g".into()];
    let named = |p: &'static str, n: usize| (1..=n).map(move |i| format!("{p}{i}"));
    h.extend(named("u_cmd", N_U));
    h.extend(named("u_app", N_U));
    h.extend(named("dcp", 4));
    h.extend(named("y", N_Y));
    h.extend(named("yr", N_Y));
    h.extend(named("e", N_Y));
    h.push("dual_iterations".into());
    h.push("converged".into());
    h
}

fn row_fields(r: &Row) -> Vec<String> {
    let mut f = vec![format_sig6(r.t), format_sig6(r.beta), format_sig6(r.h_g)];
    for block in [&r.u_cmd[..], &r.u_app, &r.dcp, &r.y, &r.y_r] {
        f.extend(block.iter().map(|v| format_sig6(*v)));
    }
    match &r.e_hat {
        Some(e) => f.extend(e.iter().map(|v| format_sig6(*v))),
        None => f.extend(std::iter::repeat_n(String::new(), N_Y)),
    }
    f.push(r.dual_iterations.to_string());
    f.push(u8::from(r.converged).to_string());
    f
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> RspcError + '_ {
    move |source| RspcError::Csv { path: path.to_path_buf(), source }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RspcError + '_ {
    move |source| RspcError::Io { path: path.to_path_buf(), source }
}

pub fn write_timeseries(rows: &[Row], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(timeseries_header()).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(row_fields(r)).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_timeseries(path: &Path) -> Result<Vec<Row>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = rd.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    if header != timeseries_header() {
        return Err(RspcError::Config(format!("{}: unexpected timeseries header", path.display())));
    }
    let bad = |what: &str| RspcError::Config(format!("{}: malformed {what}", path.display()));
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err(path))?;
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(&timeseries_header()[i])) };
        let arr = |start: usize| -> Result<[f64; 4]> { Ok([num(start)?, num(start + 1)?, num(start + 2)?, num(start + 3)?]) };
        let arr3 = |start: usize| -> Result<[f64; 3]> { Ok([num(start)?, num(start + 1)?, num(start + 2)?]) };
        rows.push(Row {
            t: num(0)?,
            beta: num(1)?,
            h_g: num(2)?,
            u_cmd: arr(3)?,
            u_app: arr(7)?,
            dcp: arr(11)?,
            y: arr3(15)?,
            y_r: arr3(18)?,
            e_hat: if rec[21].is_empty() { None } else { Some(arr3(21)?) },
            dual_iterations: rec[24].parse().map_err(|_| bad("dual_iterations"))?,
            converged: match &rec[25] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("converged")),
            },
        });
    }
    Ok(rows)
}

fn metric_lines(prefix: &str, m: &RunMetrics) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = (0..N_Y)
        .map(|c| (format!("{prefix}tracking_rms_y{}", c + 1), m.tracking_rms[c]))
        .collect();
    v.push((format!("{prefix}cb_mean"), m.cb_mean));
    v.push((format!("{prefix}cb_deviation_rms"), m.cb_deviation_rms));
    v.push((format!("{prefix}cb_sliding_p2p"), m.cb_sliding_p2p));
    v
}

fn write_metric_file(path: &Path, lines: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["metric", "value"]).map_err(csv_err(path))?;
    for (k, v) in lines {
        w.write_record([k.as_str(), format_sig6(*v).as_str()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Writes `timeseries.csv`, `metrics.csv` and `config_echo.toml` into `dir`.
pub fn export_csv(record: &RunRecord, metrics: &RunMetrics, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ts = dir.join("timeseries.csv");
    write_timeseries(&record.rows, &ts)?;
    let mp = dir.join("metrics.csv");
    let mut lines = metric_lines("", metrics);
    lines.push(("rows".into(), record.rows.len() as f64));
    lines.push(("faulted".into(), f64::from(u8::from(record.fault.is_some()))));
    write_metric_file(&mp, &lines)?;
    let echo = dir.join("config_echo.toml");
    let mut text = record.config.to_toml()?;
    if let Some(f) = &record.fault {
        text.push_str(&format!("\n# run stopped: {f}\n"));
    }
    write_text(&echo, &text)?;
    Ok(vec![ts, mp, echo])
}

/// Writes both runs into `on/` and `off/`, plus `comparison.csv` and the
/// paired sliding-mean traces in `sliding.csv`.
pub fn export_comparison(on: &RunRecord, off: &RunRecord, cmp: &Comparison, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = export_csv(on, &cmp.on, &dir.join("on"))?;
    files.extend(export_csv(off, &cmp.off, &dir.join("off"))?);
    let cp = dir.join("comparison.csv");
    let mut lines = metric_lines("on_", &cmp.on);
    lines.extend(metric_lines("off_", &cmp.off));
    lines.extend((0..N_Y).map(|c| (format!("tracking_ratio_y{}", c + 1), cmp.tracking_ratio[c])));
    lines.push(("p2p_ratio".into(), cmp.p2p_ratio));
    lines.push(("improvement_pct".into(), cmp.improvement_pct));
    write_metric_file(&cp, &lines)?;
    let sp = dir.join("sliding.csv");
    let mut w = csv::Writer::from_path(&sp).map_err(csv_err(&sp))?;
    w.write_record(["t", "cb_on", "cb_off", "cb_sliding_on", "cb_sliding_off"]).map_err(csv_err(&sp))?;
    for (i, (a, b)) in on.rows.iter().zip(&off.rows).enumerate() {
        let vals = [a.t, -a.y[2], -b.y[2], cmp.on.cb_sliding[i], cmp.off.cb_sliding[i]];
        w.write_record(vals.map(format_sig6)).map_err(csv_err(&sp))?;
    }
    w.flush().map_err(io_err(&sp))?;
    files.extend([cp, sp]);
    Ok(files)
}

/// Mean output over the second half of each static level of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepLevel {
    pub beta: f64,
    pub y_mean: [f64; N_Y],
}

pub fn sweep_levels(record: &RunRecord) -> Vec<SweepLevel> {
    let mut levels = Vec::new();
    let rows = &record.rows;
    let mut start = 0;
    while start < rows.len() {
        let beta = rows[start].beta;
        let end = rows[start..].iter().position(|r| r.beta != beta).map_or(rows.len(), |n| start + n);
        let tail = &rows[start + (end - start) / 2..end];
        levels.push(SweepLevel {
            beta,
            y_mean: std::array::from_fn(|c| tail.iter().map(|r| r.y[c]).sum::<f64>() / tail.len() as f64),
        });
        start = end;
    }
    levels
}

pub fn write_sweep(levels: &[SweepLevel], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["beta", "y1", "y2", "y3"]).map_err(csv_err(path))?;
    for l in levels {
        let vals = [l.beta, l.y_mean[0], l.y_mean[1], l.y_mean[2]];
        w.write_record(vals.map(format_sig6)).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Closed-loop identification benchmark settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasBenchmarkSettings {
    pub samples: usize,
    /// Open-loop PRBS samples before the loop is closed; discarded.
    pub pre_roll: usize,
    pub noise_std: f64,
    pub rho: usize,
    pub ell: usize,
    /// Per-sample integral gain on `G⁺y`.
    pub feedback_gain: f64,
    /// Amplitude of the ±1 dither added to the feedback command.
    pub dither: f64,
}

impl Default for BiasBenchmarkSettings {
    fn default() -> Self {
        Self {
            samples: 5000,
            pre_roll: 600,
            noise_std: PlantConfig::default().noise_std,
            rho: 20,
            ell: 10,
            feedback_gain: 0.5,
            dither: 0.5,
        }
    }
}

/// Closed-loop data from the reference-point plant under integral output
/// feedback `u ← u − g·G⁺y` plus dither, where `G` is the plant's DC gain.
/// The feedback makes `u` correlated with past innovations.
pub fn closed_loop_dataset(seed: u64, s: &BiasBenchmarkSettings) -> Result<(LtiRealization<f64>, Signal<f64>, Signal<f64>)> {
    let real = PlantModel::<f64>::new(&PlantConfig::default())?.realization_at(SchedulingPoint::reference())?;
    let g_pinv = real
        .dc_gain()?
        .pseudo_inverse(1e-12)
        .map_err(|e| RspcError::Numerical(e.to_string()))?;
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    let mut dither = ChaCha8Rng::seed_from_u64(seed);
    dither.set_stream(1);
    let total = s.pre_roll + s.samples;
    let mut u_sig = Signal::zeros(N_U, s.samples);
    let mut y_sig = Signal::zeros(N_Y, s.samples);
    let mut x = DVector::zeros(real.n_x());
    let mut integ = DVector::<f64>::zeros(N_U);
    for k in 0..total {
        let e = DVector::from_fn(N_Y, |_, _| {
            let z: f64 = StandardNormal.sample(&mut noise);
            s.noise_std * z
        });
        let y = real.c() * &x + real.d() * &integ + &e;
        let d = DVector::from_fn(N_U, |_, _| if dither.random::<bool>() { 1.0 } else { -1.0 });
        let u = if k < s.pre_roll {
            d * 2.0
        } else {
            integ -= &g_pinv * &y * s.feedback_gain;
            &integ + d * s.dither
        };
        if let Some(i) = k.checked_sub(s.pre_roll) {
            u_sig.set_sample(i, &u);
            y_sig.set_sample(i, &y);
        }
        x = real.a() * &x + real.b() * &u + real.k() * &e;
    }
    Ok((real, u_sig, y_sig))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasBenchmark {
    pub reports: Vec<(u64, BiasReport)>,
    pub mean_biased: f64,
    pub mean_unbiased: f64,
}

impl BiasBenchmark {
    /// Mean innovation-augmented error over mean naive error.
    pub fn ratio(&self) -> f64 {
        self.mean_unbiased / self.mean_biased
    }
}

pub fn bias_benchmark(seeds: impl IntoIterator<Item = u64>, s: &BiasBenchmarkSettings) -> Result<BiasBenchmark> {
    let mut reports = Vec::new();
    for seed in seeds {
        let (real, u, y) = closed_loop_dataset(seed, s)?;
        reports.push((seed, bias_comparison(&real, &u, &y, s.rho, s.ell)?));
    }
    let n = reports.len().max(1) as f64;
    Ok(BiasBenchmark {
        mean_biased: reports.iter().map(|(_, r)| r.biased_error).sum::<f64>() / n,
        mean_unbiased: reports.iter().map(|(_, r)| r.unbiased_error).sum::<f64>() / n,
        reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QpBench {
    pub problems: usize,
    pub unconverged: usize,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub max_stationarity: f64,
    pub max_feasibility: f64,
    pub max_complementarity: f64,
    pub seconds: f64,
}

/// Solves `count` seeded random QPs with `n_u` inputs over `ell` steps.
pub fn bench_qp(count: usize, seed: u64, n_u: usize, ell: usize, max_iter: usize, tol: f64) -> QpBench {
    let started = Instant::now();
    let mut b = QpBench {
        problems: count,
        unconverged: 0,
        mean_iterations: 0.0,
        max_iterations: 0,
        max_stationarity: 0.0,
        max_feasibility: 0.0,
        max_complementarity: 0.0,
        seconds: 0.0,
    };
    for i in 0..count {
        let qp = random_qp(seed.wrapping_add(i as u64), n_u, ell);
        let dual = hildreth_solve(&qp, max_iter, tol);
        let kkt = kkt_residuals(&qp, &recover_control(&qp, &dual).delta_u, &dual);
        b.unconverged += usize::from(!dual.converged);
        b.mean_iterations += dual.iterations as f64 / count.max(1) as f64;
        b.max_iterations = b.max_iterations.max(dual.iterations);
        b.max_stationarity = b.max_stationarity.max(kkt.stationarity);
        b.max_feasibility = b.max_feasibility.max(kkt.feasibility);
        b.max_complementarity = b.max_complementarity.max(kkt.complementarity);
    }
    b.seconds = started.elapsed().as_secs_f64();
    b
}

/// Frobenius-norm summary used by the estimator benchmark output.
pub fn markov_error(l_u: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (l_u - truth).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{ProfileKind, ScenarioProfile};

    fn record_from(cb_minus_ref: &[f64], cfg: &RunConfig) -> RunRecord {
        RunRecord {
            config: cfg.clone(),
            rows: cb_minus_ref
                .iter()
                .enumerate()
                .map(|(i, d)| Row {
                    t: i as f64 * 0.1,
                    beta: 0.0,
                    h_g: -200.0,
                    u_cmd: [0.0; 4],
                    u_app: [0.0; 4],
                    dcp: [0.0; 4],
                    y: [*d, *d, -0.6 - d],
                    y_r: [0.0, 0.0, -0.6],
                    e_hat: None,
                    dual_iterations: 0,
                    converged: true,
                })
                .collect(),
            fault: None,
            engaged_at: None,
        }
    }

    fn short_cfg(kind: &str, duration: f64, control: bool) -> RunConfig {
        let mut cfg = RunConfig::new(
            ScenarioProfile { kind: ProfileKind::default_for(kind).unwrap(), duration },
            control,
            5,
        );
        cfg.controller.rho = 10;
        cfg.controller.ell = 10;
        cfg.controller.dwell = 20.0;
        cfg
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(-0.0), "0");
        assert_eq!(format_sig6(1.0), "1.00000");
        assert_eq!(format_sig6(299.9), "299.900");
        assert_eq!(format_sig6(-0.0123456789), "-0.0123457");
        assert_eq!(format_sig6(1.5e-7), "1.50000e-7");
        assert_eq!(quantize(quantize(0.123456789)), quantize(0.123456789));
    }

    #[test]
    fn sliding_mean_constant_and_short() {
        let c = vec![2.5; 40];
        assert!(sliding_mean(&c, 30).unwrap().iter().all(|v| (*v - 2.5).abs() < 1e-15));
        assert!(sliding_mean(&c[..29], 30).is_err());
    }

    #[test]
    fn sliding_mean_impulse_plateau() {
        let mut s = vec![0.0; 100];
        s[50] = 1.0;
        let m = sliding_mean(&s, 30).unwrap();
        for (i, v) in m.iter().enumerate() {
            let inside = (36..=65).contains(&i);
            assert!((v - if inside { 1.0 / 30.0 } else { 0.0 }).abs() < 1e-15, "{i}: {v}");
        }
    }

    #[test]
    fn sliding_mean_ramp_matches_direct_sum() {
        let s: Vec<f64> = (0..120).map(|i| 0.3 * i as f64 - 2.0).collect();
        let m = sliding_mean(&s, 30).unwrap();
        for i in 0..s.len() {
            let lo = i.saturating_sub(15);
            let hi = (i + 15).min(s.len());
            let direct: f64 = s[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            assert!((m[i] - direct).abs() < 1e-12);
        }
        // a 30-sample window is centred half a sample early
        for i in 15..s.len() - 15 {
            assert!((m[i] - (0.3 * (i as f64 - 0.5) - 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_records_give_zero_improvement() {
        let cfg = short_cfg("constant", 10.0, false);
        let r = record_from(&[0.1; 40], &cfg);
        let c = compare_runs(&r, &r).unwrap();
        assert_eq!(c.improvement_pct, 0.0);
        assert_eq!(c.tracking_ratio, [1.0; 3]);
    }

    #[test]
    fn halved_deviation_gives_fifty_percent() {
        let cfg = short_cfg("constant", 10.0, false);
        let alt: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let on = record_from(&alt, &cfg);
        let off = record_from(&alt.iter().map(|v| 2.0 * v).collect::<Vec<_>>(), &cfg);
        let c = compare_runs(&on, &off).unwrap();
        assert!((c.on.cb_deviation_rms - 1.0).abs() < 1e-12);
        assert!((c.off.cb_deviation_rms - 2.0).abs() < 1e-12);
        assert!((c.improvement_pct - 50.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_runs_rejected() {
        let a = record_from(&[0.0; 40], &short_cfg("constant", 10.0, false));
        let b = record_from(&[0.0; 40], &short_cfg("sinusoid", 10.0, false));
        assert!(compare_runs(&a, &b).is_err());
        let c = record_from(&[0.0; 41], &short_cfg("constant", 10.0, false));
        assert!(compare_runs(&a, &c).is_err());
    }

    #[test]
    fn empty_record_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("timeseries.csv");
        write_timeseries(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, timeseries_header().join(",") + "\n");
        assert!(read_timeseries(&path).unwrap().is_empty());
    }

    #[test]
    fn rows_match_duration() {
        let r = run_scenario(&short_cfg("sinusoid", 12.0, false)).unwrap();
        assert_eq!(r.rows.len(), 120);
        assert!(r.rows.windows(2).all(|w| w[1].t > w[0].t));
        assert!(r.rows.iter().all(|row| row.u_app == [0.0; 4]));
    }

    #[test]
    fn export_round_trip_reproduces_metrics() {
        let r = run_scenario(&short_cfg("steps", 40.0, true)).unwrap();
        let m = run_metrics(&r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_csv(&r, &m, dir.path()).unwrap();
        let rows = read_timeseries(&dir.path().join("timeseries.csv")).unwrap();
        assert_eq!(rows, r.rows);
        let again = run_metrics(&RunRecord { rows, ..r.clone() }).unwrap();
        assert_eq!(again, m);
        let echo = std::fs::read_to_string(dir.path().join("config_echo.toml")).unwrap();
        assert_eq!(RunConfig::parse(&echo).unwrap(), r.config);
    }

    #[test]
    fn zero_duration_rejected() {
        assert!(run_scenario(&short_cfg("constant", 0.0, false)).is_err());
    }

    #[test]
    fn uncontrolled_sweep_y1_monotone() {
        let mut cfg = short_cfg("sweep", 110.0, false);
        cfg.run.scenario.kind = ProfileKind::Sweep { dwell: 10.0, start: -5.0, stop: 5.0, increment: 1.0, h_g: -200.0 };
        cfg.plant.noise_std = 0.0;
        let levels = sweep_levels(&run_scenario(&cfg).unwrap());
        assert_eq!(levels.len(), 11);
        for w in levels.windows(2) {
            assert!(w[1].beta > w[0].beta);
            assert!(w[1].y_mean[0] > w[0].y_mean[0]);
        }
        // the plant's static map is the oracle at each level
        for l in &levels {
            let want = cfg.plant.steady_offset(SchedulingPoint { beta: l.beta, h_g: -200.0 });
            assert!((l.y_mean[0] - want[0]).abs() < 1e-4, "{l:?}");
        }
    }

    #[test]
    fn qp_bench_converges() {
        let b = bench_qp(20, 1, 3, 5, 2000, 1e-10);
        assert_eq!(b.unconverged, 0);
        assert!(b.max_stationarity < 1e-6);
    }
}
