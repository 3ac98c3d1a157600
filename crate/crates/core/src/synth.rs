//! Seeded synthetic realizations and plain simulation loops, used by the
//! benchmarks and as independent oracles for the structured formulas.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Real;
use crate::subspace::{assign_observer_poles, spectral_radius, LtiRealization, Signal};

const STATE_RADIUS: f64 = 0.8;
const PREDICTOR_POLE_MAX: f64 = 0.4;
// large observer gains make A − KC strongly non-normal and slow its decay
const MAX_GAIN: f64 = 20.0;

/// Random stable innovation-form realization with `D = 0`, `ρ(A) = 0.8`, the
/// eigenvalues of `A − KC` spread over `(0, 0.4]` and `R_e = noise_std²·I`.
pub fn random_realization(seed: u64, n_x: usize, n_u: usize, n_y: usize, noise_std: f64) -> LtiRealization<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poles: Vec<f64> = (1..=n_x)
        .map(|i| PREDICTOR_POLE_MAX * i as f64 / n_x as f64)
        .collect();
    loop {
        let mut normal = |r: usize, c: usize| DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        let raw = normal(n_x, n_x);
        let b = normal(n_x, n_u);
        let c = normal(n_y, n_x);
        let g = normal(n_x, n_y);
        let radius = spectral_radius(&raw);
        if radius < 1e-3 {
            continue;
        }
        let a = raw * (STATE_RADIUS / radius);
        let Ok(k) = assign_observer_poles(&a, &c, &poles, &g) else {
            continue;
        };
        if !k.iter().all(|v| v.is_finite()) || k.abs().max() > MAX_GAIN {
            continue;
        }
        let re = DMatrix::identity(n_y, n_y) * (noise_std * noise_std);
        let real = LtiRealization::new(a, b, c, DMatrix::zeros(n_y, n_u), k, re)
            .expect("dimensions are consistent by construction");
        if real.check_invariants().is_ok() {
            return real;
        }
    }
}

/// Runs `x⁺ = Ax + Bu + Ke`, `y = Cx + Du + e` from `x0`; returns outputs and
/// the state sequence (state before each step).
pub fn simulate_innovation<T: Real>(
    real: &LtiRealization<T>,
    u: &Signal<T>,
    e: &Signal<T>,
    x0: &DVector<T>,
) -> (Signal<T>, Signal<T>) {
    let n = u.len();
    let mut y = Signal::zeros(real.n_y(), n);
    let mut xs = Signal::zeros(real.n_x(), n);
    let mut x = x0.clone();
    for t in 0..n {
        let ut = u.sample(t);
        let et = e.sample(t);
        xs.set_sample(t, &x);
        y.set_sample(t, &(real.c() * &x + real.d() * ut + et));
        x = real.a() * &x + real.b() * ut + real.k() * et;
    }
    (y, xs)
}

/// Runs `x⁺ = Ãx + B̃u + Ky` on measured data; returns the state sequence.
pub fn simulate_predictor<T: Real>(
    real: &LtiRealization<T>,
    u: &Signal<T>,
    y: &Signal<T>,
    x0: &DVector<T>,
) -> Signal<T> {
    let at = real.predictor_a();
    let bt = real.predictor_b();
    let mut xs = Signal::zeros(real.n_x(), u.len());
    let mut x = x0.clone();
    for t in 0..u.len() {
        xs.set_sample(t, &x);
        x = &at * &x + &bt * u.sample(t) + real.k() * y.sample(t);
    }
    xs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn realizations_are_reproducible_and_valid() {
        let a = random_realization(4, 8, 4, 3, 0.1);
        let b = random_realization(4, 8, 4, 3, 0.1);
        assert_eq!(a, b);
        a.check_invariants().unwrap();
        assert!((spectral_radius(a.a()) - STATE_RADIUS).abs() < 1e-9);
        assert!(a.predictor_a().pow(30).norm() < 1e-6);
    }
}
