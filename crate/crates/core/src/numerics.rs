//! Shared fixed-step integrators, reproducible noise streams, and ensemble
//! statistics.
//!
//! Everything here is deliberately fixed-step: trajectory reproduction and
//! noise-path alignment across solver variants need identical time grids, so
//! adaptive stepping is out of scope. Gaussian increments come from one named,
//! platform-stable source: the ziggurat sampler (`rand_distr::StandardNormal`)
//! driven by a counter-based ChaCha12 stream. That pairing is the crate-wide
//! contract; no other generator is ever mixed in.

use nalgebra::{DVector, Dim, Matrix, storage::StorageMut};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    /// The right-hand side produced a non-finite entry at the reported time.
    #[error("non-finite right-hand side near t = {t} ns")]
    NonFiniteRhs { t: f64 },
    /// Step size and horizon violate dt > 0, horizon >= dt.
    #[error("invalid stepper config: dt = {dt}, horizon = {horizon}")]
    InvalidStep { dt: f64, horizon: f64 },
}

/// Integration scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Rk4,
    EulerMaruyama,
}

/// Fixed-step integration plan: scheme, step, horizon, and output stride.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperConfig {
    pub scheme: Scheme,
    /// Step size in ns.
    pub dt: f64,
    /// Total integration time in ns.
    pub horizon: f64,
    /// A sample is recorded every `stride` steps (plus the initial state).
    pub stride: usize,
}

impl Default for StepperConfig {
    fn default() -> Self {
        Self { scheme: Scheme::Rk4, dt: 0.01, horizon: 10.0, stride: 1 }
    }
}

impl StepperConfig {
    pub fn new(scheme: Scheme, dt: f64, horizon: f64, stride: usize) -> Result<Self, NumericsError> {
        let cfg = Self { scheme, dt, horizon, stride: stride.max(1) };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.dt > 0.0) || !(self.horizon >= self.dt) || !self.dt.is_finite() {
            return Err(NumericsError::InvalidStep { dt: self.dt, horizon: self.horizon });
        }
        Ok(())
    }

    /// Number of steps covering the horizon (rounded to the nearest step).
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }
}

/// State that the fixed-step integrators can advance: cloneable, with a fused
/// scaled accumulation and a finiteness check. Implemented for all nalgebra
/// vectors/matrices over f64 and Complex<f64>.
pub trait OdeState: Clone {
    /// `self += a * x`, entrywise.
    fn accum(&mut self, a: f64, x: &Self);
    fn all_finite(&self) -> bool;
}

macro_rules! impl_ode_state {
    ($($scalar:ty),*) => {$(
        impl<R: Dim, C: Dim, S> OdeState for Matrix<$scalar, R, C, S>
        where
            S: StorageMut<$scalar, R, C> + Clone,
        {
            fn accum(&mut self, a: f64, x: &Self) {
                self.zip_apply(x, |y, xv| *y += xv * a);
            }

            fn all_finite(&self) -> bool {
                self.iter().all(|v| v.is_finite())
            }
        }
    )*};
}

impl_ode_state!(f64, Complex<f64>);

/// Classical four-stage Runge-Kutta update, local error O(dt^5).
pub fn rk4_step<S, F>(f: &mut F, y: &S, t: f64, dt: f64) -> Result<S, NumericsError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> S,
{
    let k1 = f(t, y);
    let mut y2 = y.clone();
    y2.accum(0.5 * dt, &k1);
    let k2 = f(t + 0.5 * dt, &y2);
    let mut y3 = y.clone();
    y3.accum(0.5 * dt, &k2);
    let k3 = f(t + 0.5 * dt, &y3);
    let mut y4 = y.clone();
    y4.accum(dt, &k3);
    let k4 = f(t + dt, &y4);

    let mut out = y.clone();
    out.accum(dt / 6.0, &k1);
    out.accum(dt / 3.0, &k2);
    out.accum(dt / 3.0, &k3);
    out.accum(dt / 6.0, &k4);
    if !out.all_finite() {
        return Err(NumericsError::NonFiniteRhs { t });
    }
    Ok(out)
}

/// Euler-Maruyama update `y + drift(t,y) dt + diffusion(t,y) dW`.
///
/// `dw` is a Wiener increment over `dt`; the caller owns its distribution.
pub fn em_step<S, FD, FG>(
    drift: &mut FD,
    diffusion: &mut FG,
    y: &S,
    t: f64,
    dt: f64,
    dw: f64,
) -> Result<S, NumericsError>
where
    S: OdeState,
    FD: FnMut(f64, &S) -> S,
    FG: FnMut(f64, &S) -> S,
{
    let a = drift(t, y);
    let b = diffusion(t, y);
    let mut out = y.clone();
    out.accum(dt, &a);
    out.accum(dw, &b);
    if !out.all_finite() {
        return Err(NumericsError::NonFiniteRhs { t });
    }
    Ok(out)
}

/// Drive an RK4 integration over the configured grid, recording the initial
/// state and every `stride`-th step thereafter. Returns (times, samples).
pub fn integrate<S, F>(
    mut f: F,
    y0: S,
    cfg: &StepperConfig,
) -> Result<(Vec<f64>, Vec<S>), NumericsError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> S,
{
    cfg.validate()?;
    let steps = cfg.steps();
    let mut times = Vec::with_capacity(steps / cfg.stride + 2);
    let mut samples = Vec::with_capacity(steps / cfg.stride + 2);
    let mut y = y0;
    times.push(0.0);
    samples.push(y.clone());
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        y = rk4_step(&mut f, &y, t, cfg.dt)?;
        if (k + 1) % cfg.stride == 0 {
            times.push((k + 1) as f64 * cfg.dt);
            samples.push(y.clone());
        }
    }
    Ok((times, samples))
}

/// Reproducible Gaussian noise stream: master seed plus stream index fully
/// determine the increment sequence. Streams with distinct indices are
/// statistically independent, so trajectory workers each own one.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// One standard normal draw (ziggurat).
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// One Wiener increment over `dt`: N(0, dt).
    pub fn wiener(&mut self, dt: f64) -> f64 {
        self.standard_normal() * dt.sqrt()
    }

    /// One uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

/// Per-time-point ensemble mean and standard error.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub mean: Vec<DVector<f64>>,
    /// Standard error of the mean; zero when n = 1.
    pub stderr: Vec<DVector<f64>>,
    pub n: usize,
}

/// Run `n` trajectories (stream indices 0..n) and reduce them to streaming
/// mean/stderr per time point. Trajectories are computed in parallel; the
/// Welford reduction runs sequentially in stream order, so the result is
/// bit-identical for a fixed master seed regardless of thread scheduling.
pub fn ensemble<F>(run: F, n: usize) -> EnsembleStats
where
    F: Fn(u64) -> Vec<DVector<f64>> + Sync,
{
    assert!(n >= 1, "ensemble needs at least one trajectory");
    let trajectories: Vec<Vec<DVector<f64>>> =
        (0..n as u64).into_par_iter().map(&run).collect();

    let points = trajectories[0].len();
    for traj in &trajectories {
        assert_eq!(traj.len(), points, "trajectories must share one time grid");
    }

    let dim = if points > 0 { trajectories[0][0].len() } else { 0 };
    let mut mean = vec![DVector::zeros(dim); points];
    let mut m2 = vec![DVector::zeros(dim); points];
    for (k, traj) in trajectories.iter().enumerate() {
        let count = (k + 1) as f64;
        for (p, sample) in traj.iter().enumerate() {
            let delta = sample - &mean[p];
            mean[p].axpy(1.0 / count, &delta, 1.0);
            let delta2 = sample - &mean[p];
            m2[p] += delta.component_mul(&delta2);
        }
    }
    let stderr = m2
        .into_iter()
        .map(|acc| {
            if n > 1 {
                acc.map(|v| (v / ((n - 1) as f64)).sqrt() / (n as f64).sqrt())
            } else {
                DVector::zeros(dim)
            }
        })
        .collect();
    EnsembleStats { mean, stderr, n }
}
