//! Stability certificates: logarithmic norms, transition matrices, Lyapunov
//! analysis of the kernel flow, exponential-stability fits, and Monte-Carlo
//! boundedness probes.
//!
//! The norm family is fixed to the Euclidean one, so the matrix measure is
//! μ₂(A) = λ_max((A + Aᵀ)/2) and exp(∫μ₂) upper-bounds transition-matrix
//! growth. All verdicts are sufficient-condition semantics: a failed
//! inequality yields `Inconclusive`, never `Unstable`, unless divergence was
//! observed directly.

use nalgebra::{DMatrix, Matrix2, Vector2};
use rayon::prelude::*;
use thiserror::Error;

use crate::kernel::{self, KernelParams, KernelState, RegimeTag, DIVERGENCE_GUARD};
use crate::numerics::{rk4_step, NumericsError, RngStream};

#[derive(Debug, Error)]
pub enum StabilityError {
    /// The kernel transient has no decaying tail (no steady value, or a
    /// non-contracting linearization).
    #[error("kernel transient has no convergent tail")]
    DivergentTail,
    /// The invariant-set bound is empty: χκ ≥ γ.
    #[error("invariant set is empty: chi*kappa = {chi_kappa} >= gamma = {gamma}")]
    EmptySet { chi_kappa: f64, gamma: f64 },
    /// The sampled norms grow; no exponential-decay envelope fits.
    #[error("no exponential-decay envelope fits the samples")]
    Unfit,
    /// Too few samples for a meaningful fit.
    #[error("need at least 10 samples, got {got}")]
    TooFewSamples { got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Stable => write!(f, "stable"),
            Verdict::Unstable => write!(f, "unstable"),
            Verdict::Inconclusive => write!(f, "inconclusive"),
        }
    }
}

/// One certificate evaluation: what was checked, on what inputs, what came
/// out, and with how much margin.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub criterion: String,
    pub inputs_digest: String,
    pub certificates: Vec<(String, f64)>,
    pub verdict: Verdict,
    pub tolerance: f64,
    pub seed: Option<u64>,
}

impl StabilityReport {
    /// Single-line record: name, values, verdict, margin, seed.
    pub fn to_record(&self) -> String {
        let vals: Vec<String> = self
            .certificates
            .iter()
            .map(|(k, v)| format!("{k}={v:.6e}"))
            .collect();
        let seed = match self.seed {
            Some(s) => format!("{s}"),
            None => "-".into(),
        };
        format!(
            "{} [{}] verdict={} margin={:.3e} seed={}",
            self.criterion,
            vals.join(" "),
            self.verdict,
            self.tolerance,
            seed
        )
    }
}

/// Matrix measure μ₂(A) = λ_max((A + Aᵀ)/2).
pub fn log_norm(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues().max()
}

/// Spectral norm via the symmetric eigenvalues of AᵀA.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    let gram = a.transpose() * a;
    gram.symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |m, &l| m.max(l.max(0.0)))
        .sqrt()
}

/// Accumulated measure Π⁺(t0+T) = ∫_{t0}^{t0+T} μ₂[A(τ)] dτ by composite
/// Simpson quadrature. A negative value certifies decay of the associated
/// transition matrix over the window.
pub fn pi_plus<F: FnMut(f64) -> DMatrix<f64>>(mut a: F, t0: f64, t_len: f64, h: f64) -> f64 {
    assert!(t_len > 0.0 && h > 0.0, "window and step must be positive");
    let mut n = (t_len / h).round() as usize;
    if n == 0 {
        n = 2;
    }
    if n % 2 == 1 {
        n += 1;
    }
    let he = t_len / n as f64;
    let mut acc = log_norm(&a(t0)) + log_norm(&a(t0 + t_len));
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * log_norm(&a(t0 + k as f64 * he));
    }
    acc * he / 3.0
}

/// Linearized contraction rate of the kernel flow at its fixed point: the
/// negated real part of 2κF̄ + Q. Errors when no steady value exists or the
/// linearization does not contract.
pub fn kernel_decay_rate(params: &KernelParams) -> Result<f64, StabilityError> {
    let fbar = kernel::steady_value(params).ok_or(StabilityError::DivergentTail)?;
    let rate = -(2.0 * params.kappa * fbar + params.q).re;
    if rate <= 0.0 {
        return Err(StabilityError::DivergentTail);
    }
    Ok(rate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayIntegral {
    /// Simpson integral of ‖Ã(t)‖_F over [0, horizon].
    pub integral: f64,
    /// Exponential-tail extrapolation ‖Ã(horizon)‖_F / rate.
    pub tail_bound: f64,
    /// Slowest kernel contraction rate used for the tail.
    pub rate: f64,
}

impl DecayIntegral {
    pub fn total(&self) -> f64 {
        self.integral + self.tail_bound
    }
}

/// ∫‖Ã(t)‖_F dt over [0, horizon] plus a tail bound from the kernel's
/// linearized decay at its fixed point. Finite total certifies the
/// vanishing-transient condition.
pub fn decay_integral<F: FnMut(f64) -> DMatrix<f64>>(
    mut a_tilde: F,
    horizon: f64,
    h: f64,
    params: &[KernelParams],
) -> Result<DecayIntegral, StabilityError> {
    let rate = params
        .iter()
        .map(kernel_decay_rate)
        .try_fold(f64::INFINITY, |m, r| r.map(|r| m.min(r)))?;
    let mut n = (horizon / h).round() as usize;
    if n == 0 {
        n = 2;
    }
    if n % 2 == 1 {
        n += 1;
    }
    let he = horizon / n as f64;
    let norm_at = |m: &DMatrix<f64>| m.norm();
    let mut acc = norm_at(&a_tilde(0.0));
    let last = a_tilde(horizon);
    acc += norm_at(&last);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * norm_at(&a_tilde(k as f64 * he));
    }
    let integral = acc * he / 3.0;
    let tail_bound = if rate.is_finite() { norm_at(&last) / rate } else { 0.0 };
    let rate_out = if rate.is_finite() { rate } else { f64::INFINITY };
    Ok(DecayIntegral { integral, tail_bound, rate: rate_out })
}

/// Transition matrix Φ(t, t0): column-wise integration of dΦ/dt = A(t)Φ from
/// Φ(t0, t0) = I with the fixed-step fourth-order scheme.
pub fn transition_matrix<F: FnMut(f64) -> DMatrix<f64>>(
    mut a: F,
    t0: f64,
    t: f64,
    dt: f64,
) -> Result<DMatrix<f64>, StabilityError> {
    assert!(t >= t0, "need t >= t0");
    let dim = a(t0).nrows();
    let mut phi = DMatrix::<f64>::identity(dim, dim);
    if t == t0 {
        return Ok(phi);
    }
    let steps = ((t - t0) / dt).round().max(1.0) as usize;
    let he = (t - t0) / steps as f64;
    let mut rhs = |tau: f64, m: &DMatrix<f64>| a(tau) * m;
    for k in 0..steps {
        phi = rk4_step(&mut rhs, &phi, t0 + k as f64 * he, he)?;
    }
    Ok(phi)
}

/// The quoted 2×2 stability matrix of the kernel flow at a state:
/// [[κR−γ, −κI+u], [κI−u, κR−γ]]. Its symmetric part is (κR−γ)·I₂, so
/// negative-definiteness reduces to κR < γ.
pub fn kernel_jacobian(state: &KernelState, params: &KernelParams) -> Matrix2<f64> {
    let (kap, g, u) = (params.kappa, params.gamma, params.u);
    Matrix2::new(
        kap * state.r - g,
        -kap * state.i + u,
        kap * state.i - u,
        kap * state.r - g,
    )
}

/// Lyapunov function V = ‖𝐟(X)‖² of the kernel vector field, with its rate
/// along the flow, dV/dt = 2𝐟ᵀ(∂𝐟/∂X)𝐟. The skew part of the field's
/// derivative cancels in the quadratic form, leaving 2(2κR−γ)V; the rate is
/// independent of the detuning.
pub fn lyapunov_rate(state: &KernelState, params: &KernelParams) -> (f64, f64) {
    let f = kernel::kernel_rhs(state, params);
    let v = f.norm_squared();
    let (kap, g, u) = (params.kappa, params.gamma, params.u);
    // Derivative of the field: [[2κR−γ, −2κI+u], [2κI−u, 2κR−γ]].
    let j = Matrix2::new(
        2.0 * kap * state.r - g,
        -2.0 * kap * state.i + u,
        2.0 * kap * state.i - u,
        2.0 * kap * state.r - g,
    );
    let dv = 2.0 * f.dot(&(j * f));
    (v, dv)
}

/// Largest certified level α_V of the invariant set {V ≤ α_V}:
/// γ(γ − χκ)/κ². Empty when χκ ≥ γ.
pub fn invariant_set_bound(params: &KernelParams) -> Result<f64, StabilityError> {
    let g = params.gamma;
    let chi = 2.0 * params.s / g;
    let kap = params.kappa;
    if chi * kap >= g {
        return Err(StabilityError::EmptySet { chi_kappa: chi * kap, gamma: g });
    }
    Ok(g * (g - chi * kap) / (kap * kap))
}

/// Monte-Carlo forward-invariance probe of {V ≤ α_V} ∩ {κR ≤ γ/2}: sampled
/// starts are integrated over the horizon and the level is monitored. The
/// resonant flow cannot cross κR = γ/2 outward when 2χκ ≤ γ, so the probed
/// region is itself forward invariant.
pub fn invariant_set_probe(
    params: &KernelParams,
    alpha_v: f64,
    n_samples: usize,
    horizon: f64,
    seed: u64,
) -> StabilityReport {
    let dt = 0.01;
    let steps = (horizon / dt).round() as usize;
    let slack = alpha_v * 1e-8 + 1e-12;
    let excesses: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = RngStream::new(seed, k as u64);
            let x0 = sample_in_level_set(params, alpha_v, &mut rng);
            let mut x = x0;
            let mut worst: f64 = 0.0;
            let mut f = |_t: f64, y: &Vector2<f64>| {
                kernel::kernel_rhs(&KernelState { r: y[0], i: y[1], t: 0.0 }, params)
            };
            for s in 0..steps {
                x = match rk4_step(&mut f, &x, s as f64 * dt, dt) {
                    Ok(v) => v,
                    Err(_) => return f64::INFINITY,
                };
                let (v, _) = lyapunov_rate(
                    &KernelState { r: x[0], i: x[1], t: 0.0 },
                    params,
                );
                worst = worst.max(v - alpha_v);
            }
            worst
        })
        .collect();
    let max_excess = excesses.iter().cloned().fold(0.0f64, f64::max);
    let verdict = if max_excess <= slack { Verdict::Stable } else { Verdict::Inconclusive };
    StabilityReport {
        criterion: "invariant-set-forward-invariance".into(),
        inputs_digest: format!(
            "gamma={};kappa={};u={};alpha_v={};n={};horizon={}",
            params.gamma, params.kappa, params.u, alpha_v, n_samples, horizon
        ),
        certificates: vec![("alpha_v".into(), alpha_v), ("max_excess".into(), max_excess)],
        verdict,
        tolerance: slack,
        seed: Some(seed),
    }
}

/// Rejection-sample a point of {V ≤ α_V} ∩ {κR ≤ γ/2}.
fn sample_in_level_set(params: &KernelParams, alpha_v: f64, rng: &mut RngStream) -> Vector2<f64> {
    let g = params.gamma;
    let kap = params.kappa;
    let r_hi = g / (2.0 * kap);
    let r_lo = -2.0 * g / kap;
    let i_span = 2.0 * g / kap;
    for _ in 0..100_000 {
        let r = r_lo + (r_hi - r_lo) * rng.uniform();
        let i = i_span * (2.0 * rng.uniform() - 1.0);
        let (v, _) = lyapunov_rate(&KernelState { r, i, t: 0.0 }, params);
        if v <= alpha_v {
            return Vector2::new(r, i);
        }
    }
    // The set always contains the fixed point; fall back to it.
    let fbar = kernel::steady_value(params).unwrap_or_default();
    Vector2::new(fbar.re, fbar.im)
}

/// Least-squares envelope fit log‖Φ‖ = log K − α̃·t over (t, ‖Φ‖) samples.
/// A non-negative fitted slope means the norms grow: `Unfit`.
pub fn ues_fit(samples: &[(f64, f64)]) -> Result<(f64, f64), StabilityError> {
    if samples.len() < 10 {
        return Err(StabilityError::TooFewSamples { got: samples.len() });
    }
    let n = samples.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(t, norm) in samples {
        let y = norm.max(1e-300).ln();
        sx += t;
        sy += y;
        sxx += t * t;
        sxy += t * y;
    }
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    if slope >= 0.0 {
        return Err(StabilityError::Unfit);
    }
    Ok((intercept.exp(), -slope))
}

/// Bounded-input bounded-output probe of the kernel flow: random detunings
/// |u| ≤ a_u and starts inside the invariant set, integrated to the horizon.
/// Preconditioned on the resonant branch contracting (not above critical);
/// otherwise the verdict is inconclusive without sampling.
pub fn bibo_probe(
    params: &KernelParams,
    a_u: f64,
    n_samples: usize,
    seed: u64,
) -> StabilityReport {
    let digest = format!(
        "gamma={};kappa={};s={};a_u={};n={}",
        params.gamma, params.kappa, params.s, a_u, n_samples
    );
    let resonant = KernelParams::new(params.gamma, 0.0, 2.0 * params.s / params.gamma, params.kappa);
    if resonant.regime() == RegimeTag::SuperCritical {
        return StabilityReport {
            criterion: "bibo-kernel".into(),
            inputs_digest: digest,
            certificates: vec![],
            verdict: Verdict::Inconclusive,
            tolerance: 0.0,
            seed: Some(seed),
        };
    }
    let alpha_v = match invariant_set_bound(&resonant) {
        Ok(a) => a,
        Err(_) => {
            return StabilityReport {
                criterion: "bibo-kernel".into(),
                inputs_digest: digest,
                certificates: vec![],
                verdict: Verdict::Inconclusive,
                tolerance: 0.0,
                seed: Some(seed),
            }
        }
    };
    let horizon = 60.0 / params.gamma;
    let dt = 0.01;
    let steps = (horizon / dt).round() as usize;
    struct Draw {
        bound: f64,
        late_drift: f64,
        steady_exists: bool,
    }
    let draws: Vec<Option<Draw>> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = RngStream::new(seed, k as u64);
            let u = a_u * (2.0 * rng.uniform() - 1.0);
            let p = KernelParams::new(
                params.gamma,
                u,
                2.0 * params.s / params.gamma,
                params.kappa,
            );
            let x0 = sample_in_level_set(&resonant, alpha_v, &mut rng);
            let mut x = x0;
            let mut bound = x.norm();
            let mut f = |_t: f64, y: &Vector2<f64>| {
                kernel::kernel_rhs(&KernelState { r: y[0], i: y[1], t: 0.0 }, &p)
            };
            let mut late_drift = 0.0;
            for s in 0..steps {
                x = match rk4_step(&mut f, &x, s as f64 * dt, dt) {
                    Ok(v) => v,
                    Err(_) => return None,
                };
                if x.norm() > DIVERGENCE_GUARD {
                    return None;
                }
                bound = bound.max(x.norm());
                if s + 1 == steps {
                    late_drift = f(0.0, &x).norm();
                }
            }
            Some(Draw { bound, late_drift, steady_exists: kernel::steady_value(&p).is_some() })
        })
        .collect();
    let mut beta_x: f64 = 0.0;
    let mut max_drift: f64 = 0.0;
    let mut all_ok = true;
    let mut all_steady = true;
    for d in &draws {
        match d {
            Some(d) => {
                beta_x = beta_x.max(d.bound);
                max_drift = max_drift.max(d.late_drift);
                all_steady &= d.steady_exists;
            }
            None => all_ok = false,
        }
    }
    let verdict = if all_ok { Verdict::Stable } else { Verdict::Inconclusive };
    StabilityReport {
        criterion: "bibo-kernel".into(),
        inputs_digest: digest,
        certificates: vec![
            ("beta_x".into(), beta_x),
            ("late_kernel_drift".into(), max_drift),
            ("steady_values_exist".into(), if all_steady { 1.0 } else { 0.0 }),
        ],
        verdict,
        tolerance: 0.0,
        seed: Some(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::C64;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Scaling-and-squaring matrix exponential, independent of the
    /// integrator, for cross-checking constant-coefficient transition
    /// matrices.
    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let norm = a.norm();
        let s = norm.log2().ceil().max(0.0) as u32 + 4;
        let scaled = a / (2f64.powi(s as i32));
        let dim = a.nrows();
        let mut term = DMatrix::<f64>::identity(dim, dim);
        let mut acc = DMatrix::<f64>::identity(dim, dim);
        for k in 1..24 {
            term = (&term * &scaled) / k as f64;
            acc += &term;
        }
        for _ in 0..s {
            acc = &acc * &acc;
        }
        acc
    }

    #[test]
    fn log_norm_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        assert_abs_diff_eq!(log_norm(&d), -1.0, epsilon = 1e-12);
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert_abs_diff_eq!(log_norm(&skew), 0.0, epsilon = 1e-12);
        let shear = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -1.0]);
        assert_abs_diff_eq!(log_norm(&shear), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pi_plus_constant_and_skew() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        let v = pi_plus(|_| a.clone(), 0.0, 2.0, 0.01);
        assert_abs_diff_eq!(v, -2.0, epsilon = 1e-10);
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, -3.0, 0.0]);
        let w = pi_plus(|_| skew.clone(), 1.0, 5.0, 0.01);
        assert_abs_diff_eq!(w, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn decay_integral_zero_and_exponential() {
        // Rate is exactly 1 for gamma=2, chi=0.75, kappa=1: sqrt(4 - 3) = 1.
        let p = KernelParams::resonant(2.0, 0.75, 1.0);
        let z = decay_integral(|_| DMatrix::zeros(2, 2), 10.0, 0.01, &[p]).unwrap();
        assert_eq!(z.integral, 0.0);
        assert_eq!(z.tail_bound, 0.0);
        let d = decay_integral(
            |t| DMatrix::identity(2, 2) * (-t).exp(),
            20.0,
            0.01,
            &[p],
        )
        .unwrap();
        assert_abs_diff_eq!(d.rate, 1.0, epsilon = 1e-12);
        // Integral to 20 plus the exact tail reproduces the full integral √2.
        assert_abs_diff_eq!(d.total(), 2f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn decay_integral_rejects_supercritical() {
        let p = KernelParams::resonant(2.0, 4.0, 1.0);
        assert_eq!(p.regime(), RegimeTag::SuperCritical);
        let r = decay_integral(|_| DMatrix::zeros(2, 2), 1.0, 0.01, &[p]);
        assert!(matches!(r, Err(StabilityError::DivergentTail)));
    }

    #[test]
    fn transition_matrix_identity_and_exponential() {
        let id = transition_matrix(|_| DMatrix::zeros(3, 3), 0.0, 2.0, 0.01).unwrap();
        assert!((id - DMatrix::<f64>::identity(3, 3)).amax() < 1e-14);
        let a = DMatrix::from_row_slice(2, 2, &[-0.3, 0.8, -0.2, -0.7]);
        let phi = transition_matrix(|_| a.clone(), 0.0, 1.5, 0.001).unwrap();
        let reference = expm(&(a.clone() * 1.5));
        assert!(
            (&phi - &reference).amax() < 1e-9,
            "dev {:e}",
            (&phi - &reference).amax()
        );
    }

    #[test]
    fn kernel_jacobian_examples() {
        let p = KernelParams::new(2.0, 0.0, 1.0, 1.0);
        let j = kernel_jacobian(&KernelState { r: 0.0, i: 0.0, t: 0.0 }, &p);
        assert_eq!(j, Matrix2::new(-2.0, 0.0, 0.0, -2.0));
        let pd = KernelParams::new(2.0, 3.0, 1.0, 1.0);
        let jd = kernel_jacobian(&KernelState { r: 0.0, i: 0.0, t: 0.0 }, &pd);
        assert_eq!(jd, Matrix2::new(-2.0, 3.0, -3.0, -2.0));
    }

    #[test]
    fn kernel_jacobian_negative_definite_along_critical_flow() {
        // Critical case gamma=2, chi=1, kappa=1: kappa*R(t) < gamma along the
        // whole flow from 0, so the symmetric part stays negative definite.
        let p = KernelParams::resonant(2.0, 1.0, 1.0);
        let states = kernel::integrate(&p, C64::ZERO, &crate::numerics::StepperConfig::default())
            .unwrap();
        for st in &states {
            let j = kernel_jacobian(st, &p);
            let sym = (j + j.transpose()) * 0.5;
            assert!(sym.symmetric_eigenvalues().max() < 0.0);
        }
    }

    #[test]
    fn lyapunov_rate_signs() {
        let p = KernelParams::resonant(2.0, 1.0, 1.0);
        // At the fixed point both the function and its rate vanish.
        let fbar = kernel::steady_value(&p).unwrap();
        let (v0, dv0) = lyapunov_rate(&KernelState { r: fbar.re, i: fbar.im, t: 0.0 }, &p);
        assert!(v0 < 1e-20);
        assert!(dv0.abs() < 1e-18);
        // Interior of the critical flow: strictly decreasing.
        let (v, dv) = lyapunov_rate(&KernelState { r: 0.3, i: 0.0, t: 0.0 }, &p);
        assert!(v > 0.0);
        assert!(dv < 0.0);
        // Far side of the contraction region: growth is possible.
        let (vb, dvb) = lyapunov_rate(&KernelState { r: 5.0, i: 0.0, t: 0.0 }, &p);
        assert!(vb > 0.0);
        assert!(dvb > 0.0);
    }

    #[test]
    fn lyapunov_rate_is_detuning_independent() {
        // dV/dt = 2(2κR−γ)V for any u: compare the ratio across detunings.
        for &u in &[0.0, 1.0, -4.0] {
            let p = KernelParams::new(2.0, u, 1.0, 0.5);
            let st = KernelState { r: 0.4, i: -0.3, t: 0.0 };
            let (v, dv) = lyapunov_rate(&st, &p);
            let expected = 2.0 * (2.0 * 0.5 * 0.4 - 2.0);
            assert_abs_diff_eq!(dv / v, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn invariant_set_bound_examples() {
        let p = KernelParams::resonant(2.0, 1.0, 1.0);
        assert_abs_diff_eq!(invariant_set_bound(&p).unwrap(), 2.0, epsilon = 1e-12);
        let boundary = KernelParams::resonant(2.0, 2.0, 1.0);
        assert!(matches!(
            invariant_set_bound(&boundary),
            Err(StabilityError::EmptySet { .. })
        ));
        // Larger gamma certifies a larger set at fixed chi, kappa.
        let lo = invariant_set_bound(&KernelParams::resonant(2.0, 1.0, 1.0)).unwrap();
        let hi = invariant_set_bound(&KernelParams::resonant(4.0, 1.0, 1.0)).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn invariant_set_probe_holds_on_critical_case() {
        let p = KernelParams::resonant(2.0, 1.0, 1.0);
        let alpha = invariant_set_bound(&p).unwrap();
        let report = invariant_set_probe(&p, alpha, 20, 10.0, 7);
        assert_eq!(report.verdict, Verdict::Stable, "{}", report.to_record());
    }

    #[test]
    fn ues_fit_decay_and_growth() {
        let samples: Vec<(f64, f64)> =
            (0..40).map(|k| (k as f64 * 0.25, (-(k as f64) * 0.25).exp())).collect();
        let (kk, alpha) = ues_fit(&samples).unwrap();
        assert_abs_diff_eq!(alpha, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(kk, 1.0, epsilon = 1e-9);
        let growth: Vec<(f64, f64)> =
            (0..40).map(|k| (k as f64 * 0.25, (k as f64 * 0.05).exp())).collect();
        assert!(matches!(ues_fit(&growth), Err(StabilityError::Unfit)));
        assert!(matches!(
            ues_fit(&samples[..5]),
            Err(StabilityError::TooFewSamples { got: 5 })
        ));
    }

    #[test]
    fn bibo_probe_examples() {
        let p = KernelParams::resonant(2.0, 1.0, 1.0);
        let rep = bibo_probe(&p, 0.0, 50, 11);
        assert_eq!(rep.verdict, Verdict::Stable, "{}", rep.to_record());
        let beta = rep.certificates.iter().find(|(k, _)| k == "beta_x").unwrap().1;
        let steady = kernel::steady_value(&p).unwrap().norm();
        assert!(beta >= steady * 0.9, "beta_x {beta} vs steady {steady}");
        let rep2 = bibo_probe(&p, 0.2, 100, 11);
        assert_eq!(rep2.verdict, Verdict::Stable);
        let sup = KernelParams::resonant(2.0, 4.0, 1.0);
        let rep3 = bibo_probe(&sup, 0.1, 10, 11);
        assert_eq!(rep3.verdict, Verdict::Inconclusive);
        assert!(rep3.certificates.is_empty());
    }

    #[test]
    fn perturbed_shifted_flow_stays_in_level_set() {
        // Persistent bounded forcing on the shifted kernel flow: the state
        // remains inside a Lyapunov level set scaled above the forcing size.
        let p = KernelParams::resonant(2.0, 1.0, 0.5);
        let fbar = kernel::steady_value(&p).unwrap();
        let delta = 0.02;
        let mut y = Vector2::new(0.3 - fbar.re, -fbar.im);
        let mut worst: f64 = 0.0;
        let dt = 0.01;
        let mut f = |t: f64, y: &Vector2<f64>| {
            kernel::shifted_rhs(y, &p).unwrap()
                + Vector2::new((t.cos()) * delta, (t.sin()) * delta)
        };
        for k in 0..4000 {
            y = rk4_step(&mut f, &y, k as f64 * dt, dt).unwrap();
            if k > 2000 {
                worst = worst.max(y.norm());
            }
        }
        // Linearized gain: forcing delta against contraction rate ~ Delta-half.
        let rate = kernel_decay_rate(&p).unwrap();
        assert!(worst <= 4.0 * delta / rate, "worst {worst} rate {rate}");
    }

    #[test]
    fn report_record_format() {
        let rep = StabilityReport {
            criterion: "example".into(),
            inputs_digest: "a=1".into(),
            certificates: vec![("value".into(), -0.5)],
            verdict: Verdict::Stable,
            tolerance: 1e-6,
            seed: Some(3),
        };
        let line = rep.to_record();
        assert!(line.contains("example"));
        assert!(line.contains("verdict=stable"));
        assert!(line.contains("seed=3"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Sub-additivity of the matrix measure.
        #[test]
        fn log_norm_is_subadditive(
            a in proptest::collection::vec(-3.0f64..3.0, 9),
            b in proptest::collection::vec(-3.0f64..3.0, 9),
        ) {
            let ma = DMatrix::from_row_slice(3, 3, &a);
            let mb = DMatrix::from_row_slice(3, 3, &b);
            let lhs = log_norm(&(&ma + &mb));
            let rhs = log_norm(&ma) + log_norm(&mb);
            prop_assert!(lhs <= rhs + 1e-9, "{lhs} > {rhs}");
        }

        /// Transition matrices compose along time.
        #[test]
        fn transition_matrix_cocycle(
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            w in 0.2f64..2.0,
        ) {
            let base = DMatrix::from_row_slice(2, 2, &a);
            let f = |t: f64| &base * (1.0 + 0.3 * (w * t).sin());
            let full = transition_matrix(f, 0.0, 2.0, 0.001).unwrap();
            let first = transition_matrix(f, 0.0, 0.8, 0.001).unwrap();
            let second = transition_matrix(f, 0.8, 2.0, 0.001).unwrap();
            prop_assert!((&second * &first - &full).amax() < 1e-8);
        }

        /// exp(Π⁺) upper-bounds the induced-norm growth of Φ.
        #[test]
        fn accumulated_measure_bounds_transition_growth(
            a in proptest::collection::vec(-1.5f64..1.5, 9),
            w in 0.2f64..2.0,
        ) {
            let base = DMatrix::from_row_slice(3, 3, &a);
            let f = |t: f64| &base * (1.0 + 0.5 * (w * t).cos());
            let phi = transition_matrix(f, 0.0, 1.5, 0.001).unwrap();
            let bound = pi_plus(f, 0.0, 1.5, 0.001).exp();
            prop_assert!(
                spectral_norm(&phi) <= bound * (1.0 + 1e-6) + 1e-9,
                "phi {} bound {}",
                spectral_norm(&phi),
                bound
            );
        }
    }
}
