//! Dynamics of the non-Markovian decay coefficients F_n(t).
//!
//! A Lorentzian environment (bandwidth γ, center Ω) reduces each transition's
//! memory integral to one complex scalar F_n(t) = R_n(t) + iI_n(t) obeying the
//! constant-coefficient Riccati flow
//!
//! dF/dt = κ F² + Q F + S,  Q = −(γ + iΩ − iω̃_n) = −γ − iu,  S = γχ/2,
//!
//! with u = Ω − ω̃_n the environment detuning. On resonance (u = 0) the flow
//! stays real and splits into three analytic regimes by the sign of
//! D = 4κS − γ²; off resonance it is integrated numerically.

use nalgebra::Vector2;
use thiserror::Error;

use crate::model::{AtomSpec, EnvSpec};
use crate::numerics::{rk4_step, NumericsError, StepperConfig};
use crate::C64;

/// Integration halts once |F| exceeds this; the flow has left any physical
/// regime and is headed for a pole.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Regime boundaries sharper than this are treated as exact.
const REGIME_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("transition index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    /// The closed forms cover only the resonant case.
    #[error("no closed form off resonance (u = {u})")]
    DetunedUnsupported { u: f64 },
    /// The coefficient diverges at (or before) the reported time.
    #[error("kernel coefficient diverges near t = {t} ns")]
    PoleHit { t: f64 },
    /// The flow has no finite limit in this regime.
    #[error("no steady kernel value in this regime")]
    NoSteadyValue,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Constants of one transition's kernel flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    /// Linear coefficient Q = −γ − iu.
    pub q: C64,
    /// Constant forcing S = γχ/2 ≥ 0.
    pub s: f64,
    /// Quadratic coefficient κ ≥ 0.
    pub kappa: f64,
    /// Environment detuning u = Ω − ω̃.
    pub u: f64,
    /// Environment bandwidth γ > 0.
    pub gamma: f64,
    /// Resonant discriminant D = 4κS − γ².
    pub d: f64,
}

/// Analytic regime of the resonant flow, or Detuned when u ≠ 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeTag {
    /// D < 0: two real fixed points, monotone approach to the lower one.
    SubCritical,
    /// D = 0: double fixed point γ/(2κ), algebraic 1/t approach.
    Critical,
    /// D > 0: no fixed point, tangent-type finite-time divergence.
    SuperCritical,
    /// u ≠ 0: complex flow, no resonant closed form.
    Detuned,
}

/// Kernel coefficient value at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelState {
    pub r: f64,
    pub i: f64,
    pub t: f64,
}

impl KernelState {
    pub fn new(f: C64, t: f64) -> Self {
        Self { r: f.re, i: f.im, t }
    }

    pub fn f(&self) -> C64 {
        C64::new(self.r, self.i)
    }
}

impl KernelParams {
    pub fn new(gamma: f64, u: f64, chi: f64, kappa: f64) -> Self {
        let s = gamma * chi / 2.0;
        Self {
            q: C64::new(-gamma, -u),
            s,
            kappa,
            u,
            gamma,
            d: 4.0 * kappa * s - gamma * gamma,
        }
    }

    pub fn resonant(gamma: f64, chi: f64, kappa: f64) -> Self {
        Self::new(gamma, 0.0, chi, kappa)
    }

    pub fn regime(&self) -> RegimeTag {
        if self.u.abs() > REGIME_TOL {
            RegimeTag::Detuned
        } else if self.d.abs() <= REGIME_TOL {
            RegimeTag::Critical
        } else if self.d < 0.0 {
            RegimeTag::SubCritical
        } else {
            RegimeTag::SuperCritical
        }
    }
}

/// Build the kernel constants for transition `n` (1-based, 1..=N-1).
pub fn derive_params(
    atom: &AtomSpec,
    env: &EnvSpec,
    n: usize,
) -> Result<KernelParams, KernelError> {
    let max = atom.transitions();
    if n == 0 || n > max {
        return Err(KernelError::IndexOutOfRange { index: n, max });
    }
    let idx = n - 1;
    let u = env.omega - atom.transition_freqs[idx];
    Ok(KernelParams::new(env.gamma, u, atom.kernel_consts[idx], atom.env_couplings[idx]))
}

/// Time derivative of (R, I):
/// dR/dt = κ(R² − I²) − γR + uI + γχ/2, dI/dt = 2κRI − uR − γI.
pub fn kernel_rhs(state: &KernelState, params: &KernelParams) -> Vector2<f64> {
    let KernelState { r, i, .. } = *state;
    let KernelParams { s, kappa, u, gamma, .. } = *params;
    Vector2::new(
        kappa * (r * r - i * i) - gamma * r + u * i + s,
        2.0 * kappa * r * i - u * r - gamma * i,
    )
}

/// Analytic resonant solution starting from `f0`, by regime:
///
/// - SubCritical: two fixed points r₁ < r₂; logistic relaxation to r₁.
/// - Critical: double point r* = γ/(2κ); F(t) = r* − 1/(κt + C), C = 1/(r* − F0).
/// - SuperCritical: F(t) = a + b·tan(κbt + θ₀), divergent at the tangent pole.
pub fn closed_form(t: f64, params: &KernelParams, f0: C64) -> Result<C64, KernelError> {
    let KernelParams { s, kappa, gamma, .. } = *params;
    match params.regime() {
        RegimeTag::Detuned => Err(KernelError::DetunedUnsupported { u: params.u }),
        RegimeTag::Critical => {
            let rstar = gamma / (2.0 * kappa);
            if (f0 - rstar).norm() < 1e-14 {
                return Ok(C64::from(rstar));
            }
            let c = (C64::from(rstar) - f0).inv();
            if c.im.abs() < REGIME_TOL && c.re < 0.0 {
                let t_pole = -c.re / kappa;
                if t >= t_pole {
                    return Err(KernelError::PoleHit { t: t_pole });
                }
            }
            Ok(C64::from(rstar) - (c + kappa * t).inv())
        }
        RegimeTag::SubCritical => {
            let half = (gamma * gamma - 4.0 * kappa * s).sqrt();
            if kappa == 0.0 {
                // Linear flow: F = S/γ + (F0 − S/γ) e^{−γt}.
                let fix = s / gamma;
                return Ok(fix + (f0 - fix) * (-gamma * t).exp());
            }
            let r1 = 2.0 * s / (gamma + half); // stable root, κ→0 safe form
            let r2 = (gamma + half) / (2.0 * kappa);
            if (f0 - r2).norm() < 1e-14 {
                return Ok(C64::from(r2));
            }
            let g0 = (f0 - r1) / (f0 - r2);
            if g0.im.abs() < REGIME_TOL && g0.re > 1.0 {
                let t_pole = g0.re.ln() / half;
                if t >= t_pole {
                    return Err(KernelError::PoleHit { t: t_pole });
                }
            }
            let g = g0 * (-half * t).exp();
            let f = (C64::from(r1) - g * r2) / (C64::from(1.0) - g);
            Ok(f)
        }
        RegimeTag::SuperCritical => {
            let a = gamma / (2.0 * kappa);
            let b = (4.0 * kappa * s - gamma * gamma).sqrt() / (2.0 * kappa);
            let theta0 = ((f0 - a) / b).atan();
            if theta0.im.abs() < REGIME_TOL {
                let t_pole = (std::f64::consts::FRAC_PI_2 - theta0.re) / (kappa * b);
                if t >= t_pole {
                    return Err(KernelError::PoleHit { t: t_pole });
                }
            }
            let theta = theta0 + kappa * b * t;
            Ok(C64::from(a) + theta.tan() * b)
        }
    }
}

/// Long-time limit of the flow, when one exists.
///
/// On resonance with D ≤ 0 this is the lower root −(Q + √(Q² − 4κS))/(2κ);
/// with D > 0 there is none. Off resonance the algebraic fixed point on the
/// branch continuously connected to the resonant stable root is polished by
/// damped Newton iteration to residual 1e−12; None if that fails to converge.
pub fn steady_value(params: &KernelParams) -> Option<C64> {
    let KernelParams { q, s, kappa, u, gamma, d } = *params;
    if kappa == 0.0 {
        // Linear flow: fixed point −S/Q.
        return Some(s / C64::new(gamma, u));
    }
    if u.abs() <= REGIME_TOL {
        if d > REGIME_TOL {
            return None;
        }
        let half = (gamma * gamma - 4.0 * kappa * s).max(0.0).sqrt();
        return Some(C64::from(2.0 * s / (gamma + half)));
    }
    // Principal branch keeps Re √(Q² − 4κS) > 0 whenever u ≠ 0, so the
    // rationalized root 2S/(w − Q) is cancellation-free.
    let w = (q * q - 4.0 * kappa * s).sqrt();
    let mut f = 2.0 * s / (w - q);
    let residual = |f: C64| kappa * f * f + q * f + s;
    let mut g = residual(f);
    for _ in 0..50 {
        if g.norm() <= 1e-12 {
            return Some(f);
        }
        let deriv = 2.0 * kappa * f + q;
        if deriv.norm() < 1e-300 {
            return None;
        }
        let step = g / deriv;
        let mut lambda = 1.0;
        loop {
            let cand = f - step * lambda;
            let gc = residual(cand);
            if gc.norm() < g.norm() || lambda < 1e-4 {
                f = cand;
                g = gc;
                break;
            }
            lambda *= 0.5;
        }
    }
    if g.norm() <= 1e-12 { Some(f) } else { None }
}

/// Markovian (white-noise) limit of the coefficient: χ/2.
pub fn markovian_value(chi: f64) -> f64 {
    chi / 2.0
}

/// Output map y_F = (R + I, R − I).
pub fn kernel_output(state: &KernelState) -> Vector2<f64> {
    Vector2::new(state.r + state.i, state.r - state.i)
}

/// Shift the resonant flow so its steady point sits at the origin:
/// X̃ = (R − R̄, I).
pub fn shifted_state(
    state: &KernelState,
    params: &KernelParams,
) -> Result<Vector2<f64>, KernelError> {
    let rbar = resonant_steady(params)?;
    Ok(Vector2::new(state.r - rbar, state.i))
}

/// Flow field in shifted coordinates: with a = 2κR̄ − γ,
/// dR̃/dt = κ(R̃² − Ĩ²) + aR̃, dĨ/dt = 2κR̃Ĩ + aĨ.
pub fn shifted_rhs(xt: &Vector2<f64>, params: &KernelParams) -> Result<Vector2<f64>, KernelError> {
    let rbar = resonant_steady(params)?;
    let a = 2.0 * params.kappa * rbar - params.gamma;
    let (rt, it) = (xt[0], xt[1]);
    Ok(Vector2::new(
        params.kappa * (rt * rt - it * it) + a * rt,
        2.0 * params.kappa * rt * it + a * it,
    ))
}

fn resonant_steady(params: &KernelParams) -> Result<f64, KernelError> {
    if params.u.abs() > REGIME_TOL {
        return Err(KernelError::NoSteadyValue);
    }
    match steady_value(params) {
        Some(f) => Ok(f.re),
        None => Err(KernelError::NoSteadyValue),
    }
}

/// Integrate the flow from `f0` over the configured grid, recording the
/// initial state and every `stride`-th step. Halts with PoleHit once |F|
/// leaves the divergence guard.
pub fn integrate(
    params: &KernelParams,
    f0: C64,
    cfg: &StepperConfig,
) -> Result<Vec<KernelState>, KernelError> {
    cfg.validate()?;
    let p = *params;
    let mut f = |t: f64, y: &Vector2<f64>| {
        kernel_rhs(&KernelState { r: y[0], i: y[1], t }, &p)
    };
    let mut y = Vector2::new(f0.re, f0.im);
    let mut out = Vec::with_capacity(cfg.steps() / cfg.stride + 2);
    out.push(KernelState { r: y[0], i: y[1], t: 0.0 });
    for k in 0..cfg.steps() {
        let t = k as f64 * cfg.dt;
        y = rk4_step(&mut f, &y, t, cfg.dt)?;
        if y.norm() > DIVERGENCE_GUARD {
            return Err(KernelError::PoleHit { t: t + cfg.dt });
        }
        if (k + 1) % cfg.stride == 0 {
            out.push(KernelState { r: y[0], i: y[1], t: (k + 1) as f64 * cfg.dt });
        }
    }
    Ok(out)
}
