//! Homodyne measurement feedback for the single cavity: measurement current,
//! quadrature mean dynamics under a Gaussian moment closure, the nonlinear
//! variance flow, noise-cancelling gain design, and the semiclassical
//! two-level atomic feedback equations.

use std::fs;
use std::io::{self, Read as _};
use std::path::Path;

use nalgebra::DVector;
use thiserror::Error;

use crate::kernel::{KernelParams, DIVERGENCE_GUARD};
use crate::model::{AtomSpec, CavitySpec, EnvSpec, FeedbackSpec};
use crate::numerics::{ensemble, EnsembleStats, NumericsError, RngStream, StepperConfig};
use crate::trajectory::Trajectory;
use crate::C64;

const SQRT2: f64 = std::f64::consts::SQRT_2;
/// Quadrature pair vs mode mean agreement required of inputs and monitored
/// along every path.
pub const CONSISTENCY_TOL: f64 = 1e-9;
/// Allowed slack on the initial Bloch normalization w̄² + 4|s̄|² = 1.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("noise-cancelling gains need a nonzero feedback strength")]
    ZeroGain,
    #[error("initial normalization w̄² + 4|s̄|² = {value} is not 1")]
    NormalizationViolated { value: f64 },
    #[error("quadrature pair disagrees with the mode mean by {dev:e}")]
    InconsistentQuadratures { dev: f64 },
    #[error("kernel coefficient diverged at t = {t} ns")]
    KernelDiverged { t: f64 },
    #[error("replay file is malformed: {detail}")]
    MalformedReplay { detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Second moments of the cavity quadratures. The vacuum uncertainty product
/// V_xV_p − V_xp² = 1/4 is monitored, never enforced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMoments {
    pub v_x: f64,
    pub v_xp: f64,
    pub v_p: f64,
}

impl GaussianMoments {
    pub fn vacuum() -> Self {
        Self { v_x: 0.5, v_xp: 0.0, v_p: 0.5 }
    }

    pub fn uncertainty_product(&self) -> f64 {
        self.v_x * self.v_p - self.v_xp * self.v_xp
    }
}

/// Mean values of the cavity quadratures, the mode, and the atomic coherences.
/// x = (a + a†)/√2 and p = i(a† − a)/√2, so ⟨x⟩ = √2 Re⟨a⟩ and
/// ⟨p⟩ = √2 Im⟨a⟩; both representations are carried and must agree.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureState {
    pub x: f64,
    pub p: f64,
    /// ⟨σ⁻_n⟩ per transition.
    pub sigma: Vec<C64>,
    pub a: C64,
}

impl QuadratureState {
    /// Build a consistent state from the mode mean.
    pub fn from_mode(a: C64, sigma: Vec<C64>) -> Self {
        Self { x: SQRT2 * a.re, p: SQRT2 * a.im, sigma, a }
    }

    pub fn vacuum(transitions: usize) -> Self {
        Self::from_mode(C64::ZERO, vec![C64::ZERO; transitions])
    }

    /// Largest disagreement between the quadrature pair and the mode mean.
    pub fn consistency(&self) -> f64 {
        (self.x - SQRT2 * self.a.re)
            .abs()
            .max((self.p - SQRT2 * self.a.im).abs())
    }
}

/// Semiclassical two-level closure variables ᾱ = ⟨a⟩, s̄ = ⟨σ⁻⟩, w̄ = ⟨σ_z⟩.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiclassicalTwoLevel {
    pub alpha: C64,
    pub s: C64,
    pub w: f64,
}

impl SemiclassicalTwoLevel {
    pub fn excited() -> Self {
        Self { alpha: C64::ZERO, s: C64::ZERO, w: 1.0 }
    }

    pub fn ground() -> Self {
        Self { alpha: C64::ZERO, s: C64::ZERO, w: -1.0 }
    }

    /// Bloch-vector normalization w̄² + 4|s̄|², equal to 1 for pure states.
    pub fn normalization(&self) -> f64 {
        self.w * self.w + 4.0 * self.s.norm_sqr()
    }

    pub fn excited_population(&self) -> f64 {
        0.5 * (self.w + 1.0)
    }
}

/// Identity of one stochastic run's noise: the master seed and the number of
/// trajectories drawn from it. Increment sequences are regenerated from the
/// seed-split streams, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseRecord {
    pub seed: u64,
    pub count: u64,
}

impl NoiseRecord {
    /// The Wiener increments trajectory `traj` consumes: `steps` draws of
    /// N(0, dt) from stream `traj` of the master seed.
    pub fn increments(&self, traj: u64, steps: usize, dt: f64) -> Vec<f64> {
        let mut rng = RngStream::new(self.seed, traj);
        (0..steps).map(|_| rng.wiener(dt)).collect()
    }

    /// 16-byte little-endian replay file: seed then count.
    pub fn write_replay(&self, path: &Path) -> Result<(), FeedbackError> {
        let mut bytes = Vec::with_capacity(16);
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(&self.count.to_le_bytes());
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_replay(path: &Path) -> Result<Self, FeedbackError> {
        let mut file = fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() != 16 {
            return Err(FeedbackError::MalformedReplay {
                detail: format!("expected 16 bytes, found {}", bytes.len()),
            });
        }
        let seed = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[8..].try_into().unwrap());
        Ok(Self { seed, count })
    }
}

/// Homodyne measurement record I_c = √2⟨x⟩ + ξ/√η.
pub fn homodyne_current(state: &QuadratureState, xi: f64, eta: f64) -> f64 {
    assert!(eta > 0.0 && eta <= 1.0, "detection efficiency must lie in (0, 1]");
    SQRT2 * state.x + xi / eta.sqrt()
}

/// Cavity-operator feedback model: quadrature feedback G = β_x x + β_p p in
/// the frame rotating at the feedback drive frequency.
#[derive(Debug, Clone)]
pub struct CavityFeedbackSystem<'a> {
    pub atom: &'a AtomSpec,
    pub env: &'a EnvSpec,
    pub cavity: &'a CavitySpec,
    pub feedback: &'a FeedbackSpec,
    /// Frame rotation Δ = ω_c − ω_d.
    pub rot_detuning: f64,
    /// Residual phase δ on the atom-cavity coupling; 0 unless configured.
    pub delta: f64,
}

/// One evaluation of the quadrature mean dynamics, split into deterministic
/// drift and the coefficients multiplying the measurement noise ξ. The noise
/// coefficients of x and p are exactly what the cancellation gains null.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityRhs {
    pub drift_x: f64,
    pub drift_p: f64,
    pub drift_sigma: Vec<C64>,
    pub drift_a: C64,
    pub diffusion_x: f64,
    pub diffusion_p: f64,
    pub diffusion_a: C64,
}

impl CavityRhs {
    /// Rates with the noise realized at value ξ.
    pub fn x_rate(&self, xi: f64) -> f64 {
        self.drift_x + self.diffusion_x * xi
    }

    pub fn p_rate(&self, xi: f64) -> f64 {
        self.drift_p + self.diffusion_p * xi
    }

    pub fn a_rate(&self, xi: f64) -> C64 {
        self.drift_a + self.diffusion_a * xi
    }
}

/// Quadrature mean dynamics with the atom coherences and the mode mean,
/// closed over the Gaussian moments: ⟨(a+a†)a⟩ − ⟨a+a†⟩⟨a⟩ = (V_x − 1/2)
/// + iV_xp. Kernel values are passed per transition.
pub fn cavity_feedback_rhs(
    t: f64,
    state: &QuadratureState,
    moments: &GaussianMoments,
    kernels: &[C64],
    sys: &CavityFeedbackSystem,
) -> CavityRhs {
    let fb = sys.feedback;
    let kappa = sys.cavity.kappa;
    let delta_rot = sys.rot_detuning;
    let vxp = moments.v_x - 0.5;

    // Coupling sum Σ_n g_n e^{−iδt} ⟨σ⁻_n⟩.
    let phase = (-C64::i() * sys.delta * t).exp();
    let mut cs = C64::ZERO;
    for (n, sig) in state.sigma.iter().enumerate() {
        cs += sig * phase * sys.atom.couplings[n];
    }

    let drift_x = delta_rot * state.p - 0.5 * kappa * state.x
        + SQRT2 * cs.im
        + SQRT2 * fb.g_f * fb.beta_p * state.x;
    let drift_p = -delta_rot * state.x - 0.5 * kappa * state.p
        - SQRT2 * cs.re
        - SQRT2 * fb.g_f * fb.beta_x * state.x;
    let drift_sigma: Vec<C64> = state
        .sigma
        .iter()
        .enumerate()
        .map(|(n, sig)| {
            -C64::i() * sys.atom.couplings[n] * phase.conj() * state.a
                - kernels[n] * sys.atom.env_couplings[n] * sig
        })
        .collect();
    let gain = C64::new(fb.beta_x, fb.beta_p);
    let drift_a = -C64::i() * delta_rot * state.a - C64::i() * cs
        - 0.5 * kappa * state.a
        - C64::i() * fb.g_f * gain * state.x;

    let diffusion_x = SQRT2 * vxp + fb.g_f * fb.beta_p;
    let diffusion_p = SQRT2 * moments.v_xp - fb.g_f * fb.beta_x;
    let diffusion_a =
        -C64::i() / SQRT2 * fb.g_f * gain + C64::new(vxp, moments.v_xp);

    CavityRhs {
        drift_x,
        drift_p,
        drift_sigma,
        drift_a,
        diffusion_x,
        diffusion_p,
        diffusion_a,
    }
}

/// Nonlinear flow of (V_x, V_xp, V_p); the squared terms are the Itô
/// corrections from the quadrature noise coefficients.
pub fn variance_rhs(moments: &GaussianMoments, sys: &CavityFeedbackSystem) -> (f64, f64, f64) {
    let fb = sys.feedback;
    let kappa = sys.cavity.kappa;
    let delta = sys.rot_detuning;
    let vx = moments.v_x;
    let vxp = moments.v_xp;
    let vp = moments.v_p;
    let vxk = vx - 0.5;
    let bp = fb.g_f * fb.beta_p;
    let bx = fb.g_f * fb.beta_x;
    let noise_x = SQRT2 * vxk + bp;
    let noise_p = SQRT2 * vxp - bx;

    let dvx = 2.0 * delta * vxp - kappa * vxk + 2.0 * SQRT2 * bp * vxk + bp * bp
        - noise_x * noise_x;
    let dvxp = delta * vp - delta * vx - kappa * vxp + SQRT2 * bp * vxp - SQRT2 * bx * vx
        + 0.5 * SQRT2 * bx
        - bx * bp
        - noise_p * noise_x;
    let dvp = -2.0 * delta * vxp - kappa * vp + 0.5 * kappa - 2.0 * SQRT2 * bx * vxp
        + bx * bx
        - noise_p * noise_p;
    (dvx, dvxp, dvp)
}

/// Gains that null both quadrature noise coefficients:
/// β_p = −√2(V_x − 1/2)/g_f and β_x = √2 V_xp/g_f.
pub fn noise_cancelling_gains(
    moments: &GaussianMoments,
    g_f: f64,
) -> Result<(f64, f64), FeedbackError> {
    if g_f == 0.0 {
        return Err(FeedbackError::ZeroGain);
    }
    let beta_p = -SQRT2 * (moments.v_x - 0.5) / g_f;
    let beta_x = SQRT2 * moments.v_xp / g_f;
    Ok((beta_x, beta_p))
}

/// How the cavity's own environment channel is weighted in the atomic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CavityKernelMode {
    /// F_a ≡ κ/2 (memoryless channel).
    Markovian,
    /// F_a follows its own flow with (ω_c, κ_c, χ_a).
    Riccati,
}

/// Atomic-operator feedback model: two-level atom, G = |0⟩⟨1| + |1⟩⟨0|,
/// drive i𝓔(a† − a) on the cavity.
#[derive(Debug, Clone)]
pub struct AtomicFeedbackSystem<'a> {
    pub atom: &'a AtomSpec,
    pub env: &'a EnvSpec,
    pub cavity: &'a CavitySpec,
    pub g_f: f64,
    /// Drive amplitude 𝓔.
    pub amplitude: f64,
    /// Residual phase δ; 0 unless configured.
    pub delta: f64,
    pub cavity_kernel: CavityKernelMode,
}

impl AtomicFeedbackSystem<'_> {
    /// Flow constants of the cavity channel, present only in Riccati mode.
    pub fn cavity_kernel_params(&self) -> Option<KernelParams> {
        match self.cavity_kernel {
            CavityKernelMode::Markovian => None,
            CavityKernelMode::Riccati => Some(KernelParams::new(
                self.env.gamma,
                self.env.omega - self.cavity.omega_c,
                self.cavity.chi_a,
                self.cavity.kappa_c,
            )),
        }
    }

    /// The constant value F_a takes in Markovian mode.
    pub fn markovian_cavity_kernel(&self) -> C64 {
        C64::from(self.cavity.kappa / 2.0)
    }
}

/// One evaluation of the semiclassical two-level dynamics. The mode mean has
/// no noise coefficient: its higher-order stochastic term is omitted by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomicRhs {
    pub drift_alpha: C64,
    pub drift_s: C64,
    pub drift_w: f64,
    pub diffusion_s: C64,
    pub diffusion_w: f64,
}

/// Semiclassical feedback dynamics: the ᾱw̄ and s̄ᾱ products are the model's
/// closure, taken as its definition.
pub fn atomic_feedback_rhs(
    t: f64,
    state: &SemiclassicalTwoLevel,
    f1: C64,
    fa: C64,
    sys: &AtomicFeedbackSystem,
) -> AtomicRhs {
    let g1 = sys.atom.couplings[0];
    let kappa1 = sys.atom.env_couplings[0];
    let kappa = sys.cavity.kappa;
    let gf = sys.g_f;
    let phase = (C64::i() * sys.delta * t).exp();
    let alpha = state.alpha;
    let s = state.s;
    let w = state.w;

    let drift_alpha =
        -C64::i() * g1 * phase.conj() * s - fa * (0.5 * kappa) * alpha + sys.amplitude;
    let two_re_alpha = 2.0 * alpha.re;
    let drift_s = C64::i() * g1 * phase * alpha * w - f1 * kappa1 * s
        + C64::i() * gf * two_re_alpha * w
        - C64::new(0.0, 2.0 * gf * gf * s.im);
    let drift_w = 4.0 * g1 * (phase * s.conj() * alpha).im
        - 2.0 * f1.re * kappa1 * (w + 1.0)
        - 8.0 * gf * s.im * alpha.re
        - 2.0 * gf * gf * w;
    let diffusion_s = C64::new(0.0, gf * w);
    let diffusion_w = -4.0 * gf * s.im;

    AtomicRhs { drift_alpha, drift_s, drift_w, diffusion_s, diffusion_w }
}

/// What to integrate: the quadrature model or the semiclassical model.
#[derive(Debug, Clone)]
pub enum FeedbackModel<'a> {
    Cavity {
        sys: CavityFeedbackSystem<'a>,
        initial: QuadratureState,
        moments: GaussianMoments,
    },
    Atomic {
        sys: AtomicFeedbackSystem<'a>,
        initial: SemiclassicalTwoLevel,
    },
}

#[derive(Debug, Clone)]
pub struct FeedbackConfig<'a> {
    pub model: FeedbackModel<'a>,
    pub stepper: StepperConfig,
    /// Initial atom-channel kernel values; zeros when empty.
    pub f0: Vec<C64>,
    /// Initial cavity-channel kernel value (atomic Riccati mode).
    pub fa0: C64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackMode {
    /// ξ ≡ 0; integrates the drift with the deterministic stepper.
    Deterministic,
    /// Euler–Maruyama over `n_traj` independent noise streams.
    Stochastic { n_traj: usize, seed: u64 },
}

/// One deterministic trajectory plus run health notes.
#[derive(Debug, Clone)]
pub struct FeedbackRun {
    pub traj: Trajectory,
    pub findings: Vec<String>,
}

/// Ensemble statistics: per-time mean and standard error per observable.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub times: Vec<f64>,
    pub names: Vec<String>,
    pub stats: EnsembleStats,
    pub noise: NoiseRecord,
}

#[derive(Debug, Clone)]
pub enum FeedbackOutput {
    Deterministic(FeedbackRun),
    Ensemble(EnsembleRun),
}

struct PackedLayout {
    transitions: usize,
    kind_cavity: bool,
}

impl PackedLayout {
    fn dim(&self) -> usize {
        if self.kind_cavity {
            // x, p, (σ re/im)×nt, a re/im, V_x, V_xp, V_p, (F re/im)×nt.
            7 + 4 * self.transitions
        } else {
            // α re/im, s re/im, w, F₁ re/im, F_a re/im.
            9
        }
    }

    fn names(&self) -> Vec<String> {
        if self.kind_cavity {
            let mut names = vec!["x".to_string(), "p".to_string()];
            for n in 1..=self.transitions {
                names.push(format!("sigma_{n}_re"));
                names.push(format!("sigma_{n}_im"));
            }
            names.extend(["a_re".into(), "a_im".into(), "v_x".into(), "v_xp".into(), "v_p".into()]);
            names
        } else {
            vec![
                "alpha_re".into(),
                "alpha_im".into(),
                "s_re".into(),
                "s_im".into(),
                "w".into(),
                "pop".into(),
            ]
        }
    }
}

fn initial_kernels(f0: &[C64], transitions: usize) -> Vec<C64> {
    if f0.is_empty() {
        vec![C64::ZERO; transitions]
    } else {
        f0.to_vec()
    }
}

/// Drift and diffusion of the packed state vector; diffusion entries are zero
/// for the moment and kernel components.
fn packed_rhs(
    t: f64,
    y: &DVector<f64>,
    cfg: &FeedbackConfig,
    params: &[KernelParams],
) -> (DVector<f64>, DVector<f64>) {
    match &cfg.model {
        FeedbackModel::Cavity { sys, .. } => {
            let nt = sys.atom.transitions();
            let sigma: Vec<C64> =
                (0..nt).map(|n| C64::new(y[2 + 2 * n], y[3 + 2 * n])).collect();
            let state = QuadratureState {
                x: y[0],
                p: y[1],
                sigma,
                a: C64::new(y[2 + 2 * nt], y[3 + 2 * nt]),
            };
            let moments = GaussianMoments {
                v_x: y[4 + 2 * nt],
                v_xp: y[5 + 2 * nt],
                v_p: y[6 + 2 * nt],
            };
            let kernels: Vec<C64> =
                (0..nt).map(|n| C64::new(y[7 + 2 * nt + 2 * n], y[8 + 2 * nt + 2 * n])).collect();

            let rhs = cavity_feedback_rhs(t, &state, &moments, &kernels, sys);
            let (dvx, dvxp, dvp) = variance_rhs(&moments, sys);

            let mut drift = DVector::zeros(y.len());
            let mut diffusion = DVector::zeros(y.len());
            drift[0] = rhs.drift_x;
            drift[1] = rhs.drift_p;
            diffusion[0] = rhs.diffusion_x;
            diffusion[1] = rhs.diffusion_p;
            for n in 0..nt {
                drift[2 + 2 * n] = rhs.drift_sigma[n].re;
                drift[3 + 2 * n] = rhs.drift_sigma[n].im;
            }
            drift[2 + 2 * nt] = rhs.drift_a.re;
            drift[3 + 2 * nt] = rhs.drift_a.im;
            diffusion[2 + 2 * nt] = rhs.diffusion_a.re;
            diffusion[3 + 2 * nt] = rhs.diffusion_a.im;
            drift[4 + 2 * nt] = dvx;
            drift[5 + 2 * nt] = dvxp;
            drift[6 + 2 * nt] = dvp;
            for (n, p) in params.iter().enumerate() {
                let f = kernels[n];
                let df = p.kappa * f * f + p.q * f + p.s;
                drift[7 + 2 * nt + 2 * n] = df.re;
                drift[8 + 2 * nt + 2 * n] = df.im;
            }
            (drift, diffusion)
        }
        FeedbackModel::Atomic { sys, .. } => {
            let state = SemiclassicalTwoLevel {
                alpha: C64::new(y[0], y[1]),
                s: C64::new(y[2], y[3]),
                w: y[4],
            };
            let f1 = C64::new(y[5], y[6]);
            let fa = match sys.cavity_kernel {
                CavityKernelMode::Markovian => sys.markovian_cavity_kernel(),
                CavityKernelMode::Riccati => C64::new(y[7], y[8]),
            };
            let rhs = atomic_feedback_rhs(t, &state, f1, fa, sys);
            let mut drift = DVector::zeros(9);
            let mut diffusion = DVector::zeros(9);
            drift[0] = rhs.drift_alpha.re;
            drift[1] = rhs.drift_alpha.im;
            drift[2] = rhs.drift_s.re;
            drift[3] = rhs.drift_s.im;
            drift[4] = rhs.drift_w;
            diffusion[2] = rhs.diffusion_s.re;
            diffusion[3] = rhs.diffusion_s.im;
            diffusion[4] = rhs.diffusion_w;
            let p1 = params[0];
            let df1 = p1.kappa * f1 * f1 + p1.q * f1 + p1.s;
            drift[5] = df1.re;
            drift[6] = df1.im;
            if let Some(pa) = sys.cavity_kernel_params() {
                let dfa = pa.kappa * fa * fa + pa.q * fa + pa.s;
                drift[7] = dfa.re;
                drift[8] = dfa.im;
            }
            (drift, diffusion)
        }
    }
}

fn kernel_params_for(cfg: &FeedbackConfig) -> Vec<KernelParams> {
    let (atom, env) = match &cfg.model {
        FeedbackModel::Cavity { sys, .. } => (sys.atom, sys.env),
        FeedbackModel::Atomic { sys, .. } => (sys.atom, sys.env),
    };
    (1..=atom.transitions())
        .map(|n| crate::kernel::derive_params(atom, env, n).expect("index in range"))
        .collect()
}

fn pack_initial(cfg: &FeedbackConfig) -> Result<DVector<f64>, FeedbackError> {
    match &cfg.model {
        FeedbackModel::Cavity { sys, initial, moments } => {
            let dev = initial.consistency();
            if dev > CONSISTENCY_TOL {
                return Err(FeedbackError::InconsistentQuadratures { dev });
            }
            let nt = sys.atom.transitions();
            let layout = PackedLayout { transitions: nt, kind_cavity: true };
            let mut y = DVector::zeros(layout.dim());
            y[0] = initial.x;
            y[1] = initial.p;
            for n in 0..nt {
                y[2 + 2 * n] = initial.sigma[n].re;
                y[3 + 2 * n] = initial.sigma[n].im;
            }
            y[2 + 2 * nt] = initial.a.re;
            y[3 + 2 * nt] = initial.a.im;
            y[4 + 2 * nt] = moments.v_x;
            y[5 + 2 * nt] = moments.v_xp;
            y[6 + 2 * nt] = moments.v_p;
            for (n, f) in initial_kernels(&cfg.f0, nt).iter().enumerate() {
                y[7 + 2 * nt + 2 * n] = f.re;
                y[8 + 2 * nt + 2 * n] = f.im;
            }
            Ok(y)
        }
        FeedbackModel::Atomic { initial, .. } => {
            let norm = initial.normalization();
            if (norm - 1.0).abs() > NORMALIZATION_TOL {
                return Err(FeedbackError::NormalizationViolated { value: norm });
            }
            let mut y = DVector::zeros(9);
            y[0] = initial.alpha.re;
            y[1] = initial.alpha.im;
            y[2] = initial.s.re;
            y[3] = initial.s.im;
            y[4] = initial.w;
            let f1 = initial_kernels(&cfg.f0, 1)[0];
            y[5] = f1.re;
            y[6] = f1.im;
            y[7] = cfg.fa0.re;
            y[8] = cfg.fa0.im;
            Ok(y)
        }
    }
}

fn layout_for(cfg: &FeedbackConfig) -> PackedLayout {
    match &cfg.model {
        FeedbackModel::Cavity { sys, .. } => {
            PackedLayout { transitions: sys.atom.transitions(), kind_cavity: true }
        }
        FeedbackModel::Atomic { .. } => PackedLayout { transitions: 1, kind_cavity: false },
    }
}

fn observe(y: &DVector<f64>, layout: &PackedLayout) -> DVector<f64> {
    if layout.kind_cavity {
        let nt = layout.transitions;
        DVector::from_iterator(7 + 2 * nt, y.iter().take(7 + 2 * nt).cloned())
    } else {
        DVector::from_vec(vec![y[0], y[1], y[2], y[3], y[4], 0.5 * (y[4] + 1.0)])
    }
}

fn kernels_of(y: &DVector<f64>, layout: &PackedLayout) -> Vec<C64> {
    if layout.kind_cavity {
        let nt = layout.transitions;
        (0..nt).map(|n| C64::new(y[7 + 2 * nt + 2 * n], y[8 + 2 * nt + 2 * n])).collect()
    } else {
        vec![C64::new(y[5], y[6]), C64::new(y[7], y[8])]
    }
}

fn check_kernels(y: &DVector<f64>, layout: &PackedLayout, t: f64) -> Result<(), FeedbackError> {
    for f in kernels_of(y, layout) {
        if !f.re.is_finite() || !f.im.is_finite() || f.norm() > DIVERGENCE_GUARD {
            return Err(FeedbackError::KernelDiverged { t });
        }
    }
    Ok(())
}

/// Integrate one noise path with Euler–Maruyama, recording every stride.
fn integrate_path(
    cfg: &FeedbackConfig,
    y0: &DVector<f64>,
    layout: &PackedLayout,
    params: &[KernelParams],
    rng: Option<&mut RngStream>,
) -> Result<(Vec<f64>, Vec<DVector<f64>>, Vec<Vec<C64>>, Vec<f64>), FeedbackError> {
    let dt = cfg.stepper.dt;
    let steps = cfg.stepper.steps();
    let mut y = y0.clone();
    let mut times = vec![0.0];
    let mut samples = vec![observe(&y, layout)];
    let mut kernels = vec![kernels_of(&y, layout)];
    let mut noise = Vec::new();
    let mut rng = rng;
    for k in 0..steps {
        let t = k as f64 * dt;
        let (drift, diffusion) = packed_rhs(t, &y, cfg, params);
        let dw = match &mut rng {
            Some(r) => r.wiener(dt),
            None => 0.0,
        };
        y += drift * dt + diffusion * dw;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFiniteRhs { t: t + dt }.into());
        }
        check_kernels(&y, layout, t + dt)?;
        if (k + 1) % cfg.stepper.stride == 0 {
            times.push((k + 1) as f64 * dt);
            samples.push(observe(&y, layout));
            kernels.push(kernels_of(&y, layout));
            noise.push(dw);
        }
    }
    Ok((times, samples, kernels, noise))
}

/// Deterministic path: ξ ≡ 0, classical RK4 on the drift.
fn integrate_deterministic(
    cfg: &FeedbackConfig,
    y0: &DVector<f64>,
    layout: &PackedLayout,
    params: &[KernelParams],
) -> Result<(Vec<f64>, Vec<DVector<f64>>, Vec<Vec<C64>>), FeedbackError> {
    let dt = cfg.stepper.dt;
    let steps = cfg.stepper.steps();
    let mut y = y0.clone();
    let mut times = vec![0.0];
    let mut samples = vec![observe(&y, layout)];
    let mut kernels = vec![kernels_of(&y, layout)];
    let mut f = |t: f64, yy: &DVector<f64>| packed_rhs(t, yy, cfg, params).0;
    for k in 0..steps {
        let t = k as f64 * dt;
        y = crate::numerics::rk4_step(&mut f, &y, t, dt)?;
        check_kernels(&y, layout, t + dt)?;
        if (k + 1) % cfg.stepper.stride == 0 {
            times.push((k + 1) as f64 * dt);
            samples.push(observe(&y, layout));
            kernels.push(kernels_of(&y, layout));
        }
    }
    Ok((times, samples, kernels))
}

/// Health metrics accumulated over recorded samples.
fn collect_findings(cfg: &FeedbackConfig, samples: &[DVector<f64>]) -> Vec<String> {
    let mut findings = Vec::new();
    match &cfg.model {
        FeedbackModel::Cavity { sys, .. } => {
            findings.push("second-moment closure applied to the mode noise coefficient".into());
            let nt = sys.atom.transitions();
            let mut max_dev: f64 = 0.0;
            let mut min_unc = f64::INFINITY;
            for s in samples {
                let dx = (s[0] - SQRT2 * s[2 + 2 * nt]).abs();
                let dp = (s[1] - SQRT2 * s[3 + 2 * nt]).abs();
                max_dev = max_dev.max(dx.max(dp));
                let unc = s[4 + 2 * nt] * s[6 + 2 * nt] - s[5 + 2 * nt] * s[5 + 2 * nt];
                min_unc = min_unc.min(unc);
            }
            if max_dev > CONSISTENCY_TOL {
                findings.push(format!("quadrature/mode disagreement reached {max_dev:e}"));
            }
            if min_unc < 0.25 - 1e-6 {
                findings.push(format!("uncertainty product dropped to {min_unc}"));
            }
        }
        FeedbackModel::Atomic { .. } => {
            findings
                .push("mode noise coefficient omitted (higher-order amplitude term)".into());
            let mut max_drift: f64 = 0.0;
            for s in samples {
                let norm = s[4] * s[4] + 4.0 * (s[2] * s[2] + s[3] * s[3]);
                max_drift = max_drift.max((norm - 1.0).abs());
            }
            findings.push(format!("bloch normalization drifted by {max_drift:e}"));
        }
    }
    findings
}

/// Run the configured feedback model. Deterministic mode integrates the
/// drift with RK4; stochastic mode averages Euler–Maruyama paths over
/// split noise streams and reports mean ± standard error.
pub fn simulate_feedback(
    cfg: &FeedbackConfig,
    mode: FeedbackMode,
) -> Result<FeedbackOutput, FeedbackError> {
    cfg.stepper.validate()?;
    let layout = layout_for(cfg);
    let y0 = pack_initial(cfg)?;
    let params = kernel_params_for(cfg);

    match mode {
        FeedbackMode::Deterministic => {
            let (times, samples, kernels) =
                integrate_deterministic(cfg, &y0, &layout, &params)?;
            let mut traj = Trajectory::new(layout.names());
            for (t, s) in times.iter().zip(&samples) {
                traj.push(*t, s.clone());
            }
            traj.kernels = kernels;
            let findings = collect_findings(cfg, &samples);
            Ok(FeedbackOutput::Deterministic(FeedbackRun { traj, findings }))
        }
        FeedbackMode::Stochastic { n_traj, seed } => {
            assert!(n_traj >= 1, "stochastic mode needs at least one trajectory");
            let stats = ensemble(
                |stream| {
                    let mut rng = RngStream::new(seed, stream);
                    let (_, samples, _, _) =
                        integrate_path(cfg, &y0, &layout, &params, Some(&mut rng))
                            .expect("noise path diverged");
                    samples
                },
                n_traj,
            );
            let steps = cfg.stepper.steps();
            let dt = cfg.stepper.dt;
            let times: Vec<f64> = std::iter::once(0.0)
                .chain((0..steps).filter_map(|k| {
                    ((k + 1) % cfg.stepper.stride == 0).then(|| (k + 1) as f64 * dt)
                }))
                .collect();
            Ok(FeedbackOutput::Ensemble(EnsembleRun {
                times,
                names: layout.names(),
                stats,
                noise: NoiseRecord { seed, count: n_traj as u64 },
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AtomInput;
    use crate::numerics::Scheme;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_level(g: f64, kappa1: f64, chi: f64, detuning: f64) -> AtomSpec {
        let omega_c = 37.7;
        AtomInput {
            level_energies: vec![omega_c + detuning],
            couplings: vec![g],
            env_couplings: vec![kappa1],
            kernel_consts: vec![chi],
            detunings: None,
        }
        .validate(omega_c)
        .unwrap()
    }

    fn cavity(kappa: f64) -> CavitySpec {
        CavitySpec { omega_c: 37.7, kappa, kappa_c: 1.0, chi_a: 1.0 }
    }

    fn env() -> EnvSpec {
        EnvSpec { gamma: 2.0, omega: 32.7 }
    }

    #[test]
    fn homodyne_current_examples() {
        let vac = QuadratureState::vacuum(1);
        assert_eq!(homodyne_current(&vac, 0.0, 1.0), 0.0);
        let mut one = QuadratureState::vacuum(1);
        one.x = 1.0;
        one.a = C64::from(1.0 / SQRT2);
        assert_abs_diff_eq!(homodyne_current(&one, 0.0, 1.0), SQRT2, epsilon = 1e-15);
        assert_abs_diff_eq!(homodyne_current(&one, 0.5, 0.25), SQRT2 + 1.0, epsilon = 1e-15);
    }

    #[test]
    fn bare_cavity_decay() {
        let at = two_level(0.0, 1.0, 1.0, 0.0);
        let e = env();
        let cav = cavity(0.8);
        let fb = FeedbackSpec::default();
        let sys = CavityFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            feedback: &fb,
            rot_detuning: 0.0,
            delta: 0.0,
        };
        let mut state = QuadratureState::vacuum(1);
        state.x = 2.0;
        state.a = C64::from(SQRT2);
        let rhs = cavity_feedback_rhs(0.0, &state, &GaussianMoments::vacuum(), &[C64::ZERO], &sys);
        assert_abs_diff_eq!(rhs.drift_x, -0.5 * 0.8 * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rhs.drift_p, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn detuning_rotates_p_into_x() {
        let at = two_level(0.0, 1.0, 1.0, 0.0);
        let e = env();
        let cav = cavity(0.0);
        let fb = FeedbackSpec::default();
        let sys = CavityFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            feedback: &fb,
            rot_detuning: 1.0,
            delta: 0.0,
        };
        let mut state = QuadratureState::vacuum(1);
        state.p = 1.0;
        state.a = C64::new(0.0, 1.0 / SQRT2);
        let rhs = cavity_feedback_rhs(0.0, &state, &GaussianMoments::vacuum(), &[C64::ZERO], &sys);
        assert_abs_diff_eq!(rhs.drift_x, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn cancellation_gains_null_the_noise_coefficients() {
        let at = two_level(0.3, 1.0, 1.0, 0.0);
        let e = env();
        let cav = cavity(1.0);
        let moments = GaussianMoments { v_x: 0.9, v_xp: -0.15, v_p: 0.6 };
        let (beta_x, beta_p) = noise_cancelling_gains(&moments, 2.5).unwrap();
        let fb = FeedbackSpec { g_f: 2.5, beta_x, beta_p, eta: 1.0 };
        let sys = CavityFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            feedback: &fb,
            rot_detuning: 0.4,
            delta: 0.0,
        };
        let state = QuadratureState::from_mode(C64::new(0.3, -0.2), vec![C64::new(0.1, 0.05)]);
        let rhs = cavity_feedback_rhs(0.0, &state, &moments, &[C64::from(0.2)], &sys);
        assert!(rhs.diffusion_x.abs() < 1e-12);
        assert!(rhs.diffusion_p.abs() < 1e-12);
        assert!(rhs.diffusion_a.norm() < 1e-12);
    }

    #[test]
    fn gain_examples_and_zero_gain() {
        let vac = GaussianMoments::vacuum();
        assert_eq!(noise_cancelling_gains(&vac, 1.0).unwrap(), (0.0, 0.0));
        let m1 = GaussianMoments { v_x: 1.0, v_xp: 0.0, v_p: 0.5 };
        let (_, beta_p) = noise_cancelling_gains(&m1, 1.0).unwrap();
        assert_abs_diff_eq!(beta_p, -SQRT2 / 2.0, epsilon = 1e-12);
        let m2 = GaussianMoments { v_x: 0.5, v_xp: 0.2, v_p: 0.5 };
        let (beta_x, _) = noise_cancelling_gains(&m2, 2.0).unwrap();
        assert_abs_diff_eq!(beta_x, SQRT2 * 0.1, epsilon = 1e-12);
        assert!(matches!(noise_cancelling_gains(&vac, 0.0), Err(FeedbackError::ZeroGain)));
    }

    #[test]
    fn variance_fixed_point_is_exact() {
        let at = two_level(0.2, 1.0, 1.0, 0.0);
        let e = env();
        let cav = cavity(1.3);
        let fb = FeedbackSpec::default();
        for delta in [0.0, 0.7, -2.0] {
            let sys = CavityFeedbackSystem {
                atom: &at,
                env: &e,
                cavity: &cav,
                feedback: &fb,
                rot_detuning: delta,
                delta: 0.0,
            };
            let (dvx, dvxp, dvp) = variance_rhs(&GaussianMoments::vacuum(), &sys);
            assert_eq!((dvx, dvxp, dvp), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn variance_slope_away_from_fixed_point() {
        // Open loop, Δ = 0, V_x = 1: the x-variance relaxes at −κ/2 − 1/2.
        let at = two_level(0.2, 1.0, 1.0, 0.0);
        let e = env();
        let cav = cavity(0.6);
        let fb = FeedbackSpec::default();
        let sys = CavityFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            feedback: &fb,
            rot_detuning: 0.0,
            delta: 0.0,
        };
        let m = GaussianMoments { v_x: 1.0, v_xp: 0.0, v_p: 0.5 };
        let (dvx, _, _) = variance_rhs(&m, &sys);
        assert_abs_diff_eq!(dvx, -0.6 / 2.0 - 0.5, epsilon = 1e-15);
    }

    #[test]
    fn variances_return_to_vacuum() {
        let at = two_level(0.0, 1.0, 1.0, 0.0);
        let e = env();
        let cav = cavity(1.0);
        let fb = FeedbackSpec::default();
        let sys = CavityFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            feedback: &fb,
            rot_detuning: 0.0,
            delta: 0.0,
        };
        let cfg = FeedbackConfig {
            model: FeedbackModel::Cavity {
                sys,
                initial: QuadratureState::vacuum(1),
                moments: GaussianMoments { v_x: 0.6, v_xp: 0.1, v_p: 0.6 },
            },
            stepper: StepperConfig::new(Scheme::Rk4, 0.01, 20.0, 100).unwrap(),
            f0: Vec::new(),
            fa0: C64::ZERO,
        };
        let out = simulate_feedback(&cfg, FeedbackMode::Deterministic).unwrap();
        let FeedbackOutput::Deterministic(run) = out else { panic!("deterministic") };
        let (_, last) = run.traj.last().unwrap();
        let nt = 1;
        assert_abs_diff_eq!(last[4 + 2 * nt], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(last[5 + 2 * nt], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(last[6 + 2 * nt], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn excited_atom_decay_rate() {
        let at = two_level(0.0, 0.7, 1.0, 0.0);
        let e = env();
        let cav = cavity(0.2);
        let sys = AtomicFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            g_f: 0.0,
            amplitude: 0.0,
            delta: 0.0,
            cavity_kernel: CavityKernelMode::Markovian,
        };
        let f1 = C64::new(0.3, -0.1);
        let rhs = atomic_feedback_rhs(0.0, &SemiclassicalTwoLevel::excited(), f1, C64::ZERO, &sys);
        assert_eq!(rhs.drift_alpha, C64::ZERO);
        assert_eq!(rhs.drift_s, C64::ZERO);
        // −(F₁ + F₁*)κ₁(w̄ + 1) at w̄ = 1.
        assert_abs_diff_eq!(rhs.drift_w, -2.0 * f1.re * 0.7 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn ground_atom_is_dark_without_feedback() {
        let at = two_level(0.4, 0.7, 1.0, 0.0);
        let e = env();
        let cav = cavity(0.2);
        let sys = AtomicFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            g_f: 0.0,
            amplitude: 0.0,
            delta: 0.0,
            cavity_kernel: CavityKernelMode::Markovian,
        };
        let rhs = atomic_feedback_rhs(
            0.0,
            &SemiclassicalTwoLevel::ground(),
            C64::from(0.5),
            C64::from(0.1),
            &sys,
        );
        assert_eq!(rhs.drift_alpha, C64::ZERO);
        assert_eq!(rhs.drift_s, C64::ZERO);
        assert_eq!(rhs.drift_w, 0.0);
        assert_eq!(rhs.diffusion_s, C64::ZERO);
        assert_eq!(rhs.diffusion_w, 0.0);
    }

    #[test]
    fn initial_normalization_is_checked() {
        let at = two_level(0.2, 1.0, 1.0, 0.0);
        let e = env();
        let cav = cavity(0.2);
        let sys = AtomicFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            g_f: 1.0,
            amplitude: 0.0,
            delta: 0.0,
            cavity_kernel: CavityKernelMode::Markovian,
        };
        let bad = SemiclassicalTwoLevel { alpha: C64::ZERO, s: C64::from(0.4), w: 1.0 };
        let cfg = FeedbackConfig {
            model: FeedbackModel::Atomic { sys, initial: bad },
            stepper: StepperConfig::new(Scheme::EulerMaruyama, 0.01, 1.0, 1).unwrap(),
            f0: Vec::new(),
            fa0: C64::ZERO,
        };
        assert!(matches!(
            simulate_feedback(&cfg, FeedbackMode::Deterministic),
            Err(FeedbackError::NormalizationViolated { .. })
        ));
    }

    #[test]
    fn ensemble_mean_matches_deterministic_without_feedback() {
        // Open loop: the mean dynamics are linear, so the noise averages out
        // and the ensemble mean estimates the deterministic path.
        let at = two_level(0.2, 1.0, 1.0, 0.0);
        let e = env();
        let cav = cavity(1.0);
        let fb = FeedbackSpec::default();
        let sys = CavityFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            feedback: &fb,
            rot_detuning: 0.3,
            delta: 0.0,
        };
        let initial = QuadratureState::from_mode(C64::new(0.5, -0.3), vec![C64::new(0.2, 0.1)]);
        let moments = GaussianMoments { v_x: 1.0, v_xp: 0.1, v_p: 0.7 };
        let make_cfg = || FeedbackConfig {
            model: FeedbackModel::Cavity {
                sys: sys.clone(),
                initial: initial.clone(),
                moments,
            },
            stepper: StepperConfig::new(Scheme::EulerMaruyama, 0.01, 4.0, 25).unwrap(),
            f0: Vec::new(),
            fa0: C64::ZERO,
        };
        let det = match simulate_feedback(&make_cfg(), FeedbackMode::Deterministic).unwrap() {
            FeedbackOutput::Deterministic(run) => run,
            _ => unreachable!(),
        };
        let ens = match simulate_feedback(
            &make_cfg(),
            FeedbackMode::Stochastic { n_traj: 2000, seed: 11 },
        )
        .unwrap()
        {
            FeedbackOutput::Ensemble(run) => run,
            _ => unreachable!(),
        };
        // The deterministic run uses RK4 and the ensemble Euler–Maruyama, so
        // allow the O(dt) discretization bias on top of 3 standard errors.
        for (k, mean) in ens.stats.mean.iter().enumerate() {
            for idx in [0usize, 1] {
                let tol = 3.0 * ens.stats.stderr[k][idx] + 2e-2;
                let det_val = det.traj.samples[k][idx];
                assert!(
                    (mean[idx] - det_val).abs() < tol,
                    "t = {}: mean {} vs {}",
                    ens.times[k],
                    mean[idx],
                    det_val
                );
            }
        }
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let at = two_level(0.2, 1.0, 1.0, 0.0);
        let e = env();
        let cav = cavity(0.2);
        let sys = AtomicFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            g_f: 1.0,
            amplitude: 0.5,
            delta: 0.0,
            cavity_kernel: CavityKernelMode::Riccati,
        };
        let cfg = FeedbackConfig {
            model: FeedbackModel::Atomic { sys, initial: SemiclassicalTwoLevel::excited() },
            stepper: StepperConfig::new(Scheme::EulerMaruyama, 0.01, 2.0, 10).unwrap(),
            f0: Vec::new(),
            fa0: C64::ZERO,
        };
        let run = |cfg: &FeedbackConfig| match simulate_feedback(
            cfg,
            FeedbackMode::Stochastic { n_traj: 16, seed: 99 },
        )
        .unwrap()
        {
            FeedbackOutput::Ensemble(r) => r,
            _ => unreachable!(),
        };
        let a = run(&cfg);
        let b = run(&cfg);
        for (ma, mb) in a.stats.mean.iter().zip(&b.stats.mean) {
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn noise_record_replay_roundtrip() {
        let record = NoiseRecord { seed: 424242, count: 7 };
        let dir = std::env::temp_dir().join("nmq_feedback_replay_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("noise.replay");
        record.write_replay(&path).unwrap();
        let back = NoiseRecord::read_replay(&path).unwrap();
        assert_eq!(record, back);
        let inc1 = record.increments(3, 100, 0.01);
        let inc2 = back.increments(3, 100, 0.01);
        assert_eq!(inc1, inc2);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn wiener_increment_moments() {
        let record = NoiseRecord { seed: 7, count: 1 };
        let dt = 0.01;
        let inc = record.increments(0, 200_000, dt);
        let mean: f64 = inc.iter().sum::<f64>() / inc.len() as f64;
        let var: f64 = inc.iter().map(|x| x * x).sum::<f64>() / inc.len() as f64;
        // Standard error of the mean is √(dt/n) ≈ 2.2e−4.
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((var - dt).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn quadratures_track_mode_mean_along_paths() {
        let at = two_level(0.3, 1.0, 1.0, 1.5);
        let e = env();
        let cav = cavity(0.7);
        let fb = FeedbackSpec { g_f: 1.2, beta_x: 0.3, beta_p: -0.4, eta: 1.0 };
        let sys = CavityFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            feedback: &fb,
            rot_detuning: 0.5,
            delta: 0.0,
        };
        let initial = QuadratureState::from_mode(C64::new(0.4, 0.2), vec![C64::new(0.1, -0.2)]);
        let cfg = FeedbackConfig {
            model: FeedbackModel::Cavity {
                sys,
                initial,
                moments: GaussianMoments { v_x: 0.8, v_xp: 0.05, v_p: 0.55 },
            },
            stepper: StepperConfig::new(Scheme::Rk4, 0.01, 5.0, 10).unwrap(),
            f0: Vec::new(),
            fa0: C64::ZERO,
        };
        let out = simulate_feedback(&cfg, FeedbackMode::Deterministic).unwrap();
        let FeedbackOutput::Deterministic(run) = out else { panic!("deterministic") };
        assert!(
            !run.findings.iter().any(|f| f.contains("disagreement")),
            "findings: {:?}",
            run.findings
        );
    }

    #[test]
    fn inconsistent_initial_quadratures_are_rejected() {
        let at = two_level(0.2, 1.0, 1.0, 0.0);
        let e = env();
        let cav = cavity(0.2);
        let fb = FeedbackSpec::default();
        let sys = CavityFeedbackSystem {
            atom: &at,
            env: &e,
            cavity: &cav,
            feedback: &fb,
            rot_detuning: 0.0,
            delta: 0.0,
        };
        let mut initial = QuadratureState::vacuum(1);
        initial.x = 1.0;
        let cfg = FeedbackConfig {
            model: FeedbackModel::Cavity { sys, initial, moments: GaussianMoments::vacuum() },
            stepper: StepperConfig::new(Scheme::Rk4, 0.01, 1.0, 1).unwrap(),
            f0: Vec::new(),
            fa0: C64::ZERO,
        };
        assert!(matches!(
            simulate_feedback(&cfg, FeedbackMode::Deterministic),
            Err(FeedbackError::InconsistentQuadratures { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cancellation_holds_for_any_state(
            vx in 0.3f64..2.0,
            vxp in -0.5f64..0.5,
            gf in 0.2f64..4.0,
            ax in -1.0f64..1.0,
            ap in -1.0f64..1.0,
        ) {
            let at = two_level(0.3, 1.0, 1.0, 0.0);
            let e = env();
            let cav = cavity(1.0);
            let moments = GaussianMoments { v_x: vx, v_xp: vxp, v_p: 0.6 };
            let (beta_x, beta_p) = noise_cancelling_gains(&moments, gf).unwrap();
            let fb = FeedbackSpec { g_f: gf, beta_x, beta_p, eta: 1.0 };
            let sys = CavityFeedbackSystem {
                atom: &at,
                env: &e,
                cavity: &cav,
                feedback: &fb,
                rot_detuning: 0.4,
                delta: 0.0,
            };
            let state = QuadratureState::from_mode(C64::new(ax, ap), vec![C64::new(0.1, 0.05)]);
            let rhs = cavity_feedback_rhs(0.0, &state, &moments, &[C64::from(0.2)], &sys);
            prop_assert!(rhs.diffusion_x.abs() < 1e-12);
            prop_assert!(rhs.diffusion_p.abs() < 1e-12);
            prop_assert!(rhs.diffusion_a.norm() < 1e-12);
        }
    }
}
