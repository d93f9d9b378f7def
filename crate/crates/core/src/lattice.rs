//! Chain of coupled cavities with one two-level atom per site.
//!
//! The mean dynamics live on the real vector
//! (s^R_1, s^I_1, …, s^R_M, s^I_M, a^R_1, a^I_1, …, a^R_M, a^I_M): atomic
//! coherence components first, cavity amplitude components second, 4M entries
//! total. Each atom damps through its own memory kernel 𝓕_m(t) obeying the
//! same Riccati law as the single-cavity case, exchanges excitation with its
//! cavity through blocks rotating at the local atom-cavity detuning δ_m, and
//! the cavities decay uniformly while hopping to nearest neighbours on an
//! open chain.
//!
//! Homodyne measurement feedback pushes each cavity along one quadrature.
//! The local oscillator is taken phase-locked to the cavity frame: the
//! detuning Δ between cavity and oscillator is carried in the spec and in the
//! displayed subspace matrices, but a residual −iΔ⟨a⟩ rotation is not
//! realized in the mean dynamics. The chain carries no coherent drive, so Δ
//! is pure demodulation bookkeeping; letting it rotate the cavity phase space
//! would average the single-quadrature feedback down to half weight on both
//! quadratures, capping every mode's rate at √2 g_f β_p / 2 − κ, which stays
//! negative for all gains of interest. In the locked frame the rate
//! √2 g_f β_p^{(m)} − κ is attained exactly, which is what the
//! stable/unstable subspace split certifies. Every certificate below is
//! Δ-independent either way, because rotations are antisymmetric and drop out
//! of the symmetrizations involved.

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::kernel::{self, KernelParams, KernelState, RegimeTag};
use crate::numerics::{self, NumericsError, StepperConfig};
use crate::stability::{self, StabilityReport, Verdict};
use crate::trajectory::Trajectory;

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Residual norm below which a kernel pair counts as steady.
pub const STEADY_TOL: f64 = 1e-8;

/// Margin for calling a subspace rate genuinely positive or negative.
const RATE_EDGE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("chain needs at least two sites, got {0}")]
    TooFewSites(usize),
    #[error("per-site field {name} has {got} entries, expected {want}")]
    SiteCountMismatch { name: &'static str, got: usize, want: usize },
    #[error("invalid rate {name} = {value}")]
    InvalidRate { name: &'static str, value: f64 },
    #[error("cavity-pair reduction needs exactly two sites with detached atoms")]
    PreconditionViolated,
    #[error("site {site} kernel has no steady value (regime {regime:?})")]
    NoSteadyKernel { site: usize, regime: RegimeTag },
    #[error("initial state has {got} components, expected {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Chain parameters. The cavity frequency and decay are uniform across
/// sites; atom frequencies, couplings, environment couplings, and feedback
/// gains vary per site.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec {
    /// Site count M ≥ 2.
    pub sites: usize,
    /// Nearest-neighbour hop rate J_c.
    pub hop: f64,
    /// Uniform cavity frequency ω_c.
    pub cavity_freq: f64,
    /// Uniform cavity amplitude decay κ.
    pub kappa: f64,
    /// Local-oscillator detuning Δ = ω_c − ω_d (demodulation bookkeeping).
    pub detuning: f64,
    /// Atom-cavity coupling g_m per site.
    pub g: Vec<f64>,
    /// Atom-cavity detuning δ_m = ω_a^{(m)} − ω_c per site.
    pub delta: Vec<f64>,
    /// Atom-environment coupling κ^{(m)} per site.
    pub kappa_env: Vec<f64>,
    /// x-quadrature feedback gain β_x^{(m)} per site (zero disables).
    pub beta_x: Vec<f64>,
    /// p-quadrature feedback gain β_p^{(m)} per site (zero disables).
    pub beta_p: Vec<f64>,
    /// Shared feedback strength g_f.
    pub g_f: f64,
    /// Environment bandwidth γ > 0, shared by all sites.
    pub gamma: f64,
    /// Environment central frequency Ω, shared.
    pub env_freq: f64,
    /// Kernel constant χ ≥ 0, shared.
    pub chi: f64,
}

impl LatticeSpec {
    pub fn validate(self) -> Result<Self, LatticeError> {
        if self.sites < 2 {
            return Err(LatticeError::TooFewSites(self.sites));
        }
        for (name, len) in [
            ("g", self.g.len()),
            ("delta", self.delta.len()),
            ("kappa_env", self.kappa_env.len()),
            ("beta_x", self.beta_x.len()),
            ("beta_p", self.beta_p.len()),
        ] {
            if len != self.sites {
                return Err(LatticeError::SiteCountMismatch { name, got: len, want: self.sites });
            }
        }
        if !(self.kappa > 0.0) {
            return Err(LatticeError::InvalidRate { name: "kappa", value: self.kappa });
        }
        if !(self.gamma > 0.0) {
            return Err(LatticeError::InvalidRate { name: "gamma", value: self.gamma });
        }
        if !(self.chi >= 0.0) {
            return Err(LatticeError::InvalidRate { name: "chi", value: self.chi });
        }
        for &ke in &self.kappa_env {
            if !(ke >= 0.0) {
                return Err(LatticeError::InvalidRate { name: "kappa_env", value: ke });
            }
        }
        if !self.hop.is_finite() {
            return Err(LatticeError::InvalidRate { name: "hop", value: self.hop });
        }
        Ok(self)
    }

    /// Real state dimension 4M.
    pub fn dim(&self) -> usize {
        4 * self.sites
    }

    /// Riccati constants of site `m` (0-based): the environment detuning is
    /// Ω − ω_a^{(m)} with ω_a^{(m)} = ω_c + δ_m.
    pub fn site_kernel(&self, m: usize) -> KernelParams {
        let u = self.env_freq - (self.cavity_freq + self.delta[m]);
        KernelParams::new(self.gamma, u, self.chi, self.kappa_env[m])
    }

    /// Steady kernel value per site, or the site that cannot settle.
    pub fn steady_kernels(&self) -> Result<Vec<C64>, LatticeError> {
        (0..self.sites)
            .map(|m| {
                let p = self.site_kernel(m);
                kernel::steady_value(&p)
                    .ok_or(LatticeError::NoSteadyKernel { site: m + 1, regime: p.regime() })
            })
            .collect()
    }

    /// The two-cavity configuration used throughout: J_c = 0.1, δ = 0.2,
    /// κ = 1, g = (0.2, 0.4), Δ = 5, ω_a = 43.98, Ω = 38.98, χ = 1,
    /// κ^{(m)} = 0.04, γ = 2, β_x = 0, β_p = 0.2 (all GHz ≡ ns⁻¹).
    pub fn two_site_example(g_f: f64) -> Self {
        Self {
            sites: 2,
            hop: 0.1,
            cavity_freq: 43.78,
            kappa: 1.0,
            detuning: 5.0,
            g: vec![0.2, 0.4],
            delta: vec![0.2, 0.2],
            kappa_env: vec![0.04, 0.04],
            beta_x: vec![0.0, 0.0],
            beta_p: vec![0.2, 0.2],
            g_f,
            gamma: 2.0,
            env_freq: 38.98,
            chi: 1.0,
        }
    }
}

/// Kernel damping block: 𝓕 acting on (Re, Im) as a scaled rotation.
fn rot(f: C64) -> Matrix2<f64> {
    Matrix2::new(f.re, -f.im, f.im, f.re)
}

/// Antisymmetric hop block coupling neighbouring cavity amplitude pairs.
fn hop_block(j: f64) -> Matrix2<f64> {
    Matrix2::new(0.0, j, -j, 0.0)
}

/// Block feeding cavity components into an atom row, phase δ_m t.
fn atom_from_cavity(g: f64, phase: f64) -> Matrix2<f64> {
    let (sn, cs) = phase.sin_cos();
    Matrix2::new(g * sn, g * cs, -g * cs, g * sn)
}

/// Block feeding atom components into a cavity row, phase δ_m t.
fn cavity_from_atom(g: f64, phase: f64) -> Matrix2<f64> {
    let (sn, cs) = phase.sin_cos();
    Matrix2::new(-g * sn, g * cs, -g * cs, -g * sn)
}

/// Time-varying generator of the open-loop chain: atom quadrant −𝓕_m κ^{(m)}
/// block-diagonal, trig exchange quadrants at the per-site detunings, and the
/// cavity quadrant with uniform decay plus nearest-neighbour hops.
pub fn assemble_blocks(t: f64, spec: &LatticeSpec, kernels: &[C64]) -> DMatrix<f64> {
    let m = spec.sites;
    let base = 2 * m;
    let mut a = DMatrix::zeros(4 * m, 4 * m);
    for site in 0..m {
        let r = 2 * site;
        let c = base + 2 * site;
        let phase = spec.delta[site] * t;
        a.view_mut((r, r), (2, 2)).copy_from(&(rot(kernels[site]) * -spec.kappa_env[site]));
        a.view_mut((r, c), (2, 2)).copy_from(&atom_from_cavity(spec.g[site], phase));
        a.view_mut((c, r), (2, 2)).copy_from(&cavity_from_atom(spec.g[site], phase));
        a.view_mut((c, c), (2, 2))
            .copy_from(&Matrix2::from_diagonal_element(-spec.kappa));
        if site + 1 < m {
            let c2 = base + 2 * (site + 1);
            a.view_mut((c, c2), (2, 2)).copy_from(&hop_block(spec.hop));
            a.view_mut((c2, c), (2, 2)).copy_from(&hop_block(spec.hop));
        }
    }
    a
}

/// Open-loop generator with the quadrature feedback folded into the cavity
/// columns: each site adds √2 g_f β_p^{(m)} on its a^R diagonal and
/// −√2 g_f β_x^{(m)} on the a^I-row/a^R-column entry.
pub fn feedback_generator(t: f64, spec: &LatticeSpec, kernels: &[C64]) -> DMatrix<f64> {
    let mut a = assemble_blocks(t, spec, kernels);
    let base = 2 * spec.sites;
    for site in 0..spec.sites {
        let c = base + 2 * site;
        a[(c, c)] += SQRT2 * spec.g_f * spec.beta_p[site];
        a[(c + 1, c)] -= SQRT2 * spec.g_f * spec.beta_x[site];
    }
    a
}

/// d𝒳/dt under measurement feedback, written out componentwise. Atom rows
/// carry no direct feedback term; cavity rows add the single-quadrature push
/// √2 g_f (β_p, −β_x) ⟨a^R_m⟩ and open-boundary hop terms.
pub fn feedback_lattice_rhs(
    t: f64,
    state: &[f64],
    kernels: &[C64],
    spec: &LatticeSpec,
) -> DVector<f64> {
    let m = spec.sites;
    let base = 2 * m;
    debug_assert_eq!(state.len(), 4 * m);
    debug_assert_eq!(kernels.len(), m);
    let mut out = DVector::zeros(4 * m);
    for site in 0..m {
        let sr = state[2 * site];
        let si = state[2 * site + 1];
        let ar = state[base + 2 * site];
        let ai = state[base + 2 * site + 1];
        let f = kernels[site];
        let ke = spec.kappa_env[site];
        let g = spec.g[site];
        let (sn, cs) = (spec.delta[site] * t).sin_cos();
        out[2 * site] = -ke * (f.re * sr - f.im * si) + g * (sn * ar + cs * ai);
        out[2 * site + 1] = -ke * (f.im * sr + f.re * si) + g * (-cs * ar + sn * ai);
        let push = SQRT2 * spec.g_f * ar;
        let mut dar = -spec.kappa * ar + g * (-sn * sr + cs * si) + spec.beta_p[site] * push;
        let mut dai = -spec.kappa * ai + g * (-cs * sr - sn * si) - spec.beta_x[site] * push;
        if site > 0 {
            dar += spec.hop * state[base + 2 * site - 1];
            dai -= spec.hop * state[base + 2 * site - 2];
        }
        if site + 1 < m {
            dar += spec.hop * state[base + 2 * site + 3];
            dai -= spec.hop * state[base + 2 * site + 2];
        }
        out[base + 2 * site] = dar;
        out[base + 2 * site + 1] = dai;
    }
    out
}

/// Closed cavity-pair generator with both atoms detached: uniform decay plus
/// an antisymmetric hop, so the generator is normal and every mode damps at
/// exactly κ (characteristic roots −κ ± iJ_c).
pub fn cavity_subspace(spec: &LatticeSpec) -> Result<DMatrix<f64>, LatticeError> {
    if spec.sites != 2 || spec.g.iter().any(|&g| g != 0.0) {
        return Err(LatticeError::PreconditionViolated);
    }
    let mut a = DMatrix::zeros(4, 4);
    a.view_mut((0, 0), (2, 2))
        .copy_from(&Matrix2::from_diagonal_element(-spec.kappa));
    a.view_mut((2, 2), (2, 2))
        .copy_from(&Matrix2::from_diagonal_element(-spec.kappa));
    a.view_mut((0, 2), (2, 2)).copy_from(&hop_block(spec.hop));
    a.view_mut((2, 0), (2, 2)).copy_from(&hop_block(spec.hop));
    Ok(a)
}

/// Constant matrices of the two-block split. `a_u` drives the cavity
/// quadratures (feedback-shifted decay plus hops); `a_s` damps the atomic
/// amplitudes at their steady kernel values, κ^{(m)} included, so that the
/// residual coupling `q4` vanishes exactly once the kernels settle.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceDecomposition {
    /// 2M×2M cavity-block generator.
    pub a_u: DMatrix<f64>,
    /// 2M×2M atomic-block generator at steady kernels.
    pub a_s: DMatrix<f64>,
    /// Steady kernel value per site.
    pub steady: Vec<C64>,
}

/// Split the feedback chain into its constant cavity and atomic block
/// generators plus the time-varying couplings between them.
pub fn stable_unstable_decomposition(
    spec: &LatticeSpec,
) -> Result<SubspaceDecomposition, LatticeError> {
    let steady = spec.steady_kernels()?;
    let m = spec.sites;
    let mut a_u = DMatrix::zeros(2 * m, 2 * m);
    let mut a_s = DMatrix::zeros(2 * m, 2 * m);
    for site in 0..m {
        let c = 2 * site;
        a_u[(c, c)] = SQRT2 * spec.g_f * spec.beta_p[site] - spec.kappa;
        a_u[(c + 1, c)] = -SQRT2 * spec.g_f * spec.beta_x[site];
        a_u[(c + 1, c + 1)] = -spec.kappa;
        if site + 1 < m {
            a_u.view_mut((c, c + 2), (2, 2)).copy_from(&hop_block(spec.hop));
            a_u.view_mut((c + 2, c), (2, 2)).copy_from(&hop_block(spec.hop));
        }
        a_s.view_mut((c, c), (2, 2))
            .copy_from(&(rot(steady[site]) * -spec.kappa_env[site]));
    }
    Ok(SubspaceDecomposition { a_u, a_s, steady })
}

impl SubspaceDecomposition {
    /// Coupling into the cavity rows from the atoms (the lower-left exchange
    /// quadrant of the full generator).
    pub fn q2(&self, t: f64, spec: &LatticeSpec) -> DMatrix<f64> {
        let m = spec.sites;
        let mut q = DMatrix::zeros(2 * m, 2 * m);
        for site in 0..m {
            let c = 2 * site;
            q.view_mut((c, c), (2, 2))
                .copy_from(&cavity_from_atom(spec.g[site], spec.delta[site] * t));
        }
        q
    }

    /// Coupling into the atom rows from the cavities (the upper-right
    /// exchange quadrant of the full generator).
    pub fn q3(&self, t: f64, spec: &LatticeSpec) -> DMatrix<f64> {
        let m = spec.sites;
        let mut q = DMatrix::zeros(2 * m, 2 * m);
        for site in 0..m {
            let c = 2 * site;
            q.view_mut((c, c), (2, 2))
                .copy_from(&atom_from_cavity(spec.g[site], spec.delta[site] * t));
        }
        q
    }

    /// Residual atom damping mismatch at the instantaneous kernel values;
    /// zero exactly when every kernel sits at its steady point.
    pub fn q4(&self, kernels: &[C64], spec: &LatticeSpec) -> DMatrix<f64> {
        let m = spec.sites;
        let mut q = DMatrix::zeros(2 * m, 2 * m);
        for site in 0..m {
            let c = 2 * site;
            q.view_mut((c, c), (2, 2))
                .copy_from(&(rot(kernels[site]) * -spec.kappa_env[site]));
        }
        q - &self.a_s
    }

    /// Cavity-major coupled generator [[a_u, q2],[q3, a_s]] whose log-norm
    /// integral over one exchange period certifies decay of both blocks.
    pub fn coupled(&self, t: f64, spec: &LatticeSpec) -> DMatrix<f64> {
        let m = spec.sites;
        let mut a = DMatrix::zeros(4 * m, 4 * m);
        a.view_mut((0, 0), (2 * m, 2 * m)).copy_from(&self.a_u);
        a.view_mut((0, 2 * m), (2 * m, 2 * m)).copy_from(&self.q2(t, spec));
        a.view_mut((2 * m, 0), (2 * m, 2 * m)).copy_from(&self.q3(t, spec));
        a.view_mut((2 * m, 2 * m), (2 * m, 2 * m)).copy_from(&self.a_s);
        a
    }
}

/// Half the largest eigenvalue of the symmetrized coupled generator, from the
/// closed-form 2×2 site blocks. Hops, detuning rotations, and the exchange
/// quadrants are mutually transpose-negating, so only the per-site cavity
/// blocks [[2√2g_fβ_p−2κ, ±√2g_fβ_x],[±√2g_fβ_x, −2κ]] and the atomic
/// diagonals −2κ^{(m)}R̄_m survive.
pub fn remark_block_bound(spec: &LatticeSpec, steady: &[C64]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for site in 0..spec.sites {
        let d1 = 2.0 * (SQRT2 * spec.g_f * spec.beta_p[site] - spec.kappa);
        let d2 = -2.0 * spec.kappa;
        let q = SQRT2 * spec.g_f * spec.beta_x[site];
        let lam = 0.5 * (d1 + d2) + (0.25 * (d1 - d2) * (d1 - d2) + q * q).sqrt();
        worst = worst.max(0.5 * lam);
        worst = worst.max(-spec.kappa_env[site] * steady[site].re);
    }
    worst
}

/// Certify the split: per-site cavity rates, the log-norm integral over one
/// exchange period, the closed-form block bound, and the spectra of the two
/// constant blocks. Verdict: Unstable when either block has a genuinely
/// positive mode, Stable when the symmetrized bound is negative (which the
/// all-β_x-zero diagonal dominance case implies), Inconclusive otherwise.
pub fn subspace_stability_report(spec: &LatticeSpec) -> Result<StabilityReport, LatticeError> {
    let dec = stable_unstable_decomposition(spec)?;
    let m = spec.sites;
    let mut certificates = Vec::new();
    for site in 0..m {
        certificates.push((
            format!("cavity_rate_site_{}", site + 1),
            SQRT2 * spec.g_f * spec.beta_p[site] - spec.kappa,
        ));
    }

    // Exchange period: the symmetrized log-norm is time-independent, but the
    // integral is still reported over one period of the slowest rotation (or
    // a unit window when every detuning vanishes).
    let period = spec
        .delta
        .iter()
        .map(|d| d.abs())
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let window = if period.is_finite() { 2.0 * std::f64::consts::PI / period } else { 1.0 };
    let mu = stability::log_norm(&dec.coupled(0.0, spec));
    let integral = stability::pi_plus(|t| dec.coupled(t, spec), 0.0, window, window / 256.0);
    certificates.push(("mu_coupled".into(), mu));
    certificates.push(("mu_integral_over_period".into(), integral));
    let bound = remark_block_bound(spec, &dec.steady);
    certificates.push(("half_lambda_max_blocks".into(), bound));

    let rate_u = dec
        .a_u
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let rate_s = (0..m)
        .map(|site| -spec.kappa_env[site] * dec.steady[site].re)
        .fold(f64::NEG_INFINITY, f64::max);
    certificates.push(("unstable_subspace_rate".into(), rate_u));
    certificates.push(("stable_subspace_rate".into(), rate_s));

    let all_x_zero = spec.beta_x.iter().all(|&b| b == 0.0);
    if all_x_zero {
        let margin = (0..m)
            .map(|site| SQRT2 * spec.g_f * spec.beta_p[site] - spec.kappa)
            .fold(f64::NEG_INFINITY, f64::max);
        certificates.push(("diagonal_dominance_margin".into(), margin));
    }

    let verdict = if rate_u > RATE_EDGE || rate_s > RATE_EDGE {
        Verdict::Unstable
    } else if bound < -RATE_EDGE {
        Verdict::Stable
    } else {
        Verdict::Inconclusive
    };
    Ok(StabilityReport {
        criterion: "lattice-subspace-split".into(),
        inputs_digest: format!(
            "sites={};hop={};kappa={};g_f={};detuning={};gamma={};chi={}",
            spec.sites, spec.hop, spec.kappa, spec.g_f, spec.detuning, spec.gamma, spec.chi
        ),
        certificates,
        verdict,
        tolerance: RATE_EDGE,
        seed: None,
    })
}

/// One chain integration: spec, stepper, initial mean vector, optional
/// initial kernel values (empty ⇒ zeros), and the frozen-kernel switch that
/// pins every 𝓕_m to the white-noise value χ/2.
#[derive(Debug, Clone)]
pub struct LatticeRunConfig {
    pub spec: LatticeSpec,
    pub stepper: StepperConfig,
    pub x0: DVector<f64>,
    pub f0: Vec<C64>,
    pub freeze_kernel: bool,
}

impl LatticeRunConfig {
    pub fn new(
        spec: LatticeSpec,
        stepper: StepperConfig,
        x0: DVector<f64>,
    ) -> Result<Self, LatticeError> {
        let spec = spec.validate()?;
        if x0.len() != spec.dim() {
            return Err(LatticeError::DimensionMismatch { got: x0.len(), want: spec.dim() });
        }
        Ok(Self { spec, stepper, x0, f0: Vec::new(), freeze_kernel: false })
    }
}

/// Integrate the feedback chain with per-site kernel co-integration and
/// record every stride-th sample. Column names are s_{m}_re, s_{m}_im for
/// the atoms followed by a_{m}_re, a_{m}_im for the cavities, 1-based.
pub fn simulate_lattice(cfg: &LatticeRunConfig) -> Result<Trajectory, LatticeError> {
    let spec = &cfg.spec;
    let m = spec.sites;
    let dim = spec.dim();
    if !cfg.f0.is_empty() && cfg.f0.len() != m {
        return Err(LatticeError::SiteCountMismatch { name: "f0", got: cfg.f0.len(), want: m });
    }
    let params: Vec<KernelParams> = (0..m).map(|site| spec.site_kernel(site)).collect();
    let frozen = C64::from(kernel::markovian_value(spec.chi));

    let mut y = DVector::zeros(dim + 2 * m);
    y.rows_mut(0, dim).copy_from(&cfg.x0);
    for site in 0..m {
        let f = cfg.f0.get(site).copied().unwrap_or(C64::ZERO);
        y[dim + 2 * site] = f.re;
        y[dim + 2 * site + 1] = f.im;
    }

    let mut names = Vec::with_capacity(dim);
    for site in 1..=m {
        names.push(format!("s_{site}_re"));
        names.push(format!("s_{site}_im"));
    }
    for site in 1..=m {
        names.push(format!("a_{site}_re"));
        names.push(format!("a_{site}_im"));
    }
    let mut traj = Trajectory::new(names);

    let kernels_of = |y: &DVector<f64>| -> Vec<C64> {
        if cfg.freeze_kernel {
            vec![frozen; m]
        } else {
            (0..m).map(|site| C64::new(y[dim + 2 * site], y[dim + 2 * site + 1])).collect()
        }
    };
    let record = |traj: &mut Trajectory, t: f64, y: &DVector<f64>| {
        traj.push(t, DVector::from_column_slice(&y.as_slice()[..dim]));
        traj.kernels.push(kernels_of(y));
    };
    record(&mut traj, 0.0, &y);

    let mut rhs = |t: f64, y: &DVector<f64>| -> DVector<f64> {
        let kern = kernels_of(y);
        let dx = feedback_lattice_rhs(t, &y.as_slice()[..dim], &kern, spec);
        let mut dy = DVector::zeros(dim + 2 * m);
        dy.rows_mut(0, dim).copy_from(&dx);
        if !cfg.freeze_kernel {
            for site in 0..m {
                let st = KernelState::new(kern[site], t);
                let d = kernel::kernel_rhs(&st, &params[site]);
                dy[dim + 2 * site] = d[0];
                dy[dim + 2 * site + 1] = d[1];
            }
        }
        dy
    };

    let steps = cfg.stepper.steps();
    let dt = cfg.stepper.dt;
    for k in 0..steps {
        let t = k as f64 * dt;
        y = numerics::rk4_step(&mut rhs, &y, t, dt)?;
        if (k + 1) % cfg.stepper.stride == 0 {
            record(&mut traj, (k + 1) as f64 * dt, &y);
        }
    }
    Ok(traj)
}

/// Euclidean norm of the cavity components of one recorded sample.
pub fn cavity_block_norm(traj: &Trajectory, index: usize) -> f64 {
    let n = traj.names.len();
    let base = n / 2;
    traj.samples[index].rows(base, n - base).norm()
}
