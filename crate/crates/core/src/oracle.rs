//! Independent ground truth: dense truncated-Fock-space integration of the
//! memory-kernel master equation and its measurement-feedback stochastic
//! variant, used to validate every mean-value model on small instances.
//!
//! The Hilbert space is atoms-then-cavities, site-major: for M sites the full
//! space is (atom_1 ⊗ ⋯ ⊗ atom_M) ⊗ (cav_1 ⊗ ⋯ ⊗ cav_M). Everything is dense
//! by design; the dimension guard keeps runs at desk scale.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::kernel::{self, KernelParams};
use crate::model::{AtomSpec, DriveSpec, EnvSpec};
use crate::numerics::{rk4_step, NumericsError, OdeState, StepperConfig};
use crate::trajectory::Trajectory;
use crate::C64;

/// Hard cap on the dense Hilbert-space dimension.
pub const MAX_DIM: usize = 4096;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("Hilbert dimension {dim} exceeds the dense cap {max}")]
    DimensionTooLarge { dim: usize, max: usize },
    #[error("trace drifted by {drift:e} in one step at t = {t} ns")]
    TraceLost { t: f64, drift: f64 },
    #[error("trajectories live on different grids ({len_a} vs {len_b} points)")]
    GridMismatch { len_a: usize, len_b: usize },
    #[error("photon cutoff {n_ph} still inadequate at the dimension cap")]
    CutoffInadequate { n_ph: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Tensor-space bookkeeping: `levels` per atom, photon cutoff per cavity,
/// and the number of sites (atom-cavity pairs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HilbertConfig {
    pub levels: usize,
    pub n_ph: usize,
    pub cavities: usize,
}

impl HilbertConfig {
    pub fn dim(&self) -> usize {
        self.levels.pow(self.cavities as u32) * (self.n_ph + 1).pow(self.cavities as u32)
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let dim = self.dim();
        if dim > MAX_DIM {
            return Err(OracleError::DimensionTooLarge { dim, max: MAX_DIM });
        }
        Ok(())
    }
}

/// Ladder, collapse, quadrature, and projector matrices on the full space.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    pub dim: usize,
    pub cfg: HilbertConfig,
    /// Annihilation operator per cavity.
    pub a: Vec<DMatrix<C64>>,
    /// Photon number per cavity.
    pub number: Vec<DMatrix<C64>>,
    /// σ⁺_n per site (outer) and transition (inner, n = 1 at index 0).
    pub splus: Vec<Vec<DMatrix<C64>>>,
    pub sminus: Vec<Vec<DMatrix<C64>>>,
    /// Collapse operator √κ_n |n−1⟩⟨n| per site and transition.
    pub l_parts: Vec<Vec<DMatrix<C64>>>,
    /// Σ_n √κ_n |n−1⟩⟨n| per site.
    pub l_total: Vec<DMatrix<C64>>,
    /// Level projector |k⟩⟨k| per site and level.
    pub level_proj: Vec<Vec<DMatrix<C64>>>,
    /// Quadratures x = (a + a†)/√2 and p = −i(a − a†)/√2 per cavity.
    pub x: Vec<DMatrix<C64>>,
    pub p: Vec<DMatrix<C64>>,
}

fn fock_annihilator(n_ph: usize) -> DMatrix<C64> {
    let d = n_ph + 1;
    let mut m = DMatrix::<C64>::zeros(d, d);
    for k in 1..d {
        m[(k - 1, k)] = C64::from((k as f64).sqrt());
    }
    m
}

fn atom_lower(levels: usize, n: usize) -> DMatrix<C64> {
    // |n−1⟩⟨n| on one atom factor.
    let mut m = DMatrix::<C64>::zeros(levels, levels);
    m[(n - 1, n)] = C64::ONE;
    m
}

fn atom_proj(levels: usize, k: usize) -> DMatrix<C64> {
    let mut m = DMatrix::<C64>::zeros(levels, levels);
    m[(k, k)] = C64::ONE;
    m
}

/// Place `op` on tensor factor `slot` of the atoms-then-cavities product.
fn embed(cfg: &HilbertConfig, slot: usize, op: &DMatrix<C64>) -> DMatrix<C64> {
    let m = cfg.cavities;
    let mut acc = DMatrix::<C64>::identity(1, 1);
    for s in 0..2 * m {
        let factor_dim = if s < m { cfg.levels } else { cfg.n_ph + 1 };
        if s == slot {
            acc = acc.kronecker(op);
        } else {
            acc = acc.kronecker(&DMatrix::<C64>::identity(factor_dim, factor_dim));
        }
    }
    acc
}

/// Build the operator set. `env_couplings[m]` holds the per-transition decay
/// rates κ_n of site m's collapse operators.
pub fn build_operators(
    cfg: &HilbertConfig,
    env_couplings: &[Vec<f64>],
) -> Result<OperatorSet, OracleError> {
    cfg.validate()?;
    assert_eq!(env_couplings.len(), cfg.cavities, "one κ list per site");
    let m = cfg.cavities;
    let dim = cfg.dim();
    let af = fock_annihilator(cfg.n_ph);
    let nf = af.adjoint() * &af;

    let mut a = Vec::with_capacity(m);
    let mut number = Vec::with_capacity(m);
    let mut splus = Vec::with_capacity(m);
    let mut sminus = Vec::with_capacity(m);
    let mut l_parts = Vec::with_capacity(m);
    let mut l_total = Vec::with_capacity(m);
    let mut level_proj = Vec::with_capacity(m);
    let mut x = Vec::with_capacity(m);
    let mut p = Vec::with_capacity(m);

    for site in 0..m {
        a.push(embed(cfg, m + site, &af));
        number.push(embed(cfg, m + site, &nf));
        let mut sp = Vec::new();
        let mut sm = Vec::new();
        let mut lp = Vec::new();
        let mut ltot = DMatrix::<C64>::zeros(dim, dim);
        for n in 1..cfg.levels {
            let lower = embed(cfg, site, &atom_lower(cfg.levels, n));
            sp.push(lower.adjoint());
            sm.push(lower.clone());
            let kap = env_couplings[site][n - 1];
            let l = &lower * C64::from(kap.sqrt());
            ltot += &l;
            lp.push(l);
        }
        splus.push(sp);
        sminus.push(sm);
        l_parts.push(lp);
        l_total.push(ltot);
        level_proj.push(
            (0..cfg.levels)
                .map(|k| embed(cfg, site, &atom_proj(cfg.levels, k)))
                .collect(),
        );
        let sqrt2_inv = C64::from(1.0 / 2f64.sqrt());
        x.push((&a[site] + a[site].adjoint()) * sqrt2_inv);
        p.push((&a[site] - a[site].adjoint()) * (-C64::i() * sqrt2_inv));
    }

    Ok(OperatorSet {
        dim,
        cfg: *cfg,
        a,
        number,
        splus,
        sminus,
        l_parts,
        l_total,
        level_proj,
        x,
        p,
    })
}

/// −i[H, ρ] plus kernel-weighted dissipators: for each (L, w),
/// (w + w*) LρL† − w L†Lρ − w* ρL†L. Its trace vanishes identically, also
/// for complex weights.
pub fn master_rhs_generic(
    rho: &DMatrix<C64>,
    h: &DMatrix<C64>,
    dissipators: &[(&DMatrix<C64>, C64)],
) -> DMatrix<C64> {
    let mut out = h * rho - rho * h;
    out *= -C64::i();
    for (l, w) in dissipators {
        let ldag = l.adjoint();
        let ldl = &ldag * *l;
        out += (*l * rho * &ldag) * (*w + w.conj()) - (&ldl * rho) * *w - (rho * &ldl) * w.conj();
    }
    out
}

/// Interaction Hamiltonian of one site: Σ_n g_n (e^{iΔ_n t} σ⁺_n a + h.c.),
/// plus the drive i𝓔(a† − a) when configured.
pub fn single_site_hamiltonian(
    t: f64,
    atom: &AtomSpec,
    drive: Option<&DriveSpec>,
    ops: &OperatorSet,
    site: usize,
) -> DMatrix<C64> {
    let dim = ops.dim;
    let mut h = DMatrix::<C64>::zeros(dim, dim);
    for n in 1..atom.levels {
        let g = atom.couplings[n - 1];
        let d = atom.detunings[n - 1];
        let phase = C64::from(g) * (C64::i() * d * t).exp();
        let term = &ops.splus[site][n - 1] * &ops.a[site] * phase;
        h += &term + term.adjoint();
    }
    if let Some(dr) = drive {
        let amp = C64::from(dr.amplitude);
        h += (ops.a[site].adjoint() - &ops.a[site]) * (C64::i() * amp);
    }
    h
}

/// Full master-equation right side for one site with per-transition kernel
/// weights F_n (the collapse operators already carry √κ_n).
pub fn master_rhs(
    rho: &DMatrix<C64>,
    t: f64,
    kernels: &[C64],
    atom: &AtomSpec,
    drive: Option<&DriveSpec>,
    ops: &OperatorSet,
) -> DMatrix<C64> {
    let h = single_site_hamiltonian(t, atom, drive, ops, 0);
    let diss: Vec<(&DMatrix<C64>, C64)> = ops.l_parts[0]
        .iter()
        .zip(kernels)
        .map(|(l, f)| (l, *f))
        .collect();
    master_rhs_generic(rho, &h, &diss)
}

/// Joint integration state: density matrix plus kernel coefficients.
#[derive(Clone)]
struct MasterState {
    rho: DMatrix<C64>,
    kern: DVector<C64>,
}

impl OdeState for MasterState {
    fn accum(&mut self, a: f64, x: &Self) {
        self.rho.zip_apply(&x.rho, |y, v| *y += v * a);
        self.kern.zip_apply(&x.kern, |y, v| *y += v * a);
    }

    fn all_finite(&self) -> bool {
        self.rho.iter().all(|v| v.re.is_finite() && v.im.is_finite())
            && self.kern.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Initial condition rebuildable at any photon cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleInitial {
    /// Pure |level⟩ ⊗ |vacuum⟩.
    AtomLevel(usize),
}

#[derive(Debug, Clone)]
pub struct MasterConfig<'a> {
    pub atom: &'a AtomSpec,
    pub env: &'a EnvSpec,
    pub drive: Option<&'a DriveSpec>,
    pub stepper: StepperConfig,
    pub initial: OracleInitial,
    /// Starting photon cutoff; raised automatically when the edge Fock state
    /// becomes populated beyond 1e−6.
    pub n_ph: usize,
    pub f0: Vec<C64>,
    /// Use the constant Markovian values χ_n/2 instead of the kernel flow.
    pub freeze_kernel: bool,
}

impl<'a> MasterConfig<'a> {
    pub fn new(atom: &'a AtomSpec, env: &'a EnvSpec, stepper: StepperConfig) -> Self {
        Self {
            atom,
            env,
            drive: None,
            stepper,
            initial: OracleInitial::AtomLevel(atom.levels - 1),
            n_ph: 1,
            f0: Vec::new(),
            freeze_kernel: false,
        }
    }
}

/// A completed oracle run: the recorded trajectory plus health telemetry.
#[derive(Debug, Clone)]
pub struct MasterRun {
    pub traj: Trajectory,
    /// Smallest eigenvalue seen across all samples (positivity monitor).
    pub min_eigenvalue: f64,
    pub max_trace_dev: f64,
    pub max_herm_dev: f64,
    pub n_ph_used: usize,
    /// Non-fatal findings, e.g. positivity beyond tolerance.
    pub findings: Vec<String>,
}

/// Integrate the single-site master equation, co-integrating the kernel
/// flows, recording the same observables and names as the mean-value system.
/// The photon cutoff is raised and the run repeated until the edge Fock state
/// stays below 1e−6.
pub fn evolve_master(cfg: &MasterConfig) -> Result<MasterRun, OracleError> {
    cfg.stepper.validate()?;
    let mut n_ph = cfg.n_ph;
    loop {
        let run = evolve_master_at_cutoff(cfg, n_ph)?;
        match run {
            Ok(done) => return Ok(done),
            Err(edge_pop) => {
                // Grow geometrically: repeated small bumps would re-pay the
                // full integration once per step of the final cutoff.
                let next = (n_ph * 3 / 2).max(n_ph + 2);
                let hcfg =
                    HilbertConfig { levels: cfg.atom.levels, n_ph: next, cavities: 1 };
                if hcfg.dim() > MAX_DIM {
                    let _ = edge_pop;
                    return Err(OracleError::CutoffInadequate { n_ph });
                }
                n_ph = next;
            }
        }
    }
}

/// One attempt at a fixed cutoff; `Err(edge_pop)` in the inner result means
/// the cutoff was inadequate.
fn evolve_master_at_cutoff(
    cfg: &MasterConfig,
    n_ph: usize,
) -> Result<Result<MasterRun, f64>, OracleError> {
    let atom = cfg.atom;
    let hcfg = HilbertConfig { levels: atom.levels, n_ph, cavities: 1 };
    let ops = build_operators(&hcfg, &[atom.env_couplings.clone()])?;
    let nt = atom.transitions();
    let params: Vec<KernelParams> = (1..=nt)
        .map(|n| kernel::derive_params(atom, cfg.env, n).expect("index in range"))
        .collect();
    let frozen: Option<Vec<C64>> = if cfg.freeze_kernel {
        Some(atom.kernel_consts.iter().map(|chi| C64::from(chi / 2.0)).collect())
    } else {
        None
    };

    let dim = ops.dim;
    let mut rho = DMatrix::<C64>::zeros(dim, dim);
    let OracleInitial::AtomLevel(level) = cfg.initial;
    // Atom factor is the slow index; vacuum on the cavity factor.
    let idx = level * (n_ph + 1);
    rho[(idx, idx)] = C64::ONE;
    let mut kern = DVector::<C64>::zeros(nt);
    for (k, f) in cfg.f0.iter().enumerate() {
        kern[k] = *f;
    }
    let mut state = MasterState { rho, kern };

    let driven = cfg.drive.is_some();
    let mut names: Vec<String> = Vec::new();
    for n in 1..=nt {
        names.push(format!("pop_{n}"));
        names.push(format!("coh_{n}_re"));
        names.push(format!("coh_{n}_im"));
    }
    names.push("photon".into());
    names.push("ground".into());
    if driven {
        for n in 1..=nt {
            names.push(format!("s_{n}_re"));
            names.push(format!("s_{n}_im"));
        }
        names.push("r_a".into());
        names.push("i_a".into());
    }
    let mut traj = Trajectory::new(names);

    let mut min_eig = f64::INFINITY;
    let mut max_trace_dev: f64 = 0.0;
    let mut max_herm_dev: f64 = 0.0;
    let mut max_edge: f64 = 0.0;
    let edge_proj: Vec<usize> = (0..atom.levels).map(|l| l * (n_ph + 1) + n_ph).collect();

    let record = |traj: &mut Trajectory,
                      t: f64,
                      st: &MasterState,
                      min_eig: &mut f64,
                      max_trace_dev: &mut f64,
                      max_herm_dev: &mut f64,
                      max_edge: &mut f64| {
        let rho = &st.rho;
        let mut row = Vec::new();
        for n in 1..=nt {
            row.push(expect(rho, &ops.level_proj[0][n]).re);
            let coh = expect_product(rho, &ops.splus[0][n - 1], &ops.a[0]);
            row.push(coh.re);
            row.push(coh.im);
        }
        row.push(expect(rho, &ops.number[0]).re);
        row.push(expect(rho, &ops.level_proj[0][0]).re);
        if driven {
            for n in 1..=nt {
                let s = expect(rho, &ops.sminus[0][n - 1]);
                row.push(s.re);
                row.push(s.im);
            }
            let a_mean = expect(rho, &ops.a[0]);
            row.push(2.0 * a_mean.re);
            row.push(-2.0 * a_mean.im);
        }
        traj.push(t, DVector::from_vec(row));
        traj.kernels.push(st.kern.iter().cloned().collect());

        let tr: C64 = rho.diagonal().sum();
        *max_trace_dev = max_trace_dev.max((tr - C64::ONE).norm());
        *max_herm_dev = max_herm_dev.max((rho - rho.adjoint()).camax());
        *min_eig = min_eig.min(min_eigenvalue(rho));
        let edge: f64 = edge_proj.iter().map(|&i| rho[(i, i)].re).sum();
        *max_edge = max_edge.max(edge);
    };

    record(
        &mut traj,
        0.0,
        &state,
        &mut min_eig,
        &mut max_trace_dev,
        &mut max_herm_dev,
        &mut max_edge,
    );

    let mut rhs = |t: f64, st: &MasterState| -> MasterState {
        let kern_now: Vec<C64> = match &frozen {
            Some(fr) => fr.clone(),
            None => st.kern.iter().cloned().collect(),
        };
        let drho = master_rhs(&st.rho, t, &kern_now, atom, cfg.drive, &ops);
        let mut dkern = DVector::<C64>::zeros(nt);
        if frozen.is_none() {
            for (k, p) in params.iter().enumerate() {
                let f = st.kern[k];
                dkern[k] = p.kappa * f * f + p.q * f + p.s;
            }
        }
        MasterState { rho: drho, kern: dkern }
    };

    let steps = cfg.stepper.steps();
    for k in 0..steps {
        let t = k as f64 * cfg.stepper.dt;
        state = rk4_step(&mut rhs, &state, t, cfg.stepper.dt)?;
        if (k + 1) % cfg.stepper.stride == 0 {
            record(
                &mut traj,
                (k + 1) as f64 * cfg.stepper.dt,
                &state,
                &mut min_eig,
                &mut max_trace_dev,
                &mut max_herm_dev,
                &mut max_edge,
            );
        }
    }

    if max_edge >= 1e-6 {
        return Ok(Err(max_edge));
    }
    let mut findings = Vec::new();
    if min_eig < -1e-6 {
        findings.push(format!("positivity violation: min eigenvalue {min_eig:e}"));
    }
    Ok(Ok(MasterRun {
        traj,
        min_eigenvalue: min_eig,
        max_trace_dev,
        max_herm_dev,
        n_ph_used: n_ph,
        findings,
    }))
}

/// ⟨O⟩ = Tr(ρO).
pub fn expect(rho: &DMatrix<C64>, op: &DMatrix<C64>) -> C64 {
    (rho * op).diagonal().sum()
}

/// ⟨AB⟩ without forming the product operator.
pub fn expect_product(rho: &DMatrix<C64>, a: &DMatrix<C64>, b: &DMatrix<C64>) -> C64 {
    ((rho * a) * b).diagonal().sum()
}

/// Smallest eigenvalue of a Hermitian matrix via its real-symmetric
/// embedding [[Re, −Im], [Im, Re]] (eigenvalues appear in duplicate pairs).
pub fn min_eigenvalue(rho: &DMatrix<C64>) -> f64 {
    let d = rho.nrows();
    let mut s = DMatrix::<f64>::zeros(2 * d, 2 * d);
    for i in 0..d {
        for j in 0..d {
            // Symmetrize against rounding-level hermiticity drift.
            let re = 0.5 * (rho[(i, j)].re + rho[(j, i)].re);
            let im = 0.5 * (rho[(i, j)].im - rho[(j, i)].im);
            s[(i, j)] = re;
            s[(i + d, j + d)] = re;
            s[(i + d, j)] = im;
            s[(i, j + d)] = -im;
        }
    }
    s.symmetric_eigenvalues().min()
}

/// Measurement superoperator ℋ[O]ρ = Oρ + ρO† − Tr[(O + O†)ρ]ρ.
pub fn measurement_superop(rho: &DMatrix<C64>, o: &DMatrix<C64>) -> DMatrix<C64> {
    let odag = o.adjoint();
    let mean: C64 = ((o + &odag) * rho).diagonal().sum();
    o * rho + rho * &odag - rho * mean
}

/// One Euler–Maruyama step of the measurement-feedback stochastic master
/// equation: deterministic part −i[H,ρ] + dissipators − ig_f[G, aρ+ρa†]
/// − (g_f²/2)[G,[G,ρ]], noise part (ℋ[a]ρ − ig_f[G,ρ]) dW. The trace is
/// renormalized each step; drift beyond 1e−6 in one step is an error.
#[allow(clippy::too_many_arguments)]
pub fn sme_step(
    rho: &DMatrix<C64>,
    t: f64,
    dt: f64,
    dw: f64,
    h: &DMatrix<C64>,
    dissipators: &[(&DMatrix<C64>, C64)],
    meas: &DMatrix<C64>,
    feedback: &DMatrix<C64>,
    g_f: f64,
) -> Result<DMatrix<C64>, OracleError> {
    let mut drift = master_rhs_generic(rho, h, dissipators);
    if g_f != 0.0 {
        let gf = C64::from(g_f);
        let flow = meas * rho + rho * meas.adjoint();
        drift += (feedback * &flow - &flow * feedback) * (-C64::i() * gf);
        let inner = feedback * rho - rho * feedback;
        let double = feedback * &inner - &inner * feedback;
        drift += double * C64::from(-0.5 * g_f * g_f);
    }
    let mut noise = measurement_superop(rho, meas);
    if g_f != 0.0 {
        noise += (feedback * rho - rho * feedback) * (-C64::i() * g_f);
    }
    let next = rho + drift * C64::from(dt) + noise * C64::from(dw);
    let tr: C64 = next.diagonal().sum();
    let drift_mag = (tr - C64::ONE).norm();
    // NaN must trip the guard too, hence the negated comparison.
    if !(drift_mag <= 1e-6) {
        return Err(OracleError::TraceLost { t, drift: drift_mag });
    }
    Ok(next / tr)
}

/// Per-observable comparison outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub name: String,
    pub max_dev: f64,
    /// First time the deviation exceeded `tol`, if it ever did.
    pub first_divergence: Option<f64>,
}

/// Sup-norm deviation per observable between two runs on the same grid.
pub fn compare_meanfield(
    oracle: &Trajectory,
    meanfield: &Trajectory,
    observables: &[&str],
    tol: f64,
) -> Result<Vec<Deviation>, OracleError> {
    if oracle.times.len() != meanfield.times.len() {
        return Err(OracleError::GridMismatch {
            len_a: oracle.times.len(),
            len_b: meanfield.times.len(),
        });
    }
    for (ta, tb) in oracle.times.iter().zip(&meanfield.times) {
        if (ta - tb).abs() > 1e-12 {
            return Err(OracleError::GridMismatch {
                len_a: oracle.times.len(),
                len_b: meanfield.times.len(),
            });
        }
    }
    let mut out = Vec::new();
    for name in observables {
        let ca = oracle.column(name).expect("observable present in oracle run");
        let cb = meanfield.column(name).expect("observable present in mean-field run");
        let mut max_dev: f64 = 0.0;
        let mut first = None;
        for (k, (x, y)) in ca.iter().zip(&cb).enumerate() {
            let d = (x - y).abs();
            if d > tol && first.is_none() {
                first = Some(oracle.times[k]);
            }
            max_dev = max_dev.max(d);
        }
        out.push(Deviation { name: (*name).into(), max_dev, first_divergence: first });
    }
    Ok(out)
}
