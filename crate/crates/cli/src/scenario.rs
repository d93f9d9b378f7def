//! Scenario execution: turn one validated config into artifacts on disk.
//!
//! Every runner writes its files under the resolved output directory and
//! returns the list of paths plus human-readable notes. Deterministic
//! scenarios write byte-identical files on re-run; batches fan out across
//! threads with each job owning its output paths exclusively.

use std::path::{Path, PathBuf};
use std::thread;

use nalgebra::{DMatrix, DVector};
use nmq_core::feedback::{
    AtomicFeedbackSystem, CavityFeedbackSystem, FeedbackConfig, FeedbackError, FeedbackMode,
    FeedbackModel, FeedbackOutput, QuadratureState, SemiclassicalTwoLevel,
    simulate_feedback,
};
use nmq_core::kernel::{self, KernelError, KernelParams};
use nmq_core::lattice::{self, LatticeError, LatticeRunConfig};
use nmq_core::ltv::{
    self, DrivenState, LtvError, SingleCavityState, SingleRunConfig, simulate_single,
};
use nmq_core::numerics::NumericsError;
use nmq_core::oracle::{
    MasterConfig, OracleError, OracleInitial, compare_meanfield, evolve_master,
};
use nmq_core::stability::{self, StabilityError, StabilityReport, Verdict};
use nmq_core::{C64, Trajectory};

use crate::config::{
    AtomScenario, FeedbackTarget, InitialState, ScenarioConfig, ScenarioKind,
};
use crate::emit;
use crate::CliError;

/// What a run produced: files written and log-worthy notes.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl Artifacts {
    fn merge(&mut self, other: Artifacts) {
        self.files.extend(other.files);
        self.notes.extend(other.notes);
    }
}

/// Output directory priority: `--out` flag, then the config's `[output] dir`,
/// then the `NMQ_OUT` environment variable, then the working directory.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: Option<&Path>) -> PathBuf {
    if let Some(f) = flag {
        return f.to_path_buf();
    }
    if let Some(c) = cfg {
        return c.to_path_buf();
    }
    match std::env::var_os("NMQ_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("."),
    }
}

pub fn run(cfg: &ScenarioConfig, out: &Path) -> Result<Artifacts, CliError> {
    match cfg.kind {
        ScenarioKind::Kernel => run_kernel(cfg, out),
        ScenarioKind::Single | ScenarioKind::Driven => run_single(cfg, out),
        ScenarioKind::Feedback => run_feedback(cfg, out),
        ScenarioKind::Lattice => run_lattice(cfg, out),
        ScenarioKind::Stability => run_stability(cfg, out),
        ScenarioKind::OracleCheck => run_oracle_check(cfg, out),
        ScenarioKind::Reproduce => {
            let figure = cfg.figure.expect("reproduce config carries a figure");
            crate::reproduce::run_figure(figure, out)
        }
    }
}

/// Run independent jobs on scoped threads and collect their artifacts in
/// submission order. Each job must write a disjoint set of files.
pub(crate) fn fan_out(
    jobs: Vec<Box<dyn FnOnce() -> Result<Artifacts, CliError> + Send + '_>>,
) -> Result<Artifacts, CliError> {
    let results: Vec<Result<Artifacts, CliError>> = thread::scope(|s| {
        let handles: Vec<_> = jobs.into_iter().map(|job| s.spawn(job)).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scenario worker panicked"))
            .collect()
    });
    let mut all = Artifacts::default();
    for r in results {
        all.merge(r?);
    }
    Ok(all)
}

fn map_numerics(scenario: &str, e: NumericsError) -> CliError {
    match e {
        NumericsError::InvalidStep { .. } => CliError::InvalidInput { detail: e.to_string() },
        NumericsError::NonFiniteRhs { .. } => {
            CliError::Numerical { scenario: scenario.into(), detail: e.to_string() }
        }
    }
}

fn map_kernel(scenario: &str, e: KernelError) -> CliError {
    match e {
        KernelError::PoleHit { .. } => {
            CliError::Divergence { scenario: scenario.into(), detail: e.to_string() }
        }
        KernelError::Numerics(n) => map_numerics(scenario, n),
        other => CliError::Numerical { scenario: scenario.into(), detail: other.to_string() },
    }
}

fn map_ltv(scenario: &str, e: LtvError) -> CliError {
    match e {
        LtvError::KernelDiverged { .. } => {
            CliError::Divergence { scenario: scenario.into(), detail: e.to_string() }
        }
        LtvError::InvalidInitial => CliError::InvalidInput { detail: e.to_string() },
        LtvError::Numerics(n) => map_numerics(scenario, n),
        other => CliError::Numerical { scenario: scenario.into(), detail: other.to_string() },
    }
}

fn map_feedback(scenario: &str, e: FeedbackError) -> CliError {
    match e {
        FeedbackError::KernelDiverged { .. } => {
            CliError::Divergence { scenario: scenario.into(), detail: e.to_string() }
        }
        FeedbackError::ZeroGain | FeedbackError::MalformedReplay { .. } => {
            CliError::InvalidInput { detail: e.to_string() }
        }
        FeedbackError::Numerics(n) => map_numerics(scenario, n),
        other => CliError::Numerical { scenario: scenario.into(), detail: other.to_string() },
    }
}

fn map_oracle(scenario: &str, e: OracleError) -> CliError {
    match e {
        OracleError::DimensionTooLarge { .. } => CliError::InvalidInput { detail: e.to_string() },
        OracleError::Numerics(n) => map_numerics(scenario, n),
        other => CliError::Numerical { scenario: scenario.into(), detail: other.to_string() },
    }
}

fn map_lattice(scenario: &str, e: LatticeError) -> CliError {
    match e {
        LatticeError::NoSteadyKernel { .. } => {
            CliError::Numerical { scenario: scenario.into(), detail: e.to_string() }
        }
        LatticeError::Numerics(n) => map_numerics(scenario, n),
        other => CliError::InvalidInput { detail: other.to_string() },
    }
}

fn csv_path(out: &Path, name: &str) -> PathBuf {
    out.join(format!("{name}.csv"))
}

fn run_kernel(cfg: &ScenarioConfig, out: &Path) -> Result<Artifacts, CliError> {
    let atom = cfg.atom.as_ref().expect("kernel config carries an atom");
    let env = cfg.env.as_ref().expect("kernel config carries an env");
    let params =
        kernel::derive_params(&atom.spec, env, 1).map_err(|e| map_kernel(&cfg.name, e))?;
    let f0 = cfg.f0.first().copied().unwrap_or(C64::ZERO);
    let states =
        kernel::integrate(&params, f0, &cfg.stepper).map_err(|e| map_kernel(&cfg.name, e))?;

    let mut traj = Trajectory::new(vec!["f_re".to_string(), "f_im".to_string()]);
    for st in &states {
        traj.push(st.t, DVector::from_vec(vec![st.r, st.i]));
    }
    let path = csv_path(out, &cfg.name);
    emit::emit_csv(&traj, &path)?;

    let mut notes = vec![format!("kernel regime: {:?}", params.regime())];
    match kernel::steady_value(&params) {
        Some(f) => notes.push(format!("steady value: {:.6e} + {:.6e}i", f.re, f.im)),
        None => notes.push("steady value: none (divergent regime)".to_string()),
    }
    Ok(Artifacts { files: vec![path], notes })
}

fn mean_value_initial(atom: &AtomScenario, driven: bool) -> DrivenState {
    let levels = atom.spec.levels;
    match atom.initial {
        InitialState::Ground => DrivenState::plain(SingleCavityState::ground_state(levels)),
        InitialState::Excited => DrivenState::plain(SingleCavityState::excited(levels)),
        InitialState::Superposition => {
            debug_assert!(driven && levels == 2, "checked at config validation");
            let base = SingleCavityState {
                pops: vec![0.5],
                cohs: vec![C64::ZERO],
                photon: 0.0,
                ground: 0.5,
            };
            DrivenState { base, s: vec![C64::new(0.5, 0.0)], r_a: 0.0, i_a: 0.0 }
        }
    }
}

fn run_single(cfg: &ScenarioConfig, out: &Path) -> Result<Artifacts, CliError> {
    let atom = cfg.atom.as_ref().expect("config carries an atom");
    let env = cfg.env.as_ref().expect("config carries an env");
    let mut rc = SingleRunConfig::new(&atom.spec, env, cfg.stepper);
    rc.drive = cfg.drive.as_ref();
    rc.freeze_kernel = cfg.freeze_kernel;
    rc.f0 = cfg.f0.clone();

    let initial = mean_value_initial(atom, rc.drive.is_some());
    let traj = simulate_single(&rc, &initial).map_err(|e| map_ltv(&cfg.name, e))?;
    let path = csv_path(out, &cfg.name);
    emit::emit_csv(&traj, &path)?;

    let mut notes = Vec::new();
    if let (Some(last), Some(col)) = (traj.times.last(), traj.column("photon")) {
        if let Some(v) = col.last() {
            notes.push(format!("photon number at t = {last} ns: {v:.6e}"));
        }
    }
    Ok(Artifacts { files: vec![path], notes })
}

fn run_feedback(cfg: &ScenarioConfig, out: &Path) -> Result<Artifacts, CliError> {
    let atom = cfg.atom.as_ref().expect("config carries an atom");
    let env = cfg.env.as_ref().expect("config carries an env");
    let cavity = cfg.cavity.as_ref().expect("config carries a cavity");
    let fb = cfg.feedback.as_ref().expect("config carries a feedback section");

    let model = match fb.target {
        FeedbackTarget::Cavity => {
            let sys = CavityFeedbackSystem {
                atom: &atom.spec,
                env,
                cavity,
                feedback: &fb.spec,
                rot_detuning: fb.rot_detuning,
                delta: fb.delta,
            };
            let a0 = C64::new(fb.x0, fb.p0) / std::f64::consts::SQRT_2;
            let initial =
                QuadratureState::from_mode(a0, vec![C64::ZERO; atom.spec.transitions()]);
            FeedbackModel::Cavity { sys, initial, moments: fb.moments }
        }
        FeedbackTarget::Atom => {
            let sys = AtomicFeedbackSystem {
                atom: &atom.spec,
                env,
                cavity,
                g_f: fb.spec.g_f,
                amplitude: cfg.drive.as_ref().map_or(0.0, |d| d.amplitude),
                delta: fb.delta,
                cavity_kernel: fb.cavity_kernel,
            };
            let initial = match atom.initial {
                InitialState::Ground => SemiclassicalTwoLevel::ground(),
                InitialState::Excited => SemiclassicalTwoLevel::excited(),
                InitialState::Superposition => {
                    SemiclassicalTwoLevel { alpha: C64::ZERO, s: C64::new(0.5, 0.0), w: 0.0 }
                }
            };
            FeedbackModel::Atomic { sys, initial }
        }
    };

    let fc = FeedbackConfig { model, stepper: cfg.stepper, f0: cfg.f0.clone(), fa0: cfg.fa0 };
    let mode = if cfg.mode.stochastic {
        FeedbackMode::Stochastic { n_traj: cfg.mode.n_traj, seed: cfg.mode.seed }
    } else {
        FeedbackMode::Deterministic
    };

    match simulate_feedback(&fc, mode).map_err(|e| map_feedback(&cfg.name, e))? {
        FeedbackOutput::Deterministic(run) => {
            let path = csv_path(out, &cfg.name);
            emit::emit_csv(&run.traj, &path)?;
            Ok(Artifacts { files: vec![path], notes: run.findings })
        }
        FeedbackOutput::Ensemble(ens) => {
            let path = out.join(format!("{}_ensemble.csv", cfg.name));
            emit::emit_ensemble_csv(&ens.times, &ens.names, &ens.stats, &path)?;
            let replay = out.join(format!("{}.replay", cfg.name));
            ens.noise.write_replay(&replay).map_err(|e| match e {
                FeedbackError::Io(source) => CliError::Io { path: replay.clone(), source },
                other => map_feedback(&cfg.name, other),
            })?;
            let notes = vec![format!(
                "ensemble of {} trajectories from seed {}",
                ens.noise.count, ens.noise.seed
            )];
            Ok(Artifacts { files: vec![path, replay], notes })
        }
    }
}

fn run_lattice(cfg: &ScenarioConfig, out: &Path) -> Result<Artifacts, CliError> {
    let lat = cfg.lattice.as_ref().expect("config carries a lattice");
    let mut rc = LatticeRunConfig::new(lat.spec.clone(), cfg.stepper, lat.x0.clone())
        .map_err(|e| map_lattice(&cfg.name, e))?;
    rc.f0 = cfg.f0.clone();
    rc.freeze_kernel = cfg.freeze_kernel;
    let traj = lattice::simulate_lattice(&rc).map_err(|e| map_lattice(&cfg.name, e))?;

    let path = csv_path(out, &cfg.name);
    emit::emit_csv(&traj, &path)?;
    let mut notes = Vec::new();
    if traj.len() > 1 {
        let start = lattice::cavity_block_norm(&traj, 0);
        let end = lattice::cavity_block_norm(&traj, traj.len() - 1);
        if start > 0.0 {
            notes.push(format!("cavity block norm ratio over the run: {:.6e}", end / start));
        }
    }
    Ok(Artifacts { files: vec![path], notes })
}

fn run_stability(cfg: &ScenarioConfig, out: &Path) -> Result<Artifacts, CliError> {
    let report = if let Some(lat) = &cfg.lattice {
        lattice::subspace_stability_report(&lat.spec).map_err(|e| map_lattice(&cfg.name, e))?
    } else {
        single_cavity_report(cfg)?
    };
    let path = out.join(format!("{}_report.txt", cfg.name));
    emit::emit_report(std::slice::from_ref(&report), &path)?;
    Ok(Artifacts { files: vec![path], notes: vec![report.to_record()] })
}

/// Averaged-contraction certificate for a single atom-cavity scenario:
/// a negative mean matrix measure of the steady-kernel system over one
/// modulation period, plus a finite decay integral of the kernel transient.
fn single_cavity_report(cfg: &ScenarioConfig) -> Result<StabilityReport, CliError> {
    let atom = &cfg.atom.as_ref().expect("config carries an atom").spec;
    let env = cfg.env.as_ref().expect("config carries an env");
    let nt = atom.transitions();
    let params: Vec<KernelParams> = (1..=nt)
        .map(|n| kernel::derive_params(atom, env, n).expect("index in range"))
        .collect();
    let digest = format!(
        "gamma={};omega={};levels={};horizon={}",
        env.gamma, env.omega, atom.levels, cfg.stepper.horizon
    );
    let inconclusive = |certificates: Vec<(String, f64)>| StabilityReport {
        criterion: "ltv-averaged-contraction".to_string(),
        inputs_digest: digest.clone(),
        certificates,
        verdict: Verdict::Inconclusive,
        tolerance: 0.0,
        seed: None,
    };

    let steady = match ltv::steady_kernels(atom, env) {
        Ok(s) => s,
        Err(_) => return Ok(inconclusive(Vec::new())),
    };

    // Mean matrix measure of the steady-kernel system over one period of the
    // coupling modulation (any window when every transition is resonant).
    let period = atom
        .detunings
        .iter()
        .filter(|d| d.abs() > 0.0)
        .map(|d| 2.0 * std::f64::consts::PI / d.abs())
        .fold(f64::INFINITY, f64::min);
    let window = if period.is_finite() { period } else { 1.0 };
    let a_bar = |t: f64| -> DMatrix<f64> {
        ltv::assemble_real(t, atom, env, &steady)
            .expect("steady kernels are finite")
            .m
    };
    let pi_mean = stability::pi_plus(a_bar, 0.0, window, window / 256.0) / window;

    // Kernel transients on the configured grid feed the decay integral.
    let flows: Result<Vec<Vec<kernel::KernelState>>, KernelError> = params
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let f0 = cfg.f0.get(k).copied().unwrap_or(C64::ZERO);
            kernel::integrate(p, f0, &cfg.stepper)
        })
        .collect();
    let flows = match flows {
        Ok(f) => f,
        // A kernel pole means the transient never decays; that is a finding,
        // not a crash.
        Err(KernelError::PoleHit { .. }) => {
            return Ok(inconclusive(vec![("pi_plus_mean".to_string(), pi_mean)]))
        }
        Err(e) => return Err(map_kernel(&cfg.name, e)),
    };
    let dt_rec = cfg.stepper.dt * cfg.stepper.stride as f64;
    let kernels_at = |t: f64| -> Vec<C64> {
        flows
            .iter()
            .map(|flow| {
                let k = ((t / dt_rec).round() as usize).min(flow.len() - 1);
                flow[k].f()
            })
            .collect()
    };
    let a_tilde = |t: f64| -> DMatrix<f64> {
        let kern = kernels_at(t);
        let (_, tilde) =
            ltv::assemble_real_split(t, atom, env, &kern).expect("kernels within guard");
        tilde.m
    };
    let decay =
        match stability::decay_integral(a_tilde, cfg.stepper.horizon, dt_rec, &params) {
            Ok(d) => d,
            Err(StabilityError::DivergentTail) => {
                return Ok(inconclusive(vec![("pi_plus_mean".to_string(), pi_mean)]))
            }
            Err(e) => {
                return Err(CliError::Numerical {
                    scenario: cfg.name.clone(),
                    detail: e.to_string(),
                })
            }
        };

    let certificates = vec![
        ("pi_plus_mean".to_string(), pi_mean),
        ("decay_integral".to_string(), decay.total()),
        ("kernel_rate".to_string(), decay.rate),
    ];
    let stable = pi_mean < 0.0 && decay.total().is_finite();
    Ok(StabilityReport {
        criterion: "ltv-averaged-contraction".to_string(),
        inputs_digest: digest,
        certificates,
        verdict: if stable { Verdict::Stable } else { Verdict::Inconclusive },
        tolerance: if stable { -pi_mean } else { 0.0 },
        seed: None,
    })
}

fn run_oracle_check(cfg: &ScenarioConfig, out: &Path) -> Result<Artifacts, CliError> {
    let atom = cfg.atom.as_ref().expect("config carries an atom");
    let env = cfg.env.as_ref().expect("config carries an env");

    let mut rc = SingleRunConfig::new(&atom.spec, env, cfg.stepper);
    rc.drive = cfg.drive.as_ref();
    rc.freeze_kernel = cfg.freeze_kernel;
    rc.f0 = cfg.f0.clone();
    let initial = mean_value_initial(atom, rc.drive.is_some());
    let meanfield = simulate_single(&rc, &initial).map_err(|e| map_ltv(&cfg.name, e))?;

    let mut mc = MasterConfig::new(&atom.spec, env, cfg.stepper);
    mc.drive = cfg.drive.as_ref();
    mc.n_ph = cfg.oracle.n_ph;
    mc.f0 = cfg.f0.clone();
    mc.freeze_kernel = cfg.freeze_kernel;
    mc.initial = OracleInitial::AtomLevel(match atom.initial {
        InitialState::Ground => 0,
        _ => atom.spec.levels - 1,
    });
    let run = evolve_master(&mc).map_err(|e| map_oracle(&cfg.name, e))?;

    let names: Vec<&str> = meanfield.names.iter().map(String::as_str).collect();
    let devs = compare_meanfield(&run.traj, &meanfield, &names, cfg.oracle.tol)
        .map_err(|e| map_oracle(&cfg.name, e))?;

    let mut table = String::from("name,max_dev,first_divergence\n");
    for d in &devs {
        let first = match d.first_divergence {
            Some(t) => format!("{t:.16e}"),
            None => "-".to_string(),
        };
        table.push_str(&format!("{},{:.16e},{}\n", d.name, d.max_dev, first));
    }
    let table_path = out.join(format!("{}_deviations.csv", cfg.name));
    emit::emit_text(&table_path, &table)?;

    let mut notes = vec![format!(
        "oracle cutoff {} photons; min eigenvalue {:.3e}; trace drift {:.3e}; hermiticity {:.3e}",
        run.n_ph_used, run.min_eigenvalue, run.max_trace_dev, run.max_herm_dev
    )];
    notes.extend(run.findings.iter().cloned());
    for d in &devs {
        notes.push(format!("  {}: max deviation {:.3e}", d.name, d.max_dev));
    }

    let worst = devs
        .iter()
        .max_by(|a, b| a.max_dev.total_cmp(&b.max_dev))
        .expect("at least one observable");
    if worst.max_dev > cfg.oracle.tol {
        return Err(CliError::CheckFailed {
            table: table_path,
            name: worst.name.clone(),
            max_dev: worst.max_dev,
            tol: cfg.oracle.tol,
        });
    }
    notes.push(format!(
        "oracle check passed: worst observable '{}' within {:.1e}",
        worst.name, cfg.oracle.tol
    ));
    Ok(Artifacts { files: vec![table_path], notes })
}
