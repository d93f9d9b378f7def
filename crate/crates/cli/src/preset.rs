//! Bundled oracle-check presets, built programmatically so the binary can
//! run them without any config file.

use nmq_cli::config::{
    AtomScenario, InitialState, OracleOpts, RunMode, ScenarioConfig, ScenarioKind,
};
use nmq_cli::CliError;
use nmq_core::model::{AtomInput, CavitySpec, EnvSpec};
use nmq_core::numerics::{Scheme, StepperConfig};
use nmq_core::C64;

/// `single-excitation`: an undriven two-level atom starting excited with an
/// empty cavity. The excitation number is conserved, so the mean-value
/// closure is exact and the truncated-Fock reference must agree to
/// integrator precision.
pub fn oracle_check(name: &str) -> Result<ScenarioConfig, CliError> {
    match name {
        "single-excitation" => Ok(single_excitation()),
        other => Err(CliError::InvalidInput {
            detail: format!("unknown oracle-check preset '{other}'"),
        }),
    }
}

fn single_excitation() -> ScenarioConfig {
    let omega_c = 37.7;
    let atom = AtomInput {
        level_energies: vec![37.7],
        couplings: vec![0.02],
        env_couplings: vec![0.31],
        kernel_consts: vec![1.0],
        detunings: None,
    }
    .validate(omega_c)
    .expect("preset atom validates");
    let cavity = CavitySpec { omega_c, kappa: 0.0, kappa_c: 0.0, chi_a: 0.0 }
        .validate()
        .expect("preset cavity validates");
    let env = EnvSpec { gamma: 10.0, omega: 37.7 }.validate().expect("preset env validates");

    ScenarioConfig {
        kind: ScenarioKind::OracleCheck,
        name: "single_excitation".to_string(),
        figure: None,
        atom: Some(AtomScenario { spec: atom, initial: InitialState::Excited }),
        cavity: Some(cavity),
        env: Some(env),
        drive: None,
        feedback: None,
        lattice: None,
        stepper: StepperConfig::new(Scheme::Rk4, 0.01, 50.0, 1).expect("preset stepper"),
        mode: RunMode::default(),
        out_dir: None,
        freeze_kernel: false,
        f0: Vec::new(),
        fa0: C64::ZERO,
        oracle: OracleOpts { n_ph: 1, tol: 1e-6 },
    }
}
