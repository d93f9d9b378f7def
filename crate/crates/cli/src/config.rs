//! Sectioned key-value configuration: the grammar, the parser, and the typed
//! scenario description the runner consumes.
//!
//! # Grammar
//!
//! A config file is UTF-8 text read line by line. `#` starts a comment that
//! runs to the end of the line; blank lines are ignored. A line of the form
//! `[name]` opens a section; every following `key = value` line belongs to it
//! until the next header. Keys are lowercase words of `[a-z0-9_.]` (the dot
//! nests related keys, e.g. `oracle.n_ph`); values are numbers, `true` /
//! `false`, lowercase identifiers, comma-separated number lists, or (for
//! `[output] dir`) a path. Values carry no unit suffixes: every frequency and
//! rate is in inverse nanoseconds, every time in nanoseconds. Duplicate
//! sections and duplicate keys are errors, as is any key or section the
//! scenario kind does not understand.
//!
//! # Sections
//!
//! | section    | keys                                                                 |
//! |------------|----------------------------------------------------------------------|
//! | `scenario` | `kind`, `name`, `figure`, `freeze_kernel`, `f0_re`, `f0_im`, `fa0_re`, `fa0_im`, `oracle.n_ph`, `oracle.tol` |
//! | `stepper`  | `scheme` (rk4, euler-maruyama), `dt`, `horizon`, `stride`            |
//! | `mode`     | `kind` (deterministic, stochastic), `n_traj`, `seed`                 |
//! | `output`   | `dir`                                                                |
//! | `env`      | `gamma`, `omega`                                                     |
//! | `atom`     | `freq`, `coupling`, `env_coupling`, `chi`, `detuning`, `levels`, `initial` (ground, excited, superposition) |
//! | `cavity`   | `freq`, `kappa`, `kappa_c`, `chi_a`                                  |
//! | `drive`    | `amplitude`, `freq`, `detuning`                                      |
//! | `feedback` | `target` (cavity, atom), `g_f`, `beta_x`, `beta_p`, `eta`, `delta`, `rot_detuning`, `cavity_kernel` (markovian, riccati), `v_x`, `v_xp`, `v_p`, `x0`, `p0` |
//! | `lattice`  | `sites`, `hop`, `detuning`, `g`, `delta`, `kappa_env`, `beta_x`, `beta_p`, `g_f`, `chi`, `x0` |
//!
//! Which sections a file needs depends on its scenario kind; the `[mode]`
//! section is only meaningful for `feedback` (the one stochastic scenario).
//! `[atom] freq` lists the excited-level energies in ascending order; the
//! per-site lattice lists accept a single value as shorthand for a uniform
//! chain. Anything optional has a documented default filled in at parse time.

use std::path::PathBuf;

use nalgebra::DVector;
use nmq_core::feedback::{CavityKernelMode, GaussianMoments};
use nmq_core::model::{
    AtomInput, AtomSpec, CavitySpec, DriveInput, DriveSpec, EnvSpec, FeedbackSpec,
};
use nmq_core::numerics::{Scheme, StepperConfig};
use nmq_core::{LatticeSpec, C64};
use thiserror::Error;

use crate::reproduce::Figure;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    /// Malformed text, a malformed value, or a missing key inside a present
    /// section; positions are 1-based.
    #[error("parse error at line {line}, column {col}: {detail}")]
    ParseError { line: usize, col: usize, detail: String },
    /// A key (or a whole section, spelled `[name]`) the scenario kind does
    /// not understand.
    #[error("unknown key '{key}' at line {line}, column {col}")]
    UnknownKey { key: String, line: usize, col: usize },
    #[error("missing section [{name}]")]
    MissingSection { name: &'static str },
}

fn perr(line: usize, col: usize, detail: impl Into<String>) -> ConfigError {
    ConfigError::ParseError { line, col, detail: detail.into() }
}

#[derive(Debug, Clone)]
struct RawEntry {
    key: String,
    value: String,
    line: usize,
    key_col: usize,
    val_col: usize,
}

#[derive(Debug, Clone)]
struct RawSection {
    name: String,
    line: usize,
    col: usize,
    entries: Vec<RawEntry>,
}

/// Parsed but untyped document: sections and entries in source order.
#[derive(Debug, Clone)]
pub struct ConfigDoc {
    sections: Vec<RawSection>,
}

fn valid_section_name(s: &str) -> bool {
    !s.is_empty()
        && s.starts_with(|c: char| c.is_ascii_lowercase())
        && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn valid_key(s: &str) -> bool {
    !s.is_empty()
        && s.starts_with(|c: char| c.is_ascii_lowercase())
        && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut sections: Vec<RawSection> = Vec::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let content = match raw_line.find('#') {
                Some(i) => &raw_line[..i],
                None => raw_line,
            };
            let trimmed = content.trim();
            if trimmed.is_empty() {
                continue;
            }
            let col0 = content.find(|c: char| !c.is_whitespace()).unwrap_or(0);
            if let Some(rest) = trimmed.strip_prefix('[') {
                let inner = rest
                    .strip_suffix(']')
                    .ok_or_else(|| perr(line_no, col0 + 1, "unterminated section header"))?;
                if !valid_section_name(inner) {
                    return Err(perr(line_no, col0 + 2, format!("invalid section name '{inner}'")));
                }
                if sections.iter().any(|s| s.name == inner) {
                    return Err(perr(line_no, col0 + 1, format!("duplicate section [{inner}]")));
                }
                sections.push(RawSection {
                    name: inner.to_string(),
                    line: line_no,
                    col: col0 + 1,
                    entries: Vec::new(),
                });
                continue;
            }
            let eq = trimmed
                .find('=')
                .ok_or_else(|| perr(line_no, col0 + 1, "expected `[section]` or `key = value`"))?;
            let key = trimmed[..eq].trim_end();
            let value = trimmed[eq + 1..].trim();
            if key.is_empty() {
                return Err(perr(line_no, col0 + 1, "empty key before '='"));
            }
            if !valid_key(key) {
                return Err(perr(line_no, col0 + 1, format!("invalid key '{key}'")));
            }
            if value.is_empty() {
                return Err(perr(line_no, col0 + eq + 2, format!("empty value for '{key}'")));
            }
            let section = sections
                .last_mut()
                .ok_or_else(|| perr(line_no, col0 + 1, format!("key '{key}' outside any section")))?;
            if section.entries.iter().any(|e| e.key == key) {
                return Err(perr(
                    line_no,
                    col0 + 1,
                    format!("duplicate key '{key}' in [{}]", section.name),
                ));
            }
            // Column of the value within the original line, for error spans.
            let val_col = content.len() - content.trim_start().len() + eq + 1
                + trimmed[eq + 1..].len()
                - trimmed[eq + 1..].trim_start().len()
                + 1;
            section.entries.push(RawEntry {
                key: key.to_string(),
                value: value.to_string(),
                line: line_no,
                key_col: col0 + 1,
                val_col,
            });
        }
        Ok(Self { sections })
    }

    fn get(&self, name: &str) -> Option<&RawSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    fn require(&self, name: &'static str) -> Result<&RawSection, ConfigError> {
        self.get(name).ok_or(ConfigError::MissingSection { name })
    }

    pub fn has(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Flag the first section or key, in source order, that the schema does
    /// not allow. Runs before any presence or type check so a misspelling is
    /// reported as unknown rather than shadowed by a missing-key complaint.
    fn check_schema(&self, schema: &[(&str, &[&str])]) -> Result<(), ConfigError> {
        for sec in &self.sections {
            let Some((_, keys)) = schema.iter().find(|(name, _)| *name == sec.name) else {
                return Err(ConfigError::UnknownKey {
                    key: format!("[{}]", sec.name),
                    line: sec.line,
                    col: sec.col,
                });
            };
            for e in &sec.entries {
                if !keys.contains(&e.key.as_str()) {
                    return Err(ConfigError::UnknownKey {
                        key: e.key.clone(),
                        line: e.line,
                        col: e.key_col,
                    });
                }
            }
        }
        Ok(())
    }
}

impl RawSection {
    fn entry(&self, key: &str) -> Option<&RawEntry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn missing(&self, key: &str) -> ConfigError {
        perr(self.line, self.col, format!("missing key '{key}' in [{}]", self.name))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.entry(key).map(parse_f64).transpose()
    }

    fn f64_req(&self, key: &str) -> Result<f64, ConfigError> {
        self.f64(key)?.ok_or_else(|| self.missing(key))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.f64(key)?.unwrap_or(default))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.entry(key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|_| {
                perr(e.line, e.val_col, format!("expected a non-negative integer, got '{}'", e.value))
            }),
        }
    }

    fn usize_req(&self, key: &str) -> Result<usize, ConfigError> {
        self.entry(key).ok_or_else(|| self.missing(key)).and_then(|e| {
            e.value.parse().map_err(|_| {
                perr(e.line, e.val_col, format!("expected a non-negative integer, got '{}'", e.value))
            })
        })
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.entry(key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|_| {
                perr(e.line, e.val_col, format!("expected a non-negative integer, got '{}'", e.value))
            }),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.entry(key) {
            None => Ok(default),
            Some(e) => match e.value.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => {
                    Err(perr(e.line, e.val_col, format!("expected true or false, got '{other}'")))
                }
            },
        }
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        self.entry(key).map(parse_list).transpose()
    }

    fn list_req(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        self.list(key)?.ok_or_else(|| self.missing(key))
    }

    fn ident(&self, key: &str) -> Option<&RawEntry> {
        self.entry(key)
    }
}

fn parse_f64(e: &RawEntry) -> Result<f64, ConfigError> {
    let v: f64 = e
        .value
        .parse()
        .map_err(|_| perr(e.line, e.val_col, format!("expected a number, got '{}'", e.value)))?;
    if !v.is_finite() {
        return Err(perr(e.line, e.val_col, format!("non-finite value '{}'", e.value)));
    }
    Ok(v)
}

fn parse_list(e: &RawEntry) -> Result<Vec<f64>, ConfigError> {
    e.value
        .split(',')
        .map(|part| {
            let p = part.trim();
            let v: f64 = p
                .parse()
                .map_err(|_| perr(e.line, e.val_col, format!("expected a number, got '{p}'")))?;
            if !v.is_finite() {
                return Err(perr(e.line, e.val_col, format!("non-finite value '{p}'")));
            }
            Ok(v)
        })
        .collect()
}

/// What the run computes; `Reproduce` carries its figure in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Kernel,
    Single,
    Driven,
    Feedback,
    Lattice,
    Stability,
    OracleCheck,
    Reproduce,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Kernel => "kernel",
            ScenarioKind::Single => "single",
            ScenarioKind::Driven => "driven",
            ScenarioKind::Feedback => "feedback",
            ScenarioKind::Lattice => "lattice",
            ScenarioKind::Stability => "stability",
            ScenarioKind::OracleCheck => "oracle-check",
            ScenarioKind::Reproduce => "reproduce",
        }
    }

    fn from_entry(e: &RawEntry) -> Result<Self, ConfigError> {
        match e.value.as_str() {
            "kernel" => Ok(ScenarioKind::Kernel),
            "single" => Ok(ScenarioKind::Single),
            "driven" => Ok(ScenarioKind::Driven),
            "feedback" => Ok(ScenarioKind::Feedback),
            "lattice" => Ok(ScenarioKind::Lattice),
            "stability" => Ok(ScenarioKind::Stability),
            "oracle-check" => Ok(ScenarioKind::OracleCheck),
            "reproduce" => Ok(ScenarioKind::Reproduce),
            other => Err(perr(e.line, e.val_col, format!("unknown scenario kind '{other}'"))),
        }
    }
}

/// Initial mean-value state selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialState {
    Ground,
    Excited,
    /// Equal superposition (|0⟩+|1⟩)/√2; two-level driven and
    /// atomic-feedback scenarios only.
    Superposition,
}

/// Atom spec plus the selected initial condition.
#[derive(Debug, Clone)]
pub struct AtomScenario {
    pub spec: AtomSpec,
    pub initial: InitialState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackTarget {
    Cavity,
    Atom,
}

/// Everything the feedback runner needs beyond the shared sections.
#[derive(Debug, Clone)]
pub struct FeedbackScenario {
    pub spec: FeedbackSpec,
    pub target: FeedbackTarget,
    /// Residual atom-cavity phase δ.
    pub delta: f64,
    /// Frame rotation Δ of the quadrature model.
    pub rot_detuning: f64,
    pub cavity_kernel: CavityKernelMode,
    pub moments: GaussianMoments,
    /// Initial quadrature means of the cavity model.
    pub x0: f64,
    pub p0: f64,
}

/// Lattice spec plus the initial mean vector.
#[derive(Debug, Clone)]
pub struct LatticeScenario {
    pub spec: LatticeSpec,
    pub x0: DVector<f64>,
}

/// Deterministic unless a stochastic feedback run is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunMode {
    pub stochastic: bool,
    pub n_traj: usize,
    pub seed: u64,
}

impl Default for RunMode {
    fn default() -> Self {
        Self { stochastic: false, n_traj: 1, seed: 0 }
    }
}

/// Oracle-check knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOpts {
    /// Starting photon cutoff; raised automatically as needed.
    pub n_ph: usize,
    /// Per-observable sup-deviation tolerance for the pass verdict.
    pub tol: f64,
}

impl Default for OracleOpts {
    fn default() -> Self {
        Self { n_ph: 1, tol: 1e-6 }
    }
}

/// One validated scenario with all defaults filled. Sections irrelevant to
/// the kind are `None`; the ones the kind requires are present.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Output file stem.
    pub name: String,
    pub figure: Option<Figure>,
    pub atom: Option<AtomScenario>,
    pub cavity: Option<CavitySpec>,
    pub env: Option<EnvSpec>,
    pub drive: Option<DriveSpec>,
    pub feedback: Option<FeedbackScenario>,
    pub lattice: Option<LatticeScenario>,
    pub stepper: StepperConfig,
    pub mode: RunMode,
    pub out_dir: Option<PathBuf>,
    pub freeze_kernel: bool,
    /// Initial kernel values per transition channel; empty means zeros.
    pub f0: Vec<C64>,
    /// Initial cavity-channel kernel value (atomic feedback, Riccati mode).
    pub fa0: C64,
    pub oracle: OracleOpts,
}

const SCENARIO_BASE: &[&str] = &["kind", "name", "freeze_kernel", "f0_re", "f0_im"];
const STEPPER_KEYS: &[&str] = &["scheme", "dt", "horizon", "stride"];
const MODE_KEYS: &[&str] = &["kind", "n_traj", "seed"];
const OUTPUT_KEYS: &[&str] = &["dir"];
const ENV_KEYS: &[&str] = &["gamma", "omega"];
const ATOM_KEYS: &[&str] =
    &["freq", "coupling", "env_coupling", "chi", "detuning", "levels", "initial"];
const CAVITY_KEYS: &[&str] = &["freq", "kappa", "kappa_c", "chi_a"];
const DRIVE_KEYS: &[&str] = &["amplitude", "freq", "detuning"];
const FEEDBACK_KEYS: &[&str] = &[
    "target", "g_f", "beta_x", "beta_p", "eta", "delta", "rot_detuning", "cavity_kernel", "v_x",
    "v_xp", "v_p", "x0", "p0",
];
const LATTICE_KEYS: &[&str] = &[
    "sites", "hop", "detuning", "g", "delta", "kappa_env", "beta_x", "beta_p", "g_f", "chi", "x0",
];
const SCENARIO_FEEDBACK: &[&str] =
    &["kind", "name", "freeze_kernel", "f0_re", "f0_im", "fa0_re", "fa0_im"];
const SCENARIO_ORACLE: &[&str] =
    &["kind", "name", "freeze_kernel", "f0_re", "f0_im", "oracle.n_ph", "oracle.tol"];
const SCENARIO_REPRODUCE: &[&str] = &["kind", "name", "figure"];

fn schema_for(kind: ScenarioKind, has_lattice: bool) -> Vec<(&'static str, &'static [&'static str])> {
    let mut schema: Vec<(&'static str, &'static [&'static str])> = vec![
        ("scenario", SCENARIO_BASE),
        ("stepper", STEPPER_KEYS),
        ("output", OUTPUT_KEYS),
    ];
    match kind {
        ScenarioKind::Kernel => {
            schema.push(("env", ENV_KEYS));
            schema.push(("atom", ATOM_KEYS));
        }
        ScenarioKind::Single => {
            schema.push(("env", ENV_KEYS));
            schema.push(("atom", ATOM_KEYS));
            schema.push(("cavity", CAVITY_KEYS));
        }
        ScenarioKind::Driven => {
            schema.push(("env", ENV_KEYS));
            schema.push(("atom", ATOM_KEYS));
            schema.push(("cavity", CAVITY_KEYS));
            schema.push(("drive", DRIVE_KEYS));
        }
        ScenarioKind::Feedback => {
            schema[0] = ("scenario", SCENARIO_FEEDBACK);
            schema.push(("mode", MODE_KEYS));
            schema.push(("env", ENV_KEYS));
            schema.push(("atom", ATOM_KEYS));
            schema.push(("cavity", CAVITY_KEYS));
            schema.push(("drive", DRIVE_KEYS));
            schema.push(("feedback", FEEDBACK_KEYS));
        }
        ScenarioKind::Lattice => {
            schema.push(("env", ENV_KEYS));
            schema.push(("cavity", CAVITY_KEYS));
            schema.push(("lattice", LATTICE_KEYS));
        }
        ScenarioKind::Stability => {
            schema.push(("env", ENV_KEYS));
            if has_lattice {
                schema.push(("cavity", CAVITY_KEYS));
                schema.push(("lattice", LATTICE_KEYS));
            } else {
                schema.push(("atom", ATOM_KEYS));
                schema.push(("cavity", CAVITY_KEYS));
            }
        }
        ScenarioKind::OracleCheck => {
            schema[0] = ("scenario", SCENARIO_ORACLE);
            schema.push(("env", ENV_KEYS));
            schema.push(("atom", ATOM_KEYS));
            schema.push(("cavity", CAVITY_KEYS));
            schema.push(("drive", DRIVE_KEYS));
        }
        ScenarioKind::Reproduce => {
            schema[0] = ("scenario", SCENARIO_REPRODUCE);
            schema.retain(|(name, _)| *name != "stepper");
        }
    }
    schema
}

/// Parse and validate a config whose kind comes from the file itself.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    parse_config_as(text, None)
}

/// Parse and validate; `cli_kind` is the subcommand the user invoked, which
/// must agree with the file's `kind` when both are given.
pub fn parse_config_as(
    text: &str,
    cli_kind: Option<ScenarioKind>,
) -> Result<ScenarioConfig, ConfigError> {
    let doc = ConfigDoc::parse(text)?;
    let kind = resolve_kind(&doc, cli_kind)?;
    doc.check_schema(&schema_for(kind, doc.has("lattice")))?;
    build(&doc, kind)
}

fn resolve_kind(
    doc: &ConfigDoc,
    cli_kind: Option<ScenarioKind>,
) -> Result<ScenarioKind, ConfigError> {
    let stated = match doc.get("scenario").and_then(|s| s.ident("kind")) {
        Some(e) => Some((ScenarioKind::from_entry(e)?, e)),
        None => None,
    };
    match (cli_kind, stated) {
        (Some(cli), Some((cfg, e))) if cli != cfg => Err(perr(
            e.line,
            e.val_col,
            format!("scenario kind '{}' does not match the '{}' subcommand", cfg.as_str(), cli.as_str()),
        )),
        (Some(cli), _) => Ok(cli),
        (None, Some((cfg, _))) => Ok(cfg),
        (None, None) => match doc.get("scenario") {
            Some(s) => Err(s.missing("kind")),
            None => Err(ConfigError::MissingSection { name: "scenario" }),
        },
    }
}

fn build(doc: &ConfigDoc, kind: ScenarioKind) -> Result<ScenarioConfig, ConfigError> {
    let scenario = doc.get("scenario");
    let name = scenario
        .and_then(|s| s.ident("name"))
        .map(|e| e.value.clone())
        .unwrap_or_else(|| kind.as_str().replace('-', "_"));
    let freeze_kernel = match scenario {
        Some(s) => s.bool_or("freeze_kernel", false)?,
        None => false,
    };
    let f0 = kernel_initials(scenario, "f0_re", "f0_im")?;
    let fa0 = kernel_initials(scenario, "fa0_re", "fa0_im")?
        .first()
        .copied()
        .unwrap_or(C64::ZERO);
    let oracle = match scenario {
        Some(s) => OracleOpts {
            n_ph: s.usize_or("oracle.n_ph", 1)?.max(1),
            tol: s.f64_or("oracle.tol", 1e-6)?,
        },
        None => OracleOpts::default(),
    };
    let stepper = build_stepper(doc)?;
    let mode = build_mode(doc)?;
    let out_dir = doc
        .get("output")
        .and_then(|s| s.ident("dir"))
        .map(|e| PathBuf::from(&e.value));

    let mut cfg = ScenarioConfig {
        kind,
        name,
        figure: None,
        atom: None,
        cavity: None,
        env: None,
        drive: None,
        feedback: None,
        lattice: None,
        stepper,
        mode,
        out_dir,
        freeze_kernel,
        f0,
        fa0,
        oracle,
    };

    match kind {
        ScenarioKind::Kernel => {
            cfg.env = Some(build_env(doc)?);
            let atom_sec = doc.require("atom")?;
            let atom = build_atom(atom_sec, None, InitialState::Excited)?;
            if atom.spec.transitions() != 1 {
                return Err(perr(
                    atom_sec.line,
                    atom_sec.col,
                    "the kernel scenario tracks a single transition".to_string(),
                ));
            }
            cfg.atom = Some(atom);
        }
        ScenarioKind::Single | ScenarioKind::Driven => {
            cfg.env = Some(build_env(doc)?);
            let cavity = build_cavity(doc)?;
            let atom_sec = doc.require("atom")?;
            let atom = build_atom(atom_sec, Some(cavity.omega_c), InitialState::Excited)?;
            if kind == ScenarioKind::Single && atom.initial == InitialState::Superposition {
                return Err(initial_error(atom_sec, "a superposition start needs the driven scenario"));
            }
            if atom.initial == InitialState::Superposition && atom.spec.levels != 2 {
                return Err(initial_error(atom_sec, "superposition starts are two-level only"));
            }
            if kind == ScenarioKind::Driven {
                cfg.drive = Some(build_drive(doc.require("drive")?, cavity.omega_c)?);
            }
            cfg.cavity = Some(cavity);
            cfg.atom = Some(atom);
        }
        ScenarioKind::Feedback => {
            cfg.env = Some(build_env(doc)?);
            let cavity = build_cavity(doc)?;
            let atom_sec = doc.require("atom")?;
            let atom = build_atom(atom_sec, Some(cavity.omega_c), InitialState::Excited)?;
            let fb_sec = doc.require("feedback")?;
            let feedback = build_feedback(fb_sec)?;
            if feedback.target == FeedbackTarget::Atom {
                if atom.spec.levels != 2 {
                    return Err(perr(
                        fb_sec.line,
                        fb_sec.col,
                        "atomic feedback is a two-level model".to_string(),
                    ));
                }
            } else if atom.initial == InitialState::Superposition {
                return Err(initial_error(
                    atom_sec,
                    "the quadrature model starts from basis states",
                ));
            }
            if let Some(d) = doc.get("drive") {
                cfg.drive = Some(build_drive(d, cavity.omega_c)?);
            }
            cfg.cavity = Some(cavity);
            cfg.atom = Some(atom);
            cfg.feedback = Some(feedback);
        }
        ScenarioKind::Lattice => {
            cfg.lattice = Some(build_lattice(doc)?);
        }
        ScenarioKind::Stability => {
            if doc.has("lattice") {
                cfg.lattice = Some(build_lattice(doc)?);
            } else {
                cfg.env = Some(build_env(doc)?);
                let cavity = build_cavity(doc)?;
                let atom_sec = doc.require("atom")?;
                cfg.atom = Some(build_atom(atom_sec, Some(cavity.omega_c), InitialState::Excited)?);
                cfg.cavity = Some(cavity);
            }
        }
        ScenarioKind::OracleCheck => {
            cfg.env = Some(build_env(doc)?);
            let cavity = build_cavity(doc)?;
            let atom_sec = doc.require("atom")?;
            let atom = build_atom(atom_sec, Some(cavity.omega_c), InitialState::Excited)?;
            if atom.initial == InitialState::Superposition {
                return Err(initial_error(atom_sec, "the oracle starts from basis states"));
            }
            if let Some(d) = doc.get("drive") {
                cfg.drive = Some(build_drive(d, cavity.omega_c)?);
            }
            cfg.cavity = Some(cavity);
            cfg.atom = Some(atom);
        }
        ScenarioKind::Reproduce => {
            let sec = doc.require("scenario")?;
            let e = sec.ident("figure").ok_or_else(|| sec.missing("figure"))?;
            cfg.figure = Some(
                Figure::from_ident(&e.value)
                    .ok_or_else(|| perr(e.line, e.val_col, format!("unknown figure '{}'", e.value)))?,
            );
        }
    }
    Ok(cfg)
}

fn initial_error(sec: &RawSection, msg: &str) -> ConfigError {
    match sec.ident("initial") {
        Some(e) => perr(e.line, e.val_col, msg.to_string()),
        None => perr(sec.line, sec.col, msg.to_string()),
    }
}

fn kernel_initials(
    scenario: Option<&RawSection>,
    re_key: &str,
    im_key: &str,
) -> Result<Vec<C64>, ConfigError> {
    let Some(sec) = scenario else { return Ok(Vec::new()) };
    let re = sec.list(re_key)?;
    let im = sec.list(im_key)?;
    match (re, im) {
        (None, None) => Ok(Vec::new()),
        (re, im) => {
            let re = re.unwrap_or_default();
            let im = im.unwrap_or_default();
            let n = re.len().max(im.len());
            Ok((0..n)
                .map(|k| C64::new(re.get(k).copied().unwrap_or(0.0), im.get(k).copied().unwrap_or(0.0)))
                .collect())
        }
    }
}

fn build_stepper(doc: &ConfigDoc) -> Result<StepperConfig, ConfigError> {
    let Some(sec) = doc.get("stepper") else {
        return Ok(StepperConfig::default());
    };
    let scheme = match sec.ident("scheme") {
        None => Scheme::Rk4,
        Some(e) => match e.value.as_str() {
            "rk4" => Scheme::Rk4,
            "euler-maruyama" => Scheme::EulerMaruyama,
            other => {
                return Err(perr(
                    e.line,
                    e.val_col,
                    format!("expected rk4 or euler-maruyama, got '{other}'"),
                ))
            }
        },
    };
    let dt = sec.f64_or("dt", 0.01)?;
    let horizon = sec.f64_or("horizon", 10.0)?;
    let stride = sec.usize_or("stride", 1)?;
    StepperConfig::new(scheme, dt, horizon, stride)
        .map_err(|e| perr(sec.line, sec.col, e.to_string()))
}

fn build_mode(doc: &ConfigDoc) -> Result<RunMode, ConfigError> {
    let Some(sec) = doc.get("mode") else { return Ok(RunMode::default()) };
    let stochastic = match sec.ident("kind") {
        None => false,
        Some(e) => match e.value.as_str() {
            "deterministic" => false,
            "stochastic" => true,
            other => {
                return Err(perr(
                    e.line,
                    e.val_col,
                    format!("expected deterministic or stochastic, got '{other}'"),
                ))
            }
        },
    };
    let seed = sec.u64_or("seed", 0)?;
    let n_traj = if stochastic {
        let n = sec.usize_req("n_traj")?;
        if n == 0 {
            return Err(perr(sec.line, sec.col, "n_traj must be at least 1".to_string()));
        }
        n
    } else {
        sec.usize_or("n_traj", 1)?
    };
    Ok(RunMode { stochastic, n_traj, seed })
}

fn build_env(doc: &ConfigDoc) -> Result<EnvSpec, ConfigError> {
    let sec = doc.require("env")?;
    let env = EnvSpec { gamma: sec.f64_req("gamma")?, omega: sec.f64_req("omega")? };
    env.validate().map_err(|e| perr(sec.line, sec.col, e.to_string()))
}

fn build_cavity(doc: &ConfigDoc) -> Result<CavitySpec, ConfigError> {
    let sec = doc.require("cavity")?;
    let cavity = CavitySpec {
        omega_c: sec.f64_req("freq")?,
        kappa: sec.f64_or("kappa", 0.0)?,
        kappa_c: sec.f64_or("kappa_c", 0.0)?,
        chi_a: sec.f64_or("chi_a", 0.0)?,
    };
    cavity.validate().map_err(|e| perr(sec.line, sec.col, e.to_string()))
}

fn build_atom(
    sec: &RawSection,
    omega_c: Option<f64>,
    default_initial: InitialState,
) -> Result<AtomScenario, ConfigError> {
    let freq = sec.list_req("freq")?;
    let n = freq.len();
    let input = AtomInput {
        level_energies: freq,
        couplings: sec.list("coupling")?.unwrap_or_else(|| vec![0.0; n]),
        env_couplings: sec.list_req("env_coupling")?,
        kernel_consts: sec.list_req("chi")?,
        detunings: sec.list("detuning")?,
    };
    // Kernel runs have no cavity; detunings then fall out of the picture, so
    // the first transition frequency stands in as the reference.
    let reference = omega_c.unwrap_or(input.level_energies[0]);
    let spec = input.validate(reference).map_err(|e| perr(sec.line, sec.col, e.to_string()))?;
    if let Some(levels) = sec.entry("levels") {
        let stated: usize = levels.value.parse().map_err(|_| {
            perr(levels.line, levels.val_col, format!("expected an integer, got '{}'", levels.value))
        })?;
        if stated != spec.levels {
            return Err(perr(
                levels.line,
                levels.val_col,
                format!("levels = {stated} disagrees with the {} listed frequencies", spec.levels - 1),
            ));
        }
    }
    let initial = match sec.ident("initial") {
        None => default_initial,
        Some(e) => match e.value.as_str() {
            "ground" => InitialState::Ground,
            "excited" => InitialState::Excited,
            "superposition" => InitialState::Superposition,
            other => {
                return Err(perr(
                    e.line,
                    e.val_col,
                    format!("expected ground, excited, or superposition, got '{other}'"),
                ))
            }
        },
    };
    Ok(AtomScenario { spec, initial })
}

fn build_drive(sec: &RawSection, omega_c: f64) -> Result<DriveSpec, ConfigError> {
    DriveInput {
        amplitude: sec.f64_req("amplitude")?,
        drive_freq: sec.f64("freq")?,
        detuning: sec.f64("detuning")?,
    }
    .validate(omega_c)
    .map_err(|e| perr(sec.line, sec.col, e.to_string()))
}

fn build_feedback(sec: &RawSection) -> Result<FeedbackScenario, ConfigError> {
    let target = match sec.ident("target") {
        None => return Err(sec.missing("target")),
        Some(e) => match e.value.as_str() {
            "cavity" => FeedbackTarget::Cavity,
            "atom" => FeedbackTarget::Atom,
            other => {
                return Err(perr(e.line, e.val_col, format!("expected cavity or atom, got '{other}'")))
            }
        },
    };
    let spec = FeedbackSpec {
        g_f: sec.f64_or("g_f", 0.0)?,
        beta_x: sec.f64_or("beta_x", 0.0)?,
        beta_p: sec.f64_or("beta_p", 0.0)?,
        eta: sec.f64_or("eta", 1.0)?,
    };
    let spec = spec.validate().map_err(|e| perr(sec.line, sec.col, e.to_string()))?;
    let cavity_kernel = match sec.ident("cavity_kernel") {
        None => CavityKernelMode::Markovian,
        Some(e) => match e.value.as_str() {
            "markovian" => CavityKernelMode::Markovian,
            "riccati" => CavityKernelMode::Riccati,
            other => {
                return Err(perr(
                    e.line,
                    e.val_col,
                    format!("expected markovian or riccati, got '{other}'"),
                ))
            }
        },
    };
    Ok(FeedbackScenario {
        spec,
        target,
        delta: sec.f64_or("delta", 0.0)?,
        rot_detuning: sec.f64_or("rot_detuning", 0.0)?,
        cavity_kernel,
        moments: GaussianMoments {
            v_x: sec.f64_or("v_x", 0.5)?,
            v_xp: sec.f64_or("v_xp", 0.0)?,
            v_p: sec.f64_or("v_p", 0.5)?,
        },
        x0: sec.f64_or("x0", 0.0)?,
        p0: sec.f64_or("p0", 0.0)?,
    })
}

/// Expand a per-site list: a single entry is shorthand for a uniform chain.
fn per_site(
    sec: &RawSection,
    key: &str,
    sites: usize,
    default: Option<f64>,
) -> Result<Vec<f64>, ConfigError> {
    let list = match (sec.list(key)?, default) {
        (Some(l), _) => l,
        (None, Some(d)) => return Ok(vec![d; sites]),
        (None, None) => return Err(sec.missing(key)),
    };
    if list.len() == 1 && sites > 1 {
        return Ok(vec![list[0]; sites]);
    }
    if list.len() != sites {
        let e = sec.entry(key).expect("list came from this entry");
        return Err(perr(
            e.line,
            e.val_col,
            format!("'{key}' needs {sites} entries (or one for a uniform chain), got {}", list.len()),
        ));
    }
    Ok(list)
}

fn build_lattice(doc: &ConfigDoc) -> Result<LatticeScenario, ConfigError> {
    let env = build_env(doc)?;
    let cav_sec = doc.require("cavity")?;
    let cavity_freq = cav_sec.f64_req("freq")?;
    let kappa = cav_sec.f64_req("kappa")?;
    let sec = doc.require("lattice")?;
    let sites = sec.usize_req("sites")?;
    if sites < 2 {
        return Err(perr(sec.line, sec.col, format!("sites = {sites} is below the minimum of 2")));
    }
    let spec = LatticeSpec {
        sites,
        hop: sec.f64_req("hop")?,
        cavity_freq,
        kappa,
        detuning: sec.f64_or("detuning", 0.0)?,
        g: per_site(sec, "g", sites, None)?,
        delta: per_site(sec, "delta", sites, None)?,
        kappa_env: per_site(sec, "kappa_env", sites, None)?,
        beta_x: per_site(sec, "beta_x", sites, Some(0.0))?,
        beta_p: per_site(sec, "beta_p", sites, Some(0.0))?,
        g_f: sec.f64_or("g_f", 0.0)?,
        gamma: env.gamma,
        env_freq: env.omega,
        chi: sec.f64_req("chi")?,
    };
    let spec = spec.validate().map_err(|e| perr(sec.line, sec.col, e.to_string()))?;
    let x0 = match sec.list("x0")? {
        None => DVector::zeros(spec.dim()),
        Some(v) => {
            if v.len() != spec.dim() {
                let e = sec.entry("x0").expect("list came from this entry");
                return Err(perr(
                    e.line,
                    e.val_col,
                    format!("'x0' needs {} entries for {} sites, got {}", spec.dim(), sites, v.len()),
                ));
            }
            DVector::from_vec(v)
        }
    };
    Ok(LatticeScenario { spec, x0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_KERNEL: &str = "\
[scenario]
kind = kernel

[env]
gamma = 2.0
omega = 50.0

[atom]
freq = 50.0
env_coupling = 1.0
chi = 1.0
";

    #[test]
    fn minimal_kernel_config_is_valid() {
        let cfg = parse_config(MINIMAL_KERNEL).unwrap();
        assert_eq!(cfg.kind, ScenarioKind::Kernel);
        assert_eq!(cfg.name, "kernel");
        let atom = cfg.atom.unwrap();
        assert_eq!(atom.spec.transitions(), 1);
        assert_eq!(atom.spec.kernel_consts, vec![1.0]);
        assert_eq!(cfg.env.unwrap().gamma, 2.0);
        assert_eq!(cfg.stepper, StepperConfig::default());
    }

    #[test]
    fn misspelled_key_is_unknown() {
        let text = MINIMAL_KERNEL.replace("gamma = 2.0", "gamm = 2.0");
        match parse_config(&text).unwrap_err() {
            ConfigError::UnknownKey { key, line, col } => {
                assert_eq!(key, "gamm");
                assert_eq!(line, 5);
                assert_eq!(col, 1);
            }
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_wins_over_missing_required_key() {
        // gamma itself is misspelled, so the unknown-key report must come
        // first; a missing-gamma complaint would mask the typo.
        let text = MINIMAL_KERNEL.replace("gamma = 2.0", "gamm = 2.0");
        assert!(matches!(parse_config(&text), Err(ConfigError::UnknownKey { .. })));
    }

    #[test]
    fn missing_section_is_reported() {
        let text = "[scenario]\nkind = kernel\n\n[atom]\nfreq = 50.0\nenv_coupling = 1.0\nchi = 1.0\n";
        assert_eq!(
            parse_config(text).unwrap_err(),
            ConfigError::MissingSection { name: "env" }
        );
    }

    #[test]
    fn missing_key_points_at_section_header() {
        let text = MINIMAL_KERNEL.replace("gamma = 2.0\n", "");
        match parse_config(&text).unwrap_err() {
            ConfigError::ParseError { line, detail, .. } => {
                assert_eq!(line, 4);
                assert!(detail.contains("gamma"), "{detail}");
            }
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn malformed_number_reports_value_position() {
        let text = MINIMAL_KERNEL.replace("gamma = 2.0", "gamma = fast");
        match parse_config(&text).unwrap_err() {
            ConfigError::ParseError { line, col, detail } => {
                assert_eq!(line, 5);
                assert_eq!(col, 9);
                assert!(detail.contains("fast"));
            }
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = MINIMAL_KERNEL.replace("omega = 50.0", "omega = 50.0\ngamma = 3.0");
        assert!(matches!(parse_config(&text), Err(ConfigError::ParseError { line: 7, .. })));
    }

    #[test]
    fn duplicate_section_rejected() {
        let text = format!("{MINIMAL_KERNEL}\n[env]\ngamma = 1.0\n");
        assert!(matches!(parse_config(&text), Err(ConfigError::ParseError { .. })));
    }

    #[test]
    fn key_outside_section_rejected() {
        assert!(matches!(
            parse_config("kind = kernel\n"),
            Err(ConfigError::ParseError { line: 1, .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = MINIMAL_KERNEL.replace("gamma = 2.0", "# bandwidth\n\ngamma = 2.0 # inverse ns");
        assert!(parse_config(&text).is_ok());
    }

    #[test]
    fn subcommand_kind_conflict_rejected() {
        let err = parse_config_as(MINIMAL_KERNEL, Some(ScenarioKind::Single)).unwrap_err();
        match err {
            ConfigError::ParseError { detail, .. } => {
                assert!(detail.contains("does not match"), "{detail}");
            }
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn subcommand_supplies_missing_kind() {
        let text = MINIMAL_KERNEL.replace("[scenario]\nkind = kernel\n\n", "");
        let cfg = parse_config_as(&text, Some(ScenarioKind::Kernel)).unwrap();
        assert_eq!(cfg.kind, ScenarioKind::Kernel);
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn section_irrelevant_to_kind_is_unknown() {
        let text = format!("{MINIMAL_KERNEL}\n[lattice]\nsites = 2\n");
        match parse_config(&text).unwrap_err() {
            ConfigError::UnknownKey { key, .. } => assert_eq!(key, "[lattice]"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn lattice_lists_broadcast_and_validate() {
        let text = "\
[scenario]
kind = lattice

[env]
gamma = 2.0
omega = 38.98

[cavity]
freq = 43.78
kappa = 1.0

[lattice]
sites = 3
hop = 0.1
detuning = 5.0
g = 0.2
delta = 0.2
kappa_env = 0.04
beta_p = 0.2
g_f = 1.0
chi = 1.0
";
        let cfg = parse_config(text).unwrap();
        let lat = cfg.lattice.unwrap();
        assert_eq!(lat.spec.sites, 3);
        assert_eq!(lat.spec.g, vec![0.2; 3]);
        assert_eq!(lat.spec.beta_x, vec![0.0; 3]);
        assert_eq!(lat.spec.beta_p, vec![0.2; 3]);
        assert_eq!(lat.x0.len(), 12);
    }

    #[test]
    fn model_rejection_surfaces_as_parse_error() {
        let text = MINIMAL_KERNEL.replace("gamma = 2.0", "gamma = -2.0");
        match parse_config(&text).unwrap_err() {
            ConfigError::ParseError { detail, .. } => assert!(detail.contains("gamma")),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn stated_detuning_cross_checked() {
        let text = "\
[scenario]
kind = single

[env]
gamma = 10.0
omega = 50.0

[cavity]
freq = 37.72

[atom]
freq = 37.7
coupling = 0.02
env_coupling = 0.31
chi = 1.0
detuning = -0.5
";
        match parse_config(text).unwrap_err() {
            ConfigError::ParseError { detail, .. } => assert!(detail.contains("detuning")),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn f0_pairs_zip_with_defaults() {
        let text = MINIMAL_KERNEL.replace(
            "kind = kernel",
            "kind = kernel\nf0_re = 0.1, 0.2\nf0_im = -0.3",
        );
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.f0, vec![C64::new(0.1, -0.3), C64::new(0.2, 0.0)]);
    }

    #[test]
    fn stochastic_mode_requires_n_traj() {
        let base = "\
[scenario]
kind = feedback

[mode]
kind = stochastic

[env]
gamma = 2.0
omega = 32.7

[cavity]
freq = 37.7
kappa = 0.2

[atom]
freq = 37.7
coupling = 0.2
env_coupling = 1.0
chi = 1.0

[feedback]
target = atom
g_f = 1.0
";
        assert!(matches!(parse_config(base), Err(ConfigError::ParseError { .. })));
        let ok = base.replace("kind = stochastic", "kind = stochastic\nn_traj = 16\nseed = 7");
        let cfg = parse_config(&ok).unwrap();
        assert!(cfg.mode.stochastic);
        assert_eq!(cfg.mode.n_traj, 16);
        assert_eq!(cfg.mode.seed, 7);
    }
}
