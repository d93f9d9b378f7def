//! Validated physical parameter bundles shared by every other module, and the
//! crate-wide unit convention.
//!
//! Every frequency and rate is stored in inverse nanoseconds (numerically the
//! GHz value; MHz values divided by 1000) and every time in nanoseconds. The
//! products that enter the dynamics are the raw values, with no 2π anywhere.
//! The ground level energy is pinned to zero: only transition frequencies
//! enter any equation of motion.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    /// A rate or efficiency lies outside its admissible range.
    #[error("negative or out-of-range rate: {name} = {value}")]
    NegativeRate { name: &'static str, value: f64 },
    /// A stated detuning disagrees with the one derived from the frequencies.
    #[error("detuning {index} inconsistent: stated {stated}, derived {derived}")]
    InconsistentDetuning { index: usize, stated: f64, derived: f64 },
    /// A per-transition list has the wrong length for the level count.
    #[error("{name} must have {expected} entries for {levels} levels, got {got}")]
    LengthMismatch { name: &'static str, expected: usize, got: usize, levels: usize },
    /// Fewer than two levels leaves no transition to couple.
    #[error("at least 2 levels required, got {got}")]
    TooFewLevels { got: usize },
}

/// Multi-level atom in a decay cascade: level energies ω_0 = 0 < ω_1 < ...,
/// per-transition couplings to the cavity and to the structured environment.
///
/// Per-transition quantities are indexed by transition number n = 1..N-1 and
/// stored 0-based, so `couplings[0]` is g_1.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomSpec {
    /// Level count N.
    pub levels: usize,
    /// ω_n for n = 0..N-1, with ω_0 = 0.
    pub level_energies: Vec<f64>,
    /// Transition frequencies ω̃_n = ω_n − ω_{n−1}, n = 1..N-1.
    pub transition_freqs: Vec<f64>,
    /// Detunings Δ_n = ω̃_n − ω_c.
    pub detunings: Vec<f64>,
    /// Cavity couplings g_n.
    pub couplings: Vec<f64>,
    /// Environment couplings κ_n ≥ 0.
    pub env_couplings: Vec<f64>,
    /// Kernel constants χ_n (dimensionless, equal-time kernel weight).
    pub kernel_consts: Vec<f64>,
}

/// Raw atom parameters prior to validation. `level_energies` lists the excited
/// levels ω_1.. only; the ground energy is implicit. Detunings may be given
/// explicitly (they are then cross-checked) or left to be derived from ω_c.
#[derive(Debug, Clone, Default)]
pub struct AtomInput {
    pub level_energies: Vec<f64>,
    pub couplings: Vec<f64>,
    pub env_couplings: Vec<f64>,
    pub kernel_consts: Vec<f64>,
    pub detunings: Option<Vec<f64>>,
}

impl AtomInput {
    /// Validate against the cavity frequency and fill in derived fields.
    pub fn validate(self, omega_c: f64) -> Result<AtomSpec, ModelError> {
        let n_trans = self.level_energies.len();
        let levels = n_trans + 1;
        if levels < 2 {
            return Err(ModelError::TooFewLevels { got: levels });
        }
        let check_len = |name: &'static str, got: usize| {
            if got != n_trans {
                Err(ModelError::LengthMismatch { name, expected: n_trans, got, levels })
            } else {
                Ok(())
            }
        };
        check_len("couplings", self.couplings.len())?;
        check_len("env_couplings", self.env_couplings.len())?;
        check_len("kernel_consts", self.kernel_consts.len())?;
        if let Some(d) = &self.detunings {
            check_len("detunings", d.len())?;
        }
        for &k in &self.env_couplings {
            if !(k >= 0.0) {
                return Err(ModelError::NegativeRate { name: "env_couplings", value: k });
            }
        }

        let mut energies = Vec::with_capacity(levels);
        energies.push(0.0);
        energies.extend_from_slice(&self.level_energies);
        let transition_freqs: Vec<f64> =
            energies.windows(2).map(|w| w[1] - w[0]).collect();
        let derived: Vec<f64> = transition_freqs.iter().map(|w| w - omega_c).collect();
        if let Some(stated) = &self.detunings {
            for (i, (&s, &d)) in stated.iter().zip(&derived).enumerate() {
                if (s - d).abs() > 1e-9 {
                    return Err(ModelError::InconsistentDetuning {
                        index: i + 1,
                        stated: s,
                        derived: d,
                    });
                }
            }
        }
        Ok(AtomSpec {
            levels,
            level_energies: energies,
            transition_freqs,
            detunings: derived,
            couplings: self.couplings,
            env_couplings: self.env_couplings,
            kernel_consts: self.kernel_consts,
        })
    }
}

impl AtomSpec {
    /// Number of transitions N-1.
    pub fn transitions(&self) -> usize {
        self.levels - 1
    }

    /// Validation is idempotent: re-validating a validated spec reproduces it.
    pub fn revalidate(&self, omega_c: f64) -> Result<AtomSpec, ModelError> {
        AtomInput {
            level_energies: self.level_energies[1..].to_vec(),
            couplings: self.couplings.clone(),
            env_couplings: self.env_couplings.clone(),
            kernel_consts: self.kernel_consts.clone(),
            detunings: Some(self.detunings.clone()),
        }
        .validate(omega_c)
    }
}

/// Cavity mode: resonance, Markovian decay, and the non-Markovian channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavitySpec {
    /// Resonant frequency ω_c.
    pub omega_c: f64,
    /// Markovian decay rate κ ≥ 0.
    pub kappa: f64,
    /// Non-Markovian cavity-environment coupling κ_c ≥ 0.
    pub kappa_c: f64,
    /// Kernel constant χ_a for the cavity channel.
    pub chi_a: f64,
}

impl CavitySpec {
    pub fn validate(self) -> Result<Self, ModelError> {
        if !(self.kappa >= 0.0) {
            return Err(ModelError::NegativeRate { name: "kappa", value: self.kappa });
        }
        if !(self.kappa_c >= 0.0) {
            return Err(ModelError::NegativeRate { name: "kappa_c", value: self.kappa_c });
        }
        Ok(self)
    }
}

/// Structured environment: Lorentzian bandwidth γ (inverse memory time) and
/// central frequency Ω.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvSpec {
    /// Inverse memory time γ > 0.
    pub gamma: f64,
    /// Central frequency Ω.
    pub omega: f64,
}

impl EnvSpec {
    pub fn validate(self) -> Result<Self, ModelError> {
        if !(self.gamma > 0.0) {
            return Err(ModelError::NegativeRate { name: "gamma", value: self.gamma });
        }
        Ok(self)
    }
}

/// Classical coherent drive on the cavity. Δ = ω_c − ω_d is the drive frame
/// rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveSpec {
    /// Amplitude 𝓔 ≥ 0.
    pub amplitude: f64,
    /// Drive frequency ω_d.
    pub drive_freq: f64,
    /// Detuning Δ = ω_c − ω_d.
    pub detuning: f64,
}

/// Raw drive parameters; either the drive frequency or the detuning may be
/// given, the other is derived from ω_c (both given ⇒ cross-checked).
#[derive(Debug, Clone, Copy, Default)]
pub struct DriveInput {
    pub amplitude: f64,
    pub drive_freq: Option<f64>,
    pub detuning: Option<f64>,
}

impl DriveInput {
    pub fn validate(self, omega_c: f64) -> Result<DriveSpec, ModelError> {
        if !(self.amplitude >= 0.0) {
            return Err(ModelError::NegativeRate { name: "amplitude", value: self.amplitude });
        }
        let (drive_freq, detuning) = match (self.drive_freq, self.detuning) {
            (Some(wd), Some(d)) => {
                let derived = omega_c - wd;
                if (d - derived).abs() > 1e-9 {
                    return Err(ModelError::InconsistentDetuning {
                        index: 0,
                        stated: d,
                        derived,
                    });
                }
                (wd, d)
            }
            (Some(wd), None) => (wd, omega_c - wd),
            (None, Some(d)) => (omega_c - d, d),
            (None, None) => (omega_c, 0.0),
        };
        Ok(DriveSpec { amplitude: self.amplitude, drive_freq, detuning })
    }
}

/// Measurement-feedback loop parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSpec {
    /// Feedback strength g_f.
    pub g_f: f64,
    /// Quadrature gain β_x.
    pub beta_x: f64,
    /// Quadrature gain β_p.
    pub beta_p: f64,
    /// Detection efficiency η ∈ (0, 1].
    pub eta: f64,
}

impl Default for FeedbackSpec {
    fn default() -> Self {
        // Ideal detection unless configured otherwise.
        Self { g_f: 0.0, beta_x: 0.0, beta_p: 0.0, eta: 1.0 }
    }
}

impl FeedbackSpec {
    pub fn validate(self) -> Result<Self, ModelError> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(ModelError::NegativeRate { name: "eta", value: self.eta });
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_level(omega_1: f64) -> AtomInput {
        AtomInput {
            level_energies: vec![omega_1],
            couplings: vec![0.1],
            env_couplings: vec![1.0],
            kernel_consts: vec![1.0],
            detunings: None,
        }
    }

    #[test]
    fn resonant_two_level_has_zero_detuning() {
        let atom = two_level(37.7).validate(37.7).unwrap();
        assert_eq!(atom.levels, 2);
        assert_eq!(atom.detunings, vec![0.0]);
        assert_eq!(atom.transition_freqs, vec![37.7]);
    }

    #[test]
    fn three_level_transition_frequencies() {
        let atom = AtomInput {
            level_energies: vec![37.7, 75.3],
            couplings: vec![0.02, 0.02],
            env_couplings: vec![0.31, 0.31],
            kernel_consts: vec![1.0, 1.0],
            detunings: None,
        }
        .validate(37.72)
        .unwrap();
        assert!((atom.transition_freqs[1] - 37.6).abs() < 1e-12);
        assert!((atom.detunings[0] - (-0.02)).abs() < 1e-12);
        assert!((atom.detunings[1] - (-0.12)).abs() < 1e-12);
    }

    #[test]
    fn negative_gamma_rejected() {
        let err = EnvSpec { gamma: -1.0, omega: 50.0 }.validate().unwrap_err();
        assert!(matches!(err, ModelError::NegativeRate { name: "gamma", .. }));
    }

    #[test]
    fn negative_env_coupling_rejected() {
        let mut atom = two_level(1.0);
        atom.env_couplings = vec![-0.5];
        assert!(matches!(
            atom.validate(1.0),
            Err(ModelError::NegativeRate { name: "env_couplings", .. })
        ));
    }

    #[test]
    fn inconsistent_detuning_rejected() {
        let mut atom = two_level(37.7);
        atom.detunings = Some(vec![0.5]);
        assert!(matches!(
            atom.validate(37.7),
            Err(ModelError::InconsistentDetuning { index: 1, .. })
        ));
    }

    #[test]
    fn stated_detuning_within_tolerance_accepted() {
        let mut atom = two_level(37.7);
        atom.detunings = Some(vec![5e-10]);
        assert!(atom.validate(37.7).is_ok());
    }

    #[test]
    fn validation_is_idempotent() {
        let atom = AtomInput {
            level_energies: vec![37.7, 75.3],
            couplings: vec![0.02, 0.03],
            env_couplings: vec![0.31, 0.62],
            kernel_consts: vec![1.0, 0.5],
            detunings: None,
        }
        .validate(37.7)
        .unwrap();
        assert_eq!(atom.revalidate(37.7).unwrap(), atom);
    }

    #[test]
    fn drive_fields_derived_both_ways() {
        let d = DriveInput { amplitude: 1.0, drive_freq: Some(37.5), detuning: None }
            .validate(37.7)
            .unwrap();
        assert!((d.detuning - 0.2).abs() < 1e-12);
        let d2 = DriveInput { amplitude: 1.0, drive_freq: None, detuning: Some(0.2) }
            .validate(37.7)
            .unwrap();
        assert!((d2.drive_freq - 37.5).abs() < 1e-12);
        assert!(DriveInput { amplitude: -1.0, ..Default::default() }.validate(0.0).is_err());
    }

    #[test]
    fn detection_efficiency_range_enforced() {
        assert!(FeedbackSpec { eta: 0.0, ..Default::default() }.validate().is_err());
        assert!(FeedbackSpec { eta: 1.5, ..Default::default() }.validate().is_err());
        assert_eq!(FeedbackSpec::default().validate().unwrap().eta, 1.0);
    }

    #[test]
    fn cavity_rates_checked() {
        assert!(CavitySpec { omega_c: 1.0, kappa: -0.1, kappa_c: 0.0, chi_a: 1.0 }
            .validate()
            .is_err());
        assert!(CavitySpec { omega_c: 1.0, kappa: 0.1, kappa_c: 1.0, chi_a: 1.0 }
            .validate()
            .is_ok());
    }
}
