//! Simulation and stability analysis for non-Markovian open quantum control systems.
//!
//! The crate integrates the nonlinear memory-kernel coefficient dynamics of a
//! structured (Lorentzian) environment, the linear time-varying mean-value
//! dynamics of driven cavity-QED systems (single cavity and coupled arrays),
//! and homodyne measurement-feedback stochastic dynamics. Convergence and
//! divergence are certified through logarithmic-norm and transition-matrix
//! criteria, and every mean-value model is validated against an independent
//! truncated-Fock-space density-matrix integrator.
//!
//! Unit convention (fixed across the crate): frequencies and rates in inverse
//! nanoseconds, times in nanoseconds, and no hidden 2π factors anywhere.

pub mod feedback;
pub mod kernel;
pub mod lattice;
pub mod ltv;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod stability;
pub mod trajectory;

pub use kernel::{KernelParams, KernelState, RegimeTag};
pub use lattice::{LatticeRunConfig, LatticeSpec};
pub use model::{AtomSpec, CavitySpec, DriveSpec, EnvSpec, FeedbackSpec};
pub use numerics::{RngStream, Scheme, StepperConfig};
pub use oracle::{HilbertConfig, OperatorSet};
pub use stability::{StabilityReport, Verdict};
pub use trajectory::Trajectory;

/// Complex scalar used throughout: double-precision Cartesian form.
pub type C64 = num_complex::Complex<f64>;
