//! Time-indexed sample sequences produced by every integrator and consumed by
//! the CSV emitters and the comparison utilities.

use nalgebra::DVector;

use crate::C64;

/// One run's output: named observable columns sampled on a fixed time grid,
/// optionally with the kernel coefficient co-state and the noise record.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Observable names, in state-vector declaration order.
    pub names: Vec<String>,
    pub times: Vec<f64>,
    /// One vector per time point, aligned with `names`.
    pub samples: Vec<DVector<f64>>,
    /// Kernel coefficient samples per time point (one entry per tracked
    /// channel); empty when the run carries no kernel co-state.
    pub kernels: Vec<Vec<C64>>,
    /// Wiener increments consumed between successive samples; empty for
    /// deterministic runs.
    pub noise: Vec<f64>,
}

impl Trajectory {
    pub fn new<S: Into<String>>(names: Vec<S>) -> Self {
        Self {
            names: names.into_iter().map(Into::into).collect(),
            times: Vec::new(),
            samples: Vec::new(),
            kernels: Vec::new(),
            noise: Vec::new(),
        }
    }

    pub fn push(&mut self, t: f64, sample: DVector<f64>) {
        debug_assert_eq!(sample.len(), self.names.len());
        self.times.push(t);
        self.samples.push(sample);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, &DVector<f64>)> {
        self.times.last().map(|&t| (t, self.samples.last().unwrap()))
    }

    /// Column of one named observable across all samples.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.names.iter().position(|n| n == name)?;
        Some(self.samples.iter().map(|s| s[idx]).collect())
    }

    /// Largest |value| of one named observable across the run.
    pub fn sup_norm(&self, name: &str) -> Option<f64> {
        self.column(name)
            .map(|col| col.into_iter().map(f64::abs).fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_follow_declaration_order() {
        let mut traj = Trajectory::new(vec!["a", "b"]);
        traj.push(0.0, DVector::from_vec(vec![1.0, 2.0]));
        traj.push(0.1, DVector::from_vec(vec![3.0, -4.0]));
        assert_eq!(traj.len(), 2);
        assert_eq!(traj.column("b"), Some(vec![2.0, -4.0]));
        assert_eq!(traj.column("missing"), None);
        assert_eq!(traj.sup_norm("b"), Some(4.0));
        assert_eq!(traj.last().unwrap().0, 0.1);
    }
}
