//! Artifact writers: trajectory and ensemble CSV, stability-report text.
//!
//! Every value is printed with 17 significant digits so a read-back parse
//! recovers the exact f64; deterministic runs therefore produce byte-identical
//! files. Output is data only, consumable by any plotting tool.

use std::fs;
use std::io;
use std::path::Path;

use nmq_core::numerics::EnsembleStats;
use nmq_core::stability::StabilityReport;
use nmq_core::Trajectory;

use crate::CliError;

/// One value, 17 significant digits, sign and exponent always explicit.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path, source: io::Error) -> CliError {
    CliError::Io { path: path.to_path_buf(), source }
}

fn write_all(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Write `t,<names...>` then one row per recorded sample, columns in
/// declaration order. An empty trajectory yields a header-only file.
pub fn emit_csv(traj: &Trajectory, path: &Path) -> Result<(), CliError> {
    let mut out = String::with_capacity(64 + traj.len() * (traj.names.len() + 1) * 26);
    out.push('t');
    for name in &traj.names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (t, sample) in traj.times.iter().zip(&traj.samples) {
        out.push_str(&fmt(*t));
        for v in sample.iter() {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        out.push('\n');
    }
    write_all(path, &out)
}

/// Ensemble output: time, then mean and standard error per observable.
pub fn emit_ensemble_csv(
    times: &[f64],
    names: &[String],
    stats: &EnsembleStats,
    path: &Path,
) -> Result<(), CliError> {
    let mut out = String::new();
    out.push('t');
    for name in names {
        out.push_str(&format!(",mean_{name},stderr_{name}"));
    }
    out.push('\n');
    for (k, t) in times.iter().enumerate() {
        out.push_str(&fmt(*t));
        let (mean, err) = (&stats.mean[k], &stats.stderr[k]);
        for j in 0..names.len() {
            out.push(',');
            out.push_str(&fmt(mean[j]));
            out.push(',');
            out.push_str(&fmt(err[j]));
        }
        out.push('\n');
    }
    write_all(path, &out)
}

/// Structured text for a stability report: criterion, certificates, verdict,
/// then the one-line record used in logs.
pub fn render_report(report: &StabilityReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("criterion: {}\n", report.criterion));
    out.push_str(&format!("inputs: {}\n", report.inputs_digest));
    out.push_str("certificates:\n");
    for (name, value) in &report.certificates {
        out.push_str(&format!("  {name} = {}\n", fmt(*value)));
    }
    out.push_str(&format!("verdict: {}\n", report.verdict));
    out.push_str(&format!("margin: {}\n", fmt(report.tolerance)));
    match report.seed {
        Some(s) => out.push_str(&format!("seed: {s}\n")),
        None => out.push_str("seed: -\n"),
    }
    out.push_str(&format!("record: {}\n", report.to_record()));
    out
}

pub fn emit_report(reports: &[StabilityReport], path: &Path) -> Result<(), CliError> {
    let text: Vec<String> = reports.iter().map(render_report).collect();
    write_all(path, &text.join("\n"))
}

/// Arbitrary text artifact (deviation tables, run notes).
pub fn emit_text(path: &Path, contents: &str) -> Result<(), CliError> {
    write_all(path, contents)
}

/// Parse a file produced by [`emit_csv`] back into names and rows. The time
/// column comes back as the first entry of each row.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CliError::InvalidInput {
        detail: format!("{} is empty, expected a CSV header", path.display()),
    })?;
    let names: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let row: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        let row = row.map_err(|e| CliError::InvalidInput {
            detail: format!("{} row {}: {e}", path.display(), k + 1),
        })?;
        if row.len() != names.len() {
            return Err(CliError::InvalidInput {
                detail: format!(
                    "{} row {}: {} fields under a {}-column header",
                    path.display(),
                    k + 1,
                    row.len(),
                    names.len()
                ),
            });
        }
        rows.push(row);
    }
    Ok((names, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn sample_traj() -> Trajectory {
        let mut traj = Trajectory::new(vec!["photon".to_string(), "ground".to_string()]);
        traj.push(0.0, DVector::from_vec(vec![0.25, 0.75]));
        traj.push(0.01, DVector::from_vec(vec![0.2500000000000001, 1.0 / 3.0]));
        traj
    }

    #[test]
    fn empty_trajectory_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        let traj = Trajectory::new(vec!["photon".to_string()]);
        emit_csv(&traj, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "t,photon\n");
    }

    #[test]
    fn single_sample_writes_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.csv");
        let mut traj = Trajectory::new(vec!["photon".to_string()]);
        traj.push(0.0, DVector::from_vec(vec![1.0]));
        emit_csv(&traj, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn round_trip_recovers_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        let traj = sample_traj();
        emit_csv(&traj, &path).unwrap();
        let (names, rows) = read_csv(&path).unwrap();
        assert_eq!(names, vec!["t", "photon", "ground"]);
        assert_eq!(rows.len(), traj.len());
        for (row, (t, sample)) in rows.iter().zip(traj.times.iter().zip(&traj.samples)) {
            assert_eq!(row[0], *t);
            assert_eq!(row[1], sample[0]);
            assert_eq!(row[2], sample[1]);
        }
    }

    #[test]
    fn rewrites_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        emit_csv(&sample_traj(), &a).unwrap();
        emit_csv(&sample_traj(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}
