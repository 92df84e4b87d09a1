//! Stage 4 — total-energy calculation adapter.
//!
//! The contract is deliberately thin: a job directory with a `POSCAR` goes
//! in, a `result.tsv` (and optionally a relaxed `CONTCAR`) comes out, so a
//! small shell wrapper can adapt any electronic-structure code. A
//! deterministic mock backend (the screening surrogate, made size-extensive)
//! lets the whole pipeline run hermetically. Calculation failures are data,
//! not errors: a non-converged or crashed job yields a recorded
//! `converged = false` result and never aborts the workflow.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crate::screening::surrogate_energy_per_atom;
use crate::structure::{parse_poscar, write_poscar, Crystal};
use crate::util::{read_tsv_pairs, tail_of_file, wait_with_timeout, CommandOutcome, TsvError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum CalcKind {
    ExternalCommand,
    Mock,
}

/// Which worker pool a job occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ResourceClass {
    Cpu,
    Accelerator,
}

impl ResourceClass {
    pub fn name(&self) -> &'static str {
        match self {
            ResourceClass::Cpu => "cpu",
            ResourceClass::Accelerator => "accelerator",
        }
    }
}

/// One calculation to run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalcJobSpec {
    pub structure_id: String,
    pub structure: Crystal,
    pub kind: CalcKind,
    /// Program plus arguments; required for [`CalcKind::ExternalCommand`].
    #[serde(default)]
    pub command: Vec<String>,
    /// Wall-clock limit in seconds.
    pub time_limit: u64,
    pub resource_class: ResourceClass,
    /// Artificial latency for the mock backend, in milliseconds. Useful for
    /// exercising scheduling and interruption behavior.
    #[serde(default)]
    pub mock_delay_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum CalcSpecError {
    #[error("external calculation requires a command")]
    MissingCommand,
    #[error("time_limit must be positive")]
    ZeroTimeLimit,
}

impl CalcJobSpec {
    pub fn validate(&self) -> Result<(), CalcSpecError> {
        if self.kind == CalcKind::ExternalCommand && self.command.is_empty() {
            return Err(CalcSpecError::MissingCommand);
        }
        if self.time_limit == 0 {
            return Err(CalcSpecError::ZeroTimeLimit);
        }
        Ok(())
    }
}

/// Outcome of one calculation. When `converged` is false, `failure` states
/// the cause if the job failed outright (as opposed to reporting
/// `converged\tfalse` itself).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalcResult {
    pub structure_id: String,
    /// Total energy of the whole cell, in eV. NaN when the job failed.
    pub total_energy: f64,
    pub final_structure: Crystal,
    pub converged: bool,
    pub wall_time_s: f64,
    #[serde(default)]
    pub failure: Option<String>,
}

/// Runs one calculation in `job_dir`, creating it if needed.
///
/// External jobs get a fresh `POSCAR`, the command runs with the job
/// directory as working directory (stdout/stderr captured to log files
/// there), and `result.tsv` is parsed afterwards: `key\tvalue` lines with
/// required key `energy` (eV) and optional `converged` (`true`/`false`,
/// default true). A `CONTCAR` file, if present, supplies the final
/// structure; otherwise the final structure is the input. The mock backend
/// reports `natoms x` the builtin surrogate energy per atom.
pub fn run_calculation(job: &CalcJobSpec, job_dir: &Path) -> CalcResult {
    let start = Instant::now();
    let fail = |cause: String, start: Instant| CalcResult {
        structure_id: job.structure_id.clone(),
        total_energy: f64::NAN,
        final_structure: job.structure.clone(),
        converged: false,
        wall_time_s: start.elapsed().as_secs_f64(),
        failure: Some(cause),
    };

    if let Err(e) = job.validate() {
        return fail(e.to_string(), start);
    }

    match job.kind {
        CalcKind::Mock => {
            if job.mock_delay_ms > 0 {
                std::thread::sleep(Duration::from_millis(job.mock_delay_ms));
            }
            let natoms = job.structure.natoms() as f64;
            CalcResult {
                structure_id: job.structure_id.clone(),
                total_energy: natoms * surrogate_energy_per_atom(&job.structure),
                final_structure: job.structure.clone(),
                converged: true,
                wall_time_s: start.elapsed().as_secs_f64(),
                failure: None,
            }
        }
        CalcKind::ExternalCommand => match run_external(job, job_dir, start) {
            Ok(result) => result,
            Err(cause) => fail(cause, start),
        },
    }
}

fn run_external(job: &CalcJobSpec, job_dir: &Path, start: Instant) -> Result<CalcResult, String> {
    std::fs::create_dir_all(job_dir)
        .map_err(|e| format!("cannot create job directory {}: {e}", job_dir.display()))?;
    let poscar = job_dir.join("POSCAR");
    std::fs::write(&poscar, write_poscar(&job.structure))
        .map_err(|e| format!("cannot write {}: {e}", poscar.display()))?;

    let stderr_path = job_dir.join("stderr.log");
    let stdout = std::fs::File::create(job_dir.join("stdout.log"))
        .map_err(|e| format!("cannot create stdout.log: {e}"))?;
    let stderr = std::fs::File::create(&stderr_path)
        .map_err(|e| format!("cannot create stderr.log: {e}"))?;
    let child = Command::new(&job.command[0])
        .args(&job.command[1..])
        .current_dir(job_dir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .spawn()
        .map_err(|e| format!("cannot launch {:?}: {e}", job.command[0]))?;

    match wait_with_timeout(child, Duration::from_secs(job.time_limit))
        .map_err(|e| format!("waiting for calculation: {e}"))?
    {
        CommandOutcome::Exited(status) if status.success() => {}
        CommandOutcome::Exited(status) => {
            let tail = tail_of_file(&stderr_path, 2048);
            let detail = if tail.is_empty() {
                String::new()
            } else {
                format!("; stderr: {tail}")
            };
            return Err(format!("calculation exited with {status}{detail}"));
        }
        CommandOutcome::TimedOut => {
            return Err(format!("calculation killed after {} s time limit", job.time_limit));
        }
    }

    let tsv_path = job_dir.join("result.tsv");
    let rows = read_tsv_pairs(&tsv_path).map_err(|e| match e {
        TsvError::Io(err) => format!("cannot read {}: {err}", tsv_path.display()),
        TsvError::BadLine { line, reason } => {
            format!("{} line {line}: {reason}", tsv_path.display())
        }
    })?;

    let mut energy: Option<f64> = None;
    let mut converged = true;
    for (line, key, value) in &rows {
        match key.as_str() {
            "energy" => {
                let v: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| format!("result.tsv line {line}: energy {value:?} is not a number"))?;
                if !v.is_finite() {
                    return Err(format!("result.tsv line {line}: energy must be finite"));
                }
                energy = Some(v);
            }
            "converged" => {
                converged = match value.trim().to_ascii_lowercase().as_str() {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(format!(
                            "result.tsv line {line}: converged must be true or false, got {other:?}"
                        ))
                    }
                };
            }
            _ => {} // unknown keys are permitted for forward compatibility
        }
    }
    let total_energy = energy.ok_or("result.tsv is missing the required `energy` key")?;

    let contcar = job_dir.join("CONTCAR");
    let final_structure = if contcar.exists() {
        let text = std::fs::read_to_string(&contcar)
            .map_err(|e| format!("cannot read CONTCAR: {e}"))?;
        parse_poscar(&text).map_err(|e| format!("CONTCAR: {e}"))?
    } else {
        job.structure.clone()
    };

    Ok(CalcResult {
        structure_id: job.structure_id.clone(),
        total_energy,
        final_structure,
        converged,
        wall_time_s: start.elapsed().as_secs_f64(),
        failure: None,
    })
}
