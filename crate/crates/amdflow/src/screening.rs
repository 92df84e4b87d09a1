//! Stage 2 — formation-energy screening.
//!
//! Every candidate gets a predicted formation energy from either the builtin
//! surrogate (a deterministic pair potential with hash-derived parameters, so
//! the full pipeline runs hermetically) or an external command speaking a
//! simple files-in/files-out protocol. Low-energy candidates are selected by
//! threshold and/or top-k rank.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use crate::hashing::stable_param;
use crate::structure::{write_poscar, Crystal, Element};
use crate::util::{read_tsv_pairs, wait_with_timeout, CommandOutcome};

/// Interaction cutoff for the builtin surrogate, in angstroms.
pub const SURROGATE_CUTOFF: f64 = 6.0;

/// Default wall-clock limit for one external predictor invocation.
pub const DEFAULT_PREDICTOR_TIMEOUT: Duration = Duration::from_secs(3600);

#[derive(Debug, thiserror::Error)]
pub enum ScreenError {
    #[error("prediction batch is empty")]
    EmptyBatch,
    #[error("external predictor requires a command")]
    MissingCommand,
    #[error("batch_size must be positive")]
    ZeroBatchSize,
    #[error("at least one of threshold_ef and top_k must be set")]
    NoSelectionRule,
    #[error("top_k must be positive when set")]
    ZeroTopK,
    #[error("threshold_ef must be finite")]
    NonFiniteThreshold,
    #[error("predictor I/O failure at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to launch predictor {command:?}: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error("predictor exited with {status} for batch [{}]{stderr}", ids_brief(.ids))]
    NonzeroExit {
        status: String,
        ids: Vec<String>,
        stderr: String,
    },
    #[error("predictor timed out after {seconds} s for batch [{}]", ids_brief(.ids))]
    Timeout { seconds: u64, ids: Vec<String> },
    #[error("predictor output {path} line {line}: {reason}")]
    BadOutputLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("predictor returned no energy for [{}]", ids_brief(.ids))]
    MissingIds { ids: Vec<String> },
    #[error("predictor returned energies for unknown ids [{}]", ids_brief(.ids))]
    UnknownIds { ids: Vec<String> },
    #[error("predictor returned duplicate energies for [{}]", ids_brief(.ids))]
    DuplicateIds { ids: Vec<String> },
    #[error("predictor returned a non-finite energy for [{}]", ids_brief(.ids))]
    NonFiniteEnergy { ids: Vec<String> },
}

fn ids_brief(ids: &[String]) -> String {
    const SHOW: usize = 5;
    let mut s = ids.iter().take(SHOW).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOW {
        s.push_str(&format!(", +{} more", ids.len() - SHOW));
    }
    s
}

/// One predicted formation energy, in eV/atom.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnergyPrediction {
    pub structure_id: String,
    pub predicted_ef: f64,
    pub predictor_name: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum PredictorKind {
    BuiltinSurrogate,
    ExternalCommand,
}

/// How to predict and how to select.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    /// Program plus arguments; required for [`PredictorKind::ExternalCommand`].
    pub command: Vec<String>,
    pub batch_size: usize,
    /// Keep candidates with predicted formation energy at or below this.
    pub threshold_ef: Option<f64>,
    /// Keep only the k lowest-energy candidates.
    pub top_k: Option<usize>,
    pub timeout: Duration,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            kind: PredictorKind::BuiltinSurrogate,
            command: Vec::new(),
            batch_size: 64,
            threshold_ef: Some(0.0),
            top_k: None,
            timeout: DEFAULT_PREDICTOR_TIMEOUT,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), ScreenError> {
        if self.kind == PredictorKind::ExternalCommand && self.command.is_empty() {
            return Err(ScreenError::MissingCommand);
        }
        if self.batch_size == 0 {
            return Err(ScreenError::ZeroBatchSize);
        }
        if self.threshold_ef.is_none() && self.top_k.is_none() {
            return Err(ScreenError::NoSelectionRule);
        }
        if let Some(t) = self.threshold_ef {
            if !t.is_finite() {
                return Err(ScreenError::NonFiniteThreshold);
            }
        }
        if self.top_k == Some(0) {
            return Err(ScreenError::ZeroTopK);
        }
        Ok(())
    }
}

struct PairPotential {
    a: f64,
    b: f64,
    r0: f64,
}

impl PairPotential {
    fn for_pair(e1: Element, e2: Element) -> PairPotential {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let (s1, s2) = (lo.symbol(), hi.symbol());
        PairPotential {
            a: stable_param(&format!("A:{s1}:{s2}"), 0.5, 2.0),
            b: stable_param(&format!("B:{s1}:{s2}"), 1.0, 4.0),
            r0: stable_param(&format!("r0:{s1}:{s2}"), 1.5, 3.0),
        }
    }

    fn eval(&self, d: f64) -> f64 {
        -self.a * (-d / self.r0).exp() + self.b * (-2.0 * d / self.r0).exp()
    }
}

/// Per-element reference energy used to shift the surrogate, in eV/atom.
pub fn surrogate_reference_energy(e: Element) -> f64 {
    stable_param(&format!("ref:{}", e.symbol()), -1.0, 1.0)
}

/// Deterministic surrogate formation energy, eV/atom.
///
/// Sums a hash-parameterized Morse-like pair potential over every unordered
/// pair of sites and periodic images with separation in `(0, 6]` angstroms,
/// normalizes per atom, and shifts by the mean per-element reference energy.
/// Depends only on interatomic distances and element pairs, so it is
/// invariant under rigid translation and site reordering.
pub fn surrogate_energy_per_atom(c: &Crystal) -> f64 {
    let lat = c.lattice();
    let sites = c.sites();
    let n = sites.len() as f64;

    let mut potentials: HashMap<(Element, Element), PairPotential> = HashMap::new();
    let species = c.species();
    for &e1 in &species {
        for &e2 in &species {
            potentials
                .entry((e1, e2))
                .or_insert_with(|| PairPotential::for_pair(e1, e2));
        }
    }

    let mut bound = [0i64; 3];
    for (k, b) in bound.iter_mut().enumerate() {
        *b = (SURROGATE_CUTOFF / lat.perpendicular_width(k)).ceil() as i64 + 1;
    }

    let mut pair_sum = 0.0;
    for si in sites {
        for sj in sites {
            let pot = &potentials[&(si.element, sj.element)];
            let df = [
                sj.frac[0] - si.frac[0],
                sj.frac[1] - si.frac[1],
                sj.frac[2] - si.frac[2],
            ];
            for a in -bound[0]..=bound[0] {
                for b in -bound[1]..=bound[1] {
                    for cc in -bound[2]..=bound[2] {
                        let v =
                            lat.to_cartesian([df[0] + a as f64, df[1] + b as f64, df[2] + cc as f64]);
                        let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        if d > 0.0 && d <= SURROGATE_CUTOFF {
                            pair_sum += pot.eval(d);
                        }
                    }
                }
            }
        }
    }

    let e_ref: f64 = sites
        .iter()
        .map(|s| surrogate_reference_energy(s.element))
        .sum::<f64>()
        / n;
    // the ordered double loop counts each interaction twice
    0.5 * pair_sum / n + e_ref
}

/// Predicts one formation energy per `(id, structure)` item, order-aligned
/// with the input.
pub fn predict_batch(
    items: &[(String, Crystal)],
    cfg: &PredictorConfig,
) -> Result<Vec<EnergyPrediction>, ScreenError> {
    if items.is_empty() {
        return Err(ScreenError::EmptyBatch);
    }
    cfg.validate()?;
    match cfg.kind {
        PredictorKind::BuiltinSurrogate => Ok(items
            .iter()
            .map(|(id, c)| EnergyPrediction {
                structure_id: id.clone(),
                predicted_ef: surrogate_energy_per_atom(c),
                predictor_name: "builtin-surrogate".to_string(),
            })
            .collect()),
        PredictorKind::ExternalCommand => {
            let scratch = std::env::temp_dir().join(format!(
                "amdflow-screen-{}-{:x}",
                std::process::id(),
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_nanos())
                    .unwrap_or(0)
            ));
            let result = run_external_predictor(&scratch, items, cfg);
            if result.is_ok() {
                let _ = std::fs::remove_dir_all(&scratch);
            } else {
                log::warn!("predictor batch directory kept for inspection: {}", scratch.display());
            }
            result
        }
    }
}

/// Runs the external predictor protocol in `dir`.
///
/// Protocol: `dir/input/<id>.vasp` files are written; the command is invoked
/// with `dir` appended as its final argument and `dir` as working directory;
/// it must write `dir/output/energies.tsv` containing one `<id>\t<ef>` line
/// per input structure and exit 0. Stdout/stderr are captured to
/// `stdout.log`/`stderr.log` inside `dir`.
pub fn run_external_predictor(
    dir: &Path,
    items: &[(String, Crystal)],
    cfg: &PredictorConfig,
) -> Result<Vec<EnergyPrediction>, ScreenError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| ScreenError::Io { path, source }
    };
    let ids: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();

    let input = dir.join("input");
    std::fs::create_dir_all(&input).map_err(io_err(&input))?;
    let output = dir.join("output");
    std::fs::create_dir_all(&output).map_err(io_err(&output))?;
    for (id, c) in items {
        let path = input.join(format!("{id}.vasp"));
        std::fs::write(&path, write_poscar(c)).map_err(io_err(&path))?;
    }

    let stdout_path = dir.join("stdout.log");
    let stderr_path = dir.join("stderr.log");
    let stdout = std::fs::File::create(&stdout_path).map_err(io_err(&stdout_path))?;
    let stderr = std::fs::File::create(&stderr_path).map_err(io_err(&stderr_path))?;
    let mut cmd = Command::new(&cfg.command[0]);
    cmd.args(&cfg.command[1..])
        .arg(dir)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr);
    let child = cmd.spawn().map_err(|source| ScreenError::Spawn {
        command: cfg.command[0].clone(),
        source,
    })?;

    match wait_with_timeout(child, cfg.timeout).map_err(io_err(dir))? {
        CommandOutcome::Exited(status) if status.success() => {}
        CommandOutcome::Exited(status) => {
            let tail = crate::util::tail_of_file(&stderr_path, 2048);
            let stderr = if tail.is_empty() {
                String::new()
            } else {
                format!("; stderr: {tail}")
            };
            return Err(ScreenError::NonzeroExit {
                status: status.to_string(),
                ids,
                stderr,
            });
        }
        CommandOutcome::TimedOut => {
            return Err(ScreenError::Timeout {
                seconds: cfg.timeout.as_secs(),
                ids,
            });
        }
    }

    let tsv = output.join("energies.tsv");
    let rows = read_tsv_pairs(&tsv).map_err(|e| match e {
        crate::util::TsvError::Io(source) => ScreenError::Io {
            path: tsv.clone(),
            source,
        },
        crate::util::TsvError::BadLine { line, reason } => ScreenError::BadOutputLine {
            path: tsv.clone(),
            line,
            reason,
        },
    })?;

    let mut by_id: HashMap<String, f64> = HashMap::new();
    let mut duplicates = Vec::new();
    let mut non_finite = Vec::new();
    for (line_no, id, value) in &rows {
        let ef: f64 = value.trim().parse().map_err(|_| ScreenError::BadOutputLine {
            path: tsv.clone(),
            line: *line_no,
            reason: format!("energy {value:?} is not a number"),
        })?;
        if !ef.is_finite() {
            non_finite.push(id.clone());
        }
        if by_id.insert(id.clone(), ef).is_some() {
            duplicates.push(id.clone());
        }
    }
    if !duplicates.is_empty() {
        return Err(ScreenError::DuplicateIds { ids: duplicates });
    }
    if !non_finite.is_empty() {
        return Err(ScreenError::NonFiniteEnergy { ids: non_finite });
    }
    let known: HashSet<&String> = ids.iter().collect();
    let unknown: Vec<String> = by_id.keys().filter(|k| !known.contains(k)).cloned().collect();
    if !unknown.is_empty() {
        let mut unknown = unknown;
        unknown.sort();
        return Err(ScreenError::UnknownIds { ids: unknown });
    }
    let missing: Vec<String> = ids.iter().filter(|id| !by_id.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(ScreenError::MissingIds { ids: missing });
    }

    Ok(ids
        .into_iter()
        .map(|id| {
            let ef = by_id[&id];
            EnergyPrediction {
                structure_id: id,
                predicted_ef: ef,
                predictor_name: cfg.command.join(" "),
            }
        })
        .collect())
}

/// Selects promising candidate ids: those at or below `threshold_ef`,
/// intersected with the `top_k` lowest when set. Result is sorted by
/// predicted energy ascending, ties by id, and is duplicate-free.
pub fn select_candidates(preds: &[EnergyPrediction], cfg: &PredictorConfig) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut kept: Vec<&EnergyPrediction> = preds
        .iter()
        .filter(|p| seen.insert(p.structure_id.clone()))
        .filter(|p| match cfg.threshold_ef {
            Some(t) => p.predicted_ef <= t,
            None => true,
        })
        .collect();
    kept.sort_by(|a, b| {
        a.predicted_ef
            .total_cmp(&b.predicted_ef)
            .then_with(|| a.structure_id.cmp(&b.structure_id))
    });
    if let Some(k) = cfg.top_k {
        kept.truncate(k);
    }
    kept.into_iter().map(|p| p.structure_id.clone()).collect()
}
