//! Run configuration: a single TOML file describing one discovery run.
//!
//! Loading resolves all paths against the config file's directory and
//! validates every field, collecting *all* problems instead of
//! stopping at the first, so a user fixes their file in one pass. The
//! resolved form can be re-serialized as a snapshot; because paths are
//! absolutized first, the snapshot keeps working no matter where a
//! later `resume` is invoked from.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::calc::{CalcKind, ResourceClass};
use crate::engine::PoolSpec;
use crate::screening::{PredictorConfig, PredictorKind};
use crate::similarity::{FingerprintParams, DEFAULT_DEDUP_THRESHOLD};
use crate::structure::Element;

/// Default promotion cutoff above the hull, in eV/atom.
pub const DEFAULT_E_CUT_PROMOTE: f64 = 0.05;
/// Default cap on generated candidates.
pub const DEFAULT_MAX_CANDIDATES: usize = 100_000;

/// One field-level problem found while validating a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration:\n{}", .issues.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid { issues: Vec<ConfigIssue> },
}

fn default_batch_size() -> usize {
    64
}
fn default_timeout_s() -> u64 {
    3600
}
fn default_threshold_ef() -> Option<f64> {
    Some(0.0)
}
fn default_time_limit_s() -> u64 {
    3600
}
fn default_class() -> String {
    "cpu".to_string()
}
fn default_dedup_threshold() -> f64 {
    DEFAULT_DEDUP_THRESHOLD
}
fn default_e_cut() -> f64 {
    DEFAULT_E_CUT_PROMOTE
}
fn default_max_candidates() -> usize {
    DEFAULT_MAX_CANDIDATES
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPredictor {
    kind: String,
    #[serde(default)]
    command: Vec<String>,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default = "default_threshold_ef")]
    threshold_ef: Option<f64>,
    #[serde(default)]
    top_k: Option<usize>,
    #[serde(default = "default_timeout_s")]
    timeout_s: u64,
}

impl Default for RawPredictor {
    fn default() -> Self {
        RawPredictor {
            kind: "builtin".to_string(),
            command: Vec::new(),
            batch_size: default_batch_size(),
            threshold_ef: default_threshold_ef(),
            top_k: None,
            timeout_s: default_timeout_s(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCalculator {
    kind: String,
    #[serde(default)]
    command: Vec<String>,
    #[serde(default = "default_time_limit_s")]
    time_limit_s: u64,
    #[serde(default = "default_class")]
    resource_class: String,
    #[serde(default)]
    mock_delay_ms: u64,
}

impl Default for RawCalculator {
    fn default() -> Self {
        RawCalculator {
            kind: "mock".to_string(),
            command: Vec::new(),
            time_limit_s: default_time_limit_s(),
            resource_class: default_class(),
            mock_delay_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFingerprint {
    cutoff: f64,
    bin_width: f64,
    sigma: f64,
}

impl Default for RawFingerprint {
    fn default() -> Self {
        let p = FingerprintParams::default();
        RawFingerprint {
            cutoff: p.cutoff,
            bin_width: p.bin_width,
            sigma: p.smearing_sigma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPool {
    name: String,
    class: String,
    size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: Vec<String>,
    templates_dir: String,
    work_dir: String,
    #[serde(default)]
    predictor: RawPredictor,
    #[serde(default)]
    calculator: RawCalculator,
    #[serde(default)]
    fingerprint: RawFingerprint,
    #[serde(default = "default_dedup_threshold")]
    dedup_threshold: f64,
    #[serde(default = "default_e_cut")]
    e_cut_promote: f64,
    pools: Vec<RawPool>,
    #[serde(default = "default_max_candidates")]
    max_candidates: usize,
}

/// Calculator defaults applied to every job of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct CalcSettings {
    pub kind: CalcKind,
    pub command: Vec<String>,
    pub time_limit: u64,
    pub resource_class: ResourceClass,
    pub mock_delay_ms: u64,
}

/// A fully validated run configuration with absolute paths.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: Vec<Element>,
    pub templates_dir: PathBuf,
    pub work_dir: PathBuf,
    pub predictor: PredictorConfig,
    pub calculator: CalcSettings,
    pub fingerprint: FingerprintParams,
    pub dedup_threshold: f64,
    pub e_cut_promote: f64,
    pub pools: Vec<PoolSpec>,
    pub max_candidates: usize,
    snapshot: String,
}

impl RunConfig {
    /// Loads and validates a config file. Relative paths resolve
    /// against the file's own directory.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let raw: RawConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        // the base must itself be absolute, or the snapshot would
        // store paths that only resolve from the invocation directory
        let base = if base.is_absolute() {
            base
        } else {
            std::env::current_dir()
                .map_err(|source| ConfigError::Io {
                    path: base.clone(),
                    source,
                })?
                .join(base)
        };
        RunConfig::from_raw(raw, &base)
    }

    fn from_raw(mut raw: RawConfig, base: &Path) -> Result<RunConfig, ConfigError> {
        let mut issues: Vec<ConfigIssue> = Vec::new();
        let mut issue = |field: &str, message: String| {
            issues.push(ConfigIssue {
                field: field.to_string(),
                message,
            })
        };

        // -- system ---------------------------------------------------
        let mut system: Vec<Element> = Vec::new();
        if !(2..=6).contains(&raw.system.len()) {
            issue(
                "system",
                format!(
                    "must list between 2 and 6 elements, got {}",
                    raw.system.len()
                ),
            );
        }
        for symbol in &raw.system {
            match Element::from_symbol(symbol) {
                Some(e) if system.contains(&e) => {
                    issue("system", format!("element '{symbol}' listed twice"))
                }
                Some(e) => system.push(e),
                None => issue("system", format!("unknown element symbol '{symbol}'")),
            }
        }

        // -- paths ----------------------------------------------------
        let templates_dir = absolutize(base, &raw.templates_dir);
        if !templates_dir.is_dir() {
            issue(
                "templates_dir",
                format!("'{}' does not exist or is not a directory", templates_dir.display()),
            );
        }
        if raw.work_dir.trim().is_empty() {
            issue("work_dir", "must not be empty".to_string());
        }
        let work_dir = absolutize(base, &raw.work_dir);
        raw.templates_dir = templates_dir.display().to_string();
        raw.work_dir = work_dir.display().to_string();

        // -- predictor ------------------------------------------------
        let predictor_kind = match raw.predictor.kind.as_str() {
            "builtin" => Some(PredictorKind::BuiltinSurrogate),
            "command" => Some(PredictorKind::ExternalCommand),
            other => {
                issue(
                    "predictor.kind",
                    format!("must be 'builtin' or 'command', got '{other}'"),
                );
                None
            }
        };
        if predictor_kind == Some(PredictorKind::ExternalCommand) && raw.predictor.command.is_empty()
        {
            issue(
                "predictor.command",
                "required when predictor.kind = 'command'".to_string(),
            );
        }
        if raw.predictor.batch_size == 0 {
            issue("predictor.batch_size", "must be at least 1".to_string());
        }
        if raw.predictor.timeout_s == 0 {
            issue("predictor.timeout_s", "must be at least 1".to_string());
        }
        if let Some(t) = raw.predictor.threshold_ef {
            if !t.is_finite() {
                issue("predictor.threshold_ef", "must be finite".to_string());
            }
        }
        if raw.predictor.top_k == Some(0) {
            issue("predictor.top_k", "must be at least 1 when set".to_string());
        }
        if raw.predictor.threshold_ef.is_none() && raw.predictor.top_k.is_none() {
            issue(
                "predictor",
                "needs a selection rule: set threshold_ef and/or top_k".to_string(),
            );
        }

        // -- calculator -----------------------------------------------
        let calc_kind = match raw.calculator.kind.as_str() {
            "mock" => Some(CalcKind::Mock),
            "command" => Some(CalcKind::ExternalCommand),
            other => {
                issue(
                    "calculator.kind",
                    format!("must be 'mock' or 'command', got '{other}'"),
                );
                None
            }
        };
        if calc_kind == Some(CalcKind::ExternalCommand) && raw.calculator.command.is_empty() {
            issue(
                "calculator.command",
                "required when calculator.kind = 'command'".to_string(),
            );
        }
        if raw.calculator.time_limit_s == 0 {
            issue("calculator.time_limit_s", "must be at least 1".to_string());
        }
        let calc_class = match raw.calculator.resource_class.as_str() {
            "cpu" => Some(ResourceClass::Cpu),
            "accelerator" => Some(ResourceClass::Accelerator),
            other => {
                issue(
                    "calculator.resource_class",
                    format!("must be 'cpu' or 'accelerator', got '{other}'"),
                );
                None
            }
        };

        // -- fingerprint / thresholds ---------------------------------
        let fingerprint = FingerprintParams {
            cutoff: raw.fingerprint.cutoff,
            bin_width: raw.fingerprint.bin_width,
            smearing_sigma: raw.fingerprint.sigma,
        };
        if let Err(e) = fingerprint.validate() {
            issue("fingerprint", e.to_string());
        }
        if !(raw.dedup_threshold > 0.0 && raw.dedup_threshold <= 1.0) {
            issue(
                "dedup_threshold",
                format!("must be in (0, 1], got {}", raw.dedup_threshold),
            );
        }
        if !raw.e_cut_promote.is_finite() {
            issue("e_cut_promote", "must be finite".to_string());
        }
        if raw.max_candidates == 0 {
            issue("max_candidates", "must be at least 1".to_string());
        }

        // -- pools ----------------------------------------------------
        let mut pools: Vec<PoolSpec> = Vec::new();
        if raw.pools.is_empty() {
            issue("pools", "at least one worker pool is required".to_string());
        }
        for (i, pool) in raw.pools.iter().enumerate() {
            let field = format!("pools[{i}]");
            if pool.name.trim().is_empty() {
                issue(&field, "pool name must not be empty".to_string());
            }
            if pools.iter().any(|p| p.name == pool.name) {
                issue(&field, format!("duplicate pool name '{}'", pool.name));
            }
            match pool.class.as_str() {
                "cpu" => pools.push(PoolSpec {
                    name: pool.name.clone(),
                    resource_class: ResourceClass::Cpu,
                    size: pool.size,
                }),
                "accelerator" => pools.push(PoolSpec {
                    name: pool.name.clone(),
                    resource_class: ResourceClass::Accelerator,
                    size: pool.size,
                }),
                other => issue(
                    &field,
                    format!("class must be 'cpu' or 'accelerator', got '{other}'"),
                ),
            }
        }
        if !pools.iter().any(|p| p.resource_class == ResourceClass::Cpu) {
            issue(
                "pools",
                "a pool with class 'cpu' is required (generation, screening, \
                 filtering, and post-processing run on it)"
                    .to_string(),
            );
        }
        if let Some(class) = calc_class {
            if !pools.iter().any(|p| p.resource_class == class) {
                issue(
                    "pools",
                    format!(
                        "no pool provides class '{}' required by the calculator",
                        class.name()
                    ),
                );
            }
        }

        if !issues.is_empty() {
            return Err(ConfigError::Invalid { issues });
        }

        let snapshot =
            toml::to_string_pretty(&raw).expect("validated raw config always serializes");
        Ok(RunConfig {
            system,
            templates_dir,
            work_dir,
            predictor: PredictorConfig {
                kind: predictor_kind.expect("validated"),
                command: raw.predictor.command,
                batch_size: raw.predictor.batch_size,
                threshold_ef: raw.predictor.threshold_ef,
                top_k: raw.predictor.top_k,
                timeout: Duration::from_secs(raw.predictor.timeout_s),
            },
            calculator: CalcSettings {
                kind: calc_kind.expect("validated"),
                command: raw.calculator.command,
                time_limit: raw.calculator.time_limit_s,
                resource_class: calc_class.expect("validated"),
                mock_delay_ms: raw.calculator.mock_delay_ms,
            },
            fingerprint,
            dedup_threshold: raw.dedup_threshold,
            e_cut_promote: raw.e_cut_promote,
            pools,
            max_candidates: raw.max_candidates,
            snapshot,
        })
    }

    /// The resolved config as TOML, suitable for the work-dir snapshot.
    pub fn snapshot_toml(&self) -> &str {
        &self.snapshot
    }
}

fn absolutize(base: &Path, raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}
