//! The reference discovery pipeline: generate → screen → filter →
//! calc → postprocess, wired onto the [`crate::engine`] scheduler.
//!
//! A driver thread submits tasks progressively (each stage's fan-out
//! depends on the previous stage's outputs) while the main thread runs
//! the engine; a third thread polls `pools.conf` so operators can grow
//! or shrink worker pools mid-run. All stage work happens inside task
//! executors and lands in content-addressed output directories; the
//! driver then mirrors the user-facing artifacts (`candidates/`,
//! `filtered/ids.txt`, `hull.tsv`, `phase_diagram.svg`, `promoted/`)
//! into the work directory root.
//!
//! Because every payload is derived deterministically from the config
//! snapshot, a resumed process rebuilds the exact same task keys and
//! the engine's ledger replay decides what is left to do.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::calc::{run_calculation, CalcJobSpec, CalcResult};
use crate::config::{ConfigError, RunConfig};
use crate::engine::{
    Engine, EngineError, ExecCtx, RunSummary, Stage, TaskExecutor, TaskKey, TaskOutcome, TaskSpec,
    DEFAULT_MAX_ATTEMPTS,
};
use crate::hashing;
use crate::hull::{build_hull, export_diagram, promote_candidates, PhaseEntry, ReferenceSet};
use crate::screening::{
    predict_batch, run_external_predictor, select_candidates, EnergyPrediction, PredictorKind,
};
use crate::similarity::{dedup, DedupItem};
use crate::structure::{parse_poscar, write_poscar, Crystal, Element, Lattice, Site};
use crate::substitute::{enumerate_substitutions, ingest_templates, SubstitutionSpec};

/// How often `pools.conf` is re-read during a run.
pub const POOLS_CONF_POLL: Duration = Duration::from_secs(2);

/// Id prefix of the synthesized elemental reference calculations.
pub const REF_ID_PREFIX: &str = "ref-";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} already contains a run ledger; use resume instead of run")]
    WorkDirInUse { path: PathBuf },
    #[error("no config snapshot at {path}; was a run started here?")]
    SnapshotMissing { path: PathBuf },
    #[error("pipeline driver failed: {0}")]
    Driver(String),
    #[error("no converged calculation results found")]
    NoResults,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Result of a full `run`/`resume` invocation.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub summary: RunSummary,
    /// True iff the postprocess stage completed, i.e. the hull and
    /// its exports exist and are current.
    pub postprocess_ok: bool,
    /// Failure cause when `postprocess_ok` is false.
    pub message: Option<String>,
    /// Promoted candidate ids, ascending energy above hull.
    pub promoted: Vec<String>,
}

/// Result of a `report` invocation.
#[derive(Debug, Clone)]
pub struct ReportOutcome {
    /// Calculation results found in the work directory.
    pub total_results: usize,
    /// How many of them were converged candidate results.
    pub converged: usize,
    pub promoted: Vec<String>,
    pub svg_written: bool,
}

// ---------------------------------------------------------------------
// Task payloads. Serialized with serde_json (stable field order), they
// define the content-addressed task keys, so every field that changes
// a stage's behavior must appear here, directly or as a digest.
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GeneratePayload {
    system: Vec<String>,
    templates_digest: String,
    max_candidates: usize,
}

#[derive(Serialize, Deserialize)]
struct ScreenPayload {
    generate: TaskKey,
    batch: usize,
    ids: Vec<String>,
    predictor_digest: String,
}

#[derive(Serialize, Deserialize)]
struct FilterPayload {
    generate: TaskKey,
    screens: Vec<TaskKey>,
    predictor_digest: String,
    fingerprint: [f64; 3],
    dedup_threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct CalcPayload {
    id: String,
    /// Filter task holding the input structure; absent for synthesized
    /// elemental references.
    source: Option<TaskKey>,
    /// Element symbol for elemental reference jobs.
    element: Option<String>,
    calculator_digest: String,
}

#[derive(Serialize, Deserialize)]
struct PostPayload {
    system: Vec<String>,
    e_cut_promote: f64,
    references_digest: String,
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("payloads always serialize")
}

fn predictor_digest(cfg: &RunConfig) -> String {
    hashing::sha256_hex(to_json(&cfg.predictor).as_bytes())
}

fn calculator_digest(cfg: &RunConfig) -> String {
    let c = &cfg.calculator;
    let blob = serde_json::json!({
        "kind": format!("{:?}", c.kind),
        "command": c.command,
        "time_limit": c.time_limit,
        "resource_class": c.resource_class.name(),
        "mock_delay_ms": c.mock_delay_ms,
    });
    hashing::sha256_hex(blob.to_string().as_bytes())
}

/// Digest over template file names and contents, so edited templates
/// re-run generation on resume instead of reusing stale candidates.
fn templates_digest(dir: &Path) -> Result<String, PipelineError> {
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    let mut bytes: Vec<u8> = Vec::new();
    for name in names {
        let path = dir.join(&name);
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&std::fs::read(&path).map_err(io_err(&path))?);
        bytes.push(0);
    }
    Ok(hashing::sha256_hex(&bytes))
}

fn references_path(cfg: &RunConfig) -> PathBuf {
    cfg.templates_dir.join("references.tsv")
}

fn references_digest(cfg: &RunConfig) -> Result<String, PipelineError> {
    let path = references_path(cfg);
    if path.is_file() {
        Ok(hashing::sha256_hex(&std::fs::read(&path).map_err(io_err(&path))?))
    } else {
        Ok("absent".to_string())
    }
}

fn candidate_id(i: usize) -> String {
    format!("c{i:06}")
}

// ---------------------------------------------------------------------
// Stage executors
// ---------------------------------------------------------------------

struct PipelineExecutor {
    cfg: RunConfig,
}

impl TaskExecutor for PipelineExecutor {
    fn execute(&self, spec: &TaskSpec, ctx: &ExecCtx) -> Result<(), String> {
        match spec.stage {
            Stage::Generate => self.run_generate(ctx),
            Stage::Screen => self.run_screen(spec, ctx),
            Stage::Filter => self.run_filter(spec, ctx),
            Stage::Calc => self.run_calc(spec, ctx),
            Stage::Postprocess => self.run_postprocess(spec, ctx),
        }
    }
}

impl PipelineExecutor {
    /// generate: substitute system elements into every template and
    /// write the candidate structures plus an ordered index.
    fn run_generate(&self, ctx: &ExecCtx) -> Result<(), String> {
        let report = ingest_templates(&self.cfg.templates_dir).map_err(|e| e.to_string())?;
        for warning in &report.warnings {
            log::warn!("template ingest: {warning}");
        }
        let spec = SubstitutionSpec::new(self.cfg.system.clone(), self.cfg.max_candidates, true)
            .map_err(|e| e.to_string())?;
        let set = enumerate_substitutions(&report.set, &spec).map_err(|e| e.to_string())?;
        if set.truncated {
            log::warn!(
                "candidate enumeration truncated at max_candidates = {}",
                self.cfg.max_candidates
            );
        }
        let cand_dir = ctx.staging_dir.join("candidates");
        std::fs::create_dir_all(&cand_dir).map_err(|e| e.to_string())?;
        let mut index = String::new();
        for (i, structure) in set.structures.iter().enumerate() {
            let id = candidate_id(i);
            let path = cand_dir.join(format!("{id}.vasp"));
            std::fs::write(&path, write_poscar(structure))
                .map_err(|e| format!("{}: {e}", path.display()))?;
            index.push_str(&format!("{id}\t{}\n", structure.label));
        }
        std::fs::write(ctx.staging_dir.join("index.tsv"), index).map_err(|e| e.to_string())?;
        log::info!("generated {} candidate structures", set.structures.len());
        Ok(())
    }

    /// screen: predict formation energies for one batch of candidates.
    fn run_screen(&self, spec: &TaskSpec, ctx: &ExecCtx) -> Result<(), String> {
        let payload: ScreenPayload =
            serde_json::from_str(&spec.payload).map_err(|e| format!("bad payload: {e}"))?;
        let cand_dir = ctx.outputs_of(&payload.generate).join("candidates");
        let mut items: Vec<(String, Crystal)> = Vec::with_capacity(payload.ids.len());
        for id in &payload.ids {
            let path = cand_dir.join(format!("{id}.vasp"));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            let structure =
                parse_poscar(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            items.push((id.clone(), structure));
        }
        let predictions = match self.cfg.predictor.kind {
            PredictorKind::BuiltinSurrogate => {
                predict_batch(&items, &self.cfg.predictor).map_err(|e| e.to_string())?
            }
            PredictorKind::ExternalCommand => {
                let batch_dir = ctx.staging_dir.join("predictor");
                run_external_predictor(&batch_dir, &items, &self.cfg.predictor)
                    .map_err(|e| e.to_string())?
            }
        };
        let mut out = String::new();
        for p in &predictions {
            out.push_str(&format!("{}\t{:.16e}\n", p.structure_id, p.predicted_ef));
        }
        std::fs::write(ctx.staging_dir.join("screened.tsv"), out).map_err(|e| e.to_string())?;
        Ok(())
    }

    /// filter: apply the global selection rule across all batches,
    /// then drop near-duplicates; survivors carry their structures.
    fn run_filter(&self, spec: &TaskSpec, ctx: &ExecCtx) -> Result<(), String> {
        let payload: FilterPayload =
            serde_json::from_str(&spec.payload).map_err(|e| format!("bad payload: {e}"))?;
        let mut predictions: Vec<EnergyPrediction> = Vec::new();
        for screen in &payload.screens {
            let path = ctx.outputs_of(screen).join("screened.tsv");
            let pairs = crate::util::read_tsv_pairs(&path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            for (line, id, value) in pairs {
                let ef: f64 = value.parse().map_err(|e| {
                    format!("{}:{line}: bad energy for {id}: {e}", path.display())
                })?;
                predictions.push(EnergyPrediction {
                    structure_id: id,
                    predicted_ef: ef,
                    predictor_name: String::new(),
                });
            }
        }
        let selected = select_candidates(&predictions, &self.cfg.predictor);
        log::info!(
            "selection kept {} of {} screened candidates",
            selected.len(),
            predictions.len()
        );
        let ef_by_id: HashMap<&str, f64> = predictions
            .iter()
            .map(|p| (p.structure_id.as_str(), p.predicted_ef))
            .collect();
        let cand_dir = ctx.outputs_of(&payload.generate).join("candidates");
        let mut items: Vec<DedupItem> = Vec::with_capacity(selected.len());
        for id in &selected {
            let path = cand_dir.join(format!("{id}.vasp"));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            let structure =
                parse_poscar(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            items.push(DedupItem {
                id: id.clone(),
                structure,
                predicted_ef: ef_by_id[id.as_str()],
            });
        }
        let kept = dedup(&items, &self.cfg.fingerprint, self.cfg.dedup_threshold)
            .map_err(|e| e.to_string())?;
        log::info!("near-duplicate filter kept {} of {}", kept.len(), items.len());

        let out_structs = ctx.staging_dir.join("structures");
        std::fs::create_dir_all(&out_structs).map_err(|e| e.to_string())?;
        let mut ids_txt = String::new();
        let mut energies = String::new();
        for id in &kept {
            ids_txt.push_str(id);
            ids_txt.push('\n');
            energies.push_str(&format!("{id}\t{:.16e}\n", ef_by_id[id.as_str()]));
            let src = cand_dir.join(format!("{id}.vasp"));
            let dst = out_structs.join(format!("{id}.vasp"));
            std::fs::copy(&src, &dst).map_err(|e| format!("{}: {e}", src.display()))?;
        }
        std::fs::write(ctx.staging_dir.join("ids.txt"), ids_txt).map_err(|e| e.to_string())?;
        std::fs::write(ctx.staging_dir.join("energies.tsv"), energies)
            .map_err(|e| e.to_string())?;
        Ok(())
    }

    /// calc: run one calculation (candidate or elemental reference) in
    /// its job directory and store the parsed result.
    fn run_calc(&self, spec: &TaskSpec, ctx: &ExecCtx) -> Result<(), String> {
        let payload: CalcPayload =
            serde_json::from_str(&spec.payload).map_err(|e| format!("bad payload: {e}"))?;
        let structure = match (&payload.source, &payload.element) {
            (Some(filter_key), None) => {
                let path = ctx
                    .outputs_of(filter_key)
                    .join("structures")
                    .join(format!("{}.vasp", payload.id));
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| format!("{}: {e}", path.display()))?;
                parse_poscar(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            (None, Some(symbol)) => elemental_reference(symbol)?,
            _ => return Err("calc payload needs exactly one of source/element".to_string()),
        };
        let job = CalcJobSpec {
            structure_id: payload.id.clone(),
            structure,
            kind: self.cfg.calculator.kind,
            command: self.cfg.calculator.command.clone(),
            time_limit: self.cfg.calculator.time_limit,
            resource_class: self.cfg.calculator.resource_class,
            mock_delay_ms: self.cfg.calculator.mock_delay_ms,
        };
        job.validate().map_err(|e| e.to_string())?;
        let job_dir = ctx.work_dir.join("calc").join(&payload.id);
        let result = run_calculation(&job, &job_dir);
        if let Some(cause) = &result.failure {
            log::warn!("calculation {} failed: {cause}", payload.id);
        }
        let json = serde_json::to_string(&result).map_err(|e| e.to_string())?;
        std::fs::write(ctx.staging_dir.join("result.json"), json).map_err(|e| e.to_string())
    }

    /// postprocess: collect every calc result, build the hull, export
    /// the table and diagram, and copy promoted structures.
    fn run_postprocess(&self, spec: &TaskSpec, ctx: &ExecCtx) -> Result<(), String> {
        let mut results: Vec<CalcResult> = Vec::with_capacity(spec.inputs.len());
        for key in &spec.inputs {
            let path = ctx.outputs_of(key).join("result.json");
            let text = std::fs::read_to_string(&path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            results.push(
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?,
            );
        }
        let refs_file = references_path(&self.cfg);
        let refs_file = refs_file.is_file().then_some(refs_file.as_path());
        write_hull_artifacts(&results, refs_file, self.cfg.e_cut_promote, &ctx.staging_dir)
            .map(|_| ())
    }
}

/// Single-atom cubic cell used to pin the elemental reference energy.
fn elemental_reference(symbol: &str) -> Result<Crystal, String> {
    let element = Element::from_symbol(symbol)
        .ok_or_else(|| format!("unknown element symbol '{symbol}'"))?;
    let lattice = Lattice::cubic(4.0).map_err(|e| e.to_string())?;
    Crystal::new(
        lattice,
        vec![Site {
            element,
            frac: [0.0, 0.0, 0.0],
        }],
        format!("{REF_ID_PREFIX}{symbol}"),
    )
    .map_err(|e| e.to_string())
}

/// Builds the hull from raw calc results and writes `hull.tsv`,
/// `phase_diagram.svg` (binary/ternary), `promoted.txt`, and
/// `promoted/` into `dest`. Returns (promoted ids, svg written).
fn write_hull_artifacts(
    results: &[CalcResult],
    references_tsv: Option<&Path>,
    e_cut: f64,
    dest: &Path,
) -> Result<(Vec<String>, bool), String> {
    let mut refs = ReferenceSet::new();
    let mut entries: Vec<PhaseEntry> = Vec::new();
    let mut structures: HashMap<String, Crystal> = HashMap::new();
    for result in results {
        let converged = result.converged && result.total_energy.is_finite();
        if !converged {
            continue;
        }
        let natoms = result.final_structure.natoms();
        let per_atom = result.total_energy / natoms as f64;
        if result.structure_id.starts_with(REF_ID_PREFIX) {
            let comp = result.final_structure.composition();
            let elements: Vec<Element> = comp.elements().collect();
            if elements.len() == 1 {
                refs.insert_min(elements[0], per_atom);
            } else {
                log::warn!(
                    "reference result {} is not elemental; ignored",
                    result.structure_id
                );
            }
        } else {
            entries.push(PhaseEntry::new(
                result.structure_id.clone(),
                result.final_structure.composition(),
                per_atom,
                false,
            ));
            structures.insert(result.structure_id.clone(), result.final_structure.clone());
        }
    }
    if let Some(path) = references_tsv {
        let loaded = ReferenceSet::load_tsv(path).map_err(|e| e.to_string())?;
        refs.merge_min(&loaded);
    }
    if entries.is_empty() {
        return Err("no converged calculation results to post-process".to_string());
    }
    let hull = build_hull(&entries, &refs).map_err(|e| e.to_string())?;
    let written = export_diagram(&hull, &entries, dest).map_err(|e| e.to_string())?;
    let svg_written = written
        .iter()
        .any(|p| p.file_name().is_some_and(|n| n == "phase_diagram.svg"));
    let items: Vec<(PhaseEntry, Crystal)> = entries
        .iter()
        .map(|e| (e.clone(), structures[&e.id].clone()))
        .collect();
    let promoted = promote_candidates(&items, &hull, e_cut, &dest.join("promoted"))
        .map_err(|e| e.to_string())?;
    let mut list = String::new();
    for id in &promoted {
        list.push_str(id);
        list.push('\n');
    }
    std::fs::write(dest.join("promoted.txt"), list).map_err(|e| e.to_string())?;
    Ok((promoted, svg_written))
}

// ---------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------

/// Calls `close_submissions` when dropped, so the engine's run loop
/// can terminate no matter how the driver thread exits.
struct CloseGuard(Engine);

impl Drop for CloseGuard {
    fn drop(&mut self) {
        self.0.close_submissions();
    }
}

#[derive(Debug, Default)]
struct DriveOutcome {
    postprocess_ok: bool,
    message: Option<String>,
    promoted: Vec<String>,
}

/// Submits the five-stage DAG progressively and mirrors user-facing
/// artifacts into the work directory root. Returns `Err` only for
/// infrastructure failures; stage failures are reported in the
/// outcome so the engine summary stays authoritative.
fn drive(engine: Engine, cfg: RunConfig) -> Result<DriveOutcome, String> {
    let _guard = CloseGuard(engine.clone());
    let work = cfg.work_dir.clone();

    // generate
    let gen_payload = GeneratePayload {
        system: cfg.system.iter().map(|e| e.symbol().to_string()).collect(),
        templates_digest: templates_digest(&cfg.templates_dir).map_err(|e| e.to_string())?,
        max_candidates: cfg.max_candidates,
    };
    let gen_key = engine
        .submit(
            Stage::Generate,
            crate::calc::ResourceClass::Cpu,
            to_json(&gen_payload),
            &[],
        )
        .map_err(|e| e.to_string())?;
    match engine.wait(&gen_key).map_err(|e| e.to_string())? {
        TaskOutcome::Done { .. } => {}
        TaskOutcome::Failed { error } => {
            return Ok(DriveOutcome {
                message: Some(format!("generation failed: {error}")),
                ..DriveOutcome::default()
            })
        }
        TaskOutcome::Skipped => {
            return Ok(DriveOutcome {
                message: Some("generation was skipped".to_string()),
                ..DriveOutcome::default()
            })
        }
    }
    let gen_out = engine.outputs_path(&gen_key);
    mirror_dir(&gen_out.join("candidates"), &work.join("candidates"))
        .map_err(|e| e.to_string())?;
    let index = std::fs::read_to_string(gen_out.join("index.tsv")).map_err(|e| e.to_string())?;
    let ids: Vec<String> = index
        .lines()
        .filter_map(|l| l.split('\t').next())
        .map(str::to_string)
        .collect();

    // screen (one task per batch)
    let pred_digest = predictor_digest(&cfg);
    let mut screen_keys: Vec<TaskKey> = Vec::new();
    for (batch, chunk) in ids.chunks(cfg.predictor.batch_size.max(1)).enumerate() {
        let payload = ScreenPayload {
            generate: gen_key.clone(),
            batch,
            ids: chunk.to_vec(),
            predictor_digest: pred_digest.clone(),
        };
        let key = engine
            .submit(
                Stage::Screen,
                crate::calc::ResourceClass::Cpu,
                to_json(&payload),
                std::slice::from_ref(&gen_key),
            )
            .map_err(|e| e.to_string())?;
        screen_keys.push(key);
    }
    for key in &screen_keys {
        match engine.wait(key).map_err(|e| e.to_string())? {
            TaskOutcome::Done { .. } => {}
            TaskOutcome::Failed { error } => {
                return Ok(DriveOutcome {
                    message: Some(format!("screening failed: {error}")),
                    ..DriveOutcome::default()
                })
            }
            TaskOutcome::Skipped => {
                return Ok(DriveOutcome {
                    message: Some("screening was skipped".to_string()),
                    ..DriveOutcome::default()
                })
            }
        }
    }

    // filter
    let filter_payload = FilterPayload {
        generate: gen_key.clone(),
        screens: screen_keys.clone(),
        predictor_digest: pred_digest,
        fingerprint: [
            cfg.fingerprint.cutoff,
            cfg.fingerprint.bin_width,
            cfg.fingerprint.smearing_sigma,
        ],
        dedup_threshold: cfg.dedup_threshold,
    };
    let mut filter_deps = vec![gen_key.clone()];
    filter_deps.extend(screen_keys.iter().cloned());
    let filter_key = engine
        .submit(
            Stage::Filter,
            crate::calc::ResourceClass::Cpu,
            to_json(&filter_payload),
            &filter_deps,
        )
        .map_err(|e| e.to_string())?;
    match engine.wait(&filter_key).map_err(|e| e.to_string())? {
        TaskOutcome::Done { .. } => {}
        TaskOutcome::Failed { error } => {
            return Ok(DriveOutcome {
                message: Some(format!("filtering failed: {error}")),
                ..DriveOutcome::default()
            })
        }
        TaskOutcome::Skipped => {
            return Ok(DriveOutcome {
                message: Some("filtering was skipped".to_string()),
                ..DriveOutcome::default()
            })
        }
    }
    let filter_out = engine.outputs_path(&filter_key);
    let filtered_dir = work.join("filtered");
    std::fs::create_dir_all(&filtered_dir).map_err(|e| e.to_string())?;
    std::fs::copy(filter_out.join("ids.txt"), filtered_dir.join("ids.txt"))
        .map_err(|e| e.to_string())?;
    let filtered: Vec<String> = std::fs::read_to_string(filter_out.join("ids.txt"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(str::to_string)
        .collect();
    log::info!("{} structures proceed to calculation", filtered.len());

    // calc fan-out: elemental references plus every filtered candidate
    let calc_digest = calculator_digest(&cfg);
    let mut calc_keys: Vec<TaskKey> = Vec::new();
    for element in &cfg.system {
        let payload = CalcPayload {
            id: format!("{REF_ID_PREFIX}{}", element.symbol()),
            source: None,
            element: Some(element.symbol().to_string()),
            calculator_digest: calc_digest.clone(),
        };
        let key = engine
            .submit(
                Stage::Calc,
                cfg.calculator.resource_class,
                to_json(&payload),
                &[],
            )
            .map_err(|e| e.to_string())?;
        calc_keys.push(key);
    }
    for id in &filtered {
        let payload = CalcPayload {
            id: id.clone(),
            source: Some(filter_key.clone()),
            element: None,
            calculator_digest: calc_digest.clone(),
        };
        let key = engine
            .submit(
                Stage::Calc,
                cfg.calculator.resource_class,
                to_json(&payload),
                std::slice::from_ref(&filter_key),
            )
            .map_err(|e| e.to_string())?;
        calc_keys.push(key);
    }

    // postprocess
    let post_payload = PostPayload {
        system: cfg.system.iter().map(|e| e.symbol().to_string()).collect(),
        e_cut_promote: cfg.e_cut_promote,
        references_digest: references_digest(&cfg).map_err(|e| e.to_string())?,
    };
    let post_key = engine
        .submit(
            Stage::Postprocess,
            crate::calc::ResourceClass::Cpu,
            to_json(&post_payload),
            &calc_keys,
        )
        .map_err(|e| e.to_string())?;
    let outcome = engine.wait(&post_key).map_err(|e| e.to_string())?;
    match outcome {
        TaskOutcome::Done { outputs } => {
            for name in ["hull.tsv", "promoted.txt"] {
                std::fs::copy(outputs.join(name), work.join(name))
                    .map_err(|e| format!("{name}: {e}"))?;
            }
            let svg = outputs.join("phase_diagram.svg");
            if svg.is_file() {
                std::fs::copy(&svg, work.join("phase_diagram.svg"))
                    .map_err(|e| e.to_string())?;
            }
            mirror_dir(&outputs.join("promoted"), &work.join("promoted"))
                .map_err(|e| e.to_string())?;
            let promoted: Vec<String> = std::fs::read_to_string(outputs.join("promoted.txt"))
                .map_err(|e| e.to_string())?
                .lines()
                .map(str::to_string)
                .collect();
            log::info!(
                "post-processing complete: {} structures promoted",
                promoted.len()
            );
            Ok(DriveOutcome {
                postprocess_ok: true,
                message: None,
                promoted,
            })
        }
        TaskOutcome::Failed { error } => Ok(DriveOutcome {
            message: Some(format!("post-processing failed: {error}")),
            ..DriveOutcome::default()
        }),
        TaskOutcome::Skipped => Ok(DriveOutcome {
            message: Some(
                "post-processing was skipped because calculations failed".to_string(),
            ),
            ..DriveOutcome::default()
        }),
    }
}

/// Replaces `dst` with a copy of `src`'s files (flat directories).
fn mirror_dir(src: &Path, dst: &Path) -> Result<(), PipelineError> {
    if dst.exists() {
        std::fs::remove_dir_all(dst).map_err(io_err(dst))?;
    }
    std::fs::create_dir_all(dst).map_err(io_err(dst))?;
    if !src.is_dir() {
        return Ok(());
    }
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(src).map_err(io_err(src))? {
        let entry = entry.map_err(io_err(src))?;
        if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    for name in names {
        std::fs::copy(src.join(&name), dst.join(&name)).map_err(io_err(&src.join(&name)))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------

/// Runs the full pipeline from a validated config in a fresh work
/// directory. Fails fast if the work directory already holds a ledger.
pub fn run(cfg: RunConfig) -> Result<PipelineOutcome, PipelineError> {
    let ledger = cfg.work_dir.join("ledger.jsonl");
    if ledger.is_file()
        && std::fs::metadata(&ledger).map_err(io_err(&ledger))?.len() > 0
    {
        return Err(PipelineError::WorkDirInUse {
            path: cfg.work_dir.clone(),
        });
    }
    let executor = Arc::new(PipelineExecutor { cfg: cfg.clone() });
    let engine = Engine::new(&cfg.work_dir, executor, DEFAULT_MAX_ATTEMPTS)?;
    execute(engine, cfg)
}

/// Resumes an interrupted run from the config snapshot and ledger
/// stored in `work_dir`.
pub fn resume(work_dir: &Path) -> Result<PipelineOutcome, PipelineError> {
    let cfg = load_snapshot(work_dir)?;
    let executor = Arc::new(PipelineExecutor { cfg: cfg.clone() });
    let engine = Engine::open_resume(&cfg.work_dir, executor, DEFAULT_MAX_ATTEMPTS)?;
    execute(engine, cfg)
}

fn load_snapshot(work_dir: &Path) -> Result<RunConfig, PipelineError> {
    let snapshot = work_dir.join("config.snapshot.toml");
    if !snapshot.is_file() {
        return Err(PipelineError::SnapshotMissing { path: snapshot });
    }
    Ok(RunConfig::load(&snapshot)?)
}

fn execute(engine: Engine, cfg: RunConfig) -> Result<PipelineOutcome, PipelineError> {
    let snapshot_path = cfg.work_dir.join("config.snapshot.toml");
    std::fs::write(&snapshot_path, cfg.snapshot_toml()).map_err(io_err(&snapshot_path))?;
    let pools_conf = cfg.work_dir.join("pools.conf");
    let mut conf_text = String::new();
    for pool in &cfg.pools {
        conf_text.push_str(&format!("{}={}\n", pool.name, pool.size));
    }
    std::fs::write(&pools_conf, conf_text).map_err(io_err(&pools_conf))?;

    let stop = Arc::new(AtomicBool::new(false));
    let poller = {
        let engine = engine.clone();
        let stop = Arc::clone(&stop);
        let path = pools_conf.clone();
        let mut applied: HashMap<String, usize> =
            cfg.pools.iter().map(|p| (p.name.clone(), p.size)).collect();
        std::thread::spawn(move || loop {
            let mut waited = Duration::ZERO;
            while waited < POOLS_CONF_POLL {
                if stop.load(Ordering::SeqCst) {
                    return;
                }
                std::thread::sleep(Duration::from_millis(100));
                waited += Duration::from_millis(100);
            }
            for (name, size) in read_pools_conf(&path) {
                if applied.get(&name) == Some(&size) {
                    continue;
                }
                match engine.resize_pool(&name, size) {
                    Ok(_) => {
                        log::info!("pool '{name}' resized to {size}");
                        applied.insert(name, size);
                    }
                    Err(e) => log::warn!("pools.conf: {e}"),
                }
            }
        })
    };

    let driver = {
        let engine = engine.clone();
        let cfg = cfg.clone();
        std::thread::spawn(move || drive(engine, cfg))
    };
    let run_result = engine.run(&cfg.pools);
    let drive_result = driver
        .join()
        .unwrap_or_else(|_| Err("driver thread panicked".to_string()));
    stop.store(true, Ordering::SeqCst);
    let _ = poller.join();

    let summary = run_result?;
    let outcome = drive_result.map_err(PipelineError::Driver)?;
    Ok(PipelineOutcome {
        summary,
        postprocess_ok: outcome.postprocess_ok,
        message: outcome.message,
        promoted: outcome.promoted,
    })
}

/// Parses `name=<size>` lines; malformed lines are ignored with a
/// warning so a typo cannot take down a running workflow.
fn read_pools_conf(path: &Path) -> Vec<(String, usize)> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    let mut sizes = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((name, size)) => match size.trim().parse::<usize>() {
                Ok(size) => sizes.push((name.trim().to_string(), size)),
                Err(_) => log::warn!("pools.conf: bad size in line '{line}'"),
            },
            None => log::warn!("pools.conf: ignoring malformed line '{line}'"),
        }
    }
    sizes
}

/// Rebuilds the hull artifacts from the calculation results stored in
/// `work_dir`, without touching any calc task. Fails with
/// [`PipelineError::NoResults`] when no converged candidate results
/// exist.
pub fn report(work_dir: &Path) -> Result<ReportOutcome, PipelineError> {
    let cfg = load_snapshot(work_dir)?;
    let outputs = work_dir.join("outputs");
    let mut results: Vec<CalcResult> = Vec::new();
    if outputs.is_dir() {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&outputs)
            .map_err(io_err(&outputs))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let path = dir.join("result.json");
            if !path.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            match serde_json::from_str::<CalcResult>(&text) {
                Ok(result) => results.push(result),
                Err(e) => log::warn!("{}: unreadable result skipped: {e}", path.display()),
            }
        }
    }
    results.sort_by(|a, b| a.structure_id.cmp(&b.structure_id));
    results.dedup_by(|a, b| a.structure_id == b.structure_id);
    let total_results = results.len();
    let converged = results
        .iter()
        .filter(|r| {
            r.converged && r.total_energy.is_finite() && !r.structure_id.starts_with(REF_ID_PREFIX)
        })
        .count();
    if converged == 0 {
        return Err(PipelineError::NoResults);
    }
    let refs_file = references_path(&cfg);
    let refs_file = refs_file.is_file().then_some(refs_file.as_path());
    let (promoted, svg_written) =
        write_hull_artifacts(&results, refs_file, cfg.e_cut_promote, work_dir)
            .map_err(PipelineError::Driver)?;
    Ok(ReportOutcome {
        total_results,
        converged,
        promoted,
        svg_written,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    /// CsCl-type two-species template plus a one-species cube.
    fn write_templates(dir: &Path) {
        std::fs::create_dir_all(dir).unwrap();
        std::fs::write(
            dir.join("cscl.vasp"),
            "CsCl type\n1.0\n3.6 0.0 0.0\n0.0 3.6 0.0\n0.0 0.0 3.6\nCs Cl\n1 1\nDirect\n0.0 0.0 0.0\n0.5 0.5 0.5\n",
        )
        .unwrap();
        std::fs::write(
            dir.join("mono.vasp"),
            "single species\n1.0\n3.0 0.0 0.0\n0.0 3.0 0.0\n0.0 0.0 3.0\nCu\n1\nDirect\n0.0 0.0 0.0\n",
        )
        .unwrap();
    }

    fn demo_config(root: &Path, work_name: &str) -> RunConfig {
        let templates = root.join("templates");
        write_templates(&templates);
        let body = format!(
            r#"
system = ["Ce", "Fe", "In"]
templates_dir = "{}"
work_dir = "{}"

[predictor]
kind = "builtin"
batch_size = 4

[calculator]
kind = "mock"

[[pools]]
name = "cpu"
class = "cpu"
size = 2
"#,
            templates.display(),
            root.join(work_name).display()
        );
        let path = root.join(format!("{work_name}.toml"));
        std::fs::write(&path, body).unwrap();
        RunConfig::load(&path).unwrap()
    }

    #[test]
    fn full_mock_run_produces_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path(), "work");
        let work = cfg.work_dir.clone();
        let outcome = run(cfg).unwrap();
        assert!(outcome.postprocess_ok, "{:?}", outcome.message);
        assert_eq!(outcome.summary.failed, 0);
        assert_eq!(outcome.summary.skipped, 0);
        for artifact in [
            "candidates",
            "filtered/ids.txt",
            "hull.tsv",
            "phase_diagram.svg",
            "promoted.txt",
            "promoted",
            "config.snapshot.toml",
            "pools.conf",
            "ledger.jsonl",
        ] {
            assert!(work.join(artifact).exists(), "missing {artifact}");
        }
        // candidates: 6 from the two-species template (3P2 orderings),
        // 3 from the one-species template
        let n_candidates = std::fs::read_dir(work.join("candidates")).unwrap().count();
        assert_eq!(n_candidates, 9);
        // pure In in the too-small cube predicts above the 0.0
        // threshold and is screened out; each CsCl A/B swap is
        // geometry-equivalent so dedup keeps one per unordered pair:
        // 3 pairs + 2 surviving pures
        let filtered = std::fs::read_to_string(work.join("filtered/ids.txt")).unwrap();
        assert_eq!(filtered.lines().count(), 5);
        assert!(!outcome.promoted.is_empty());
        // every candidate id in the hull table is filtered or a pure
        let hull = std::fs::read_to_string(work.join("hull.tsv")).unwrap();
        assert!(hull.lines().count() > 1);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg1 = demo_config(dir.path(), "work1");
        let cfg2 = demo_config(dir.path(), "work2");
        let (w1, w2) = (cfg1.work_dir.clone(), cfg2.work_dir.clone());
        assert!(run(cfg1).unwrap().postprocess_ok);
        assert!(run(cfg2).unwrap().postprocess_ok);
        for name in ["hull.tsv", "phase_diagram.svg", "promoted.txt", "filtered/ids.txt"] {
            let a = std::fs::read(w1.join(name)).unwrap();
            let b = std::fs::read(w2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn resume_of_finished_run_executes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path(), "work");
        let work = cfg.work_dir.clone();
        let first = run(cfg).unwrap();
        assert!(first.postprocess_ok);
        assert!(first.summary.executed > 0);
        let second = resume(&work).unwrap();
        assert!(second.postprocess_ok);
        assert_eq!(second.summary.executed, 0, "nothing left to do");
        assert_eq!(second.summary.done, first.summary.done);
        assert_eq!(second.promoted, first.promoted);
    }

    #[test]
    fn resume_reruns_only_deleted_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path(), "work");
        let work = cfg.work_dir.clone();
        let first = run(cfg).unwrap();
        assert!(first.postprocess_ok);
        let hull_before = std::fs::read(work.join("hull.tsv")).unwrap();
        // destroy one calc task's committed outputs
        let outputs = work.join("outputs");
        let victim = std::fs::read_dir(&outputs)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .find(|p| p.is_dir() && p.join("result.json").is_file())
            .expect("a calc output dir exists");
        std::fs::remove_dir_all(&victim).unwrap();
        let second = resume(&work).unwrap();
        assert!(second.postprocess_ok);
        assert_eq!(second.summary.executed, 1, "only the destroyed task re-ran");
        // the mock calculator is deterministic, so the hull is unchanged
        assert_eq!(std::fs::read(work.join("hull.tsv")).unwrap(), hull_before);
    }

    #[test]
    fn run_refuses_a_used_work_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path(), "work");
        assert!(run(cfg.clone()).unwrap().postprocess_ok);
        match run(cfg) {
            Err(PipelineError::WorkDirInUse { .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn resume_needs_snapshot_and_ledger() {
        let dir = tempfile::tempdir().unwrap();
        match resume(&dir.path().join("empty")) {
            Err(PipelineError::SnapshotMissing { .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
        // snapshot present but no ledger
        let work = dir.path().join("half");
        std::fs::create_dir_all(&work).unwrap();
        let cfg = demo_config(dir.path(), "half");
        std::fs::write(work.join("config.snapshot.toml"), cfg.snapshot_toml()).unwrap();
        match resume(&work) {
            Err(PipelineError::Engine(EngineError::LedgerMissing { .. })) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn report_rewrites_identical_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path(), "work");
        let work = cfg.work_dir.clone();
        let outcome = run(cfg).unwrap();
        assert!(outcome.postprocess_ok);
        let hull = std::fs::read(work.join("hull.tsv")).unwrap();
        let svg = std::fs::read(work.join("phase_diagram.svg")).unwrap();
        let promoted = std::fs::read(work.join("promoted.txt")).unwrap();
        std::fs::remove_file(work.join("hull.tsv")).unwrap();
        let r1 = report(&work).unwrap();
        assert!(r1.svg_written);
        assert_eq!(r1.promoted, outcome.promoted);
        assert_eq!(std::fs::read(work.join("hull.tsv")).unwrap(), hull);
        assert_eq!(std::fs::read(work.join("phase_diagram.svg")).unwrap(), svg);
        assert_eq!(std::fs::read(work.join("promoted.txt")).unwrap(), promoted);
        // twice in a row: still identical
        let r2 = report(&work).unwrap();
        assert_eq!(r2.promoted, r1.promoted);
        assert_eq!(std::fs::read(work.join("hull.tsv")).unwrap(), hull);
    }

    #[test]
    fn report_without_results_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let work = dir.path().join("work");
        std::fs::create_dir_all(&work).unwrap();
        let cfg = demo_config(dir.path(), "work-unused");
        std::fs::write(work.join("config.snapshot.toml"), cfg.snapshot_toml()).unwrap();
        match report(&work) {
            Err(PipelineError::NoResults) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn pools_conf_lines_parse_leniently() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pools.conf");
        std::fs::write(&path, "# comment\ncpu=4\n\nbad line\naccel = 2\ncpu=oops\n").unwrap();
        assert_eq!(
            read_pools_conf(&path),
            vec![("cpu".to_string(), 4), ("accel".to_string(), 2)]
        );
    }
}
