//! Resumable task-graph scheduler with elastic worker pools.
//!
//! Tasks are content-addressed: a key is the SHA-256 of the stage
//! name, the payload bytes, and the sorted keys of the dependencies.
//! Submitting the same work twice therefore lands on the same key and
//! executes once, and a restarted process that rebuilds its graph from
//! the same inputs converges on the same keys, which is what makes
//! [`Engine::open_resume`] work without any separate plan file.
//!
//! Durability model: every state transition is appended to a JSONL
//! ledger (see [`ledger`]), and task outputs are written to a staging
//! directory that is renamed into place *before* the `done` record is
//! appended. The rename is the commit point. On resume, a task whose
//! latest record is `running` but whose outputs directory exists is
//! recovered as done (the process died between the rename and the
//! ledger append); a `done` task whose outputs directory is missing is
//! re-executed. Together these rules give exactly-once *effect*: the
//! contents of a task's outputs directory are produced by exactly one
//! successful execution, no matter where a crash lands.
//!
//! Cycles cannot be constructed: [`Engine::submit`] requires every
//! dependency key to exist already, and a task's own key depends on
//! its dependencies' keys, so no chain of submissions can loop back.

pub mod ledger;
mod pool;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::calc::ResourceClass;
use crate::hashing;

use ledger::{LedgerRecord, LedgerWriter, RecordState, ReplayedTask};
use pool::PoolShared;

/// Hex SHA-256 digest naming one task.
pub type TaskKey = String;

/// Pipeline stage a task belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Screen,
    Filter,
    Calc,
    Postprocess,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Screen => "screen",
            Stage::Filter => "filter",
            Stage::Calc => "calc",
            Stage::Postprocess => "postprocess",
        }
    }
}

/// Derives the content-addressed key for a task.
///
/// The digest covers the stage name, the payload bytes, and the
/// dependency keys in sorted order, each field NUL-terminated so no
/// two distinct inputs serialize to the same byte stream.
pub fn task_key(stage: Stage, payload: &str, deps: &[TaskKey]) -> TaskKey {
    let mut bytes: Vec<u8> = Vec::new();
    bytes.extend_from_slice(b"amdflow.task.v1\n");
    bytes.extend_from_slice(stage.name().as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(payload.as_bytes());
    bytes.push(0);
    let mut sorted: Vec<&TaskKey> = deps.iter().collect();
    sorted.sort();
    for dep in sorted {
        bytes.extend_from_slice(dep.as_bytes());
        bytes.push(0);
    }
    hashing::sha256_hex(&bytes)
}

/// Immutable description of a submitted task, handed to the executor.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub key: TaskKey,
    pub stage: Stage,
    pub resource_class: ResourceClass,
    /// Opaque serialized input; the engine only hashes it.
    pub payload: String,
    /// Keys of the tasks this one consumes outputs from.
    pub inputs: Vec<TaskKey>,
}

/// Execution context for one attempt of one task.
#[derive(Debug, Clone)]
pub struct ExecCtx {
    /// The engine's working directory.
    pub work_dir: PathBuf,
    /// Directory holding every task's committed outputs.
    pub outputs_root: PathBuf,
    /// Where this attempt must write its outputs. Committed by rename
    /// on success; discarded on failure.
    pub staging_dir: PathBuf,
    /// 1-based attempt number.
    pub attempt: u32,
}

impl ExecCtx {
    /// Committed outputs directory of another task (usually a dep).
    pub fn outputs_of(&self, key: &str) -> PathBuf {
        self.outputs_root.join(key)
    }
}

/// Runs one task attempt. Implementations write their outputs into
/// `ctx.staging_dir` and return `Err` with a cause to fail the
/// attempt; panics are caught and treated as failures.
pub trait TaskExecutor: Send + Sync {
    fn execute(&self, spec: &TaskSpec, ctx: &ExecCtx) -> Result<(), String>;
}

impl<F> TaskExecutor for F
where
    F: Fn(&TaskSpec, &ExecCtx) -> Result<(), String> + Send + Sync,
{
    fn execute(&self, spec: &TaskSpec, ctx: &ExecCtx) -> Result<(), String> {
        self(spec, ctx)
    }
}

/// One worker pool to create for a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSpec {
    pub name: String,
    pub resource_class: ResourceClass,
    pub size: usize,
}

/// Final tally of a run over the submitted tasks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub done: u64,
    pub failed: u64,
    pub skipped: u64,
    /// Task attempts actually started by this process (not replayed).
    pub executed: u64,
}

/// Terminal outcome of one task, as seen by [`Engine::wait`].
#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutcome {
    Done { outputs: PathBuf },
    Failed { error: String },
    Skipped,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: corrupt ledger record at line {index}: {reason}")]
    CorruptLedger {
        path: PathBuf,
        index: usize,
        reason: String,
    },
    #[error("no ledger found at {path}; nothing to resume")]
    LedgerMissing { path: PathBuf },
    #[error("task depends on unknown key {key}")]
    UnknownDependency { key: TaskKey },
    #[error("unknown task key {key}")]
    UnknownTask { key: TaskKey },
    #[error("unknown worker pool '{name}'")]
    UnknownPool { name: String },
    #[error("no worker pool configured for resource class '{class}'")]
    NoPoolForClass { class: String },
    #[error("a run is already active on this engine")]
    RunActive,
    #[error("run aborted: {reason}")]
    Aborted { reason: String },
}

/// In-memory task state. `Queued` means dispatched to a pool but not
/// yet picked up; the ledger reports it as `pending` until a worker
/// actually starts it.
#[derive(Debug, Clone, PartialEq)]
enum NodeState {
    Pending,
    Queued,
    Running,
    Done,
    Failed(String),
    Skipped,
}

#[derive(Debug)]
struct Node {
    stage: Stage,
    class: ResourceClass,
    payload: String,
    deps: Vec<TaskKey>,
    state: NodeState,
    attempts: u32,
    /// False for tasks known only from ledger replay.
    submitted: bool,
}

#[derive(Default)]
struct Graph {
    nodes: HashMap<TaskKey, Node>,
    dependents: HashMap<TaskKey, Vec<TaskKey>>,
    executed: u64,
    closed: bool,
    run_active: bool,
}

struct Shared {
    work_dir: PathBuf,
    outputs_root: PathBuf,
    staging_root: PathBuf,
    graph: Mutex<Graph>,
    graph_cv: Condvar,
    ledger: Mutex<LedgerWriter>,
    pools: Mutex<BTreeMap<String, Arc<PoolShared>>>,
    handles: Mutex<Vec<JoinHandle<()>>>,
    fatal: Mutex<Option<String>>,
    executor: Arc<dyn TaskExecutor>,
    max_attempts: u32,
}

/// Default number of times a task may be attempted before it is
/// marked failed for good.
pub const DEFAULT_MAX_ATTEMPTS: u32 = 2;

/// The scheduler. Cheap to clone; clones share all state, so one can
/// drive [`Engine::run`] while another submits tasks or resizes pools.
#[derive(Clone)]
pub struct Engine {
    shared: Arc<Shared>,
}

impl Engine {
    /// Creates a fresh engine over `work_dir`, creating the directory
    /// layout and an empty ledger.
    pub fn new(
        work_dir: &Path,
        executor: Arc<dyn TaskExecutor>,
        max_attempts: u32,
    ) -> Result<Engine, EngineError> {
        Engine::build(work_dir, executor, max_attempts, Vec::new())
    }

    /// Reopens an interrupted run: replays the ledger, verifies the
    /// outputs of completed tasks, and resets interrupted work.
    ///
    /// Rules applied per task, in terms of its latest record:
    /// `done` with outputs present stays done; `done` with outputs
    /// missing is reset to pending; `running` with outputs present is
    /// recovered as done (the crash landed between the output commit
    /// and the ledger append); `running` without outputs is reset to
    /// pending; `failed` below the attempt limit becomes retryable;
    /// `skipped` is reconsidered. Attempt counts carry over.
    ///
    /// The caller then resubmits its task graph — landing on the same
    /// keys — and calls [`Engine::run`].
    pub fn open_resume(
        work_dir: &Path,
        executor: Arc<dyn TaskExecutor>,
        max_attempts: u32,
    ) -> Result<Engine, EngineError> {
        let ledger_path = work_dir.join("ledger.jsonl");
        if !ledger_path.is_file() {
            return Err(EngineError::LedgerMissing { path: ledger_path });
        }
        let replayed = ledger::replay(&ledger_path, true)?;
        Engine::build(work_dir, executor, max_attempts, replayed)
    }

    fn build(
        work_dir: &Path,
        executor: Arc<dyn TaskExecutor>,
        max_attempts: u32,
        replayed: Vec<(TaskKey, ReplayedTask)>,
    ) -> Result<Engine, EngineError> {
        let outputs_root = work_dir.join("outputs");
        let staging_root = outputs_root.join(".staging");
        for dir in [work_dir, &outputs_root, &staging_root] {
            std::fs::create_dir_all(dir).map_err(|source| EngineError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let mut writer = LedgerWriter::append_to(&work_dir.join("ledger.jsonl"))?;
        let mut graph = Graph::default();
        for (key, task) in replayed {
            let outputs = outputs_root.join(&key);
            let (state, note) = match task.state {
                RecordState::Done if outputs.is_dir() => (NodeState::Done, None),
                RecordState::Done => (NodeState::Pending, Some(RecordState::Pending)),
                RecordState::Running if outputs.is_dir() => {
                    (NodeState::Done, Some(RecordState::Done))
                }
                RecordState::Running => (NodeState::Pending, Some(RecordState::Pending)),
                RecordState::Failed if task.attempts >= max_attempts => (
                    NodeState::Failed(task.error.clone().unwrap_or_else(|| "unknown".into())),
                    None,
                ),
                RecordState::Failed => (NodeState::Pending, None),
                RecordState::Skipped | RecordState::Pending => (NodeState::Pending, None),
            };
            if let Some(state) = note {
                writer.append(&LedgerRecord {
                    key: key.clone(),
                    stage: task.stage,
                    state,
                    attempts: task.attempts,
                    outputs_path: outputs.clone(),
                    start: None,
                    end: Some(now_iso()),
                    error: None,
                })?;
            }
            graph.nodes.insert(
                key,
                Node {
                    stage: task.stage,
                    class: ResourceClass::Cpu,
                    payload: String::new(),
                    deps: Vec::new(),
                    state,
                    attempts: task.attempts,
                    submitted: false,
                },
            );
        }
        Ok(Engine {
            shared: Arc::new(Shared {
                work_dir: work_dir.to_path_buf(),
                outputs_root,
                staging_root,
                graph: Mutex::new(graph),
                graph_cv: Condvar::new(),
                ledger: Mutex::new(writer),
                pools: Mutex::new(BTreeMap::new()),
                handles: Mutex::new(Vec::new()),
                fatal: Mutex::new(None),
                executor,
                max_attempts,
            }),
        })
    }

    pub fn work_dir(&self) -> &Path {
        &self.shared.work_dir
    }

    /// Committed outputs directory for a task key.
    pub fn outputs_path(&self, key: &str) -> PathBuf {
        self.shared.outputs_root.join(key)
    }

    /// Registers a task and returns its content-addressed key.
    ///
    /// Idempotent: resubmitting an identical spec returns the same key
    /// and schedules nothing new. Every dependency must already have
    /// been submitted or replayed, otherwise
    /// [`EngineError::UnknownDependency`] is returned.
    pub fn submit(
        &self,
        stage: Stage,
        resource_class: ResourceClass,
        payload: impl Into<String>,
        deps: &[TaskKey],
    ) -> Result<TaskKey, EngineError> {
        let payload = payload.into();
        let key = task_key(stage, &payload, deps);
        let mut dispatch_now = false;
        {
            let mut g = self.shared.graph.lock().unwrap();
            for dep in deps {
                if !g.nodes.contains_key(dep) {
                    return Err(EngineError::UnknownDependency { key: dep.clone() });
                }
            }
            match g.nodes.get_mut(&key) {
                Some(node) if node.submitted => return Ok(key),
                Some(node) => {
                    // Known from replay; adopt the full spec, keep state.
                    node.class = resource_class;
                    node.payload = payload;
                    node.deps = deps.to_vec();
                    node.submitted = true;
                }
                None => {
                    g.nodes.insert(
                        key.clone(),
                        Node {
                            stage,
                            class: resource_class,
                            payload,
                            deps: deps.to_vec(),
                            state: NodeState::Pending,
                            attempts: 0,
                            submitted: true,
                        },
                    );
                    self.shared
                        .append_ledger(&mut g, &key, RecordState::Pending, None, None);
                }
            }
            for dep in deps {
                g.dependents.entry(dep.clone()).or_default().push(key.clone());
            }
            if g.nodes[&key].state == NodeState::Pending {
                if self.shared.has_bad_dep(&g, &key) {
                    self.shared.skip_cascade(&mut g, &key);
                    self.shared.graph_cv.notify_all();
                } else if g.run_active && self.shared.deps_satisfied(&g, &key) {
                    dispatch_now = true;
                }
            }
        }
        if dispatch_now {
            self.shared.dispatch(&key);
        }
        Ok(key)
    }

    /// Declares that no further tasks will be submitted; a running
    /// [`Engine::run`] returns once everything already in the graph is
    /// terminal.
    pub fn close_submissions(&self) {
        let mut g = self.shared.graph.lock().unwrap();
        g.closed = true;
        drop(g);
        self.shared.graph_cv.notify_all();
    }

    /// Blocks until `key` reaches a terminal state.
    pub fn wait(&self, key: &TaskKey) -> Result<TaskOutcome, EngineError> {
        let mut g = self.shared.graph.lock().unwrap();
        loop {
            let node = g
                .nodes
                .get(key)
                .ok_or_else(|| EngineError::UnknownTask { key: key.clone() })?;
            match &node.state {
                NodeState::Done => {
                    return Ok(TaskOutcome::Done {
                        outputs: self.shared.outputs_root.join(key),
                    })
                }
                NodeState::Failed(e) => return Ok(TaskOutcome::Failed { error: e.clone() }),
                NodeState::Skipped => return Ok(TaskOutcome::Skipped),
                _ => {
                    if let Some(reason) = self.shared.fatal.lock().unwrap().clone() {
                        return Err(EngineError::Aborted { reason });
                    }
                    g = self.shared.graph_cv.wait(g).unwrap();
                }
            }
        }
    }

    /// Live state counts over submitted tasks (queued counts as
    /// pending, matching what the ledger reports).
    pub fn state_counts(&self) -> BTreeMap<String, u64> {
        let g = self.shared.graph.lock().unwrap();
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for state in ["pending", "running", "done", "failed", "skipped"] {
            counts.insert(state.to_string(), 0);
        }
        for node in g.nodes.values().filter(|n| n.submitted) {
            let name = match &node.state {
                NodeState::Pending | NodeState::Queued => "pending",
                NodeState::Running => "running",
                NodeState::Done => "done",
                NodeState::Failed(_) => "failed",
                NodeState::Skipped => "skipped",
            };
            *counts.get_mut(name).expect("states pre-seeded") += 1;
        }
        counts
    }

    /// Number of task attempts started by this process.
    pub fn executed(&self) -> u64 {
        self.shared.graph.lock().unwrap().executed
    }

    /// Resizes a worker pool while a run is active. Growth spawns
    /// workers immediately; shrinking lets in-flight tasks finish and
    /// retires workers as they go idle. Returns the new target.
    pub fn resize_pool(&self, name: &str, size: usize) -> Result<usize, EngineError> {
        let pool = {
            let pools = self.shared.pools.lock().unwrap();
            pools
                .get(name)
                .cloned()
                .ok_or_else(|| EngineError::UnknownPool {
                    name: name.to_string(),
                })?
        };
        let to_spawn = pool.resize(size);
        for _ in 0..to_spawn {
            spawn_worker(Arc::clone(&self.shared), Arc::clone(&pool));
        }
        Ok(size)
    }

    /// Current target size of a pool, if a run created it.
    pub fn pool_size(&self, name: &str) -> Option<usize> {
        let pools = self.shared.pools.lock().unwrap();
        pools.get(name).map(|p| p.target())
    }

    /// Executes the submitted graph to completion over the given
    /// pools and returns the final tally.
    ///
    /// Fails before executing anything if a submitted, still-runnable
    /// task needs a resource class no pool provides. Tasks whose
    /// dependencies failed are skipped; failed tasks are retried up to
    /// the engine's attempt limit. The call returns when every
    /// submitted task is terminal and [`Engine::close_submissions`]
    /// has been called.
    pub fn run(&self, pools: &[PoolSpec]) -> Result<RunSummary, EngineError> {
        let shared = &self.shared;
        {
            let mut g = shared.graph.lock().unwrap();
            if g.run_active {
                return Err(EngineError::RunActive);
            }
            let needed: BTreeSet<&'static str> = g
                .nodes
                .values()
                .filter(|n| {
                    n.submitted
                        && matches!(n.state, NodeState::Pending | NodeState::Queued)
                })
                .map(|n| n.class.name())
                .collect();
            for class in needed {
                if !pools.iter().any(|p| p.resource_class.name() == class) {
                    return Err(EngineError::NoPoolForClass {
                        class: class.to_string(),
                    });
                }
            }
            g.run_active = true;
        }
        {
            let mut registry = shared.pools.lock().unwrap();
            registry.clear();
            for spec in pools {
                let pool = Arc::new(PoolShared::new(&spec.name, spec.resource_class));
                registry.insert(spec.name.clone(), Arc::clone(&pool));
            }
        }
        for spec in pools {
            // resize_pool spawns the initial workers
            self.resize_pool(&spec.name, spec.size)?;
        }

        // Seed: skip tasks under failed deps, dispatch the ready ones.
        let ready: Vec<TaskKey> = {
            let mut g = shared.graph.lock().unwrap();
            let mut keys: Vec<TaskKey> = g
                .nodes
                .iter()
                .filter(|(_, n)| n.submitted && n.state == NodeState::Pending)
                .map(|(k, _)| k.clone())
                .collect();
            keys.sort();
            let mut ready = Vec::new();
            for key in keys {
                if g.nodes[&key].state != NodeState::Pending {
                    continue; // a skip cascade above already consumed it
                }
                if shared.has_bad_dep(&g, &key) {
                    shared.skip_cascade(&mut g, &key);
                } else if shared.deps_satisfied(&g, &key) {
                    ready.push(key);
                }
            }
            ready
        };
        shared.graph_cv.notify_all();
        for key in ready {
            shared.dispatch(&key);
        }

        // Wait for the graph to drain.
        let mut g = shared.graph.lock().unwrap();
        loop {
            if shared.fatal.lock().unwrap().is_some() {
                break;
            }
            let open_work = g
                .nodes
                .values()
                .filter(|n| n.submitted)
                .any(|n| {
                    matches!(
                        n.state,
                        NodeState::Pending | NodeState::Queued | NodeState::Running
                    )
                });
            if g.closed && !open_work {
                break;
            }
            g = shared.graph_cv.wait(g).unwrap();
        }
        g.run_active = false;
        drop(g);

        // Teardown: retire workers, keep the pool registry readable.
        {
            let registry = shared.pools.lock().unwrap();
            for pool in registry.values() {
                pool.close();
            }
        }
        let handles: Vec<JoinHandle<()>> = shared.handles.lock().unwrap().drain(..).collect();
        for handle in handles {
            let _ = handle.join();
        }

        if let Some(reason) = shared.fatal.lock().unwrap().take() {
            return Err(EngineError::Aborted { reason });
        }
        let g = shared.graph.lock().unwrap();
        let mut summary = RunSummary::default();
        for node in g.nodes.values().filter(|n| n.submitted) {
            match node.state {
                NodeState::Done => summary.done += 1,
                NodeState::Failed(_) => summary.failed += 1,
                NodeState::Skipped => summary.skipped += 1,
                _ => {}
            }
        }
        summary.executed = g.executed;
        Ok(summary)
    }
}

impl Shared {
    fn deps_satisfied(&self, g: &Graph, key: &TaskKey) -> bool {
        g.nodes[key]
            .deps
            .iter()
            .all(|d| matches!(g.nodes.get(d), Some(n) if n.state == NodeState::Done))
    }

    fn has_bad_dep(&self, g: &Graph, key: &TaskKey) -> bool {
        g.nodes[key].deps.iter().any(|d| {
            matches!(
                g.nodes.get(d),
                Some(n) if matches!(n.state, NodeState::Failed(_) | NodeState::Skipped)
            )
        })
    }

    /// Appends a ledger line for `key`'s current bookkeeping. Must be
    /// called with the graph lock held so line order matches
    /// transition order.
    fn append_ledger(
        &self,
        g: &mut Graph,
        key: &TaskKey,
        state: RecordState,
        error: Option<String>,
        start: Option<String>,
    ) {
        let node = &g.nodes[key];
        let record = LedgerRecord {
            key: key.clone(),
            stage: node.stage,
            state,
            attempts: node.attempts,
            outputs_path: self.outputs_root.join(key),
            start,
            end: match state {
                RecordState::Done | RecordState::Failed => Some(now_iso()),
                _ => None,
            },
            error,
        };
        if let Err(e) = self.ledger.lock().unwrap().append(&record) {
            let mut fatal = self.fatal.lock().unwrap();
            if fatal.is_none() {
                *fatal = Some(format!("ledger append failed: {e}"));
            }
            self.graph_cv.notify_all();
        }
    }

    /// Marks `root` and everything downstream of it skipped.
    fn skip_cascade(&self, g: &mut Graph, root: &TaskKey) {
        let mut queue: VecDeque<TaskKey> = VecDeque::new();
        queue.push_back(root.clone());
        while let Some(key) = queue.pop_front() {
            let Some(node) = g.nodes.get_mut(&key) else {
                continue;
            };
            if !node.submitted || node.state != NodeState::Pending {
                continue;
            }
            node.state = NodeState::Skipped;
            self.append_ledger(g, &key, RecordState::Skipped, None, None);
            if let Some(deps) = g.dependents.get(&key) {
                queue.extend(deps.iter().cloned());
            }
        }
    }

    /// Queues a pending task onto a pool of its resource class.
    fn dispatch(self: &Arc<Self>, key: &TaskKey) {
        let class = {
            let mut g = self.graph.lock().unwrap();
            let node = g.nodes.get_mut(key).expect("dispatched key exists");
            debug_assert_eq!(node.state, NodeState::Pending);
            node.state = NodeState::Queued;
            node.class
        };
        let pool = {
            let pools = self.pools.lock().unwrap();
            pools
                .values()
                .filter(|p| p.class == class)
                .min_by_key(|p| (p.queued(), p.name.clone()))
                .cloned()
        };
        match pool {
            Some(pool) => pool.push(key.clone()),
            None => {
                // Validated at run start; only reachable for tasks
                // submitted mid-run with a class no pool serves.
                let mut g = self.graph.lock().unwrap();
                if let Some(node) = g.nodes.get_mut(key) {
                    node.state = NodeState::Failed(format!(
                        "no worker pool for resource class '{}'",
                        class.name()
                    ));
                    let error = Some(format!(
                        "no worker pool for resource class '{}'",
                        class.name()
                    ));
                    self.append_ledger(&mut g, key, RecordState::Failed, error, None);
                    let dependents = g.dependents.get(key).cloned().unwrap_or_default();
                    for dep in dependents {
                        self.skip_cascade(&mut g, &dep);
                    }
                }
                self.graph_cv.notify_all();
            }
        }
    }

    /// Records the outcome of one attempt and advances the graph.
    fn complete(self: &Arc<Self>, key: &TaskKey, result: Result<(), String>) {
        let mut to_dispatch: Vec<TaskKey> = Vec::new();
        {
            let mut g = self.graph.lock().unwrap();
            let node = g.nodes.get_mut(key).expect("completed key exists");
            match result {
                Ok(()) => {
                    node.state = NodeState::Done;
                    self.append_ledger(&mut g, key, RecordState::Done, None, None);
                    let dependents = g.dependents.get(key).cloned().unwrap_or_default();
                    for dep in dependents {
                        let runnable = matches!(
                            g.nodes.get(&dep),
                            Some(n) if n.submitted && n.state == NodeState::Pending
                        );
                        if runnable && self.deps_satisfied(&g, &dep) {
                            to_dispatch.push(dep);
                        }
                    }
                }
                Err(error) => {
                    let retry = node.attempts < self.max_attempts;
                    if retry {
                        node.state = NodeState::Pending;
                        self.append_ledger(
                            &mut g,
                            key,
                            RecordState::Failed,
                            Some(error),
                            None,
                        );
                        to_dispatch.push(key.clone());
                    } else {
                        node.state = NodeState::Failed(error.clone());
                        self.append_ledger(
                            &mut g,
                            key,
                            RecordState::Failed,
                            Some(error),
                            None,
                        );
                        let dependents = g.dependents.get(key).cloned().unwrap_or_default();
                        for dep in dependents {
                            self.skip_cascade(&mut g, &dep);
                        }
                    }
                }
            }
        }
        self.graph_cv.notify_all();
        to_dispatch.sort();
        for key in to_dispatch {
            self.dispatch(&key);
        }
    }

    /// Runs one attempt end to end on a worker thread.
    fn execute(self: &Arc<Self>, key: &TaskKey) {
        // Transition to running and snapshot the spec.
        let (spec, attempt) = {
            let mut g = self.graph.lock().unwrap();
            let node = g.nodes.get_mut(key).expect("queued key exists");
            node.state = NodeState::Running;
            node.attempts += 1;
            g.executed += 1;
            let node = &g.nodes[key];
            let spec = TaskSpec {
                key: key.clone(),
                stage: node.stage,
                resource_class: node.class,
                payload: node.payload.clone(),
                inputs: node.deps.clone(),
            };
            let attempt = node.attempts;
            self.append_ledger(&mut g, key, RecordState::Running, None, Some(now_iso()));
            (spec, attempt)
        };

        let staging = self.staging_root.join(format!("{key}.a{attempt}"));
        let result = prepare_dir(&staging)
            .and_then(|()| {
                let ctx = ExecCtx {
                    work_dir: self.work_dir.clone(),
                    outputs_root: self.outputs_root.clone(),
                    staging_dir: staging.clone(),
                    attempt,
                };
                match catch_unwind(AssertUnwindSafe(|| self.executor.execute(&spec, &ctx))) {
                    Ok(r) => r,
                    Err(panic) => Err(format!("task panicked: {}", panic_message(&panic))),
                }
            })
            .and_then(|()| commit_outputs(&staging, &self.outputs_root.join(key)));
        if result.is_err() {
            let _ = std::fs::remove_dir_all(&staging);
        }
        self.complete(key, result);
    }
}

fn spawn_worker(shared: Arc<Shared>, pool: Arc<PoolShared>) {
    let handles = Arc::clone(&shared);
    let handle = std::thread::spawn(move || {
        while let Some(key) = pool.pop() {
            shared.execute(&key);
        }
    });
    handles.handles.lock().unwrap().push(handle);
}

fn prepare_dir(dir: &Path) -> Result<(), String> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)
            .map_err(|e| format!("clearing staging dir {}: {e}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| format!("creating staging dir {}: {e}", dir.display()))
}

/// Atomically publishes a finished attempt's outputs. The rename is
/// the commit point the resume rules key off.
fn commit_outputs(staging: &Path, final_dir: &Path) -> Result<(), String> {
    match std::fs::rename(staging, final_dir) {
        Ok(()) => Ok(()),
        Err(_) if final_dir.exists() => {
            std::fs::remove_dir_all(final_dir)
                .map_err(|e| format!("replacing outputs {}: {e}", final_dir.display()))?;
            std::fs::rename(staging, final_dir)
                .map_err(|e| format!("committing outputs {}: {e}", final_dir.display()))
        }
        Err(e) => Err(format!("committing outputs {}: {e}", final_dir.display())),
    }
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = panic.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}

fn now_iso() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}
