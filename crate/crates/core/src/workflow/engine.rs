//! Executes workflow runs. Each run has one scheduler thread that owns its
//! state and applies events in order; node bodies execute on a shared worker
//! pool and report back only through completion messages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::Archive;
use crate::par::ExecMode;
use crate::semver::Version;

use super::definition::{bind_inputs, validate_definition, Binding, InputRef, NodeDef, WorkflowDefinition};
use super::operator::{Execution, OperatorRegistry, OperatorSpec, SlotValue};
use super::ops::{run_builtin, Inputs, OpContext, Outputs};
use super::state::{advance_run, Artifact, NodeOutcome, RunEvent, WorkflowRun};
use super::WorkflowError;

/// An in-process operator body.
pub type BuiltinFn = Arc<dyn Fn(&OpContext<'_>, Inputs) -> Result<Outputs, String> + Send + Sync>;

/// Bucket holding persisted node outputs, keyed `<run_id>/<node>/<slot>.<ext>`.
pub const RUNS_BUCKET: &str = "runs";

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Holds `workflows/` and `runs/`.
    pub data_dir: PathBuf,
    pub worker_count: usize,
    pub retry_backoff: Duration,
    pub exec: ExecMode,
}

impl EngineConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        EngineConfig {
            data_dir: data_dir.into(),
            worker_count: thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            retry_backoff: Duration::from_millis(100),
            exec: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisteredWorkflow {
    pub definition: WorkflowDefinition,
    /// Extension that contributed the workflow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
}

enum Msg {
    Finished { node: String, result: Result<(Outputs, BTreeMap<String, Artifact>), String> },
    Wake,
}

struct RunSlot {
    run: Mutex<WorkflowRun>,
    changed: Condvar,
    cancel: AtomicBool,
    wake: Mutex<Option<Sender<Msg>>>,
}

impl RunSlot {
    fn snapshot(&self) -> WorkflowRun {
        self.run.lock().expect("run lock").clone()
    }
}

struct Inner {
    cfg: EngineConfig,
    archive: Arc<Archive>,
    registry: RwLock<OperatorRegistry>,
    functions: RwLock<BTreeMap<String, BuiltinFn>>,
    workflows: RwLock<BTreeMap<String, RegisteredWorkflow>>,
    /// Persisted workflows whose operators are not registered yet.
    dormant: Mutex<Vec<WorkflowDefinition>>,
    runs: Mutex<BTreeMap<String, Arc<RunSlot>>>,
    clock: Mutex<DateTime<Utc>>,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Inner {
    /// Strictly increasing wall-clock readings.
    fn now(&self) -> DateTime<Utc> {
        let mut last = self.clock.lock().expect("clock lock");
        let now = Utc::now().max(*last + chrono::Duration::microseconds(1));
        *last = now;
        now
    }

    fn workflows_dir(&self) -> PathBuf {
        self.cfg.data_dir.join("workflows")
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.cfg.data_dir.join("runs").join(run_id)
    }

    fn persist_run(&self, run: &WorkflowRun) -> Result<(), WorkflowError> {
        let dir = self.run_dir(&run.run_id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("run.json"), &serde_json::to_vec_pretty(run).expect("run serializes"))
    }

    fn spawn(&self, job: impl FnOnce() + Send + 'static) {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            pool.spawn(job);
            return;
        }
        job()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), WorkflowError> {
    let dir = path.parent().expect("file has a parent");
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.as_file().sync_data()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("data_dir", &self.inner.cfg.data_dir).finish()
    }
}

/// Workflows every engine starts with.
pub fn builtin_workflows() -> Vec<WorkflowDefinition> {
    let node = |id: &str, op: &str, params: &[(&str, Value)], inputs: &[(&str, &str)]| NodeDef {
        id: id.into(),
        operator: op.into(),
        params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        inputs: inputs
            .iter()
            .map(|(from, slot)| InputRef { from_node: from.to_string(), slot: slot.to_string() })
            .collect(),
    };
    vec![
        WorkflowDefinition {
            name: "threshold_segmentation".into(),
            version: Version::new(1, 0, 0),
            nodes: vec![
                node("load", "load_images", &[], &[]),
                node("segment", "threshold_segment", &[("threshold", Value::from(1000))], &[("load", "images")]),
                node("stats", "region_stats", &[], &[("load", "images"), ("segment", "mask")]),
                node("store", "store_segmentation", &[], &[("load", "images"), ("segment", "mask")]),
            ],
            retry_limit: 1,
        },
        WorkflowDefinition {
            name: "local_train".into(),
            version: Version::new(1, 0, 0),
            nodes: vec![
                node("data", "load_table", &[("key", Value::from("train.csv"))], &[]),
                node("train", "local_train", &[("w", Value::from("0")), ("lr", Value::from(0.1))], &[("data", "table")]),
            ],
            retry_limit: 1,
        },
    ]
}

impl Engine {
    /// Opens the engine over `data_dir`. Persisted workflows are reloaded and
    /// runs left unfinished by a previous process are settled as Failed.
    pub fn open(cfg: EngineConfig, archive: Arc<Archive>) -> Result<Engine, WorkflowError> {
        let cfg = EngineConfig { worker_count: cfg.worker_count.max(1), ..cfg };
        fs::create_dir_all(cfg.data_dir.join("workflows"))?;
        fs::create_dir_all(cfg.data_dir.join("runs"))?;
        #[cfg(feature = "parallel")]
        let pool = match cfg.exec {
            ExecMode::Parallel => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.worker_count)
                    .thread_name(|i| format!("workflow-worker-{i}"))
                    .build()
                    .map_err(|e| WorkflowError::Io(std::io::Error::other(e.to_string())))?,
            ),
            ExecMode::Sequential => None,
        };
        let engine = Engine {
            inner: Arc::new(Inner {
                cfg,
                archive,
                registry: RwLock::new(OperatorRegistry::with_builtins()),
                functions: RwLock::new(BTreeMap::new()),
                workflows: RwLock::new(BTreeMap::new()),
                dormant: Mutex::new(Vec::new()),
                runs: Mutex::new(BTreeMap::new()),
                clock: Mutex::new(DateTime::<Utc>::MIN_UTC),
                #[cfg(feature = "parallel")]
                pool,
            }),
        };
        engine.load_workflows()?;
        engine.load_runs()?;
        Ok(engine)
    }

    fn load_workflows(&self) -> Result<(), WorkflowError> {
        let mut stored = Vec::new();
        for entry in fs::read_dir(self.inner.workflows_dir())? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let wf: RegisteredWorkflow = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| WorkflowError::InvalidDefinition(format!("{}: {e}", path.display())))?;
            stored.push(wf);
        }
        *self.inner.dormant.lock().expect("dormant lock") = stored.into_iter().map(|w| w.definition).collect();
        self.wake_dormant();
        for def in builtin_workflows() {
            if self.workflow(&def.name).is_none() {
                self.register_workflow(&def, None)?;
            }
        }
        Ok(())
    }

    fn load_runs(&self) -> Result<(), WorkflowError> {
        let mut runs = self.inner.runs.lock().expect("runs lock");
        for entry in fs::read_dir(self.inner.cfg.data_dir.join("runs"))? {
            let path = entry?.path().join("run.json");
            let Ok(bytes) = fs::read(&path) else { continue };
            let mut run: WorkflowRun = serde_json::from_slice(&bytes)
                .map_err(|e| WorkflowError::InvalidData(format!("{}: {e}", path.display())))?;
            if !run.state.is_terminal() {
                run.interrupt(self.inner.now());
                self.inner.persist_run(&run)?;
            }
            runs.insert(
                run.run_id.clone(),
                Arc::new(RunSlot {
                    run: Mutex::new(run),
                    changed: Condvar::new(),
                    cancel: AtomicBool::new(false),
                    wake: Mutex::new(None),
                }),
            );
        }
        Ok(())
    }

    pub fn archive(&self) -> &Arc<Archive> {
        &self.inner.archive
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.cfg
    }

    pub fn operators(&self) -> Vec<OperatorSpec> {
        self.inner.registry.read().expect("registry lock").specs().cloned().collect()
    }

    pub fn register_operator(&self, spec: OperatorSpec) -> Result<(), WorkflowError> {
        self.inner.registry.write().expect("registry lock").register(spec)?;
        self.wake_dormant();
        Ok(())
    }

    fn wake_dormant(&self) {
        let pending = std::mem::take(&mut *self.inner.dormant.lock().expect("dormant lock"));
        for def in pending {
            match self.register_workflow(&def, None) {
                Ok(_) => {}
                Err(WorkflowError::UnknownOperator(op)) => {
                    tracing::warn!(workflow = %def.name, operator = %op, "workflow waits for its operator");
                    self.inner.dormant.lock().expect("dormant lock").push(def);
                }
                Err(e) => tracing::warn!(workflow = %def.name, error = %e, "stored workflow dropped"),
            }
        }
    }

    /// Registers an operator whose body runs in-process.
    pub fn register_operator_fn(&self, spec: OperatorSpec, body: BuiltinFn) -> Result<(), WorkflowError> {
        let name = spec.name.clone();
        self.register_operator(OperatorSpec { execution: Execution::BuiltIn, ..spec })?;
        self.inner.functions.write().expect("functions lock").insert(name, body);
        Ok(())
    }

    /// Checks `def` against the current registry extended with `extra`.
    pub fn check_definition(&self, def: &WorkflowDefinition, extra: &[OperatorSpec]) -> Result<WorkflowDefinition, WorkflowError> {
        let mut registry = self.inner.registry.read().expect("registry lock").clone();
        for spec in extra {
            registry.register(spec.clone())?;
        }
        validate_definition(def, &registry)
    }

    /// Registers or replaces a workflow. Workflows without a provider are
    /// persisted; a name owned by another provider is refused.
    pub fn register_workflow(&self, def: &WorkflowDefinition, provider: Option<&str>) -> Result<WorkflowDefinition, WorkflowError> {
        let validated = self.check_definition(def, &[])?;
        self.inner.dormant.lock().expect("dormant lock").retain(|d| d.name != validated.name);
        let mut workflows = self.inner.workflows.write().expect("workflows lock");
        if let Some(existing) = workflows.get(&validated.name) {
            if existing.provider.as_deref() != provider {
                return Err(WorkflowError::DuplicateWorkflow(validated.name.clone()));
            }
        }
        let wf = RegisteredWorkflow { definition: validated.clone(), provider: provider.map(String::from) };
        if provider.is_none() {
            let path = self.inner.workflows_dir().join(format!("{}.json", validated.name));
            write_atomic(&path, &serde_json::to_vec_pretty(&wf).expect("workflow serializes"))?;
        }
        workflows.insert(validated.name.clone(), wf);
        Ok(validated)
    }

    /// Drops every workflow and operator contributed by `provider`.
    pub fn unregister_provider(&self, provider: &str) {
        self.inner
            .workflows
            .write()
            .expect("workflows lock")
            .retain(|_, w| w.provider.as_deref() != Some(provider));
        let mut registry = self.inner.registry.write().expect("registry lock");
        let mut functions = self.inner.functions.write().expect("functions lock");
        for spec in registry.specs().filter(|s| s.provider.as_deref() == Some(provider)) {
            functions.remove(&spec.name);
        }
        registry.unregister_provider(provider);
    }

    pub fn workflows(&self) -> Vec<RegisteredWorkflow> {
        self.inner.workflows.read().expect("workflows lock").values().cloned().collect()
    }

    pub fn workflow(&self, name: &str) -> Option<RegisteredWorkflow> {
        self.inner.workflows.read().expect("workflows lock").get(name).cloned()
    }

    /// Ids of unfinished runs that use a workflow or operator of `provider`.
    pub fn active_runs_for_provider(&self, provider: &str) -> Vec<String> {
        let registry = self.inner.registry.read().expect("registry lock");
        let workflows = self.inner.workflows.read().expect("workflows lock");
        let owned = |op: &str| registry.get(op).is_some_and(|s| s.provider.as_deref() == Some(provider));
        self.runs()
            .into_iter()
            .filter(|r| !r.state.is_terminal())
            .filter(|r| {
                workflows
                    .get(&r.definition.name)
                    .is_some_and(|w| w.provider.as_deref() == Some(provider))
                    || r.definition.nodes.iter().any(|n| owned(&n.operator))
            })
            .map(|r| r.run_id)
            .collect()
    }

    /// Starts a run of workflow `name`. `overrides` maps node id to params
    /// merged over the definition's own.
    pub fn start_run(
        &self,
        name: &str,
        cohort: Option<&str>,
        overrides: &BTreeMap<String, BTreeMap<String, Value>>,
        initiated_by: &str,
    ) -> Result<WorkflowRun, WorkflowError> {
        let wf = self.workflow(name).ok_or_else(|| WorkflowError::UnknownWorkflow(name.to_string()))?;
        let mut def = wf.definition;
        for (node, params) in overrides {
            let n = def
                .nodes
                .iter_mut()
                .find(|n| &n.id == node)
                .ok_or_else(|| WorkflowError::InvalidDefinition(format!("override names unknown node {node:?}")))?;
            n.params.extend(params.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        let (def, bindings, specs) = {
            let registry = self.inner.registry.read().expect("registry lock");
            let def = validate_definition(&def, &registry)?;
            let mut bindings = BTreeMap::new();
            let mut specs = BTreeMap::new();
            for n in &def.nodes {
                bindings.insert(n.id.clone(), bind_inputs(&def, n, &registry)?);
                specs.insert(n.id.clone(), registry.get(&n.operator).expect("validated").clone());
            }
            (def, bindings, specs)
        };
        let needs_cohort = bindings.values().any(|b| b.values().any(|b| *b == Binding::RunCohort));
        let series = match cohort {
            Some(c) => self.inner.archive.resolve_cohort(c)?,
            None if needs_cohort => return Err(WorkflowError::MissingCohort),
            None => Vec::new(),
        };

        let created = self.inner.now();
        let run_id = format!("{}-{:08x}", created.format("%Y%m%dT%H%M%S%6f"), rand::thread_rng().gen::<u32>());
        let run = WorkflowRun::new(&run_id, def, cohort.map(String::from), initiated_by, created);
        self.inner.persist_run(&run)?;
        let (tx, rx) = mpsc::channel();
        let slot = Arc::new(RunSlot {
            run: Mutex::new(run.clone()),
            changed: Condvar::new(),
            cancel: AtomicBool::new(false),
            wake: Mutex::new(Some(tx.clone())),
        });
        self.inner.runs.lock().expect("runs lock").insert(run_id.clone(), slot.clone());
        let scheduler = Scheduler { inner: self.inner.clone(), slot, tx, series, bindings, specs };
        thread::Builder::new()
            .name(format!("run-{run_id}"))
            .spawn(move || scheduler.drive(rx))?;
        Ok(run)
    }

    pub fn run(&self, run_id: &str) -> Result<WorkflowRun, WorkflowError> {
        Ok(self.slot(run_id)?.snapshot())
    }

    /// All runs, oldest first.
    pub fn runs(&self) -> Vec<WorkflowRun> {
        let slots: Vec<Arc<RunSlot>> = self.inner.runs.lock().expect("runs lock").values().cloned().collect();
        let mut runs: Vec<WorkflowRun> = slots.iter().map(|s| s.snapshot()).collect();
        runs.sort_by(|a, b| (a.created_at, &a.run_id).cmp(&(b.created_at, &b.run_id)));
        runs
    }

    fn slot(&self, run_id: &str) -> Result<Arc<RunSlot>, WorkflowError> {
        self.inner
            .runs
            .lock()
            .expect("runs lock")
            .get(run_id)
            .cloned()
            .ok_or_else(|| WorkflowError::UnknownRun(run_id.to_string()))
    }

    /// Requests cancellation. Running nodes finish; nothing new starts.
    pub fn cancel(&self, run_id: &str) -> Result<WorkflowRun, WorkflowError> {
        let slot = self.slot(run_id)?;
        let run = slot.snapshot();
        if run.state.is_terminal() || run.cancel_requested || slot.cancel.swap(true, Ordering::SeqCst) {
            return Err(WorkflowError::InvalidTransition(format!("run {run_id} is {:?}", run.state)));
        }
        if let Some(tx) = slot.wake.lock().expect("wake lock").as_ref() {
            let _ = tx.send(Msg::Wake);
        }
        Ok(run)
    }

    /// Blocks until the run is terminal or `timeout` elapses, returning the
    /// latest snapshot either way.
    pub fn wait(&self, run_id: &str, timeout: Option<Duration>) -> Result<WorkflowRun, WorkflowError> {
        let slot = self.slot(run_id)?;
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut run = slot.run.lock().expect("run lock");
        while !run.state.is_terminal() {
            match deadline {
                None => run = slot.changed.wait(run).expect("run lock"),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        break;
                    }
                    run = slot.changed.wait_timeout(run, d - now).expect("run lock").0;
                }
            }
        }
        Ok(run.clone())
    }

    /// Starts a run and waits for it to finish.
    pub fn execute(
        &self,
        name: &str,
        cohort: Option<&str>,
        overrides: &BTreeMap<String, BTreeMap<String, Value>>,
        initiated_by: &str,
    ) -> Result<WorkflowRun, WorkflowError> {
        let run = self.start_run(name, cohort, overrides, initiated_by)?;
        self.wait(&run.run_id, None)
    }

    /// Reads back a persisted output slot.
    pub fn read_artifact(&self, run: &WorkflowRun, node: &str, slot: &str) -> Result<SlotValue, WorkflowError> {
        let artifact = run
            .artifacts
            .get(node)
            .and_then(|a| a.get(slot))
            .ok_or_else(|| WorkflowError::InvalidData(format!("run {} has no artifact {node}.{slot}", run.run_id)))?;
        match artifact {
            Artifact::Series { series_uids } => Ok(SlotValue::Cohort(series_uids.clone())),
            Artifact::Object(obj) => {
                let spec = run
                    .definition
                    .node(node)
                    .and_then(|n| self.inner.registry.read().expect("registry lock").get(&n.operator).cloned())
                    .ok_or_else(|| WorkflowError::UnknownOperator(node.to_string()))?;
                let kind = spec.output(slot).map(|s| s.kind).ok_or_else(|| {
                    WorkflowError::InvalidData(format!("operator {} has no output {slot}", spec.name))
                })?;
                let bytes = self.inner.archive.fetch_object(&obj.bucket, &obj.key)?;
                SlotValue::from_file_bytes(kind, &bytes)
            }
        }
    }
}

struct Scheduler {
    inner: Arc<Inner>,
    slot: Arc<RunSlot>,
    tx: Sender<Msg>,
    series: Vec<String>,
    bindings: BTreeMap<String, BTreeMap<String, Binding>>,
    specs: BTreeMap<String, OperatorSpec>,
}

impl Scheduler {
    fn apply(&self, event: RunEvent) -> Result<WorkflowRun, WorkflowError> {
        let mut run = self.slot.run.lock().expect("run lock");
        let next = advance_run(&run, &event, self.inner.now())?;
        self.inner.persist_run(&next)?;
        *run = next.clone();
        self.slot.changed.notify_all();
        Ok(next)
    }

    fn drive(self, rx: mpsc::Receiver<Msg>) {
        if let Err(e) = self.schedule(rx) {
            tracing::error!(error = %e, "scheduler stopped");
            let mut run = self.slot.run.lock().expect("run lock");
            run.interrupt(self.inner.now());
            let _ = self.inner.persist_run(&run);
            self.slot.changed.notify_all();
        }
        self.slot.wake.lock().expect("wake lock").take();
    }

    fn schedule(&self, rx: mpsc::Receiver<Msg>) -> Result<(), WorkflowError> {
        let run_id = self.slot.snapshot().run_id;
        let mut values: BTreeMap<(String, String), SlotValue> = BTreeMap::new();
        let mut timers: Vec<(Instant, String)> = Vec::new();
        let mut in_flight = 0usize;
        loop {
            let mut run = self.slot.snapshot();
            if run.state.is_terminal() {
                return Ok(());
            }
            if self.slot.cancel.load(Ordering::SeqCst) && !run.cancel_requested {
                run = self.apply(RunEvent::CancelRequested)?;
                timers.clear();
            }
            let now = Instant::now();
            let (due, later): (Vec<_>, Vec<_>) = timers.drain(..).partition(|(at, _)| *at <= now);
            timers = later;
            for (_, node) in due {
                if run.node(&node).is_some_and(|n| n.retry_pending) {
                    run = self.apply(RunEvent::RetryTimer { node })?;
                }
            }
            for node in run.ready_nodes() {
                if in_flight >= self.inner.cfg.worker_count {
                    break;
                }
                let inputs = self.gather(&run, &node, &values)?;
                self.apply(RunEvent::NodeStarted { node: node.clone() })?;
                in_flight += 1;
                let job = NodeJob {
                    inner: self.inner.clone(),
                    run_id: run_id.clone(),
                    node: node.clone(),
                    spec: self.specs[&node].clone(),
                    params: run.definition.node(&node).expect("known node").params.clone(),
                    inputs,
                };
                let tx = self.tx.clone();
                self.inner.spawn(move || {
                    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| job.execute()))
                        .unwrap_or_else(|_| Err("operator panicked".into()));
                    let _ = tx.send(Msg::Finished { node, result });
                });
            }
            if in_flight == 0 && timers.is_empty() {
                let run = self.slot.snapshot();
                if run.state.is_terminal() {
                    return Ok(());
                }
                return Err(WorkflowError::InvalidTransition(format!("run {run_id} stalled in {:?}", run.state)));
            }
            let wait = timers
                .iter()
                .map(|(at, _)| at.saturating_duration_since(Instant::now()))
                .min()
                .unwrap_or(Duration::from_secs(3600));
            match rx.recv_timeout(wait) {
                Ok(Msg::Finished { node, result }) => {
                    in_flight -= 1;
                    let outcome = match result {
                        Ok((outputs, artifacts)) => {
                            for (slot, v) in outputs {
                                values.insert((node.clone(), slot), v);
                            }
                            NodeOutcome::Succeeded { artifacts }
                        }
                        Err(error) => NodeOutcome::Failed { error },
                    };
                    let run = self.apply(RunEvent::NodeFinished { node: node.clone(), outcome })?;
                    if run.node(&node).is_some_and(|n| n.retry_pending) {
                        timers.push((Instant::now() + self.inner.cfg.retry_backoff, node));
                    }
                }
                Ok(Msg::Wake) | Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => unreachable!("scheduler holds a sender"),
            }
        }
    }

    fn gather(
        &self,
        run: &WorkflowRun,
        node: &str,
        values: &BTreeMap<(String, String), SlotValue>,
    ) -> Result<Inputs, WorkflowError> {
        let def = run.definition.node(node).expect("known node");
        let mut inputs = Inputs::new();
        for (slot, binding) in &self.bindings[node] {
            let v = match binding {
                Binding::Upstream { from_node, slot: from_slot } => values
                    .get(&(from_node.clone(), from_slot.clone()))
                    .cloned()
                    .ok_or_else(|| WorkflowError::InvalidTransition(format!("{from_node}.{from_slot} not produced")))?,
                Binding::RunCohort => SlotValue::Cohort(self.series.clone()),
                Binding::NodeParams => SlotValue::Params(def.params.clone()),
            };
            inputs.insert(slot.clone(), v);
        }
        Ok(inputs)
    }
}

struct NodeJob {
    inner: Arc<Inner>,
    run_id: String,
    node: String,
    spec: OperatorSpec,
    params: BTreeMap<String, Value>,
    inputs: Inputs,
}

impl NodeJob {
    fn execute(self) -> Result<(Outputs, BTreeMap<String, Artifact>), String> {
        let workdir = self.inner.run_dir(&self.run_id).join(&self.node);
        fs::create_dir_all(&workdir).map_err(|e| e.to_string())?;
        let outputs = match &self.spec.execution {
            Execution::BuiltIn => {
                let ctx = OpContext {
                    archive: &self.inner.archive,
                    run_id: &self.run_id,
                    node_id: &self.node,
                    exec: self.inner.cfg.exec,
                };
                let custom = self.inner.functions.read().expect("functions lock").get(&self.spec.name).cloned();
                match custom {
                    Some(f) => f(&ctx, self.inputs)?,
                    None => run_builtin(&self.spec.name, &ctx, self.inputs)?,
                }
            }
            Execution::ExternalCommand { argv } => self.run_external(argv, &workdir)?,
        };
        let mut artifacts = BTreeMap::new();
        for out in &self.spec.output_slots {
            let v = outputs.get(&out.name).ok_or_else(|| format!("output slot {:?} not produced", out.name))?;
            if v.kind() != out.kind {
                return Err(format!("output slot {:?} holds {:?}, declared {:?}", out.name, v.kind(), out.kind));
            }
            let artifact = match v {
                SlotValue::Cohort(series) => Artifact::Series { series_uids: series.clone() },
                other => {
                    let bytes = other.to_file_bytes().map_err(|e| e.to_string())?;
                    let ext = out.kind.extension();
                    let media = if ext == "csv" { "text/csv" } else { "application/json" };
                    let key = format!("{}/{}/{}.{ext}", self.run_id, self.node, out.name);
                    let obj = self.inner.archive.store_object(RUNS_BUCKET, &key, media, &bytes).map_err(|e| e.to_string())?;
                    Artifact::Object(obj)
                }
            };
            artifacts.insert(out.name.clone(), artifact);
        }
        Ok((outputs, artifacts))
    }

    fn run_external(&self, argv: &[String], workdir: &Path) -> Result<Outputs, String> {
        let io = |e: std::io::Error| e.to_string();
        let inputs_dir = workdir.join("inputs");
        let outputs_dir = workdir.join("outputs");
        for d in [&inputs_dir, &outputs_dir] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(io)?;
            }
            fs::create_dir_all(d).map_err(io)?;
        }
        for (slot, v) in &self.inputs {
            let path = inputs_dir.join(format!("{slot}.{}", v.kind().extension()));
            fs::write(path, v.to_file_bytes().map_err(|e| e.to_string())?).map_err(io)?;
        }
        let substitute = |token: &str| -> Result<String, String> {
            let mut out = token
                .replace("{exchange}", &workdir.display().to_string())
                .replace("{inputs}", &inputs_dir.display().to_string())
                .replace("{outputs}", &outputs_dir.display().to_string());
            while let Some(start) = out.find("{param:") {
                let end = out[start..].find('}').map(|e| start + e).ok_or("unterminated {param:} token")?;
                let name = &out[start + 7..end];
                let value = match self.params.get(name) {
                    Some(Value::String(s)) => s.clone(),
                    Some(v) => v.to_string(),
                    None => return Err(format!("argv references missing param {name:?}")),
                };
                out.replace_range(start..=end, &value);
            }
            Ok(out)
        };
        let args: Vec<String> = argv.iter().map(|t| substitute(t)).collect::<Result<_, _>>()?;
        let mut program = PathBuf::from(&args[0]);
        if program.is_relative() && args[0].contains('/') {
            if let Some(base) = &self.spec.base_dir {
                program = base.join(program);
            }
        }
        let stdout = fs::File::create(workdir.join("stdout.log")).map_err(io)?;
        let stderr = fs::File::create(workdir.join("stderr.log")).map_err(io)?;
        let status = Command::new(&program)
            .args(&args[1..])
            .current_dir(workdir)
            .stdin(std::process::Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .status()
            .map_err(|e| format!("cannot run {}: {e}", program.display()))?;
        if !status.success() {
            let err = fs::read_to_string(workdir.join("stderr.log")).unwrap_or_default();
            let tail: String = err.lines().rev().take(5).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
            return Err(format!("{} exited with {status}: {tail}", self.spec.name));
        }
        let mut outputs = Outputs::new();
        for out in &self.spec.output_slots {
            let path = outputs_dir.join(format!("{}.{}", out.name, out.kind.extension()));
            let bytes = fs::read(&path).map_err(|_| format!("output file {} missing", path.display()))?;
            let v = SlotValue::from_file_bytes(out.kind, &bytes).map_err(|e| format!("{}: {e}", path.display()))?;
            outputs.insert(out.name.clone(), v);
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::ArchiveConfig;
    use crate::workflow::{NodeStatus, RunState};

    fn engine(workers: usize) -> (tempfile::TempDir, Engine) {
        let dir = tempfile::tempdir().unwrap();
        let archive = Arc::new(Archive::open(dir.path().join("archive"), ArchiveConfig::default()).unwrap());
        let cfg = EngineConfig { worker_count: workers, retry_backoff: Duration::from_millis(5), ..EngineConfig::new(dir.path().join("data")) };
        (dir, Engine::open(cfg, archive).unwrap())
    }

    #[test]
    fn builtin_workflows_are_registered_and_persisted() {
        let (dir, e) = engine(2);
        assert!(e.workflow("threshold_segmentation").is_some());
        assert!(e.workflow("local_train").is_some());
        assert!(dir.path().join("data/workflows/local_train.json").exists());
    }

    #[test]
    fn local_train_workflow_runs_end_to_end() {
        let (_dir, e) = engine(2);
        e.archive().store_object("datasets", "train.csv", "text/csv", b"x,y\n1,2\n").unwrap();
        let overrides = BTreeMap::from([(
            "train".to_string(),
            BTreeMap::from([("w".to_string(), Value::from("0")), ("lr".to_string(), Value::from(0.5))]),
        )]);
        let run = e.execute("local_train", None, &overrides, "tester").unwrap();
        assert_eq!(run.state, RunState::Succeeded, "{run:?}");
        let SlotValue::Model(m) = e.read_artifact(&run, "train", "model").unwrap() else { panic!() };
        assert_eq!((m.weights, m.samples), (vec![2.0], 1));
    }

    #[test]
    fn missing_input_data_fails_after_retries() {
        let (_dir, e) = engine(1);
        let run = e.execute("local_train", None, &BTreeMap::new(), "tester").unwrap();
        assert_eq!(run.state, RunState::Failed);
        assert_eq!(run.node("data").unwrap().attempts, 2);
        assert_eq!(run.node("train").unwrap().state, NodeStatus::Skipped);
    }

    #[test]
    fn unknown_override_node_rejected() {
        let (_dir, e) = engine(1);
        let o = BTreeMap::from([("nope".to_string(), BTreeMap::new())]);
        assert!(matches!(e.start_run("local_train", None, &o, "t"), Err(WorkflowError::InvalidDefinition(_))));
        assert!(matches!(
            e.start_run("threshold_segmentation", None, &BTreeMap::new(), "t"),
            Err(WorkflowError::MissingCohort)
        ));
    }
}
