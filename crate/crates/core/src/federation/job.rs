//! Federated jobs: the coordinator loop and the participant side.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::auth::Outcome;
use crate::workflow::{Engine, RunState, SlotValue};

use super::aggregate::{aggregate_round, RoundResult};
use super::message::FedMessage;
use super::node::{write_json_atomic, FederationNode};
use super::FederationError;

/// Participant name for the coordinating instance itself.
pub const LOCAL_PARTICIPANT: &str = "local";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub sample_count: u64,
    pub metrics: BTreeMap<String, f64>,
}

/// Runs one local training step over data that never leaves the instance.
pub trait LocalTrainer: Send + Sync {
    fn train(&self, workflow: &str, params: &[f64], lr: f64) -> Result<TrainOutcome, String>;
}

/// Trains by executing a registered workflow whose `local_train` node
/// receives the incoming parameters.
pub struct EngineTrainer {
    engine: Arc<Engine>,
}

impl EngineTrainer {
    pub fn new(engine: Arc<Engine>) -> Self {
        EngineTrainer { engine }
    }
}

impl LocalTrainer for EngineTrainer {
    fn train(&self, workflow: &str, params: &[f64], lr: f64) -> Result<TrainOutcome, String> {
        let reg = self.engine.workflow(workflow).ok_or_else(|| format!("no workflow {workflow:?}"))?;
        let node = reg
            .definition
            .nodes
            .iter()
            .find(|n| n.operator == "local_train")
            .ok_or_else(|| format!("workflow {workflow:?} has no local_train node"))?;
        let w = params.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",");
        let overrides = BTreeMap::from([(
            node.id.clone(),
            BTreeMap::from([("w".to_string(), serde_json::json!(w)), ("lr".to_string(), serde_json::json!(lr))]),
        )]);
        let run = self
            .engine
            .execute(workflow, None, &overrides, "federation")
            .map_err(|e| e.to_string())?;
        if run.state != RunState::Succeeded {
            let cause = run
                .node_states
                .values()
                .find_map(|s| s.error.clone())
                .unwrap_or_else(|| format!("run {:?}", run.state));
            return Err(cause);
        }
        match self.engine.read_artifact(&run, &node.id, "model").map_err(|e| e.to_string())? {
            SlotValue::Model(m) => Ok(TrainOutcome {
                params: m.weights,
                sample_count: m.samples,
                metrics: m.loss.map(|l| BTreeMap::from([("loss".to_string(), l)])).unwrap_or_default(),
            }),
            _ => Err("model slot holds the wrong kind".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub workflow: String,
    /// Link ids, or `local` for this instance.
    pub participants: Vec<String>,
    pub rounds: u32,
    pub lr: f64,
    pub init_params: Vec<f64>,
    /// Minimum respondents per round; all participants when absent.
    #[serde(default)]
    pub quorum: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub results: Vec<RoundResult>,
    /// participant → reason.
    pub rejected: BTreeMap<String, String>,
    pub missing: Vec<String>,
    pub aggregated: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedJob {
    pub job_id: String,
    pub spec: JobSpec,
    pub state: JobState,
    pub history: Vec<RoundRecord>,
    pub final_params: Option<Vec<f64>>,
    pub error_code: Option<String>,
    pub error: Option<String>,
    pub initiated_by: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug)]
struct Collect {
    round: u32,
    dim: usize,
    expected: BTreeSet<String>,
    results: BTreeMap<String, RoundResult>,
    rejected: BTreeMap<String, String>,
    fatal: Option<String>,
}

impl Collect {
    fn settled(&self) -> bool {
        self.fatal.is_some() || self.expected.iter().all(|p| self.results.contains_key(p) || self.rejected.contains_key(p))
    }
}

#[derive(Debug)]
pub(crate) struct JobSlot {
    job: Mutex<FederatedJob>,
    collect: Mutex<Option<Collect>>,
    cv: Condvar,
}

fn round_path(job_id: &str, round: u32, leaf: &str) -> String {
    format!("/fed/v1/jobs/{job_id}/round/{round}/{leaf}")
}

fn job_id_of(path: &str) -> Option<&str> {
    let rest = path.strip_prefix("/fed/v1/jobs/")?;
    rest.split('/').next()
}

impl FederationNode {
    fn job_path(&self, job_id: &str) -> std::path::PathBuf {
        self.cfg.data_dir.join("jobs").join(format!("{job_id}.json"))
    }

    pub(crate) fn load_jobs(&self) -> Result<(), FederationError> {
        let mut jobs = self.jobs.lock().expect("jobs lock");
        for entry in fs::read_dir(self.cfg.data_dir.join("jobs"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = fs::read(&path)?;
            let mut job: FederatedJob = serde_json::from_slice(&bytes)
                .map_err(|e| FederationError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
            if job.state == JobState::Running {
                job.state = JobState::Aborted;
                job.error_code = Some("Interrupted".into());
                job.error = Some("interrupted by restart".into());
                job.updated_at = self.now();
                write_json_atomic(&path, &job)?;
            }
            jobs.insert(
                job.job_id.clone(),
                Arc::new(JobSlot { job: Mutex::new(job), collect: Mutex::new(None), cv: Condvar::new() }),
            );
        }
        Ok(())
    }

    pub fn job(&self, job_id: &str) -> Result<FederatedJob, FederationError> {
        let slot = self.jobs.lock().expect("jobs lock").get(job_id).cloned().ok_or(FederationError::UnknownJob)?;
        let job = slot.job.lock().expect("job lock").clone();
        Ok(job)
    }

    pub fn jobs(&self) -> Vec<FederatedJob> {
        let slots: Vec<_> = self.jobs.lock().expect("jobs lock").values().cloned().collect();
        let mut out: Vec<_> = slots.iter().map(|s| s.job.lock().expect("job lock").clone()).collect();
        out.sort_by(|a, b| (a.created_at, &a.job_id).cmp(&(b.created_at, &b.job_id)));
        out
    }

    fn validate_job(&self, spec: &JobSpec) -> Result<usize, FederationError> {
        let invalid = |m: String| Err(FederationError::InvalidJob(m));
        if spec.participants.is_empty() {
            return invalid("no participants".into());
        }
        let unique: BTreeSet<_> = spec.participants.iter().collect();
        if unique.len() != spec.participants.len() {
            return invalid("duplicate participant".into());
        }
        if spec.rounds == 0 {
            return invalid("rounds must be positive".into());
        }
        if spec.init_params.is_empty() || spec.init_params.iter().any(|v| !v.is_finite()) {
            return invalid("init_params must be a non-empty finite vector".into());
        }
        if !(spec.lr.is_finite() && spec.lr > 0.0) {
            return invalid("lr must be positive".into());
        }
        let quorum = spec.quorum.unwrap_or(spec.participants.len());
        if quorum == 0 || quorum > spec.participants.len() {
            return invalid(format!("quorum {quorum} outside 1..={}", spec.participants.len()));
        }
        for p in &spec.participants {
            if p == LOCAL_PARTICIPANT {
                if !self.cfg.capabilities.contains(&spec.workflow) {
                    return Err(FederationError::CapabilityMissing(format!("local does not offer {}", spec.workflow)));
                }
                continue;
            }
            let link = self.link(p).ok_or_else(|| FederationError::UnknownLink(p.clone()))?;
            if !link.capabilities.contains(&spec.workflow) {
                return Err(FederationError::CapabilityMissing(format!("{p} does not offer {}", spec.workflow)));
            }
        }
        Ok(quorum)
    }

    fn create_job(&self, spec: JobSpec, initiated_by: &str) -> Result<(Arc<JobSlot>, usize), FederationError> {
        let quorum = self.validate_job(&spec)?;
        let now = self.now();
        let mut suffix = [0u8; 4];
        rand::thread_rng().fill_bytes(&mut suffix);
        let job_id = format!("fj-{}-{}", now.format("%Y%m%dT%H%M%S%6f"), hex::encode(suffix));
        let job = FederatedJob {
            job_id: job_id.clone(),
            spec,
            state: JobState::Running,
            history: Vec::new(),
            final_params: None,
            error_code: None,
            error: None,
            initiated_by: initiated_by.to_string(),
            created_at: now,
            updated_at: now,
        };
        write_json_atomic(&self.job_path(&job_id), &job)?;
        let slot = Arc::new(JobSlot { job: Mutex::new(job), collect: Mutex::new(None), cv: Condvar::new() });
        self.jobs.lock().expect("jobs lock").insert(job_id, slot.clone());
        Ok((slot, quorum))
    }

    /// Starts a job on a background thread.
    pub fn start_job(self: &Arc<Self>, spec: JobSpec, initiated_by: &str) -> Result<FederatedJob, FederationError> {
        let (slot, quorum) = self.create_job(spec, initiated_by)?;
        let snapshot = slot.job.lock().expect("job lock").clone();
        let node = Arc::clone(self);
        std::thread::spawn(move || {
            let _ = node.drive_job(&slot, quorum);
        });
        Ok(snapshot)
    }

    /// Runs a job to completion. On abort the error is returned and the
    /// job record keeps its partial history.
    pub fn run_federated_job(self: &Arc<Self>, spec: JobSpec, initiated_by: &str) -> Result<FederatedJob, FederationError> {
        let (slot, quorum) = self.create_job(spec, initiated_by)?;
        self.drive_job(&slot, quorum)?;
        let job = slot.job.lock().expect("job lock").clone();
        Ok(job)
    }

    fn finish_job(&self, slot: &JobSlot, outcome: Result<Vec<f64>, &FederationError>) {
        let mut job = slot.job.lock().expect("job lock");
        match outcome {
            Ok(params) => {
                job.state = JobState::Completed;
                job.final_params = Some(params);
            }
            Err(e) => {
                job.state = JobState::Aborted;
                job.error_code = Some(e.code().to_string());
                job.error = Some(e.to_string());
            }
        }
        job.updated_at = self.now();
        if let Err(e) = write_json_atomic(&self.job_path(&job.job_id), &*job) {
            tracing::error!(job = %job.job_id, error = %e, "persisting job failed");
        }
    }

    fn drive_job(self: &Arc<Self>, slot: &Arc<JobSlot>, quorum: usize) -> Result<(), FederationError> {
        let result = self.drive_rounds(slot, quorum);
        *slot.collect.lock().expect("collect lock") = None;
        match result {
            Ok(params) => {
                self.finish_job(slot, Ok(params));
                Ok(())
            }
            Err(e) => {
                let job_id = slot.job.lock().expect("job lock").job_id.clone();
                if matches!(e, FederationError::GuardViolation(_)) {
                    self.audit_event("federation", "fed.job.abort", &format!("job:{job_id}: {e}"), Outcome::Denied);
                }
                self.finish_job(slot, Err(&e));
                Err(e)
            }
        }
    }

    fn drive_rounds(self: &Arc<Self>, slot: &Arc<JobSlot>, quorum: usize) -> Result<Vec<f64>, FederationError> {
        let (job_id, spec) = {
            let job = slot.job.lock().expect("job lock");
            (job.job_id.clone(), job.spec.clone())
        };
        let mut params = spec.init_params.clone();
        for round in 0..spec.rounds {
            *slot.collect.lock().expect("collect lock") = Some(Collect {
                round,
                dim: params.len(),
                expected: spec.participants.iter().cloned().collect(),
                results: BTreeMap::new(),
                rejected: BTreeMap::new(),
                fatal: None,
            });
            let mut missing = Vec::new();
            for p in &spec.participants {
                if p == LOCAL_PARTICIPANT {
                    let node = Arc::clone(self);
                    let (job_id, workflow, params, lr) = (job_id.clone(), spec.workflow.clone(), params.clone(), spec.lr);
                    std::thread::spawn(move || {
                        let outcome = node.trainer.train(&workflow, &params, lr);
                        let _ = node.deliver(&job_id, round, LOCAL_PARTICIPANT, outcome);
                    });
                    continue;
                }
                let msg = FedMessage::ParameterVector {
                    job_id: job_id.clone(),
                    round,
                    params: params.clone(),
                    workflow: Some(spec.workflow.clone()),
                    lr: Some(spec.lr),
                    sample_count: None,
                    metrics: BTreeMap::new(),
                };
                let Some(link) = self.link(p) else {
                    self.reject(slot, p, "link removed".into());
                    continue;
                };
                let path = round_path(&job_id, round, "params");
                match self.call(&link.remote_endpoint, &path, &link.shared_secret, &format!("link:{p}"), &[], &msg) {
                    Ok(_) => {}
                    Err(e @ FederationError::GuardViolation(_)) => return Err(e),
                    Err(FederationError::EndpointUnreachable(_)) => {
                        missing.push(p.clone());
                        self.reject(slot, p, String::new());
                    }
                    Err(e) => self.reject(slot, p, e.to_string()),
                }
            }

            let deadline = Instant::now() + self.cfg.round_timeout;
            let mut guard = slot.collect.lock().expect("collect lock");
            while !guard.as_ref().expect("collect present").settled() {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    break;
                }
                guard = slot.cv.wait_timeout(guard, left).expect("collect lock").0;
            }
            let collect = guard.take().expect("collect present");
            drop(guard);
            if let Some(reason) = collect.fatal {
                return Err(FederationError::GuardViolation(reason));
            }
            let mut rejected = collect.rejected;
            rejected.retain(|p, _| !missing.contains(p));
            for p in &collect.expected {
                if !collect.results.contains_key(p) && !rejected.contains_key(p) && !missing.contains(p) {
                    missing.push(p.clone());
                }
            }
            let results: Vec<RoundResult> = spec
                .participants
                .iter()
                .filter_map(|p| collect.results.get(p).cloned())
                .collect();
            let respondents = results.len();
            let aggregated = if respondents >= quorum { Some(aggregate_round(&results)) } else { None };
            let mut record = RoundRecord { round, results, rejected: rejected.clone(), missing, aggregated: None };
            let outcome = match aggregated {
                Some(Ok(next)) => {
                    record.aggregated = Some(next.clone());
                    Ok(next)
                }
                Some(Err(e)) => Err(e),
                None => Err(match rejected.iter().next() {
                    Some((participant, reason)) => FederationError::ParticipantRejected {
                        participant: participant.clone(),
                        reason: reason.clone(),
                    },
                    None => FederationError::QuorumNotMet { round, respondents, quorum },
                }),
            };
            {
                let mut job = slot.job.lock().expect("job lock");
                job.history.push(record);
                job.updated_at = self.now();
                write_json_atomic(&self.job_path(&job_id), &*job)?;
            }
            params = outcome?;
        }
        Ok(params)
    }

    fn reject(&self, slot: &JobSlot, participant: &str, reason: String) {
        if let Some(c) = slot.collect.lock().expect("collect lock").as_mut() {
            c.rejected.insert(participant.to_string(), reason);
        }
        slot.cv.notify_all();
    }

    /// Records one participant's answer for the round in progress.
    fn deliver(&self, job_id: &str, round: u32, participant: &str, outcome: Result<TrainOutcome, String>) -> Result<(), FederationError> {
        let slot = self.jobs.lock().expect("jobs lock").get(job_id).cloned().ok_or(FederationError::UnknownJob)?;
        let mut guard = slot.collect.lock().expect("collect lock");
        let c = guard
            .as_mut()
            .filter(|c| c.round == round)
            .ok_or_else(|| FederationError::InvalidMessage(format!("round {round} of {job_id} is not open")))?;
        if !c.expected.contains(participant) {
            return Err(FederationError::InvalidMessage(format!("{participant} is not a participant of {job_id}")));
        }
        if c.results.contains_key(participant) || c.rejected.contains_key(participant) {
            return Err(FederationError::InvalidMessage(format!("duplicate result from {participant}")));
        }
        match outcome {
            Ok(t) if t.params.len() != c.dim => {
                c.rejected.insert(
                    participant.to_string(),
                    format!("returned {} parameters, expected {}", t.params.len(), c.dim),
                );
            }
            Ok(t) if t.params.iter().any(|v| !v.is_finite()) => {
                c.rejected.insert(participant.to_string(), "returned non-finite parameters".into());
            }
            Ok(t) => {
                c.results.insert(
                    participant.to_string(),
                    RoundResult { participant: participant.to_string(), params: t.params, sample_count: t.sample_count, metrics: t.metrics },
                );
            }
            Err(reason) => {
                c.rejected.insert(participant.to_string(), reason);
            }
        }
        drop(guard);
        slot.cv.notify_all();
        Ok(())
    }

    /// A guard denial on a job path aborts that job.
    pub(crate) fn fail_job_for_path(&self, path: &str, e: &FederationError) {
        let Some(job_id) = job_id_of(path) else { return };
        let Some(slot) = self.jobs.lock().expect("jobs lock").get(job_id).cloned() else { return };
        if let Some(c) = slot.collect.lock().expect("collect lock").as_mut() {
            c.fatal = Some(e.to_string());
        }
        slot.cv.notify_all();
    }

    pub(crate) fn accept_params(&self, peer: &str, job_id: &str, round: u32, msg: FedMessage) -> Result<FedMessage, FederationError> {
        let FedMessage::ParameterVector { job_id: jid, round: r, params, workflow, lr, .. } = msg else {
            return Err(FederationError::InvalidMessage("expected a parameter vector".into()));
        };
        if jid != job_id || r != round {
            return Err(FederationError::InvalidMessage("body does not match path".into()));
        }
        let workflow = workflow.ok_or_else(|| FederationError::InvalidMessage("workflow missing".into()))?;
        let lr = lr.ok_or_else(|| FederationError::InvalidMessage("lr missing".into()))?;
        if !self.cfg.capabilities.contains(&workflow) {
            self.audit_event(&format!("peer:{peer}"), "fed.train", &format!("workflow:{workflow}"), Outcome::Denied);
            return Err(FederationError::CapabilityMissing(format!("{} does not offer {workflow}", self.instance_id)));
        }
        let link = self.link(peer).ok_or_else(|| FederationError::UnknownLink(peer.to_string()))?;
        self.audit_event(&format!("peer:{peer}"), "fed.train", &format!("job:{job_id}/round:{round}"), Outcome::Allowed);
        let node = self.self_arc();
        let job_id = job_id.to_string();
        let peer = peer.to_string();
        std::thread::spawn(move || {
            let reply = match node.trainer.train(&workflow, &params, lr) {
                Ok(t) => FedMessage::ParameterVector {
                    job_id: job_id.clone(),
                    round,
                    params: t.params,
                    workflow: None,
                    lr: None,
                    sample_count: Some(t.sample_count),
                    metrics: t.metrics,
                },
                Err(reason) => {
                    let reason: String = reason.chars().take(400).collect();
                    FedMessage::control("rejected", &[("reason", &reason)])
                }
            };
            let path = round_path(&job_id, round, "result");
            let scope = format!("link:{peer}");
            if let Err(e) = node.call(&link.remote_endpoint, &path, &link.shared_secret, &scope, &[], &reply) {
                tracing::warn!(job = %job_id, round, error = %e, "returning round result failed");
            }
        });
        Ok(FedMessage::control("accepted", &[]))
    }

    pub(crate) fn accept_result(&self, peer: &str, job_id: &str, round: u32, msg: FedMessage) -> Result<FedMessage, FederationError> {
        let outcome = match msg {
            FedMessage::ParameterVector { job_id: jid, round: r, params, sample_count, metrics, .. } => {
                if jid != job_id || r != round {
                    return Err(FederationError::InvalidMessage("body does not match path".into()));
                }
                let sample_count = sample_count.ok_or_else(|| FederationError::InvalidMessage("sample_count missing".into()))?;
                Ok(TrainOutcome { params, sample_count, metrics })
            }
            FedMessage::Control { action, args } if action == "rejected" => {
                Err(args.get("reason").cloned().unwrap_or_else(|| "rejected".into()))
            }
            other => return Err(FederationError::InvalidMessage(format!("unexpected {} result", other.kind()))),
        };
        self.deliver(job_id, round, peer, outcome)?;
        Ok(FedMessage::control("ack", &[]))
    }
}
