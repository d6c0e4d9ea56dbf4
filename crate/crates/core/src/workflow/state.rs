//! The run lifecycle as a pure state machine.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::archive::ObjectRef;

use super::definition::{plan_execution, ExecutionPlan, WorkflowDefinition};
use super::WorkflowError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunState {
    Pending,
    Running,
    Succeeded,
    Failed,
    Canceled,
}

impl RunState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Succeeded | RunState::Failed | RunState::Canceled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeStatus {
    Pending,
    Ready,
    Running,
    Succeeded,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub state: NodeStatus,
    pub attempts: u32,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Failed, with a retry-timer event still due.
    #[serde(default)]
    pub retry_pending: bool,
}

impl NodeState {
    fn new() -> Self {
        NodeState {
            state: NodeStatus::Pending,
            attempts: 0,
            started_at: None,
            ended_at: None,
            error: None,
            retry_pending: false,
        }
    }
}

/// Where a node's output slot was persisted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Artifact {
    Object(ObjectRef),
    Series { series_uids: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowRun {
    pub run_id: String,
    pub definition: WorkflowDefinition,
    pub plan: ExecutionPlan,
    pub cohort: Option<String>,
    pub state: RunState,
    pub node_states: BTreeMap<String, NodeState>,
    /// node id → slot → artifact.
    pub artifacts: BTreeMap<String, BTreeMap<String, Artifact>>,
    pub initiated_by: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub cancel_requested: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum NodeOutcome {
    Succeeded { artifacts: BTreeMap<String, Artifact> },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    NodeStarted { node: String },
    NodeFinished { node: String, outcome: NodeOutcome },
    CancelRequested,
    RetryTimer { node: String },
}

impl WorkflowRun {
    /// A fresh run of a validated definition; root nodes start Ready.
    pub fn new(
        run_id: &str,
        definition: WorkflowDefinition,
        cohort: Option<String>,
        initiated_by: &str,
        created_at: DateTime<Utc>,
    ) -> Self {
        let plan = plan_execution(&definition);
        let node_states = definition.nodes.iter().map(|n| (n.id.clone(), NodeState::new())).collect();
        let mut run = WorkflowRun {
            run_id: run_id.to_string(),
            definition,
            plan,
            cohort,
            state: RunState::Pending,
            node_states,
            artifacts: BTreeMap::new(),
            initiated_by: initiated_by.to_string(),
            created_at,
            cancel_requested: false,
        };
        run.promote();
        run
    }

    pub fn node(&self, id: &str) -> Option<&NodeState> {
        self.node_states.get(id)
    }

    /// Ready nodes in plan order.
    pub fn ready_nodes(&self) -> Vec<String> {
        self.plan
            .order()
            .into_iter()
            .filter(|id| self.node_states[id].state == NodeStatus::Ready)
            .collect()
    }

    pub fn running_count(&self) -> usize {
        self.node_states.values().filter(|n| n.state == NodeStatus::Running).count()
    }

    fn promote(&mut self) {
        let preds = self.definition.predecessors();
        let ready: Vec<String> = self
            .node_states
            .iter()
            .filter(|(id, st)| {
                st.state == NodeStatus::Pending
                    && preds[id.as_str()].iter().all(|p| self.node_states[*p].state == NodeStatus::Succeeded)
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in ready {
            self.node_states.get_mut(&id).expect("known node").state = NodeStatus::Ready;
        }
    }

    fn skip_descendants(&mut self, id: &str) {
        for d in self.definition.descendants(id) {
            let st = self.node_states.get_mut(&d).expect("known node");
            if matches!(st.state, NodeStatus::Pending | NodeStatus::Ready) {
                st.state = NodeStatus::Skipped;
            }
        }
    }

    fn derive_state(&mut self) {
        let unsettled = self.node_states.values().any(|n| {
            matches!(n.state, NodeStatus::Pending | NodeStatus::Ready | NodeStatus::Running) || n.retry_pending
        });
        let started = self.node_states.values().any(|n| n.attempts > 0);
        self.state = if unsettled {
            if started {
                RunState::Running
            } else {
                RunState::Pending
            }
        } else if self.cancel_requested {
            RunState::Canceled
        } else if self.node_states.values().all(|n| n.state == NodeStatus::Succeeded) {
            RunState::Succeeded
        } else {
            RunState::Failed
        };
    }

    /// Settles a run left unfinished by a restart: running nodes fail,
    /// everything unstarted is skipped.
    pub fn interrupt(&mut self, at: DateTime<Utc>) {
        if self.state.is_terminal() {
            return;
        }
        for st in self.node_states.values_mut() {
            st.retry_pending = false;
            match st.state {
                NodeStatus::Running => {
                    st.state = NodeStatus::Failed;
                    st.ended_at = Some(at);
                    st.error = Some("interrupted by restart".into());
                }
                NodeStatus::Pending | NodeStatus::Ready => st.state = NodeStatus::Skipped,
                _ => {}
            }
        }
        self.derive_state();
        if self.state == RunState::Succeeded {
            self.state = RunState::Failed;
        }
    }
}

/// Applies one event. The input run is left untouched; an event that cannot
/// occur in the current state yields `InvalidTransition`.
pub fn advance_run(run: &WorkflowRun, event: &RunEvent, at: DateTime<Utc>) -> Result<WorkflowRun, WorkflowError> {
    let invalid = |m: String| WorkflowError::InvalidTransition(m);
    if run.state.is_terminal() {
        return Err(invalid(format!("run {} is {:?}", run.run_id, run.state)));
    }
    let mut next = run.clone();
    let node_mut = |next: &mut WorkflowRun, id: &str| -> Result<(), WorkflowError> {
        if next.node_states.contains_key(id) {
            Ok(())
        } else {
            Err(WorkflowError::InvalidTransition(format!("unknown node {id}")))
        }
    };
    match event {
        RunEvent::NodeStarted { node } => {
            node_mut(&mut next, node)?;
            let st = next.node_states.get_mut(node).expect("checked");
            if st.state != NodeStatus::Ready {
                return Err(invalid(format!("start of {node} in state {:?}", st.state)));
            }
            st.state = NodeStatus::Running;
            st.attempts += 1;
            st.started_at = Some(at);
            st.ended_at = None;
            st.error = None;
        }
        RunEvent::NodeFinished { node, outcome } => {
            node_mut(&mut next, node)?;
            let retry_limit = next.definition.retry_limit;
            let cancel = next.cancel_requested;
            let st = next.node_states.get_mut(node).expect("checked");
            if st.state != NodeStatus::Running {
                return Err(invalid(format!("finish of {node} in state {:?}", st.state)));
            }
            st.ended_at = Some(at);
            match outcome {
                NodeOutcome::Succeeded { artifacts } => {
                    st.state = NodeStatus::Succeeded;
                    next.artifacts.insert(node.clone(), artifacts.clone());
                    if !cancel {
                        next.promote();
                    }
                }
                NodeOutcome::Failed { error } => {
                    st.state = NodeStatus::Failed;
                    st.error = Some(error.clone());
                    if st.attempts <= retry_limit && !cancel {
                        st.retry_pending = true;
                    } else {
                        next.skip_descendants(node);
                    }
                }
            }
        }
        RunEvent::RetryTimer { node } => {
            node_mut(&mut next, node)?;
            let st = next.node_states.get_mut(node).expect("checked");
            if !(st.state == NodeStatus::Failed && st.retry_pending) {
                return Err(invalid(format!("retry of {node} in state {:?}", st.state)));
            }
            st.retry_pending = false;
            st.state = NodeStatus::Ready;
        }
        RunEvent::CancelRequested => {
            if next.cancel_requested {
                return Err(invalid("cancel already requested".into()));
            }
            next.cancel_requested = true;
            for st in next.node_states.values_mut() {
                if matches!(st.state, NodeStatus::Pending | NodeStatus::Ready) {
                    st.state = NodeStatus::Skipped;
                }
                st.retry_pending = false;
            }
        }
    }
    next.derive_state();
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semver::Version;
    use crate::workflow::definition::{InputRef, NodeDef};

    fn diamond(retry_limit: u32) -> WorkflowRun {
        let n = |id: &str, from: &[&str]| NodeDef {
            id: id.into(),
            operator: "x".into(),
            params: BTreeMap::new(),
            inputs: from.iter().map(|f| InputRef { from_node: f.to_string(), slot: "out".into() }).collect(),
        };
        let def = WorkflowDefinition {
            name: "d".into(),
            version: Version::new(1, 0, 0),
            nodes: vec![n("a", &[]), n("b", &["a"]), n("c", &["a"]), n("d", &["b", "c"])],
            retry_limit,
        };
        WorkflowRun::new("r", def, None, "tester", Utc::now())
    }

    fn step(run: WorkflowRun, e: RunEvent) -> WorkflowRun {
        advance_run(&run, &e, Utc::now()).unwrap()
    }

    fn start(id: &str) -> RunEvent {
        RunEvent::NodeStarted { node: id.into() }
    }

    fn ok(id: &str) -> RunEvent {
        RunEvent::NodeFinished { node: id.into(), outcome: NodeOutcome::Succeeded { artifacts: BTreeMap::new() } }
    }

    fn fail(id: &str) -> RunEvent {
        RunEvent::NodeFinished { node: id.into(), outcome: NodeOutcome::Failed { error: "boom".into() } }
    }

    fn status(run: &WorkflowRun, id: &str) -> NodeStatus {
        run.node_states[id].state
    }

    #[test]
    fn failure_skips_descendants_only() {
        let mut r = diamond(0);
        assert_eq!(r.ready_nodes(), vec!["a"]);
        for e in [start("a"), ok("a"), start("b"), start("c"), fail("b")] {
            r = step(r, e);
        }
        assert_eq!(status(&r, "d"), NodeStatus::Skipped);
        assert_eq!(r.state, RunState::Running);
        r = step(r, ok("c"));
        assert_eq!(status(&r, "c"), NodeStatus::Succeeded);
        assert_eq!(r.state, RunState::Failed);
        assert!(advance_run(&r, &start("d"), Utc::now()).is_err());
    }

    #[test]
    fn retry_then_success() {
        let mut r = diamond(1);
        for e in [start("a"), ok("a"), start("b"), fail("b")] {
            r = step(r, e);
        }
        assert_eq!(status(&r, "b"), NodeStatus::Failed);
        assert!(r.node_states["b"].retry_pending);
        assert!(advance_run(&r, &start("b"), Utc::now()).is_err());
        r = step(r, RunEvent::RetryTimer { node: "b".into() });
        for e in [start("b"), ok("b"), start("c"), ok("c"), start("d"), ok("d")] {
            r = step(r, e);
        }
        assert_eq!(r.state, RunState::Succeeded);
        assert_eq!(r.node_states["b"].attempts, 2);
    }

    #[test]
    fn retries_exhausted() {
        let mut r = diamond(1);
        for e in [start("a"), fail("a"), RunEvent::RetryTimer { node: "a".into() }, start("a"), fail("a")] {
            r = step(r, e);
        }
        assert_eq!(r.node_states["a"].attempts, 2);
        assert_eq!(r.state, RunState::Failed);
        assert!(["b", "c", "d"].iter().all(|n| status(&r, n) == NodeStatus::Skipped));
    }

    #[test]
    fn cancel_mid_run() {
        let mut r = diamond(1);
        for e in [start("a"), ok("a"), start("b"), RunEvent::CancelRequested] {
            r = step(r, e);
        }
        assert_eq!(status(&r, "c"), NodeStatus::Skipped);
        assert_eq!(status(&r, "d"), NodeStatus::Skipped);
        assert_eq!(r.state, RunState::Running);
        assert!(advance_run(&r, &start("c"), Utc::now()).is_err());
        r = step(r, ok("b"));
        assert_eq!(status(&r, "d"), NodeStatus::Skipped);
        assert_eq!(r.state, RunState::Canceled);
        assert!(advance_run(&r, &RunEvent::CancelRequested, Utc::now()).is_err());
    }

    #[test]
    fn cancel_before_start_is_immediate() {
        let r = step(diamond(0), RunEvent::CancelRequested);
        assert_eq!(r.state, RunState::Canceled);
    }

    #[test]
    fn unknown_node_is_invalid() {
        assert!(matches!(
            advance_run(&diamond(0), &start("zz"), Utc::now()),
            Err(WorkflowError::InvalidTransition(_))
        ));
    }
}
