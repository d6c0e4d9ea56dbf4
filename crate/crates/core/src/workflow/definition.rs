//! Workflow documents, validation and Kahn-layer planning.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::semver::Version;

use super::operator::{OperatorRegistry, SlotKind};
use super::WorkflowError;

pub const DEFAULT_RETRY_LIMIT: u32 = 1;

fn default_retry_limit() -> u32 {
    DEFAULT_RETRY_LIMIT
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRef {
    pub from_node: String,
    /// Output slot of the upstream node.
    pub slot: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDef {
    pub id: String,
    pub operator: String,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub inputs: Vec<InputRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowDefinition {
    pub name: String,
    pub version: Version,
    pub nodes: Vec<NodeDef>,
    /// Retries allowed per node after its first attempt.
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
}

impl WorkflowDefinition {
    pub fn from_json(text: &str) -> Result<Self, WorkflowError> {
        serde_json::from_str(text).map_err(|e| WorkflowError::InvalidDefinition(e.to_string()))
    }

    pub fn node(&self, id: &str) -> Option<&NodeDef> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Direct successors of each node.
    pub fn successors(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut out: BTreeMap<&str, BTreeSet<&str>> = self.nodes.iter().map(|n| (n.id.as_str(), BTreeSet::new())).collect();
        for n in &self.nodes {
            for i in &n.inputs {
                if let Some(s) = out.get_mut(i.from_node.as_str()) {
                    s.insert(&n.id);
                }
            }
        }
        out
    }

    /// Direct predecessors of each node.
    pub fn predecessors(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        self.nodes
            .iter()
            .map(|n| (n.id.as_str(), n.inputs.iter().map(|i| i.from_node.as_str()).collect()))
            .collect()
    }

    /// Every node reachable from `id`, excluding `id`.
    pub fn descendants(&self, id: &str) -> BTreeSet<String> {
        let succ = self.successors();
        let mut seen = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            for &s in succ.get(n).into_iter().flatten() {
                if seen.insert(s.to_string()) {
                    stack.push(s);
                }
            }
        }
        seen
    }
}

fn valid_node_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

pub fn valid_workflow_name(name: &str) -> bool {
    (1..=64).contains(&name.len()) && name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

/// How each input slot of a node is fed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Upstream { from_node: String, slot: String },
    /// Series of the run's cohort.
    RunCohort,
    /// The node's own params.
    NodeParams,
}

/// Resolves the input slots of `node`. An input reference binds to the input
/// slot of the same name, else to the first still-unbound input slot of the
/// upstream slot's kind. Unreferenced `cohort` slots take the run cohort,
/// unreferenced `params` slots take the node params, and unreferenced
/// optional slots stay empty.
pub fn bind_inputs(
    def: &WorkflowDefinition,
    node: &NodeDef,
    registry: &OperatorRegistry,
) -> Result<BTreeMap<String, Binding>, WorkflowError> {
    let op = registry
        .get(&node.operator)
        .ok_or_else(|| WorkflowError::UnknownOperator(node.operator.clone()))?;
    let mut bound: BTreeMap<String, Binding> = BTreeMap::new();
    for input in &node.inputs {
        let dangling = || WorkflowError::DanglingInput {
            node: node.id.clone(),
            from_node: input.from_node.clone(),
            slot: input.slot.clone(),
        };
        let upstream = def.node(&input.from_node).ok_or_else(dangling)?;
        let up_op = registry
            .get(&upstream.operator)
            .ok_or_else(|| WorkflowError::UnknownOperator(upstream.operator.clone()))?;
        let kind = up_op.output(&input.slot).ok_or_else(dangling)?.kind;
        let target = match op.input(&input.slot) {
            Some(s) if !bound.contains_key(&s.name) => Some(s),
            Some(_) => None,
            None => op.input_slots.iter().find(|s| s.kind == kind && !bound.contains_key(&s.name)),
        };
        let target = target.ok_or_else(|| WorkflowError::SlotMismatch {
            node: node.id.clone(),
            slot: input.slot.clone(),
            reason: "no free input slot to bind".into(),
        })?;
        if target.kind != kind {
            return Err(WorkflowError::SlotMismatch {
                node: node.id.clone(),
                slot: target.name.clone(),
                reason: format!("expects {:?}, upstream provides {:?}", target.kind, kind),
            });
        }
        bound.insert(
            target.name.clone(),
            Binding::Upstream {
                from_node: input.from_node.clone(),
                slot: input.slot.clone(),
            },
        );
    }
    for slot in &op.input_slots {
        if bound.contains_key(&slot.name) {
            continue;
        }
        let binding = match slot.kind {
            SlotKind::Cohort => Binding::RunCohort,
            SlotKind::Params => Binding::NodeParams,
            _ if slot.optional => continue,
            _ => {
                return Err(WorkflowError::SlotMismatch {
                    node: node.id.clone(),
                    slot: slot.name.clone(),
                    reason: "input slot is not connected".into(),
                })
            }
        };
        bound.insert(slot.name.clone(), binding);
    }
    Ok(bound)
}

/// Checks every structural invariant and returns the definition with nodes
/// sorted by id.
pub fn validate_definition(def: &WorkflowDefinition, registry: &OperatorRegistry) -> Result<WorkflowDefinition, WorkflowError> {
    if !valid_workflow_name(&def.name) {
        return Err(WorkflowError::InvalidDefinition(format!("invalid workflow name {:?}", def.name)));
    }
    if def.nodes.is_empty() {
        return Err(WorkflowError::InvalidDefinition("workflow has no nodes".into()));
    }
    let mut ids = BTreeSet::new();
    for n in &def.nodes {
        if !valid_node_id(&n.id) {
            return Err(WorkflowError::InvalidNodeId(n.id.clone()));
        }
        if !ids.insert(n.id.as_str()) {
            return Err(WorkflowError::DuplicateNodeId(n.id.clone()));
        }
    }
    for n in &def.nodes {
        if registry.get(&n.operator).is_none() {
            return Err(WorkflowError::UnknownOperator(n.operator.clone()));
        }
        if let Some((k, _)) = n.params.iter().find(|(_, v)| v.is_array() || v.is_object()) {
            return Err(WorkflowError::InvalidDefinition(format!(
                "param {k:?} of node {:?} must be a scalar or string",
                n.id
            )));
        }
    }
    for n in &def.nodes {
        for i in &n.inputs {
            if !ids.contains(i.from_node.as_str()) {
                return Err(WorkflowError::DanglingInput {
                    node: n.id.clone(),
                    from_node: i.from_node.clone(),
                    slot: i.slot.clone(),
                });
            }
        }
    }
    if let Some(cycle) = find_cycle(def) {
        return Err(WorkflowError::CycleError(cycle));
    }
    for n in &def.nodes {
        bind_inputs(def, n, registry)?;
    }
    let mut canonical = def.clone();
    canonical.nodes.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(canonical)
}

/// One cycle of the edge relation, rotated to start at its smallest id.
fn find_cycle(def: &WorkflowDefinition) -> Option<Vec<String>> {
    let succ = def.successors();
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    let mut marks: BTreeMap<&str, Mark> = BTreeMap::new();
    fn visit<'a>(
        n: &'a str,
        succ: &BTreeMap<&'a str, BTreeSet<&'a str>>,
        marks: &mut BTreeMap<&'a str, Mark>,
        path: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(n, Mark::Open);
        path.push(n);
        for &s in &succ[n] {
            match marks.get(s) {
                Some(Mark::Open) => {
                    let start = path.iter().position(|&p| p == s).expect("open node is on the path");
                    let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
                    let min = cycle.iter().enumerate().min_by(|a, b| a.1.cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
                    cycle.rotate_left(min);
                    return Some(cycle);
                }
                Some(Mark::Done) => {}
                None => {
                    if let Some(c) = visit(s, succ, marks, path) {
                        return Some(c);
                    }
                }
            }
        }
        path.pop();
        marks.insert(n, Mark::Done);
        None
    }
    let roots: Vec<&str> = succ.keys().copied().collect();
    for n in roots {
        if !marks.contains_key(n) {
            if let Some(c) = visit(n, &succ, &mut marks, &mut Vec::new()) {
                return Some(c);
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub stages: Vec<Vec<String>>,
}

impl ExecutionPlan {
    /// Stage-concatenated node order.
    pub fn order(&self) -> Vec<String> {
        self.stages.iter().flatten().cloned().collect()
    }

    pub fn stage_of(&self, id: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.iter().any(|n| n == id))
    }
}

/// Kahn layering: stage k holds the nodes whose predecessors all lie in
/// earlier stages, sorted by id.
pub fn plan_execution(def: &WorkflowDefinition) -> ExecutionPlan {
    let preds = def.predecessors();
    let mut placed: BTreeSet<&str> = BTreeSet::new();
    let mut stages = Vec::new();
    while placed.len() < preds.len() {
        let stage: Vec<&str> = preds
            .iter()
            .filter(|(n, ps)| !placed.contains(*n) && ps.iter().all(|p| placed.contains(p)))
            .map(|(n, _)| *n)
            .collect();
        assert!(!stage.is_empty(), "plan_execution requires a validated acyclic definition");
        placed.extend(stage.iter().copied());
        stages.push(stage.into_iter().map(str::to_string).collect());
    }
    ExecutionPlan { stages }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, op: &str, inputs: &[(&str, &str)]) -> NodeDef {
        NodeDef {
            id: id.into(),
            operator: op.into(),
            params: BTreeMap::from([("threshold".to_string(), serde_json::json!(100))]),
            inputs: inputs
                .iter()
                .map(|(f, s)| InputRef { from_node: f.to_string(), slot: s.to_string() })
                .collect(),
        }
    }

    fn def(nodes: Vec<NodeDef>) -> WorkflowDefinition {
        WorkflowDefinition { name: "wf".into(), version: Version::new(1, 0, 0), nodes, retry_limit: 1 }
    }

    #[test]
    fn chain_is_valid_and_sorted() {
        let reg = OperatorRegistry::with_builtins();
        let d = def(vec![
            node("c", "region_stats", &[("a", "images"), ("b", "mask")]),
            node("b", "threshold_segment", &[("a", "images")]),
            node("a", "load_images", &[]),
        ]);
        let v = validate_definition(&d, &reg).unwrap();
        assert_eq!(v.nodes.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(plan_execution(&v).stages, vec![vec!["a"], vec!["b"], vec!["c"]]);
    }

    #[test]
    fn two_cycle_named() {
        let reg = OperatorRegistry::with_builtins();
        let d = def(vec![
            node("b", "threshold_segment", &[("a", "mask")]),
            node("a", "threshold_segment", &[("b", "mask")]),
        ]);
        match validate_definition(&d, &reg) {
            Err(WorkflowError::CycleError(c)) => assert_eq!(c, vec!["a", "b"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dangling_slot_and_unknowns() {
        let reg = OperatorRegistry::with_builtins();
        let d = def(vec![node("a", "load_images", &[]), node("b", "threshold_segment", &[("a", "maskX")])]);
        assert!(matches!(validate_definition(&d, &reg), Err(WorkflowError::DanglingInput { .. })));
        let d = def(vec![node("a", "nope", &[])]);
        assert!(matches!(validate_definition(&d, &reg), Err(WorkflowError::UnknownOperator(_))));
        let d = def(vec![node("a", "load_images", &[]), node("a", "load_images", &[])]);
        assert!(matches!(validate_definition(&d, &reg), Err(WorkflowError::DuplicateNodeId(_))));
        let d = def(vec![node("A", "load_images", &[])]);
        assert!(matches!(validate_definition(&d, &reg), Err(WorkflowError::InvalidNodeId(_))));
        let d = def(vec![node("a", "load_images", &[]), node("b", "threshold_segment", &[("zz", "images")])]);
        assert!(matches!(validate_definition(&d, &reg), Err(WorkflowError::DanglingInput { .. })));
    }

    #[test]
    fn diamond_and_single_plans() {
        let reg = OperatorRegistry::with_builtins();
        let d = def(vec![
            node("a", "load_images", &[]),
            node("b", "threshold_segment", &[("a", "images")]),
            node("c", "threshold_segment", &[("a", "images")]),
            node("d", "region_stats", &[("a", "images"), ("b", "mask")]),
        ]);
        let mut d = validate_definition(&d, &reg).unwrap();
        d.nodes[3].inputs.push(InputRef { from_node: "c".into(), slot: "mask".into() });
        let p = plan_execution(&d);
        assert_eq!(p.stages, vec![vec!["a"], vec!["b", "c"], vec!["d"]]);
        assert_eq!(plan_execution(&def(vec![node("a", "load_images", &[])])).stages, vec![vec!["a"]]);
    }

    #[test]
    fn json_field_names() {
        let text = r#"{"name":"seg","version":"1.0.0","nodes":[{"id":"load","operator":"load_images","params":{},"inputs":[]}]}"#;
        let d = WorkflowDefinition::from_json(text).unwrap();
        assert_eq!(d.retry_limit, DEFAULT_RETRY_LIMIT);
        assert!(WorkflowDefinition::from_json(r#"{"name":"x","version":"1.0","nodes":[]}"#).is_err());
    }
}
