//! Workflow definitions, planning, the run state machine, built-in operators
//! and the engine that executes runs.

mod definition;
mod engine;
mod operator;
mod ops;
mod state;

use thiserror::Error;

pub use definition::{
    bind_inputs, plan_execution, valid_workflow_name, validate_definition, Binding, ExecutionPlan, InputRef, NodeDef,
    WorkflowDefinition,
};
pub use engine::{builtin_workflows, BuiltinFn, Engine, EngineConfig, RegisteredWorkflow, RUNS_BUCKET};
pub use operator::{
    Execution, ImageItem, Model, OperatorRegistry, OperatorSpec, SlotKind, SlotSpec, SlotValue, Table,
};
pub use ops::{
    builtin_specs, mse_loss, op_local_train, op_region_stats, op_threshold_segment, run_builtin, Inputs, OpContext,
    Outputs, RegionStats,
};
pub use state::{advance_run, Artifact, NodeOutcome, NodeState, NodeStatus, RunEvent, RunState, WorkflowRun};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("cycle through nodes {0:?}")]
    CycleError(Vec<String>),
    #[error("unknown operator {0:?}")]
    UnknownOperator(String),
    #[error("node {node:?} references missing output {from_node}.{slot}")]
    DanglingInput { node: String, from_node: String, slot: String },
    #[error("duplicate node id {0:?}")]
    DuplicateNodeId(String),
    #[error("invalid node id {0:?}")]
    InvalidNodeId(String),
    #[error("node {node:?} slot {slot:?}: {reason}")]
    SlotMismatch { node: String, slot: String, reason: String },
    #[error("invalid workflow definition: {0}")]
    InvalidDefinition(String),
    #[error("invalid operator {name:?}: {reason}")]
    InvalidOperator { name: String, reason: String },
    #[error("invalid slot data: {0}")]
    InvalidData(String),
    #[error("invalid transition: {0}")]
    InvalidTransition(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no training samples")]
    EmptyCohortData,
    #[error("unknown workflow {0:?}")]
    UnknownWorkflow(String),
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("workflow {0:?} already registered")]
    DuplicateWorkflow(String),
    #[error("workflow needs a cohort")]
    MissingCohort,
    #[error(transparent)]
    Archive(#[from] crate::archive::ArchiveError),
    #[error(transparent)]
    Dicom(#[from] crate::dicom::DicomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
