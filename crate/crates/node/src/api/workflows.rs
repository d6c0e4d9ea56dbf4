use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use minipacs_core::auth::Action;
use minipacs_core::workflow::{plan_execution, Artifact, OperatorSpec};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{json, parse_json, AppState};
use crate::error::ApiError;

/// Each workflow with its stage plan and the specs of the operators it
/// uses, from which launch forms derive their parameter inputs.
pub async fn list_workflows(State(st): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    st.read(&headers, Action::View, "workflows", |p| {
        let specs: BTreeMap<String, OperatorSpec> = p
            .engine
            .operators()
            .into_iter()
            .map(|s| (s.name.clone(), OperatorSpec { base_dir: None, ..s }))
            .collect();
        let list: Vec<Value> = p
            .engine
            .workflows()
            .into_iter()
            .map(|w| {
                let used: BTreeMap<&str, &OperatorSpec> = w
                    .definition
                    .nodes
                    .iter()
                    .filter_map(|n| specs.get(&n.operator).map(|s| (s.name.as_str(), s)))
                    .collect();
                json!({
                    "name": w.definition.name,
                    "version": w.definition.version,
                    "provider": w.provider,
                    "definition": w.definition,
                    "stages": plan_execution(&w.definition).stages,
                    "operators": used.into_values().collect::<Vec<_>>(),
                })
            })
            .collect();
        Ok(json(StatusCode::OK, list))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRequest {
    #[serde(default)]
    cohort: Option<String>,
    /// Node id → parameter overrides.
    #[serde(default)]
    params: BTreeMap<String, BTreeMap<String, Value>>,
}

pub async fn start_run(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path(name): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    st.mutate(&headers, Action::RunWorkflow, format!("workflow:{name}"), move |p, who| {
        let req: RunRequest = if body.is_empty() { parse_json(b"{}")? } else { parse_json(&body)? };
        let run = p.engine.start_run(&name, req.cohort.as_deref(), &req.params, &who.id)?;
        Ok(json(StatusCode::CREATED, run))
    })
    .await
}

pub async fn list_runs(State(st): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    st.read(&headers, Action::View, "runs", |p| Ok(json(StatusCode::OK, p.engine.runs()))).await
}

pub async fn run(State(st): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    let resource = format!("run:{id}");
    st.read(&headers, Action::View, &resource, move |p| Ok(json(StatusCode::OK, p.engine.run(&id)?))).await
}

pub async fn cancel_run(State(st): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    st.mutate(&headers, Action::RunWorkflow, format!("run:{id}"), move |p, _| {
        p.engine.cancel(&id)?;
        Ok(json(StatusCode::ACCEPTED, p.engine.run(&id)?))
    })
    .await
}

/// The stored bytes of one persisted output slot.
pub async fn artifact(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path((id, node, slot)): Path<(String, String, String)>,
) -> Result<Response, ApiError> {
    let resource = format!("run:{id}/{node}/{slot}");
    st.read(&headers, Action::View, &resource, move |p| {
        let run = p.engine.run(&id)?;
        match run.artifacts.get(&node).and_then(|a| a.get(&slot)) {
            Some(Artifact::Object(obj)) => {
                let bytes = p.archive.fetch_object(&obj.bucket, &obj.key)?;
                Ok(([(CONTENT_TYPE, obj.media_type.clone())], bytes).into_response())
            }
            Some(Artifact::Series { series_uids }) => {
                Ok(json(StatusCode::OK, json!({ "series_instance_uids": series_uids })))
            }
            None => Err(ApiError::not_found(format!("run {id} has no artifact {node}.{slot}"))),
        }
    })
    .await
}
