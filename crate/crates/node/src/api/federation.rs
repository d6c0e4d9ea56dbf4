use std::collections::BTreeMap;

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{HeaderMap, HeaderName, HeaderValue, Method, StatusCode, Uri};
use axum::response::Response;
use minipacs_core::auth::Action;
use minipacs_core::federation::{FedRequest, JobSpec};
use serde::Deserialize;
use serde_json::json;

use super::{blocking, json, parse_json, AppState};
use crate::error::ApiError;

pub async fn create_invite(State(st): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    st.mutate(&headers, Action::ManageFederation, "federation:invite".into(), |p, _| {
        Ok(json(StatusCode::CREATED, p.federation.create_invite()?))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkRequest {
    endpoint: String,
    token: String,
}

pub async fn link(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let principal = st.authorize(&headers, Action::ManageFederation, "federation:link")?;
    let req = parse_json::<LinkRequest>(&body);
    let resource = match &req {
        Ok(r) => format!("federation:link:{}", r.endpoint),
        Err(_) => "federation:link".to_string(),
    };
    st.commit(principal, Action::ManageFederation, resource, move |p, _| {
        let req = req?;
        Ok(json(StatusCode::CREATED, p.federation.link_instances(&req.endpoint, &req.token)?))
    })
    .await
}

pub async fn list_links(State(st): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    st.read(&headers, Action::View, "federation:links", |p| {
        let node = &p.federation;
        Ok(json(
            StatusCode::OK,
            json!({
                "instance_id": node.instance_id(),
                "endpoint": node.endpoint(),
                "capabilities": node.capabilities(),
                "links": node.links(),
            }),
        ))
    })
    .await
}

pub async fn start_job(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    st.mutate(&headers, Action::ManageFederation, "federation:job".into(), move |p, who| {
        let spec: JobSpec = parse_json(&body)?;
        Ok(json(StatusCode::ACCEPTED, p.federation.start_job(spec, &who.id)?))
    })
    .await
}

pub async fn list_jobs(State(st): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    st.read(&headers, Action::View, "federation:jobs", |p| Ok(json(StatusCode::OK, p.federation.jobs()))).await
}

pub async fn job(State(st): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    let resource = format!("federation:job:{id}");
    st.read(&headers, Action::View, &resource, move |p| Ok(json(StatusCode::OK, p.federation.job(&id)?))).await
}

/// Peer traffic. Authentication is the signed envelope, checked by the
/// federation node itself.
pub async fn inbound(
    State(st): State<AppState>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let headers: BTreeMap<String, String> = headers
        .iter()
        .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
        .collect();
    let req = FedRequest { method: method.as_str().to_string(), path: uri.path().to_string(), headers, body: body.to_vec() };
    let node = st.0.federation.clone();
    let resp = blocking(move || Ok(node.handle(&req))).await?;
    let mut out = Response::new(Body::from(resp.body));
    *out.status_mut() = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let out_headers = out.headers_mut();
    out_headers.insert("content-type", HeaderValue::from_static("application/json"));
    for (k, v) in resp.headers {
        if let (Ok(k), Ok(v)) = (HeaderName::try_from(k), HeaderValue::try_from(v)) {
            out_headers.insert(k, v);
        }
    }
    Ok(out)
}
