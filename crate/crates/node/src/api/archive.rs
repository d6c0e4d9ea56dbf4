use std::collections::BTreeSet;

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Path, Request, State};
use axum::http::header::{CACHE_CONTROL, CONTENT_TYPE};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use minipacs_core::archive::{CohortQuery, QueryLevel, QueryResult};
use minipacs_core::auth::Action;
use minipacs_core::dicom::{parse_part10, render_preview};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{json, parse_json, AppState, Params};
use crate::error::ApiError;

pub const DEFAULT_PREVIEW_EDGE: u32 = 256;
pub const MAX_PREVIEW_EDGE: u32 = 2048;
pub const DEFAULT_PAGE: usize = 100;
pub const MAX_PAGE: usize = 1000;

/// An absent or empty `query` parameter is the match-all query.
fn query_param(params: &Params) -> Result<CohortQuery, ApiError> {
    match params.get("query") {
        None => Ok(CohortQuery::all()),
        Some(text) => Ok(CohortQuery::decode(text)?),
    }
}

#[derive(Serialize)]
struct StoredInstance {
    filename: Option<String>,
    sop_instance_uid: String,
    series_instance_uid: String,
    study_instance_uid: String,
}

#[derive(Serialize)]
struct FailedFile {
    filename: Option<String>,
    error_code: String,
    message: String,
}

async fn read_files(req: Request) -> Result<Vec<(Option<String>, Vec<u8>)>, ApiError> {
    let mut multipart = Multipart::from_request(req, &()).await.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut files = Vec::new();
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        let name = field.file_name().map(String::from);
        if name.is_none() && field.name() != Some("file") {
            continue;
        }
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        files.push((name, bytes.to_vec()));
    }
    if files.is_empty() {
        return Err(ApiError::bad_request("multipart body carries no file"));
    }
    Ok(files)
}

/// Multipart Part-10 upload, one file per part. Files are ingested
/// independently; the call fails only when none could be stored.
pub async fn upload_studies(State(st): State<AppState>, headers: HeaderMap, req: Request) -> Result<Response, ApiError> {
    let principal = st.authorize(&headers, Action::Ingest, "studies")?;
    let files = read_files(req).await;
    st.commit(principal, Action::Ingest, "studies".into(), move |p, _| {
        let mut stored = Vec::new();
        let mut failed = Vec::new();
        let mut first_error = None;
        for (filename, bytes) in files? {
            match p.archive.ingest_part10(&bytes) {
                Ok(r) => stored.push(StoredInstance {
                    filename,
                    sop_instance_uid: r.sop_instance_uid,
                    series_instance_uid: r.series_instance_uid,
                    study_instance_uid: r.study_instance_uid,
                }),
                Err(e) => {
                    let e = ApiError::from(e);
                    failed.push(FailedFile { filename, error_code: e.code.clone(), message: e.message.clone() });
                    first_error.get_or_insert(e);
                }
            }
        }
        match first_error {
            Some(e) if stored.is_empty() => Err(e),
            _ => Ok(json(StatusCode::OK, json!({ "stored": stored, "failed": failed }))),
        }
    })
    .await
}

fn page<T: Serialize>(items: &[T], offset: usize, limit: usize) -> Value {
    let start = offset.min(items.len());
    let end = start.saturating_add(limit).min(items.len());
    json!(&items[start..end])
}

/// Query results at `level` (default `series`), paged by `offset`/`limit`.
pub async fn instances(State(st): State<AppState>, headers: HeaderMap, params: Params) -> Result<Response, ApiError> {
    st.read(&headers, Action::Query, "instances", move |p| {
        let q = query_param(&params)?;
        let level: QueryLevel = params.get("level").unwrap_or("series").parse()?;
        let offset: usize = params.number("offset", 0)?;
        let limit = params.number("limit", DEFAULT_PAGE)?.min(MAX_PAGE);
        let result = p.archive.query_index(&q, level)?;
        let total = result.len();
        let results = match &result {
            QueryResult::Instance(v) => page(v, offset, limit),
            QueryResult::Series(v) => page(v, offset, limit),
            QueryResult::Study(v) => page(v, offset, limit),
        };
        Ok(json(
            StatusCode::OK,
            json!({ "level": level, "query": q.encode(), "total": total, "offset": offset, "results": results }),
        ))
    })
    .await
}

/// PNG of the series' middle instance, longer edge at most `max_edge`.
pub async fn preview(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path(uid): Path<String>,
    params: Params,
) -> Result<Response, ApiError> {
    let resource = format!("series:{uid}");
    st.read(&headers, Action::View, &resource, move |p| {
        let max_edge: u32 = params.number("max_edge", DEFAULT_PREVIEW_EDGE)?;
        if !(1..=MAX_PREVIEW_EDGE).contains(&max_edge) {
            return Err(ApiError::bad_request(format!("max_edge must lie in 1..={MAX_PREVIEW_EDGE}")));
        }
        let members = p.archive.series_instances(&uid)?;
        let middle = &members[members.len() / 2];
        let raw = p.archive.read_instance(&middle.sop_instance_uid)?;
        let (_, ds) = parse_part10(&raw)?;
        let png = render_preview(&ds, max_edge)?;
        Ok(([(CONTENT_TYPE, "image/png"), (CACHE_CONTROL, "private, max-age=60")], png).into_response())
    })
    .await
}

/// Series counts per value of `attr`; `total` equals the matching series count.
pub async fn aggregate(State(st): State<AppState>, headers: HeaderMap, params: Params) -> Result<Response, ApiError> {
    st.read(&headers, Action::Query, "aggregate", move |p| {
        let attr = params.get("attr").ok_or_else(|| ApiError::bad_request("attr is required"))?;
        let q = query_param(&params)?;
        let counts = p.archive.aggregate_values(attr, &q)?;
        let total: usize = counts.values().sum();
        Ok(json(StatusCode::OK, json!({ "attr": attr, "counts": counts, "total": total })))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TagRequest {
    series_uids: Vec<String>,
    #[serde(default)]
    add: BTreeSet<String>,
    #[serde(default)]
    remove: BTreeSet<String>,
}

pub async fn tags(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    st.mutate(&headers, Action::Tag, "tags".into(), move |p, _| {
        let req: TagRequest = parse_json(&body)?;
        let updated = p.archive.apply_tags(&req.series_uids, &req.add, &req.remove)?;
        Ok(json(StatusCode::OK, json!({ "updated_instances": updated })))
    })
    .await
}

/// A query given either as an object or in its encoded string form.
#[derive(Deserialize)]
#[serde(untagged)]
enum QueryField {
    Encoded(String),
    Query(CohortQuery),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CohortRequest {
    name: String,
    #[serde(default)]
    query: Option<QueryField>,
}

pub async fn create_cohort(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let principal = st.authorize(&headers, Action::Tag, "cohorts")?;
    let req = parse_json::<CohortRequest>(&body);
    let resource = match &req {
        Ok(r) => format!("cohort:{}", r.name),
        Err(_) => "cohorts".to_string(),
    };
    st.commit(principal, Action::Tag, resource, move |p, who| {
        let req = req?;
        let q = match req.query {
            None => CohortQuery::all(),
            Some(QueryField::Encoded(text)) => CohortQuery::decode(&text)?,
            Some(QueryField::Query(q)) => q,
        };
        Ok(json(StatusCode::CREATED, p.archive.create_cohort(&req.name, &q, &who.id)?))
    })
    .await
}

pub async fn list_cohorts(State(st): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    st.read(&headers, Action::View, "cohorts", |p| Ok(json(StatusCode::OK, p.archive.cohorts()))).await
}

pub async fn cohort(State(st): State<AppState>, headers: HeaderMap, Path(name): Path<String>) -> Result<Response, ApiError> {
    let resource = format!("cohort:{name}");
    st.read(&headers, Action::View, &resource, move |p| Ok(json(StatusCode::OK, p.archive.cohort(&name)?))).await
}
