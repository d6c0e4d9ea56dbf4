use std::collections::BTreeSet;

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Path, Request, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use minipacs_core::auth::{verify_chain, verify_file, Action, AuditError, Role};
use minipacs_core::extension::ExtensionError;
use minipacs_core::semver::Version;
use serde::Deserialize;
use serde_json::json;

use super::{blocking, json, parse_json, AppState, Params};
use crate::error::ApiError;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LoginRequest {
    username: String,
    password: String,
}

pub async fn login(State(st): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: LoginRequest = parse_json(&body)?;
    let platform = st.0.clone();
    blocking(move || {
        let session = platform.auth.login(&req.username, &req.password)?;
        let principal = platform.auth.authenticate(&session.token)?;
        Ok(json(
            StatusCode::OK,
            json!({
                "token": session.token,
                "issued_at": session.issued_at,
                "expires_at": session.expires_at,
                "principal": principal.view(),
            }),
        ))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewUser {
    username: String,
    password: String,
    roles: BTreeSet<Role>,
}

pub async fn list_users(State(st): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    st.read(&headers, Action::ManageUsers, "users", |p| Ok(json(StatusCode::OK, p.auth.users()))).await
}

pub async fn add_user(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let principal = st.authorize(&headers, Action::ManageUsers, "users")?;
    let req = parse_json::<NewUser>(&body);
    let resource = match &req {
        Ok(u) => format!("user:{}", u.username),
        Err(_) => "users".to_string(),
    };
    st.commit(principal, Action::ManageUsers, resource, move |p, _| {
        let u = req?;
        if u.roles.is_empty() {
            return Err(ApiError::bad_request("at least one role is required"));
        }
        Ok(json(StatusCode::CREATED, p.auth.add_user(&u.username, &u.password, u.roles)?))
    })
    .await
}

pub async fn audit(State(st): State<AppState>, headers: HeaderMap, params: Params) -> Result<Response, ApiError> {
    let after: Option<u64> = params.get("after").map(str::parse).transpose().map_err(|_| ApiError::bad_request("after must be a sequence number"))?;
    let limit: usize = params.number("limit", 1000)?;
    st.read(&headers, Action::ManageUsers, "audit", move |p| {
        let (events, chain) = match p.audit.events() {
            // The file check also catches edits that leave field values intact.
            Ok(events) => {
                let chain = verify_chain(&events).and(verify_file(p.audit.path()).map(drop));
                (events, chain)
            }
            // An unreadable line is itself a break in the chain.
            Err(AuditError::Corrupt { line, .. }) => {
                (Vec::new(), Err(verify_file(p.audit.path()).err().unwrap_or(line.saturating_sub(1))))
            }
            Err(e) => return Err(e.into()),
        };
        let total = events.len();
        let page: Vec<_> = events.into_iter().filter(|e| after.is_none_or(|a| e.seq > a)).take(limit).collect();
        Ok(json(
            StatusCode::OK,
            json!({
                "total": total,
                "chain_valid": chain.is_ok(),
                "first_invalid": chain.err(),
                "events": page,
            }),
        ))
    })
    .await
}

pub async fn list_extensions(State(st): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    st.read(&headers, Action::View, "extensions", |p| {
        let available = if p.extensions.has_registry() {
            match p.extensions.registry_index() {
                Ok(index) => json!(index),
                Err(e) => json!({"error_code": e.code(), "message": e.to_string()}),
            }
        } else {
            serde_json::Value::Null
        };
        Ok(json(StatusCode::OK, json!({"installed": p.extensions.installed(), "available": available})))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryInstall {
    name: String,
    #[serde(default)]
    version: Option<Version>,
}

enum InstallRequest {
    Upload(Vec<u8>),
    Registry(RegistryInstall),
}

/// The first file part of a multipart body.
async fn first_file(req: Request) -> Result<Vec<u8>, ApiError> {
    let mut multipart = Multipart::from_request(req, &()).await.map_err(|e| ApiError::bad_request(e.body_text()))?;
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        if field.file_name().is_some() {
            let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
            return Ok(bytes.to_vec());
        }
    }
    Err(ApiError::bad_request("multipart body carries no file"))
}

async fn read_install(req: Request) -> Result<InstallRequest, ApiError> {
    let is_json = req
        .headers()
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    if is_json {
        let body = Bytes::from_request(req, &()).await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        Ok(InstallRequest::Registry(parse_json(&body)?))
    } else {
        Ok(InstallRequest::Upload(first_file(req).await?))
    }
}

/// Multipart package upload, or JSON `{name, version}` for a registry install.
pub async fn install_extension(State(st): State<AppState>, headers: HeaderMap, req: Request) -> Result<Response, ApiError> {
    let principal = st.authorize(&headers, Action::ManageExtensions, "extensions")?;
    let input = read_install(req).await;
    let resource = match &input {
        Ok(InstallRequest::Registry(r)) => format!("extension:{}", r.name),
        _ => "extension:upload".to_string(),
    };
    st.commit(principal, Action::ManageExtensions, resource, move |p, _| {
        let installed = match input? {
            InstallRequest::Upload(bytes) => p.extensions.install_upload(&bytes)?,
            InstallRequest::Registry(r) => p.extensions.install_from_registry(&r.name, r.version.as_ref())?,
        };
        Ok(json(StatusCode::CREATED, json!({ "installed": installed })))
    })
    .await
}

pub async fn uninstall_extension(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path(name): Path<String>,
) -> Result<Response, ApiError> {
    st.mutate(&headers, Action::ManageExtensions, format!("extension:{name}"), move |p, _| {
        Ok(json(StatusCode::OK, p.extensions.uninstall(&name)?))
    })
    .await
}

fn media_type(path: &str) -> &'static str {
    match path.rsplit_once('.').map(|(_, ext)| ext.to_ascii_lowercase()).as_deref() {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("txt") => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

pub async fn extension_asset(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path((name, path)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let resource = format!("extension:{name}/{path}");
    st.read(&headers, Action::View, &resource, move |p| match p.extensions.ui_asset(&name, &path) {
        Ok(bytes) => Ok(([(CONTENT_TYPE, media_type(&path))], bytes).into_response()),
        Err(ExtensionError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ApiError::not_found(format!("no asset {path}")))
        }
        Err(e) => Err(e.into()),
    })
    .await
}
