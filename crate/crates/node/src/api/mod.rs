//! The HTTP JSON API under `/api/v1` and the federation endpoint under
//! `/fed/v1`.

mod admin;
mod archive;
mod federation;
mod workflows;

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, FromRequestParts, Query};
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use minipacs_core::auth::{Action, Outcome, Principal};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::ApiError;
use crate::platform::Platform;

pub const API_PREFIX: &str = "/api/v1";

/// Uploads of studies and extension packages.
const UPLOAD_LIMIT: usize = 512 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState(pub Arc<Platform>);

pub fn router(platform: Arc<Platform>) -> Router {
    let api = Router::new()
        .route("/login", post(admin::login))
        .route("/users", get(admin::list_users).post(admin::add_user))
        .route("/audit", get(admin::audit))
        .route("/studies", post(archive::upload_studies).layer(DefaultBodyLimit::max(UPLOAD_LIMIT)))
        .route("/instances", get(archive::instances))
        .route("/series/{uid}/preview.png", get(archive::preview))
        .route("/aggregate", get(archive::aggregate))
        .route("/tags", post(archive::tags))
        .route("/cohorts", get(archive::list_cohorts).post(archive::create_cohort))
        .route("/cohorts/{name}", get(archive::cohort))
        .route("/workflows", get(workflows::list_workflows))
        .route("/workflows/{name}/runs", post(workflows::start_run))
        .route("/runs", get(workflows::list_runs))
        .route("/runs/{id}", get(workflows::run))
        .route("/runs/{id}/cancel", post(workflows::cancel_run))
        .route("/runs/{id}/artifacts/{node}/{slot}", get(workflows::artifact))
        .route(
            "/extensions",
            get(admin::list_extensions).post(admin::install_extension).layer(DefaultBodyLimit::max(UPLOAD_LIMIT)),
        )
        .route("/extensions/{name}", delete(admin::uninstall_extension))
        .route("/extensions/{name}/assets/{*path}", get(admin::extension_asset))
        .route("/federation/invites", post(federation::create_invite))
        .route("/federation/links", get(federation::list_links).post(federation::link))
        .route("/federation/jobs", get(federation::list_jobs).post(federation::start_job))
        .route("/federation/jobs/{id}", get(federation::job));
    Router::new()
        .nest(API_PREFIX, api)
        .route(
            "/fed/v1/{*rest}",
            post(federation::inbound)
                .layer(DefaultBodyLimit::max(minipacs_core::federation::DEFAULT_MAX_BODY + 1)),
        )
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async { ApiError::new(405, "MethodNotAllowed", "method not allowed") })
        .with_state(AppState(platform))
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    let value = headers.get(AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim())
}

impl AppState {
    /// Denials are audited by the auth service.
    fn authorize(&self, headers: &HeaderMap, action: Action, resource: &str) -> Result<Principal, ApiError> {
        Ok(self.0.auth.authorize(bearer(headers), action, resource)?)
    }

    /// Runs a read-only operation off the async executor.
    async fn read<T, F>(&self, headers: &HeaderMap, action: Action, resource: &str, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Platform) -> Result<T, ApiError> + Send + 'static,
    {
        self.authorize(headers, action, resource)?;
        let platform = self.0.clone();
        blocking(move || f(&platform)).await
    }

    /// Runs a state-mutating operation for an authorized principal and
    /// appends exactly one audit event for it.
    async fn commit<T, F>(&self, principal: Principal, action: Action, resource: String, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Platform, &Principal) -> Result<T, ApiError> + Send + 'static,
    {
        let platform = self.0.clone();
        blocking(move || {
            let result = f(&platform, &principal);
            let outcome = if result.is_ok() { Outcome::Allowed } else { Outcome::Error };
            platform.audit.append(&principal.id, action.as_str(), &resource, outcome)?;
            result
        })
        .await
    }

    /// `authorize` then `commit`.
    async fn mutate<T, F>(&self, headers: &HeaderMap, action: Action, resource: String, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Platform, &Principal) -> Result<T, ApiError> + Send + 'static,
    {
        let principal = self.authorize(headers, action, &resource)?;
        self.commit(principal, action, resource, f).await
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(400, "InvalidBody", e.to_string()))
}

fn json<T: Serialize>(status: StatusCode, value: T) -> Response {
    (status, Json(value)).into_response()
}

/// Query-string parameters; malformed strings are a 400 in the API's error
/// format.
pub struct Params(BTreeMap<String, String>);

impl Params {
    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn number<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ApiError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ApiError::bad_request(format!("{key} must be a non-negative integer"))),
        }
    }
}

impl<S: Send + Sync> FromRequestParts<S> for Params {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        Query::<BTreeMap<String, String>>::from_request_parts(parts, state)
            .await
            .map(|Query(q)| Params(q))
            .map_err(|e| ApiError::bad_request(e.body_text()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::http::HeaderValue;

    #[test]
    fn bearer_scheme_is_case_insensitive() {
        let mut h = HeaderMap::new();
        assert_eq!(bearer(&h), None);
        h.insert(AUTHORIZATION, HeaderValue::from_static("Bearer abc"));
        assert_eq!(bearer(&h), Some("abc"));
        h.insert(AUTHORIZATION, HeaderValue::from_static("bearer  abc "));
        assert_eq!(bearer(&h), Some("abc"));
        h.insert(AUTHORIZATION, HeaderValue::from_static("Basic abc"));
        assert_eq!(bearer(&h), None);
    }
}
