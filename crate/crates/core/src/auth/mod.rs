//! Users, roles, sessions and the audit trail.

mod audit;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use argon2::password_hash::rand_core::OsRng;
use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use chrono::{DateTime, Duration, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::clock::{self, Clock};

pub use audit::{
    chain_status, event_hash, verify_chain, verify_file, AuditError, AuditEvent, AuditLog, Outcome, GENESIS_PREV_HASH,
};

pub const SESSION_LIFETIME_HOURS: i64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Admin,
    Researcher,
    Viewer,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Admin, Role::Researcher, Role::Viewer];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Admin => "admin",
            Role::Researcher => "researcher",
            Role::Viewer => "viewer",
        }
    }
}

impl FromStr for Role {
    type Err = AuthError;
    fn from_str(s: &str) -> Result<Self, AuthError> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| AuthError::InvalidRole(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    View,
    Query,
    Tag,
    Ingest,
    RunWorkflow,
    ManageExtensions,
    ManageFederation,
    ManageUsers,
}

impl Action {
    pub const ALL: [Action; 8] = [
        Action::View,
        Action::Query,
        Action::Tag,
        Action::Ingest,
        Action::RunWorkflow,
        Action::ManageExtensions,
        Action::ManageFederation,
        Action::ManageUsers,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::View => "view",
            Action::Query => "query",
            Action::Tag => "tag",
            Action::Ingest => "ingest",
            Action::RunWorkflow => "run_workflow",
            Action::ManageExtensions => "manage_extensions",
            Action::ManageFederation => "manage_federation",
            Action::ManageUsers => "manage_users",
        }
    }
}

/// The permission matrix.
pub fn role_permits(role: Role, action: Action) -> bool {
    use Action::*;
    match role {
        Role::Admin => true,
        Role::Researcher => matches!(action, View | Query | Tag | Ingest | RunWorkflow),
        Role::Viewer => matches!(action, View | Query),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub id: String,
    pub username: String,
    /// PHC string of a salted Argon2id hash.
    pub password_hash: String,
    pub roles: BTreeSet<Role>,
    #[serde(default)]
    pub disabled: bool,
}

/// A principal as shown to API clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipalView {
    pub id: String,
    pub username: String,
    pub roles: BTreeSet<Role>,
    pub disabled: bool,
}

impl Principal {
    pub fn view(&self) -> PrincipalView {
        PrincipalView {
            id: self.id.clone(),
            username: self.username.clone(),
            roles: self.roles.clone(),
            disabled: self.disabled,
        }
    }

    pub fn permits(&self, action: Action) -> bool {
        self.roles.iter().any(|&r| role_permits(r, action))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionToken {
    /// Hex of 32 random bytes.
    pub token: String,
    pub principal_id: String,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("account disabled")]
    AccountDisabled,
    #[error("invalid token")]
    InvalidToken,
    #[error("session expired")]
    AuthExpired,
    #[error("permission denied")]
    PermissionDenied,
    #[error("user {0:?} already exists")]
    DuplicateUser(String),
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("invalid username {0:?}")]
    InvalidUsername(String),
    #[error("unknown role {0:?}")]
    InvalidRole(String),
    #[error("password hashing failed: {0}")]
    Hashing(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn valid_username(name: &str) -> bool {
    (1..=64).contains(&name.len())
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

fn hash_password(password: &str) -> Result<String, AuthError> {
    let salt = SaltString::generate(&mut OsRng);
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| AuthError::Hashing(e.to_string()))
}

fn verify_password(password: &str, phc: &str) -> bool {
    PasswordHash::new(phc).is_ok_and(|h| Argon2::default().verify_password(password.as_bytes(), &h).is_ok())
}

struct Session {
    token: [u8; 32],
    principal_id: String,
    expires_at: DateTime<Utc>,
}

/// User store, session table and audit log.
pub struct AuthService {
    users_path: PathBuf,
    users: RwLock<BTreeMap<String, Principal>>,
    /// Keyed by SHA-256 of the token.
    sessions: Mutex<HashMap<[u8; 32], Session>>,
    audit: Arc<AuditLog>,
    clock: Clock,
    dummy_hash: String,
}

impl std::fmt::Debug for AuthService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthService").field("users_path", &self.users_path).finish()
    }
}

pub const ANONYMOUS: &str = "anonymous";
pub const SYSTEM: &str = "system";

impl AuthService {
    /// Users live in `users_path` (JSON); the audit log is shared.
    pub fn open(users_path: impl AsRef<Path>, audit: Arc<AuditLog>) -> Result<AuthService, AuthError> {
        AuthService::open_with_clock(users_path, audit, clock::system())
    }

    pub fn open_with_clock(users_path: impl AsRef<Path>, audit: Arc<AuditLog>, clock: Clock) -> Result<AuthService, AuthError> {
        let users_path = users_path.as_ref().to_path_buf();
        let users: BTreeMap<String, Principal> = match fs::read(&users_path) {
            Ok(bytes) => {
                let list: Vec<Principal> = serde_json::from_slice(&bytes)
                    .map_err(|e| AuthError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
                list.into_iter().map(|p| (p.username.clone(), p)).collect()
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let mut random = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut random);
        Ok(AuthService {
            users_path,
            users: RwLock::new(users),
            sessions: Mutex::new(HashMap::new()),
            audit,
            clock,
            dummy_hash: hash_password(&hex::encode(random))?,
        })
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    fn persist(&self, users: &BTreeMap<String, Principal>) -> Result<(), AuthError> {
        let list: Vec<&Principal> = users.values().collect();
        let dir = self.users_path.parent().expect("users file has a parent");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer_pretty(&mut tmp, &list).map_err(std::io::Error::from)?;
        tmp.as_file().sync_data()?;
        tmp.persist(&self.users_path).map_err(|e| e.error)?;
        Ok(())
    }

    /// Creates a user. Not audited here; callers record the event with
    /// their own principal.
    pub fn add_user(&self, username: &str, password: &str, roles: BTreeSet<Role>) -> Result<PrincipalView, AuthError> {
        if !valid_username(username) {
            return Err(AuthError::InvalidUsername(username.to_string()));
        }
        let password_hash = hash_password(password)?;
        let mut users = self.users.write().expect("users lock");
        if users.contains_key(username) {
            return Err(AuthError::DuplicateUser(username.to_string()));
        }
        let mut id = [0u8; 8];
        rand::thread_rng().fill_bytes(&mut id);
        let p = Principal { id: format!("u-{}", hex::encode(id)), username: username.to_string(), password_hash, roles, disabled: false };
        let view = p.view();
        users.insert(username.to_string(), p);
        if let Err(e) = self.persist(&users) {
            users.remove(username);
            return Err(e);
        }
        Ok(view)
    }

    pub fn set_disabled(&self, username: &str, disabled: bool) -> Result<(), AuthError> {
        let mut users = self.users.write().expect("users lock");
        let p = users.get_mut(username).ok_or_else(|| AuthError::UnknownUser(username.to_string()))?;
        p.disabled = disabled;
        let id = p.id.clone();
        self.persist(&users)?;
        if disabled {
            self.sessions.lock().expect("sessions lock").retain(|_, s| s.principal_id != id);
        }
        Ok(())
    }

    pub fn users(&self) -> Vec<PrincipalView> {
        self.users.read().expect("users lock").values().map(Principal::view).collect()
    }

    fn principal_by_id(&self, id: &str) -> Option<Principal> {
        self.users.read().expect("users lock").values().find(|p| p.id == id).cloned()
    }

    /// Verifies credentials. Unknown users are checked against a dummy hash
    /// so both failure causes cost the same. Failures are audited.
    pub fn login(&self, username: &str, password: &str) -> Result<SessionToken, AuthError> {
        let user = self.users.read().expect("users lock").get(username).cloned();
        let ok = match &user {
            Some(p) => verify_password(password, &p.password_hash),
            None => {
                verify_password(password, &self.dummy_hash);
                false
            }
        };
        let resource = format!("user:{username}");
        let Some(p) = user.filter(|_| ok) else {
            self.audit.append(ANONYMOUS, "login", &resource, Outcome::Denied)?;
            return Err(AuthError::InvalidCredentials);
        };
        if p.disabled {
            self.audit.append(&p.id, "login", &resource, Outcome::Denied)?;
            return Err(AuthError::AccountDisabled);
        }
        let mut token = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut token);
        let issued_at = (self.clock)();
        let expires_at = issued_at + Duration::hours(SESSION_LIFETIME_HOURS);
        self.sessions.lock().expect("sessions lock").insert(
            Sha256::digest(token).into(),
            Session { token, principal_id: p.id.clone(), expires_at },
        );
        self.audit.append(&p.id, "login", &resource, Outcome::Allowed)?;
        Ok(SessionToken { token: hex::encode(token), principal_id: p.id, issued_at, expires_at })
    }

    pub fn logout(&self, token: &str) -> bool {
        let Some(raw) = decode_token(token) else { return false };
        self.sessions.lock().expect("sessions lock").remove(&<[u8; 32]>::from(Sha256::digest(raw))).is_some()
    }

    /// The principal behind `token`, without an authorization decision.
    pub fn authenticate(&self, token: &str) -> Result<Principal, AuthError> {
        let raw = decode_token(token).ok_or(AuthError::InvalidToken)?;
        let key: [u8; 32] = Sha256::digest(raw).into();
        let (principal_id, expires_at) = {
            let sessions = self.sessions.lock().expect("sessions lock");
            let s = sessions.get(&key).ok_or(AuthError::InvalidToken)?;
            if !bool::from(s.token.ct_eq(&raw)) {
                return Err(AuthError::InvalidToken);
            }
            (s.principal_id.clone(), s.expires_at)
        };
        if (self.clock)() > expires_at {
            self.sessions.lock().expect("sessions lock").remove(&key);
            return Err(AuthError::AuthExpired);
        }
        let p = self.principal_by_id(&principal_id).ok_or(AuthError::InvalidToken)?;
        if p.disabled {
            return Err(AuthError::AccountDisabled);
        }
        Ok(p)
    }

    /// Returns the principal iff the token is valid and some role grants
    /// `action`. Every denial appends one audit event.
    pub fn authorize(&self, token: Option<&str>, action: Action, resource: &str) -> Result<Principal, AuthError> {
        let result = match token {
            None => Err(AuthError::InvalidToken),
            Some(t) => self.authenticate(t),
        };
        match result {
            Ok(p) if p.permits(action) => Ok(p),
            Ok(p) => {
                self.audit.append(&p.id, action.as_str(), resource, Outcome::Denied)?;
                Err(AuthError::PermissionDenied)
            }
            Err(e) => {
                self.audit.append(ANONYMOUS, action.as_str(), resource, Outcome::Denied)?;
                Err(e)
            }
        }
    }
}

fn decode_token(token: &str) -> Option<[u8; 32]> {
    hex::decode(token).ok()?.try_into().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use chrono::TimeZone;

    fn service() -> (tempfile::TempDir, AuthService, ManualClock) {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(Utc.with_ymd_and_hms(2026, 5, 1, 8, 0, 0).unwrap());
        let audit = Arc::new(AuditLog::open_with_clock(dir.path().join("audit.jsonl"), clock.clock()).unwrap());
        let svc = AuthService::open_with_clock(dir.path().join("users.json"), audit, clock.clock()).unwrap();
        (dir, svc, clock)
    }

    #[test]
    fn matrix_rows() {
        let granted = |r| Action::ALL.iter().filter(|&&a| role_permits(r, a)).count();
        assert_eq!((granted(Role::Viewer), granted(Role::Researcher), granted(Role::Admin)), (2, 5, 8));
        assert!(!role_permits(Role::Viewer, Action::RunWorkflow));
        assert!(role_permits(Role::Researcher, Action::Tag));
        assert!(!role_permits(Role::Researcher, Action::ManageExtensions));
    }

    #[test]
    fn login_failures_are_indistinguishable_and_audited() {
        let (_dir, svc, _) = service();
        svc.add_user("alice", "s3cret", BTreeSet::from([Role::Viewer])).unwrap();
        let a = svc.login("alice", "wrong").unwrap_err();
        let b = svc.login("mallory", "wrong").unwrap_err();
        assert_eq!(a.to_string(), b.to_string());
        assert!(matches!(a, AuthError::InvalidCredentials));
        let events = svc.audit().events().unwrap();
        assert_eq!(events.len(), 2);
        assert!(events.iter().all(|e| e.outcome == Outcome::Denied && e.principal == ANONYMOUS));
    }

    #[test]
    fn session_expiry_and_denial() {
        let (dir, svc, clock) = service();
        svc.add_user("vic", "pw", BTreeSet::from([Role::Viewer])).unwrap();
        let t = svc.login("vic", "pw").unwrap();
        assert_eq!(t.expires_at - t.issued_at, Duration::hours(12));
        assert!(svc.authorize(Some(&t.token), Action::Query, "q").is_ok());
        let before = svc.audit().len();
        assert!(matches!(svc.authorize(Some(&t.token), Action::RunWorkflow, "wf"), Err(AuthError::PermissionDenied)));
        assert_eq!(svc.audit().len(), before + 1);
        clock.advance(Duration::hours(12));
        assert!(svc.authorize(Some(&t.token), Action::View, "x").is_ok());
        clock.advance(Duration::seconds(1));
        assert!(matches!(svc.authorize(Some(&t.token), Action::View, "x"), Err(AuthError::AuthExpired)));
        assert!(matches!(svc.authorize(Some("00"), Action::View, "x"), Err(AuthError::InvalidToken)));
        let raw = fs::read_to_string(dir.path().join("users.json")).unwrap();
        assert!(!raw.contains("\"pw\""));
        assert!(raw.contains("$argon2id$"));
    }
}
