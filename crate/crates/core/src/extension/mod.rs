//! Extension packages: strict manifests, verified archives, dependency
//! resolution and atomic installation.

mod manager;
mod manifest;
mod package;
mod registry;
mod resolve;

pub use manager::{ExtensionManager, InstallSource, InstalledExtension};
pub use manifest::{check_relative_path, parse_manifest, valid_extension_name, Contents, Dependency, ExtensionManifest};
pub use package::{build_package, read_package, sha256_hex, Package, CHECKSUMS_FILE, MANIFEST_FILE};
pub use registry::{DirRegistry, RegistrySource, INDEX_FILE};
pub use resolve::{resolve_dependencies, IndexEntry, PlanSource, PlannedInstall, RegistryIndex};

use crate::semver::Version;
use crate::workflow::WorkflowError;

#[derive(Debug, thiserror::Error)]
pub enum SanityError {
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ExtensionError {
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("bad semver {0:?}")]
    BadSemver(String),
    #[error("path escapes the package: {0:?}")]
    PathEscape(String),
    #[error("no version of {package} satisfies {}", ranges.join(", "))]
    UnsatisfiableConstraint { package: String, ranges: Vec<String> },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    DependencyCycle(Vec<String>),
    #[error("{0} is not in the registry")]
    NotInRegistry(String),
    #[error("digest mismatch: {0}")]
    DigestMismatch(String),
    #[error("sanity check failed for {package}: {cause}")]
    SanityCheckFailed {
        package: String,
        #[source]
        cause: SanityError,
    },
    #[error("{name} {version} is already installed")]
    AlreadyInstalled { name: String, version: Version },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{0} is not installed")]
    NotInstalled(String),
    #[error("{name} is required by {}", dependents.join(", "))]
    RequiredBy { name: String, dependents: Vec<String> },
    #[error("{name} is used by active runs {}", runs.join(", "))]
    InUse { name: String, runs: Vec<String> },
    #[error("no registry configured")]
    NoRegistry,
    #[error("registry: {0}")]
    Registry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExtensionError {
    pub fn code(&self) -> &'static str {
        use ExtensionError::*;
        match self {
            SchemaError(_) => "SchemaError",
            BadSemver(_) => "BadSemver",
            PathEscape(_) => "PathEscape",
            UnsatisfiableConstraint { .. } => "UnsatisfiableConstraint",
            DependencyCycle(_) => "DependencyCycle",
            NotInRegistry(_) => "NotInRegistry",
            DigestMismatch(_) => "DigestMismatch",
            SanityCheckFailed { .. } => "SanityCheckFailed",
            AlreadyInstalled { .. } => "AlreadyInstalled",
            Conflict(_) => "Conflict",
            NotInstalled(_) => "NotInstalled",
            RequiredBy { .. } => "RequiredBy",
            InUse { .. } => "InUse",
            NoRegistry => "NoRegistry",
            Registry(_) => "Registry",
            Io(_) => "Io",
        }
    }
}
