//! Installed-extension state and the all-or-nothing installer.
//!
//! Layout under the extensions directory:
//! `packages/<name>-<version>/` unpacked content, `generations/<n>/installed.json`
//! the committed set, and `current`, a symlink to the live generation that is
//! replaced by rename.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::semver::Version;
use crate::workflow::{Engine, Execution, OperatorSpec, WorkflowDefinition, WorkflowError};

use super::manifest::{check_relative_path, Dependency, ExtensionManifest};
use super::package::{read_package, sha256_hex, Package, MANIFEST_FILE};
use super::registry::RegistrySource;
use super::resolve::{resolve_dependencies, PlanSource, RegistryIndex};
use super::{ExtensionError, SanityError};

const CURRENT: &str = "current";
const STATE_FILE: &str = "installed.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstallSource {
    Upload,
    Registry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstalledExtension {
    pub name: String,
    pub version: Version,
    pub dependencies: Vec<Dependency>,
    /// Contributed workflow names.
    pub workflows: Vec<String>,
    /// Contributed operator names.
    pub operators: Vec<String>,
    pub ui_assets: Option<String>,
    /// SHA-256 of the package archive.
    pub sha256: String,
    pub source: InstallSource,
    pub installed_at: DateTime<Utc>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Generation {
    extensions: BTreeMap<String, InstalledExtension>,
}

fn package_dir_name(name: &str, version: &Version) -> String {
    format!("{name}-{version}")
}

fn sync_dir(path: &Path) -> std::io::Result<()> {
    fs::File::open(path)?.sync_all()
}

fn write_synced(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    std::io::Write::write_all(&mut f, bytes)?;
    f.sync_all()
}

/// Operators and workflows a package contributes, already checked.
struct Contribution {
    operators: Vec<OperatorSpec>,
    workflows: Vec<WorkflowDefinition>,
}

pub struct ExtensionManager {
    root: PathBuf,
    engine: Arc<Engine>,
    registry: Option<Arc<dyn RegistrySource>>,
    install_lock: Mutex<()>,
    state: RwLock<BTreeMap<String, InstalledExtension>>,
    clock: Clock,
}

impl std::fmt::Debug for ExtensionManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExtensionManager").field("root", &self.root).finish()
    }
}

impl ExtensionManager {
    /// Opens the installed set, drops leftovers of interrupted installs and
    /// registers every installed extension with the engine.
    pub fn open(
        root: impl Into<PathBuf>,
        engine: Arc<Engine>,
        registry: Option<Arc<dyn RegistrySource>>,
        clock: Clock,
    ) -> Result<ExtensionManager, ExtensionError> {
        let root = root.into();
        fs::create_dir_all(root.join("packages"))?;
        fs::create_dir_all(root.join("generations"))?;
        let (current_gen, generation) = read_current(&root)?;
        let mgr = ExtensionManager {
            root,
            engine,
            registry,
            install_lock: Mutex::new(()),
            state: RwLock::new(generation.extensions),
            clock,
        };
        mgr.collect_garbage(current_gen)?;
        let installed = mgr.installed();
        for ext in order_installed(&installed) {
            if let Err(e) = mgr.register_installed(ext) {
                tracing::warn!(extension = %ext.name, error = %e, "installed extension could not be registered");
            }
        }
        Ok(mgr)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn installed(&self) -> Vec<InstalledExtension> {
        self.state.read().expect("state lock").values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<InstalledExtension> {
        self.state.read().expect("state lock").get(name).cloned()
    }

    pub fn has_registry(&self) -> bool {
        self.registry.is_some()
    }

    pub fn registry_index(&self) -> Result<RegistryIndex, ExtensionError> {
        match &self.registry {
            Some(r) => r.index(),
            None => Ok(RegistryIndex::default()),
        }
    }

    fn package_dir(&self, name: &str, version: &Version) -> PathBuf {
        self.root.join("packages").join(package_dir_name(name, version))
    }

    /// Reads a file below an installed extension's UI asset root.
    pub fn ui_asset(&self, name: &str, path: &str) -> Result<Vec<u8>, ExtensionError> {
        let ext = self.get(name).ok_or_else(|| ExtensionError::NotInstalled(name.to_string()))?;
        let root = ext.ui_assets.as_deref().ok_or_else(|| ExtensionError::NotInstalled(format!("{name} has no UI assets")))?;
        check_relative_path(path)?;
        let file = self.package_dir(&ext.name, &ext.version).join(root).join(path);
        fs::read(file).map_err(ExtensionError::from)
    }

    fn register_installed(&self, ext: &InstalledExtension) -> Result<(), ExtensionError> {
        let dir = self.package_dir(&ext.name, &ext.version);
        let manifest = super::manifest::parse_manifest(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let mut files = BTreeMap::new();
        for p in manifest.contents.workflows.iter().chain(&manifest.contents.operators) {
            files.insert(p.clone(), fs::read(dir.join(p))?);
        }
        let c = self.contribution(&manifest, &files, &dir, &[])?;
        self.register_contribution(&ext.name, &c)
    }

    fn register_contribution(&self, provider: &str, c: &Contribution) -> Result<(), ExtensionError> {
        for op in &c.operators {
            self.engine.register_operator(op.clone()).map_err(|e| sanity(provider, e))?;
        }
        for wf in &c.workflows {
            self.engine.register_workflow(wf, Some(provider)).map_err(|e| sanity(provider, e))?;
        }
        Ok(())
    }

    /// Parses and checks a package's descriptors. `extra` holds operators of
    /// packages earlier in the same install.
    fn contribution(
        &self,
        manifest: &ExtensionManifest,
        files: &BTreeMap<String, Vec<u8>>,
        dir: &Path,
        extra: &[OperatorSpec],
    ) -> Result<Contribution, ExtensionError> {
        let name = &manifest.name;
        let invalid = |m: String| ExtensionError::SanityCheckFailed { package: name.clone(), cause: SanityError::Invalid(m) };
        let mut operators = Vec::new();
        for path in &manifest.contents.operators {
            let mut spec: OperatorSpec =
                serde_json::from_slice(&files[path]).map_err(|e| invalid(format!("{path}: {e}")))?;
            if spec.provider.is_some() || spec.base_dir.is_some() {
                return Err(invalid(format!("{path}: provider and base_dir are set by the installer")));
            }
            match &spec.execution {
                Execution::ExternalCommand { argv } if !argv.is_empty() => {}
                _ => return Err(invalid(format!("{path}: operators must declare a non-empty external command"))),
            }
            spec.provider = Some(name.clone());
            spec.base_dir = Some(dir.to_path_buf());
            spec.validate().map_err(|e| sanity(name, e))?;
            operators.push(spec);
        }
        let mut visible: Vec<OperatorSpec> = extra.to_vec();
        visible.extend(operators.iter().cloned());
        let mut workflows = Vec::new();
        for path in &manifest.contents.workflows {
            let def: WorkflowDefinition = serde_json::from_slice(&files[path]).map_err(|e| invalid(format!("{path}: {e}")))?;
            let checked = self.engine.check_definition(&def, &visible).map_err(|e| sanity(name, e))?;
            workflows.push(checked);
        }
        Ok(Contribution { operators, workflows })
    }

    /// Installs an uploaded archive and any registry dependencies it needs.
    pub fn install_upload(&self, bytes: &[u8]) -> Result<Vec<InstalledExtension>, ExtensionError> {
        let _guard = self.install_lock.lock().expect("install lock");
        let pkg = read_package(bytes)?;
        self.install_locked(pkg, InstallSource::Upload)
    }

    /// Installs `name` from the registry, at `version` or the newest.
    pub fn install_from_registry(&self, name: &str, version: Option<&Version>) -> Result<Vec<InstalledExtension>, ExtensionError> {
        let _guard = self.install_lock.lock().expect("install lock");
        let registry = self.registry.as_ref().ok_or(ExtensionError::NoRegistry)?;
        let index = registry.index()?;
        let entries = index.packages.get(name).ok_or_else(|| ExtensionError::NotInRegistry(name.to_string()))?;
        let entry = match version {
            Some(v) => entries.iter().find(|e| &e.version == v),
            None => entries.iter().max_by(|a, b| a.version.cmp(&b.version)),
        }
        .ok_or_else(|| ExtensionError::NotInRegistry(format!("{name}@{}", version.map_or("*".into(), |v| v.to_string()))))?;
        let pkg = self.fetch_verified(registry.as_ref(), name, entry)?;
        self.install_locked(pkg, InstallSource::Registry)
    }

    fn fetch_verified(
        &self,
        registry: &dyn RegistrySource,
        name: &str,
        entry: &super::resolve::IndexEntry,
    ) -> Result<Package, ExtensionError> {
        let bytes = registry.fetch(&entry.url)?;
        if sha256_hex(&bytes) != entry.sha256.to_ascii_lowercase() {
            return Err(ExtensionError::DigestMismatch(entry.url.clone()));
        }
        let pkg = read_package(&bytes)?;
        let m = &pkg.manifest;
        if m.name != name || m.version != entry.version || m.dependencies != entry.dependencies {
            return Err(ExtensionError::SanityCheckFailed {
                package: name.to_string(),
                cause: SanityError::Invalid(format!("archive at {} does not match its index entry", entry.url)),
            });
        }
        Ok(pkg)
    }

    fn install_locked(&self, root_pkg: Package, source: InstallSource) -> Result<Vec<InstalledExtension>, ExtensionError> {
        let current = self.state.read().expect("state lock").clone();
        if let Some(existing) = current.get(&root_pkg.manifest.name) {
            return Err(ExtensionError::AlreadyInstalled { name: existing.name.clone(), version: existing.version.clone() });
        }
        let installed: BTreeMap<String, Version> = current.iter().map(|(n, e)| (n.clone(), e.version.clone())).collect();
        let index = match (&self.registry, root_pkg.manifest.dependencies.is_empty()) {
            (Some(r), false) => r.index()?,
            _ => RegistryIndex::default(),
        };
        let plan = resolve_dependencies(&root_pkg.manifest, &installed, &index)?;

        let mut packages: Vec<(Package, InstallSource)> = Vec::with_capacity(plan.len());
        let mut root_pkg = Some(root_pkg);
        for item in &plan {
            match &item.source {
                PlanSource::Root => packages.push((root_pkg.take().expect("root planned once"), source)),
                PlanSource::Registry(entry) => {
                    let registry = self.registry.as_ref().ok_or(ExtensionError::NoRegistry)?;
                    packages.push((self.fetch_verified(registry.as_ref(), &item.name, entry)?, InstallSource::Registry));
                }
            }
        }

        // Sanity checks before any mutation.
        let mut extra: Vec<OperatorSpec> = Vec::new();
        let mut contributions = Vec::with_capacity(packages.len());
        let mut claimed_workflows: BTreeSet<String> = BTreeSet::new();
        let mut claimed_ops: BTreeSet<String> = BTreeSet::new();
        let existing_ops: BTreeMap<String, Option<String>> =
            self.engine.operators().into_iter().map(|o| (o.name, o.provider)).collect();
        for (pkg, _) in &packages {
            let m = &pkg.manifest;
            let dir = self.package_dir(&m.name, &m.version);
            let c = self.contribution(m, &pkg.files, &dir, &extra)?;
            for op in &c.operators {
                if existing_ops.contains_key(&op.name) || !claimed_ops.insert(op.name.clone()) {
                    return Err(ExtensionError::Conflict(format!("operator {} is already provided", op.name)));
                }
            }
            for wf in &c.workflows {
                if self.engine.workflow(&wf.name).is_some() || !claimed_workflows.insert(wf.name.clone()) {
                    return Err(ExtensionError::Conflict(format!("workflow {} is already provided", wf.name)));
                }
            }
            extra.extend(c.operators.iter().cloned());
            contributions.push(c);
        }

        let now = (self.clock)();
        let records: Vec<InstalledExtension> = packages
            .iter()
            .zip(&contributions)
            .map(|((pkg, src), c)| InstalledExtension {
                name: pkg.manifest.name.clone(),
                version: pkg.manifest.version.clone(),
                dependencies: pkg.manifest.dependencies.clone(),
                workflows: c.workflows.iter().map(|w| w.name.clone()).collect(),
                operators: c.operators.iter().map(|o| o.name.clone()).collect(),
                ui_assets: pkg.manifest.contents.ui_assets.clone(),
                sha256: pkg.sha256.clone(),
                source: *src,
                installed_at: now,
            })
            .collect();
        let mut next = current.clone();
        for r in &records {
            next.insert(r.name.clone(), r.clone());
        }

        let moved = self.stage_packages(&packages)?;
        if let Err(e) = self.commit(&next) {
            for dir in &moved {
                let _ = fs::remove_dir_all(dir);
            }
            return Err(e);
        }
        *self.state.write().expect("state lock") = next;
        for (r, c) in records.iter().zip(&contributions) {
            if let Err(e) = self.register_contribution(&r.name, c) {
                // Registration raced with another writer; undo the install.
                for r in &records {
                    self.engine.unregister_provider(&r.name);
                }
                *self.state.write().expect("state lock") = current.clone();
                self.commit(&current)?;
                return Err(e);
            }
        }
        Ok(records)
    }

    /// Writes package content to a staging directory, then renames each
    /// package into place. Returns the final directories.
    fn stage_packages(&self, packages: &[(Package, InstallSource)]) -> Result<Vec<PathBuf>, ExtensionError> {
        let mut suffix = [0u8; 6];
        rand::thread_rng().fill_bytes(&mut suffix);
        let staging = self.root.join(format!("staging-{}", hex::encode(suffix)));
        let result = (|| -> Result<Vec<PathBuf>, ExtensionError> {
            let mut staged = Vec::new();
            for (pkg, _) in packages {
                let m = &pkg.manifest;
                let dir = staging.join(package_dir_name(&m.name, &m.version));
                write_synced(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(m).expect("manifest serializes"))?;
                for (path, data) in &pkg.files {
                    write_synced(&dir.join(path), data)?;
                }
                staged.push((dir, self.package_dir(&m.name, &m.version)));
            }
            let mut moved = Vec::new();
            for (from, to) in staged {
                if to.exists() {
                    fs::remove_dir_all(&to)?;
                }
                if let Err(e) = fs::rename(&from, &to) {
                    for dir in &moved {
                        let _ = fs::remove_dir_all(dir);
                    }
                    return Err(e.into());
                }
                moved.push(to);
            }
            sync_dir(&self.root.join("packages"))?;
            Ok(moved)
        })();
        let _ = fs::remove_dir_all(&staging);
        result
    }

    /// Writes a new generation and atomically points `current` at it.
    fn commit(&self, set: &BTreeMap<String, InstalledExtension>) -> Result<(), ExtensionError> {
        let (old, _) = read_current(&self.root)?;
        let n = old.map_or(1, |g| g + 1);
        let gen_dir = self.root.join("generations").join(n.to_string());
        let result = (|| -> Result<(), ExtensionError> {
            let doc = Generation { extensions: set.clone() };
            write_synced(&gen_dir.join(STATE_FILE), &serde_json::to_vec_pretty(&doc).expect("state serializes"))?;
            sync_dir(&self.root.join("generations"))?;
            let tmp = self.root.join("current.tmp");
            let _ = fs::remove_file(&tmp);
            std::os::unix::fs::symlink(Path::new("generations").join(n.to_string()), &tmp)?;
            fs::rename(&tmp, self.root.join(CURRENT))?;
            sync_dir(&self.root)?;
            Ok(())
        })();
        if let Err(e) = result {
            let _ = fs::remove_dir_all(&gen_dir);
            let _ = fs::remove_file(self.root.join("current.tmp"));
            return Err(e);
        }
        self.collect_garbage(Some(n))
    }

    /// Removes generations other than `keep` and unreferenced packages.
    fn collect_garbage(&self, keep: Option<u64>) -> Result<(), ExtensionError> {
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with("staging-") {
                fs::remove_dir_all(entry.path())?;
            } else if name == "current.tmp" {
                fs::remove_file(entry.path())?;
            }
        }
        for entry in fs::read_dir(self.root.join("generations"))? {
            let entry = entry?;
            if entry.file_name().to_str().and_then(|s| s.parse::<u64>().ok()) != keep {
                fs::remove_dir_all(entry.path())?;
            }
        }
        let (_, generation) = read_current(&self.root)?;
        let referenced: BTreeSet<String> =
            generation.extensions.values().map(|e| package_dir_name(&e.name, &e.version)).collect();
        for entry in fs::read_dir(self.root.join("packages"))? {
            let entry = entry?;
            if !referenced.contains(entry.file_name().to_string_lossy().as_ref()) {
                fs::remove_dir_all(entry.path())?;
            }
        }
        Ok(())
    }

    /// Removes an extension and its contributions. Refused while another
    /// extension depends on it or a run uses what it contributed.
    pub fn uninstall(&self, name: &str) -> Result<InstalledExtension, ExtensionError> {
        let _guard = self.install_lock.lock().expect("install lock");
        let current = self.state.read().expect("state lock").clone();
        let ext = current.get(name).cloned().ok_or_else(|| ExtensionError::NotInstalled(name.to_string()))?;
        let dependents: Vec<String> = current
            .values()
            .filter(|e| e.dependencies.iter().any(|d| d.name == name))
            .map(|e| e.name.clone())
            .collect();
        if !dependents.is_empty() {
            return Err(ExtensionError::RequiredBy { name: name.to_string(), dependents });
        }
        let runs = self.engine.active_runs_for_provider(name);
        if !runs.is_empty() {
            return Err(ExtensionError::InUse { name: name.to_string(), runs });
        }
        let mut next = current;
        next.remove(name);
        self.commit(&next)?;
        *self.state.write().expect("state lock") = next;
        self.engine.unregister_provider(name);
        Ok(ext)
    }
}

fn sanity(package: &str, e: WorkflowError) -> ExtensionError {
    ExtensionError::SanityCheckFailed { package: package.to_string(), cause: SanityError::Workflow(e) }
}

fn read_current(root: &Path) -> Result<(Option<u64>, Generation), ExtensionError> {
    let link = root.join(CURRENT);
    let target = match fs::read_link(&link) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((None, Generation::default())),
        Err(e) => return Err(e.into()),
    };
    let n = target
        .file_name()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| ExtensionError::SchemaError(format!("current points at {}", target.display())))?;
    let bytes = fs::read(root.join(&target).join(STATE_FILE))?;
    let generation = serde_json::from_slice(&bytes).map_err(|e| ExtensionError::SchemaError(format!("{STATE_FILE}: {e}")))?;
    Ok((Some(n), generation))
}

/// Installed extensions with dependencies first.
fn order_installed(installed: &[InstalledExtension]) -> Vec<&InstalledExtension> {
    let mut done: BTreeSet<&str> = BTreeSet::new();
    let mut out = Vec::with_capacity(installed.len());
    while out.len() < installed.len() {
        let before = out.len();
        for ext in installed {
            if !done.contains(ext.name.as_str())
                && ext.dependencies.iter().all(|d| done.contains(d.name.as_str()) || !installed.iter().any(|e| e.name == d.name))
            {
                done.insert(&ext.name);
                out.push(ext);
            }
        }
        if out.len() == before {
            out.extend(installed.iter().filter(|e| !done.contains(e.name.as_str())));
            break;
        }
    }
    out
}
