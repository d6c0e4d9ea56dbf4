use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use minipacs_core::archive::{Archive, ArchiveConfig};
use minipacs_core::clock;
use minipacs_core::extension::{
    build_package, resolve_dependencies, sha256_hex, Dependency, DirRegistry, ExtensionError, ExtensionManager,
    ExtensionManifest, IndexEntry, PlanSource, RegistryIndex, SanityError,
};
use minipacs_core::semver::{Version, VersionReq};
use minipacs_core::workflow::{Engine, EngineConfig, RunState, SlotValue, WorkflowError};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

// ---- resolution oracle -------------------------------------------------

struct Universe {
    /// (depth, name) order.
    order: Vec<String>,
    domains: BTreeMap<String, Vec<(Version, Vec<Dependency>)>>,
}

/// Every package reachable from the root through any published version;
/// installed packages do not expand.
fn universe(root: &ExtensionManifest, installed: &BTreeMap<String, Version>, index: &RegistryIndex) -> Universe {
    let mut depth = BTreeMap::from([(root.name.clone(), 0usize)]);
    let mut queue = VecDeque::from([root.name.clone()]);
    let mut domains = BTreeMap::new();
    domains.insert(root.name.clone(), vec![(root.version.clone(), root.dependencies.clone())]);
    while let Some(name) = queue.pop_front() {
        let deps: Vec<Dependency> = domains[&name].iter().flat_map(|(_, d)| d.clone()).collect();
        for dep in deps {
            if depth.contains_key(&dep.name) {
                continue;
            }
            depth.insert(dep.name.clone(), depth[&name] + 1);
            let dom = if let Some(v) = installed.get(&dep.name) {
                vec![(v.clone(), Vec::new())]
            } else {
                index
                    .packages
                    .get(&dep.name)
                    .map(|es| es.iter().map(|e| (e.version.clone(), e.dependencies.clone())).collect())
                    .unwrap_or_default()
            };
            domains.insert(dep.name.clone(), dom);
            queue.push_back(dep.name.clone());
        }
    }
    let mut order: Vec<(usize, String)> = depth.into_iter().map(|(n, d)| (d, n)).collect();
    order.sort();
    Universe { order: order.into_iter().map(|(_, n)| n).collect(), domains }
}

type Assignment = BTreeMap<String, (Version, Vec<Dependency>)>;

fn valid(root: &str, a: &Assignment) -> bool {
    let mut reach = BTreeSet::from([root.to_string()]);
    let mut stack = vec![root.to_string()];
    while let Some(n) = stack.pop() {
        let Some((_, deps)) = a.get(&n) else { return false };
        for d in deps {
            match a.get(&d.name) {
                Some((v, _)) if d.range.matches(v) => {}
                _ => return false,
            }
            if reach.insert(d.name.clone()) {
                stack.push(d.name.clone());
            }
        }
    }
    if reach.len() != a.len() {
        return false;
    }
    // Acyclic: repeatedly strip packages with no remaining deps.
    let mut left: BTreeMap<&String, BTreeSet<&String>> =
        a.iter().map(|(n, (_, deps))| (n, deps.iter().map(|d| &d.name).collect())).collect();
    loop {
        let free: Vec<&String> = left.iter().filter(|(_, d)| d.is_empty()).map(|(n, _)| *n).collect();
        if free.is_empty() {
            return left.is_empty();
        }
        for f in free {
            left.remove(f);
            for d in left.values_mut() {
                d.remove(f);
            }
        }
    }
}

/// Enumerates every assignment and keeps the greatest valid one.
fn brute_force(root: &ExtensionManifest, installed: &BTreeMap<String, Version>, index: &RegistryIndex) -> Option<Vec<Option<Version>>> {
    let u = universe(root, installed, index);
    let sizes: Vec<usize> = u.order.iter().map(|n| u.domains[n].len() + 1).collect();
    let mut best: Option<Vec<Option<Version>>> = None;
    let mut counter = vec![0usize; sizes.len()];
    loop {
        let mut a = Assignment::new();
        let mut key = Vec::new();
        for (i, name) in u.order.iter().enumerate() {
            // Index 0 means absent.
            if counter[i] == 0 {
                key.push(None);
            } else {
                let (v, d) = u.domains[name][counter[i] - 1].clone();
                key.push(Some(v.clone()));
                a.insert(name.clone(), (v, d));
            }
        }
        if valid(&root.name, &a) && best.as_ref().is_none_or(|b| key > *b) {
            best = Some(key);
        }
        let mut i = 0;
        loop {
            if i == sizes.len() {
                return best;
            }
            counter[i] += 1;
            if counter[i] < sizes[i] {
                break;
            }
            counter[i] = 0;
            i += 1;
        }
    }
}

fn random_range<R: Rng>(rng: &mut R) -> VersionReq {
    let v = format!("{}.{}.0", rng.gen_range(0..3), rng.gen_range(0..3));
    let text = match rng.gen_range(0..7) {
        0 | 6 => "*".to_string(),
        1 => format!(">={v}"),
        2 => format!("<{v}"),
        3 => format!("^{v}"),
        4 => v,
        _ => format!(">={v} <{}.0.0", rng.gen_range(1..4)),
    };
    text.parse().unwrap()
}

fn random_deps<R: Rng>(rng: &mut R, pool: &[String], max: usize) -> Vec<Dependency> {
    let mut names = pool.to_vec();
    names.shuffle(rng);
    names.truncate(rng.gen_range(0..=max));
    names.into_iter().map(|name| Dependency { name, range: random_range(rng) }).collect()
}

#[test]
fn resolution_matches_brute_force() {
    let mut rng = StdRng::seed_from_u64(2024);
    let mut solved = 0;
    for case in 0..50 {
        let n = rng.gen_range(2..=8);
        let names: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let mut index = RegistryIndex::default();
        for name in &names {
            let others: Vec<String> = names.iter().filter(|o| *o != name).cloned().collect();
            let mut versions: Vec<Version> = Vec::new();
            while versions.len() < rng.gen_range(1..=4) {
                let v = Version::new(rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(0..2));
                if !versions.contains(&v) {
                    versions.push(v);
                }
            }
            let entries = versions
                .into_iter()
                .map(|version| IndexEntry {
                    version,
                    url: String::new(),
                    sha256: String::new(),
                    dependencies: if rng.gen_bool(0.4) { random_deps(&mut rng, &others, 2) } else { Vec::new() },
                })
                .collect();
            index.packages.insert(name.clone(), entries);
        }
        let mut pool = names.clone();
        pool.push("ghost".into());
        let root = ExtensionManifest {
            name: "root".into(),
            version: Version::new(1, 0, 0),
            dependencies: random_deps(&mut rng, &pool[..if case % 10 == 0 { pool.len() } else { n }], 3),
            contents: Default::default(),
        };
        let mut installed = BTreeMap::new();
        if rng.gen_bool(0.3) {
            let name = names.choose(&mut rng).unwrap();
            installed.insert(name.clone(), index.packages[name][0].version.clone());
        }

        let oracle = brute_force(&root, &installed, &index);
        let got = resolve_dependencies(&root, &installed, &index);
        match (oracle, got) {
            (Some(best), Ok(plan)) => {
                solved += 1;
                let u = universe(&root, &installed, &index);
                let chosen: BTreeMap<String, Version> = plan.iter().map(|p| (p.name.clone(), p.version.clone())).collect();
                for (name, want) in u.order.iter().zip(&best) {
                    let have = chosen.get(name).cloned().or_else(|| installed.get(name).cloned().filter(|_| want.is_some()));
                    assert_eq!(have.as_ref(), want.as_ref(), "case {case}: {name}");
                }
                assert_eq!(plan.last().unwrap().name, "root");
                assert_eq!(plan.last().unwrap().source, PlanSource::Root);
                assert!(plan.iter().all(|p| !installed.contains_key(&p.name)));
                let pos: BTreeMap<&str, usize> = plan.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
                for (i, p) in plan.iter().enumerate() {
                    let deps = match &p.source {
                        PlanSource::Root => root.dependencies.clone(),
                        PlanSource::Registry(e) => e.dependencies.clone(),
                    };
                    for d in deps {
                        if let Some(&j) = pos.get(d.name.as_str()) {
                            assert!(j < i, "case {case}: {} before {}", d.name, p.name);
                        }
                    }
                }
            }
            (None, Err(e)) => assert!(matches!(
                e,
                ExtensionError::UnsatisfiableConstraint { .. } | ExtensionError::DependencyCycle(_) | ExtensionError::NotInRegistry(_)
            )),
            (oracle, got) => panic!("case {case}: oracle {oracle:?}, resolver {got:?}"),
        }
    }
    assert!(solved >= 20, "only {solved} solvable cases");
}

// ---- installation --------------------------------------------------------

/// Paths, file bytes and symlink targets below `root`.
fn dir_digest(root: &Path) -> String {
    fn walk(base: &Path, dir: &Path, h: &mut Sha256) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            let meta = fs::symlink_metadata(&p).unwrap();
            h.update(rel.as_bytes());
            if meta.file_type().is_symlink() {
                h.update(b"L");
                h.update(fs::read_link(&p).unwrap().to_string_lossy().as_bytes());
            } else if meta.is_dir() {
                h.update(b"D");
                walk(base, &p, h);
            } else {
                h.update(b"F");
                h.update(fs::read(&p).unwrap());
            }
        }
    }
    let mut h = Sha256::new();
    walk(root, root, &mut h);
    hex::encode(h.finalize())
}

struct Platform {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    engine: Arc<Engine>,
    ext: ExtensionManager,
}

fn platform(registry: Option<&Path>) -> Platform {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().to_path_buf();
    let (engine, ext) = open_platform(&data, registry);
    Platform { _dir: dir, data, engine, ext }
}

fn open_platform(data: &Path, registry: Option<&Path>) -> (Arc<Engine>, ExtensionManager) {
    let archive = Arc::new(Archive::open(data.join("archive"), ArchiveConfig::default()).unwrap());
    let mut cfg = EngineConfig::new(data.join("engine"));
    cfg.worker_count = 2;
    let engine = Arc::new(Engine::open(cfg, archive).unwrap());
    let registry = registry.map(|p| Arc::new(DirRegistry::new(p)) as Arc<dyn minipacs_core::extension::RegistrySource>);
    let ext = ExtensionManager::open(data.join("extensions"), engine.clone(), registry, clock::system()).unwrap();
    (engine, ext)
}

fn state_digest(p: &Platform) -> (String, String) {
    let mut wfs: Vec<_> = p.engine.workflows().into_iter().map(|w| (w.definition.name, w.provider)).collect();
    wfs.sort();
    let mut ops: Vec<_> = p.engine.operators().into_iter().map(|o| o.name).collect();
    ops.sort();
    (dir_digest(&p.data.join("extensions")), format!("{wfs:?}{ops:?}{:?}", p.ext.installed()))
}

const COPY_OP: &str = r#"{
  "name": "copy_table",
  "input_slots": [{"name": "table", "kind": "table"}],
  "output_slots": [{"name": "table", "kind": "table"}],
  "execution": {"type": "external_command", "argv": ["/bin/sh", "-c", "sleep {param:delay}; cp {inputs}/table.csv {outputs}/table.csv"]}
}"#;

fn copy_workflow(name: &str) -> String {
    format!(
        r#"{{"name": "{name}", "version": "1.0.0", "nodes": [
  {{"id": "data", "operator": "load_table", "params": {{"key": "t.csv"}}}},
  {{"id": "copy", "operator": "copy_table", "params": {{"delay": "0"}}, "inputs": [{{"from_node": "data", "slot": "table"}}]}}
]}}"#
    )
}

fn tools_package(version: &str) -> Vec<u8> {
    let manifest = format!(
        r#"{{"name":"table-tools","version":"{version}","contents":{{"workflows":["wf/copy.json"],"operators":["ops/copy.json"],"ui_assets":"ui"}}}}"#
    );
    build_package(
        manifest.as_bytes(),
        &[("wf/copy.json", copy_workflow("copy_tables").as_bytes()), ("ops/copy.json", COPY_OP.as_bytes()), ("ui/index.html", b"<h1>tools</h1>")],
    )
}

#[test]
fn offline_install_runs_and_survives_restart() {
    let p = platform(None);
    let records = p.ext.install_upload(&tools_package("1.0.0")).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].workflows, vec!["copy_tables"]);
    let wf = p.engine.workflow("copy_tables").unwrap();
    assert_eq!(wf.provider.as_deref(), Some("table-tools"));
    assert_eq!(p.ext.ui_asset("table-tools", "index.html").unwrap(), b"<h1>tools</h1>");
    assert!(matches!(p.ext.ui_asset("table-tools", "../manifest.json"), Err(ExtensionError::PathEscape(_))));

    p.engine.archive().store_object("datasets", "t.csv", "text/csv", b"a,b\n1,2\n").unwrap();
    let run = p.engine.execute("copy_tables", None, &BTreeMap::new(), "tester").unwrap();
    assert_eq!(run.state, RunState::Succeeded, "{:?}", run.node_states);
    match p.engine.read_artifact(&run, "copy", "table").unwrap() {
        SlotValue::Table(t) => assert_eq!(t.rows, vec![vec!["1".to_string(), "2".to_string()]]),
        other => panic!("{other:?}"),
    }

    let again = p.ext.install_upload(&tools_package("1.0.0")).unwrap_err();
    assert!(matches!(again, ExtensionError::AlreadyInstalled { .. }), "{again:?}");

    drop(p.ext);
    let (engine, ext) = open_platform(&p.data, None);
    assert_eq!(ext.installed().len(), 1);
    assert!(engine.workflow("copy_tables").is_some());
    assert!(engine.operators().iter().any(|o| o.name == "copy_table"));
}

#[test]
fn failed_installs_leave_state_identical() {
    let reg = tempfile::tempdir().unwrap();
    let p = platform(Some(reg.path()));
    p.ext.install_upload(&tools_package("1.0.0")).unwrap();
    let before = state_digest(&p);

    // Workflow with a cycle.
    let cyclic = r#"{"name":"loop","version":"1.0.0","nodes":[
      {"id":"a","operator":"copy_table","inputs":[{"from_node":"b","slot":"table"}]},
      {"id":"b","operator":"copy_table","inputs":[{"from_node":"a","slot":"table"}]}]}"#;
    let pkg = build_package(br#"{"name":"bad","version":"1.0.0","contents":{"workflows":["loop.json"]}}"#, &[("loop.json", cyclic.as_bytes())]);
    let e = p.ext.install_upload(&pkg).unwrap_err();
    assert!(
        matches!(e, ExtensionError::SanityCheckFailed { cause: SanityError::Workflow(WorkflowError::CycleError(_)), .. }),
        "{e:?}"
    );
    assert_eq!(state_digest(&p), before);

    // Workflow name owned by the platform.
    let clash = copy_workflow("local_train");
    let pkg = build_package(br#"{"name":"clash","version":"1.0.0","contents":{"workflows":["w.json"]}}"#, &[("w.json", clash.as_bytes())]);
    assert!(matches!(p.ext.install_upload(&pkg), Err(ExtensionError::Conflict(_))));
    assert_eq!(state_digest(&p), before);

    // Registry dependency whose archive has one corrupted byte.
    let dep = build_package(br#"{"name":"base","version":"2.1.0"}"#, &[]);
    let mut corrupted = dep.clone();
    let k = corrupted.len() / 2;
    corrupted[k] ^= 0x01;
    fs::write(reg.path().join("base-2.1.0.tar.gz"), &corrupted).unwrap();
    let index = RegistryIndex {
        packages: BTreeMap::from([(
            "base".to_string(),
            vec![IndexEntry { version: Version::new(2, 1, 0), url: "base-2.1.0.tar.gz".into(), sha256: sha256_hex(&dep), dependencies: vec![] }],
        )]),
    };
    fs::write(reg.path().join("index.json"), serde_json::to_vec(&index).unwrap()).unwrap();
    let app = build_package(br#"{"name":"app","version":"1.0.0","dependencies":[{"name":"base","range":"^2.0.0"}]}"#, &[]);
    let e = p.ext.install_upload(&app).unwrap_err();
    assert!(matches!(e, ExtensionError::DigestMismatch(ref u) if u == "base-2.1.0.tar.gz"), "{e:?}");
    assert_eq!(state_digest(&p), before);
    assert!(matches!(p.ext.install_from_registry("base", None), Err(ExtensionError::DigestMismatch(_))));
    assert_eq!(state_digest(&p), before);

    // With the archive repaired the same install resolves and succeeds.
    fs::write(reg.path().join("base-2.1.0.tar.gz"), &dep).unwrap();
    let records = p.ext.install_upload(&app).unwrap();
    let names: Vec<_> = records.iter().map(|r| format!("{}@{}", r.name, r.version)).collect();
    assert_eq!(names, ["base@2.1.0", "app@1.0.0"]);
    let e = p.ext.uninstall("base").unwrap_err();
    assert!(matches!(e, ExtensionError::RequiredBy { ref dependents, .. } if dependents == &["app".to_string()]), "{e:?}");
    p.ext.uninstall("app").unwrap();
    p.ext.uninstall("base").unwrap();
    // A new generation is committed, so only the logical state returns.
    assert_eq!(state_digest(&p).1, before.1);
}

#[test]
fn uninstall_waits_for_active_runs() {
    let p = platform(None);
    p.ext.install_upload(&tools_package("1.0.0")).unwrap();
    p.engine.archive().store_object("datasets", "t.csv", "text/csv", b"a\n1\n").unwrap();
    let overrides = BTreeMap::from([("copy".to_string(), BTreeMap::from([("delay".to_string(), serde_json::json!("1"))]))]);
    let run = p.engine.start_run("copy_tables", None, &overrides, "tester").unwrap();
    let e = p.ext.uninstall("table-tools").unwrap_err();
    assert!(matches!(e, ExtensionError::InUse { ref runs, .. } if runs == &[run.run_id.clone()]), "{e:?}");
    let done = p.engine.wait(&run.run_id, Some(Duration::from_secs(30))).unwrap();
    assert_eq!(done.state, RunState::Succeeded);
    p.ext.uninstall("table-tools").unwrap();
    assert!(p.engine.workflow("copy_tables").is_none());
    assert!(p.ext.installed().is_empty());
}
