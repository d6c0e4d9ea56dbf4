//! Registry index and dependency resolution.
//!
//! Candidate packages are ordered by their shortest dependency distance from
//! the root, then by name. Among assignments where every reachable package
//! has exactly one version satisfying all ranges that reach it, unreachable
//! packages are absent and the graph is acyclic, the resolver returns the
//! lexicographically greatest in that order (absent below any version).
//! Installed packages are fixed at their version and their own dependencies
//! are taken as already satisfied.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::semver::{Version, VersionReq};

use super::manifest::{valid_extension_name, Dependency, ExtensionManifest};
use super::ExtensionError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub version: Version,
    pub url: String,
    pub sha256: String,
    /// Mirrors the package manifest so resolution needs no downloads.
    #[serde(default)]
    pub dependencies: Vec<Dependency>,
}

/// name → published versions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegistryIndex {
    pub packages: BTreeMap<String, Vec<IndexEntry>>,
}

impl RegistryIndex {
    pub fn validate(&self) -> Result<(), ExtensionError> {
        for (name, entries) in &self.packages {
            if !valid_extension_name(name) {
                return Err(ExtensionError::SchemaError(format!("index: bad package name {name:?}")));
            }
            let versions: BTreeSet<_> = entries.iter().map(|e| &e.version).collect();
            if versions.len() != entries.len() {
                return Err(ExtensionError::SchemaError(format!("index: duplicate version of {name}")));
            }
        }
        Ok(())
    }

    pub fn entry(&self, name: &str, version: &Version) -> Option<&IndexEntry> {
        self.packages.get(name)?.iter().find(|e| &e.version == version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanSource {
    /// The package being installed.
    Root,
    Registry(IndexEntry),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedInstall {
    pub name: String,
    pub version: Version,
    pub source: PlanSource,
}

#[derive(Debug, Clone)]
struct Choice {
    /// `None` stands in for a package missing from the registry while
    /// diagnosing.
    version: Option<Version>,
    deps: Vec<Dependency>,
    entry: Option<IndexEntry>,
    installed: bool,
}

impl Choice {
    fn satisfies(&self, range: &VersionReq) -> bool {
        self.version.as_ref().is_none_or(|v| range.matches(v))
    }
}

struct Var {
    name: String,
    /// Preferred first; absence is always the last option.
    domain: Vec<Choice>,
    missing: bool,
}

struct Problem {
    vars: Vec<Var>,
    index_of: BTreeMap<String, usize>,
}

struct Search<'a> {
    p: &'a Problem,
    allow_cycles: bool,
    assignment: Vec<Option<usize>>,
    /// Deepest range clash seen: (variable, package, ranges).
    clash: Option<(usize, String, Vec<String>)>,
}

impl Problem {
    fn build(root: &ExtensionManifest, installed: &BTreeMap<String, Version>, index: &RegistryIndex, wildcard_missing: bool) -> Problem {
        let mut depth: BTreeMap<String, usize> = BTreeMap::from([(root.name.clone(), 0)]);
        let mut queue = VecDeque::from([(root.name.clone(), root.dependencies.clone())]);
        while let Some((name, deps)) = queue.pop_front() {
            let d = depth[&name];
            for dep in deps {
                if depth.contains_key(&dep.name) {
                    continue;
                }
                depth.insert(dep.name.clone(), d + 1);
                if !installed.contains_key(&dep.name) {
                    let all: Vec<Dependency> = index
                        .packages
                        .get(&dep.name)
                        .into_iter()
                        .flatten()
                        .flat_map(|e| e.dependencies.iter().cloned())
                        .collect();
                    queue.push_back((dep.name.clone(), all));
                }
            }
        }
        let mut order: Vec<(usize, String)> = depth.into_iter().map(|(n, d)| (d, n)).collect();
        order.sort();
        let mut vars = Vec::with_capacity(order.len());
        for (_, name) in order {
            let mut domain = Vec::new();
            let mut missing = false;
            if name == root.name {
                domain.push(Choice { version: Some(root.version.clone()), deps: root.dependencies.clone(), entry: None, installed: false });
            } else if let Some(v) = installed.get(&name) {
                domain.push(Choice { version: Some(v.clone()), deps: Vec::new(), entry: None, installed: true });
            } else if let Some(entries) = index.packages.get(&name) {
                let mut entries: Vec<&IndexEntry> = entries.iter().collect();
                entries.sort_by(|a, b| b.version.cmp(&a.version));
                domain.extend(entries.into_iter().map(|e| Choice {
                    version: Some(e.version.clone()),
                    deps: e.dependencies.clone(),
                    entry: Some(e.clone()),
                    installed: false,
                }));
            } else {
                missing = true;
                if wildcard_missing {
                    domain.push(Choice { version: None, deps: Vec::new(), entry: None, installed: false });
                }
            }
            vars.push(Var { name, domain, missing });
        }
        let index_of = vars.iter().enumerate().map(|(i, v)| (v.name.clone(), i)).collect();
        Problem { vars, index_of }
    }

    fn choice(&self, var: usize, pick: Option<usize>) -> Option<&Choice> {
        pick.map(|c| &self.vars[var].domain[c])
    }
}

impl Search<'_> {
    /// Checks every edge between `k` and earlier variables. On failure
    /// names the package whose ranges clash.
    fn consistent(&self, k: usize) -> Result<(), String> {
        let p = self.p;
        let mine = p.choice(k, self.assignment[k]);
        let name = &p.vars[k].name;
        for j in 0..k {
            let Some(other) = p.choice(j, self.assignment[j]) else { continue };
            for dep in other.deps.iter().filter(|d| &d.name == name) {
                match mine {
                    Some(c) if c.satisfies(&dep.range) => {}
                    _ => return Err(name.clone()),
                }
            }
        }
        if let Some(c) = mine {
            for dep in &c.deps {
                let Some(&j) = p.index_of.get(&dep.name) else { return Err(dep.name.clone()) };
                if j < k {
                    match p.choice(j, self.assignment[j]) {
                        Some(t) if t.satisfies(&dep.range) => {}
                        _ => return Err(dep.name.clone()),
                    }
                }
            }
        }
        Ok(())
    }

    fn record_clash(&mut self, k: usize, target: String) {
        if self.clash.as_ref().is_some_and(|(depth, _, _)| *depth >= k) {
            return;
        }
        let mut ranges = BTreeSet::new();
        for j in 0..=k {
            if let Some(c) = self.p.choice(j, self.assignment[j]) {
                for dep in c.deps.iter().filter(|d| d.name == target) {
                    ranges.insert(format!("{} requires {}", self.p.vars[j].name, dep.range));
                }
            }
        }
        self.clash = Some((k, target, ranges.into_iter().collect()));
    }

    fn complete_ok(&self) -> bool {
        let p = self.p;
        let mut reach = BTreeSet::from([0usize]);
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let Some(c) = p.choice(i, self.assignment[i]) else { return false };
            for dep in &c.deps {
                let j = p.index_of[&dep.name];
                if reach.insert(j) {
                    stack.push(j);
                }
            }
        }
        let present: BTreeSet<usize> = (0..p.vars.len()).filter(|&i| self.assignment[i].is_some()).collect();
        present == reach && (self.allow_cycles || find_cycle(p, &self.assignment).is_none())
    }

    fn run(&mut self, k: usize) -> bool {
        if k == self.p.vars.len() {
            return self.complete_ok();
        }
        let options = self.p.vars[k].domain.len();
        for pick in (0..options).map(Some).chain([None]) {
            if k == 0 && pick.is_none() {
                break;
            }
            self.assignment[k] = pick;
            match self.consistent(k) {
                Ok(()) => {
                    if self.run(k + 1) {
                        return true;
                    }
                }
                Err(target) => self.record_clash(k, target),
            }
        }
        self.assignment[k] = None;
        false
    }
}

fn find_cycle(p: &Problem, assignment: &[Option<usize>]) -> Option<Vec<String>> {
    fn visit(p: &Problem, a: &[Option<usize>], i: usize, color: &mut [u8], path: &mut Vec<usize>) -> Option<Vec<String>> {
        color[i] = 1;
        path.push(i);
        if let Some(c) = p.choice(i, a[i]) {
            for dep in &c.deps {
                let Some(&j) = p.index_of.get(&dep.name) else { continue };
                if a[j].is_none() {
                    continue;
                }
                if color[j] == 1 {
                    let start = path.iter().position(|&x| x == j).expect("on path");
                    return Some(path[start..].iter().map(|&x| p.vars[x].name.clone()).collect());
                }
                if color[j] == 0 {
                    if let Some(c) = visit(p, a, j, color, path) {
                        return Some(c);
                    }
                }
            }
        }
        path.pop();
        color[i] = 2;
        None
    }
    let mut color = vec![0u8; p.vars.len()];
    for i in 0..p.vars.len() {
        if color[i] == 0 && assignment[i].is_some() {
            if let Some(c) = visit(p, assignment, i, &mut color, &mut Vec::new()) {
                return Some(c);
            }
        }
    }
    None
}

type Clash = Option<(usize, String, Vec<String>)>;

fn solve(p: &Problem, allow_cycles: bool) -> (Option<Vec<Option<usize>>>, Clash) {
    let mut s = Search { p, allow_cycles, assignment: vec![None; p.vars.len()], clash: None };
    let found = s.run(0);
    (found.then(|| s.assignment.clone()), s.clash)
}

/// Returns the packages to install, dependencies first, ending with `root`.
pub fn resolve_dependencies(
    root: &ExtensionManifest,
    installed: &BTreeMap<String, Version>,
    index: &RegistryIndex,
) -> Result<Vec<PlannedInstall>, ExtensionError> {
    let problem = Problem::build(root, installed, index, false);
    let (found, clash) = solve(&problem, false);
    let Some(assignment) = found else {
        if let (Some(a), _) = solve(&problem, true) {
            let cycle = find_cycle(&problem, &a).expect("only cycles were relaxed");
            return Err(ExtensionError::DependencyCycle(cycle));
        }
        if problem.vars.iter().any(|v| v.missing) {
            let relaxed = Problem::build(root, installed, index, true);
            if let (Some(a), _) = solve(&relaxed, true) {
                let name = relaxed
                    .vars
                    .iter()
                    .zip(&a)
                    .find(|(v, pick)| v.missing && pick.is_some())
                    .map(|(v, _)| v.name.clone())
                    .expect("a wildcard was needed");
                return Err(ExtensionError::NotInRegistry(name));
            }
        }
        let (_, name, ranges) = clash.unwrap_or_else(|| (0, root.name.clone(), Vec::new()));
        return Err(ExtensionError::UnsatisfiableConstraint { package: name, ranges });
    };

    // Kahn over the packages to install; ties broken by name.
    let chosen: BTreeMap<&str, &Choice> = problem
        .vars
        .iter()
        .zip(&assignment)
        .filter_map(|(v, pick)| pick.map(|c| (v.name.as_str(), &v.domain[c])))
        .filter(|(_, c)| !c.installed)
        .collect();
    let mut pending: BTreeMap<&str, BTreeSet<&str>> = chosen
        .iter()
        .map(|(n, c)| (*n, c.deps.iter().map(|d| d.name.as_str()).filter(|d| chosen.contains_key(d)).collect()))
        .collect();
    let mut out = Vec::with_capacity(chosen.len());
    while !pending.is_empty() {
        let next = *pending.iter().find(|(_, deps)| deps.is_empty()).map(|(n, _)| n).expect("acyclic");
        pending.remove(next);
        for deps in pending.values_mut() {
            deps.remove(next);
        }
        let c = chosen[next];
        out.push(PlannedInstall {
            name: next.to_string(),
            version: c.version.clone().expect("concrete"),
            source: match &c.entry {
                Some(e) => PlanSource::Registry(e.clone()),
                None => PlanSource::Root,
            },
        });
    }
    Ok(out)
}
