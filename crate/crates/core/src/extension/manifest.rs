//! Strict extension manifest schema.

use serde::{Deserialize, Serialize};

use crate::semver::{Version, VersionReq};

use super::ExtensionError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub name: String,
    pub range: VersionReq,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contents {
    #[serde(default)]
    pub workflows: Vec<String>,
    #[serde(default)]
    pub operators: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ui_assets: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionManifest {
    pub name: String,
    pub version: Version,
    #[serde(default)]
    pub dependencies: Vec<Dependency>,
    #[serde(default)]
    pub contents: Contents,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDependency {
    name: String,
    range: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawContents {
    #[serde(default)]
    workflows: Vec<String>,
    #[serde(default)]
    operators: Vec<String>,
    #[serde(default)]
    ui_assets: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    name: String,
    version: String,
    #[serde(default)]
    dependencies: Vec<RawDependency>,
    #[serde(default)]
    contents: Option<RawContents>,
}

pub fn valid_extension_name(name: &str) -> bool {
    (1..=64).contains(&name.len()) && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

/// Archive-relative, `/`-separated, no `..`, `.` or empty segments.
pub fn check_relative_path(path: &str) -> Result<(), ExtensionError> {
    let escape = || Err(ExtensionError::PathEscape(path.to_string()));
    if path.is_empty() || path.starts_with('/') || path.contains('\\') || path.contains('\0') {
        return escape();
    }
    if path.len() >= 2 && path.as_bytes()[1] == b':' {
        return escape();
    }
    if path.split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..") {
        return escape();
    }
    Ok(())
}

pub fn parse_manifest(bytes: &[u8]) -> Result<ExtensionManifest, ExtensionError> {
    let raw: RawManifest = serde_json::from_slice(bytes).map_err(|e| ExtensionError::SchemaError(e.to_string()))?;
    if !valid_extension_name(&raw.name) {
        return Err(ExtensionError::SchemaError(format!("name: {:?} must match [a-z0-9-]{{1,64}}", raw.name)));
    }
    let version: Version = raw.version.parse().map_err(|_| ExtensionError::BadSemver(raw.version.clone()))?;
    let mut dependencies = Vec::with_capacity(raw.dependencies.len());
    for d in raw.dependencies {
        if !valid_extension_name(&d.name) {
            return Err(ExtensionError::SchemaError(format!("dependencies.name: {:?} is not an extension name", d.name)));
        }
        if d.name == raw.name {
            return Err(ExtensionError::SchemaError(format!("dependencies.name: {:?} depends on itself", d.name)));
        }
        if dependencies.iter().any(|x: &Dependency| x.name == d.name) {
            return Err(ExtensionError::SchemaError(format!("dependencies.name: {:?} listed twice", d.name)));
        }
        let range: VersionReq = d.range.parse().map_err(|_| ExtensionError::BadSemver(d.range.clone()))?;
        dependencies.push(Dependency { name: d.name, range });
    }
    let contents = raw.contents.map_or_else(Contents::default, |c| Contents {
        workflows: c.workflows,
        operators: c.operators,
        ui_assets: c.ui_assets,
    });
    for p in contents.workflows.iter().chain(&contents.operators).chain(&contents.ui_assets) {
        check_relative_path(p)?;
    }
    Ok(ExtensionManifest { name: raw.name, version, dependencies, contents })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_manifest() {
        let m = parse_manifest(br#"{"name":"seg-tools","version":"1.2.3","contents":{"workflows":["wf/a.json"]}}"#).unwrap();
        assert_eq!(m.name, "seg-tools");
        assert_eq!(m.version.to_string(), "1.2.3");
        assert!(m.dependencies.is_empty());
        assert_eq!(m.contents.workflows, vec!["wf/a.json"]);
    }

    #[test]
    fn strictness() {
        let e = parse_manifest(br#"{"name":"a","version":"1.0"}"#).unwrap_err();
        assert!(matches!(e, ExtensionError::BadSemver(ref v) if v == "1.0"), "{e:?}");
        let e = parse_manifest(br#"{"name":"a","version":"1.0.0","contents":{"workflows":["../../etc"]}}"#).unwrap_err();
        assert!(matches!(e, ExtensionError::PathEscape(ref p) if p == "../../etc"), "{e:?}");
        let e = parse_manifest(br#"{"name":"a","version":"1.0.0","extra":1}"#).unwrap_err();
        assert!(matches!(e, ExtensionError::SchemaError(ref m) if m.contains("extra")), "{e:?}");
        let e = parse_manifest(br#"{"name":"A","version":"1.0.0"}"#).unwrap_err();
        assert!(matches!(e, ExtensionError::SchemaError(ref m) if m.starts_with("name")), "{e:?}");
        let e = parse_manifest(br#"{"name":"a","version":"1.0.0","dependencies":[{"name":"b","range":">=x"}]}"#).unwrap_err();
        assert!(matches!(e, ExtensionError::BadSemver(_)), "{e:?}");
        for bad in ["/etc/passwd", "a//b", "./a", "a\\b", "C:x"] {
            assert!(check_relative_path(bad).is_err(), "{bad}");
        }
        assert!(check_relative_path("ui/index.html").is_ok());
    }
}
