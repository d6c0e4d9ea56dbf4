//! tar+gzip extension packages with a `checksums.sha256` listing.

use std::collections::BTreeMap;
use std::io::Read;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use sha2::{Digest, Sha256};

use super::manifest::{check_relative_path, parse_manifest, ExtensionManifest};
use super::ExtensionError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKSUMS_FILE: &str = "checksums.sha256";
const MAX_ENTRIES: usize = 10_000;
const MAX_UNPACKED_BYTES: u64 = 256 * 1024 * 1024;

/// A verified package held in memory.
#[derive(Debug, Clone)]
pub struct Package {
    pub manifest: ExtensionManifest,
    /// Content files by archive path, excluding the manifest and checksums.
    pub files: BTreeMap<String, Vec<u8>>,
    /// SHA-256 of the archive bytes.
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn schema(m: String) -> ExtensionError {
    ExtensionError::SchemaError(m)
}

fn parse_checksums(text: &[u8]) -> Result<BTreeMap<String, String>, ExtensionError> {
    let text = std::str::from_utf8(text).map_err(|_| schema(format!("{CHECKSUMS_FILE}: not UTF-8")))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || schema(format!("{CHECKSUMS_FILE}: line {} is not \"<sha256>  <path>\"", i + 1));
        let (digest, path) = line.split_once("  ").ok_or_else(bad)?;
        if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(bad());
        }
        check_relative_path(path)?;
        if out.insert(path.to_string(), digest.to_ascii_lowercase()).is_some() {
            return Err(schema(format!("{CHECKSUMS_FILE}: {path} listed twice")));
        }
    }
    Ok(out)
}

/// Unpacks and verifies an archive: strict manifest, every manifest path
/// present, every content file listed with a matching digest.
pub fn read_package(bytes: &[u8]) -> Result<Package, ExtensionError> {
    let mut archive = tar::Archive::new(GzDecoder::new(bytes));
    let mut raw: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut total = 0u64;
    let entries = archive.entries().map_err(|e| schema(format!("not a tar+gzip archive: {e}")))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| schema(format!("corrupt archive: {e}")))?;
        let path = String::from_utf8(entry.path_bytes().into_owned()).map_err(|_| schema("non UTF-8 path".into()))?;
        let path = path.strip_prefix("./").unwrap_or(&path).trim_end_matches('/').to_string();
        let kind = entry.header().entry_type();
        if kind.is_dir() || path.is_empty() {
            continue;
        }
        check_relative_path(&path)?;
        if !kind.is_file() {
            // Links could point outside the install directory.
            return Err(ExtensionError::PathEscape(path));
        }
        if raw.len() >= MAX_ENTRIES {
            return Err(schema(format!("more than {MAX_ENTRIES} entries")));
        }
        total += entry.size();
        if total > MAX_UNPACKED_BYTES {
            return Err(schema(format!("unpacked size exceeds {MAX_UNPACKED_BYTES} bytes")));
        }
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut data).map_err(|e| schema(format!("corrupt archive: {e}")))?;
        if raw.insert(path.clone(), data).is_some() {
            return Err(schema(format!("duplicate entry {path}")));
        }
    }
    let manifest_bytes = raw.remove(MANIFEST_FILE).ok_or_else(|| schema(format!("{MANIFEST_FILE} missing")))?;
    let manifest = parse_manifest(&manifest_bytes)?;
    let checksums = parse_checksums(&raw.remove(CHECKSUMS_FILE).ok_or_else(|| schema(format!("{CHECKSUMS_FILE} missing")))?)?;
    for (path, data) in &raw {
        match checksums.get(path) {
            Some(d) if *d == sha256_hex(data) => {}
            Some(_) => return Err(ExtensionError::DigestMismatch(path.clone())),
            None => return Err(schema(format!("{path} has no checksum"))),
        }
    }
    if let Some(path) = checksums.keys().find(|p| !raw.contains_key(*p)) {
        return Err(schema(format!("{CHECKSUMS_FILE}: {path} not in archive")));
    }
    let c = &manifest.contents;
    for path in c.workflows.iter().chain(&c.operators) {
        if !raw.contains_key(path) {
            return Err(schema(format!("contents: {path} not in archive")));
        }
    }
    if let Some(root) = &c.ui_assets {
        let prefix = format!("{root}/");
        if !raw.keys().any(|p| p.starts_with(&prefix)) {
            return Err(schema(format!("contents.ui_assets: {root} holds no files")));
        }
    }
    Ok(Package { manifest, files: raw, sha256: sha256_hex(bytes) })
}

/// Builds an archive from a manifest and content files, writing the
/// checksums listing.
pub fn build_package(manifest_json: &[u8], files: &[(&str, &[u8])]) -> Vec<u8> {
    let mut sorted: Vec<_> = files.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let checksums: String = sorted.iter().map(|(p, d)| format!("{}  {p}\n", sha256_hex(d))).collect();
    let mut builder = tar::Builder::new(GzEncoder::new(Vec::new(), flate2::Compression::default()));
    let mut add = |path: &str, data: &[u8]| {
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder.append_data(&mut header, path, data).expect("in-memory tar write");
    };
    add(MANIFEST_FILE, manifest_json);
    add(CHECKSUMS_FILE, checksums.as_bytes());
    for (p, d) in &sorted {
        add(p, d);
    }
    builder.into_inner().and_then(|gz| gz.finish()).expect("in-memory gzip")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &[u8] = br#"{"name":"demo","version":"0.1.0","contents":{"workflows":["wf.json"],"ui_assets":"ui"}}"#;

    #[test]
    fn round_trip() {
        let bytes = build_package(MANIFEST, &[("wf.json", b"{}"), ("ui/index.html", b"<p>")]);
        let pkg = read_package(&bytes).unwrap();
        assert_eq!(pkg.manifest.name, "demo");
        assert_eq!(pkg.files.len(), 2);
        assert_eq!(pkg.sha256, sha256_hex(&bytes));
    }

    #[test]
    fn tampered_file_and_missing_content() {
        let good = build_package(MANIFEST, &[("wf.json", b"{}"), ("ui/index.html", b"<p>")]);
        // Re-pack with a content file changed after checksumming.
        let pkg = read_package(&good).unwrap();
        let mut builder = tar::Builder::new(GzEncoder::new(Vec::new(), flate2::Compression::default()));
        let checksums: String = pkg.files.iter().map(|(p, d)| format!("{}  {p}\n", sha256_hex(d))).collect();
        for (p, d) in [(MANIFEST_FILE, MANIFEST), (CHECKSUMS_FILE, checksums.as_bytes()), ("wf.json", b"{ }"), ("ui/index.html", b"<p>")] {
            let mut h = tar::Header::new_gnu();
            h.set_size(d.len() as u64);
            h.set_mode(0o644);
            builder.append_data(&mut h, p, d).unwrap();
        }
        let bad = builder.into_inner().unwrap().finish().unwrap();
        assert!(matches!(read_package(&bad), Err(ExtensionError::DigestMismatch(p)) if p == "wf.json"));

        let missing = build_package(MANIFEST, &[("ui/index.html", b"<p>")]);
        assert!(matches!(read_package(&missing), Err(ExtensionError::SchemaError(m)) if m.contains("wf.json")));
        assert!(matches!(read_package(b"not gzip"), Err(ExtensionError::SchemaError(_))));
    }
}
