//! Where packages come from.

use std::fs;
use std::path::PathBuf;

use super::manifest::check_relative_path;
use super::resolve::RegistryIndex;
use super::ExtensionError;

pub const INDEX_FILE: &str = "index.json";

pub trait RegistrySource: Send + Sync {
    fn index(&self) -> Result<RegistryIndex, ExtensionError>;
    fn fetch(&self, url: &str) -> Result<Vec<u8>, ExtensionError>;
}

/// A directory holding `index.json` and archives addressed by relative URL.
#[derive(Debug, Clone)]
pub struct DirRegistry {
    root: PathBuf,
}

impl DirRegistry {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirRegistry { root: root.into() }
    }
}

impl RegistrySource for DirRegistry {
    fn index(&self) -> Result<RegistryIndex, ExtensionError> {
        let path = self.root.join(INDEX_FILE);
        let bytes = fs::read(&path).map_err(|e| ExtensionError::Registry(format!("{}: {e}", path.display())))?;
        let index: RegistryIndex =
            serde_json::from_slice(&bytes).map_err(|e| ExtensionError::SchemaError(format!("index: {e}")))?;
        index.validate()?;
        Ok(index)
    }

    fn fetch(&self, url: &str) -> Result<Vec<u8>, ExtensionError> {
        check_relative_path(url)?;
        fs::read(self.root.join(url)).map_err(|e| ExtensionError::Registry(format!("{url}: {e}")))
    }
}
