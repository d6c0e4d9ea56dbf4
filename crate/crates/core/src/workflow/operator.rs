//! Operator specifications, slot values and the operator registry.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dicom::RasterImage;

use super::WorkflowError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Cohort,
    Raster,
    Mask,
    Table,
    Params,
    Model,
}

impl SlotKind {
    /// File extension used for this kind in exchange directories.
    pub fn extension(self) -> &'static str {
        match self {
            SlotKind::Table => "csv",
            _ => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotSpec {
    pub name: String,
    pub kind: SlotKind,
    /// An optional input may be left unconnected.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub optional: bool,
}

impl SlotSpec {
    pub fn new(name: &str, kind: SlotKind) -> Self {
        SlotSpec {
            name: name.to_string(),
            kind,
            optional: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Execution {
    BuiltIn,
    /// Runs `argv` with the node's exchange directory as working directory.
    /// Tokens `{exchange}`, `{inputs}`, `{outputs}` and `{param:NAME}` are
    /// substituted. Each input slot is written to `inputs/<slot>.<ext>`; each
    /// output slot must be left at `outputs/<slot>.<ext>`.
    ExternalCommand { argv: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub name: String,
    pub input_slots: Vec<SlotSpec>,
    pub output_slots: Vec<SlotSpec>,
    pub execution: Execution,
    /// Extension that contributed the operator; `None` for built-ins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    /// Directory against which a relative command path is resolved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_dir: Option<PathBuf>,
}

impl OperatorSpec {
    pub fn input(&self, name: &str) -> Option<&SlotSpec> {
        self.input_slots.iter().find(|s| s.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&SlotSpec> {
        self.output_slots.iter().find(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<(), WorkflowError> {
        let bad = |m: String| WorkflowError::InvalidOperator { name: self.name.clone(), reason: m };
        if self.name.is_empty() || !self.name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.')) {
            return Err(bad("operator names use [A-Za-z0-9._-]".into()));
        }
        for (dir, slots) in [("input", &self.input_slots), ("output", &self.output_slots)] {
            let mut seen = std::collections::BTreeSet::new();
            for s in slots {
                if s.name.is_empty() || !s.name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
                    return Err(bad(format!("invalid {dir} slot name {:?}", s.name)));
                }
                if !seen.insert(&s.name) {
                    return Err(bad(format!("duplicate {dir} slot {:?}", s.name)));
                }
            }
        }
        if let Execution::ExternalCommand { argv } = &self.execution {
            if argv.is_empty() {
                return Err(bad("empty argv".into()));
            }
        }
        Ok(())
    }
}

/// One image flowing between operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageItem {
    pub series_instance_uid: String,
    pub sop_instance_uid: String,
    pub image: RasterImage,
}

/// A table of string cells; empty cells are nulls.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> Result<Vec<u8>, WorkflowError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| WorkflowError::InvalidData(e.to_string());
        w.write_record(&self.columns).map_err(io)?;
        for row in &self.rows {
            w.write_record(row).map_err(io)?;
        }
        w.into_inner().map_err(|e| WorkflowError::InvalidData(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Table, WorkflowError> {
        let io = |e: csv::Error| WorkflowError::InvalidData(e.to_string());
        let mut r = csv::Reader::from_reader(bytes);
        let columns = r.headers().map_err(io)?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()).map_err(io))
            .collect::<Result<_, _>>()?;
        Ok(Table { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// A linear model's parameters and the number of samples behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub weights: Vec<f64>,
    pub samples: u64,
    /// Training loss at the weights the step started from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum SlotValue {
    /// Series instance UIDs.
    Cohort(Vec<String>),
    Raster(Vec<ImageItem>),
    Mask(Vec<ImageItem>),
    Table(Table),
    Params(BTreeMap<String, serde_json::Value>),
    Model(Model),
}

impl SlotValue {
    pub fn kind(&self) -> SlotKind {
        match self {
            SlotValue::Cohort(_) => SlotKind::Cohort,
            SlotValue::Raster(_) => SlotKind::Raster,
            SlotValue::Mask(_) => SlotKind::Mask,
            SlotValue::Table(_) => SlotKind::Table,
            SlotValue::Params(_) => SlotKind::Params,
            SlotValue::Model(_) => SlotKind::Model,
        }
    }

    /// Exchange-file encoding: CSV for tables, JSON of the inner value otherwise.
    pub fn to_file_bytes(&self) -> Result<Vec<u8>, WorkflowError> {
        let json = |r: serde_json::Result<Vec<u8>>| r.map_err(|e| WorkflowError::InvalidData(e.to_string()));
        match self {
            SlotValue::Table(t) => t.to_csv(),
            SlotValue::Cohort(v) => json(serde_json::to_vec(v)),
            SlotValue::Raster(v) | SlotValue::Mask(v) => json(serde_json::to_vec(v)),
            SlotValue::Params(v) => json(serde_json::to_vec(v)),
            SlotValue::Model(v) => json(serde_json::to_vec(v)),
        }
    }

    pub fn from_file_bytes(kind: SlotKind, bytes: &[u8]) -> Result<SlotValue, WorkflowError> {
        let bad = |e: serde_json::Error| WorkflowError::InvalidData(e.to_string());
        Ok(match kind {
            SlotKind::Table => SlotValue::Table(Table::from_csv(bytes)?),
            SlotKind::Cohort => SlotValue::Cohort(serde_json::from_slice(bytes).map_err(bad)?),
            SlotKind::Raster => SlotValue::Raster(serde_json::from_slice(bytes).map_err(bad)?),
            SlotKind::Mask => SlotValue::Mask(serde_json::from_slice(bytes).map_err(bad)?),
            SlotKind::Params => SlotValue::Params(serde_json::from_slice(bytes).map_err(bad)?),
            SlotKind::Model => SlotValue::Model(serde_json::from_slice(bytes).map_err(bad)?),
        })
    }
}

/// Operators available to workflow definitions, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct OperatorRegistry {
    specs: BTreeMap<String, OperatorSpec>,
}

impl OperatorRegistry {
    pub fn new() -> Self {
        OperatorRegistry::default()
    }

    /// The registry holding every built-in operator.
    pub fn with_builtins() -> Self {
        let mut r = OperatorRegistry::new();
        for spec in super::ops::builtin_specs() {
            r.register(spec).expect("built-in specs are valid");
        }
        r
    }

    pub fn register(&mut self, spec: OperatorSpec) -> Result<(), WorkflowError> {
        spec.validate()?;
        if let Some(existing) = self.specs.get(&spec.name) {
            if existing.provider != spec.provider {
                return Err(WorkflowError::InvalidOperator {
                    name: spec.name.clone(),
                    reason: "name already registered by another provider".into(),
                });
            }
        }
        self.specs.insert(spec.name.clone(), spec);
        Ok(())
    }

    /// Removes every operator contributed by `provider`.
    pub fn unregister_provider(&mut self, provider: &str) {
        self.specs.retain(|_, s| s.provider.as_deref() != Some(provider));
    }

    pub fn get(&self, name: &str) -> Option<&OperatorSpec> {
        self.specs.get(name)
    }

    pub fn specs(&self) -> impl Iterator<Item = &OperatorSpec> {
        self.specs.values()
    }
}
