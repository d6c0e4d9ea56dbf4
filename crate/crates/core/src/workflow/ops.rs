//! Built-in operators and the numeric kernels behind them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::Archive;
use crate::dicom::{
    new_derived_series, parse_part10, serialize_part10, tags, FileMeta, RasterImage, TransferSyntax, Vr,
};
use crate::par::{self, ExecMode};

use super::operator::{Execution, ImageItem, Model, OperatorSpec, SlotKind, SlotSpec, SlotValue, Table};
use super::WorkflowError;

/// `mask[i] = 1` iff `image[i] >= threshold`; the mask is 8-bit.
pub fn op_threshold_segment(image: &RasterImage, threshold: u32, mode: ExecMode) -> RasterImage {
    let src = image.pixels();
    let mut out = vec![0u16; src.len()];
    let row = image.cols().max(1) as usize;
    par::fill_chunks(mode, &mut out, row, |i, chunk| {
        let base = i * row;
        for (j, m) in chunk.iter_mut().enumerate() {
            *m = u16::from(u32::from(src[base + j]) >= threshold);
        }
    });
    RasterImage::new(image.rows(), image.cols(), 8, out).expect("mask has the image's shape")
}

/// Statistics over the masked samples. `std` is the population standard
/// deviation. An empty mask gives a zero count and no statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub voxel_count: u64,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<u16>,
    pub max: Option<u16>,
}

pub fn op_region_stats(image: &RasterImage, mask: &RasterImage) -> Result<RegionStats, WorkflowError> {
    if !image.same_shape(mask) {
        return Err(WorkflowError::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            image.rows(),
            image.cols(),
            mask.rows(),
            mask.cols()
        )));
    }
    let selected: Vec<u16> = image
        .pixels()
        .iter()
        .zip(mask.pixels())
        .filter(|(_, &m)| m == 1)
        .map(|(&v, _)| v)
        .collect();
    if selected.is_empty() {
        return Ok(RegionStats {
            voxel_count: 0,
            mean: None,
            std: None,
            min: None,
            max: None,
        });
    }
    let n = selected.len() as f64;
    let sum: u64 = selected.iter().map(|&v| u64::from(v)).sum();
    let mean = sum as f64 / n;
    let var = selected.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    Ok(RegionStats {
        voxel_count: selected.len() as u64,
        mean: Some(mean),
        std: Some(var.sqrt()),
        min: selected.iter().min().copied(),
        max: selected.iter().max().copied(),
    })
}

/// Mean squared error of the linear model `w` on `(x, y)`.
pub fn mse_loss(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> f64 {
    let n = x.len() as f64;
    x.iter()
        .zip(y)
        .map(|(row, &t)| {
            let r = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - t;
            r * r
        })
        .sum::<f64>()
        / n
}

/// One full-batch gradient step on the mean squared error:
/// `w' = w - lr * (2/n) * X^T (X w - y)`. Returns `(w', n)`.
pub fn op_local_train(x: &[Vec<f64>], y: &[f64], w: &[f64], lr: f64) -> Result<(Vec<f64>, u64), WorkflowError> {
    let n = x.len();
    if n == 0 {
        return Err(WorkflowError::EmptyCohortData);
    }
    if y.len() != n {
        return Err(WorkflowError::ShapeMismatch(format!("{n} feature rows but {} labels", y.len())));
    }
    if let Some(bad) = x.iter().find(|row| row.len() != w.len()) {
        return Err(WorkflowError::ShapeMismatch(format!(
            "feature row of width {} against {} parameters",
            bad.len(),
            w.len()
        )));
    }
    let residual: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(row, &t)| row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - t)
        .collect();
    let scale = 2.0 / n as f64;
    let next = (0..w.len())
        .map(|j| {
            let g: f64 = x.iter().zip(&residual).map(|(row, r)| row[j] * r).sum();
            w[j] - lr * scale * g
        })
        .collect();
    Ok((next, n as u64))
}

fn slots(list: &[(&str, SlotKind)]) -> Vec<SlotSpec> {
    list.iter().map(|(n, k)| SlotSpec::new(n, *k)).collect()
}

fn builtin(name: &str, inputs: &[(&str, SlotKind)], outputs: &[(&str, SlotKind)]) -> OperatorSpec {
    OperatorSpec {
        name: name.to_string(),
        input_slots: slots(inputs),
        output_slots: slots(outputs),
        execution: Execution::BuiltIn,
        provider: None,
        base_dir: None,
    }
}

pub fn builtin_specs() -> Vec<OperatorSpec> {
    use SlotKind::*;
    vec![
        builtin("load_images", &[("cohort", Cohort), ("params", Params)], &[("images", Raster)]),
        builtin("threshold_segment", &[("images", Raster), ("params", Params)], &[("mask", Mask)]),
        builtin("region_stats", &[("images", Raster), ("mask", Mask)], &[("stats", Table)]),
        builtin("store_segmentation", &[("images", Raster), ("mask", Mask), ("params", Params)], &[("series", Cohort)]),
        builtin("load_table", &[("params", Params)], &[("table", Table)]),
        builtin("local_train", &[("table", Table), ("params", Params)], &[("model", Model)]),
    ]
}

/// What a built-in operator body may use.
pub struct OpContext<'a> {
    pub archive: &'a Archive,
    pub run_id: &'a str,
    pub node_id: &'a str,
    pub exec: ExecMode,
}

pub type Inputs = BTreeMap<String, SlotValue>;
pub type Outputs = BTreeMap<String, SlotValue>;

fn take<'a>(inputs: &'a Inputs, slot: &str) -> Result<&'a SlotValue, String> {
    inputs.get(slot).ok_or_else(|| format!("input slot {slot:?} missing"))
}

fn params(inputs: &Inputs) -> BTreeMap<String, Value> {
    match inputs.get("params") {
        Some(SlotValue::Params(p)) => p.clone(),
        _ => BTreeMap::new(),
    }
}

fn param_f64(p: &BTreeMap<String, Value>, name: &str) -> Result<Option<f64>, String> {
    match p.get(name) {
        None => Ok(None),
        Some(Value::Number(n)) => n.as_f64().map(Some).ok_or_else(|| format!("param {name} is not finite")),
        Some(Value::String(s)) => s.trim().parse().map(Some).map_err(|_| format!("param {name} is not a number")),
        Some(_) => Err(format!("param {name} is not a number")),
    }
}

fn param_str(p: &BTreeMap<String, Value>, name: &str) -> Option<String> {
    match p.get(name) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        Some(Value::Bool(b)) => Some(b.to_string()),
        _ => None,
    }
}

fn images<'a>(inputs: &'a Inputs, slot: &str) -> Result<&'a [ImageItem], String> {
    match take(inputs, slot)? {
        SlotValue::Raster(v) | SlotValue::Mask(v) => Ok(v),
        other => Err(format!("slot {slot:?} holds {:?}", other.kind())),
    }
}

/// Runs a built-in operator body.
pub fn run_builtin(name: &str, ctx: &OpContext<'_>, inputs: Inputs) -> Result<Outputs, String> {
    let p = params(&inputs);
    let out = match name {
        "load_images" => {
            let SlotValue::Cohort(series) = take(&inputs, "cohort")? else {
                return Err("cohort slot holds the wrong kind".into());
            };
            let limit = param_f64(&p, "max_instances_per_series")?.map(|v| v.max(1.0) as usize);
            let mut items = Vec::new();
            for s in series {
                let members = ctx.archive.series_instances(s).map_err(|e| e.to_string())?;
                for rec in members.iter().take(limit.unwrap_or(usize::MAX)) {
                    let raw = ctx.archive.read_instance(&rec.sop_instance_uid).map_err(|e| e.to_string())?;
                    let (_, ds) = parse_part10(&raw).map_err(|e| e.to_string())?;
                    items.push(ImageItem {
                        series_instance_uid: s.clone(),
                        sop_instance_uid: rec.sop_instance_uid.clone(),
                        image: RasterImage::from_dataset(&ds).map_err(|e| e.to_string())?,
                    });
                }
            }
            BTreeMap::from([("images".to_string(), SlotValue::Raster(items))])
        }
        "threshold_segment" => {
            let t = param_f64(&p, "threshold")?.ok_or("param threshold is required")?;
            if t < 0.0 || t.fract() != 0.0 {
                return Err("threshold must be a non-negative integer".into());
            }
            let masks = images(&inputs, "images")?
                .iter()
                .map(|it| ImageItem {
                    series_instance_uid: it.series_instance_uid.clone(),
                    sop_instance_uid: it.sop_instance_uid.clone(),
                    image: op_threshold_segment(&it.image, t as u32, ctx.exec),
                })
                .collect();
            BTreeMap::from([("mask".to_string(), SlotValue::Mask(masks))])
        }
        "region_stats" => {
            let masks: BTreeMap<&str, &ImageItem> =
                images(&inputs, "mask")?.iter().map(|m| (m.sop_instance_uid.as_str(), m)).collect();
            let mut table = Table {
                columns: ["series_instance_uid", "sop_instance_uid", "voxel_count", "mean", "std", "min", "max"]
                    .map(String::from)
                    .to_vec(),
                rows: Vec::new(),
            };
            for it in images(&inputs, "images")? {
                let mask = masks
                    .get(it.sop_instance_uid.as_str())
                    .ok_or_else(|| format!("no mask for {}", it.sop_instance_uid))?;
                let s = op_region_stats(&it.image, &mask.image).map_err(|e| e.to_string())?;
                let opt = |v: Option<String>| v.unwrap_or_default();
                table.rows.push(vec![
                    it.series_instance_uid.clone(),
                    it.sop_instance_uid.clone(),
                    s.voxel_count.to_string(),
                    opt(s.mean.map(|v| v.to_string())),
                    opt(s.std.map(|v| v.to_string())),
                    opt(s.min.map(|v| v.to_string())),
                    opt(s.max.map(|v| v.to_string())),
                ]);
            }
            BTreeMap::from([("stats".to_string(), SlotValue::Table(table))])
        }
        "store_segmentation" => {
            let description = param_str(&p, "description").unwrap_or_else(|| "Threshold mask".into());
            let masks = images(&inputs, "mask")?;
            let mut derived: BTreeMap<String, String> = BTreeMap::new();
            let mut numbers: BTreeMap<String, u32> = BTreeMap::new();
            for m in masks {
                let raw = ctx.archive.read_instance(&m.sop_instance_uid).map_err(|e| e.to_string())?;
                let (_, source) = parse_part10(&raw).map_err(|e| e.to_string())?;
                let mut ds = new_derived_series(&source, &m.image, &description).map_err(|e| e.to_string())?;
                let n = numbers.entry(m.series_instance_uid.clone()).or_insert(0);
                *n += 1;
                match derived.get(&m.series_instance_uid) {
                    Some(series) => ds.put_text(tags::SERIES_INSTANCE_UID, Vr::UI, series),
                    None => {
                        derived.insert(
                            m.series_instance_uid.clone(),
                            ds.get_str(tags::SERIES_INSTANCE_UID).expect("derived series uid"),
                        );
                    }
                }
                ds.put_text(tags::INSTANCE_NUMBER, Vr::IS, &n.to_string());
                ds.put_text(tags::WINDOW_CENTER, Vr::DS, "0.5");
                ds.put_text(tags::WINDOW_WIDTH, Vr::DS, "1");
                let sop = ds.get_str(tags::SOP_INSTANCE_UID).expect("derived sop uid");
                let class = ds.get_str(tags::SOP_CLASS_UID).expect("derived sop class");
                let meta = FileMeta::new(TransferSyntax::ExplicitVrLittleEndian, &class, &sop);
                let bytes = serialize_part10(&meta, &ds).map_err(|e| e.to_string())?;
                ctx.archive.ingest_instance(&meta, &ds, &bytes).map_err(|e| e.to_string())?;
            }
            let mut series: Vec<String> = derived.into_values().collect();
            series.sort();
            BTreeMap::from([("series".to_string(), SlotValue::Cohort(series))])
        }
        "load_table" => {
            let bucket = param_str(&p, "bucket").unwrap_or_else(|| "datasets".into());
            let key = param_str(&p, "key").ok_or("param key is required")?;
            let bytes = ctx.archive.fetch_object(&bucket, &key).map_err(|e| format!("{bucket}/{key}: {e}"))?;
            let table = Table::from_csv(&bytes).map_err(|e| e.to_string())?;
            BTreeMap::from([("table".to_string(), SlotValue::Table(table))])
        }
        "local_train" => {
            let SlotValue::Table(table) = take(&inputs, "table")? else {
                return Err("table slot holds the wrong kind".into());
            };
            let lr = param_f64(&p, "lr")?.ok_or("param lr is required")?;
            let w: Vec<f64> = param_str(&p, "w")
                .ok_or("param w is required")?
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad weight {s:?}")))
                .collect::<Result<_, _>>()?;
            let target = param_str(&p, "target").unwrap_or_else(|| "y".into());
            let ti = table.column(&target).ok_or_else(|| format!("no column {target:?}"))?;
            let features: Vec<usize> = match param_str(&p, "features") {
                Some(list) => list
                    .split(',')
                    .map(|c| table.column(c.trim()).ok_or_else(|| format!("no column {c:?}")))
                    .collect::<Result<_, _>>()?,
                None => (0..table.columns.len()).filter(|&i| i != ti).collect(),
            };
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("non-numeric cell {s:?}"));
            let mut x = Vec::with_capacity(table.rows.len());
            let mut y = Vec::with_capacity(table.rows.len());
            for row in &table.rows {
                x.push(features.iter().map(|&i| num(&row[i])).collect::<Result<Vec<_>, _>>()?);
                y.push(num(&row[ti])?);
            }
            let (weights, samples) = op_local_train(&x, &y, &w, lr).map_err(|e| e.to_string())?;
            let loss = Some(mse_loss(&x, &y, &w));
            BTreeMap::from([("model".to_string(), SlotValue::Model(Model { weights, samples, loss }))])
        }
        other => return Err(format!("no built-in operator {other:?}")),
    };
    Ok(out)
}
