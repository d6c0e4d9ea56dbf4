//! Synthetic DICOM generators shared by tests, benches and demos.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dicom::{
    dictionary, serialize_part10, tags, DataElement, DicomDataset, FileMeta, RasterImage, Tag,
    TransferSyntax, Vr,
};

pub const CT_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.2";
pub const MR_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.4";

/// Attributes of one generated image instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    pub patient_id: String,
    pub patient_name: String,
    pub study_uid: String,
    pub series_uid: String,
    pub sop_uid: String,
    pub modality: String,
    pub study_date: Option<String>,
    pub series_description: String,
    pub body_part: Option<String>,
    pub instance_number: u32,
    pub rows: u16,
    pub cols: u16,
    pub bits_allocated: u8,
    pub pixel_seed: u64,
    pub transfer_syntax: TransferSyntax,
}

impl InstanceSpec {
    pub fn sop_class(&self) -> &'static str {
        if self.modality == "MR" {
            MR_IMAGE_STORAGE
        } else {
            CT_IMAGE_STORAGE
        }
    }

    pub fn image(&self) -> RasterImage {
        let n = usize::from(self.rows) * usize::from(self.cols);
        let max = if self.bits_allocated == 8 { 0xFFu64 } else { 0x0FFFu64 };
        let mut state = self.pixel_seed | 1;
        let pixels = (0..n)
            .map(|_| {
                // xorshift64
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % (max + 1)) as u16
            })
            .collect();
        RasterImage::new(
            u32::from(self.rows),
            u32::from(self.cols),
            self.bits_allocated,
            pixels,
        )
        .expect("generated image is valid")
    }

    pub fn dataset(&self) -> (FileMeta, DicomDataset) {
        let mut ds = DicomDataset::new();
        ds.put_text(tags::SOP_CLASS_UID, Vr::UI, self.sop_class());
        ds.put_text(tags::SOP_INSTANCE_UID, Vr::UI, &self.sop_uid);
        if let Some(date) = &self.study_date {
            ds.put_text(tags::STUDY_DATE, Vr::DA, date);
        }
        ds.put_text(tags::MODALITY, Vr::CS, &self.modality);
        ds.put_text(tags::SERIES_DESCRIPTION, Vr::LO, &self.series_description);
        ds.put_text(tags::PATIENT_NAME, Vr::PN, &self.patient_name);
        ds.put_text(tags::PATIENT_ID, Vr::LO, &self.patient_id);
        if let Some(part) = &self.body_part {
            ds.put_text(tags::BODY_PART_EXAMINED, Vr::CS, part);
        }
        ds.put_text(tags::STUDY_INSTANCE_UID, Vr::UI, &self.study_uid);
        ds.put_text(tags::SERIES_INSTANCE_UID, Vr::UI, &self.series_uid);
        ds.put_text(tags::INSTANCE_NUMBER, Vr::IS, &self.instance_number.to_string());
        self.image().write_to(&mut ds);
        let meta = FileMeta::new(self.transfer_syntax, self.sop_class(), &self.sop_uid);
        (meta, ds)
    }

    pub fn part10(&self) -> Vec<u8> {
        let (meta, ds) = self.dataset();
        serialize_part10(&meta, &ds).expect("generated dataset serializes")
    }
}

/// A cohort of studies: `series_modalities[i]` gives the modality of series
/// `i`, each holding `per_series` instances. UIDs are derived from `tag`.
pub fn series_fixture<R: Rng>(
    rng: &mut R,
    tag: &str,
    series_modalities: &[&str],
    per_series: u32,
    rows: u16,
    cols: u16,
) -> Vec<InstanceSpec> {
    let mut out = Vec::new();
    let parts = ["HEAD", "CHEST", "ABDOMEN"];
    for (s, modality) in series_modalities.iter().enumerate() {
        let patient = s / 2;
        let study_uid = format!("1.2.826.0.1.3680043.10.1138.9.{tag}.{patient}");
        let series_uid = format!("{study_uid}.{s}");
        let date = format!("2020{:02}{:02}", 1 + patient % 12, 1 + (patient * 7) % 28);
        let body_part = (s % 3 != 2).then(|| parts[s % parts.len()].to_string());
        for i in 0..per_series {
            out.push(InstanceSpec {
                patient_id: format!("PAT{patient:03}"),
                patient_name: format!("Doe^Patient{patient}"),
                study_uid: study_uid.clone(),
                series_uid: series_uid.clone(),
                sop_uid: format!("{series_uid}.{}", i + 1),
                modality: modality.to_string(),
                study_date: Some(date.clone()),
                series_description: format!("{modality} series {s}"),
                body_part: body_part.clone(),
                instance_number: i + 1,
                rows,
                cols,
                bits_allocated: 16,
                pixel_seed: rng.gen(),
                transfer_syntax: TransferSyntax::ExplicitVrLittleEndian,
            });
        }
    }
    out
}

const TEXT_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

fn random_text_value<R: Rng>(rng: &mut R, vr: Vr) -> Vec<u8> {
    let mut s: Vec<u8> = match vr {
        Vr::UI => {
            let n = rng.gen_range(1..5);
            (0..n)
                .map(|_| rng.gen_range(1..100000u32).to_string())
                .collect::<Vec<_>>()
                .join(".")
                .into_bytes()
        }
        Vr::DA => format!("19{:02}{:02}{:02}", rng.gen_range(0..100), rng.gen_range(1..13), rng.gen_range(1..29)).into_bytes(),
        Vr::TM => format!("{:02}{:02}{:02}", rng.gen_range(0..24), rng.gen_range(0..60), rng.gen_range(0..60)).into_bytes(),
        Vr::DT => format!("2021{:02}{:02}101010", rng.gen_range(1..13), rng.gen_range(1..29)).into_bytes(),
        Vr::IS => rng.gen_range(-1000..1000).to_string().into_bytes(),
        Vr::DS => format!("{:.3}", rng.gen_range(-100.0..100.0)).into_bytes(),
        Vr::AS => format!("{:03}Y", rng.gen_range(0..120)).into_bytes(),
        Vr::CS => {
            let n = rng.gen_range(1..10);
            (0..n).map(|_| *TEXT_ALPHABET.choose(rng).unwrap()).collect()
        }
        _ => {
            let n = rng.gen_range(0..40);
            (0..n)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        b' '
                    } else {
                        *TEXT_ALPHABET.choose(rng).unwrap()
                    }
                })
                .collect()
        }
    };
    if s.len() % 2 == 1 {
        s.push(vr.pad_byte());
    }
    s
}

fn random_value<R: Rng>(rng: &mut R, vr: Vr) -> Vec<u8> {
    if vr.is_text() {
        return random_text_value(rng, vr);
    }
    let width = vr.numeric_width().unwrap_or(2);
    let count = rng.gen_range(1..4) * if vr.numeric_width().is_some() { 1 } else { rng.gen_range(1..16) };
    (0..count * width).map(|_| rng.gen()).collect()
}

/// Random canonical dataset. With `dictionary_only`, every tag comes from the
/// built-in dictionary with its dictionary VR, so the result survives an
/// Implicit VR round trip unchanged.
pub fn random_dataset<R: Rng>(rng: &mut R, dictionary_only: bool, max_depth: usize) -> DicomDataset {
    let mut ds = DicomDataset::new();
    let n = rng.gen_range(1..12);
    for _ in 0..n {
        let entry = &dictionary::ENTRIES[rng.gen_range(0..dictionary::ENTRIES.len())];
        if entry.vr == Vr::SQ {
            if max_depth == 0 {
                continue;
            }
            let items = (0..rng.gen_range(0..3))
                .map(|_| random_dataset(rng, dictionary_only, max_depth - 1))
                .collect();
            ds.insert(DataElement::sequence(entry.tag, items));
        } else {
            ds.insert(DataElement::bytes(entry.tag, entry.vr, random_value(rng, entry.vr)));
        }
    }
    if !dictionary_only {
        for _ in 0..rng.gen_range(0..4) {
            let tag = Tag::new(0x0009 + 2 * rng.gen_range(0..8), rng.gen_range(0x1000..0x10FF));
            let vr = *[Vr::LO, Vr::UN, Vr::OB, Vr::SH, Vr::UL, Vr::FD].choose(rng).unwrap();
            ds.insert(DataElement::bytes(tag, vr, random_value(rng, vr)));
        }
    }
    ds
}

/// `n` rows of `d` features in [-1, 1) with `y = x·w + ε`, ε uniform in
/// [-0.1, 0.1).
pub fn linear_regression<R: Rng>(rng: &mut R, d: usize, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let y = x
        .iter()
        .map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + rng.gen_range(-0.1..0.1))
        .collect();
    (x, y)
}

/// CSV with columns `x0..x{d-1},y`. Values round-trip exactly.
pub fn regression_csv(x: &[Vec<f64>], y: &[f64]) -> Vec<u8> {
    let d = x.first().map_or(0, Vec::len);
    let mut out = (0..d).map(|j| format!("x{j}")).chain(["y".to_string()]).collect::<Vec<_>>().join(",");
    out.push('\n');
    for (row, t) in x.iter().zip(y) {
        let cells: Vec<String> = row.iter().chain([t]).map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.into_bytes()
}
