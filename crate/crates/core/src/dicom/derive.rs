use rand::RngCore;

use super::dataset::{DataElement, DicomDataset};
use super::image::RasterImage;
use super::tag::{tags, Tag};
use super::vr::Vr;
use super::DicomError;

pub const SECONDARY_CAPTURE_SOP_CLASS: &str = "1.2.840.10008.5.1.4.1.1.7";

/// Patient and study attributes copied onto derived instances.
const INHERITED: [Tag; 11] = [
    tags::STUDY_DATE,
    tags::STUDY_TIME,
    tags::ACCESSION_NUMBER,
    tags::REFERRING_PHYSICIAN_NAME,
    tags::STUDY_DESCRIPTION,
    tags::PATIENT_NAME,
    tags::PATIENT_ID,
    tags::PATIENT_BIRTH_DATE,
    tags::PATIENT_SEX,
    tags::PATIENT_AGE,
    tags::STUDY_ID,
];

/// `2.25.` followed by the decimal form of a 128-bit random value. The value
/// is assembled from two draws, low word first.
pub fn generate_uid<R: RngCore + ?Sized>(rng: &mut R) -> String {
    let low = u128::from(rng.next_u64());
    let high = u128::from(rng.next_u64());
    format!("2.25.{}", (high << 64) | low)
}

pub fn new_derived_series(
    source: &DicomDataset,
    pixels: &RasterImage,
    description: &str,
) -> Result<DicomDataset, DicomError> {
    new_derived_series_with_rng(source, pixels, description, &mut rand::thread_rng())
}

/// Builds a secondary-capture instance in a fresh series of the source's study.
pub fn new_derived_series_with_rng<R: RngCore + ?Sized>(
    source: &DicomDataset,
    pixels: &RasterImage,
    description: &str,
    rng: &mut R,
) -> Result<DicomDataset, DicomError> {
    let study_uid = source
        .get(tags::STUDY_INSTANCE_UID)
        .cloned()
        .ok_or(DicomError::MissingStudyUid)?;
    let mut ds = DicomDataset::new();
    ds.insert(study_uid);
    for tag in INHERITED {
        if let Some(e) = source.get(tag) {
            ds.insert(e.clone());
        }
    }
    let series_uid = generate_uid(rng);
    let sop_uid = generate_uid(rng);
    ds.put_text(tags::SOP_CLASS_UID, Vr::UI, SECONDARY_CAPTURE_SOP_CLASS);
    ds.put_text(tags::SOP_INSTANCE_UID, Vr::UI, &sop_uid);
    ds.put_text(tags::SERIES_INSTANCE_UID, Vr::UI, &series_uid);
    ds.put_text(tags::MODALITY, Vr::CS, "OT");
    ds.put_text(tags::CONVERSION_TYPE, Vr::CS, "WSD");
    ds.put_text(tags::SERIES_DESCRIPTION, Vr::LO, description);
    ds.put_text(tags::INSTANCE_NUMBER, Vr::IS, "1");
    if let Some(src_series) = source.get(tags::SERIES_INSTANCE_UID) {
        let mut item = DicomDataset::new();
        item.insert(src_series.clone());
        ds.insert(DataElement::sequence(tags::REFERENCED_SERIES_SEQUENCE, vec![item]));
    }
    pixels.write_to(&mut ds);
    Ok(ds)
}
