//! DICOM Part-10 codec, metadata decoding, preview rendering and derived
//! series construction.

mod codec;
mod dataset;
pub mod dictionary;
mod derive;
mod image;
mod preview;
mod tag;
mod text;
mod vr;

pub use codec::{
    parse_part10, read_dataset, serialize_part10, split_part10, write_dataset, FileMeta, TransferSyntax,
    EXPLICIT_VR_LITTLE_ENDIAN, IMPLEMENTATION_CLASS_UID, IMPLICIT_VR_LITTLE_ENDIAN,
    MAX_SEQUENCE_DEPTH,
};
pub use dataset::{DataElement, DicomDataset, Value};
pub use derive::{generate_uid, new_derived_series, new_derived_series_with_rng, SECONDARY_CAPTURE_SOP_CLASS};
pub use image::RasterImage;
pub use preview::{encode_png, preview_pixels, render_preview, render_preview_with, scaled_dims, Window};
pub use tag::{tags, Tag};
pub use text::{attribute_name, decode_value, extract_metadata};
pub use vr::Vr;

#[derive(Debug, thiserror::Error)]
pub enum DicomError {
    #[error("missing DICM marker at offset 128")]
    NotDicom,
    #[error("input truncated at offset {offset}")]
    Truncated { offset: usize },
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("invalid VR {bytes:?} on {tag}")]
    InvalidVr { tag: Tag, bytes: [u8; 2] },
    #[error("sequence nesting deeper than {MAX_SEQUENCE_DEPTH}")]
    DepthExceeded,
    #[error("odd value length {len} on {tag}")]
    OddLengthValue { tag: Tag, len: usize },
    #[error("value of {len} bytes too long for {tag}")]
    ValueTooLong { tag: Tag, len: usize },
    #[error("tags out of order: {next} after {previous}")]
    UnorderedTags { previous: Tag, next: Tag },
    #[error("file meta element {0} outside the meta group")]
    MisplacedMetaElement(Tag),
    #[error("invalid file meta: {0}")]
    InvalidMeta(String),
    #[error("malformed data at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("cannot decode {tag}: {reason}")]
    DecodeError { tag: Tag, reason: String },
    #[error("no pixel data")]
    NoPixelData,
    #[error("unsupported photometric interpretation {0:?}")]
    UnsupportedPhotometric(String),
    #[error("unsupported bits allocated {0}")]
    UnsupportedBitsAllocated(u16),
    #[error("invalid pixel data: {0}")]
    InvalidPixelData(String),
    #[error("source dataset has no StudyInstanceUID")]
    MissingStudyUid,
    #[error("image encoding failed: {0}")]
    Encode(String),
}
