//! Part-10 file and dataset encoding for the two uncompressed little-endian
//! transfer syntaxes.

use super::dataset::{trim_padding, DataElement, DicomDataset, Value};
use super::dictionary;
use super::tag::{tags, Tag};
use super::vr::Vr;
use super::DicomError;

pub const IMPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2";
pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";

/// UID identifying this implementation in file meta and association requests.
pub const IMPLEMENTATION_CLASS_UID: &str = "1.2.826.0.1.3680043.10.1138.1";

pub const PREAMBLE_LEN: usize = 128;
pub const MAGIC: &[u8; 4] = b"DICM";
pub const MAX_SEQUENCE_DEPTH: usize = 8;

const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransferSyntax {
    ImplicitVrLittleEndian,
    ExplicitVrLittleEndian,
}

impl TransferSyntax {
    pub fn from_uid(uid: &str) -> Result<Self, DicomError> {
        match uid.trim_end_matches(['\0', ' ']) {
            IMPLICIT_VR_LITTLE_ENDIAN => Ok(TransferSyntax::ImplicitVrLittleEndian),
            EXPLICIT_VR_LITTLE_ENDIAN => Ok(TransferSyntax::ExplicitVrLittleEndian),
            other => Err(DicomError::UnsupportedTransferSyntax(other.to_string())),
        }
    }

    pub fn uid(self) -> &'static str {
        match self {
            TransferSyntax::ImplicitVrLittleEndian => IMPLICIT_VR_LITTLE_ENDIAN,
            TransferSyntax::ExplicitVrLittleEndian => EXPLICIT_VR_LITTLE_ENDIAN,
        }
    }

    pub fn is_explicit(self) -> bool {
        self == TransferSyntax::ExplicitVrLittleEndian
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileMeta {
    pub transfer_syntax_uid: String,
    pub media_sop_class_uid: String,
    pub media_sop_instance_uid: String,
    pub implementation_class_uid: String,
}

impl FileMeta {
    pub fn new(ts: TransferSyntax, sop_class_uid: &str, sop_instance_uid: &str) -> Self {
        FileMeta {
            transfer_syntax_uid: ts.uid().to_string(),
            media_sop_class_uid: sop_class_uid.to_string(),
            media_sop_instance_uid: sop_instance_uid.to_string(),
            implementation_class_uid: IMPLEMENTATION_CLASS_UID.to_string(),
        }
    }

    pub fn transfer_syntax(&self) -> Result<TransferSyntax, DicomError> {
        TransferSyntax::from_uid(&self.transfer_syntax_uid)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], base: usize) -> Self {
        Reader { buf, pos: 0, base }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DicomError> {
        if self.buf.len() - self.pos < n {
            return Err(DicomError::Truncated {
                offset: self.offset(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, DicomError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DicomError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag, DicomError> {
        let group = self.u16()?;
        let element = self.u16()?;
        Ok(Tag::new(group, element))
    }

    fn sub(&mut self, len: usize) -> Result<Reader<'a>, DicomError> {
        let base = self.offset();
        let bytes = self.take(len)?;
        Ok(Reader::new(bytes, base))
    }
}

/// Parses a complete Part-10 file image.
pub fn parse_part10(bytes: &[u8]) -> Result<(FileMeta, DicomDataset), DicomError> {
    if bytes.len() < PREAMBLE_LEN + MAGIC.len() {
        return Err(DicomError::Truncated {
            offset: bytes.len(),
        });
    }
    if &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(DicomError::NotDicom);
    }
    let mut r = Reader::new(&bytes[PREAMBLE_LEN + 4..], PREAMBLE_LEN + 4);
    let meta = read_meta(&mut r)?;
    let ts = meta.transfer_syntax()?;
    let body = r.sub(r.buf.len() - r.pos)?;
    let ds = read_body(body, ts)?;
    Ok((meta, ds))
}

/// Splits a Part-10 file into its meta information and the undecoded body.
pub fn split_part10(bytes: &[u8]) -> Result<(FileMeta, &[u8]), DicomError> {
    if bytes.len() < PREAMBLE_LEN + MAGIC.len() {
        return Err(DicomError::Truncated {
            offset: bytes.len(),
        });
    }
    if &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(DicomError::NotDicom);
    }
    let mut r = Reader::new(&bytes[PREAMBLE_LEN + 4..], PREAMBLE_LEN + 4);
    let meta = read_meta(&mut r)?;
    meta.transfer_syntax()?;
    Ok((meta, &bytes[PREAMBLE_LEN + 4 + r.pos..]))
}

fn read_meta(r: &mut Reader<'_>) -> Result<FileMeta, DicomError> {
    let tag = r.tag()?;
    if tag != tags::FILE_META_GROUP_LENGTH {
        return Err(DicomError::InvalidMeta(format!(
            "expected file meta group length, found {tag}"
        )));
    }
    let vr = r.take(2)?;
    if vr != b"UL" || r.u16()? != 4 {
        return Err(DicomError::InvalidMeta("malformed group length".into()));
    }
    let group_len = r.u32()? as usize;
    let group = r.sub(group_len)?;
    let meta_ds = read_elements(group, TransferSyntax::ExplicitVrLittleEndian, 0)?;
    if let Some(bad) = meta_ds.iter().find(|e| !e.tag.is_file_meta()) {
        return Err(DicomError::InvalidMeta(format!(
            "{} inside file meta group",
            bad.tag
        )));
    }
    let text = |tag: Tag| meta_ds.get(tag).and_then(|e| e.as_bytes()).map(trim_padding);
    let transfer_syntax_uid = text(tags::TRANSFER_SYNTAX_UID)
        .ok_or_else(|| DicomError::InvalidMeta("missing transfer syntax".into()))?;
    Ok(FileMeta {
        transfer_syntax_uid,
        media_sop_class_uid: text(tags::MEDIA_STORAGE_SOP_CLASS_UID).unwrap_or_default(),
        media_sop_instance_uid: text(tags::MEDIA_STORAGE_SOP_INSTANCE_UID).unwrap_or_default(),
        implementation_class_uid: text(tags::IMPLEMENTATION_CLASS_UID).unwrap_or_default(),
    })
}

/// Parses a bare dataset (no preamble or meta) in the given transfer syntax.
pub fn read_dataset(bytes: &[u8], ts: TransferSyntax) -> Result<DicomDataset, DicomError> {
    read_body(Reader::new(bytes, 0), ts)
}

fn read_body(r: Reader<'_>, ts: TransferSyntax) -> Result<DicomDataset, DicomError> {
    let ds = read_elements(r, ts, 0)?;
    if let Some(first) = ds.iter().next().filter(|e| e.tag.is_file_meta()) {
        return Err(DicomError::MisplacedMetaElement(first.tag));
    }
    Ok(ds)
}

fn read_elements(
    mut r: Reader<'_>,
    ts: TransferSyntax,
    depth: usize,
) -> Result<DicomDataset, DicomError> {
    let mut ds = DicomDataset::new();
    let mut last: Option<Tag> = None;
    while !r.at_end() {
        let element = match read_element(&mut r, ts, depth)? {
            Some(e) => e,
            None => {
                return Err(DicomError::Malformed {
                    offset: r.offset(),
                    reason: "unexpected delimiter".into(),
                })
            }
        };
        check_order(last, element.tag)?;
        last = Some(element.tag);
        ds.insert(element);
    }
    Ok(ds)
}

fn check_order(last: Option<Tag>, tag: Tag) -> Result<(), DicomError> {
    if let Some(prev) = last {
        if tag <= prev {
            return Err(DicomError::UnorderedTags { previous: prev, next: tag });
        }
    }
    Ok(())
}

/// Reads one element. Returns `None` on an item delimitation element.
fn read_element(
    r: &mut Reader<'_>,
    ts: TransferSyntax,
    depth: usize,
) -> Result<Option<DataElement>, DicomError> {
    let start = r.offset();
    let tag = r.tag()?;
    if tag == tags::ITEM_DELIMITATION {
        let _ = r.u32()?;
        return Ok(None);
    }
    if tag.group == 0xFFFE {
        return Err(DicomError::Malformed {
            offset: start,
            reason: format!("unexpected {tag}"),
        });
    }
    let (vr, len) = if ts.is_explicit() {
        let raw = r.take(2)?;
        let vr = Vr::from_bytes([raw[0], raw[1]]).ok_or(DicomError::InvalidVr {
            tag,
            bytes: [raw[0], raw[1]],
        })?;
        let len = if vr.has_long_length() {
            r.take(2)?;
            r.u32()?
        } else {
            u32::from(r.u16()?)
        };
        (vr, len)
    } else {
        let len = r.u32()?;
        let vr = if len == UNDEFINED_LENGTH {
            Vr::SQ
        } else {
            dictionary::vr_of(tag)
        };
        (vr, len)
    };

    if vr == Vr::SQ {
        if depth + 1 > MAX_SEQUENCE_DEPTH {
            return Err(DicomError::DepthExceeded);
        }
        let items = read_sequence(r, ts, depth + 1, len)?;
        return Ok(Some(DataElement::sequence(tag, items)));
    }
    if len == UNDEFINED_LENGTH {
        return Err(DicomError::Malformed {
            offset: start,
            reason: format!("undefined length on {vr} element {tag}"),
        });
    }
    if len % 2 == 1 {
        return Err(DicomError::OddLengthValue { tag, len: len as usize });
    }
    let value = r.take(len as usize)?.to_vec();
    Ok(Some(DataElement::bytes(tag, vr, value)))
}

fn read_sequence(
    r: &mut Reader<'_>,
    ts: TransferSyntax,
    depth: usize,
    len: u32,
) -> Result<Vec<DicomDataset>, DicomError> {
    let mut items = Vec::new();
    if len == UNDEFINED_LENGTH {
        loop {
            let at = r.offset();
            let tag = r.tag()?;
            let item_len = r.u32()?;
            if tag == tags::SEQUENCE_DELIMITATION {
                return Ok(items);
            }
            if tag != tags::ITEM {
                return Err(DicomError::Malformed {
                    offset: at,
                    reason: format!("expected item, found {tag}"),
                });
            }
            items.push(read_item(r, ts, depth, item_len)?);
        }
    }
    let mut seq = r.sub(len as usize)?;
    while !seq.at_end() {
        let at = seq.offset();
        let tag = seq.tag()?;
        let item_len = seq.u32()?;
        if tag != tags::ITEM {
            return Err(DicomError::Malformed {
                offset: at,
                reason: format!("expected item, found {tag}"),
            });
        }
        items.push(read_item(&mut seq, ts, depth, item_len)?);
    }
    Ok(items)
}

fn read_item(
    r: &mut Reader<'_>,
    ts: TransferSyntax,
    depth: usize,
    len: u32,
) -> Result<DicomDataset, DicomError> {
    if len != UNDEFINED_LENGTH {
        let body = r.sub(len as usize)?;
        return read_elements(body, ts, depth);
    }
    let mut ds = DicomDataset::new();
    let mut last = None;
    while let Some(element) = read_element(r, ts, depth)? {
        check_order(last, element.tag)?;
        last = Some(element.tag);
        ds.insert(element);
    }
    Ok(ds)
}

/// Emits preamble, magic, file meta (always Explicit VR LE) and the body in
/// the declared transfer syntax.
pub fn serialize_part10(meta: &FileMeta, ds: &DicomDataset) -> Result<Vec<u8>, DicomError> {
    let ts = meta.transfer_syntax()?;
    let mut group = Vec::with_capacity(256);
    let explicit = TransferSyntax::ExplicitVrLittleEndian;
    write_element(
        &DataElement::bytes(tags::FILE_META_VERSION, Vr::OB, vec![0x00, 0x01]),
        explicit,
        0,
        &mut group,
    )?;
    for (tag, uid) in [
        (tags::MEDIA_STORAGE_SOP_CLASS_UID, &meta.media_sop_class_uid),
        (tags::MEDIA_STORAGE_SOP_INSTANCE_UID, &meta.media_sop_instance_uid),
        (tags::TRANSFER_SYNTAX_UID, &meta.transfer_syntax_uid),
        (tags::IMPLEMENTATION_CLASS_UID, &meta.implementation_class_uid),
    ] {
        write_element(&DataElement::text(tag, Vr::UI, uid), explicit, 0, &mut group)?;
    }

    let mut out = Vec::with_capacity(PREAMBLE_LEN + 16 + group.len() + 1024);
    out.resize(PREAMBLE_LEN, 0);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&tags::FILE_META_GROUP_LENGTH.to_le_bytes());
    out.extend_from_slice(b"UL");
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&(group.len() as u32).to_le_bytes());
    out.extend_from_slice(&group);
    write_dataset_into(ds, ts, &mut out)?;
    Ok(out)
}

/// Encodes a bare dataset in the given transfer syntax.
pub fn write_dataset(ds: &DicomDataset, ts: TransferSyntax) -> Result<Vec<u8>, DicomError> {
    let mut out = Vec::new();
    write_dataset_into(ds, ts, &mut out)?;
    Ok(out)
}

fn write_dataset_into(
    ds: &DicomDataset,
    ts: TransferSyntax,
    out: &mut Vec<u8>,
) -> Result<(), DicomError> {
    for element in ds.iter() {
        if element.tag.is_file_meta() {
            return Err(DicomError::MisplacedMetaElement(element.tag));
        }
        write_element(element, ts, 0, out)?;
    }
    Ok(())
}

fn write_items(
    items: &[DicomDataset],
    ts: TransferSyntax,
    depth: usize,
) -> Result<Vec<u8>, DicomError> {
    if depth > MAX_SEQUENCE_DEPTH {
        return Err(DicomError::DepthExceeded);
    }
    let mut out = Vec::new();
    for item in items {
        let mut body = Vec::new();
        for element in item.iter() {
            write_element(element, ts, depth, &mut body)?;
        }
        out.extend_from_slice(&tags::ITEM.to_le_bytes());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
    }
    Ok(out)
}

fn write_element(
    element: &DataElement,
    ts: TransferSyntax,
    depth: usize,
    out: &mut Vec<u8>,
) -> Result<(), DicomError> {
    let tag = element.tag;
    let payload: std::borrow::Cow<'_, [u8]> = match &element.value {
        Value::Bytes(b) => {
            if b.len() % 2 == 1 {
                return Err(DicomError::OddLengthValue { tag, len: b.len() });
            }
            std::borrow::Cow::Borrowed(b)
        }
        Value::Sequence(items) => std::borrow::Cow::Owned(write_items(items, ts, depth + 1)?),
    };
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l != UNDEFINED_LENGTH)
        .ok_or(DicomError::ValueTooLong { tag, len: payload.len() })?;
    let vr = match element.value {
        Value::Sequence(_) => Vr::SQ,
        Value::Bytes(_) if element.vr == Vr::SQ => Vr::UN,
        Value::Bytes(_) => element.vr,
    };
    out.extend_from_slice(&tag.to_le_bytes());
    if ts.is_explicit() {
        out.extend_from_slice(&vr.as_bytes());
        if vr.has_long_length() {
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&len.to_le_bytes());
        } else {
            let short = u16::try_from(len).map_err(|_| DicomError::ValueTooLong {
                tag,
                len: payload.len(),
            })?;
            out.extend_from_slice(&short.to_le_bytes());
        }
    } else {
        out.extend_from_slice(&len.to_le_bytes());
    }
    out.extend_from_slice(&payload);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_meta() -> FileMeta {
        FileMeta::new(
            TransferSyntax::ExplicitVrLittleEndian,
            "1.2.840.10008.5.1.4.1.1.7",
            "1.2.3.4",
        )
    }

    #[test]
    fn short_input_is_truncated() {
        assert!(matches!(
            parse_part10(&[0u8; 131]),
            Err(DicomError::Truncated { .. })
        ));
    }

    #[test]
    fn missing_magic_is_not_dicom() {
        assert!(matches!(parse_part10(&[0u8; 200]), Err(DicomError::NotDicom)));
    }

    #[test]
    fn empty_body_parses_to_empty_dataset() {
        let bytes = serialize_part10(&minimal_meta(), &DicomDataset::new()).unwrap();
        assert!(bytes[..128].iter().all(|&b| b == 0));
        assert_eq!(&bytes[128..132], &[0x44, 0x49, 0x43, 0x4D]);
        let (meta, ds) = parse_part10(&bytes).unwrap();
        assert_eq!(meta, minimal_meta());
        assert!(ds.is_empty());
    }

    #[test]
    fn explicit_lo_element_parses() {
        // Same bytes were decoded by pydicom as (0010,0020) LO '1234'.
        let body = [0x10, 0x00, 0x20, 0x00, 0x4C, 0x4F, 0x04, 0x00, 0x31, 0x32, 0x33, 0x34];
        let ds = read_dataset(&body, TransferSyntax::ExplicitVrLittleEndian).unwrap();
        let e = ds.get(tags::PATIENT_ID).unwrap();
        assert_eq!(e.vr, Vr::LO);
        assert_eq!(e.as_bytes().unwrap(), b"1234");
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn unsupported_transfer_syntax_rejected() {
        let mut meta = minimal_meta();
        meta.transfer_syntax_uid = "1.2.840.10008.1.2.4.50".into();
        assert!(matches!(
            serialize_part10(&meta, &DicomDataset::new()),
            Err(DicomError::UnsupportedTransferSyntax(_))
        ));
        // Hand-build a file whose meta declares JPEG baseline.
        let ok = serialize_part10(&minimal_meta(), &DicomDataset::new()).unwrap();
        let text = String::from_utf8_lossy(&ok).into_owned();
        assert!(text.contains(EXPLICIT_VR_LITTLE_ENDIAN));
        let mut patched = ok.clone();
        let needle = b"1.2.840.10008.1.2.1\0";
        let at = patched.windows(needle.len()).position(|w| w == needle).unwrap();
        patched[at..at + needle.len()].copy_from_slice(b"1.2.840.10008.1.2.5\0");
        assert!(matches!(
            parse_part10(&patched),
            Err(DicomError::UnsupportedTransferSyntax(uid)) if uid == "1.2.840.10008.1.2.5"
        ));
    }

    #[test]
    fn invalid_vr_rejected() {
        let body = [0x10, 0x00, 0x20, 0x00, b'Z', b'Z', 0x02, 0x00, b'A', b'B'];
        assert!(matches!(
            read_dataset(&body, TransferSyntax::ExplicitVrLittleEndian),
            Err(DicomError::InvalidVr { bytes, .. }) if bytes == *b"ZZ"
        ));
    }

    #[test]
    fn truncated_value_rejected() {
        let body = [0x10, 0x00, 0x20, 0x00, b'L', b'O', 0x08, 0x00, b'1', b'2'];
        assert!(matches!(
            read_dataset(&body, TransferSyntax::ExplicitVrLittleEndian),
            Err(DicomError::Truncated { .. })
        ));
    }

    #[test]
    fn out_of_order_tags_rejected() {
        let mut body = Vec::new();
        body.extend_from_slice(&[0x10, 0x00, 0x20, 0x00, b'L', b'O', 0x02, 0x00, b'A', b' ']);
        body.extend_from_slice(&[0x08, 0x00, 0x60, 0x00, b'C', b'S', 0x02, 0x00, b'C', b'T']);
        assert!(matches!(
            read_dataset(&body, TransferSyntax::ExplicitVrLittleEndian),
            Err(DicomError::UnorderedTags { .. })
        ));
    }

    fn nested(depth: usize) -> DicomDataset {
        let mut ds = DicomDataset::new();
        ds.put_text(Tag::new(0x0008, 0x0100), Vr::SH, "X");
        if depth > 0 {
            ds.insert(DataElement::sequence(
                tags::REFERENCED_IMAGE_SEQUENCE,
                vec![nested(depth - 1)],
            ));
        }
        ds
    }

    #[test]
    fn sequence_depth_limit() {
        for ts in [
            TransferSyntax::ExplicitVrLittleEndian,
            TransferSyntax::ImplicitVrLittleEndian,
        ] {
            let ok = nested(MAX_SEQUENCE_DEPTH);
            let bytes = write_dataset(&ok, ts).unwrap();
            assert_eq!(read_dataset(&bytes, ts).unwrap(), ok);
            assert!(matches!(
                write_dataset(&nested(MAX_SEQUENCE_DEPTH + 1), ts),
                Err(DicomError::DepthExceeded)
            ));
        }
    }

    #[test]
    fn undefined_length_sequences_canonicalize() {
        // SQ with undefined length holding one undefined-length item.
        let mut body = Vec::new();
        body.extend_from_slice(&[0x08, 0x00, 0x40, 0x11, b'S', b'Q', 0, 0, 0xFF, 0xFF, 0xFF, 0xFF]);
        body.extend_from_slice(&[0xFE, 0xFF, 0x00, 0xE0, 0xFF, 0xFF, 0xFF, 0xFF]);
        body.extend_from_slice(&[0x08, 0x00, 0x50, 0x11, b'U', b'I', 0x04, 0x00, b'1', b'.', b'2', 0]);
        body.extend_from_slice(&[0xFE, 0xFF, 0x0D, 0xE0, 0, 0, 0, 0]);
        body.extend_from_slice(&[0xFE, 0xFF, 0xDD, 0xE0, 0, 0, 0, 0]);
        let ts = TransferSyntax::ExplicitVrLittleEndian;
        let ds = read_dataset(&body, ts).unwrap();
        let items = ds.get(tags::REFERENCED_IMAGE_SEQUENCE).unwrap().items().unwrap();
        assert_eq!(items.len(), 1);
        let canonical = write_dataset(&ds, ts).unwrap();
        assert_ne!(canonical, body);
        assert_eq!(read_dataset(&canonical, ts).unwrap(), ds);
        assert_eq!(write_dataset(&read_dataset(&canonical, ts).unwrap(), ts).unwrap(), canonical);
    }

    #[test]
    fn odd_length_rejected_both_ways() {
        let body = [0x10, 0x00, 0x20, 0x00, b'L', b'O', 0x03, 0x00, b'1', b'2', b'3'];
        assert!(matches!(
            read_dataset(&body, TransferSyntax::ExplicitVrLittleEndian),
            Err(DicomError::OddLengthValue { .. })
        ));
        let mut ds = DicomDataset::new();
        ds.insert(DataElement::bytes(tags::PATIENT_ID, Vr::LO, b"123".to_vec()));
        assert!(matches!(
            write_dataset(&ds, TransferSyntax::ExplicitVrLittleEndian),
            Err(DicomError::OddLengthValue { .. })
        ));
    }

    #[test]
    fn meta_group_in_body_rejected() {
        let mut ds = DicomDataset::new();
        ds.put_text(tags::TRANSFER_SYNTAX_UID, Vr::UI, EXPLICIT_VR_LITTLE_ENDIAN);
        assert!(matches!(
            serialize_part10(&minimal_meta(), &ds),
            Err(DicomError::MisplacedMetaElement(_))
        ));
    }
}
