use std::collections::BTreeMap;

use super::dataset::{trim_padding, DicomDataset};
use super::dictionary;
use super::tag::Tag;
use super::vr::Vr;
use super::DicomError;

/// Display name of an attribute: its dictionary keyword or the tag notation.
pub fn attribute_name(tag: Tag) -> String {
    dictionary::keyword_of(tag)
        .map(str::to_string)
        .unwrap_or_else(|| tag.to_string())
}

/// String-decodes the requested attributes. Absent tags are left out of the map.
pub fn extract_metadata(
    ds: &DicomDataset,
    attributes: &[Tag],
) -> Result<BTreeMap<String, String>, DicomError> {
    let mut out = BTreeMap::new();
    for &tag in attributes {
        let Some(element) = ds.get(tag) else { continue };
        let bytes = element.as_bytes().ok_or_else(|| DicomError::DecodeError {
            tag,
            reason: "sequence has no string form".into(),
        })?;
        out.insert(attribute_name(tag), decode_value(tag, element.vr, bytes)?);
    }
    Ok(out)
}

pub fn decode_value(tag: Tag, vr: Vr, bytes: &[u8]) -> Result<String, DicomError> {
    let fail = |reason: String| DicomError::DecodeError { tag, reason };
    if let Some(width) = vr.numeric_width() {
        if bytes.len() % width != 0 {
            return Err(fail(format!("{} bytes is not a multiple of {width}", bytes.len())));
        }
        let values: Vec<String> = bytes
            .chunks_exact(width)
            .map(|c| match vr {
                Vr::US => u16::from_le_bytes([c[0], c[1]]).to_string(),
                Vr::SS => i16::from_le_bytes([c[0], c[1]]).to_string(),
                Vr::UL => u32::from_le_bytes([c[0], c[1], c[2], c[3]]).to_string(),
                Vr::SL => i32::from_le_bytes([c[0], c[1], c[2], c[3]]).to_string(),
                Vr::FL => f32::from_le_bytes([c[0], c[1], c[2], c[3]]).to_string(),
                _ => f64::from_le_bytes(c.try_into().expect("8-byte chunk")).to_string(),
            })
            .collect();
        return Ok(values.join("\\"));
    }
    if !vr.is_text() {
        return Err(fail(format!("{vr} value has no string form")));
    }
    let text = trim_padding(bytes);
    for (i, ch) in text.chars().enumerate() {
        if !char_allowed(vr, ch) {
            return Err(fail(format!("character {:?} at {i} not allowed in {vr}", ch)));
        }
    }
    if vr == Vr::DA {
        return text
            .split('\\')
            .map(normalize_date)
            .collect::<Option<Vec<_>>>()
            .map(|v| v.join("\\"))
            .ok_or_else(|| fail(format!("{text:?} is not a date")));
    }
    Ok(text)
}

fn char_allowed(vr: Vr, ch: char) -> bool {
    let c = ch as u32;
    let control_ok = matches!(vr, Vr::LT | Vr::ST) && matches!(ch, '\n' | '\r' | '\t' | '\x0c');
    if c < 0x20 && ch != '\x1b' && !control_ok {
        return false;
    }
    if c == 0x7F {
        return false;
    }
    match vr {
        Vr::UI => ch.is_ascii_digit() || ch == '.' || ch == '\\',
        Vr::CS => ch.is_ascii_uppercase() || ch.is_ascii_digit() || matches!(ch, ' ' | '_' | '\\'),
        Vr::DA => ch.is_ascii_digit() || matches!(ch, '.' | '\\' | '-'),
        Vr::IS => ch.is_ascii_digit() || matches!(ch, '+' | '-' | ' ' | '\\'),
        Vr::DS => ch.is_ascii_digit() || matches!(ch, '+' | '-' | '.' | 'e' | 'E' | ' ' | '\\'),
        Vr::TM => ch.is_ascii_digit() || matches!(ch, '.' | ':' | ' ' | '\\' | '-'),
        Vr::AS => ch.is_ascii_digit() || matches!(ch, 'D' | 'W' | 'M' | 'Y' | '\\'),
        _ => true,
    }
}

/// Accepts `YYYYMMDD` or the legacy `YYYY.MM.DD` and returns `YYYYMMDD`.
fn normalize_date(s: &str) -> Option<String> {
    let s = s.trim_end();
    let digits: String = match s.len() {
        8 => s.to_string(),
        10 if s.as_bytes()[4] == b'.' && s.as_bytes()[7] == b'.' => {
            [&s[0..4], &s[5..7], &s[8..10]].concat()
        }
        _ => return None,
    };
    if !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let month: u32 = digits[4..6].parse().ok()?;
    let day: u32 = digits[6..8].parse().ok()?;
    ((1..=12).contains(&month) && (1..=31).contains(&day)).then_some(digits)
}
