use std::collections::BTreeMap;

use super::tag::Tag;
use super::vr::Vr;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bytes(Vec<u8>),
    Sequence(Vec<DicomDataset>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataElement {
    pub tag: Tag,
    pub vr: Vr,
    pub value: Value,
}

impl DataElement {
    pub fn bytes(tag: Tag, vr: Vr, bytes: Vec<u8>) -> Self {
        DataElement {
            tag,
            vr,
            value: Value::Bytes(bytes),
        }
    }

    /// Text element padded to even length with the VR's pad byte.
    pub fn text(tag: Tag, vr: Vr, text: &str) -> Self {
        let mut bytes = text.as_bytes().to_vec();
        if bytes.len() % 2 == 1 {
            bytes.push(vr.pad_byte());
        }
        DataElement::bytes(tag, vr, bytes)
    }

    pub fn sequence(tag: Tag, items: Vec<DicomDataset>) -> Self {
        DataElement {
            tag,
            vr: Vr::SQ,
            value: Value::Sequence(items),
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match &self.value {
            Value::Bytes(b) => Some(b),
            Value::Sequence(_) => None,
        }
    }

    pub fn items(&self) -> Option<&[DicomDataset]> {
        match &self.value {
            Value::Sequence(items) => Some(items),
            Value::Bytes(_) => None,
        }
    }
}

/// Ordered collection of data elements, keyed by tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DicomDataset {
    elements: BTreeMap<Tag, DataElement>,
}

impl DicomDataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an element, returning the one it replaced.
    pub fn insert(&mut self, element: DataElement) -> Option<DataElement> {
        self.elements.insert(element.tag, element)
    }

    pub fn put_text(&mut self, tag: Tag, vr: Vr, text: &str) {
        self.insert(DataElement::text(tag, vr, text));
    }

    pub fn put_u16(&mut self, tag: Tag, value: u16) {
        self.insert(DataElement::bytes(tag, Vr::US, value.to_le_bytes().to_vec()));
    }

    pub fn get(&self, tag: Tag) -> Option<&DataElement> {
        self.elements.get(&tag)
    }

    pub fn remove(&mut self, tag: Tag) -> Option<DataElement> {
        self.elements.remove(&tag)
    }

    pub fn contains(&self, tag: Tag) -> bool {
        self.elements.contains_key(&tag)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Elements in ascending tag order.
    pub fn iter(&self) -> impl Iterator<Item = &DataElement> {
        self.elements.values()
    }

    /// Text value with trailing padding (spaces and NULs) removed.
    pub fn get_str(&self, tag: Tag) -> Option<String> {
        let bytes = self.get(tag)?.as_bytes()?;
        Some(trim_padding(bytes))
    }

    /// First value of a US element.
    pub fn get_u16(&self, tag: Tag) -> Option<u16> {
        let bytes = self.get(tag)?.as_bytes()?;
        (bytes.len() >= 2).then(|| u16::from_le_bytes([bytes[0], bytes[1]]))
    }

    /// Maximum sequence nesting below this dataset (0 when there are no sequences).
    pub fn depth(&self) -> usize {
        self.iter()
            .filter_map(|e| e.items())
            .map(|items| 1 + items.iter().map(DicomDataset::depth).max().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }
}

impl FromIterator<DataElement> for DicomDataset {
    fn from_iter<I: IntoIterator<Item = DataElement>>(iter: I) -> Self {
        let mut ds = DicomDataset::new();
        for e in iter {
            ds.insert(e);
        }
        ds
    }
}

pub(crate) fn trim_padding(bytes: &[u8]) -> String {
    let end = bytes
        .iter()
        .rposition(|&b| b != b' ' && b != 0)
        .map(|i| i + 1)
        .unwrap_or(0);
    bytes[..end].iter().map(|&b| b as char).collect()
}
