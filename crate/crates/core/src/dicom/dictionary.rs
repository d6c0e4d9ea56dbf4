//! Minimal attribute dictionary used to resolve VRs for Implicit VR Little
//! Endian datasets and to name indexed attributes. Tags not listed here
//! resolve to `UN`.

use super::tag::Tag;
use super::vr::Vr;

pub struct DictEntry {
    pub tag: Tag,
    pub vr: Vr,
    pub keyword: &'static str,
}

macro_rules! dict {
    ($( ($g:literal, $e:literal, $vr:ident, $kw:literal) ),* $(,)?) => {
        &[ $( DictEntry { tag: Tag::new($g, $e), vr: Vr::$vr, keyword: $kw } ),* ]
    };
}

/// Sorted by tag.
pub static ENTRIES: &[DictEntry] = dict![
    (0x0008, 0x0005, CS, "SpecificCharacterSet"),
    (0x0008, 0x0008, CS, "ImageType"),
    (0x0008, 0x0012, DA, "InstanceCreationDate"),
    (0x0008, 0x0013, TM, "InstanceCreationTime"),
    (0x0008, 0x0015, DT, "InstanceCoercionDateTime"),
    (0x0008, 0x0016, UI, "SOPClassUID"),
    (0x0008, 0x0018, UI, "SOPInstanceUID"),
    (0x0008, 0x0020, DA, "StudyDate"),
    (0x0008, 0x0021, DA, "SeriesDate"),
    (0x0008, 0x0022, DA, "AcquisitionDate"),
    (0x0008, 0x0023, DA, "ContentDate"),
    (0x0008, 0x0030, TM, "StudyTime"),
    (0x0008, 0x0031, TM, "SeriesTime"),
    (0x0008, 0x0033, TM, "ContentTime"),
    (0x0008, 0x0050, SH, "AccessionNumber"),
    (0x0008, 0x0054, AE, "RetrieveAETitle"),
    (0x0008, 0x0060, CS, "Modality"),
    (0x0008, 0x0064, CS, "ConversionType"),
    (0x0008, 0x0070, LO, "Manufacturer"),
    (0x0008, 0x0080, LO, "InstitutionName"),
    (0x0008, 0x0081, ST, "InstitutionAddress"),
    (0x0008, 0x0090, PN, "ReferringPhysicianName"),
    (0x0008, 0x0100, SH, "CodeValue"),
    (0x0008, 0x0102, SH, "CodingSchemeDesignator"),
    (0x0008, 0x0104, LO, "CodeMeaning"),
    (0x0008, 0x1030, LO, "StudyDescription"),
    (0x0008, 0x103E, LO, "SeriesDescription"),
    (0x0008, 0x1090, LO, "ManufacturerModelName"),
    (0x0008, 0x1115, SQ, "ReferencedSeriesSequence"),
    (0x0008, 0x1140, SQ, "ReferencedImageSequence"),
    (0x0008, 0x1150, UI, "ReferencedSOPClassUID"),
    (0x0008, 0x1155, UI, "ReferencedSOPInstanceUID"),
    (0x0008, 0x1163, FD, "TimeRange"),
    (0x0008, 0x9215, SQ, "DerivationCodeSequence"),
    (0x0008, 0x9459, FL, "RecommendedDisplayFrameRateInFloat"),
    (0x0010, 0x0010, PN, "PatientName"),
    (0x0010, 0x0020, LO, "PatientID"),
    (0x0010, 0x0030, DA, "PatientBirthDate"),
    (0x0010, 0x0040, CS, "PatientSex"),
    (0x0010, 0x1010, AS, "PatientAge"),
    (0x0010, 0x1020, DS, "PatientSize"),
    (0x0010, 0x1030, DS, "PatientWeight"),
    (0x0018, 0x0015, CS, "BodyPartExamined"),
    (0x0018, 0x0050, DS, "SliceThickness"),
    (0x0018, 0x0060, DS, "KVP"),
    (0x0018, 0x0088, DS, "SpacingBetweenSlices"),
    (0x0018, 0x1020, LO, "SoftwareVersions"),
    (0x0018, 0x5100, CS, "PatientPosition"),
    (0x0018, 0x6016, UL, "RegionFlags"),
    (0x0018, 0x6020, SL, "ReferencePixelX0"),
    (0x0018, 0x9219, SS, "TagAngleSecondAxis"),
    (0x0020, 0x000D, UI, "StudyInstanceUID"),
    (0x0020, 0x000E, UI, "SeriesInstanceUID"),
    (0x0020, 0x0010, SH, "StudyID"),
    (0x0020, 0x0011, IS, "SeriesNumber"),
    (0x0020, 0x0013, IS, "InstanceNumber"),
    (0x0020, 0x0032, DS, "ImagePositionPatient"),
    (0x0020, 0x0037, DS, "ImageOrientationPatient"),
    (0x0020, 0x0052, UI, "FrameOfReferenceUID"),
    (0x0020, 0x1041, DS, "SliceLocation"),
    (0x0020, 0x4000, LT, "ImageComments"),
    (0x0028, 0x0002, US, "SamplesPerPixel"),
    (0x0028, 0x0004, CS, "PhotometricInterpretation"),
    (0x0028, 0x0010, US, "Rows"),
    (0x0028, 0x0011, US, "Columns"),
    (0x0028, 0x0030, DS, "PixelSpacing"),
    (0x0028, 0x0100, US, "BitsAllocated"),
    (0x0028, 0x0101, US, "BitsStored"),
    (0x0028, 0x0102, US, "HighBit"),
    (0x0028, 0x0103, US, "PixelRepresentation"),
    (0x0028, 0x1050, DS, "WindowCenter"),
    (0x0028, 0x1051, DS, "WindowWidth"),
    (0x0028, 0x1052, DS, "RescaleIntercept"),
    (0x0028, 0x1053, DS, "RescaleSlope"),
    (0x0040, 0x0275, SQ, "RequestAttributesSequence"),
    (0x0040, 0xA040, CS, "ValueType"),
    (0x0040, 0xA730, SQ, "ContentSequence"),
    (0x7FE0, 0x0010, OW, "PixelData"),
];

pub fn lookup(tag: Tag) -> Option<&'static DictEntry> {
    ENTRIES
        .binary_search_by(|e| e.tag.cmp(&tag))
        .ok()
        .map(|i| &ENTRIES[i])
}

pub fn vr_of(tag: Tag) -> Vr {
    lookup(tag).map(|e| e.vr).unwrap_or(Vr::UN)
}

pub fn keyword_of(tag: Tag) -> Option<&'static str> {
    lookup(tag).map(|e| e.keyword)
}

pub fn tag_by_keyword(keyword: &str) -> Option<Tag> {
    ENTRIES.iter().find(|e| e.keyword == keyword).map(|e| e.tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_are_sorted_and_unique() {
        for pair in ENTRIES.windows(2) {
            assert!(pair[0].tag < pair[1].tag, "{} !< {}", pair[0].tag, pair[1].tag);
        }
    }

    #[test]
    fn unknown_tag_is_un() {
        assert_eq!(vr_of(Tag::new(0x0009, 0x0010)), Vr::UN);
        assert_eq!(vr_of(Tag::new(0x0010, 0x0020)), Vr::LO);
        assert_eq!(tag_by_keyword("Modality"), Some(Tag::new(0x0008, 0x0060)));
    }
}
