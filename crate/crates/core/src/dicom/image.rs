use serde::{Deserialize, Serialize};

use super::dataset::{DataElement, DicomDataset};
use super::tag::tags;
use super::vr::Vr;
use super::DicomError;

/// Single-channel (MONOCHROME2) raster with unsigned samples in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterImage {
    rows: u32,
    cols: u32,
    bits_allocated: u8,
    pixels: Vec<u16>,
}

impl RasterImage {
    pub fn new(rows: u32, cols: u32, bits_allocated: u8, pixels: Vec<u16>) -> Result<Self, DicomError> {
        if bits_allocated != 8 && bits_allocated != 16 {
            return Err(DicomError::UnsupportedBitsAllocated(u16::from(bits_allocated)));
        }
        if pixels.len() != rows as usize * cols as usize {
            return Err(DicomError::InvalidPixelData(format!(
                "{} samples for {rows}x{cols}",
                pixels.len()
            )));
        }
        if bits_allocated == 8 {
            if let Some(v) = pixels.iter().find(|&&v| v > 0xFF) {
                return Err(DicomError::InvalidPixelData(format!("sample {v} exceeds 8 bits")));
            }
        }
        Ok(RasterImage {
            rows,
            cols,
            bits_allocated,
            pixels,
        })
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn bits_allocated(&self) -> u8 {
        self.bits_allocated
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn same_shape(&self, other: &RasterImage) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Reads frame 0 of uncompressed MONOCHROME2 pixel data.
    pub fn from_dataset(ds: &DicomDataset) -> Result<Self, DicomError> {
        let data = ds
            .get(tags::PIXEL_DATA)
            .and_then(|e| e.as_bytes())
            .ok_or(DicomError::NoPixelData)?;
        let photometric = ds.get_str(tags::PHOTOMETRIC_INTERPRETATION).unwrap_or_default();
        if photometric != "MONOCHROME2" {
            return Err(DicomError::UnsupportedPhotometric(photometric));
        }
        if ds.get_u16(tags::SAMPLES_PER_PIXEL).is_some_and(|s| s != 1) {
            return Err(DicomError::UnsupportedPhotometric(photometric));
        }
        let bits = ds.get_u16(tags::BITS_ALLOCATED).unwrap_or(0);
        if bits != 8 && bits != 16 {
            return Err(DicomError::UnsupportedBitsAllocated(bits));
        }
        let rows = ds
            .get_u16(tags::ROWS)
            .ok_or_else(|| DicomError::InvalidPixelData("missing Rows".into()))?;
        let cols = ds
            .get_u16(tags::COLUMNS)
            .ok_or_else(|| DicomError::InvalidPixelData("missing Columns".into()))?;
        let n = usize::from(rows) * usize::from(cols);
        let bytes_per = usize::from(bits / 8);
        if data.len() < n * bytes_per {
            return Err(DicomError::InvalidPixelData(format!(
                "{} bytes of pixel data for {rows}x{cols}x{bits}",
                data.len()
            )));
        }
        let pixels = if bits == 8 {
            data[..n].iter().map(|&b| u16::from(b)).collect()
        } else {
            data[..n * 2]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        };
        RasterImage::new(u32::from(rows), u32::from(cols), bits as u8, pixels)
    }

    /// Writes the image attributes and PixelData into `ds`.
    pub fn write_to(&self, ds: &mut DicomDataset) {
        ds.put_u16(tags::SAMPLES_PER_PIXEL, 1);
        ds.put_text(tags::PHOTOMETRIC_INTERPRETATION, Vr::CS, "MONOCHROME2");
        ds.put_u16(tags::ROWS, self.rows as u16);
        ds.put_u16(tags::COLUMNS, self.cols as u16);
        let bits = u16::from(self.bits_allocated);
        ds.put_u16(tags::BITS_ALLOCATED, bits);
        ds.put_u16(tags::BITS_STORED, bits);
        ds.put_u16(tags::HIGH_BIT, bits - 1);
        ds.put_u16(tags::PIXEL_REPRESENTATION, 0);
        let mut bytes: Vec<u8> = if self.bits_allocated == 8 {
            self.pixels.iter().map(|&v| v as u8).collect()
        } else {
            self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
        };
        let vr = if self.bits_allocated == 8 { Vr::OB } else { Vr::OW };
        if bytes.len() % 2 == 1 {
            bytes.push(0);
        }
        ds.insert(DataElement::bytes(tags::PIXEL_DATA, vr, bytes));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_enforced() {
        assert!(RasterImage::new(2, 2, 16, vec![0; 3]).is_err());
        assert!(RasterImage::new(1, 1, 8, vec![256]).is_err());
        assert!(matches!(
            RasterImage::new(1, 1, 12, vec![0]),
            Err(DicomError::UnsupportedBitsAllocated(12))
        ));
    }

    #[test]
    fn dataset_round_trip() {
        for bits in [8u8, 16] {
            let img = RasterImage::new(3, 3, bits, (0..9).map(|v| v * 20).collect()).unwrap();
            let mut ds = DicomDataset::new();
            img.write_to(&mut ds);
            assert_eq!(RasterImage::from_dataset(&ds).unwrap(), img);
        }
    }

    #[test]
    fn photometric_checked() {
        let img = RasterImage::new(1, 1, 8, vec![1]).unwrap();
        let mut ds = DicomDataset::new();
        img.write_to(&mut ds);
        ds.put_text(tags::PHOTOMETRIC_INTERPRETATION, Vr::CS, "RGB");
        assert!(matches!(
            RasterImage::from_dataset(&ds),
            Err(DicomError::UnsupportedPhotometric(p)) if p == "RGB"
        ));
        assert!(matches!(
            RasterImage::from_dataset(&DicomDataset::new()),
            Err(DicomError::NoPixelData)
        ));
    }
}
