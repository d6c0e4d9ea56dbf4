//! Thumbnail rendering: linear VOI windowing, nearest-neighbour downsampling
//! and 8-bit grayscale PNG output.

use super::dataset::DicomDataset;
use super::image::RasterImage;
use super::tag::tags;
use super::DicomError;
use crate::par::{self, ExecMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub center: f64,
    pub width: f64,
}

impl Window {
    /// WindowCenter/WindowWidth from the dataset (first value of each), else
    /// the full sample range of the frame.
    pub fn for_image(ds: &DicomDataset, img: &RasterImage) -> Window {
        let first = |tag| {
            ds.get_str(tag)
                .and_then(|s| s.split('\\').next().and_then(|v| v.trim().parse::<f64>().ok()))
        };
        match (first(tags::WINDOW_CENTER), first(tags::WINDOW_WIDTH)) {
            (Some(center), Some(width)) => Window { center, width },
            _ => Window::auto(img.pixels()),
        }
    }

    pub fn auto(pixels: &[u16]) -> Window {
        let min = pixels.iter().copied().min().unwrap_or(0) as f64;
        let max = pixels.iter().copied().max().unwrap_or(0) as f64;
        Window {
            center: (min + max) / 2.0,
            width: max - min + 1.0,
        }
    }

    /// Maps a stored value to an 8-bit display value. A window of width 1
    /// has no linear segment; values below the center go black, above go
    /// white, and the center itself lands on mid-gray.
    pub fn apply(&self, v: f64) -> u8 {
        let t = if self.width > 1.0 {
            (v - (self.center - 0.5)) / (self.width - 1.0) + 0.5
        } else if v < self.center {
            0.0
        } else if v > self.center {
            1.0
        } else {
            0.5
        };
        // f64::round rounds half away from zero.
        (t.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// Output dimensions with the longer edge clamped to `max_edge` (never upscaled).
pub fn scaled_dims(rows: u32, cols: u32, max_edge: u32) -> (u32, u32) {
    let long = rows.max(cols);
    let max_edge = max_edge.max(1);
    if long <= max_edge {
        return (rows, cols);
    }
    let scale = |n: u32| -> u32 {
        let scaled = (u64::from(n) * u64::from(max_edge) + u64::from(long) / 2) / u64::from(long);
        (scaled as u32).max(1)
    };
    (scale(rows), scale(cols))
}

/// Windowed, downsampled 8-bit samples (row-major) plus their dimensions.
pub fn preview_pixels(
    ds: &DicomDataset,
    max_edge: u32,
    mode: ExecMode,
) -> Result<(u32, u32, Vec<u8>), DicomError> {
    let img = RasterImage::from_dataset(ds)?;
    let window = Window::for_image(ds, &img);
    let (rows, cols) = (img.rows(), img.cols());
    let (out_rows, out_cols) = scaled_dims(rows, cols, max_edge);
    let src = img.pixels();
    let mut out = vec![0u8; out_rows as usize * out_cols as usize];
    par::fill_chunks(mode, &mut out, out_cols as usize, |r, line| {
        let sr = nearest(r as u32, out_rows, rows) as usize;
        for (c, px) in line.iter_mut().enumerate() {
            let sc = nearest(c as u32, out_cols, cols) as usize;
            *px = window.apply(f64::from(src[sr * cols as usize + sc]));
        }
    });
    Ok((out_rows, out_cols, out))
}

fn nearest(i: u32, out_len: u32, in_len: u32) -> u32 {
    let src = (u64::from(2 * i + 1) * u64::from(in_len)) / (2 * u64::from(out_len));
    (src as u32).min(in_len.saturating_sub(1))
}

pub fn render_preview(ds: &DicomDataset, max_edge: u32) -> Result<Vec<u8>, DicomError> {
    render_preview_with(ds, max_edge, ExecMode::default())
}

pub fn render_preview_with(
    ds: &DicomDataset,
    max_edge: u32,
    mode: ExecMode,
) -> Result<Vec<u8>, DicomError> {
    let (rows, cols, pixels) = preview_pixels(ds, max_edge, mode)?;
    encode_png(cols, rows, &pixels)
}

pub fn encode_png(width: u32, height: u32, gray: &[u8]) -> Result<Vec<u8>, DicomError> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, width, height);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| DicomError::Encode(e.to_string()))?;
    writer
        .write_image_data(gray)
        .map_err(|e| DicomError::Encode(e.to_string()))?;
    writer.finish().map_err(|e| DicomError::Encode(e.to_string()))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dicom::Vr;

    fn dataset(img: &RasterImage, window: Option<(&str, &str)>) -> DicomDataset {
        let mut ds = DicomDataset::new();
        img.write_to(&mut ds);
        if let Some((c, w)) = window {
            ds.put_text(tags::WINDOW_CENTER, Vr::DS, c);
            ds.put_text(tags::WINDOW_WIDTH, Vr::DS, w);
        }
        ds
    }

    #[test]
    fn center_of_ct_soft_tissue_window_is_128() {
        // ((40 - 39.5) / 399) + 0.5 = 0.50125; x 255 = 127.82 -> 128
        let img = RasterImage::new(1, 1, 16, vec![40]).unwrap();
        let (_, _, px) = preview_pixels(&dataset(&img, Some(("40", "400"))), 64, ExecMode::Sequential).unwrap();
        assert_eq!(px, vec![128]);
    }

    #[test]
    fn uniform_image_without_window_is_mid_gray() {
        let img = RasterImage::new(4, 4, 16, vec![0; 16]).unwrap();
        let (_, _, px) = preview_pixels(&dataset(&img, None), 64, ExecMode::Sequential).unwrap();
        assert!(px.iter().all(|&p| p == 128));
    }

    #[test]
    fn aspect_preserving_downscale() {
        assert_eq!(scaled_dims(256, 128, 128), (128, 64));
        assert_eq!(scaled_dims(128, 256, 128), (64, 128));
        assert_eq!(scaled_dims(10, 20, 128), (10, 20));
        assert_eq!(scaled_dims(1000, 1, 10), (10, 1));
    }

    #[test]
    fn png_has_expected_header_and_dims() {
        let img = RasterImage::new(256, 128, 8, (0..256 * 128).map(|i| (i % 256) as u16).collect()).unwrap();
        let png_bytes = render_preview(&dataset(&img, None), 128).unwrap();
        assert_eq!(&png_bytes[..8], b"\x89PNG\r\n\x1a\n");
        let decoder = png::Decoder::new(std::io::Cursor::new(&png_bytes));
        let reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height), (64, 128));
        assert_eq!(info.color_type, png::ColorType::Grayscale);
    }

    #[test]
    fn window_extremes_clamp() {
        let w = Window { center: 40.0, width: 400.0 };
        assert_eq!(w.apply(-1000.0), 0);
        assert_eq!(w.apply(5000.0), 255);
    }
}
