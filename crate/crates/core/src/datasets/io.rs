use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::ColorType;

use super::{DepthGrid, Mask};
use crate::error::{Result, TrdError};
use crate::kernels::resize_bilinear_plane;
use crate::networks::ImageTensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 8-bit interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Scale to `[0, 1]`, go planar and resize to `size x size`.
pub fn rgb_to_image<T: Scalar>(img: &RgbImage, size: usize) -> Result<ImageTensor<T>> {
    let (h, w) = (img.height, img.width);
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane: Vec<f64> = (0..h * w).map(|p| img.data[3 * p + c] as f64 / 255.0).collect();
        let plane = if (h, w) == (size, size) {
            plane
        } else {
            resize_bilinear_plane(&plane, h, w, size, size)
        };
        data.extend(plane.into_iter().map(T::from_f64_lossy));
    }
    ImageTensor::new(Tensor::from_vec(&[3, size, size], data)?)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(TrdError::ingestion(path, "file not found"));
    }
    image::open(path).map_err(|e| TrdError::ingestion(path, e.to_string()))
}

pub fn read_rgb<T: Scalar>(path: &Path, size: usize) -> Result<ImageTensor<T>> {
    let rgb = open_image(path)?.to_rgb8();
    let img = RgbImage {
        height: rgb.height() as usize,
        width: rgb.width() as usize,
        data: rgb.into_raw(),
    };
    rgb_to_image(&img, size)
}

/// Nonzero pixels are foreground; resized by nearest neighbour.
pub fn read_mask(path: &Path, size: usize) -> Result<Mask> {
    let g = open_image(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let raw = g.into_raw();
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = ((y as f64 + 0.5) * h as f64 / size as f64) as usize;
        for x in 0..size {
            let sx = ((x as f64 + 0.5) * w as f64 / size as f64) as usize;
            data.push(raw[sy.min(h - 1) * w + sx.min(w - 1)] > 0);
        }
    }
    Ok(Mask {
        height: size,
        width: size,
        data,
    })
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    image::save_buffer(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| TrdError::ingestion(path, e.to_string()))
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::save_buffer(
        path,
        &data,
        mask.width as u32,
        mask.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| TrdError::ingestion(path, e.to_string()))
}

fn as_f64(result: DecodingResult) -> Option<Vec<f64>> {
    Some(match result {
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
        _ => return None,
    })
}

/// A single-channel depth TIFF, or a three-channel position TIFF whose
/// third channel is depth.
pub fn read_depth(path: &Path) -> Result<DepthGrid> {
    let bad = |e: tiff::TiffError| TrdError::ingestion(path, e.to_string());
    let file = File::open(path).map_err(|e| TrdError::ingestion(path, e.to_string()))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(bad)?;
    let (w, h) = dec.dimensions().map_err(bad)?;
    let channels = match dec.colortype().map_err(bad)? {
        ColorType::Gray(_) => 1,
        ColorType::RGB(_) => 3,
        ColorType::RGBA(_) => 4,
        other => return Err(TrdError::ingestion(path, format!("unsupported TIFF layout {other:?}"))),
    };
    let values = as_f64(dec.read_image().map_err(bad)?)
        .ok_or_else(|| TrdError::ingestion(path, "unsupported TIFF sample type"))?;
    let n = (w * h) as usize;
    if values.len() != n * channels {
        return Err(TrdError::ingestion(path, "TIFF sample count does not match its size"));
    }
    let values = if channels == 1 {
        values
    } else {
        values.chunks(channels).map(|px| px[2]).collect()
    };
    Ok(DepthGrid {
        height: h as usize,
        width: w as usize,
        values,
    })
}

pub fn write_depth_tiff(path: &Path, depth: &DepthGrid) -> Result<()> {
    let file = File::create(path).map_err(|e| TrdError::io(path, e))?;
    let data: Vec<f32> = depth.values.iter().map(|&v| v as f32).collect();
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| TrdError::ingestion(path, e.to_string()))?;
    enc.write_image::<colortype::Gray32Float>(depth.width as u32, depth.height as u32, &data)
        .map_err(|e| TrdError::ingestion(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_tiff_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage {
            height: 3,
            width: 2,
            data: (0..18).map(|v| (v * 13) as u8).collect(),
        };
        let p = dir.path().join("a.png");
        write_rgb_png(&p, &img).unwrap();
        let back = read_rgb::<f64>(&p, 3);
        // non-square inputs are resized; a square one must come back exactly
        assert!(back.is_ok());
        let sq = RgbImage {
            height: 2,
            width: 2,
            data: (0..12).map(|v| (v * 20) as u8).collect(),
        };
        write_rgb_png(&p, &sq).unwrap();
        let back = read_rgb::<f64>(&p, 2).unwrap();
        assert_eq!(back, rgb_to_image(&sq, 2).unwrap());
        assert_eq!(back.tensor().data()[1], 60.0 / 255.0);

        let d = DepthGrid {
            height: 2,
            width: 3,
            values: vec![0.5, 0.25, 0.0, 1.5, 2.0, 3.25],
        };
        let t = dir.path().join("d.tiff");
        write_depth_tiff(&t, &d).unwrap();
        assert_eq!(read_depth(&t).unwrap(), d);

        let m = Mask {
            height: 2,
            width: 2,
            data: vec![true, false, false, true],
        };
        let mp = dir.path().join("m.png");
        write_mask_png(&mp, &m).unwrap();
        assert_eq!(read_mask(&mp, 2).unwrap(), m);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_rgb::<f32>(Path::new("/nonexistent/x.png"), 4).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
