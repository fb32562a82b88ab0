use std::path::PathBuf;

use crate::error::{Result, TrdError};
use crate::kernels::resize_bilinear_plane;
use crate::networks::ImageTensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Single-channel depth readings; zero or non-finite values are holes.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

fn is_valid(v: f64) -> bool {
    v.is_finite() && v != 0.0
}

fn median(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Fill holes with the valid median, min-max normalize to `[0, 1]`
/// (a flat image maps to zeros), replicate to three channels and resize
/// to `size x size`.
pub fn preprocess_depth<T: Scalar>(raw: &DepthGrid, size: usize) -> Result<ImageTensor<T>> {
    let (h, w) = (raw.height, raw.width);
    if raw.values.len() != h * w || h == 0 || w == 0 {
        return Err(TrdError::Dimension(format!(
            "depth grid {h}x{w} has {} values",
            raw.values.len()
        )));
    }
    let valid: Vec<f64> = raw.values.iter().copied().filter(|&v| is_valid(v)).collect();
    if valid.is_empty() {
        return Err(TrdError::ingestion(PathBuf::new(), "depth image has no valid pixels"));
    }
    let fill = median(valid);
    let filled: Vec<f64> = raw.values.iter().map(|&v| if is_valid(v) { v } else { fill }).collect();
    let lo = filled.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = filled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let norm: Vec<f64> = if range > 0.0 {
        filled.iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; filled.len()]
    };
    let plane = if (h, w) == (size, size) {
        norm
    } else {
        resize_bilinear_plane(&norm, h, w, size, size)
    };
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        data.extend(plane.iter().map(|&v| T::from_f64_lossy(v)));
    }
    ImageTensor::new(Tensor::from_vec(&[3, size, size], data)?)
}
