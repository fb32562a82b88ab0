//! Map export: 32-bit float TIFF grids and colour PNG heatmaps.

use std::path::Path;

use crate::datasets::{write_depth_tiff, write_rgb_png, DepthGrid, Mask, RgbImage};
use crate::error::{Result, TrdError};
use crate::scoring::AnomalyMap;

const VIRIDIS: [[f64; 3]; 9] = [
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.267, 0.749, 0.441],
    [0.993, 0.906, 0.144],
];

/// Colour for `t` in `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f;
        out[c] = (v * 255.0).round() as u8;
    }
    out
}

/// Min-max scaled colour rendering, with the ground-truth outline drawn in
/// red when a mask is given.
pub fn render_heatmap(map: &AnomalyMap, mask: Option<&Mask>) -> Result<RgbImage> {
    let (h, w) = (map.height, map.width);
    if let Some(m) = mask {
        if (m.height, m.width) != (h, w) {
            return Err(TrdError::Dimension(format!(
                "mask {}x{} vs map {h}x{w}",
                m.height, m.width
            )));
        }
    }
    let lo = map.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut data = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let edge = mask.is_some_and(|m| {
                let inside = |yy: isize, xx: isize| {
                    yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && m.data[yy as usize * w + xx as usize]
                };
                let (yi, xi) = (y as isize, x as isize);
                inside(yi, xi) && !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1))
            });
            let px = if edge {
                [255, 0, 0]
            } else {
                colormap((map.data[y * w + x] - lo) / range)
            };
            data.extend(px);
        }
    }
    Ok(RgbImage {
        height: h,
        width: w,
        data,
    })
}

pub fn write_heatmap(path: &Path, map: &AnomalyMap, mask: Option<&Mask>) -> Result<()> {
    write_rgb_png(path, &render_heatmap(map, mask)?)
}

/// Raw values as a single-channel 32-bit float TIFF.
pub fn write_float_grid(path: &Path, map: &AnomalyMap) -> Result<()> {
    write_depth_tiff(
        path,
        &DepthGrid {
            height: map.height,
            width: map.width,
            values: map.data.clone(),
        },
    )
}
