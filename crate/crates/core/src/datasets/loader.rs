use std::path::{Path, PathBuf};

use super::io::{read_depth, read_mask, read_rgb};
use super::{preprocess_depth, Identity, Label, Mask, MultimodalSample, Split, GOOD};
use crate::error::{Result, TrdError};
use crate::networks::ImageTensor;
use crate::scalar::Scalar;

/// How the second modality is stored next to each RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ThreeDSource {
    /// Float TIFF, single-channel depth or three-channel positions, found
    /// in the first of these folders that exists.
    Depth { dirs: Vec<String> },
    /// An ordinary image such as a normal map, used as is.
    Image { dir: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedLayout {
    pub rgb_dir: String,
    pub three_d: ThreeDSource,
    pub mask_dir: String,
}

impl PairedLayout {
    /// `rgb/*.png` with `xyz/*.tiff` (or `depth/*.tiff`) and `gt/*.png`.
    pub fn mvtec3d() -> Self {
        PairedLayout {
            rgb_dir: "rgb".into(),
            three_d: ThreeDSource::Depth {
                dirs: vec!["xyz".into(), "depth".into()],
            },
            mask_dir: "gt".into(),
        }
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| TrdError::ingestion(dir, e.to_string()))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| TrdError::ingestion(dir, e.to_string()))?.path();
        if p.is_dir() == want_dirs {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn companion(dir: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.exists())
}

fn load_three_d<T: Scalar>(defect_dir: &Path, stem: &str, src: &ThreeDSource, size: usize) -> Result<ImageTensor<T>> {
    match src {
        ThreeDSource::Depth { dirs } => {
            for d in dirs {
                if let Some(p) = companion(&defect_dir.join(d), stem, &["tiff", "tif"]) {
                    let grid = read_depth(&p)?;
                    return preprocess_depth(&grid, size).map_err(|e| match e {
                        TrdError::Ingestion { reason, .. } => TrdError::ingestion(&p, reason),
                        other => other,
                    });
                }
            }
            let first = dirs.first().map(String::as_str).unwrap_or("depth");
            Err(TrdError::ingestion(
                defect_dir.join(first).join(format!("{stem}.tiff")),
                "missing depth companion",
            ))
        }
        ThreeDSource::Image { dir } => {
            let d = defect_dir.join(dir);
            let p = companion(&d, stem, &["png", "jpg", "jpeg"])
                .ok_or_else(|| TrdError::ingestion(d.join(format!("{stem}.png")), "missing 3D companion image"))?;
            read_rgb(&p, size)
        }
    }
}

/// Load every sample of one split, ordered by defect folder then file name.
pub fn load_paired<T: Scalar>(
    root: &Path,
    category: &str,
    split: Split,
    size: usize,
    layout: &PairedLayout,
) -> Result<Vec<MultimodalSample<T>>> {
    let split_dir = root.join(category).join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(TrdError::ingestion(&split_dir, "split directory not found"));
    }
    let mut samples = Vec::new();
    for defect_dir in sorted_entries(&split_dir, true)? {
        let defect = defect_dir.file_name().unwrap().to_string_lossy().into_owned();
        let rgb_dir = defect_dir.join(&layout.rgb_dir);
        if !rgb_dir.is_dir() {
            return Err(TrdError::ingestion(&rgb_dir, "missing RGB folder"));
        }
        let anomalous = defect != GOOD;
        for (pos, rgb_path) in sorted_entries(&rgb_dir, false)?.into_iter().enumerate() {
            if rgb_path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let stem = rgb_path.file_stem().unwrap().to_string_lossy().into_owned();
            let image_2d = read_rgb::<T>(&rgb_path, size)?;
            let image_3d = load_three_d::<T>(&defect_dir, &stem, &layout.three_d, size)?;
            let gt = defect_dir.join(&layout.mask_dir).join(format!("{stem}.png"));
            let mask: Option<Mask> = if gt.exists() {
                Some(read_mask(&gt, size)?)
            } else if anomalous && split == Split::Test {
                return Err(TrdError::ingestion(gt, "missing ground truth mask"));
            } else if split == Split::Test {
                Some(Mask::empty(size, size))
            } else {
                None
            };
            let identity = Identity {
                category: category.to_string(),
                split,
                defect: defect.clone(),
                index: stem.parse().unwrap_or(pos),
            };
            let label = if anomalous { Label::Anomalous } else { Label::Normal };
            samples.push(
                MultimodalSample::new(image_2d, image_3d, label, mask, identity).map_err(|e| match e {
                    TrdError::Data(reason) => TrdError::ingestion(&rgb_path, reason),
                    other => other,
                })?,
            );
        }
    }
    Ok(samples)
}

/// MVTec 3D-AD style layout with depth taken from position TIFFs.
pub fn load_mvtec3d<T: Scalar>(root: &Path, category: &str, split: Split, size: usize) -> Result<Vec<MultimodalSample<T>>> {
    load_paired(root, category, split, size, &PairedLayout::mvtec3d())
}
