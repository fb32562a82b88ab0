//! Paired RGB + depth samples: on-disk loaders and a seeded synthetic
//! generator.

mod depth;
mod io;
mod loader;
mod toy;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrdError};
use crate::networks::ImageTensor;
use crate::scalar::Scalar;

pub use depth::{preprocess_depth, DepthGrid};
pub use io::{read_depth, read_mask, read_rgb, rgb_to_image, write_depth_tiff, write_mask_png, write_rgb_png, RgbImage};
pub use loader::{load_mvtec3d, load_paired, PairedLayout, ThreeDSource};
pub use toy::{generate_toy, generate_toy_raw, render_toy, write_toy, AnomalyMix, ToyAnomaly, ToyConfig, ToyDataset, ToyRaw};

pub const GOOD: &str = "good";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Binary ground truth, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub category: String,
    pub split: Split,
    /// Defect folder, `good` for normal samples.
    pub defect: String,
    pub index: usize,
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{:03}",
            self.category,
            self.split.dir_name(),
            self.defect,
            self.index
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample<T> {
    pub image_2d: ImageTensor<T>,
    pub image_3d: ImageTensor<T>,
    pub label: Label,
    pub mask: Option<Mask>,
    pub identity: Identity,
}

impl<T: Scalar> MultimodalSample<T> {
    pub fn new(
        image_2d: ImageTensor<T>,
        image_3d: ImageTensor<T>,
        label: Label,
        mask: Option<Mask>,
        identity: Identity,
    ) -> Result<Self> {
        let s = image_2d.size();
        if image_3d.size() != s {
            return Err(TrdError::Data(format!(
                "{identity}: 2D image is {s}px but 3D image is {}px",
                image_3d.size()
            )));
        }
        if let Some(m) = &mask {
            if (m.height, m.width) != (s, s) {
                return Err(TrdError::Data(format!(
                    "{identity}: mask is {}x{}, images are {s}x{s}",
                    m.height, m.width
                )));
            }
        }
        let nonzero = mask.as_ref().is_some_and(|m| !m.is_empty());
        if label.is_anomalous() && identity.split == Split::Test && !nonzero {
            return Err(TrdError::Data(format!("{identity}: anomalous test sample without a mask")));
        }
        if !label.is_anomalous() && nonzero {
            return Err(TrdError::Data(format!("{identity}: normal sample with a nonempty mask")));
        }
        Ok(MultimodalSample {
            image_2d,
            image_3d,
            label,
            mask,
            identity,
        })
    }

    pub fn size(&self) -> usize {
        self.image_2d.size()
    }

    /// The mask, or an empty one for samples without ground truth.
    pub fn mask_or_empty(&self) -> Mask {
        self.mask.clone().unwrap_or_else(|| Mask::empty(self.size(), self.size()))
    }
}

/// Fail if any sample is anomalous.
pub fn ensure_all_normal<T>(samples: &[MultimodalSample<T>], what: &str) -> Result<()> {
    match samples.iter().find(|s| s.label.is_anomalous()) {
        Some(s) => Err(TrdError::Data(format!("{what} contains anomalous sample {}", s.identity))),
        None => Ok(()),
    }
}
