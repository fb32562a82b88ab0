//! Anomaly maps, Gaussian smoothing, calibration and fusion.
//!
//! The fixed pipeline is `branch_map -> smooth -> fuse -> image_score`;
//! calibration statistics are taken from smoothed maps so they describe the
//! same distribution that fusion sees. Everything after the feature
//! pyramids runs in `f64`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::MultimodalSample;
use crate::error::{Result, TrdError};
use crate::kernels;
use crate::model::{Modality, TrdModel, TrdOutputs};
use crate::networks::{FeaturePyramid, LEVELS};
use crate::scalar::Scalar;

/// Smoothing width in pixels at 256 px input.
pub const DEFAULT_SIGMA: f64 = 4.0;
pub const SIGMA_REFERENCE_SIZE: usize = 256;
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapTag {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
    Fused,
}

impl From<Modality> for MapTag {
    fn from(m: Modality) -> Self {
        match m {
            Modality::TwoD => MapTag::TwoD,
            Modality::ThreeD => MapTag::ThreeD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub tag: MapTag,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>, tag: MapTag) -> Result<Self> {
        if data.len() != height * width {
            return Err(TrdError::Dimension(format!(
                "map of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(AnomalyMap {
            height,
            width,
            data,
            tag,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64, tag: MapTag) -> Self {
        AnomalyMap {
            height,
            width,
            data: vec![value; height * width],
            tag,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn same_shape(&self, other: &AnomalyMap, what: &str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(TrdError::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `sum over levels of upsample(1 - cos(F_E, F_CA))` at `out_size`.
pub fn branch_map<T: Scalar>(
    encoded: &FeaturePyramid<T>,
    amplified: &FeaturePyramid<T>,
    out_size: (usize, usize),
    tag: MapTag,
) -> Result<AnomalyMap> {
    encoded.check_same_shape(amplified, "anomaly map")?;
    let (oh, ow) = out_size;
    let mut acc = vec![0.0; oh * ow];
    for i in 0..LEVELS {
        let (_, h, w) = encoded.levels[i].chw();
        let dist: Vec<f64> = kernels::cosine_map(&encoded.levels[i], &amplified.levels[i])
            .into_iter()
            .map(|c| 1.0 - c.as_f64())
            .collect();
        let up = kernels::resize_bilinear_plane(&dist, h, w, oh, ow);
        for (a, u) in acc.iter_mut().zip(up) {
            *a += u;
        }
    }
    AnomalyMap::new(oh, ow, acc, tag)
}

/// Smoothing width for a given input size, scaled from the 256 px reference.
pub fn scaled_sigma(sigma_at_reference: f64, input_size: usize) -> f64 {
    sigma_at_reference * input_size as f64 / SIGMA_REFERENCE_SIZE as f64
}

/// Normalized 1D Gaussian taps, truncated at four standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_lines(src: &[f64], dst: &mut [f64], len: usize, lines: usize, stride: usize, step: usize, k: &[f64]) {
    let r = (k.len() / 2) as isize;
    for line in 0..lines {
        let base = line * stride;
        for i in 0..len {
            let mut acc = 0.0;
            for (t, &w) in k.iter().enumerate() {
                let j = reflect(i as isize + t as isize - r, len);
                acc += w * src[base + j * step];
            }
            dst[base + i * step] = acc;
        }
    }
}

/// Separable Gaussian blur with reflective borders.
pub fn smooth(m: &AnomalyMap, sigma: f64) -> AnomalyMap {
    assert!(sigma > 0.0, "sigma must be positive");
    let k = gaussian_kernel(sigma);
    let (h, w) = (m.height, m.width);
    let mut rows = vec![0.0; h * w];
    blur_lines(&m.data, &mut rows, w, h, w, 1, &k);
    let mut out = vec![0.0; h * w];
    // columns: line = x, stride 1, step w
    blur_lines(&rows, &mut out, h, w, 1, w, &k);
    AnomalyMap {
        height: h,
        width: w,
        data: out,
        tag: m.tag,
    }
}

/// Per-branch mean and standard deviation of smoothed validation maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl CalibrationStats {
    pub const IDENTITY: CalibrationStats = CalibrationStats {
        mean: [0.0; 2],
        std: [1.0; 2],
    };

    /// Pooled statistics over every pixel of every map, per branch.
    /// The standard deviation is the population one, floored at [`STD_FLOOR`].
    pub fn from_maps(maps_2d: &[AnomalyMap], maps_3d: &[AnomalyMap]) -> Result<Self> {
        if maps_2d.is_empty() || maps_3d.is_empty() {
            return Err(TrdError::Calibration("no validation maps".into()));
        }
        let stats = |maps: &[AnomalyMap]| -> Result<(f64, f64)> {
            let n: usize = maps.iter().map(|m| m.data.len()).sum();
            if n == 0 {
                return Err(TrdError::Calibration("validation maps are empty".into()));
            }
            let mean = maps.iter().flat_map(|m| &m.data).sum::<f64>() / n as f64;
            let var = maps.iter().flat_map(|m| &m.data).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            if !mean.is_finite() || !var.is_finite() {
                return Err(TrdError::Calibration("non-finite validation maps".into()));
            }
            Ok((mean, var.sqrt().max(STD_FLOOR)))
        };
        let (m2, s2) = stats(maps_2d)?;
        let (m3, s3) = stats(maps_3d)?;
        Ok(CalibrationStats {
            mean: [m2, m3],
            std: [s2, s3],
        })
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..2 {
            if !self.mean[i].is_finite() || !(self.std[i] >= STD_FLOOR) || !self.std[i].is_finite() {
                return Err(TrdError::Calibration(format!("invalid statistics {self:?}")));
            }
        }
        Ok(())
    }

    /// `(m - mu) / sigma` for the map's branch.
    pub fn normalize(&self, m: &AnomalyMap, branch: Modality) -> AnomalyMap {
        let (mu, sd) = (self.mean[branch.index()], self.std[branch.index()]);
        AnomalyMap {
            height: m.height,
            width: m.width,
            data: m.data.iter().map(|v| (v - mu) / sd).collect(),
            tag: m.tag,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Sum of z-normalized branch maps.
    #[default]
    NormSum,
    SumRaw,
    Product,
}

impl FusionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::NormSum => "norm_sum",
            FusionStrategy::SumRaw => "sum_raw",
            FusionStrategy::Product => "product",
        }
    }

    pub fn needs_calibration(self) -> bool {
        self == FusionStrategy::NormSum
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = TrdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm_sum" => Ok(FusionStrategy::NormSum),
            "sum_raw" => Ok(FusionStrategy::SumRaw),
            "product" => Ok(FusionStrategy::Product),
            other => Err(TrdError::Config(format!(
                "unknown fusion {other:?}, expected norm_sum, sum_raw or product"
            ))),
        }
    }
}

pub fn fuse(m2d: &AnomalyMap, m3d: &AnomalyMap, stats: &CalibrationStats) -> Result<AnomalyMap> {
    fuse_with(m2d, m3d, Some(stats), FusionStrategy::NormSum)
}

pub fn fuse_with(
    m2d: &AnomalyMap,
    m3d: &AnomalyMap,
    stats: Option<&CalibrationStats>,
    strategy: FusionStrategy,
) -> Result<AnomalyMap> {
    m2d.same_shape(m3d, "fusion")?;
    let data = match strategy {
        FusionStrategy::NormSum => {
            let s = stats.ok_or_else(|| {
                TrdError::Evaluation("normalized fusion needs calibration statistics; calibrate the model first".into())
            })?;
            s.validate()?;
            m2d.data
                .iter()
                .zip(&m3d.data)
                .map(|(a, b)| (a - s.mean[0]) / s.std[0] + (b - s.mean[1]) / s.std[1])
                .collect()
        }
        FusionStrategy::SumRaw => m2d.data.iter().zip(&m3d.data).map(|(a, b)| a + b).collect(),
        FusionStrategy::Product => m2d.data.iter().zip(&m3d.data).map(|(a, b)| a * b).collect(),
    };
    AnomalyMap::new(m2d.height, m2d.width, data, MapTag::Fused)
}

pub fn image_score(m: &AnomalyMap) -> f64 {
    m.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Scoring options shared by calibration and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Smoothing width at 256 px input.
    pub sigma: f64,
    pub fusion: FusionStrategy,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            sigma: DEFAULT_SIGMA,
            fusion: FusionStrategy::NormSum,
        }
    }
}

/// Smoothed per-branch maps of one sample.
pub fn smoothed_branch_maps<T: Scalar>(outputs: &TrdOutputs<T>, size: usize, sigma: f64) -> Result<[AnomalyMap; 2]> {
    let one = |m: Modality| -> Result<AnomalyMap> {
        let b = outputs.branch(m);
        let raw = branch_map(&b.encoded_own, &b.amplified, (size, size), m.into())?;
        Ok(smooth(&raw, sigma))
    };
    Ok([one(Modality::TwoD)?, one(Modality::ThreeD)?])
}

/// Everything the scoring pipeline produces for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub map_2d: AnomalyMap,
    pub map_3d: AnomalyMap,
    pub fused: AnomalyMap,
    pub score: f64,
}

impl<T: Scalar> TrdModel<T> {
    /// Smoothed branch maps for a sample, at input resolution.
    pub fn branch_maps(&self, sample: &MultimodalSample<T>, cfg: &ScoreConfig) -> Result<[AnomalyMap; 2]> {
        let size = self.profile().input_size;
        let outputs = self.forward(sample)?;
        smoothed_branch_maps(&outputs, size, scaled_sigma(cfg.sigma, size))
    }

    pub fn score_sample(&self, sample: &MultimodalSample<T>, cfg: &ScoreConfig) -> Result<SampleScore> {
        let [map_2d, map_3d] = self.branch_maps(sample, cfg)?;
        let fused = fuse_with(&map_2d, &map_3d, self.calibration.as_ref(), cfg.fusion)?;
        let score = image_score(&fused);
        Ok(SampleScore {
            map_2d,
            map_3d,
            fused,
            score,
        })
    }

    /// Score several samples in parallel; output order follows input order.
    pub fn score_samples(&self, samples: &[MultimodalSample<T>], cfg: &ScoreConfig) -> Result<Vec<SampleScore>> {
        samples.par_iter().map(|s| self.score_sample(s, cfg)).collect()
    }
}

/// Statistics from the smoothed branch maps of validation normals.
pub fn calibrate<T: Scalar>(
    model: &TrdModel<T>,
    validation: &[MultimodalSample<T>],
    cfg: &ScoreConfig,
) -> Result<CalibrationStats> {
    if validation.is_empty() {
        return Err(TrdError::Calibration("validation set is empty".into()));
    }
    if let Some(s) = validation.iter().find(|s| s.label.is_anomalous()) {
        return Err(TrdError::Calibration(format!("validation sample {} is anomalous", s.identity)));
    }
    let maps: Vec<[AnomalyMap; 2]> = validation
        .par_iter()
        .map(|s| model.branch_maps(s, cfg))
        .collect::<Result<_>>()?;
    let (m2, m3): (Vec<_>, Vec<_>) = maps.into_iter().map(|[a, b]| (a, b)).unzip();
    CalibrationStats::from_maps(&m2, &m3)
}
