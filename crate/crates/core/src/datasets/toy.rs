//! Synthetic paired RGB + depth objects with planted blob anomalies.
//!
//! Each sample is a textured dome on a flat background. The RGB image is
//! the albedo texture lit by the dome's own surface normals, so the two
//! modalities are correlated. Anomalies are a color blotch (RGB only), a
//! Gaussian dent (depth only) or both at the same place. Every sample is
//! drawn from its own seeded stream, so generation is order independent.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{rgb_to_image, write_depth_tiff, write_mask_png, write_rgb_png, RgbImage};
use super::{preprocess_depth, DepthGrid, Identity, Label, Mask, MultimodalSample, Split, GOOD};
use crate::error::{Result, TrdError};
use crate::model::Modality;
use crate::scalar::Scalar;

pub const BACKGROUND_DEPTH: f64 = 0.05;
const DOME_HEIGHT: f64 = 0.6;
const RIPPLE: f64 = 0.06;
const DISK_RADIUS: f64 = 0.36;
const DENT_FRACTION: f64 = 0.5;
const BLOTCH_BLEND: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyAnomaly {
    TwoD,
    ThreeD,
    Both,
}

impl ToyAnomaly {
    pub const ALL: [ToyAnomaly; 3] = [ToyAnomaly::TwoD, ToyAnomaly::ThreeD, ToyAnomaly::Both];

    pub fn defect(self) -> &'static str {
        match self {
            ToyAnomaly::TwoD => "color",
            ToyAnomaly::ThreeD => "bump",
            ToyAnomaly::Both => "combined",
        }
    }

    pub fn from_defect(name: &str) -> Option<Self> {
        ToyAnomaly::ALL.into_iter().find(|a| a.defect() == name)
    }

    pub fn affects(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (ToyAnomaly::Both, _) | (ToyAnomaly::TwoD, Modality::TwoD) | (ToyAnomaly::ThreeD, Modality::ThreeD)
        )
    }

    /// The anomaly that is visible only in `m`.
    pub fn only(m: Modality) -> Self {
        match m {
            Modality::TwoD => ToyAnomaly::TwoD,
            Modality::ThreeD => ToyAnomaly::ThreeD,
        }
    }
}

/// Share of anomalous test samples per kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyMix {
    pub two_d: f64,
    pub three_d: f64,
    pub both: f64,
}

impl Default for AnomalyMix {
    fn default() -> Self {
        AnomalyMix {
            two_d: 1.0 / 3.0,
            three_d: 1.0 / 3.0,
            both: 1.0 / 3.0,
        }
    }
}

impl AnomalyMix {
    fn shares(&self) -> [f64; 3] {
        [self.two_d, self.three_d, self.both]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub resolution: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of test samples that are anomalous.
    pub anomaly_fraction: f64,
    pub mix: AnomalyMix,
    /// Inclusive blob radius range in pixels.
    pub blob_radius: [usize; 2],
    pub seed: u64,
    pub category: String,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            resolution: 64,
            n_train: 200,
            n_val: 50,
            n_test: 100,
            anomaly_fraction: 0.5,
            mix: AnomalyMix::default(),
            blob_radius: [4, 8],
            seed: 0,
            category: "toy".into(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrdError::Config(m));
        let shares = self.mix.shares();
        if shares.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!(
                "anomaly mix probabilities must be in [0, 1] and sum to 1, got {shares:?}"
            ));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("toy sample counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return bad(format!("anomaly fraction {} is outside [0, 1]", self.anomaly_fraction));
        }
        if self.resolution < 32 {
            return bad(format!("toy resolution {} is below 32", self.resolution));
        }
        let [lo, hi] = self.blob_radius;
        if lo == 0 || lo > hi || (hi as f64) > DISK_RADIUS * self.resolution as f64 / 2.0 {
            return bad(format!("blob radius range {lo}..={hi} does not fit the object"));
        }
        Ok(())
    }

    fn stream(&self, tag: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(tag.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    /// Anomaly kind for every test index.
    fn test_plan(&self) -> Vec<Option<ToyAnomaly>> {
        let n_anom = (self.n_test as f64 * self.anomaly_fraction).round() as usize;
        let quotas: Vec<f64> = self.mix.shares().iter().map(|p| p * n_anom as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
        let mut left = n_anom - counts.iter().sum::<usize>();
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        let mut plan = vec![None; self.n_test - n_anom];
        for (kind, &c) in ToyAnomaly::ALL.iter().zip(&counts) {
            plan.extend(std::iter::repeat_n(Some(*kind), c));
        }
        plan.shuffle(&mut self.stream("test-plan"));
        plan
    }
}

/// One generated sample before depth preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyRaw {
    pub identity: Identity,
    pub anomaly: Option<ToyAnomaly>,
    pub rgb: RgbImage,
    pub depth: DepthGrid,
    pub mask: Mask,
}

impl ToyRaw {
    pub fn to_sample<T: Scalar>(&self) -> Result<MultimodalSample<T>> {
        let size = self.rgb.height;
        let label = if self.anomaly.is_some() {
            Label::Anomalous
        } else {
            Label::Normal
        };
        let mask = (self.identity.split == Split::Test).then(|| self.mask.clone());
        MultimodalSample::new(
            rgb_to_image(&self.rgb, size)?,
            preprocess_depth(&self.depth, size)?,
            label,
            mask,
            self.identity.clone(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset<T> {
    pub train: Vec<MultimodalSample<T>>,
    pub validation: Vec<MultimodalSample<T>>,
    pub test: Vec<MultimodalSample<T>>,
}

struct Surface {
    ripple: [f64; 4],
    albedo: [f64; 3],
    texture: [f64; 4],
}

fn tau() -> f64 {
    std::f64::consts::TAU
}

/// Render one sample; `anomaly = None` gives the normal twin of any index.
pub fn render_toy(cfg: &ToyConfig, split: Split, index: usize, anomaly: Option<ToyAnomaly>) -> ToyRaw {
    let n = cfg.resolution;
    let nf = n as f64;
    let tag = format!("{}/{index}", split.dir_name());
    let mut rng = cfg.stream(&tag);
    let s = Surface {
        ripple: [
            rng.random_range(1.5..3.0),
            rng.random_range(0.0..1.0),
            rng.random_range(1.5..3.0),
            rng.random_range(0.0..1.0),
        ],
        albedo: [
            rng.random_range(0.65..0.8),
            rng.random_range(0.45..0.6),
            rng.random_range(0.25..0.4),
        ],
        texture: [
            rng.random_range(2.0..4.0),
            rng.random_range(0.0..1.0),
            rng.random_range(2.0..4.0),
            rng.random_range(0.0..1.0),
        ],
    };
    let (c, rd) = (nf / 2.0, DISK_RADIUS * nf);
    let mut depth = vec![BACKGROUND_DEPTH; n * n];
    let mut inside = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d2 = ((px - c).powi(2) + (py - c).powi(2)) / (rd * rd);
            if d2 < 1.0 {
                let w = 1.0 - d2;
                let (u, v) = (px / nf, py / nf);
                let ripple = (tau() * (s.ripple[0] * u + s.ripple[1])).sin() * (tau() * (s.ripple[2] * v + s.ripple[3])).cos();
                depth[y * n + x] = BACKGROUND_DEPTH + w * (DOME_HEIGHT + RIPPLE * ripple);
                inside[y * n + x] = true;
            }
        }
    }
    // quantize to the stored precision before anything reads it
    for d in depth.iter_mut() {
        *d = *d as f32 as f64;
    }
    let mut rgb = shade(&depth, &inside, &s, n);

    let mut mask = Mask::empty(n, n);
    let mut final_depth = depth.clone();
    if let Some(kind) = anomaly {
        let mut brng = cfg.stream(&format!("{tag}/blob"));
        let r = brng.random_range(cfg.blob_radius[0]..=cfg.blob_radius[1]) as f64;
        let peak = (0..n * n).max_by(|&a, &b| depth[a].total_cmp(&depth[b])).unwrap();
        let (peak_x, peak_y) = ((peak % n) as f64 + 0.5, (peak / n) as f64 + 0.5);
        let reach = rd - r - 2.0;
        let (mut bx, mut by) = (c, c);
        for _ in 0..1000 {
            let (a, rr) = (brng.random_range(0.0..tau()), reach * brng.random::<f64>().sqrt());
            (bx, by) = (c + rr * a.cos(), c + rr * a.sin());
            if ((bx - peak_x).powi(2) + (by - peak_y).powi(2)).sqrt() > r + 1.5 {
                break;
            }
        }
        let blotch = [
            brng.random_range(0.05..0.2),
            brng.random_range(0.25..0.45),
            brng.random_range(0.75..0.95),
        ];
        let (lo, hi) = depth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let amp = DENT_FRACTION * (hi - lo);
        let sigma = r / 2.0;
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                if d2 > r * r {
                    continue;
                }
                let p = y * n + x;
                mask.data[p] = true;
                if kind.affects(Modality::ThreeD) {
                    let z = depth[p] - amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    final_depth[p] = z.max(BACKGROUND_DEPTH + 0.01) as f32 as f64;
                }
                if kind.affects(Modality::TwoD) {
                    for ch in 0..3 {
                        rgb[3 * p + ch] = (1.0 - BLOTCH_BLEND) * rgb[3 * p + ch] + BLOTCH_BLEND * blotch[ch];
                    }
                }
            }
        }
    }
    let defect = anomaly.map(ToyAnomaly::defect).unwrap_or(GOOD).to_string();
    ToyRaw {
        identity: Identity {
            category: cfg.category.clone(),
            split,
            defect,
            index,
        },
        anomaly,
        rgb: RgbImage {
            height: n,
            width: n,
            data: rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        },
        depth: DepthGrid {
            height: n,
            width: n,
            values: final_depth,
        },
        mask,
    }
}

/// Albedo texture lit by the surface normals of `depth`, interleaved RGB in `[0, 1]`.
fn shade(depth: &[f64], inside: &[bool], s: &Surface, n: usize) -> Vec<f64> {
    let nf = n as f64;
    let light = {
        let l = [-0.4f64, -0.5, 0.77];
        let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / norm, l[1] / norm, l[2] / norm]
    };
    let k = nf / 4.0;
    let at = |x: isize, y: isize| depth[y.clamp(0, n as isize - 1) as usize * n + x.clamp(0, n as isize - 1) as usize];
    let mut out = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (xi, yi) = (x as isize, y as isize);
            let gx = 0.5 * (at(xi + 1, yi) - at(xi - 1, yi));
            let gy = 0.5 * (at(xi, yi + 1) - at(xi, yi - 1));
            let nrm = [-gx * k, -gy * k, 1.0];
            let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + 1.0).sqrt();
            let lambert = ((nrm[0] * light[0] + nrm[1] * light[1] + nrm[2] * light[2]) / len).max(0.0);
            let shading = 0.35 + 0.65 * lambert;
            let p = y * n + x;
            let albedo = if inside[p] {
                let (u, v) = ((x as f64 + 0.5) / nf, (y as f64 + 0.5) / nf);
                let t = 0.5
                    + 0.25 * (tau() * (s.texture[0] * u + s.texture[1])).sin()
                    + 0.25 * (tau() * (s.texture[2] * v + s.texture[3])).sin();
                let m = 0.8 + 0.4 * t;
                [s.albedo[0] * m, s.albedo[1] * m, s.albedo[2] * m]
            } else {
                [0.35, 0.35, 0.38]
            };
            for ch in 0..3 {
                out[3 * p + ch] = albedo[ch] * shading;
            }
        }
    }
    out
}

/// All raw samples, each split ordered by defect folder then index (the
/// order the loader reads them back in).
pub fn generate_toy_raw(cfg: &ToyConfig) -> Result<[Vec<ToyRaw>; 3]> {
    cfg.validate()?;
    let normal = |split: Split, count: usize| -> Vec<ToyRaw> {
        (0..count).into_par_iter().map(|i| render_toy(cfg, split, i, None)).collect()
    };
    let plan = cfg.test_plan();
    let mut test: Vec<ToyRaw> = plan
        .par_iter()
        .enumerate()
        .map(|(i, kind)| render_toy(cfg, Split::Test, i, *kind))
        .collect();
    test.sort_by(|a, b| (&a.identity.defect, a.identity.index).cmp(&(&b.identity.defect, b.identity.index)));
    Ok([normal(Split::Train, cfg.n_train), normal(Split::Validation, cfg.n_val), test])
}

pub fn generate_toy<T: Scalar>(cfg: &ToyConfig) -> Result<ToyDataset<T>> {
    let [train, validation, test] = generate_toy_raw(cfg)?;
    let convert = |v: &[ToyRaw]| -> Result<Vec<MultimodalSample<T>>> { v.iter().map(ToyRaw::to_sample).collect() };
    Ok(ToyDataset {
        train: convert(&train)?,
        validation: convert(&validation)?,
        test: convert(&test)?,
    })
}

/// Persist the dataset under `root/<category>/<split>/<defect>/{rgb,depth,gt}`
/// and return the category directory.
pub fn write_toy(cfg: &ToyConfig, root: &Path) -> Result<PathBuf> {
    let splits = generate_toy_raw(cfg)?;
    let cat = root.join(&cfg.category);
    for raws in &splits {
        for raw in raws {
            let dir = cat.join(raw.identity.split.dir_name()).join(&raw.identity.defect);
            let stem = format!("{:03}", raw.identity.index);
            let sub = |name: &str| -> Result<PathBuf> {
                let d = dir.join(name);
                std::fs::create_dir_all(&d).map_err(|e| TrdError::io(&d, e))?;
                Ok(d)
            };
            write_rgb_png(&sub("rgb")?.join(format!("{stem}.png")), &raw.rgb)?;
            write_depth_tiff(&sub("depth")?.join(format!("{stem}.tiff")), &raw.depth)?;
            if raw.identity.split == Split::Test {
                write_mask_png(&sub("gt")?.join(format!("{stem}.png")), &raw.mask)?;
            }
        }
    }
    Ok(cat)
}
