//! Image- and pixel-level AUROC and average precision, and the per-region
//! overlap (PRO) curve integrated up to a false-positive-rate limit.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrdError};

pub const DEFAULT_PRO_FPR_LIMIT: f64 = 0.3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(TrdError::Metric(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(TrdError::Metric("NaN score".into()));
        }
        Ok(ScoredSet { scores, labels })
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }

    /// Indices sorted by descending score.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        idx
    }
}

/// Probability that a random positive outscores a random negative, with
/// ties worth one half.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let (pos, neg) = s.counts();
    if pos == 0 || neg == 0 {
        return Err(TrdError::Metric("AUROC needs both classes".into()));
    }
    let order = s.descending();
    // walk tie groups from the top; each positive beats every negative below it
    let mut wins = 0.0;
    let mut neg_below = neg as f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0.0, 0.0);
        while j < order.len() && s.scores[order[j]] == s.scores[order[i]] {
            if s.labels[order[j]] {
                p += 1.0;
            } else {
                n += 1.0;
            }
            j += 1;
        }
        neg_below -= n;
        wins += p * (neg_below + 0.5 * n);
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise average precision over the descending threshold sweep,
/// `sum_k (R_k - R_{k-1}) * P_k`, with tied scores forming one step.
pub fn average_precision(s: &ScoredSet) -> Result<f64> {
    let (pos, _) = s.counts();
    if pos == 0 {
        return Err(TrdError::Metric("average precision needs a positive sample".into()));
    }
    let order = s.descending();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && s.scores[order[j]] == s.scores[order[i]] {
            tp += s.labels[order[j]] as usize;
            j += 1;
        }
        seen = j;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    debug_assert_eq!(seen, order.len());
    Ok(ap)
}

/// Prediction maps paired with binary ground truth masks, row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelEval {
    pub items: Vec<PixelItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelItem {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
}

impl PixelItem {
    pub fn new(height: usize, width: usize, scores: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if scores.len() != height * width || mask.len() != height * width {
            return Err(TrdError::Metric(format!(
                "pixel item {height}x{width} has {} scores and {} mask values",
                scores.len(),
                mask.len()
            )));
        }
        Ok(PixelItem {
            height,
            width,
            scores,
            mask,
        })
    }
}

impl PixelEval {
    pub fn new(items: Vec<PixelItem>) -> Self {
        PixelEval { items }
    }

    /// Every pixel as one scored set.
    pub fn pooled(&self) -> Result<ScoredSet> {
        let scores = self.items.iter().flat_map(|i| i.scores.iter().copied()).collect();
        let labels = self.items.iter().flat_map(|i| i.mask.iter().copied()).collect();
        ScoredSet::new(scores, labels)
    }
}

/// 8-connected component labels; 0 is background, regions count from 1.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count as u32;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = count as u32;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Trapezoid area under `(x, y)` from `x[0]` up to `x_max`, interpolating
/// linearly at the limit. `x` must be non-decreasing.
pub fn trapezoid_to(x: &[f64], y: &[f64], x_max: f64) -> f64 {
    let mut area = 0.0;
    for k in 1..x.len() {
        let (x0, x1, y0, y1) = (x[k - 1], x[k], y[k - 1], y[k]);
        if x0 >= x_max {
            break;
        }
        if x1 <= x_max {
            area += 0.5 * (y0 + y1) * (x1 - x0);
        } else {
            let yi = y0 + (y1 - y0) * (x_max - x0) / (x1 - x0);
            area += 0.5 * (y0 + yi) * (x_max - x0);
            break;
        }
    }
    area
}

/// `(fpr, pro)` curve over all unique thresholds, starting at the origin.
pub fn pro_curve(e: &PixelEval) -> Result<(Vec<f64>, Vec<f64>)> {
    let total: usize = e.items.iter().map(|i| i.scores.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut fp_step = Vec::with_capacity(total);
    let mut pro_step = Vec::with_capacity(total);
    let (mut normal, mut regions) = (0usize, 0usize);
    for item in &e.items {
        let (labels, n) = connected_components(&item.mask, item.height, item.width);
        let mut sizes = vec![0usize; n + 1];
        for &l in &labels {
            sizes[l as usize] += 1;
        }
        regions += n;
        normal += sizes[0];
        for (k, &l) in labels.iter().enumerate() {
            scores.push(item.scores[k]);
            if l == 0 {
                fp_step.push(1.0);
                pro_step.push(0.0);
            } else {
                fp_step.push(0.0);
                pro_step.push(1.0 / sizes[l as usize] as f64);
            }
        }
    }
    if regions == 0 {
        return Err(TrdError::Metric("PRO needs at least one anomalous region".into()));
    }
    if normal == 0 {
        return Err(TrdError::Metric("PRO needs at least one normal pixel".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TrdError::Metric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut fprs = vec![0.0];
    let mut pros = vec![0.0];
    let (mut fp, mut pro) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        fp += fp_step[i];
        pro += pro_step[i];
        let last_of_group = k + 1 == order.len() || scores[order[k + 1]] != scores[i];
        if last_of_group {
            fprs.push((fp / normal as f64).clamp(0.0, 1.0));
            pros.push((pro / regions as f64).clamp(0.0, 1.0));
        }
    }
    Ok((fprs, pros))
}

/// Normalized area under the PRO curve up to `fpr_limit`.
pub fn pro(e: &PixelEval, fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(TrdError::Metric(format!("PRO limit must be in (0, 1], got {fpr_limit}")));
    }
    let (x, y) = pro_curve(e)?;
    Ok(trapezoid_to(&x, &y, fpr_limit) / fpr_limit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub category: String,
    pub image_auroc: f64,
    pub image_ap: f64,
    pub pixel_auroc: f64,
    pub pixel_ap: f64,
    pub pro: f64,
    pub pro_fpr_limit: f64,
    pub num_images: usize,
    pub num_anomalous: usize,
    #[serde(default)]
    pub config_fingerprint: Option<String>,
}

/// Compute all five metrics. Masks are required for every image; normal
/// images carry all-false masks.
pub fn evaluate_all(
    category: &str,
    image_scores: &[f64],
    labels: &[bool],
    pixels: &PixelEval,
    fpr_limit: f64,
) -> Result<MetricsReport> {
    let ctx = |what: &str, e: TrdError| TrdError::Metric(format!("{category} {what}: {e}"));
    if pixels.items.len() != image_scores.len() {
        return Err(TrdError::Metric(format!(
            "{category}: {} image scores but {} pixel maps",
            image_scores.len(),
            pixels.items.len()
        )));
    }
    let images = ScoredSet::new(image_scores.to_vec(), labels.to_vec())?;
    let px = pixels.pooled()?;
    Ok(MetricsReport {
        category: category.to_string(),
        image_auroc: auroc(&images).map_err(|e| ctx("image AUROC", e))?,
        image_ap: average_precision(&images).map_err(|e| ctx("image AP", e))?,
        pixel_auroc: auroc(&px).map_err(|e| ctx("pixel AUROC", e))?,
        pixel_ap: average_precision(&px).map_err(|e| ctx("pixel AP", e))?,
        pro: pro(pixels, fpr_limit).map_err(|e| ctx("PRO", e))?,
        pro_fpr_limit: fpr_limit,
        num_images: labels.len(),
        num_anomalous: labels.iter().filter(|&&l| l).count(),
        config_fingerprint: None,
    })
}

impl MetricsReport {
    pub fn values(&self) -> [(&'static str, f64); 5] {
        [
            ("I-AUC", self.image_auroc),
            ("I-AP", self.image_ap),
            ("P-AUC", self.pixel_auroc),
            ("P-AP", self.pixel_ap),
            ("PRO", self.pro),
        ]
    }
}

/// Reports for several categories plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub categories: Vec<MetricsReport>,
    pub average: [f64; 5],
}

impl MetricsSummary {
    pub fn new(categories: Vec<MetricsReport>) -> Self {
        let n = categories.len().max(1) as f64;
        let mut average = [0.0; 5];
        for r in &categories {
            for (a, (_, v)) in average.iter_mut().zip(r.values()) {
                *a += v / n;
            }
        }
        MetricsSummary { categories, average }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for MetricsSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16}", "category")?;
        for name in ["I-AUC", "I-AP", "P-AUC", "P-AP", "PRO"] {
            write!(f, " {name:>7}")?;
        }
        writeln!(f)?;
        for r in &self.categories {
            write!(f, "{:<16}", r.category)?;
            for (_, v) in r.values() {
                write!(f, " {:>7.2}", 100.0 * v)?;
            }
            writeln!(f)?;
        }
        if self.categories.len() > 1 {
            write!(f, "{:<16}", "mean")?;
            for v in self.average {
                write!(f, " {:>7.2}", 100.0 * v)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
