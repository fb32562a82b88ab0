//! Slow, direct reference implementations of the metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trd_core::metrics::{auroc, average_precision, pro, PixelEval, PixelItem, ScoredSet};

/// Pairwise count over every positive/negative pair, ties worth one half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn thresholds_desc(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

/// Recount precision and recall from scratch at every distinct threshold.
pub fn ap_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut ap, mut prev_r) = (0.0, 0.0);
    for t in thresholds_desc(scores) {
        let predicted: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = predicted.iter().filter(|&&i| labels[i]).count() as f64;
        let (p, r) = (tp / predicted.len() as f64, tp / pos);
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// Region labels by repeated neighbour relaxation until nothing changes.
fn regions(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label: Vec<usize> = (0..mask.len()).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if !mask[p] {
                    continue;
                }
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let q = ny * w + nx;
                        if mask[q] && label[q] < label[p] {
                            label[p] = label[q];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = (0..mask.len()).filter(|&p| mask[p]).map(|p| label[p]).collect();
    roots.sort();
    roots.dedup();
    roots
        .iter()
        .map(|&r| (0..mask.len()).filter(|&p| mask[p] && label[p] == r).collect())
        .collect()
}

/// Binarize at every distinct threshold, measure region overlap and
/// false-positive rate directly, then integrate with interpolation at the limit.
pub fn pro_sweep(e: &PixelEval, limit: f64) -> f64 {
    let all: Vec<f64> = e.items.iter().flat_map(|i| i.scores.iter().copied()).collect();
    let regs: Vec<(usize, Vec<usize>)> = e
        .items
        .iter()
        .enumerate()
        .flat_map(|(k, it)| regions(&it.mask, it.height, it.width).into_iter().map(move |r| (k, r)))
        .collect();
    let normal: usize = e.items.iter().map(|i| i.mask.iter().filter(|&&m| !m).count()).sum();
    let mut fpr = vec![0.0];
    let mut pro = vec![0.0];
    for t in thresholds_desc(&all) {
        let fp: usize = e
            .items
            .iter()
            .map(|i| (0..i.scores.len()).filter(|&p| !i.mask[p] && i.scores[p] >= t).count())
            .sum();
        let overlap: f64 = regs
            .iter()
            .map(|(k, r)| r.iter().filter(|&&p| e.items[*k].scores[p] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regs.len() as f64;
        fpr.push(fp as f64 / normal as f64);
        pro.push(overlap);
    }
    let mut area = 0.0;
    for k in 1..fpr.len() {
        let (x0, x1) = (fpr[k - 1], fpr[k]);
        if x1 <= limit {
            area += (x1 - x0) * (pro[k] + pro[k - 1]) / 2.0;
        } else {
            if x0 < limit {
                let y = pro[k - 1] + (pro[k] - pro[k - 1]) * (limit - x0) / (x1 - x0);
                area += (limit - x0) * (y + pro[k - 1]) / 2.0;
            }
            break;
        }
    }
    area / limit
}

/// Random scores and labels with both classes, drawn from a small
/// value set so ties are common.
pub fn random_scored(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.random_range(2..=max_n);
        let levels = rng.random_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 3.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

/// A few random masks of at most 16x16 with blob regions and noisy scores.
pub fn random_pixel_eval(rng: &mut ChaCha8Rng) -> PixelEval {
    loop {
        let count = rng.random_range(1..=3);
        let items: Vec<PixelItem> = (0..count)
            .map(|_| {
                let (h, w) = (rng.random_range(4..=16), rng.random_range(4..=16));
                let mut mask = vec![false; h * w];
                for _ in 0..rng.random_range(0..=3) {
                    let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
                    let r = rng.random_range(0..=2) as isize;
                    for y in 0..h {
                        for x in 0..w {
                            if (y as isize - cy as isize).abs() <= r && (x as isize - cx as isize).abs() <= r {
                                mask[y * w + x] = true;
                            }
                        }
                    }
                }
                let levels = rng.random_range(3..=40);
                let scores = mask
                    .iter()
                    .map(|&m| (rng.random_range(0..levels) as f64 + if m { 5.0 } else { 0.0 }) / 7.0)
                    .collect();
                PixelItem::new(h, w, scores, mask).unwrap()
            })
            .collect();
        let e = PixelEval::new(items);
        let anomalous = e.items.iter().any(|i| i.mask.iter().any(|&m| m));
        let normal = e.items.iter().any(|i| i.mask.iter().any(|&m| !m));
        if anomalous && normal {
            return e;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest AUROC and AP disagreement over `count` random instances.
pub fn image_metric_errors(count: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut e_auc, mut e_ap) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let (s, l) = random_scored(&mut r, 30);
        let set = ScoredSet::new(s.clone(), l.clone()).unwrap();
        e_auc = e_auc.max((auroc(&set).unwrap() - auroc_pairs(&s, &l)).abs());
        e_ap = e_ap.max((average_precision(&set).unwrap() - ap_sweep(&s, &l)).abs());
    }
    (e_auc, e_ap)
}

/// Largest PRO disagreement over `count` random mask sets.
pub fn pro_errors(count: usize, seed: u64, limit: f64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let e = random_pixel_eval(&mut r);
        worst = worst.max((pro(&e, limit).unwrap() - pro_sweep(&e, limit)).abs());
    }
    worst
}
