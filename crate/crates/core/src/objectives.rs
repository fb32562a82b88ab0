//! Cosine similarity and the distillation, filter and amplifier losses.
//!
//! Every loss is `sum over levels of mean over locations of (1 - cos)`,
//! where the cosine is taken between channel vectors at one location.
//! Locations where either vector is shorter than
//! [`COSINE_NORM_FLOOR`](crate::kernels::COSINE_NORM_FLOOR) have cosine 0.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Result, TrdError};
use crate::kernels;
use crate::networks::{FeaturePyramid, LEVELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-location cosine similarity, `h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

pub fn cosine_sim_map<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<SimilarityMap<T>> {
    if f1.shape().len() != 3 {
        return Err(TrdError::Dimension(format!("expected C x H x W, got {:?}", f1.shape())));
    }
    f2.ensure_shape(f1.shape(), "cosine similarity")?;
    let (_, h, w) = f1.chw();
    Ok(SimilarityMap {
        height: h,
        width: w,
        values: kernels::cosine_map(f1, f2),
    })
}

/// `sum_i mean_p (1 - cos(a_i[:, p], b_i[:, p]))`, in `[0, 2 * LEVELS]`.
pub fn pyramid_loss<T: Scalar>(a: &FeaturePyramid<T>, b: &FeaturePyramid<T>) -> Result<T> {
    a.check_same_shape(b, "pyramid loss")?;
    let mut total = T::zero();
    for i in 0..LEVELS {
        let m = cosine_sim_map(&a.levels[i], &b.levels[i])?;
        let n = T::from_usize(m.values.len()).unwrap();
        total = total + m.values.iter().map(|&c| T::one() - c).sum::<T>() / n;
    }
    Ok(total)
}

/// Distillation loss between teacher and student pyramids.
pub fn loss_d<T: Scalar>(encoded: &FeaturePyramid<T>, decoded: &FeaturePyramid<T>) -> Result<T> {
    pyramid_loss(encoded, decoded)
}

/// Filter alignment loss between own teacher features and the projected other modality.
pub fn loss_cf<T: Scalar>(encoded_own: &FeaturePyramid<T>, projected_other: &FeaturePyramid<T>) -> Result<T> {
    pyramid_loss(encoded_own, projected_other)
}

/// Amplifier losses `(mapping, output consistency, sum)`.
pub fn loss_ca<T: Scalar>(
    encoded_own: &FeaturePyramid<T>,
    mapped_other: &FeaturePyramid<T>,
    amplified_own: &FeaturePyramid<T>,
) -> Result<(T, T, T)> {
    encoded_own.check_same_shape(amplified_own, "amplifier output")?;
    let ibp = pyramid_loss(encoded_own, mapped_other)?;
    let output = pyramid_loss(encoded_own, amplified_own)?;
    Ok((ibp, output, ibp + output))
}

/// Record the pyramid loss on the tape.
pub fn pyramid_loss_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, a: &[Var; LEVELS], b: &[Var; LEVELS]) -> Result<Var> {
    let mut parts = Vec::with_capacity(LEVELS);
    for i in 0..LEVELS {
        tape.value(b[i])
            .ensure_shape(tape.value(a[i]).shape(), &format!("pyramid loss level {}", i + 1))?;
        parts.push(tape.cosine_distance(a[i], b[i]));
    }
    Ok(tape.sum(&parts))
}

/// Loss terms of one branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchLosses {
    pub distill: f64,
    pub filter: f64,
    pub mapping: f64,
    pub output: f64,
    pub amplifier: f64,
}

impl BranchLosses {
    pub fn new(distill: f64, filter: f64, mapping: f64, output: f64) -> Self {
        BranchLosses {
            distill,
            filter,
            mapping,
            output,
            amplifier: mapping + output,
        }
    }

    pub fn total(&self) -> f64 {
        self.distill + self.filter + self.amplifier
    }

    fn terms(&self) -> [f64; 5] {
        [self.distill, self.filter, self.mapping, self.output, self.amplifier]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub branch_2d: BranchLosses,
    pub branch_3d: BranchLosses,
    pub total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        self.total.is_finite()
            && self
                .branch_2d
                .terms()
                .iter()
                .chain(&self.branch_3d.terms())
                .all(|v| v.is_finite())
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> BranchLosses| {
            let s = items.iter().fold([0.0; 4], |acc, b| {
                let t = f(b);
                [acc[0] + t.distill, acc[1] + t.filter, acc[2] + t.mapping, acc[3] + t.output]
            });
            BranchLosses::new(s[0] / n, s[1] / n, s[2] / n, s[3] / n)
        };
        let b2 = avg(&|b| b.branch_2d);
        let b3 = avg(&|b| b.branch_3d);
        loss_total(b2, b3)
    }
}

/// Sum of both branches' distillation, filter and amplifier losses; every
/// weight is 1.
pub fn loss_total(b2d: BranchLosses, b3d: BranchLosses) -> LossBreakdown {
    LossBreakdown {
        branch_2d: b2d,
        branch_3d: b3d,
        total: b2d.total() + b3d.total(),
    }
}
