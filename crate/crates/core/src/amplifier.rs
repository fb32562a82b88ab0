//! Crossmodal amplifier: a channel expand-then-compress mapping of the other
//! modality's features, blended into the decoder output with learned
//! softmax weights.

use crate::autograd::{mix_coefficients, Tape, Var};
use crate::error::{Result, TrdError};
use crate::kernels::ConvGeom;
use crate::networks::{BackboneProfile, FeaturePyramid, LEVELS};
use crate::nn::{Builder, Conv2d, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct IbpLevel {
    expand: Conv2d,
    mix: Conv2d,
    compress: Conv2d,
}

#[derive(Clone, Debug)]
pub struct InvertedBottleneckProjection {
    levels: Vec<IbpLevel>,
    expansion: usize,
    shapes: [[usize; 3]; LEVELS],
}

impl InvertedBottleneckProjection {
    pub fn new<T: Scalar>(
        profile: &BackboneProfile,
        expansion: usize,
        b: &mut Builder<'_, T>,
        prefix: &str,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(TrdError::Config("channel expansion must be at least 1".into()));
        }
        let levels = (0..LEVELS)
            .map(|i| {
                let c = profile.channels[i];
                let wide = c * expansion;
                let name = format!("{prefix}.level{}", i + 1);
                IbpLevel {
                    expand: Conv2d::new(b, &format!("{name}.expand"), c, wide, ConvGeom::new(1, 1, 0)),
                    mix: Conv2d::new(b, &format!("{name}.mix"), wide, wide, ConvGeom::new(3, 1, 1)),
                    compress: Conv2d::new(b, &format!("{name}.compress"), wide, c, ConvGeom::new(1, 1, 0)),
                }
            })
            .collect();
        Ok(InvertedBottleneckProjection {
            levels,
            expansion,
            shapes: std::array::from_fn(|i| profile.level_shape(i)),
        })
    }

    pub fn expansion(&self) -> usize {
        self.expansion
    }

    /// Channel width inside each level's expanded stage.
    pub fn internal_widths(&self) -> [usize; LEVELS] {
        std::array::from_fn(|i| self.levels[i].expand.out_channels)
    }

    pub fn project<T: Scalar>(&self, tape: &mut Tape<'_, T>, other: &[Var; LEVELS]) -> Result<[Var; LEVELS]> {
        let mut out = *other;
        for (i, l) in self.levels.iter().enumerate() {
            tape.value(other[i])
                .ensure_shape(&self.shapes[i], &format!("amplifier input level {}", i + 1))?;
            let h = l.expand.forward(tape, other[i]);
            let h = tape.relu(h);
            let h = l.mix.forward(tape, h);
            let h = tape.relu(h);
            out[i] = l.compress.forward(tape, h);
        }
        Ok(out)
    }
}

/// Per-level `(w1, w2)` pairs: `w1` weighs the decoder output, `w2` the
/// mapped other-modality features.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub levels: [ParamId; LEVELS],
}

pub const FUSION_WEIGHT_INIT: f64 = 1.0;

impl FusionWeights {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str) -> Self {
        FusionWeights {
            levels: std::array::from_fn(|i| {
                b.add(
                    format!("{prefix}.level{}", i + 1),
                    Tensor::full(&[2], T::from_f64_lossy(FUSION_WEIGHT_INIT)),
                )
            }),
        }
    }

    pub fn values<T: Scalar>(&self, store: &ParamStore<T>) -> [[T; 2]; LEVELS] {
        std::array::from_fn(|i| {
            let d = store.value(self.levels[i]).data();
            [d[0], d[1]]
        })
    }

    pub fn amplify<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        decoded: &[Var; LEVELS],
        mapped: &[Var; LEVELS],
    ) -> Result<[Var; LEVELS]> {
        let mut out = *decoded;
        for i in 0..LEVELS {
            let (a, b) = (tape.value(decoded[i]), tape.value(mapped[i]));
            b.ensure_shape(a.shape(), &format!("amplifier fusion level {}", i + 1))?;
            let w = tape.param(self.levels[i]);
            out[i] = tape.mix(decoded[i], mapped[i], w);
        }
        Ok(out)
    }
}

/// Softmax-weighted fusion on plain values:
/// `(e^w1 * decoded + e^w2 * mapped) / (e^w1 + e^w2)` per level.
pub fn amplify<T: Scalar>(
    decoded: &FeaturePyramid<T>,
    mapped: &FeaturePyramid<T>,
    weights: &[[T; 2]; LEVELS],
) -> Result<FeaturePyramid<T>> {
    decoded.check_same_shape(mapped, "amplify")?;
    let levels = std::array::from_fn(|i| {
        let w = Tensor::from_vec(&[2], weights[i].to_vec()).expect("two weights");
        let (ca, cb) = mix_coefficients(&w);
        let (a, b) = (&decoded.levels[i], &mapped.levels[i]);
        Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect(),
        )
        .expect("same shape")
    });
    Ok(FeaturePyramid::new(levels))
}
