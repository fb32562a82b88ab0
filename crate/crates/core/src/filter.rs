//! Crossmodal filter: a spatial compress-and-restore projection of the other
//! modality's features, and the widened one-class bottleneck that fuses them
//! with this modality's features into the decoder input.

use crate::autograd::{Tape, Var};
use crate::error::{Result, TrdError};
use crate::kernels::ConvGeom;
use crate::networks::{BackboneProfile, LEVELS};
use crate::nn::{Builder, Conv2d, ConvBlock, ResBlock, UpBlock};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
struct ProjectionLevel {
    down: Vec<ConvBlock>,
    mid: ConvBlock,
    up: Vec<UpBlock>,
    out: Conv2d,
}

/// Per-level projection squeezing each map to `bottleneck x bottleneck`
/// before restoring its original size.
#[derive(Clone, Debug)]
pub struct BottleneckProjection {
    levels: Vec<ProjectionLevel>,
    bottleneck: usize,
    shapes: [[usize; 3]; LEVELS],
}

impl BottleneckProjection {
    pub fn new<T: Scalar>(
        profile: &BackboneProfile,
        bottleneck: usize,
        b: &mut Builder<'_, T>,
        prefix: &str,
    ) -> Result<Self> {
        if bottleneck == 0 {
            return Err(TrdError::Config("bottleneck size must be positive".into()));
        }
        let mut levels = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let [c, s, _] = profile.level_shape(i);
            if s < bottleneck {
                return Err(TrdError::Config(format!(
                    "level {} is {s}x{s}, smaller than the {bottleneck}x{bottleneck} bottleneck",
                    i + 1
                )));
            }
            let ratio = s / bottleneck;
            if s % bottleneck != 0 || !ratio.is_power_of_two() {
                return Err(TrdError::Config(format!(
                    "level {} size {s} is not a power-of-two multiple of bottleneck size {bottleneck}",
                    i + 1
                )));
            }
            let steps = ratio.trailing_zeros() as usize;
            let name = format!("{prefix}.level{}", i + 1);
            levels.push(ProjectionLevel {
                down: (0..steps)
                    .map(|k| ConvBlock::new(b, &format!("{name}.down{k}"), c, c, ConvGeom::new(3, 2, 1)))
                    .collect(),
                mid: ConvBlock::new(b, &format!("{name}.mid"), c, c, ConvGeom::new(3, 1, 1)),
                up: (0..steps).map(|k| UpBlock::new(b, &format!("{name}.up{k}"), c, c)).collect(),
                out: Conv2d::new(b, &format!("{name}.out"), c, c, ConvGeom::new(1, 1, 0)),
            });
        }
        Ok(BottleneckProjection {
            levels,
            bottleneck,
            shapes: std::array::from_fn(|i| profile.level_shape(i)),
        })
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    /// Project one level, also returning the bottleneck activation.
    pub fn project_level<T: Scalar>(&self, tape: &mut Tape<'_, T>, level: usize, x: Var) -> Result<(Var, Var)> {
        tape.value(x).ensure_shape(&self.shapes[level], &format!("projection input level {}", level + 1))?;
        let l = &self.levels[level];
        let mut h = x;
        for d in &l.down {
            h = d.forward(tape, h);
        }
        let mid = l.mid.forward(tape, h);
        let mut h = mid;
        for u in &l.up {
            h = u.forward(tape, h);
        }
        Ok((l.out.forward(tape, h), mid))
    }

    pub fn project<T: Scalar>(&self, tape: &mut Tape<'_, T>, other: &[Var; LEVELS]) -> Result<[Var; LEVELS]> {
        let mut out = *other;
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = self.project_level(tape, i, other[i])?.0;
        }
        Ok(out)
    }
}

/// One-class bottleneck accepting this modality's features, optionally
/// concatenated channel-wise with the projected other-modality features.
#[derive(Clone, Debug)]
pub struct ModifiedOcbe {
    chains: Vec<Vec<ConvBlock>>,
    fuse: ResBlock,
    fused_inputs: bool,
    shapes: [[usize; 3]; LEVELS],
}

impl ModifiedOcbe {
    /// `fused_inputs = false` builds the standard-width bottleneck that sees
    /// only this modality.
    pub fn new<T: Scalar>(profile: &BackboneProfile, fused_inputs: bool, b: &mut Builder<'_, T>, prefix: &str) -> Self {
        let mult = if fused_inputs { 2 } else { 1 };
        let mut chains = Vec::with_capacity(LEVELS);
        let mut total = 0;
        for i in 0..LEVELS {
            let width = profile.channels[i] * mult;
            total += width;
            // level i needs (LEVELS - i) halvings to reach the embedding size
            chains.push(
                (0..LEVELS - i)
                    .map(|k| {
                        ConvBlock::new(
                            b,
                            &format!("{prefix}.level{}.down{k}", i + 1),
                            width,
                            width,
                            ConvGeom::new(3, 2, 1),
                        )
                    })
                    .collect(),
            );
        }
        let fuse = ResBlock::new(b, &format!("{prefix}.fuse"), total, profile.bottleneck_channels);
        ModifiedOcbe {
            chains,
            fuse,
            fused_inputs,
            shapes: std::array::from_fn(|i| profile.level_shape(i)),
        }
    }

    pub fn fused_inputs(&self) -> bool {
        self.fused_inputs
    }

    pub fn fuse<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        own: &[Var; LEVELS],
        projected: Option<&[Var; LEVELS]>,
    ) -> Result<Var> {
        match (self.fused_inputs, projected.is_some()) {
            (true, false) => return Err(TrdError::Input("fused bottleneck needs projected features".into())),
            (false, true) => return Err(TrdError::Input("standard bottleneck takes no projected features".into())),
            _ => {}
        }
        let mut reduced = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let what = format!("bottleneck input level {}", i + 1);
            tape.value(own[i]).ensure_shape(&self.shapes[i], &what)?;
            let mut h = match projected {
                Some(p) => {
                    tape.value(p[i]).ensure_shape(&self.shapes[i], &what)?;
                    tape.concat(&[own[i], p[i]])
                }
                None => own[i],
            };
            for block in &self.chains[i] {
                h = block.forward(tape, h);
            }
            reduced.push(h);
        }
        let cat = tape.concat(&reduced);
        let y = self.fuse.forward(tape, cat);
        Ok(tape.relu(y))
    }
}
