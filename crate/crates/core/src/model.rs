//! The dual-branch network: one frozen teacher shared by the 2D and 3D
//! branches, and per branch a student decoder, crossmodal filter and
//! crossmodal amplifier.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amplifier::{FusionWeights, InvertedBottleneckProjection};
use crate::autograd::{Tape, Var};
use crate::datasets::MultimodalSample;
use crate::error::{Result, TrdError};
use crate::filter::{BottleneckProjection, ModifiedOcbe};
use crate::networks::{build_student, build_teacher, BackboneProfile, FeaturePyramid, StudentDecoder, TeacherEncoder, LEVELS};
use crate::nn::{Builder, Init, ParamGroup, ParamStore};
use crate::objectives::{pyramid_loss_on_tape, BranchLosses, LossBreakdown};
use crate::scalar::Scalar;
use crate::scoring::CalibrationStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::TwoD, Modality::ThreeD];

    pub fn index(self) -> usize {
        match self {
            Modality::TwoD => 0,
            Modality::ThreeD => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::TwoD => Modality::ThreeD,
            Modality::ThreeD => Modality::TwoD,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::TwoD => "2d",
            Modality::ThreeD => "3d",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub enabled: bool,
    pub bottleneck_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmplifierConfig {
    pub enabled: bool,
    pub expansion: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: BackboneProfile,
    pub filter: FilterConfig,
    pub amplifier: AmplifierConfig,
    /// Seed for the trainable parameters.
    pub init_seed: u64,
}

impl ModelConfig {
    /// Defaults for a profile: filter bottleneck at the profile's default
    /// size, two-fold amplifier expansion, both tuners on.
    pub fn for_profile(profile: BackboneProfile, init_seed: u64) -> Self {
        let bottleneck_size = profile.default_filter_bottleneck();
        ModelConfig {
            profile,
            filter: FilterConfig {
                enabled: true,
                bottleneck_size,
            },
            amplifier: AmplifierConfig {
                enabled: true,
                expansion: 2,
            },
            init_seed,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub decoder: StudentDecoder,
    pub ocbe: ModifiedOcbe,
    pub projection: Option<BottleneckProjection>,
    pub mapping: Option<InvertedBottleneckProjection>,
    pub fusion: Option<FusionWeights>,
}

/// Gradient routing applied while recording a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Routing {
    /// Treat the decoder output as a constant inside the amplifier fusion,
    /// so the output-consistency loss reaches only the mapping and weights.
    pub block_output_to_decoder: bool,
}

impl Default for Routing {
    fn default() -> Self {
        Routing {
            block_output_to_decoder: true,
        }
    }
}

/// Tape handles for one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub encoded_own: [Var; LEVELS],
    pub encoded_other: [Var; LEVELS],
    pub projected: Option<[Var; LEVELS]>,
    pub embedding: Var,
    pub decoded: [Var; LEVELS],
    pub mapped: Option<[Var; LEVELS]>,
    pub amplified: [Var; LEVELS],
}

/// Every intermediate pyramid of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs<T> {
    pub encoded_own: FeaturePyramid<T>,
    pub encoded_other: FeaturePyramid<T>,
    /// Other modality projected through the filter; absent when the filter is off.
    pub projected: Option<FeaturePyramid<T>>,
    pub decoded: FeaturePyramid<T>,
    /// Other modality mapped through the amplifier; absent when the amplifier is off.
    pub mapped: Option<FeaturePyramid<T>>,
    /// Amplified decoder output (equal to `decoded` when the amplifier is off).
    pub amplified: FeaturePyramid<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrdOutputs<T> {
    pub branch_2d: BranchOutputs<T>,
    pub branch_3d: BranchOutputs<T>,
}

impl<T> TrdOutputs<T> {
    pub fn branch(&self, m: Modality) -> &BranchOutputs<T> {
        match m {
            Modality::TwoD => &self.branch_2d,
            Modality::ThreeD => &self.branch_3d,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrdModel<T> {
    config: ModelConfig,
    teacher: Arc<TeacherEncoder<T>>,
    params: ParamStore<T>,
    branches: [Branch; 2],
    pub calibration: Option<CalibrationStats>,
}

fn branch_prefix(m: Modality) -> String {
    format!("branch_{}", m.tag())
}

impl<T: Scalar> TrdModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let teacher = Arc::new(build_teacher(&config.profile)?);
        Self::with_teacher(config, teacher)
    }

    /// Build trainable modules around an existing teacher.
    pub fn with_teacher(config: ModelConfig, teacher: Arc<TeacherEncoder<T>>) -> Result<Self> {
        let profile = &config.profile;
        profile.validate()?;
        if !teacher.profile().same_geometry(profile) {
            return Err(TrdError::Config(format!(
                "teacher profile {} does not match model profile {}",
                teacher.profile(),
                profile
            )));
        }
        if ![1, 2, 4].contains(&config.amplifier.expansion) {
            return Err(TrdError::Config(format!(
                "amplifier expansion must be 1, 2 or 4, got {}",
                config.amplifier.expansion
            )));
        }
        let mut params = ParamStore::new();
        let init = Init { seed: config.init_seed };
        let mut build_branch = |m: Modality| -> Result<Branch> {
            let p = branch_prefix(m);
            let branch = m.index();
            let mut distill = Builder {
                store: &mut params,
                init,
                group: ParamGroup::Distill,
                branch,
            };
            let decoder = build_student(profile, &mut distill, &format!("{p}.decoder"))?;
            let ocbe = ModifiedOcbe::new(profile, config.filter.enabled, &mut distill, &format!("{p}.ocbe"));
            let projection = if config.filter.enabled {
                let mut b = Builder {
                    store: &mut params,
                    init,
                    group: ParamGroup::Filter,
                    branch,
                };
                Some(BottleneckProjection::new(
                    profile,
                    config.filter.bottleneck_size,
                    &mut b,
                    &format!("{p}.projection"),
                )?)
            } else {
                None
            };
            let (mapping, fusion) = if config.amplifier.enabled {
                let mut b = Builder {
                    store: &mut params,
                    init,
                    group: ParamGroup::Amplifier,
                    branch,
                };
                let ibp = InvertedBottleneckProjection::new(
                    profile,
                    config.amplifier.expansion,
                    &mut b,
                    &format!("{p}.mapping"),
                )?;
                let fw = FusionWeights::new(&mut b, &format!("{p}.fusion"));
                (Some(ibp), Some(fw))
            } else {
                (None, None)
            };
            Ok(Branch {
                decoder,
                ocbe,
                projection,
                mapping,
                fusion,
            })
        };
        let b2 = build_branch(Modality::TwoD)?;
        let b3 = build_branch(Modality::ThreeD)?;
        Ok(TrdModel {
            config,
            teacher,
            params,
            branches: [b2, b3],
            calibration: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn profile(&self) -> &BackboneProfile {
        &self.config.profile
    }

    pub fn teacher(&self) -> &Arc<TeacherEncoder<T>> {
        &self.teacher
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn branch(&self, m: Modality) -> &Branch {
        &self.branches[m.index()]
    }

    /// Names of the trainable modules, for manifests.
    pub fn module_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in Modality::BOTH {
            let p = branch_prefix(m);
            let b = self.branch(m);
            names.push(format!("{p}.decoder"));
            names.push(format!("{p}.ocbe"));
            if b.projection.is_some() {
                names.push(format!("{p}.projection"));
            }
            if b.mapping.is_some() {
                names.push(format!("{p}.mapping"));
                names.push(format!("{p}.fusion"));
            }
        }
        names
    }

    /// One teacher pass per modality.
    pub fn encode_sample(&self, sample: &MultimodalSample<T>) -> Result<[FeaturePyramid<T>; 2]> {
        let size = self.profile().input_size;
        for (img, what) in [(&sample.image_2d, "2D"), (&sample.image_3d, "3D")] {
            if img.size() != size {
                return Err(TrdError::Input(format!(
                    "{what} image is {}px, profile expects {size}px",
                    img.size()
                )));
            }
        }
        Ok([self.teacher.encode(&sample.image_2d)?, self.teacher.encode(&sample.image_3d)?])
    }

    /// Record both branches on `tape` from precomputed teacher features.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<'_, T>,
        encoded: &[FeaturePyramid<T>; 2],
        routing: Routing,
    ) -> Result<[BranchVars; 2]> {
        for (e, m) in encoded.iter().zip(Modality::BOTH) {
            e.check_profile(self.profile(), &format!("{} teacher features", m.tag()))?;
        }
        let enc: [[Var; LEVELS]; 2] = [encoded[0].to_tape(tape), encoded[1].to_tape(tape)];
        let mut out = Vec::with_capacity(2);
        for m in Modality::BOTH {
            let b = self.branch(m);
            let own = enc[m.index()];
            let other = enc[m.other().index()];
            let projected = match &b.projection {
                Some(bp) => Some(bp.project(tape, &other)?),
                None => None,
            };
            // the projection is trained only by its alignment loss
            let projected_in = projected.map(|p| p.map(|v| tape.detach(v)));
            let embedding = b.ocbe.fuse(tape, &own, projected_in.as_ref())?;
            let decoded = b.decoder.decode(tape, embedding)?;
            let (mapped, amplified) = match (&b.mapping, &b.fusion) {
                (Some(ibp), Some(fw)) => {
                    let mapped = ibp.project(tape, &other)?;
                    let dec_in = if routing.block_output_to_decoder {
                        decoded.map(|v| tape.detach(v))
                    } else {
                        decoded
                    };
                    (Some(mapped), fw.amplify(tape, &dec_in, &mapped)?)
                }
                _ => (None, decoded),
            };
            out.push(BranchVars {
                encoded_own: own,
                encoded_other: other,
                projected,
                embedding,
                decoded,
                mapped,
                amplified,
            });
        }
        Ok(out.try_into().expect("two branches"))
    }

    /// Per-branch losses on the tape; returns the total and each branch's
    /// `(distill, filter, mapping, output)` terms.
    pub fn losses_on_tape(&self, tape: &mut Tape<'_, T>, vars: &[BranchVars; 2]) -> Result<(Var, [[Option<Var>; 4]; 2])> {
        let mut parts = Vec::new();
        let mut terms = [[None; 4]; 2];
        for (bi, v) in vars.iter().enumerate() {
            let d = pyramid_loss_on_tape(tape, &v.encoded_own, &v.decoded)?;
            parts.push(d);
            terms[bi][0] = Some(d);
            if let Some(p) = &v.projected {
                let cf = pyramid_loss_on_tape(tape, &v.encoded_own, p)?;
                parts.push(cf);
                terms[bi][1] = Some(cf);
            }
            if let Some(m) = &v.mapped {
                let ibp = pyramid_loss_on_tape(tape, &v.encoded_own, m)?;
                let output = pyramid_loss_on_tape(tape, &v.encoded_own, &v.amplified)?;
                parts.extend([ibp, output]);
                terms[bi][2] = Some(ibp);
                terms[bi][3] = Some(output);
            }
        }
        Ok((tape.sum(&parts), terms))
    }

    /// Read the loss terms recorded by [`Self::losses_on_tape`].
    pub fn loss_breakdown(tape: &Tape<'_, T>, terms: &[[Option<Var>; 4]; 2]) -> LossBreakdown {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).item().as_f64()).unwrap_or(0.0);
        let branch = |t: &[Option<Var>; 4]| BranchLosses::new(get(t[0]), get(t[1]), get(t[2]), get(t[3]));
        crate::objectives::loss_total(branch(&terms[0]), branch(&terms[1]))
    }

    pub fn forward_encoded(&self, encoded: &[FeaturePyramid<T>; 2]) -> Result<TrdOutputs<T>> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward_on_tape(&mut tape, encoded, Routing::default())?;
        let read = |v: &BranchVars| BranchOutputs {
            encoded_own: FeaturePyramid::from_tape(&tape, &v.encoded_own),
            encoded_other: FeaturePyramid::from_tape(&tape, &v.encoded_other),
            projected: v.projected.as_ref().map(|p| FeaturePyramid::from_tape(&tape, p)),
            decoded: FeaturePyramid::from_tape(&tape, &v.decoded),
            mapped: v.mapped.as_ref().map(|p| FeaturePyramid::from_tape(&tape, p)),
            amplified: FeaturePyramid::from_tape(&tape, &v.amplified),
        };
        Ok(TrdOutputs {
            branch_2d: read(&vars[0]),
            branch_3d: read(&vars[1]),
        })
    }

    pub fn forward(&self, sample: &MultimodalSample<T>) -> Result<TrdOutputs<T>> {
        let encoded = self.encode_sample(sample)?;
        self.forward_encoded(&encoded)
    }

    /// Total loss of one sample, evaluated without recording gradients.
    pub fn sample_losses(&self, encoded: &[FeaturePyramid<T>; 2]) -> Result<LossBreakdown> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward_on_tape(&mut tape, encoded, Routing::default())?;
        let (_, terms) = self.losses_on_tape(&mut tape, &vars)?;
        Ok(Self::loss_breakdown(&tape, &terms))
    }
}
