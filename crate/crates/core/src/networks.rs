//! Frozen teacher encoders and the trainable student decoder.
//!
//! Two backbone profiles are provided: `full`, a WideResNet-50-2 trunk
//! truncated after its third stage (weights loaded from a safetensors file
//! using torchvision parameter names), and `toy`, three strided residual
//! stages with seeded random weights that needs no download.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Result, TrdError};
use crate::kernels::{self, ConvGeom};
use crate::nn::{Builder, Init, ResBlock, UpBlock};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::weights::Archive;

/// Number of feature levels every network emits.
pub const LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// WideResNet-50-2 stem + layer1..layer3.
    WideResnet50,
    /// Stem + three strided residual stages.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightSource {
    PretrainedFile { path: PathBuf },
    SeededRandom { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneProfile {
    pub name: String,
    pub architecture: Architecture,
    pub channels: [usize; LEVELS],
    /// Channel width of the bottleneck embedding fed to the decoder.
    pub bottleneck_channels: usize,
    pub input_size: usize,
    pub weight_source: WeightSource,
}

impl BackboneProfile {
    pub fn toy(seed: u64) -> Self {
        BackboneProfile {
            name: "toy".into(),
            architecture: Architecture::Toy,
            channels: [16, 32, 64],
            bottleneck_channels: 64,
            input_size: 64,
            weight_source: WeightSource::SeededRandom { seed },
        }
    }

    pub fn full(weights: impl Into<PathBuf>) -> Self {
        BackboneProfile {
            name: "full".into(),
            architecture: Architecture::WideResnet50,
            channels: [256, 512, 1024],
            bottleneck_channels: 2048,
            input_size: 256,
            weight_source: WeightSource::PretrainedFile { path: weights.into() },
        }
    }

    /// WideResNet geometry with random weights; for shape checks without a download.
    pub fn full_random(seed: u64) -> Self {
        BackboneProfile {
            weight_source: WeightSource::SeededRandom { seed },
            ..Self::full(PathBuf::new())
        }
    }

    /// Toy architecture with caller-chosen widths and input size.
    pub fn custom_toy(channels: [usize; LEVELS], bottleneck_channels: usize, input_size: usize, seed: u64) -> Self {
        BackboneProfile {
            name: "toy".into(),
            architecture: Architecture::Toy,
            channels,
            bottleneck_channels,
            input_size,
            weight_source: WeightSource::SeededRandom { seed },
        }
    }

    pub fn by_name(name: &str, seed: u64, weights: Option<&Path>) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy(seed)),
            "full" => Ok(match weights {
                Some(p) => Self::full(p),
                None => Self::full_random(seed),
            }),
            other => Err(TrdError::Config(format!("unknown backbone profile '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if !(c[0] > 0 && c[0] < c[1] && c[1] < c[2]) {
            return Err(TrdError::Config(format!("channel counts must be strictly increasing, got {c:?}")));
        }
        if self.bottleneck_channels == 0 {
            return Err(TrdError::Config("bottleneck channel count must be positive".into()));
        }
        if self.input_size < 32 || self.input_size % 32 != 0 {
            return Err(TrdError::Config(format!(
                "input size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.architecture == Architecture::WideResnet50 && c != [256, 512, 1024] {
            return Err(TrdError::Config(format!(
                "WideResNet-50 emits channels (256, 512, 1024), profile declares {c:?}"
            )));
        }
        Ok(())
    }

    /// Spatial extent of level `i` (0-based).
    pub fn level_size(&self, i: usize) -> usize {
        self.input_size >> (i + 2)
    }

    pub fn level_shape(&self, i: usize) -> [usize; 3] {
        let s = self.level_size(i);
        [self.channels[i], s, s]
    }

    pub fn embedding_shape(&self) -> [usize; 3] {
        let s = self.input_size / 32;
        [self.bottleneck_channels, s, s]
    }

    /// Bottleneck size used by the crossmodal filter unless configured otherwise.
    pub fn default_filter_bottleneck(&self) -> usize {
        match self.architecture {
            Architecture::WideResnet50 => 8,
            Architecture::Toy => self.level_size(LEVELS - 1),
        }
    }

    pub fn same_geometry(&self, other: &BackboneProfile) -> bool {
        self.name == other.name
            && self.architecture == other.architecture
            && self.channels == other.channels
            && self.bottleneck_channels == other.bottleneck_channels
            && self.input_size == other.input_size
    }
}

/// A `3 x S x S` input image with values in `[0, 1]`; the encoder applies
/// the backbone's own channel normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T>(Tensor<T>);

impl<T: Scalar> ImageTensor<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] || s[1] == 0 {
            return Err(TrdError::Dimension(format!("image must be 3 x S x S, got {s:?}")));
        }
        if !t.all_finite() {
            return Err(TrdError::Input("image contains non-finite values".into()));
        }
        Ok(ImageTensor(t))
    }

    pub fn size(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Three feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: [Tensor<T>; LEVELS],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(levels: [Tensor<T>; LEVELS]) -> Self {
        FeaturePyramid { levels }
    }

    pub fn shapes(&self) -> [Vec<usize>; LEVELS] {
        std::array::from_fn(|i| self.levels[i].shape().to_vec())
    }

    pub fn check_profile(&self, profile: &BackboneProfile, what: &str) -> Result<()> {
        for (i, l) in self.levels.iter().enumerate() {
            l.ensure_shape(&profile.level_shape(i), &format!("{what} level {}", i + 1))?;
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &FeaturePyramid<T>, what: &str) -> Result<()> {
        for i in 0..LEVELS {
            other.levels[i].ensure_shape(self.levels[i].shape(), &format!("{what} level {}", i + 1))?;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        FeaturePyramid {
            levels: std::array::from_fn(|i| f(&self.levels[i])),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> FeaturePyramid<U> {
        FeaturePyramid {
            levels: std::array::from_fn(|i| self.levels[i].cast()),
        }
    }

    /// Place every level on the tape as a constant.
    pub fn to_tape(&self, tape: &mut Tape<'_, T>) -> [Var; LEVELS] {
        std::array::from_fn(|i| tape.constant(self.levels[i].clone()))
    }

    pub fn from_tape(tape: &Tape<'_, T>, vars: &[Var; LEVELS]) -> Self {
        FeaturePyramid {
            levels: std::array::from_fn(|i| tape.value(vars[i]).clone()),
        }
    }
}

/// Compressed joint representation consumed by the student decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckEmbedding<T>(pub Tensor<T>);

#[derive(Clone, Debug)]
struct FrozenConv<T> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    geom: ConvGeom,
}

impl<T: Scalar> FrozenConv<T> {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        kernels::conv2d(x, &self.weight, self.bias.as_ref(), self.geom)
    }
}

#[derive(Clone, Debug)]
struct Affine<T> {
    scale: Vec<T>,
    shift: Vec<T>,
}

impl<T: Scalar> Affine<T> {
    fn identity(c: usize) -> Self {
        Affine {
            scale: vec![T::one(); c],
            shift: vec![T::zero(); c],
        }
    }

    fn with_scale(c: usize, s: f64) -> Self {
        Affine {
            scale: vec![lit(s); c],
            shift: vec![T::zero(); c],
        }
    }
}

#[derive(Clone, Debug)]
struct ToyStage<T> {
    down: FrozenConv<T>,
    conv: FrozenConv<T>,
    skip: FrozenConv<T>,
}

#[derive(Clone, Debug)]
struct ToyEncoder<T> {
    stem: FrozenConv<T>,
    stages: Vec<ToyStage<T>>,
}

impl<T: Scalar> ToyEncoder<T> {
    fn build(profile: &BackboneProfile, seed: u64) -> Self {
        let init = Init { seed };
        let conv = |name: &str, cin: usize, cout: usize, g: ConvGeom, gain: f64| {
            let k = g.kernel;
            let mut w: Tensor<T> = init.he_normal(name, &[cout, cin, k, k], cin * k * k);
            if gain != 1.0 {
                w = w.scale(lit(gain));
            }
            let b: Tensor<T> = init.normal(&format!("{name}.bias"), &[cout], 0.05);
            FrozenConv {
                weight: w,
                bias: Some(b),
                geom: g,
            }
        };
        let c = profile.channels;
        let stem = conv("stem", 3, c[0], ConvGeom::new(3, 2, 1), 1.0);
        let mut cin = c[0];
        let stages = (0..LEVELS)
            .map(|i| {
                let s = ToyStage {
                    down: conv(&format!("stage{i}.down"), cin, c[i], ConvGeom::new(3, 2, 1), 1.0),
                    conv: conv(&format!("stage{i}.conv"), c[i], c[i], ConvGeom::new(3, 1, 1), 0.5),
                    skip: conv(&format!("stage{i}.skip"), cin, c[i], ConvGeom::new(1, 2, 0), 1.0),
                };
                cin = c[i];
                s
            })
            .collect();
        ToyEncoder { stem, stages }
    }

    fn forward(&self, x: &Tensor<T>) -> [Tensor<T>; LEVELS] {
        let mut h = self.stem.apply(x);
        kernels::relu_inplace(&mut h);
        let mut outs = Vec::with_capacity(LEVELS);
        for s in &self.stages {
            let mut a = s.down.apply(&h);
            kernels::relu_inplace(&mut a);
            let mut y = s.conv.apply(&a);
            y.add_assign(&s.skip.apply(&h));
            kernels::relu_inplace(&mut y);
            outs.push(y.clone());
            h = y;
        }
        outs.try_into().expect("three stages")
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.stem.weight];
        v.extend(self.stem.bias.as_ref());
        for s in &self.stages {
            for c in [&s.down, &s.conv, &s.skip] {
                v.push(&c.weight);
                v.extend(c.bias.as_ref());
            }
        }
        v
    }
}

#[derive(Clone, Debug)]
struct Bottleneck<T> {
    conv1: FrozenConv<T>,
    bn1: Affine<T>,
    conv2: FrozenConv<T>,
    bn2: Affine<T>,
    conv3: FrozenConv<T>,
    bn3: Affine<T>,
    downsample: Option<(FrozenConv<T>, Affine<T>)>,
}

impl<T: Scalar> Bottleneck<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.conv1.apply(x);
        kernels::channel_affine(&mut y, &self.bn1.scale, &self.bn1.shift);
        kernels::relu_inplace(&mut y);
        let mut y2 = self.conv2.apply(&y);
        kernels::channel_affine(&mut y2, &self.bn2.scale, &self.bn2.shift);
        kernels::relu_inplace(&mut y2);
        let mut y3 = self.conv3.apply(&y2);
        kernels::channel_affine(&mut y3, &self.bn3.scale, &self.bn3.shift);
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let mut s = conv.apply(x);
                kernels::channel_affine(&mut s, &bn.scale, &bn.shift);
                s
            }
            None => x.clone(),
        };
        y3.add_assign(&skip);
        kernels::relu_inplace(&mut y3);
        y3
    }
}

/// (planes, blocks, stride) of layer1..layer3.
const WIDE_LAYERS: [(usize, usize, usize); LEVELS] = [(64, 3, 1), (128, 4, 2), (256, 6, 2)];
const WIDE_FACTOR: usize = 2;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct WideResnet<T> {
    conv1: FrozenConv<T>,
    bn1: Affine<T>,
    layers: Vec<Vec<Bottleneck<T>>>,
}

/// Source of frozen WideResNet tensors.
trait WideSource<T> {
    fn conv(&mut self, name: &str, shape: [usize; 4]) -> Result<Tensor<T>>;
    fn bn(&mut self, name: &str, c: usize, last_in_block: bool) -> Result<Affine<T>>;
}

struct RandomWide {
    init: Init,
}

impl<T: Scalar> WideSource<T> for RandomWide {
    fn conv(&mut self, name: &str, shape: [usize; 4]) -> Result<Tensor<T>> {
        Ok(self.init.he_normal(name, &shape, shape[1] * shape[2] * shape[3]))
    }

    fn bn(&mut self, _name: &str, c: usize, last_in_block: bool) -> Result<Affine<T>> {
        Ok(if last_in_block {
            Affine::with_scale(c, 0.5)
        } else {
            Affine::identity(c)
        })
    }
}

struct FileWide<'a> {
    archive: &'a Archive,
    path: &'a Path,
}

impl FileWide<'_> {
    fn get<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let err = |reason: String| TrdError::WeightLoad {
            path: self.path.to_path_buf(),
            reason,
        };
        let t: Tensor<T> = self.archive.tensor(name).map_err(|e| err(e.to_string()))?;
        if t.shape() != shape {
            return Err(err(format!("{name}: expected shape {shape:?}, found {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(err(format!("{name}: non-finite values")));
        }
        Ok(t)
    }
}

impl<T: Scalar> WideSource<T> for FileWide<'_> {
    fn conv(&mut self, name: &str, shape: [usize; 4]) -> Result<Tensor<T>> {
        self.get(&format!("{name}.weight"), &shape)
    }

    fn bn(&mut self, name: &str, c: usize, _last: bool) -> Result<Affine<T>> {
        let gamma: Tensor<T> = self.get(&format!("{name}.weight"), &[c])?;
        let beta: Tensor<T> = self.get(&format!("{name}.bias"), &[c])?;
        let mean: Tensor<T> = self.get(&format!("{name}.running_mean"), &[c])?;
        let var: Tensor<T> = self.get(&format!("{name}.running_var"), &[c])?;
        let eps = lit::<T>(BN_EPS);
        let scale: Vec<T> = gamma
            .data()
            .iter()
            .zip(var.data())
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift = beta
            .data()
            .iter()
            .zip(mean.data())
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        Ok(Affine { scale, shift })
    }
}

impl<T: Scalar> WideResnet<T> {
    fn build(src: &mut dyn WideSource<T>) -> Result<Self> {
        let conv = |w: Tensor<T>, g: ConvGeom| FrozenConv {
            weight: w,
            bias: None,
            geom: g,
        };
        let conv1 = conv(src.conv("conv1", [64, 3, 7, 7])?, ConvGeom::new(7, 2, 3));
        let bn1 = src.bn("bn1", 64, false)?;
        let mut inplanes = 64;
        let mut layers = Vec::new();
        for (li, &(planes, blocks, stride)) in WIDE_LAYERS.iter().enumerate() {
            let width = planes * WIDE_FACTOR;
            let out = planes * 4;
            let mut layer = Vec::new();
            for bi in 0..blocks {
                let p = format!("layer{}.{}", li + 1, bi);
                let s = if bi == 0 { stride } else { 1 };
                let cin = if bi == 0 { inplanes } else { out };
                let downsample = if bi == 0 {
                    Some((
                        conv(src.conv(&format!("{p}.downsample.0"), [out, cin, 1, 1])?, ConvGeom::new(1, s, 0)),
                        src.bn(&format!("{p}.downsample.1"), out, false)?,
                    ))
                } else {
                    None
                };
                layer.push(Bottleneck {
                    conv1: conv(src.conv(&format!("{p}.conv1"), [width, cin, 1, 1])?, ConvGeom::new(1, 1, 0)),
                    bn1: src.bn(&format!("{p}.bn1"), width, false)?,
                    conv2: conv(src.conv(&format!("{p}.conv2"), [width, width, 3, 3])?, ConvGeom::new(3, s, 1)),
                    bn2: src.bn(&format!("{p}.bn2"), width, false)?,
                    conv3: conv(src.conv(&format!("{p}.conv3"), [out, width, 1, 1])?, ConvGeom::new(1, 1, 0)),
                    bn3: src.bn(&format!("{p}.bn3"), out, true)?,
                    downsample,
                });
            }
            inplanes = out;
            layers.push(layer);
        }
        Ok(WideResnet { conv1, bn1, layers })
    }

    fn forward(&self, x: &Tensor<T>) -> [Tensor<T>; LEVELS] {
        let mut h = self.conv1.apply(x);
        kernels::channel_affine(&mut h, &self.bn1.scale, &self.bn1.shift);
        kernels::relu_inplace(&mut h);
        let mut h = kernels::max_pool_3x3_s2(&h);
        let mut outs = Vec::with_capacity(LEVELS);
        for layer in &self.layers {
            for block in layer {
                h = block.forward(&h);
            }
            outs.push(h.clone());
        }
        outs.try_into().expect("three layers")
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.conv1.weight];
        for layer in &self.layers {
            for b in layer {
                v.extend([&b.conv1.weight, &b.conv2.weight, &b.conv3.weight]);
                if let Some((c, _)) = &b.downsample {
                    v.push(&c.weight);
                }
            }
        }
        v
    }

    fn affines(&self) -> Vec<&Affine<T>> {
        let mut v = vec![&self.bn1];
        for layer in &self.layers {
            for b in layer {
                v.extend([&b.bn1, &b.bn2, &b.bn3]);
                if let Some((_, bn)) = &b.downsample {
                    v.push(bn);
                }
            }
        }
        v
    }
}

#[derive(Clone, Debug)]
enum Trunk<T> {
    Toy(ToyEncoder<T>),
    Wide(Box<WideResnet<T>>),
}

/// Frozen hierarchical encoder shared by both modality branches.
///
/// It owns plain tensors rather than tape parameters, so no optimizer can
/// ever reach its weights.
#[derive(Clone, Debug)]
pub struct TeacherEncoder<T> {
    profile: BackboneProfile,
    trunk: Trunk<T>,
    mean: [f64; 3],
    std: [f64; 3],
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub fn build_teacher<T: Scalar>(profile: &BackboneProfile) -> Result<TeacherEncoder<T>> {
    profile.validate()?;
    let trunk = match (&profile.architecture, &profile.weight_source) {
        (Architecture::Toy, WeightSource::SeededRandom { seed }) => Trunk::Toy(ToyEncoder::build(profile, *seed)),
        (Architecture::Toy, WeightSource::PretrainedFile { .. }) => {
            return Err(TrdError::Config("the toy backbone has no pretrained weights".into()))
        }
        (Architecture::WideResnet50, WeightSource::SeededRandom { seed }) => Trunk::Wide(Box::new(
            WideResnet::build(&mut RandomWide { init: Init { seed: *seed } })?,
        )),
        (Architecture::WideResnet50, WeightSource::PretrainedFile { path }) => {
            if !path.exists() {
                return Err(TrdError::WeightLoad {
                    path: path.clone(),
                    reason: "file not found".into(),
                });
            }
            let archive = Archive::read(path)?;
            Trunk::Wide(Box::new(WideResnet::build(&mut FileWide { archive: &archive, path })?))
        }
    };
    let (mean, std) = match profile.architecture {
        Architecture::Toy => ([0.5; 3], [0.5; 3]),
        Architecture::WideResnet50 => (IMAGENET_MEAN, IMAGENET_STD),
    };
    Ok(TeacherEncoder {
        profile: profile.clone(),
        trunk,
        mean,
        std,
    })
}

impl<T: Scalar> TeacherEncoder<T> {
    pub fn profile(&self) -> &BackboneProfile {
        &self.profile
    }

    pub fn encode(&self, img: &ImageTensor<T>) -> Result<FeaturePyramid<T>> {
        let s = self.profile.input_size;
        img.tensor().ensure_shape(&[3, s, s], "encoder input")?;
        let mut x = img.tensor().clone();
        let plane = s * s;
        for (c, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
            let (m, sd) = (lit::<T>(self.mean[c]), lit::<T>(self.std[c]));
            for v in chunk {
                *v = (*v - m) / sd;
            }
        }
        let levels = match &self.trunk {
            Trunk::Toy(e) => e.forward(&x),
            Trunk::Wide(e) => e.forward(&x),
        };
        Ok(FeaturePyramid::new(levels))
    }

    pub fn num_parameters(&self) -> usize {
        match &self.trunk {
            Trunk::Toy(e) => e.tensors().iter().map(|t| t.len()).sum(),
            Trunk::Wide(e) => {
                e.tensors().iter().map(|t| t.len()).sum::<usize>()
                    + e.affines().iter().map(|a| a.scale.len() * 2).sum::<usize>()
            }
        }
    }

    /// SHA-256 over every frozen value, in a fixed order.
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        match &self.trunk {
            Trunk::Toy(e) => {
                for t in e.tensors() {
                    h.update(t.to_le_bytes());
                }
            }
            Trunk::Wide(e) => {
                for t in e.tensors() {
                    h.update(t.to_le_bytes());
                }
                for a in e.affines() {
                    for v in a.scale.iter().chain(&a.shift) {
                        let mut buf = Vec::new();
                        v.write_le(&mut buf);
                        h.update(buf);
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }
}

impl fmt::Display for BackboneProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({:?}, channels {:?}, input {}px)",
            self.name, self.architecture, self.channels, self.input_size
        )
    }
}

/// Mirror of the encoder: upsample by two and refine, deepest level first.
#[derive(Clone, Debug)]
pub struct StudentDecoder {
    ups: Vec<UpBlock>,
    blocks: Vec<ResBlock>,
    embedding_shape: [usize; 3],
}

pub fn build_student<T: Scalar>(profile: &BackboneProfile, b: &mut Builder<'_, T>, prefix: &str) -> Result<StudentDecoder> {
    profile.validate()?;
    let c = profile.channels;
    let mut ups = Vec::new();
    let mut blocks = Vec::new();
    let mut cin = profile.bottleneck_channels;
    for i in (0..LEVELS).rev() {
        ups.push(UpBlock::new(b, &format!("{prefix}.level{}.up", i + 1), cin, c[i]));
        blocks.push(ResBlock::new(b, &format!("{prefix}.level{}.refine", i + 1), c[i], c[i]));
        cin = c[i];
    }
    Ok(StudentDecoder {
        ups,
        blocks,
        embedding_shape: profile.embedding_shape(),
    })
}

impl StudentDecoder {
    pub fn embedding_shape(&self) -> [usize; 3] {
        self.embedding_shape
    }

    /// Decode an embedding into a pyramid (finest level first).
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<'_, T>, emb: Var) -> Result<[Var; LEVELS]> {
        tape.value(emb).ensure_shape(&self.embedding_shape, "decoder embedding")?;
        let mut h = emb;
        let mut outs = [emb; LEVELS];
        for (step, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            let x = up.forward(tape, h);
            let y = block.forward(tape, x);
            outs[LEVELS - 1 - step] = y;
            h = tape.relu(y);
        }
        Ok(outs)
    }
}
