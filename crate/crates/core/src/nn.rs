//! Parameter storage and the small layer vocabulary the trainable modules
//! are assembled from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::kernels::ConvGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer a parameter belongs to. Every trainable parameter is in
/// exactly one group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Student decoder and the fused bottleneck; driven by the distillation loss.
    Distill,
    /// Bottleneck projection; driven by the filter alignment loss.
    Filter,
    /// Inverted bottleneck projection and fusion weights; driven by the amplifier loss.
    Amplifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Distill, ParamGroup::Filter, ParamGroup::Amplifier];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Distill => "distill",
            ParamGroup::Filter => "filter",
            ParamGroup::Amplifier => "amplifier",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    /// Index of the branch owning the parameter (0 = 2D, 1 = 3D).
    pub branch: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, name: String, value: Tensor<T>, group: ParamGroup, branch: usize) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            branch,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Ids of the parameters in `group` owned by `branch`.
    pub fn group_ids(&self, branch: usize, group: ParamGroup) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.entries[id.0].group == group && self.entries[id.0].branch == branch)
            .collect()
    }
}

/// Deterministic per-parameter initializer: each tensor's RNG is derived from
/// the model seed and the parameter name, so init does not depend on
/// construction order.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// He-normal weights for a layer with the given fan-in.
    pub fn he_normal<T: Scalar>(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        self.normal(name, shape, std)
    }

    pub fn normal<T: Scalar>(&self, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
        let mut rng = self.rng_for(name);
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
    }
}

/// Where new parameters are registered while a module is being built.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub init: Init,
    pub group: ParamGroup,
    pub branch: usize,
}

impl<T: Scalar> Builder<'_, T> {
    pub fn add(&mut self, name: String, value: Tensor<T>) -> ParamId {
        self.store.add(name, value, self.group, self.branch)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        let k = geom.kernel;
        let w = b.init.he_normal(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k);
        let weight = b.add(format!("{name}.weight"), w);
        let bias = Some(b.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d {
            weight,
            bias,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        let k = geom.kernel;
        // fan-in of each output location for a stride-k kernel of size k
        let fan_in = cin * (k / geom.stride).max(1).pow(2);
        let w = b.init.he_normal(&format!("{name}.weight"), &[cin, cout, k, k], fan_in);
        let weight = b.add(format!("{name}.weight"), w);
        let bias = Some(b.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvTranspose2d {
            weight,
            bias,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv_transpose2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Largest group count `<= 8` dividing `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        let gamma = b.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = b.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm {
            gamma,
            beta,
            groups: default_groups(channels),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.group_norm(x, g, b, self.groups)
    }
}

/// conv -> group norm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        ConvBlock {
            conv: Conv2d::new(b, &format!("{name}.conv"), cin, cout, geom),
            norm: GroupNorm::new(b, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(tape, x);
        let y = self.norm.forward(tape, y);
        tape.relu(y)
    }
}

/// Transposed conv -> group norm -> ReLU.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub deconv: ConvTranspose2d,
    pub norm: GroupNorm,
}

impl UpBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        UpBlock {
            deconv: ConvTranspose2d::new(b, &format!("{name}.deconv"), cin, cout, ConvGeom::new(2, 2, 0)),
            norm: GroupNorm::new(b, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let y = self.deconv.forward(tape, x);
        let y = self.norm.forward(tape, y);
        tape.relu(y)
    }
}

/// Residual block `x + N(conv(relu(N(conv(x)))))` with an optional 1x1
/// projection on the skip path; the output is left linear.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        let same = ConvGeom::new(3, 1, 1);
        ResBlock {
            conv1: Conv2d::new(b, &format!("{name}.conv1"), cin, cout, same),
            norm1: GroupNorm::new(b, &format!("{name}.norm1"), cout),
            conv2: Conv2d::new(b, &format!("{name}.conv2"), cout, cout, same),
            norm2: GroupNorm::new(b, &format!("{name}.norm2"), cout),
            skip: (cin != cout).then(|| Conv2d::new(b, &format!("{name}.skip"), cin, cout, ConvGeom::new(1, 1, 0))),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let y = self.conv1.forward(tape, x);
        let y = self.norm1.forward(tape, y);
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, y);
        let y = self.norm2.forward(tape, y);
        let s = match &self.skip {
            Some(p) => p.forward(tape, x),
            None => x,
        };
        tape.add(s, y)
    }
}
