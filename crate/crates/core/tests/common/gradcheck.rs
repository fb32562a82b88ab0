//! Central finite differences against the tape's analytic gradients, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trd_core::amplifier::{FusionWeights, InvertedBottleneckProjection};
use trd_core::autograd::{Tape, Var};
use trd_core::filter::{BottleneckProjection, ModifiedOcbe};
use trd_core::networks::{build_student, BackboneProfile, LEVELS};
use trd_core::nn::{Builder, Init, ParamGroup, ParamStore};
use trd_core::objectives::pyramid_loss_on_tape;
use trd_core::Tensor;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
const COORDS_PER_TENSOR: usize = 12;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn ok(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

/// Tiny geometry: levels 8, 4 and 2 pixels wide.
pub fn tiny_profile() -> BackboneProfile {
    BackboneProfile::custom_toy([4, 6, 8], 8, 32, 0)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_pyramid(p: &BackboneProfile, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    (0..LEVELS).map(|i| random_tensor(&p.level_shape(i), rng)).collect()
}

fn sample_coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= COORDS_PER_TENSOR {
        (0..len).collect()
    } else {
        (0..COORDS_PER_TENSOR).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Compare analytic and numeric gradients of `build` with respect to
/// every input and every parameter in `store`, on sampled coordinates.
pub fn check<F>(name: &str, store: &mut ParamStore<f64>, inputs: Vec<Tensor<f64>>, seed: u64, build: F) -> CheckResult
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Zero-initialised norm offsets can leave a ReLU input exactly on its
    // kink when a group holds one value; nudge every parameter off it.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let (input_grads, param_grads) = {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(v, t)| grads.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (ig, grads.into_param_grads())
    };
    let (mut diff2, mut norm_a, mut norm_n, mut coords) = (0.0, 0.0, 0.0, 0);
    let mut record = |a: f64, n: f64| {
        diff2 += (a - n) * (a - n);
        norm_a += a * a;
        norm_n += n * n;
        coords += 1;
    };
    let mut inputs = inputs;
    for i in 0..inputs.len() {
        for k in sample_coords(inputs[i].len(), &mut rng) {
            let orig = inputs[i].data()[k];
            inputs[i].data_mut()[k] = orig + STEP;
            let plus = eval(store, &inputs);
            inputs[i].data_mut()[k] = orig - STEP;
            let minus = eval(store, &inputs);
            inputs[i].data_mut()[k] = orig;
            record(input_grads[i].data()[k], (plus - minus) / (2.0 * STEP));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        let analytic = param_grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for k in sample_coords(len, &mut rng) {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + STEP;
            let plus = eval(store, &inputs);
            store.value_mut(id).data_mut()[k] = orig - STEP;
            let minus = eval(store, &inputs);
            store.value_mut(id).data_mut()[k] = orig;
            record(analytic.data()[k], (plus - minus) / (2.0 * STEP));
        }
    }
    CheckResult {
        name: name.to_string(),
        rel_error: diff2.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12),
        coords,
    }
}

/// Random linear read-out of several tensors, making them a scalar.
fn readout(tape: &mut Tape<'_, f64>, outs: &[Var], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts: Vec<Var> = outs
        .iter()
        .map(|&v| {
            let r = random_tensor(tape.value(v).shape(), &mut rng);
            tape.project(v, r)
        })
        .collect();
    tape.sum(&parts)
}

fn builder(store: &mut ParamStore<f64>, group: ParamGroup) -> Builder<'_, f64> {
    Builder {
        store,
        init: Init { seed: 3 },
        group,
        branch: 0,
    }
}

pub fn check_pyramid_loss(seed: u64) -> CheckResult {
    let p = tiny_profile();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = random_pyramid(&p, &mut rng);
    inputs.extend(random_pyramid(&p, &mut rng));
    let mut store = ParamStore::new();
    check("pyramid loss", &mut store, inputs, seed, |tape, v| {
        pyramid_loss_on_tape(tape, &[v[0], v[1], v[2]], &[v[3], v[4], v[5]]).unwrap()
    })
}

pub fn check_amplify(seed: u64) -> CheckResult {
    let p = tiny_profile();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let fw = FusionWeights::new(&mut builder(&mut store, ParamGroup::Amplifier), "fusion");
    for id in fw.levels {
        *store.value_mut(id) = random_tensor(&[2], &mut rng);
    }
    let mut inputs = random_pyramid(&p, &mut rng);
    inputs.extend(random_pyramid(&p, &mut rng));
    check("amplify", &mut store, inputs, seed, |tape, v| {
        let out = fw.amplify(tape, &[v[0], v[1], v[2]], &[v[3], v[4], v[5]]).unwrap();
        readout(tape, &out, seed + 1)
    })
}

pub fn check_bottleneck_projection(seed: u64) -> CheckResult {
    let p = tiny_profile();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bp = BottleneckProjection::new(&p, 2, &mut builder(&mut store, ParamGroup::Filter), "bp").unwrap();
    let inputs = random_pyramid(&p, &mut rng);
    check("bottleneck projection", &mut store, inputs, seed, |tape, v| {
        let out = bp.project(tape, &[v[0], v[1], v[2]]).unwrap();
        readout(tape, &out, seed + 1)
    })
}

pub fn check_inverted_projection(seed: u64) -> CheckResult {
    let p = tiny_profile();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ibp =
        InvertedBottleneckProjection::new(&p, 2, &mut builder(&mut store, ParamGroup::Amplifier), "ibp").unwrap();
    let inputs = random_pyramid(&p, &mut rng);
    check("inverted bottleneck projection", &mut store, inputs, seed, |tape, v| {
        let out = ibp.project(tape, &[v[0], v[1], v[2]]).unwrap();
        readout(tape, &out, seed + 1)
    })
}

pub fn check_ocbe(seed: u64) -> CheckResult {
    let p = tiny_profile();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ocbe = ModifiedOcbe::new(&p, true, &mut builder(&mut store, ParamGroup::Distill), "ocbe");
    let mut inputs = random_pyramid(&p, &mut rng);
    inputs.extend(random_pyramid(&p, &mut rng));
    check("modified bottleneck", &mut store, inputs, seed, |tape, v| {
        let out = ocbe.fuse(tape, &[v[0], v[1], v[2]], Some(&[v[3], v[4], v[5]])).unwrap();
        readout(tape, &[out], seed + 1)
    })
}

pub fn check_decoder(seed: u64) -> CheckResult {
    let p = tiny_profile();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dec = build_student(&p, &mut builder(&mut store, ParamGroup::Distill), "decoder").unwrap();
    let inputs = vec![random_tensor(&p.embedding_shape(), &mut rng)];
    check("student decoder", &mut store, inputs, seed, |tape, v| {
        let out = dec.decode(tape, v[0]).unwrap();
        readout(tape, &out, seed + 1)
    })
}

pub fn all_checks(seed: u64) -> Vec<CheckResult> {
    vec![
        check_pyramid_loss(seed),
        check_amplify(seed),
        check_bottleneck_projection(seed),
        check_inverted_projection(seed),
        check_ocbe(seed),
        check_decoder(seed),
    ]
}
