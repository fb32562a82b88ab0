//! Reverse-mode differentiation over a per-sample tape.
//!
//! A [`Tape`] records the forward computation of one sample. Parameters live
//! in a [`ParamStore`] and are referenced, not copied, by the tape; calling
//! [`Tape::backward`] returns gradients for every parameter and every
//! differentiable input that contributed to the scalar loss.

use crate::kernels::{self, ConvGeom};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    /// Softmax-weighted mix `(e^w0 a + e^w1 b) / (e^w0 + e^w1)`.
    Mix {
        a: Var,
        b: Var,
        w: Var,
    },
    /// Mean over locations of `1 - cos` between channel vectors.
    CosineDistance(Var, Var),
    Sum(Vec<Var>),
    /// `sum(x * r)` against a constant tensor.
    Project(Var, Tensor<f64>),
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every parameter in store order; `None` where the
    /// parameter was not reached by the loss.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        self.param_vars
            .iter()
            .map(|slot| slot.and_then(|v| self.by_node[v.0].take()))
            .collect()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf (used for gradient checks w.r.t. inputs).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv { x, w, b, geom }, ng)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = kernels::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::ConvTranspose { x, w, b, geom }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let out = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Concatenate `C_i x H x W` maps along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut data = Vec::new();
        let mut c = 0;
        for &p in parts {
            let t = self.value(p);
            let (pc, ph, pw) = t.chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c += pc;
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::from_vec(&[c, h, w], data).expect("concat shape");
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn mix(&mut self, a: Var, b: Var, w: Var) -> Var {
        let (wa, wb) = mix_coefficients(self.value(w));
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.shape(), bv.shape(), "mix operands must share a shape");
            Tensor::from_vec(
                av.shape(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| wa * x + wb * y).collect(),
            )
            .expect("mix shape")
        };
        let ng = self.needs(a) || self.needs(b) || self.needs(w);
        self.push(out, Op::Mix { a, b, w }, ng)
    }

    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "cosine operands must share a shape");
        let cos = kernels::cosine_map(av, bv);
        let n = T::from_usize(cos.len()).unwrap();
        let loss = cos.iter().map(|&c| T::one() - c).sum::<T>() / n;
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(loss), Op::CosineDistance(a, b), ng)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|&p| self.value(p).item()).sum::<T>();
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::scalar(total), Op::Sum(parts.to_vec()), ng)
    }

    pub fn project(&mut self, x: Var, r: Tensor<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), r.shape(), "projection shape mismatch");
        let s = xv
            .data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| a * T::from_f64_lossy(b))
            .sum::<T>();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Project(x, r), ng)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = &self.nodes[i].op;
            match op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Conv { x, w, b, geom } => {
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *geom, self.needs(*x));
                    self.accumulate(&mut grads, *w, cg.weight);
                    if let Some(b) = b {
                        self.accumulate(&mut grads, *b, cg.bias);
                    }
                    if let Some(dx) = cg.input {
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::ConvTranspose { x, w, b, geom } => {
                    let cg = kernels::conv_transpose2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *geom,
                        self.needs(*x),
                    );
                    self.accumulate(&mut grads, *w, cg.weight);
                    if let Some(b) = b {
                        self.accumulate(&mut grads, *b, cg.bias);
                    }
                    if let Some(dx) = cg.input {
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups } => {
                    let gg = kernels::group_norm_backward(self.value(*x), self.value(*gamma), &g, *groups);
                    self.accumulate(&mut grads, *x, gg.input);
                    self.accumulate(&mut grads, *gamma, gg.gamma);
                    self.accumulate(&mut grads, *beta, gg.beta);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = Tensor::from_vec(
                        xv.shape(),
                        xv.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                            .collect(),
                    )
                    .expect("relu grad");
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Concat(parts) => {
                    let (_, h, w) = g.chw();
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).chw().0;
                        let len = pc * h * w;
                        let piece = Tensor::from_vec(&[pc, h, w], g.data()[off..off + len].to_vec())
                            .expect("concat grad");
                        off += len;
                        self.accumulate(&mut grads, p, piece);
                    }
                }
                Op::Mix { a, b, w } => {
                    let (wa, wb) = mix_coefficients(self.value(*w));
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, g.scale(wa));
                    self.accumulate(&mut grads, *b, g.scale(wb));
                    // d out / d w0 = wa * wb * (a - b); d out / d w1 = -(same)
                    let s = g
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(&d, (&x, &y))| d * (x - y))
                        .sum::<T>()
                        * wa
                        * wb;
                    let dw = Tensor::from_vec(&[2], vec![s, -s]).expect("mix weight grad");
                    self.accumulate(&mut grads, *w, dw);
                }
                Op::CosineDistance(a, b) => {
                    let (da, db) =
                        kernels::cosine_distance_mean_backward(self.value(*a), self.value(*b), g.item());
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        self.accumulate(&mut grads, p, g.clone());
                    }
                }
                Op::Project(x, r) => {
                    let up = g.item();
                    let dx = Tensor::from_vec(
                        r.shape(),
                        r.data().iter().map(|&v| up * T::from_f64_lossy(v)).collect(),
                    )
                    .expect("project grad");
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }
        Gradients {
            by_node: grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

/// Softmax of a two-element weight tensor.
pub fn mix_coefficients<T: Scalar>(w: &Tensor<T>) -> (T, T) {
    let (w0, w1) = (w.data()[0], w.data()[1]);
    let m = w0.max(w1);
    let (e0, e1) = ((w0 - m).exp(), (w1 - m).exp());
    let z = e0 + e1;
    (e0 / z, e1 / z)
}
