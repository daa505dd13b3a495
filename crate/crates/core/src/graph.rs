//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is the tape: every op appends a node holding its output value
//! and what its backward rule needs. [`Graph::backward`] walks the nodes in
//! reverse recording order and returns the gradient of a scalar with respect
//! to every node that requires one.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec, Needs};
use crate::signal::mel::{LogMel, LogMelCache};
use crate::tensor::{Real, Shape, Tensor3};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    GlobalNorm {
        x: Var,
        scales: Vec<T>,
    },
    ResidualCombine {
        main: Var,
        shortcut: Var,
        scale: T,
    },
    DuplicateChannels {
        x: Var,
        factor: usize,
    },
    GroupMeanChannels {
        x: Var,
        out_ch: usize,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    TrimTime {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Tanh {
        x: Var,
    },
    MeanSquaredError {
        x: Var,
        target: T,
    },
    L1Mean {
        a: Var,
        b: Var,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        weights: Tensor3<T>,
    },
    Linear {
        terms: Vec<(Var, T)>,
    },
    LogMel {
        x: Var,
        engine: Arc<LogMel<T>>,
        cache: LogMelCache<T>,
    },
}

struct Node<T: Real> {
    value: Tensor3<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, or `None` when it does not require one or the
    /// loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros of `len` when absent.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<T> {
        self.get(var)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor3<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor3<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// First element of `v`; meant for scalar nodes.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor3<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor3<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor3<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Same value as `x`, cut off from gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv1d(self.value(x), self.value(w), bias, spec)?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv1d { x, w, b, spec }, rg))
    }

    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv_transpose1d(self.value(x), self.value(w), bias, stride, padding)?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = kernels::leaky_relu(self.value(x), slope);
        let rg = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    /// Parameter-free per-item RMS normalization.
    pub fn global_norm(&mut self, x: Var) -> Var {
        let (out, scales) = kernels::global_norm(self.value(x));
        let rg = self.needs(x);
        self.push(out, Op::GlobalNorm { x, scales }, rg)
    }

    /// `(main + shortcut) * scale`.
    pub fn residual_combine(&mut self, main: Var, shortcut: Var, scale: T) -> Result<Var> {
        let (a, b) = (self.value(main), self.value(shortcut));
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "residual branches differ: {} vs {}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&m, &s)| (m + s) * scale)
            .collect();
        let out = Tensor3::new(a.shape(), data)?;
        let rg = self.needs(main) || self.needs(shortcut);
        Ok(self.push(
            out,
            Op::ResidualCombine {
                main,
                shortcut,
                scale,
            },
            rg,
        ))
    }

    pub fn duplicate_channels(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::duplicate_channels(self.value(x), factor)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::DuplicateChannels { x, factor }, rg))
    }

    pub fn group_mean_channels(&mut self, x: Var, out_ch: usize) -> Result<Var> {
        let out = kernels::group_mean_channels(self.value(x), out_ch)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::GroupMeanChannels { x, out_ch }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let out = kernels::slice_channels(self.value(x), start, count)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Keeps the first `len` steps; a no-op when the length already matches.
    pub fn trim_time(&mut self, x: Var, len: usize) -> Result<Var> {
        if self.shape(x).time == len {
            return Ok(x);
        }
        let out = kernels::trim_time(self.value(x), len)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::TrimTime { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "cannot add {} and {}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor3::new(va.shape(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.needs(x);
        self.push(out, Op::Tanh { x }, rg)
    }

    /// `mean((x - target)^2)` as a scalar.
    pub fn mse_to(&mut self, x: Var, target: T) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.len().max(1)).unwrap();
        let s = v
            .data()
            .iter()
            .fold(T::zero(), |acc, &e| acc + (e - target) * (e - target));
        let rg = self.needs(x);
        self.push(Tensor3::scalar(s / n), Op::MeanSquaredError { x, target }, rg)
    }

    /// `mean(|a - b|)` as a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "L1 operands differ: {} vs {}",
                va.shape(),
                vb.shape()
            )));
        }
        let n = T::from_usize(va.len().max(1)).unwrap();
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor3::scalar(s / n), Op::L1Mean { a, b }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let rg = self.needs(x);
        self.push(Tensor3::scalar(m), Op::Mean { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(x);
        self.push(Tensor3::scalar(s), Op::Sum { x }, rg)
    }

    /// `sum(x * weights)` as a scalar, with constant weights.
    pub fn dot(&mut self, x: Var, weights: Tensor3<T>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(Error::shape(format!(
                "dot weights {} do not match {}",
                weights.shape(),
                self.shape(x)
            )));
        }
        let s = self.value(x).dot(&weights);
        let rg = self.needs(x);
        Ok(self.push(Tensor3::scalar(s), Op::Dot { x, weights }, rg))
    }

    /// `sum_i coeff_i * term_i` over scalar terms.
    pub fn linear(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("linear combination terms must be scalars"));
            }
            s += c * self.scalar(v);
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor3::scalar(s),
            Op::Linear {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Differentiable log-mel spectrogram of 1-channel audio: `[batch, n_mels, frames]`.
    pub fn log_mel(&mut self, x: Var, engine: &Arc<LogMel<T>>) -> Result<Var> {
        let (out, cache) = engine.forward(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(
            out,
            Op::LogMel {
                x,
                engine: Arc::clone(engine),
                cache,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("loss is not on this tape".into()))?;
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut send = |v: Var, delta: Vec<T>| {
            if self.needs(v) {
                add_into(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, spec } => {
                let needs = Needs {
                    input: self.needs(*x),
                    weight: self.needs(*w),
                    bias: b.is_some_and(|b| self.needs(b)),
                };
                let r = kernels::conv1d_backward(self.value(*x), self.value(*w), g, *spec, needs)?;
                if let Some(d) = r.input {
                    send(*x, d);
                }
                if let Some(d) = r.weight {
                    send(*w, d);
                }
                if let (Some(b), Some(d)) = (b, r.bias) {
                    send(*b, d);
                }
            }
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let needs = Needs {
                    input: self.needs(*x),
                    weight: self.needs(*w),
                    bias: b.is_some_and(|b| self.needs(b)),
                };
                let r = kernels::conv_transpose1d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *padding,
                    needs,
                )?;
                if let Some(d) = r.input {
                    send(*x, d);
                }
                if let Some(d) = r.weight {
                    send(*w, d);
                }
                if let (Some(b), Some(d)) = (b, r.bias) {
                    send(*b, d);
                }
            }
            Op::LeakyRelu { x, slope } => {
                send(*x, kernels::leaky_relu_backward(self.value(*x), g, *slope));
            }
            Op::GlobalNorm { x, scales } => {
                send(*x, kernels::global_norm_backward(&node.value, scales, g));
            }
            Op::ResidualCombine {
                main,
                shortcut,
                scale,
            } => {
                let d: Vec<T> = g.iter().map(|&v| v * *scale).collect();
                send(*main, d.clone());
                send(*shortcut, d);
            }
            Op::DuplicateChannels { x, factor } => {
                let s = self.shape(*x);
                let n = s.item_len();
                let mut d = vec![T::zero(); s.len()];
                for b in 0..s.batch {
                    let dst = &mut d[b * n..(b + 1) * n];
                    for k in 0..*factor {
                        let src = &g[(b * factor + k) * n..(b * factor + k + 1) * n];
                        dst.iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                    }
                }
                send(*x, d);
            }
            Op::GroupMeanChannels { x, out_ch } => {
                let s = self.shape(*x);
                let groups = s.channels / out_ch;
                let inv = T::one() / T::from_usize(groups).unwrap();
                let block = out_ch * s.time;
                let mut d = Vec::with_capacity(s.len());
                for b in 0..s.batch {
                    let gi = &g[b * block..(b + 1) * block];
                    for _ in 0..groups {
                        d.extend(gi.iter().map(|&v| v * inv));
                    }
                }
                send(*x, d);
            }
            Op::SliceChannels { x, start } => {
                let s = self.shape(*x);
                let count = node.value.shape().channels;
                let mut d = vec![T::zero(); s.len()];
                for b in 0..s.batch {
                    let off = (b * s.channels + start) * s.time;
                    d[off..off + count * s.time]
                        .copy_from_slice(&g[b * count * s.time..(b + 1) * count * s.time]);
                }
                send(*x, d);
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (na, nb) = (sa.item_len(), sb.item_len());
                let mut da = Vec::with_capacity(sa.len());
                let mut db = Vec::with_capacity(sb.len());
                for i in 0..sa.batch {
                    let gi = &g[i * (na + nb)..(i + 1) * (na + nb)];
                    da.extend_from_slice(&gi[..na]);
                    db.extend_from_slice(&gi[na..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::TrimTime { x } => {
                let s = self.shape(*x);
                let len = node.value.shape().time;
                let mut d = vec![T::zero(); s.len()];
                for (row, src) in d.chunks_mut(s.time).zip(g.chunks(len)) {
                    row[..len].copy_from_slice(src);
                }
                send(*x, d);
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Tanh { x } => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * (T::one() - y * y))
                    .collect();
                send(*x, d);
            }
            Op::MeanSquaredError { x, target } => {
                let v = self.value(*x);
                let c = T::lit(2.0) * g[0] / T::from_usize(v.len().max(1)).unwrap();
                send(*x, v.data().iter().map(|&e| c * (e - *target)).collect());
            }
            Op::L1Mean { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = g[0] / T::from_usize(va.len().max(1)).unwrap();
                let da: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| {
                        if x > y {
                            c
                        } else if x < y {
                            -c
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.needs(*b) {
                    send(*b, da.iter().map(|&v| -v).collect());
                }
                send(*a, da);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let c = g[0] / T::from_usize(n.max(1)).unwrap();
                send(*x, vec![c; n]);
            }
            Op::Sum { x } => {
                send(*x, vec![g[0]; self.value(*x).len()]);
            }
            Op::Dot { x, weights } => {
                send(*x, weights.data().iter().map(|&w| w * g[0]).collect());
            }
            Op::Linear { terms } => {
                for &(v, c) in terms {
                    send(v, vec![c * g[0]]);
                }
            }
            Op::LogMel { x, engine, cache } => {
                send(*x, engine.backward(cache, g));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor3::from_signal(&[1.0, -2.0, 5.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor3::from_signal(&[1.0, 2.0]));
        let loss = g.mse_to(x, 0.0);
        assert_eq!(g.scalar(loss), 2.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor3::from_signal(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor3::from_signal(&[1.0, -2.0]));
        let y = g.leaky_relu(x, 0.1);
        let loss = g.dot(y, Tensor3::from_signal(&[0.0, 0.0])).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor3::from_signal(&[3.0]));
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn detached_and_constant_inputs_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor3::from_signal(&[1.0, 2.0]));
        let c = g.constant(Tensor3::from_signal(&[0.5, 0.5]));
        let d = g.detach(x);
        let s = g.add(x, c).unwrap();
        let s = g.add(s, d).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(d).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn residual_combine_checks_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor3::from_signal(&[1.0, 2.0]));
        let b = g.param(Tensor3::from_signal(&[3.0, 4.0]));
        let c = g.residual_combine(a, b, 0.4).unwrap();
        let out = g.value(c).data();
        assert!((out[0] - 1.6).abs() < 1e-12 && (out[1] - 2.4).abs() < 1e-12);
        let short = g.param(Tensor3::from_signal(&[1.0]));
        assert!(g.residual_combine(a, short, 0.4).is_err());
    }
}
