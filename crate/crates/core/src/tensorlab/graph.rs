use std::collections::BTreeMap;

use super::conv::{conv3d_backward, conv3d_forward, Conv3dGeometry};
use super::gemm::{gemm, MatMut, MatRef};
use super::params::{Grads, ParamId, Params};
use super::pool::{maxpool3d_backward, maxpool3d_forward};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// An operation defined outside the engine, with a hand-written adjoint.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output gradient. Entries for
    /// inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Param,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: Conv3dGeometry,
    },
    MaxPool3d {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    SelectChannel {
        input: Var,
        channel: usize,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Bce {
        prob: Var,
        labels: Vec<f64>,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Clamp applied to probabilities before taking logs in [`Graph::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

/// Tape of eagerly evaluated operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Backward {
    /// Gradient with respect to a node, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every tensor in `params`; parameters that were not on
    /// a path to the loss get zeros.
    pub fn param_grads(&self, params: &Params) -> Grads {
        let mut grads = Grads::zeros_like(params);
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                grads.get_mut(id).add_assign(g);
            }
        }
        grads
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf holding data; set `requires_grad` to read its gradient back.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Leaf bound to a trainable parameter. Repeated calls with the same id
    /// return the same node.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geometry = Conv3dGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        if self.shape(bias) != [geometry.out_channels] {
            return Err(Error::invalid(format!(
                "conv3d bias shape {:?} does not match {} filters",
                self.shape(bias),
                geometry.out_channels
            )));
        }
        let out = conv3d_forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(&geometry.output_shape(), out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                geometry,
            },
            rg,
        ))
    }

    pub fn maxpool3d(&mut self, input: Var, window: [usize; 3]) -> Result<Var> {
        let (values, argmax, shape) =
            maxpool3d_forward(self.shape(input), self.value(input).data(), window)?;
        let value = Tensor::new(&shape, values)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool3d { input, argmax }, rg))
    }

    /// `input[N,K] * weight[K,M] + bias[M]`
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::invalid(format!(
                "dense shapes incompatible: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(
            1.0,
            MatRef::row_major(self.value(input).data(), n, k),
            MatRef::row_major(self.value(weight).data(), k, m),
            1.0,
            MatMut::row_major(&mut out, n, m),
        );
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(&[n, m], out)?,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        let rg = self.rg(&[input]);
        self.push(value, Op::Sigmoid(input), rg)
    }

    /// Inverted dropout. Outside training (or with `p == 0`) the input node
    /// itself is returned.
    pub fn dropout<R: rand::Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(input).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .value(input)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::new(self.shape(input), data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, s: f64) -> Var {
        let value = self.value(input).map(|x| x * s);
        let rg = self.rg(&[input]);
        self.push(value, Op::Scale(input, s), rg)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(value, Op::Sum(input), rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(input).data(), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            value,
            Op::Permute {
                input,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Picks channel `channel` of an `[N, C, ...]` tensor, giving `[N, ...]`.
    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || channel >= shape[1] {
            return Err(Error::invalid(format!(
                "channel {channel} out of range for shape {shape:?}"
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(shape[0] * inner);
        for n in 0..shape[0] {
            let off = (n * shape[1] + channel) * inner;
            data.extend_from_slice(&src[off..off + inner]);
        }
        let mut out_shape = vec![shape[0]];
        out_shape.extend_from_slice(&shape[2..]);
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::SelectChannel { input, channel }, rg))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::invalid(format!(
                "mse shape mismatch: {:?} vs {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let n = target.len().max(1) as f64;
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, prob: Var, labels: &Tensor) -> Result<Var> {
        if self.shape(prob) != labels.shape() {
            return Err(Error::invalid(format!(
                "bce shape mismatch: {:?} vs {:?}",
                self.shape(prob),
                labels.shape()
            )));
        }
        let n = labels.len().max(1) as f64;
        let loss = -self
            .value(prob)
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[prob]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                prob,
                labels: labels.data().to_vec(),
            },
            rg,
        ))
    }

    /// Records a custom operation whose forward value has already been
    /// computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            grads[i] = Some(g);
            for (var, gin) in contributions {
                match &mut grads[var.0] {
                    Some(existing) => existing.add_assign(&gin),
                    slot @ None => *slot = Some(gin),
                }
            }
        }
        Ok(Backward {
            grads,
            params: self.params.iter().map(|(&id, &v)| (id, v)).collect(),
        })
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let need = [self.needs(*input), self.needs(*weight), self.needs(*bias)];
                let grads = conv3d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    need,
                );
                if let Some(dx) = grads.input {
                    out.push((*input, Tensor::new(self.shape(*input), dx)?));
                }
                if let Some(dw) = grads.weight {
                    out.push((*weight, Tensor::new(self.shape(*weight), dw)?));
                }
                if let Some(db) = grads.bias {
                    out.push((*bias, Tensor::new(self.shape(*bias), db)?));
                }
            }
            Op::MaxPool3d { input, argmax } => {
                if self.needs(*input) {
                    let dx = maxpool3d_backward(self.value(*input).len(), argmax, g.data());
                    out.push((*input, Tensor::new(self.shape(*input), dx)?));
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (n, k, m) = (xs[0], xs[1], self.shape(*weight)[1]);
                if self.needs(*input) {
                    let mut dx = vec![0.0; n * k];
                    gemm(
                        1.0,
                        MatRef::row_major(g.data(), n, m),
                        MatRef::row_major(self.value(*weight).data(), k, m).t(),
                        0.0,
                        MatMut::row_major(&mut dx, n, k),
                    );
                    out.push((*input, Tensor::new(&[n, k], dx)?));
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; k * m];
                    gemm(
                        1.0,
                        MatRef::row_major(self.value(*input).data(), n, k).t(),
                        MatRef::row_major(g.data(), n, m),
                        0.0,
                        MatMut::row_major(&mut dw, k, m),
                    );
                    out.push((*weight, Tensor::new(&[k, m], dw)?));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*bias, Tensor::new(&[m], db)?));
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                out.push((*input, Tensor::new(g.shape(), dx)?));
            }
            Op::Sigmoid(input) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gi, &s)| gi * s * (1.0 - s))
                    .collect();
                out.push((*input, Tensor::new(g.shape(), dx)?));
            }
            Op::Dropout { input, mask } => {
                let dx = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                out.push((*input, Tensor::new(g.shape(), dx)?));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    out.push((*a, Tensor::new(g.shape(), d)?));
                }
                if self.needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    out.push((*b, Tensor::new(g.shape(), d)?));
                }
            }
            Op::Scale(input, s) => {
                out.push((*input, g.map(|x| x * s)));
            }
            Op::Sum(input) => {
                out.push((*input, Tensor::full(self.shape(*input), g.data()[0])));
            }
            Op::Reshape(input) => {
                out.push((*input, g.clone().reshape(self.shape(*input))?));
            }
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let data = permute_data(g.data(), g.shape(), &inverse);
                out.push((*input, Tensor::new(self.shape(*input), data)?));
            }
            Op::SelectChannel { input, channel } => {
                let shape = self.shape(*input);
                let inner: usize = shape[2..].iter().product();
                let mut dx = vec![0.0; self.value(*input).len()];
                for n in 0..shape[0] {
                    let off = (n * shape[1] + channel) * inner;
                    dx[off..off + inner].copy_from_slice(&g.data()[n * inner..(n + 1) * inner]);
                }
                out.push((*input, Tensor::new(shape, dx)?));
            }
            Op::Mse { pred, target } => {
                let scale = 2.0 * g.data()[0] / target.len().max(1) as f64;
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                out.push((*pred, Tensor::new(self.shape(*pred), d)?));
            }
            Op::Bce { prob, labels } => {
                let scale = -g.data()[0] / labels.len().max(1) as f64;
                let d = self
                    .value(*prob)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                            0.0
                        } else {
                            scale * (y / p - (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                out.push((*prob, Tensor::new(self.shape(*prob), d)?));
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let grads = op.backward(&values, &node.value, g, &needs)?;
                if grads.len() != inputs.len() {
                    return Err(Error::invalid(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for ((var, grad), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (Some(grad), true) = (grad, need) {
                        out.push((*var, grad));
                    }
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
