use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::likelihoods::{
    gaussian_bin, logistic_mixture_bin, BinSpec, GaussianParams, LogisticComponent,
    LogisticMixtureParams,
};
use crate::special;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations with their attributes.
#[derive(Clone, Debug)]
pub enum OpKind {
    /// Elementwise; the second operand may omit the leading batch axis
    /// (or the first may).
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// `[m,k]·[k,n]`.
    MatMul,
    /// `x·(w ⊙ mask)`.
    MaskedMatMul { mask: Arc<Tensor> },
    /// Inputs `x [B,Cin,H,W]`, `w [Cout,Cin,kh,kw]`, `b [Cout]`; same-size
    /// zero padding, stride 1, optional binary mask over `w`.
    Conv2d { mask: Option<Arc<Tensor>> },
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Abs,
    /// Over the last axis.
    LogSoftmax,
    Sum,
    Mean,
    SumLastAxis,
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    GaussianCdf,
    LogisticCdf,
    /// Inputs `x, mu, log_sigma` of equal shape.
    DiscGaussian { bins: BinSpec },
    /// Inputs `x [B,C,...]` and `params [B,3KC,...]`; per channel `c` the
    /// params hold `K` logits, `K` locations, `K` log scales.
    DiscLogisticMixture {
        bins: BinSpec,
        components: usize,
        min_log_scale: Option<f64>,
    },
    /// `max(x, floor)`; zero gradient below the floor.
    ClampMin { floor: f64 },
    /// Separable Gaussian blur over the last two axes, reflected edges.
    Blur { sigma: f64, radius: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::MaskedMatMul { .. } => "masked_matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softplus => "softplus",
            OpKind::Abs => "abs",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLastAxis => "sum_last_axis",
            OpKind::Slice { .. } => "slice",
            OpKind::Concat { .. } => "concat",
            OpKind::Reshape { .. } => "reshape",
            OpKind::GaussianCdf => "gaussian_cdf",
            OpKind::LogisticCdf => "logistic_cdf",
            OpKind::DiscGaussian { .. } => "disc_gaussian",
            OpKind::DiscLogisticMixture { .. } => "disc_logistic_mixture",
            OpKind::ClampMin { .. } => "clamp_min",
            OpKind::Blur { .. } => "blur",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<OpKind>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    /// rhs lacks the leading axis
    Rhs,
    /// lhs lacks the leading axis
    Lhs,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if a.rank() == b.rank() + 1 && a.shape()[1..] == *b.shape() {
        Ok(Bcast::Rhs)
    } else if b.rank() == a.rank() + 1 && b.shape()[1..] == *a.shape() {
        Ok(Bcast::Lhs)
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn zip_bcast(a: &Tensor, b: &Tensor, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (shape, data) = match mode {
        Bcast::Same => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Bcast::Rhs => {
            let n = b.len();
            (
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % n]))
                    .collect(),
            )
        }
        Bcast::Lhs => {
            let n = a.len();
            (
                b.shape().to_vec(),
                b.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(a.data()[i % n], y))
                    .collect(),
            )
        }
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Sums a full-shape gradient down to `target` (drops the leading axis when
/// `target` lacks it).
fn reduce_to(g: Vec<f64>, full_len: usize, target: &Tensor) -> Tensor {
    if target.len() == full_len {
        return Tensor::new(target.shape().to_vec(), g).expect("same shape");
    }
    let n = target.len();
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(target.shape().to_vec(), out).expect("reduced shape")
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient will be reported by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `op` applied to `inputs` and returns the output node.
    pub fn record(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::invalid(format!("{} refers to unknown node {}", op.name(), v.0)));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&op, &values)?;
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                index,
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(op),
            inputs: inputs.to_vec(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(OpKind::Scale(s), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(OpKind::AddScalar(s), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, &[a, b])
    }
    pub fn masked_matmul(&mut self, x: Var, w: Var, mask: Arc<Tensor>) -> Result<Var> {
        self.record(OpKind::MaskedMatMul { mask }, &[x, w])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, mask: Option<Arc<Tensor>>) -> Result<Var> {
        self.record(OpKind::Conv2d { mask }, &[x, w, b])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sigmoid, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Log, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Softplus, &[a])
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Abs, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::LogSoftmax, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Mean, &[a])
    }
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::SumLastAxis, &[a])
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(OpKind::Slice { axis, start, len }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.record(OpKind::Concat { axis }, parts)
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(OpKind::Reshape { shape: shape.to_vec() }, &[a])
    }
    pub fn gaussian_cdf(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::GaussianCdf, &[a])
    }
    pub fn logistic_cdf(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::LogisticCdf, &[a])
    }
    pub fn disc_gaussian(&mut self, x: Var, mu: Var, log_sigma: Var, bins: BinSpec) -> Result<Var> {
        self.record(OpKind::DiscGaussian { bins }, &[x, mu, log_sigma])
    }
    pub fn disc_logistic_mixture(
        &mut self,
        x: Var,
        params: Var,
        bins: BinSpec,
        components: usize,
        min_log_scale: Option<f64>,
    ) -> Result<Var> {
        self.record(
            OpKind::DiscLogisticMixture {
                bins,
                components,
                min_log_scale,
            },
            &[x, params],
        )
    }
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.record(OpKind::ClampMin { floor }, &[a])
    }
    pub fn blur(&mut self, a: Var, sigma: f64) -> Result<Var> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("blur sigma {sigma} must be > 0")));
        }
        let radius = (3.0 * sigma).ceil() as usize;
        self.record(OpKind::Blur { sigma, radius }, &[a])
    }

    /// Reverse pass from a scalar `loss`. Each recorded node is visited at
    /// most once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = backward_op(op, &inputs, &node.value, &g, &needs)?;
            for (v, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.op.is_some() || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    a.map(f)
}

fn expect_arity(op: &OpKind, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::invalid(format!(
            "{} takes {n} inputs, got {}",
            op.name(),
            inputs.len()
        )));
    }
    Ok(())
}

fn conv_geom(x: &Tensor, w: &Tensor, b: &Tensor, mask: Option<&Tensor>) -> Result<ConvGeom> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if x.shape()[1] != cin || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    if b.shape() != [cout] {
        return Err(Error::shape("conv2d bias", b.shape(), &[cout]));
    }
    if let Some(m) = mask {
        if m.shape() != w.shape() {
            return Err(Error::shape("conv2d mask", m.shape(), w.shape()));
        }
    }
    Ok(ConvGeom {
        cin,
        cout,
        h: x.shape()[2],
        w: x.shape()[3],
        kh,
        kw,
    })
}

fn masked_weights(w: &Tensor, mask: Option<&Tensor>) -> Vec<f64> {
    match mask {
        Some(m) => w.data().iter().zip(m.data()).map(|(a, b)| a * b).collect(),
        None => w.data().to_vec(),
    }
}

/// Head layout for the logistic mixture: `(channels, inner)` where `inner`
/// is the product of trailing axes.
fn mixture_layout(x: &Tensor, p: &Tensor, k: usize) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 || p.rank() != x.rank() || k == 0 {
        return Err(Error::shape("disc_logistic_mixture", x.shape(), p.shape()));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    if p.shape()[0] != b || p.shape()[1] != 3 * k * c || p.shape()[2..] != x.shape()[2..] {
        return Err(Error::shape("disc_logistic_mixture", x.shape(), p.shape()));
    }
    let inner: usize = x.shape()[2..].iter().product();
    Ok((b, c, inner))
}

fn mixture_params_at(p: &[f64], base: usize, inner: usize, k: usize) -> LogisticMixtureParams {
    let comps = (0..k)
        .map(|j| LogisticComponent {
            logit_weight: p[base + j * inner],
            mu: p[base + (k + j) * inner],
            log_scale: p[base + (2 * k + j) * inner],
        })
        .collect();
    LogisticMixtureParams::new(comps).expect("k >= 1")
}

fn forward(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    use OpKind::*;
    match op {
        Add | Sub | Mul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let mode = bcast(op.name(), a, b)?;
            Ok(match op {
                Add => zip_bcast(a, b, mode, |x, y| x + y),
                Sub => zip_bcast(a, b, mode, |x, y| x - y),
                _ => zip_bcast(a, b, mode, |x, y| x * y),
            })
        }
        Scale(s) => {
            expect_arity(op, inputs, 1)?;
            Ok(unary(inputs[0], |v| v * s))
        }
        AddScalar(s) => {
            expect_arity(op, inputs, 1)?;
            Ok(unary(inputs[0], |v| v + s))
        }
        MatMul | MaskedMatMul { .. } => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(op.name(), a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let w = match op {
                MaskedMatMul { mask } => {
                    if mask.shape() != b.shape() {
                        return Err(Error::shape("masked_matmul mask", mask.shape(), b.shape()));
                    }
                    masked_weights(b, Some(mask))
                }
                _ => b.data().to_vec(),
            };
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, 1.0, a.data(), (k, 1), &w, (n, 1), 0.0, &mut out);
            Tensor::new(vec![m, n], out)
        }
        Conv2d { mask } => {
            expect_arity(op, inputs, 3)?;
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let g = conv_geom(x, w, b, mask.as_deref())?;
            let wm = masked_weights(w, mask.as_deref());
            let batch = x.shape()[0];
            let (plane, patch) = (g.plane(), g.patch());
            let mut out = vec![0.0; batch * g.cout * plane];
            let mut cols = vec![0.0; patch * plane];
            for bi in 0..batch {
                let xb = &x.data()[bi * g.cin * plane..(bi + 1) * g.cin * plane];
                kernels::im2col(xb, &g, &mut cols);
                let ob = &mut out[bi * g.cout * plane..(bi + 1) * g.cout * plane];
                for (o, row) in ob.chunks_mut(plane).enumerate() {
                    row.fill(b.data()[o]);
                }
                kernels::gemm(g.cout, patch, plane, 1.0, &wm, (patch, 1), &cols, (plane, 1), 1.0, ob);
            }
            Tensor::new(vec![batch, g.cout, g.h, g.w], out)
        }
        Tanh => Ok(unary(inputs[0], f64::tanh)),
        Sigmoid => Ok(unary(inputs[0], special::sigmoid)),
        Exp => Ok(unary(inputs[0], f64::exp)),
        Log => {
            let a = inputs[0];
            if let Some((index, &value)) = a.data().iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
                return Err(Error::LogDomain { value, index });
            }
            Ok(unary(a, f64::ln))
        }
        Softplus => Ok(unary(inputs[0], special::softplus)),
        Abs => Ok(unary(inputs[0], f64::abs)),
        LogSoftmax => {
            let a = inputs[0];
            let n = *a.shape().last().ok_or_else(|| Error::invalid("log_softmax of a scalar"))?;
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(n) {
                let lse = special::logsumexp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(a.shape().to_vec(), out)
        }
        Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        Mean => {
            let a = inputs[0];
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
        }
        SumLastAxis => {
            let a = inputs[0];
            if a.rank() < 2 {
                return Err(Error::invalid(format!(
                    "sum_last_axis needs rank >= 2, got {:?}",
                    a.shape()
                )));
            }
            let n = *a.shape().last().unwrap();
            let out: Vec<f64> = a.data().chunks(n).map(|r| r.iter().sum()).collect();
            Tensor::new(a.shape()[..a.rank() - 1].to_vec(), out)
        }
        Slice { axis, start, len } => {
            let a = inputs[0];
            if *axis >= a.rank() || *len == 0 || start + len > a.shape()[*axis] {
                return Err(Error::invalid(format!(
                    "slice axis {axis} [{start}, {}) out of range for {:?}",
                    start + len,
                    a.shape()
                )));
            }
            let (outer, extent, inner) = axis_split(a.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * extent * inner + start * inner;
                out.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(shape, out)
        }
        Concat { axis } => {
            let first = inputs
                .first()
                .ok_or_else(|| Error::invalid("concat of nothing"))?;
            if *axis >= first.rank() {
                return Err(Error::invalid(format!("concat axis {axis} out of range")));
            }
            for t in inputs {
                let ok = t.rank() == first.rank()
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    return Err(Error::shape("concat", first.shape(), t.shape()));
                }
            }
            let (outer, _, inner) = axis_split(first.shape(), *axis);
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let e = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * e * inner..(o + 1) * e * inner]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Tensor::new(shape, out)
        }
        Reshape { shape } => inputs[0].clone().reshape(shape),
        GaussianCdf => Ok(unary(inputs[0], special::ndtr)),
        LogisticCdf => Ok(unary(inputs[0], special::sigmoid)),
        DiscGaussian { bins } => {
            expect_arity(op, inputs, 3)?;
            let (x, mu, ls) = (inputs[0], inputs[1], inputs[2]);
            if x.shape() != mu.shape() || x.shape() != ls.shape() {
                return Err(Error::shape("disc_gaussian", x.shape(), mu.shape()));
            }
            let out = (0..x.len())
                .map(|i| {
                    gaussian_bin(x.data()[i], GaussianParams::new(mu.data()[i], ls.data()[i]), bins).value
                })
                .collect();
            Tensor::new(x.shape().to_vec(), out)
        }
        DiscLogisticMixture {
            bins,
            components,
            min_log_scale,
        } => {
            expect_arity(op, inputs, 2)?;
            let (x, p) = (inputs[0], inputs[1]);
            let (b, c, inner) = mixture_layout(x, p, *components)?;
            let k = *components;
            let mut out = vec![0.0; x.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let pbase = (bi * 3 * k * c + ci * 3 * k) * inner;
                    for s in 0..inner {
                        let xi = (bi * c + ci) * inner + s;
                        let params = mixture_params_at(p.data(), pbase + s, inner, k);
                        out[xi] = logistic_mixture_bin(x.data()[xi], &params, bins, *min_log_scale).value;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        ClampMin { floor } => Ok(unary(inputs[0], |v| v.max(*floor))),
        Blur { sigma, radius } => {
            let a = inputs[0];
            if a.rank() < 2 {
                return Err(Error::invalid("blur needs at least two axes"));
            }
            let (h, w) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
            let k = kernels::gaussian_kernel_1d(*sigma, *radius);
            Tensor::new(a.shape().to_vec(), kernels::blur_planes(a.data(), h, w, &k))
        }
    }
}

fn backward_op(
    op: &OpKind,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    use OpKind::*;
    let gd = g.data();
    let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("grad shape");
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Tensor>> {
        vec![Some(like(inputs[0], (0..gd.len()).map(|i| gd[i] * f(i)).collect()))]
    };
    Ok(match op {
        Add | Sub | Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            bcast(op.name(), a, b)?;
            let full = gd.len();
            let at = |t: &Tensor, i: usize| t.data()[i % t.len()];
            let ga = needs[0].then(|| {
                let v: Vec<f64> = match op {
                    Mul => (0..full).map(|i| gd[i] * at(b, i)).collect(),
                    _ => gd.to_vec(),
                };
                reduce_to(v, full, a)
            });
            let gb = needs[1].then(|| {
                let v: Vec<f64> = match op {
                    Mul => (0..full).map(|i| gd[i] * at(a, i)).collect(),
                    Sub => gd.iter().map(|v| -v).collect(),
                    _ => gd.to_vec(),
                };
                reduce_to(v, full, b)
            });
            vec![ga, gb]
        }
        Scale(s) => elementwise(&|_| *s),
        AddScalar(_) => elementwise(&|_| 1.0),
        MatMul | MaskedMatMul { .. } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mask = match op {
                MaskedMatMul { mask } => Some(mask.as_ref()),
                _ => None,
            };
            let ga = needs[0].then(|| {
                let w = masked_weights(b, mask);
                let mut d = vec![0.0; m * k];
                // g·wᵀ
                kernels::gemm(m, n, k, 1.0, gd, (n, 1), &w, (1, n), 0.0, &mut d);
                like(a, d)
            });
            let gb = needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                // aᵀ·g
                kernels::gemm(k, m, n, 1.0, a.data(), (1, k), gd, (n, 1), 0.0, &mut d);
                if let Some(mk) = mask {
                    d.iter_mut().zip(mk.data()).for_each(|(v, m)| *v *= m);
                }
                like(b, d)
            });
            vec![ga, gb]
        }
        Conv2d { mask } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let geo = conv_geom(x, w, b, mask.as_deref())?;
            let batch = x.shape()[0];
            let (plane, patch) = (geo.plane(), geo.patch());
            let wm = masked_weights(w, mask.as_deref());
            let mut dx = needs[0].then(|| vec![0.0; x.len()]);
            let mut dw = needs[1].then(|| vec![0.0; w.len()]);
            let mut cols = vec![0.0; patch * plane];
            let mut dcols = vec![0.0; patch * plane];
            for bi in 0..batch {
                let gb = &gd[bi * geo.cout * plane..(bi + 1) * geo.cout * plane];
                if let Some(dw) = dw.as_mut() {
                    let xb = &x.data()[bi * geo.cin * plane..(bi + 1) * geo.cin * plane];
                    kernels::im2col(xb, &geo, &mut cols);
                    // g_b·colsᵀ
                    kernels::gemm(geo.cout, plane, patch, 1.0, gb, (plane, 1), &cols, (1, plane), 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    // wmᵀ·g_b
                    kernels::gemm(patch, geo.cout, plane, 1.0, &wm, (1, patch), gb, (plane, 1), 0.0, &mut dcols);
                    kernels::col2im(&dcols, &geo, &mut dx[bi * geo.cin * plane..(bi + 1) * geo.cin * plane]);
                }
            }
            if let (Some(dw), Some(m)) = (dw.as_mut(), mask.as_deref()) {
                dw.iter_mut().zip(m.data()).for_each(|(v, mk)| *v *= mk);
            }
            let db = needs[2].then(|| {
                let mut d = vec![0.0; geo.cout];
                for bi in 0..batch {
                    for (o, dv) in d.iter_mut().enumerate() {
                        let base = (bi * geo.cout + o) * plane;
                        *dv += gd[base..base + plane].iter().sum::<f64>();
                    }
                }
                like(b, d)
            });
            vec![dx.map(|d| like(x, d)), dw.map(|d| like(w, d)), db]
        }
        Tanh => elementwise(&|i| 1.0 - out.data()[i] * out.data()[i]),
        Sigmoid => elementwise(&|i| out.data()[i] * (1.0 - out.data()[i])),
        Exp => elementwise(&|i| out.data()[i]),
        Log => elementwise(&|i| 1.0 / inputs[0].data()[i]),
        Softplus => elementwise(&|i| special::sigmoid(inputs[0].data()[i])),
        Abs => elementwise(&|i| {
            let v = inputs[0].data()[i];
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        LogSoftmax => {
            let n = *out.shape().last().unwrap();
            let mut d = vec![0.0; gd.len()];
            for ((drow, grow), yrow) in d.chunks_mut(n).zip(gd.chunks(n)).zip(out.data().chunks(n)) {
                let gs: f64 = grow.iter().sum();
                for j in 0..n {
                    drow[j] = grow[j] - yrow[j].exp() * gs;
                }
            }
            vec![Some(like(inputs[0], d))]
        }
        Sum => vec![Some(Tensor::full(inputs[0].shape(), gd[0]))],
        Mean => {
            let n = inputs[0].len() as f64;
            vec![Some(Tensor::full(inputs[0].shape(), gd[0] / n))]
        }
        SumLastAxis => {
            let a = inputs[0];
            let n = *a.shape().last().unwrap();
            vec![Some(like(a, (0..a.len()).map(|i| gd[i / n]).collect()))]
        }
        Slice { axis, start, len } => {
            let a = inputs[0];
            let (outer, extent, inner) = axis_split(a.shape(), *axis);
            let mut d = vec![0.0; a.len()];
            for o in 0..outer {
                let base = o * extent * inner + start * inner;
                d[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(like(a, d))]
        }
        Concat { axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for (t, need) in inputs.iter().zip(needs) {
                let e = t.shape()[*axis];
                if *need {
                    let mut d = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + e * inner]);
                    }
                    res.push(Some(like(t, d)));
                } else {
                    res.push(None);
                }
                offset += e;
            }
            res
        }
        Reshape { .. } => vec![Some(like(inputs[0], gd.to_vec()))],
        GaussianCdf => elementwise(&|i| special::normal_pdf(inputs[0].data()[i])),
        LogisticCdf => elementwise(&|i| {
            let s = out.data()[i];
            s * (1.0 - s)
        }),
        DiscGaussian { bins } => {
            let (x, mu, ls) = (inputs[0], inputs[1], inputs[2]);
            let n = x.len();
            let (mut dx, mut dmu, mut dls) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let e = gaussian_bin(x.data()[i], GaussianParams::new(mu.data()[i], ls.data()[i]), bins);
                dx[i] = gd[i] * e.d_x;
                dmu[i] = gd[i] * e.d_mu;
                dls[i] = gd[i] * e.d_log_scale;
            }
            vec![
                needs[0].then(|| like(x, dx)),
                needs[1].then(|| like(mu, dmu)),
                needs[2].then(|| like(ls, dls)),
            ]
        }
        DiscLogisticMixture {
            bins,
            components,
            min_log_scale,
        } => {
            let (x, p) = (inputs[0], inputs[1]);
            let (b, c, inner) = mixture_layout(x, p, *components)?;
            let k = *components;
            let mut dx = vec![0.0; x.len()];
            let mut dp = vec![0.0; p.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let pbase = (bi * 3 * k * c + ci * 3 * k) * inner;
                    for s in 0..inner {
                        let xi = (bi * c + ci) * inner + s;
                        let gv = gd[xi];
                        if gv == 0.0 {
                            continue;
                        }
                        let params = mixture_params_at(p.data(), pbase + s, inner, k);
                        let e = logistic_mixture_bin(x.data()[xi], &params, bins, *min_log_scale);
                        dx[xi] = gv * e.d_x;
                        for j in 0..k {
                            dp[pbase + s + j * inner] = gv * e.d_logit[j];
                            dp[pbase + s + (k + j) * inner] = gv * e.d_mu[j];
                            dp[pbase + s + (2 * k + j) * inner] = gv * e.d_log_scale[j];
                        }
                    }
                }
            }
            vec![needs[0].then(|| like(x, dx)), needs[1].then(|| like(p, dp))]
        }
        ClampMin { floor } => elementwise(&|i| if inputs[0].data()[i] >= *floor { 1.0 } else { 0.0 }),
        Blur { sigma, radius } => {
            let a = inputs[0];
            let (h, w) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
            let k = kernels::gaussian_kernel_1d(*sigma, *radius);
            vec![Some(like(a, kernels::blur_planes_adjoint(gd, h, w, &k)))]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_squared_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_at_zero_quarter() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[4]));
        let s = t.sigmoid(x).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::new(vec![3, 3], (0..9).map(|i| i as f64 * 1.5 - 2.0).collect()).unwrap();
        let mut t = Tape::new();
        let i3 = t.constant(Tensor::eye(3));
        let av = t.constant(a.clone());
        let y = t.matmul(i3, av).unwrap();
        assert_eq!(t.value(y), &a);
    }

    #[test]
    fn zero_mask_gives_zero_output() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 3], 1.7));
        let w = t.leaf(Tensor::full(&[3, 4], -0.3));
        let y = t
            .masked_matmul(x, w, Arc::new(Tensor::zeros(&[3, 4])))
            .unwrap();
        assert_eq!(t.value(y).shape(), &[2, 4]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_center_of_ones() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b, None).unwrap();
        let v = t.value(y);
        assert_eq!(v.data()[2 * 5 + 2], 9.0);
        assert_eq!(v.data()[0], 4.0);
        assert_eq!(v.data()[2], 6.0);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 2]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(t.log(a), Err(Error::LogDomain { index: 1, .. })));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[3]));
        let b = t.tanh(a).unwrap();
        assert!(t.backward(b).is_err());
    }

    #[test]
    fn overflow_rejected_as_non_finite() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(1000.0));
        assert!(matches!(t.exp(a), Err(Error::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn leading_axis_broadcast_reduces_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[4, 2], 1.0));
        let b = t.leaf(Tensor::from_vec(vec![0.5, -0.5]));
        let y = t.add(x, b).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }
}
