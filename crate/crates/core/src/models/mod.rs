//! Autoregressive density models.
//!
//! Both models expose the same surface through [`ArModel`]: exact
//! per-example log-probability recorded on a [`Tape`] (so gradients reach
//! parameters and inputs alike), the raw conditional parameters, and
//! ancestral sampling.

pub mod checkpoint;
pub mod made;
pub mod pixel;

use std::path::Path;

use rayon::prelude::*;

pub use checkpoint::Checkpoint;
pub use made::{build_made_masks, MadeConfig, MadeModel};
pub use pixel::{pixel_receptive_field_check, MaskType, PixelArConfig, PixelArModel};

use crate::error::{Error, Result};
use crate::likelihoods::BinSpec;
use crate::tensor::{Tape, Tensor, Var};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every tensor on `tape`, as leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Copies the arrays into `ck` under their own names.
    pub fn write_to(&self, ck: &mut Checkpoint) {
        for (n, t) in &self.entries {
            ck.push(n, t.clone());
        }
    }

    /// Overwrites each tensor with the equally named array from `ck`.
    pub fn read_from(&mut self, ck: &Checkpoint) -> Result<()> {
        for (n, t) in &mut self.entries {
            let src = ck.array(n)?;
            if src.shape() != t.shape() {
                return Err(Error::shape("checkpoint parameter", src.shape(), t.shape()));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Bitwise equality, treating `-0.0` and `0.0` as different.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((n1, a), (n2, b))| {
                n1 == n2
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// A discretized autoregressive density over fixed-shape examples.
pub trait ArModel: Send + Sync {
    /// Short identifier stored in checkpoints.
    fn kind(&self) -> &'static str;

    /// Shape of a single example (no batch axis).
    fn example_shape(&self) -> &[usize];

    fn dims(&self) -> usize {
        self.example_shape().iter().product()
    }

    fn bins(&self) -> &BinSpec;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Records per-example `log p(x)` in nats, shape `[B]`, using the
    /// supplied parameter nodes (bound in [`ParamSet`] order).
    fn log_prob_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var>;

    /// Raw conditional parameters for a batch, as emitted by the head.
    fn conditionals(&self, x: &Tensor) -> Result<Tensor>;

    /// Ancestral samples; every value is a bin center.
    fn sample(&self, n: usize, seed: u64) -> Result<Tensor>;

    fn to_checkpoint(&self) -> Checkpoint;
}

/// Rejects a batch whose trailing shape differs from the model's.
pub fn check_batch(model: &dyn ArModel, x: &Tensor) -> Result<usize> {
    let es = model.example_shape();
    if x.rank() != es.len() + 1 || &x.shape()[1..] != es {
        let mut want = vec![0];
        want.extend_from_slice(es);
        return Err(Error::shape(model.kind(), x.shape(), &want));
    }
    Ok(x.shape()[0])
}

const EVAL_CHUNK: usize = 256;

/// Per-example `log p(x)` in nats, evaluated in independent chunks.
pub fn logprob(model: &dyn ArModel, x: &Tensor) -> Result<Vec<f64>> {
    let n = check_batch(model, x)?;
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts: Vec<Result<Vec<f64>>> = starts
        .par_iter()
        .map(|&s| {
            let chunk = x.rows(s, EVAL_CHUNK.min(n - s))?;
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape, false);
            let xv = tape.constant(chunk);
            let lp = model.log_prob_on(&mut tape, &p, xv)?;
            Ok(tape.value(lp).data().to_vec())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Per-example NLL in bits/dim.
pub fn bits_per_dim(model: &dyn ArModel, x: &Tensor) -> Result<Vec<f64>> {
    let scale = 1.0 / (model.dims() as f64 * std::f64::consts::LN_2);
    Ok(logprob(model, x)?.into_iter().map(|lp| -lp * scale).collect())
}

/// `log p(x)` per example together with `∇_x Σ log p(x)`.
pub fn input_gradient(model: &dyn ArModel, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    check_batch(model, x)?;
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let xv = tape.leaf(x.clone());
    let lp = model.log_prob_on(&mut tape, &p, xv)?;
    let total = tape.sum(lp)?;
    let mut g = tape.backward(total)?;
    let grad = g.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((tape.value(lp).data().to_vec(), grad))
}

/// Mean NLL in nats over the batch and its gradient for every parameter.
pub fn nll_and_grads(model: &dyn ArModel, x: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    check_batch(model, x)?;
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let lp = model.log_prob_on(&mut tape, &p, xv)?;
    let mean = tape.mean(lp)?;
    let loss = tape.scale(mean, -1.0)?;
    let mut g = tape.backward(loss)?;
    let grads = p
        .iter()
        .zip(model.params().tensors())
        .map(|(v, t)| g.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((tape.value(loss).item()?, grads))
}

/// Writes the model checkpoint to `path`.
pub fn save_model(model: &dyn ArModel, path: &Path) -> Result<()> {
    model.to_checkpoint().save(path)
}

/// Rebuilds whichever model kind the checkpoint names.
pub fn load_model(path: &Path) -> Result<Box<dyn ArModel>> {
    let ck = Checkpoint::load(path)?;
    model_from_checkpoint(&ck)
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Box<dyn ArModel>> {
    match ck.kind.as_str() {
        made::KIND => Ok(Box::new(MadeModel::from_checkpoint(ck)?)),
        pixel::KIND => Ok(Box::new(PixelArModel::from_checkpoint(ck)?)),
        UNIFORM_KIND => Ok(Box::new(UniformModel::from_checkpoint(ck)?)),
        other => Err(Error::invalid(format!("unknown model kind {other:?}"))),
    }
}

/// Inverse-CDF draw from unnormalized log weights.
pub(crate) fn draw_index(log_w: &[f64], u: f64) -> usize {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if target < acc {
            return i;
        }
    }
    w.len() - 1
}

const UNIFORM_KIND: &str = "uniform";

/// Assigns every bin of every dimension the same mass. Has no parameters.
#[derive(Clone, Debug)]
pub struct UniformModel {
    shape: Vec<usize>,
    bins: BinSpec,
    params: ParamSet,
}

impl UniformModel {
    pub fn new(example_shape: &[usize], bins: BinSpec) -> Result<Self> {
        if example_shape.is_empty() || example_shape.contains(&0) {
            return Err(Error::invalid(format!("bad example shape {example_shape:?}")));
        }
        Ok(UniformModel {
            shape: example_shape.to_vec(),
            bins,
            params: ParamSet::new(),
        })
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let shape: Vec<usize> = ck
            .meta("shape")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::invalid("bad uniform shape")))
            .collect::<Result<_>>()?;
        let bins = BinSpec::new(ck.meta_parse("lo")?, ck.meta_parse("hi")?, ck.meta_parse("count")?)?;
        Self::new(&shape, bins)
    }
}

impl ArModel for UniformModel {
    fn kind(&self) -> &'static str {
        UNIFORM_KIND
    }
    fn example_shape(&self) -> &[usize] {
        &self.shape
    }
    fn bins(&self) -> &BinSpec {
        &self.bins
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn log_prob_on(&self, tape: &mut Tape, _params: &[Var], x: Var) -> Result<Var> {
        let b = tape.value(x).shape()[0];
        let flat = tape.reshape(x, &[b, self.dims()])?;
        let zero = tape.scale(flat, 0.0)?;
        let s = tape.sum_last_axis(zero)?;
        tape.add_scalar(s, -(self.dims() as f64) * (self.bins.count() as f64).ln())
    }

    fn conditionals(&self, x: &Tensor) -> Result<Tensor> {
        let b = check_batch(self, x)?;
        Ok(Tensor::zeros(&[b, 1]))
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        use rand::{Rng, SeedableRng};
        if n == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * self.dims())
            .map(|_| self.bins.center(rng.random_range(0..self.bins.count())))
            .collect();
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shape);
        Tensor::new(shape, data)
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let shape = self.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        Checkpoint::new(UNIFORM_KIND)
            .with_meta("shape", shape)
            .with_meta("lo", self.bins.lo())
            .with_meta("hi", self.bins.hi())
            .with_meta("count", self.bins.count())
    }
}
