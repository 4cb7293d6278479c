//! Maximum-likelihood training of AR models and the feature classifier.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::emit::{CsvTable, Provenance};
use crate::error::{Error, Result};
use crate::models::{self, model_from_checkpoint, ArModel, Checkpoint, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 100,
            max_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected adaptive-moment update, in place.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState, cfg: &OptConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || m.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        let pd = p.data_mut();
        for (((pi, &gi), mi), vi) in pd
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Minibatch row indices for `step`: drawn with replacement from a stream
/// keyed by `(seed, step)`, so a resumed run sees the same batches.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Seeded shuffle split into `(train, validation)` index lists.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * validation_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub nll_nats: f64,
    pub bits_per_dim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// `(step, held-out bits/dim)` at each checkpoint.
    pub validation: Vec<(usize, f64)>,
    pub wall_clock_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_bits_per_dim(&self) -> Option<f64> {
        self.steps.last().map(|s| s.bits_per_dim)
    }

    /// Mean bits/dim over the first and last tenth of the logged steps.
    pub fn head_tail_means(&self) -> Option<(f64, f64)> {
        let n = self.steps.len();
        if n < 10 {
            return None;
        }
        let k = n / 10;
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.bits_per_dim).sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..k]), mean(&self.steps[n - k..])))
    }

    /// Mean bits/dim over the last `k` logged steps.
    pub fn tail_mean(&self, k: usize) -> Option<f64> {
        let n = self.steps.len();
        if n == 0 || k == 0 {
            return None;
        }
        let k = k.min(n);
        Some(self.steps[n - k..].iter().map(|r| r.bits_per_dim).sum::<f64>() / k as f64)
    }

    /// Columns `step, nll_nats, bits_per_dim`. Wall-clock is left out so
    /// that equal seeds give equal files.
    pub fn to_csv(&self, provenance: Provenance) -> CsvTable {
        let mut t = CsvTable::new(provenance, &["step", "nll_nats", "bits_per_dim"]);
        for s in &self.steps {
            t.push(vec![s.step as f64, s.nll_nats, s.bits_per_dim]).expect("3 columns");
        }
        t
    }
}

/// Stateful MLE trainer; owns the optimizer state and the step counter.
#[derive(Clone, Debug)]
pub struct MleTrainer {
    pub cfg: OptConfig,
    pub adam: AdamState,
    pub step: usize,
    pub validation: Option<Tensor>,
    pub checkpoint_dir: Option<PathBuf>,
    report: TrainReport,
}

impl MleTrainer {
    pub fn new(model: &dyn ArModel, cfg: OptConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MleTrainer {
            adam: AdamState::new(model.params()),
            cfg,
            step: 0,
            validation: None,
            checkpoint_dir: None,
            report: TrainReport::default(),
        })
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    /// One optimizer step on the batch for the current step index. Returns
    /// the batch mean NLL in nats before the update.
    pub fn step_once(&mut self, model: &mut dyn ArModel, data: &Tensor) -> Result<f64> {
        let n = models::check_batch(model, data)?;
        if n == 0 {
            return Err(Error::invalid("empty dataset"));
        }
        let idx = batch_indices(n, self.cfg.batch_size, self.cfg.seed, self.step);
        let batch = data.select_rows(&idx)?;
        let (nll, grads) = match models::nll_and_grads(model, &batch) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { step: self.step }),
            Err(e) => return Err(e),
        };
        if !nll.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        adam_step(model.params_mut(), &grads, &mut self.adam, &self.cfg)?;
        let bpd = nll / (model.dims() as f64 * std::f64::consts::LN_2);
        self.report.steps.push(StepRecord {
            step: self.step,
            nll_nats: nll,
            bits_per_dim: bpd,
        });
        self.step += 1;
        Ok(nll)
    }

    /// Trains until `until` steps have been taken in total.
    pub fn run_until(&mut self, model: &mut dyn ArModel, data: &Tensor, until: usize) -> Result<&TrainReport> {
        let start = Instant::now();
        while self.step < until {
            self.step_once(model, data)?;
            if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                self.on_checkpoint(model)?;
            }
        }
        self.report.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(&self.report)
    }

    fn on_checkpoint(&mut self, model: &dyn ArModel) -> Result<()> {
        if let Some(v) = &self.validation {
            let bpd = models::bits_per_dim(model, v)?;
            let mean = bpd.iter().sum::<f64>() / bpd.len() as f64;
            self.report.validation.push((self.step, mean));
        }
        if let Some(dir) = &self.checkpoint_dir {
            let path = dir.join(format!("step{:07}.ardx", self.step));
            self.save(model, &path)?;
            self.report.final_checkpoint = Some(path);
        }
        Ok(())
    }

    /// Model parameters plus optimizer state and step counter.
    pub fn to_checkpoint(&self, model: &dyn ArModel) -> Checkpoint {
        let mut ck = model.to_checkpoint();
        ck.meta.insert("train.step".into(), self.step.to_string());
        ck.meta.insert("train.adam_t".into(), self.adam.t.to_string());
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            ck.push(&format!("adam.m.{i}"), m.clone());
            ck.push(&format!("adam.v.{i}"), v.clone());
        }
        ck
    }

    pub fn save(&self, model: &dyn ArModel, path: &Path) -> Result<()> {
        self.to_checkpoint(model).save(path)
    }

    /// Restores a model and a trainer positioned at the saved step.
    pub fn resume(ck: &Checkpoint, cfg: OptConfig) -> Result<(Box<dyn ArModel>, MleTrainer)> {
        let model = model_from_checkpoint(ck)?;
        let mut tr = MleTrainer::new(model.as_ref(), cfg)?;
        tr.step = ck.meta_parse("train.step")?;
        tr.adam.t = ck.meta_parse("train.adam_t")?;
        for i in 0..tr.adam.m.len() {
            tr.adam.m[i] = ck.array(&format!("adam.m.{i}"))?.clone();
            tr.adam.v[i] = ck.array(&format!("adam.v.{i}"))?.clone();
        }
        Ok((model, tr))
    }
}

/// Trains `model` for `cfg.max_steps` steps from scratch.
pub fn train_mle(model: &mut dyn ArModel, data: &Tensor, cfg: &OptConfig) -> Result<TrainReport> {
    let mut tr = MleTrainer::new(model, cfg.clone())?;
    tr.run_until(model, data, cfg.max_steps)?;
    Ok(tr.report.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub conv_channels: usize,
    /// Width of the penultimate (feature) layer.
    pub feature_width: usize,
    pub validation_fraction: f64,
    pub opt: OptConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            conv_channels: 8,
            feature_width: 32,
            validation_fraction: 0.1,
            opt: OptConfig {
                batch_size: 32,
                max_steps: 400,
                ..OptConfig::default()
            },
        }
    }
}

/// Conv 3×3 → tanh → dense → tanh (features) → dense → log-softmax.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub image_shape: [usize; 3],
    pub classes: usize,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub held_out_accuracy: f64,
    pub train_loss: Vec<f64>,
}

impl Classifier {
    fn new(image_shape: [usize; 3], classes: usize, cfg: &ClassifierConfig) -> Result<Self> {
        if cfg.conv_channels == 0 || cfg.feature_width == 0 {
            return Err(Error::invalid("classifier widths must be >= 1"));
        }
        let [c, h, w] = image_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.opt.seed ^ 0xc1a5_5e5);
        let mut gauss = |shape: &[usize], fan_in: usize| {
            let n: usize = shape.iter().product();
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
        };
        let flat = cfg.conv_channels * h * w;
        let mut params = ParamSet::new();
        params.push("conv.w", gauss(&[cfg.conv_channels, c, 3, 3], c * 9));
        params.push("conv.b", Tensor::zeros(&[cfg.conv_channels]));
        params.push("fc1.w", gauss(&[flat, cfg.feature_width], flat));
        params.push("fc1.b", Tensor::zeros(&[cfg.feature_width]));
        params.push("fc2.w", gauss(&[cfg.feature_width, classes], cfg.feature_width));
        params.push("fc2.b", Tensor::zeros(&[classes]));
        Ok(Classifier {
            image_shape,
            classes,
            params,
        })
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        if x.rank() != 4 || x.shape()[1..] != self.image_shape {
            return Err(Error::shape("classifier", x.shape(), &self.image_shape));
        }
        Ok(x.shape()[0])
    }

    /// Records `(features [B, F], log-probabilities [B, K])`.
    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let b = tape.value(x).shape()[0];
        let h = tape.conv2d(x, p[0], p[1], None)?;
        let h = tape.tanh(h)?;
        let flat: usize = tape.value(h).shape()[1..].iter().product();
        let h = tape.reshape(h, &[b, flat])?;
        let f = tape.matmul(h, p[2])?;
        let f = tape.add(f, p[3])?;
        let f = tape.tanh(f)?;
        let z = tape.matmul(f, p[4])?;
        let z = tape.add(z, p[5])?;
        let lp = tape.log_softmax(z)?;
        Ok((f, lp))
    }

    fn eval(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = self.check(x)?;
        let mut feats = Vec::new();
        let mut logp = Vec::new();
        for s in (0..n).step_by(256) {
            let chunk = x.rows(s, 256.min(n - s))?;
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let xv = tape.constant(chunk);
            let (f, lp) = self.forward(&mut tape, &p, xv)?;
            feats.push(tape.value(f).clone());
            logp.push(tape.value(lp).clone());
        }
        Ok((Tensor::concat_rows(&feats)?, Tensor::concat_rows(&logp)?))
    }

    /// Penultimate activations, `[N, feature_width]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.eval(x)?.0)
    }

    /// Class posteriors `p(y|x)`, `[N, classes]`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.eval(x)?.1.map(f64::exp))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.eval(x)?.1;
        Ok(p.data()
            .chunks(self.classes)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != labels.len() {
            return Err(Error::invalid("label count differs from image count"));
        }
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn feature_width(&self) -> usize {
        self.params.get("fc1.b").map_or(0, |t| t.len())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let [c, h, w] = self.image_shape;
        let conv = self.params.get("conv.b").map_or(0, |t| t.len());
        let mut ck = Checkpoint::new("classifier")
            .with_meta("channels", c)
            .with_meta("height", h)
            .with_meta("width", w)
            .with_meta("classes", self.classes)
            .with_meta("conv_channels", conv)
            .with_meta("feature_width", self.feature_width());
        self.params.write_to(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "classifier" {
            return Err(Error::invalid(format!("expected a classifier checkpoint, found {:?}", ck.kind)));
        }
        let cfg = ClassifierConfig {
            conv_channels: ck.meta_parse("conv_channels")?,
            feature_width: ck.meta_parse("feature_width")?,
            ..ClassifierConfig::default()
        };
        let shape = [ck.meta_parse("channels")?, ck.meta_parse("height")?, ck.meta_parse("width")?];
        let mut clf = Classifier::new(shape, ck.meta_parse("classes")?, &cfg)?;
        clf.params.read_from(ck)?;
        Ok(clf)
    }
}

/// Trains the classifier on a seeded split and reports held-out accuracy.
pub fn train_classifier(images: &Tensor, labels: &[usize], cfg: &ClassifierConfig) -> Result<(Classifier, ClassifierReport)> {
    cfg.opt.validate()?;
    if images.rank() != 4 {
        return Err(Error::invalid(format!("classifier expects [N,C,H,W], got {:?}", images.shape())));
    }
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} images", labels.len())));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|s| **s).count()
    };
    if distinct < 2 {
        return Err(Error::invalid("classifier needs at least two classes"));
    }
    let shape = [images.shape()[1], images.shape()[2], images.shape()[3]];
    let mut clf = Classifier::new(shape, classes, cfg)?;
    let (train, val) = split_indices(n, cfg.validation_fraction, cfg.opt.seed);
    let mut adam = AdamState::new(&clf.params);
    let mut losses = Vec::with_capacity(cfg.opt.max_steps);
    for step in 0..cfg.opt.max_steps {
        let pick = batch_indices(train.len(), cfg.opt.batch_size, cfg.opt.seed, step);
        let rows: Vec<usize> = pick.iter().map(|&i| train[i]).collect();
        let x = images.select_rows(&rows)?;
        let mut onehot = Tensor::zeros(&[rows.len(), classes]);
        for (r, &i) in rows.iter().enumerate() {
            onehot.data_mut()[r * classes + labels[i]] = 1.0;
        }
        let mut tape = Tape::new();
        let p = clf.params.bind(&mut tape, true);
        let xv = tape.constant(x);
        let yv = tape.constant(onehot);
        let (_, lp) = clf.forward(&mut tape, &p, xv)?;
        let picked = tape.mul(lp, yv)?;
        let total = tape.sum(picked)?;
        let loss = tape.scale(total, -1.0 / rows.len() as f64)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor> = p.iter().map(|v| g.take(*v).expect("trainable leaf")).collect();
        adam_step(&mut clf.params, &grads, &mut adam, &cfg.opt)?;
        losses.push(lv);
    }
    let held_out_accuracy = if val.is_empty() {
        f64::NAN
    } else {
        let vl: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
        clf.accuracy(&images.select_rows(&val)?, &vl)?
    };
    Ok((
        clf,
        ClassifierReport {
            held_out_accuracy,
            train_loss: losses,
        },
    ))
}
