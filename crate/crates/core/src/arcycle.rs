//! Cycle-consistent translation between two image domains, with frozen
//! autoregressive models supplying the only generative loss.
//!
//! `F` maps domain X to Y and `G` maps Y to X. The objective is
//! `NLL(P_Y, F) + NLL(P_X, G) + β · L_cyc` where
//! `L_cyc = mean|G(F(x)) - x| + mean|F(G(y)) - y|`.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::emit::{ppm_bytes, write_bytes, CsvTable, Provenance};
use crate::error::{Error, Result};
use crate::models::{ArModel, Checkpoint, ParamSet};
use crate::tensor::kernels::{blur_planes, gaussian_kernel_1d};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{adam_step, batch_indices, AdamState, OptConfig};

/// An image-to-image map whose forward pass can be recorded on a tape.
pub trait Mapping: Send + Sync {
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Records the output for a batch `[B, Cin, H, W]`.
    fn forward_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var>;

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params().bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward_on(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}

fn check_channels(op: &'static str, tape: &Tape, x: Var, want: usize) -> Result<usize> {
    let s = tape.value(x).shape();
    if s.len() != 4 || s[1] != want {
        return Err(Error::shape(op, s, &[0, want, 0, 0]));
    }
    Ok(s[0])
}

/// Three same-size 3×3 convolutions with tanh after each; the last tanh
/// bounds outputs to `(-1, 1)`.
#[derive(Clone, Debug)]
pub struct ConvGenerator {
    cin: usize,
    cout: usize,
    hidden: usize,
    seed: u64,
    params: ParamSet,
}

const GENERATOR_KIND: &str = "generator";

impl ConvGenerator {
    pub fn new(cin: usize, cout: usize, hidden: usize, seed: u64) -> Result<Self> {
        if cin == 0 || cout == 0 || hidden == 0 {
            return Err(Error::invalid("generator channel counts must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (l, (i, o)) in [(cin, hidden), (hidden, hidden), (hidden, cout)].into_iter().enumerate() {
            let normal = Normal::new(0.0, 1.0 / ((i * 9) as f64).sqrt()).expect("positive std");
            let w = (0..o * i * 9).map(|_| normal.sample(&mut rng)).collect();
            params.push(format!("conv{l}.w"), Tensor::new(vec![o, i, 3, 3], w)?);
            params.push(format!("conv{l}.b"), Tensor::zeros(&[o]));
        }
        Ok(ConvGenerator {
            cin,
            cout,
            hidden,
            seed,
            params,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(GENERATOR_KIND)
            .with_meta("cin", self.cin)
            .with_meta("cout", self.cout)
            .with_meta("hidden", self.hidden)
            .with_meta("seed", self.seed);
        self.params.write_to(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != GENERATOR_KIND {
            return Err(Error::invalid(format!("expected a generator checkpoint, found {:?}", ck.kind)));
        }
        let mut g = ConvGenerator::new(
            ck.meta_parse("cin")?,
            ck.meta_parse("cout")?,
            ck.meta_parse("hidden")?,
            ck.meta_parse("seed")?,
        )?;
        g.params.read_from(ck)?;
        Ok(g)
    }
}

impl Mapping for ConvGenerator {
    fn in_channels(&self) -> usize {
        self.cin
    }
    fn out_channels(&self) -> usize {
        self.cout
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_on(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        check_channels("generator", tape, x, self.cin)?;
        let mut h = x;
        for l in 0..3 {
            let z = tape.conv2d(h, p[2 * l], p[2 * l + 1], None)?;
            h = tape.tanh(z)?;
        }
        Ok(h)
    }
}

/// Returns its input unchanged.
#[derive(Clone, Debug)]
pub struct IdentityMap {
    channels: usize,
    params: ParamSet,
}

impl IdentityMap {
    pub fn new(channels: usize) -> Self {
        IdentityMap {
            channels,
            params: ParamSet::new(),
        }
    }
}

impl Mapping for IdentityMap {
    fn in_channels(&self) -> usize {
        self.channels
    }
    fn out_channels(&self) -> usize {
        self.channels
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward_on(&self, tape: &mut Tape, _p: &[Var], x: Var) -> Result<Var> {
        check_channels("identity", tape, x, self.channels)?;
        Ok(x)
    }
}

/// Maps every input to one constant image.
#[derive(Clone, Debug)]
pub struct ConstantMap {
    cin: usize,
    cout: usize,
    value: f64,
    params: ParamSet,
}

impl ConstantMap {
    pub fn new(cin: usize, cout: usize, value: f64) -> Self {
        ConstantMap {
            cin,
            cout,
            value,
            params: ParamSet::new(),
        }
    }
}

impl Mapping for ConstantMap {
    fn in_channels(&self) -> usize {
        self.cin
    }
    fn out_channels(&self) -> usize {
        self.cout
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward_on(&self, tape: &mut Tape, _p: &[Var], x: Var) -> Result<Var> {
        check_channels("constant", tape, x, self.cin)?;
        let first = tape.slice(x, 1, 0, 1)?;
        let zero = tape.scale(first, 0.0)?;
        let plane = tape.add_scalar(zero, self.value)?;
        if self.cout == 1 {
            Ok(plane)
        } else {
            tape.concat(&vec![plane; self.cout], 1)
        }
    }
}

/// Separable Gaussian blur with radius `⌈3σ⌉` and reflected edges.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("blur sigma {sigma} must be > 0")));
    }
    gaussian_blur_truncated(image, sigma, (3.0 * sigma).ceil() as usize)
}

/// [`gaussian_blur`] with an explicit kernel radius.
pub fn gaussian_blur_truncated(image: &Tensor, sigma: f64, radius: usize) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("blur sigma {sigma} must be > 0")));
    }
    if image.rank() < 2 {
        return Err(Error::invalid("blur needs at least two axes"));
    }
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let k = gaussian_kernel_1d(sigma, radius);
    Tensor::new(s.to_vec(), blur_planes(image.data(), h, w, &k))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NllOnly,
    CycOnly,
    Blur,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NllOnly => "nll_only",
            Ablation::CycOnly => "cyc_only",
            Ablation::Blur => "blur",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Ablation::Full, Ablation::NllOnly, Ablation::CycOnly, Ablation::Blur]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArCycleConfig {
    /// Cycle weight; `None` sets it once at step 0 so that
    /// `β · L_cyc = L_NLL`.
    pub beta: Option<f64>,
    pub ablation: Ablation,
    pub blur_sigma: f64,
    pub snapshot_every: usize,
    /// Paired supervised steps before the cycle objective.
    pub pretrain_steps: usize,
    pub steps: usize,
    pub snapshot_count: usize,
    pub opt: OptConfig,
}

impl Default for ArCycleConfig {
    fn default() -> Self {
        ArCycleConfig {
            beta: None,
            ablation: Ablation::Full,
            blur_sigma: 1.0,
            snapshot_every: 100,
            pretrain_steps: 0,
            steps: 500,
            snapshot_count: 4,
            opt: OptConfig {
                batch_size: 8,
                ..OptConfig::default()
            },
        }
    }
}

impl ArCycleConfig {
    pub fn validate(&self) -> Result<()> {
        self.opt.validate()?;
        if let Some(b) = self.beta {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::invalid(format!("beta {b} must be finite and >= 0")));
            }
        }
        if self.ablation == Ablation::Blur && !(self.blur_sigma > 0.0) {
            return Err(Error::invalid("blur ablation needs blur_sigma > 0"));
        }
        if self.snapshot_count == 0 {
            return Err(Error::invalid("snapshot_count must be >= 1"));
        }
        Ok(())
    }
}

/// The two frozen density models.
pub struct Judges<'a> {
    /// Density over domain X.
    pub px: &'a dyn ArModel,
    /// Density over domain Y.
    pub py: &'a dyn ArModel,
}

/// Recorded loss terms for one batch.
struct Terms {
    l_cyc: Var,
    nll_x: Var,
    nll_y: Var,
}

struct Bound {
    f: Vec<Var>,
    g: Vec<Var>,
    px: Vec<Var>,
    py: Vec<Var>,
}

fn bind_all(tape: &mut Tape, f: &dyn Mapping, g: &dyn Mapping, judges: &Judges, trainable: bool) -> Bound {
    Bound {
        f: f.params().bind(tape, trainable),
        g: g.params().bind(tape, trainable),
        px: judges.px.params().bind(tape, false),
        py: judges.py.params().bind(tape, false),
    }
}

fn mean_nll(tape: &mut Tape, p: &dyn ArModel, params: &[Var], x: Var) -> Result<Var> {
    let lp = p.log_prob_on(tape, params, x)?;
    let m = tape.mean(lp)?;
    tape.scale(m, -1.0)
}

fn mean_abs_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

fn record_terms(
    tape: &mut Tape,
    f: &dyn Mapping,
    g: &dyn Mapping,
    judges: &Judges,
    b: &Bound,
    x: Var,
    y: Var,
    blur: Option<f64>,
) -> Result<Terms> {
    let fx = f.forward_on(tape, &b.f, x)?;
    let gy = g.forward_on(tape, &b.g, y)?;
    let gfx = g.forward_on(tape, &b.g, fx)?;
    let fgy = f.forward_on(tape, &b.f, gy)?;
    let c1 = mean_abs_diff(tape, gfx, x)?;
    let c2 = mean_abs_diff(tape, fgy, y)?;
    let l_cyc = tape.add(c1, c2)?;
    let (fx_n, gy_n) = match blur {
        Some(s) => (tape.blur(fx, s)?, tape.blur(gy, s)?),
        None => (fx, gy),
    };
    let nll_y = mean_nll(tape, judges.py, &b.py, fx_n)?;
    let nll_x = mean_nll(tape, judges.px, &b.px, gy_n)?;
    Ok(Terms { l_cyc, nll_x, nll_y })
}

fn record_objective(tape: &mut Tape, t: &Terms, ablation: Ablation, beta: f64) -> Result<Var> {
    let nll = tape.add(t.nll_y, t.nll_x)?;
    match ablation {
        Ablation::CycOnly => Ok(t.l_cyc),
        Ablation::NllOnly => Ok(nll),
        Ablation::Full | Ablation::Blur => {
            let c = tape.scale(t.l_cyc, beta)?;
            tape.add(nll, c)
        }
    }
}

/// `mean|G(F(x)) - x| + mean|F(G(y)) - y|`.
pub fn cycle_loss(f: &dyn Mapping, g: &dyn Mapping, batch_x: &Tensor, batch_y: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (fp, gp) = (f.params().bind(&mut tape, false), g.params().bind(&mut tape, false));
    let x = tape.constant(batch_x.clone());
    let y = tape.constant(batch_y.clone());
    let fx = f.forward_on(&mut tape, &fp, x)?;
    let gfx = g.forward_on(&mut tape, &gp, fx)?;
    let gy = g.forward_on(&mut tape, &gp, y)?;
    let fgy = f.forward_on(&mut tape, &fp, gy)?;
    if tape.value(gfx).shape() != batch_x.shape() || tape.value(fgy).shape() != batch_y.shape() {
        return Err(Error::shape("cycle_loss", tape.value(gfx).shape(), batch_x.shape()));
    }
    let c1 = mean_abs_diff(&mut tape, gfx, x)?;
    let c2 = mean_abs_diff(&mut tape, fgy, y)?;
    let total = tape.add(c1, c2)?;
    tape.value(total).item()
}

/// Mean `-log P(F(x))` in nats.
pub fn nll_loss(p: &dyn ArModel, f: &dyn Mapping, batch_x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let fp = f.params().bind(&mut tape, false);
    let pp = p.params().bind(&mut tape, false);
    let x = tape.constant(batch_x.clone());
    let fx = f.forward_on(&mut tape, &fp, x)?;
    let l = mean_nll(&mut tape, p, &pp, fx)?;
    tape.value(l).item()
}

/// `NLL(P_Y, F) + NLL(P_X, G) + β · L_cyc`.
pub fn arcycle_total(
    f: &dyn Mapping,
    g: &dyn Mapping,
    judges: &Judges,
    batch_x: &Tensor,
    batch_y: &Tensor,
    beta: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = bind_all(&mut tape, f, g, judges, false);
    let x = tape.constant(batch_x.clone());
    let y = tape.constant(batch_y.clone());
    let t = record_terms(&mut tape, f, g, judges, &b, x, y, None)?;
    let obj = record_objective(&mut tape, &t, Ablation::Full, beta)?;
    tape.value(obj).item()
}

/// Loss values of one batch plus gradients for `F` then `G` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGradients {
    pub l_cyc: f64,
    pub nll_x: f64,
    pub nll_y: f64,
    pub objective: f64,
    pub f_grads: Vec<Tensor>,
    pub g_grads: Vec<Tensor>,
}

pub fn arcycle_gradients(
    f: &dyn Mapping,
    g: &dyn Mapping,
    judges: &Judges,
    batch_x: &Tensor,
    batch_y: &Tensor,
    ablation: Ablation,
    beta: f64,
    blur_sigma: f64,
) -> Result<StepGradients> {
    let mut tape = Tape::new();
    let b = bind_all(&mut tape, f, g, judges, true);
    let x = tape.constant(batch_x.clone());
    let y = tape.constant(batch_y.clone());
    let blur = (ablation == Ablation::Blur).then_some(blur_sigma);
    let t = record_terms(&mut tape, f, g, judges, &b, x, y, blur)?;
    let obj = record_objective(&mut tape, &t, ablation, beta)?;
    let mut grads = tape.backward(obj)?;
    let mut take = |vars: &[Var], ps: &ParamSet| -> Vec<Tensor> {
        vars.iter()
            .zip(ps.tensors())
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };
    let f_grads = take(&b.f, f.params());
    let g_grads = take(&b.g, g.params());
    Ok(StepGradients {
        l_cyc: tape.value(t.l_cyc).item()?,
        nll_x: tape.value(t.nll_x).item()?,
        nll_y: tape.value(t.nll_y).item()?,
        objective: tape.value(obj).item()?,
        f_grads,
        g_grads,
    })
}

/// Unpaired domain samples plus the paired targets used for pretraining.
#[derive(Clone, Debug)]
pub struct ArCycleData {
    pub x: Tensor,
    /// `F`'s pretraining target for each row of `x`.
    pub x_target: Tensor,
    pub y: Tensor,
    /// `G`'s pretraining target for each row of `y`.
    pub y_target: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArCycleRow {
    pub iteration: usize,
    pub l_cyc: f64,
    pub nll_x_bits: f64,
    pub nll_y_bits: f64,
}

/// Real, translated, and reconstructed images for both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub real_x: Tensor,
    pub fx: Tensor,
    pub gfx: Tensor,
    pub real_y: Tensor,
    pub gy: Tensor,
    pub fgy: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArCycleReport {
    pub beta: f64,
    pub rows: Vec<ArCycleRow>,
    pub snapshots: Vec<Snapshot>,
    pub pretrain_loss: Vec<f64>,
}

impl ArCycleReport {
    pub fn to_csv(&self, provenance: Provenance) -> CsvTable {
        let mut t = CsvTable::new(provenance, &["iteration", "l_cyc", "nll_x_bits", "nll_y_bits"]);
        for r in &self.rows {
            t.push(vec![r.iteration as f64, r.l_cyc, r.nll_x_bits, r.nll_y_bits])
                .expect("4 columns");
        }
        t
    }

    /// Mean of a column over the last `k` rows.
    pub fn tail_mean(&self, k: usize, pick: impl Fn(&ArCycleRow) -> f64) -> Option<f64> {
        let n = self.rows.len();
        if n == 0 || k == 0 {
            return None;
        }
        let k = k.min(n);
        Some(self.rows[n - k..].iter().map(pick).sum::<f64>() / k as f64)
    }

    /// Writes `snap_<iteration>_x.ppm` and `snap_<iteration>_y.ppm`.
    pub fn write_snapshots(&self, dir: &Path, lo: f64, hi: f64) -> Result<()> {
        for s in &self.snapshots {
            let x = triptych(&[&s.real_x, &s.fx, &s.gfx])?;
            let y = triptych(&[&s.real_y, &s.gy, &s.fgy])?;
            for (name, (data, h, w)) in [("x", x), ("y", y)] {
                let bytes = ppm_bytes(&data, h, w, lo, hi)?;
                write_bytes(&dir.join(format!("snap_{:06}_{name}.ppm", s.iteration)), &bytes)?;
            }
        }
        Ok(())
    }
}

/// Tiles `[B, C, H, W]` batches as columns (one row per example) in planar
/// RGB; single-channel tiles are replicated. Gaps are filled with `lo`.
fn triptych(cols: &[&Tensor]) -> Result<(Vec<f64>, usize, usize)> {
    let s = cols[0].shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    for c in cols {
        let cs = c.shape();
        if cs.len() != 4 || cs[0] != b || cs[2] != h || cs[3] != w || !(cs[1] == 1 || cs[1] == 3) {
            return Err(Error::shape("triptych", cs, s));
        }
    }
    let gap = 1;
    let (tw, th) = (cols.len() * (w + gap) - gap, b * (h + gap) - gap);
    let lo = -1.0;
    let mut out = vec![lo; 3 * tw * th];
    for (ci, t) in cols.iter().enumerate() {
        let ch = t.shape()[1];
        for e in 0..b {
            for r in 0..h {
                for c in 0..w {
                    for rgb in 0..3 {
                        let src = if ch == 1 { 0 } else { rgb };
                        let v = t.data()[((e * ch + src) * h + r) * w + c];
                        let (row, col) = (e * (h + gap) + r, ci * (w + gap) + c);
                        out[rgb * tw * th + row * tw + col] = v;
                    }
                }
            }
        }
    }
    Ok((out, th, tw))
}

fn take_snapshot(f: &dyn Mapping, g: &dyn Mapping, sx: &Tensor, sy: &Tensor, iteration: usize) -> Result<Snapshot> {
    let fx = f.apply(sx)?;
    let gfx = g.apply(&fx)?;
    let gy = g.apply(sy)?;
    let fgy = f.apply(&gy)?;
    Ok(Snapshot {
        iteration,
        real_x: sx.clone(),
        fx,
        gfx,
        real_y: sy.clone(),
        gy,
        fgy,
    })
}

const Y_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Supervised L1 fit of `F` to `x_target` and `G` to `y_target`.
fn pretrain(f: &mut dyn Mapping, g: &mut dyn Mapping, data: &ArCycleData, cfg: &ArCycleConfig) -> Result<Vec<f64>> {
    let mut fa = AdamState::new(f.params());
    let mut ga = AdamState::new(g.params());
    let (nx, ny) = (data.x.shape()[0], data.y.shape()[0]);
    let mut losses = Vec::with_capacity(cfg.pretrain_steps);
    for step in 0..cfg.pretrain_steps {
        let ix = batch_indices(nx, cfg.opt.batch_size, cfg.opt.seed ^ 0x5052_4554, step);
        let iy = batch_indices(ny, cfg.opt.batch_size, cfg.opt.seed ^ 0x5052_4554 ^ Y_STREAM_SALT, step);
        let mut tape = Tape::new();
        let fp = f.params().bind(&mut tape, true);
        let gp = g.params().bind(&mut tape, true);
        let x = tape.constant(data.x.select_rows(&ix)?);
        let tx = tape.constant(data.x_target.select_rows(&ix)?);
        let y = tape.constant(data.y.select_rows(&iy)?);
        let ty = tape.constant(data.y_target.select_rows(&iy)?);
        let fx = f.forward_on(&mut tape, &fp, x)?;
        let gy = g.forward_on(&mut tape, &gp, y)?;
        let a = mean_abs_diff(&mut tape, fx, tx)?;
        let b = mean_abs_diff(&mut tape, gy, ty)?;
        let loss = tape.add(a, b)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = tape.backward(loss)?;
        let fg: Vec<Tensor> = fp.iter().map(|v| grads.take(*v).expect("leaf")).collect();
        let gg: Vec<Tensor> = gp.iter().map(|v| grads.take(*v).expect("leaf")).collect();
        adam_step(f.params_mut(), &fg, &mut fa, &cfg.opt)?;
        adam_step(g.params_mut(), &gg, &mut ga, &cfg.opt)?;
        losses.push(lv);
    }
    Ok(losses)
}

/// Reports a non-finite value met during `step` as a loss failure there.
fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// Trains `F` and `G` jointly; the density models stay frozen.
pub fn train_arcycle(
    f: &mut dyn Mapping,
    g: &mut dyn Mapping,
    judges: &Judges,
    data: &ArCycleData,
    cfg: &ArCycleConfig,
) -> Result<ArCycleReport> {
    cfg.validate()?;
    let (nx, ny) = (data.x.shape()[0], data.y.shape()[0]);
    if nx == 0 || ny == 0 {
        return Err(Error::invalid("both domains need examples"));
    }
    let mut report = ArCycleReport {
        pretrain_loss: pretrain(f, g, data, cfg)?,
        ..Default::default()
    };
    let sx = data.x.rows(0, cfg.snapshot_count.min(nx))?;
    let sy = data.y.rows(0, cfg.snapshot_count.min(ny))?;
    let bits_x = 1.0 / (judges.px.dims() as f64 * std::f64::consts::LN_2);
    let bits_y = 1.0 / (judges.py.dims() as f64 * std::f64::consts::LN_2);
    let mut fa = AdamState::new(f.params());
    let mut ga = AdamState::new(g.params());
    let mut beta = cfg.beta.unwrap_or(0.0);
    for it in 0..cfg.steps {
        if cfg.snapshot_every > 0 && it % cfg.snapshot_every == 0 {
            report.snapshots.push(take_snapshot(f, g, &sx, &sy, it).map_err(|e| at_step(e, it))?);
        }
        let ix = batch_indices(nx, cfg.opt.batch_size, cfg.opt.seed, it);
        let iy = batch_indices(ny, cfg.opt.batch_size, cfg.opt.seed ^ Y_STREAM_SALT, it);
        let (bx, by) = (data.x.select_rows(&ix)?, data.y.select_rows(&iy)?);
        if it == 0 && cfg.beta.is_none() {
            let mut tape = Tape::new();
            let b = bind_all(&mut tape, f, g, judges, false);
            let (x, y) = (tape.constant(bx.clone()), tape.constant(by.clone()));
            let blur = (cfg.ablation == Ablation::Blur).then_some(cfg.blur_sigma);
            let t = record_terms(&mut tape, f, g, judges, &b, x, y, blur).map_err(|e| at_step(e, it))?;
            let nll = tape.value(t.nll_x).item()? + tape.value(t.nll_y).item()?;
            let cyc = tape.value(t.l_cyc).item()?;
            beta = if cyc > 0.0 { nll / cyc } else { 1.0 };
        }
        let sg = arcycle_gradients(f, g, judges, &bx, &by, cfg.ablation, beta, cfg.blur_sigma)
            .map_err(|e| at_step(e, it))?;
        if !sg.objective.is_finite() {
            return Err(Error::NonFiniteLoss { step: it });
        }
        report.rows.push(ArCycleRow {
            iteration: it,
            l_cyc: sg.l_cyc,
            nll_x_bits: sg.nll_x * bits_x,
            nll_y_bits: sg.nll_y * bits_y,
        });
        adam_step(f.params_mut(), &sg.f_grads, &mut fa, &cfg.opt)?;
        adam_step(g.params_mut(), &sg.g_grads, &mut ga, &cfg.opt)?;
    }
    report.beta = beta;
    report.snapshots.push(take_snapshot(f, g, &sx, &sy, cfg.steps).map_err(|e| at_step(e, cfg.steps))?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihoods::BinSpec;
    use crate::models::UniformModel;

    fn rand_images(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_cycle_is_zero() {
        let id = IdentityMap::new(1);
        let x = rand_images(&[2, 1, 4, 4], 0);
        assert_eq!(cycle_loss(&id, &id, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn constant_zero_cycle_is_mean_abs() {
        let f = ConstantMap::new(3, 1, 0.0);
        let g = ConstantMap::new(1, 3, 0.0);
        let x = rand_images(&[2, 3, 4, 4], 1);
        let y = rand_images(&[3, 1, 4, 4], 2);
        let want = x.data().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
            + y.data().iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64;
        assert!((cycle_loss(&f, &g, &x, &y).unwrap() - want).abs() < 1e-12);
        // the swapped problem has the same value
        assert!((cycle_loss(&g, &f, &y, &x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_judge_nll_is_exact() {
        let p = UniformModel::new(&[1, 4, 4], BinSpec::image()).unwrap();
        let f = ConvGenerator::new(3, 1, 4, 0).unwrap();
        let x = rand_images(&[3, 3, 4, 4], 3);
        let nll = nll_loss(&p, &f, &x).unwrap();
        assert!((nll - 16.0 * 256f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn blur_preserves_constants() {
        let c = Tensor::full(&[1, 2, 7, 9], 0.3);
        let b = gaussian_blur(&c, 1.3).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn generator_checkpoint_round_trip() {
        let g = ConvGenerator::new(1, 3, 5, 4).unwrap();
        let back = ConvGenerator::from_checkpoint(&Checkpoint::from_bytes(&g.to_checkpoint().to_bytes().unwrap()).unwrap())
            .unwrap();
        assert!(g.params().bitwise_eq(back.params()));
    }

    #[test]
    fn ablation_names_parse() {
        for a in ["full", "nll_only", "cyc_only", "blur"] {
            assert_eq!(a.parse::<Ablation>().unwrap().name(), a);
        }
        assert!("gan".parse::<Ablation>().is_err());
    }
}
