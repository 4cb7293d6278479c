//! One runner per CLI subcommand. Each reads a [`RunConfig`], writes its
//! artifacts under the configured output directory, and returns the headline
//! numbers as an [`Outcome`].

use std::path::{Path, PathBuf};

use crate::arcycle::{train_arcycle, Ablation, ArCycleConfig, ArCycleData, ConvGenerator, Judges, Mapping};
use crate::detection::{
    detection_table, fit_ccg, fit_interval, perceptual_curve, CcgConfig, DetectionMatrix, DetectorSet, IntervalKind,
};
use crate::emit::{fmt_f64, pgm_bytes, ppm_bytes, write_bytes, write_text, CsvTable, Provenance};
use crate::error::{Error, Result};
use crate::likelihoods::{discretized_gaussian_entropy, BinSpec, GaussianParams};
use crate::models::{
    bits_per_dim, load_model, ArModel, Checkpoint, MadeConfig, MadeModel, PixelArConfig,
    PixelArModel,
};
use crate::sample_opt::{gradient_field, optimize_samples, probe_start_set, GradField, ProbeKind, TrajectoryRecord};
use crate::tensor::Tensor;
use crate::training::{train_classifier, ClassifierConfig, MleTrainer, OptConfig, TrainReport};

use super::config::{ExperimentKind, RunConfig};
use super::data::{
    colorize_mnist, gen_manifold2d, load_idx, load_idx_labels, make_probe_images, synthetic_digits, synthetic_shapes,
    Dataset, ProbeImageKind,
};

/// Files written by a run and its headline numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub kind: ExperimentKind,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub metrics: Vec<(String, f64)>,
}

impl Outcome {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Files with the given extension, in write order.
    pub fn files_with_extension(&self, ext: &str) -> Vec<&Path> {
        self.files
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == ext))
            .map(PathBuf::as_path)
            .collect()
    }
}

struct Run {
    kind: ExperimentKind,
    seed: u64,
    dir: PathBuf,
    files: Vec<PathBuf>,
    metrics: Vec<(String, f64)>,
}

impl Run {
    fn start(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.out_dir()?;
        let mut run = Run {
            kind: cfg.kind,
            seed: cfg.seed()?,
            dir,
            files: Vec::new(),
            metrics: Vec::new(),
        };
        run.text("config.txt", &cfg.render())?;
        Ok(run)
    }

    fn prov(&self) -> Provenance {
        Provenance::new(self.kind.name(), self.seed)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn csv(&mut self, name: &str, table: &CsvTable) -> Result<()> {
        let p = self.path(name);
        table.save(&p)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        write_text(&p, text)
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        write_bytes(&p, bytes)
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        let p = self.path(name);
        ck.save(&p)
    }

    fn metric(&mut self, name: impl Into<String>, v: f64) {
        self.metrics.push((name.into(), v));
    }

    fn finish(mut self) -> Result<Outcome> {
        let mut s = String::new();
        for line in [
            format!("# kind={}", self.kind),
            format!("# seed={}", self.seed),
            format!("# version={}", crate::emit::ARTIFACT_VERSION),
            "metric,value".to_string(),
        ] {
            s.push_str(&line);
            s.push('\n');
        }
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k},{}\n", fmt_f64(*v)));
        }
        self.text("metrics.csv", &s)?;
        Ok(Outcome {
            kind: self.kind,
            out_dir: self.dir,
            files: self.files,
            metrics: self.metrics,
        })
    }
}

/// Runs the experiment selected by `cfg.kind`.
pub fn run_experiment(cfg: &RunConfig) -> Result<Outcome> {
    match cfg.kind {
        ExperimentKind::Train => run_train(cfg),
        ExperimentKind::Heatmap => run_heatmap(cfg),
        ExperimentKind::Optimize => run_optimize(cfg),
        ExperimentKind::Detect => run_detect(cfg),
        ExperimentKind::Arcycle => run_arcycle(cfg),
        ExperimentKind::Report => run_report(cfg),
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Synthetic digits shaped like `example` (`[1|3, 14|28, 14|28]`).
fn digits_like(n: usize, seed: u64, example: &[usize]) -> Result<Dataset> {
    let downscale = match example {
        [_, 14, 14] => true,
        [_, 28, 28] => false,
        _ => return Err(config_err(format!("no digit corpus matches example shape {example:?}"))),
    };
    let gray = synthetic_digits(n, seed, downscale)?;
    match example[0] {
        1 => Ok(gray),
        3 => colorize_mnist(&gray, seed ^ 0xc010),
        c => Err(config_err(format!("no digit corpus with {c} channels"))),
    }
}

fn shapes_like(n: usize, seed: u64, example: &[usize]) -> Result<Dataset> {
    let gray = synthetic_shapes(n, seed, example[1] == 14)?;
    if example[0] == 3 {
        colorize_mnist(&gray, seed ^ 0xc010)
    } else {
        Ok(gray)
    }
}

fn opt(cfg: &RunConfig, steps: &str, batch: &str, lr: &str, seed: u64) -> Result<OptConfig> {
    let o = OptConfig {
        max_steps: cfg.get(steps)?,
        batch_size: cfg.get(batch)?,
        learning_rate: cfg.get(lr)?,
        seed,
        ..OptConfig::default()
    };
    o.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(o)
}

/// Fits a default pixel model to `data`, saving `<stem>.ardx` and `<stem>_train.csv`.
fn fit_pixel(run: &mut Run, stem: &str, data: &Dataset, opt: OptConfig) -> Result<PixelArModel> {
    let s = data.example_shape();
    let mut model = PixelArModel::new(PixelArConfig::new(s[0], s[1], s[2], opt.seed))?;
    let mut trainer = MleTrainer::new(&model, opt)?;
    let steps = trainer.cfg.max_steps;
    trainer.run_until(&mut model, &data.examples, steps)?;
    record_training(run, stem, trainer.report())?;
    run.checkpoint(&format!("{stem}.ardx"), &model.to_checkpoint())?;
    Ok(model)
}

fn record_training(run: &mut Run, stem: &str, report: &TrainReport) -> Result<()> {
    let table = report.to_csv(run.prov().with("model", stem));
    run.csv(&format!("{stem}_train.csv"), &table)?;
    if let Some((head, tail)) = report.head_tail_means() {
        run.metric(format!("{stem}.head_bits_per_dim"), head);
        run.metric(format!("{stem}.tail_bits_per_dim"), tail);
    }
    Ok(())
}

/// The digit density model named by `model`, or one trained in the run.
fn digit_model(cfg: &RunConfig, run: &mut Run) -> Result<(Box<dyn ArModel>, Dataset)> {
    let seed = run.seed;
    let n: usize = cfg.get("n_train")?;
    match cfg.get_opt::<PathBuf>("model")? {
        Some(path) => {
            let model = load_model(&path)?;
            let train = digits_like(n, seed, model.example_shape())?;
            Ok((model, train))
        }
        None => {
            let train = synthetic_digits(n, seed, true)?;
            let o = opt(cfg, "train_steps", "train_batch_size", "train_learning_rate", seed)?;
            let model = fit_pixel(run, "model", &train, o)?;
            Ok((Box::new(model), train))
        }
    }
}

fn load_data(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    let n: usize = cfg.get("n_train")?;
    let ds: bool = cfg.get("downscale")?;
    match cfg.get_str("data")? {
        "digits" => synthetic_digits(n, seed, ds),
        "colored" => colorize_mnist(&synthetic_digits(n, seed, ds)?, seed ^ 0xc010),
        "shapes" => synthetic_shapes(n, seed, ds),
        "manifold" => gen_manifold2d(n, seed),
        "idx" => {
            let path = cfg
                .get_opt::<PathBuf>("idx_images")?
                .ok_or_else(|| config_err("data = idx needs idx_images"))?;
            let mut d = load_idx(&path)?;
            if let Some(lp) = cfg.get_opt::<PathBuf>("idx_labels")? {
                let labels = load_idx_labels(&lp)?;
                d = Dataset::new(&d.name, d.examples, Some(labels), d.bins, &d.provenance)?;
            }
            Ok(d)
        }
        other => Err(config_err(format!("unknown data {other:?}"))),
    }
}

fn run_train(cfg: &RunConfig) -> Result<Outcome> {
    let mut run = Run::start(cfg)?;
    let seed = run.seed;
    let data = load_data(cfg, seed)?;
    let o = opt(cfg, "steps", "batch_size", "learning_rate", seed)?;
    let hidden: Option<usize> = cfg.get_opt("hidden")?;
    let kind = cfg.get_str("model")?;
    if kind == "classifier" {
        let labels = data
            .labels
            .as_ref()
            .ok_or_else(|| config_err(format!("data {:?} has no labels", data.name)))?;
        let mut ccfg = ClassifierConfig {
            opt: o,
            ..ClassifierConfig::default()
        };
        if let Some(h) = hidden {
            ccfg.feature_width = h;
        }
        let (clf, rep) = train_classifier(&data.examples, labels, &ccfg)?;
        let mut t = CsvTable::new(run.prov().with("model", "classifier"), &["step", "loss"]);
        for (i, l) in rep.train_loss.iter().enumerate() {
            t.push(vec![i as f64, *l])?;
        }
        run.csv("classifier_train.csv", &t)?;
        run.checkpoint("classifier.ardx", &clf.to_checkpoint())?;
        run.metric("held_out_accuracy", rep.held_out_accuracy);
        return run.finish();
    }

    let ex = data.example_shape().to_vec();
    let (mut model, mut trainer): (Box<dyn ArModel>, MleTrainer) = match cfg.get_opt::<PathBuf>("resume")? {
        Some(path) => MleTrainer::resume(&Checkpoint::load(&path)?, o)?,
        None => {
            let model: Box<dyn ArModel> = match kind {
                "pixel" => {
                    if ex.len() != 3 {
                        return Err(config_err(format!("pixel models need image data, got shape {ex:?}")));
                    }
                    let mut pc = PixelArConfig::new(ex[0], ex[1], ex[2], seed);
                    pc.bins = data.bins;
                    pc.layers = cfg.get("layers")?;
                    pc.components = cfg.get("components")?;
                    if let Some(h) = hidden {
                        pc.hidden = h;
                    }
                    Box::new(PixelArModel::new(pc)?)
                }
                "made" => {
                    if ex.len() != 1 {
                        return Err(config_err(format!("MADE needs vector data, got shape {ex:?}")));
                    }
                    let mut mc = MadeConfig::toy(seed);
                    mc.dims = ex[0];
                    mc.bins = data.bins;
                    if let Some(h) = hidden {
                        mc.hidden = vec![h; mc.hidden.len()];
                    }
                    Box::new(MadeModel::new(mc)?)
                }
                other => return Err(config_err(format!("unknown model {other:?}"))),
            };
            let tr = MleTrainer::new(model.as_ref(), o)?;
            (model, tr)
        }
    };
    if cfg.get::<usize>("checkpoint_every")? > 0 {
        trainer.cfg.checkpoint_every = cfg.get("checkpoint_every")?;
        trainer.checkpoint_dir = Some(run.dir.join("checkpoints"));
    }
    let steps = trainer.cfg.max_steps;
    trainer.run_until(model.as_mut(), &data.examples, steps)?;
    record_training(&mut run, "model", trainer.report())?;
    let ck = trainer.to_checkpoint(model.as_ref());
    run.checkpoint("model.ardx", &ck)?;
    let k = (trainer.report().steps.len() / 10).max(1);
    if let Some(t) = trainer.report().tail_mean(k) {
        run.metric("final_bits_per_dim", t);
    }
    run.finish()
}

/// Entropy of the toy target in bits per dimension: `x1` is deterministic,
/// so only the discretized `N(0, 1)` over `x2` contributes.
pub fn toy_optimum_bits_per_dim() -> f64 {
    discretized_gaussian_entropy(GaussianParams::new(0.0, 0.0), &BinSpec::toy()) / (2.0 * std::f64::consts::LN_2)
}

fn emit_field(run: &mut Run, stem: &str, field: &GradField, step: usize) -> Result<()> {
    run.csv(&format!("{stem}.csv"), &field.to_csv(run.prov().with("step", step)))?;
    run.text(&format!("{stem}.svg"), &field.to_svg(&format!("|grad log p| (log10), step {step}"))?)
}

fn run_heatmap(cfg: &RunConfig) -> Result<Outcome> {
    let mut run = Run::start(cfg)?;
    let seed = run.seed;
    let grid: usize = cfg.get("grid")?;
    let range: f64 = cfg.get("range")?;
    let threshold: f64 = cfg.get("threshold")?;
    if grid < 2 || !(range > 0.0) {
        return Err(config_err("heatmap needs grid >= 2 and range > 0"));
    }
    let field_of = |m: &dyn ArModel| gradient_field(m, (-range, range), (-range, range), (grid, grid));

    if let Some(path) = cfg.get_opt::<PathBuf>("model")? {
        let model = load_model(&path)?;
        let field = field_of(model.as_ref())?;
        emit_field(&mut run, "field", &field, 0)?;
        run.metric("near_zero_fraction", field.near_zero_fraction(threshold));
        run.metric("band_count", field.column_bands(threshold).len() as f64);
        return run.finish();
    }

    let data = gen_manifold2d(cfg.get("n_points")?, seed)?;
    let mut model = MadeModel::new(MadeConfig::toy(seed))?;
    let o = opt(cfg, "steps", "batch_size", "learning_rate", seed)?;
    let steps = o.max_steps;
    let checkpoints: usize = cfg.get("checkpoints")?;
    if checkpoints == 0 {
        return Err(config_err("checkpoints must be >= 1"));
    }
    let mut trainer = MleTrainer::new(&model, o)?;
    let mut table = CsvTable::new(
        run.prov(),
        &["step", "near_zero_fraction", "band_count", "train_bits_per_dim"],
    );
    let mut fractions = Vec::new();
    let mut last = None;
    for i in 1..=checkpoints {
        let stop = i * steps / checkpoints;
        trainer.run_until(&mut model, &data.examples, stop)?;
        let field = field_of(&model)?;
        let frac = field.near_zero_fraction(threshold);
        let bands = field.column_bands(threshold).len();
        let window = (stop / 10).clamp(1, 1000);
        let train_bits = trainer.report().tail_mean(window).unwrap_or(f64::NAN);
        table.push(vec![stop as f64, frac, bands as f64, train_bits])?;
        emit_field(&mut run, &format!("field_{stop:07}"), &field, stop)?;
        fractions.push(frac);
        last = Some((field, bands, train_bits));
    }
    let (field, bands, train_bits) = last.expect("at least one checkpoint");
    emit_field(&mut run, "field", &field, steps)?;
    run.csv("checkpoints.csv", &table)?;
    record_training(&mut run, "model", trainer.report())?;
    run.checkpoint("model.ardx", &trainer.to_checkpoint(&model))?;
    let optimum = toy_optimum_bits_per_dim();
    run.metric("near_zero_fraction", field.near_zero_fraction(threshold));
    run.metric("band_count", bands as f64);
    run.metric(
        "fraction_nondecreasing",
        f64::from(u8::from(fractions.windows(2).all(|w| w[1] >= w[0]))),
    );
    run.metric("train_bits_per_dim", train_bits);
    run.metric("optimum_bits_per_dim", optimum);
    run.metric("gap_bits_per_dim", train_bits - optimum);
    run.finish()
}

/// Lays a batch `[B, C, H, W]` side by side with one-pixel gaps. Returns
/// planar data `[C, H, B·(W+1)-1]`.
fn tile(batch: &Tensor, gap_value: f64) -> (Vec<f64>, usize, usize, usize) {
    let s = batch.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let tw = b * (w + 1) - 1;
    let mut out = vec![gap_value; c * h * tw];
    for e in 0..b {
        for ch in 0..c {
            for r in 0..h {
                let src = ((e * c + ch) * h + r) * w;
                let dst = (ch * h + r) * tw + e * (w + 1);
                out[dst..dst + w].copy_from_slice(&batch.data()[src..src + w]);
            }
        }
    }
    (out, c, h, tw)
}

fn image_bytes(batch: &Tensor, bins: &BinSpec) -> Result<(Vec<u8>, &'static str)> {
    let (data, c, h, w) = tile(batch, bins.lo());
    match c {
        1 => Ok((pgm_bytes(&data, h, w, bins.lo(), bins.hi())?, "pgm")),
        3 => Ok((ppm_bytes(&data, h, w, bins.lo(), bins.hi())?, "ppm")),
        _ => Err(Error::invalid(format!("cannot render {c}-channel images"))),
    }
}

fn run_optimize(cfg: &RunConfig) -> Result<Outcome> {
    let mut run = Run::start(cfg)?;
    let seed = run.seed;
    let (model, _) = digit_model(cfg, &mut run)?;
    let n: usize = cfg.get("n_per_probe")?;
    let steps: usize = cfg.get("steps")?;
    let step_size: f64 = cfg.get("step_size")?;
    let log_every: usize = cfg.get("log_every")?;
    let probes: Vec<ProbeKind> = cfg
        .get_list("probes")?
        .iter()
        .map(|p| p.parse().map_err(|e: Error| config_err(e.to_string())))
        .collect::<Result<_>>()?;
    if probes.is_empty() {
        return Err(config_err("probes must name at least one probe kind"));
    }
    let shape = model.example_shape().to_vec();
    let bins = *model.bins();
    let held_out = digits_like(n, seed ^ 0x0_7e57, &shape)?;
    for (i, kind) in probes.iter().enumerate() {
        let x0 = probe_start_set(*kind, n, &shape, &bins, seed.wrapping_add(100 + i as u64), Some(&held_out.examples))?;
        let rec: TrajectoryRecord = optimize_samples(model.as_ref(), &x0, steps, step_size, log_every)?;
        let name = kind.name();
        let prov = run.prov().with("probe", name).with("step_size", step_size);
        run.csv(&format!("trajectory_{name}.csv"), &rec.to_csv(prov))?;
        for e in &rec.entries {
            let (bytes, ext) = image_bytes(&e.snapshot, &bins)?;
            run.bytes(&format!("snap_{name}_{:06}.{ext}", e.iteration), &bytes)?;
        }
        let first = &rec.entries[0];
        let last = rec.last().expect("at least one entry");
        run.metric(format!("{name}.initial_bits_per_dim"), first.nll_bits_per_dim);
        run.metric(format!("{name}.final_bits_per_dim"), last.nll_bits_per_dim);
        run.metric(format!("{name}.final_grad_norm"), last.grad_norm);
        run.metric(format!("{name}.iterations"), last.iteration as f64);
    }
    run.finish()
}

fn run_detect(cfg: &RunConfig) -> Result<Outcome> {
    let mut run = Run::start(cfg)?;
    let seed = run.seed;
    let (model, train) = digit_model(cfg, &mut run)?;
    let shape = model.example_shape().to_vec();
    let n_fit: usize = cfg.get::<usize>("n_fit")?.min(train.len());
    if n_fit < 2 {
        return Err(config_err("n_fit must be >= 2"));
    }
    let fit_bits = bits_per_dim(model.as_ref(), &train.head(n_fit)?.examples)?;
    let mut intervals = Vec::new();
    for name in cfg.get_list("intervals")? {
        let kind: IntervalKind = name.parse().map_err(|e: Error| config_err(e.to_string()))?;
        let d = fit_interval(&fit_bits, kind)?;
        run.metric(format!("{}.mu", kind.label()), d.mu);
        run.metric(format!("{}.sigma", kind.label()), d.sigma);
        intervals.push(d);
    }

    let labels = train.labels.as_ref().ok_or_else(|| config_err("digit corpus lacks labels"))?;
    let ccfg = ClassifierConfig {
        opt: OptConfig {
            max_steps: cfg.get("classifier_steps")?,
            seed,
            ..ClassifierConfig::default().opt
        },
        ..ClassifierConfig::default()
    };
    let (clf, crep) = train_classifier(&train.examples, labels, &ccfg)?;
    run.metric("classifier.held_out_accuracy", crep.held_out_accuracy);
    run.checkpoint("classifier.ardx", &clf.to_checkpoint())?;
    let ccg = if cfg.get::<bool>("ccg")? {
        let g = CcgConfig {
            lambda: cfg.get("ccg_lambda")?,
            percentile: cfg.get("ccg_percentile")?,
            seed,
            ..CcgConfig::default()
        };
        Some(fit_ccg(&clf.features(&train.examples)?, labels, &g)?)
    } else {
        None
    };

    let n: usize = cfg.get("n_probe")?;
    let [c, h, w] = [shape[0], shape[1], shape[2]];
    let mut test = digits_like(n, seed ^ 0x7e57, &shape)?;
    test.name = "digits-test".into();
    let mut shapes = shapes_like(n, seed ^ 0x5a9e, &shape)?;
    shapes.name = "shapes".into();
    let mut probes = vec![test.clone(), shapes];
    for (i, kind) in [ProbeImageKind::Noise, ProbeImageKind::Black, ProbeImageKind::White]
        .into_iter()
        .enumerate()
    {
        probes.push(make_probe_images(kind, n, [c, h, w], seed.wrapping_add(200 + i as u64))?);
    }
    let set = DetectorSet {
        intervals,
        ccg: ccg.as_ref().map(|d| (d, &clf)),
    };
    let matrix = detection_table(model.as_ref(), &set, &probes)?;
    let prov = run.prov();
    run.text("detection.csv", &matrix.to_csv(&prov))?;
    run.text("detection.txt", &matrix.to_text(&prov))?;
    for (r, row) in matrix.rows.iter().zip(&matrix.cells) {
        for (col, v) in matrix.columns.iter().zip(row) {
            run.metric(format!("inlier.{r}.{col}"), *v);
        }
    }

    // Blends from noise toward real digits trace perceptual score against likelihood.
    let noise = &probes[2].examples;
    let sets: Vec<(String, Tensor)> = (0..=4)
        .map(|i| {
            let a = i as f64 / 4.0;
            let data = noise.data().iter().zip(test.examples.data()).map(|(z, d)| (1.0 - a) * z + a * d).collect();
            Ok((format!("{a}"), Tensor::new(noise.shape().to_vec(), data)?))
        })
        .collect::<Result<_>>()?;
    let curve = perceptual_curve(model.as_ref(), &clf, &sets)?;
    let mut t = CsvTable::new(run.prov().with("sets", "noise-to-digit blends"), &["alpha", "proxy_score", "bits_per_dim"]);
    for (p, (name, _)) in curve.iter().zip(&sets) {
        t.push(vec![name.parse().expect("alpha label"), p.score, p.bits_per_dim])?;
    }
    run.csv("perceptual.csv", &t)?;
    run.finish()
}

fn run_arcycle(cfg: &RunConfig) -> Result<Outcome> {
    let mut run = Run::start(cfg)?;
    let seed = run.seed;
    let n: usize = cfg.get("n_train")?;
    let n_test: usize = cfg.get("n_test")?;
    let gray_a = synthetic_digits(n, seed, true)?;
    let gray_b = synthetic_digits(n, seed + 1, true)?;
    let colored_a = colorize_mnist(&gray_a, seed + 2)?;
    let colored_b = colorize_mnist(&gray_b, seed + 3)?;

    let density = |run: &mut Run, key: &str, data: &Dataset, s: u64| -> Result<Box<dyn ArModel>> {
        match cfg.get_opt::<PathBuf>(key)? {
            Some(path) => {
                let m = load_model(&path)?;
                if m.example_shape() != data.example_shape() {
                    return Err(config_err(format!(
                        "{key} models {:?} images, expected {:?}",
                        m.example_shape(),
                        data.example_shape()
                    )));
                }
                Ok(m)
            }
            None => {
                let o = opt(cfg, "density_steps", "density_batch_size", "density_learning_rate", s)?;
                Ok(Box::new(fit_pixel(run, key, data, o)?))
            }
        }
    };
    let px = density(&mut run, "px", &colored_a, seed)?;
    let py = density(&mut run, "py", &gray_b, seed + 1)?;
    let px_before = px.params().clone();
    let py_before = py.params().clone();

    let test_gray = synthetic_digits(n_test, seed + 20, true)?;
    let test_colored = colorize_mnist(&synthetic_digits(n_test, seed + 21, true)?, seed + 22)?;
    let test_x = mean(&bits_per_dim(px.as_ref(), &test_colored.examples)?);
    let test_y = mean(&bits_per_dim(py.as_ref(), &test_gray.examples)?);
    run.metric("test_nll_x_bits", test_x);
    run.metric("test_nll_y_bits", test_y);

    let data = ArCycleData {
        x: colored_a.examples.clone(),
        x_target: gray_a.examples.clone(),
        y: gray_b.examples.clone(),
        y_target: colored_b.examples.clone(),
    };
    let hidden: usize = cfg.get("hidden")?;
    let mut f = ConvGenerator::new(3, 1, hidden, seed + 30)?;
    let mut g = ConvGenerator::new(1, 3, hidden, seed + 31)?;
    let beta = match cfg.get_str("beta")? {
        "auto" => None,
        _ => Some(cfg.get("beta")?),
    };
    let ablation: Ablation = cfg.get_str("ablation")?.parse().map_err(|e: Error| config_err(e.to_string()))?;
    let acfg = ArCycleConfig {
        beta,
        ablation,
        blur_sigma: cfg.get("blur_sigma")?,
        snapshot_every: cfg.get("snapshot_every")?,
        snapshot_count: cfg.get("snapshot_count")?,
        pretrain_steps: cfg.get("pretrain_steps")?,
        steps: cfg.get("steps")?,
        opt: opt(cfg, "steps", "batch_size", "learning_rate", seed)?,
    };
    acfg.validate().map_err(|e| config_err(e.to_string()))?;
    let judges = Judges {
        px: px.as_ref(),
        py: py.as_ref(),
    };
    let report = train_arcycle(&mut f, &mut g, &judges, &data, &acfg)?;
    if !px.params().bitwise_eq(&px_before) || !py.params().bitwise_eq(&py_before) {
        return Err(Error::invalid("density models changed during translation training"));
    }
    let prov = run.prov().with("ablation", ablation.name()).with("beta", fmt_f64(report.beta));
    run.csv("arcycle.csv", &report.to_csv(prov))?;
    if !report.pretrain_loss.is_empty() {
        let mut t = CsvTable::new(run.prov(), &["step", "l1"]);
        for (i, l) in report.pretrain_loss.iter().enumerate() {
            t.push(vec![i as f64, *l])?;
        }
        run.csv("pretrain.csv", &t)?;
    }
    report.write_snapshots(&run.dir, -1.0, 1.0)?;
    for s in &report.snapshots {
        for d in ["x", "y"] {
            run.files.push(run.dir.join(format!("snap_{:06}_{d}.ppm", s.iteration)));
        }
    }
    run.checkpoint("f.ardx", &f.to_checkpoint())?;
    run.checkpoint("g.ardx", &g.to_checkpoint())?;

    let window = (report.rows.len() / 10).max(1);
    run.metric("beta", report.beta);
    if let Some(r0) = report.rows.first() {
        run.metric("initial.l_cyc", r0.l_cyc);
        run.metric("initial.nll_x_bits", r0.nll_x_bits);
        run.metric("initial.nll_y_bits", r0.nll_y_bits);
        run.metric("tail.l_cyc", report.tail_mean(window, |r| r.l_cyc).expect("rows"));
        run.metric("tail.nll_x_bits", report.tail_mean(window, |r| r.nll_x_bits).expect("rows"));
        run.metric("tail.nll_y_bits", report.tail_mean(window, |r| r.nll_y_bits).expect("rows"));
    }
    // Held-out translations judged by the frozen models.
    let fy = f.apply(&test_colored.examples)?;
    let gx = g.apply(&test_gray.examples)?;
    run.metric("held_out.translated_y_bits", mean(&bits_per_dim(py.as_ref(), &fy)?));
    run.metric("held_out.translated_x_bits", mean(&bits_per_dim(px.as_ref(), &gx)?));
    run.finish()
}

/// Re-renders SVG heatmaps and text tables from CSVs of earlier runs and
/// writes a one-line summary per recognised file.
fn run_report(cfg: &RunConfig) -> Result<Outcome> {
    let mut run = Run::start(cfg)?;
    let input = cfg
        .get_opt::<PathBuf>("input_dir")?
        .ok_or_else(|| config_err("report needs input_dir"))?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&input)
        .map_err(|e| Error::io(&input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    entries.sort();
    let mut summary = format!("# kind=report\n# seed={}\n# version={}\n", run.seed, crate::emit::ARTIFACT_VERSION);
    for path in entries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let stem = path.file_stem().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if text.lines().any(|l| l.starts_with("dataset,")) {
            let (m, prov) = DetectionMatrix::from_csv(&text)?;
            run.text(&format!("{stem}.txt"), &m.to_text(&prov))?;
            summary.push_str(&format!("{name}: detection table, {} probe sets × {} detectors\n", m.rows.len(), m.columns.len()));
            continue;
        }
        if text.lines().any(|l| l == "metric,value") {
            summary.push_str(&format!("{name}: run metrics\n"));
            continue;
        }
        let Ok(table) = CsvTable::parse(&text) else {
            summary.push_str(&format!("{name}: skipped (not a numeric table)\n"));
            continue;
        };
        let cols: Vec<&str> = table.columns.iter().map(String::as_str).collect();
        let line = match cols.as_slice() {
            ["x1", "x2", "norm"] => {
                let field = GradField::from_csv(&table)?;
                run.text(&format!("{stem}.svg"), &field.to_svg("|grad log p| (log10)")?)?;
                format!("gradient field, near-zero fraction {:.4}", field.near_zero_fraction(1e-3))
            }
            ["iteration", "l_cyc", "nll_x_bits", "nll_y_bits"] => series_summary(&table, &["l_cyc", "nll_x_bits", "nll_y_bits"]),
            ["iteration", "example", "bits_per_dim", "grad_norm"] => series_summary(&table, &["bits_per_dim", "grad_norm"]),
            ["step", "nll_nats", "bits_per_dim"] => series_summary(&table, &["bits_per_dim"]),
            _ => format!("{} rows, columns {}", table.rows.len(), cols.join(" ")),
        };
        summary.push_str(&format!("{name}: {line}\n"));
    }
    run.text("report.txt", &summary)?;
    run.finish()
}

fn series_summary(t: &CsvTable, cols: &[&str]) -> String {
    let parts: Vec<String> = cols
        .iter()
        .filter_map(|c| {
            let v = t.column(c)?;
            Some(format!("{c} {:.4} -> {:.4}", v.first()?, v.last()?))
        })
        .collect();
    format!("{} rows, {}", t.rows.len(), parts.join(", "))
}
