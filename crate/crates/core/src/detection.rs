//! Outlier detectors: NLL intervals over bits/dim, class-conditional
//! Gaussians over classifier features, the percent-inlier matrix, and the
//! proxy perceptual score.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::emit::{fmt_f64, text_table, Provenance};
use crate::error::{Error, Result};
use crate::models::{self, ArModel};
use crate::tensor::Tensor;
use crate::training::{split_indices, Classifier};
use crate::workbench::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Inlier,
    Outlier,
}

impl Verdict {
    pub fn is_inlier(self) -> bool {
        self == Verdict::Inlier
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntervalKind {
    TwoSd,
    OneSd,
    OneSided,
}

impl IntervalKind {
    pub const ALL: [IntervalKind; 3] = [IntervalKind::TwoSd, IntervalKind::OneSd, IntervalKind::OneSided];

    pub fn label(self) -> &'static str {
        match self {
            IntervalKind::TwoSd => "AR-2SD",
            IntervalKind::OneSd => "AR-1SD",
            IntervalKind::OneSided => "AR-One-sided",
        }
    }
}

impl FromStr for IntervalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_sd" => Ok(IntervalKind::TwoSd),
            "one_sd" => Ok(IntervalKind::OneSd),
            "one_sided" => Ok(IntervalKind::OneSided),
            other => Err(Error::invalid(format!("unknown interval kind {other:?}"))),
        }
    }
}

/// Accepts bits/dim values inside an interval around the training mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntervalDetector {
    pub mu: f64,
    pub sigma: f64,
    pub kind: IntervalKind,
}

impl IntervalDetector {
    /// Closed bounds; the one-sided form has no lower bound.
    pub fn bounds(&self) -> (f64, f64) {
        match self.kind {
            IntervalKind::TwoSd => (self.mu - 2.0 * self.sigma, self.mu + 2.0 * self.sigma),
            IntervalKind::OneSd => (self.mu - self.sigma, self.mu + self.sigma),
            IntervalKind::OneSided => (f64::NEG_INFINITY, self.mu + 2.0 * self.sigma),
        }
    }

    pub fn classify(&self, bits_per_dim: f64) -> Verdict {
        let (lo, hi) = self.bounds();
        if bits_per_dim >= lo && bits_per_dim <= hi {
            Verdict::Inlier
        } else {
            Verdict::Outlier
        }
    }

    pub fn with_kind(self, kind: IntervalKind) -> Self {
        IntervalDetector { kind, ..self }
    }
}

/// Population mean and standard deviation of the training scores.
pub fn fit_interval(train_bits_per_dim: &[f64], kind: IntervalKind) -> Result<IntervalDetector> {
    let n = train_bits_per_dim.len();
    if n < 2 {
        return Err(Error::invalid(format!("interval fit needs at least 2 scores, got {n}")));
    }
    if train_bits_per_dim.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("interval fit scores must be finite"));
    }
    let mu = train_bits_per_dim.iter().sum::<f64>() / n as f64;
    let var = train_bits_per_dim.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    Ok(IntervalDetector {
        mu,
        sigma: var.sqrt(),
        kind,
    })
}

pub fn classify_interval(det: &IntervalDetector, bits_per_dim: f64) -> Verdict {
    det.classify(bits_per_dim)
}

/// Lower-triangular Cholesky factor of a row-major SPD matrix.
fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::invalid(format!("covariance not positive definite at pivot {i}")));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L`.
fn forward_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    y
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcgConfig {
    /// Shrinkage toward the diagonal, in `[0, 1]`.
    pub lambda: f64,
    /// Percentile of held-out scores used as the threshold.
    pub percentile: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for CcgConfig {
    fn default() -> Self {
        CcgConfig {
            lambda: 0.05,
            percentile: 5.0,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Class means with a shared, shrunk covariance and a log-likelihood
/// threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct CcgDetector {
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub covariance: Vec<f64>,
    pub lambda: f64,
    pub tau: f64,
    chol: Vec<f64>,
    log_det: f64,
}

impl CcgDetector {
    /// Maximum over classes of the Gaussian log density at `feature`.
    pub fn score(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.dim {
            return Err(Error::shape("classify_ccg", &[feature.len()], &[self.dim]));
        }
        let c = self.dim as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det;
        let mut best = f64::NEG_INFINITY;
        for m in &self.means {
            let diff: Vec<f64> = feature.iter().zip(m).map(|(a, b)| a - b).collect();
            let z = forward_solve(&self.chol, self.dim, &diff);
            let maha: f64 = z.iter().map(|v| v * v).sum();
            best = best.max(-0.5 * (c + maha));
        }
        Ok(best)
    }

    /// Squared Mahalanobis distance to the nearest class mean.
    pub fn min_mahalanobis_sq(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.dim {
            return Err(Error::shape("mahalanobis", &[feature.len()], &[self.dim]));
        }
        Ok(self
            .means
            .iter()
            .map(|m| {
                let diff: Vec<f64> = feature.iter().zip(m).map(|(a, b)| a - b).collect();
                forward_solve(&self.chol, self.dim, &diff).iter().map(|v| v * v).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min))
    }

    pub fn classify(&self, feature: &[f64]) -> Result<Verdict> {
        Ok(if self.score(feature)? >= self.tau {
            Verdict::Inlier
        } else {
            Verdict::Outlier
        })
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    /// Percent of rows of `features` classified as inliers.
    pub fn percent_inlier(&self, features: &Tensor) -> Result<f64> {
        let rows = feature_rows(features)?;
        let mut hits = 0usize;
        for r in &rows {
            if self.classify(r)?.is_inlier() {
                hits += 1;
            }
        }
        Ok(100.0 * hits as f64 / rows.len() as f64)
    }
}

pub fn classify_ccg(det: &CcgDetector, feature: &[f64]) -> Result<Verdict> {
    det.classify(feature)
}

fn feature_rows(features: &Tensor) -> Result<Vec<&[f64]>> {
    if features.rank() != 2 {
        return Err(Error::invalid(format!("features must be [N, d], got {:?}", features.shape())));
    }
    Ok(features.data().chunks(features.shape()[1]).collect())
}

/// Linear-interpolated percentile of unsorted values, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid(format!("percentile {q} of {} values", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    Ok(if i + 1 < v.len() { v[i] + frac * (v[i + 1] - v[i]) } else { v[i] })
}

/// Fits on a seeded split of `features` and calibrates `τ` on the rest.
pub fn fit_ccg(features: &Tensor, labels: &[usize], cfg: &CcgConfig) -> Result<CcgDetector> {
    let n = feature_rows(features)?.len();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} feature rows", labels.len())));
    }
    let (fit, held) = split_indices(n, cfg.holdout_fraction, cfg.seed);
    if held.is_empty() {
        return Err(Error::invalid("CCG needs a non-empty held-out split"));
    }
    let fit_labels: Vec<usize> = fit.iter().map(|&i| labels[i]).collect();
    fit_ccg_with_holdout(
        &features.select_rows(&fit)?,
        &fit_labels,
        &features.select_rows(&held)?,
        cfg,
    )
}

/// Fits class means and the tied covariance on `features`, then sets `τ`
/// to the configured percentile of scores over `holdout`.
pub fn fit_ccg_with_holdout(features: &Tensor, labels: &[usize], holdout: &Tensor, cfg: &CcgConfig) -> Result<CcgDetector> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::invalid(format!("shrinkage {} outside [0, 1]", cfg.lambda)));
    }
    let rows = feature_rows(features)?;
    if labels.len() != rows.len() {
        return Err(Error::invalid(format!("{} labels for {} feature rows", labels.len(), rows.len())));
    }
    let d = features.shape()[1];
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    let mut means = vec![vec![0.0; d]; classes];
    for (r, &l) in rows.iter().zip(labels) {
        counts[l] += 1;
        for (m, v) in means[l].iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let mut present = Vec::new();
    for (c, &k) in counts.iter().enumerate() {
        if k == 0 {
            continue;
        }
        if k < 2 {
            return Err(Error::invalid(format!("class {c} has {k} example; need at least 2")));
        }
        means[c].iter_mut().for_each(|m| *m /= k as f64);
        present.push(c);
    }
    if present.is_empty() {
        return Err(Error::invalid("CCG fit on no examples"));
    }
    let mut pooled = vec![0.0; d * d];
    for (r, &l) in rows.iter().zip(labels) {
        let diff: Vec<f64> = r.iter().zip(&means[l]).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..d {
                pooled[i * d + j] += diff[i] * diff[j];
            }
        }
    }
    let dof = (rows.len() - present.len()).max(1) as f64;
    pooled.iter_mut().for_each(|v| *v /= dof);
    let mean_diag = (0..d).map(|i| pooled[i * d + i]).sum::<f64>() / d as f64;
    let jitter = 1e-9 * mean_diag + 1e-12;
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let diag = if i == j { pooled[i * d + i] } else { 0.0 };
            cov[i * d + j] = (1.0 - cfg.lambda) * pooled[i * d + j] + cfg.lambda * diag;
        }
        cov[i * d + i] += jitter;
    }
    let chol = cholesky(&cov, d)?;
    let log_det = 2.0 * (0..d).map(|i| chol[i * d + i].ln()).sum::<f64>();
    let mut det = CcgDetector {
        dim: d,
        means: present.iter().map(|&c| means[c].clone()).collect(),
        covariance: cov,
        lambda: cfg.lambda,
        tau: f64::NEG_INFINITY,
        chol,
        log_det,
    };
    let held_scores = feature_rows(holdout)?
        .iter()
        .map(|r| det.score(r))
        .collect::<Result<Vec<_>>>()?;
    det.tau = percentile(&held_scores, cfg.percentile)?;
    Ok(det)
}

/// Percent-inlier cells: probe datasets by detectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl DetectionMatrix {
    pub fn cell(&self, row: &str, column: &str) -> Option<f64> {
        let r = self.rows.iter().position(|n| n == row)?;
        let c = self.columns.iter().position(|n| n == column)?;
        Some(self.cells[r][c])
    }

    pub fn to_csv(&self, provenance: &Provenance) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# kind={}", provenance.kind);
        let _ = writeln!(s, "# seed={}", provenance.seed);
        let _ = writeln!(s, "# version={}", crate::emit::ARTIFACT_VERSION);
        for (k, v) in &provenance.extra {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("dataset");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (name, row) in self.rows.iter().zip(&self.cells) {
            s.push_str(name);
            for v in row {
                s.push(',');
                s.push_str(&fmt_f64(*v));
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`DetectionMatrix::to_csv`] output, returning the provenance too.
    pub fn from_csv(text: &str) -> Result<(Self, Provenance)> {
        let fmt = |line: usize, msg: String| Error::Format {
            what: "detection csv",
            offset: line,
            msg,
        };
        let mut prov = Provenance::new("", 0);
        let mut m = DetectionMatrix::default();
        let mut header = false;
        for (ln, line) in text.lines().enumerate() {
            if let Some((k, v)) = line.strip_prefix("# ").and_then(|c| c.split_once('=')) {
                match k {
                    "kind" => prov.kind = v.to_string(),
                    "seed" => prov.seed = v.parse().map_err(|_| fmt(ln, format!("bad seed {v:?}")))?,
                    "version" => {}
                    _ => prov = prov.with(k, v),
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            let first = cells.next().unwrap_or_default();
            if !header {
                if first != "dataset" {
                    return Err(fmt(ln, format!("expected a `dataset` header, got {first:?}")));
                }
                m.columns = cells.map(str::to_string).collect();
                header = true;
                continue;
            }
            let row: Vec<f64> = cells
                .map(|c| c.parse().map_err(|_| fmt(ln, format!("bad number {c:?}"))))
                .collect::<Result<_>>()?;
            if row.len() != m.columns.len() {
                return Err(fmt(ln, format!("{} cells for {} columns", row.len(), m.columns.len())));
            }
            m.rows.push(first.to_string());
            m.cells.push(row);
        }
        if !header {
            return Err(fmt(0, "no header row".into()));
        }
        Ok((m, prov))
    }

    pub fn to_text(&self, provenance: &Provenance) -> String {
        let rows: Vec<(String, Vec<f64>)> = self.rows.iter().cloned().zip(self.cells.iter().cloned()).collect();
        text_table(provenance, "dataset", &self.columns, &rows)
    }
}

/// Detectors evaluated by [`detection_table`].
pub struct DetectorSet<'a> {
    pub intervals: Vec<IntervalDetector>,
    pub ccg: Option<(&'a CcgDetector, &'a Classifier)>,
}

/// Percent of each probe set accepted by each detector.
pub fn detection_table(model: &dyn ArModel, detectors: &DetectorSet, probes: &[Dataset]) -> Result<DetectionMatrix> {
    if probes.is_empty() {
        return Err(Error::invalid("detection table needs at least one probe set"));
    }
    let mut columns: Vec<String> = detectors.intervals.iter().map(|d| d.kind.label().to_string()).collect();
    if detectors.ccg.is_some() {
        columns.push("CCG".into());
    }
    let mut cells = Vec::with_capacity(probes.len());
    for p in probes {
        let mut row = Vec::with_capacity(columns.len());
        if !detectors.intervals.is_empty() {
            let bpd = models::bits_per_dim(model, &p.examples)?;
            for d in &detectors.intervals {
                let hits = bpd.iter().filter(|b| d.classify(**b).is_inlier()).count();
                row.push(100.0 * hits as f64 / bpd.len() as f64);
            }
        }
        if let Some((ccg, clf)) = detectors.ccg {
            row.push(ccg.percent_inlier(&clf.features(&p.examples)?)?);
        }
        cells.push(row);
    }
    Ok(DetectionMatrix {
        rows: probes.iter().map(|p| p.name.clone()).collect(),
        columns,
        cells,
    })
}

/// `exp(mean KL(p(y|x) ‖ p̄(y)))` over rows of class posteriors `[N, K]`.
pub fn proxy_perceptual_score_from_probs(probs: &Tensor) -> Result<f64> {
    if probs.rank() != 2 || probs.shape()[0] < 2 {
        return Err(Error::invalid(format!("score needs [N >= 2, K] posteriors, got {:?}", probs.shape())));
    }
    let k = probs.shape()[1];
    let rows: Vec<&[f64]> = probs.data().chunks(k).collect();
    let mut marginal = vec![0.0; k];
    for r in &rows {
        marginal.iter_mut().zip(r.iter()).for_each(|(m, p)| *m += p);
    }
    marginal.iter_mut().for_each(|m| *m /= rows.len() as f64);
    let mean_kl = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (p.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / rows.len() as f64;
    Ok(mean_kl.exp())
}

pub fn proxy_perceptual_score(classifier: &Classifier, samples: &Tensor) -> Result<f64> {
    proxy_perceptual_score_from_probs(&classifier.probabilities(samples)?)
}

/// One point of the perceptual-score versus bits/dim curve.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualPoint {
    pub name: String,
    pub score: f64,
    pub bits_per_dim: f64,
}

/// Proxy score and mean bits/dim for each named sample set.
pub fn perceptual_curve(model: &dyn ArModel, classifier: &Classifier, sets: &[(String, Tensor)]) -> Result<Vec<PerceptualPoint>> {
    sets.iter()
        .map(|(name, x)| {
            let bpd = models::bits_per_dim(model, x)?;
            Ok(PerceptualPoint {
                name: name.clone(),
                score: proxy_perceptual_score(classifier, x)?,
                bits_per_dim: bpd.iter().sum::<f64>() / bpd.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_basics() {
        let d = fit_interval(&[1.0, 3.0], IntervalKind::TwoSd).unwrap();
        assert_eq!((d.mu, d.sigma), (2.0, 1.0));
        let z = IntervalDetector {
            mu: 0.0,
            sigma: 1.0,
            kind: IntervalKind::TwoSd,
        };
        assert!(z.classify(1.5).is_inlier());
        assert!(!z.with_kind(IntervalKind::OneSd).classify(1.5).is_inlier());
        assert!(z.with_kind(IntervalKind::OneSided).classify(-100.0).is_inlier());
        assert!(z.classify(2.0).is_inlier());
        assert!(fit_interval(&[1.0], IntervalKind::OneSd).is_err());
        let flat = fit_interval(&[4.0, 4.0, 4.0], IntervalKind::OneSd).unwrap();
        assert_eq!(flat.sigma, 0.0);
        assert!(flat.classify(4.0).is_inlier() && !flat.classify(4.0 + 1e-12).is_inlier());
    }

    #[test]
    fn score_limits() {
        let uniform = Tensor::full(&[5, 4], 0.25);
        assert!((proxy_perceptual_score_from_probs(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let onehot = Tensor::new(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!((proxy_perceptual_score_from_probs(&onehot).unwrap() - 4.0).abs() < 1e-12);
        let doubled = Tensor::concat_rows(&[onehot.clone(), onehot.clone()]).unwrap();
        assert_eq!(
            proxy_perceptual_score_from_probs(&doubled).unwrap(),
            proxy_perceptual_score_from_probs(&onehot).unwrap()
        );
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((v - a[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
        assert_eq!(percentile(&[0.0, 10.0], 5.0).unwrap(), 0.5);
    }
}
