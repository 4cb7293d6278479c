//! Gradient descent on inputs under a frozen model, and gradient-norm
//! fields over 2D grids.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::emit::{svg_heatmap, CsvTable, Provenance};
use crate::error::{Error, Result};
use crate::likelihoods::BinSpec;
use crate::models::{self, ArModel};
use crate::tensor::Tensor;

/// One logged iteration of [`optimize_samples`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub iteration: usize,
    pub snapshot: Tensor,
    /// Batch mean NLL in bits/dim.
    pub nll_bits_per_dim: f64,
    pub example_bits_per_dim: Vec<f64>,
    /// L2 norm of `∇_x log p` over the whole batch.
    pub grad_norm: f64,
    pub example_grad_norms: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub entries: Vec<TrajectoryEntry>,
}

impl TrajectoryRecord {
    pub fn last(&self) -> Option<&TrajectoryEntry> {
        self.entries.last()
    }

    /// Columns `iteration, example, bits_per_dim, grad_norm`; one row per
    /// example per logged iteration.
    pub fn to_csv(&self, provenance: Provenance) -> CsvTable {
        let mut t = CsvTable::new(provenance, &["iteration", "example", "bits_per_dim", "grad_norm"]);
        for e in &self.entries {
            for (i, (b, g)) in e.example_bits_per_dim.iter().zip(&e.example_grad_norms).enumerate() {
                t.push(vec![e.iteration as f64, i as f64, *b, *g]).expect("4 columns");
            }
        }
        t
    }
}

fn example_norms(grad: &Tensor, batch: usize) -> Vec<f64> {
    let per = grad.len() / batch;
    grad.data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Plain gradient descent on `-log p(x)` with respect to `x`, clamping to
/// the bin range after every step. Logs iteration 0, every `log_every`-th
/// iteration, and the final one.
pub fn optimize_samples(
    model: &dyn ArModel,
    x0: &Tensor,
    steps: usize,
    lr: f64,
    log_every: usize,
) -> Result<TrajectoryRecord> {
    let batch = models::check_batch(model, x0)?;
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate {lr} must be > 0")));
    }
    let log_every = log_every.max(1);
    let bins = *model.bins();
    let scale = 1.0 / (model.dims() as f64 * std::f64::consts::LN_2);
    let mut x = x0.clone();
    let mut rec = TrajectoryRecord::default();
    for it in 0..=steps {
        let (lp, grad) = match models::input_gradient(model, &x) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::NonFiniteGradient {
                    iteration: it,
                    last_good: Box::new(x),
                })
            }
            Err(e) => return Err(e),
        };
        if !grad.all_finite() {
            return Err(Error::NonFiniteGradient {
                iteration: it,
                last_good: Box::new(x),
            });
        }
        if it % log_every == 0 || it == steps {
            let bpd: Vec<f64> = lp.iter().map(|l| -l * scale).collect();
            rec.entries.push(TrajectoryEntry {
                iteration: it,
                snapshot: x.clone(),
                nll_bits_per_dim: bpd.iter().sum::<f64>() / batch as f64,
                example_bits_per_dim: bpd,
                grad_norm: grad.l2_norm(),
                example_grad_norms: example_norms(&grad, batch),
            });
        }
        if it == steps {
            break;
        }
        for (xi, gi) in x.data_mut().iter_mut().zip(grad.data()) {
            *xi = (*xi + lr * gi).clamp(bins.lo(), bins.hi());
        }
    }
    Ok(rec)
}

/// Evenly spaced grid including both endpoints.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

/// `‖∇_x log p‖₂` over a grid. Rows follow `x₂`, columns follow `x₁`,
/// both ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct GradField {
    pub x1_range: (f64, f64),
    pub x2_range: (f64, f64),
    pub cols: usize,
    pub rows: usize,
    pub norms: Vec<f64>,
}

impl GradField {
    pub fn x1_values(&self) -> Vec<f64> {
        linspace(self.x1_range.0, self.x1_range.1, self.cols)
    }

    pub fn x2_values(&self) -> Vec<f64> {
        linspace(self.x2_range.0, self.x2_range.1, self.rows)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.norms[row * self.cols + col]
    }

    /// Fraction of cells whose norm is below `threshold`.
    pub fn near_zero_fraction(&self, threshold: f64) -> f64 {
        self.norms.iter().filter(|v| **v < threshold).count() as f64 / self.norms.len() as f64
    }

    /// Maximum norm in each column.
    pub fn column_maxima(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.at(r, c)).fold(0.0, f64::max))
            .collect()
    }

    /// Maximal runs of adjacent columns holding at least one cell at or
    /// above `threshold`, as `(first, last)` column pairs.
    pub fn column_bands(&self, threshold: f64) -> Vec<(usize, usize)> {
        let active: Vec<bool> = self.column_maxima().iter().map(|m| *m >= threshold).collect();
        let mut bands = Vec::new();
        let mut start = None;
        for (c, &a) in active.iter().enumerate() {
            match (a, start) {
                (true, None) => start = Some(c),
                (false, Some(s)) => {
                    bands.push((s, c - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            bands.push((s, self.cols - 1));
        }
        bands
    }

    pub fn to_csv(&self, provenance: Provenance) -> CsvTable {
        let mut t = CsvTable::new(provenance, &["x1", "x2", "norm"]);
        let (xs, ys) = (self.x1_values(), self.x2_values());
        for (r, y) in ys.iter().enumerate() {
            for (c, x) in xs.iter().enumerate() {
                t.push(vec![*x, *y, self.at(r, c)]).expect("3 columns");
            }
        }
        t
    }

    /// Heatmap of `log10(norm + 1e-12)`.
    pub fn to_svg(&self, title: &str) -> Result<String> {
        let v: Vec<f64> = self.norms.iter().map(|n| (n + 1e-12).log10()).collect();
        svg_heatmap(&v, self.rows, self.cols, self.x1_range, self.x2_range, title, "x1", "x2")
    }

    pub fn from_csv(t: &CsvTable) -> Result<Self> {
        let (x1, x2, n) = match (t.column("x1"), t.column("x2"), t.column("norm")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Error::invalid("gradient field CSV needs x1, x2, norm columns")),
        };
        let cols = x2.iter().take_while(|v| **v == x2[0]).count();
        if cols == 0 || n.len() % cols != 0 {
            return Err(Error::invalid("gradient field CSV is not a full grid"));
        }
        let rows = n.len() / cols;
        Ok(GradField {
            x1_range: (x1[0], x1[cols - 1]),
            x2_range: (x2[0], x2[n.len() - 1]),
            cols,
            rows,
            norms: n,
        })
    }
}

/// Evaluates `‖∇_x log p(x)‖₂` at every grid point of a 2D model.
pub fn gradient_field(
    model: &dyn ArModel,
    x1_range: (f64, f64),
    x2_range: (f64, f64),
    resolution: (usize, usize),
) -> Result<GradField> {
    if model.example_shape() != [2] {
        return Err(Error::invalid(format!(
            "gradient field needs a 2D model, got shape {:?}",
            model.example_shape()
        )));
    }
    let (cols, rows) = resolution;
    if cols < 2 || rows < 2 {
        return Err(Error::invalid(format!("resolution {resolution:?} must be at least 2 per axis")));
    }
    let xs = linspace(x1_range.0, x1_range.1, cols);
    let ys = linspace(x2_range.0, x2_range.1, rows);
    let per_row: Vec<Result<Vec<f64>>> = ys
        .par_iter()
        .map(|&y| {
            let data = xs.iter().flat_map(|&x| [x, y]).collect();
            let batch = Tensor::new(vec![cols, 2], data)?;
            let (_, g) = models::input_gradient(model, &batch)?;
            Ok(example_norms(&g, cols))
        })
        .collect();
    let mut norms = Vec::with_capacity(rows * cols);
    for r in per_row {
        norms.extend(r?);
    }
    Ok(GradField {
        x1_range,
        x2_range,
        cols,
        rows,
        norms,
    })
}

/// Starting sets for input-space optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Digits,
    Noise,
    Black,
    Gray,
    White,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 5] = [
        ProbeKind::Digits,
        ProbeKind::Noise,
        ProbeKind::Black,
        ProbeKind::Gray,
        ProbeKind::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Digits => "digits",
            ProbeKind::Noise => "noise",
            ProbeKind::Black => "black",
            ProbeKind::Gray => "gray",
            ProbeKind::White => "white",
        }
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown probe kind {s:?}")))
    }
}

/// Constant, noise, or copied-digit batches of shape `[n, ...example]`.
///
/// `digits` must be supplied for [`ProbeKind::Digits`]; its first `n`
/// examples are used.
pub fn probe_start_set(
    kind: ProbeKind,
    n: usize,
    example_shape: &[usize],
    bins: &BinSpec,
    seed: u64,
    digits: Option<&Tensor>,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("probe set size must be >= 1"));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(example_shape);
    let len: usize = shape.iter().product();
    let constant = |v: f64| Tensor::new(shape.clone(), vec![v; len]);
    match kind {
        ProbeKind::Black => constant(bins.lo()),
        ProbeKind::White => constant(bins.hi()),
        ProbeKind::Gray => constant(bins.center(bins.count() / 2)),
        ProbeKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..len).map(|_| bins.center(rng.random_range(0..bins.count()))).collect();
            Tensor::new(shape, data)
        }
        ProbeKind::Digits => {
            let d = digits.ok_or_else(|| Error::invalid("digit probes need a digit dataset"))?;
            if d.rank() == 0 || d.shape()[1..] != *example_shape || d.shape()[0] < n {
                return Err(Error::shape("digit probes", d.shape(), &shape));
            }
            d.rows(0, n)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{MadeConfig, MadeModel};

    #[test]
    fn zero_steps_returns_start() {
        let m = MadeModel::new(MadeConfig::toy(0)).unwrap();
        let x0 = Tensor::new(vec![2, 2], vec![0.5, 1.0, -2.0, 0.0]).unwrap();
        let rec = optimize_samples(&m, &x0, 0, 0.01, 10).unwrap();
        assert_eq!(rec.entries.len(), 1);
        assert_eq!(rec.entries[0].snapshot, x0);
    }

    #[test]
    fn linspace_hits_endpoints() {
        let v = linspace(-3.0, 3.0, 100);
        assert_eq!(v[0], -3.0);
        assert_eq!(v[99], 3.0);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn bands_are_counted() {
        let f = GradField {
            x1_range: (0.0, 1.0),
            x2_range: (0.0, 1.0),
            cols: 6,
            rows: 1,
            norms: vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
        };
        assert_eq!(f.column_bands(0.5), vec![(1, 2), (4, 4)]);
        assert!((f.near_zero_fraction(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn probe_constants() {
        let b = BinSpec::image();
        let black = probe_start_set(ProbeKind::Black, 2, &[1, 3, 3], &b, 0, None).unwrap();
        assert!(black.data().iter().all(|v| *v == -1.0));
        let gray = probe_start_set(ProbeKind::Gray, 1, &[1, 2, 2], &b, 0, None).unwrap();
        assert!(gray.data().iter().all(|v| *v == b.center(128)));
        assert!("purple".parse::<ProbeKind>().is_err());
        assert!(probe_start_set(ProbeKind::Digits, 1, &[1, 2, 2], &b, 0, None).is_err());
    }

    #[test]
    fn field_csv_round_trip() {
        let m = MadeModel::new(MadeConfig::toy(1)).unwrap();
        let f = gradient_field(&m, (-3.0, 3.0), (-2.0, 2.0), (5, 4)).unwrap();
        let back = GradField::from_csv(&f.to_csv(Provenance::new("heatmap", 1))).unwrap();
        assert_eq!(back, f);
    }
}
