//! Masked MLP over low-dimensional vectors with a discretized Gaussian head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{check_batch, draw_index, ArModel, Checkpoint, ParamSet};
use crate::error::{Error, Result};
use crate::likelihoods::{discretized_gaussian_logpmf, BinSpec, GaussianParams, DEFAULT_FLOOR};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const KIND: &str = "made";

/// Checks that `ordering` is a permutation of `0..d` and returns each
/// dimension's rank.
fn ranks_of(ordering: &[usize], d: usize) -> Result<Vec<usize>> {
    if ordering.len() != d {
        return Err(Error::invalid(format!(
            "ordering has {} entries for {d} dimensions",
            ordering.len()
        )));
    }
    let mut rank = vec![usize::MAX; d];
    for (pos, &dim) in ordering.iter().enumerate() {
        if dim >= d || rank[dim] != usize::MAX {
            return Err(Error::invalid(format!("ordering {ordering:?} is not a permutation")));
        }
        rank[dim] = pos;
    }
    Ok(rank)
}

/// Connectivity masks for a MADE stack.
///
/// `layer_sizes` lists the input width `D`, the hidden widths, and the
/// output width, which must be a multiple of `D` (output unit `o` serves
/// dimension `o % D`). Each mask has shape `[fan_in, fan_out]`. Hidden
/// units draw a degree `m` uniformly from `[min of previous layer, D - 2]`
/// using zero-based ranks; a hidden edge `a -> b` exists iff
/// `m(b) >= m(a)`, an output edge iff `rank(o) > m(a)`.
pub fn build_made_masks(layer_sizes: &[usize], ordering: &[usize], seed: u64) -> Result<Vec<Tensor>> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::invalid(format!("bad layer sizes {layer_sizes:?}")));
    }
    let d = layer_sizes[0];
    let out = *layer_sizes.last().unwrap();
    if out % d != 0 {
        return Err(Error::invalid(format!("output width {out} is not a multiple of D = {d}")));
    }
    let rank = ranks_of(ordering, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_degree = d.saturating_sub(2);

    let mut prev: Vec<usize> = rank.clone();
    let mut masks = Vec::with_capacity(layer_sizes.len() - 1);
    for &width in &layer_sizes[1..layer_sizes.len() - 1] {
        let lo = prev.iter().copied().min().unwrap().min(max_degree);
        let degrees: Vec<usize> = (0..width).map(|_| rng.random_range(lo..=max_degree)).collect();
        let mut m = vec![0.0; prev.len() * width];
        for (a, &ma) in prev.iter().enumerate() {
            for (b, &mb) in degrees.iter().enumerate() {
                if mb >= ma {
                    m[a * width + b] = 1.0;
                }
            }
        }
        masks.push(Tensor::new(vec![prev.len(), width], m)?);
        prev = degrees;
    }
    let mut m = vec![0.0; prev.len() * out];
    for (a, &ma) in prev.iter().enumerate() {
        for o in 0..out {
            if rank[o % d] > ma {
                m[a * out + o] = 1.0;
            }
        }
    }
    masks.push(Tensor::new(vec![prev.len(), out], m)?);
    Ok(masks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MadeConfig {
    pub dims: usize,
    pub hidden: Vec<usize>,
    /// `None` means the natural order `0..dims`.
    pub ordering: Option<Vec<usize>>,
    pub bins: BinSpec,
    pub seed: u64,
    /// Start with `μ = 0, log σ = 0` for every conditional.
    pub zero_init_output: bool,
    /// Lower clamp applied to the summed log-probability of each example.
    pub joint_floor: Option<f64>,
}

impl MadeConfig {
    /// Two hidden layers of width 64 over the 2D toy grid.
    pub fn toy(seed: u64) -> Self {
        MadeConfig {
            dims: 2,
            hidden: vec![64, 64],
            ordering: None,
            bins: BinSpec::toy(),
            seed,
            zero_init_output: true,
            joint_floor: Some(DEFAULT_FLOOR),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MadeModel {
    config: MadeConfig,
    ordering: Vec<usize>,
    shape: [usize; 1],
    masks: Vec<Arc<Tensor>>,
    params: ParamSet,
}

impl MadeModel {
    pub fn new(config: MadeConfig) -> Result<Self> {
        let d = config.dims;
        if d == 0 {
            return Err(Error::invalid("MADE needs at least one dimension"));
        }
        let ordering = config.ordering.clone().unwrap_or_else(|| (0..d).collect());
        let mut sizes = vec![d];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(2 * d);
        let masks = build_made_masks(&sizes, &ordering, config.seed)?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_3ade);
        let mut params = ParamSet::new();
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l + 1 == layers;
            let w = if last && config.zero_init_output {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                let std = 1.0 / (fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::new(vec![fan_in, fan_out], (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect())?
            };
            params.push(format!("layer{l}.w"), w);
            params.push(format!("layer{l}.b"), Tensor::zeros(&[fan_out]));
        }
        Ok(MadeModel {
            shape: [d],
            ordering,
            masks: masks.into_iter().map(Arc::new).collect(),
            params,
            config,
        })
    }

    pub fn config(&self) -> &MadeConfig {
        &self.config
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn masks(&self) -> Vec<&Tensor> {
        self.masks.iter().map(|m| m.as_ref()).collect()
    }

    /// Head outputs `[B, 2D]`: means first, then log standard deviations.
    fn head_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        if params.len() != 2 * self.masks.len() {
            return Err(Error::invalid(format!(
                "MADE expects {} parameter nodes, got {}",
                2 * self.masks.len(),
                params.len()
            )));
        }
        let mut h = x;
        for (l, mask) in self.masks.iter().enumerate() {
            let z = tape.masked_matmul(h, params[2 * l], mask.clone())?;
            let z = tape.add(z, params[2 * l + 1])?;
            h = if l + 1 < self.masks.len() { tape.tanh(z)? } else { z };
        }
        Ok(h)
    }

    pub(crate) fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let list = |key: &str| -> Result<Vec<usize>> {
            let raw = ck.meta(key)?;
            if raw.is_empty() {
                return Ok(Vec::new());
            }
            raw.split(',')
                .map(|s| s.parse().map_err(|_| Error::invalid(format!("bad {key} list {raw:?}"))))
                .collect()
        };
        let joint_floor = match ck.meta("joint_floor")? {
            "none" => None,
            v => Some(v.parse().map_err(|_| Error::invalid("bad joint_floor"))?),
        };
        let bins = BinSpec::new(ck.meta_parse("lo")?, ck.meta_parse("hi")?, ck.meta_parse("count")?)?
            .with_floor(ck.meta_parse("floor")?);
        let config = MadeConfig {
            dims: ck.meta_parse("dims")?,
            hidden: list("hidden")?,
            ordering: Some(list("ordering")?),
            bins,
            seed: ck.meta_parse("seed")?,
            zero_init_output: ck.meta_parse("zero_init_output")?,
            joint_floor,
        };
        let mut m = MadeModel::new(config)?;
        for (i, mask) in m.masks.iter_mut().enumerate() {
            let stored = ck.array(&format!("mask{i}"))?;
            if stored.shape() != mask.shape() {
                return Err(Error::shape("checkpoint mask", stored.shape(), mask.shape()));
            }
            *mask = Arc::new(stored.clone());
        }
        m.params.read_from(ck)?;
        Ok(m)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

impl ArModel for MadeModel {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn example_shape(&self) -> &[usize] {
        &self.shape
    }

    fn bins(&self) -> &BinSpec {
        &self.config.bins
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn log_prob_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let d = self.config.dims;
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != d {
            return Err(Error::shape(KIND, &xs, &[0, d]));
        }
        let h = self.head_on(tape, params, x)?;
        let mu = tape.slice(h, 1, 0, d)?;
        let log_sigma = tape.slice(h, 1, d, d)?;
        let per_dim = tape.disc_gaussian(x, mu, log_sigma, self.config.bins)?;
        let total = tape.sum_last_axis(per_dim)?;
        match self.config.joint_floor {
            Some(f) => tape.clamp_min(total, f),
            None => Ok(total),
        }
    }

    /// `[B, D, 2]` holding `(μ, log σ)` for every conditional.
    fn conditionals(&self, x: &Tensor) -> Result<Tensor> {
        let b = check_batch(self, x)?;
        let d = self.config.dims;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let h = self.head_on(&mut tape, &p, xv)?;
        let hv = tape.value(h).data();
        let mut out = vec![0.0; b * d * 2];
        for r in 0..b {
            for i in 0..d {
                out[(r * d + i) * 2] = hv[r * 2 * d + i];
                out[(r * d + i) * 2 + 1] = hv[r * 2 * d + d + i];
            }
        }
        Tensor::new(vec![b, d, 2], out)
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        let d = self.config.dims;
        let bins = &self.config.bins;
        let centers = bins.centers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::zeros(&[n, d]);
        let mut log_w = vec![0.0; centers.len()];
        for &dim in &self.ordering {
            let cond = self.conditionals(&x)?;
            for r in 0..n {
                let base = (r * d + dim) * 2;
                let gp = GaussianParams::new(cond.data()[base], cond.data()[base + 1]);
                for (lw, &c) in log_w.iter_mut().zip(&centers) {
                    *lw = discretized_gaussian_logpmf(c, gp, bins);
                }
                let k = draw_index(&log_w, rng.random::<f64>());
                x.data_mut()[r * d + dim] = centers[k];
            }
        }
        Ok(x)
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(KIND)
            .with_meta("dims", c.dims)
            .with_meta("hidden", join(&c.hidden))
            .with_meta("ordering", join(&self.ordering))
            .with_meta("lo", c.bins.lo())
            .with_meta("hi", c.bins.hi())
            .with_meta("count", c.bins.count())
            .with_meta("floor", c.bins.floor())
            .with_meta("seed", c.seed)
            .with_meta("zero_init_output", c.zero_init_output)
            .with_meta(
                "joint_floor",
                c.joint_floor.map_or_else(|| "none".to_string(), |f| f.to_string()),
            );
        for (i, m) in self.masks.iter().enumerate() {
            ck.push(&format!("mask{i}"), m.as_ref().clone());
        }
        self.params.write_to(&mut ck);
        ck
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::logprob;

    /// Boolean reachability from inputs to outputs through all masks.
    fn reach(masks: &[Tensor]) -> Vec<Vec<bool>> {
        let d = masks[0].shape()[0];
        let mut r: Vec<Vec<bool>> = (0..d).map(|i| (0..d).map(|j| i == j).collect()).collect();
        for m in masks {
            let (fi, fo) = (m.shape()[0], m.shape()[1]);
            r = r
                .iter()
                .map(|row| {
                    (0..fo)
                        .map(|o| (0..fi).any(|a| row[a] && m.data()[a * fo + o] != 0.0))
                        .collect()
                })
                .collect();
        }
        r
    }

    #[test]
    fn d2_natural_ordering() {
        let masks = build_made_masks(&[2, 16, 16, 4], &[0, 1], 3).unwrap();
        let r = reach(&masks);
        // outputs 0 and 2 serve dimension 0, outputs 1 and 3 dimension 1
        for input in 0..2 {
            assert!(!r[input][0] && !r[input][2]);
        }
        assert!(r[0][1] && r[0][3]);
        assert!(!r[1][1] && !r[1][3]);
    }

    #[test]
    fn reversed_ordering_swaps_roles() {
        let masks = build_made_masks(&[2, 8, 4], &[1, 0], 0).unwrap();
        let r = reach(&masks);
        assert!(!r[0][1] && !r[1][1]);
        assert!(r[1][0] && !r[0][0]);
    }

    #[test]
    fn reachability_respects_ranks() {
        for seed in 0..20 {
            let ordering = [2, 0, 1];
            let rank = ranks_of(&ordering, 3).unwrap();
            let masks = build_made_masks(&[3, 8, 8, 6], &ordering, seed).unwrap();
            let r = reach(&masks);
            for j in 0..3 {
                for o in 0..6 {
                    if rank[j] >= rank[o % 3] {
                        assert!(!r[j][o], "seed {seed}: path {j} -> {o}");
                    }
                }
            }
        }
    }

    #[test]
    fn non_permutation_rejected() {
        assert!(build_made_masks(&[2, 4, 4], &[0, 0], 0).is_err());
        assert!(build_made_masks(&[2, 4, 4], &[0], 0).is_err());
        assert!(build_made_masks(&[2, 4, 3], &[0, 1], 0).is_err());
    }

    #[test]
    fn zero_init_matches_closed_form() {
        let m = MadeModel::new(MadeConfig::toy(5)).unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.0, 0.4, -1.3, 2.2, 4.9, -4.7]).unwrap();
        let lp = logprob(&m, &x).unwrap();
        let std = GaussianParams::new(0.0, 0.0);
        for r in 0..3 {
            let want: f64 = (0..2)
                .map(|i| discretized_gaussian_logpmf(x.data()[r * 2 + i], std, &BinSpec::toy()))
                .sum();
            assert!((lp[r] - want).abs() < 1e-12);
            assert!(lp[r] <= 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MadeModel::new(MadeConfig {
            zero_init_output: false,
            ordering: Some(vec![1, 0]),
            ..MadeConfig::toy(9)
        })
        .unwrap();
        let back = MadeModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes().unwrap()).unwrap())
            .unwrap();
        assert!(m.params().bitwise_eq(back.params()));
        assert_eq!(back.ordering(), &[1, 0]);
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        assert_eq!(logprob(&m, &x).unwrap(), logprob(&back, &x).unwrap());
    }

    #[test]
    fn sampling_is_deterministic_and_on_centers() {
        let m = MadeModel::new(MadeConfig {
            zero_init_output: false,
            ..MadeConfig::toy(2)
        })
        .unwrap();
        let a = m.sample(50, 11).unwrap();
        let b = m.sample(50, 11).unwrap();
        assert_eq!(a, b);
        let bins = BinSpec::toy();
        for v in a.data() {
            assert_eq!(*v, bins.snap(*v));
        }
    }
}
