//! Masked-convolution pixel model with a discretized logistic mixture head.
//!
//! Pixels are visited in raster order and, within a pixel, channel by
//! channel. Feature maps are split into as many contiguous groups as the
//! image has channels; the center tap of a kernel connects input group `i`
//! to output group `o` when `o > i` (type A) or `o >= i` (type B). Taps
//! above the center row or to its left are always open, the rest closed.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{check_batch, draw_index, ArModel, Checkpoint, ParamSet};
use crate::error::{Error, Result};
use crate::likelihoods::{logistic_mixture_bin, BinSpec, LogisticComponent, LogisticMixtureParams};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const KIND: &str = "pixel_ar";

/// Center-tap rule for a masked kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskType {
    /// Excludes the current channel group: the first layer.
    A,
    /// Includes it: every later layer.
    B,
    /// No mask at all. Breaks the autoregressive property; for tests.
    None,
}

impl MaskType {
    fn as_str(self) -> &'static str {
        match self {
            MaskType::A => "A",
            MaskType::B => "B",
            MaskType::None => "none",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(MaskType::A),
            "B" => Ok(MaskType::B),
            "none" => Ok(MaskType::None),
            other => Err(Error::invalid(format!("unknown mask type {other:?}"))),
        }
    }
}

/// Binary mask of shape `[cout, cin, k, k]`.
pub fn conv_mask(cout: usize, cin: usize, k: usize, groups: usize, kind: MaskType) -> Tensor {
    let c = k / 2;
    let group = |i: usize, n: usize| i * groups / n;
    let mut m = vec![0.0; cout * cin * k * k];
    for o in 0..cout {
        for i in 0..cin {
            for r in 0..k {
                for s in 0..k {
                    let open = if kind == MaskType::None || r < c || (r == c && s < c) {
                        true
                    } else if r == c && s == c {
                        match kind {
                            MaskType::A => group(o, cout) > group(i, cin),
                            _ => group(o, cout) >= group(i, cin),
                        }
                    } else {
                        false
                    };
                    if open {
                        m[((o * cin + i) * k + r) * k + s] = 1.0;
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, cin, k, k], m).expect("mask shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelArConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Feature maps per hidden layer.
    pub hidden: usize,
    /// Masked convolution layers before the 1×1 head.
    pub layers: usize,
    pub first_kernel: usize,
    pub kernel: usize,
    /// Logistic components per channel.
    pub components: usize,
    pub bins: BinSpec,
    pub seed: u64,
    pub first_mask: MaskType,
    pub min_log_scale: Option<f64>,
}

impl PixelArConfig {
    pub fn new(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        PixelArConfig {
            channels,
            height,
            width,
            hidden: 32,
            layers: 5,
            first_kernel: 7,
            kernel: 3,
            components: 5,
            bins: BinSpec::image(),
            seed,
            first_mask: MaskType::A,
            min_log_scale: Some(-7.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PixelArModel {
    config: PixelArConfig,
    shape: [usize; 3],
    masks: Vec<Arc<Tensor>>,
    params: ParamSet,
}

impl PixelArModel {
    pub fn new(config: PixelArConfig) -> Result<Self> {
        let c = &config;
        if c.channels == 0 || c.height == 0 || c.width == 0 || c.hidden == 0 || c.layers == 0 {
            return Err(Error::invalid(format!("degenerate pixel model config {c:?}")));
        }
        if c.components == 0 {
            return Err(Error::invalid("need at least one mixture component"));
        }
        if c.first_kernel % 2 == 0 || c.kernel % 2 == 0 {
            return Err(Error::invalid("kernel sizes must be odd"));
        }
        if c.hidden < c.channels {
            return Err(Error::invalid("hidden width must be at least the channel count"));
        }
        let groups = c.channels;
        let head_out = 3 * c.components * c.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut masks = Vec::new();
        let mut params = ParamSet::new();
        for l in 0..c.layers {
            let (cin, k, kind) = if l == 0 {
                (c.channels, c.first_kernel, c.first_mask)
            } else {
                (c.hidden, c.kernel, MaskType::B)
            };
            let mask = conv_mask(c.hidden, cin, k, groups, kind);
            let open = mask.data().iter().sum::<f64>() / c.hidden as f64;
            let normal = Normal::new(0.0, 1.0 / open.max(1.0).sqrt()).expect("positive std");
            let w = (0..mask.len()).map(|_| normal.sample(&mut rng)).collect();
            params.push(format!("conv{l}.w"), Tensor::new(mask.shape().to_vec(), w)?);
            params.push(format!("conv{l}.b"), Tensor::zeros(&[c.hidden]));
            masks.push(Arc::new(mask));
        }
        let mask = conv_mask(head_out, c.hidden, 1, groups, MaskType::B);
        let normal = Normal::new(0.0, 0.05 / (c.hidden as f64).sqrt()).expect("positive std");
        let w = (0..mask.len()).map(|_| normal.sample(&mut rng)).collect();
        params.push("head.w", Tensor::new(mask.shape().to_vec(), w)?);
        let k = c.components;
        let mut b = vec![0.0; head_out];
        for ch in 0..c.channels {
            for j in 0..k {
                let spread = if k == 1 { 0.0 } else { -0.8 + 1.6 * j as f64 / (k - 1) as f64 };
                b[ch * 3 * k + k + j] = spread;
                b[ch * 3 * k + 2 * k + j] = -2.0;
            }
        }
        params.push("head.b", Tensor::from_vec(b));
        masks.push(Arc::new(mask));
        Ok(PixelArModel {
            shape: [c.channels, c.height, c.width],
            masks,
            params,
            config,
        })
    }

    pub fn config(&self) -> &PixelArConfig {
        &self.config
    }

    fn head_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        if params.len() != 2 * self.masks.len() {
            return Err(Error::invalid(format!(
                "pixel model expects {} parameter nodes, got {}",
                2 * self.masks.len(),
                params.len()
            )));
        }
        let mut h = x;
        let last = self.masks.len() - 1;
        for (l, mask) in self.masks.iter().enumerate() {
            let z = tape.conv2d(h, params[2 * l], params[2 * l + 1], Some(mask.clone()))?;
            h = if l < last { tape.tanh(z)? } else { z };
        }
        Ok(h)
    }

    pub(crate) fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bins = BinSpec::new(ck.meta_parse("lo")?, ck.meta_parse("hi")?, ck.meta_parse("count")?)?
            .with_floor(ck.meta_parse("floor")?);
        let min_log_scale = match ck.meta("min_log_scale")? {
            "none" => None,
            v => Some(v.parse().map_err(|_| Error::invalid("bad min_log_scale"))?),
        };
        let config = PixelArConfig {
            channels: ck.meta_parse("channels")?,
            height: ck.meta_parse("height")?,
            width: ck.meta_parse("width")?,
            hidden: ck.meta_parse("hidden")?,
            layers: ck.meta_parse("layers")?,
            first_kernel: ck.meta_parse("first_kernel")?,
            kernel: ck.meta_parse("kernel")?,
            components: ck.meta_parse("components")?,
            bins,
            seed: ck.meta_parse("seed")?,
            first_mask: MaskType::parse(ck.meta("first_mask")?)?,
            min_log_scale,
        };
        let mut m = PixelArModel::new(config)?;
        m.params.read_from(ck)?;
        Ok(m)
    }

    /// Mixture parameters for channel `ch` at `(row, col)` of example `b`.
    fn mixture_at(&self, p: &Tensor, b: usize, ch: usize, row: usize, col: usize) -> LogisticMixtureParams {
        let c = &self.config;
        let k = c.components;
        let plane = c.height * c.width;
        let at = |j: usize| p.data()[(b * 3 * k * c.channels + ch * 3 * k + j) * plane + row * c.width + col];
        let comps = (0..k)
            .map(|j| LogisticComponent {
                logit_weight: at(j),
                mu: at(k + j),
                log_scale: at(2 * k + j),
            })
            .collect();
        LogisticMixtureParams::new(comps).expect("k >= 1")
    }
}

impl ArModel for PixelArModel {
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
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1..] != self.shape {
            return Err(Error::shape(KIND, &xs, &[0, self.shape[0], self.shape[1], self.shape[2]]));
        }
        let p = self.head_on(tape, params, x)?;
        let lp = tape.disc_logistic_mixture(
            x,
            p,
            self.config.bins,
            self.config.components,
            self.config.min_log_scale,
        )?;
        let flat = tape.reshape(lp, &[xs[0], self.dims()])?;
        tape.sum_last_axis(flat)
    }

    /// Head output `[B, 3KC, H, W]`; per channel `K` logits, `K` means,
    /// `K` log scales.
    fn conditionals(&self, x: &Tensor) -> Result<Tensor> {
        check_batch(self, x)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let h = self.head_on(&mut tape, &p, xv)?;
        Ok(tape.value(h).clone())
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        let c = &self.config;
        let centers = c.bins.centers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::zeros(&[n, c.channels, c.height, c.width]);
        let plane = c.height * c.width;
        let mut log_w = vec![0.0; centers.len()];
        for row in 0..c.height {
            for col in 0..c.width {
                for ch in 0..c.channels {
                    let p = self.conditionals(&x)?;
                    for b in 0..n {
                        let mix = self.mixture_at(&p, b, ch, row, col);
                        for (lw, &v) in log_w.iter_mut().zip(&centers) {
                            *lw = logistic_mixture_bin(v, &mix, &c.bins, c.min_log_scale).value;
                        }
                        let k = draw_index(&log_w, rng.random::<f64>());
                        x.data_mut()[(b * c.channels + ch) * plane + row * c.width + col] = centers[k];
                    }
                }
            }
        }
        Ok(x)
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(KIND)
            .with_meta("channels", c.channels)
            .with_meta("height", c.height)
            .with_meta("width", c.width)
            .with_meta("hidden", c.hidden)
            .with_meta("layers", c.layers)
            .with_meta("first_kernel", c.first_kernel)
            .with_meta("kernel", c.kernel)
            .with_meta("components", c.components)
            .with_meta("lo", c.bins.lo())
            .with_meta("hi", c.bins.hi())
            .with_meta("count", c.bins.count())
            .with_meta("floor", c.bins.floor())
            .with_meta("seed", c.seed)
            .with_meta("first_mask", c.first_mask.as_str())
            .with_meta(
                "min_log_scale",
                c.min_log_scale.map_or_else(|| "none".to_string(), |v| v.to_string()),
            );
        self.params.write_to(&mut ck);
        ck
    }
}

/// True iff the conditional parameters at `position` are bitwise unchanged
/// when every raster-later pixel, and every same-or-later channel of the
/// pixel itself, is replaced by a different value.
pub fn pixel_receptive_field_check(model: &PixelArModel, position: (usize, usize), seed: u64) -> Result<bool> {
    let c = model.config();
    let (row, col) = position;
    if row >= c.height || col >= c.width {
        return Err(Error::invalid(format!("position {position:?} outside {}×{}", c.height, c.width)));
    }
    let bins = c.bins;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = c.height * c.width;
    let base: Vec<f64> = (0..c.channels * plane)
        .map(|_| bins.center(rng.random_range(0..bins.count())))
        .collect();
    let x0 = Tensor::new(vec![1, c.channels, c.height, c.width], base)?;
    let p0 = model.conditionals(&x0)?;
    let k3 = 3 * c.components;
    let here = row * c.width + col;
    for ch in 0..c.channels {
        let mut x1 = x0.clone();
        for cc in 0..c.channels {
            for pos in 0..plane {
                if pos > here || (pos == here && cc >= ch) {
                    let i = cc * plane + pos;
                    let old = bins.index(x1.data()[i]);
                    let shift = rng.random_range(1..bins.count());
                    x1.data_mut()[i] = bins.center((old + shift) % bins.count());
                }
            }
        }
        let p1 = model.conditionals(&x1)?;
        for j in 0..k3 {
            let i = (ch * k3 + j) * plane + here;
            if p0.data()[i].to_bits() != p1.data()[i].to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::logprob;

    fn tiny(channels: usize, first_mask: MaskType) -> PixelArModel {
        PixelArModel::new(PixelArConfig {
            hidden: 6,
            layers: 3,
            first_kernel: 5,
            components: 2,
            first_mask,
            ..PixelArConfig::new(channels, 6, 5, 4)
        })
        .unwrap()
    }

    #[test]
    fn masked_model_passes_perturbation_check() {
        for channels in [1, 3] {
            let m = tiny(channels, MaskType::A);
            for (i, pos) in [(0, 0), (0, 4), (2, 3), (5, 4), (3, 0)].into_iter().enumerate() {
                assert!(pixel_receptive_field_check(&m, pos, i as u64).unwrap(), "{channels} {pos:?}");
            }
        }
    }

    #[test]
    fn type_b_or_unmasked_first_layer_fails() {
        for kind in [MaskType::B, MaskType::None] {
            let m = tiny(1, kind);
            assert!(!pixel_receptive_field_check(&m, (2, 2), 0).unwrap());
        }
    }

    #[test]
    fn log_prob_is_non_positive_and_checkpoints_round_trip() {
        let m = tiny(3, MaskType::A);
        let x = m.sample(2, 8).unwrap();
        let lp = logprob(&m, &x).unwrap();
        assert!(lp.iter().all(|v| *v <= 0.0));
        let back = PixelArModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(lp, logprob(&back, &x).unwrap());
    }

    #[test]
    fn mask_center_rules() {
        let a = conv_mask(3, 3, 3, 3, MaskType::A);
        let b = conv_mask(3, 3, 3, 3, MaskType::B);
        let center = |m: &Tensor, o: usize, i: usize| m.data()[((o * 3 + i) * 3 + 1) * 3 + 1];
        assert_eq!(center(&a, 1, 0), 1.0);
        assert_eq!(center(&a, 1, 1), 0.0);
        assert_eq!(center(&b, 1, 1), 1.0);
        assert_eq!(center(&b, 0, 1), 0.0);
        // bottom row always closed
        assert!((0..3).all(|s| a.data()[2 * 3 + s] == 0.0));
    }
}
