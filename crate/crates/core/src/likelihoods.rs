//! Discretized probability mass functions used as model output heads.
//!
//! A continuous density is integrated between the edges of the bin that
//! contains `x`. The edges are taken as `x ± Δ/2` rather than the fixed edges
//! of the snapped bin, which coincide at bin centers and keep the mass a
//! differentiable function of `x` everywhere else. The lowest and highest bins
//! absorb the open tails.
//!
//! Every log mass is clamped from below at [`BinSpec::floor`]; once clamped,
//! its gradient is exactly zero.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::special::{
    log1mexp, log_ndtr, log_normal_pdf, log_sigmoid_deriv, logsumexp, softplus,
};

pub const DEFAULT_FLOOR: f64 = -40.0;

/// Discretization grid: `count` bin centers evenly spaced from `lo` to `hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinSpec {
    lo: f64,
    hi: f64,
    count: usize,
    floor: f64,
}

impl BinSpec {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::invalid(format!("bin count {count} < 2")));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::invalid(format!("bad bin range [{lo}, {hi}]")));
        }
        Ok(BinSpec {
            lo,
            hi,
            count,
            floor: DEFAULT_FLOOR,
        })
    }

    /// 51 bins on `[-5, 5]`; the center bin sits exactly at 0.
    pub fn toy() -> Self {
        BinSpec::new(-5.0, 5.0, 51).expect("static bin spec")
    }

    /// 256 pixel levels rescaled to `[-1, 1]`.
    pub fn image() -> Self {
        BinSpec::new(-1.0, 1.0, 256).expect("static bin spec")
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }
    pub fn hi(&self) -> f64 {
        self.hi
    }
    pub fn count(&self) -> usize {
        self.count
    }
    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }

    pub fn center(&self, index: usize) -> f64 {
        if index + 1 == self.count {
            self.hi
        } else {
            self.lo + index as f64 * self.width()
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.center(i)).collect()
    }

    /// Nearest bin; values beyond either end land in the edge bins.
    pub fn index(&self, x: f64) -> usize {
        let t = ((x - self.lo) / self.width()).round();
        if t.is_nan() || t <= 0.0 {
            0
        } else if t >= (self.count - 1) as f64 {
            self.count - 1
        } else {
            t as usize
        }
    }

    pub fn snap(&self, x: f64) -> f64 {
        self.center(self.index(x))
    }

    /// Standardized lower/upper integration limits for `x` under location
    /// `mu` and scale `scale`; infinite for the open edge bins.
    fn limits(&self, x: f64, mu: f64, scale: f64) -> (f64, f64) {
        let idx = self.index(x);
        let half = 0.5 * self.width();
        let lower = if idx == 0 {
            f64::NEG_INFINITY
        } else {
            (x - half - mu) / scale
        };
        let upper = if idx + 1 == self.count {
            f64::INFINITY
        } else {
            (x + half - mu) / scale
        };
        (lower, upper)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: f64,
    pub log_sigma: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, log_sigma: f64) -> Self {
        GaussianParams { mu, log_sigma }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogisticComponent {
    pub logit_weight: f64,
    pub mu: f64,
    pub log_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticMixtureParams {
    components: Vec<LogisticComponent>,
}

impl LogisticMixtureParams {
    pub fn new(components: Vec<LogisticComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("logistic mixture needs K >= 1"));
        }
        Ok(LogisticMixtureParams { components })
    }

    pub fn single(mu: f64, log_scale: f64) -> Self {
        LogisticMixtureParams {
            components: vec![LogisticComponent {
                logit_weight: 0.0,
                mu,
                log_scale,
            }],
        }
    }

    pub fn components(&self) -> &[LogisticComponent] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        let logits: Vec<f64> = self.components.iter().map(|c| c.logit_weight).collect();
        let lse = logsumexp(&logits);
        logits.iter().map(|l| (l - lse).exp()).collect()
    }
}

/// Clamped log mass and its partial derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BinEval {
    pub value: f64,
    pub d_x: f64,
    pub d_mu: f64,
    pub d_log_scale: f64,
    pub clamped: bool,
}

impl BinEval {
    fn floored(floor: f64) -> Self {
        BinEval {
            value: floor,
            clamped: true,
            ..Default::default()
        }
    }
}

/// `ln(Φ(upper) − Φ(lower))` for `lower < upper`.
pub(crate) fn log_gaussian_mass(lower: f64, upper: f64) -> f64 {
    match (lower == f64::NEG_INFINITY, upper == f64::INFINITY) {
        (true, true) => 0.0,
        (true, false) => log_ndtr(upper),
        (false, true) => log_ndtr(-lower),
        (false, false) => {
            if lower >= 0.0 {
                log_gaussian_mass(-upper, -lower)
            } else if upper <= 0.0 {
                let a = log_ndtr(upper);
                let b = log_ndtr(lower);
                a + log1mexp(b - a)
            } else {
                let s = std::f64::consts::SQRT_2;
                (0.5 * (libm::erf(upper / s) + libm::erf(-lower / s))).ln()
            }
        }
    }
}

/// `ln(L(upper) − L(lower))` for the standard logistic CDF `L`.
pub(crate) fn log_logistic_mass(lower: f64, upper: f64) -> f64 {
    match (lower == f64::NEG_INFINITY, upper == f64::INFINITY) {
        (true, true) => 0.0,
        (true, false) => -softplus(-upper),
        (false, true) => -softplus(lower),
        (false, false) => upper + log1mexp(lower - upper) - softplus(upper) - softplus(lower),
    }
}

/// Derivatives of a log mass `ℓ` with respect to its standardized limits,
/// given the log densities at those limits.
fn limit_partials(value: f64, lower: f64, upper: f64, log_pdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let du = if upper.is_finite() {
        (log_pdf(upper) - value).exp()
    } else {
        0.0
    };
    let dl = if lower.is_finite() {
        -(log_pdf(lower) - value).exp()
    } else {
        0.0
    };
    (dl, du)
}

/// Chain rule from limit partials to `(d_x, d_mu, d_log_scale)`.
fn location_scale_partials(dl: f64, du: f64, lower: f64, upper: f64, scale: f64) -> (f64, f64, f64) {
    let d_x = (dl + du) / scale;
    let mut d_ls = 0.0;
    if dl != 0.0 {
        d_ls -= lower * dl;
    }
    if du != 0.0 {
        d_ls -= upper * du;
    }
    (d_x, -d_x, d_ls)
}

/// Discretized Gaussian log mass with partials.
pub fn gaussian_bin(x: f64, params: GaussianParams, bins: &BinSpec) -> BinEval {
    let sigma = params.sigma();
    let (lower, upper) = bins.limits(x, params.mu, sigma);
    let value = log_gaussian_mass(lower, upper);
    if value.is_nan() || value < bins.floor {
        return BinEval::floored(bins.floor);
    }
    let (dl, du) = limit_partials(value, lower, upper, log_normal_pdf);
    let (d_x, d_mu, d_log_scale) = location_scale_partials(dl, du, lower, upper, sigma);
    BinEval {
        value,
        d_x,
        d_mu,
        d_log_scale,
        clamped: false,
    }
}

pub fn discretized_gaussian_logpmf(x: f64, params: GaussianParams, bins: &BinSpec) -> f64 {
    gaussian_bin(x, params, bins).value
}

/// Unclamped discretized logistic component: `(ℓ, d_x, d_mu, d_log_scale)`.
pub(crate) fn logistic_component(x: f64, mu: f64, log_scale: f64, bins: &BinSpec) -> (f64, f64, f64, f64) {
    let scale = log_scale.exp();
    let (lower, upper) = bins.limits(x, mu, scale);
    let value = log_logistic_mass(lower, upper);
    if !value.is_finite() {
        return (f64::NEG_INFINITY, 0.0, 0.0, 0.0);
    }
    let (dl, du) = limit_partials(value, lower, upper, log_sigmoid_deriv);
    let (d_x, d_mu, d_ls) = location_scale_partials(dl, du, lower, upper, scale);
    (value, d_x, d_mu, d_ls)
}

/// Per-component gradients of a mixture log mass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MixtureEval {
    pub value: f64,
    pub d_x: f64,
    pub d_logit: Vec<f64>,
    pub d_mu: Vec<f64>,
    pub d_log_scale: Vec<f64>,
    pub clamped: bool,
}

/// Discretized logistic mixture log mass with partials.
///
/// `min_log_scale`, when set, clamps each component's log scale from below;
/// the clamped coordinate then receives zero gradient.
pub fn logistic_mixture_bin(
    x: f64,
    params: &LogisticMixtureParams,
    bins: &BinSpec,
    min_log_scale: Option<f64>,
) -> MixtureEval {
    let k = params.components.len();
    let logits: Vec<f64> = params.components.iter().map(|c| c.logit_weight).collect();
    let lse = logsumexp(&logits);
    let log_w: Vec<f64> = logits.iter().map(|l| l - lse).collect();

    let mut comps = Vec::with_capacity(k);
    let mut joint = Vec::with_capacity(k);
    for (c, lw) in params.components.iter().zip(&log_w) {
        let (ls, ls_active) = match min_log_scale {
            Some(m) if c.log_scale < m => (m, false),
            _ => (c.log_scale, true),
        };
        let r = logistic_component(x, c.mu, ls, bins);
        joint.push(lw + r.0);
        comps.push((r, ls_active));
    }
    let value = logsumexp(&joint);
    if value.is_nan() || value < bins.floor {
        return MixtureEval {
            value: bins.floor,
            d_logit: vec![0.0; k],
            d_mu: vec![0.0; k],
            d_log_scale: vec![0.0; k],
            clamped: true,
            ..Default::default()
        };
    }
    let mut out = MixtureEval {
        value,
        d_logit: vec![0.0; k],
        d_mu: vec![0.0; k],
        d_log_scale: vec![0.0; k],
        ..Default::default()
    };
    for j in 0..k {
        let resp = (joint[j] - value).exp();
        out.d_logit[j] = resp - log_w[j].exp();
        if resp == 0.0 {
            continue;
        }
        let ((_, dx, dmu, dls), ls_active) = comps[j];
        out.d_x += resp * dx;
        out.d_mu[j] = resp * dmu;
        if ls_active {
            out.d_log_scale[j] = resp * dls;
        }
    }
    out
}

pub fn discretized_logistic_mixture_logpmf(
    x: f64,
    params: &LogisticMixtureParams,
    bins: &BinSpec,
) -> f64 {
    logistic_mixture_bin(x, params, bins, None).value
}

/// Converts a total negative log-likelihood in nats to bits per dimension.
pub fn bits_per_dim(total_nll_nats: f64, dims: usize) -> Result<f64> {
    if dims < 1 {
        return Err(Error::invalid("bits_per_dim needs dims >= 1"));
    }
    Ok(total_nll_nats / (dims as f64 * LN_2))
}

/// Shannon entropy in nats of the discretized `N(mu, sigma²)` over `bins`.
pub fn discretized_gaussian_entropy(params: GaussianParams, bins: &BinSpec) -> f64 {
    bins.centers()
        .iter()
        .map(|&c| {
            let lp = discretized_gaussian_logpmf(c, params, bins);
            -lp.exp() * lp
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::ndtr;

    fn gaussian_mass_naive(lower: f64, upper: f64) -> f64 {
        ndtr(upper) - ndtr(lower)
    }

    #[test]
    fn bin_index_edges() {
        let b = BinSpec::toy();
        assert_eq!(b.index(b.lo()), 0);
        assert_eq!(b.index(b.hi()), b.count() - 1);
        assert_eq!(b.index(0.0), 25);
        assert_eq!(b.center(25), 0.0);
        assert_eq!(b.index(-1e9), 0);
        assert_eq!(b.index(1e9), 50);
        assert!((b.width() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn bin_spec_rejects_degenerate() {
        assert!(BinSpec::new(0.0, 1.0, 1).is_err());
        assert!(BinSpec::new(1.0, 1.0, 4).is_err());
    }

    #[test]
    fn two_bins_symmetric_half() {
        let b = BinSpec::new(-1.0, 1.0, 2).unwrap();
        let p = GaussianParams::new(0.0, 0.7);
        for x in [-1.0, 1.0] {
            let lp = discretized_gaussian_logpmf(x, p, &b);
            assert!((lp + LN_2).abs() < 1e-15, "{lp}");
        }
    }

    #[test]
    fn gaussian_mass_matches_naive_in_bulk() {
        for &(l, u) in &[(-0.3, 0.2), (0.5, 0.9), (-2.0, -1.5), (-0.01, 0.01), (3.0, 3.2)] {
            let a = log_gaussian_mass(l, u);
            let b = gaussian_mass_naive(l, u).ln();
            assert!((a - b).abs() < 1e-10, "({l},{u}): {a} vs {b}");
        }
    }

    #[test]
    fn gaussian_mass_far_tail_finite() {
        let v = log_gaussian_mass(50.0, 50.1);
        assert!(v.is_finite() && v < -1000.0);
        let w = log_gaussian_mass(-50.1, -50.0);
        assert!((v - w).abs() < 1e-9);
    }

    #[test]
    fn logistic_mass_matches_naive() {
        let sig = crate::special::sigmoid;
        for &(l, u) in &[(-0.3, 0.2), (0.5, 0.9), (-20.0, -19.5), (30.0, 30.5)] {
            let a = log_logistic_mass(l, u);
            let b = if l > 0.0 {
                (sig(-l) - sig(-u)).ln()
            } else {
                (sig(u) - sig(l)).ln()
            };
            assert!((a - b).abs() < 1e-9, "({l},{u}): {a} vs {b}");
        }
    }

    #[test]
    fn narrow_sigma_concentrates_on_center_bin() {
        let b = BinSpec::toy();
        let p = GaussianParams::new(0.0, (b.width() / 100.0).ln());
        let lp = discretized_gaussian_logpmf(0.0, p, &b);
        assert!(lp.exp() > 0.999);
        for i in (0..b.count()).filter(|&i| i != 25) {
            assert_eq!(discretized_gaussian_logpmf(b.center(i), p, &b), b.floor());
        }
    }

    #[test]
    fn floor_is_configurable_and_has_zero_gradient() {
        let b = BinSpec::toy().with_floor(-10.0);
        let e = gaussian_bin(3.0, GaussianParams::new(0.0, -3.0), &b);
        assert!(e.clamped);
        assert_eq!(e.value, -10.0);
        assert_eq!((e.d_x, e.d_mu, e.d_log_scale), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_component_mixture_is_plain_logistic() {
        let b = BinSpec::image();
        let params = LogisticMixtureParams::single(0.13, -2.2);
        for &x in &[-1.0, -0.2, 0.13, 0.9, 1.0] {
            let lp = discretized_logistic_mixture_logpmf(x, &params, &b);
            let (direct, ..) = logistic_component(x, 0.13, -2.2, &b);
            assert_eq!(lp, direct);
        }
    }

    #[test]
    fn duplicate_components_ignore_weight_split() {
        let b = BinSpec::image();
        let make = |w: f64| {
            let lw = (w / (1.0 - w)).ln();
            LogisticMixtureParams::new(vec![
                LogisticComponent { logit_weight: lw, mu: -0.3, log_scale: -1.5 },
                LogisticComponent { logit_weight: 0.0, mu: -0.3, log_scale: -1.5 },
            ])
            .unwrap()
        };
        for &x in &[-1.0, -0.3, 0.4] {
            let a = discretized_logistic_mixture_logpmf(x, &make(0.1), &b);
            let c = discretized_logistic_mixture_logpmf(x, &make(0.8), &b);
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mixture_rejected() {
        assert!(LogisticMixtureParams::new(vec![]).is_err());
    }

    #[test]
    fn bits_per_dim_conventions() {
        assert!((bits_per_dim(7.0 * LN_2, 7).unwrap() - 1.0).abs() < 1e-15);
        let uniform = 10.0 * (256f64).ln();
        assert!((bits_per_dim(uniform, 10).unwrap() - 8.0).abs() < 1e-12);
        assert_eq!(bits_per_dim(0.0, 3).unwrap(), 0.0);
        assert!(bits_per_dim(1.0, 0).is_err());
    }

    #[test]
    fn mixture_weights_sum_to_one() {
        let p = LogisticMixtureParams::new(vec![
            LogisticComponent { logit_weight: 3.0, mu: 0.0, log_scale: 0.0 },
            LogisticComponent { logit_weight: -700.0, mu: 0.0, log_scale: 0.0 },
            LogisticComponent { logit_weight: 1.5, mu: 0.0, log_scale: 0.0 },
        ])
        .unwrap();
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
