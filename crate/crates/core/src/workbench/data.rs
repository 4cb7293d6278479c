//! Datasets: the 2D manifold toy, procedurally rendered digits and shapes,
//! colorized digits, IDX files, and constant/noise probe images.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::likelihoods::BinSpec;
use crate::sample_opt::{probe_start_set, ProbeKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Tensor,
    pub labels: Option<Vec<usize>>,
    pub bins: BinSpec,
    pub provenance: String,
}

impl Dataset {
    pub fn new(name: &str, examples: Tensor, labels: Option<Vec<usize>>, bins: BinSpec, provenance: &str) -> Result<Self> {
        if examples.rank() < 2 {
            return Err(Error::invalid("dataset examples need a leading batch axis"));
        }
        if let Some(l) = &labels {
            if l.len() != examples.shape()[0] {
                return Err(Error::invalid(format!(
                    "{} labels for {} examples",
                    l.len(),
                    examples.shape()[0]
                )));
            }
        }
        Ok(Dataset {
            name: name.to_string(),
            examples,
            labels,
            bins,
            provenance: provenance.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.examples.shape()[1..]
    }

    /// Rows `idx`, labels included.
    pub fn subset(&self, idx: &[usize], name: &str) -> Result<Dataset> {
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Dataset::new(name, self.examples.select_rows(idx)?, labels, self.bins, &self.provenance)
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, &self.name)
    }
}

/// `n` points with `x₁ = 0` and `x₂ ~ N(0, 1)`.
pub fn gen_manifold2d(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("manifold dataset needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x2: f64 = StandardNormal.sample(&mut rng);
        data.push(0.0);
        data.push(x2);
    }
    Dataset::new(
        "manifold2d",
        Tensor::new(vec![n, 2], data)?,
        None,
        BinSpec::toy(),
        "x1 = 0, x2 ~ N(0,1)",
    )
}

type Stroke = Vec<(f64, f64)>;

/// Points on an elliptical arc in a y-down box; angles in degrees,
/// counter-clockwise on screen, 90 pointing up.
fn arc(cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let a = (a0 + (a1 - a0) * i as f64 / n as f64).to_radians();
            (cx + rx * a.cos(), cy - ry * a.sin())
        })
        .collect()
}

fn glyph(digit: usize) -> Vec<Stroke> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.38, 0.5, 0.0, 360.0, 24)],
        1 => vec![vec![(0.3, 0.2), (0.55, 0.0), (0.55, 1.0)]],
        2 => {
            let mut s = arc(0.5, 0.28, 0.38, 0.28, 160.0, -30.0, 12);
            s.extend([(0.1, 1.0), (0.9, 1.0)]);
            vec![s]
        }
        3 => vec![
            arc(0.5, 0.26, 0.36, 0.26, 150.0, -90.0, 12),
            arc(0.5, 0.74, 0.4, 0.26, 90.0, -150.0, 12),
        ],
        4 => vec![vec![(0.7, 1.0), (0.7, 0.0), (0.05, 0.68), (0.95, 0.68)]],
        5 => {
            let mut s = vec![(0.85, 0.0), (0.2, 0.0), (0.17, 0.46)];
            s.extend(arc(0.48, 0.68, 0.38, 0.32, 140.0, -140.0, 14));
            vec![s]
        }
        6 => vec![
            arc(0.5, 0.68, 0.38, 0.32, 0.0, 360.0, 20),
            vec![(0.78, 0.05), (0.45, 0.15), (0.2, 0.45), (0.13, 0.68)],
        ],
        7 => vec![vec![(0.1, 0.0), (0.9, 0.0), (0.35, 1.0)]],
        8 => vec![
            arc(0.5, 0.25, 0.3, 0.25, 0.0, 360.0, 18),
            arc(0.5, 0.73, 0.37, 0.27, 0.0, 360.0, 20),
        ],
        _ => vec![
            arc(0.5, 0.32, 0.36, 0.32, 0.0, 360.0, 20),
            vec![(0.86, 0.32), (0.8, 0.7), (0.7, 1.0)],
        ],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders polylines (already in pixel coordinates) as anti-aliased strokes
/// into a `size × size` plane of intensities in `[0, 1]`.
fn rasterize(strokes: &[Stroke], size: usize, width: f64) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let mut d = f64::INFINITY;
            for s in strokes {
                for w in s.windows(2) {
                    d = d.min(segment_distance(p, w[0], w[1]));
                }
            }
            img[r * size + c] = (0.5 * width - d + 0.5).clamp(0.0, 1.0);
        }
    }
    img
}

/// Random rotation, scale, shear and shift about the canvas center.
fn jitter(strokes: &mut [Stroke], rng: &mut ChaCha8Rng, size: f64) {
    let rot = rng.random_range(-12.0f64..12.0).to_radians();
    let scale = rng.random_range(0.85..1.1);
    let shear = rng.random_range(-0.15..0.15);
    let (tx, ty) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let c = size / 2.0;
    let (cs, sn) = (rot.cos(), rot.sin());
    for s in strokes.iter_mut() {
        for p in s.iter_mut() {
            let (x, y) = (p.0 - c + shear * (p.1 - c), p.1 - c);
            *p = (c + scale * (cs * x - sn * y) + tx, c + scale * (sn * x + cs * y) + ty);
        }
    }
}

fn quantize(intensity: &[f64]) -> Vec<u8> {
    intensity.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// 2×2 box average of a square byte plane.
fn downscale2(px: &[u8], size: usize) -> Vec<u8> {
    let h = size / 2;
    let mut out = vec![0u8; h * h];
    for r in 0..h {
        for c in 0..h {
            let s: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(dr, dc)| px[(2 * r + dr) * size + 2 * c + dc] as u32)
                .sum();
            out[r * h + c] = ((s + 2) / 4) as u8;
        }
    }
    out
}

/// Byte images `[n, channels, h, w]` to bin centers.
pub fn bytes_to_tensor(bytes: &[u8], shape: Vec<usize>, bins: &BinSpec) -> Result<Tensor> {
    if bins.count() != 256 {
        return Err(Error::invalid("byte images need a 256-bin spec"));
    }
    Tensor::new(shape, bytes.iter().map(|b| bins.center(*b as usize)).collect())
}

/// Bin indices of an image tensor.
pub fn tensor_to_bytes(t: &Tensor, bins: &BinSpec) -> Vec<u8> {
    t.data().iter().map(|v| bins.index(*v).min(255) as u8).collect()
}

/// Procedural handwritten-style digits as raw bytes, `28 × 28` or, with
/// `downscale`, `14 × 14`. Returns `(pixels, labels, side)`.
pub fn render_digits(n: usize, seed: u64, downscale: bool) -> (Vec<u8>, Vec<usize>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 28usize;
    let side = if downscale { 14 } else { 28 };
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let digit = rng.random_range(0..10usize);
        let (bw, bh) = (rng.random_range(11.0..15.0), rng.random_range(17.0..21.0));
        let mut strokes: Vec<Stroke> = glyph(digit)
            .into_iter()
            .map(|s| s.into_iter().map(|(u, v)| (14.0 + (u - 0.5) * bw, 14.0 + (v - 0.5) * bh)).collect())
            .collect();
        jitter(&mut strokes, &mut rng, size as f64);
        let width = rng.random_range(1.8..3.0);
        let px = quantize(&rasterize(&strokes, size, width));
        pixels.extend(if downscale { downscale2(&px, size) } else { px });
        labels.push(digit);
    }
    (pixels, labels, side)
}

/// Digit dataset on the image bin grid, shape `[n, 1, side, side]`.
pub fn synthetic_digits(n: usize, seed: u64, downscale: bool) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("digit dataset needs n >= 1"));
    }
    let (px, labels, side) = render_digits(n, seed, downscale);
    let bins = BinSpec::image();
    Dataset::new(
        "digits",
        bytes_to_tensor(&px, vec![n, 1, side, side], &bins)?,
        Some(labels),
        bins,
        "procedurally rendered digit strokes with affine jitter",
    )
}

/// Outlined rectangles, ellipses, triangles and crosses: an out-of-domain
/// corpus rendered with the same stroke model as the digits.
pub fn synthetic_shapes(n: usize, seed: u64, downscale: bool) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("shape dataset needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 28usize;
    let side = if downscale { 14 } else { 28 };
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = rng.random_range(0..4usize);
        let (cx, cy) = (rng.random_range(10.0..18.0), rng.random_range(10.0..18.0));
        let (rx, ry) = (rng.random_range(5.0..11.0), rng.random_range(5.0..11.0));
        let strokes: Vec<Stroke> = match kind {
            0 => vec![vec![
                (cx - rx, cy - ry),
                (cx + rx, cy - ry),
                (cx + rx, cy + ry),
                (cx - rx, cy + ry),
                (cx - rx, cy - ry),
            ]],
            1 => vec![arc(cx, cy, rx, ry, 0.0, 360.0, 28)],
            2 => vec![vec![(cx, cy - ry), (cx + rx, cy + ry), (cx - rx, cy + ry), (cx, cy - ry)]],
            _ => vec![vec![(cx - rx, cy), (cx + rx, cy)], vec![(cx, cy - ry), (cx, cy + ry)]],
        };
        let width = rng.random_range(1.8..3.0);
        let px = quantize(&rasterize(&strokes, size, width));
        pixels.extend(if downscale { downscale2(&px, size) } else { px });
        labels.push(kind);
    }
    let bins = BinSpec::image();
    Dataset::new(
        "shapes",
        bytes_to_tensor(&pixels, vec![n, 1, side, side], &bins)?,
        Some(labels),
        bins,
        "procedurally rendered outline shapes",
    )
}

/// Per-channel multiplicative tints.
pub const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.25, 0.25],
    [0.25, 1.0, 0.25],
    [0.3, 0.45, 1.0],
    [1.0, 0.9, 0.2],
    [0.2, 0.95, 0.95],
    [1.0, 0.3, 1.0],
];

/// Tints each grayscale image by a random palette entry. Output shape
/// `[n, 3, h, w]`, values snapped to bins.
pub fn colorize_mnist(images: &Dataset, seed: u64) -> Result<Dataset> {
    let s = images.examples.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::invalid(format!("colorize expects [N,1,H,W], got {s:?}")));
    }
    let (n, plane) = (s[0], s[2] * s[3]);
    let bins = images.bins;
    let (lo, hi) = (bins.lo(), bins.hi());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * 3 * plane);
    let mut hues = Vec::with_capacity(n);
    for i in 0..n {
        let hue = rng.random_range(0..PALETTE.len());
        hues.push(hue);
        let src = &images.examples.data()[i * plane..(i + 1) * plane];
        for tint in PALETTE[hue] {
            out.extend(src.iter().map(|v| {
                let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
                bins.snap(lo + t * tint * (hi - lo))
            }));
        }
    }
    Dataset::new(
        &format!("{}-colored", images.name),
        Tensor::new(vec![n, 3, s[2], s[3]], out)?,
        images.labels.clone(),
        bins,
        "multiplicative palette tint of grayscale digits",
    )
}

/// Channel mean, `[n, 3, h, w] -> [n, 1, h, w]`.
pub fn decolorize(images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("decolorize expects [N,C,H,W], got {s:?}")));
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; n * plane];
    for i in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                out[i * plane + p] += images.data()[(i * c + ch) * plane + p] / c as f64;
            }
        }
    }
    Tensor::new(vec![n, 1, s[2], s[3]], out)
}

const IDX_LABELS: u32 = 0x0801;
const IDX_IMAGES: u32 = 0x0803;
const IDX_CHANNEL_IMAGES: u32 = 0x0804;

/// Raw IDX contents: the magic, extents, and unsigned bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn idx_err(offset: usize, msg: String) -> Error {
    Error::Format {
        what: "idx",
        offset,
        msg,
    }
}

/// Parses unsigned-byte IDX files with 1, 3, or 4 dimensions.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(idx_err(bytes.len(), "file shorter than the magic number".into()));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let ndims = match magic {
        IDX_LABELS => 1,
        IDX_IMAGES => 3,
        IDX_CHANNEL_IMAGES => 4,
        _ => return Err(idx_err(0, format!("unsupported magic 0x{magic:08x}"))),
    };
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(idx_err(bytes.len(), "truncated dimension header".into()));
    }
    let mut dims = Vec::with_capacity(ndims);
    let mut total: usize = 1;
    for i in 0..ndims {
        let at = 4 + 4 * i;
        let d = u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| idx_err(at, format!("dimension {d} overflows the element count")))?;
        dims.push(d);
    }
    let available = bytes.len() - header;
    if available < total {
        return Err(idx_err(
            bytes.len(),
            format!("payload truncated: {available} of {total} bytes"),
        ));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[header..header + total].to_vec(),
    })
}

pub fn idx_bytes(arr: &IdxArray) -> Result<Vec<u8>> {
    let mut out = arr.magic.to_be_bytes().to_vec();
    for d in &arr.dims {
        let d = u32::try_from(*d).map_err(|_| Error::invalid(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    Ok(out)
}

/// Loads an image IDX file (magic `0x803`, or `0x804` with a channel axis)
/// onto the image bin grid as `[N, C, H, W]`.
pub fn load_idx(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let arr = parse_idx(&bytes)?;
    let shape = match arr.magic {
        IDX_IMAGES => vec![arr.dims[0], 1, arr.dims[1], arr.dims[2]],
        IDX_CHANNEL_IMAGES => arr.dims.clone(),
        _ => {
            return Err(idx_err(0, format!("expected an image file, found magic 0x{:08x}", arr.magic)));
        }
    };
    if shape.contains(&0) {
        return Err(idx_err(4, "zero extent".into()));
    }
    let bins = BinSpec::image();
    let name = path.file_stem().map_or("idx".into(), |s| s.to_string_lossy().to_string());
    Dataset::new(
        &name,
        bytes_to_tensor(&arr.data, shape, &bins)?,
        None,
        bins,
        &format!("IDX file {}", path.display()),
    )
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let arr = parse_idx(&bytes)?;
    if arr.magic != IDX_LABELS {
        return Err(idx_err(0, format!("expected a label file, found magic 0x{:08x}", arr.magic)));
    }
    Ok(arr.data.iter().map(|b| *b as usize).collect())
}

/// Writes `[N, 1, H, W]` as magic `0x803`, other channel counts as `0x804`.
pub fn write_idx_images(path: &Path, images: &Tensor, bins: &BinSpec) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("IDX images need [N,C,H,W], got {s:?}")));
    }
    let (magic, dims) = if s[1] == 1 {
        (IDX_IMAGES, vec![s[0], s[2], s[3]])
    } else {
        (IDX_CHANNEL_IMAGES, s.to_vec())
    };
    let arr = IdxArray {
        magic,
        dims,
        data: tensor_to_bytes(images, bins),
    };
    crate::emit::write_bytes(path, &idx_bytes(&arr)?)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let data = labels
        .iter()
        .map(|l| u8::try_from(*l).map_err(|_| Error::invalid(format!("label {l} exceeds 255"))))
        .collect::<Result<_>>()?;
    let arr = IdxArray {
        magic: IDX_LABELS,
        dims: vec![labels.len()],
        data,
    };
    crate::emit::write_bytes(path, &idx_bytes(&arr)?)
}

/// Constant or noise images for detection probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeImageKind {
    Noise,
    Black,
    White,
}

impl FromStr for ProbeImageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(ProbeImageKind::Noise),
            "black" => Ok(ProbeImageKind::Black),
            "white" => Ok(ProbeImageKind::White),
            other => Err(Error::invalid(format!("unknown probe image kind {other:?}"))),
        }
    }
}

/// `n` images of shape `resolution = [C, H, W]` on the image bin grid.
pub fn make_probe_images(kind: ProbeImageKind, n: usize, resolution: [usize; 3], seed: u64) -> Result<Dataset> {
    let bins = BinSpec::image();
    let (pk, name) = match kind {
        ProbeImageKind::Noise => (ProbeKind::Noise, "noise"),
        ProbeImageKind::Black => (ProbeKind::Black, "all-black"),
        ProbeImageKind::White => (ProbeKind::White, "all-white"),
    };
    let x = probe_start_set(pk, n, &resolution, &bins, seed, None)?;
    Dataset::new(name, x, None, bins, "probe images")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifold_points_sit_on_center_bin() {
        let d = gen_manifold2d(500, 4).unwrap();
        let bins = BinSpec::toy();
        for r in 0..500 {
            assert_eq!(bins.index(d.examples.data()[2 * r]), 25);
        }
        assert_eq!(d, gen_manifold2d(500, 4).unwrap());
    }

    #[test]
    fn digits_have_ink_and_dark_background() {
        let d = synthetic_digits(50, 1, true).unwrap();
        assert_eq!(d.example_shape(), &[1, 14, 14]);
        let data = d.examples.data();
        let dark = data.iter().filter(|v| **v == -1.0).count() as f64 / data.len() as f64;
        assert!(dark > 0.5, "{dark}");
        for i in 0..50 {
            let img = &data[i * 196..(i + 1) * 196];
            assert!(img.iter().any(|v| *v > 0.5));
        }
    }

    #[test]
    fn idx_fixture_and_errors() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend([0, 255, 128, 7, 1, 2, 3, 4]);
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.dims, vec![2, 2, 2]);
        assert_eq!(arr.data, vec![0, 255, 128, 7, 1, 2, 3, 4]);
        let mut wrong = bytes.clone();
        wrong[3] = 2;
        let err = parse_idx(&wrong).unwrap_err().to_string();
        assert!(err.contains("0x00000802"), "{err}");
        assert!(matches!(
            parse_idx(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        let huge = [0, 0, 8, 3, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255];
        assert!(parse_idx(&huge).is_err());
    }

    #[test]
    fn colorize_black_stays_black() {
        let black = make_probe_images(ProbeImageKind::Black, 3, [1, 4, 4], 0).unwrap();
        let c = colorize_mnist(&black, 2).unwrap();
        assert!(c.examples.data().iter().all(|v| *v == -1.0));
        assert_eq!(c.example_shape(), &[3, 4, 4]);
    }
}
