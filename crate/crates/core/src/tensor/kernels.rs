//! Raw numeric kernels shared by tape ops and the pure-function API.

/// `c = alpha * a·b + beta * c` on strided row/column layouts.
///
/// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n` with `(rsb, csb)`,
/// `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + 1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, h*w]` with zero padding
/// of `kh/2`, `kw/2`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.plane();
    for c in 0..g.cin {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..g.h {
                    let sy = y as isize + ky as isize - ph as isize;
                    let drow = &mut dst[y * g.w..(y + 1) * g.w];
                    if sy < 0 || sy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &xc[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for (xx, d) in drow.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - pw as isize;
                        *d = if sx < 0 || sx >= g.w as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[cin, h, w]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.plane();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for y in 0..g.h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let base = c * plane + sy as usize * g.w;
                    for xx in 0..g.w {
                        let sx = xx as isize + kx as isize - pw as isize;
                        if sx >= 0 && sx < g.w as isize {
                            dx[base + sx as usize] += src[y * g.w + xx];
                        }
                    }
                }
            }
        }
    }
}

/// Normalized 1-D Gaussian kernel with the given radius.
pub(crate) fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mirror index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n-2`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Separable blur of each `[h, w]` plane in `x` (length multiple of h*w).
pub(crate) fn blur_planes(x: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    let mut tmp = vec![0.0; plane];
    for (src, dst) in x.chunks(plane).zip(out.chunks_mut(plane)) {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let sx = reflect_index(xx as isize + t as isize - r, w);
                    acc += kv * src[y * w + sx];
                }
                tmp[y * w + xx] = acc;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let sy = reflect_index(y as isize + t as isize - r, h);
                    acc += kv * tmp[sy * w + xx];
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`blur_planes`].
pub(crate) fn blur_planes_adjoint(g: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let plane = h * w;
    let mut out = vec![0.0; g.len()];
    let mut tmp = vec![0.0; plane];
    for (src, dst) in g.chunks(plane).zip(out.chunks_mut(plane)) {
        tmp.fill(0.0);
        for y in 0..h {
            for xx in 0..w {
                let gv = src[y * w + xx];
                for (t, kv) in kernel.iter().enumerate() {
                    let sy = reflect_index(y as isize + t as isize - r, h);
                    tmp[sy * w + xx] += kv * gv;
                }
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let gv = tmp[y * w + xx];
                for (t, kv) in kernel.iter().enumerate() {
                    let sx = reflect_index(xx as isize + t as isize - r, w);
                    dst[y * w + sx] += kv * gv;
                }
            }
        }
    }
    out
}
