//! Raw forward/backward kernels on flat buffers. The graph in `mod.rs` owns
//! bookkeeping; everything here is shape-checked by the caller.

use crate::tensor::Element;

/// `c[m×n] (+)= a[m×k] · b[k×n]`, optionally reading `a` or `b` transposed
/// from their row-major storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Element>(
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.plane();
    for ci in 0..g.c_in {
        let src = &x[ci * plane..(ci + 1) * plane];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for y in 0..g.h {
                    let sy = y as isize + i as isize - ph as isize;
                    let out_row = &mut dst[y * g.w..(y + 1) * g.w];
                    if sy < 0 || sy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let (lo, hi) = valid_range(j, pw, g.w);
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if lo < hi {
                        let off = (lo + j) - pw;
                        out_row[lo..hi].copy_from_slice(&src_row[off..off + (hi - lo)]);
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose source `x + j - pw` lies inside `0..w`.
fn valid_range(j: usize, pw: usize, w: usize) -> (usize, usize) {
    let lo = pw.saturating_sub(j).min(w);
    let hi = (w + pw).saturating_sub(j).min(w).max(lo);
    (lo, hi)
}

fn col2im_add<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.plane();
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                for y in 0..g.h {
                    let sy = y as isize + i as isize - ph as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let (lo, hi) = valid_range(j, pw, g.w);
                    if lo < hi {
                        let off = (lo + j) - pw;
                        let src_row = &src[y * g.w + lo..y * g.w + hi];
                        for (d, &v) in dst_row[off..off + (hi - lo)].iter_mut().zip(src_row) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 cross-correlation.
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> Vec<T> {
    let plane = g.plane();
    let mut out = vec![T::zero(); g.n * g.c_out * plane];
    let mut col = vec![T::zero(); g.patch() * plane];
    for s in 0..g.n {
        im2col(
            &x[s * g.c_in * plane..(s + 1) * g.c_in * plane],
            g,
            &mut col,
        );
        let y = &mut out[s * g.c_out * plane..(s + 1) * g.c_out * plane];
        for (co, row) in y.chunks_exact_mut(plane).enumerate() {
            row.fill(bias[co]);
        }
        matmul(
            kernel,
            false,
            &col,
            false,
            y,
            g.c_out,
            g.patch(),
            plane,
            true,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dk: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let plane = g.plane();
    let patch = g.patch();
    let mut dx = need[0].then(|| vec![T::zero(); g.n * g.c_in * plane]);
    let mut dk = need[1].then(|| vec![T::zero(); g.c_out * patch]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for s in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (s * g.c_out + co) * plane;
                *acc = *acc + dy[off..off + plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut col = vec![T::zero(); patch * plane];
    for s in 0..g.n {
        let dy_s = &dy[s * g.c_out * plane..(s + 1) * g.c_out * plane];
        if let Some(dk) = dk.as_mut() {
            im2col(
                &x[s * g.c_in * plane..(s + 1) * g.c_in * plane],
                g,
                &mut col,
            );
            // dK[c_out × patch] += dY[c_out × plane] · colᵀ
            matmul(dy_s, false, &col, true, dk, g.c_out, plane, patch, true);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[patch × plane] = Kᵀ · dY
            matmul(
                kernel, true, dy_s, false, &mut col, patch, g.c_out, plane, false,
            );
            col2im_add(
                &col,
                g,
                &mut dx[s * g.c_in * plane..(s + 1) * g.c_in * plane],
            );
        }
    }
    ConvGrads { dx, dk, db }
}

/// Non-overlapping max pooling. Returns the pooled values and, per output
/// element, the flat input index of the first maximum in its window.
pub(crate) fn maxpool_forward<T: Element>(
    x: &[T],
    nc: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / ph, w / pw);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    if (ph, pw) == (2, 2) {
        for p in 0..nc {
            let base = p * h * w;
            for oy in 0..oh {
                let r0 = base + 2 * oy * w;
                let r1 = r0 + w;
                for ox in 0..ow {
                    let mut best_idx = r0 + 2 * ox;
                    let mut best = x[best_idx];
                    for idx in [r0 + 2 * ox + 1, r1 + 2 * ox, r1 + 2 * ox + 1] {
                        let v = x[idx];
                        if v > best || (v.is_nan() && !best.is_nan()) {
                            best = v;
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
        return (out, arg);
    }
    for p in 0..nc {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * ph * w + ox * pw;
                let mut best = x[best_idx];
                for dy in 0..ph {
                    for dx in 0..pw {
                        let idx = base + (oy * ph + dy) * w + ox * pw + dx;
                        if x[idx] > best || (x[idx].is_nan() && !best.is_nan()) {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics for an `N×C×P` layout (P = H·W). Returns the
/// normalized values and `1/sqrt(var + eps)` per channel, plus the biased
/// batch mean and variance.
const LANES: usize = 8;

/// Sum with independent accumulators so the loop vectorizes.
pub(crate) fn lane_sum<T: Element>(x: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder().iter().fold(T::zero(), |a, &v| a + v);
    for ch in chunks {
        for i in 0..LANES {
            acc[i] = acc[i] + ch[i];
        }
    }
    acc.iter().fold(tail, |a, &v| a + v)
}

pub(crate) fn lane_dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

fn lane_sq_dev<T: Element>(x: &[T], m: T) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks
        .remainder()
        .iter()
        .fold(T::zero(), |a, &v| a + (v - m) * (v - m));
    for ch in chunks {
        for i in 0..LANES {
            let d = ch[i] - m;
            acc[i] = acc[i] + d * d;
        }
    }
    acc.iter().fold(tail, |a, &v| a + v)
}

pub(crate) fn batch_stats<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    p: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let count = T::from_usize(n * p).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let plane = |s: usize| &x[(s * c + ch) * p..(s * c + ch + 1) * p];
        let m = (0..n).fold(T::zero(), |a, s| a + lane_sum(plane(s))) / count;
        mean[ch] = m;
        var[ch] = (0..n).fold(T::zero(), |a, s| a + lane_sq_dev(plane(s), m)) / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    for (i, (dst, src)) in xhat.chunks_exact_mut(p).zip(x.chunks_exact(p)).enumerate() {
        let (m, s) = (mean[i % c], inv_std[i % c]);
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m) * s;
        }
    }
    (xhat, inv_std, mean, var)
}

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
