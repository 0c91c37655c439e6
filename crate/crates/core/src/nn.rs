//! Layer kernels for one sample at a time: `C x H x W` planar f32 tensors,
//! forward passes that record what backward needs, and explicit backward
//! passes that accumulate parameter gradients.

/// Per-sample activation, planar `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::new(c, h, w, vec![0.0; c * h * w])
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// `C = A op B + beta C` with row-major operands; `ta`/`tb` read A/B transposed.
/// Logical shapes: op(A) is m x k, op(B) is k x n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index addressed by the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3x3, zero padding 1, stride 1 patch matrix: `(C*9) x (H*W)`.
fn im2col3(x: &Tensor) -> Vec<f32> {
    let (c, h, w) = (x.c, x.h, x.w);
    let n = h * w;
    let mut cols = vec![0.0f32; c * 9 * n];
    for ci in 0..c {
        let plane = &x.data[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let n = h * w;
    let mut out = vec![0.0f32; c * n];
    for ci in 0..c {
        let plane = &mut out[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// Convolution with square kernel 1 or 3 (padding keeps spatial size).
#[derive(Debug, Clone)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: usize,
    pub bias: usize,
}

/// The layer input; the patch matrix is rebuilt in backward, which keeps
/// traces nine times smaller.
pub struct ConvCache {
    x: Tensor,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn forward(&self, x: &Tensor, wt: &[f32], bias: &[f32], keep: bool) -> (Tensor, Option<ConvCache>) {
        let n = x.hw();
        let kk = self.cin * self.k * self.k;
        let cols = if self.k == 3 { im2col3(x) } else { x.data.clone() };
        let mut out = vec![0.0f32; self.cout * n];
        for (co, b) in bias.iter().enumerate() {
            out[co * n..(co + 1) * n].fill(*b);
        }
        gemm(self.cout, kk, n, wt, false, &cols, false, 1.0, &mut out);
        drop(cols);
        let cache = keep.then(|| ConvCache { x: x.clone() });
        (Tensor::new(self.cout, x.h, x.w, out), cache)
    }

    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Tensor,
        wt: &[f32],
        dw: &mut [f32],
        db: &mut [f32],
        need_dx: bool,
    ) -> Option<Tensor> {
        let x = &cache.x;
        let n = x.hw();
        let kk = self.cin * self.k * self.k;
        for (co, g) in db.iter_mut().enumerate() {
            *g += dy.data[co * n..(co + 1) * n].iter().sum::<f32>();
        }
        let cols = if self.k == 3 { im2col3(x) } else { x.data.clone() };
        gemm(self.cout, n, kk, &dy.data, false, &cols, true, 1.0, dw);
        drop(cols);
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0f32; kk * n];
        gemm(kk, self.cout, n, wt, true, &dy.data, false, 0.0, &mut dcols);
        let dx = if self.k == 3 {
            col2im3(&dcols, self.cin, x.h, x.w)
        } else {
            dcols
        };
        Some(Tensor::new(self.cin, x.h, x.w, dx))
    }
}

/// Group normalization with per-channel affine; `groups == 0` disables it.
#[derive(Debug, Clone)]
pub struct Norm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
}

pub struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn enabled(&self) -> bool {
        self.groups > 0
    }

    pub fn forward(&self, x: &Tensor, gamma: &[f32], beta: &[f32], keep: bool) -> (Tensor, Option<NormCache>) {
        let n = x.hw();
        let cpg = self.channels / self.groups;
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; self.groups];
        for g in 0..self.groups {
            let span = &x.data[g * cpg * n..(g + 1) * cpg * n];
            let count = span.len() as f64;
            let mean = span.iter().map(|v| *v as f64).sum::<f64>() / count;
            let var = span.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / count;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[g] = is as f32;
            for (o, v) in xhat[g * cpg * n..(g + 1) * cpg * n].iter_mut().zip(span) {
                *o = ((*v as f64 - mean) * is) as f32;
            }
        }
        let mut out = vec![0.0f32; x.data.len()];
        for c in 0..self.channels {
            let (gm, bt) = (gamma[c], beta[c]);
            for (o, xh) in out[c * n..(c + 1) * n].iter_mut().zip(&xhat[c * n..(c + 1) * n]) {
                *o = gm * xh + bt;
            }
        }
        let cache = keep.then_some(NormCache { xhat, inv_std });
        (Tensor::new(x.c, x.h, x.w, out), cache)
    }

    pub fn backward(
        &self,
        cache: &NormCache,
        dy: &Tensor,
        gamma: &[f32],
        dgamma: &mut [f32],
        dbeta: &mut [f32],
    ) -> Tensor {
        let n = dy.hw();
        let cpg = self.channels / self.groups;
        let mut dxhat = vec![0.0f32; dy.data.len()];
        for c in 0..self.channels {
            let mut sg = 0.0f64;
            let mut sb = 0.0f64;
            for i in c * n..(c + 1) * n {
                sg += (dy.data[i] * cache.xhat[i]) as f64;
                sb += dy.data[i] as f64;
                dxhat[i] = dy.data[i] * gamma[c];
            }
            dgamma[c] += sg as f32;
            dbeta[c] += sb as f32;
        }
        let mut dx = vec![0.0f32; dy.data.len()];
        for g in 0..self.groups {
            let r = g * cpg * n..(g + 1) * cpg * n;
            let count = r.len() as f64;
            let s1: f64 = dxhat[r.clone()].iter().map(|v| *v as f64).sum();
            let s2: f64 = dxhat[r.clone()]
                .iter()
                .zip(&cache.xhat[r.clone()])
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum();
            let is = cache.inv_std[g] as f64;
            for i in r {
                dx[i] = (is / count * (count * dxhat[i] as f64 - s1 - cache.xhat[i] as f64 * s2)) as f32;
            }
        }
        Tensor::new(dy.c, dy.h, dy.w, dx)
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` wherever the forward output was not positive.
pub fn relu_backward(out: &Tensor, dy: &mut Tensor) {
    for (d, o) in dy.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// 2x2 max pooling, stride 2. Returns output and flat argmax per output pixel.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let n = x.hw();
    let mut out = vec![0.0f32; x.c * h2 * w2];
    let mut idx = vec![0u32; out.len()];
    for c in 0..x.c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let base = c * n + 2 * y * x.w + 2 * xx;
                let mut best = base;
                for cand in [base + 1, base + x.w, base + x.w + 1] {
                    if x.data[cand] > x.data[best] {
                        best = cand;
                    }
                }
                let o = (c * h2 + y) * w2 + xx;
                out[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (Tensor::new(x.c, h2, w2, out), idx)
}

pub fn max_pool2_backward(idx: &[u32], dy: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let mut dx = vec![0.0f32; c * h * w];
    for (i, g) in idx.iter().zip(&dy.data) {
        dx[*i as usize] += g;
    }
    Tensor::new(c, h, w, dx)
}

/// Transposed convolution, kernel 2, stride 2. Weight layout `[2][2][cout][cin]`.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub cin: usize,
    pub cout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl UpConv {
    pub fn weight_len(&self) -> usize {
        4 * self.cout * self.cin
    }

    pub fn forward(&self, x: &Tensor, wt: &[f32], bias: &[f32]) -> Tensor {
        let n = x.hw();
        let (h2, w2) = (x.h * 2, x.w * 2);
        let mut out = vec![0.0f32; self.cout * h2 * w2];
        let mut tmp = vec![0.0f32; self.cout * n];
        for a in 0..2 {
            for b in 0..2 {
                let wab = &wt[(a * 2 + b) * self.cout * self.cin..][..self.cout * self.cin];
                gemm(self.cout, self.cin, n, wab, false, &x.data, false, 0.0, &mut tmp);
                for co in 0..self.cout {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            out[(co * h2 + 2 * y + a) * w2 + 2 * xx + b] = tmp[co * n + y * x.w + xx] + bias[co];
                        }
                    }
                }
            }
        }
        Tensor::new(self.cout, h2, w2, out)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, wt: &[f32], dw: &mut [f32], db: &mut [f32]) -> Tensor {
        let n = x.hw();
        let (h2, w2) = (x.h * 2, x.w * 2);
        for (co, g) in db.iter_mut().enumerate() {
            *g += dy.data[co * h2 * w2..(co + 1) * h2 * w2].iter().sum::<f32>();
        }
        let mut dx = vec![0.0f32; self.cin * n];
        let mut dab = vec![0.0f32; self.cout * n];
        for a in 0..2 {
            for b in 0..2 {
                for co in 0..self.cout {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            dab[co * n + y * x.w + xx] = dy.data[(co * h2 + 2 * y + a) * w2 + 2 * xx + b];
                        }
                    }
                }
                let off = (a * 2 + b) * self.cout * self.cin;
                gemm(self.cout, n, self.cin, &dab, false, &x.data, true, 1.0, &mut dw[off..off + self.cout * self.cin]);
                gemm(self.cin, self.cout, n, &wt[off..off + self.cout * self.cin], true, &dab, false, 1.0, &mut dx);
            }
        }
        Tensor::new(self.cin, x.h, x.w, dx)
    }
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(a.c + b.c, a.h, a.w, data)
}

pub fn split(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let n = x.hw();
    (
        Tensor::new(ca, x.h, x.w, x.data[..ca * n].to_vec()),
        Tensor::new(x.c - ca, x.h, x.w, x.data[ca * n..].to_vec()),
    )
}
