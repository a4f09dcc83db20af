//! Minimal dense tensor and the layer primitives used by the segmentation
//! network, each with an explicit backward pass.
//!
//! Tensors are stored channel-major across the batch (`C x N x H x W`), so a
//! 3x3 convolution over a whole batch is a single GEMM on an im2col buffer and
//! batch-normalization statistics are contiguous per channel.

use alloc::vec;
use alloc::vec::Vec;

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![0.0; c * n * h * w] }
    }

    pub fn from_data(c: usize, n: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length mismatch");
        Self { c, n, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    /// Elements per channel (`N * H * W`).
    pub fn channel_len(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn plane(&self, c: usize, n: usize) -> &[f32] {
        let p = self.plane_len();
        let start = (c * self.n + n) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, c: usize, n: usize) -> &mut [f32] {
        let p = self.plane_len();
        let start = (c * self.n + n) * p;
        &mut self.data[start..start + p]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.n, self.h, self.w), (other.n, other.h, other.w), "concat shape mismatch");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor { c: self.c + other.c, n: self.n, h: self.h, w: self.w, data }
    }

    /// Splits the channel axis at `first` channels.
    pub fn split_channels(self, first: usize) -> (Tensor, Tensor) {
        let cut = first * self.channel_len();
        let mut head = self.data;
        let tail = head.split_off(cut);
        (
            Tensor { c: first, n: self.n, h: self.h, w: self.w, data: head },
            Tensor { c: self.c - first, n: self.n, h: self.h, w: self.w, data: tail },
        )
    }
}

/// `c = a * b + beta * c` where `a` is logically `m x k` and `b` is `k x n`.
/// `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c, n);
}

/// General strided GEMM; `c` is row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(k == 0 || a.len() > last(rsa, csa, m, k), "gemm: a too small");
    assert!(k == 0 || b.len() > last(rsb, csb, k, n), "gemm: b too small");
    assert!(c.len() > last(rsc, 1, m, n), "gemm: c too small");
    // SAFETY: the assertions above bound every element addressed through the strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Unfolds the 3x3 neighborhoods of sample `n` into `col` (`(C*9) x (H*W)`).
fn im2col3x3(x: &Tensor, n: usize, col: &mut [f32]) {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    for ci in 0..x.c {
        let src = x.plane(ci, n);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let drow = &mut row[y * w..][..w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            drow[0] = 0.0;
                            drow[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => drow.copy_from_slice(srow),
                        _ => {
                            drow[..w - 1].copy_from_slice(&srow[1..]);
                            drow[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Scatters `col` back into sample `n` of `dx`, accumulating.
fn col2im3x3(col: &[f32], dx: &mut Tensor, n: usize) {
    let (h, w) = (dx.h, dx.w);
    let hw = h * w;
    for ci in 0..dx.c {
        let dst = dx.plane_mut(ci, n);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..][..w];
                    let srow = &row[y * w..][..w];
                    let (d, s) = match kx {
                        0 => (&mut drow[..w - 1], &srow[1..]),
                        1 => (&mut drow[..], srow),
                        _ => (&mut drow[1..], &srow[..w - 1]),
                    };
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += *b;
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1, no bias. `weight` is `cout x (cin*9)`.
pub fn conv3x3(x: &Tensor, weight: &[f32], cout: usize) -> Tensor {
    let k = x.c * 9;
    assert_eq!(weight.len(), cout * k, "conv weight shape mismatch");
    let hw = x.plane_len();
    let stride = x.channel_len();
    let mut col = vec![0.0f32; k * hw];
    let mut y = Tensor::zeros(cout, x.n, x.h, x.w);
    for n in 0..x.n {
        im2col3x3(x, n, &mut col);
        gemm_strided(cout, k, hw, weight, (k, 1), &col, (hw, 1), 0.0, &mut y.data[n * hw..], stride);
    }
    y
}

/// Accumulates the weight gradient into `dweight` and returns the input gradient if requested.
pub fn conv3x3_backward(x: &Tensor, weight: &[f32], dy: &Tensor, dweight: &mut [f32], need_dx: bool) -> Option<Tensor> {
    let k = x.c * 9;
    let cout = dy.c;
    let hw = x.plane_len();
    let stride = x.channel_len();
    let mut col = vec![0.0f32; k * hw];
    let mut dx = need_dx.then(|| Tensor::zeros(x.c, x.n, x.h, x.w));
    for n in 0..x.n {
        im2col3x3(x, n, &mut col);
        let dy_n = &dy.data[n * hw..];
        // dW += dY_n * col^T
        gemm_strided(cout, hw, k, dy_n, (stride, 1), &col, (1, hw), 1.0, dweight, k);
        if let Some(dx) = dx.as_mut() {
            // col <- W^T * dY_n, then scatter.
            gemm_strided(k, cout, hw, weight, (1, k), dy_n, (stride, 1), 0.0, &mut col, hw);
            col2im3x3(&col, dx, n);
        }
    }
    dx
}

/// 1x1 convolution with bias. `weight` is `cout x cin`.
pub fn conv1x1(x: &Tensor, weight: &[f32], bias: &[f32], cout: usize) -> Tensor {
    let cols = x.channel_len();
    let mut y = Tensor::zeros(cout, x.n, x.h, x.w);
    for (co, b) in bias.iter().enumerate().take(cout) {
        y.data[co * cols..(co + 1) * cols].fill(*b);
    }
    gemm(cout, x.c, cols, weight, false, &x.data, false, 1.0, &mut y.data);
    y
}

pub fn conv1x1_backward(x: &Tensor, weight: &[f32], dy: &Tensor, dweight: &mut [f32], dbias: &mut [f32]) -> Tensor {
    let cols = x.channel_len();
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dy.data[co * cols..(co + 1) * cols].iter().sum::<f32>();
    }
    gemm(dy.c, cols, x.c, &dy.data, false, &x.data, true, 1.0, dweight);
    let mut dx = Tensor::zeros(x.c, x.n, x.h, x.w);
    gemm(x.c, dy.c, cols, weight, true, &dy.data, false, 0.0, &mut dx.data);
    dx
}

/// Saved state of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Batch normalization using the statistics of the current batch.
pub fn batchnorm_train(x: &Tensor, gamma: &[f32], beta: &[f32]) -> (Tensor, BnCache) {
    let m = x.channel_len();
    let mut xhat = Tensor::zeros(x.c, x.n, x.h, x.w);
    let mut y = Tensor::zeros(x.c, x.n, x.h, x.w);
    let mut inv_std = vec![0.0; x.c];
    let mut means = vec![0.0; x.c];
    let mut vars = vec![0.0; x.c];
    for c in 0..x.c {
        let xs = &x.data[c * m..(c + 1) * m];
        let mean = (xs.iter().map(|&v| f64::from(v)).sum::<f64>() / m as f64) as f32;
        let var = (xs.iter().map(|&v| f64::from(v - mean) * f64::from(v - mean)).sum::<f64>() / m as f64) as f32;
        let is = 1.0 / libm::sqrtf(var + BN_EPS);
        let xh = &mut xhat.data[c * m..(c + 1) * m];
        let ys = &mut y.data[c * m..(c + 1) * m];
        for ((h, o), &v) in xh.iter_mut().zip(ys.iter_mut()).zip(xs) {
            *h = (v - mean) * is;
            *o = gamma[c] * *h + beta[c];
        }
        inv_std[c] = is;
        means[c] = mean;
        vars[c] = var;
    }
    (y, BnCache { xhat, inv_std, mean: means, var: vars })
}

/// Batch normalization with fixed (running) statistics.
pub fn batchnorm_eval(x: &Tensor, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) -> Tensor {
    let m = x.channel_len();
    let mut y = x.clone();
    for c in 0..x.c {
        let scale = gamma[c] / libm::sqrtf(var[c] + BN_EPS);
        let shift = beta[c] - mean[c] * scale;
        for v in &mut y.data[c * m..(c + 1) * m] {
            *v = *v * scale + shift;
        }
    }
    y
}

pub fn batchnorm_backward(cache: &BnCache, gamma: &[f32], dy: &Tensor, dgamma: &mut [f32], dbeta: &mut [f32]) -> Tensor {
    let m = dy.channel_len();
    let mut dx = Tensor::zeros(dy.c, dy.n, dy.h, dy.w);
    for c in 0..dy.c {
        let dys = &dy.data[c * m..(c + 1) * m];
        let xh = &cache.xhat.data[c * m..(c + 1) * m];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for (&d, &h) in dys.iter().zip(xh) {
            sum_dy += f64::from(d);
            sum_dy_xh += f64::from(d) * f64::from(h);
        }
        dgamma[c] += sum_dy_xh as f32;
        dbeta[c] += sum_dy as f32;
        let scale = gamma[c] * cache.inv_std[c] / m as f32;
        let (sd, sdh) = (sum_dy as f32, sum_dy_xh as f32);
        for ((o, &d), &h) in dx.data[c * m..(c + 1) * m].iter_mut().zip(dys).zip(xh) {
            *o = scale * (m as f32 * d - sd - h * sdh);
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &mut Tensor) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and the flat input index of each maximum.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0u32; y.len()];
    let mut o = 0;
    for c in 0..x.c {
        for n in 0..x.n {
            let base = (c * x.n + n) * x.plane_len();
            let src = x.plane(c, n);
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best = (2 * yy) * x.w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * yy + dy) * x.w + 2 * xx + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    y.data[o] = src[best];
                    arg[o] = (base + best) as u32;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(arg: &[u32], dy: &Tensor, input_h: usize, input_w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, dy.n, input_h, input_w);
    for (&i, &d) in arg.iter().zip(&dy.data) {
        dx.data[i as usize] += d;
    }
    dx
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.c, x.n, oh, ow);
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.plane(c, n).to_vec();
            let dst = y.plane_mut(c, n);
            for yy in 0..oh {
                for xx in 0..ow {
                    dst[yy * ow + xx] = src[(yy / 2) * x.w + xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    for c in 0..dy.c {
        for n in 0..dy.n {
            let src = dy.plane(c, n).to_vec();
            let dst = dx.plane_mut(c, n);
            for yy in 0..dy.h {
                for xx in 0..dy.w {
                    dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f32 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 40) as f32 / (1u64 << 24) as f32) - 0.5
    }

    fn random_tensor(c: usize, n: usize, h: usize, w: usize, seed: &mut u64) -> Tensor {
        let data = (0..c * n * h * w).map(|_| lcg(seed)).collect();
        Tensor::from_data(c, n, h, w, data)
    }

    fn naive_conv(x: &Tensor, weight: &[f32], cout: usize) -> Tensor {
        let mut y = Tensor::zeros(cout, x.n, x.h, x.w);
        for co in 0..cout {
            for n in 0..x.n {
                for yy in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = 0.0f64;
                        for ci in 0..x.c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = yy as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let v = x.plane(ci, n)[sy as usize * x.w + sx as usize];
                                    acc += f64::from(v) * f64::from(weight[co * x.c * 9 + ci * 9 + ky * 3 + kx]);
                                }
                            }
                        }
                        y.plane_mut(co, n)[yy * x.w + xx] = acc as f32;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut s = 7;
        let x = random_tensor(3, 2, 5, 6, &mut s);
        let w: Vec<f32> = (0..4 * 27).map(|_| lcg(&mut s)).collect();
        let a = conv3x3(&x, &w, 4);
        let b = naive_conv(&x, &w, 4);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    /// Backward passes agree with the adjoint identity <conv(x), dy> = <x, conv^T(dy)>.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut s = 11;
        let x = random_tensor(2, 2, 4, 4, &mut s);
        let w: Vec<f32> = (0..3 * 18).map(|_| lcg(&mut s)).collect();
        let dy = random_tensor(3, 2, 4, 4, &mut s);
        let y = conv3x3(&x, &w, 3);
        let mut dw = vec![0.0; w.len()];
        let dx = conv3x3_backward(&x, &w, &dy, &mut dw, true).unwrap();
        let lhs: f32 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
        let rhs_w: f32 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-4);
    }

    #[test]
    fn batchnorm_backward_matches_finite_difference() {
        let mut s = 3;
        let x = random_tensor(2, 3, 2, 2, &mut s);
        let gamma = [1.3f32, 0.7];
        let beta = [0.1f32, -0.2];
        let probe = random_tensor(2, 3, 2, 2, &mut s);
        let loss = |x: &Tensor| -> f64 {
            let (y, _) = batchnorm_train(x, &gamma, &beta);
            y.data.iter().zip(&probe.data).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
        };
        let (_, cache) = batchnorm_train(&x, &gamma, &beta);
        let mut dg = [0.0; 2];
        let mut db = [0.0; 2];
        let dx = batchnorm_backward(&cache, &gamma, &probe, &mut dg, &mut db);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += 1e-2;
            let mut xm = x.clone();
            xm.data[i] -= 1e-2;
            let fd = (loss(&xp) - loss(&xm)) / 2e-2;
            assert!((fd - f64::from(dx.data[i])).abs() < 2e-3, "i={i} fd={fd} an={}", dx.data[i]);
        }
    }

    #[test]
    fn pool_and_upsample_shapes_and_grads() {
        let mut s = 5;
        let x = random_tensor(2, 1, 4, 4, &mut s);
        let (y, arg) = maxpool2(&x);
        assert_eq!((y.h, y.w), (2, 2));
        let dy = Tensor::from_data(2, 1, 2, 2, vec![1.0; 8]);
        let dx = maxpool2_backward(&arg, &dy, 4, 4);
        assert_eq!(dx.data.iter().sum::<f32>(), 8.0);
        let u = upsample2(&y);
        assert_eq!((u.h, u.w), (4, 4));
        let du = upsample2_backward(&Tensor::from_data(2, 1, 4, 4, vec![1.0; 32]));
        assert!(du.data.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut s = 9;
        let a = random_tensor(2, 2, 3, 3, &mut s);
        let b = random_tensor(3, 2, 3, 3, &mut s);
        let (a2, b2) = a.concat_channels(&b).split_channels(2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
