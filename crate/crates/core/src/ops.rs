//! Single-instance numerical kernels and their vector-Jacobian products.
//!
//! Every kernel here works on one sample (`c × H × W` feature maps). The
//! compute graph in [`crate::graph`] applies them across a leading batch axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Inference,
}

/// `c = a · b` (or `c += a · b` when `accumulate`), row-major, optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn check(input: &Tensor, filters: &Tensor, bias: &Tensor) -> Result<Self> {
        let [c, h, w] = *input.expect_rank("conv2d", 3)? else {
            unreachable!()
        };
        let [n, fc, kh, kw] = *filters.expect_rank("conv2d", 4)? else {
            unreachable!()
        };
        if fc != c {
            return Err(Error::dim("conv2d", "channel axis", c, fc));
        }
        if bias.shape() != [n] {
            return Err(Error::dim("conv2d", "bias length", n, bias.len()));
        }
        if kh > h || kw > w {
            return Err(Error::DegenerateInput {
                op: "conv2d",
                reason: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            });
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            filters: n,
            kh,
            kw,
            out_h: h - kh + 1,
            out_w: w - kw + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds the input into a `(c·kh·kw) × (out_h·out_w)` patch matrix.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch_len() * p];
        for ci in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.out_h {
                        let src = (ci * self.height + oi + ki) * self.width + kj;
                        dst[oi * self.out_w..(oi + 1) * self.out_w]
                            .copy_from_slice(&input[src..src + self.out_w]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut out = vec![0.0; self.channels * self.height * self.width];
        for ci in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.out_h {
                        let dst = (ci * self.height + oi + ki) * self.width + kj;
                        for (o, s) in out[dst..dst + self.out_w]
                            .iter_mut()
                            .zip(&src[oi * self.out_w..(oi + 1) * self.out_w])
                        {
                            *o += s;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Narrow (valid) cross-correlation with unit stride:
/// `out[f, i, j] = bias[f] + Σ_{c,u,v} filters[f, c, u, v] · input[c, i+u, j+v]`.
pub fn conv2d(input: &Tensor, filters: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeometry::check(input, filters, bias)?;
    let cols = g.im2col(input.data());
    let p = g.positions();
    let mut out = Vec::with_capacity(g.filters * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, p));
    }
    gemm(g.filters, g.patch_len(), p, filters.data(), false, &cols, false, &mut out, true);
    Tensor::new(vec![g.filters, g.out_h, g.out_w], out)
}

pub struct Conv2dGrads {
    pub input: Tensor,
    pub filters: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<Conv2dGrads> {
    let g = ConvGeometry::check(input, filters, bias)?;
    if grad_out.shape() != [g.filters, g.out_h, g.out_w] {
        return Err(Error::dim("conv2d_backward", "output gradient", g.filters * g.positions(), grad_out.len()));
    }
    let p = g.positions();
    let pl = g.patch_len();
    let cols = g.im2col(input.data());
    let go = grad_out.data();

    let mut d_filters = vec![0.0; g.filters * pl];
    gemm(g.filters, p, pl, go, false, &cols, true, &mut d_filters, false);

    let mut d_cols = vec![0.0; pl * p];
    gemm(pl, g.filters, p, filters.data(), true, go, false, &mut d_cols, false);
    let d_input = g.col2im(&d_cols);

    let d_bias = go.chunks(p).map(|row| row.iter().sum()).collect();

    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), d_input)?,
        filters: Tensor::new(filters.shape().to_vec(), d_filters)?,
        bias: Tensor::new(vec![g.filters], d_bias)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PoolWindow {
    pub height: usize,
    pub width: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl PoolWindow {
    pub fn square(size: usize, stride: usize) -> Self {
        Self {
            height: size,
            width: size,
            stride_h: stride,
            stride_w: stride,
        }
    }

    /// Output extents for an `h × w` map.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::Config("pooling stride must be positive".into()));
        }
        if self.height == 0 || self.width == 0 || self.height > h || self.width > w {
            return Err(Error::DegenerateInput {
                op: "avg_pool2d",
                reason: format!("window {}x{} does not fit input {h}x{w}", self.height, self.width),
            });
        }
        Ok((
            (h - self.height) / self.stride_h + 1,
            (w - self.width) / self.stride_w + 1,
        ))
    }
}

/// Average pooling; each output cell is the mean of its window.
pub fn avg_pool2d(input: &Tensor, window: PoolWindow) -> Result<Tensor> {
    let [c, h, w] = *input.expect_rank("avg_pool2d", 3)? else {
        unreachable!()
    };
    let (oh, ow) = window.output_extent(h, w)?;
    let scale = 1.0 / (window.height * window.width) as f64;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let (r0, c0) = (oi * window.stride_h, oj * window.stride_w);
                let mut acc = 0.0;
                for r in r0..r0 + window.height {
                    acc += plane[r * w + c0..r * w + c0 + window.width].iter().sum::<f64>();
                }
                out.push(acc * scale);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn avg_pool2d_backward(input_shape: &[usize], window: PoolWindow, grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *input_shape else {
        return Err(Error::dim("avg_pool2d_backward", "rank", 3, input_shape.len()));
    };
    let (oh, ow) = window.output_extent(h, w)?;
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::dim("avg_pool2d_backward", "output gradient", c * oh * ow, grad_out.len()));
    }
    let scale = 1.0 / (window.height * window.width) as f64;
    let g = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let v = g[(ci * oh + oi) * ow + oj] * scale;
                let (r0, c0) = (oi * window.stride_h, oj * window.stride_w);
                for r in r0..r0 + window.height {
                    let base = (ci * h + r) * w + c0;
                    for d in &mut dx[base..base + window.width] {
                        *d += v;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

pub fn tanh_activation(input: &Tensor) -> Tensor {
    input.map(f64::tanh)
}

/// Given `y = tanh(x)`, returns `grad_out · (1 − y²)`.
pub fn tanh_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(y, g)| g * (1.0 - y * y))
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("shapes agree")
}

fn check_affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let m = input.len();
    let [p, wm] = *weight.expect_rank("affine", 2)? else {
        unreachable!()
    };
    if wm != m {
        return Err(Error::dim("affine", "inner dimension", wm, m));
    }
    if bias.shape() != [p] {
        return Err(Error::dim("affine", "bias length", p, bias.len()));
    }
    Ok((p, m))
}

/// `weight · input + bias` for a single input vector.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (p, m) = check_affine(input, weight, bias)?;
    let mut out = bias.data().to_vec();
    gemm(p, m, 1, weight.data(), false, input.data(), false, &mut out, true);
    Tensor::new(vec![p], out)
}

pub struct AffineGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn affine_backward(input: &Tensor, weight: &Tensor, bias: &Tensor, grad_out: &Tensor) -> Result<AffineGrads> {
    let (p, m) = check_affine(input, weight, bias)?;
    if grad_out.len() != p {
        return Err(Error::dim("affine_backward", "output gradient", p, grad_out.len()));
    }
    let g = grad_out.data();
    let x = input.data();
    let mut dx = vec![0.0; m];
    gemm(m, p, 1, weight.data(), true, g, false, &mut dx, false);
    let mut dw = vec![0.0; p * m];
    for (row, gi) in dw.chunks_mut(m).zip(g) {
        for (d, xv) in row.iter_mut().zip(x) {
            *d = gi * xv;
        }
    }
    Ok(AffineGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weight: Tensor::new(vec![p, m], dw)?,
        bias: Tensor::new(vec![p], g.to_vec())?,
    })
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running per-channel statistics used by batch normalization at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
        }
    }

    /// Exponential moving average: `r ← momentum·r + (1 − momentum)·batch`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Statistics source for batch normalization.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the batch itself.
    Train,
    /// Normalize with previously accumulated running statistics.
    Inference(&'a RunningStats),
}

/// Intermediate values of a batch-normalization forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub train: bool,
}

fn bn_extents(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let [b, c, h, w] = *x.expect_rank("batch_norm", 4)? else {
        unreachable!()
    };
    if gamma.shape() != [c] {
        return Err(Error::dim("batch_norm", "gamma length", c, gamma.len()));
    }
    if beta.shape() != [c] {
        return Err(Error::dim("batch_norm", "beta length", c, beta.len()));
    }
    Ok((b, c, h * w))
}

/// Batch normalization over a stacked `B × c × H × W` tensor: per-channel
/// standardization over batch and spatial axes, then `gamma · x̂ + beta`.
pub fn batch_norm_stacked(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    mode: BnMode<'_>,
) -> Result<(Tensor, BnCache)> {
    let (b, c, hw) = bn_extents(x, gamma, beta)?;
    let data = x.data();
    let count = (b * hw) as f64;
    let (mean, var, train) = match mode {
        BnMode::Train => {
            if b < 2 {
                return Err(Error::Config("batch normalization in train mode needs a batch of at least 2".into()));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                let vals = || (0..b).flat_map(|s| data[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter());
                *m = vals().sum::<f64>() / count;
                *v = vals().map(|x| (x - *m) * (x - *m)).sum::<f64>() / count;
            }
            (mean, var, true)
        }
        BnMode::Inference(stats) => {
            if stats.mean.len() != c || stats.var.len() != c {
                return Err(Error::dim("batch_norm", "running statistics", c, stats.mean.len()));
            }
            (stats.mean.data().to_vec(), stats.var.data().to_vec(), false)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + hw {
                let xh = (data[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BnCache {
            normalized: Tensor::new(shape, normalized)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train,
        },
    ))
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batch_norm_backward(cache: &BnCache, gamma: &Tensor, grad_out: &Tensor) -> Result<BnGrads> {
    let shape = cache.normalized.shape();
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if grad_out.shape() != shape {
        return Err(Error::dim("batch_norm_backward", "output gradient", cache.normalized.len(), grad_out.len()));
    }
    let g = grad_out.data();
    let xh = cache.normalized.data();
    let count = (b * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += g[i] * xh[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            for i in base..base + hw {
                dx[i] = if cache.train {
                    scale * (g[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(shape.to_vec(), dx)?,
        gamma: Tensor::new(vec![c], dgamma)?,
        beta: Tensor::new(vec![c], dbeta)?,
    })
}

/// Batch normalization over a batch of `c × H × W` maps.
///
/// Returns the normalized batch; in train mode `running` is updated with the
/// batch statistics, in inference mode it supplies them.
pub fn batch_norm(
    inputs: &[Tensor],
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    mode: Mode,
    running: &mut RunningStats,
) -> Result<Vec<Tensor>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    if inputs[0].rank() != 3 {
        return Err(Error::dim("batch_norm", "rank", 3, inputs[0].rank()));
    }
    let stacked = Tensor::stack(inputs)?;
    let (out, cache) = match mode {
        Mode::Train => batch_norm_stacked(&stacked, gamma, beta, eps, BnMode::Train)?,
        Mode::Inference => batch_norm_stacked(&stacked, gamma, beta, eps, BnMode::Inference(running))?,
    };
    if mode == Mode::Train {
        running.update(&cache.batch_mean, &cache.batch_var);
    }
    Ok((0..inputs.len()).map(|i| out.slice_outer(i)).collect())
}

/// Inverted-dropout multipliers: `0` with probability `rate`, else `1/(1−rate)`.
pub fn dropout_multipliers(len: usize, rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

pub fn dropout_mask(input: &Tensor, rate: f64, seed: u64, mode: Mode) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    match mode {
        Mode::Inference => Ok(input.clone()),
        Mode::Train => {
            let mult = dropout_multipliers(input.len(), rate, seed)?;
            let data = input.data().iter().zip(&mult).map(|(x, m)| x * m).collect();
            Tensor::new(input.shape().to_vec(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones() {
        let out = conv2d(&Tensor::ones(&[1, 3, 3]), &Tensor::ones(&[1, 1, 2, 2]), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let input = t(&[1, 2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]);
        let out = conv2d(&input, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_errors() {
        let err = conv2d(&Tensor::ones(&[2, 3, 3]), &Tensor::ones(&[1, 1, 2, 2]), &Tensor::zeros(&[1])).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");
        let err = conv2d(&Tensor::ones(&[1, 2, 3]), &Tensor::ones(&[1, 1, 3, 3]), &Tensor::zeros(&[1])).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput { .. }));
        let err = conv2d(&Tensor::ones(&[1, 3, 3]), &Tensor::ones(&[2, 1, 2, 2]), &Tensor::zeros(&[1])).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn pool_mean_and_constant() {
        let out = avg_pool2d(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), PoolWindow::square(2, 2)).unwrap();
        assert_eq!(out.data(), &[2.5]);
        let out = avg_pool2d(&Tensor::full(&[2, 5, 4], 3.25), PoolWindow::square(2, 1)).unwrap();
        assert_eq!(out.shape(), &[2, 4, 3]);
        assert!(out.data().iter().all(|&v| v == 3.25));
        assert!(matches!(
            avg_pool2d(&Tensor::ones(&[1, 2, 2]), PoolWindow::square(3, 1)),
            Err(Error::DegenerateInput { .. })
        ));
    }

    #[test]
    fn tanh_values() {
        let y = tanh_activation(&t(&[3], &[0.0, 4.0, 10.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data()[1] > 0.999 && y.data()[1] < 1.0);
        let g = tanh_backward(&t(&[1], &[0.0]), &Tensor::ones(&[1]));
        assert_eq!(g.data(), &[1.0]);
    }

    #[test]
    fn affine_identity_and_zero() {
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        assert_eq!(affine(&x, &Tensor::eye(3), &Tensor::zeros(&[3])).unwrap(), x);
        let b = t(&[2], &[0.3, -0.7]);
        assert_eq!(affine(&x, &Tensor::zeros(&[2, 3]), &b).unwrap(), b);
        assert!(matches!(
            affine(&x, &Tensor::zeros(&[2, 4]), &b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn batch_norm_zero_variance_gives_beta() {
        let inputs = vec![Tensor::full(&[1, 2, 2], 3.0), Tensor::full(&[1, 2, 2], 3.0)];
        let mut rs = RunningStats::new(1);
        let out = batch_norm(&inputs, &t(&[1], &[1.7]), &t(&[1], &[-0.4]), BN_EPS, Mode::Train, &mut rs).unwrap();
        for o in out {
            assert!(o.data().iter().all(|&v| v == -0.4));
        }
    }

    #[test]
    fn batch_norm_hand_trace() {
        let inputs = vec![t(&[1, 1, 1], &[1.0]), t(&[1, 1, 1], &[3.0])];
        let mut rs = RunningStats::new(1);
        let out = batch_norm(&inputs, &t(&[1], &[2.0]), &t(&[1], &[5.0]), 1e-5, Mode::Train, &mut rs).unwrap();
        // mean 2, var 1: x̂ = ±1/sqrt(1 + 1e-5)
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out[0].item() - (5.0 - 2.0 * s)).abs() < 1e-12);
        assert!((out[1].item() - (5.0 + 2.0 * s)).abs() < 1e-12);
        assert!((out[0].item() - 3.0).abs() < 1e-4 && (out[1].item() - 7.0).abs() < 1e-4);
        // running stats moved 10% toward the batch statistics
        assert!((rs.mean.item() - 0.2).abs() < 1e-15);
        assert!((rs.var.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_single_sample_train_is_config_error() {
        let mut rs = RunningStats::new(1);
        let err = batch_norm(&[Tensor::ones(&[1, 2, 2])], &Tensor::ones(&[1]), &Tensor::zeros(&[1]), BN_EPS, Mode::Train, &mut rs)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(batch_norm(&[Tensor::ones(&[1, 2, 2])], &Tensor::ones(&[1]), &Tensor::zeros(&[1]), BN_EPS, Mode::Inference, &mut rs).is_ok());
    }

    #[test]
    fn dropout_modes() {
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(dropout_mask(&x, 0.0, 7, Mode::Train).unwrap(), x);
        assert_eq!(dropout_mask(&x, 0.0, 7, Mode::Inference).unwrap(), x);
        assert_eq!(dropout_mask(&x, 0.9, 7, Mode::Inference).unwrap(), x);
        assert!(matches!(dropout_mask(&x, 1.0, 7, Mode::Train), Err(Error::Config(_))));
        assert!(matches!(dropout_mask(&x, -0.1, 7, Mode::Train), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let x = Tensor::ones(&[100_000]);
        let y = dropout_mask(&x, 0.5, 42, Mode::Train).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(y, dropout_mask(&x, 0.5, 42, Mode::Train).unwrap());
    }
}
