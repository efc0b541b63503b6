//! Batched layer kernels over NCHW buffers.

use num_traits::Float;

/// Dot product with eight independent accumulators (fixed order, so results
/// are reproducible).
#[inline]
pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let mut acc = [F::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<F: Float>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Zero-pad every plane of one sample by `pad` on each side.
fn pad_sample<F: Float>(x: &[F], c: usize, h: usize, w: usize, pad: usize) -> Vec<F> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![F::zero(); c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..][..w];
            out[(ch * hp + y + pad) * wp + pad..][..w].copy_from_slice(src);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvShape {
    fn pad(&self) -> usize {
        self.kernel / 2
    }
}

/// Stride-1 convolution with zero "same" padding. `weight` is
/// `out x in x k x k`.
pub fn conv_forward<F: Float>(x: &[F], weight: &[F], bias: &[F], s: ConvShape) -> Vec<F> {
    let (h, w, k, p) = (s.height, s.width, s.kernel, s.pad());
    let wp = w + 2 * p;
    let plane = h * w;
    let mut out = vec![F::zero(); s.batch * s.out_channels * plane];
    for n in 0..s.batch {
        let padded = pad_sample(&x[n * s.in_channels * plane..][..s.in_channels * plane], s.in_channels, h, w, p);
        let ppl = (h + 2 * p) * wp;
        for o in 0..s.out_channels {
            let dst = &mut out[(n * s.out_channels + o) * plane..][..plane];
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..s.in_channels {
                let src = &padded[c * ppl..][..ppl];
                for ky in 0..k {
                    for kx in 0..k {
                        let tap = weight[((o * s.in_channels + c) * k + ky) * k + kx];
                        for y in 0..h {
                            axpy(tap, &src[(y + ky) * wp + kx..][..w], &mut dst[y * w..][..w]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]. Weight and bias gradients are accumulated
/// into `gw`/`gb`; the input gradient is returned when requested.
pub fn conv_backward<F: Float>(
    x: &[F],
    weight: &[F],
    grad_out: &[F],
    s: ConvShape,
    gw: &mut [F],
    gb: &mut [F],
    want_input_grad: bool,
) -> Option<Vec<F>> {
    let (h, w, k, p) = (s.height, s.width, s.kernel, s.pad());
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let plane = h * w;
    let ppl = hp * wp;
    let mut gx = want_input_grad.then(|| vec![F::zero(); s.batch * s.in_channels * plane]);
    for n in 0..s.batch {
        let padded = pad_sample(&x[n * s.in_channels * plane..][..s.in_channels * plane], s.in_channels, h, w, p);
        let mut gpad = if want_input_grad { vec![F::zero(); s.in_channels * ppl] } else { Vec::new() };
        for o in 0..s.out_channels {
            let g = &grad_out[(n * s.out_channels + o) * plane..][..plane];
            gb[o] = gb[o] + g.iter().fold(F::zero(), |a, &b| a + b);
            for c in 0..s.in_channels {
                let src = &padded[c * ppl..][..ppl];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * s.in_channels + c) * k + ky) * k + kx;
                        let mut acc = F::zero();
                        for y in 0..h {
                            acc = acc + dot(&g[y * w..][..w], &src[(y + ky) * wp + kx..][..w]);
                        }
                        gw[widx] = gw[widx] + acc;
                        if want_input_grad {
                            let tap = weight[widx];
                            let gp = &mut gpad[c * ppl..][..ppl];
                            for y in 0..h {
                                axpy(tap, &g[y * w..][..w], &mut gp[(y + ky) * wp + kx..][..w]);
                            }
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            for c in 0..s.in_channels {
                for y in 0..h {
                    let src = &gpad[(c * hp + y + p) * wp + p..][..w];
                    gx[((n * s.in_channels + c) * h + y) * w..][..w].copy_from_slice(src);
                }
            }
        }
    }
    gx
}

pub fn relu_inplace<F: Float>(x: &mut [F]) {
    for v in x.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Zero gradient entries where the activation output was not positive.
pub fn relu_backward_inplace<F: Float>(grad: &mut [F], activated: &[F]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

pub fn pooled_extent(d: usize, window: usize, stride: usize) -> Option<usize> {
    (d >= window && stride > 0).then(|| (d - window) / stride + 1)
}

/// Max pooling over `planes` planes of `h x w`. Returns the pooled values and
/// the in-plane index of each winner (first maximum in row-major order).
pub fn maxpool_forward<F: Float>(
    x: &[F],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<F>, Vec<u32>) {
    let ph = (h - window) / stride + 1;
    let pw = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * ph * pw);
    let mut arg = Vec::with_capacity(planes * ph * pw);
    for pl in 0..planes {
        let src = &x[pl * h * w..][..h * w];
        for oy in 0..ph {
            for ox in 0..pw {
                let (y0, x0) = (oy * stride, ox * stride);
                let mut best = src[y0 * w + x0];
                let mut best_idx = y0 * w + x0;
                for y in y0..y0 + window {
                    for (dx, &v) in src[y * w + x0..][..window].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = y * w + x0 + dx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<F: Float>(grad_out: &[F], arg: &[u32], planes: usize, h: usize, w: usize) -> Vec<F> {
    let per = grad_out.len() / planes;
    let mut gx = vec![F::zero(); planes * h * w];
    for pl in 0..planes {
        let dst = &mut gx[pl * h * w..][..h * w];
        for i in 0..per {
            let idx = arg[pl * per + i] as usize;
            dst[idx] = dst[idx] + grad_out[pl * per + i];
        }
    }
    gx
}

/// Saved state of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BnCache<F> {
    pub normalized: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Per-channel statistics over batch and spatial positions. Normalizes with
/// the biased batch variance and folds the unbiased one into the running
/// estimate.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train<F: Float>(
    x: &[F],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[F],
    beta: &[F],
    running_mean: &mut [F],
    running_var: &mut [F],
    momentum: F,
    eps: F,
) -> (Vec<F>, BnCache<F>) {
    let m = F::from(batch * plane).unwrap();
    let mut y = vec![F::zero(); x.len()];
    let mut normalized = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); channels];
    for c in 0..channels {
        let mut sum = F::zero();
        for n in 0..batch {
            sum = sum + x[(n * channels + c) * plane..][..plane].iter().fold(F::zero(), |a, &b| a + b);
        }
        let mean = sum / m;
        let mut sq = F::zero();
        for n in 0..batch {
            sq = sq + x[(n * channels + c) * plane..][..plane].iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean));
        }
        let var = sq / m;
        let istd = F::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        for n in 0..batch {
            let off = (n * channels + c) * plane;
            for i in off..off + plane {
                let xh = (x[i] - mean) * istd;
                normalized[i] = xh;
                y[i] = gamma[c] * xh + beta[c];
            }
        }
        let unbiased = if m > F::one() { sq / (m - F::one()) } else { var };
        running_mean[c] = momentum * running_mean[c] + (F::one() - momentum) * mean;
        running_var[c] = momentum * running_var[c] + (F::one() - momentum) * unbiased;
    }
    (y, BnCache { normalized, inv_std })
}

pub fn batchnorm_eval<F: Float>(
    x: &[F],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[F],
    beta: &[F],
    running_mean: &[F],
    running_var: &[F],
    eps: F,
) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    for c in 0..channels {
        let scale = gamma[c] / (running_var[c] + eps).sqrt();
        let shift = beta[c] - scale * running_mean[c];
        for n in 0..batch {
            let off = (n * channels + c) * plane;
            for i in off..off + plane {
                y[i] = scale * x[i] + shift;
            }
        }
    }
    y
}

/// Backward of [`batchnorm_train`]; accumulates into `ggamma`/`gbeta`.
pub fn batchnorm_backward<F: Float>(
    grad_out: &[F],
    cache: &BnCache<F>,
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[F],
    ggamma: &mut [F],
    gbeta: &mut [F],
) -> Vec<F> {
    let m = F::from(batch * plane).unwrap();
    let mut gx = vec![F::zero(); grad_out.len()];
    for c in 0..channels {
        let (mut sum_g, mut sum_gx) = (F::zero(), F::zero());
        for n in 0..batch {
            let off = (n * channels + c) * plane;
            for i in off..off + plane {
                sum_g = sum_g + grad_out[i];
                sum_gx = sum_gx + grad_out[i] * cache.normalized[i];
            }
        }
        ggamma[c] = ggamma[c] + sum_gx;
        gbeta[c] = gbeta[c] + sum_g;
        let k = gamma[c] * cache.inv_std[c] / m;
        for n in 0..batch {
            let off = (n * channels + c) * plane;
            for i in off..off + plane {
                gx[i] = k * (m * grad_out[i] - sum_g - cache.normalized[i] * sum_gx);
            }
        }
    }
    gx
}

/// `y = x W^T + b` with `x` of `batch x inputs` and `W` of `outputs x inputs`.
pub fn dense_forward<F: Float>(x: &[F], weight: &[F], bias: &[F], batch: usize, inputs: usize, outputs: usize) -> Vec<F> {
    let mut y = Vec::with_capacity(batch * outputs);
    for n in 0..batch {
        let row = &x[n * inputs..][..inputs];
        for o in 0..outputs {
            y.push(bias[o] + dot(row, &weight[o * inputs..][..inputs]));
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<F: Float>(
    x: &[F],
    weight: &[F],
    grad_out: &[F],
    batch: usize,
    inputs: usize,
    outputs: usize,
    gw: &mut [F],
    gb: &mut [F],
) -> Vec<F> {
    let mut gx = vec![F::zero(); batch * inputs];
    for n in 0..batch {
        let row = &x[n * inputs..][..inputs];
        let gxr = &mut gx[n * inputs..][..inputs];
        for o in 0..outputs {
            let g = grad_out[n * outputs + o];
            if g == F::zero() {
                continue;
            }
            gb[o] = gb[o] + g;
            axpy(g, row, &mut gw[o * inputs..][..inputs]);
            axpy(g, &weight[o * inputs..][..inputs], gxr);
        }
    }
    gx
}

/// Row-wise softmax of `batch x classes` logits.
pub fn softmax<F: Float>(logits: &[F], classes: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_naive() {
        let s = ConvShape { batch: 2, in_channels: 2, out_channels: 3, height: 4, width: 5, kernel: 3 };
        let x: Vec<f64> = (0..2 * 2 * 20).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.5).collect();
        let b = vec![0.1, -0.2, 0.3];
        let y = conv_forward(&x, &w, &b, s);
        for n in 0..2 {
            for o in 0..3 {
                for yy in 0..4i64 {
                    for xx in 0..5i64 {
                        let mut acc = b[o];
                        for c in 0..2 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                    if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                        acc += w[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize]
                                            * x[((n * 2 + c) * 4 + sy as usize) * 5 + sx as usize];
                                    }
                                }
                            }
                        }
                        let got = y[((n * 3 + o) * 4 + yy as usize) * 5 + xx as usize];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_extents() {
        assert_eq!(pooled_extent(260, 9, 2), Some(126));
        assert_eq!(pooled_extent(126, 9, 8), Some(15));
        assert_eq!(pooled_extent(64, 9, 2), Some(28));
        assert_eq!(pooled_extent(28, 9, 8), Some(3));
        assert_eq!(pooled_extent(8, 9, 2), None);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let (y, arg) = maxpool_forward(&x, 1, 4, 4, 2, 2);
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
        let g = maxpool_backward(&[1.0, 2.0, 3.0, 4.0], &arg, 1, 4, 4);
        assert_eq!(g[5], 1.0);
        assert_eq!(g[15], 4.0);
        assert_eq!(g.iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn batchnorm_normalizes() {
        use rand::Rng;
        let mut r = crate::rng::seeded(3);
        let (batch, channels, plane) = (4, 3, 25);
        let x: Vec<f64> = (0..batch * channels * plane).map(|_| 3.0 + 4.0 * r.random::<f64>()).collect();
        let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
        let (_, cache) = batchnorm_train(&x, batch, channels, plane, &[1.0; 3], &[0.0; 3], &mut rm, &mut rv, 0.9, 1e-5);
        for c in 0..channels {
            let vals: Vec<f64> =
                (0..batch).flat_map(|n| cache.normalized[(n * channels + c) * plane..][..plane].to_vec()).collect();
            let m = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1000.0f64, -1000.0, 0.3, 0.3], 2);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn dot_matches_sequential() {
        let a: Vec<f64> = (0..21).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..21).map(|i| 1.0 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
