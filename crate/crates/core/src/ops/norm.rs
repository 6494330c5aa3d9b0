//! Layer normalization over channels and batch normalization kernels.
//!
//! Both normalize groups of values that are strided through an NCHW buffer;
//! the group layout is the only thing that differs between them.

use crate::tensor::Tensor;

/// Statistics saved by a normalization forward pass for its backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each (n, y, x) position across channels, channels-last style.
pub fn layer_norm_channels(
    x: &Tensor,
    gamma: &Tensor,
    beta: Option<&Tensor>,
    eps: f64,
) -> (Tensor, NormCache) {
    let (n, c, h, w) = x.dims4().expect("layer norm input must be 4-D");
    let plane = h * w;
    let xd = x.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut rstd = vec![0.0; n * plane];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += xd[base + ch * plane + p];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = xd[base + ch * plane + p] - mean;
                var += d * d;
            }
            var /= c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[b * plane + p] = r;
            for ch in 0..c {
                let i = base + ch * plane + p;
                xhat[i] = (xd[i] - mean) * r;
            }
        }
    }
    let g = gamma.data();
    let mut out = xhat.clone();
    for (i, v) in out.iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v = *v * g[ch] + beta.map_or(0.0, |b| b.data()[ch]);
    }
    (
        Tensor::from_parts(x.shape().to_vec(), out),
        NormCache { xhat, rstd },
    )
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_channels_backward(
    shape: &[usize],
    gamma: &Tensor,
    cache: &NormCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let gy = grad_out.data();
    let g = gamma.data();
    let mut dx = vec![0.0; gy.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let r = cache.rstd[b * plane + p];
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for ch in 0..c {
                let i = base + ch * plane + p;
                let dxhat = gy[i] * g[ch];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * cache.xhat[i];
                dgamma[ch] += gy[i] * cache.xhat[i];
                dbeta[ch] += gy[i];
            }
            mean_dxhat /= c as f64;
            mean_dxhat_xhat /= c as f64;
            for ch in 0..c {
                let i = base + ch * plane + p;
                let dxhat = gy[i] * g[ch];
                dx[i] = r * (dxhat - mean_dxhat - cache.xhat[i] * mean_dxhat_xhat);
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Training-mode batch normalization. Returns the output, the cache, and the
/// batch mean and unbiased variance per channel for running-stat updates.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, NormCache, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dims4().expect("batch norm input must be 4-D");
    let plane = h * w;
    let count = (n * plane) as f64;
    let xd = x.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut rstd = vec![0.0; c];
    let mut means = vec![0.0; c];
    let mut unbiased = vec![0.0; c];
    for ch in 0..c {
        let mut mean = 0.0;
        for b in 0..n {
            let s = (b * c + ch) * plane;
            mean += xd[s..s + plane].iter().sum::<f64>();
        }
        mean /= count;
        let mut var = 0.0;
        for b in 0..n {
            let s = (b * c + ch) * plane;
            var += xd[s..s + plane]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        let biased = var / count;
        unbiased[ch] = if count > 1.0 { var / (count - 1.0) } else { biased };
        means[ch] = mean;
        let r = 1.0 / (biased + eps).sqrt();
        rstd[ch] = r;
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                xhat[i] = (xd[i] - mean) * r;
            }
        }
    }
    let out = affine_channels(&xhat, c, plane, gamma.data(), beta.data());
    (
        Tensor::from_parts(x.shape().to_vec(), out),
        NormCache { xhat, rstd },
        means,
        unbiased,
    )
}

/// Returns (dx, dgamma, dbeta) for the training-mode batch norm.
pub fn batch_norm_train_backward(
    shape: &[usize],
    gamma: &Tensor,
    cache: &NormCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let count = (n * plane) as f64;
    let gy = grad_out.data();
    let mut dx = vec![0.0; gy.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let g = gamma.data()[ch];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                sum_dy += gy[i];
                sum_dy_xhat += gy[i] * cache.xhat[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let r = cache.rstd[ch];
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                dx[i] = g * r * (gy[i] - sum_dy / count - cache.xhat[i] * sum_dy_xhat / count);
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Inference-mode batch norm using running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> (Tensor, NormCache) {
    let (_, c, h, w) = x.dims4().expect("batch norm input must be 4-D");
    let plane = h * w;
    let rstd: Vec<f64> = running_var
        .data()
        .iter()
        .map(|v| 1.0 / (v + eps).sqrt())
        .collect();
    let xhat: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = (i / plane) % c;
            (v - running_mean.data()[ch]) * rstd[ch]
        })
        .collect();
    let out = affine_channels(&xhat, c, plane, gamma.data(), beta.data());
    (
        Tensor::from_parts(x.shape().to_vec(), out),
        NormCache { xhat, rstd },
    )
}

pub fn batch_norm_eval_backward(
    shape: &[usize],
    gamma: &Tensor,
    cache: &NormCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let gy = grad_out.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let dx: Vec<f64> = gy
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let ch = (i / plane) % c;
            dgamma[ch] += g * cache.xhat[i];
            dbeta[ch] += g;
            g * gamma.data()[ch] * cache.rstd[ch]
        })
        .collect();
    (
        Tensor::from_parts(shape.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

fn affine_channels(xhat: &[f64], c: usize, plane: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    xhat.iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = (i / plane) % c;
            v * gamma[ch] + beta[ch]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_zero_mean_unit_var_per_position() {
        let x = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 4.0, 2.0, 5.0, 6.0, 9.0]).unwrap();
        let (y, _) = layer_norm_channels(&x, &Tensor::full(vec![3], 1.0), None, 0.0);
        for p in 0..2 {
            let col: Vec<f64> = (0..3).map(|c| y.data()[c * 2 + p]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 3.0;
            let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_affine() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![3.0, -1.0]).unwrap();
        let (y, _) = batch_norm_eval(
            &x,
            &Tensor::new(vec![2], vec![2.0, 1.0]).unwrap(),
            &Tensor::new(vec![2], vec![0.5, 0.0]).unwrap(),
            &Tensor::zeros(vec![2]),
            &Tensor::full(vec![2], 1.0),
            0.0,
        );
        assert_eq!(y.data(), &[6.5, -1.0]);
    }

    #[test]
    fn batch_norm_train_reports_unbiased_variance() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, _, mean, var) = batch_norm_train(
            &x,
            &Tensor::full(vec![1], 1.0),
            &Tensor::zeros(vec![1]),
            1e-5,
        );
        assert!((mean[0] - 2.5).abs() < 1e-12);
        assert!((var[0] - 5.0 / 3.0).abs() < 1e-12);
    }
}
