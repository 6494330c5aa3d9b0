//! 2-D convolution kernels (forward and backward).
//!
//! Dense and grouped convolutions go through im2col + GEMM; depthwise
//! convolutions (one filter per channel) use a direct loop.

use super::gemm::{gemm, Layout};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    /// Stride-1 geometry that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

/// Resolved shapes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvShape {
    pub fn resolve(x: &[usize], w: &[usize], geo: ConvGeometry) -> Result<Self> {
        let [n, c_in, h, wd] = x[..] else {
            return Err(shape_err!("conv input must be 4-D, got {:?}", x));
        };
        let [c_out, c_per_group, kh, kw] = w[..] else {
            return Err(shape_err!("conv weight must be 4-D, got {:?}", w));
        };
        if geo.groups == 0 || c_in % geo.groups != 0 || c_out % geo.groups != 0 {
            return Err(shape_err!(
                "groups {} must divide input channels {} and output channels {}",
                geo.groups,
                c_in,
                c_out
            ));
        }
        if c_per_group != c_in / geo.groups {
            return Err(shape_err!(
                "conv weight expects {} input channels per group, input has {} channels in {} groups",
                c_per_group,
                c_in,
                geo.groups
            ));
        }
        if geo.dilation == 0 || geo.stride == 0 {
            return Err(shape_err!("stride and dilation must be >= 1"));
        }
        let ho = geo
            .out_size(h, kh)
            .ok_or_else(|| shape_err!("kernel height {} too large for input height {}", kh, h))?;
        let wo = geo
            .out_size(wd, kw)
            .ok_or_else(|| shape_err!("kernel width {} too large for input width {}", kw, wd))?;
        Ok(Self {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            ho,
            wo,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.ho, self.wo]
    }

    fn is_depthwise(&self, geo: ConvGeometry) -> bool {
        geo.groups == self.c_in && self.c_out == self.c_in && geo.groups > 1
    }

    fn is_pointwise(&self, geo: ConvGeometry) -> bool {
        self.kh == 1 && self.kw == 1 && geo.stride == 1 && geo.padding == 0
    }
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + offset` lands in `[0, len)`.
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + s - 1) / s) as usize
    };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) as usize + 1).min(out_len);
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], s: &ConvShape, geo: ConvGeometry, c0: usize, cg: usize, col: &mut [f64]) {
    let plane_out = s.ho * s.wo;
    col.fill(0.0);
    for ci in 0..cg {
        let xp = &x[(c0 + ci) * s.h * s.w..(c0 + ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            let oy_off = (ky * geo.dilation) as isize - geo.padding as isize;
            let (y_lo, y_hi) = valid_range(s.ho, s.h, oy_off, geo.stride);
            for kx in 0..s.kw {
                let ox_off = (kx * geo.dilation) as isize - geo.padding as isize;
                let (x_lo, x_hi) = valid_range(s.wo, s.w, ox_off, geo.stride);
                let row = (ci * s.kh + ky) * s.kw + kx;
                let dst = &mut col[row * plane_out..(row + 1) * plane_out];
                for oy in y_lo..y_hi {
                    let iy = (oy * geo.stride) as isize + oy_off;
                    let src = &xp[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let drow = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                    for ox in x_lo..x_hi {
                        drow[ox] = src[((ox * geo.stride) as isize + ox_off) as usize];
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], s: &ConvShape, geo: ConvGeometry, c0: usize, cg: usize, dx: &mut [f64]) {
    let plane_out = s.ho * s.wo;
    for ci in 0..cg {
        let xp = &mut dx[(c0 + ci) * s.h * s.w..(c0 + ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            let oy_off = (ky * geo.dilation) as isize - geo.padding as isize;
            let (y_lo, y_hi) = valid_range(s.ho, s.h, oy_off, geo.stride);
            for kx in 0..s.kw {
                let ox_off = (kx * geo.dilation) as isize - geo.padding as isize;
                let (x_lo, x_hi) = valid_range(s.wo, s.w, ox_off, geo.stride);
                let row = (ci * s.kh + ky) * s.kw + kx;
                let src = &col[row * plane_out..(row + 1) * plane_out];
                for oy in y_lo..y_hi {
                    let iy = ((oy * geo.stride) as isize + oy_off) as usize;
                    for ox in x_lo..x_hi {
                        let ix = ((ox * geo.stride) as isize + ox_off) as usize;
                        xp[iy * s.w + ix] += src[oy * s.wo + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: ConvGeometry,
) -> Result<Tensor> {
    let s = ConvShape::resolve(x.shape(), weight.shape(), geo)?;
    if let Some(b) = bias {
        if b.shape() != [s.c_out] {
            return Err(shape_err!(
                "conv bias shape {:?} does not match {} output channels",
                b.shape(),
                s.c_out
            ));
        }
    }
    let mut out = vec![0.0; s.n * s.c_out * s.ho * s.wo];
    if s.is_depthwise(geo) {
        depthwise_forward(x.data(), weight.data(), &s, geo, &mut out);
    } else {
        dense_forward(x.data(), weight.data(), &s, geo, &mut out);
    }
    if let Some(b) = bias {
        let plane = s.ho * s.wo;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % s.c_out];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(Tensor::from_parts(s.out_shape(), out))
}

fn dense_forward(x: &[f64], w: &[f64], s: &ConvShape, geo: ConvGeometry, out: &mut [f64]) {
    let cg = s.c_in / geo.groups;
    let og = s.c_out / geo.groups;
    let kk = cg * s.kh * s.kw;
    let plane_in = s.c_in * s.h * s.w;
    let plane_out = s.ho * s.wo;
    let pointwise = s.is_pointwise(geo);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0; kk * plane_out]
    };
    for n in 0..s.n {
        let xn = &x[n * plane_in..(n + 1) * plane_in];
        for g in 0..geo.groups {
            let cols: &[f64] = if pointwise {
                &xn[g * cg * plane_out..(g + 1) * cg * plane_out]
            } else {
                im2col(xn, s, geo, g * cg, cg, &mut col);
                &col
            };
            let wg = &w[g * og * kk..(g + 1) * og * kk];
            let o0 = (n * s.c_out + g * og) * plane_out;
            gemm(
                og,
                kk,
                plane_out,
                wg,
                Layout::row_major(kk),
                cols,
                Layout::row_major(plane_out),
                0.0,
                &mut out[o0..o0 + og * plane_out],
            );
        }
    }
}

fn depthwise_forward(x: &[f64], w: &[f64], s: &ConvShape, geo: ConvGeometry, out: &mut [f64]) {
    let plane_in = s.h * s.w;
    let plane_out = s.ho * s.wo;
    for nc in 0..s.n * s.c_in {
        let c = nc % s.c_in;
        let xp = &x[nc * plane_in..(nc + 1) * plane_in];
        let op = &mut out[nc * plane_out..(nc + 1) * plane_out];
        let wc = &w[c * s.kh * s.kw..(c + 1) * s.kh * s.kw];
        for ky in 0..s.kh {
            let oy_off = (ky * geo.dilation) as isize - geo.padding as isize;
            let (y_lo, y_hi) = valid_range(s.ho, s.h, oy_off, geo.stride);
            for kx in 0..s.kw {
                let wv = wc[ky * s.kw + kx];
                let ox_off = (kx * geo.dilation) as isize - geo.padding as isize;
                let (x_lo, x_hi) = valid_range(s.wo, s.w, ox_off, geo.stride);
                if x_lo == x_hi {
                    continue;
                }
                for oy in y_lo..y_hi {
                    let iy = ((oy * geo.stride) as isize + oy_off) as usize;
                    let src = &xp[iy * s.w..(iy + 1) * s.w];
                    let dst = &mut op[oy * s.wo..(oy + 1) * s.wo];
                    if geo.stride == 1 {
                        let start = (x_lo as isize + ox_off) as usize;
                        for (d, v) in dst[x_lo..x_hi]
                            .iter_mut()
                            .zip(&src[start..start + (x_hi - x_lo)])
                        {
                            *d += wv * v;
                        }
                    } else {
                        for ox in x_lo..x_hi {
                            let ix = ((ox * geo.stride) as isize + ox_off) as usize;
                            dst[ox] += wv * src[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    geo: ConvGeometry,
    grad_out: &Tensor,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let s = ConvShape::resolve(x.shape(), weight.shape(), geo)?;
    let gy = grad_out.data();
    let plane_out = s.ho * s.wo;
    let bias = need[2].then(|| {
        let mut db = vec![0.0; s.c_out];
        for (i, chunk) in gy.chunks(plane_out).enumerate() {
            db[i % s.c_out] += chunk.iter().sum::<f64>();
        }
        Tensor::from_parts(vec![s.c_out], db)
    });
    let (input, weight_grad) = if s.is_depthwise(geo) {
        depthwise_backward(x.data(), weight.data(), &s, geo, gy, need[0], need[1])
    } else {
        dense_backward(x.data(), weight.data(), &s, geo, gy, need[0], need[1])
    };
    Ok(ConvGrads {
        input: input.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        weight: weight_grad.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        bias,
    })
}

fn dense_backward(
    x: &[f64],
    w: &[f64],
    s: &ConvShape,
    geo: ConvGeometry,
    gy: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let cg = s.c_in / geo.groups;
    let og = s.c_out / geo.groups;
    let kk = cg * s.kh * s.kw;
    let plane_in = s.c_in * s.h * s.w;
    let plane_out = s.ho * s.wo;
    let pointwise = s.is_pointwise(geo);
    let mut dx = need_x.then(|| vec![0.0; s.n * plane_in]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; if pointwise && !need_x { 0 } else { kk * plane_out }];
    for n in 0..s.n {
        let xn = &x[n * plane_in..(n + 1) * plane_in];
        for g in 0..geo.groups {
            let g0 = (n * s.c_out + g * og) * plane_out;
            let gyg = &gy[g0..g0 + og * plane_out];
            if let Some(dw) = dw.as_mut() {
                let cols: &[f64] = if pointwise {
                    &xn[g * cg * plane_out..(g + 1) * cg * plane_out]
                } else {
                    im2col(xn, s, geo, g * cg, cg, &mut col);
                    &col
                };
                // dW[og, kk] += dY[og, P] · colᵀ[P, kk]
                gemm(
                    og,
                    plane_out,
                    kk,
                    gyg,
                    Layout::row_major(plane_out),
                    cols,
                    Layout::transposed(plane_out),
                    1.0,
                    &mut dw[g * og * kk..(g + 1) * og * kk],
                );
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w[g * og * kk..(g + 1) * og * kk];
                // dcol[kk, P] = Wᵀ[kk, og] · dY[og, P]
                gemm(
                    kk,
                    og,
                    plane_out,
                    wg,
                    Layout::transposed(kk),
                    gyg,
                    Layout::row_major(plane_out),
                    0.0,
                    &mut col,
                );
                let dxn = &mut dx[n * plane_in..(n + 1) * plane_in];
                if pointwise {
                    let dst = &mut dxn[g * cg * plane_out..(g + 1) * cg * plane_out];
                    dst.iter_mut().zip(&col).for_each(|(d, v)| *d += v);
                } else {
                    col2im(&col, s, geo, g * cg, cg, dxn);
                }
            }
        }
    }
    (dx, dw)
}

fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    s: &ConvShape,
    geo: ConvGeometry,
    gy: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane_in = s.h * s.w;
    let plane_out = s.ho * s.wo;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    for nc in 0..s.n * s.c_in {
        let c = nc % s.c_in;
        let xp = &x[nc * plane_in..(nc + 1) * plane_in];
        let gp = &gy[nc * plane_out..(nc + 1) * plane_out];
        for ky in 0..s.kh {
            let oy_off = (ky * geo.dilation) as isize - geo.padding as isize;
            let (y_lo, y_hi) = valid_range(s.ho, s.h, oy_off, geo.stride);
            for kx in 0..s.kw {
                let widx = c * s.kh * s.kw + ky * s.kw + kx;
                let wv = w[widx];
                let ox_off = (kx * geo.dilation) as isize - geo.padding as isize;
                let (x_lo, x_hi) = valid_range(s.wo, s.w, ox_off, geo.stride);
                let mut acc = 0.0;
                for oy in y_lo..y_hi {
                    let iy = ((oy * geo.stride) as isize + oy_off) as usize;
                    for ox in x_lo..x_hi {
                        let ix = ((ox * geo.stride) as isize + ox_off) as usize;
                        let g = gp[oy * s.wo + ox];
                        acc += g * xp[iy * s.w + ix];
                        if let Some(dx) = dx.as_mut() {
                            dx[nc * plane_in + iy * s.w + ix] += wv * g;
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw)
}

/// Plain seven-loop reference convolution used as an oracle in tests.
#[cfg(test)]
pub(crate) fn conv2d_reference(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: ConvGeometry,
) -> Tensor {
    let s = ConvShape::resolve(x.shape(), weight.shape(), geo).unwrap();
    let cg = s.c_in / geo.groups;
    let og = s.c_out / geo.groups;
    let mut out = Tensor::zeros(s.out_shape());
    for n in 0..s.n {
        for co in 0..s.c_out {
            let g = co / og;
            for oy in 0..s.ho {
                for ox in 0..s.wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cg {
                        for ky in 0..s.kh {
                            for kx in 0..s.kw {
                                let iy = (oy * geo.stride + ky * geo.dilation) as isize
                                    - geo.padding as isize;
                                let ix = (ox * geo.stride + kx * geo.dilation) as isize
                                    - geo.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let wv = weight.at4(co, ci, ky, kx);
                                acc += wv * x.at4(n, g * cg + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let idx = ((n * s.c_out + co) * s.ho + oy) * s.wo + ox;
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_reference_across_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases = [
            // (c_in, c_out, k, stride, pad, dil, groups, h, w)
            (3, 4, 3, 1, 1, 1, 1, 7, 6),
            (4, 6, 3, 2, 1, 1, 2, 9, 8),
            (5, 5, 7, 1, 3, 1, 5, 8, 8),
            (4, 4, 3, 1, 4, 4, 4, 6, 6),
            (3, 2, 3, 1, 6, 6, 1, 5, 5),
            (3, 8, 4, 4, 0, 1, 1, 8, 12),
            (6, 3, 1, 1, 0, 1, 1, 3, 4),
            (4, 4, 3, 2, 2, 2, 4, 9, 7),
        ];
        for &(ci, co, k, st, p, d, g, h, w) in &cases {
            let geo = ConvGeometry {
                stride: st,
                padding: p,
                dilation: d,
                groups: g,
            };
            let x = random(&[2, ci, h, w], &mut rng);
            let wt = random(&[co, ci / g, k, k], &mut rng);
            let b = random(&[co], &mut rng);
            let fast = conv2d_forward(&x, &wt, Some(&b), geo).unwrap();
            let slow = conv2d_reference(&x, &wt, Some(&b), geo);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "case {:?}", (ci, co, k, st, p, d, g));
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dY, conv(x)> is bilinear in (x, w): its gradient wrt x and w must
        // reproduce the directional derivative along random perturbations.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(ci, co, k, st, p, d, g) in &[
            (3, 4, 3, 1, 1, 1, 1),
            (4, 4, 3, 1, 2, 2, 4),
            (4, 6, 3, 2, 1, 1, 2),
            (2, 3, 1, 1, 0, 1, 1),
        ] {
            let geo = ConvGeometry {
                stride: st,
                padding: p,
                dilation: d,
                groups: g,
            };
            let x = random(&[2, ci, 6, 5], &mut rng);
            let wt = random(&[co, ci / g, k, k], &mut rng);
            let y = conv2d_forward(&x, &wt, None, geo).unwrap();
            let gy = random(y.shape(), &mut rng);
            let grads = conv2d_backward(&x, &wt, geo, &gy, [true, true, true]).unwrap();
            let dx = random(x.shape(), &mut rng);
            let dw = random(wt.shape(), &mut rng);
            let dot = |a: &Tensor, b: &Tensor| -> f64 {
                a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum()
            };
            let lin_x = dot(&gy, &conv2d_forward(&dx, &wt, None, geo).unwrap());
            let lin_w = dot(&gy, &conv2d_forward(&x, &dw, None, geo).unwrap());
            assert!((lin_x - dot(grads.input.as_ref().unwrap(), &dx)).abs() < 1e-10);
            assert!((lin_w - dot(grads.weight.as_ref().unwrap(), &dw)).abs() < 1e-10);
            assert!((gy.sum() - grads.bias.unwrap().sum()).abs() < 1e-10);
        }
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(5, 5, -2, 1), (2, 5));
        assert_eq!(valid_range(5, 5, 2, 1), (0, 3));
        assert_eq!(valid_range(3, 2, 6, 1), (0, 0));
        assert_eq!(valid_range(4, 8, -1, 2), (1, 4));
    }

    #[test]
    fn depthwise_kernel_larger_than_input() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![2.0, -1.0]).unwrap();
        let w = Tensor::new(vec![2, 1, 7, 7], (0..98).map(|i| i as f64).collect()).unwrap();
        let geo = ConvGeometry::same(7, 1).with_groups(2);
        let y = conv2d_forward(&x, &w, None, geo).unwrap();
        let r = conv2d_reference(&x, &w, None, geo);
        assert_eq!(y.data(), r.data());
        assert_eq!(y.data(), &[2.0 * 24.0, -1.0 * 73.0]);
    }

    #[test]
    fn rejects_mismatched_channels() {
        let x = Tensor::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::zeros(vec![2, 4, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, ConvGeometry::same(3, 1)).is_err());
    }

    #[test]
    fn random_geometry_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let d = rng.gen_range(1..4);
            let geo = ConvGeometry::same(k, d);
            let x = random(&[1, 2, rng.gen_range(3..9), rng.gen_range(3..9)], &mut rng);
            let w = random(&[3, 2, k, k], &mut rng);
            let y = conv2d_forward(&x, &w, None, geo).unwrap();
            assert_eq!(&y.shape()[2..], &x.shape()[2..]);
        }
    }
}
