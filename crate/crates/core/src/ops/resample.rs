//! Spatial resampling: bilinear resize (align-corners off), nearest resize,
//! non-overlapping average pooling.

use crate::tensor::Tensor;

/// Source taps for one output coordinate of a bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: if hi == lo { 0.0 } else { src - lo as f64 },
            }
        })
        .collect()
}

pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("resize input must be 4-D");
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for (plane_in, plane_out) in x.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        for (oy, t) in ty.iter().enumerate() {
            let r0 = &plane_in[t.lo * w..(t.lo + 1) * w];
            let r1 = &plane_in[t.hi * w..(t.hi + 1) * w];
            for (ox, s) in tx.iter().enumerate() {
                let top = r0[s.lo] * (1.0 - s.frac) + r0[s.hi] * s.frac;
                let bot = r1[s.lo] * (1.0 - s.frac) + r1[s.hi] * s.frac;
                plane_out[oy * out_w + ox] = top * (1.0 - t.frac) + bot * t.frac;
            }
        }
    }
    Tensor::from_parts(vec![n, c, out_h, out_w], out)
}

pub fn resize_bilinear_backward(in_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    if (h, w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut dx = vec![0.0; in_shape.iter().product()];
    for (plane_in, plane_out) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(out_h * out_w)) {
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                let g = plane_out[oy * out_w + ox];
                let gt = g * (1.0 - t.frac);
                let gb = g * t.frac;
                plane_in[t.lo * w + s.lo] += gt * (1.0 - s.frac);
                plane_in[t.lo * w + s.hi] += gt * s.frac;
                plane_in[t.hi * w + s.lo] += gb * (1.0 - s.frac);
                plane_in[t.hi * w + s.hi] += gb * s.frac;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Nearest-neighbour resize (floor of the scaled coordinate, as in the common
/// "nearest" mode). Used only as a comparison path.
pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("resize input must be 4-D");
    let mut out = vec![0.0; n * c * out_h * out_w];
    for (plane_in, plane_out) in x.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        for oy in 0..out_h {
            let iy = (oy * h / out_h).min(h - 1);
            for ox in 0..out_w {
                let ix = (ox * w / out_w).min(w - 1);
                plane_out[oy * out_w + ox] = plane_in[iy * w + ix];
            }
        }
    }
    Tensor::from_parts(vec![n, c, out_h, out_w], out)
}

/// `k×k` average pooling with stride `k` and no padding.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("pool input must be 4-D");
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for (pi, po) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = &pi[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                    acc += row.iter().sum::<f64>();
                }
                po[oy * ow + ox] = acc * norm;
            }
        }
    }
    Tensor::from_parts(vec![n, c, oh, ow], out)
}

pub fn avg_pool_backward(in_shape: &[usize], k: usize, grad_out: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; in_shape.iter().product()];
    for (pi, po) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = po[oy * ow + ox] * norm;
                for dy in 0..k {
                    for dx_ in 0..k {
                        pi[(oy * k + dy) * w + ox * k + dx_] += g;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_upsample_matches_half_pixel_convention() {
        // 1-D [0, 1] upsampled x2 with half-pixel centers: [0, 0.25, 0.75, 1].
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = resize_bilinear(&x, 1, 4);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_downsample_x2_is_pair_average() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = resize_bilinear(&x, 1, 1);
        assert!((y.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_2x2() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        assert_eq!(avg_pool(&x, 2).data(), &[3.5, 5.5]);
    }
}
