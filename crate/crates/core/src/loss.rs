//! Focal loss and the two-output training objective.

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderOutput;
use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::tensor::{Labels, Tensor};

/// Clamp applied to p_t before the logarithm.
pub const FOCAL_EPS: f64 = 1e-7;
pub const DEFAULT_IGNORE_INDEX: u8 = 255;
pub const DEFAULT_AUX_WEIGHT: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    /// One scalar weight shared by every class.
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Param(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Param(format!("focal alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// −α·(1−p)^γ·ln p without clamping.
pub fn focal_term(p: f64, params: FocalParams) -> f64 {
    -params.alpha * (1.0 - p).powf(params.gamma) * p.ln()
}

/// d/dp of `focal_term`.
fn focal_term_grad(p: f64, params: FocalParams) -> f64 {
    let FocalParams { gamma, alpha } = params;
    let q = 1.0 - p;
    let decay = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p.ln()
    };
    alpha * (decay - q.powf(gamma) / p)
}

/// Mean focal loss and its gradient with respect to the logits.
fn focal_with_grad(
    logits: &Tensor,
    targets: &Labels,
    params: FocalParams,
    ignore_index: Option<u8>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    params.validate()?;
    let (n, c, h, w) = logits.dims4()?;
    if targets.shape() != [n, h, w] {
        return Err(Error::Shape(format!(
            "targets {:?} do not match logits {:?}",
            targets.shape(),
            logits.shape()
        )));
    }
    let plane = h * w;
    let z = logits.data();
    let mut grad = want_grad.then(|| vec![0.0; z.len()]);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut probs = vec![0.0; c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let t = targets.data()[b * plane + p];
            if Some(t) == ignore_index {
                continue;
            }
            let t = t as usize;
            if t >= c {
                return Err(Error::Data(format!(
                    "target {} at (n={}, y={}, x={}) is outside [0, {})",
                    t,
                    b,
                    p / w,
                    p % w,
                    c
                )));
            }
            let max = (0..c).map(|ch| z[base + ch * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (ch, pr) in probs.iter_mut().enumerate() {
                *pr = (z[base + ch * plane + p] - max).exp();
                sum += *pr;
            }
            probs.iter_mut().for_each(|pr| *pr /= sum);
            let pt = probs[t];
            let clamped = pt.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            total += focal_term(clamped, params);
            count += 1;
            if let Some(gr) = grad.as_mut() {
                if clamped == pt {
                    let dl_dp = focal_term_grad(pt, params);
                    for (ch, pr) in probs.iter().enumerate() {
                        let dp_dz = pt * (f64::from(u8::from(ch == t)) - pr);
                        gr[base + ch * plane + p] = dl_dp * dp_dz;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    if let Some(gr) = grad.as_mut() {
        gr.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total * inv, grad))
}

/// Focal loss of plain logits, averaged over non-ignored pixels.
pub fn focal_loss_value(
    logits: &Tensor,
    targets: &Labels,
    params: FocalParams,
    ignore_index: Option<u8>,
) -> Result<f64> {
    Ok(focal_with_grad(logits, targets, params, ignore_index, false)?.0)
}

/// Focal loss as a graph op producing a one-element tensor.
pub fn focal_loss(
    g: &mut Graph,
    logits: &Var,
    targets: &Labels,
    params: FocalParams,
    ignore_index: Option<u8>,
) -> Result<Var> {
    let kind = OpKind::Loss("focal");
    if g.is_meta() {
        return g.custom(kind, &[logits], vec![1], || unreachable!(), Box::new(|_, _| Ok(vec![None])));
    }
    let (value, grad) = focal_with_grad(logits.value(), targets, params, ignore_index, true)?;
    let grad = Tensor::new(logits.shape().to_vec(), grad.expect("gradient requested"))?;
    g.custom(
        kind,
        &[logits],
        vec![1],
        || Ok(Tensor::scalar(value)),
        Box::new(move |up, _| Ok(vec![Some(grad.map(|v| v * up.data()[0]))])),
    )
}

/// `focal(refined) + aux_weight · focal(coarse)`.
pub fn combined_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    targets: &Labels,
    params: FocalParams,
    aux_weight: f64,
    ignore_index: Option<u8>,
) -> Result<Var> {
    if !(aux_weight >= 0.0) {
        return Err(Error::Param(format!("aux_weight must be >= 0, got {aux_weight}")));
    }
    let main = focal_loss(g, &out.refined_logits, targets, params, ignore_index)?;
    if aux_weight == 0.0 {
        return Ok(main);
    }
    let aux = focal_loss(g, &out.coarse_logits, targets, params, ignore_index)?;
    let aux = g.scale(&aux, aux_weight)?;
    g.add(&main, &aux)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{seeded_rng, ParamStore};
    use rand::Rng;

    const STANDARD: FocalParams = FocalParams {
        gamma: 2.0,
        alpha: 0.25,
    };
    const CE: FocalParams = FocalParams {
        gamma: 0.0,
        alpha: 1.0,
    };

    fn random_logits(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn exact_prediction_term_is_zero() {
        assert_eq!(focal_term(1.0, STANDARD), 0.0);
    }

    #[test]
    fn half_probability_matches_hand_value() {
        // Two equal logits give p_t = 0.5.
        let logits = Tensor::new(vec![1, 2, 1, 1], vec![0.3, 0.3]).unwrap();
        let t = Labels::new([1, 1, 1], vec![0]).unwrap();
        let l = focal_loss_value(&logits, &t, STANDARD, None).unwrap();
        assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn gamma_zero_alpha_one_is_cross_entropy() {
        let logits = random_logits([2, 3, 2, 2], 1);
        let t = Labels::new([2, 2, 2], vec![0, 1, 2, 1, 2, 0, 0, 1]).unwrap();
        let l = focal_loss_value(&logits, &t, CE, None).unwrap();
        let mut ce = 0.0;
        for b in 0..2 {
            for p in 0..4 {
                let zs: Vec<f64> = (0..3).map(|c| logits.data()[b * 12 + c * 4 + p]).collect();
                let lse = zs.iter().map(|z| z.exp()).sum::<f64>().ln();
                ce += lse - zs[t.data()[b * 4 + p] as usize];
            }
        }
        assert!((l - ce / 8.0).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_and_bad_targets() {
        let logits = random_logits([1, 3, 1, 2], 2);
        let a = Labels::new([1, 1, 2], vec![1, 255]).unwrap();
        let b = Labels::new([1, 1, 2], vec![1, 1]).unwrap();
        let la = focal_loss_value(&logits, &a, STANDARD, Some(255)).unwrap();
        let one = Tensor::new(vec![1, 3, 1, 1], vec![logits.data()[0], logits.data()[2], logits.data()[4]]).unwrap();
        let lone = focal_loss_value(&one, &Labels::new([1, 1, 1], vec![1]).unwrap(), STANDARD, None).unwrap();
        assert!((la - lone).abs() < 1e-15);
        assert_ne!(la, focal_loss_value(&logits, &b, STANDARD, Some(255)).unwrap());
        let bad = Labels::new([1, 1, 2], vec![0, 3]).unwrap();
        let err = focal_loss_value(&logits, &bad, STANDARD, Some(255)).unwrap_err().to_string();
        assert!(err.contains("y=0, x=1"), "{err}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let logits = random_logits([1, 3, 2, 2], 3);
        let t = Labels::new([1, 2, 2], vec![0, 2, 1, 2]).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::training(&store);
        let z = g.leaf(logits.clone());
        let l = focal_loss(&mut g, &z, &t, STANDARD, None).unwrap();
        let grads = g.backward(&l).unwrap();
        let analytic = grads.wrt(&z).unwrap();
        let h = 1e-6;
        for i in 0..logits.numel() {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let num = (focal_loss_value(&p, &t, STANDARD, None).unwrap()
                - focal_loss_value(&m, &t, STANDARD, None).unwrap())
                / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-4, "index {i}: {a} vs {num}");
        }
    }

    fn output(g: &mut Graph, refined: Tensor, coarse: Tensor) -> DecoderOutput {
        DecoderOutput {
            refined_logits: g.input(refined),
            coarse_logits: g.input(coarse),
        }
    }

    #[test]
    fn combined_loss_is_weighted_sum() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let (r, c) = (random_logits([2, 3, 4, 4], 4), random_logits([2, 3, 4, 4], 5));
        let mut rng = seeded_rng(6);
        let t = Labels::new([2, 4, 4], (0..32).map(|_| rng.gen_range(0..3)).collect()).unwrap();
        let out = output(&mut g, r.clone(), c.clone());
        let lr = focal_loss_value(&r, &t, STANDARD, None).unwrap();
        let lc = focal_loss_value(&c, &t, STANDARD, None).unwrap();
        let l = combined_loss(&mut g, &out, &t, STANDARD, 0.4, None).unwrap();
        assert!((l.value().data()[0] - (lr + 0.4 * lc)).abs() < 1e-12);
        let l0 = combined_loss(&mut g, &out, &t, STANDARD, 0.0, None).unwrap();
        assert_eq!(l0.value().data()[0], lr);
        let same = output(&mut g, r.clone(), r.clone());
        let l2 = combined_loss(&mut g, &same, &t, STANDARD, 1.0, None).unwrap();
        assert_eq!(l2.value().data()[0], 2.0 * lr);
        assert!(matches!(combined_loss(&mut g, &out, &t, STANDARD, -0.1, None), Err(Error::Param(_))));
    }

    #[test]
    fn focal_op_is_unsupported_by_mac_counting() {
        let store = ParamStore::new();
        let mut g = Graph::tracing(&store);
        let z = g.meta_input(vec![1, 3, 2, 2]);
        let t = Labels::filled([1, 2, 2], 0);
        focal_loss(&mut g, &z, &t, STANDARD, None).unwrap();
        let trace = g.take_trace();
        assert!(matches!(crate::profiler::macs_of_trace(&trace), Err(Error::UnsupportedLayer(_))));
    }
}
