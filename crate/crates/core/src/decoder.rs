//! Dual-context decoder: per-level ASPP, FPN lateral fusion, object-contextual
//! attention and a separable refinement head.

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, ParamPath};
use crate::ops::conv::ConvGeometry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsppConfig {
    pub dilation_rates: Vec<usize>,
    pub out_channels: usize,
    pub include_global_pool_branch: bool,
    /// Halve the rates at each deeper level (never below 1).
    pub scale_rates_per_level: bool,
}

impl Default for AsppConfig {
    fn default() -> Self {
        Self {
            dilation_rates: vec![6, 12, 18],
            out_channels: 24,
            include_global_pool_branch: true,
            scale_rates_per_level: false,
        }
    }
}

impl AsppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.is_empty() {
            return Err(Error::Param("ASPP needs at least one dilation rate".into()));
        }
        if self.dilation_rates.contains(&0) {
            return Err(Error::Param("ASPP dilation rates must be >= 1".into()));
        }
        if self.dilation_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Param(format!(
                "ASPP dilation rates must be strictly increasing, got {:?}",
                self.dilation_rates
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("aspp.out_channels must be > 0".into()));
        }
        Ok(())
    }

    /// Rates used at pyramid level `level` (0 = finest).
    pub fn rates_for_level(&self, level: usize) -> Vec<usize> {
        if self.scale_rates_per_level {
            self.dilation_rates.iter().map(|&r| (r >> level).max(1)).collect()
        } else {
            self.dilation_rates.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrConfig {
    /// One soft region per class.
    pub num_regions: usize,
    pub key_dim: usize,
    pub mid_channels: usize,
}

impl OcrConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_regions != num_classes {
            return Err(Error::Config(format!(
                "ocr.num_regions {} must equal the class count {}",
                self.num_regions, num_classes
            )));
        }
        if self.key_dim == 0 || self.mid_channels == 0 {
            return Err(Error::Config("ocr.key_dim and ocr.mid_channels must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub aspp: AsppConfig,
    /// Width of each FPN lateral projection.
    pub fpn_width: usize,
    pub ocr: OcrConfig,
    pub use_aspp: bool,
    pub use_ocr: bool,
}

impl DecoderConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.fpn_width == 0 {
            return Err(Error::Config("decoder.fpn_width must be > 0".into()));
        }
        self.aspp.validate()?;
        self.ocr.validate(num_classes)
    }
}

/// Convolution whose taps are spaced `r` pixels apart, same-padded.
pub fn dilated_conv(
    g: &mut Graph,
    x: &Var,
    weight: &Var,
    bias: Option<&Var>,
    r: usize,
) -> Result<Var> {
    if r == 0 {
        return Err(Error::Param("dilation rate must be >= 1".into()));
    }
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(Error::Param(format!(
            "dilated convolution needs a square odd kernel, got {:?}",
            ws
        )));
    }
    g.conv2d(x, weight, bias, ConvGeometry::same(ws[2], r))
}

#[derive(Clone, Debug)]
pub struct Aspp {
    pub in_channels: usize,
    pub rates: Vec<usize>,
    pub project: Conv2d,
    pub dilated: Vec<Conv2d>,
    pub pool: Option<Conv2d>,
    pub fuse: Conv2d,
}

impl Aspp {
    pub fn new(path: &mut ParamPath<'_>, in_channels: usize, cfg: &AsppConfig, level: usize) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_channels;
        let rates = cfg.rates_for_level(level);
        let project = Conv2d::new(&mut path.sub("project"), ConvSpec::pointwise(in_channels, out))?;
        let dilated = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                Conv2d::new(
                    &mut path.sub(format!("dilated{i}")),
                    ConvSpec::same(in_channels, out, 3).dilation(r),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = if cfg.include_global_pool_branch {
            Some(Conv2d::new(&mut path.sub("pool"), ConvSpec::pointwise(in_channels, out))?)
        } else {
            None
        };
        let branches = 1 + rates.len() + usize::from(pool.is_some());
        let fuse = Conv2d::new(&mut path.sub("fuse"), ConvSpec::pointwise(branches * out, out))?;
        Ok(Self {
            in_channels,
            rates,
            project,
            dilated,
            pool,
            fuse,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let (_, c, h, w) = x.value().dims4()?;
        if c != self.in_channels {
            return Err(shape_err!("ASPP expects {} channels, got {}", self.in_channels, c));
        }
        let mut branches = Vec::with_capacity(self.dilated.len() + 2);
        let y = self.project.forward(g, x)?;
        branches.push(g.relu(&y)?);
        for (conv, &r) in self.dilated.iter().zip(&self.rates) {
            let wv = g.param(conv.weight);
            let bv = conv.bias.map(|b| g.param(b));
            let y = dilated_conv(g, x, &wv, bv.as_ref(), r)?;
            branches.push(g.relu(&y)?);
        }
        if let Some(pool) = &self.pool {
            let p = g.global_avg_pool(x)?;
            let p = pool.forward(g, &p)?;
            let p = g.relu(&p)?;
            branches.push(g.broadcast_spatial(&p, h, w)?);
        }
        let refs: Vec<&Var> = branches.iter().collect();
        let cat = g.concat_channels(&refs)?;
        let y = self.fuse.forward(g, &cat)?;
        g.relu(&y)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

impl Interpolation {
    fn apply(self, g: &mut Graph, x: &Var, h: usize, w: usize) -> Result<Var> {
        match self {
            Self::Bilinear => g.resize_bilinear(x, h, w),
            Self::Nearest => g.resize_nearest(x, h, w),
        }
    }
}

/// 1×1 laterals to a common width, resized to the finest level and concatenated.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub width: usize,
    pub laterals: Vec<Conv2d>,
    pub interpolation: Interpolation,
}

impl Fpn {
    pub fn new(path: &mut ParamPath<'_>, in_channels: &[usize], width: usize) -> Result<Self> {
        let laterals = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&mut path.sub(format!("lateral{i}")), ConvSpec::pointwise(c, width)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            width,
            laterals,
            interpolation: Interpolation::Bilinear,
        })
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    /// Features must be ordered by increasing stride.
    pub fn forward(&self, g: &mut Graph, features: &[FeatureMap]) -> Result<FeatureMap> {
        if features.is_empty() || features.len() > self.laterals.len() {
            return Err(shape_err!(
                "FPN takes 1 to {} feature maps, got {}",
                self.laterals.len(),
                features.len()
            ));
        }
        let (n, _, h, w) = features[0].var.value().dims4()?;
        let mut projected = Vec::with_capacity(features.len());
        for (i, (f, lateral)) in features.iter().zip(&self.laterals).enumerate() {
            let (fn_, ..) = f.var.value().dims4()?;
            if fn_ != n {
                return Err(shape_err!("FPN input {} has batch {}, expected {}", i, fn_, n));
            }
            if i > 0 && f.stride <= features[i - 1].stride {
                return Err(shape_err!("FPN inputs must be ordered by increasing stride"));
            }
            let y = lateral.forward(g, &f.var)?;
            let y = if y.shape()[2..] == [h, w] {
                y
            } else {
                self.interpolation.apply(g, &y, h, w)?
            };
            projected.push(y);
        }
        let var = if projected.len() == 1 {
            projected.pop().expect("one element")
        } else {
            let refs: Vec<&Var> = projected.iter().collect();
            g.concat_channels(&refs)?
        };
        Ok(FeatureMap {
            var,
            stride: features[0].stride,
        })
    }
}

/// Softmax attention over keys: `out[:, i] = Σ_j softmax_j(scale · q_iᵀk_j) v_j`.
///
/// Shapes are batched: q (B, d, Nq), k (B, d, Nkv), v (B, c, Nkv) → (B, c, Nq).
/// Also returns the attention weights as (B, Nq, Nkv).
pub fn attention_with_scale(
    g: &mut Graph,
    q: &Var,
    k: &Var,
    v: &Var,
    scale: f64,
) -> Result<(Var, Var)> {
    let ([bq, dq, _], [bk, dk, nkv], [bv, _, nv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(shape_err!(
            "attention expects 3-D operands, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    };
    if dq != dk {
        return Err(shape_err!("query depth {} does not match key depth {}", dq, dk));
    }
    if bq != bk || bk != bv || nkv != nv {
        return Err(shape_err!(
            "attention operand mismatch: {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let qt = g.transpose(q)?;
    let logits = g.matmul(&qt, k)?;
    let logits = if scale == 1.0 { logits } else { g.scale(&logits, scale)? };
    let weights = g.softmax(&logits)?;
    let wt = g.transpose(&weights)?;
    let out = g.matmul(v, &wt)?;
    Ok((out, weights))
}

/// Scaled dot-product attention with the `1/√d` temperature.
pub fn scaled_dot_attention(g: &mut Graph, q: &Var, k: &Var, v: &Var) -> Result<Var> {
    let d = q.shape().get(1).copied().unwrap_or(1).max(1);
    Ok(attention_with_scale(g, q, k, v, 1.0 / (d as f64).sqrt())?.0)
}

/// Aggregates pixel features into one representation per region.
///
/// logits (N, K, h, w), features (N, C, h, w) → (N, K, C); each region's
/// spatial softmax weights sum to 1.
pub fn region_representations(g: &mut Graph, logits: &Var, features: &Var) -> Result<Var> {
    let (n, k, h, w) = logits.value().dims4()?;
    let (nf, c, hf, wf) = features.value().dims4()?;
    if (n, h, w) != (nf, hf, wf) {
        return Err(shape_err!(
            "region logits {:?} and features {:?} disagree",
            logits.shape(),
            features.shape()
        ));
    }
    let l = g.reshape(logits, vec![n, k, h * w])?;
    let a = g.softmax(&l)?;
    let f = g.reshape(features, vec![n, c, h * w])?;
    let ft = g.transpose(&f)?;
    g.matmul(&a, &ft)
}

/// 1×1 conv → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(path: &mut ParamPath<'_>, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut path.sub("conv"), ConvSpec::pointwise(c_in, c_out))?,
            bn: BatchNorm2d::new(&mut path.sub("bn"), c_out),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, &y)?;
        g.relu(&y)
    }
}

#[derive(Clone, Debug)]
pub struct OcrOutput {
    pub augmented: Var,
    /// (N, K, h, w) soft object regions, supervised as the coarse output.
    pub region_logits: Var,
    /// Projected pixel features x_i, (N, mid, h, w).
    pub pixels: Var,
    /// Region representations f_k, (N, K, mid).
    pub region_reps: Var,
    /// Pixel–region weights w_ik, (N, h·w, K).
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct Ocr {
    pub config: OcrConfig,
    pub in_channels: usize,
    pub pixel_proj: Conv2d,
    pub region_head: Conv2d,
    pub phi: ConvBnRelu,
    pub psi: ConvBnRelu,
    pub transform: Conv2d,
    pub fusion: Conv2d,
}

impl Ocr {
    pub fn new(path: &mut ParamPath<'_>, in_channels: usize, cfg: &OcrConfig) -> Result<Self> {
        let mid = cfg.mid_channels;
        Ok(Self {
            config: cfg.clone(),
            in_channels,
            pixel_proj: Conv2d::new(&mut path.sub("pixel_proj"), ConvSpec::pointwise(in_channels, mid))?,
            region_head: Conv2d::new(
                &mut path.sub("region_head"),
                ConvSpec::pointwise(mid, cfg.num_regions),
            )?,
            phi: ConvBnRelu::new(&mut path.sub("phi"), mid, cfg.key_dim)?,
            psi: ConvBnRelu::new(&mut path.sub("psi"), mid, cfg.key_dim)?,
            transform: Conv2d::new(&mut path.sub("transform"), ConvSpec::pointwise(mid, mid))?,
            fusion: Conv2d::new(&mut path.sub("fusion"), ConvSpec::pointwise(2 * mid, mid))?,
        })
    }

    /// Returns (pixel features, region logits, region representations).
    pub fn soft_object_regions(&self, g: &mut Graph, x: &Var) -> Result<(Var, Var, Var)> {
        let (_, c, _, _) = x.value().dims4()?;
        if c != self.in_channels {
            return Err(shape_err!("OCR expects {} channels, got {}", self.in_channels, c));
        }
        let pixels = self.pixel_proj.forward(g, x)?;
        let pixels = g.relu(&pixels)?;
        let logits = self.region_head.forward(g, &pixels)?;
        let reps = region_representations(g, &logits, &pixels)?;
        Ok((pixels, logits, reps))
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<OcrOutput> {
        let (pixels, region_logits, region_reps) = self.soft_object_regions(g, x)?;
        let (n, mid, h, w) = pixels.value().dims4()?;
        let k = self.config.num_regions;
        let d = self.config.key_dim;

        let q = self.phi.forward(g, &pixels)?;
        let q = g.reshape(&q, vec![n, d, h * w])?;

        // Regions as an (N, mid, K, 1) map so the 1×1 stacks apply per region.
        let reps_t = g.transpose(&region_reps)?;
        let reps_map = g.reshape(&reps_t, vec![n, mid, k, 1])?;
        let keys = self.psi.forward(g, &reps_map)?;
        let keys = g.reshape(&keys, vec![n, d, k])?;
        let values = self.transform.forward(g, &reps_map)?;
        let values = g.relu(&values)?;
        let values = g.reshape(&values, vec![n, mid, k])?;

        // κ(x, f) = φ(x)ᵀψ(f) is left unscaled.
        let (z, weights) = attention_with_scale(g, &q, &keys, &values, 1.0)?;
        let z = g.reshape(&z, vec![n, mid, h, w])?;
        let cat = g.concat_channels(&[&pixels, &z])?;
        let augmented = self.fusion.forward(g, &cat)?;
        let augmented = g.relu(&augmented)?;
        Ok(OcrOutput {
            augmented,
            region_logits,
            pixels,
            region_reps,
            weights,
        })
    }
}

/// Depthwise 3×3 → pointwise → ReLU → 1×1 classifier, resized to the input.
#[derive(Clone, Debug)]
pub struct RefinementHead {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub classifier: Conv2d,
}

impl RefinementHead {
    pub fn new(path: &mut ParamPath<'_>, in_channels: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            depthwise: Conv2d::new(&mut path.sub("dw"), ConvSpec::depthwise(in_channels, 3))?,
            pointwise: Conv2d::new(&mut path.sub("pw"), ConvSpec::pointwise(in_channels, in_channels))?,
            classifier: Conv2d::new(
                &mut path.sub("classifier"),
                ConvSpec::pointwise(in_channels, num_classes),
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = self.depthwise.forward(g, x)?;
        let y = self.pointwise.forward(g, &y)?;
        let y = g.relu(&y)?;
        let y = self.classifier.forward(g, &y)?;
        g.resize_bilinear(&y, out_h, out_w)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Coarse logits at input size; a copy of `refined_logits` when OCR is off.
    pub coarse_logits: Var,
    pub refined_logits: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub num_classes: usize,
    pub aspp: Vec<Aspp>,
    pub fpn: Fpn,
    pub ocr: Option<Ocr>,
    pub head: RefinementHead,
}

impl Decoder {
    pub fn new(
        path: &mut ParamPath<'_>,
        feature_channels: [usize; 4],
        cfg: &DecoderConfig,
        num_classes: usize,
    ) -> Result<Self> {
        cfg.validate(num_classes)?;
        let mut lateral_in = feature_channels;
        let aspp = if cfg.use_aspp {
            (0..3)
                .map(|l| {
                    lateral_in[l] = cfg.aspp.out_channels;
                    Aspp::new(&mut path.sub(format!("aspp{l}")), feature_channels[l], &cfg.aspp, l)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let fpn = Fpn::new(&mut path.sub("fpn"), &lateral_in, cfg.fpn_width)?;
        let fused = 4 * cfg.fpn_width;
        let ocr = if cfg.use_ocr {
            Some(Ocr::new(&mut path.sub("ocr"), fused, &cfg.ocr)?)
        } else {
            None
        };
        let head_in = if cfg.use_ocr { cfg.ocr.mid_channels } else { fused };
        let head = RefinementHead::new(&mut path.sub("head"), head_in, num_classes)?;
        Ok(Self {
            config: cfg.clone(),
            num_classes,
            aspp,
            fpn,
            ocr,
            head,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        features: &[FeatureMap],
        input_hw: (usize, usize),
    ) -> Result<DecoderOutput> {
        if features.len() < 4 {
            return Err(shape_err!("decoder needs 4 feature maps, got {}", features.len()));
        }
        let mut levels = Vec::with_capacity(4);
        for (l, f) in features.iter().take(4).enumerate() {
            let var = match self.aspp.get(l) {
                Some(a) => a.forward(g, &f.var)?,
                None => f.var.clone(),
            };
            levels.push(FeatureMap { var, stride: f.stride });
        }
        let fused = self.fpn.forward(g, &levels)?;
        let (h, w) = input_hw;
        match &self.ocr {
            Some(ocr) => {
                let out = ocr.forward(g, &fused.var)?;
                let refined = self.head.forward(g, &out.augmented, h, w)?;
                let coarse = g.resize_bilinear(&out.region_logits, h, w)?;
                Ok(DecoderOutput {
                    coarse_logits: coarse,
                    refined_logits: refined,
                })
            }
            None => {
                let refined = self.head.forward(g, &fused.var, h, w)?;
                Ok(DecoderOutput {
                    coarse_logits: refined.clone(),
                    refined_logits: refined,
                })
            }
        }
    }
}
