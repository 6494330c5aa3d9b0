//! LDCNet encoder: a patchify stem and four stages of densely connected
//! dual-branch bottlenecks joined by normalize/project/pool transitions.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvSpec, LayerNorm2d, ParamPath, SeparableConv};
use crate::ops::conv::ConvGeometry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_depths: Vec<usize>,
    /// Channels entering each stage.
    pub stage_widths: Vec<usize>,
    /// Channels appended by every dense block.
    pub growth: usize,
    /// Output width of the stem; must equal `stage_widths[0]`.
    pub stem_width: usize,
    /// Side (and stride) of the patchify stem. Feature strides are
    /// `stem_patch * [1, 2, 4, 8]`.
    pub stem_patch: usize,
    /// Hidden width of each bottleneck branch, as a multiple of `growth`.
    pub bottleneck_expansion: usize,
    /// Whether layer norms carry a learned offset.
    pub norm_offset: bool,
}

impl BackboneConfig {
    pub fn base() -> Self {
        Self {
            stage_depths: vec![2, 2, 6, 2],
            stage_widths: vec![32, 64, 128, 256],
            growth: 48,
            stem_width: 32,
            stem_patch: 4,
            bottleneck_expansion: 2,
            norm_offset: true,
        }
    }

    pub fn large() -> Self {
        Self {
            stage_depths: vec![6, 6, 18, 6],
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.len() != 4 {
            return Err(Error::Config(format!(
                "stage_depths must have 4 entries, got {}",
                self.stage_depths.len()
            )));
        }
        if self.stage_widths.len() != 4 {
            return Err(Error::Config(format!(
                "stage_widths must have 4 entries, got {}",
                self.stage_widths.len()
            )));
        }
        if let Some(i) = self.stage_depths.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!("stage_depths[{i}] must be >= 1")));
        }
        if let Some(i) = self.stage_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("stage_widths[{i}] must be > 0")));
        }
        if self.growth == 0 || self.stem_width == 0 || self.stem_patch == 0 {
            return Err(Error::Config(
                "growth, stem_width and stem_patch must be > 0".into(),
            ));
        }
        if self.bottleneck_expansion == 0 {
            return Err(Error::Config("bottleneck_expansion must be >= 1".into()));
        }
        if self.stem_width != self.stage_widths[0] {
            return Err(Error::Config(format!(
                "stem_width {} must equal stage_widths[0] {}",
                self.stem_width, self.stage_widths[0]
            )));
        }
        Ok(())
    }

    /// Channel count of each emitted feature map.
    pub fn out_channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.stage_widths[i] + self.stage_depths[i] * self.growth)
    }

    pub fn strides(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.stem_patch << i)
    }

    /// Input height and width must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        self.stem_patch * 8
    }
}

/// A feature map together with its stride relative to the network input.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.var.shape()[1]
    }
}

/// `concat(x, gelu(fuse(ln(sep7(x) + sep3(x)))))`.
#[derive(Clone, Debug)]
pub struct DenseBottleneck {
    pub in_channels: usize,
    pub growth: usize,
    pub branch_a: SeparableConv,
    pub branch_b: SeparableConv,
    pub norm: LayerNorm2d,
    pub fuse: Conv2d,
}

impl DenseBottleneck {
    pub fn new(
        path: &mut ParamPath<'_>,
        in_channels: usize,
        growth: usize,
        expansion: usize,
        norm_offset: bool,
    ) -> Result<Self> {
        let mid = growth * expansion;
        Ok(Self {
            in_channels,
            growth,
            branch_a: SeparableConv::new(&mut path.sub("branch7"), in_channels, mid, 7)?,
            branch_b: SeparableConv::new(&mut path.sub("branch3"), in_channels, mid, 3)?,
            norm: LayerNorm2d::new(&mut path.sub("norm"), mid, norm_offset),
            fuse: Conv2d::new(&mut path.sub("fuse"), ConvSpec::pointwise(mid, growth))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(shape_err!(
                "dense block expects {} input channels, got {}",
                self.in_channels,
                c
            ));
        }
        let a = self.branch_a.forward(g, x)?;
        let b = self.branch_b.forward(g, x)?;
        let sum = g.add(&a, &b)?;
        let normed = self.norm.forward(g, &sum)?;
        let fused = self.fuse.forward(g, &normed)?;
        let new = g.gelu(&fused)?;
        g.concat_channels(&[x, &new])
    }
}

/// Layer norm, 1×1 projection to the next stage width, 2×2 average pool.
#[derive(Clone, Debug)]
pub struct Transition {
    pub norm: LayerNorm2d,
    pub proj: Conv2d,
}

impl Transition {
    fn new(path: &mut ParamPath<'_>, c_in: usize, c_out: usize, norm_offset: bool) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm2d::new(&mut path.sub("norm"), c_in, norm_offset),
            proj: Conv2d::new(&mut path.sub("proj"), ConvSpec::pointwise(c_in, c_out))?,
        })
    }

    fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let y = self.norm.forward(g, x)?;
        let y = self.proj.forward(g, &y)?;
        g.avg_pool(&y, 2)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Conv2d,
    pub stem_norm: LayerNorm2d,
    pub stages: Vec<Vec<DenseBottleneck>>,
    pub transitions: Vec<Transition>,
}

impl Backbone {
    pub fn new(path: &mut ParamPath<'_>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let p = config.stem_patch;
        let stem = Conv2d::new(
            &mut path.sub("stem.conv"),
            ConvSpec {
                in_channels: 3,
                out_channels: config.stem_width,
                kernel: p,
                geometry: ConvGeometry {
                    stride: p,
                    ..ConvGeometry::default()
                },
                bias: true,
            },
        )?;
        let stem_norm = LayerNorm2d::new(&mut path.sub("stem.norm"), config.stem_width, config.norm_offset);
        let outs = config.out_channels();
        let mut stages = Vec::with_capacity(4);
        let mut transitions = Vec::with_capacity(3);
        for s in 0..4 {
            let mut stage_path = path.sub(format!("stage{}", s + 1));
            let mut blocks = Vec::with_capacity(config.stage_depths[s]);
            for b in 0..config.stage_depths[s] {
                blocks.push(DenseBottleneck::new(
                    &mut stage_path.sub(format!("block{b}")),
                    config.stage_widths[s] + b * config.growth,
                    config.growth,
                    config.bottleneck_expansion,
                    config.norm_offset,
                )?);
            }
            stages.push(blocks);
            if s < 3 {
                transitions.push(Transition::new(
                    &mut path.sub(format!("transition{}", s + 1)),
                    outs[s],
                    config.stage_widths[s + 1],
                    config.norm_offset,
                )?);
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stem_norm,
            stages,
            transitions,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    /// Checks an (N, 3, H, W) input shape against the stride contract.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(shape_err!("expected an (N, 3, H, W) input, got {:?}", shape));
        };
        if c != 3 {
            return Err(shape_err!("expected 3 input channels, got {}", c));
        }
        let m = self.config.input_multiple();
        for (axis, len) in [("height", h), ("width", w)] {
            if len == 0 || len % m != 0 {
                return Err(shape_err!("input {} {} is not a multiple of {}", axis, len, m));
            }
        }
        Ok(())
    }

    /// Returns the four stage outputs at strides `stem_patch * [1, 2, 4, 8]`.
    pub fn forward(&self, g: &mut Graph, images: &Var) -> Result<Vec<FeatureMap>> {
        self.check_input(images.shape())?;
        let strides = self.config.strides();
        let x = self.stem.forward(g, images)?;
        let mut x = self.stem_norm.forward(g, &x)?;
        let mut features = Vec::with_capacity(4);
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(g, &x)?;
            }
            features.push(FeatureMap {
                var: x.clone(),
                stride: strides[s],
            });
            if let Some(t) = self.transitions.get(s) {
                x = t.forward(g, &x)?;
            }
        }
        Ok(features)
    }
}
