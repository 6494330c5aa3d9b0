//! Full segmentation network: backbone, decoder and the parameters they own.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureMap};
use crate::decoder::{AsppConfig, Decoder, DecoderConfig, DecoderOutput, OcrConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{seeded_rng, ParamPath, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn base() -> Self {
        Self {
            num_classes: 3,
            backbone: BackboneConfig::base(),
            decoder: DecoderConfig {
                aspp: AsppConfig::default(),
                fpn_width: 32,
                ocr: OcrConfig {
                    num_regions: 3,
                    key_dim: 64,
                    mid_channels: 128,
                },
                use_aspp: true,
                use_ocr: true,
            },
        }
    }

    pub fn large() -> Self {
        let base = Self::base();
        Self {
            backbone: BackboneConfig::large(),
            ..base
        }
    }

    /// Narrow network for tests and desk-scale probes.
    pub fn toy() -> Self {
        Self {
            num_classes: 3,
            backbone: BackboneConfig {
                stage_depths: vec![1, 1, 1, 1],
                stage_widths: vec![8, 8, 12, 12],
                growth: 4,
                stem_width: 8,
                stem_patch: 2,
                bottleneck_expansion: 1,
                norm_offset: true,
            },
            decoder: DecoderConfig {
                aspp: AsppConfig {
                    dilation_rates: vec![1, 2],
                    out_channels: 6,
                    include_global_pool_branch: true,
                    scale_rates_per_level: false,
                },
                fpn_width: 4,
                ocr: OcrConfig {
                    num_regions: 3,
                    key_dim: 4,
                    mid_channels: 8,
                },
                use_aspp: true,
                use_ocr: true,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected base, large or toy)"
            ))),
        }
    }

    pub fn with_ablation(mut self, use_aspp: bool, use_ocr: bool) -> Self {
        self.decoder.use_aspp = use_aspp;
        self.decoder.use_ocr = use_ocr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be > 0".into()));
        }
        self.backbone.validate()?;
        self.decoder.validate(self.num_classes)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub decoder: Decoder,
}

impl Model {
    /// Builds the network with parameters drawn from a generator seeded by `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut root = ParamPath::root(&mut params, &mut rng);
        let backbone = Backbone::new(&mut root.sub("backbone"), &config.backbone)?;
        let decoder = Decoder::new(
            &mut root.sub("decoder"),
            config.backbone.out_channels(),
            &config.decoder,
            config.num_classes,
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            decoder,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn features(&self, g: &mut Graph, images: &Var) -> Result<Vec<FeatureMap>> {
        self.backbone.forward(g, images)
    }

    /// Runs the network on an (N, 3, H, W) batch held by `g`.
    pub fn forward(&self, g: &mut Graph, images: &Var) -> Result<DecoderOutput> {
        let features = self.backbone.forward(g, images)?;
        let (h, w) = (images.shape()[2], images.shape()[3]);
        self.decoder.forward(g, &features, (h, w))
    }
}
