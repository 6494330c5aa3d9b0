//! Parameter storage and the basic layers every model block is built from.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::conv::ConvGeometry;
use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Rc<Tensor>,
}

/// Named tensors addressed by dotted paths (`backbone.stage1.block0.fuse.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            value: Rc::new(value),
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id].kind
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id].kind == ParamKind::Trainable
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub(crate) fn value_rc(&self, id: ParamId) -> Rc<Tensor> {
        self.entries[id].value.clone()
    }

    /// Mutable access; copies the tensor first if a graph still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.entries[id].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = self.value(id).shape();
        if cur != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.name(id),
                cur,
                value.shape()
            )));
        }
        self.entries[id].value = Rc::new(value);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.entries.len()
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Total element count of trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.value(id).numel()).sum()
    }

    /// Names and ids of all tensors whose path starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids()
            .filter(move |&id| self.entries[id].name.starts_with(prefix))
    }
}

/// Hands out parameter slots under a dotted path, initializing them from a
/// seeded generator.
pub struct ParamPath<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn root(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> ParamPath<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamPath {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform(-bound, bound) initialization.
    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    self.rng.gen_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        let full = self.full(name);
        self.store
            .insert(&full, Tensor::from_parts(shape, data), ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let full = self.full(name);
        self.store
            .insert(&full, Tensor::full(shape, value), ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let full = self.full(name);
        self.store
            .insert(&full, Tensor::full(shape, value), ParamKind::Buffer)
    }
}

/// 2-D convolution with weight shape (out, in / groups, k, k).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geometry: ConvGeometry,
    pub bias: bool,
}

impl ConvSpec {
    /// Same-padded stride-1 convolution with bias.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            geometry: ConvGeometry::same(kernel, 1),
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1)
    }

    /// Per-channel `k×k` filter (groups = channels).
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self {
            geometry: ConvGeometry::same(kernel, 1).with_groups(channels),
            ..Self::same(channels, channels, kernel)
        }
    }

    pub fn dilation(mut self, rate: usize) -> Self {
        self.geometry.dilation = rate;
        self.geometry.padding = rate * (self.kernel - 1) / 2;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    /// Weights and bias drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn new(path: &mut ParamPath<'_>, spec: ConvSpec) -> Result<Self> {
        let g = spec.geometry;
        if spec.in_channels == 0 || spec.out_channels == 0 || spec.kernel == 0 {
            return Err(Error::Config(format!(
                "convolution `{}` has a zero dimension: {:?}",
                path.prefix, spec
            )));
        }
        if spec.in_channels % g.groups != 0 || spec.out_channels % g.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide channels {} -> {}",
                g.groups, spec.in_channels, spec.out_channels
            )));
        }
        let cin_g = spec.in_channels / g.groups;
        let fan_in = cin_g * spec.kernel * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = path.uniform(
            "weight",
            vec![spec.out_channels, cin_g, spec.kernel, spec.kernel],
            bound,
        );
        let bias = spec
            .bias
            .then(|| path.uniform("bias", vec![spec.out_channels], bound));
        Ok(Self {
            weight,
            bias,
            geometry: g,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, &w, b.as_ref(), self.geometry)
    }
}

/// Layer normalization over the channel axis at each position.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub gamma: ParamId,
    pub beta: Option<ParamId>,
    pub eps: f64,
}

impl LayerNorm2d {
    pub const EPS: f64 = 1e-6;

    pub fn new(path: &mut ParamPath<'_>, channels: usize, affine_offset: bool) -> Self {
        let gamma = path.constant("weight", vec![channels], 1.0);
        let beta = affine_offset.then(|| path.constant("bias", vec![channels], 0.0));
        Self {
            gamma,
            beta,
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = self.beta.map(|b| g.param(b));
        g.layer_norm(x, &gamma, beta.as_ref(), self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(path: &mut ParamPath<'_>, channels: usize) -> Self {
        Self {
            gamma: path.constant("weight", vec![channels], 1.0),
            beta: path.constant("bias", vec![channels], 0.0),
            running_mean: path.buffer("running_mean", vec![channels], 0.0),
            running_var: path.buffer("running_var", vec![channels], 1.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(x, &gamma, &beta, self.running_mean, self.running_var, self.eps)
    }
}

/// Depthwise `k×k` convolution followed by a pointwise projection.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl SeparableConv {
    pub fn new(
        path: &mut ParamPath<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            depthwise: Conv2d::new(&mut path.sub("dw"), ConvSpec::depthwise(in_channels, kernel))?,
            pointwise: Conv2d::new(
                &mut path.sub("pw"),
                ConvSpec::pointwise(in_channels, out_channels),
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let y = self.depthwise.forward(g, x)?;
        self.pointwise.forward(g, &y)
    }
}

/// Seeded generator used for all parameter initialization.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
