//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] for one forward pass. Operations are
//! methods on the graph; when gradients are enabled each operation records a
//! node holding a backward closure. [`Graph::backward`] walks the tape in
//! reverse creation order, which is a valid topological order.
//!
//! A graph can also run in *tracing* mode: tensors carry shapes only, no
//! arithmetic happens, and every operation appends a [`TraceEntry`]. The
//! profiler counts multiply-accumulates from that trace.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::nn::{ParamId, ParamStore};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvShape};
use crate::ops::gemm::{gemm, Layout};
use crate::ops::norm;
use crate::ops::resample;
use crate::tensor::Tensor;

/// A value flowing through a graph.
#[derive(Clone)]
pub struct Var {
    node: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Operation kinds as seen by the profiler.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Conv2d {
        kernel: [usize; 2],
        groups: usize,
        bias: bool,
    },
    Add,
    Concat,
    Scale,
    Relu,
    Gelu,
    LayerNorm,
    BatchNorm,
    AvgPool {
        kernel: usize,
    },
    GlobalAvgPool,
    Broadcast,
    ResizeBilinear,
    ResizeNearest,
    Reshape,
    Transpose,
    MatMul,
    Softmax,
    /// A training objective; not part of a model's forward pass.
    Loss(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub kind: OpKind,
    pub inputs: Vec<Vec<usize>>,
    pub output: Vec<usize>,
}

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|n| self.leaves.get(&n))
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    grad: bool,
    training: bool,
    meta: bool,
    reduced_precision: bool,
    trace: Option<Vec<TraceEntry>>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

const BN_MOMENTUM: f64 = 0.1;

impl<'s> Graph<'s> {
    /// Inference graph: no tape, normalization layers use running statistics.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            grad: false,
            training: false,
            meta: false,
            reduced_precision: false,
            trace: None,
            buffer_updates: Vec::new(),
        }
    }

    /// Training graph: records a tape, batch norm uses batch statistics.
    pub fn training(store: &'s ParamStore) -> Self {
        Self {
            grad: true,
            training: true,
            ..Self::inference(store)
        }
    }

    /// Shape-only graph that records a trace of every operation.
    pub fn tracing(store: &'s ParamStore) -> Self {
        Self {
            meta: true,
            trace: Some(Vec::new()),
            ..Self::inference(store)
        }
    }

    pub fn with_grad(mut self, grad: bool) -> Self {
        self.grad = grad && !self.meta;
        self
    }

    pub fn with_training(mut self, training: bool) -> Self {
        self.training = training;
        self
    }

    /// Rounds convolution and matmul outputs to 32-bit precision, keeping
    /// parameters and gradients in 64-bit.
    pub fn with_reduced_precision(mut self, on: bool) -> Self {
        self.reduced_precision = on;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        self.trace.take().unwrap_or_default()
    }

    /// Running-statistic updates produced by training-mode batch norms.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        let value = if self.meta {
            Tensor::meta(t.shape().to_vec())
        } else {
            t
        };
        Var {
            node: None,
            value: Rc::new(value),
        }
    }

    /// A shape-only input for tracing.
    pub fn meta_input(&mut self, shape: Vec<usize>) -> Var {
        Var {
            node: None,
            value: Rc::new(Tensor::meta(shape)),
        }
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        if !self.grad {
            return self.input(t);
        }
        self.nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
            param: None,
        });
        Var {
            node: Some(self.nodes.len() - 1),
            value: Rc::new(t),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.value_rc(id);
        let value = if self.meta {
            Rc::new(Tensor::meta(value.shape().to_vec()))
        } else {
            value
        };
        if !self.grad || !self.store.is_trainable(id) {
            return Var { node: None, value };
        }
        self.nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
            param: Some(id),
        });
        Var {
            node: Some(self.nodes.len() - 1),
            value,
        }
    }

    fn record(&mut self, value: Tensor, inputs: &[&Var], backward: BackwardFn) -> Var {
        let tracked = self.grad && inputs.iter().any(|v| v.node.is_some());
        if !tracked {
            return Var {
                node: None,
                value: Rc::new(value),
            };
        }
        self.nodes.push(Node {
            inputs: inputs.iter().map(|v| v.node).collect(),
            backward: Some(backward),
            param: None,
        });
        Var {
            node: Some(self.nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    fn note(&mut self, kind: OpKind, inputs: &[&Var], output: &[usize]) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry {
                kind,
                inputs: inputs.iter().map(|v| v.shape().to_vec()).collect(),
                output: output.to_vec(),
            });
        }
    }

    fn meta_var(&self, shape: Vec<usize>) -> Var {
        Var {
            node: None,
            value: Rc::new(Tensor::meta(shape)),
        }
    }

    fn round(&self, t: Tensor) -> Tensor {
        if self.reduced_precision {
            t.map(|v| v as f32 as f64)
        } else {
            t
        }
    }

    /// Records an operation implemented outside this module.
    pub(crate) fn custom(
        &mut self,
        kind: OpKind,
        inputs: &[&Var],
        out_shape: Vec<usize>,
        forward: impl FnOnce() -> Result<Tensor>,
        backward: BackwardFn,
    ) -> Result<Var> {
        self.note(kind, inputs, &out_shape);
        if self.meta {
            return Ok(self.meta_var(out_shape));
        }
        let value = forward()?;
        Ok(self.record(value, inputs, backward))
    }

    /// Back-propagates from `output`, seeding its gradient with ones.
    pub fn backward(&mut self, output: &Var) -> Result<Gradients> {
        let mut out = Gradients::default();
        let Some(root) = output.node else {
            return Ok(out);
        };
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(output.shape().to_vec(), 1.0));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                None => {
                    if let Some(pid) = node.param {
                        match out.params.get_mut(&pid) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                out.params.insert(pid, g);
                            }
                        }
                    } else {
                        out.leaves.insert(i, g);
                    }
                }
                Some(f) => {
                    let need: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let input_grads = f(&g, &need)?;
                    for (inp, ig) in node.inputs.iter().zip(input_grads) {
                        if let (Some(j), Some(ig)) = (inp, ig) {
                            match grads[*j].as_mut() {
                                Some(acc) => acc.add_assign(&ig),
                                None => grads[*j] = Some(ig),
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        x: &Var,
        weight: &Var,
        bias: Option<&Var>,
        geo: ConvGeometry,
    ) -> Result<Var> {
        let s = ConvShape::resolve(x.shape(), weight.shape(), geo)?;
        let out_shape = s.out_shape();
        let ws = weight.shape();
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.note(
            OpKind::Conv2d {
                kernel: [ws[2], ws[3]],
                groups: geo.groups,
                bias: bias.is_some(),
            },
            &inputs,
            &out_shape,
        );
        if self.meta {
            return Ok(self.meta_var(out_shape));
        }
        let y = conv2d_forward(x.value(), weight.value(), bias.map(|b| b.value()), geo)?;
        let y = self.round(y);
        let (xv, wv) = (x.value.clone(), weight.value.clone());
        Ok(self.record(
            y,
            &inputs,
            Box::new(move |g, need| {
                let grads = conv2d_backward(
                    &xv,
                    &wv,
                    geo,
                    g,
                    [need[0], need[1], need.get(2).copied().unwrap_or(false)],
                )?;
                let mut v = vec![grads.input, grads.weight];
                if need.len() == 3 {
                    v.push(grads.bias);
                }
                Ok(v)
            }),
        ))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(shape_err!("cannot add {:?} and {:?}", a.shape(), b.shape()));
        }
        let shape = a.shape().to_vec();
        self.note(OpKind::Add, &[a, b], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let mut y = a.to_tensor();
        y.add_assign(b.value());
        Ok(self.record(
            y,
            &[a, b],
            Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())])),
        ))
    }

    pub fn scale(&mut self, x: &Var, factor: f64) -> Result<Var> {
        let shape = x.shape().to_vec();
        self.note(OpKind::Scale, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let y = x.value().map(|v| v * factor);
        Ok(self.record(
            y,
            &[x],
            Box::new(move |g, _| Ok(vec![Some(g.map(|v| v * factor))])),
        ))
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[&Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err!("concat of an empty list"))?;
        let (n, _, h, w) = first.value().dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        for x in xs {
            let (xn, xc, xh, xw) = x.value().dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(shape_err!(
                    "concat operands disagree: {:?} vs {:?}",
                    first.shape(),
                    x.shape()
                ));
            }
            channels.push(xc);
        }
        let total: usize = channels.iter().sum();
        let shape = vec![n, total, h, w];
        self.note(OpKind::Concat, xs, &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (x, &c) in xs.iter().zip(&channels) {
                data.extend_from_slice(&x.value().data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let y = Tensor::from_parts(shape, data);
        Ok(self.record(
            y,
            xs,
            Box::new(move |g, need| {
                let mut offset = 0;
                let mut out = Vec::with_capacity(channels.len());
                for (&c, &nd) in channels.iter().zip(need) {
                    out.push(if nd {
                        Some(g.narrow_channels(offset, c)?)
                    } else {
                        None
                    });
                    offset += c;
                }
                Ok(out)
            }),
        ))
    }

    pub fn relu(&mut self, x: &Var) -> Result<Var> {
        let shape = x.shape().to_vec();
        self.note(OpKind::Relu, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let y = x.value().map(|v| v.max(0.0));
        let xv = x.value.clone();
        Ok(self.record(
            y,
            &[x],
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), d))])
            }),
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: &Var) -> Result<Var> {
        let shape = x.shape().to_vec();
        self.note(OpKind::Gelu, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let y = x.value().map(gelu);
        let xv = x.value.clone();
        Ok(self.record(
            y,
            &[x],
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, x)| g * gelu_grad(*x))
                    .collect();
                Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), d))])
            }),
        ))
    }

    /// Layer normalization across channels at every spatial position.
    pub fn layer_norm(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: Option<&Var>,
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _, _) = x.value().dims4()?;
        if gamma.shape() != [c] || beta.is_some_and(|b| b.shape() != [c]) {
            return Err(shape_err!("layer norm affine parameters must have {} entries", c));
        }
        let shape = x.shape().to_vec();
        let mut inputs = vec![x, gamma];
        inputs.extend(beta);
        self.note(OpKind::LayerNorm, &inputs, &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let (y, cache) =
            norm::layer_norm_channels(x.value(), gamma.value(), beta.map(|b| b.value()), eps);
        let gv = gamma.value.clone();
        Ok(self.record(
            y,
            &inputs,
            Box::new(move |g, need| {
                let (dx, dg, db) = norm::layer_norm_channels_backward(&shape, &gv, &cache, g);
                let mut v = vec![Some(dx), Some(dg)];
                if need.len() == 3 {
                    v.push(Some(db));
                }
                Ok(v)
            }),
        ))
    }

    /// Batch normalization. In training graphs batch statistics are used and
    /// running-stat updates are queued; otherwise running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _, _) = x.value().dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err!("batch norm affine parameters must have {} entries", c));
        }
        let shape = x.shape().to_vec();
        self.note(OpKind::BatchNorm, &[x, gamma, beta], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let gv = gamma.value.clone();
        if self.training {
            let (y, cache, mean, var) = norm::batch_norm_train(x.value(), gamma.value(), beta.value(), eps);
            let rm = self.store.value(running_mean);
            let rv = self.store.value(running_var);
            let blend = |old: &Tensor, new: &[f64]| {
                let d = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                    .collect();
                Tensor::from_parts(vec![c], d)
            };
            self.buffer_updates.push((running_mean, blend(rm, &mean)));
            self.buffer_updates.push((running_var, blend(rv, &var)));
            Ok(self.record(
                y,
                &[x, gamma, beta],
                Box::new(move |g, _| {
                    let (dx, dg, db) = norm::batch_norm_train_backward(&shape, &gv, &cache, g);
                    Ok(vec![Some(dx), Some(dg), Some(db)])
                }),
            ))
        } else {
            let (y, cache) = norm::batch_norm_eval(
                x.value(),
                gamma.value(),
                beta.value(),
                self.store.value(running_mean),
                self.store.value(running_var),
                eps,
            );
            Ok(self.record(
                y,
                &[x, gamma, beta],
                Box::new(move |g, _| {
                    let (dx, dg, db) = norm::batch_norm_eval_backward(&shape, &gv, &cache, g);
                    Ok(vec![Some(dx), Some(dg), Some(db)])
                }),
            ))
        }
    }

    /// `k×k` average pooling with stride `k`.
    pub fn avg_pool(&mut self, x: &Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = x.value().dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err!("pool size {} does not divide spatial size {}x{}", k, h, w));
        }
        let shape = vec![n, c, h / k, w / k];
        self.note(OpKind::AvgPool { kernel: k }, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let y = resample::avg_pool(x.value(), k);
        let in_shape = x.shape().to_vec();
        Ok(self.record(
            y,
            &[x],
            Box::new(move |g, _| Ok(vec![Some(resample::avg_pool_backward(&in_shape, k, g))])),
        ))
    }

    /// Mean over spatial positions, keeping 1×1 spatial dims.
    pub fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        let (n, c, h, w) = x.value().dims4()?;
        let shape = vec![n, c, 1, 1];
        self.note(OpKind::GlobalAvgPool, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let plane = h * w;
        let d = x
            .value()
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let in_shape = x.shape().to_vec();
        Ok(self.record(
            Tensor::from_parts(shape, d),
            &[x],
            Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(in_shape.iter().product());
                for v in g.data() {
                    dx.extend(std::iter::repeat(v / plane as f64).take(plane));
                }
                Ok(vec![Some(Tensor::from_parts(in_shape.clone(), dx))])
            }),
        ))
    }

    /// Repeats an (N, C, 1, 1) tensor over an `h×w` grid.
    pub fn broadcast_spatial(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, xh, xw) = x.value().dims4()?;
        if (xh, xw) != (1, 1) {
            return Err(shape_err!("broadcast expects 1x1 spatial input, got {}x{}", xh, xw));
        }
        let shape = vec![n, c, h, w];
        self.note(OpKind::Broadcast, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let plane = h * w;
        let mut d = Vec::with_capacity(n * c * plane);
        for v in x.value().data() {
            d.extend(std::iter::repeat(*v).take(plane));
        }
        Ok(self.record(
            Tensor::from_parts(shape, d),
            &[x],
            Box::new(move |g, _| {
                let s = g.data().chunks(plane).map(|p| p.iter().sum()).collect();
                Ok(vec![Some(Tensor::from_parts(vec![n, c, 1, 1], s))])
            }),
        ))
    }

    /// Bilinear resize with half-pixel centers (align-corners off).
    pub fn resize_bilinear(&mut self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = x.value().dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(shape_err!("cannot resize {}x{} to {}x{}", h, w, out_h, out_w));
        }
        let shape = vec![n, c, out_h, out_w];
        self.note(OpKind::ResizeBilinear, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let y = resample::resize_bilinear(x.value(), out_h, out_w);
        let in_shape = x.shape().to_vec();
        Ok(self.record(
            y,
            &[x],
            Box::new(move |g, _| Ok(vec![Some(resample::resize_bilinear_backward(&in_shape, g))])),
        ))
    }

    /// Nearest-neighbour resize; the gradient scatters back to the source pixel.
    pub fn resize_nearest(&mut self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = x.value().dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(shape_err!("cannot resize {}x{} to {}x{}", h, w, out_h, out_w));
        }
        let shape = vec![n, c, out_h, out_w];
        self.note(OpKind::ResizeNearest, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let y = resample::resize_nearest(x.value(), out_h, out_w);
        Ok(self.record(
            y,
            &[x],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n * c * h * w];
                for (pi, po) in dx.chunks_mut(h * w).zip(g.data().chunks(out_h * out_w)) {
                    for oy in 0..out_h {
                        let iy = (oy * h / out_h).min(h - 1);
                        for ox in 0..out_w {
                            let ix = (ox * w / out_w).min(w - 1);
                            pi[iy * w + ix] += po[oy * out_w + ox];
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))])
            }),
        ))
    }

    pub fn reshape(&mut self, x: &Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != x.value().numel() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", x.shape(), shape));
        }
        self.note(OpKind::Reshape, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let y = x.to_tensor().reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.record(
            y,
            &[x],
            Box::new(move |g, _| Ok(vec![Some(g.clone().reshape(in_shape.clone())?)])),
        ))
    }

    /// Swaps the last two axes of a 3-D tensor.
    pub fn transpose(&mut self, x: &Var) -> Result<Var> {
        let [b, m, n] = x.shape()[..] else {
            return Err(shape_err!("transpose expects a 3-D tensor, got {:?}", x.shape()));
        };
        let shape = vec![b, n, m];
        self.note(OpKind::Transpose, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let y = transpose3(x.value(), b, m, n);
        Ok(self.record(
            y,
            &[x],
            Box::new(move |g, _| Ok(vec![Some(transpose3(g, b, n, m))])),
        ))
    }

    /// Batched matrix product of (B, M, K) and (B, K, N).
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let ([ba, m, k], [bb, kb, n]) = (a.shape(), b.shape()) else {
            return Err(shape_err!(
                "matmul expects 3-D operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        };
        let (batch, m, k, n) = (*ba, *m, *k, *n);
        if *bb != batch || *kb != k {
            return Err(shape_err!(
                "matmul operand mismatch: {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let shape = vec![batch, m, n];
        self.note(OpKind::MatMul, &[a, b], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.value().data()[i * m * k..(i + 1) * m * k],
                Layout::row_major(k),
                &b.value().data()[i * k * n..(i + 1) * k * n],
                Layout::row_major(n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let y = self.round(Tensor::from_parts(shape, out));
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(
            y,
            &[a, b],
            Box::new(move |g, need| {
                let gd = g.data();
                let da = need[0].then(|| {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            Layout::row_major(n),
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            Layout::transposed(n),
                            0.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    Tensor::from_parts(vec![batch, m, k], da)
                });
                let db = need[1].then(|| {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        // dB = Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..(i + 1) * m * k],
                            Layout::transposed(k),
                            &gd[i * m * n..(i + 1) * m * n],
                            Layout::row_major(n),
                            0.0,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    Tensor::from_parts(vec![batch, k, n], db)
                });
                Ok(vec![da, db])
            }),
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: &Var) -> Result<Var> {
        let shape = x.shape().to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| shape_err!("softmax of a scalar-shaped tensor"))?;
        self.note(OpKind::Softmax, &[x], &shape);
        if self.meta {
            return Ok(self.meta_var(shape));
        }
        let y = Tensor::from_parts(shape.clone(), softmax_rows(x.value().data(), len));
        let yv = Rc::new(y.clone());
        Ok(self.record(
            y,
            &[x],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.numel()];
                for ((dr, gr), yr) in dx
                    .chunks_mut(len)
                    .zip(g.data().chunks(len))
                    .zip(yv.data().chunks(len))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                Ok(vec![Some(Tensor::from_parts(shape.clone(), dx))])
            }),
        ))
    }
}

pub(crate) fn softmax_rows(data: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (o, r) in out.chunks_mut(len).zip(data.chunks(len)) {
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (oi, ri) in o.iter_mut().zip(r) {
            *oi = (ri - max).exp();
            z += *oi;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn transpose3(x: &Tensor, b: usize, m: usize, n: usize) -> Tensor {
    let src = x.data();
    let mut out = vec![0.0; b * m * n];
    for i in 0..b {
        let s = &src[i * m * n..(i + 1) * m * n];
        let d = &mut out[i * m * n..(i + 1) * m * n];
        for r in 0..m {
            for c in 0..n {
                d[c * m + r] = s[r * n + c];
            }
        }
    }
    Tensor::from_parts(vec![b, n, m], out)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
