//! Parameter, MAC, size and throughput accounting.
//!
//! MACs come from a shape-only trace of the forward pass. Convolutions and
//! matrix products count their multiply-accumulates; normalization,
//! activation, softmax and elementwise ops count one per output element;
//! bilinear resampling counts four taps per output element; pooling counts
//! one per input element it reads. Pure data movement (concat, reshape,
//! transpose, broadcast, nearest resize) is free.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, TraceEntry};
use crate::model::Model;
use crate::tensor::Tensor;

/// The unit the "FLOPs" column is read in.
pub const FLOPS_CONVENTION: &str = "macs";

pub fn count_params(model: &Model) -> usize {
    model.params.trainable_count()
}

/// Multiply-accumulate count of one traced op.
pub fn entry_macs(entry: &TraceEntry) -> Result<u64> {
    let out: u64 = entry.output.iter().product::<usize>() as u64;
    let macs = match &entry.kind {
        OpKind::Conv2d { .. } => {
            let w = &entry.inputs[1];
            // Each output element reads (C_in / groups)·k·k weights.
            out * (w[1] * w[2] * w[3]) as u64
        }
        OpKind::MatMul => {
            let a = &entry.inputs[0];
            out * a[2] as u64
        }
        OpKind::Add
        | OpKind::Scale
        | OpKind::Relu
        | OpKind::Gelu
        | OpKind::LayerNorm
        | OpKind::BatchNorm
        | OpKind::Softmax => out,
        OpKind::ResizeBilinear => 4 * out,
        OpKind::AvgPool { kernel } => out * (kernel * kernel) as u64,
        OpKind::GlobalAvgPool => entry.inputs[0].iter().product::<usize>() as u64,
        OpKind::Concat
        | OpKind::Reshape
        | OpKind::Transpose
        | OpKind::Broadcast
        | OpKind::ResizeNearest => 0,
        OpKind::Loss(name) => {
            return Err(Error::UnsupportedLayer(format!(
                "`{name}` is a training objective, not a model layer"
            )))
        }
    };
    Ok(macs)
}

pub fn macs_of_trace(trace: &[TraceEntry]) -> Result<u64> {
    trace.iter().map(entry_macs).sum()
}

pub fn count_macs(model: &Model, input_shape: [usize; 4]) -> Result<u64> {
    let mut g = Graph::tracing(&model.params);
    let x = g.meta_input(input_shape.to_vec());
    model.forward(&mut g, &x)?;
    macs_of_trace(&g.take_trace())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsMeasurement {
    pub fps: f64,
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
    pub hardware: String,
}

/// Median over `iters` timed forward passes of batch / elapsed seconds.
pub fn measure_fps(model: &Model, input_shape: [usize; 4], warmup: usize, iters: usize) -> Result<FpsMeasurement> {
    measure_fps_with(input_shape[0], warmup, iters, |x| {
        let mut g = Graph::inference(&model.params);
        let v = g.input(x.clone());
        model.forward(&mut g, &v).map(|_| ())
    }, input_shape)
}

/// Throughput of an arbitrary forward function on a zero-filled batch.
pub fn measure_fps_with(
    batch: usize,
    warmup: usize,
    iters: usize,
    mut forward: impl FnMut(&Tensor) -> Result<()>,
    input_shape: [usize; 4],
) -> Result<FpsMeasurement> {
    if iters == 0 {
        return Err(Error::Param("fps measurement needs iters >= 1".into()));
    }
    let x = Tensor::zeros(input_shape.to_vec());
    for _ in 0..warmup {
        forward(&x)?;
    }
    let mut rates = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        forward(&x)?;
        let secs = t.elapsed().as_secs_f64().max(1e-9);
        rates.push(batch as f64 / secs);
    }
    Ok(FpsMeasurement {
        fps: median(&mut rates),
        batch,
        warmup,
        iters,
        hardware: hardware_description(),
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {threads} thread(s); {}-{}; f64 single-threaded kernels",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub input_shape: [usize; 4],
    pub params: usize,
    pub macs: u64,
    pub flops_2x: u64,
    /// Which of `macs` / `flops_2x` the "FLOPs (G)" column shows.
    pub flops_convention: String,
    pub element_bytes: usize,
    pub size_bytes: usize,
    pub fps: Option<FpsMeasurement>,
}

impl EfficiencyReport {
    pub fn new(model: &Model, input_shape: [usize; 4], element_bytes: usize) -> Result<Self> {
        let params = count_params(model);
        let macs = count_macs(model, input_shape)?;
        Ok(Self {
            input_shape,
            params,
            macs,
            flops_2x: 2 * macs,
            flops_convention: FLOPS_CONVENTION.to_string(),
            element_bytes,
            size_bytes: params * element_bytes,
            fps: None,
        })
    }

    pub fn with_fps(mut self, fps: FpsMeasurement) -> Self {
        self.fps = Some(fps);
        self
    }

    /// The value shown in the FLOPs column.
    pub fn reported_flops(&self) -> u64 {
        if self.flops_convention == "flops_2x" {
            self.flops_2x
        } else {
            self.macs
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned table: Params (M), Size (MB), FLOPs (G), FPS.
    pub fn to_table(&self, label: &str) -> String {
        let fps = self
            .fps
            .as_ref()
            .map_or_else(|| "-".to_string(), |f| format!("{:.2}", f.fps));
        let header = format!(
            "{:<12} {:>10} {:>10} {:>10} {:>10}",
            "Model", "Params (M)", "Size (MB)", "FLOPs (G)", "FPS"
        );
        let row = format!(
            "{:<12} {:>10.2} {:>10.3} {:>10.2} {:>10}",
            label,
            self.params as f64 / 1e6,
            self.size_bytes as f64 / 1e6,
            self.reported_flops() as f64 / 1e9,
            fps
        );
        format!("{header}\n{row}\n")
    }
}
