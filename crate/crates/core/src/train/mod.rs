//! Training, evaluation and whole-raster prediction.

pub mod ablation;
pub mod optim;
pub mod schedule;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_table, run_ablation, AblationRow, ABLATION_ROWS};
pub use optim::{apply_buffer_updates, AdamW, AdamWConfig};
pub use schedule::{Monitor, Plateau, PlateauConfig};

use crate::checkpoint::save_checkpoint;
use crate::data::{
    decode_mask, load_split, make_batch, batch_indices, read_rgb, stitch_tiles, tile_image,
    write_png, Blend, DatasetManifest, LabelPalette, Normalization, Raster, Sample, Split, Tile,
    TilingSpec,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{combined_loss, FocalParams, DEFAULT_AUX_WEIGHT, DEFAULT_IGNORE_INDEX};
use crate::metrics::{ConfusionMatrix, MeanPolicy, MetricReport};
use crate::model::Model;
use crate::nn::seeded_rng;
use crate::tensor::{Labels, Tensor};

/// How rasters become model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub tiling: TilingSpec,
    pub normalization: Normalization,
    pub ignore_index: u8,
    /// Random horizontal/vertical flips of training samples.
    pub flips: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tiling: TilingSpec::default(),
            normalization: Normalization::default(),
            ignore_index: DEFAULT_IGNORE_INDEX,
            flips: false,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.tiling.validate()?;
        self.normalization.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub scheduler: PlateauConfig,
    /// Rounds convolution and matmul outputs to 32 bits during training.
    pub mixed_precision: bool,
    pub seed: u64,
    pub aux_weight: f64,
    pub focal: FocalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            batch_size: 8,
            weight_decay: 1e-4,
            scheduler: PlateauConfig::default(),
            mixed_precision: false,
            seed: 0,
            aux_weight: DEFAULT_AUX_WEIGHT,
            focal: FocalParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.aux_weight >= 0.0) {
            return Err(Error::Config("weight_decay and aux_weight must be >= 0".into()));
        }
        self.scheduler.validate()?;
        self.focal.validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_oa: f64,
    pub val_mean_f1: f64,
    pub val_miou: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_OA,val_meanF1,val_mIoU";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.val_oa, self.val_mean_f1, self.val_miou
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_miou: f64,
}

/// Files written by a training run.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Per-epoch hook; receives each finished log row.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochLog);

/// Trains on in-memory samples. With `out` set, appends the CSV log and
/// writes `best.ckpt` (highest val mIoU) and `last.ckpt` there.
pub fn train_on(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    data: &DataConfig,
    cfg: &TrainConfig,
    out: Option<&TrainOutputs>,
    mut hook: Option<EpochHook<'_>>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    data.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train and val splits must be nonempty".into()));
    }
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        if !o.log().exists() {
            append_line(&o.log(), LOG_HEADER)?;
        }
    }
    // The coarse head only exists with OCR; without it the auxiliary term
    // would just rescale the main loss.
    let aux_weight = if model.config.decoder.use_ocr { cfg.aux_weight } else { 0.0 };
    let ignore = Some(data.ignore_index);
    let mut opt = AdamW::new(cfg.optimizer())?;
    let mut sched = Plateau::new(cfg.scheduler, cfg.lr)?;
    let mut order_rng = seeded_rng(cfg.seed.wrapping_add(1));
    let mut flip_rng = seeded_rng(cfg.seed.wrapping_add(2));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;

    for epoch in 0..cfg.epochs {
        let lr = sched.lr();
        let mut loss_sum = 0.0;
        for (b, idx) in batch_indices(train.len(), cfg.batch_size, Some(&mut order_rng))
            .into_iter()
            .enumerate()
        {
            let flips = data.flips.then_some(&mut flip_rng);
            let (x, y) = make_batch(train, &idx, &data.normalization, flips)?;
            let (value, grads, updates) = {
                let mut g = Graph::training(&model.params).with_reduced_precision(cfg.mixed_precision);
                let xv = g.input(x);
                let logits = model.forward(&mut g, &xv)?;
                let loss = combined_loss(&mut g, &logits, &y, cfg.focal, aux_weight, ignore)?;
                let value = loss.value().data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b, value });
                }
                (value, g.backward(&loss)?, g.take_buffer_updates())
            };
            opt.step(&mut model.params, &grads, lr)?;
            apply_buffer_updates(&mut model.params, updates)?;
            loss_sum += value * idx.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;

        let cm = confusion_on(model, val, data, cfg.batch_size)?;
        let report = cm.report(&[], MeanPolicy::IncludeAsZero)?;
        let row = EpochLog {
            epoch,
            lr,
            train_loss,
            val_oa: report.overall_accuracy,
            val_mean_f1: report.mean_f1,
            val_miou: report.mean_iou,
        };
        sched.observe(match cfg.scheduler.monitor {
            Monitor::Miou => row.val_miou,
            Monitor::Loss => row.train_loss,
        });
        let improved = best.is_none_or(|(_, m)| row.val_miou > m);
        if improved {
            best = Some((epoch, row.val_miou));
        }
        if let Some(o) = out {
            append_line(&o.log(), &row.csv_line())?;
            save_checkpoint(model, &o.last())?;
            if improved {
                save_checkpoint(model, &o.best())?;
            }
        }
        if let Some(h) = hook.as_deref_mut() {
            h(&row);
        }
        epochs.push(row);
    }
    let (best_epoch, best_miou) = best.expect("at least one epoch ran");
    Ok(TrainSummary {
        epochs,
        best_epoch,
        best_miou,
    })
}

fn check_classes(model: &Model, palette: &LabelPalette) -> Result<()> {
    if model.num_classes() != palette.len() {
        return Err(Error::Config(format!(
            "model predicts {} classes but the manifest palette has {}",
            model.num_classes(),
            palette.len()
        )));
    }
    Ok(())
}

/// Loads the manifest's train and val splits and trains on them.
pub fn train(
    model: &mut Model,
    manifest: &DatasetManifest,
    data: &DataConfig,
    cfg: &TrainConfig,
    out: Option<&TrainOutputs>,
) -> Result<TrainSummary> {
    check_classes(model, &manifest.palette)?;
    let tr = load_split(manifest, Split::Train, &data.tiling, data.ignore_index)?;
    let va = load_split(manifest, Split::Val, &data.tiling, data.ignore_index)?;
    train_on(model, &tr.samples, &va.samples, data, cfg, out, None)
}

/// Accumulates a confusion matrix with an arbitrary predictor, which gets
/// the sample indices and the normalized image batch.
pub fn confusion_with(
    samples: &[Sample],
    data: &DataConfig,
    batch_size: usize,
    num_classes: usize,
    mut predict: impl FnMut(&[usize], &Tensor) -> Result<Labels>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for idx in batch_indices(samples.len(), batch_size, None) {
        let (x, y) = make_batch(samples, &idx, &data.normalization, None)?;
        let pred = predict(&idx, &x)?;
        cm.update(&pred, &y, Some(data.ignore_index))?;
    }
    Ok(cm)
}

/// Refined-logit class map for a normalized batch, in inference mode.
pub fn predict_batch(model: &Model, images: &Tensor) -> Result<Labels> {
    let mut g = Graph::inference(&model.params);
    let x = g.input(images.clone());
    let out = model.forward(&mut g, &x)?;
    out.refined_logits.value().argmax_channels()
}

pub fn confusion_on(
    model: &Model,
    samples: &[Sample],
    data: &DataConfig,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    confusion_with(samples, data, batch_size, model.num_classes(), |_, x| predict_batch(model, x))
}

pub fn evaluate(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    data: &DataConfig,
    batch_size: usize,
) -> Result<MetricReport> {
    check_classes(model, &manifest.palette)?;
    let s = load_split(manifest, split, &data.tiling, data.ignore_index)?;
    confusion_on(model, &s.samples, data, batch_size)?
        .report(&manifest.palette.names(), MeanPolicy::IncludeAsZero)
}

/// Per-pixel softmax of one batch item, as an HWC raster.
fn softmax_raster(logits: &Tensor, n: usize) -> Result<Raster<f64>> {
    let (_, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let base = n * c * plane;
    let src = logits.data();
    let mut data = vec![0.0; plane * c];
    for p in 0..plane {
        let px = &mut data[p * c..(p + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for (k, v) in px.iter_mut().enumerate() {
            *v = src[base + k * plane + p];
            max = max.max(*v);
        }
        let mut sum = 0.0;
        for v in px.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        px.iter_mut().for_each(|v| *v /= sum);
    }
    Raster::new(h, w, c, data)
}

/// Class probabilities for a whole image: tile, run each tile alone,
/// softmax, then stitch with `blend`.
pub fn predict_probabilities(
    model: &Model,
    image: &Raster<u8>,
    tiling: &TilingSpec,
    norm: &Normalization,
    blend: Blend,
) -> Result<Raster<f64>> {
    let tiles = tile_image(image, tiling)?;
    let mut scored = Vec::with_capacity(tiles.len());
    for t in tiles {
        let x = crate::data::images_to_tensor(&[&t.raster], norm)?;
        let mut g = Graph::inference(&model.params);
        let xv = g.input(x);
        let out = model.forward(&mut g, &xv)?;
        scored.push(Tile {
            origin: t.origin,
            raster: softmax_raster(out.refined_logits.value(), 0)?,
        });
    }
    stitch_tiles(&scored, (image.height(), image.width()), blend)
}

pub fn predict_mask(
    model: &Model,
    image: &Raster<u8>,
    tiling: &TilingSpec,
    norm: &Normalization,
    blend: Blend,
) -> Result<Raster<u8>> {
    Ok(predict_probabilities(model, image, tiling, norm, blend)?.argmax())
}

/// Tiling used by `predict` unless overridden.
pub fn default_predict_tiling() -> TilingSpec {
    TilingSpec {
        overlap: 64,
        ..TilingSpec::default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionFiles {
    pub rgb: PathBuf,
    pub index: PathBuf,
}

/// Writes `<stem>_rgb.png` (palette colors) and `<stem>_index.png` into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn predict_file(
    model: &Model,
    image_path: &Path,
    out_dir: &Path,
    palette: &LabelPalette,
    tiling: &TilingSpec,
    norm: &Normalization,
    blend: Blend,
) -> Result<PredictionFiles> {
    check_classes(model, palette)?;
    let image = read_rgb(image_path)?;
    let mask = predict_mask(model, &image, tiling, norm, blend)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "prediction".into());
    let files = PredictionFiles {
        rgb: out_dir.join(format!("{stem}_rgb.png")),
        index: out_dir.join(format!("{stem}_index.png")),
    };
    write_png(&files.index, &mask)?;
    write_png(&files.rgb, &decode_mask(&mask, palette)?)?;
    Ok(files)
}
