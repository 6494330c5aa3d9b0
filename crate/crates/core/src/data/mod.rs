//! Raster ingestion: PNG I/O, tiling, palettes, manifests and batching.

pub mod manifest;
pub mod palette;
pub mod raster;
pub mod synthetic;

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{DatasetManifest, ManifestRecord, Split};
pub use palette::{decode_mask, encode_mask, EncodedMask, LabelPalette, PaletteEntry};
pub use raster::{
    stitch_labels, stitch_tiles, tile_image, tile_mask, tile_origins, tile_raster, Blend, Raster,
    Tile, TilingSpec,
};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Labels, Tensor};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb(path: &Path) -> Result<Raster<u8>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Raster::new(h as usize, w as usize, 3, img.into_raw())
}

/// Reads a mask as class indices. Single-channel images hold indices
/// directly; color images are encoded through `palette`.
pub fn read_mask(path: &Path, palette: &LabelPalette, ignore_index: u8) -> Result<EncodedMask> {
    let img = open(path)?;
    if img.color().channel_count() <= 2 {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        return Ok(EncodedMask {
            mask: Raster::new(h as usize, w as usize, 1, g.into_raw())?,
            unknown_pixels: 0,
        });
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    encode_mask(&Raster::new(h as usize, w as usize, 3, rgb.into_raw())?, palette, ignore_index)
}

pub fn write_png(path: &Path, r: &Raster<u8>) -> Result<()> {
    let (w, h) = (r.width() as u32, r.height() as u32);
    let data = r.data().to_vec();
    let result = match r.channels() {
        1 => GrayImage::from_raw(w, h, data).map(|i| i.save(path)),
        3 => RgbImage::from_raw(w, h, data).map(|i| i.save(path)),
        c => return Err(shape_err!("cannot write a {}-channel PNG", c)),
    };
    result
        .expect("raster length matches its dimensions")
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Per-channel `(x / 255 − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization std must be > 0".into()));
        }
        Ok(())
    }
}

/// Stacks RGB rasters of one size into an (N, 3, H, W) tensor.
pub fn images_to_tensor(images: &[&Raster<u8>], norm: &Normalization) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| shape_err!("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let plane = h * w;
    let mut data = vec![0.0; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if (img.height(), img.width(), img.channels()) != (h, w, 3) {
            return Err(shape_err!(
                "batch mixes {}x{}x3 with {}x{}x{}",
                h,
                w,
                img.height(),
                img.width(),
                img.channels()
            ));
        }
        for (p, px) in img.data().chunks(3).enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * plane + p] = (px[c] as f64 / 255.0 - norm.mean[c]) / norm.std[c];
            }
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

pub fn masks_to_labels(masks: &[&Raster<u8>]) -> Result<Labels> {
    let first = masks.first().ok_or_else(|| shape_err!("empty mask batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if (m.height(), m.width(), m.channels()) != (h, w, 1) {
            return Err(shape_err!("mask batch mixes sizes"));
        }
        data.extend_from_slice(m.data());
    }
    Labels::new([masks.len(), h, w], data)
}

/// One image tile and its index mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Raster<u8>,
    pub mask: Raster<u8>,
}

/// All tiles of one split, in manifest order.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub samples: Vec<Sample>,
    /// Mask pixels whose color was not in the palette.
    pub unknown_pixels: usize,
}

pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    tiling: &TilingSpec,
    ignore_index: u8,
) -> Result<SplitData> {
    let mut samples = Vec::new();
    let mut unknown = 0;
    for r in manifest.records(split) {
        let image_path = manifest.resolve(&r.image);
        let mask_path = manifest.resolve(&r.mask);
        let image = read_rgb(&image_path)?;
        let enc = read_mask(&mask_path, &manifest.palette, ignore_index)?;
        unknown += enc.unknown_pixels;
        if (image.height(), image.width()) != (enc.mask.height(), enc.mask.width()) {
            return Err(Error::Data(format!(
                "{} is {}x{} but its mask is {}x{}",
                image_path.display(),
                image.height(),
                image.width(),
                enc.mask.height(),
                enc.mask.width()
            )));
        }
        let images = tile_image(&image, tiling)?;
        let masks = tile_mask(&enc.mask, tiling)?;
        samples.extend(images.into_iter().zip(masks).map(|(i, m)| Sample {
            image: i.raster,
            mask: m.raster,
        }));
    }
    if samples.is_empty() {
        return Err(Error::Config(format!("split `{split}` is empty")));
    }
    Ok(SplitData {
        samples,
        unknown_pixels: unknown,
    })
}

/// Index batches over `n` samples, shuffled when `rng` is given.
pub fn batch_indices(n: usize, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Builds a batch; when `flips` is given each sample is flipped at random.
pub fn make_batch(
    samples: &[Sample],
    indices: &[usize],
    norm: &Normalization,
    mut flips: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, Labels)> {
    let mut images = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &samples[i];
        let (mut img, mut mask) = (s.image.clone(), s.mask.clone());
        if let Some(rng) = flips.as_deref_mut() {
            if rng.gen_bool(0.5) {
                img = img.flip_horizontal();
                mask = mask.flip_horizontal();
            }
            if rng.gen_bool(0.5) {
                img = img.flip_vertical();
                mask = mask.flip_vertical();
            }
        }
        images.push(img);
        masks.push(mask);
    }
    let x = images_to_tensor(&images.iter().collect::<Vec<_>>(), norm)?;
    let y = masks_to_labels(&masks.iter().collect::<Vec<_>>())?;
    Ok((x, y))
}
