//! Synthetic aerial-like tiles: rectangles as houses, straight bands as roads.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::data::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::data::palette::{decode_mask, LabelPalette};
use crate::data::raster::Raster;
use crate::data::{write_png, Sample};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

pub const BACKGROUND: u8 = 0;
pub const HOUSE: u8 = 1;
pub const ROAD: u8 = 2;

const BASE_COLOR: [[f64; 3]; 3] = [[70.0, 110.0, 60.0], [200.0, 90.0, 70.0], [140.0, 140.0, 150.0]];

/// One `size×size` tile with one or two roads and a few houses; pixel
/// colors are class colors plus uniform noise of ±`noise`.
pub fn shape_tile(size: usize, noise: f64, rng: &mut impl Rng) -> Sample {
    let mut mask = Raster::filled(size, size, 1, BACKGROUND);
    let roads = rng.gen_range(1..=2);
    for _ in 0..roads {
        let width = (size / 8).max(2);
        let at = rng.gen_range(0..size - width);
        let vertical = rng.gen_bool(0.5);
        for a in at..at + width {
            for b in 0..size {
                let (y, x) = if vertical { (b, a) } else { (a, b) };
                mask.pixel_mut(y, x)[0] = ROAD;
            }
        }
    }
    let houses = rng.gen_range(2..=4);
    for _ in 0..houses {
        let h = rng.gen_range(size / 8..=size / 4).max(2);
        let w = rng.gen_range(size / 8..=size / 4).max(2);
        let y0 = rng.gen_range(0..size - h);
        let x0 = rng.gen_range(0..size - w);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                mask.pixel_mut(y, x)[0] = HOUSE;
            }
        }
    }
    let data = mask
        .data()
        .iter()
        .flat_map(|&c| {
            let base = BASE_COLOR[c as usize];
            base.map(|b| (b + rng.gen_range(-noise..=noise)).clamp(0.0, 255.0).round() as u8)
        })
        .collect();
    let image = Raster::new(size, size, 3, data).expect("size matches");
    Sample { image, mask }
}

/// `n` tiles from a generator seeded by `seed`.
pub fn shape_tiles(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| shape_tile(size, 12.0, &mut rng)).collect()
}

/// Writes `tiles` as PNG pairs plus `manifest.json` under `dir`; every
/// record is listed once per entry of `splits`, using distinct file names.
pub fn write_dataset(dir: &Path, tiles: &[Sample], splits: &[Split]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let palette = LabelPalette::default();
    let mut records = Vec::new();
    for split in splits {
        for (i, s) in tiles.iter().enumerate() {
            let image = PathBuf::from(format!("{split}_{i:03}.png"));
            let mask = PathBuf::from(format!("{split}_{i:03}_mask.png"));
            write_png(&dir.join(&image), &s.image)?;
            write_png(&dir.join(&mask), &decode_mask(&s.mask, &palette)?)?;
            records.push(ManifestRecord {
                image,
                mask,
                split: *split,
            });
        }
    }
    let manifest = DatasetManifest {
        palette,
        records,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
