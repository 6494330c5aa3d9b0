//! Interleaved (H, W, C) rasters, fixed-size tiling and tile stitching.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{}x{}x{} raster needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// The `h×w` window at (y0, x0); positions outside the raster take `pad`.
    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize, pad: T) -> Raster<T> {
        let c = self.channels;
        let mut out = Raster::filled(h, w, c, pad);
        let rows = self.height.saturating_sub(y0).min(h);
        let cols = self.width.saturating_sub(x0).min(w);
        for dy in 0..rows {
            let src = ((y0 + dy) * self.width + x0) * c;
            let dst = dy * w * c;
            out.data[dst..dst + cols * c].copy_from_slice(&self.data[src..src + cols * c]);
        }
        out
    }

    pub fn flip_horizontal(&self) -> Raster<T> {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(y, x).copy_from_slice(self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Raster<T> {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(y, x).copy_from_slice(self.pixel(self.height - 1 - y, x));
            }
        }
        out
    }
}

impl Raster<f64> {
    /// Per-pixel index of the largest channel; ties go to the lower index.
    pub fn argmax(&self) -> Raster<u8> {
        let data = self
            .data
            .chunks(self.channels)
            .map(|px| {
                let mut best = 0;
                for (i, v) in px.iter().enumerate().skip(1) {
                    if *v > px[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingSpec {
    pub tile_size: usize,
    pub overlap: usize,
    pub pad_value: u8,
    pub mask_pad_label: u8,
}

impl Default for TilingSpec {
    fn default() -> Self {
        Self {
            tile_size: 512,
            overlap: 0,
            pad_value: 0,
            mask_pad_label: 255,
        }
    }
}

impl TilingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::Config("tile_size must be > 0".into()));
        }
        if self.overlap >= self.tile_size {
            return Err(Error::Config(format!(
                "overlap {} must be smaller than tile_size {}",
                self.overlap, self.tile_size
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.tile_size - self.overlap
    }
}

/// Tile origins along one axis: `1 + ceil(max(len − tile, 0) / stride)` of them.
pub fn tile_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let extra = len.saturating_sub(tile);
    let count = 1 + extra.div_ceil(stride);
    (0..count).map(|i| i * stride).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile<T> {
    /// (row, column) of the tile's top-left pixel in the source raster.
    pub origin: (usize, usize),
    pub raster: Raster<T>,
}

/// Row-major tiling; remainders past the right/bottom edge are padded.
pub fn tile_raster<T: Copy>(r: &Raster<T>, spec: &TilingSpec, pad: T) -> Result<Vec<Tile<T>>> {
    spec.validate()?;
    if r.height == 0 || r.width == 0 {
        return Err(Error::Data("cannot tile an empty image".into()));
    }
    let t = spec.tile_size;
    let mut tiles = Vec::new();
    for &y in &tile_origins(r.height, t, spec.stride()) {
        for &x in &tile_origins(r.width, t, spec.stride()) {
            tiles.push(Tile {
                origin: (y, x),
                raster: r.window(y, x, t, t, pad),
            });
        }
    }
    Ok(tiles)
}

pub fn tile_image(image: &Raster<u8>, spec: &TilingSpec) -> Result<Vec<Tile<u8>>> {
    tile_raster(image, spec, spec.pad_value)
}

pub fn tile_mask(mask: &Raster<u8>, spec: &TilingSpec) -> Result<Vec<Tile<u8>>> {
    tile_raster(mask, spec, spec.mask_pad_label)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Blend {
    /// Each pixel comes from the covering tile whose edge is farthest away.
    CropCenter,
    /// Each pixel is the mean over covering tiles.
    #[default]
    Average,
}

fn edge_margin(dy: usize, dx: usize, h: usize, w: usize) -> usize {
    dy.min(h - 1 - dy).min(dx).min(w - 1 - dx)
}

/// Bounding box (y0, x0, y1, x1), exclusive end, of pixels no tile covers.
fn coverage_gap(covered: &[bool], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut gap: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in covered.iter().enumerate().filter(|(_, c)| !**c) {
        let (y, x) = (i / width, i % width);
        gap = Some(match gap {
            None => (y, x, y + 1, x + 1),
            Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
        });
    }
    gap
}

fn gap_error(gap: (usize, usize, usize, usize)) -> Error {
    Error::Data(format!(
        "tiles leave rows {}..{}, columns {}..{} uncovered",
        gap.0, gap.2, gap.1, gap.3
    ))
}

/// Reassembles per-tile scores into a `height×width` raster.
pub fn stitch_tiles(tiles: &[Tile<f64>], size: (usize, usize), blend: Blend) -> Result<Raster<f64>> {
    let (height, width) = size;
    let channels = tiles
        .first()
        .map(|t| t.raster.channels)
        .ok_or_else(|| Error::Data("no tiles to stitch".into()))?;
    let mut out = Raster::filled(height, width, channels, 0.0);
    let mut weight = vec![0usize; height * width];
    let mut best_margin = vec![None::<usize>; height * width];
    for tile in tiles {
        let r = &tile.raster;
        if r.channels != channels {
            return Err(shape_err!("tiles disagree on channel count"));
        }
        let (oy, ox) = tile.origin;
        for dy in 0..r.height.min(height.saturating_sub(oy)) {
            for dx in 0..r.width.min(width.saturating_sub(ox)) {
                let i = (oy + dy) * width + ox + dx;
                let src = r.pixel(dy, dx);
                match blend {
                    Blend::Average => {
                        for (o, s) in out.pixel_mut(oy + dy, ox + dx).iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                    Blend::CropCenter => {
                        let m = edge_margin(dy, dx, r.height, r.width);
                        if best_margin[i].is_none_or(|b| m > b) {
                            best_margin[i] = Some(m);
                            out.pixel_mut(oy + dy, ox + dx).copy_from_slice(src);
                        }
                    }
                }
                weight[i] += 1;
            }
        }
    }
    let covered: Vec<bool> = weight.iter().map(|&w| w > 0).collect();
    if let Some(gap) = coverage_gap(&covered, width) {
        return Err(gap_error(gap));
    }
    if blend == Blend::Average {
        for (px, &w) in out.data.chunks_mut(channels).zip(&weight) {
            let inv = 1.0 / w as f64;
            px.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(out)
}

/// Reassembles class-index tiles using the crop-center rule.
pub fn stitch_labels(tiles: &[Tile<u8>], size: (usize, usize)) -> Result<Raster<u8>> {
    let (height, width) = size;
    let mut out = Raster::filled(height, width, 1, 0u8);
    let mut best_margin = vec![None::<usize>; height * width];
    for tile in tiles {
        let r = &tile.raster;
        let (oy, ox) = tile.origin;
        for dy in 0..r.height.min(height.saturating_sub(oy)) {
            for dx in 0..r.width.min(width.saturating_sub(ox)) {
                let i = (oy + dy) * width + ox + dx;
                let m = edge_margin(dy, dx, r.height, r.width);
                if best_margin[i].is_none_or(|b| m > b) {
                    best_margin[i] = Some(m);
                    out.data[i] = r.pixel(dy, dx)[0];
                }
            }
        }
    }
    let covered: Vec<bool> = best_margin.iter().map(Option::is_some).collect();
    if let Some(gap) = coverage_gap(&covered, width) {
        return Err(gap_error(gap));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Raster<u8> {
        Raster::new(h, w, c, (0..h * w * c).map(|i| (i * 7 % 251) as u8).collect()).unwrap()
    }

    fn spec(tile: usize, overlap: usize) -> TilingSpec {
        TilingSpec {
            tile_size: tile,
            overlap,
            pad_value: 9,
            mask_pad_label: 255,
        }
    }

    #[test]
    fn grid_origins() {
        let tiles = tile_image(&ramp(1024, 1024, 3), &spec(512, 0)).unwrap();
        let origins: Vec<_> = tiles.iter().map(|t| t.origin).collect();
        assert_eq!(origins, vec![(0, 0), (0, 512), (512, 0), (512, 512)]);
    }

    #[test]
    fn exact_size_is_single_identical_tile() {
        let img = ramp(64, 64, 3);
        let tiles = tile_image(&img, &spec(64, 0)).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].raster, img);
    }

    #[test]
    fn remainder_tiles_are_padded_and_cover_every_pixel() {
        let img = ramp(70, 70, 3);
        let s = spec(51, 0);
        let tiles = tile_image(&img, &s).unwrap();
        assert_eq!(tiles.len(), 4);
        let mut seen = vec![false; 70 * 70];
        for t in &tiles {
            for dy in 0..51 {
                for dx in 0..51 {
                    let (y, x) = (t.origin.0 + dy, t.origin.1 + dx);
                    let px = t.raster.pixel(dy, dx);
                    if y < 70 && x < 70 {
                        assert_eq!(px, img.pixel(y, x));
                        seen[y * 70 + x] = true;
                    } else {
                        assert!(px.iter().all(|&v| v == s.pad_value));
                    }
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn empty_image_and_bad_spec_are_rejected() {
        let empty: Raster<u8> = Raster::new(0, 5, 3, vec![]).unwrap();
        assert!(matches!(tile_image(&empty, &spec(4, 0)), Err(Error::Data(_))));
        assert!(spec(4, 4).validate().is_err());
    }

    #[test]
    fn label_round_trip_without_overlap() {
        let mask = Raster::new(37, 23, 1, (0..37 * 23).map(|i| (i % 3) as u8).collect()).unwrap();
        let tiles = tile_mask(&mask, &spec(16, 0)).unwrap();
        assert_eq!(stitch_labels(&tiles, (37, 23)).unwrap(), mask);
    }

    #[test]
    fn identical_overlaps_agree_across_blends() {
        let scores: Raster<f64> =
            Raster::new(10, 12, 2, (0..240).map(|i| (i as f64).sin()).collect()).unwrap();
        let tiles: Vec<Tile<f64>> = tile_raster(&scores, &spec(8, 4), 0.0).unwrap();
        let a = stitch_tiles(&tiles, (10, 12), Blend::Average).unwrap();
        let c = stitch_tiles(&tiles, (10, 12), Blend::CropCenter).unwrap();
        for ((x, y), z) in a.data().iter().zip(c.data()).zip(scores.data()) {
            assert!((x - z).abs() < 1e-12 && (y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn conflicting_overlap_average_matches_brute_force() {
        let t0 = Tile {
            origin: (0, 0),
            raster: Raster::filled(4, 4, 1, 1.0),
        };
        let t1 = Tile {
            origin: (0, 2),
            raster: Raster::filled(4, 4, 1, 3.0),
        };
        let out = stitch_tiles(&[t0, t1], (4, 6), Blend::Average).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let expect = match x {
                    0 | 1 => 1.0,
                    2 | 3 => 2.0,
                    _ => 3.0,
                };
                assert_eq!(out.pixel(y, x)[0], expect);
            }
        }
    }

    #[test]
    fn coverage_gap_names_rectangle() {
        let t = Tile {
            origin: (0, 0),
            raster: Raster::filled(4, 4, 1, 0.0),
        };
        let err = stitch_tiles(&[t], (4, 7), Blend::Average).unwrap_err().to_string();
        assert!(err.contains("rows 0..4, columns 4..7"), "{err}");
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let r = Raster::new(1, 2, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.argmax().data(), &[0, 1]);
    }
}
