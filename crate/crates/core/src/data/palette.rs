//! Class palettes and RGB ↔ index mask conversion.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::raster::Raster;
use crate::error::{shape_err, Error, Result};

/// Color written for pixels whose index has no palette entry.
pub const UNLABELED_RGB: [u8; 3] = [255, 255, 255];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [u8; 3],
}

/// Ordered classes; class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelPalette {
    pub entries: Vec<PaletteEntry>,
}

impl Default for LabelPalette {
    fn default() -> Self {
        let e = |name: &str, rgb| PaletteEntry {
            name: name.to_string(),
            rgb,
        };
        Self {
            entries: vec![
                e("background", [0, 0, 0]),
                e("house", [255, 0, 0]),
                e("road", [0, 255, 0]),
            ],
        }
    }
}

impl LabelPalette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self> {
        let p = Self { entries };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() || self.entries.len() > 255 {
            return Err(Error::Config(format!(
                "palette needs 1 to 255 classes, got {}",
                self.entries.len()
            )));
        }
        let mut seen = HashMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(j) = seen.insert(e.rgb, i) {
                return Err(Error::Config(format!(
                    "palette classes {j} and {i} share color {:?}",
                    e.rgb
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }
}

/// Result of encoding an RGB mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedMask {
    pub mask: Raster<u8>,
    /// Pixels whose color is not in the palette; they hold the ignore index.
    pub unknown_pixels: usize,
}

pub fn encode_mask(rgb: &Raster<u8>, palette: &LabelPalette, ignore_index: u8) -> Result<EncodedMask> {
    if rgb.channels() != 3 {
        return Err(shape_err!("RGB mask must have 3 channels, got {}", rgb.channels()));
    }
    let lookup: HashMap<[u8; 3], u8> = palette
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.rgb, i as u8))
        .collect();
    let mut unknown = 0;
    let data = rgb
        .data()
        .chunks(3)
        .map(|px| {
            lookup.get(&[px[0], px[1], px[2]]).copied().unwrap_or_else(|| {
                unknown += 1;
                ignore_index
            })
        })
        .collect();
    Ok(EncodedMask {
        mask: Raster::new(rgb.height(), rgb.width(), 1, data)?,
        unknown_pixels: unknown,
    })
}

pub fn decode_mask(index: &Raster<u8>, palette: &LabelPalette) -> Result<Raster<u8>> {
    if index.channels() != 1 {
        return Err(shape_err!("index mask must have 1 channel, got {}", index.channels()));
    }
    let data = index
        .data()
        .iter()
        .flat_map(|&i| palette.entries.get(i as usize).map_or(UNLABELED_RGB, |e| e.rgb))
        .collect();
    Raster::new(index.height(), index.width(), 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_mask_encodes_to_zero() {
        let p = LabelPalette::default();
        let rgb = Raster::filled(3, 4, 3, 0u8);
        let e = encode_mask(&rgb, &p, 255).unwrap();
        assert!(e.mask.data().iter().all(|&v| v == 0));
        assert_eq!(e.unknown_pixels, 0);
    }

    #[test]
    fn off_palette_pixel_becomes_ignore() {
        let p = LabelPalette::default();
        let mut rgb = decode_mask(&Raster::new(2, 2, 1, vec![0, 1, 2, 1]).unwrap(), &p).unwrap();
        rgb.pixel_mut(1, 0).copy_from_slice(&[1, 2, 3]);
        let e = encode_mask(&rgb, &p, 255).unwrap();
        assert_eq!(e.mask.data(), &[0, 1, 255, 1]);
        assert_eq!(e.unknown_pixels, 1);
    }

    #[test]
    fn duplicate_colors_rejected() {
        let mut p = LabelPalette::default();
        p.entries[2].rgb = [255, 0, 0];
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn json_form_is_a_list() {
        let p = LabelPalette::default();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.starts_with("[{\"name\":\"background\",\"rgb\":[0,0,0]}"));
        assert_eq!(serde_json::from_str::<LabelPalette>(&s).unwrap(), p);
    }
}
