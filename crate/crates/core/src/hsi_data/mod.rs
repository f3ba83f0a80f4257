//! Hyperspectral cubes, label maps and patch samples.

mod augment;
mod container;
mod patch;
mod split;
mod synth;

pub use augment::{augment_target, bilinear_resize, center_crop};
pub use container::{decode_cube, encode_cube, load_cube, save_cube, MAGIC, VERSION};
pub use patch::{detect_boundary, extract_all, extract_patch, reflect_index};
pub use split::{split_few_shot, SplitSpec};
pub use synth::{synth_dataset, SynthSpec};

use crate::error::{Error, LoadError, Result};

/// Raster hypercube stored in `(row, col, band)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    width: usize,
    height: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(width: usize, height: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::Argument(format!(
                "empty cube {width}x{height}x{bands}"
            )));
        }
        if data.len() != width * height * bands {
            return Err(Error::shape(format!(
                "cube {width}x{height}x{bands} needs {} values, got {}",
                width * height * bands,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LoadError::NonFinite(i).into());
        }
        Ok(Self {
            width,
            height,
            bands,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Spectral vector of one pixel.
    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.data[start..start + self.bands]
    }
}

/// Per-pixel class ids; 0 marks unlabelled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(LoadError::DimensionMismatch {
                width,
                height,
                found: labels.len(),
            }
            .into());
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Sorted ids of classes that occur at least once.
    pub fn present_classes(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    /// Classes in `1..=max_id` that never occur.
    pub fn absent_classes(&self) -> Vec<u16> {
        let present = self.present_classes();
        let max = present.last().copied().unwrap_or(0);
        (1..=max)
            .filter(|c| present.binary_search(c).is_err())
            .collect()
    }
}

/// Checks that a cube and label map describe the same raster.
pub fn check_pair(cube: &HsiCube, labels: &LabelMap) -> Result<()> {
    if cube.width != labels.width || cube.height != labels.height {
        return Err(LoadError::DimensionMismatch {
            width: cube.width,
            height: cube.height,
            found: labels.labels.len(),
        }
        .into());
    }
    Ok(())
}

/// A square `size×size` window around one labelled pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `(row, col, channel)` order, `size·size·channels` values.
    pub pixels: Vec<f64>,
    pub size: usize,
    pub channels: usize,
    pub label: u16,
    pub center: (usize, usize),
    pub is_boundary: bool,
}

impl PatchSample {
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.size + col) * self.channels;
        &self.pixels[start..start + self.channels]
    }
}
