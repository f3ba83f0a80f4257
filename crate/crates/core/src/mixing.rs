//! Rectangular region pasting between query patches and the label weights
//! that go with it.
//!
//! In CutMix mode the weights are the kept and pasted area fractions. In
//! TransMix mode they are the attention mass each source patch places on the
//! pixels it contributes, normalised to sum to one.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hsi_data::PatchSample;
use crate::model::AttentionMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixMode {
    TransMix,
    CutMix,
    None,
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transmix" => Ok(MixMode::TransMix),
            "cutmix" => Ok(MixMode::CutMix),
            "none" => Ok(MixMode::None),
            other => Err(Error::Config(format!(
                "unknown mix mode {other:?} (transmix, cutmix, none)"
            ))),
        }
    }
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixMode::TransMix => "transmix",
            MixMode::CutMix => "cutmix",
            MixMode::None => "none",
        })
    }
}

/// Binary keep-mask: 1 keeps the pixel of `x_i`, 0 takes it from `x_k`.
/// The zero region is the rectangle `box_`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    size: usize,
    grid: Vec<u8>,
    /// (top, left, height, width)
    box_: (usize, usize, usize, usize),
}

impl MixMask {
    pub fn from_box(
        size: usize,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height == 0
            || width == 0
            || top + height > size
            || left + width > size
            || height * width >= size * size
        {
            return Err(Error::Argument(format!(
                "box ({top}, {left}, {height}, {width}) is not a proper sub-rectangle of {size}x{size}"
            )));
        }
        let mut grid = vec![1u8; size * size];
        for r in top..top + height {
            for c in left..left + width {
                grid[r * size + c] = 0;
            }
        }
        Ok(Self {
            size,
            grid,
            box_: (top, left, height, width),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn keep(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.size + col] == 1
    }

    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        self.box_
    }

    pub fn zero_area(&self) -> usize {
        self.box_.2 * self.box_.3
    }
}

/// Area fraction `a ~ U(0, 1)`, box sides `round(size·√a)` clamped to
/// `[1, size − 1]`, top-left uniform over positions where the box fits.
pub fn sample_mask<R: Rng + ?Sized>(patch_size: usize, rng: &mut R) -> Result<MixMask> {
    if patch_size < 2 {
        return Err(Error::Mixing(format!(
            "patch size {patch_size} is too small to mix"
        )));
    }
    let a: f64 = rng.random();
    let side = |extent: usize| ((extent as f64 * a.sqrt()).round() as usize).clamp(1, extent - 1);
    let (h, w) = (side(patch_size), side(patch_size));
    let top = rng.random_range(0..=patch_size - h);
    let left = rng.random_range(0..=patch_size - w);
    MixMask::from_box(patch_size, top, left, h, w)
}

/// `M ⊙ x_i + (1 − M) ⊙ x_k`, copying whole spectral vectors.
pub fn apply_mix(x_i: &PatchSample, x_k: &PatchSample, mask: &MixMask) -> Result<Vec<f64>> {
    if x_i.size != x_k.size || x_i.channels != x_k.channels || x_i.size != mask.size {
        return Err(Error::shape(format!(
            "cannot mix {}x{}x{} with {}x{}x{} under a {}x{} mask",
            x_i.size,
            x_i.size,
            x_i.channels,
            x_k.size,
            x_k.size,
            x_k.channels,
            mask.size,
            mask.size
        )));
    }
    let ch = x_i.channels;
    let mut out = x_i.pixels.clone();
    let (top, left, h, w) = mask.box_;
    for r in top..top + h {
        let start = (r * x_i.size + left) * ch;
        let end = start + w * ch;
        out[start..end].copy_from_slice(&x_k.pixels[start..end]);
    }
    Ok(out)
}

/// Label weights for a mixed sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub lambda_1: f64,
    pub lambda_2: f64,
    /// Unnormalised masses before dividing by their sum.
    pub raw_1: f64,
    pub raw_2: f64,
}

pub fn cutmix_lambdas(mask: &MixMask) -> Lambdas {
    let total = (mask.size * mask.size) as f64;
    let ones = mask.grid.iter().filter(|&&m| m == 1).count();
    let lambda_1 = ones as f64 / total;
    let lambda_2 = (mask.grid.len() - ones) as f64 / total;
    Lambdas {
        lambda_1,
        lambda_2,
        raw_1: lambda_1,
        raw_2: lambda_2,
    }
}

pub fn transmix_lambdas(
    mask: &MixMask,
    att_i: &AttentionMap,
    att_k: &AttentionMap,
) -> Result<Lambdas> {
    if att_i.size() != mask.size || att_k.size() != mask.size {
        return Err(Error::shape("attention map and mask sizes differ"));
    }
    let mut raw_1 = 0.0;
    let mut raw_2 = 0.0;
    for (idx, &m) in mask.grid.iter().enumerate() {
        if m == 1 {
            raw_1 += att_i.values()[idx];
        } else {
            raw_2 += att_k.values()[idx];
        }
    }
    let total = raw_1 + raw_2;
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Mixing(format!("attention masses sum to {total}")));
    }
    Ok(Lambdas {
        lambda_1: raw_1 / total,
        lambda_2: raw_2 / total,
        raw_1,
        raw_2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedQuery {
    /// The mixed patch; label, center and boundary flag come from `x_i`.
    pub patch: PatchSample,
    /// Positions of the two sources in the query list.
    pub source_i: usize,
    pub source_k: usize,
    pub label_i: u16,
    pub label_k: u16,
    pub lambdas: Lambdas,
    pub mask: Option<MixMask>,
}

/// Pairs every query with a uniformly drawn other query and mixes them.
/// `attention` holds the maps of the unmixed queries and is required in
/// TransMix mode. `MixMode::None` passes the queries through with
/// `λ = (1, 0)`.
pub fn mix_query_set<R: Rng + ?Sized>(
    queries: &[&PatchSample],
    attention: Option<&[AttentionMap]>,
    mode: MixMode,
    rng: &mut R,
) -> Result<Vec<MixedQuery>> {
    if mode == MixMode::None {
        return Ok(queries
            .iter()
            .enumerate()
            .map(|(i, q)| MixedQuery {
                patch: (*q).clone(),
                source_i: i,
                source_k: i,
                label_i: q.label,
                label_k: q.label,
                lambdas: Lambdas {
                    lambda_1: 1.0,
                    lambda_2: 0.0,
                    raw_1: 1.0,
                    raw_2: 0.0,
                },
                mask: None,
            })
            .collect());
    }
    let n = queries.len();
    if n < 2 {
        return Err(Error::Mixing(format!(
            "need at least two queries to mix, got {n}"
        )));
    }
    let maps = match (mode, attention) {
        (MixMode::TransMix, Some(m)) if m.len() == n => Some(m),
        (MixMode::TransMix, _) => {
            return Err(Error::Mixing(
                "TransMix needs one attention map per query".into(),
            ));
        }
        _ => None,
    };
    let mut out = Vec::with_capacity(n);
    for (i, x_i) in queries.iter().enumerate() {
        let mut k = rng.random_range(0..n - 1);
        if k >= i {
            k += 1;
        }
        let x_k = queries[k];
        let mask = sample_mask(x_i.size, rng)?;
        let pixels = apply_mix(x_i, x_k, &mask)?;
        let lambdas = match maps {
            Some(m) => transmix_lambdas(&mask, &m[i], &m[k])?,
            None => cutmix_lambdas(&mask),
        };
        out.push(MixedQuery {
            patch: PatchSample {
                pixels,
                ..(*x_i).clone()
            },
            source_i: i,
            source_k: k,
            label_i: x_i.label,
            label_k: x_k.label,
            lambdas,
            mask: Some(mask),
        });
    }
    Ok(out)
}
