//! Crop-and-resize expansion of the few labelled target samples.

use rand::Rng;

use super::split::group_by_label;
use super::{PatchSample, SplitSpec};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const CROP_SIDES: [usize; 3] = [5, 7, 9];

/// Centered `side×side` crop of a patch, all channels kept.
pub fn center_crop(patch: &PatchSample, side: usize) -> Result<Vec<f64>> {
    if side == 0 || side > patch.size || !(patch.size - side).is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "cannot center-crop side {side} from {}",
            patch.size
        )));
    }
    let off = (patch.size - side) / 2;
    let mut out = Vec::with_capacity(side * side * patch.channels);
    for r in 0..side {
        for c in 0..side {
            out.extend_from_slice(patch.pixel(off + r, off + c));
        }
    }
    Ok(out)
}

/// Bilinear resize of a `side×side×channels` grid to `out×out×channels`,
/// per channel, with corner pixels aligned.
pub fn bilinear_resize(src: &[f64], side: usize, channels: usize, out: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), side * side * channels);
    let coord = |i: usize| -> (usize, usize, f64) {
        if out == 1 || side == 1 {
            return (0, 0, 0.0);
        }
        let u = i as f64 * (side - 1) as f64 / (out - 1) as f64;
        let lo = (u.floor() as usize).min(side - 1);
        let hi = (lo + 1).min(side - 1);
        (lo, hi, u - lo as f64)
    };
    let at = |r: usize, c: usize, k: usize| src[(r * side + c) * channels + k];
    let mut dst = Vec::with_capacity(out * out * channels);
    for i in 0..out {
        let (r0, r1, tr) = coord(i);
        for j in 0..out {
            let (c0, c1, tc) = coord(j);
            for k in 0..channels {
                let top = at(r0, c0, k) * (1.0 - tc) + at(r0, c1, k) * tc;
                let bottom = at(r1, c0, k) * (1.0 - tc) + at(r1, c1, k) * tc;
                dst.push(top * (1.0 - tr) + bottom * tr);
            }
        }
    }
    dst
}

fn crop_sides(patch_size: usize) -> Vec<usize> {
    let sides: Vec<usize> = CROP_SIDES
        .iter()
        .copied()
        .filter(|&s| s <= patch_size && (patch_size - s).is_multiple_of(2))
        .collect();
    if sides.is_empty() {
        vec![patch_size]
    } else {
        sides
    }
}

/// Expands each class to exactly `augment_to` samples: the originals first,
/// then random centered crops resized back to the patch size.
pub fn augment_target(
    labeled: &[PatchSample],
    spec: &SplitSpec,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    spec.validate()?;
    if labeled.is_empty() {
        return Err(Error::Argument("no labelled samples to augment".into()));
    }
    let mut out = Vec::new();
    for (class, members) in group_by_label(labeled) {
        if members.len() > spec.augment_to {
            return Err(Error::Config(format!(
                "class {class} already has {} samples, more than augment_to = {}",
                members.len(),
                spec.augment_to
            )));
        }
        out.extend(members.iter().map(|&i| labeled[i].clone()));
        let mut rng = stream_rng(seed, Stream::Augment, class as u64);
        for _ in members.len()..spec.augment_to {
            let original = &labeled[members[rng.random_range(0..members.len())]];
            let sides = crop_sides(original.size);
            let side = sides[rng.random_range(0..sides.len())];
            let crop = center_crop(original, side)?;
            out.push(PatchSample {
                pixels: bilinear_resize(&crop, side, original.channels, original.size),
                ..original.clone()
            });
        }
    }
    Ok(out)
}
