use super::{check_pair, HsiCube, LabelMap, PatchSample};
use crate::error::{Error, Result};

/// Mirror index without repeating the edge sample: for `n = 5`,
/// `-1 → 1`, `-2 → 2`, `5 → 3`. Windows wider than the image keep
/// bouncing between the edges.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn validate(labels: &LabelMap, center: (usize, usize), patch_size: usize) -> Result<()> {
    if patch_size == 0 || patch_size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "patch size must be odd, got {patch_size}"
        )));
    }
    let (row, col) = center;
    if row >= labels.height() || col >= labels.width() {
        return Err(Error::Argument(format!(
            "center ({row}, {col}) outside {}x{} image",
            labels.width(),
            labels.height()
        )));
    }
    if labels.get(row, col) == 0 {
        return Err(Error::Argument(format!(
            "center ({row}, {col}) is unlabeled"
        )));
    }
    Ok(())
}

fn window(
    center: (usize, usize),
    patch_size: usize,
    height: usize,
    width: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let half = (patch_size / 2) as isize;
    let (row, col) = (center.0 as isize, center.1 as isize);
    (0..patch_size as isize).flat_map(move |dr| {
        (0..patch_size as isize).map(move |dc| {
            (
                reflect_index(row + dr - half, height),
                reflect_index(col + dc - half, width),
            )
        })
    })
}

/// True when the mirrored label window holds any pixel whose label differs
/// from the center's, unlabelled pixels included.
pub fn detect_boundary(
    labels: &LabelMap,
    center: (usize, usize),
    patch_size: usize,
) -> Result<bool> {
    validate(labels, center, patch_size)?;
    let own = labels.get(center.0, center.1);
    Ok(window(center, patch_size, labels.height(), labels.width())
        .any(|(r, c)| labels.get(r, c) != own))
}

pub fn extract_patch(
    cube: &HsiCube,
    labels: &LabelMap,
    center: (usize, usize),
    patch_size: usize,
) -> Result<PatchSample> {
    check_pair(cube, labels)?;
    validate(labels, center, patch_size)?;
    let bands = cube.bands();
    let mut pixels = Vec::with_capacity(patch_size * patch_size * bands);
    for (r, c) in window(center, patch_size, cube.height(), cube.width()) {
        pixels.extend(cube.spectrum(r, c).iter().map(|&v| v as f64));
    }
    Ok(PatchSample {
        pixels,
        size: patch_size,
        channels: bands,
        label: labels.get(center.0, center.1),
        center,
        is_boundary: detect_boundary(labels, center, patch_size)?,
    })
}

/// Patches for every labelled pixel in row-major order.
pub fn extract_all(
    cube: &HsiCube,
    labels: &LabelMap,
    patch_size: usize,
) -> Result<Vec<PatchSample>> {
    let mut out = Vec::new();
    for row in 0..labels.height() {
        for col in 0..labels.width() {
            if labels.get(row, col) != 0 {
                out.push(extract_patch(cube, labels, (row, col), patch_size)?);
            }
        }
    }
    Ok(out)
}
