//! Hermetic rectangular-region scenes for tests and demos.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{HsiCube, LabelMap};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub bands: usize,
    /// Region grid as (rows, cols).
    pub region_grid: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Region `(i, j)` spans rows `⌊i·H/rows⌋..⌊(i+1)·H/rows⌋` (same for columns)
/// and is assigned class `(i·cols + j) mod n_classes + 1`. Pixel spectra are
/// the class mean plus Gaussian noise.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(HsiCube, LabelMap)> {
    let (rows, cols) = spec.region_grid;
    if spec.n_classes == 0 || spec.bands == 0 {
        return Err(Error::Config("classes and bands must be positive".into()));
    }
    if rows * cols < spec.n_classes {
        return Err(Error::Config(format!(
            "{rows}x{cols} region grid cannot hold {} classes",
            spec.n_classes
        )));
    }
    if rows > spec.height || cols > spec.width {
        return Err(Error::Config(format!(
            "{rows}x{cols} region grid does not fit a {}x{} image",
            spec.width, spec.height
        )));
    }
    if spec.n_classes > u16::MAX as usize || !(spec.noise_sigma >= 0.0) {
        return Err(Error::Config("invalid class count or noise level".into()));
    }
    let mut rng = stream_rng(spec.seed, Stream::Synth, 0);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.bands)
                .map(|_| rng.random_range(0.0..1.0))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;

    let region_of = |x: usize, extent: usize, parts: usize| (x * parts / extent).min(parts - 1);
    let mut labels = Vec::with_capacity(spec.height * spec.width);
    let mut data = Vec::with_capacity(spec.height * spec.width * spec.bands);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let region = region_of(r, spec.height, rows) * cols + region_of(c, spec.width, cols);
            let class = region % spec.n_classes;
            labels.push(class as u16 + 1);
            for &m in &means[class] {
                let v = if spec.noise_sigma > 0.0 {
                    m + noise.sample(&mut rng)
                } else {
                    m
                };
                data.push(v as f32);
            }
        }
    }
    Ok((
        HsiCube::new(spec.width, spec.height, spec.bands, data)?,
        LabelMap::new(spec.width, spec.height, labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi_data::{decode_cube, detect_boundary, encode_cube};

    fn spec(sigma: f64) -> SynthSpec {
        SynthSpec {
            n_classes: 4,
            bands: 6,
            region_grid: (2, 2),
            height: 20,
            width: 20,
            noise_sigma: sigma,
            seed: 3,
        }
    }

    #[test]
    fn regions_have_equal_area() {
        let (_, labels) = synth_dataset(&spec(0.1)).unwrap();
        for c in 1..=4u16 {
            assert_eq!(labels.labels().iter().filter(|&&l| l == c).count(), 100);
        }
        assert_eq!(labels.get(0, 0), 1);
        assert_eq!(labels.get(0, 19), 2);
        assert_eq!(labels.get(19, 0), 3);
        assert_eq!(labels.get(19, 19), 4);
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let (cube, labels) = synth_dataset(&spec(0.0)).unwrap();
        for c in 1..=4u16 {
            let pixels: Vec<&[f32]> = (0..400)
                .filter(|i| labels.labels()[*i] == c)
                .map(|i| cube.spectrum(i / 20, i % 20))
                .collect();
            assert!(pixels.iter().all(|p| *p == pixels[0]));
        }
    }

    #[test]
    fn deterministic_and_round_trips_bitwise() {
        let (a, la) = synth_dataset(&spec(0.05)).unwrap();
        let (b, lb) = synth_dataset(&spec(0.05)).unwrap();
        assert_eq!(a, b);
        let bytes = encode_cube(&a, &la).unwrap();
        let (c, lc) = decode_cube(&bytes).unwrap();
        assert_eq!(lc, lb);
        let bits = |x: &HsiCube| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&c), bits(&a));
    }

    #[test]
    fn boundaries_exist_along_region_edges() {
        let (_, labels) = synth_dataset(&spec(0.0)).unwrap();
        assert!(detect_boundary(&labels, (9, 2), 5).unwrap());
        assert!(detect_boundary(&labels, (2, 10), 5).unwrap());
        assert!(!detect_boundary(&labels, (4, 4), 5).unwrap());
    }

    #[test]
    fn too_many_classes_for_grid() {
        let s = SynthSpec {
            n_classes: 5,
            ..spec(0.0)
        };
        assert!(matches!(synth_dataset(&s), Err(Error::Config(_))));
    }
}
