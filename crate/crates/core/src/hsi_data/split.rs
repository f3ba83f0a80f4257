use std::collections::BTreeMap;

use rand::seq::index::sample;

use super::PatchSample;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Few-shot labelling budget for the target scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub shots_per_class: usize,
    pub augment_to: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            shots_per_class: 5,
            augment_to: 200,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shots_per_class == 0 {
            return Err(Error::Config("shots_per_class must be at least 1".into()));
        }
        if self.augment_to < self.shots_per_class {
            return Err(Error::Config(format!(
                "augment_to ({}) is smaller than shots_per_class ({})",
                self.augment_to, self.shots_per_class
            )));
        }
        Ok(())
    }
}

pub(crate) fn group_by_label(samples: &[PatchSample]) -> BTreeMap<u16, Vec<usize>> {
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.label).or_default().push(i);
    }
    groups
}

/// Draws `shots_per_class` samples per class without replacement. The
/// labelled part is ordered by class; the test part keeps input order.
pub fn split_few_shot(
    samples: Vec<PatchSample>,
    spec: &SplitSpec,
) -> Result<(Vec<PatchSample>, Vec<PatchSample>)> {
    spec.validate()?;
    let groups = group_by_label(&samples);
    let mut chosen = vec![false; samples.len()];
    let mut labeled_idx = Vec::new();
    for (&class, members) in &groups {
        if members.len() < spec.shots_per_class {
            return Err(Error::Split {
                class,
                available: members.len(),
                required: spec.shots_per_class,
            });
        }
        let mut rng = stream_rng(spec.seed, Stream::Split, class as u64);
        let mut picks: Vec<usize> =
            sample(&mut rng, members.len(), spec.shots_per_class).into_vec();
        picks.sort_unstable();
        for p in picks {
            chosen[members[p]] = true;
            labeled_idx.push(members[p]);
        }
    }
    let mut slots: Vec<Option<PatchSample>> = samples.into_iter().map(Some).collect();
    let labeled = labeled_idx
        .iter()
        .map(|&i| slots[i].take().expect("picked once"))
        .collect();
    let test = slots.into_iter().flatten().collect();
    Ok((labeled, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(classes: u16, per_class: usize) -> Vec<PatchSample> {
        (0..classes as usize * per_class)
            .map(|i| PatchSample {
                pixels: vec![i as f64],
                size: 1,
                channels: 1,
                label: (i % classes as usize) as u16 + 1,
                center: (i, 0),
                is_boundary: false,
            })
            .collect()
    }

    #[test]
    fn counts_and_determinism() {
        let spec = SplitSpec {
            shots_per_class: 5,
            augment_to: 200,
            seed: 0,
        };
        let (labeled, test) = split_few_shot(pool(3, 10), &spec).unwrap();
        assert_eq!(labeled.len(), 15);
        assert_eq!(test.len(), 15);
        for c in 1..=3 {
            assert_eq!(labeled.iter().filter(|s| s.label == c).count(), 5);
        }
        let (again, _) = split_few_shot(pool(3, 10), &spec).unwrap();
        assert_eq!(labeled, again);
        let (other, _) = split_few_shot(pool(3, 10), &SplitSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(labeled, other);
    }

    #[test]
    fn labeled_and_test_partition_the_input() {
        let (labeled, test) = split_few_shot(pool(4, 7), &SplitSpec::default()).unwrap();
        let mut centers: Vec<usize> = labeled.iter().chain(&test).map(|s| s.center.0).collect();
        centers.sort_unstable();
        assert_eq!(centers, (0..28).collect::<Vec<_>>());
    }

    #[test]
    fn short_class_is_named() {
        let mut samples = pool(2, 6);
        samples.retain(|s| !(s.label == 2 && s.center.0 > 5));
        match split_few_shot(samples, &SplitSpec::default()) {
            Err(Error::Split {
                class,
                available,
                required,
            }) => {
                assert_eq!((class, available, required), (2, 3, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
