//! Seeded C-way K-shot task sampling.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::hsi_data::PatchSample;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config(format!(
                "n_way must be at least 2, got {}",
                self.n_way
            )));
        }
        if self.k_shot == 0 || self.m_query == 0 {
            return Err(Error::Config("k_shot and m_query must be positive".into()));
        }
        if self.k_shot >= self.m_query {
            log::warn!(
                "k_shot ({}) is not smaller than m_query ({})",
                self.k_shot,
                self.m_query
            );
        }
        Ok(())
    }
}

/// Sample indices grouped by class, classes in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPool {
    class_ids: Vec<u16>,
    members: Vec<Vec<usize>>,
}

impl ClassPool {
    pub fn from_labels(labels: impl IntoIterator<Item = u16>) -> Self {
        let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.into_iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let (class_ids, members) = groups.into_iter().unzip();
        Self { class_ids, members }
    }

    pub fn from_samples(samples: &[PatchSample]) -> Self {
        Self::from_labels(samples.iter().map(|s| s.label))
    }

    pub fn class_ids(&self) -> &[u16] {
        &self.class_ids
    }

    pub fn members(&self, class_index: usize) -> &[usize] {
        &self.members[class_index]
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }
}

/// One task. `support[c·K + j]` and `query[c·M + j]` belong to
/// `class_ids[c]`; entries are indices into the pool's sample list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub class_ids: Vec<u16>,
    pub k_shot: usize,
    pub m_query: usize,
    pub episode_index: usize,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    /// Episode-local class of the i-th support sample.
    pub fn support_class(&self, i: usize) -> usize {
        i / self.k_shot
    }

    pub fn query_class(&self, i: usize) -> usize {
        i / self.m_query
    }

    pub fn support_labels(&self) -> Vec<u16> {
        (0..self.support.len())
            .map(|i| self.class_ids[self.support_class(i)])
            .collect()
    }

    pub fn query_labels(&self) -> Vec<u16> {
        (0..self.query.len())
            .map(|i| self.class_ids[self.query_class(i)])
            .collect()
    }
}

/// Classes are drawn uniformly without replacement, then `K + M` distinct
/// samples per class. The result depends only on `(cfg.seed, episode_index)`.
pub fn sample_episode(
    pool: &ClassPool,
    cfg: &EpisodeConfig,
    episode_index: usize,
) -> Result<Episode> {
    cfg.validate()?;
    if pool.n_classes() < cfg.n_way {
        return Err(Error::Episode(format!(
            "pool has {} classes, {} required",
            pool.n_classes(),
            cfg.n_way
        )));
    }
    let need = cfg.k_shot + cfg.m_query;
    if let Some(c) = (0..pool.n_classes()).find(|&c| pool.members[c].len() < need) {
        return Err(Error::Episode(format!(
            "class {} has {} samples, {} required for {}-shot {}-query episodes",
            pool.class_ids[c],
            pool.members[c].len(),
            need,
            cfg.k_shot,
            cfg.m_query
        )));
    }
    let mut rng = stream_rng(cfg.seed, Stream::Episode, episode_index as u64);
    let mut classes = sample(&mut rng, pool.n_classes(), cfg.n_way).into_vec();
    classes.sort_unstable();
    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    let mut query = Vec::with_capacity(cfg.n_way * cfg.m_query);
    for &c in &classes {
        let members = &pool.members[c];
        let picks = sample(&mut rng, members.len(), need).into_vec();
        support.extend(picks[..cfg.k_shot].iter().map(|&p| members[p]));
        query.extend(picks[cfg.k_shot..].iter().map(|&p| members[p]));
    }
    Ok(Episode {
        support,
        query,
        class_ids: classes.iter().map(|&c| pool.class_ids[c]).collect(),
        k_shot: cfg.k_shot,
        m_query: cfg.m_query,
        episode_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn pool(classes: u16, per_class: usize) -> ClassPool {
        ClassPool::from_labels(
            (0..classes as usize * per_class).map(|i| (i % classes as usize) as u16 + 1),
        )
    }

    #[test]
    fn sixteen_way_counts() {
        let cfg = EpisodeConfig {
            n_way: 16,
            k_shot: 5,
            m_query: 15,
            seed: 0,
        };
        let ep = sample_episode(&pool(16, 200), &cfg, 0).unwrap();
        assert_eq!(ep.support.len(), 80);
        assert_eq!(ep.query.len(), 240);
        assert_eq!(ep.class_ids, (1..=16).collect::<Vec<_>>());
    }

    #[test]
    fn two_way_one_shot_is_deterministic() {
        let cfg = EpisodeConfig {
            n_way: 2,
            k_shot: 1,
            m_query: 1,
            seed: 9,
        };
        let p = pool(2, 2);
        let a = sample_episode(&p, &cfg, 5).unwrap();
        for _ in 0..5 {
            assert_eq!(sample_episode(&p, &cfg, 5).unwrap(), a);
        }
        let mut seen = HashSet::new();
        for i in 0..64 {
            seen.insert(sample_episode(&p, &cfg, i).unwrap().support);
        }
        // each class has two members, so four support pairs are possible
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn episodes_are_disjoint_and_balanced() {
        let labels: Vec<u16> = (0..300).map(|i| (i % 6) as u16 + 1).collect();
        let p = ClassPool::from_labels(labels.iter().copied());
        let cfg = EpisodeConfig {
            n_way: 4,
            k_shot: 3,
            m_query: 7,
            seed: 2,
        };
        for i in 0..200 {
            let ep = sample_episode(&p, &cfg, i).unwrap();
            let s: HashSet<_> = ep.support.iter().collect();
            let q: HashSet<_> = ep.query.iter().collect();
            assert_eq!(s.len(), ep.support.len());
            assert_eq!(q.len(), ep.query.len());
            assert!(s.is_disjoint(&q));
            for (j, &idx) in ep.support.iter().enumerate() {
                assert_eq!(labels[idx], ep.class_ids[ep.support_class(j)]);
            }
            for (j, &idx) in ep.query.iter().enumerate() {
                assert_eq!(labels[idx], ep.class_ids[ep.query_class(j)]);
            }
        }
    }

    #[test]
    fn class_frequencies_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let cfg = EpisodeConfig {
            n_way: 2,
            k_shot: 1,
            m_query: 1,
            seed: 11,
        };
        let p = pool(4, 10);
        let mut counts = [0usize; 4];
        for i in 0..1000 {
            for c in sample_episode(&p, &cfg, i).unwrap().class_ids {
                counts[c as usize - 1] += 1;
            }
        }
        let expected = 2.0 / 4.0 * 1000.0;
        let chi2: f64 = counts
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let critical = ChiSquared::new(3.0).unwrap().inverse_cdf(0.999);
        assert!(chi2 < critical, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn shortfalls_are_named() {
        let cfg = EpisodeConfig {
            n_way: 3,
            k_shot: 5,
            m_query: 15,
            seed: 0,
        };
        let err = sample_episode(&pool(2, 40), &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("2 classes"), "{err}");
        let err = sample_episode(&pool(3, 19), &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("19 samples"), "{err}");
        let bad = EpisodeConfig { n_way: 1, ..cfg };
        assert!(matches!(
            sample_episode(&pool(3, 40), &bad, 0),
            Err(Error::Config(_))
        ));
    }
}
