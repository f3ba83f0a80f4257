//! Class prototypes and the label-mixed prototype cross-entropy.
//!
//! Logits are negative squared Euclidean distances to the episode's class
//! prototypes. A mixed query contributes `λ1·(−log p(y_i)) + λ2·(−log p(y_k))`
//! and the episode loss is the mean over queries.

use crate::error::{Error, Result};
use crate::mixing::{Lambdas, MixedQuery};
use crate::numeric::{Graph, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    class_ids: Vec<u16>,
    vectors: Vec<Vec<f64>>,
}

impl Prototypes {
    pub fn class_ids(&self) -> &[u16] {
        &self.class_ids
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn get(&self, class_id: u16) -> Option<&[f64]> {
        self.index_of(class_id).map(|i| self.vectors[i].as_slice())
    }

    pub fn index_of(&self, class_id: u16) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }
}

/// Mean support feature per class, in the order of `class_ids`.
pub fn compute_prototypes(
    features: &[Vec<f64>],
    labels: &[u16],
    class_ids: &[u16],
) -> Result<Prototypes> {
    if features.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::shape("support features differ in width"));
    }
    let mut vectors = Vec::with_capacity(class_ids.len());
    for &c in class_ids {
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for (f, _) in features.iter().zip(labels).filter(|(_, &l)| l == c) {
            sum.iter_mut().zip(f).for_each(|(s, v)| *s += v);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Loss(format!("class {c} has no support features")));
        }
        sum.iter_mut().for_each(|s| *s /= count as f64);
        vectors.push(sum);
    }
    if let Some(l) = labels.iter().find(|l| !class_ids.contains(l)) {
        return Err(Error::Loss(format!(
            "support label {l} is not an episode class"
        )));
    }
    Ok(Prototypes {
        class_ids: class_ids.to_vec(),
        vectors,
    })
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Log-softmax of `−‖z − p_j‖²` over the episode classes.
pub fn class_log_probs(query: &[f64], prototypes: &Prototypes) -> Vec<f64> {
    let logits: Vec<f64> = prototypes
        .vectors
        .iter()
        .map(|p| -squared_distance(query, p))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// `(λ1·L_i, λ2·L_k)` per query.
    pub terms: Vec<(f64, f64)>,
    pub mean_lambda_1: f64,
    pub mean_lambda_2: f64,
}

/// Episode-local class positions and weights of one mixed query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixTarget {
    pub class_i: usize,
    pub class_k: usize,
    pub lambda_1: f64,
    pub lambda_2: f64,
}

pub fn mix_targets(mixed: &[MixedQuery], class_ids: &[u16]) -> Result<Vec<MixTarget>> {
    let local = |label: u16| {
        class_ids
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::Loss(format!("label {label} is not an episode class")))
    };
    mixed
        .iter()
        .map(|q| {
            let Lambdas {
                lambda_1, lambda_2, ..
            } = q.lambdas;
            Ok(MixTarget {
                class_i: local(q.label_i)?,
                class_k: local(q.label_k)?,
                lambda_1,
                lambda_2,
            })
        })
        .collect()
}

pub fn mixed_episode_loss(
    mixed: &[MixedQuery],
    features: &[Vec<f64>],
    prototypes: &Prototypes,
) -> Result<LossBreakdown> {
    if mixed.len() != features.len() {
        return Err(Error::shape(format!(
            "{} mixed queries but {} features",
            mixed.len(),
            features.len()
        )));
    }
    if mixed.is_empty() {
        return Err(Error::Loss("no queries".into()));
    }
    let targets = mix_targets(mixed, &prototypes.class_ids)?;
    let mut terms = Vec::with_capacity(mixed.len());
    for (t, f) in targets.iter().zip(features) {
        let lp = class_log_probs(f, prototypes);
        terms.push((-t.lambda_1 * lp[t.class_i], -t.lambda_2 * lp[t.class_k]));
    }
    let n = mixed.len() as f64;
    Ok(LossBreakdown {
        total: terms.iter().map(|(a, b)| a + b).sum::<f64>() / n,
        terms,
        mean_lambda_1: targets.iter().map(|t| t.lambda_1).sum::<f64>() / n,
        mean_lambda_2: targets.iter().map(|t| t.lambda_2).sum::<f64>() / n,
    })
}

/// Tape version of the episode loss. `support_groups[c]` lists the rows of
/// `support` that belong to episode class `c`.
pub fn episode_loss_on_graph(
    g: &mut Graph,
    support: Var,
    support_groups: &[Vec<usize>],
    queries: Var,
    targets: &[MixTarget],
) -> Result<Var> {
    if g.value(queries).rows() != targets.len() || targets.is_empty() {
        return Err(Error::shape("one target per query row is required"));
    }
    let protos = g.group_mean_rows(support, support_groups)?;
    let dist = g.sq_dist(queries, protos)?;
    let logits = g.scale(dist, -1.0)?;
    let log_probs = g.log_softmax_rows(logits)?;
    let n = targets.len() as f64;
    let entries: Vec<(usize, usize, f64)> = targets
        .iter()
        .enumerate()
        .flat_map(|(h, t)| {
            [
                (h, t.class_i, -t.lambda_1 / n),
                (h, t.class_k, -t.lambda_2 / n),
            ]
        })
        .collect();
    g.weighted_sum(log_probs, &entries)
}
