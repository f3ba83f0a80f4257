//! Scene-level glue: patches, few-shot split, augmentation, training and
//! evaluation for one seed.

use rand::seq::index::sample;

use crate::episodes::EpisodeConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, knn_predict, EvalReport};
use crate::hsi_data::{
    augment_target, check_pair, extract_all, split_few_shot, HsiCube, LabelMap, PatchSample,
    SplitSpec,
};
use crate::model::{infer, Checkpoint, Domain, ModelParams, TransformerConfig};
use crate::rng::{stream_rng, Stream};
use crate::training::{run_schedule, EpisodeSource, LogEntry, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Classes per episode; 0 means every target class.
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub knn_k: usize,
    /// Cap on source samples per class.
    pub source_per_class: usize,
    /// Samples per forward tape outside training.
    pub chunk: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: TransformerConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            n_way: 0,
            k_shot: 5,
            m_query: 15,
            knn_k: 5,
            source_per_class: 200,
            chunk: 128,
        }
    }
}

impl ExperimentConfig {
    /// Points every random stream at `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c.split.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be positive".into()));
        }
        if self.chunk == 0 {
            return Err(Error::Config("chunk must be positive".into()));
        }
        Ok(())
    }

    fn episode(&self, n_classes: usize) -> EpisodeConfig {
        let n_way = if self.n_way == 0 {
            n_classes
        } else {
            self.n_way
        };
        EpisodeConfig {
            n_way,
            k_shot: self.k_shot,
            m_query: self.m_query,
            seed: self.train.seed,
        }
    }
}

/// Augmented labelled target samples and the held-out test samples.
#[derive(Debug, Clone)]
pub struct TargetSplit {
    pub reference: Vec<PatchSample>,
    pub test: Vec<PatchSample>,
}

pub fn prepare_target(
    cube: &HsiCube,
    labels: &LabelMap,
    cfg: &ExperimentConfig,
) -> Result<TargetSplit> {
    check_pair(cube, labels)?;
    let all = extract_all(cube, labels, cfg.model.patch_size)?;
    let (labeled, test) = split_few_shot(all, &cfg.split)?;
    let reference = augment_target(&labeled, &cfg.split, cfg.split.seed)?;
    Ok(TargetSplit { reference, test })
}

/// Every labelled source patch, subsampled to at most `per_class` per class.
pub fn prepare_source(
    cube: &HsiCube,
    labels: &LabelMap,
    cfg: &ExperimentConfig,
) -> Result<Vec<PatchSample>> {
    check_pair(cube, labels)?;
    let all = extract_all(cube, labels, cfg.model.patch_size)?;
    let mut by_class: std::collections::BTreeMap<u16, Vec<PatchSample>> = Default::default();
    for s in all {
        by_class.entry(s.label).or_default().push(s);
    }
    let mut out = Vec::new();
    for (class, members) in by_class {
        if members.len() <= cfg.source_per_class {
            out.extend(members);
            continue;
        }
        let mut rng = stream_rng(cfg.train.seed, Stream::Sampling, class as u64);
        let mut picks = sample(&mut rng, members.len(), cfg.source_per_class).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| members[i].clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
    pub report: EvalReport,
    pub split: TargetSplit,
}

/// Episode sources for both phases. The source phase gets its own episode
/// stream and is omitted when the schedule has no source iterations.
pub fn episode_sources<'a>(
    reference: &'a [PatchSample],
    source: Option<&'a [PatchSample]>,
    cfg: &ExperimentConfig,
) -> Result<(Option<EpisodeSource<'a>>, EpisodeSource<'a>)> {
    let n_target = count_classes(reference);
    let target = EpisodeSource::new(reference, cfg.episode(n_target), Domain::Target)?;
    let source = match (cfg.train.source_phase(), source) {
        (0, _) => None,
        (_, None) => return Err(Error::Config("APNT mode needs a source dataset".into())),
        (_, Some(s)) => {
            let mut ep = cfg.episode(n_target);
            ep.seed = ep.seed.wrapping_add(1);
            Some(EpisodeSource::new(s, ep, Domain::Source)?)
        }
    };
    Ok((source, target))
}

pub fn train_on(
    split: &TargetSplit,
    source: Option<&[PatchSample]>,
    cfg: &ExperimentConfig,
    on_entry: impl FnMut(&LogEntry),
) -> Result<(Checkpoint, Vec<LogEntry>)> {
    cfg.validate()?;
    let (source, target) = episode_sources(&split.reference, source, cfg)?;
    run_schedule(source.as_ref(), &target, cfg.model, &cfg.train, on_entry)
}

/// Split, augment, train and evaluate on one target scene.
pub fn run_experiment(
    cube: &HsiCube,
    labels: &LabelMap,
    source: Option<&[PatchSample]>,
    cfg: &ExperimentConfig,
    on_entry: impl FnMut(&LogEntry),
) -> Result<ExperimentResult> {
    let split = prepare_target(cube, labels, cfg)?;
    let (checkpoint, log) = train_on(&split, source, cfg, on_entry)?;
    let params = checkpoint.model_params()?;
    let report = evaluate(&params, &split.reference, &split.test, cfg.knn_k, cfg.chunk)?;
    Ok(ExperimentResult {
        checkpoint,
        log,
        report,
        split,
    })
}

/// KNN class for every labelled pixel, 0 elsewhere, in row-major order.
pub fn predict_scene(
    params: &ModelParams,
    cube: &HsiCube,
    labels: &LabelMap,
    reference: &[PatchSample],
    knn_k: usize,
    chunk: usize,
) -> Result<Vec<u16>> {
    let patches = extract_all(cube, labels, params.config().patch_size)?;
    let ref_refs: Vec<&PatchSample> = reference.iter().collect();
    let (ref_features, _) = infer(params, Domain::Target, &ref_refs, chunk)?;
    let ref_labels: Vec<u16> = reference.iter().map(|s| s.label).collect();
    let mut out = vec![0u16; labels.width() * labels.height()];
    for part in patches.chunks(chunk.max(1)) {
        let refs: Vec<&PatchSample> = part.iter().collect();
        let (features, _) = infer(params, Domain::Target, &refs, chunk)?;
        let predicted = knn_predict(&features, &ref_features, &ref_labels, knn_k)?;
        for (s, p) in part.iter().zip(predicted) {
            out[s.center.0 * labels.width() + s.center.1] = p;
        }
    }
    Ok(out)
}

fn count_classes(samples: &[PatchSample]) -> usize {
    let mut ids: Vec<u16> = samples.iter().map(|s| s.label).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}
