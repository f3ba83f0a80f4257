//! Initialisation, Adam, and the episodic training schedule.
//!
//! APNT runs `source_iterations` episodes from the source pool through the
//! source mapping layer, then the remaining episodes from the augmented
//! target samples. APNT* skips the source phase.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng as _;

use crate::episodes::{sample_episode, ClassPool, EpisodeConfig};
use crate::error::{Error, Result};
use crate::hsi_data::PatchSample;
use crate::loss::{
    compute_prototypes, episode_loss_on_graph, mix_targets, mixed_episode_loss, LossBreakdown,
};
use crate::mixing::{mix_query_set, MixMode};
use crate::model::{
    extract_features_and_attention, infer, Bound, Checkpoint, Domain, ModelParams,
    TransformerConfig, TOKEN,
};
use crate::numeric::{Graph, Tensor};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Source pre-training followed by target fine-tuning.
    Apnt,
    /// Target samples only.
    ApntStar,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "apnt" => Ok(TrainMode::Apnt),
            "apnt*" | "apnt-star" | "apnt_star" | "apntstar" => Ok(TrainMode::ApntStar),
            other => Err(Error::Config(format!(
                "unknown training mode {other:?} (apnt, apnt*)"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Apnt => "apnt",
            TrainMode::ApntStar => "apnt*",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub total_iterations: usize,
    pub source_iterations: usize,
    pub mode: TrainMode,
    pub mix_mode: MixMode,
    pub seed: u64,
    /// Samples per tape when computing attention maps of the unmixed queries.
    pub forward_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            total_iterations: 3000,
            source_iterations: 1000,
            mode: TrainMode::Apnt,
            mix_mode: MixMode::TransMix,
            seed: 0,
            forward_chunk: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be positive".into()));
        }
        if self.mode == TrainMode::Apnt && self.source_iterations > self.total_iterations {
            return Err(Error::Config(format!(
                "source_iterations ({}) exceeds total_iterations ({})",
                self.source_iterations, self.total_iterations
            )));
        }
        Ok(())
    }

    /// Length of the source phase; always 0 for APNT*.
    pub fn source_phase(&self) -> usize {
        match self.mode {
            TrainMode::Apnt => self.source_iterations,
            TrainMode::ApntStar => 0,
        }
    }

    pub fn domain_at(&self, iteration: usize) -> Domain {
        if iteration < self.source_phase() {
            Domain::Source
        } else {
            Domain::Target
        }
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains, and a class
/// token drawn with fans `(1, d_model)`. Each tensor has its own stream so
/// adding a domain does not change the others.
pub fn init_params(
    cfg: TransformerConfig,
    source_bands: Option<usize>,
    target_bands: Option<usize>,
    seed: u64,
) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(cfg, source_bands, target_bands)?;
    let names = params.names().to_vec();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with(".bias") || name.ends_with(".gain") {
            continue;
        }
        let bound = if name == TOKEN {
            xavier_bound(1, cfg.d_model)
        } else {
            xavier_bound(t.rows(), t.cols())
        };
        let mut rng = stream_rng(seed, Stream::Init, stable_hash(name));
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-bound..=bound));
    }
    Ok(params)
}

// FNV-1a, so init streams are keyed by name rather than position.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Adam moments and per-parameter step counts. Parameters that receive no
/// gradient in a step are left untouched, moments included.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    steps: Vec<u64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            steps: vec![0; params.len()],
            m: params.tensors().iter().map(Tensor::zeros_like).collect(),
            v: params.tensors().iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn moments(&self, index: usize) -> (&Tensor, &Tensor) {
        (&self.m[index], &self.v[index])
    }

    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &[Option<Tensor>],
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.len() != params.len() || self.steps.len() != params.len() {
            return Err(Error::shape("gradient list does not match parameters"));
        }
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            self.steps[i] += 1;
            adam_update(
                p.data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.steps[i],
                cfg,
            );
        }
        Ok(())
    }
}

/// One Adam step with bias correction at step `t` (1-based).
pub fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
    }
}

/// Samples of one domain with their class pool and episode shape.
#[derive(Debug, Clone)]
pub struct EpisodeSource<'a> {
    pub samples: &'a [PatchSample],
    pub pool: ClassPool,
    pub episode: EpisodeConfig,
    pub domain: Domain,
}

impl<'a> EpisodeSource<'a> {
    pub fn new(samples: &'a [PatchSample], episode: EpisodeConfig, domain: Domain) -> Result<Self> {
        episode.validate()?;
        Ok(Self {
            samples,
            pool: ClassPool::from_samples(samples),
            episode,
            domain,
        })
    }
}

/// Samples an episode, mixes its queries, and applies one Adam update.
/// Returns the loss breakdown before the update.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    data: &EpisodeSource,
    episode_index: usize,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let episode = sample_episode(&data.pool, &data.episode, episode_index)?;
    let supports: Vec<&PatchSample> = episode.support.iter().map(|&i| &data.samples[i]).collect();
    let queries: Vec<&PatchSample> = episode.query.iter().map(|&i| &data.samples[i]).collect();

    // λ weights are constants: attention comes from a separate tape over the
    // unmixed queries.
    let attention = match cfg.mix_mode {
        MixMode::TransMix => Some(infer(params, data.domain, &queries, cfg.forward_chunk)?.1),
        _ => None,
    };
    let mut rng = stream_rng(cfg.seed, Stream::Mixing, episode_index as u64);
    let mixed = mix_query_set(&queries, attention.as_deref(), cfg.mix_mode, &mut rng)?;
    let targets = mix_targets(&mixed, &episode.class_ids)?;

    let mut batch = supports.clone();
    batch.extend(mixed.iter().map(|q| &q.patch));
    let (n_sup, n_query) = (supports.len(), mixed.len());

    let mut g = Graph::new();
    let bound = Bound::trainable(&mut g, params);
    let out = extract_features_and_attention(&mut g, &bound, data.domain, &batch)?;
    let sup = g.select_rows(out.features, &(0..n_sup).collect::<Vec<_>>())?;
    let qry = g.select_rows(out.features, &(n_sup..n_sup + n_query).collect::<Vec<_>>())?;
    let groups: Vec<Vec<usize>> = (0..episode.n_way())
        .map(|c| (c * episode.k_shot..(c + 1) * episode.k_shot).collect())
        .collect();
    let loss = episode_loss_on_graph(&mut g, sup, &groups, qry, &targets)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            episode: episode_index,
            detail: format!("{} loss {value}", data.domain.name()),
        });
    }

    let rows = |v| {
        let t: &Tensor = g.value(v);
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>()
    };
    let protos = compute_prototypes(&rows(sup), &episode.support_labels(), &episode.class_ids)?;
    let breakdown = mixed_episode_loss(&mixed, &rows(qry), &protos)?;

    let mut grads = g.backward(loss)?;
    let grads: Vec<Option<Tensor>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    drop(bound);
    opt.apply(params, &grads, cfg)?;
    Ok(breakdown)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    /// 1-based.
    pub iteration: usize,
    pub phase: Domain,
    pub loss: f64,
    pub mean_lambda_1: f64,
    pub wall_ms: f64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.6}\t{:.4}\t{:.1}",
            self.iteration,
            self.phase.name(),
            self.loss,
            self.mean_lambda_1,
            self.wall_ms
        )
    }
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const ADAM_STEP: &str = "adam.step.";
const META_ITERATION: &str = "meta.iteration";
const META_SEED_LO: &str = "meta.seed.lo";
const META_SEED_HI: &str = "meta.seed.hi";

/// Training state that can be checkpointed and resumed mid-schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: ModelParams,
    optimizer: OptimizerState,
    cfg: TrainConfig,
    iteration: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = OptimizerState::new(&params);
        Ok(Self {
            params,
            optimizer,
            cfg,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.cfg.total_iterations
    }

    pub fn step(
        &mut self,
        source: Option<&EpisodeSource>,
        target: &EpisodeSource,
    ) -> Result<LogEntry> {
        let started = Instant::now();
        let phase = self.cfg.domain_at(self.iteration);
        let data = match phase {
            Domain::Source => {
                source.ok_or_else(|| Error::Config("APNT mode needs a source dataset".into()))?
            }
            Domain::Target => target,
        };
        if data.domain != phase {
            return Err(Error::Config(format!(
                "{} phase given {} samples",
                phase.name(),
                data.domain.name()
            )));
        }
        let loss = train_step(
            &mut self.params,
            &mut self.optimizer,
            data,
            self.iteration,
            &self.cfg,
        )?;
        self.iteration += 1;
        Ok(LogEntry {
            iteration: self.iteration,
            phase,
            loss: loss.total,
            mean_lambda_1: loss.mean_lambda_1,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Steps until `until` iterations are complete (capped at the schedule
    /// length), calling `on_entry` after each one.
    pub fn run_until(
        &mut self,
        source: Option<&EpisodeSource>,
        target: &EpisodeSource,
        until: usize,
        mut on_entry: impl FnMut(&LogEntry),
    ) -> Result<Vec<LogEntry>> {
        let until = until.min(self.cfg.total_iterations);
        let mut log = Vec::with_capacity(until.saturating_sub(self.iteration));
        while self.iteration < until {
            let entry = self.step(source, target)?;
            on_entry(&entry);
            log.push(entry);
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (i, name) in self.params.names().iter().enumerate() {
            let (m, v) = self.optimizer.moments(i);
            tensors.push((format!("{ADAM_M}{name}"), m.clone()));
            tensors.push((format!("{ADAM_V}{name}"), v.clone()));
            tensors.push((
                format!("{ADAM_STEP}{name}"),
                Tensor::scalar(self.optimizer.steps[i] as f64),
            ));
        }
        tensors.push((META_ITERATION.into(), Tensor::scalar(self.iteration as f64)));
        tensors.push((
            META_SEED_LO.into(),
            Tensor::scalar((self.cfg.seed & 0xffff_ffff) as f64),
        ));
        tensors.push((
            META_SEED_HI.into(),
            Tensor::scalar((self.cfg.seed >> 32) as f64),
        ));
        Checkpoint {
            config: *self.params.config(),
            tensors,
        }
    }

    /// Restores parameters, optimizer state and position. The checkpoint
    /// must have been written with the same seed.
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ck.model_params()?;
        let missing =
            |name: &str| Error::Config(format!("checkpoint has no {name}; it cannot be resumed"));
        let scalar = |name: &str| ck.scalar(name).ok_or_else(|| missing(name));
        let seed = scalar(META_SEED_LO)? as u64 | (scalar(META_SEED_HI)? as u64) << 32;
        if seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {seed}, not {}",
                cfg.seed
            )));
        }
        let mut optimizer = OptimizerState::new(&params);
        for (i, name) in params.names().iter().enumerate() {
            let m = ck
                .get(&format!("{ADAM_M}{name}"))
                .ok_or_else(|| missing(&format!("{ADAM_M}{name}")))?;
            let v = ck
                .get(&format!("{ADAM_V}{name}"))
                .ok_or_else(|| missing(&format!("{ADAM_V}{name}")))?;
            if m.shape() != params.tensors()[i].shape() || v.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "optimizer moments for {name} have the wrong shape"
                )));
            }
            optimizer.m[i] = m.clone();
            optimizer.v[i] = v.clone();
            optimizer.steps[i] = scalar(&format!("{ADAM_STEP}{name}"))? as u64;
        }
        let iteration = scalar(META_ITERATION)? as usize;
        Ok(Self {
            params,
            optimizer,
            cfg,
            iteration,
        })
    }
}

/// Runs the whole schedule from fresh Xavier parameters.
pub fn run_schedule(
    source: Option<&EpisodeSource>,
    target: &EpisodeSource,
    model: TransformerConfig,
    cfg: &TrainConfig,
    on_entry: impl FnMut(&LogEntry),
) -> Result<(Checkpoint, Vec<LogEntry>)> {
    cfg.validate()?;
    let source = if cfg.source_phase() > 0 {
        Some(source.ok_or_else(|| Error::Config("APNT mode needs a source dataset".into()))?)
    } else {
        None
    };
    let source_bands = source.map(|s| bands_of(s.samples)).transpose()?;
    let params = init_params(
        model,
        source_bands,
        Some(bands_of(target.samples)?),
        cfg.seed,
    )?;
    let mut trainer = Trainer::new(params, *cfg)?;
    let log = trainer.run_until(source, target, cfg.total_iterations, on_entry)?;
    Ok((trainer.checkpoint(), log))
}

fn bands_of(samples: &[PatchSample]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("no training samples".into()))?;
    if samples.iter().any(|s| s.channels != first.channels) {
        return Err(Error::shape("training samples differ in band count"));
    }
    Ok(first.channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encode_checkpoint;

    pub(crate) fn tiny_model() -> TransformerConfig {
        TransformerConfig {
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_feed: 16,
            n_encoders: 2,
            patch_size: 3,
        }
    }

    /// Two linearly separable classes: constant spectra with opposite
    /// offsets plus noise.
    pub(crate) fn separable_samples(
        per_class: usize,
        bands: usize,
        size: usize,
        seed: u64,
    ) -> Vec<PatchSample> {
        let mut rng = stream_rng(seed, Stream::Synth, 0);
        let mut out = Vec::new();
        for label in [1u16, 2] {
            let offset = if label == 1 { 0.5 } else { -0.5 };
            for _ in 0..per_class {
                let pixels = (0..size * size * bands)
                    .map(|i| {
                        offset * ((i % bands) as f64 + 1.0) / bands as f64
                            + rng.random_range(-0.3..0.3)
                    })
                    .collect();
                out.push(PatchSample {
                    pixels,
                    size,
                    channels: bands,
                    label,
                    center: (0, 0),
                    is_boundary: false,
                });
            }
        }
        out
    }

    fn episode_cfg(seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            n_way: 2,
            k_shot: 2,
            m_query: 4,
            seed,
        }
    }

    #[test]
    fn xavier_bounds_and_variance() {
        let cfg = TransformerConfig::default();
        let p = init_params(cfg, Some(128), Some(200), 3).unwrap();
        for (name, t) in p.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else if name.ends_with(".gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            } else {
                let b = if name == TOKEN {
                    xavier_bound(1, 100)
                } else {
                    xavier_bound(t.rows(), t.cols())
                };
                assert!(t.data().iter().all(|v| v.abs() <= b), "{name}");
            }
        }
        let w = p.get("enc0.ff1.weight").unwrap().data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let expected = 2.0 / (100.0 + 1024.0);
        assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
        assert_eq!(p, init_params(cfg, Some(128), Some(200), 3).unwrap());
        assert_ne!(p, init_params(cfg, Some(128), Some(200), 4).unwrap());
        // shared tensors do not depend on which domains exist
        let star = init_params(cfg, None, Some(200), 3).unwrap();
        assert_eq!(star.get("enc1.head3.wk"), p.get("enc1.head3.wk"));
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // minimise (x − 3)² from x = 0
        let cfg = TrainConfig {
            lr: 0.05,
            ..Default::default()
        };
        let (mut x, mut m, mut v) = ([0.0], [0.0], [0.0]);
        let (mut rx, mut rm, mut rv) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=100u64 {
            let g = [2.0 * (x[0] - 3.0)];
            adam_update(&mut x, &g, &mut m, &mut v, t, &cfg);

            let rg = 2.0 * (rx - 3.0);
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mhat = rm / (1.0 - 0.9f64.powi(t as i32));
            let vhat = rv / (1.0 - 0.999f64.powi(t as i32));
            rx -= 0.05 * mhat / (vhat.sqrt() + 1e-8);
            assert!((x[0] - rx).abs() < 1e-12, "step {t}: {} vs {rx}", x[0]);
        }
        assert!((x[0] - 3.0).abs() < 0.5);
    }

    #[test]
    fn optimizer_skips_parameters_without_gradients() {
        let p0 = init_params(tiny_model(), Some(3), Some(4), 0).unwrap();
        let mut p = p0.clone();
        let mut opt = OptimizerState::new(&p);
        let grads: Vec<Option<Tensor>> = p
            .iter()
            .map(|(n, t)| {
                if n.starts_with("map.source") {
                    None
                } else {
                    Some(Tensor::filled(t.rows(), t.cols(), 1.0))
                }
            })
            .collect();
        opt.apply(&mut p, &grads, &TrainConfig::default()).unwrap();
        assert_eq!(p.get("map.source.weight"), p0.get("map.source.weight"));
        assert_ne!(p.get("map.target.weight"), p0.get("map.target.weight"));
        let src = p.position("map.source.weight").unwrap();
        assert_eq!(opt.steps()[src], 0);
    }

    #[test]
    fn loss_decreases_on_separable_episodes() {
        let samples = separable_samples(30, 4, 3, 0);
        let data = EpisodeSource::new(&samples, episode_cfg(0), Domain::Target).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::ApntStar,
            total_iterations: 50,
            mix_mode: MixMode::None,
            ..Default::default()
        };
        let mut params = init_params(tiny_model(), None, Some(4), 0).unwrap();
        let mut opt = OptimizerState::new(&params);
        let losses: Vec<f64> = (0..50)
            .map(|i| {
                train_step(&mut params, &mut opt, &data, i, &cfg)
                    .unwrap()
                    .total
            })
            .collect();
        let head = losses[..10].iter().sum::<f64>() / 10.0;
        let tail = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn no_mixing_is_plain_prototype_step() {
        let samples = separable_samples(10, 4, 3, 1);
        let data = EpisodeSource::new(&samples, episode_cfg(1), Domain::Target).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::ApntStar,
            mix_mode: MixMode::None,
            ..Default::default()
        };
        let mut params = init_params(tiny_model(), None, Some(4), 1).unwrap();
        let before = params.clone();
        let mut opt = OptimizerState::new(&params);
        let loss = train_step(&mut params, &mut opt, &data, 0, &cfg).unwrap();
        assert_eq!(loss.mean_lambda_1, 1.0);

        let episode = sample_episode(&data.pool, &data.episode, 0).unwrap();
        let feats = |idx: &[usize]| {
            let refs: Vec<&PatchSample> = idx.iter().map(|&i| &samples[i]).collect();
            infer(&before, Domain::Target, &refs, 64).unwrap().0
        };
        let protos = compute_prototypes(
            &feats(&episode.support),
            &episode.support_labels(),
            &episode.class_ids,
        )
        .unwrap();
        let labels = episode.query_labels();
        let q = feats(&episode.query);
        let ce = q
            .iter()
            .zip(&labels)
            .map(|(f, &l)| -crate::loss::class_log_probs(f, &protos)[protos.index_of(l).unwrap()])
            .sum::<f64>()
            / q.len() as f64;
        assert!((loss.total - ce).abs() < 1e-10);
    }

    #[test]
    fn identical_seeds_are_bitwise_reproducible() {
        let samples = separable_samples(10, 4, 3, 2);
        let data = EpisodeSource::new(&samples, episode_cfg(2), Domain::Target).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::ApntStar,
            total_iterations: 10,
            ..Default::default()
        };
        let run = || {
            run_schedule(None, &data, tiny_model(), &cfg, |_| {})
                .unwrap()
                .0
        };
        assert_eq!(
            encode_checkpoint(&run()).unwrap(),
            encode_checkpoint(&run()).unwrap()
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let samples = separable_samples(10, 4, 3, 3);
        let data = EpisodeSource::new(&samples, episode_cfg(3), Domain::Target).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::ApntStar,
            total_iterations: 15,
            ..Default::default()
        };
        let params = init_params(tiny_model(), None, Some(4), 0).unwrap();
        let mut straight = Trainer::new(params.clone(), cfg).unwrap();
        straight.run_until(None, &data, 15, |_| {}).unwrap();

        let mut first = Trainer::new(params, cfg).unwrap();
        first.run_until(None, &data, 5, |_| {}).unwrap();
        let bytes = encode_checkpoint(&first.checkpoint()).unwrap();
        let ck = crate::model::decode_checkpoint(&bytes).unwrap();
        let mut resumed = Trainer::resume(&ck, cfg).unwrap();
        assert_eq!(resumed.iteration(), 5);
        resumed.run_until(None, &data, 15, |_| {}).unwrap();
        assert_eq!(resumed.params(), straight.params());
        assert_eq!(resumed.optimizer(), straight.optimizer());
        assert!(matches!(
            Trainer::resume(&ck, TrainConfig { seed: 9, ..cfg }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn phases_share_everything_but_mappings() {
        let source = separable_samples(10, 5, 3, 4);
        let target = separable_samples(10, 4, 3, 5);
        let src = EpisodeSource::new(&source, episode_cfg(4), Domain::Source).unwrap();
        let tgt = EpisodeSource::new(&target, episode_cfg(5), Domain::Target).unwrap();
        let cfg = TrainConfig {
            total_iterations: 6,
            source_iterations: 3,
            ..Default::default()
        };
        let p0 = init_params(tiny_model(), Some(5), Some(4), 0).unwrap();
        let mut t = Trainer::new(p0.clone(), cfg).unwrap();
        let log = t.run_until(Some(&src), &tgt, 3, |_| {}).unwrap();
        assert!(log.iter().all(|e| e.phase == Domain::Source));
        assert_eq!(
            t.params().get("map.target.weight"),
            p0.get("map.target.weight")
        );
        let after_source = t.params().clone();
        let log = t.run_until(Some(&src), &tgt, 100, |_| {}).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|e| e.phase == Domain::Target));
        assert_eq!(
            t.params().get("map.source.weight"),
            after_source.get("map.source.weight")
        );
        for (name, tensor) in t.params().iter() {
            if ModelParams::is_shared(name) && !name.ends_with("bias") && !name.ends_with("gain") {
                assert_ne!(
                    Some(tensor),
                    after_source.get(name),
                    "{name} was not updated"
                );
            }
        }
        assert!(t.is_finished());
        let needs_source = Trainer::new(p0, cfg).unwrap().step(None, &tgt);
        assert!(matches!(needs_source, Err(Error::Config(_))));
    }

    #[test]
    fn schedule_log_has_one_line_per_iteration() {
        let samples = separable_samples(10, 4, 3, 6);
        let data = EpisodeSource::new(&samples, episode_cfg(6), Domain::Target).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::ApntStar,
            total_iterations: 7,
            ..Default::default()
        };
        let mut lines = Vec::new();
        let (_, log) = run_schedule(None, &data, tiny_model(), &cfg, |e| {
            lines.push(e.to_string())
        })
        .unwrap();
        assert_eq!(log.len(), 7);
        assert_eq!(lines.len(), 7);
        let fields: Vec<&str> = lines[6].split('\t').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], "7");
        assert_eq!(fields[1], "target");
        let apnt = TrainConfig {
            mode: TrainMode::Apnt,
            ..cfg
        };
        assert!(matches!(
            run_schedule(None, &data, tiny_model(), &apnt, |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_loss_names_the_episode() {
        let mut samples = separable_samples(10, 4, 3, 7);
        let data_ok = EpisodeSource::new(&samples, episode_cfg(7), Domain::Target).unwrap();
        let ep = sample_episode(&data_ok.pool, &data_ok.episode, 4).unwrap();
        samples[ep.support[0]].pixels[0] = f64::NAN;
        let data = EpisodeSource::new(&samples, episode_cfg(7), Domain::Target).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::ApntStar,
            mix_mode: MixMode::CutMix,
            ..Default::default()
        };
        let mut params = init_params(tiny_model(), None, Some(4), 0).unwrap();
        let mut opt = OptimizerState::new(&params);
        let err = train_step(&mut params, &mut opt, &data, 4, &cfg).unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteLoss { episode: 4, .. }),
            "{err}"
        );
    }

    #[test]
    fn mode_and_config_parsing() {
        assert_eq!("APNT*".parse::<TrainMode>().unwrap(), TrainMode::ApntStar);
        assert!("apnt+".parse::<TrainMode>().is_err());
        let star = TrainConfig {
            mode: TrainMode::ApntStar,
            source_iterations: 5000,
            ..Default::default()
        };
        assert!(star.validate().is_ok());
        assert_eq!(star.source_phase(), 0);
        assert!(TrainConfig {
            source_iterations: 5000,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
