//! Channel mapping, class-token sequences and the self-attention encoder
//! stack.

mod checkpoint;
mod forward;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use forward::{
    attention_map_from_token_row, build_sequence, encoder_forward, encoder_forward_token,
    extract_features_and_attention, infer, map_channels, Bound, EncoderOutput, FeatureBatch,
    LAYER_NORM_EPS,
};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_feed: usize,
    pub n_encoders: usize,
    pub patch_size: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 100,
            n_heads: 8,
            d_head: 64,
            d_feed: 1024,
            n_encoders: 2,
            patch_size: 9,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_feed", self.d_feed),
            ("n_encoders", self.n_encoders),
            ("patch_size", self.patch_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch_size must be odd, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Pixels per patch, excluding the class token.
    pub fn pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Which mapping layer a batch goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

pub(crate) fn map_weight_name(domain: Domain) -> String {
    format!("map.{}.weight", domain.name())
}

pub(crate) fn map_bias_name(domain: Domain) -> String {
    format!("map.{}.bias", domain.name())
}

pub const TOKEN: &str = "token";

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: TransformerConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// All-zero parameters with the right shapes. `None` omits a domain's
    /// mapping layer.
    pub fn zeros(
        config: TransformerConfig,
        source_bands: Option<usize>,
        target_bands: Option<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut p = Self {
            config,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        for (domain, bands) in [
            (Domain::Source, source_bands),
            (Domain::Target, target_bands),
        ] {
            if let Some(b) = bands {
                if b == 0 {
                    return Err(Error::Config(format!(
                        "{} band count must be positive",
                        domain.name()
                    )));
                }
                p.insert(map_weight_name(domain), Tensor::zeros(b, d));
                p.insert(map_bias_name(domain), Tensor::zeros(1, d));
            }
        }
        p.insert(TOKEN.into(), Tensor::zeros(1, d));
        for e in 0..config.n_encoders {
            for h in 0..config.n_heads {
                for w in ["wq", "wk", "wv"] {
                    p.insert(
                        format!("enc{e}.head{h}.{w}"),
                        Tensor::zeros(d, config.d_head),
                    );
                }
            }
            p.insert(
                format!("enc{e}.merge.weight"),
                Tensor::zeros(config.n_heads * config.d_head, d),
            );
            p.insert(format!("enc{e}.merge.bias"), Tensor::zeros(1, d));
            p.insert(format!("enc{e}.ln1.gain"), Tensor::filled(1, d, 1.0));
            p.insert(format!("enc{e}.ln1.bias"), Tensor::zeros(1, d));
            p.insert(
                format!("enc{e}.ff1.weight"),
                Tensor::zeros(d, config.d_feed),
            );
            p.insert(format!("enc{e}.ff1.bias"), Tensor::zeros(1, config.d_feed));
            p.insert(
                format!("enc{e}.ff2.weight"),
                Tensor::zeros(config.d_feed, d),
            );
            p.insert(format!("enc{e}.ff2.bias"), Tensor::zeros(1, d));
            p.insert(format!("enc{e}.ln2.gain"), Tensor::filled(1, d, 1.0));
            p.insert(format!("enc{e}.ln2.bias"), Tensor::zeros(1, d));
        }
        Ok(p)
    }

    fn insert(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Band count accepted by a domain's mapping layer.
    pub fn bands(&self, domain: Domain) -> Option<usize> {
        self.get(&map_weight_name(domain)).map(Tensor::rows)
    }

    pub fn has_domain(&self, domain: Domain) -> bool {
        self.position(&map_weight_name(domain)).is_some()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Names of the parameters used by both domains.
    pub fn is_shared(name: &str) -> bool {
        !name.starts_with("map.")
    }

    /// Replaces every tensor; shapes must match the current ones.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len()
            || tensors
                .iter()
                .zip(&self.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape(
                "replacement tensors do not match parameter shapes",
            ));
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// `W×H` pixel-importance grid from the class token's attention row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    size: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::shape(format!(
                "attention map {size}x{size} from {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Argument(
                "attention entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { size, values })
    }

    /// Every pixel weighted `1/(size²)`.
    pub fn uniform(size: usize) -> Self {
        let n = size * size;
        Self {
            size,
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}
