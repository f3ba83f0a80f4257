use super::{map_bias_name, map_weight_name, AttentionMap, Domain, ModelParams, TOKEN};
use crate::error::{Error, Result};
use crate::hsi_data::PatchSample;
use crate::numeric::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Model parameters placed on a tape, either trainable or frozen.
#[derive(Debug)]
pub struct Bound<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn trainable(g: &mut Graph, params: &'a ModelParams) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| g.param(t.clone()))
            .collect();
        Self { params, vars }
    }

    pub fn frozen(g: &mut Graph, params: &'a ModelParams) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        Self { params, vars }
    }

    /// Wraps handles that already hold `params`' tensors, in parameter order.
    pub fn from_vars(params: &'a ModelParams, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::shape(format!(
                "{} handles for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        Ok(Self { params, vars })
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    /// Graph handles in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }
}

/// Per-pixel affine projection of the raw spectra (a 1×1 convolution).
/// Returns `(N·W·H) × d_model` rows, sample-major then row-major pixels.
pub fn map_channels(
    g: &mut Graph,
    b: &Bound,
    domain: Domain,
    patches: &[&PatchSample],
) -> Result<Var> {
    let cfg = b.params.config();
    if patches.is_empty() {
        return Err(Error::Argument("empty patch batch".into()));
    }
    let bands = b
        .params
        .bands(domain)
        .ok_or_else(|| Error::Config(format!("model has no {} mapping layer", domain.name())))?;
    for p in patches {
        if p.size != cfg.patch_size {
            return Err(Error::shape(format!(
                "patch size {} but model expects {}",
                p.size, cfg.patch_size
            )));
        }
        if p.channels != bands {
            return Err(Error::shape(format!(
                "patch has {} bands but the {} mapping expects {bands}",
                p.channels,
                domain.name()
            )));
        }
    }
    let rows = patches.len() * cfg.pixels();
    let mut data = Vec::with_capacity(rows * bands);
    for p in patches {
        data.extend_from_slice(&p.pixels);
    }
    let x = g.constant(Tensor::from_rows(rows, bands, data)?);
    let w = b.var(&map_weight_name(domain))?;
    let bias = b.var(&map_bias_name(domain))?;
    let projected = g.matmul(x, w)?;
    g.add_row(projected, bias)
}

/// Appends the class token after each sample's `pixels` rows.
pub fn build_sequence(g: &mut Graph, b: &Bound, mapped: Var, pixels: usize) -> Result<Var> {
    let token = b.var(TOKEN)?;
    g.append_token(mapped, token, pixels)
}

#[derive(Debug)]
pub struct EncoderOutput {
    pub output: Var,
    /// Per-head attention probabilities, one row per query item, `L` columns.
    pub head_attention: Vec<Var>,
    /// Mean over heads of the attention probabilities.
    pub mean_attention: Tensor,
}

/// One post-norm encoder block: multi-head self-attention with residual and
/// layer norm, then a ReLU feedforward with residual and layer norm.
pub fn encoder_forward(
    g: &mut Graph,
    b: &Bound,
    encoder: usize,
    seq: Var,
    seq_len: usize,
) -> Result<EncoderOutput> {
    encoder_block(g, b, encoder, seq, seq, seq_len)
}

/// The same block evaluated only at the class-token position of each
/// sequence. Keys and values still cover every item; the output and the
/// attention have one row per sample.
pub fn encoder_forward_token(
    g: &mut Graph,
    b: &Bound,
    encoder: usize,
    seq: Var,
    seq_len: usize,
) -> Result<EncoderOutput> {
    let samples = g.value(seq).rows() / seq_len;
    let token_rows: Vec<usize> = (0..samples).map(|n| n * seq_len + seq_len - 1).collect();
    let queries = g.select_rows(seq, &token_rows)?;
    encoder_block(g, b, encoder, seq, queries, seq_len)
}

fn encoder_block(
    g: &mut Graph,
    b: &Bound,
    encoder: usize,
    seq: Var,
    queries: Var,
    seq_len: usize,
) -> Result<EncoderOutput> {
    let cfg = *b.params.config();
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let p = |name: &str| b.var(&format!("enc{encoder}.{name}"));

    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut head_attention = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let q = g.matmul(queries, p(&format!("head{h}.wq"))?)?;
        let k = g.matmul(seq, p(&format!("head{h}.wk"))?)?;
        let v = g.matmul(seq, p(&format!("head{h}.wv"))?)?;
        let scores = g.block_scores(q, k, seq_len)?;
        let attn = g.softmax_rows(scores, scale)?;
        heads.push(g.block_matmul(attn, v, seq_len)?);
        head_attention.push(attn);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let merged = g.matmul(concat, p("merge.weight")?)?;
    let merged = g.add_row(merged, p("merge.bias")?)?;
    let residual = g.add(queries, merged)?;
    let norm = g.layer_norm_rows(residual, LAYER_NORM_EPS)?;
    let norm = g.mul_row(norm, p("ln1.gain")?)?;
    let norm1 = g.add_row(norm, p("ln1.bias")?)?;

    let hidden = g.matmul(norm1, p("ff1.weight")?)?;
    let hidden = g.add_row(hidden, p("ff1.bias")?)?;
    let hidden = g.relu(hidden)?;
    let ff = g.matmul(hidden, p("ff2.weight")?)?;
    let ff = g.add_row(ff, p("ff2.bias")?)?;
    let residual = g.add(norm1, ff)?;
    let norm = g.layer_norm_rows(residual, LAYER_NORM_EPS)?;
    let norm = g.mul_row(norm, p("ln2.gain")?)?;
    let output = g.add_row(norm, p("ln2.bias")?)?;

    let first = g.value(head_attention[0]);
    let mut mean = first.zeros_like();
    for &a in &head_attention {
        mean.data_mut()
            .iter_mut()
            .zip(g.value(a).data())
            .for_each(|(m, v)| *m += v);
    }
    let heads_n = cfg.n_heads as f64;
    mean.data_mut().iter_mut().for_each(|m| *m /= heads_n);
    Ok(EncoderOutput {
        output,
        head_attention,
        mean_attention: mean,
    })
}

/// Class-token attention row with the token's own entry dropped,
/// renormalised and laid out as a `size×size` grid.
pub fn attention_map_from_token_row(row: &[f64], patch_size: usize) -> Result<AttentionMap> {
    let pixels = patch_size * patch_size;
    if row.len() != pixels + 1 {
        return Err(Error::shape(format!(
            "attention row of {} for a {patch_size}x{patch_size} patch",
            row.len()
        )));
    }
    let row = &row[..pixels];
    let total: f64 = row.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Mixing(
            "class token puts no attention on pixels".into(),
        ));
    }
    AttentionMap::new(patch_size, row.iter().map(|v| v / total).collect())
}

#[derive(Debug)]
pub struct FeatureBatch {
    /// `N × d_model` class-token states from the last encoder.
    pub features: Var,
    /// Every encoder but the last runs over all items; the last one only at
    /// the class token.
    pub encoders: Vec<EncoderOutput>,
    patch_size: usize,
}

impl FeatureBatch {
    /// One map per sample from the last encoder's head-averaged attention.
    pub fn attention_maps(&self) -> Result<Vec<AttentionMap>> {
        let last = &self
            .encoders
            .last()
            .expect("at least one encoder")
            .mean_attention;
        (0..last.rows())
            .map(|n| attention_map_from_token_row(last.row(n), self.patch_size))
            .collect()
    }
}

pub fn extract_features_and_attention(
    g: &mut Graph,
    b: &Bound,
    domain: Domain,
    patches: &[&PatchSample],
) -> Result<FeatureBatch> {
    let cfg = *b.params.config();
    let pixels = cfg.pixels();
    let seq_len = pixels + 1;
    let mapped = map_channels(g, b, domain, patches)?;
    let mut seq = build_sequence(g, b, mapped, pixels)?;
    let mut encoders = Vec::with_capacity(cfg.n_encoders);
    for e in 0..cfg.n_encoders - 1 {
        let out = encoder_forward(g, b, e, seq, seq_len)?;
        seq = out.output;
        encoders.push(out);
    }
    let last = encoder_forward_token(g, b, cfg.n_encoders - 1, seq, seq_len)?;
    let features = last.output;
    encoders.push(last);
    Ok(FeatureBatch {
        features,
        encoders,
        patch_size: cfg.patch_size,
    })
}

/// Forward-only features and attention maps, `chunk` samples per tape.
pub fn infer(
    params: &ModelParams,
    domain: Domain,
    patches: &[&PatchSample],
    chunk: usize,
) -> Result<(Vec<Vec<f64>>, Vec<AttentionMap>)> {
    let mut features = Vec::with_capacity(patches.len());
    let mut maps = Vec::with_capacity(patches.len());
    for part in patches.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, params);
        let out = extract_features_and_attention(&mut g, &b, domain, part)?;
        let f = g.value(out.features);
        features.extend((0..f.rows()).map(|i| f.row(i).to_vec()));
        maps.extend(out.attention_maps()?);
    }
    Ok((features, maps))
}
