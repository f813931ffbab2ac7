//! Miniature CLIP-style dual encoder.
//!
//! Both towers are pre-norm transformer encoders over token sequences. Token
//! and position embeddings are summed, passed through `num_layers` blocks
//!
//! ```text
//! x ← x + Attn(LN₁(x))·Wᴼ
//! x ← x + GELU(LN₂(x)·Wᶠᶜ + bᶠᶜ)·Wᴾʳᵒʲ + bᴾʳᵒʲ
//! ```
//!
//! then a final layer norm, mean pooling over positions, a linear projection
//! to the joint space and L2 normalization.
//!
//! Parameters live in [`EncoderParams<T>`]; the same struct holds owned
//! [`Tensor`]s for storage and graph [`Var`]s during a forward pass.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::RankSelectiveAdapter;
use crate::tensor::{Graph, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} is invalid (max {max})")]
    SequenceLength { len: usize, max: usize },
    #[error("all sequences in a batch must share one length")]
    RaggedBatch,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("contrastive loss needs a batch of at least 2 pairs, got {0}")]
    DegenerateBatch(usize),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// The two towers of the dual encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Vision,
    Text,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 2] = [EncoderKind::Vision, EncoderKind::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Vision => "vision",
            EncoderKind::Text => "text",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "vision" => Ok(EncoderKind::Vision),
            "text" => Ok(EncoderKind::Text),
            other => Err(format!("unknown encoder `{other}`")),
        }
    }
}

/// The six adapter-eligible weight matrices of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Q,
    K,
    V,
    O,
    Fc,
    Proj,
}

impl Site {
    pub const ALL: [Site; 6] = [Site::Q, Site::K, Site::V, Site::O, Site::Fc, Site::Proj];
    pub const ATTENTION: [Site; 4] = [Site::Q, Site::K, Site::V, Site::O];
    pub const MLP: [Site; 2] = [Site::Fc, Site::Proj];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
            Site::Fc => "fc",
            Site::Proj => "proj",
        }
    }

    /// `(rows, cols)` of this site's weight for an encoder geometry.
    pub fn dims(self, cfg: &EncoderConfig) -> (usize, usize) {
        let (d, dm) = (cfg.hidden_dim, cfg.mlp_dim);
        match self {
            Site::Q | Site::K | Site::V | Site::O => (d, d),
            Site::Fc => (d, dm),
            Site::Proj => (dm, d),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Site {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Site::ALL
            .into_iter()
            .find(|site| site.as_str() == s)
            .ok_or_else(|| format!("unknown site `{s}`"))
    }
}

/// Identifies one adapted base matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub encoder: EncoderKind,
    pub layer: usize,
    pub site: Site,
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.encoder, self.layer, self.site)
    }
}

impl FromStr for SiteId {
    type Err = String;

    /// Parses `encoder.layer.site`, e.g. `text.1.fc`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let mut parts = s.split('.');
        let (Some(e), Some(l), Some(site), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(format!("expected encoder.layer.site, got `{s}`"));
        };
        Ok(SiteId {
            encoder: e.parse()?,
            layer: l.parse().map_err(|_| format!("bad layer index `{l}`"))?,
            site: site.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("mlp_dim", self.mlp_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: EncoderConfig,
    pub text: EncoderConfig,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    0.07
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.embed_dim != self.text.embed_dim {
            return Err(ModelError::Config(format!(
                "embedding widths differ: vision {} vs text {}",
                self.vision.embed_dim, self.text.embed_dim
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn encoder(&self, kind: EncoderKind) -> &EncoderConfig {
        match kind {
            EncoderKind::Vision => &self.vision,
            EncoderKind::Text => &self.text,
        }
    }
}

impl Default for ModelConfig {
    /// Desk-scale geometry: 2 layers, d = 64, d_m = 128, 4 heads, D = 32.
    fn default() -> Self {
        Self {
            vision: EncoderConfig {
                num_layers: 2,
                hidden_dim: 64,
                mlp_dim: 128,
                num_heads: 4,
                vocab_size: crate::synth::IMAGE_VOCAB,
                max_seq_len: crate::synth::IMAGE_SEQ_LEN,
                embed_dim: 32,
            },
            text: EncoderConfig {
                num_layers: 2,
                hidden_dim: 64,
                mlp_dim: 128,
                num_heads: 4,
                vocab_size: crate::synth::TEXT_VOCAB,
                max_seq_len: crate::synth::TEXT_SEQ_LEN,
                embed_dim: 32,
            },
            temperature: default_temperature(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_fc: T,
    pub b_fc: T,
    pub w_proj: T,
    pub b_proj: T,
}

impl<T> LayerParams<T> {
    pub fn site(&self, site: Site) -> &T {
        match site {
            Site::Q => &self.wq,
            Site::K => &self.wk,
            Site::V => &self.wv,
            Site::O => &self.wo,
            Site::Fc => &self.w_fc,
            Site::Proj => &self.w_proj,
        }
    }

    pub fn site_mut(&mut self, site: Site) -> &mut T {
        match site {
            Site::Q => &mut self.wq,
            Site::K => &mut self.wk,
            Site::V => &mut self.wv,
            Site::O => &mut self.wo,
            Site::Fc => &mut self.w_fc,
            Site::Proj => &mut self.w_proj,
        }
    }

    fn named(&self) -> [(&'static str, &T); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut T); 12] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_fc", &mut self.w_fc),
            ("b_fc", &mut self.b_fc),
            ("w_proj", &mut self.w_proj),
            ("b_proj", &mut self.b_proj),
        ]
    }

    fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> std::result::Result<U, E>) -> std::result::Result<LayerParams<U>, E> {
        Ok(LayerParams {
            ln1_gain: f(&self.ln1_gain)?,
            ln1_bias: f(&self.ln1_bias)?,
            wq: f(&self.wq)?,
            wk: f(&self.wk)?,
            wv: f(&self.wv)?,
            wo: f(&self.wo)?,
            ln2_gain: f(&self.ln2_gain)?,
            ln2_bias: f(&self.ln2_bias)?,
            w_fc: f(&self.w_fc)?,
            b_fc: f(&self.b_fc)?,
            w_proj: f(&self.w_proj)?,
            b_proj: f(&self.b_proj)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: T,
    pub final_bias: T,
    pub projection: T,
}

impl<T> EncoderParams<T> {
    /// Every parameter with a stable dotted name, in storage order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("projection".to_string(), &self.projection));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out.push(("projection".to_string(), &mut self.projection));
        out
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> std::result::Result<U, E>) -> std::result::Result<EncoderParams<U>, E> {
        Ok(EncoderParams {
            token_embedding: f(&self.token_embedding)?,
            position_embedding: f(&self.position_embedding)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.try_map(&mut f))
                .collect::<std::result::Result<_, _>>()?,
            final_gain: f(&self.final_gain)?,
            final_bias: f(&self.final_bias)?,
            projection: f(&self.projection)?,
        })
    }
}

impl EncoderParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let (d, dm) = (cfg.hidden_dim, cfg.mlp_dim);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        // residual-branch outputs shrink with depth
        let out_scale = 1.0 / (2.0 * cfg.num_layers as f64).sqrt();
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                wq: Tensor::normal(&[d, d], fan(d), rng),
                wk: Tensor::normal(&[d, d], fan(d), rng),
                wv: Tensor::normal(&[d, d], fan(d), rng),
                wo: Tensor::normal(&[d, d], fan(d) * out_scale, rng),
                ln2_gain: Tensor::ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                w_fc: Tensor::normal(&[d, dm], fan(d), rng),
                b_fc: Tensor::zeros(&[dm]),
                w_proj: Tensor::normal(&[dm, d], fan(dm) * out_scale, rng),
                b_proj: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            token_embedding: Tensor::normal(&[cfg.vocab_size, d], 1.0, rng),
            position_embedding: Tensor::normal(&[cfg.max_seq_len, d], 0.5, rng),
            layers,
            final_gain: Tensor::ones(&[d]),
            final_bias: Tensor::zeros(&[d]),
            projection: Tensor::normal(&[d, cfg.embed_dim], fan(d), rng),
        }
    }
}

/// Shapes of every stored parameter for a geometry, in storage order.
pub fn parameter_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dm) = (cfg.hidden_dim, cfg.mlp_dim);
    let layer = |i: usize| {
        [
            ("ln1_gain", vec![d]),
            ("ln1_bias", vec![d]),
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("ln2_gain", vec![d]),
            ("ln2_bias", vec![d]),
            ("w_fc", vec![d, dm]),
            ("b_fc", vec![dm]),
            ("w_proj", vec![dm, d]),
            ("b_proj", vec![d]),
        ]
        .into_iter()
        .map(move |(n, s)| (format!("layers.{i}.{n}"), s))
    };
    let mut out = vec![
        ("token_embedding".to_string(), vec![cfg.vocab_size, d]),
        ("position_embedding".to_string(), vec![cfg.max_seq_len, d]),
    ];
    out.extend((0..cfg.num_layers).flat_map(layer));
    out.push(("final_gain".to_string(), vec![d]));
    out.push(("final_bias".to_string(), vec![d]));
    out.push(("projection".to_string(), vec![d, cfg.embed_dim]));
    out
}

/// Which leaves of a bound model receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// Graph handles for one adapter's factors.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub w: Var,
}

/// A model pushed into a [`Graph`]; adapted sites already hold `W₀ + ΔW`.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub vision: EncoderParams<Var>,
    pub text: EncoderParams<Var>,
    /// Parallel to `DualEncoder::adapters`; `None` for rank-0 adapters.
    pub adapters: Vec<Option<AdapterVars>>,
}

impl BoundModel {
    pub fn encoder(&self, kind: EncoderKind) -> &EncoderParams<Var> {
        match kind {
            EncoderKind::Vision => &self.vision,
            EncoderKind::Text => &self.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub vision: EncoderParams<Tensor>,
    pub text: EncoderParams<Tensor>,
    /// Attached, not yet merged adapters.
    pub adapters: Vec<RankSelectiveAdapter>,
}

impl DualEncoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vision = EncoderParams::init(&config.vision, &mut rng);
        let text = EncoderParams::init(&config.text, &mut rng);
        Ok(Self {
            config,
            vision,
            text,
            adapters: Vec::new(),
        })
    }

    pub fn encoder(&self, kind: EncoderKind) -> &EncoderParams<Tensor> {
        match kind {
            EncoderKind::Vision => &self.vision,
            EncoderKind::Text => &self.text,
        }
    }

    pub fn encoder_mut(&mut self, kind: EncoderKind) -> &mut EncoderParams<Tensor> {
        match kind {
            EncoderKind::Vision => &mut self.vision,
            EncoderKind::Text => &mut self.text,
        }
    }

    pub fn base_weight(&self, id: SiteId) -> Option<&Tensor> {
        self.encoder(id.encoder).layers.get(id.layer).map(|l| l.site(id.site))
    }

    pub fn base_weight_mut(&mut self, id: SiteId) -> Option<&mut Tensor> {
        self.encoder_mut(id.encoder)
            .layers
            .get_mut(id.layer)
            .map(|l| l.site_mut(id.site))
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    /// Base-parameter tensors with `vision.` / `text.` prefixed names.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for kind in EncoderKind::ALL {
            out.extend(
                self.encoder(kind)
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("{kind}.{n}"), t)),
            );
        }
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let (vision, text) = (&mut self.vision, &mut self.text);
        let mut out: Vec<(String, &mut Tensor)> = vision
            .named_mut()
            .into_iter()
            .map(|(n, t)| (format!("vision.{n}"), t))
            .collect();
        out.extend(text.named_mut().into_iter().map(|(n, t)| (format!("text.{n}"), t)));
        out
    }

    /// Pushes parameters into `g`. Each adapted site becomes `W₀ + B·diag(w)·A`.
    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> Result<BoundModel> {
        let base = trainable == Trainable::Base;
        let mut push = |t: &Tensor| -> Result<Var> {
            Ok(if base {
                g.param(t.detached())
            } else {
                g.constant(t.clone())
            })
        };
        let mut vision = self.vision.try_map(&mut push)?;
        let mut text = self.text.try_map(&mut push)?;
        let mut adapters = Vec::with_capacity(self.adapters.len());
        for adapter in &self.adapters {
            let Some((a, b, w)) = adapter.factor_tensors() else {
                adapters.push(None);
                continue;
            };
            let (a, b, w) = if trainable == Trainable::Adapters {
                (g.param(a), g.param(b), g.param(w))
            } else {
                (g.constant(a), g.constant(b), g.constant(w))
            };
            let bw = g.mul_row(b, w)?;
            let delta = g.matmul(bw, a)?;
            let id = adapter.target;
            let params = match id.encoder {
                EncoderKind::Vision => &mut vision,
                EncoderKind::Text => &mut text,
            };
            let slot = params
                .layers
                .get_mut(id.layer)
                .map(|l| l.site_mut(id.site))
                .ok_or_else(|| ModelError::Config(format!("adapter targets missing layer {id}")))?;
            *slot = g.add(*slot, delta)?;
            adapters.push(Some(AdapterVars { a, b, w }));
        }
        Ok(BoundModel {
            vision,
            text,
            adapters,
        })
    }

    /// Encodes equal-length token sequences into L2-normalized rows `[B×D]`.
    pub fn encode_batch(&self, kind: EncoderKind, seqs: &[&[usize]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, Trainable::Nothing)?;
        let z = forward_encoder(&mut g, self.config.encoder(kind), bound.encoder(kind), seqs)?;
        Ok(g.value(z).detached())
    }

    pub fn encode_image(&self, tokens: &[usize]) -> Result<Tensor> {
        self.encode_one(EncoderKind::Vision, tokens)
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<Tensor> {
        self.encode_one(EncoderKind::Text, tokens)
    }

    fn encode_one(&self, kind: EncoderKind, tokens: &[usize]) -> Result<Tensor> {
        let z = self.encode_batch(kind, &[tokens])?;
        let dim = z.numel();
        Ok(z.reshape(vec![dim])?)
    }

    /// Class probabilities for one image against candidate class-name sequences.
    pub fn classify(&self, image: &[usize], classes: &[&[usize]]) -> Result<Vec<f64>> {
        if classes.is_empty() {
            return Err(ModelError::Empty("class list"));
        }
        let zv = self.encode_image(image)?;
        let zt = self.encode_batch(EncoderKind::Text, classes)?;
        classify_embeddings(zv.data(), &zt, self.temperature())
    }
}

/// Softmax over `sim(z_V, z_Tᶜ)/τ` for unit-norm rows of `text`.
pub fn classify_embeddings(image: &[f64], text: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    let (c, dim) = text.dims2("classify")?;
    if dim != image.len() {
        return Err(TensorError::ShapeMismatch {
            op: "classify",
            left: vec![image.len()],
            right: text.shape().to_vec(),
        }
        .into());
    }
    let logits: Vec<f64> = (0..c)
        .map(|i| cosine(image, &text.data()[i * dim..(i + 1) * dim]) / temperature)
        .collect();
    Ok(softmax(&logits))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn validate_tokens(cfg: &EncoderConfig, seqs: &[&[usize]]) -> Result<usize> {
    let first = seqs.first().ok_or(ModelError::Empty("token batch"))?;
    let len = first.len();
    if len == 0 || len > cfg.max_seq_len {
        return Err(ModelError::SequenceLength {
            len,
            max: cfg.max_seq_len,
        });
    }
    for seq in seqs {
        if seq.len() != len {
            return Err(ModelError::RaggedBatch);
        }
        if let Some(&token) = seq.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(len)
}

/// Runs one encoder tower on a batch; returns unit-norm embeddings `[B×D]`.
pub fn forward_encoder(
    g: &mut Graph,
    cfg: &EncoderConfig,
    p: &EncoderParams<Var>,
    seqs: &[&[usize]],
) -> Result<Var> {
    let len = validate_tokens(cfg, seqs)?;
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
    let tok = g.embedding(p.token_embedding, &ids)?;
    let pos = g.embedding(p.position_embedding, &positions)?;
    let mut x = g.add(tok, pos)?;
    for layer in &p.layers {
        let h = g.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;
        let q = g.matmul(h, layer.wq)?;
        let k = g.matmul(h, layer.wk)?;
        let v = g.matmul(h, layer.wv)?;
        let attn = g.attention(q, k, v, len, cfg.num_heads)?;
        let o = g.matmul(attn, layer.wo)?;
        x = g.add(x, o)?;

        let h = g.layer_norm(x, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
        let f = g.matmul(h, layer.w_fc)?;
        let f = g.add_row(f, layer.b_fc)?;
        let f = g.gelu(f);
        let f = g.matmul(f, layer.w_proj)?;
        let f = g.add_row(f, layer.b_proj)?;
        x = g.add(x, f)?;
    }
    let x = g.layer_norm(x, p.final_gain, p.final_bias, LN_EPS)?;
    let pooled = g.mean_pool(x, len)?;
    let z = g.matmul(pooled, p.projection)?;
    Ok(g.l2_normalize(z))
}

/// Symmetric InfoNCE over the `B×B` cosine-similarity matrix scaled by `1/τ`,
/// with matching pairs on the diagonal.
pub fn contrastive_loss(g: &mut Graph, image: Var, text: Var, temperature: f64) -> Result<Var> {
    let (bi, _) = g.value(image).dims2("contrastive_loss")?;
    let (bt, _) = g.value(text).dims2("contrastive_loss")?;
    if bi != bt {
        return Err(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            left: g.value(image).shape().to_vec(),
            right: g.value(text).shape().to_vec(),
        }
        .into());
    }
    if bi < 2 {
        return Err(ModelError::DegenerateBatch(bi));
    }
    let targets: Vec<usize> = (0..bi).collect();
    let tt = g.transpose(text)?;
    let sims = g.matmul(image, tt)?;
    let logits = g.scale(sims, 1.0 / temperature);
    let i2t = g.cross_entropy(logits, &targets)?;
    let lt = g.transpose(logits)?;
    let t2i = g.cross_entropy(lt, &targets)?;
    let both = g.add(i2t, t2i)?;
    Ok(g.scale(both, 0.5))
}

/// Contrastive loss of a model on paired (image, text) token batches.
pub fn model_loss(
    g: &mut Graph,
    model: &DualEncoder,
    bound: &BoundModel,
    images: &[&[usize]],
    texts: &[&[usize]],
) -> Result<Var> {
    let zi = forward_encoder(g, &model.config.vision, &bound.vision, images)?;
    let zt = forward_encoder(g, &model.config.text, &bound.text, texts)?;
    contrastive_loss(g, zi, zt, model.temperature())
}
