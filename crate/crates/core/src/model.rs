//! Post-norm encoder-decoder transformer with an addressable parameter
//! registry and capture of every layer's token representations and every
//! head's attention distributions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Segment, Var};
use crate::error::{Error, Result};
use crate::pruning::MaskSet;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Encoder,
    Decoder,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Src,
    Tgt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

    fn suffix(self) -> &'static str {
        match self {
            Proj::Q => "Wq",
            Proj::K => "Wk",
            Proj::V => "Wv",
            Proj::O => "Wo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    SelfAttn(Proj),
    CrossAttn(Proj),
    Fc1,
    Fc1Bias,
    Fc2,
    Fc2Bias,
    /// Layer-norm gain of the n-th sublayer (1-based).
    LnGain(u8),
    LnBias(u8),
}

/// Coarse grouping used by sparsity reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindGroup {
    SelfAttn,
    CrossAttn,
    Fc,
}

impl KindGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            KindGroup::SelfAttn => "self_attn",
            KindGroup::CrossAttn => "cross_attn",
            KindGroup::Fc => "fc",
        }
    }
}

/// Structured address of one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModulePath {
    Embedding(Side),
    OutputProj,
    OutputBias,
    Layer {
        component: Component,
        /// 1-based layer index.
        layer: usize,
        kind: LayerKind,
    },
}

impl ModulePath {
    pub fn layer(component: Component, layer: usize, kind: LayerKind) -> Self {
        ModulePath::Layer {
            component,
            layer,
            kind,
        }
    }

    /// Matrix weights of attention projections and feed-forward layers.
    pub fn is_prunable(&self) -> bool {
        matches!(
            self,
            ModulePath::Layer {
                kind: LayerKind::SelfAttn(_) | LayerKind::CrossAttn(_) | LayerKind::Fc1 | LayerKind::Fc2,
                ..
            }
        )
    }

    /// Token embeddings and the output projection that mirrors them.
    pub fn is_embedding(&self) -> bool {
        matches!(
            self,
            ModulePath::Embedding(_) | ModulePath::OutputProj | ModulePath::OutputBias
        )
    }

    pub fn group(&self) -> Option<KindGroup> {
        match self {
            ModulePath::Layer { kind, .. } => match kind {
                LayerKind::SelfAttn(_) => Some(KindGroup::SelfAttn),
                LayerKind::CrossAttn(_) => Some(KindGroup::CrossAttn),
                LayerKind::Fc1 | LayerKind::Fc2 => Some(KindGroup::Fc),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn component_layer(&self) -> Option<(Component, usize)> {
        match self {
            ModulePath::Layer {
                component, layer, ..
            } => Some((*component, *layer)),
            _ => None,
        }
    }
}

impl fmt::Display for ModulePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModulePath::Embedding(Side::Src) => f.write_str("embedding.src"),
            ModulePath::Embedding(Side::Tgt) => f.write_str("embedding.tgt"),
            ModulePath::OutputProj => f.write_str("output_proj"),
            ModulePath::OutputBias => f.write_str("output_proj.bias"),
            ModulePath::Layer {
                component,
                layer,
                kind,
            } => {
                write!(f, "{}.{}.", component.as_str(), layer)?;
                match kind {
                    LayerKind::SelfAttn(p) => write!(f, "self_attn.{}", p.suffix()),
                    LayerKind::CrossAttn(p) => write!(f, "cross_attn.{}", p.suffix()),
                    LayerKind::Fc1 => f.write_str("fc1"),
                    LayerKind::Fc1Bias => f.write_str("fc1.bias"),
                    LayerKind::Fc2 => f.write_str("fc2"),
                    LayerKind::Fc2Bias => f.write_str("fc2.bias"),
                    LayerKind::LnGain(i) => write!(f, "ln{}.gain", i),
                    LayerKind::LnBias(i) => write!(f, "ln{}.bias", i),
                }
            }
        }
    }
}

impl FromStr for ModulePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown module path `{}`", s));
        match s {
            "embedding.src" => return Ok(ModulePath::Embedding(Side::Src)),
            "embedding.tgt" => return Ok(ModulePath::Embedding(Side::Tgt)),
            "output_proj" => return Ok(ModulePath::OutputProj),
            "output_proj.bias" => return Ok(ModulePath::OutputBias),
            _ => {}
        }
        let mut parts = s.splitn(3, '.');
        let component = match parts.next() {
            Some("encoder") => Component::Encoder,
            Some("decoder") => Component::Decoder,
            _ => return Err(bad()),
        };
        let layer: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let rest = parts.next().ok_or_else(bad)?;
        let proj = |name: &str| match name {
            "Wq" => Some(Proj::Q),
            "Wk" => Some(Proj::K),
            "Wv" => Some(Proj::V),
            "Wo" => Some(Proj::O),
            _ => None,
        };
        let kind = if let Some(p) = rest.strip_prefix("self_attn.") {
            LayerKind::SelfAttn(proj(p).ok_or_else(bad)?)
        } else if let Some(p) = rest.strip_prefix("cross_attn.") {
            LayerKind::CrossAttn(proj(p).ok_or_else(bad)?)
        } else {
            match rest {
                "fc1" => LayerKind::Fc1,
                "fc1.bias" => LayerKind::Fc1Bias,
                "fc2" => LayerKind::Fc2,
                "fc2.bias" => LayerKind::Fc2Bias,
                other => {
                    let (ln, what) = other.split_once('.').ok_or_else(bad)?;
                    let idx: u8 = ln
                        .strip_prefix("ln")
                        .and_then(|i| i.parse().ok())
                        .ok_or_else(bad)?;
                    match what {
                        "gain" => LayerKind::LnGain(idx),
                        "bias" => LayerKind::LnBias(idx),
                        _ => return Err(bad()),
                    }
                }
            }
        };
        Ok(ModulePath::layer(component, layer, kind))
    }
}

impl Ord for ModulePath {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.to_string().cmp(&other.to_string())
    }
}

impl PartialOrd for ModulePath {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for ModulePath {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModulePath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            src_vocab: 0,
            tgt_vocab: 0,
            max_len: 64,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(mut self, src_vocab: usize, tgt_vocab: usize) -> Self {
        self.src_vocab = src_vocab;
        self.tgt_vocab = tgt_vocab;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("model: {}", m)));
        if self.num_layers == 0 {
            return fail("num_layers must be >= 1");
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail("model_dim must be a positive multiple of num_heads");
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be >= 1");
        }
        if self.src_vocab <= EOS_ID || self.tgt_vocab <= EOS_ID {
            return fail("vocabularies must contain tokens beyond the reserved specials");
        }
        if self.max_len == 0 {
            return fail("max_len must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.ln_eps <= 0.0 {
            return fail("ln_eps must be positive");
        }
        Ok(())
    }

    /// Every parameter path with its shape, in registry order.
    pub fn parameter_shapes(&self) -> BTreeMap<ModulePath, Vec<usize>> {
        let d = self.model_dim;
        let mut shapes = BTreeMap::new();
        shapes.insert(ModulePath::Embedding(Side::Src), vec![self.src_vocab, d]);
        shapes.insert(ModulePath::Embedding(Side::Tgt), vec![self.tgt_vocab, d]);
        shapes.insert(ModulePath::OutputProj, vec![d, self.tgt_vocab]);
        shapes.insert(ModulePath::OutputBias, vec![self.tgt_vocab]);
        for component in [Component::Encoder, Component::Decoder] {
            let norms = if component == Component::Encoder { 2 } else { 3 };
            for layer in 1..=self.num_layers {
                let mut put = |kind, shape: Vec<usize>| {
                    shapes.insert(ModulePath::layer(component, layer, kind), shape);
                };
                for p in Proj::ALL {
                    put(LayerKind::SelfAttn(p), vec![d, d]);
                    if component == Component::Decoder {
                        put(LayerKind::CrossAttn(p), vec![d, d]);
                    }
                }
                put(LayerKind::Fc1, vec![d, self.ffn_dim]);
                put(LayerKind::Fc1Bias, vec![self.ffn_dim]);
                put(LayerKind::Fc2, vec![self.ffn_dim, d]);
                put(LayerKind::Fc2Bias, vec![d]);
                for i in 1..=norms {
                    put(LayerKind::LnGain(i), vec![d]);
                    put(LayerKind::LnBias(i), vec![d]);
                }
            }
        }
        shapes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    All,
    /// Everything except token embeddings and the output projection.
    NonEmbedding,
    /// Matrix weights eligible for pruning.
    Prunable,
}

impl ParamScope {
    pub fn contains(self, path: &ModulePath) -> bool {
        match self {
            ParamScope::All => true,
            ParamScope::NonEmbedding => !path.is_embedding(),
            ParamScope::Prunable => path.is_prunable(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }
}

/// All trainable tensors keyed by path; iteration is lexicographic on the
/// path string.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterRegistry {
    params: BTreeMap<ModulePath, Parameter>,
}

impl ParameterRegistry {
    /// Xavier-uniform matrices, `N(0, d^-1/2)` embeddings, unit gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim as f64;
        let emb = Normal::new(0.0, d.powf(-0.5)).expect("positive std");
        let mut params = BTreeMap::new();
        for (path, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match path {
                ModulePath::Embedding(_) => (0..n).map(|_| emb.sample(&mut rng)).collect(),
                ModulePath::OutputBias => vec![0.0; n],
                ModulePath::OutputProj => xavier(&mut rng, shape[0], shape[1]),
                ModulePath::Layer { kind, .. } => match kind {
                    LayerKind::LnGain(_) => vec![1.0; n],
                    LayerKind::LnBias(_) | LayerKind::Fc1Bias | LayerKind::Fc2Bias => vec![0.0; n],
                    _ => xavier(&mut rng, shape[0], shape[1]),
                },
            };
            params.insert(path, Parameter::new(Tensor::new(shape, data)?));
        }
        Ok(ParameterRegistry { params })
    }

    pub fn from_values(values: BTreeMap<ModulePath, Tensor>) -> Self {
        ParameterRegistry {
            params: values
                .into_iter()
                .map(|(p, v)| (p, Parameter::new(v)))
                .collect(),
        }
    }

    pub fn get(&self, path: &ModulePath) -> Option<&Parameter> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &ModulePath) -> Option<&mut Parameter> {
        self.params.get_mut(path)
    }

    pub fn value(&self, path: &ModulePath) -> Result<&Tensor> {
        self.params
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("registry has no `{}`", path)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModulePath, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ModulePath, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &ModulePath> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Exact scalar count under `scope`.
    pub fn count_params(&self, scope: ParamScope) -> usize {
        self.params
            .iter()
            .filter(|(p, _)| scope.contains(p))
            .map(|(_, v)| v.value.len())
            .sum()
    }

    /// Checks the registry covers exactly the paths and shapes of `config`.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let shapes = config.parameter_shapes();
        if shapes.len() != self.params.len() {
            return Err(Error::shape(
                "registry",
                format!("{} tensors, config expects {}", self.params.len(), shapes.len()),
            ));
        }
        for (path, shape) in shapes {
            let p = self.value(&path)?;
            if p.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "registry",
                    format!("`{}` has shape {:?}, expected {:?}", path, p.shape(), shape),
                ));
            }
        }
        Ok(())
    }

    /// Copy with every masked scalar set to `0.0`.
    pub fn masked(&self, masks: &MaskSet) -> Result<Self> {
        masks.check_against(self)?;
        let mut out = self.clone();
        for (path, param) in out.params.iter_mut() {
            if let Some(mask) = masks.get(path) {
                for (v, keep) in param.value.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect()
}

/// `sin`/`cos` positional encodings for positions `0..len`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionType {
    EncSelf,
    EncDec,
    DecSelf,
}

impl AttentionType {
    pub const ALL: [AttentionType; 3] = [
        AttentionType::EncSelf,
        AttentionType::EncDec,
        AttentionType::DecSelf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionType::EncSelf => "enc-self",
            AttentionType::EncDec => "enc-dec",
            AttentionType::DecSelf => "dec-self",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            AttentionType::EncSelf => 0,
            AttentionType::EncDec => 1,
            AttentionType::DecSelf => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        AttentionType::ALL.get(c as usize).copied()
    }
}

/// Provenance of one representation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub sentence: u32,
    pub position: u32,
    pub token: u32,
}

/// Post-layer token representations for every encoder and decoder layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationDump {
    /// `encoder[l]` is layer `l + 1`: rows = source tokens, cols = d.
    pub encoder: Vec<Tensor>,
    /// `decoder[l]`: rows = decoder input positions (BOS + target prefix).
    pub decoder: Vec<Tensor>,
    pub encoder_tokens: Vec<TokenMeta>,
    pub decoder_tokens: Vec<TokenMeta>,
}

impl ActivationDump {
    pub fn layers(&self, component: Component) -> &[Tensor] {
        match component {
            Component::Encoder => &self.encoder,
            Component::Decoder => &self.decoder,
        }
    }

    pub fn tokens(&self, component: Component) -> &[TokenMeta] {
        match component {
            Component::Encoder => &self.encoder_tokens,
            Component::Decoder => &self.decoder_tokens,
        }
    }
}

/// Attention maps for one (type, layer): per sentence, `H × q_len × k_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub heads: usize,
    pub sentences: Vec<AttentionBlockSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockSet {
    pub q_len: usize,
    pub k_len: usize,
    /// Head-major: `probs[h * q_len * k_len + i * k_len + j]`.
    pub probs: Vec<f64>,
}

impl AttentionBlockSet {
    pub fn distribution(&self, head: usize, query: usize) -> &[f64] {
        let base = head * self.q_len * self.k_len + query * self.k_len;
        &self.probs[base..base + self.k_len]
    }

    /// Stacked head weights for the pair `(query, key)`.
    pub fn pair_vector(&self, heads: usize, query: usize, key: usize) -> Vec<f64> {
        (0..heads)
            .map(|h| self.probs[h * self.q_len * self.k_len + query * self.k_len + key])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionDump {
    pub maps: BTreeMap<(AttentionType, usize), AttentionMaps>,
}

impl AttentionDump {
    pub fn get(&self, kind: AttentionType, layer: usize) -> Option<&AttentionMaps> {
        self.maps.get(&(kind, layer))
    }
}

/// One source/target sentence pair, as token ids without BOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub struct ForwardOutput {
    /// Rows: for each sentence, `tgt.len() + 1` positions predicting
    /// `tgt ++ [EOS]`.
    pub logits: Tensor,
    pub activations: ActivationDump,
    pub attention: AttentionDump,
}

/// Graph handles for every registry tensor.
pub(crate) struct Weights {
    vars: BTreeMap<ModulePath, Var>,
}

impl Weights {
    /// Adds every parameter to `graph`, zeroing masked scalars.
    pub(crate) fn load(
        graph: &mut Graph,
        registry: &ParameterRegistry,
        masks: Option<&MaskSet>,
        trainable: bool,
    ) -> Result<Self> {
        if let Some(m) = masks {
            m.check_against(registry)?;
        }
        let mut vars = BTreeMap::new();
        for (path, param) in registry.iter() {
            let mut value = param.value.clone();
            if let Some(mask) = masks.and_then(|m| m.get(path)) {
                for (v, keep) in value.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
            let var = if trainable {
                graph.param(value)
            } else {
                graph.constant(value)
            };
            vars.insert(*path, var);
        }
        Ok(Weights { vars })
    }

    pub(crate) fn get(&self, path: &ModulePath) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing weight `{}`", path)))
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (&ModulePath, &Var)> {
        self.vars.iter()
    }

    fn layer(&self, c: Component, l: usize, k: LayerKind) -> Result<Var> {
        self.get(&ModulePath::layer(c, l, k))
    }
}

/// Graph nodes produced by one forward pass.
pub(crate) struct ForwardVars {
    pub logits: Var,
    pub encoder_layers: Vec<Var>,
    pub decoder_layers: Vec<Var>,
    pub attention: Vec<(AttentionType, usize, Var)>,
}

pub(crate) struct Transformer<'a, R: Rng> {
    pub config: &'a ModelConfig,
    pub weights: &'a Weights,
    /// Dropout source; `None` disables dropout.
    pub rng: Option<&'a mut R>,
}

impl<R: Rng> Transformer<'_, R> {
    fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, rng),
            _ => Ok(x),
        }
    }

    fn embed(&mut self, g: &mut Graph, side: Side, seqs: &[&[usize]]) -> Result<Var> {
        let (vocab, d) = match side {
            Side::Src => (self.config.src_vocab, self.config.model_dim),
            Side::Tgt => (self.config.tgt_vocab, self.config.model_dim),
        };
        let mut ids = Vec::new();
        let mut pe = Vec::new();
        for s in seqs {
            if s.len() > self.config.max_len {
                return Err(Error::invalid(format!(
                    "sequence of length {} exceeds max_len {}",
                    s.len(),
                    self.config.max_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= vocab) {
                return Err(Error::invalid(format!("token id {} outside vocabulary {}", bad, vocab)));
            }
            ids.extend_from_slice(s);
            pe.extend(positional_encoding(s.len(), d));
        }
        let table = self.weights.get(&ModulePath::Embedding(side))?;
        let x = g.gather(table, &ids)?;
        let x = g.scale(x, (d as f64).sqrt())?;
        let pe = g.constant(Tensor::matrix(ids.len(), d, pe)?);
        let x = g.add(x, pe)?;
        self.dropout(g, x)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &mut self,
        g: &mut Graph,
        c: Component,
        l: usize,
        cross: bool,
        x: Var,
        memory: Var,
        segments: &[Segment],
        causal: bool,
    ) -> Result<(Var, Var)> {
        let w = |p| {
            if cross {
                LayerKind::CrossAttn(p)
            } else {
                LayerKind::SelfAttn(p)
            }
        };
        let wq = self.weights.layer(c, l, w(Proj::Q))?;
        let wk = self.weights.layer(c, l, w(Proj::K))?;
        let wv = self.weights.layer(c, l, w(Proj::V))?;
        let wo = self.weights.layer(c, l, w(Proj::O))?;
        let q = g.matmul(x, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let attn = g.attention(q, k, v, self.config.num_heads, segments, causal)?;
        let o = g.matmul(attn, wo)?;
        let o = self.dropout(g, o)?;
        Ok((o, attn))
    }

    fn add_norm(&mut self, g: &mut Graph, c: Component, l: usize, idx: u8, x: Var, y: Var) -> Result<Var> {
        let s = g.add(x, y)?;
        let gain = self.weights.layer(c, l, LayerKind::LnGain(idx))?;
        let bias = self.weights.layer(c, l, LayerKind::LnBias(idx))?;
        g.layer_norm(s, gain, bias, self.config.ln_eps)
    }

    fn feed_forward(&mut self, g: &mut Graph, c: Component, l: usize, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weights.layer(c, l, LayerKind::Fc1)?)?;
        let h = g.add_row(h, self.weights.layer(c, l, LayerKind::Fc1Bias)?)?;
        let h = g.relu(h)?;
        let f = g.matmul(h, self.weights.layer(c, l, LayerKind::Fc2)?)?;
        let f = g.add_row(f, self.weights.layer(c, l, LayerKind::Fc2Bias)?)?;
        self.dropout(g, f)
    }

    /// Returns the final encoder output and each layer's output.
    pub(crate) fn encode(
        &mut self,
        g: &mut Graph,
        srcs: &[&[usize]],
        attention: &mut Vec<(AttentionType, usize, Var)>,
    ) -> Result<(Var, Vec<Var>)> {
        let segments = self_segments(srcs.iter().map(|s| s.len()));
        let mut x = self.embed(g, Side::Src, srcs)?;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        let c = Component::Encoder;
        for l in 1..=self.config.num_layers {
            let (o, a) = self.attention_block(g, c, l, false, x, x, &segments, false)?;
            attention.push((AttentionType::EncSelf, l, a));
            x = self.add_norm(g, c, l, 1, x, o)?;
            let f = self.feed_forward(g, c, l, x)?;
            x = self.add_norm(g, c, l, 2, x, f)?;
            layers.push(x);
        }
        Ok((x, layers))
    }

    /// Decoder over teacher-forced inputs; returns logits and layer outputs.
    pub(crate) fn decode(
        &mut self,
        g: &mut Graph,
        memory: Var,
        src_lens: &[usize],
        dec_inputs: &[&[usize]],
        attention: &mut Vec<(AttentionType, usize, Var)>,
    ) -> Result<(Var, Vec<Var>)> {
        let layers = self.decoder_states(g, memory, src_lens, dec_inputs, attention)?;
        let logits = self.project(g, *layers.last().expect("at least one layer"))?;
        Ok((logits, layers))
    }

    fn project(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let logits = g.matmul(y, self.weights.get(&ModulePath::OutputProj)?)?;
        g.add_row(logits, self.weights.get(&ModulePath::OutputBias)?)
    }

    /// Output of every decoder layer.
    fn decoder_states(
        &mut self,
        g: &mut Graph,
        memory: Var,
        src_lens: &[usize],
        dec_inputs: &[&[usize]],
        attention: &mut Vec<(AttentionType, usize, Var)>,
    ) -> Result<Vec<Var>> {
        let self_segs = self_segments(dec_inputs.iter().map(|s| s.len()));
        let mut cross = Vec::with_capacity(src_lens.len());
        let (mut qs, mut ks) = (0, 0);
        for (s, t) in src_lens.iter().zip(dec_inputs) {
            cross.push(Segment {
                q_start: qs,
                q_len: t.len(),
                k_start: ks,
                k_len: *s,
            });
            qs += t.len();
            ks += s;
        }
        let mut y = self.embed(g, Side::Tgt, dec_inputs)?;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        let c = Component::Decoder;
        for l in 1..=self.config.num_layers {
            let (o, a) = self.attention_block(g, c, l, false, y, y, &self_segs, true)?;
            attention.push((AttentionType::DecSelf, l, a));
            y = self.add_norm(g, c, l, 1, y, o)?;
            let (o, a) = self.attention_block(g, c, l, true, y, memory, &cross, false)?;
            attention.push((AttentionType::EncDec, l, a));
            y = self.add_norm(g, c, l, 2, y, o)?;
            let f = self.feed_forward(g, c, l, y)?;
            y = self.add_norm(g, c, l, 3, y, f)?;
            layers.push(y);
        }
        Ok(layers)
    }

    pub(crate) fn forward(&mut self, g: &mut Graph, pairs: &[SentencePair]) -> Result<ForwardVars> {
        if pairs.is_empty() {
            return Err(Error::invalid("forward on an empty batch"));
        }
        if let Some(i) = pairs.iter().position(|p| p.src.is_empty()) {
            return Err(Error::invalid(format!("sentence {} has an empty source", i)));
        }
        let srcs: Vec<&[usize]> = pairs.iter().map(|p| p.src.as_slice()).collect();
        let dec_inputs: Vec<Vec<usize>> = pairs
            .iter()
            .map(|p| std::iter::once(BOS_ID).chain(p.tgt.iter().copied()).collect())
            .collect();
        let dec_refs: Vec<&[usize]> = dec_inputs.iter().map(Vec::as_slice).collect();
        let mut attention = Vec::new();
        let (memory, encoder_layers) = self.encode(g, &srcs, &mut attention)?;
        let src_lens: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
        let (logits, decoder_layers) = self.decode(g, memory, &src_lens, &dec_refs, &mut attention)?;
        Ok(ForwardVars {
            logits,
            encoder_layers,
            decoder_layers,
            attention,
        })
    }
}

fn self_segments(lens: impl Iterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    lens.map(|len| {
        let s = Segment {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        };
        start += len;
        s
    })
    .collect()
}

/// Decoder targets aligned with forward logits rows: `tgt ++ [EOS]` per sentence.
pub fn decoder_targets(pairs: &[SentencePair]) -> Vec<usize> {
    pairs
        .iter()
        .flat_map(|p| p.tgt.iter().copied().chain(std::iter::once(EOS_ID)))
        .collect()
}

/// Inference forward pass with representation and attention capture.
pub fn forward(
    config: &ModelConfig,
    registry: &ParameterRegistry,
    masks: &MaskSet,
    pairs: &[SentencePair],
) -> Result<ForwardOutput> {
    config.validate()?;
    registry.check_against(config)?;
    let mut g = Graph::new();
    let weights = Weights::load(&mut g, registry, Some(masks), false)?;
    let mut model: Transformer<'_, ChaCha8Rng> = Transformer {
        config,
        weights: &weights,
        rng: None,
    };
    let vars = model.forward(&mut g, pairs)?;

    let mut enc_tokens = Vec::new();
    let mut dec_tokens = Vec::new();
    for (si, p) in pairs.iter().enumerate() {
        for (pos, &t) in p.src.iter().enumerate() {
            enc_tokens.push(TokenMeta {
                sentence: si as u32,
                position: pos as u32,
                token: t as u32,
            });
        }
        let dec_in = std::iter::once(BOS_ID).chain(p.tgt.iter().copied());
        for (pos, t) in dec_in.enumerate() {
            dec_tokens.push(TokenMeta {
                sentence: si as u32,
                position: pos as u32,
                token: t as u32,
            });
        }
    }
    let activations = ActivationDump {
        encoder: vars.encoder_layers.iter().map(|v| g.value(*v).clone()).collect(),
        decoder: vars.decoder_layers.iter().map(|v| g.value(*v).clone()).collect(),
        encoder_tokens: enc_tokens,
        decoder_tokens: dec_tokens,
    };
    let mut attention = AttentionDump::default();
    for (kind, layer, var) in &vars.attention {
        let blocks = g.attention_blocks(*var).expect("attention node");
        let heads = config.num_heads;
        let mut sentences = Vec::with_capacity(pairs.len());
        for chunk in blocks.chunks(heads) {
            let (q_len, k_len) = (chunk[0].q_len, chunk[0].k_len);
            let mut probs = Vec::with_capacity(heads * q_len * k_len);
            for b in chunk {
                probs.extend_from_slice(b.probs);
            }
            sentences.push(AttentionBlockSet {
                q_len,
                k_len,
                probs,
            });
        }
        attention
            .maps
            .insert((*kind, *layer), AttentionMaps { heads, sentences });
    }
    Ok(ForwardOutput {
        logits: g.value(vars.logits).clone(),
        activations,
        attention,
    })
}

/// Batched greedy decoding. Each output stops before the first EOS or after
/// `max_len` tokens.
pub fn greedy_decode(
    config: &ModelConfig,
    registry: &ParameterRegistry,
    masks: &MaskSet,
    srcs: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let max_len = max_len.min(config.max_len.saturating_sub(1)).max(1);
    let mut g = Graph::new();
    let weights = Weights::load(&mut g, registry, Some(masks), false)?;
    let mut model: Transformer<'_, ChaCha8Rng> = Transformer {
        config,
        weights: &weights,
        rng: None,
    };
    let src_refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
    let mut scratch = Vec::new();
    let (memory, _) = model.encode(&mut g, &src_refs, &mut scratch)?;
    let memory = g.value(memory).clone();
    let d = config.model_dim;
    let mut offsets = Vec::with_capacity(srcs.len());
    let mut acc = 0;
    for s in srcs {
        offsets.push(acc);
        acc += s.len();
    }

    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); srcs.len()];
    let mut active: Vec<usize> = (0..srcs.len()).collect();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        // memory rows of the still-active sentences
        let mut mem = Vec::new();
        for &i in &active {
            mem.extend_from_slice(&memory.data()[offsets[i] * d..(offsets[i] + srcs[i].len()) * d]);
        }
        let rows = mem.len() / d;
        let mem = g.constant(Tensor::matrix(rows, d, mem)?);
        let inputs: Vec<Vec<usize>> = active
            .iter()
            .map(|&i| std::iter::once(BOS_ID).chain(outputs[i].iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let lens: Vec<usize> = active.iter().map(|&i| srcs[i].len()).collect();
        let states = model.decoder_states(&mut g, mem, &lens, &refs, &mut scratch)?;
        // only the last position of each prefix is needed
        let mut last = Vec::with_capacity(inputs.len());
        let mut row = 0;
        for inp in &inputs {
            row += inp.len();
            last.push(row - 1);
        }
        let y = g.value(*states.last().expect("at least one layer")).select_rows(&last)?;
        let y = g.constant(y);
        let logits = model.project(&mut g, y)?;
        let logits = g.value(logits);
        let mut still = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let next = argmax(logits.row(r));
            if next != EOS_ID {
                outputs[i].push(next);
                still.push(i);
            }
        }
        active = still;
        scratch.clear();
    }
    Ok(outputs)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            model_dim: 4,
            num_heads: 1,
            ffn_dim: 8,
            src_vocab: 10,
            tgt_vocab: 10,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn path_strings_round_trip() {
        let cfg = tiny();
        for path in cfg.parameter_shapes().keys() {
            let s = path.to_string();
            assert_eq!(s.parse::<ModulePath>().unwrap(), *path, "{}", s);
        }
        assert!("decoder.1.self_attn.Wz".parse::<ModulePath>().is_err());
    }

    #[test]
    fn cross_attention_only_in_decoder() {
        let shapes = tiny().parameter_shapes();
        assert!(shapes
            .keys()
            .filter(|p| matches!(p, ModulePath::Layer { kind: LayerKind::CrossAttn(_), .. }))
            .all(|p| p.component_layer().unwrap().0 == Component::Decoder));
    }

    #[test]
    fn count_params_by_shape_enumeration() {
        let cfg = tiny();
        let reg = ParameterRegistry::init(&cfg, 0).unwrap();
        // d=4, ffn=8, V=10, one layer each side
        let attn = 4 * 4 * 4;
        let ffn_w = 4 * 8 + 8 * 4;
        let ffn_b = 8 + 4;
        let enc_ln = 2 * 2 * 4;
        let dec_ln = 3 * 2 * 4;
        let prunable = attn + ffn_w + attn * 2 + ffn_w;
        let non_emb = prunable + 2 * ffn_b + enc_ln + dec_ln;
        let emb = 10 * 4 * 2 + 4 * 10 + 10;
        assert_eq!(reg.count_params(ParamScope::Prunable), prunable);
        assert_eq!(reg.count_params(ParamScope::NonEmbedding), non_emb);
        assert_eq!(reg.count_params(ParamScope::All), non_emb + emb);
    }

    #[test]
    fn empty_vocab_rejected() {
        let cfg = ModelConfig::default();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(ParameterRegistry::init(&cfg, 0).is_err());
    }

    #[test]
    fn registry_order_is_lexicographic() {
        let reg = ParameterRegistry::init(&tiny(), 0).unwrap();
        let names: Vec<String> = reg.paths().map(|p| p.to_string()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny();
        let reg = ParameterRegistry::init(&cfg, 3).unwrap();
        let masks = MaskSet::all_ones(&reg);
        let pairs = vec![SentencePair {
            src: vec![3, 4, 5],
            tgt: vec![6, 7],
        }];
        let out = forward(&cfg, &reg, &masks, &pairs).unwrap();
        for ((kind, _), maps) in &out.attention.maps {
            for s in &maps.sentences {
                for h in 0..maps.heads {
                    for i in 0..s.q_len {
                        let row = s.distribution(h, i);
                        let total: f64 = row.iter().sum();
                        assert!((total - 1.0).abs() < 1e-12);
                        if *kind == AttentionType::DecSelf {
                            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
                        }
                    }
                }
            }
        }
        assert_eq!(out.logits.dims2().unwrap(), (3, 10));
    }

    #[test]
    fn out_of_vocab_rejected() {
        let cfg = tiny();
        let reg = ParameterRegistry::init(&cfg, 0).unwrap();
        let masks = MaskSet::all_ones(&reg);
        let pairs = vec![SentencePair {
            src: vec![3, 40],
            tgt: vec![4],
        }];
        assert!(matches!(
            forward(&cfg, &reg, &masks, &pairs),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn forced_eos_gives_empty_output() {
        let cfg = tiny();
        let mut reg = ParameterRegistry::init(&cfg, 0).unwrap();
        for v in reg.get_mut(&ModulePath::OutputProj).unwrap().value.data_mut() {
            *v = 0.0;
        }
        reg.get_mut(&ModulePath::OutputBias).unwrap().value.data_mut()[EOS_ID] = 10.0;
        let masks = MaskSet::all_ones(&reg);
        let out = greedy_decode(&cfg, &reg, &masks, &[vec![3, 4, 5]], 5).unwrap();
        assert_eq!(out, vec![Vec::<usize>::new()]);
    }

    #[test]
    fn decode_respects_max_len() {
        let cfg = tiny();
        let mut reg = ParameterRegistry::init(&cfg, 0).unwrap();
        for v in reg.get_mut(&ModulePath::OutputProj).unwrap().value.data_mut() {
            *v = 0.0;
        }
        reg.get_mut(&ModulePath::OutputBias).unwrap().value.data_mut()[7] = 10.0;
        let masks = MaskSet::all_ones(&reg);
        let out = greedy_decode(&cfg, &reg, &masks, &[vec![3, 4], vec![5]], 3).unwrap();
        assert_eq!(out, vec![vec![7, 7, 7], vec![7, 7, 7]]);
    }
}
