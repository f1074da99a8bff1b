//! Adam training with masked gradients, an inverse-sqrt warmup schedule that
//! can be rewound, and a checksummed binary checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{corpus_bleu, AnnotatedSentence, Lang, Tokenizer};
use crate::error::{Error, Result};
use crate::io::{sha256, sha256_hex, write_atomic, Reader, Writer};
use crate::model::{
    decoder_targets, greedy_decode, ModelConfig, ModulePath, ParameterRegistry, SentencePair,
    Transformer, Weights, EOS_ID, PAD_ID,
};
use crate::pruning::MaskSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRecipe {
    pub epochs: usize,
    /// Sentences per batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Epoch at which the rewind checkpoint is taken; defaults to halfway.
    pub rewind_epoch: Option<usize>,
    /// Zero Adam moments whenever the schedule is rewound.
    pub reset_moments: bool,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            epochs: 20,
            batch_size: 32,
            seed: 0,
            learning_rate: 2e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            grad_clip: 1.0,
            rewind_epoch: None,
            reset_moments: true,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("training: {}", m)));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.grad_clip < 0.0 {
            return fail("adam_eps must be positive and grad_clip nonnegative");
        }
        if self.rewind_point() > self.epochs {
            return fail("rewind_epoch exceeds epochs");
        }
        Ok(())
    }

    pub fn rewind_point(&self) -> usize {
        self.rewind_epoch.unwrap_or(self.epochs / 2)
    }

    pub fn schedule(&self, train_sentences: usize) -> LrSchedule {
        LrSchedule {
            peak: self.learning_rate,
            warmup_steps: self.warmup_steps,
            steps_per_epoch: train_sentences.div_ceil(self.batch_size).max(1),
            epochs: self.epochs,
        }
    }
}

/// `lr(t) = peak * min(t / warmup, sqrt(warmup / t))` for update `t >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let t = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.peak * (t / w).min((w / t).sqrt())
    }

    /// Number of updates completed before `epoch` begins.
    pub fn epoch_start(&self, epoch: usize) -> u64 {
        (epoch * self.steps_per_epoch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.epoch_start(self.epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Updates taken on the schedule; the next update uses `lr(step + 1)`.
    pub step: u64,
    /// Updates since the moments were last zeroed, for bias correction.
    pub moment_step: u64,
    pub first: BTreeMap<ModulePath, Vec<f64>>,
    pub second: BTreeMap<ModulePath, Vec<f64>>,
    pub hyper: AdamHyper,
}

impl OptimizerState {
    pub fn new(registry: &ParameterRegistry, recipe: &TrainRecipe) -> Self {
        let zeros: BTreeMap<_, _> = registry
            .iter()
            .map(|(p, v)| (*p, vec![0.0; v.value.len()]))
            .collect();
        OptimizerState {
            step: 0,
            moment_step: 0,
            first: zeros.clone(),
            second: zeros,
            hyper: AdamHyper {
                beta1: recipe.beta1,
                beta2: recipe.beta2,
                eps: recipe.adam_eps,
                learning_rate: recipe.learning_rate,
            },
        }
    }

    pub fn reset_moments(&mut self) {
        for v in self.first.values_mut().chain(self.second.values_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.moment_step = 0;
    }

    fn zero_masked_moments(&mut self, masks: &MaskSet) {
        for (path, m) in self.first.iter_mut().chain(self.second.iter_mut()) {
            masks.apply(path, m);
        }
    }
}

/// Moves the schedule to the first update of `to_epoch`; weights are not
/// touched. Moments are zeroed when `reset_moments` is set.
pub fn rewind_lr(
    state: &OptimizerState,
    schedule: &LrSchedule,
    to_epoch: usize,
    reset_moments: bool,
) -> Result<OptimizerState> {
    if to_epoch > schedule.epochs {
        return Err(Error::invalid(format!(
            "cannot rewind to epoch {} of a {}-epoch schedule",
            to_epoch, schedule.epochs
        )));
    }
    let mut out = state.clone();
    out.step = schedule.epoch_start(to_epoch);
    if reset_moments {
        out.reset_moments();
    }
    Ok(out)
}

/// Stored stream position of the training RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    pub epoch: u32,
    pub registry: ParameterRegistry,
    pub masks: MaskSet,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub registry: ParameterRegistry,
    pub masks: MaskSet,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn fresh(config: &ModelConfig, recipe: &TrainRecipe) -> Result<Self> {
        let registry = ParameterRegistry::init(config, recipe.seed)?;
        let masks = MaskSet::all_ones(&registry);
        let optimizer = OptimizerState::new(&registry, recipe);
        Ok(TrainState {
            registry,
            masks,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(recipe.seed ^ 0x5eed_0f_da7a),
        })
    }

    pub fn checkpoint(&self, digest: &str, epoch: usize) -> Checkpoint {
        Checkpoint {
            config_digest: digest.to_string(),
            epoch: epoch as u32,
            registry: self.registry.clone(),
            masks: self.masks.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        TrainState {
            registry: ck.registry.clone(),
            masks: ck.masks.clone(),
            optimizer: ck.optimizer.clone(),
            rng: ck.rng.restore(),
        }
    }
}

/// Restores unmasked weights from `stored`, zeroes masked ones, and resets
/// the optimizer to the stored schedule position with zero moments.
pub fn rewind_weights(
    masks: &MaskSet,
    stored: &Checkpoint,
    expected_digest: &str,
    rewind_epoch: usize,
) -> Result<(ParameterRegistry, OptimizerState)> {
    if stored.config_digest != expected_digest {
        return Err(Error::DigestMismatch {
            expected: expected_digest.to_string(),
            found: stored.config_digest.clone(),
        });
    }
    if stored.epoch as usize != rewind_epoch {
        return Err(Error::invalid(format!(
            "stored checkpoint is from epoch {}, rewind point is {}",
            stored.epoch, rewind_epoch
        )));
    }
    let registry = stored.registry.masked(masks)?;
    let mut optimizer = stored.optimizer.clone();
    optimizer.reset_moments();
    Ok((registry, optimizer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// State at the rewind epoch, if training passed through it.
    pub rewind: Option<Checkpoint>,
}

/// Model-token pairs for training and evaluation.
pub fn encode_pairs(tokenizer: &Tokenizer, sentences: &[AnnotatedSentence]) -> Vec<SentencePair> {
    sentences
        .iter()
        .map(|s| SentencePair {
            src: tokenizer.encode_source(s).ids,
            tgt: tokenizer.encode_target(s).ids,
        })
        .collect()
}

fn global_norm(grads: &[(ModulePath, Tensor)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// One Adam update on `batch`; returns the batch loss.
pub fn train_step(
    config: &ModelConfig,
    recipe: &TrainRecipe,
    schedule: &LrSchedule,
    state: &mut TrainState,
    batch: &[SentencePair],
) -> Result<f64> {
    let step = state.optimizer.step + 1;
    let diverged = |loss: f64| Error::Diverged { step, loss };
    let mut g = Graph::new();
    let weights = Weights::load(&mut g, &state.registry, Some(&state.masks), true)?;
    let loss_var = {
        let mut model = Transformer {
            config,
            weights: &weights,
            rng: Some(&mut state.rng),
        };
        let vars = model.forward(&mut g, batch).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(f64::NAN),
            e => e,
        })?;
        let targets = decoder_targets(batch);
        g.cross_entropy(vars.logits, &targets, PAD_ID)
            .map_err(|e| match e {
                Error::NonFinite { .. } => diverged(f64::NAN),
                e => e,
            })?
    };
    let loss = g.value(loss_var).item();
    if !loss.is_finite() {
        return Err(diverged(loss));
    }
    let mut grads = g.backward(loss_var).map_err(|e| match e {
        Error::NonFinite { .. } => diverged(loss),
        e => e,
    })?;
    let mut collected = Vec::with_capacity(state.registry.len());
    for (path, var) in weights.iter() {
        let mut grad = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(state.registry.value(path).map(|t| t.shape()).unwrap_or(&[0])));
        state.masks.apply(path, grad.data_mut());
        collected.push((*path, grad));
    }
    let norm = global_norm(&collected);
    if !norm.is_finite() {
        return Err(diverged(loss));
    }
    let clip = if recipe.grad_clip > 0.0 && norm > recipe.grad_clip {
        recipe.grad_clip / norm
    } else {
        1.0
    };

    let opt = &mut state.optimizer;
    opt.step = step;
    opt.moment_step += 1;
    let lr = schedule.lr(step);
    let h = opt.hyper;
    let t = opt.moment_step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (path, grad) in collected {
        let param = state.registry.get_mut(&path).expect("registry path");
        let m = opt.first.get_mut(&path).expect("moment path");
        let v = opt.second.get_mut(&path).expect("moment path");
        for (((w, g), m), v) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g * clip;
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + h.eps);
        }
        param.grad = grad;
    }
    Ok(loss)
}

/// Trains from the schedule position in `state` to the end of the recipe.
/// The rewind checkpoint is captured when the rewind epoch is reached.
pub fn train(
    config: &ModelConfig,
    recipe: &TrainRecipe,
    state: &mut TrainState,
    data: &[SentencePair],
    digest: &str,
) -> Result<TrainLog> {
    recipe.validate()?;
    config.validate()?;
    state.masks.check_against(&state.registry)?;
    if data.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let schedule = recipe.schedule(data.len());
    let spe = schedule.steps_per_epoch as u64;
    if state.optimizer.step % spe != 0 {
        return Err(Error::invalid(format!(
            "optimizer step {} is not an epoch boundary",
            state.optimizer.step
        )));
    }
    state.optimizer.zero_masked_moments(&state.masks);
    state.registry = state.registry.masked(&state.masks)?;
    let start = (state.optimizer.step / spe) as usize;
    let rewind_at = recipe.rewind_point();
    let mut log = TrainLog {
        epochs: Vec::new(),
        rewind: None,
    };
    if start == rewind_at {
        log.rewind = Some(state.checkpoint(digest, start));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in start..recipe.epochs {
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(recipe.batch_size) {
            let batch: Vec<SentencePair> = chunk.iter().map(|&i| data[i].clone()).collect();
            total += train_step(config, recipe, &schedule, state, &batch)?;
            steps += 1;
        }
        let mean_loss = total / steps as f64;
        log::debug!("epoch {} loss {:.4}", epoch + 1, mean_loss);
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            mean_loss,
            steps: state.optimizer.step,
        });
        if epoch + 1 == rewind_at {
            log.rewind = Some(state.checkpoint(digest, epoch + 1));
        }
    }
    Ok(log)
}

/// Corpus BLEU of greedy translations against gold targets, on surface words.
pub fn evaluate_bleu(
    config: &ModelConfig,
    registry: &ParameterRegistry,
    masks: &MaskSet,
    tokenizer: &Tokenizer,
    pairs: &[SentencePair],
    batch_size: usize,
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|p| p.src.clone()).collect();
        let limit = chunk.iter().map(|p| p.src.len() * 2 + 4).max().unwrap_or(1);
        let out = greedy_decode(config, registry, masks, &srcs, limit)?;
        for (o, p) in out.iter().zip(chunk) {
            hyps.push(tokenizer.detokenize(Lang::Tgt, o));
            refs.push(tokenizer.detokenize(Lang::Tgt, &p.tgt));
        }
    }
    debug_assert!(refs.iter().flatten().all(|w| w != &tokenizer.token_surface(Lang::Tgt, EOS_ID)));
    corpus_bleu(&hyps, &refs)
}

const MAGIC: &[u8; 8] = b"PPCKPT\0\0";
const FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    /// Magic, version, digest, epoch, optimizer scalars, RNG state,
    /// path-ordered shape table, `f32` weights and moments, mask bitsets,
    /// trailing SHA-256 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.config_digest);
        w.u32(self.epoch);
        let o = &self.optimizer;
        w.u64(o.step);
        w.u64(o.moment_step);
        for x in [o.hyper.beta1, o.hyper.beta2, o.hyper.eps, o.hyper.learning_rate] {
            w.f64(x);
        }
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);

        w.u32(self.registry.len() as u32);
        for (path, p) in self.registry.iter() {
            w.str(&path.to_string());
            w.u8(p.value.shape().len() as u8);
            for d in p.value.shape() {
                w.u32(*d as u32);
            }
        }
        for (_, p) in self.registry.iter() {
            w.f32s(p.value.data());
        }
        for (path, _) in self.registry.iter() {
            w.f32s(&o.first[path]);
            w.f32s(&o.second[path]);
        }
        let masks: Vec<_> = self.masks.iter().collect();
        w.u32(masks.len() as u32);
        for (path, mask) in masks {
            w.str(&path.to_string());
            w.u32(mask.len() as u32);
            let mut bytes = vec![0u8; mask.len().div_ceil(8)];
            for (i, keep) in mask.iter().enumerate() {
                if *keep {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            w.0.extend_from_slice(&bytes);
        }
        let sum = sha256(&w.0);
        w.0.extend_from_slice(&sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, path, kind: "checkpoint" };
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(r.err("bad magic bytes"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if sha256(body).as_slice() != sum {
            return Err(r.err("checksum mismatch; the file is corrupt or was modified"));
        }
        r.buf = body;
        r.pos = MAGIC.len();
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!("format version {} unsupported", version)));
        }
        let config_digest = r.str()?;
        let epoch = r.u32()?;
        let step = r.u64()?;
        let moment_step = r.u64()?;
        let hyper = AdamHyper {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            learning_rate: r.f64()?,
        };
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let path: ModulePath = name.parse().map_err(|_| r.err(format!("unknown path `{}`", name)))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            table.push((path, shape));
        }
        let mut values = BTreeMap::new();
        for (path, shape) in &table {
            let len = shape.iter().product();
            values.insert(*path, Tensor::new(shape.clone(), r.f32s(len)?)?);
        }
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (path, shape) in &table {
            let len = shape.iter().product();
            first.insert(*path, r.f32s(len)?);
            second.insert(*path, r.f32s(len)?);
        }
        let n_masks = r.u32()? as usize;
        let mut masks = BTreeMap::new();
        for _ in 0..n_masks {
            let name = r.str()?;
            let path: ModulePath = name.parse().map_err(|_| r.err(format!("unknown path `{}`", name)))?;
            let len = r.u32()? as usize;
            let bytes = r.take(len.div_ceil(8))?;
            let mask = (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
            masks.insert(path, mask);
        }
        if r.pos != body.len() {
            return Err(r.err("trailing bytes before checksum"));
        }
        let registry = ParameterRegistry::from_values(values);
        let masks = MaskSet::from_map(masks);
        masks.check_against(&registry).map_err(|e| r.err(e.to_string()))?;
        Ok(Checkpoint {
            config_digest,
            epoch,
            registry,
            masks,
            optimizer: OptimizerState {
                step,
                moment_step,
                first,
                second,
                hyper,
            },
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read(path)?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn file_digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule {
            peak: 1.0,
            warmup_steps: 4,
            steps_per_epoch: 10,
            epochs: 5,
        };
        assert_eq!(s.lr(1), 0.25);
        assert_eq!(s.lr(4), 1.0);
        assert_eq!(s.lr(16), 0.5);
        assert!((1..50).all(|t| s.lr(t) > 0.0));
        assert!((4..50).all(|t| s.lr(t + 1) < s.lr(t)));
    }

    #[test]
    fn rewind_to_zero_gives_initial_lr() {
        let cfg = ModelConfig {
            num_layers: 1,
            model_dim: 4,
            num_heads: 1,
            ffn_dim: 4,
            ..ModelConfig::default()
        }
        .with_vocab(8, 8);
        let reg = ParameterRegistry::init(&cfg, 0).unwrap();
        let recipe = TrainRecipe::default();
        let sched = recipe.schedule(100);
        let mut st = OptimizerState::new(&reg, &recipe);
        st.step = 77;
        let r = rewind_lr(&st, &sched, 0, true).unwrap();
        assert_eq!(r.step, 0);
        assert_eq!(sched.lr(r.step + 1), sched.lr(1));
        assert!(rewind_lr(&st, &sched, recipe.epochs + 1, true).is_err());
    }
}
