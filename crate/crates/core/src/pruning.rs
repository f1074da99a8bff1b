//! Binary weight masks, global magnitude and random pruning, and sparsity
//! accounting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::corpus::Tokenizer;
use crate::model::{Component, KindGroup, ModelConfig, ModulePath, ParamScope, ParameterRegistry, SentencePair};
use crate::training::{
    evaluate_bleu, rewind_lr, rewind_weights, train, Checkpoint, TrainRecipe, TrainState,
};

/// Per-parameter keep masks. Paths without an entry are implicitly all-ones.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSet {
    masks: BTreeMap<ModulePath, Vec<bool>>,
}

impl MaskSet {
    /// Explicit all-ones masks for every prunable path of `registry`.
    pub fn all_ones(registry: &ParameterRegistry) -> Self {
        let masks = registry
            .iter()
            .filter(|(p, _)| p.is_prunable())
            .map(|(p, v)| (*p, vec![true; v.value.len()]))
            .collect();
        MaskSet { masks }
    }

    pub fn from_map(masks: BTreeMap<ModulePath, Vec<bool>>) -> Self {
        MaskSet { masks }
    }

    pub fn get(&self, path: &ModulePath) -> Option<&[bool]> {
        self.masks.get(path).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, path: &ModulePath) -> Option<&mut Vec<bool>> {
        self.masks.get_mut(path)
    }

    pub fn insert(&mut self, path: ModulePath, mask: Vec<bool>) {
        self.masks.insert(path, mask);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModulePath, &Vec<bool>)> {
        self.masks.iter()
    }

    pub fn is_kept(&self, path: &ModulePath, index: usize) -> bool {
        self.masks.get(path).is_none_or(|m| m[index])
    }

    /// Rejects masks for unknown paths or with the wrong element count.
    pub fn check_against(&self, registry: &ParameterRegistry) -> Result<()> {
        for (path, mask) in &self.masks {
            let p = registry
                .get(path)
                .ok_or_else(|| Error::shape("mask", format!("mask for unknown path `{}`", path)))?;
            if p.value.len() != mask.len() {
                return Err(Error::shape(
                    "mask",
                    format!("`{}` has {} elements, mask has {}", path, p.value.len(), mask.len()),
                ));
            }
        }
        Ok(())
    }

    /// Masks may only zero prunable paths.
    pub fn check_prunable_only(&self) -> Result<()> {
        for (path, mask) in &self.masks {
            if !path.is_prunable() && mask.iter().any(|k| !k) {
                return Err(Error::invalid(format!("non-prunable path `{}` is masked", path)));
            }
        }
        Ok(())
    }

    pub fn pruned_count(&self) -> usize {
        self.masks.values().map(|m| m.iter().filter(|k| !**k).count()).sum()
    }

    /// Every scalar pruned in `earlier` is still pruned here.
    pub fn is_superset_of_pruned(&self, earlier: &MaskSet) -> bool {
        earlier.masks.iter().all(|(path, old)| {
            old.iter()
                .enumerate()
                .all(|(i, keep)| *keep || !self.is_kept(path, i))
        })
    }

    /// Multiplies every masked entry of `values` by zero.
    pub fn apply(&self, path: &ModulePath, values: &mut [f64]) {
        if let Some(mask) = self.masks.get(path) {
            for (v, keep) in values.iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Unmasked prunable scalars, in (path, flat index) order.
fn candidates(registry: &ParameterRegistry, masks: &MaskSet) -> Vec<(ModulePath, usize, f64)> {
    let mut out = Vec::new();
    for (path, param) in registry.iter().filter(|(p, _)| p.is_prunable()) {
        for (i, &w) in param.value.data().iter().enumerate() {
            if masks.is_kept(path, i) {
                out.push((*path, i, w.abs()));
            }
        }
    }
    out
}

fn prune_count(rate: f64, remaining: usize) -> Result<usize> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid(format!("prune rate {} outside (0, 1)", rate)));
    }
    if remaining == 0 {
        return Err(Error::invalid("nothing left to prune"));
    }
    Ok((rate * remaining as f64).floor() as usize)
}

fn count_to(keep: usize, remaining: usize) -> Result<usize> {
    if remaining == 0 {
        return Err(Error::invalid("nothing left to prune"));
    }
    if keep > remaining {
        return Err(Error::invalid(format!(
            "cannot keep {} of {} unmasked weights",
            keep, remaining
        )));
    }
    Ok(remaining - keep)
}

fn with_pruned(registry: &ParameterRegistry, masks: &MaskSet, chosen: &[(ModulePath, usize)]) -> MaskSet {
    let mut out = masks.clone();
    for (path, i) in chosen {
        let entry = out.masks.entry(*path).or_insert_with(|| {
            vec![true; registry.get(path).map_or(0, |p| p.value.len())]
        });
        entry[*i] = false;
    }
    out
}

/// Prunes `floor(rate * unmasked)` further prunable scalars with the smallest
/// magnitudes under one global threshold. Ties go to the lexicographically
/// smaller (path, flat index).
pub fn magnitude_prune(registry: &ParameterRegistry, masks: &MaskSet, rate: f64) -> Result<MaskSet> {
    masks.check_against(registry)?;
    let cands = candidates(registry, masks);
    let n = prune_count(rate, cands.len())?;
    Ok(magnitude_select(registry, masks, cands, n))
}

/// Magnitude pruning down to exactly `keep` unmasked prunable scalars.
pub fn magnitude_prune_to(registry: &ParameterRegistry, masks: &MaskSet, keep: usize) -> Result<MaskSet> {
    masks.check_against(registry)?;
    let cands = candidates(registry, masks);
    let n = count_to(keep, cands.len())?;
    Ok(magnitude_select(registry, masks, cands, n))
}

fn magnitude_select(
    registry: &ParameterRegistry,
    masks: &MaskSet,
    mut cands: Vec<(ModulePath, usize, f64)>,
    n: usize,
) -> MaskSet {
    // candidates are already in (path, index) order, so a stable sort keeps the tie rule
    cands.sort_by(|a, b| a.2.total_cmp(&b.2));
    let chosen: Vec<_> = cands[..n].iter().map(|(p, i, _)| (*p, *i)).collect();
    with_pruned(registry, masks, &chosen)
}

/// Same count as [`magnitude_prune`], positions drawn uniformly.
pub fn random_prune(registry: &ParameterRegistry, masks: &MaskSet, rate: f64, seed: u64) -> Result<MaskSet> {
    masks.check_against(registry)?;
    let cands = candidates(registry, masks);
    let n = prune_count(rate, cands.len())?;
    Ok(random_select(registry, masks, &cands, n, seed))
}

/// Random pruning down to exactly `keep` unmasked prunable scalars.
pub fn random_prune_to(registry: &ParameterRegistry, masks: &MaskSet, keep: usize, seed: u64) -> Result<MaskSet> {
    masks.check_against(registry)?;
    let cands = candidates(registry, masks);
    let n = count_to(keep, cands.len())?;
    Ok(random_select(registry, masks, &cands, n, seed))
}

fn random_select(
    registry: &ParameterRegistry,
    masks: &MaskSet,
    cands: &[(ModulePath, usize, f64)],
    n: usize,
    seed: u64,
) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<_> = sample(&mut rng, cands.len(), n)
        .into_iter()
        .map(|k| (cands[k].0, cands[k].1))
        .collect();
    with_pruned(registry, masks, &chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSparsity {
    pub path: ModulePath,
    pub kept: usize,
    pub total: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSparsity {
    pub component: Component,
    pub layer: usize,
    pub group: KindGroup,
    pub kept: usize,
    pub total: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub paths: Vec<PathSparsity>,
    pub groups: Vec<GroupSparsity>,
    /// Pruned scalars over every parameter.
    pub incl_embedding: f64,
    /// Pruned scalars over the prunable matrix weights.
    pub excl_embedding: f64,
    /// Pruned scalars over all non-embedding parameters, vectors included.
    pub non_embedding: f64,
    pub pruned: usize,
    pub total_params: usize,
    pub prunable_params: usize,
    pub non_embedding_params: usize,
}

fn frac(pruned: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        pruned as f64 / total as f64
    }
}

pub fn sparsity_report(registry: &ParameterRegistry, masks: &MaskSet) -> Result<SparsityReport> {
    masks.check_against(registry)?;
    let mut paths = Vec::new();
    let mut groups: BTreeMap<(Component, usize, KindGroup), (usize, usize)> = BTreeMap::new();
    let mut pruned = 0;
    for (path, param) in registry.iter() {
        let total = param.value.len();
        let kept = masks
            .get(path)
            .map_or(total, |m| m.iter().filter(|k| **k).count());
        pruned += total - kept;
        if let (Some((c, l)), Some(g)) = (path.component_layer(), path.group()) {
            let e = groups.entry((c, l, g)).or_default();
            e.0 += kept;
            e.1 += total;
        }
        paths.push(PathSparsity {
            path: *path,
            kept,
            total,
            sparsity: frac(total - kept, total),
        });
    }
    let groups = groups
        .into_iter()
        .map(|((component, layer, group), (kept, total))| GroupSparsity {
            component,
            layer,
            group,
            kept,
            total,
            sparsity: frac(total - kept, total),
        })
        .collect();
    let total_params = registry.count_params(ParamScope::All);
    let prunable_params = registry.count_params(ParamScope::Prunable);
    let non_embedding_params = registry.count_params(ParamScope::NonEmbedding);
    Ok(SparsityReport {
        paths,
        groups,
        incl_embedding: frac(pruned, total_params),
        excl_embedding: frac(pruned, prunable_params),
        non_embedding: frac(pruned, non_embedding_params),
        pruned,
        total_params,
        prunable_params,
        non_embedding_params,
    })
}

impl SparsityReport {
    /// `path,kept,total,sparsity` rows.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "kept", "total", "sparsity"])?;
        for p in &self.paths {
            w.write_record([
                p.path.to_string(),
                p.kept.to_string(),
                p.total.to_string(),
                format!("{:.6}", p.sparsity),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::io::write_atomic(csv_path, &buf)?;
        crate::io::write_atomic(json_path, &serde_json::to_vec_pretty(self)?)
    }
}

/// Unmasked prunable weights after `k` prunes at `rate`, out of `n`. The
/// cumulative pruned count is `floor(n * (1 - (1 - rate)^k))`, so rounding
/// never drifts by more than one weight however many iterations run.
pub fn scheduled_kept(n: usize, rate: f64, k: usize) -> usize {
    // 1280 * (1 - 0.8) evaluates to 255.999..., hence the nudge before flooring
    let pruned = (n as f64 * (1.0 - (1.0 - rate).powi(k as i32)) + 1e-6).floor() as usize;
    n - pruned.min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewindMode {
    /// Keep trained weights, move the schedule back to the rewind epoch.
    LrRewind,
    /// Restore unpruned weights and schedule from the rewind checkpoint.
    WeightRewind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pruner {
    Magnitude,
    Random,
}

impl Pruner {
    pub fn as_str(self) -> &'static str {
        match self {
            Pruner::Magnitude => "magnitude",
            Pruner::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpSettings {
    pub k_max: usize,
    pub rate: f64,
    pub mode: RewindMode,
    pub pruner: Pruner,
    /// Seed for random pruning; iteration `k` uses `seed + k`.
    pub seed: u64,
}

impl Default for ImpSettings {
    fn default() -> Self {
        ImpSettings {
            k_max: 3,
            rate: 0.2,
            mode: RewindMode::LrRewind,
            pruner: Pruner::Magnitude,
            seed: 0,
        }
    }
}

impl ImpSettings {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::Config("imp: k_max must be >= 1".into()));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config("imp: rate must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One model of the family: LTHk.
#[derive(Debug, Clone)]
pub struct LthMember {
    pub iteration: usize,
    pub checkpoint: Checkpoint,
    pub sparsity: SparsityReport,
    pub bleu: f64,
}

#[derive(Debug, Clone)]
pub struct LthFamily {
    pub members: Vec<LthMember>,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

/// Trained unpruned model and the state stored at the rewind epoch, both
/// stamped with `digest`.
#[derive(Debug, Clone)]
pub struct ImpStart {
    pub lth0: Checkpoint,
    pub rewind: Checkpoint,
    pub digest: String,
}

impl ImpStart {
    pub fn new(lth0: Checkpoint, rewind: Checkpoint) -> Result<Self> {
        if lth0.config_digest != rewind.config_digest {
            return Err(Error::DigestMismatch {
                expected: lth0.config_digest.clone(),
                found: rewind.config_digest.clone(),
            });
        }
        let digest = lth0.config_digest.clone();
        Ok(ImpStart { lth0, rewind, digest })
    }
}

/// Data and metadata shared by every training run of one experiment.
pub struct ImpData<'a> {
    pub train: &'a [SentencePair],
    pub eval: &'a [SentencePair],
    pub tokenizer: &'a Tokenizer,
    pub eval_batch: usize,
    /// Stamped on every checkpoint produced from this data.
    pub digest: &'a str,
}

pub fn train_lth0(config: &ModelConfig, recipe: &TrainRecipe, data: &ImpData<'_>) -> Result<ImpStart> {
    let mut state = TrainState::fresh(config, recipe)?;
    let log = train(config, recipe, &mut state, data.train, data.digest)?;
    let rewind = log
        .rewind
        .ok_or_else(|| Error::invalid("training never reached the rewind epoch"))?;
    ImpStart::new(state.checkpoint(data.digest, recipe.epochs), rewind)
}

/// Prune, rewind, retrain, `k_max` times. Iteration `k` prunes down to
/// [`scheduled_kept`] weights. `on_member` sees each LTHk as soon as it exists. A diverging retrain ends the family early with a diagnostic.
pub fn imp_run(
    config: &ModelConfig,
    recipe: &TrainRecipe,
    settings: &ImpSettings,
    start: &ImpStart,
    data: &ImpData<'_>,
    mut on_member: impl FnMut(&LthMember) -> Result<()>,
) -> Result<LthFamily> {
    settings.validate()?;
    recipe.validate()?;
    let schedule = recipe.schedule(data.train.len());
    let rewind_epoch = recipe.rewind_point();
    let mut state = TrainState::from_checkpoint(&start.lth0);
    let prunable = state.registry.count_params(ParamScope::Prunable);
    let member = |k: usize, state: &TrainState| -> Result<LthMember> {
        Ok(LthMember {
            iteration: k,
            checkpoint: state.checkpoint(data.digest, recipe.epochs),
            sparsity: sparsity_report(&state.registry, &state.masks)?,
            bleu: evaluate_bleu(config, &state.registry, &state.masks, data.tokenizer, data.eval, data.eval_batch)?,
        })
    };
    let first = member(0, &state)?;
    on_member(&first)?;
    let mut family = LthFamily {
        members: vec![first],
        aborted: None,
    };
    for k in 1..=settings.k_max {
        let keep = scheduled_kept(prunable, settings.rate, k);
        let masks = match settings.pruner {
            Pruner::Magnitude => magnitude_prune_to(&state.registry, &state.masks, keep)?,
            Pruner::Random => random_prune_to(
                &state.registry,
                &state.masks,
                keep,
                settings.seed.wrapping_add(k as u64),
            )?,
        };
        match settings.mode {
            RewindMode::LrRewind => {
                state.registry = state.registry.masked(&masks)?;
                state.optimizer = rewind_lr(&state.optimizer, &schedule, rewind_epoch, recipe.reset_moments)?;
            }
            RewindMode::WeightRewind => {
                let (registry, optimizer) = rewind_weights(&masks, &start.rewind, &start.digest, rewind_epoch)?;
                state.registry = registry;
                state.optimizer = optimizer;
                state.rng = start.rewind.rng.restore();
            }
        }
        state.masks = masks;
        if let Err(e) = train(config, recipe, &mut state, data.train, data.digest) {
            match e {
                Error::Diverged { .. } => {
                    log::warn!("IMP iteration {} stopped: {}", k, e);
                    family.aborted = Some(format!("iteration {}: {}", k, e));
                    return Ok(family);
                }
                e => return Err(e),
            }
        }
        let m = member(k, &state)?;
        log::info!(
            "{} LTH{}: sparsity {:.3} (excl. emb.), BLEU {:.2}",
            settings.pruner.as_str(),
            k,
            m.sparsity.excl_embedding,
            m.bleu
        );
        on_member(&m)?;
        family.members.push(m);
    }
    Ok(family)
}
