//! Linear and MLP probes on frozen token representations, z-score tables,
//! layer-group summaries and sparsity-trend labels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{AnnotatedSentence, SubtokenMap, Tag};
use crate::error::{Error, Result};
use crate::model::{ActivationDump, Component};
use crate::tensor::Tensor;

/// Per-word features of one sentence, averaged over each word's subtokens.
/// `sentence` indexes the sentences of `dump`.
pub fn extract_token_reps(
    dump: &ActivationDump,
    component: Component,
    layer: usize,
    sentence: usize,
    subtokens: &SubtokenMap,
) -> Result<Tensor> {
    let layers = dump.layers(component);
    let reps = layers
        .get(layer.wrapping_sub(1))
        .ok_or_else(|| Error::invalid(format!("dump has no {} layer {}", component.as_str(), layer)))?;
    let (start, len) = sentence_rows(dump.tokens(component), sentence)
        .ok_or_else(|| Error::invalid(format!("dump does not cover sentence {}", sentence)))?;
    if len != subtokens.ids.len() {
        return Err(Error::invalid(format!(
            "sentence {} has {} dumped rows but {} subtokens",
            sentence,
            len,
            subtokens.ids.len()
        )));
    }
    let d = reps.cols();
    let spans = subtokens.spans();
    let mut out = vec![0.0; spans.len() * d];
    for (w, span) in spans.iter().enumerate() {
        let row = &mut out[w * d..(w + 1) * d];
        for &i in span {
            for (o, x) in row.iter_mut().zip(reps.row(start + i)) {
                *o += x;
            }
        }
        let n = span.len() as f64;
        row.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::matrix(spans.len(), d, out)
}

/// Row range of `sentence` in a dump's token metadata.
pub fn sentence_rows(tokens: &[crate::model::TokenMeta], sentence: usize) -> Option<(usize, usize)> {
    let start = tokens.iter().position(|t| t.sentence as usize == sentence)?;
    let len = tokens[start..]
        .iter()
        .take_while(|t| t.sentence as usize == sentence)
        .count();
    Some((start, len))
}

/// `[a ; b ; a ⊙ b]`.
pub fn build_pairwise_features(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "pairwise features",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let mut out = Vec::with_capacity(3 * a.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.extend(a.iter().zip(b).map(|(x, y)| x * y));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Tag of each token.
    Tag,
    /// Tag of the parent (root gets its own class).
    ParentTag,
    GParentTag,
    GGParentTag,
    /// Is the second token the parent of the first?
    ArcPrediction,
    /// Label of a gold arc.
    ArcLabel,
    /// Is the noun the subject that the verb agrees with?
    Agreement,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 7] = [
        ProbeTask::Tag,
        ProbeTask::ParentTag,
        ProbeTask::GParentTag,
        ProbeTask::GGParentTag,
        ProbeTask::ArcPrediction,
        ProbeTask::ArcLabel,
        ProbeTask::Agreement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeTask::Tag => "tag",
            ProbeTask::ParentTag => "parent_tag",
            ProbeTask::GParentTag => "gparent_tag",
            ProbeTask::GGParentTag => "ggparent_tag",
            ProbeTask::ArcPrediction => "arc_prediction",
            ProbeTask::ArcLabel => "arc_label",
            ProbeTask::Agreement => "agreement",
        }
    }

    pub fn arity(self) -> Arity {
        match self {
            ProbeTask::ArcPrediction | ProbeTask::ArcLabel | ProbeTask::Agreement => Arity::Pair,
            _ => Arity::Single,
        }
    }

    pub fn group(self) -> TaskGroup {
        match self {
            ProbeTask::Tag => TaskGroup::Tagging,
            ProbeTask::Agreement => TaskGroup::HardPair,
            _ => TaskGroup::Structure,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            ProbeTask::Tag => Tag::ALL.len(),
            ProbeTask::ParentTag | ProbeTask::GParentTag | ProbeTask::GGParentTag => Tag::ALL.len() + 1,
            ProbeTask::ArcPrediction | ProbeTask::Agreement => 2,
            ProbeTask::ArcLabel => crate::corpus::ArcLabel::ALL.len(),
        }
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeTask::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown probe task `{}`", s)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskGroup {
    Tagging,
    Structure,
    HardPair,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 3] = [TaskGroup::Tagging, TaskGroup::Structure, TaskGroup::HardPair];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskGroup::Tagging => "tagging",
            TaskGroup::Structure => "structure",
            TaskGroup::HardPair => "hard_pair",
        }
    }

    pub fn tasks(self) -> Vec<ProbeTask> {
        ProbeTask::ALL.into_iter().filter(|t| t.group() == self).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    Single,
    Pair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFamily {
    Linear,
    Mlp,
}

impl ProbeFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeFamily::Linear => "linear",
            ProbeFamily::Mlp => "mlp",
        }
    }
}

/// One labelled example: a single token or an ordered token pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeItem {
    pub sentence: usize,
    pub i: usize,
    pub j: Option<usize>,
    pub label: usize,
}

fn tag_or_root(s: &AnnotatedSentence, pos: Option<usize>) -> usize {
    pos.map_or(Tag::ALL.len(), |p| s.tags[p].index())
}

/// Labelled items for `task` over `sentences`; pair negatives are drawn 1:1
/// with positives from `rng`.
pub fn task_items<R: Rng>(task: ProbeTask, sentences: &[AnnotatedSentence], rng: &mut R) -> Vec<ProbeItem> {
    let mut items = Vec::new();
    for (si, s) in sentences.iter().enumerate() {
        let n = s.len();
        let single = |i: usize, label: usize| ProbeItem {
            sentence: si,
            i,
            j: None,
            label,
        };
        match task {
            ProbeTask::Tag => items.extend((0..n).map(|i| single(i, s.tags[i].index()))),
            ProbeTask::ParentTag | ProbeTask::GParentTag | ProbeTask::GGParentTag => {
                let gens = match task {
                    ProbeTask::ParentTag => 1,
                    ProbeTask::GParentTag => 2,
                    _ => 3,
                };
                items.extend((0..n).map(|i| single(i, tag_or_root(s, s.ancestor(i, gens)))));
            }
            ProbeTask::ArcLabel => items.extend(s.arcs.iter().map(|a| ProbeItem {
                sentence: si,
                i: a.dep,
                j: Some(a.head),
                label: a.label.index(),
            })),
            ProbeTask::ArcPrediction => {
                for a in &s.arcs {
                    let others: Vec<usize> = (0..n).filter(|&k| k != a.dep && k != a.head).collect();
                    if let Some(&neg) = others.choose(rng) {
                        items.push(ProbeItem {
                            sentence: si,
                            i: a.dep,
                            j: Some(a.head),
                            label: 1,
                        });
                        items.push(ProbeItem {
                            sentence: si,
                            i: a.dep,
                            j: Some(neg),
                            label: 0,
                        });
                    }
                }
            }
            ProbeTask::Agreement => {
                let nominal = |k: usize| matches!(s.tags[k], Tag::Noun | Tag::Pron);
                for a in s.arcs.iter().filter(|a| a.label == crate::corpus::ArcLabel::Subj) {
                    let others: Vec<usize> = (0..n).filter(|&k| k != a.dep && nominal(k)).collect();
                    if let Some(&neg) = others.choose(rng) {
                        items.push(ProbeItem {
                            sentence: si,
                            i: a.head,
                            j: Some(a.dep),
                            label: 1,
                        });
                        items.push(ProbeItem {
                            sentence: si,
                            i: a.head,
                            j: Some(neg),
                            label: 0,
                        });
                    }
                }
            }
        }
    }
    items
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ProbeDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (rows, _) = features.dims2()?;
        if rows != labels.len() {
            return Err(Error::shape("probe dataset", format!("{} rows, {} labels", rows, labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {} outside {} classes", bad, num_classes)));
        }
        Ok(ProbeDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Same features with labels permuted by `seed`: the control task.
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        let mut labels = self.labels.clone();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ProbeDataset {
            features: self.features.clone(),
            labels,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSplits {
    pub train: ProbeDataset,
    pub dev: ProbeDataset,
    pub test: ProbeDataset,
}

/// Builds features for `items` from per-sentence word representations.
pub fn featurize(items: &[ProbeItem], reps: &[Tensor], arity: Arity, num_classes: usize) -> Result<ProbeDataset> {
    let d = reps.first().map_or(0, |t| t.cols());
    let dim = match arity {
        Arity::Single => d,
        Arity::Pair => 3 * d,
    };
    let mut data = Vec::with_capacity(items.len() * dim);
    let mut labels = Vec::with_capacity(items.len());
    for it in items {
        let r = reps
            .get(it.sentence)
            .ok_or_else(|| Error::invalid(format!("no representations for sentence {}", it.sentence)))?;
        match (arity, it.j) {
            (Arity::Single, _) => data.extend_from_slice(r.row(it.i)),
            (Arity::Pair, Some(j)) => data.extend(build_pairwise_features(r.row(it.i), r.row(j))?),
            (Arity::Pair, None) => return Err(Error::invalid("pair task item without a second token")),
        }
        labels.push(it.label);
    }
    ProbeDataset::new(Tensor::matrix(items.len(), dim, data)?, labels, num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeTraining {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Replicate seeds averaged for tasks with fewer than
    /// `small_task_rows` training rows.
    pub replicates: usize,
    pub small_task_rows: usize,
    pub early_stop: EarlyStop,
}

/// Dev criterion for early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    DevAccuracy,
    DevLoss,
}

impl ProbeTraining {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("probe training: {}", m)));
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.replicates == 0 {
            return fail("replicates must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        Ok(())
    }
}

impl Default for ProbeTraining {
    fn default() -> Self {
        ProbeTraining {
            max_epochs: 50,
            patience: 3,
            learning_rate: 1e-3,
            batch_size: 32,
            replicates: 5,
            small_task_rows: 2000,
            early_stop: EarlyStop::DevAccuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub test_accuracy: f64,
    pub dev_accuracy: f64,
    pub epochs: usize,
    /// Test accuracy per gold class; `None` for classes absent from test.
    pub per_class: Vec<Option<f64>>,
}

struct ProbeParams {
    tensors: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl ProbeParams {
    fn init(family: ProbeFamily, dim: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut mat = |r: usize, c: usize| {
            let b = (6.0 / (r + c) as f64).sqrt();
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-b..b)).collect())
        };
        let tensors = match family {
            ProbeFamily::Linear => vec![mat(dim, classes)?, Tensor::zeros(&[classes])],
            ProbeFamily::Mlp => vec![
                mat(dim, hidden)?,
                Tensor::zeros(&[hidden]),
                mat(hidden, classes)?,
                Tensor::zeros(&[classes]),
            ],
        };
        let m = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let v = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(ProbeParams { tensors, m, v, t: 0 })
    }

    fn logits(&self, g: &mut Graph, x: Tensor, trainable: bool) -> Result<(crate::autodiff::Var, Vec<crate::autodiff::Var>)> {
        let vars: Vec<_> = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let x = g.constant(x);
        let mut h = g.matmul(x, vars[0])?;
        h = g.add_row(h, vars[1])?;
        if vars.len() == 4 {
            h = g.relu(h)?;
            h = g.matmul(h, vars[2])?;
            h = g.add_row(h, vars[3])?;
        }
        Ok((h, vars))
    }

    fn adam(&mut self, grads: &[Tensor], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (k, g) in grads.iter().enumerate() {
            for (((w, g), m), v) in self.tensors[k]
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(self.m[k].iter_mut())
                .zip(self.v[k].iter_mut())
            {
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            }
        }
    }

    fn logits_value(&self, data: &ProbeDataset) -> Result<Tensor> {
        let mut g = Graph::new();
        let (logits, _) = self.logits(&mut g, data.features.clone(), false)?;
        Ok(g.value(logits).clone())
    }

    fn predict(&self, data: &ProbeDataset) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits_value(data)?))
    }

    fn evaluate(&self, data: &ProbeDataset) -> Result<(Tensor, f64)> {
        let logits = self.logits_value(data)?;
        let acc = accuracy(&argmax_rows(&logits), &data.labels);
        Ok((logits, acc))
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

/// Trains one probe with Adam and early stopping on dev accuracy, with dev
/// loss breaking ties. Parameters from the best dev epoch are evaluated on test.
pub fn train_probe(
    family: ProbeFamily,
    hidden: usize,
    splits: &ProbeSplits,
    training: &ProbeTraining,
    seed: u64,
) -> Result<ProbeResult> {
    let train = &splits.train;
    let mut classes = train.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("probe training set has fewer than two classes"));
    }
    if splits.dev.is_empty() || splits.test.is_empty() {
        return Err(Error::invalid("probe dev and test splits must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ProbeParams::init(family, train.dim(), hidden, train.num_classes, &mut rng)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<((f64, f64), f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut epochs = 0;
    for _ in 0..training.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(training.batch_size.max(1)) {
            let mut g = Graph::new();
            let (logits, vars) = params.logits(&mut g, train.features.select_rows(chunk)?, true)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let loss = g.cross_entropy(logits, &targets, usize::MAX)?;
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor> = vars
                .iter()
                .zip(&params.tensors)
                .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            params.adam(&gs, training.learning_rate);
        }
        let (logits, dev_acc) = params.evaluate(&splits.dev)?;
        let dev_loss = crate::tensor::cross_entropy(&logits, &splits.dev.labels, usize::MAX)?;
        // Accuracy is coarse on small dev sets; ties fall back to loss.
        let score = match training.early_stop {
            EarlyStop::DevAccuracy => (dev_acc, -dev_loss),
            EarlyStop::DevLoss => (-dev_loss, dev_acc),
        };
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, dev_acc, params.tensors.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= training.patience {
                break;
            }
        }
    }
    let (_, dev_accuracy, tensors) = best.expect("at least one epoch");
    params.tensors = tensors;
    let pred = params.predict(&splits.test)?;
    let gold = &splits.test.labels;
    let per_class = (0..train.num_classes)
        .map(|c| {
            let idx: Vec<usize> = (0..gold.len()).filter(|&i| gold[i] == c).collect();
            (!idx.is_empty()).then(|| idx.iter().filter(|&&i| pred[i] == c).count() as f64 / idx.len() as f64)
        })
        .collect();
    Ok(ProbeResult {
        test_accuracy: accuracy(&pred, gold),
        dev_accuracy,
        epochs,
        per_class,
    })
}

/// Trains with consecutive seeds and averages the metrics; small training
/// sets get `training.replicates` runs, others one.
pub fn train_probe_replicated(
    family: ProbeFamily,
    hidden: usize,
    splits: &ProbeSplits,
    training: &ProbeTraining,
    seed: u64,
) -> Result<ProbeResult> {
    let n = if splits.train.len() < training.small_task_rows {
        training.replicates.max(1)
    } else {
        1
    };
    let runs: Vec<ProbeResult> = (0..n)
        .map(|r| train_probe(family, hidden, splits, training, seed.wrapping_add(r as u64)))
        .collect::<Result<_>>()?;
    let mean = |f: &dyn Fn(&ProbeResult) -> f64| runs.iter().map(f).sum::<f64>() / n as f64;
    let mut out = runs[0].clone();
    out.test_accuracy = mean(&|r| r.test_accuracy);
    out.dev_accuracy = mean(&|r| r.dev_accuracy);
    Ok(out)
}

/// One probe measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub model: String,
    pub layer: usize,
    pub task: ProbeTask,
    pub family: ProbeFamily,
    pub metric: f64,
    #[serde(default)]
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Model names in family order (LTH0 first).
    pub models: Vec<String>,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn metric(&self, model: &str, layer: usize, task: ProbeTask, family: ProbeFamily) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.layer == layer && r.task == task && r.family == family)
            .map(|r| r.metric)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.rows.iter().map(|r| r.layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn tasks(&self) -> Vec<ProbeTask> {
        let mut t: Vec<ProbeTask> = self.rows.iter().map(|r| r.task).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// Maximum over layers of the metric for (model, task, family).
    pub fn best_over_layers(&self, model: &str, task: ProbeTask, family: ProbeFamily) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.model == model && r.task == task && r.family == family)
            .map(|r| r.metric)
            .reduce(f64::max)
    }

    /// Best-over-layers metric per task, as a vector over models.
    pub fn best_vectors(&self, family: ProbeFamily) -> BTreeMap<ProbeTask, Vec<f64>> {
        self.tasks()
            .into_iter()
            .filter_map(|t| {
                self.models
                    .iter()
                    .map(|m| self.best_over_layers(m, t, family))
                    .collect::<Option<Vec<f64>>>()
                    .map(|v| (t, v))
            })
            .collect()
    }

    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "layer", "task", "family", "metric"])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.layer.to_string(),
                r.task.to_string(),
                r.family.as_str().to_string(),
                format!("{:.6}", r.metric),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSuite {
    pub tasks: Vec<ProbeTask>,
    pub families: Vec<ProbeFamily>,
    /// Encoder layers to probe; empty means all.
    pub layers: Vec<usize>,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub training: ProbeTraining,
    pub trend: TrendThresholds,
}

impl Default for ProbeSuite {
    fn default() -> Self {
        ProbeSuite {
            tasks: ProbeTask::ALL.to_vec(),
            families: vec![ProbeFamily::Linear, ProbeFamily::Mlp],
            layers: Vec::new(),
            dev_fraction: 0.15,
            test_fraction: 0.15,
            seed: 0,
            training: ProbeTraining::default(),
            trend: TrendThresholds::default(),
        }
    }
}

impl ProbeSuite {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("probe suite: {}", m)));
        if self.tasks.is_empty() || self.families.is_empty() {
            return fail("tasks and families must be non-empty");
        }
        let ok = |f: f64| (0.0..1.0).contains(&f) && f > 0.0;
        if !ok(self.dev_fraction) || !ok(self.test_fraction) || self.dev_fraction + self.test_fraction >= 1.0 {
            return fail("dev and test fractions must be in (0, 1) with room left for train");
        }
        if self.layers.contains(&0) {
            return fail("layers are 1-based");
        }
        if self.trend.degrading >= self.trend.improving {
            return fail("trend thresholds must satisfy degrading < improving");
        }
        self.training.validate()
    }
}

/// Disjoint train/dev/test sentence indices from a seeded shuffle.
pub fn sentence_splits(n: usize, dev_fraction: f64, test_fraction: f64, seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = ((n as f64) * dev_fraction).round() as usize;
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let test = idx.split_off(n - n_test);
    let dev = idx.split_off(n - n_test - n_dev);
    [idx, dev, test]
}

/// Probes every (model, layer, task, family) cell. `dumps` holds one
/// activation dump per model, all over `sentences` in order.
pub fn run_probe_suite(
    suite: &ProbeSuite,
    sentences: &[AnnotatedSentence],
    subtokens: &[SubtokenMap],
    dumps: &[(String, &ActivationDump)],
) -> Result<ProbeReport> {
    suite.validate()?;
    if sentences.len() != subtokens.len() {
        return Err(Error::invalid("one subtoken map per sentence required"));
    }
    let splits = sentence_splits(sentences.len(), suite.dev_fraction, suite.test_fraction, suite.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed ^ 0x9e37_79b9);
    let mut items = Vec::new();
    for &task in &suite.tasks {
        let per_split: Vec<Vec<ProbeItem>> = splits
            .iter()
            .map(|ids| {
                let subset: Vec<AnnotatedSentence> = ids.iter().map(|&i| sentences[i].clone()).collect();
                task_items(task, &subset, &mut rng)
                    .into_iter()
                    .map(|it| ProbeItem {
                        sentence: ids[it.sentence],
                        ..it
                    })
                    .collect()
            })
            .collect();
        items.push((task, per_split));
    }

    let mut report = ProbeReport {
        models: dumps.iter().map(|(m, _)| m.clone()).collect(),
        rows: Vec::new(),
    };
    for (model, dump) in dumps {
        let available = dump.encoder.len();
        let layers: Vec<usize> = if suite.layers.is_empty() {
            (1..=available).collect()
        } else {
            suite.layers.clone()
        };
        for layer in layers {
            let reps: Vec<Tensor> = (0..sentences.len())
                .map(|s| extract_token_reps(dump, Component::Encoder, layer, s, &subtokens[s]))
                .collect::<Result<_>>()?;
            let hidden = dump.encoder[layer - 1].cols();
            for (task, per_split) in &items {
                let data: Vec<ProbeDataset> = per_split
                    .iter()
                    .map(|its| featurize(its, &reps, task.arity(), task.num_classes()))
                    .collect::<Result<_>>()?;
                let [train, dev, test]: [ProbeDataset; 3] = data.try_into().expect("three splits");
                let splits = ProbeSplits { train, dev, test };
                for &family in &suite.families {
                    let r = train_probe_replicated(family, hidden, &splits, &suite.training, suite.seed)?;
                    log::debug!("{} layer {} {} {}: {:.4}", model, layer, task, family.as_str(), r.test_accuracy);
                    report.rows.push(ProbeRow {
                        model: model.clone(),
                        layer,
                        task: *task,
                        family,
                        metric: r.test_accuracy,
                        per_class: r.per_class,
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Standardizes `values` with the population standard deviation; a constant
/// vector maps to zeros.
pub fn zscores(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::invalid("z-scores need at least two models"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreTable {
    pub models: Vec<String>,
    pub rows: BTreeMap<ProbeTask, Vec<f64>>,
}

/// Per-task z-scores of the best-over-layers metric across models.
pub fn zscore_table(report: &ProbeReport, family: ProbeFamily) -> Result<ZScoreTable> {
    if report.models.len() < 2 {
        return Err(Error::invalid("z-score table needs at least two models"));
    }
    let rows = report
        .best_vectors(family)
        .into_iter()
        .map(|(t, v)| Ok((t, zscores(&v)?)))
        .collect::<Result<_>>()?;
    Ok(ZScoreTable {
        models: report.models.clone(),
        rows,
    })
}

/// Z-scores per (task, layer) across models.
pub fn layer_zscores(report: &ProbeReport, family: ProbeFamily) -> Result<BTreeMap<(ProbeTask, usize), Vec<f64>>> {
    let mut out = BTreeMap::new();
    for task in report.tasks() {
        for layer in report.layers() {
            let v: Option<Vec<f64>> = report
                .models
                .iter()
                .map(|m| report.metric(m, layer, task, family))
                .collect();
            if let Some(v) = v {
                out.insert((task, layer), zscores(&v)?);
            }
        }
    }
    Ok(out)
}

/// Mean z-score over the tasks in `group`, per (model index, layer).
pub fn layer_group_summary(
    layer_z: &BTreeMap<(ProbeTask, usize), Vec<f64>>,
    group: &[ProbeTask],
) -> Result<BTreeMap<(usize, usize), f64>> {
    if group.is_empty() {
        return Err(Error::invalid("empty task group"));
    }
    let mut sums: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for ((task, layer), z) in layer_z {
        if group.contains(task) {
            for (m, v) in z.iter().enumerate() {
                let e = sums.entry((m, *layer)).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trend {
    SparsityInvariant,
    SparsityDegrading,
    SparsityImproving,
}

impl Trend {
    pub fn as_str(self) -> &'static str {
        match self {
            Trend::SparsityInvariant => "sparsity-invariant",
            Trend::SparsityDegrading => "sparsity-degrading",
            Trend::SparsityImproving => "sparsity-improving",
        }
    }
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; `0` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendThresholds {
    pub improving: f64,
    pub degrading: f64,
}

impl Default for TrendThresholds {
    fn default() -> Self {
        TrendThresholds {
            improving: 0.6,
            degrading: -0.6,
        }
    }
}

pub const MIN_TREND_MODELS: usize = 5;

/// Spearman ρ between iteration index and metric, thresholded.
pub fn classify_trend(metric: &[f64], thresholds: &TrendThresholds) -> Result<(Trend, f64)> {
    if metric.len() < MIN_TREND_MODELS {
        return Err(Error::invalid(format!(
            "trend needs at least {} models, got {}",
            MIN_TREND_MODELS,
            metric.len()
        )));
    }
    let idx: Vec<f64> = (0..metric.len()).map(|i| i as f64).collect();
    let rho = spearman(&idx, metric);
    let trend = if rho >= thresholds.improving {
        Trend::SparsityImproving
    } else if rho <= thresholds.degrading {
        Trend::SparsityDegrading
    } else {
        Trend::SparsityInvariant
    };
    Ok((trend, rho))
}
