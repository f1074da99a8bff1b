//! Cross-model outputs: the similarity stage's analysis and the final
//! report bundle (JSON plus CSV tables) with its shipped schema.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{Grouping, SimilaritySuite};
use crate::corpus::{frequency_bin, noun_class, AnnotatedSentence, SubtokenMap, Tag, FREQUENCY_BIN_NAMES};
use crate::error::{Error, Result};
use crate::model::{ActivationDump, AttentionDump, AttentionType, Component};
use crate::pipeline::stamped_csv;
use crate::probing::{
    classify_trend, layer_zscores, layer_group_summary, zscore_table, ProbeFamily, ProbeReport, TaskGroup,
    TrendThresholds, MIN_TREND_MODELS,
};
use crate::pruning::{Pruner, SparsityReport};
use crate::similarity::{
    attention_concentration, attention_pairs, attention_sim, grouped_similarity, layer_sim_heatmap, linear_cka,
    neuron_sim, svd_variance, MetricKind,
};
use crate::tensor::Tensor;

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

/// JSON schema of `reports/bundle.json`.
pub const BUNDLE_SCHEMA: &str = include_str!("../schema/bundle.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    /// Directory name, e.g. `lth2` or `random/lth2`.
    pub name: String,
    pub iteration: usize,
    pub pruner: Pruner,
    pub bleu: f64,
    pub sparsity_incl: f64,
    pub sparsity_excl: f64,
    pub sparsity_non_embedding: f64,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpSummary {
    pub digest: String,
    pub magnitude: Vec<MemberSummary>,
    pub random: Vec<MemberSummary>,
    pub aborted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub digest: String,
    pub report: ProbeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub kind: MetricKind,
    /// `encoder`, `decoder`, or an attention type.
    pub label: String,
    pub model_a: String,
    pub model_b: String,
    pub file: String,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSimRow {
    pub model: String,
    pub iteration: usize,
    pub sparsity_excl: f64,
    pub component: Component,
    pub layer: usize,
    pub score: f64,
    pub match_rate: f64,
    pub dead_a: usize,
    pub dead_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinK {
    pub threshold: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdRow {
    pub model: String,
    pub component: Component,
    pub layer: usize,
    pub singular_values: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub min_k: Vec<MinK>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedRow {
    pub model: String,
    pub grouping: Grouping,
    pub group: String,
    pub tokens: usize,
    pub cka: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub model: String,
    pub attention: AttentionType,
    pub layer: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxCorrRow {
    pub model: String,
    pub component: Component,
    pub layer: usize,
    pub neuron: usize,
    pub max_corr: f64,
}

/// Everything the similarity stage computes. `max_corr` goes to CSV only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityOutput {
    pub digest: String,
    pub models: Vec<String>,
    pub matrices: Vec<MatrixEntry>,
    pub neuron_sim: Vec<NeuronSimRow>,
    pub svd: Vec<SvdRow>,
    pub grouped: Vec<GroupedRow>,
    pub concentration: Vec<ConcentrationRow>,
    #[serde(skip)]
    pub max_corr: Vec<MaxCorrRow>,
}

struct ModelData {
    name: String,
    encoder: Vec<Tensor>,
    decoder: Vec<Tensor>,
    attention: BTreeMap<(AttentionType, usize), Tensor>,
    concentration: BTreeMap<(AttentionType, usize), f64>,
}

/// Per-row group labels for the encoder rows of the analysis corpus.
pub fn grouping_labels(
    grouping: Grouping,
    sentences: &[AnnotatedSentence],
    subtokens: &[SubtokenMap],
) -> (Vec<usize>, Vec<&'static str>) {
    let mut labels = Vec::new();
    for (s, map) in sentences.iter().zip(subtokens) {
        for &w in &map.owner {
            let rank = s.source[w];
            labels.push(match grouping {
                Grouping::FrequencyBin => frequency_bin(rank),
                Grouping::Tag => Tag::of_word(rank).index(),
                Grouping::NounClass if Tag::of_word(rank) == Tag::Noun => noun_class(rank),
                Grouping::NounClass => 2,
            });
        }
    }
    let names = match grouping {
        Grouping::FrequencyBin => FREQUENCY_BIN_NAMES.to_vec(),
        Grouping::Tag => Tag::ALL.iter().map(|t| t.as_str()).collect(),
        Grouping::NounClass => vec!["class0", "class1", "non_noun"],
    };
    (labels, names)
}

fn load_model(
    name: &str,
    acts: ActivationDump,
    att: &AttentionDump,
    threshold: f64,
) -> Result<ModelData> {
    let attention = att
        .maps
        .iter()
        .map(|((kind, layer), maps)| Ok(((*kind, *layer), attention_pairs(maps, *kind)?)))
        .collect::<Result<_>>()?;
    Ok(ModelData {
        name: name.to_string(),
        encoder: acts.encoder,
        decoder: acts.decoder,
        attention,
        concentration: attention_concentration(att, threshold),
    })
}

/// Runs every similarity analysis over the magnitude family. `load` returns
/// one model's dumps; each model is loaded once.
pub fn analyze_similarity(
    suite: &SimilaritySuite,
    members: &[MemberSummary],
    sentences: &[AnnotatedSentence],
    subtokens: &[SubtokenMap],
    mut load: impl FnMut(&str) -> Result<(ActivationDump, AttentionDump)>,
) -> Result<SimilarityOutput> {
    if members.is_empty() {
        return Err(Error::invalid("no models to compare"));
    }
    let mut models = Vec::with_capacity(members.len());
    for m in members {
        let (acts, att) = load(&m.name)?;
        let rows: usize = subtokens.iter().map(|s| s.ids.len()).sum();
        if acts.encoder_tokens.len() != rows {
            return Err(Error::invalid(format!(
                "{}: dump has {} encoder rows, analysis corpus has {}",
                m.name,
                acts.encoder_tokens.len(),
                rows
            )));
        }
        models.push(load_model(&m.name, acts, &att, suite.concentration_threshold)?);
    }
    let mut out = SimilarityOutput {
        digest: String::new(),
        models: members.iter().map(|m| m.name.clone()).collect(),
        matrices: Vec::new(),
        neuron_sim: Vec::new(),
        svd: Vec::new(),
        grouped: Vec::new(),
        concentration: Vec::new(),
        max_corr: Vec::new(),
    };

    for (i, a) in models.iter().enumerate() {
        for b in &models[i..] {
            let mut push = |kind: MetricKind, label: &str, values: Vec<Vec<f64>>| {
                out.matrices.push(MatrixEntry {
                    kind,
                    label: label.to_string(),
                    model_a: a.name.clone(),
                    model_b: b.name.clone(),
                    file: format!("similarity/{}_{}_{}_{}.csv", kind.as_str(), label, a.name, b.name),
                    values,
                });
            };
            for (label, xa, xb) in [("encoder", &a.encoder, &b.encoder), ("decoder", &a.decoder, &b.decoder)] {
                push(MetricKind::LayerSim, label, layer_sim_heatmap(xa, xb)?);
                let ns = xa
                    .iter()
                    .map(|x| xb.iter().map(|y| neuron_sim(x, y).map(|s| s.score)).collect())
                    .collect::<Result<_>>()?;
                push(MetricKind::NeuronSim, label, ns);
            }
            for kind in [AttentionType::EncSelf, AttentionType::EncDec, AttentionType::DecSelf] {
                let la: Vec<&Tensor> = a.attention.iter().filter(|(k, _)| k.0 == kind).map(|(_, t)| t).collect();
                let lb: Vec<&Tensor> = b.attention.iter().filter(|(k, _)| k.0 == kind).map(|(_, t)| t).collect();
                if la.is_empty() || lb.is_empty() {
                    continue;
                }
                let values = la
                    .iter()
                    .map(|x| lb.iter().map(|y| attention_sim(x, y)).collect())
                    .collect::<Result<_>>()?;
                push(MetricKind::AttentionSim, kind.as_str(), values);
            }
        }
    }

    let base = &models[0];
    for (m, data) in members.iter().zip(&models) {
        for (component, xs, ys) in [
            (Component::Encoder, &base.encoder, &data.encoder),
            (Component::Decoder, &base.decoder, &data.decoder),
        ] {
            for (l, (x, y)) in xs.iter().zip(ys).enumerate() {
                let s = neuron_sim(x, y)?;
                out.max_corr.extend(s.maxima.iter().enumerate().map(|(neuron, &v)| MaxCorrRow {
                    model: m.name.clone(),
                    component,
                    layer: l + 1,
                    neuron,
                    max_corr: v,
                }));
                out.neuron_sim.push(NeuronSimRow {
                    model: m.name.clone(),
                    iteration: m.iteration,
                    sparsity_excl: m.sparsity_excl,
                    component,
                    layer: l + 1,
                    score: s.score,
                    match_rate: s.match_rate,
                    dead_a: s.dead_a,
                    dead_b: s.dead_b,
                });
            }
            if let Some(last) = ys.last() {
                let r = svd_variance(last)?;
                out.svd.push(SvdRow {
                    model: m.name.clone(),
                    component,
                    layer: ys.len(),
                    singular_values: r.singular_values,
                    cumulative: r.cumulative,
                    min_k: r.min_k.into_iter().map(|(threshold, k)| MinK { threshold, k }).collect(),
                });
            }
        }
        for &grouping in &suite.groupings {
            let (labels, names) = grouping_labels(grouping, sentences, subtokens);
            let (Some(x), Some(y)) = (base.encoder.last(), data.encoder.last()) else {
                continue;
            };
            for g in grouped_similarity_min(x, y, &labels, &names, suite.min_group_tokens)? {
                out.grouped.push(GroupedRow {
                    model: m.name.clone(),
                    grouping,
                    group: g.group,
                    tokens: g.tokens,
                    cka: g.cka,
                });
            }
        }
        for ((attention, layer), fraction) in &data.concentration {
            out.concentration.push(ConcentrationRow {
                model: m.name.clone(),
                attention: *attention,
                layer: *layer,
                fraction: *fraction,
            });
        }
    }
    Ok(out)
}

/// `grouped_similarity` with a configurable minimum group size.
fn grouped_similarity_min(
    x: &Tensor,
    y: &Tensor,
    labels: &[usize],
    names: &[&str],
    min_tokens: usize,
) -> Result<Vec<crate::similarity::GroupSim>> {
    let mut out = grouped_similarity(x, y, labels, names)?;
    for g in &mut out {
        if g.tokens < min_tokens {
            g.cka = None;
        } else if g.cka.is_none() && g.tokens < crate::similarity::MIN_GROUP_TOKENS {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| names[labels[i]] == g.group).collect();
            g.cka = linear_cka(&x.select_rows(&rows)?, &y.select_rows(&rows)?).ok();
        }
    }
    Ok(out)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// All similarity-stage files, paths relative to the output directory.
pub fn similarity_files(sim: &SimilarityOutput, digest: &str) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    let mut add = |rel: String, body: Vec<u8>| files.push((rel, stamped_csv(digest, &body)));
    for m in &sim.matrices {
        let rows = m.values.iter().enumerate().flat_map(|(a, row)| {
            row.iter()
                .enumerate()
                .map(move |(b, v)| vec![(a + 1).to_string(), (b + 1).to_string(), v.to_string()])
        });
        add(format!("reports/{}", m.file), csv_bytes(&["layer_a", "layer_b", "value"], rows)?);
    }
    add(
        "reports/neuron_sim.csv".into(),
        csv_bytes(
            &["model", "iteration", "sparsity_excl", "component", "layer", "score", "match_rate", "dead_a", "dead_b"],
            sim.neuron_sim.iter().map(|r| {
                vec![
                    r.model.clone(),
                    r.iteration.to_string(),
                    r.sparsity_excl.to_string(),
                    r.component.as_str().into(),
                    r.layer.to_string(),
                    r.score.to_string(),
                    r.match_rate.to_string(),
                    r.dead_a.to_string(),
                    r.dead_b.to_string(),
                ]
            }),
        )?,
    );
    add(
        "reports/max_corr.csv".into(),
        csv_bytes(
            &["model", "component", "layer", "neuron", "max_corr"],
            sim.max_corr.iter().map(|r| {
                vec![
                    r.model.clone(),
                    r.component.as_str().into(),
                    r.layer.to_string(),
                    r.neuron.to_string(),
                    r.max_corr.to_string(),
                ]
            }),
        )?,
    );
    add(
        "reports/svd.csv".into(),
        csv_bytes(
            &["model", "component", "layer", "k", "singular_value", "cumulative"],
            sim.svd.iter().flat_map(|r| {
                r.singular_values.iter().zip(&r.cumulative).enumerate().map(move |(k, (s, c))| {
                    vec![
                        r.model.clone(),
                        r.component.as_str().into(),
                        r.layer.to_string(),
                        (k + 1).to_string(),
                        s.to_string(),
                        c.to_string(),
                    ]
                })
            }),
        )?,
    );
    add(
        "reports/svd_min_k.csv".into(),
        csv_bytes(
            &["model", "component", "layer", "threshold", "min_k"],
            sim.svd.iter().flat_map(|r| {
                r.min_k.iter().map(move |m| {
                    vec![
                        r.model.clone(),
                        r.component.as_str().into(),
                        r.layer.to_string(),
                        m.threshold.to_string(),
                        m.k.to_string(),
                    ]
                })
            }),
        )?,
    );
    add(
        "reports/grouped.csv".into(),
        csv_bytes(
            &["model", "grouping", "group", "tokens", "cka"],
            sim.grouped.iter().map(|r| {
                vec![
                    r.model.clone(),
                    r.grouping.as_str().into(),
                    r.group.clone(),
                    r.tokens.to_string(),
                    opt(r.cka),
                ]
            }),
        )?,
    );
    add(
        "reports/concentration.csv".into(),
        csv_bytes(
            &["model", "attention", "layer", "fraction"],
            sim.concentration.iter().map(|r| {
                vec![
                    r.model.clone(),
                    r.attention.as_str().into(),
                    r.layer.to_string(),
                    r.fraction.to_string(),
                ]
            }),
        )?,
    );
    let mut json = sim.clone();
    json.digest = digest.to_string();
    let mut bytes = serde_json::to_vec_pretty(&json)?;
    bytes.push(b'\n');
    files.push(("reports/similarity.json".into(), bytes));
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleModel {
    pub name: String,
    pub iteration: usize,
    pub sparsity_incl: f64,
    pub sparsity_excl: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub iteration: usize,
    pub sparsity_incl: f64,
    pub sparsity_excl: f64,
    pub bleu_magnitude: f64,
    pub bleu_random: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub family: ProbeFamily,
    pub task: String,
    /// One value per model, in model order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGroupCell {
    pub family: ProbeFamily,
    pub group: TaskGroup,
    pub model: String,
    pub layer: usize,
    pub mean_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub family: ProbeFamily,
    pub task: String,
    /// `None` with fewer models than a trend needs.
    pub trend: Option<String>,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSparsity {
    pub model: String,
    pub iteration: usize,
    pub path: String,
    pub kept: usize,
    pub total: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub schema_version: u32,
    pub digest: String,
    pub config_digest: String,
    pub models: Vec<BundleModel>,
    pub aborted: Vec<String>,
    pub table_a1: Vec<TableRow>,
    pub probe_best: Vec<TaskVector>,
    pub probe_zscores: Vec<TaskVector>,
    pub layer_groups: Vec<LayerGroupCell>,
    pub trends: Vec<TrendRow>,
    pub heatmaps: Vec<MatrixEntry>,
    pub svd_curves: Vec<SvdRow>,
    pub sparsity_modules: Vec<ModuleSparsity>,
    pub neuron_sim: Vec<NeuronSimRow>,
    pub concentration: Vec<ConcentrationRow>,
    pub grouped_similarity: Vec<GroupedRow>,
    /// Table name to CSV path, relative to `reports/`.
    pub files: BTreeMap<String, String>,
}

/// Assembles the bundle from the outputs of the earlier stages.
pub fn build_bundle(
    digest: &str,
    config_digest: &str,
    imp: &ImpSummary,
    probe: &ProbeReport,
    thresholds: &TrendThresholds,
    sim: &SimilarityOutput,
    sparsity: &[(MemberSummary, SparsityReport)],
) -> Result<Bundle> {
    let models: Vec<BundleModel> = imp
        .magnitude
        .iter()
        .map(|m| BundleModel {
            name: m.name.clone(),
            iteration: m.iteration,
            sparsity_incl: m.sparsity_incl,
            sparsity_excl: m.sparsity_excl,
            bleu: m.bleu,
        })
        .collect();
    let table_a1 = imp
        .magnitude
        .iter()
        .map(|m| TableRow {
            iteration: m.iteration,
            sparsity_incl: m.sparsity_incl,
            sparsity_excl: m.sparsity_excl,
            bleu_magnitude: m.bleu,
            bleu_random: imp.random.iter().find(|r| r.iteration == m.iteration).map(|r| r.bleu),
        })
        .collect();

    let families: Vec<ProbeFamily> = {
        let mut f: Vec<ProbeFamily> = probe.rows.iter().map(|r| r.family).collect();
        f.sort();
        f.dedup();
        f
    };
    let mut probe_best = Vec::new();
    let mut probe_zscores = Vec::new();
    let mut layer_groups = Vec::new();
    let mut trends = Vec::new();
    for &family in &families {
        for (task, values) in probe.best_vectors(family) {
            let trend = (values.len() >= MIN_TREND_MODELS)
                .then(|| classify_trend(&values, thresholds))
                .transpose()?;
            trends.push(TrendRow {
                family,
                task: task.to_string(),
                trend: trend.map(|(t, _)| t.as_str().to_string()),
                rho: trend.map(|(_, r)| r),
            });
            probe_best.push(TaskVector {
                family,
                task: task.to_string(),
                values,
            });
        }
        for (task, values) in zscore_table(probe, family)?.rows {
            probe_zscores.push(TaskVector {
                family,
                task: task.to_string(),
                values,
            });
        }
        let lz = layer_zscores(probe, family)?;
        for group in TaskGroup::ALL {
            let tasks: Vec<_> = group.tasks().into_iter().filter(|t| probe.tasks().contains(t)).collect();
            if tasks.is_empty() {
                continue;
            }
            for ((m, layer), mean_z) in layer_group_summary(&lz, &tasks)? {
                layer_groups.push(LayerGroupCell {
                    family,
                    group,
                    model: probe.models[m].clone(),
                    layer,
                    mean_z,
                });
            }
        }
    }

    let sparsity_modules = sparsity
        .iter()
        .flat_map(|(m, rep)| {
            rep.paths.iter().filter(|p| p.path.is_prunable()).map(move |p| ModuleSparsity {
                model: m.name.clone(),
                iteration: m.iteration,
                path: p.path.to_string(),
                kept: p.kept,
                total: p.total,
                sparsity: p.sparsity,
            })
        })
        .collect();

    let files = [
        ("table_a1", "table_a1.csv"),
        ("probe", "probe.csv"),
        ("probe_best", "probe_best.csv"),
        ("probe_zscores", "zscores.csv"),
        ("layer_groups", "layer_groups.csv"),
        ("trends", "trends.csv"),
        ("sparsity_modules", "sparsity_modules.csv"),
        ("neuron_sim", "neuron_sim.csv"),
        ("max_corr", "max_corr.csv"),
        ("svd", "svd.csv"),
        ("svd_min_k", "svd_min_k.csv"),
        ("grouped_similarity", "grouped.csv"),
        ("concentration", "concentration.csv"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();

    Ok(Bundle {
        schema_version: BUNDLE_SCHEMA_VERSION,
        digest: digest.to_string(),
        config_digest: config_digest.to_string(),
        models,
        aborted: imp.aborted.clone(),
        table_a1,
        probe_best,
        probe_zscores,
        layer_groups,
        trends,
        heatmaps: sim.matrices.clone(),
        svd_curves: sim.svd.clone(),
        sparsity_modules,
        neuron_sim: sim.neuron_sim.clone(),
        concentration: sim.concentration.clone(),
        grouped_similarity: sim.grouped.clone(),
        files,
    })
}

fn task_vector_rows(v: &[TaskVector], models: &[BundleModel]) -> Vec<Vec<String>> {
    v.iter()
        .flat_map(|t| {
            t.values.iter().zip(models).map(move |(x, m)| {
                vec![t.family.as_str().into(), t.task.clone(), m.name.clone(), x.to_string()]
            })
        })
        .collect()
}

/// `bundle.json` and the report-stage CSV tables.
pub fn bundle_files(b: &Bundle, digest: &str) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    let mut add = |name: &str, body: Vec<u8>| files.push((format!("reports/{}", name), stamped_csv(digest, &body)));
    add(
        "table_a1.csv",
        csv_bytes(
            &["iteration", "sparsity_incl", "sparsity_excl", "bleu_magnitude", "bleu_random"],
            b.table_a1.iter().map(|r| {
                vec![
                    r.iteration.to_string(),
                    r.sparsity_incl.to_string(),
                    r.sparsity_excl.to_string(),
                    r.bleu_magnitude.to_string(),
                    opt(r.bleu_random),
                ]
            }),
        )?,
    );
    let header = ["family", "task", "model", "value"];
    add("probe_best.csv", csv_bytes(&header, task_vector_rows(&b.probe_best, &b.models))?);
    add("zscores.csv", csv_bytes(&header, task_vector_rows(&b.probe_zscores, &b.models))?);
    add(
        "layer_groups.csv",
        csv_bytes(
            &["family", "group", "model", "layer", "mean_z"],
            b.layer_groups.iter().map(|c| {
                vec![
                    c.family.as_str().into(),
                    c.group.as_str().into(),
                    c.model.clone(),
                    c.layer.to_string(),
                    c.mean_z.to_string(),
                ]
            }),
        )?,
    );
    add(
        "trends.csv",
        csv_bytes(
            &["family", "task", "trend", "rho"],
            b.trends.iter().map(|t| {
                vec![
                    t.family.as_str().into(),
                    t.task.clone(),
                    t.trend.clone().unwrap_or_default(),
                    opt(t.rho),
                ]
            }),
        )?,
    );
    add(
        "sparsity_modules.csv",
        csv_bytes(
            &["model", "iteration", "path", "kept", "total", "sparsity"],
            b.sparsity_modules.iter().map(|m| {
                vec![
                    m.model.clone(),
                    m.iteration.to_string(),
                    m.path.clone(),
                    m.kept.to_string(),
                    m.total.to_string(),
                    m.sparsity.to_string(),
                ]
            }),
        )?,
    );
    let mut bytes = serde_json::to_vec_pretty(b)?;
    bytes.push(b'\n');
    files.push(("reports/bundle.json".into(), bytes));
    Ok(files)
}

/// Checks `bundle` against the shipped schema.
pub fn validate_bundle(bundle: &serde_json::Value) -> Result<()> {
    let schema: serde_json::Value = serde_json::from_str(BUNDLE_SCHEMA)?;
    let errors = crate::schema::Validator::new(schema)?.errors(bundle);
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!("bundle violates its schema: {}", errors.join("; "))))
    }
}
