//! Cross-model representation similarity: neuron correlations, linear CKA
//! over layers and attention heads, SVD spectra, per-group CKA and the
//! attention concentration statistic.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionDump, AttentionMaps, AttentionType};
use crate::tensor::{matmul_t, Tensor};

const DEAD_VARIANCE: f64 = 1e-24;

/// Pearson correlation. A zero-variance input yields `0` with `dead = true`.
pub fn neuron_corr(x: &[f64], y: &[f64]) -> Result<(f64, bool)> {
    if x.len() != y.len() {
        return Err(Error::shape("neuron_corr", format!("{} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two samples"));
    }
    let (zx, dx) = standardize(x);
    let (zy, dy) = standardize(y);
    if dx || dy {
        return Ok((0.0, true));
    }
    Ok((dot(&zx, &zy).clamp(-1.0, 1.0), false))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Centers and scales to unit norm, so a dot product is a correlation.
fn standardize(x: &[f64]) -> (Vec<f64>, bool) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss = dot(&c, &c);
    if ss <= DEAD_VARIANCE * n * mean.abs().max(1.0).powi(2) {
        return (vec![0.0; x.len()], true);
    }
    let norm = ss.sqrt();
    (c.into_iter().map(|v| v / norm).collect(), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSim {
    pub score: f64,
    /// Fraction of live A-neurons whose best B-neuron has the same index.
    pub match_rate: f64,
    /// Per A-neuron maximum correlation.
    pub maxima: Vec<f64>,
    pub dead_a: usize,
    pub dead_b: usize,
}

/// Mean over A's neurons of the maximum correlation with any B neuron.
pub fn neuron_sim(a: &Tensor, b: &Tensor) -> Result<NeuronSim> {
    let (n, p) = a.dims2()?;
    let (nb, q) = b.dims2()?;
    if n != nb {
        return Err(Error::shape("neuron_sim", format!("{} vs {} rows", n, nb)));
    }
    if n < 2 || p == 0 || q == 0 {
        return Err(Error::invalid("neuron_sim needs at least two rows and one neuron"));
    }
    let za: Vec<(Vec<f64>, bool)> = (0..p).map(|j| standardize(&a.column(j))).collect();
    let zb: Vec<(Vec<f64>, bool)> = (0..q).map(|j| standardize(&b.column(j))).collect();
    let mut maxima = Vec::with_capacity(p);
    let mut matched = 0usize;
    let mut live = 0usize;
    for (i, (x, dead)) in za.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (j, (y, _)) in zb.iter().enumerate() {
            let r = dot(x, y).clamp(-1.0, 1.0);
            if r > best {
                best = r;
                arg = j;
            }
        }
        maxima.push(best);
        if !dead {
            live += 1;
            if arg == i {
                matched += 1;
            }
        }
    }
    // Summing in sorted order makes the score bit-identical under any
    // permutation of either matrix's columns.
    let mut sorted = maxima.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(NeuronSim {
        score: sorted.iter().sum::<f64>() / p as f64,
        match_rate: if live == 0 { 0.0 } else { matched as f64 / live as f64 },
        maxima,
        dead_a: za.iter().filter(|z| z.1).count(),
        dead_b: zb.iter().filter(|z| z.1).count(),
    })
}

fn center_columns(x: &Tensor) -> Result<Tensor> {
    let (n, p) = x.dims2()?;
    let mut means = vec![0.0; p];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(p.max(1)) {
        for (v, m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    Ok(out)
}

fn frobenius_sq(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// Linear CKA in feature space: `‖YᵀX‖² / (‖XᵀX‖ ‖YᵀY‖)` on centered columns.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, _) = x.dims2()?;
    let (ny, _) = y.dims2()?;
    if n != ny {
        return Err(Error::shape("linear_cka", format!("{} vs {} rows", n, ny)));
    }
    if n < 2 {
        return Err(Error::invalid("linear_cka needs at least two rows"));
    }
    let xc = center_columns(x)?;
    let yc = center_columns(y)?;
    if frobenius_sq(&xc) == 0.0 || frobenius_sq(&yc) == 0.0 {
        return Err(Error::invalid("linear_cka: a centered matrix is all zeros"));
    }
    let yx = frobenius_sq(&matmul_t(&yc, &xc, true, false)?);
    let xx = frobenius_sq(&matmul_t(&xc, &xc, true, false)?).sqrt();
    let yy = frobenius_sq(&matmul_t(&yc, &yc, true, false)?).sqrt();
    Ok((yx / (xx * yy)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    NeuronSim,
    LayerSim,
    AttentionSim,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::NeuronSim => "neuron_sim",
            MetricKind::LayerSim => "layer_sim",
            MetricKind::AttentionSim => "attention_sim",
        }
    }
}

/// `values[a][b]` compares layer `a + 1` of model A with layer `b + 1` of B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub kind: MetricKind,
    pub model_a: String,
    pub model_b: String,
    pub label: String,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer_a", "layer_b", "value"])?;
        for (a, row) in self.values.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                w.write_record([(a + 1).to_string(), (b + 1).to_string(), format!("{:.9}", v)])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Linear CKA between every layer of A and every layer of B.
pub fn layer_sim_heatmap(a: &[Tensor], b: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("layer_sim_heatmap: missing layers"));
    }
    a.iter()
        .map(|x| b.iter().map(|y| linear_cka(x, y)).collect())
        .collect()
}

/// NeuronSim score between every layer of A and every layer of B.
pub fn neuron_sim_heatmap(a: &[Tensor], b: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("neuron_sim_heatmap: missing layers"));
    }
    a.iter()
        .map(|x| b.iter().map(|y| neuron_sim(x, y).map(|s| s.score)).collect())
        .collect()
}

/// Rows are within-sentence (query, key) pairs that are visible under the
/// attention type's mask; columns are heads. Every distribution is checked
/// to sum to one, and causal maps to put no mass on future keys.
pub fn attention_pairs(maps: &AttentionMaps, kind: AttentionType) -> Result<Tensor> {
    let h = maps.heads;
    let mut data = Vec::new();
    let mut rows = 0;
    for (s, block) in maps.sentences.iter().enumerate() {
        for head in 0..h {
            for q in 0..block.q_len {
                let dist = block.distribution(head, q);
                let total: f64 = dist.iter().sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "{} sentence {} head {} query {}: mass {}",
                        kind.as_str(),
                        s,
                        head,
                        q,
                        total
                    )));
                }
                if kind == AttentionType::DecSelf && dist.iter().skip(q + 1).any(|&p| p != 0.0) {
                    return Err(Error::invalid(format!(
                        "dec-self sentence {} query {} attends to the future",
                        s, q
                    )));
                }
            }
        }
        for q in 0..block.q_len {
            let keys = if kind == AttentionType::DecSelf {
                (q + 1).min(block.k_len)
            } else {
                block.k_len
            };
            for k in 0..keys {
                data.extend(block.pair_vector(h, q, k));
                rows += 1;
            }
        }
    }
    Tensor::matrix(rows, h, data)
}

/// Linear CKA over word-pair rows with one column per head.
pub fn attention_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::invalid(format!(
            "attention_sim: {} vs {} word pairs",
            a.rows(),
            b.rows()
        )));
    }
    linear_cka(a, b)
}

pub const SVD_THRESHOLDS: [f64; 3] = [0.5, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdReport {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// `cumulative[k - 1]` is the variance fraction of the top `k` directions.
    pub cumulative: Vec<f64>,
    /// `(threshold, smallest k reaching it)`.
    pub min_k: Vec<(f64, usize)>,
}

/// Smallest `k` with `cumulative[k - 1] >= threshold`.
pub fn min_k(cumulative: &[f64], threshold: f64) -> Option<usize> {
    cumulative.iter().position(|&c| c >= threshold).map(|i| i + 1)
}

/// Singular value spectrum of the column-centered matrix.
pub fn svd_variance(x: &Tensor) -> Result<SvdReport> {
    let (n, p) = x.dims2()?;
    let xc = center_columns(x)?;
    let m = DMatrix::from_row_slice(n, p, xc.data());
    let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if sv.is_empty() || total <= 0.0 || sv[0] <= 1e-12 * xc.data().iter().fold(0.0f64, |a, v| a.max(v.abs())) {
        return Err(Error::invalid("svd_variance: matrix has rank 0"));
    }
    let mut acc = 0.0;
    let mut cumulative: Vec<f64> = sv
        .iter()
        .map(|s| {
            acc += s * s;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = cumulative.last_mut() {
        *last = 1.0;
    }
    let min_k = SVD_THRESHOLDS
        .iter()
        .map(|&t| (t, min_k(&cumulative, t).unwrap_or(cumulative.len())))
        .collect();
    Ok(SvdReport {
        singular_values: sv,
        cumulative,
        min_k,
    })
}

pub const MIN_GROUP_TOKENS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSim {
    pub group: String,
    pub tokens: usize,
    /// `None` when the group was skipped.
    pub cka: Option<f64>,
}

/// Linear CKA restricted to each group's rows. `labels[i]` indexes `names`.
pub fn grouped_similarity(x: &Tensor, y: &Tensor, labels: &[usize], names: &[&str]) -> Result<Vec<GroupSim>> {
    if names.is_empty() || labels.is_empty() {
        return Err(Error::invalid("grouped_similarity: empty grouping"));
    }
    if labels.len() != x.rows() || labels.len() != y.rows() {
        return Err(Error::shape(
            "grouped_similarity",
            format!("{} labels for {} and {} rows", labels.len(), x.rows(), y.rows()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= names.len()) {
        return Err(Error::invalid(format!("group label {} has no name", bad)));
    }
    let mut out = Vec::with_capacity(names.len());
    for (g, name) in names.iter().enumerate() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == g).collect();
        let cka = if rows.len() < MIN_GROUP_TOKENS {
            log::warn!("group `{}` has {} tokens; skipped", name, rows.len());
            None
        } else {
            match linear_cka(&x.select_rows(&rows)?, &y.select_rows(&rows)?) {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("group `{}` skipped: {}", name, e);
                    None
                }
            }
        };
        out.push(GroupSim {
            group: name.to_string(),
            tokens: rows.len(),
            cka,
        });
    }
    Ok(out)
}

/// Fraction of attention distributions whose largest weight exceeds
/// `threshold`, per (attention type, layer).
pub fn attention_concentration(dump: &AttentionDump, threshold: f64) -> BTreeMap<(AttentionType, usize), f64> {
    dump.maps
        .iter()
        .map(|(key, maps)| (*key, concentration(maps, threshold)))
        .collect()
}

fn concentration(maps: &AttentionMaps, threshold: f64) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for block in &maps.sentences {
        for h in 0..maps.heads {
            for q in 0..block.q_len {
                let max = block.distribution(h, q).iter().fold(0.0f64, |a, &b| a.max(b));
                total += 1;
                if max > threshold {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
