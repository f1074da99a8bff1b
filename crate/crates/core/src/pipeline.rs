//! Stage runner: generate → train → imp → dump → probe → similarity →
//! report, with a manifest that makes reruns incremental.
//!
//! Each stage has an input digest built from its config sections and the
//! checksums of its prerequisites' artifacts. A stage whose latest manifest
//! record carries the current digest, and whose artifacts still hash to the
//! recorded values, is skipped unless forced.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::corpus::{generate_corpus, AnnotatedSentence, Corpus, SubtokenMap, Tokenizer};
use crate::dump::{compute_dumps, load_activations, load_attention, save_activations, save_attention, Provenance};
use crate::error::{Error, Result};
use crate::io::{read, sha256_hex, write_atomic};
use crate::model::{ActivationDump, AttentionDump, ModelConfig, SentencePair};
use crate::probing::run_probe_suite;
use crate::pruning::{imp_run, train_lth0, ImpData, ImpStart, LthMember, Pruner};
use crate::report::{self, ImpSummary, MemberSummary, ProbeOutput};
use crate::training::{encode_pairs, Checkpoint};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Train,
    Imp,
    Dump,
    Probe,
    Similarity,
    Report,
}

impl Stage {
    /// Dependency order.
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Train,
        Stage::Imp,
        Stage::Dump,
        Stage::Probe,
        Stage::Similarity,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Imp => "imp",
            Stage::Dump => "dump",
            Stage::Probe => "probe",
            Stage::Similarity => "similarity",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::Train => &[Stage::Generate],
            Stage::Imp => &[Stage::Generate, Stage::Train],
            Stage::Dump => &[Stage::Generate, Stage::Imp],
            Stage::Probe => &[Stage::Generate, Stage::Dump],
            Stage::Similarity => &[Stage::Generate, Stage::Imp, Stage::Dump],
            Stage::Report => &[Stage::Imp, Stage::Probe, Stage::Similarity],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{}`", s)))
    }
}

/// Parses a comma-separated stage list.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let stages: Vec<Stage> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Stage::from_str)
        .collect::<Result<_>>()?;
    if stages.is_empty() {
        return Err(Error::Config("empty stage list".into()));
    }
    Ok(stages)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub input_digest: String,
    pub artifacts: Vec<ArtifactRecord>,
    pub wall_seconds: f64,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEdge {
    pub stage: Stage,
    pub depends_on: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    /// Digest of the most recent configuration run in this directory.
    pub config_digest: String,
    pub stage_graph: Vec<StageEdge>,
    /// Append-only; the last record of a stage is its current state.
    pub records: Vec<StageRecord>,
}

impl RunManifest {
    fn new(config_digest: String) -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA,
            tool_version: TOOL_VERSION.to_string(),
            config_digest,
            stage_graph: Stage::ALL
                .iter()
                .map(|&stage| StageEdge {
                    stage,
                    depends_on: stage.deps().to_vec(),
                })
                .collect(),
            records: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let m: RunManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            kind: "run manifest",
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if m.schema_version != MANIFEST_SCHEMA {
            return Err(Error::Format {
                kind: "run manifest",
                path: path.to_path_buf(),
                detail: format!("schema version {} unsupported", m.schema_version),
            });
        }
        Ok(m)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn latest(&self, stage: Stage) -> Option<&StageRecord> {
        self.records.iter().rev().find(|r| r.stage == stage)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// `None` runs every stage.
    pub stages: Option<Vec<Stage>>,
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub manifest: RunManifest,
}

/// Validates `config` and runs the requested stages into `config.out`.
pub fn run(config: &ExperimentConfig, options: &RunOptions) -> Result<RunSummary> {
    let config = config.clone().resolved();
    config.validate()?;
    let out = config.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        RunManifest::load(&manifest_path)?
    } else {
        RunManifest::new(config.digest())
    };
    manifest.config_digest = config.digest();
    manifest.tool_version = TOOL_VERSION.to_string();
    let mut p = Pipeline {
        cfg: &config,
        out,
        manifest,
    };

    let selected: BTreeSet<Stage> = match &options.stages {
        Some(s) => s.iter().copied().collect(),
        None => Stage::ALL.into_iter().collect(),
    };
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| selected.contains(s)) {
        let missing: Vec<String> = stage
            .deps()
            .iter()
            .filter(|d| !p.is_current(**d).unwrap_or(false))
            .map(|d| d.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingPrerequisites(
                missing
                    .into_iter()
                    .map(|d| format!("{} (run `{}` first)", d, d))
                    .collect(),
            ));
        }
        for d in stage.deps() {
            p.verify_artifacts(*d, stage)?;
        }
        let digest = p.input_digest(stage)?;
        if !options.force && p.is_current(stage)? {
            p.verify_artifacts(stage, stage)?;
            log::info!("{}: up to date", stage);
            skipped.push(stage);
            continue;
        }
        log::info!("{}: running", stage);
        let t0 = Instant::now();
        let paths = p.execute(stage, &digest).map_err(|e| match e {
            e @ (Error::Stage { .. } | Error::MissingPrerequisites(_)) => e,
            e => Error::Stage {
                stage: stage.to_string(),
                detail: e.to_string(),
            },
        })?;
        let artifacts = paths
            .iter()
            .map(|rel| p.record_artifact(rel))
            .collect::<Result<_>>()?;
        p.manifest.records.push(StageRecord {
            stage,
            input_digest: digest,
            artifacts,
            wall_seconds: t0.elapsed().as_secs_f64(),
            forced: options.force,
        });
        p.manifest.save(&manifest_path)?;
        log::info!("{}: done in {:.1}s", stage, t0.elapsed().as_secs_f64());
        executed.push(stage);
    }
    p.manifest.save(&manifest_path)?;
    Ok(RunSummary {
        executed,
        skipped,
        manifest: p.manifest,
    })
}

pub fn lth_dir(k: usize) -> String {
    format!("lth{}", k)
}

pub fn member_dir(pruner: Pruner, k: usize) -> String {
    match pruner {
        Pruner::Magnitude => lth_dir(k),
        Pruner::Random => format!("random/{}", lth_dir(k)),
    }
}

/// Prefixes a CSV body with a `# digest: ...` comment line.
pub fn stamped_csv(digest: &str, body: &[u8]) -> Vec<u8> {
    let mut out = format!("# digest: {}\n", digest).into_bytes();
    out.extend_from_slice(body);
    out
}

/// Splits a stamped CSV into its digest and body.
pub fn unstamp_csv(bytes: &[u8]) -> Option<(&str, &[u8])> {
    let nl = bytes.iter().position(|&b| b == b'\n')?;
    let line = std::str::from_utf8(&bytes[..nl]).ok()?;
    Some((line.strip_prefix("# digest: ")?, &bytes[nl + 1..]))
}

struct Pipeline<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    manifest: RunManifest,
}

/// Data shared by the analysis stages.
struct Analysis {
    tokenizer: Tokenizer,
    sentences: Vec<AnnotatedSentence>,
    subtokens: Vec<SubtokenMap>,
    pairs: Vec<SentencePair>,
}

impl Pipeline<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn record_artifact(&self, rel: &str) -> Result<ArtifactRecord> {
        let bytes = read(&self.path(rel))?;
        Ok(ArtifactRecord {
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        })
    }

    fn input_digest(&self, stage: Stage) -> Result<String> {
        let c = self.cfg;
        let sections = match stage {
            Stage::Generate => json!([c.corpus]),
            Stage::Train => json!([c.model, c.training]),
            Stage::Imp => json!([c.imp, c.eval, c.seed]),
            Stage::Dump => json!([c.dump]),
            Stage::Probe => json!([c.probe]),
            Stage::Similarity => json!([c.similarity]),
            Stage::Report => json!([]),
        };
        let mut upstream = Vec::new();
        for d in stage.deps() {
            let rec = self
                .manifest
                .latest(*d)
                .ok_or_else(|| Error::MissingPrerequisites(vec![d.to_string()]))?;
            upstream.push(json!({
                "stage": d,
                "digest": rec.input_digest,
                "artifacts": rec.artifacts.iter().map(|a| (&a.path, &a.sha256)).collect::<Vec<_>>(),
            }));
        }
        Ok(ExperimentConfig::section_digest(
            stage.as_str(),
            &[&json!({ "tool": TOOL_VERSION, "config": sections, "upstream": upstream })],
        ))
    }

    /// Latest record matches the current inputs. File integrity is checked
    /// separately so damage is reported instead of silently rebuilt.
    fn is_current(&self, stage: Stage) -> Result<bool> {
        let Some(rec) = self.manifest.latest(stage) else {
            return Ok(false);
        };
        if stage.deps().iter().any(|d| !self.is_current(*d).unwrap_or(false)) {
            return Ok(false);
        }
        Ok(rec.input_digest == self.input_digest(stage)?)
    }

    /// Fails with a rerun hint when a prerequisite's file changed on disk.
    fn verify_artifacts(&self, dep: Stage, consumer: Stage) -> Result<()> {
        let rec = self
            .manifest
            .latest(dep)
            .ok_or_else(|| Error::MissingPrerequisites(vec![dep.to_string()]))?;
        for a in &rec.artifacts {
            let ok = self.record_artifact(&a.path).is_ok_and(|now| now == *a);
            if !ok {
                return Err(Error::Stage {
                    stage: consumer.to_string(),
                    detail: format!(
                        "artifact `{}` from stage `{}` is missing or fails its checksum; rerun with `--stages {} --force`",
                        a.path, dep, dep
                    ),
                });
            }
        }
        Ok(())
    }

    fn stage_digest(&self, stage: Stage) -> Result<String> {
        self.manifest
            .latest(stage)
            .map(|r| r.input_digest.clone())
            .ok_or_else(|| Error::MissingPrerequisites(vec![stage.to_string()]))
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        write_atomic(&self.path(rel), bytes)?;
        Ok(rel.to_string())
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<String> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn execute(&self, stage: Stage, digest: &str) -> Result<Vec<String>> {
        match stage {
            Stage::Generate => self.generate(digest),
            Stage::Train => self.train(digest),
            Stage::Imp => self.imp(digest),
            Stage::Dump => self.dump(digest),
            Stage::Probe => self.probe(digest),
            Stage::Similarity => self.similarity(digest),
            Stage::Report => self.report(digest),
        }
    }

    fn generate(&self, digest: &str) -> Result<Vec<String>> {
        let c = &self.cfg.corpus;
        let corpus = generate_corpus(c.seed, c.sentences, &c.grammar)?;
        corpus.save(&self.path("corpus"), digest)?;
        Ok(["train.jsonl", "valid.jsonl", "test.jsonl", "manifest.json"]
            .iter()
            .map(|f| format!("corpus/{}", f))
            .collect())
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let (corpus, manifest) = Corpus::load(&self.path("corpus"))?;
        let expected = self.stage_digest(Stage::Generate)?;
        if manifest.digest != expected {
            return Err(Error::DigestMismatch {
                expected,
                found: manifest.digest,
            });
        }
        Ok(corpus)
    }

    fn model_config(&self, tokenizer: &Tokenizer) -> ModelConfig {
        let v = tokenizer.model_vocab();
        self.cfg.model.clone().with_vocab(v, v)
    }

    fn load_checkpoint(&self, rel: &str, expected_digest: &str) -> Result<Checkpoint> {
        let ck = Checkpoint::load(&self.path(rel))?;
        if ck.config_digest != expected_digest {
            return Err(Error::Stage {
                stage: "load".into(),
                detail: format!(
                    "checkpoint `{}` was written under digest {} but this run expects {}; rerun the producing stage",
                    rel, ck.config_digest, expected_digest
                ),
            });
        }
        Ok(ck)
    }

    fn train(&self, digest: &str) -> Result<Vec<String>> {
        let corpus = self.load_corpus()?;
        let tok = corpus.tokenizer();
        let config = self.model_config(&tok);
        let train = encode_pairs(&tok, &corpus.train);
        let data = ImpData {
            train: &train,
            eval: &[],
            tokenizer: &tok,
            eval_batch: self.cfg.eval.batch_size,
            digest,
        };
        let start = train_lth0(&config, &self.cfg.training, &data)?;
        let ck = "lth0/checkpoint.ckpt";
        let rw = "lth0/rewind.ckpt";
        start.lth0.save(&self.path(ck))?;
        start.rewind.save(&self.path(rw))?;
        Ok(vec![ck.into(), rw.into()])
    }

    fn eval_pairs(&self, corpus: &Corpus, tok: &Tokenizer) -> Vec<SentencePair> {
        let n = match self.cfg.eval.sentences {
            0 => corpus.test.len(),
            n => n.min(corpus.test.len()),
        };
        encode_pairs(tok, &corpus.test[..n])
    }

    fn imp(&self, digest: &str) -> Result<Vec<String>> {
        let corpus = self.load_corpus()?;
        let tok = corpus.tokenizer();
        let config = self.model_config(&tok);
        let train_digest = self.stage_digest(Stage::Train)?;
        let start = ImpStart::new(
            self.load_checkpoint("lth0/checkpoint.ckpt", &train_digest)?,
            self.load_checkpoint("lth0/rewind.ckpt", &train_digest)?,
        )?;
        let train = encode_pairs(&tok, &corpus.train);
        let eval = self.eval_pairs(&corpus, &tok);
        let data = ImpData {
            train: &train,
            eval: &eval,
            tokenizer: &tok,
            eval_batch: self.cfg.eval.batch_size,
            digest,
        };
        let mut written = Vec::new();
        let mut summary = ImpSummary {
            digest: digest.to_string(),
            magnitude: Vec::new(),
            random: Vec::new(),
            aborted: Vec::new(),
        };
        let mut pruners = vec![Pruner::Magnitude];
        if self.cfg.imp.random_baseline {
            pruners.push(Pruner::Random);
        }
        for pruner in pruners {
            let settings = self.cfg.imp.settings(pruner, self.cfg.seed);
            let mut members = Vec::new();
            let family = imp_run(&config, &self.cfg.training, &settings, &start, &data, |m: &LthMember| {
                let dir = member_dir(pruner, m.iteration);
                let (checkpoint, checkpoint_sha256) = if m.iteration == 0 {
                    let rel = "lth0/checkpoint.ckpt".to_string();
                    let sha = sha256_hex(&read(&self.path(&rel))?);
                    (rel, sha)
                } else {
                    let rel = format!("{}/checkpoint.ckpt", dir);
                    let bytes = m.checkpoint.to_bytes();
                    written.push(self.write(&rel, &bytes)?);
                    (rel, sha256_hex(&bytes))
                };
                let s = MemberSummary {
                    name: dir.clone(),
                    iteration: m.iteration,
                    pruner,
                    bleu: m.bleu,
                    sparsity_incl: m.sparsity.incl_embedding,
                    sparsity_excl: m.sparsity.excl_embedding,
                    sparsity_non_embedding: m.sparsity.non_embedding,
                    checkpoint,
                    checkpoint_sha256,
                };
                if m.iteration > 0 || pruner == Pruner::Magnitude {
                    let mut csv = Vec::new();
                    m.sparsity.write_csv(&mut csv)?;
                    written.push(self.write(&format!("{}/sparsity.csv", dir), &stamped_csv(digest, &csv))?);
                    written.push(self.write_json(
                        &format!("{}/sparsity.json", dir),
                        &json!({ "digest": digest, "sparsity": m.sparsity }),
                    )?);
                }
                members.push(s);
                Ok(())
            })?;
            if let Some(why) = family.aborted {
                summary.aborted.push(format!("{}: {}", pruner.as_str(), why));
            }
            match pruner {
                Pruner::Magnitude => summary.magnitude = members,
                Pruner::Random => summary.random = members,
            }
        }
        written.push(self.write_json("reports/imp.json", &summary)?);
        Ok(written)
    }

    fn load_imp(&self) -> Result<ImpSummary> {
        let s: ImpSummary = serde_json::from_slice(&read(&self.path("reports/imp.json"))?)?;
        let expected = self.stage_digest(Stage::Imp)?;
        if s.digest != expected {
            return Err(Error::DigestMismatch {
                expected,
                found: s.digest,
            });
        }
        Ok(s)
    }

    fn analysis(&self) -> Result<Analysis> {
        let corpus = self.load_corpus()?;
        let tokenizer = corpus.tokenizer();
        let n = match self.cfg.dump.sentences {
            0 => corpus.valid.len(),
            n => n.min(corpus.valid.len()),
        };
        let sentences = corpus.valid[..n].to_vec();
        let subtokens = sentences.iter().map(|s| tokenizer.encode_source(s)).collect();
        let pairs = encode_pairs(&tokenizer, &sentences);
        Ok(Analysis {
            tokenizer,
            sentences,
            subtokens,
            pairs,
        })
    }

    fn dump(&self, digest: &str) -> Result<Vec<String>> {
        let a = self.analysis()?;
        let config = self.model_config(&a.tokenizer);
        let imp = self.load_imp()?;
        let train_digest = self.stage_digest(Stage::Train)?;
        let mut written = Vec::new();
        for m in &imp.magnitude {
            let expected = if m.iteration == 0 { &train_digest } else { &imp.digest };
            let ck = self.load_checkpoint(&m.checkpoint, expected)?;
            let (acts, att) = compute_dumps(&config, &ck.registry, &ck.masks, &a.pairs, self.cfg.dump.batch_size)?;
            let prov = Provenance {
                model: m.name.clone(),
                checkpoint_digest: m.checkpoint_sha256.clone(),
                input_digest: digest.to_string(),
            };
            let act_rel = format!("{}/activations.dump", m.name);
            let att_rel = format!("{}/attention.dump", m.name);
            save_activations(&self.path(&act_rel), &prov, &acts)?;
            save_attention(&self.path(&att_rel), &prov, &att)?;
            written.push(act_rel);
            written.push(att_rel);
        }
        Ok(written)
    }

    fn check_provenance(&self, rel: &str, prov: &Provenance, expected: &str) -> Result<()> {
        if prov.input_digest != expected {
            return Err(Error::Stage {
                stage: "load".into(),
                detail: format!(
                    "dump `{}` was written under digest {} but this run expects {}; rerun `dump`",
                    rel, prov.input_digest, expected
                ),
            });
        }
        Ok(())
    }

    fn load_model_activations(&self, name: &str) -> Result<ActivationDump> {
        let rel = format!("{}/activations.dump", name);
        let (prov, acts) = load_activations(&self.path(&rel))?;
        self.check_provenance(&rel, &prov, &self.stage_digest(Stage::Dump)?)?;
        Ok(acts)
    }

    fn load_model_attention(&self, name: &str) -> Result<AttentionDump> {
        let rel = format!("{}/attention.dump", name);
        let (prov, att) = load_attention(&self.path(&rel))?;
        self.check_provenance(&rel, &prov, &self.stage_digest(Stage::Dump)?)?;
        Ok(att)
    }

    fn probe(&self, digest: &str) -> Result<Vec<String>> {
        let a = self.analysis()?;
        let imp = self.load_imp()?;
        let dumps: Vec<(String, ActivationDump)> = imp
            .magnitude
            .iter()
            .map(|m| Ok((m.name.clone(), self.load_model_activations(&m.name)?)))
            .collect::<Result<_>>()?;
        let refs: Vec<(String, &ActivationDump)> = dumps.iter().map(|(n, d)| (n.clone(), d)).collect();
        let report = run_probe_suite(&self.cfg.probe, &a.sentences, &a.subtokens, &refs)?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        let out = ProbeOutput {
            digest: digest.to_string(),
            report,
        };
        Ok(vec![
            self.write("reports/probe.csv", &stamped_csv(digest, &csv))?,
            self.write_json("reports/probe.json", &out)?,
        ])
    }

    fn similarity(&self, digest: &str) -> Result<Vec<String>> {
        let a = self.analysis()?;
        let imp = self.load_imp()?;
        let models = report::analyze_similarity(
            &self.cfg.similarity,
            &imp.magnitude,
            &a.sentences,
            &a.subtokens,
            |name| Ok((self.load_model_activations(name)?, self.load_model_attention(name)?)),
        )?;
        let files = report::similarity_files(&models, digest)?;
        let mut written = Vec::new();
        for (rel, bytes) in files {
            written.push(self.write(&rel, &bytes)?);
        }
        Ok(written)
    }

    fn report(&self, digest: &str) -> Result<Vec<String>> {
        let imp = self.load_imp()?;
        let probe: ProbeOutput = serde_json::from_slice(&read(&self.path("reports/probe.json"))?)?;
        let probe_digest = self.stage_digest(Stage::Probe)?;
        if probe.digest != probe_digest {
            return Err(Error::DigestMismatch {
                expected: probe_digest,
                found: probe.digest,
            });
        }
        let sim: report::SimilarityOutput =
            serde_json::from_slice(&read(&self.path("reports/similarity.json"))?)?;
        let sim_digest = self.stage_digest(Stage::Similarity)?;
        if sim.digest != sim_digest {
            return Err(Error::DigestMismatch {
                expected: sim_digest,
                found: sim.digest,
            });
        }
        let mut sparsity = Vec::new();
        for m in &imp.magnitude {
            let v: serde_json::Value = serde_json::from_slice(&read(&self.path(&format!("{}/sparsity.json", m.name)))?)?;
            sparsity.push((m.clone(), serde_json::from_value(v["sparsity"].clone())?));
        }
        let bundle = report::build_bundle(
            digest,
            &self.cfg.digest(),
            &imp,
            &probe.report,
            &self.cfg.probe.trend,
            &sim,
            &sparsity,
        )?;
        report::validate_bundle(&serde_json::to_value(&bundle)?)?;
        let mut written = Vec::new();
        for (rel, bytes) in report::bundle_files(&bundle, digest)? {
            written.push(self.write(&rel, &bytes)?);
        }
        Ok(written)
    }
}
