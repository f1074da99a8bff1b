//! Persisted activation and attention dumps over the analysis corpus.
//!
//! Both files share one layout: 8-byte magic, `u32` version, provenance
//! strings (model, checkpoint digest, input digest), a body, and a trailing
//! SHA-256 of everything before it. Integers are little-endian, floats are
//! `f64`, and strings carry a `u16` length prefix.
//!
//! Activation body: `u32` encoder layers, `u32` decoder layers, `u32` width,
//! then for each component a `u32` token count with `(sentence, position,
//! token)` `u32` triples, then every layer's row-major payload, encoder first.
//!
//! Attention body: `u32` map count; per map a `u8` type code, `u32` layer,
//! `u32` heads, `u32` sentences, and per sentence `u32` query and key lengths
//! followed by head-major probabilities.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read, sha256, write_atomic, Reader, Writer};
use crate::model::{
    forward, ActivationDump, AttentionBlockSet, AttentionDump, AttentionMaps, AttentionType, ModelConfig,
    ParameterRegistry, SentencePair, TokenMeta,
};
use crate::pruning::MaskSet;
use crate::tensor::Tensor;

const ACT_MAGIC: &[u8; 8] = b"PPACTS\0\0";
const ATT_MAGIC: &[u8; 8] = b"PPATTN\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub model: String,
    pub checkpoint_digest: String,
    pub input_digest: String,
}

/// Runs the model over `pairs` in batches and concatenates the results,
/// numbering sentences in input order.
pub fn compute_dumps(
    config: &ModelConfig,
    registry: &ParameterRegistry,
    masks: &MaskSet,
    pairs: &[SentencePair],
    batch_size: usize,
) -> Result<(ActivationDump, AttentionDump)> {
    if pairs.is_empty() {
        return Err(Error::invalid("no sentences to dump"));
    }
    let mut enc_rows: Vec<Vec<f64>> = vec![Vec::new(); config.num_layers];
    let mut dec_rows: Vec<Vec<f64>> = vec![Vec::new(); config.num_layers];
    let mut acts = ActivationDump::default();
    let mut att = AttentionDump::default();
    let mut offset = 0u32;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let out = forward(config, registry, masks, chunk)?;
        for (dst, t) in enc_rows.iter_mut().zip(&out.activations.encoder) {
            dst.extend_from_slice(t.data());
        }
        for (dst, t) in dec_rows.iter_mut().zip(&out.activations.decoder) {
            dst.extend_from_slice(t.data());
        }
        let shift = |t: &TokenMeta| TokenMeta {
            sentence: t.sentence + offset,
            ..*t
        };
        acts.encoder_tokens.extend(out.activations.encoder_tokens.iter().map(shift));
        acts.decoder_tokens.extend(out.activations.decoder_tokens.iter().map(shift));
        for (key, maps) in out.attention.maps {
            att.maps
                .entry(key)
                .or_insert_with(|| AttentionMaps {
                    heads: maps.heads,
                    sentences: Vec::new(),
                })
                .sentences
                .extend(maps.sentences);
        }
        offset += chunk.len() as u32;
    }
    let d = config.model_dim;
    let n_enc = acts.encoder_tokens.len();
    let n_dec = acts.decoder_tokens.len();
    acts.encoder = enc_rows
        .into_iter()
        .map(|v| Tensor::matrix(n_enc, d, v))
        .collect::<Result<_>>()?;
    acts.decoder = dec_rows
        .into_iter()
        .map(|v| Tensor::matrix(n_dec, d, v))
        .collect::<Result<_>>()?;
    Ok((acts, att))
}

fn header(w: &mut Writer, magic: &[u8; 8], prov: &Provenance) {
    w.0.extend_from_slice(magic);
    w.u32(VERSION);
    w.str(&prov.model);
    w.str(&prov.checkpoint_digest);
    w.str(&prov.input_digest);
}

fn finish(mut w: Writer) -> Vec<u8> {
    let digest = sha256(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

fn open<'a>(bytes: &'a [u8], path: &'a Path, magic: &[u8; 8], kind: &'static str) -> Result<(Reader<'a>, Provenance)> {
    let err = |detail: &str| Error::Format {
        kind,
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < magic.len() + 32 {
        return Err(err("truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    if sha256(body) != tail {
        return Err(err("content hash mismatch"));
    }
    let mut r = Reader {
        buf: body,
        pos: 0,
        path,
        kind,
    };
    if r.take(8)? != magic {
        return Err(err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(err(&format!("unsupported version {}", version)));
    }
    let prov = Provenance {
        model: r.str()?,
        checkpoint_digest: r.str()?,
        input_digest: r.str()?,
    };
    Ok((r, prov))
}

fn tokens(w: &mut Writer, toks: &[TokenMeta]) {
    w.u32(toks.len() as u32);
    for t in toks {
        w.u32(t.sentence);
        w.u32(t.position);
        w.u32(t.token);
    }
}

fn read_tokens(r: &mut Reader<'_>) -> Result<Vec<TokenMeta>> {
    let n = r.u32()? as usize;
    (0..n)
        .map(|_| {
            Ok(TokenMeta {
                sentence: r.u32()?,
                position: r.u32()?,
                token: r.u32()?,
            })
        })
        .collect()
}

pub fn activations_to_bytes(prov: &Provenance, dump: &ActivationDump) -> Result<Vec<u8>> {
    let d = dump.encoder.first().or(dump.decoder.first()).map_or(0, |t| t.cols());
    for (layers, toks) in [
        (&dump.encoder, &dump.encoder_tokens),
        (&dump.decoder, &dump.decoder_tokens),
    ] {
        if layers.iter().any(|t| t.shape() != [toks.len(), d]) {
            return Err(Error::shape("activation dump", "layer shape disagrees with token table"));
        }
    }
    let mut w = Writer(Vec::new());
    header(&mut w, ACT_MAGIC, prov);
    w.u32(dump.encoder.len() as u32);
    w.u32(dump.decoder.len() as u32);
    w.u32(d as u32);
    tokens(&mut w, &dump.encoder_tokens);
    tokens(&mut w, &dump.decoder_tokens);
    for t in dump.encoder.iter().chain(&dump.decoder) {
        w.f64s(t.data());
    }
    Ok(finish(w))
}

pub fn activations_from_bytes(bytes: &[u8], path: &Path) -> Result<(Provenance, ActivationDump)> {
    let (mut r, prov) = open(bytes, path, ACT_MAGIC, "activation dump")?;
    let n_enc = r.u32()? as usize;
    let n_dec = r.u32()? as usize;
    let d = r.u32()? as usize;
    let encoder_tokens = read_tokens(&mut r)?;
    let decoder_tokens = read_tokens(&mut r)?;
    let mut layer = |rows: usize| -> Result<Tensor> { Tensor::matrix(rows, d, r.f64s(rows * d)?) };
    let encoder = (0..n_enc).map(|_| layer(encoder_tokens.len())).collect::<Result<_>>()?;
    let decoder = (0..n_dec).map(|_| layer(decoder_tokens.len())).collect::<Result<_>>()?;
    if r.pos != r.buf.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok((
        prov,
        ActivationDump {
            encoder,
            decoder,
            encoder_tokens,
            decoder_tokens,
        },
    ))
}

pub fn attention_to_bytes(prov: &Provenance, dump: &AttentionDump) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    header(&mut w, ATT_MAGIC, prov);
    w.u32(dump.maps.len() as u32);
    for ((kind, layer), maps) in &dump.maps {
        w.u8(kind.code());
        w.u32(*layer as u32);
        w.u32(maps.heads as u32);
        w.u32(maps.sentences.len() as u32);
        for s in &maps.sentences {
            w.u32(s.q_len as u32);
            w.u32(s.k_len as u32);
            w.f64s(&s.probs);
        }
    }
    finish(w)
}

pub fn attention_from_bytes(bytes: &[u8], path: &Path) -> Result<(Provenance, AttentionDump)> {
    let (mut r, prov) = open(bytes, path, ATT_MAGIC, "attention dump")?;
    let mut dump = AttentionDump::default();
    let n = r.u32()?;
    for _ in 0..n {
        let code = r.u8()?;
        let kind = AttentionType::from_code(code).ok_or_else(|| r.err(format!("unknown attention type {}", code)))?;
        let layer = r.u32()? as usize;
        let heads = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut sentences = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let q_len = r.u32()? as usize;
            let k_len = r.u32()? as usize;
            let probs = r.f64s(heads * q_len * k_len)?;
            sentences.push(AttentionBlockSet { q_len, k_len, probs });
        }
        dump.maps.insert((kind, layer), AttentionMaps { heads, sentences });
    }
    if r.pos != r.buf.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok((prov, dump))
}

pub fn save_activations(path: &Path, prov: &Provenance, dump: &ActivationDump) -> Result<()> {
    write_atomic(path, &activations_to_bytes(prov, dump)?)
}

pub fn load_activations(path: &Path) -> Result<(Provenance, ActivationDump)> {
    activations_from_bytes(&read(path)?, path)
}

pub fn save_attention(path: &Path, prov: &Provenance, dump: &AttentionDump) -> Result<()> {
    write_atomic(path, &attention_to_bytes(prov, dump))
}

pub fn load_attention(path: &Path) -> Result<(Provenance, AttentionDump)> {
    attention_from_bytes(&read(path)?, path)
}
