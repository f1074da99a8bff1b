//! Synthetic translation language: a Zipfian lexicon with tagged word types,
//! depth-limited phrase structure, a deterministic source→target rewrite, gold
//! annotations, subtoken splitting and corpus BLEU.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BOS_ID, EOS_ID, PAD_ID};

pub const SCHEMA_VERSION: u32 = 1;

const CONSONANTS: &[u8] = b"ptkbdgmnsl";
const VOWELS: &[u8] = b"aeiou";
pub const NUM_SYLLABLES: usize = 50;
const NUM_TAGS: usize = 8;
/// Largest vocabulary the two-syllable surface scheme can spell.
pub const MAX_VOCAB: usize = NUM_TAGS * NUM_SYLLABLES * (NUM_SYLLABLES / NUM_TAGS);
const MARKERS: [&str; 2] = ["ta", "ri"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tag {
    Noun,
    Verb,
    Adj,
    Det,
    Adp,
    Adv,
    Pron,
    Num,
}

impl Tag {
    pub const ALL: [Tag; 8] = [
        Tag::Noun,
        Tag::Verb,
        Tag::Adj,
        Tag::Det,
        Tag::Adp,
        Tag::Adv,
        Tag::Pron,
        Tag::Num,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Noun => "NOUN",
            Tag::Verb => "VERB",
            Tag::Adj => "ADJ",
            Tag::Det => "DET",
            Tag::Adp => "ADP",
            Tag::Adv => "ADV",
            Tag::Pron => "PRON",
            Tag::Num => "NUM",
        }
    }

    /// Word types are dealt to tags round-robin by rank.
    pub fn of_word(word: usize) -> Tag {
        Tag::ALL[word % NUM_TAGS]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArcLabel {
    Subj,
    Obj,
    Det,
    Mod,
    Prep,
    Pobj,
    Adv,
    Comp,
}

impl ArcLabel {
    pub const ALL: [ArcLabel; 8] = [
        ArcLabel::Subj,
        ArcLabel::Obj,
        ArcLabel::Det,
        ArcLabel::Mod,
        ArcLabel::Prep,
        ArcLabel::Pobj,
        ArcLabel::Adv,
        ArcLabel::Comp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arc {
    pub head: usize,
    pub dep: usize,
    pub label: ArcLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarParams {
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub max_depth: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Words of rank `>= rare_threshold` are split into two subtokens.
    pub rare_threshold: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for GrammarParams {
    fn default() -> Self {
        GrammarParams {
            vocab_size: 2000,
            zipf_exponent: 1.1,
            max_depth: 3,
            min_words: 3,
            max_words: 12,
            rare_threshold: 100,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl GrammarParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("grammar: {}", m)));
        if self.vocab_size < Tag::ALL.len() {
            return fail(format!(
                "vocab_size {} leaves some tag without words (need >= {})",
                self.vocab_size,
                Tag::ALL.len()
            ));
        }
        if self.vocab_size > MAX_VOCAB {
            return fail(format!("vocab_size {} exceeds {}", self.vocab_size, MAX_VOCAB));
        }
        if !(self.zipf_exponent > 0.0) {
            return fail("zipf_exponent must be positive".into());
        }
        if self.max_depth == 0 {
            return fail("max_depth must be >= 1".into());
        }
        if self.min_words < 2 || self.min_words > self.max_words {
            return fail("need 2 <= min_words <= max_words".into());
        }
        let f = self.valid_fraction + self.test_fraction;
        if self.valid_fraction < 0.0 || self.test_fraction < 0.0 || f >= 1.0 {
            return fail("split fractions must be nonnegative and sum below 1".into());
        }
        Ok(())
    }
}

/// Surface spelling of syllable `s`.
pub fn syllable(s: usize) -> String {
    let c = CONSONANTS[s / VOWELS.len()] as char;
    let v = VOWELS[s % VOWELS.len()] as char;
    format!("{}{}", c, v)
}

/// Syllable pair spelling source word `word`. The second syllable is drawn
/// from a class that identifies the word's tag, so tags are readable from the
/// surface, and the pair is unique per word.
pub fn source_syllables(word: usize) -> (usize, usize) {
    let tag = word % NUM_TAGS;
    let k = word / NUM_TAGS;
    let class_size = (NUM_SYLLABLES - tag).div_ceil(NUM_TAGS);
    let s = (k * 1013 + 7) % (NUM_SYLLABLES * class_size);
    (s % NUM_SYLLABLES, tag + NUM_TAGS * (s / NUM_SYLLABLES))
}

/// Agreement class of a noun or pronoun, visible in its first syllable.
pub fn noun_class(word: usize) -> usize {
    source_syllables(word).0 % MARKERS.len()
}

/// Syllable substitution used by the target lexicon.
pub fn map_syllable(s: usize) -> usize {
    (s * 7 + 3) % NUM_SYLLABLES
}

pub fn unmap_syllable(t: usize) -> usize {
    (0..NUM_SYLLABLES)
        .find(|&s| map_syllable(s) == t)
        .expect("syllable map is a bijection")
}

/// A word in either language: a lexicon entry (by source rank) or, on the
/// target side only, an agreement marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Word {
    Lex(usize),
    Marker(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Src,
    Tgt,
}

pub fn word_syllables(lang: Lang, word: usize) -> (usize, usize) {
    let (a, b) = source_syllables(word);
    match lang {
        Lang::Src => (a, b),
        Lang::Tgt => (map_syllable(a), map_syllable(b)),
    }
}

pub fn surface(lang: Lang, word: Word) -> String {
    match word {
        Word::Lex(r) => {
            let (a, b) = word_syllables(lang, r);
            syllable(a) + &syllable(b)
        }
        Word::Marker(m) => format!("-{}", MARKERS[m]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    /// Source word types; a type's id is its Zipf frequency rank.
    pub source: Vec<usize>,
    pub target: Vec<Word>,
    pub tags: Vec<Tag>,
    /// Parent position per token; `None` for the root.
    pub parents: Vec<Option<usize>>,
    pub arcs: Vec<Arc>,
}

impl AnnotatedSentence {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn ancestor(&self, i: usize, generations: usize) -> Option<usize> {
        let mut cur = i;
        for _ in 0..generations {
            cur = self.parents[cur]?;
        }
        Some(cur)
    }

    pub fn depth(&self, i: usize) -> usize {
        let mut d = 0;
        let mut cur = i;
        while let Some(p) = self.parents[cur] {
            cur = p;
            d += 1;
        }
        d
    }

    /// Single root, acyclic parents, arcs mirroring parents.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let bad = |m: &str| Err(Error::invalid(format!("sentence annotation: {}", m)));
        if self.tags.len() != n || self.parents.len() != n {
            return bad("annotation lengths differ from the token count");
        }
        if self.parents.iter().filter(|p| p.is_none()).count() != 1 {
            return bad("expected exactly one root");
        }
        for i in 0..n {
            let mut cur = i;
            for _ in 0..=n {
                match self.parents[cur] {
                    Some(p) if p >= n => return bad("parent index out of range"),
                    Some(p) => cur = p,
                    None => break,
                }
            }
            if self.parents[cur].is_some() {
                return bad("parent cycle");
            }
        }
        if self.arcs.len() != n - 1 {
            return bad("arc count differs from n - 1");
        }
        for a in &self.arcs {
            if a.head >= n || a.dep >= n || self.parents[a.dep] != Some(a.head) {
                return bad("arc disagrees with the parent array");
            }
        }
        Ok(())
    }
}

struct Node {
    word: usize,
    left: Vec<(ArcLabel, usize)>,
    right: Vec<(ArcLabel, usize)>,
}

struct Builder<'a> {
    params: &'a GrammarParams,
    samplers: &'a [WeightedIndex<f64>],
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn word<R: Rng>(&self, rng: &mut R, tag: Tag) -> usize {
        let k = self.samplers[tag.index()].sample(rng);
        k * Tag::ALL.len() + tag.index()
    }

    fn leaf<R: Rng>(&mut self, rng: &mut R, tag: Tag) -> usize {
        let word = self.word(rng, tag);
        self.nodes.push(Node {
            word,
            left: Vec::new(),
            right: Vec::new(),
        });
        self.nodes.len() - 1
    }

    /// Subtree whose head sits at `depth` (root = 0).
    fn clause<R: Rng>(&mut self, rng: &mut R, depth: usize) -> usize {
        let head = self.leaf(rng, Tag::Verb);
        let room = self.params.max_depth - depth;
        let subj = self.noun_phrase(rng, depth + 1);
        self.nodes[head].left.push((ArcLabel::Subj, subj));
        if rng.random_bool(0.6) {
            let obj = self.noun_phrase(rng, depth + 1);
            self.nodes[head].right.push((ArcLabel::Obj, obj));
        }
        if rng.random_bool(0.25) {
            let adv = self.leaf(rng, Tag::Adv);
            self.nodes[head].right.push((ArcLabel::Adv, adv));
        }
        if room >= 2 && rng.random_bool(0.15) {
            let comp = self.clause(rng, depth + 1);
            self.nodes[head].right.push((ArcLabel::Comp, comp));
        }
        head
    }

    fn noun_phrase<R: Rng>(&mut self, rng: &mut R, depth: usize) -> usize {
        if rng.random_bool(0.2) {
            return self.leaf(rng, Tag::Pron);
        }
        let head = self.leaf(rng, Tag::Noun);
        let room = self.params.max_depth - depth;
        if room >= 1 {
            if rng.random_bool(0.6) {
                let det = self.leaf(rng, Tag::Det);
                self.nodes[head].left.push((ArcLabel::Det, det));
            }
            if rng.random_bool(0.15) {
                let num = self.leaf(rng, Tag::Num);
                self.nodes[head].left.push((ArcLabel::Mod, num));
            }
            if rng.random_bool(0.35) {
                let adj = self.leaf(rng, Tag::Adj);
                self.nodes[head].left.push((ArcLabel::Mod, adj));
            }
        }
        if room >= 2 && rng.random_bool(0.2) {
            let adp = self.leaf(rng, Tag::Adp);
            let obj = self.noun_phrase(rng, depth + 2);
            self.nodes[adp].right.push((ArcLabel::Pobj, obj));
            self.nodes[head].right.push((ArcLabel::Prep, adp));
        }
        head
    }

    fn size(&self, n: usize) -> usize {
        let node = &self.nodes[n];
        1 + node
            .left
            .iter()
            .chain(&node.right)
            .map(|(_, c)| self.size(*c))
            .sum::<usize>()
    }

    /// Source order: left dependents, head, right dependents.
    fn linearize_source(&self, n: usize, parent: Option<(usize, ArcLabel)>, out: &mut AnnotatedSentence) {
        let node = &self.nodes[n];
        let mut pending = Vec::new();
        for (label, c) in &node.left {
            pending.push((out.len(), *label, *c));
            self.linearize_source(*c, None, out);
        }
        let pos = out.len();
        out.source.push(node.word);
        out.tags.push(Tag::of_word(node.word));
        out.parents.push(None);
        if let Some((p, label)) = parent {
            out.parents[pos] = Some(p);
            out.arcs.push(Arc {
                head: p,
                dep: pos,
                label,
            });
        }
        // left subtrees were emitted before the head position was known
        for (start, label, c) in pending {
            let root = start + self.head_offset(c);
            out.parents[root] = Some(pos);
            out.arcs.push(Arc {
                head: pos,
                dep: root,
                label,
            });
        }
        for (label, c) in &node.right {
            self.linearize_source(*c, Some((pos, *label)), out);
        }
    }

    /// Position of a subtree's head within its source span.
    fn head_offset(&self, n: usize) -> usize {
        self.nodes[n].left.iter().map(|(_, c)| self.size(*c)).sum()
    }

    /// Target order: all dependents in source order, then the head; verbs
    /// take a marker agreeing with their subject.
    fn linearize_target(&self, n: usize, out: &mut Vec<Word>) {
        let node = &self.nodes[n];
        for (_, c) in node.left.iter().chain(&node.right) {
            self.linearize_target(*c, out);
        }
        out.push(Word::Lex(node.word));
        if let Some((_, subj)) = node.left.iter().find(|(l, _)| *l == ArcLabel::Subj) {
            out.push(Word::Marker(noun_class(self.nodes[*subj].word)));
        }
    }
}

/// Train/valid/test sentences plus generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub params: GrammarParams,
    pub seed: u64,
    pub train: Vec<AnnotatedSentence>,
    pub valid: Vec<AnnotatedSentence>,
    pub test: Vec<AnnotatedSentence>,
}

fn samplers(params: &GrammarParams) -> Result<Vec<WeightedIndex<f64>>> {
    Tag::ALL
        .iter()
        .map(|t| {
            let weights: Vec<f64> = (t.index()..params.vocab_size)
                .step_by(Tag::ALL.len())
                .map(|r| ((r + 1) as f64).powf(-params.zipf_exponent))
                .collect();
            WeightedIndex::new(weights).map_err(|e| Error::Config(format!("grammar: {}", e)))
        })
        .collect()
}

/// Probability that a word drawn for `tag` has rank `>= threshold`.
pub fn tag_tail_mass(params: &GrammarParams, tag: Tag, threshold: usize) -> f64 {
    let mut total = 0.0;
    let mut tail = 0.0;
    for r in (tag.index()..params.vocab_size).step_by(Tag::ALL.len()) {
        let w = ((r + 1) as f64).powf(-params.zipf_exponent);
        total += w;
        if r >= threshold {
            tail += w;
        }
    }
    tail / total
}

pub fn generate_sentence<R: Rng>(params: &GrammarParams, rng: &mut R) -> Result<AnnotatedSentence> {
    params.validate()?;
    let samplers = samplers(params)?;
    sample_sentence(params, &samplers, rng)
}

fn sample_sentence<R: Rng>(
    params: &GrammarParams,
    samplers: &[WeightedIndex<f64>],
    rng: &mut R,
) -> Result<AnnotatedSentence> {
    for _ in 0..10_000 {
        let mut b = Builder {
            params,
            samplers,
            nodes: Vec::new(),
        };
        let root = b.clause(rng, 0);
        let n = b.nodes.len();
        if n < params.min_words || n > params.max_words {
            continue;
        }
        let mut s = AnnotatedSentence {
            source: Vec::with_capacity(n),
            target: Vec::with_capacity(n + 2),
            tags: Vec::with_capacity(n),
            parents: Vec::with_capacity(n),
            arcs: Vec::with_capacity(n),
        };
        b.linearize_source(root, None, &mut s);
        s.arcs.sort_by_key(|a| a.dep);
        b.linearize_target(root, &mut s.target);
        return Ok(s);
    }
    Err(Error::Config(
        "grammar: sentence length bounds are unreachable".into(),
    ))
}

/// Deterministic corpus of `n_sentences` distinct source sentences, split
/// into train/valid/test.
pub fn generate_corpus(seed: u64, n_sentences: usize, params: &GrammarParams) -> Result<Corpus> {
    params.validate()?;
    if n_sentences == 0 {
        return Err(Error::invalid("corpus needs at least one sentence"));
    }
    let samplers = samplers(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(n_sentences);
    let mut attempts = 0usize;
    while all.len() < n_sentences {
        attempts += 1;
        if attempts > 100 * n_sentences + 1000 {
            return Err(Error::Config(format!(
                "grammar: could not draw {} distinct sentences",
                n_sentences
            )));
        }
        let s = sample_sentence(params, &samplers, &mut rng)?;
        if seen.insert(s.source.clone()) {
            all.push(s);
        }
    }
    let n_valid = (params.valid_fraction * n_sentences as f64).round() as usize;
    let n_test = (params.test_fraction * n_sentences as f64).round() as usize;
    let n_train = n_sentences.saturating_sub(n_valid + n_test);
    let test = all.split_off(n_train + n_valid);
    let valid = all.split_off(n_train);
    Ok(Corpus {
        params: params.clone(),
        seed,
        train: all,
        valid,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[AnnotatedSentence] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.params.vocab_size, self.params.rare_threshold)
    }
}

/// Maps words to model token ids. Layout, shared by both sides: specials,
/// whole words for ranks below the threshold, first-syllable pieces,
/// second-syllable pieces, agreement markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub rare_threshold: usize,
}

/// Subtoken ids of one sentence and the word each came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtokenMap {
    pub ids: Vec<usize>,
    pub owner: Vec<usize>,
}

impl SubtokenMap {
    /// Subtoken positions of each word, in order.
    pub fn spans(&self) -> Vec<Vec<usize>> {
        let words = self.owner.last().map_or(0, |w| w + 1);
        let mut spans = vec![Vec::new(); words];
        for (i, w) in self.owner.iter().enumerate() {
            spans[*w].push(i);
        }
        spans
    }
}

const SPECIALS: usize = 3;

impl Tokenizer {
    pub fn new(vocab_size: usize, rare_threshold: usize) -> Self {
        Tokenizer {
            vocab_size,
            rare_threshold,
        }
    }

    fn whole_words(&self) -> usize {
        self.rare_threshold.min(self.vocab_size)
    }

    fn prefix_base(&self) -> usize {
        SPECIALS + self.whole_words()
    }

    fn suffix_base(&self) -> usize {
        self.prefix_base() + NUM_SYLLABLES
    }

    fn marker_base(&self) -> usize {
        self.suffix_base() + NUM_SYLLABLES
    }

    pub fn model_vocab(&self) -> usize {
        self.marker_base() + MARKERS.len()
    }

    pub fn is_split(&self, word: Word) -> bool {
        matches!(word, Word::Lex(r) if r >= self.rare_threshold)
    }

    pub fn split_subtokens(&self, lang: Lang, words: &[Word]) -> SubtokenMap {
        let mut ids = Vec::with_capacity(words.len() * 2);
        let mut owner = Vec::with_capacity(words.len() * 2);
        for (i, w) in words.iter().enumerate() {
            match *w {
                Word::Lex(r) if r >= self.rare_threshold => {
                    let (a, b) = word_syllables(lang, r);
                    ids.push(self.prefix_base() + a);
                    ids.push(self.suffix_base() + b);
                    owner.extend([i, i]);
                }
                Word::Lex(r) => {
                    ids.push(SPECIALS + r);
                    owner.push(i);
                }
                Word::Marker(m) => {
                    ids.push(self.marker_base() + m);
                    owner.push(i);
                }
            }
        }
        SubtokenMap { ids, owner }
    }

    pub fn encode_source(&self, s: &AnnotatedSentence) -> SubtokenMap {
        let words: Vec<Word> = s.source.iter().map(|&r| Word::Lex(r)).collect();
        self.split_subtokens(Lang::Src, &words)
    }

    pub fn encode_target(&self, s: &AnnotatedSentence) -> SubtokenMap {
        self.split_subtokens(Lang::Tgt, &s.target)
    }

    /// Surface string of one model token; pieces carry `@@` on the joining side.
    pub fn token_surface(&self, lang: Lang, id: usize) -> String {
        match id {
            PAD_ID => "<pad>".into(),
            BOS_ID => "<s>".into(),
            EOS_ID => "</s>".into(),
            _ if id < self.prefix_base() => surface(lang, Word::Lex(id - SPECIALS)),
            _ if id < self.suffix_base() => format!("{}@@", syllable(id - self.prefix_base())),
            _ if id < self.marker_base() => format!("@@{}", syllable(id - self.suffix_base())),
            _ if id < self.model_vocab() => surface(lang, Word::Marker(id - self.marker_base())),
            _ => "<unk>".into(),
        }
    }

    /// Joins pieces back into words. A first piece directly followed by a
    /// second piece forms one word; stray pieces stay as fragments.
    pub fn detokenize(&self, lang: Lang, ids: &[usize]) -> Vec<String> {
        let mut out = Vec::with_capacity(ids.len());
        let mut i = 0;
        while i < ids.len() {
            let id = ids[i];
            let is_prefix = (self.prefix_base()..self.suffix_base()).contains(&id);
            let next_suffix = ids
                .get(i + 1)
                .is_some_and(|n| (self.suffix_base()..self.marker_base()).contains(n));
            if is_prefix && next_suffix {
                out.push(syllable(id - self.prefix_base()) + &syllable(ids[i + 1] - self.suffix_base()));
                i += 2;
            } else {
                out.push(self.token_surface(lang, id));
                i += 1;
            }
        }
        out
    }
}

/// Frequency bins over word rank: top-5, 5–100, 100–500, 500+.
pub fn frequency_bin(rank: usize) -> usize {
    match rank {
        0..5 => 0,
        5..100 => 1,
        100..500 => 2,
        _ => 3,
    }
}

pub const FREQUENCY_BIN_NAMES: [&str; 4] = ["top5", "5-100", "100-500", "500+"];

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU: clipped 1–4-gram precisions, geometric mean, brevity penalty,
/// single reference, no smoothing. Returns a score in `[0, 100]`.
pub fn corpus_bleu<T: Eq + Hash + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::invalid("BLEU of an empty corpus"));
    }
    let mut matched = [0usize; 4];
    let mut possible = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                possible[n - 1] += c;
            }
        }
    }
    if matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matched[i] as f64 / possible[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sentences: usize,
    pub words: usize,
    pub source_subtokens: usize,
    pub target_subtokens: usize,
    pub split_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub params: GrammarParams,
    pub model_vocab: usize,
    pub train: SplitStats,
    pub valid: SplitStats,
    pub test: SplitStats,
    pub digest: String,
}

impl Corpus {
    pub fn stats(&self, split: Split) -> SplitStats {
        let tok = self.tokenizer();
        let sents = self.split(split);
        let mut st = SplitStats {
            sentences: sents.len(),
            words: 0,
            source_subtokens: 0,
            target_subtokens: 0,
            split_words: 0,
        };
        for s in sents {
            st.words += s.len();
            st.source_subtokens += tok.encode_source(s).ids.len();
            st.target_subtokens += tok.encode_target(s).ids.len();
            st.split_words += s.source.iter().filter(|&&r| r >= tok.rare_threshold).count();
        }
        st
    }

    pub fn manifest(&self, digest: &str) -> CorpusManifest {
        CorpusManifest {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            params: self.params.clone(),
            model_vocab: self.tokenizer().model_vocab(),
            train: self.stats(Split::Train),
            valid: self.stats(Split::Valid),
            test: self.stats(Split::Test),
            digest: digest.to_string(),
        }
    }

    /// Writes `manifest.json` and one `<split>.jsonl` per split into `dir`.
    pub fn save(&self, dir: &Path, digest: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            let path = dir.join(format!("{}.jsonl", split.as_str()));
            let mut buf = Vec::new();
            for s in self.split(split) {
                serde_json::to_writer(&mut buf, s)?;
                buf.push(b'\n');
            }
            crate::io::write_atomic(&path, &buf)?;
        }
        let mut manifest = serde_json::to_vec_pretty(&self.manifest(digest))?;
        manifest.write_all(b"\n").expect("vec write");
        crate::io::write_atomic(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<(Corpus, CorpusManifest)> {
        let mpath = dir.join("manifest.json");
        let text = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CorpusManifest = serde_json::from_slice(&text).map_err(|e| Error::Format {
            kind: "corpus manifest",
            path: mpath.clone(),
            detail: e.to_string(),
        })?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                kind: "corpus manifest",
                path: mpath,
                detail: format!("schema version {} unsupported", manifest.schema_version),
            });
        }
        let mut splits = Vec::new();
        for split in Split::ALL {
            let path = dir.join(format!("{}.jsonl", split.as_str()));
            let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut sents = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let s: AnnotatedSentence = serde_json::from_str(&line).map_err(|e| Error::Format {
                    kind: "corpus",
                    path: path.clone(),
                    detail: format!("line {}: {}", i + 1, e),
                })?;
                sents.push(s);
            }
            splits.push(sents);
        }
        let test = splits.pop().unwrap_or_default();
        let valid = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        let corpus = Corpus {
            params: manifest.params.clone(),
            seed: manifest.seed,
            train,
            valid,
            test,
        };
        Ok((corpus, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_brevity_example() {
        let h = vec![vec!["a", "b", "c", "d"]];
        let r = vec![vec!["a", "b", "c", "d", "e"]];
        let expect = 100.0 * (-0.25f64).exp();
        assert!((corpus_bleu(&h, &r).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn bleu_perfect_and_zero() {
        let r = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        assert!((corpus_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-12);
        let h = vec![vec![1, 2, 3, 9, 5], vec![6, 7, 1, 9]];
        assert_eq!(corpus_bleu(&h, &r).unwrap(), 0.0);
        assert!(corpus_bleu::<u8>(&[], &[]).is_err());
    }

    #[test]
    fn surfaces_are_distinct() {
        let all: HashSet<String> = (0..MAX_VOCAB).map(|r| surface(Lang::Src, Word::Lex(r))).collect();
        assert_eq!(all.len(), MAX_VOCAB);
        let tgt: HashSet<String> = (0..MAX_VOCAB).map(|r| surface(Lang::Tgt, Word::Lex(r))).collect();
        assert_eq!(tgt.len(), MAX_VOCAB);
    }

    #[test]
    fn annotations_form_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GrammarParams {
            max_depth: 5,
            max_words: 30,
            ..GrammarParams::default()
        };
        for _ in 0..200 {
            let s = generate_sentence(&p, &mut rng).unwrap();
            s.validate().unwrap();
            assert!((0..s.len()).all(|i| s.depth(i) <= 5));
        }
    }

    #[test]
    fn detokenize_joins_pieces() {
        let tok = Tokenizer::new(2000, 100);
        let words = [Word::Lex(3), Word::Lex(1500), Word::Marker(1)];
        let map = tok.split_subtokens(Lang::Tgt, &words);
        assert_eq!(map.ids.len(), 4);
        let expect: Vec<String> = words.iter().map(|w| surface(Lang::Tgt, *w)).collect();
        assert_eq!(tok.detokenize(Lang::Tgt, &map.ids), expect);
    }
}
