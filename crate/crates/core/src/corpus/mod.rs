//! Synthetic role-annotated corpora, vocabularies and token sequences.

mod grammar;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grammar::{GrammarSpec, Role, Slot, WordClass, DEFAULT_GRAMMAR_JSON};
pub(crate) use grammar::role_spans_of;

use crate::error::{Error, Result};

/// Default maximum sequence length, BOS and EOS included.
pub const DEFAULT_MAX_LEN: usize = 16;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleAnnotatedSentence {
    pub tokens: Vec<String>,
    #[serde(rename = "roles")]
    pub role_spans: BTreeMap<Role, (usize, usize)>,
    pub template_id: usize,
}

impl RoleAnnotatedSentence {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Sample `count` sentences from the grammar. Sentences whose token sequence
/// (with BOS/EOS) would exceed `max_len` are rejected and redrawn.
pub fn generate_corpus(
    spec: &GrammarSpec,
    count: usize,
    seed: u64,
    max_len: usize,
) -> Result<Vec<RoleAnnotatedSentence>> {
    if count == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let fits: Vec<bool> = spec.templates().iter().map(|t| t.len() + 2 <= max_len).collect();
    if !fits.iter().zip(spec.weights()).any(|(&f, &w)| f && w > 0.0) {
        return Err(Error::Config(format!("no template fits within max_len {max_len}")));
    }
    let chooser = WeightedIndex::new(spec.weights()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let t = chooser.sample(&mut rng);
        let skeleton = &spec.templates()[t];
        let tokens: Vec<String> = skeleton
            .iter()
            .map(|&(class, _)| spec.words(class).choose(&mut rng).expect("non-empty class").clone())
            .collect();
        if !fits[t] {
            continue;
        }
        out.push(RoleAnnotatedSentence {
            tokens,
            role_spans: role_spans_of(skeleton),
            template_id: t,
        });
    }
    Ok(out)
}

/// Deterministic shuffle then split; `round(fraction · n)` items go to train.
pub fn split_corpus<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * items.len() as f64).round() as usize;
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

/// Word ↔ id mapping. Ids 0..=3 are PAD, BOS, EOS, UNK; the remaining words
/// are ordered by descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_words(r.words)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { words: v.words }
    }
}

impl Vocab {
    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    /// Build from any collection of tokenized sentences.
    pub fn build<'a, I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for w in s.as_ref() {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(w))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

pub fn build_vocab(corpus: &[RoleAnnotatedSentence]) -> Vocab {
    Vocab::build(corpus.iter().map(|s| &s.tokens))
}

/// An encoded sentence: BOS, word ids, EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TryFrom<Vec<u32>> for TokenSequence {
    type Error = Error;

    fn try_from(ids: Vec<u32>) -> Result<Self> {
        Self::new(ids)
    }
}

impl From<TokenSequence> for Vec<u32> {
    fn from(t: TokenSequence) -> Self {
        t.ids
    }
}

impl TokenSequence {
    /// Validate BOS/EOS placement.
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        let ok = ids.len() >= 2
            && ids[0] == BOS
            && ids[ids.len() - 1] == EOS
            && ids[1..ids.len() - 1].iter().all(|&i| i != BOS && i != EOS);
        if !ok {
            return Err(Error::Domain(
                "token sequence must start with BOS, end with EOS, and contain neither elsewhere".into(),
            ));
        }
        Ok(Self { ids })
    }

    pub fn from_word_ids(words: &[u32]) -> Result<Self> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(words);
        ids.push(EOS);
        Self::new(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Word ids without the BOS/EOS markers.
    pub fn word_ids(&self) -> &[u32] {
        &self.ids[1..self.ids.len() - 1]
    }
}

pub fn tokenize<S: AsRef<str>>(sentence: &[S], vocab: &Vocab) -> TokenSequence {
    let mut ids = Vec::with_capacity(sentence.len() + 2);
    ids.push(BOS);
    ids.extend(sentence.iter().map(|w| match vocab.id(w.as_ref()) {
        BOS | EOS | PAD => UNK,
        id => id,
    }));
    ids.push(EOS);
    TokenSequence { ids }
}

pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> Vec<String> {
    seq.word_ids().iter().map(|&i| vocab.word(i).to_string()).collect()
}

/// Whitespace-tokenized sentences, one per non-blank line.
pub fn read_plain_text<R: BufRead>(reader: R) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<plain-text corpus>", e))?;
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if !tokens.is_empty() {
            out.push(tokens);
        }
    }
    Ok(out)
}

pub fn write_corpus_jsonl<W: Write>(mut writer: W, corpus: &[RoleAnnotatedSentence]) -> Result<()> {
    for s in corpus {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

/// Read a JSON-lines corpus. Blank lines are skipped; a bad record reports
/// its 1-based line number.
pub fn read_corpus_jsonl<R: BufRead>(reader: R) -> Result<Vec<RoleAnnotatedSentence>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: RoleAnnotatedSentence = serde_json::from_str(&line).map_err(|e| Error::parse_json(&e, n))?;
        for (role, &(start, end)) in &s.role_spans {
            if start >= end || end > s.tokens.len() {
                return Err(Error::Parse {
                    line: n + 1,
                    column: 0,
                    message: format!("role {role:?} span ({start}, {end}) out of bounds"),
                });
            }
        }
        out.push(s);
    }
    Ok(out)
}
