//! Monolingual text ingestion: tokenization, thresholded vocabularies,
//! sentence encoding, and shuffled padded mini-batches with an alternating
//! multi-language schedule.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stand-in token for out-of-vocabulary words. The only special string that
/// is itself a vocabulary entry.
pub const UNK_TOKEN: &str = "<unk>";
/// Reserved marker strings. Neither is ever a vocabulary entry: sentence
/// boundaries are modeled by a shared input embedding and a shared output
/// class, not by tokens.
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Lowercase a line and split it on runs of whitespace.
pub fn tokenize_line(line: &str) -> Vec<String> {
    line.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token <-> id bijection with frequency counts and an UNK entry.
///
/// Ids are assigned by descending frequency with lexicographic tie-break,
/// so `0..n` are the `n` most frequent entries. UNK carries the total count
/// of all dropped (below-threshold or reserved) token occurrences and is
/// ordered by that count like any other entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    lang: String,
    tokens: Vec<String>,
    counts: Vec<u64>,
    unk_id: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        // The index is derived from `tokens`; comparing it would make a
        // freshly deserialized vocabulary unequal to its source.
        self.lang == other.lang
            && self.tokens == other.tokens
            && self.counts == other.counts
            && self.unk_id == other.unk_id
    }
}

impl Vocabulary {
    pub fn lang(&self) -> &str {
        &self.lang
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id for `token`, falling back to UNK.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk_id)
    }

    /// The `n` most frequent word ids, skipping UNK. Capped at the number
    /// of real words.
    pub fn most_frequent(&self, n: usize) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&id| id != self.unk_id)
            .take(n)
            .collect()
    }

    /// Rebuild the token index; needed after deserialization.
    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// Build a vocabulary from a token stream, keeping tokens seen at least
/// `min_count` times. Reserved marker strings never become entries; their
/// occurrences count toward UNK like any dropped token.
pub fn build_vocab<'a, I>(lang: &str, tokens: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if min_count == 0 {
        return Err(Error::Config("min_count must be >= 1".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut total = 0u64;
    for tok in tokens {
        *counts.entry(tok).or_insert(0) += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let reserved = [UNK_TOKEN, BOS_TOKEN, EOS_TOKEN];
    let mut kept: Vec<(&str, u64)> = Vec::new();
    let mut dropped = 0u64;
    for (tok, n) in &counts {
        if *n >= min_count as u64 && !reserved.contains(tok) {
            kept.push((tok, *n));
        } else {
            dropped += n;
        }
    }
    kept.push((UNK_TOKEN, dropped));
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let tokens: Vec<String> = kept.iter().map(|(t, _)| t.to_string()).collect();
    let counts: Vec<u64> = kept.iter().map(|(_, n)| *n).collect();
    let unk_id = tokens
        .iter()
        .position(|t| t == UNK_TOKEN)
        .expect("UNK present");
    let mut vocab = Vocabulary {
        lang: lang.to_string(),
        tokens,
        counts,
        unk_id,
        index: HashMap::new(),
    };
    vocab.rebuild_index();
    Ok(vocab)
}

/// An encoded sentence: vocabulary ids, in order, length >= 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub lang: String,
    pub ids: Vec<usize>,
}

/// Encode tokens against a vocabulary, mapping out-of-vocabulary tokens to
/// UNK. Returns `None` for an empty token list so callers can drop blank
/// lines.
pub fn encode_sentence(vocab: &Vocabulary, tokens: &[String]) -> Option<Sentence> {
    if tokens.is_empty() {
        return None;
    }
    Some(Sentence {
        lang: vocab.lang().to_string(),
        ids: tokens.iter().map(|t| vocab.id_or_unk(t)).collect(),
    })
}

/// A monolingual corpus: encoded sentences plus the vocabulary they were
/// encoded with.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub lang: String,
    pub sentences: Vec<Sentence>,
    pub vocab: Vocabulary,
}

impl Corpus {
    /// Build a corpus from pre-read lines. `max_len` of 0 means unlimited;
    /// longer sentences are truncated.
    pub fn from_lines(lang: &str, lines: &[String], min_count: usize, max_len: usize) -> Result<Corpus> {
        let tokenized: Vec<Vec<String>> = lines.iter().map(|l| tokenize_line(l)).collect();
        let vocab = build_vocab(
            lang,
            tokenized.iter().flat_map(|t| t.iter().map(String::as_str)),
            min_count,
        )?;
        let mut sentences = Vec::new();
        for toks in &tokenized {
            if let Some(mut s) = encode_sentence(&vocab, toks) {
                if max_len > 0 && s.ids.len() > max_len {
                    s.ids.truncate(max_len);
                }
                sentences.push(s);
            }
        }
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Corpus {
            lang: lang.to_string(),
            sentences,
            vocab,
        })
    }

    /// Read a UTF-8 text file, one sentence per line.
    pub fn from_file(path: &Path, lang: &str, min_count: usize, max_len: usize) -> Result<Corpus> {
        let lines = read_lines(path)?;
        Corpus::from_lines(lang, &lines, min_count, max_len)
    }

    /// Total token count over all encoded sentences.
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.ids.len()).sum()
    }
}

/// Read a file into lines, reporting invalid UTF-8 with its line number.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let mut file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.display().to_string(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        match std::str::from_utf8(raw) {
            Ok(s) => lines.push(s.to_string()),
            Err(_) => {
                return Err(Error::Utf8 {
                    path: path.display().to_string(),
                    line: i + 1,
                })
            }
        }
    }
    // A trailing newline yields one empty pseudo-line; drop it.
    if lines.last().is_some_and(String::is_empty) {
        lines.pop();
    }
    Ok(lines)
}

/// A padded mini-batch. Row `b` holds sentence `b` padded to the batch
/// maximum length with `pad_id`; `mask(b, t)` is true exactly on real
/// tokens, and padded cells never enter any loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub lang: String,
    ids: Vec<Vec<usize>>,
    lengths: Vec<usize>,
    pad_id: usize,
}

impl Batch {
    pub fn from_sentences(lang: &str, sentences: &[&Sentence], pad_id: usize) -> Result<Batch> {
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let t_max = sentences.iter().map(|s| s.ids.len()).max().unwrap();
        let mut ids = Vec::with_capacity(sentences.len());
        let mut lengths = Vec::with_capacity(sentences.len());
        for s in sentences {
            if s.ids.is_empty() {
                return Err(Error::EmptySentence);
            }
            let mut row = s.ids.clone();
            row.resize(t_max, pad_id);
            ids.push(row);
            lengths.push(s.ids.len());
        }
        Ok(Batch {
            lang: lang.to_string(),
            ids,
            lengths,
            pad_id,
        })
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn max_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b]
    }

    pub fn length(&self, b: usize) -> usize {
        self.lengths[b]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn mask(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// Number of true mask cells, i.e. real tokens in the batch.
    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Pad every row out to `target_len` without touching lengths. The
    /// extra cells are masked, so this must not change any loss.
    #[cfg(test)]
    pub(crate) fn widen(&mut self, target_len: usize) {
        for row in &mut self.ids {
            if row.len() < target_len {
                row.resize(target_len, self.pad_id);
            }
        }
    }
}

/// Shuffle the corpus deterministically by seed and group it into batches
/// of at most `batch_size` sentences. Every sentence appears exactly once.
pub fn make_batches(corpus: &Corpus, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if corpus.sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..corpus.sentences.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let pad_id = corpus.vocab.unk_id();
    order
        .chunks(batch_size)
        .map(|chunk| {
            let group: Vec<&Sentence> = chunk.iter().map(|&i| &corpus.sentences[i]).collect();
            Batch::from_sentences(&corpus.lang, &group, pad_id)
        })
        .collect()
}

/// Round-robin over per-language batch streams, in declared order. When a
/// shorter stream runs out it is refilled (a reshuffled pass over its
/// corpus) until the longest stream finishes, which ends the epoch. The
/// returned schedule therefore has `streams.len() * max_stream_len`
/// entries.
pub fn interleave<R>(streams: Vec<Vec<Batch>>, mut refill: R) -> Result<Vec<Batch>>
where
    R: FnMut(usize, usize) -> Result<Vec<Batch>>,
{
    if streams.len() < 2 {
        return Err(Error::Config(
            "interleaving requires at least two languages".into(),
        ));
    }
    for (li, s) in streams.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::EmptyStream(format!("language #{li}")));
        }
    }
    let rounds = streams.iter().map(Vec::len).max().unwrap();
    let n_langs = streams.len();
    let mut queues: Vec<std::vec::IntoIter<Batch>> =
        streams.into_iter().map(Vec::into_iter).collect();
    let mut cycles = vec![0usize; n_langs];
    let mut schedule = Vec::with_capacity(rounds * n_langs);
    for _ in 0..rounds {
        for (li, queue) in queues.iter_mut().enumerate() {
            let batch = match queue.next() {
                Some(b) => b,
                None => {
                    cycles[li] += 1;
                    let refreshed = refill(li, cycles[li])?;
                    if refreshed.is_empty() {
                        return Err(Error::EmptyStream(format!("language #{li}")));
                    }
                    *queue = refreshed.into_iter();
                    queue.next().expect("refilled stream nonempty")
                }
            };
            schedule.push(batch);
        }
    }
    Ok(schedule)
}
