//! Pretrained word vectors in word2vec text format.
//!
//! The file starts with a `count dim` header followed by one `word v1 ... vd`
//! row per word. Two reserved rows precede the file's words: index 0 is the
//! all-zero padding vector and index 1 the unknown-word vector.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::corpus::ProcessedTweet;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Half-width of the uniform range used to initialize the unknown-word vector.
pub const UNK_INIT_RANGE: f64 = 0.25;

/// Frozen lookup table `E` with reserved PAD and UNK rows.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    vocab: HashMap<String, usize>,
    words: Vec<String>,
    vectors: Vec<f64>,
    dim: usize,
    vocab_hash: String,
}

/// Averaged embedding of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocVector {
    pub values: Vec<f64>,
    pub source_id: String,
}

impl EmbeddingTable {
    /// Builds a table from `(word, vector)` rows. Mostly useful in tests.
    pub fn from_rows<I, S>(dim: usize, rows: I, unk_seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut builder = TableBuilder::new(dim, unk_seed)?;
        for (i, (word, vec)) in rows.into_iter().enumerate() {
            builder.push(word.into(), vec, i + 1, "rows")?;
        }
        Ok(builder.finish())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rows including PAD and UNK.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.vocab.get(word).copied()
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    /// SHA-256 over the dimension and every word of the source file, in file
    /// order. Independent of any load-time vocabulary filter.
    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }
}

struct TableBuilder {
    vocab: HashMap<String, usize>,
    words: Vec<String>,
    vectors: Vec<f64>,
    dim: usize,
    hasher: Sha256,
}

impl TableBuilder {
    fn new(dim: usize, unk_seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be at least 1".into()));
        }
        let mut rng = rng::stream(unk_seed, Stream::Unknown);
        let mut vectors = vec![0.0; dim];
        vectors.extend((0..dim).map(|_| rng.random_range(-UNK_INIT_RANGE..=UNK_INIT_RANGE)));
        let mut hasher = Sha256::new();
        hasher.update(format!("dim={dim}\n").as_bytes());
        Ok(Self {
            vocab: HashMap::new(),
            words: vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()],
            vectors,
            dim,
            hasher,
        })
    }

    fn hash_word(&mut self, word: &str) {
        self.hasher.update(word.as_bytes());
        self.hasher.update(b"\n");
    }

    fn push(&mut self, word: String, values: Vec<f64>, line: usize, source: &str) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::format(
                source,
                line,
                format!("expected {} values for {word:?}, found {}", self.dim, values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::format(
                source,
                line,
                format!("non-finite value {bad} for {word:?}"),
            ));
        }
        if word == PAD_TOKEN || word == UNK_TOKEN || self.vocab.contains_key(&word) {
            return Err(Error::format(
                source,
                line,
                format!("duplicate or reserved word {word:?}"),
            ));
        }
        self.hash_word(&word);
        self.vocab.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.vectors.extend(values);
        Ok(())
    }

    fn finish(self) -> EmbeddingTable {
        EmbeddingTable {
            vocab: self.vocab,
            words: self.words,
            vectors: self.vectors,
            dim: self.dim,
            vocab_hash: hex::encode(self.hasher.finalize()),
        }
    }
}

/// Parses word2vec text format from a reader.
///
/// When `keep` is given, only those words are materialized; the vocabulary
/// hash still covers every word in the file. Rows for skipped words are still
/// checked for the right number of columns.
pub fn parse_word_vectors<R: BufRead>(
    reader: R,
    source: &str,
    unk_seed: u64,
    keep: Option<&HashSet<String>>,
) -> Result<EmbeddingTable> {
    let mut lines = reader.lines().enumerate();
    let (count, dim) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(Error::format(source, 1, "missing `count dim` header"));
        };
        let line = line.map_err(|e| Error::format(source, i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_ascii_whitespace().collect();
        let parsed = match parts.as_slice() {
            [c, d] => c.parse::<usize>().ok().zip(d.parse::<usize>().ok()),
            _ => None,
        };
        match parsed {
            Some((c, d)) if d >= 1 => break (c, d),
            _ => return Err(Error::format(source, i + 1, format!("bad header {line:?}"))),
        }
    };

    let mut builder = TableBuilder::new(dim, unk_seed)?;
    let mut rows = 0usize;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::format(source, lineno, e.to_string()))?;
        let mut parts = line.split_ascii_whitespace();
        let Some(word) = parts.next() else { continue };
        rows += 1;
        let wanted = keep.is_none_or(|k| k.contains(word));
        if !wanted {
            let n = parts.count();
            if n != dim {
                return Err(Error::format(
                    source,
                    lineno,
                    format!("expected {dim} values for {word:?}, found {n}"),
                ));
            }
            builder.hash_word(word);
            continue;
        }
        let values = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::format(source, lineno, format!("bad number {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        builder.push(word.to_owned(), values, lineno, source)?;
    }
    if rows != count {
        return Err(Error::format(
            source,
            1,
            format!("header declares {count} words but file has {rows}"),
        ));
    }
    Ok(builder.finish())
}

/// Loads a word2vec text file. The UNK vector is drawn uniformly from
/// `[-0.25, 0.25]` per component under `unk_seed`.
pub fn load_word_vectors(path: &Path, unk_seed: u64, keep: Option<&HashSet<String>>) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(BufReader::new(file), &path.display().to_string(), unk_seed, keep)
}

/// Maps tokens to row indices, truncating or right-padding with PAD to
/// exactly `max_len` entries. Unknown tokens map to UNK.
pub fn lookup_ids(tweet: &ProcessedTweet, table: &EmbeddingTable, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tweet
        .tokens
        .iter()
        .take(max_len)
        .map(|t| table.index_of(t).unwrap_or(UNK))
        .collect();
    ids.resize(max_len, PAD);
    ids
}

/// Mean of the vectors of in-vocabulary tokens; the zero vector when no
/// token is in the vocabulary.
pub fn average_vector(tweet: &ProcessedTweet, table: &EmbeddingTable) -> DocVector {
    let mut values = vec![0.0; table.dim()];
    let mut count = 0usize;
    for idx in tweet.tokens.iter().filter_map(|t| table.index_of(t)) {
        for (acc, v) in values.iter_mut().zip(table.row(idx)) {
            *acc += v;
        }
        count += 1;
    }
    if count > 0 {
        let inv = count as f64;
        values.iter_mut().for_each(|v| *v /= inv);
    }
    DocVector {
        values,
        source_id: tweet.id.clone(),
    }
}
