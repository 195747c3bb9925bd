//! Document ingestion, tweet cleaning, tokenization and dataset splitting.
//!
//! Input files are tab-separated, UTF-8, one document per line and no header:
//!
//! ```text
//! labeled:    id<TAB>label<TAB>text
//! unlabeled:  id<TAB>text
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use regex::Regex;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// A document as read from disk, before cleaning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    pub label: Option<String>,
}

/// A cleaned, tokenized document with an optional class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessedTweet {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: Option<usize>,
}

impl ProcessedTweet {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

/// Ordered class names; a class id is the position of its name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Invalid(format!(
                "a label map needs at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::Invalid("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Invalid(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Reads a label map file: one class name per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        Self::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for name in &self.names {
            out.push_str(name);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:https?://|www\.)\S*").unwrap())
}

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w*").unwrap())
}

fn time_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d{1,2}:\d{2}(?::\d{2})?(?:am|pm)?$").unwrap())
}

fn is_pure_digits(token: &str) -> bool {
    !token.is_empty() && token.bytes().all(|b| b.is_ascii_digit())
}

/// Applies the tweet cleaning rules in a fixed order: lowercase, URL
/// removal, @mention removal, time-pattern removal, digit removal,
/// special-character stripping, single-character removal, whitespace
/// normalization.
///
/// Time patterns and digit runs are matched against whole
/// whitespace-delimited tokens. Stripping special characters can expose new
/// pure-digit tokens (`"abc-123"`), so the final token filter drops those as
/// well as single characters; this keeps the function idempotent.
pub fn clean_text(raw: &str) -> String {
    let text = raw.to_lowercase();
    let text = url_re().replace_all(&text, " ");
    let text = mention_re().replace_all(&text, " ");

    let kept: Vec<&str> = text
        .split_whitespace()
        .filter(|tok| !time_re().is_match(tok))
        .filter(|tok| !is_pure_digits(tok))
        .collect();
    let joined = kept.join(" ");

    let stripped: String = joined
        .chars()
        .map(|c| match c {
            'a'..='z' | '0'..='9' | ' ' => c,
            _ => ' ',
        })
        .collect();

    stripped
        .split_whitespace()
        .filter(|tok| tok.len() >= 2 && !is_pure_digits(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits cleaned text on runs of whitespace.
pub fn tokenize(clean: &str) -> Vec<String> {
    clean.split_whitespace().map(str::to_owned).collect()
}

/// Parses documents from a reader. `source_name` is used in error messages.
///
/// Labels are interned into a new [`LabelMap`] in first-seen order unless a
/// map is supplied, in which case unknown labels are an error. The returned
/// map is `None` only for unlabeled input without a supplied map.
pub fn parse_documents<R: BufRead>(
    reader: R,
    source_name: &str,
    labeled: bool,
    label_map: Option<LabelMap>,
) -> Result<(Vec<RawDocument>, Option<LabelMap>)> {
    let expected_cols = if labeled { 3 } else { 2 };
    let mut docs = Vec::new();
    let mut ids = HashSet::new();
    let mut interned: Vec<String> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::format(source_name, lineno, e.to_string()))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != expected_cols {
            return Err(Error::format(
                source_name,
                lineno,
                format!("expected {expected_cols} tab-separated columns, found {}", cols.len()),
            ));
        }
        let id = cols[0];
        if id.is_empty() {
            return Err(Error::format(source_name, lineno, "empty document id"));
        }
        if !ids.insert(id.to_owned()) {
            return Err(Error::format(
                source_name,
                lineno,
                format!("duplicate document id {id:?}"),
            ));
        }
        let (label, text) = if labeled {
            let label = cols[1];
            if label.is_empty() {
                return Err(Error::format(source_name, lineno, "empty label"));
            }
            match &label_map {
                Some(map) => {
                    if map.id_of(label).is_none() {
                        return Err(Error::format(source_name, lineno, format!("unknown label {label:?}")));
                    }
                }
                None => {
                    if !interned.iter().any(|n| n == label) {
                        interned.push(label.to_owned());
                    }
                }
            }
            (Some(label.to_owned()), cols[2])
        } else {
            (None, cols[1])
        };
        docs.push(RawDocument {
            id: id.to_owned(),
            text: text.to_owned(),
            label,
        });
    }

    let map = match label_map {
        Some(map) => Some(map),
        None if labeled => Some(LabelMap::new(interned).map_err(|e| match e {
            Error::Invalid(msg) => Error::format(source_name, 0, msg),
            other => other,
        })?),
        None => None,
    };
    Ok((docs, map))
}

/// Loads a labeled or unlabeled TSV file.
pub fn load_documents(
    path: &Path,
    labeled: bool,
    label_map: Option<LabelMap>,
) -> Result<(Vec<RawDocument>, Option<LabelMap>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_documents(BufReader::new(file), &path.display().to_string(), labeled, label_map)
}

/// Cleans and tokenizes a document, resolving its label through `label_map`.
pub fn process(doc: &RawDocument, label_map: Option<&LabelMap>) -> Result<ProcessedTweet> {
    let label = match (&doc.label, label_map) {
        (Some(name), Some(map)) => Some(
            map.id_of(name)
                .ok_or_else(|| Error::Invalid(format!("document {}: unknown label {name:?}", doc.id)))?,
        ),
        (Some(name), None) => {
            return Err(Error::Invalid(format!(
                "document {} has label {name:?} but no label map was given",
                doc.id
            )))
        }
        (None, _) => None,
    };
    Ok(ProcessedTweet {
        id: doc.id.clone(),
        tokens: tokenize(&clean_text(&doc.text)),
        label,
    })
}

pub fn process_all(docs: &[RawDocument], label_map: Option<&LabelMap>) -> Result<Vec<ProcessedTweet>> {
    docs.iter().map(|d| process(d, label_map)).collect()
}

/// Writes processed documents back in the input TSV schema, with the cleaned
/// token sequence as the text column. Labeled output requires `label_map`.
pub fn write_processed<W: Write>(
    out: &mut W,
    docs: &[ProcessedTweet],
    label_map: Option<&LabelMap>,
) -> std::io::Result<()> {
    for doc in docs {
        match (doc.label, label_map) {
            (Some(id), Some(map)) => {
                let name = map.name_of(id).unwrap_or("?");
                writeln!(out, "{}\t{}\t{}", doc.id, name, doc.tokens.join(" "))?;
            }
            _ => writeln!(out, "{}\t{}", doc.id, doc.tokens.join(" "))?,
        }
    }
    Ok(())
}

/// Fractions of labeled documents assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub dev: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            test: 0.3,
            dev: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.test, self.dev];
        if all.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::Invalid(format!("split ratios must be positive: {self:?}")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("split ratios must sum to 1: {self:?}")));
        }
        Ok(())
    }

    /// Split sizes `(train, dev, test)` for `n` documents.
    ///
    /// Train and dev take `floor(ratio * n)`; the rounding remainder goes to
    /// test, which reproduces the published 7,000 / 1,166 / 3,502 split of
    /// 11,668 documents.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train);
        let dev = floor(self.dev);
        (train, dev, n - train - dev)
    }
}

/// Train/dev/test partition. Unlabeled documents, if any, are appended to
/// `train` after the labeled ones; together they are the graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Vec<ProcessedTweet>,
    pub dev: Vec<ProcessedTweet>,
    pub test: Vec<ProcessedTweet>,
}

impl DataSplit {
    /// Number of labeled training documents.
    pub fn labeled_count(&self) -> usize {
        self.train.iter().filter(|d| d.is_labeled()).count()
    }

    /// Number of unlabeled training documents.
    pub fn unlabeled_count(&self) -> usize {
        self.train.len() - self.labeled_count()
    }

    /// Total training nodes, labeled plus unlabeled.
    pub fn node_count(&self) -> usize {
        self.train.len()
    }

    /// Appends unlabeled documents to the training set, stripping any label.
    pub fn with_unlabeled(mut self, unlabeled: impl IntoIterator<Item = ProcessedTweet>) -> Result<Self> {
        let mut ids: HashSet<String> = self
            .train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .map(|d| d.id.clone())
            .collect();
        for mut doc in unlabeled {
            if !ids.insert(doc.id.clone()) {
                return Err(Error::Invalid(format!(
                    "unlabeled document id {:?} collides with another document",
                    doc.id
                )));
            }
            doc.label = None;
            self.train.push(doc);
        }
        Ok(self)
    }

    /// Training labels per node, `None` for unlabeled nodes.
    pub fn node_labels(&self) -> Vec<Option<usize>> {
        self.train.iter().map(|d| d.label).collect()
    }
}

/// Shuffles `docs` under `seed` and slices them into train/dev/test.
pub fn split_dataset(mut docs: Vec<ProcessedTweet>, ratios: SplitRatios, seed: u64) -> Result<DataSplit> {
    ratios.validate()?;
    if docs.len() < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 documents to split, got {}",
            docs.len()
        )));
    }
    let mut rng = rng::stream(seed, Stream::Split);
    docs.shuffle(&mut rng);
    let (n_train, n_dev, _) = ratios.sizes(docs.len());
    let test = docs.split_off(n_train + n_dev);
    let dev = docs.split_off(n_train);
    Ok(DataSplit { train: docs, dev, test })
}
