//! Synthetic labeled/unlabeled corpora with matching word vectors.
//!
//! Every class owns `vocab_size` tokens (`c{k}w{i}`) whose vectors are the
//! class centroid plus Gaussian noise; `shared_vocab_size` further tokens
//! (`sw{i}`) sit around the origin. Centroids lie on distinct coordinate axes
//! at distance `margin` from each other. A document draws each token from
//! its class vocabulary with probability `signal`, otherwise from the shared
//! vocabulary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crisisgraph::corpus::RawDocument;
use crisisgraph::rng::{stream, Rng, Stream};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub docs_per_class: usize,
    /// Tokens owned by each class.
    pub vocab_size: usize,
    pub shared_vocab_size: usize,
    pub tokens_per_doc: usize,
    /// Probability that a token comes from the document's class vocabulary.
    pub signal: f64,
    /// Distance between class centroids.
    pub margin: f64,
    /// Per-component standard deviation of word vectors around their centroid.
    pub noise: f64,
    pub dim: usize,
    pub unlabeled: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            docs_per_class: 3000,
            vocab_size: 500,
            shared_vocab_size: 500,
            tokens_per_doc: 12,
            signal: 0.5,
            margin: 2.0,
            noise: 1.0,
            dim: 20,
            unlabeled: 5000,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Usage(format!("synth: {m}")));
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.docs_per_class == 0 || self.vocab_size == 0 || self.tokens_per_doc == 0 {
            return bad("docs_per_class, vocab_size and tokens_per_doc must be positive");
        }
        if self.dim < self.classes {
            return bad("dim must be at least the number of classes");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return bad("signal must be in [0, 1]");
        }
        if self.signal < 1.0 && self.shared_vocab_size == 0 {
            return bad("signal below 1 needs a shared vocabulary");
        }
        Ok(())
    }

    pub fn label_name(class: usize) -> String {
        format!("class{class}")
    }

    pub fn centroid(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        c[class] = self.margin / std::f64::consts::SQRT_2;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub labeled: Vec<RawDocument>,
    pub unlabeled: Vec<RawDocument>,
    pub vectors: Vec<(String, Vec<f64>)>,
}

fn document(spec: &SynthSpec, class: usize, rng: &mut Rng) -> String {
    (0..spec.tokens_per_doc)
        .map(|_| {
            if rng.random::<f64>() < spec.signal {
                format!("c{class}w{}", rng.random_range(0..spec.vocab_size))
            } else {
                format!("sw{}", rng.random_range(0..spec.shared_vocab_size))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates the corpus and vectors; identical for identical `(spec, seed)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthData, CliError> {
    spec.validate()?;
    let mut rng = stream(seed, Stream::Synth);
    let noisy = |center: &[f64], rng: &mut Rng| -> Vec<f64> {
        center
            .iter()
            .map(|c| c + spec.noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let mut vectors = Vec::with_capacity(spec.classes * spec.vocab_size + spec.shared_vocab_size);
    for class in 0..spec.classes {
        let centroid = spec.centroid(class);
        for w in 0..spec.vocab_size {
            vectors.push((format!("c{class}w{w}"), noisy(&centroid, &mut rng)));
        }
    }
    let origin = vec![0.0; spec.dim];
    for w in 0..spec.shared_vocab_size {
        vectors.push((format!("sw{w}"), noisy(&origin, &mut rng)));
    }

    let mut labeled = Vec::with_capacity(spec.classes * spec.docs_per_class);
    for n in 0..spec.docs_per_class {
        for class in 0..spec.classes {
            labeled.push(RawDocument {
                id: format!("l{}", n * spec.classes + class),
                text: document(spec, class, &mut rng),
                label: Some(SynthSpec::label_name(class)),
            });
        }
    }
    let unlabeled = (0..spec.unlabeled)
        .map(|n| {
            let class = rng.random_range(0..spec.classes);
            RawDocument {
                id: format!("u{n}"),
                text: document(spec, class, &mut rng),
                label: None,
            }
        })
        .collect();
    Ok(SynthData {
        labeled,
        unlabeled,
        vectors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub labeled: PathBuf,
    pub unlabeled: Option<PathBuf>,
    pub embeddings: PathBuf,
}

fn write_file(path: &Path, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    body(&mut buf)
        .and_then(|_| fs::write(path, &buf))
        .map_err(|e| CliError::io(path, e))
}

/// Writes `labeled.tsv`, `unlabeled.tsv` (only when non-empty) and
/// `embeddings.txt` into `dir`.
pub fn write_synth(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<SynthFiles, CliError> {
    let data = generate(spec, seed)?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let files = SynthFiles {
        labeled: dir.join("labeled.tsv"),
        unlabeled: (!data.unlabeled.is_empty()).then(|| dir.join("unlabeled.tsv")),
        embeddings: dir.join("embeddings.txt"),
    };
    write_file(&files.labeled, |out| {
        for d in &data.labeled {
            writeln!(out, "{}\t{}\t{}", d.id, d.label.as_deref().unwrap_or_default(), d.text)?;
        }
        Ok(())
    })?;
    if let Some(path) = &files.unlabeled {
        write_file(path, |out| {
            for d in &data.unlabeled {
                writeln!(out, "{}\t{}", d.id, d.text)?;
            }
            Ok(())
        })?;
    }
    write_file(&files.embeddings, |out| {
        writeln!(out, "{} {}", data.vectors.len(), spec.dim)?;
        for (word, v) in &data.vectors {
            write!(out, "{word}")?;
            for x in v {
                write!(out, " {x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    })?;
    Ok(files)
}
