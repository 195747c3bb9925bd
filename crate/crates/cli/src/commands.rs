//! Command implementations. Each takes the resolved [`RunConfig`] and
//! returns what it wrote so callers and tests can inspect it.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use crisisgraph::corpus::{
    load_documents, process_all, split_dataset, write_processed, DataSplit, LabelMap, ProcessedTweet, SplitRatios,
};
use crisisgraph::embedding::{average_vector, load_word_vectors, EmbeddingTable};
use crisisgraph::graph::{build_graph, read_id_map, write_id_map, SimilarityGraph};
use crisisgraph::model::{ModelConfig, ModelParams, TrainingMode};
use crisisgraph::nn::Checkpoint;
use crisisgraph::trainer::{
    evaluate, label_budget_sweep, predict_all, train_semisupervised, train_supervised, Budget, MetricsReport, SweepRow,
    TrainOutcome,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::synth::{write_synth, SynthFiles};

/// Everything a training or evaluation run reads from disk.
pub struct Corpus {
    pub split: DataSplit,
    pub labels: LabelMap,
    pub table: EmbeddingTable,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("{key} is not set (use --config or --set {key}=PATH)")))
}

fn vocabulary<'a>(docs: impl IntoIterator<Item = &'a ProcessedTweet>) -> HashSet<String> {
    docs.into_iter().flat_map(|d| d.tokens.iter().cloned()).collect()
}

fn load_table(cfg: &RunConfig, docs: &[&[ProcessedTweet]], unk_seed: u64) -> Result<EmbeddingTable, CliError> {
    let keep = vocabulary(docs.iter().flat_map(|d| d.iter()));
    let table = load_word_vectors(required(&cfg.embeddings, "paths.embeddings")?, unk_seed, Some(&keep))?;
    if let Some(dim) = cfg.embedding_dim {
        if dim != table.dim() {
            return Err(crisisgraph::Error::Invalid(format!(
                "embedding.dim is {dim} but the embedding file has dimension {}",
                table.dim()
            ))
            .into());
        }
    }
    Ok(table)
}

/// Loads and splits the labeled corpus, appends the (capped) unlabeled pool
/// and loads the matching embedding rows. `labels` fixes the class order;
/// without it classes are numbered in first-seen order.
pub fn load_corpus(
    cfg: &RunConfig,
    labels: Option<LabelMap>,
    seed: u64,
    ratios: SplitRatios,
) -> Result<Corpus, CliError> {
    let (raw, labels) = load_documents(required(&cfg.labeled, "paths.labeled")?, true, labels)?;
    let labels = labels.expect("labeled input yields a label map");
    let docs = process_all(&raw, Some(&labels))?;
    let mut split = split_dataset(docs, ratios, seed)?;
    if let Some(path) = &cfg.unlabeled {
        let (raw, _) = load_documents(path, false, None)?;
        let mut unlabeled = process_all(&raw, None)?;
        if let Some(cap) = cfg.unlabeled_cap {
            unlabeled.truncate(cap);
        }
        split = split.with_unlabeled(unlabeled)?;
    }
    let table = load_table(cfg, &[&split.train, &split.dev, &split.test], seed)?;
    Ok(Corpus { split, labels, table })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes to `path`, or to stdout when `path` is `None`.
fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

/// Sidecar holding the document id of every graph node.
pub fn id_map_path(graph: &Path) -> PathBuf {
    let mut s = graph.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Default training-log location next to a checkpoint.
pub fn log_path(cfg: &RunConfig, checkpoint: &Path) -> PathBuf {
    cfg.log.clone().unwrap_or_else(|| {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    })
}

/// Cleans and tokenizes a raw TSV file; writes the processed TSV and, for
/// labeled input, the label map beside it (`<out>.labels`).
pub fn cmd_preprocess(input: &Path, out: &Path, unlabeled: bool) -> Result<usize, CliError> {
    let (raw, labels) = load_documents(input, !unlabeled, None)?;
    let docs = process_all(&raw, labels.as_ref())?;
    let mut buf = Vec::new();
    write_processed(&mut buf, &docs, labels.as_ref()).map_err(|e| CliError::io(out, e))?;
    write_bytes(out, &buf)?;
    if let Some(map) = labels {
        let mut p = out.as_os_str().to_owned();
        p.push(".labels");
        map.save(Path::new(&p))?;
    }
    Ok(docs.len())
}

fn graph_for(corpus: &Corpus, k: usize) -> Result<SimilarityGraph, CliError> {
    let vectors: Vec<_> = corpus
        .split
        .train
        .iter()
        .map(|d| average_vector(d, &corpus.table))
        .collect();
    Ok(build_graph(&vectors, k)?)
}

/// Builds the k-NN graph over training plus unlabeled documents and writes
/// it with its id sidecar.
pub fn cmd_build_graph(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let path = out
        .or(cfg.graph.as_deref())
        .ok_or_else(|| CliError::Usage("no graph output path (use --out or paths.graph)".into()))?;
    let corpus = load_corpus(cfg, None, cfg.seed, cfg.ratios)?;
    let graph = graph_for(&corpus, cfg.k)?;
    let mut buf = Vec::new();
    graph.write(&mut buf).map_err(|e| CliError::io(path, e))?;
    write_bytes(path, &buf)?;
    let ids: Vec<String> = corpus.split.train.iter().map(|d| d.id.clone()).collect();
    let mut buf = Vec::new();
    write_id_map(&mut buf, &ids).map_err(|e| CliError::io(path, e))?;
    write_bytes(&id_map_path(path), &buf)?;
    Ok(path.to_path_buf())
}

/// Reads the configured graph and checks its nodes line up with the
/// training documents; builds one in memory when no graph path is set.
fn load_graph(cfg: &RunConfig, corpus: &Corpus) -> Result<SimilarityGraph, CliError> {
    let Some(path) = &cfg.graph else {
        return graph_for(corpus, cfg.k);
    };
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let graph = SimilarityGraph::read(BufReader::new(file), &path.display().to_string())?;
    let ids_path = id_map_path(path);
    let file = File::open(&ids_path).map_err(|e| CliError::io(&ids_path, e))?;
    let ids = read_id_map(BufReader::new(file), &ids_path.display().to_string())?;
    let expected: Vec<&str> = corpus.split.train.iter().map(|d| d.id.as_str()).collect();
    if ids.len() != expected.len() || ids.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(crisisgraph::Error::Invalid(format!(
            "graph {} does not match the training documents (rebuild it with the same data, seed and ratios)",
            path.display()
        ))
        .into());
    }
    Ok(graph)
}

fn model_config(cfg: &RunConfig, labels: &LabelMap) -> ModelConfig {
    ModelConfig {
        num_classes: labels.num_classes(),
        ..cfg.model.clone()
    }
}

fn ratios_json(r: &SplitRatios) -> serde_json::Value {
    json!({ "train": r.train, "dev": r.dev, "test": r.test })
}

pub struct TrainResult {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains in the configured mode and writes the best checkpoint and the
/// per-epoch log.
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainResult, CliError> {
    cfg.validate()?;
    let ckpt_path = out
        .or(cfg.checkpoint.as_deref())
        .ok_or_else(|| CliError::Usage("no checkpoint path (use --out or paths.checkpoint)".into()))?
        .to_path_buf();
    let corpus = load_corpus(cfg, None, cfg.seed, cfg.ratios)?;
    let model = model_config(cfg, &corpus.labels);
    let tc = cfg.train_config();
    let outcome = match model.mode {
        TrainingMode::Supervised => train_supervised(&corpus.split, &corpus.table, &model, &tc)?,
        TrainingMode::Semi => {
            let graph = load_graph(cfg, &corpus)?;
            train_semisupervised(&corpus.split, &graph, &corpus.table, &model, &tc, &cfg.sampler)?
        }
    };

    let mut sections = BTreeMap::new();
    sections.insert("labels".into(), json!(corpus.labels.names()));
    sections.insert("seed".into(), json!(cfg.seed));
    sections.insert("ratios".into(), ratios_json(&cfg.ratios));
    sections.insert(
        "training".into(),
        json!({ "best_epoch": outcome.best_epoch, "best_dev_f1": outcome.best_dev_f1, "epochs": outcome.log.len() }),
    );
    let ck = outcome
        .params
        .to_checkpoint(&model, corpus.table.vocab_hash(), &model.digest(), sections);
    let mut buf = Vec::new();
    ck.write_to(&mut buf)?;
    write_bytes(&ckpt_path, &buf)?;
    let log = log_path(cfg, &ckpt_path);
    write_bytes(&log, outcome.log_text().as_bytes())?;
    Ok(TrainResult {
        checkpoint: ckpt_path,
        log,
        outcome,
    })
}

/// A checkpoint with the metadata needed to rebuild its data view.
pub struct LoadedModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub labels: LabelMap,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub vocab_hash: String,
}

fn incompatible(msg: impl Into<String>) -> CliError {
    crisisgraph::Error::Incompatible(msg.into()).into()
}

/// Reads a checkpoint and checks it against the current model settings.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<LoadedModel, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let ck = Checkpoint::read_from(&mut BufReader::new(file))?;
    let (config, params) = ModelParams::from_checkpoint(&ck)?;
    let names: Vec<String> = ck
        .sections
        .get("labels")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| incompatible("checkpoint has no labels section"))?;
    let labels = LabelMap::new(names)?;
    let expected = model_config(cfg, &labels);
    if expected.digest() != ck.config_digest {
        return Err(incompatible(format!(
            "{} was trained with different model settings than the current configuration",
            path.display()
        )));
    }
    let seed = ck
        .sections
        .get("seed")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| incompatible("checkpoint has no seed section"))?;
    let r = ck
        .sections
        .get("ratios")
        .ok_or_else(|| incompatible("checkpoint has no ratios section"))?;
    let ratio = |k: &str| {
        r.get(k)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| incompatible("malformed ratios"))
    };
    let ratios = SplitRatios {
        train: ratio("train")?,
        dev: ratio("dev")?,
        test: ratio("test")?,
    };
    Ok(LoadedModel {
        config,
        params,
        labels,
        seed,
        ratios,
        vocab_hash: ck.vocab_hash,
    })
}

fn check_vocab(model: &LoadedModel, table: &EmbeddingTable) -> Result<(), CliError> {
    if model.vocab_hash != table.vocab_hash() {
        return Err(incompatible("embedding file differs from the one used for training"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Dev,
    Test,
}

/// Scores a checkpoint on the dev or test split of the labeled corpus,
/// split exactly as during training.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, which: EvalSplit) -> Result<MetricsReport, CliError> {
    let model = load_model(cfg, checkpoint)?;
    let data_cfg = RunConfig {
        unlabeled: None,
        ..cfg.clone()
    };
    let corpus = load_corpus(&data_cfg, Some(model.labels.clone()), model.seed, model.ratios)?;
    check_vocab(&model, &corpus.table)?;
    let docs = match which {
        EvalSplit::Dev => &corpus.split.dev,
        EvalSplit::Test => &corpus.split.test,
    };
    Ok(evaluate(&model.params, &model.config, &corpus.table, docs)?)
}

pub fn format_report(report: &MetricsReport, labels: &LabelMap) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "weighted_precision\t{:.4}", report.weighted_precision);
    let _ = writeln!(s, "weighted_recall\t{:.4}", report.weighted_recall);
    let _ = writeln!(s, "weighted_f1\t{:.4}", report.weighted_f1);
    for (c, m) in report.per_class.iter().enumerate() {
        let _ = writeln!(
            s,
            "class\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
            labels.name_of(c).unwrap_or("?"),
            m.precision,
            m.recall,
            m.f1,
            m.support
        );
    }
    s
}

/// Classifies every document of a two-column TSV; needs only the checkpoint
/// and the embeddings, never the graph.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let model = load_model(cfg, checkpoint)?;
    let (raw, _) = load_documents(input, false, None)?;
    let docs = process_all(&raw, None)?;
    let table = load_table(cfg, &[&docs], model.seed)?;
    check_vocab(&model, &table)?;
    let mut text = String::new();
    for (doc, (class, probs)) in docs
        .iter()
        .zip(predict_all(&model.params, &model.config, &table, &docs)?)
    {
        let _ = writeln!(
            text,
            "{}\t{}\t{:.6}",
            doc.id,
            model.labels.name_of(class).unwrap_or("?"),
            probs[class]
        );
    }
    emit(out.or(cfg.output.as_deref()), &text)?;
    Ok(text)
}

/// Runs the label-budget sweep and writes one TSV row per (budget, mode).
pub fn cmd_sweep(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<SweepRow>, CliError> {
    cfg.validate()?;
    let corpus = load_corpus(cfg, None, cfg.seed, cfg.ratios)?;
    let graph = load_graph(cfg, &corpus)?;
    let model = model_config(cfg, &corpus.labels);
    let rows = label_budget_sweep(
        &cfg.budgets,
        &corpus.split,
        &graph,
        &corpus.table,
        &model,
        &cfg.train_config(),
        &cfg.sampler,
    )?;
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    emit(out.or(cfg.output.as_deref()), &text)?;
    Ok(rows)
}

/// Budgets as columns, modes as rows, weighted F1 in each cell.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut budgets = Vec::new();
    for r in rows {
        if !budgets.contains(&r.budget) {
            budgets.push(r.budget);
        }
    }
    let mut s = format!("{:<12}", "mode");
    for b in &budgets {
        let name = match b {
            Budget::All => "All L".to_owned(),
            Budget::Count(n) => n.to_string(),
        };
        let _ = write!(s, "{name:>9}");
    }
    s.push('\n');
    for mode in [TrainingMode::Supervised, TrainingMode::Semi] {
        let _ = write!(s, "{:<12}", mode.to_string());
        for b in &budgets {
            match rows.iter().find(|r| r.budget == *b && r.mode == mode) {
                Some(r) => {
                    let _ = write!(s, "{:>9.2}", 100.0 * r.report.weighted_f1);
                }
                None => {
                    let _ = write!(s, "{:>9}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Writes a synthetic corpus and embedding file into `dir`.
pub fn cmd_synth(cfg: &RunConfig, dir: Option<&Path>) -> Result<SynthFiles, CliError> {
    let dir = dir
        .or(cfg.output.as_deref())
        .ok_or_else(|| CliError::Usage("no output directory (use --out or paths.output)".into()))?;
    write_synth(&cfg.synth, cfg.seed, dir)
}
