//! Training loops, early stopping, metrics and the label-budget sweep.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DataSplit, ProcessedTweet};
use crate::embedding::{lookup_ids, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::model::{
    accumulate_class_gradient, accumulate_context_gradient, argmax, forward, ModelConfig, ModelParams, TrainingMode,
};
use crate::nn::{AdadeltaState, RowAdadelta, Tensor, DEFAULT_EPSILON, DEFAULT_RHO};
use crate::rng::{stream, Rng, Stream};
use crate::sampler::{ContextSampler, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub context_batch_size: usize,
    /// Context samples drawn per epoch; `None` means ten per labeled example.
    pub context_samples: Option<usize>,
    pub lr_class: f64,
    pub lr_context: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 25,
            batch_size: 32,
            context_batch_size: 32,
            context_samples: None,
            lr_class: 0.1,
            lr_context: 0.001,
            rho: DEFAULT_RHO,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 || self.context_batch_size == 0 {
            return Err(Error::Invalid(
                "max_epochs, patience and batch sizes must be positive".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Invalid(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr_class >= 0.0 && self.lr_context >= 0.0) {
            return Err(Error::Invalid("learning-rate scales must be >= 0".into()));
        }
        AdadeltaState::new(self.rho, self.epsilon, 1.0).map(|_| ())
    }

    fn context_samples_for(&self, labeled: usize) -> usize {
        self.context_samples.unwrap_or(10 * labeled)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub class_loss: f64,
    pub context_loss: f64,
    pub dev_f1: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.class_loss, self.context_loss, self.dev_f1
        )
    }
}

#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub best_dev_f1: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub best: Option<ModelParams>,
    patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best_dev_f1: f64::NEG_INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            best: None,
            patience,
        }
    }

    /// Records one epoch's dev score; returns `true` when training should stop.
    /// Only a strict improvement resets the patience counter.
    pub fn observe(&mut self, epoch: usize, dev_f1: f64, params: &ModelParams) -> bool {
        if dev_f1 > self.best_dev_f1 {
            self.best_dev_f1 = dev_f1;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            self.best = Some(params.clone());
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement >= self.patience
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| format!("{r}\n")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl MetricsReport {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Invalid("cannot compute metrics over zero examples".into()));
        }
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Invalid(format!("class id out of range 0..{num_classes}")));
            }
            confusion[t][p] += 1;
        }
        let total = truth.len() as f64;
        let per_class: Vec<ClassMetrics> = (0..num_classes)
            .map(|c| {
                let tp = confusion[c][c] as f64;
                let support: usize = confusion[c].iter().sum();
                let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
                let precision = ratio(tp, predicted_c as f64);
                let recall = ratio(tp, support as f64);
                let f1 = ratio(2.0 * precision * recall, precision + recall);
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let weighted =
            |f: fn(&ClassMetrics) -> f64| -> f64 { per_class.iter().map(|m| m.support as f64 / total * f(m)).sum() };
        Ok(Self {
            weighted_precision: weighted(|m| m.precision),
            weighted_recall: weighted(|m| m.recall),
            weighted_f1: weighted(|m| m.f1),
            per_class,
            confusion,
        })
    }
}

/// Class predictions in eval mode, in input order.
pub fn predict_all(
    params: &ModelParams,
    config: &ModelConfig,
    table: &EmbeddingTable,
    docs: &[ProcessedTweet],
) -> Result<Vec<(usize, Vec<f64>)>> {
    docs.par_iter()
        .map(|d| {
            let ids = lookup_ids(d, table, config.max_len);
            let t = forward(&ids, table, params, config, None)?;
            Ok((argmax(&t.probabilities), t.probabilities))
        })
        .collect()
}

/// Weighted metrics of the model on labeled examples.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    table: &EmbeddingTable,
    examples: &[ProcessedTweet],
) -> Result<MetricsReport> {
    let truth: Vec<usize> = examples
        .iter()
        .map(|d| {
            d.label
                .ok_or_else(|| Error::Invalid(format!("example {} is unlabeled", d.id)))
        })
        .collect::<Result<_>>()?;
    let predicted: Vec<usize> = predict_all(params, config, table, examples)?
        .into_iter()
        .map(|(c, _)| c)
        .collect();
    MetricsReport::from_predictions(&truth, &predicted, config.num_classes)
}

struct Run<'a> {
    config: &'a ModelConfig,
    train: &'a TrainConfig,
    table: &'a EmbeddingTable,
    /// Token ids of every training node, graph order.
    node_ids: Vec<Vec<usize>>,
    /// (node, class) of the labeled training nodes.
    labeled: Vec<(usize, usize)>,
    dev: &'a [ProcessedTweet],
}

/// Steps everything but the context weights, which the class loss never
/// touches and the context pass updates row by row.
fn shared_step(state: &mut AdadeltaState, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
    let gs: Vec<&Tensor> = grads.shared_tensors();
    let mut ps = params.shared_tensors_mut();
    state.step(&mut ps, &gs)
}

fn zero_shared(grads: &mut ModelParams) {
    grads.shared_tensors_mut().into_iter().for_each(|t| t.fill(0.0));
}

fn check_finite(value: f64, what: &str, epoch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} at epoch {epoch}")))
    }
}

impl Run<'_> {
    fn new<'a>(
        split: &'a DataSplit,
        config: &'a ModelConfig,
        train: &'a TrainConfig,
        table: &'a EmbeddingTable,
    ) -> Result<Run<'a>> {
        config.validate()?;
        train.validate()?;
        if split.dev.is_empty() {
            return Err(Error::Invalid("dev split is empty; early stopping needs it".into()));
        }
        let labeled: Vec<(usize, usize)> = split
            .train
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.label.map(|c| (i, c)))
            .collect();
        if labeled.is_empty() {
            return Err(Error::Invalid("no labeled training examples".into()));
        }
        if let Some(&(_, c)) = labeled.iter().find(|(_, c)| *c >= config.num_classes) {
            return Err(Error::Invalid(format!(
                "label {c} out of range for {} classes",
                config.num_classes
            )));
        }
        let node_ids = split
            .train
            .iter()
            .map(|d| lookup_ids(d, table, config.max_len))
            .collect();
        Ok(Run {
            config,
            train,
            table,
            node_ids,
            labeled,
            dev: &split.dev,
        })
    }

    fn run(&self, nodes: usize, sampler: Option<&ContextSampler>) -> Result<TrainOutcome> {
        let cfg = self.config;
        let tc = self.train;
        let mut params = ModelParams::init(cfg, self.table.dim(), nodes, &mut stream(tc.seed, Stream::Init))?;
        let mut shuffle_rng = stream(tc.seed, Stream::Shuffle);
        let mut dropout_rng = stream(tc.seed, Stream::Dropout);
        let mut sampler_rng = stream(tc.seed, Stream::Sampler);
        let mut class_opt = AdadeltaState::new(tc.rho, tc.epsilon, tc.lr_class)?;
        let mut context_opt = AdadeltaState::new(tc.rho, tc.epsilon, tc.lr_context)?;
        let mut row_opt = RowAdadelta::new(tc.rho, tc.epsilon, tc.lr_context, nodes, cfg.hidden[2])?;
        let context_total = sampler.map_or(0, |_| tc.context_samples_for(self.labeled.len()));

        let mut grads = params.zeros_like();
        let mut order: Vec<(usize, usize)> = self.labeled.clone();
        let mut stop = EarlyStopState::new(tc.patience);
        let mut log = Vec::new();

        for epoch in 1..=tc.max_epochs {
            let mut context_loss = 0.0;
            if let Some(sampler) = sampler {
                let mut remaining = context_total;
                while remaining > 0 {
                    let b = remaining.min(tc.context_batch_size);
                    remaining -= b;
                    let batch = sampler.sample_batch(b, &mut sampler_rng)?;
                    zero_shared(&mut grads);
                    let weight = cfg.lambda / b as f64;
                    for s in &batch {
                        let trace = forward(&self.node_ids[s.i], self.table, &params, cfg, Some(&mut dropout_rng))?;
                        context_loss += accumulate_context_gradient(&trace, s, &params, cfg, &mut grads, weight)?;
                    }
                    shared_step(&mut context_opt, &mut params, &grads)?;
                    let rows: Vec<usize> = batch.iter().map(|s| s.j).collect();
                    row_opt.step(&mut params.context_weight, &grads.context_weight, &rows)?;
                    for &r in &rows {
                        grads.context_weight.row_mut(r).fill(0.0);
                    }
                }
                if context_total > 0 {
                    context_loss /= context_total as f64;
                }
            }
            check_finite(context_loss, "context loss", epoch)?;

            order.shuffle(&mut shuffle_rng);
            let mut class_loss = 0.0;
            for batch in order.chunks(tc.batch_size) {
                zero_shared(&mut grads);
                let weight = 1.0 / batch.len() as f64;
                for &(node, label) in batch {
                    let trace = forward(&self.node_ids[node], self.table, &params, cfg, Some(&mut dropout_rng))?;
                    class_loss += accumulate_class_gradient(&trace, label, &params, cfg, &mut grads, weight);
                }
                shared_step(&mut class_opt, &mut params, &grads)?;
            }
            class_loss /= order.len() as f64;
            check_finite(class_loss, "classification loss", epoch)?;
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("parameters at epoch {epoch}")));
            }

            let dev_f1 = evaluate(&params, cfg, self.table, self.dev)?.weighted_f1;
            log.push(EpochRecord {
                epoch,
                class_loss,
                context_loss,
                dev_f1,
            });
            if stop.observe(epoch, dev_f1, &params) {
                break;
            }
        }

        Ok(TrainOutcome {
            params: stop.best.unwrap_or(params),
            log,
            best_epoch: stop.best_epoch,
            best_dev_f1: stop.best_dev_f1,
        })
    }
}

/// Trains on the labeled training examples only; the classifier reads `z2`.
/// Unlabeled entries of `split.train` are ignored.
pub fn train_supervised(
    split: &DataSplit,
    table: &EmbeddingTable,
    config: &ModelConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.mode != TrainingMode::Supervised {
        return Err(Error::Invalid(
            "train_supervised needs a supervised model config".into(),
        ));
    }
    Run::new(split, config, train, table)?.run(0, None)
}

/// Joint training: each epoch runs a pass of context minibatches and then a
/// pass of classification minibatches. Graph node `v` is `split.train[v]`.
pub fn train_semisupervised(
    split: &DataSplit,
    graph: &SimilarityGraph,
    table: &EmbeddingTable,
    config: &ModelConfig,
    train: &TrainConfig,
    sampler: &SamplerConfig,
) -> Result<TrainOutcome> {
    if config.mode != TrainingMode::Semi {
        return Err(Error::Invalid("train_semisupervised needs a semi model config".into()));
    }
    if graph.node_count() != split.train.len() {
        return Err(Error::Invalid(format!(
            "graph has {} nodes but the training set has {} documents",
            graph.node_count(),
            split.train.len()
        )));
    }
    let run = Run::new(split, config, train, table)?;
    let contexts = train.context_samples_for(run.labeled.len());
    let sampler = if contexts > 0 {
        Some(ContextSampler::new(graph, &split.node_labels(), *sampler)?)
    } else {
        None
    };
    run.run(graph.node_count(), sampler.as_ref())
}

/// A label budget: a number of labeled training examples, or all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Count(usize),
    All,
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Count(n) => write!(f, "{n}"),
            Budget::All => f.write_str("all"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Budget::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Budget::Count(n)),
            _ => Err(Error::Invalid(format!(
                "invalid budget {s:?} (positive integer or \"all\")"
            ))),
        }
    }
}

/// Per-class quotas summing to `budget`, proportional to `counts` by largest
/// remainder with at least one slot for every non-empty class.
pub fn stratified_quotas(counts: &[usize], budget: usize) -> Result<Vec<usize>> {
    let total: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count();
    if budget > total {
        return Err(Error::Invalid(format!(
            "budget {budget} exceeds the {total} labeled examples"
        )));
    }
    if budget < present {
        return Err(Error::Invalid(format!(
            "budget {budget} cannot cover {present} classes"
        )));
    }
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| budget as f64 * c as f64 / total as f64)
        .collect();
    let mut quotas: Vec<usize> = exact
        .iter()
        .zip(counts)
        .map(|(e, &c)| if c > 0 { (e.floor() as usize).max(1) } else { 0 })
        .collect();
    let mut assigned: usize = quotas.iter().sum();

    let mut by_remainder: Vec<usize> = (0..counts.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    while assigned < budget {
        for &c in &by_remainder {
            if assigned < budget && quotas[c] < counts[c] {
                quotas[c] += 1;
                assigned += 1;
            }
        }
    }
    while assigned > budget {
        // minimum-one bumps overshot: take back from the largest quotas
        let c = (0..counts.len())
            .filter(|&c| quotas[c] > 1)
            .max_by(|&a, &b| quotas[a].cmp(&quotas[b]).then(b.cmp(&a)))
            .expect("budget >= present classes");
        quotas[c] -= 1;
        assigned -= 1;
    }
    Ok(quotas)
}

/// Keeps the labels of a stratified random subset of `budget` labeled
/// training examples and strips the rest. Dev, test and unlabeled entries
/// are untouched, so the node set is unchanged.
pub fn apply_budget(split: &DataSplit, budget: Budget, num_classes: usize, seed: u64) -> Result<DataSplit> {
    let Budget::Count(budget) = budget else {
        return Ok(split.clone());
    };
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, d) in split.train.iter().enumerate() {
        if let Some(c) = d.label {
            by_class
                .get_mut(c)
                .ok_or_else(|| Error::Invalid(format!("label {c} out of range")))?
                .push(i);
        }
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas = stratified_quotas(&counts, budget)?;
    let mut rng: Rng = stream(seed, Stream::Budget);
    let mut keep = vec![false; split.train.len()];
    for (members, q) in by_class.iter_mut().zip(quotas) {
        members.shuffle(&mut rng);
        for &i in &members[..q] {
            keep[i] = true;
        }
    }
    let mut out = split.clone();
    for (d, k) in out.train.iter_mut().zip(keep) {
        if !k {
            d.label = None;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub budget: Budget,
    pub mode: TrainingMode,
    pub report: MetricsReport,
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            self.budget,
            self.mode,
            self.report.weighted_precision,
            self.report.weighted_recall,
            self.report.weighted_f1
        )
    }
}

/// For each budget, trains a supervised and a semi-supervised model on the
/// same label subset and scores both on the test split. `config.mode` is
/// ignored; both modes are run.
pub fn label_budget_sweep(
    budgets: &[Budget],
    split: &DataSplit,
    graph: &SimilarityGraph,
    table: &EmbeddingTable,
    config: &ModelConfig,
    train: &TrainConfig,
    sampler: &SamplerConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(budgets.len() * 2);
    for &budget in budgets {
        let masked = apply_budget(split, budget, config.num_classes, train.seed)?;
        for mode in [TrainingMode::Supervised, TrainingMode::Semi] {
            let cfg = ModelConfig { mode, ..config.clone() };
            let outcome = match mode {
                TrainingMode::Supervised => train_supervised(&masked, table, &cfg, train)?,
                TrainingMode::Semi => train_semisupervised(&masked, graph, table, &cfg, train, sampler)?,
            };
            let report = evaluate(&outcome.params, &cfg, table, &masked.test)?;
            rows.push(SweepRow { budget, mode, report });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_example() {
        let r = MetricsReport::from_predictions(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((r.weighted_f1 - 0.733_333_333).abs() < 1e-6);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn single_class_predictions() {
        let r = MetricsReport::from_predictions(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert!((r.weighted_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[1].precision, 0.0);
    }

    #[test]
    fn perfect_predictions() {
        let r = MetricsReport::from_predictions(&[2, 0, 1, 1], &[2, 0, 1, 1], 3).unwrap();
        assert_eq!(
            (r.weighted_precision, r.weighted_recall, r.weighted_f1),
            (1.0, 1.0, 1.0)
        );
        assert!(MetricsReport::from_predictions(&[], &[], 2).is_err());
    }

    #[test]
    fn early_stop_ties_do_not_reset() {
        let p = ModelParams::zeros(&ModelConfig::default(), 2, 0);
        let mut s = EarlyStopState::new(2);
        assert!(!s.observe(1, 0.5, &p));
        assert!(!s.observe(2, 0.5, &p));
        assert!(s.observe(3, 0.5, &p));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn quotas() {
        assert_eq!(stratified_quotas(&[50, 50], 10).unwrap(), vec![5, 5]);
        assert_eq!(stratified_quotas(&[990, 10], 10).unwrap(), vec![9, 1]);
        assert_eq!(stratified_quotas(&[1, 1000, 1], 3).unwrap(), vec![1, 1, 1]);
        assert_eq!(stratified_quotas(&[3, 3, 3], 4).unwrap(), vec![2, 1, 1]);
        assert_eq!(stratified_quotas(&[4, 4], 8).unwrap(), vec![4, 4]);
        assert!(stratified_quotas(&[4, 4], 9).is_err());
        assert!(stratified_quotas(&[4, 4, 4], 2).is_err());
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("all".parse::<Budget>().unwrap(), Budget::All);
        assert_eq!("500".parse::<Budget>().unwrap(), Budget::Count(500));
        assert!("0".parse::<Budget>().is_err());
        assert_eq!(Budget::Count(100).to_string(), "100");
    }
}
