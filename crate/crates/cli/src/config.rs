//! Run configuration: flat dotted keys, read from a `key = value` file and
//! overridden from the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crisisgraph::corpus::SplitRatios;
use crisisgraph::graph::DEFAULT_K;
use crisisgraph::model::{FilterSpec, ModelConfig, TrainingMode};
use crisisgraph::sampler::SamplerConfig;
use crisisgraph::trainer::{Budget, TrainConfig};

use crate::error::CliError;
use crate::synth::SynthSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub labeled: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub ratios: SplitRatios,
    /// Maximum number of unlabeled documents used; `None` keeps all.
    pub unlabeled_cap: Option<usize>,
    /// Expected embedding dimension; `None` accepts the file's.
    pub embedding_dim: Option<usize>,
    pub k: usize,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub budgets: Vec<Budget>,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            labeled: None,
            unlabeled: None,
            embeddings: None,
            graph: None,
            checkpoint: None,
            output: None,
            log: None,
            ratios: SplitRatios::default(),
            unlabeled_cap: None,
            embedding_dim: None,
            k: DEFAULT_K,
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            budgets: vec![
                Budget::Count(100),
                Budget::Count(500),
                Budget::Count(1000),
                Budget::Count(2000),
                Budget::All,
            ],
            synth: SynthSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, CliError> {
    match value {
        "" | "none" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_filters(value: &str) -> Result<Vec<FilterSpec>, CliError> {
    value
        .split(',')
        .map(|f| {
            let parts: Vec<usize> = list("model.filters", &f.replace(':', ","))?;
            match parts[..] {
                [width, count, pool] => Ok(FilterSpec { width, count, pool }),
                _ => Err(CliError::Usage(format!(
                    "model.filters entry {f:?} must be width:count:pool"
                ))),
            }
        })
        .collect()
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_owned(), T::to_string)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Assigns one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "paths.labeled" => self.labeled = path(v),
            "paths.unlabeled" => self.unlabeled = path(v),
            "paths.embeddings" => self.embeddings = path(v),
            "paths.graph" => self.graph = path(v),
            "paths.checkpoint" => self.checkpoint = path(v),
            "paths.output" => self.output = path(v),
            "paths.log" => self.log = path(v),
            "data.train_ratio" => self.ratios.train = parse(key, v)?,
            "data.dev_ratio" => self.ratios.dev = parse(key, v)?,
            "data.test_ratio" => self.ratios.test = parse(key, v)?,
            "data.unlabeled_cap" => self.unlabeled_cap = parse_optional(key, v)?,
            "embedding.dim" => self.embedding_dim = parse_optional(key, v)?,
            "graph.k" => self.k = parse(key, v)?,
            "model.max_len" => self.model.max_len = parse(key, v)?,
            "model.filters" => self.model.filters = parse_filters(v)?,
            "model.hidden" => {
                let h: Vec<usize> = list(key, v)?;
                self.model.hidden = match h[..] {
                    [a] => [a; 4],
                    [a, b, c, d] => [a, b, c, d],
                    _ => return Err(CliError::Usage("model.hidden takes 1 or 4 sizes".into())),
                };
            }
            "model.lambda" => self.model.lambda = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.mode" => self.model.mode = v.parse::<TrainingMode>().map_err(|e| CliError::Usage(e.to_string()))?,
            "sampler.rho1" => self.sampler.rho1 = parse(key, v)?,
            "sampler.rho2" => self.sampler.rho2 = parse(key, v)?,
            "sampler.max_retries" => self.sampler.max_retries = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.context_batch_size" => self.train.context_batch_size = parse(key, v)?,
            "train.context_samples" => self.train.context_samples = parse_optional(key, v)?,
            "train.lr_class" => self.train.lr_class = parse(key, v)?,
            "train.lr_context" => self.train.lr_context = parse(key, v)?,
            "train.adadelta_rho" => self.train.rho = parse(key, v)?,
            "train.adadelta_epsilon" => self.train.epsilon = parse(key, v)?,
            "sweep.budgets" => {
                self.budgets = v
                    .split(',')
                    .map(|b| b.parse::<Budget>().map_err(|e| CliError::Usage(e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            "synth.classes" => self.synth.classes = parse(key, v)?,
            "synth.docs_per_class" => self.synth.docs_per_class = parse(key, v)?,
            "synth.vocab_size" => self.synth.vocab_size = parse(key, v)?,
            "synth.shared_vocab_size" => self.synth.shared_vocab_size = parse(key, v)?,
            "synth.tokens_per_doc" => self.synth.tokens_per_doc = parse(key, v)?,
            "synth.signal" => self.synth.signal = parse(key, v)?,
            "synth.margin" => self.synth.margin = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.dim" => self.synth.dim = parse(key, v)?,
            "synth.unlabeled" => self.synth.unlabeled = parse(key, v)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        vec![
            ("seed", self.seed.to_string()),
            ("paths.labeled", show_path(&self.labeled)),
            ("paths.unlabeled", show_path(&self.unlabeled)),
            ("paths.embeddings", show_path(&self.embeddings)),
            ("paths.graph", show_path(&self.graph)),
            ("paths.checkpoint", show_path(&self.checkpoint)),
            ("paths.output", show_path(&self.output)),
            ("paths.log", show_path(&self.log)),
            ("data.train_ratio", self.ratios.train.to_string()),
            ("data.dev_ratio", self.ratios.dev.to_string()),
            ("data.test_ratio", self.ratios.test.to_string()),
            ("data.unlabeled_cap", show_opt(&self.unlabeled_cap, "none")),
            ("embedding.dim", show_opt(&self.embedding_dim, "auto")),
            ("graph.k", self.k.to_string()),
            ("model.max_len", m.max_len.to_string()),
            (
                "model.filters",
                m.filters
                    .iter()
                    .map(|f| format!("{}:{}:{}", f.width, f.count, f.pool))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("model.hidden", join(&m.hidden)),
            ("model.lambda", m.lambda.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.mode", m.mode.to_string()),
            ("sampler.rho1", self.sampler.rho1.to_string()),
            ("sampler.rho2", self.sampler.rho2.to_string()),
            ("sampler.max_retries", self.sampler.max_retries.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.context_batch_size", t.context_batch_size.to_string()),
            ("train.context_samples", show_opt(&t.context_samples, "auto")),
            ("train.lr_class", t.lr_class.to_string()),
            ("train.lr_context", t.lr_context.to_string()),
            ("train.adadelta_rho", t.rho.to_string()),
            ("train.adadelta_epsilon", t.epsilon.to_string()),
            ("sweep.budgets", join(&self.budgets)),
            ("synth.classes", s.classes.to_string()),
            ("synth.docs_per_class", s.docs_per_class.to_string()),
            ("synth.vocab_size", s.vocab_size.to_string()),
            ("synth.shared_vocab_size", s.shared_vocab_size.to_string()),
            ("synth.tokens_per_doc", s.tokens_per_doc.to_string()),
            ("synth.signal", s.signal.to_string()),
            ("synth.margin", s.margin.to_string()),
            ("synth.noise", s.noise.to_string()),
            ("synth.dim", s.dim.to_string()),
            ("synth.unlabeled", s.unlabeled.to_string()),
        ]
    }

    /// Renders the configuration in the file format accepted by [`Self::parse`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_text(text, source)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{source}:{}: expected key = value", n + 1)))?;
            self.set(key.trim(), value).map_err(|e| match e {
                CliError::Usage(m) => CliError::Usage(format!("{source}:{}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {assignment:?} must be key=value")))?;
        self.set(k.trim(), v)
    }

    /// Training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.ratios.validate()?;
        self.train_config().validate()?;
        self.sampler.validate()?;
        if self.k == 0 {
            return Err(CliError::Usage("graph.k must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_modules() {
        let c = RunConfig::default();
        assert_eq!(c.k, 10);
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.sampler, SamplerConfig::default());
        assert_eq!(join(&c.budgets), "100,500,1000,2000,all");
    }

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::default();
        c.set("model.filters", "2:8:2,3:8:3").unwrap();
        c.set("train.context_samples", "500").unwrap();
        c.set("paths.graph", "g.txt").unwrap();
        c.set("model.mode", "supervised").unwrap();
        let back = RunConfig::parse(&c.render(), "mem").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let c = RunConfig::parse("# header\ngraph.k = 4  # trailing\n\n", "mem").unwrap();
        assert_eq!(c.k, 4);
        let err = RunConfig::parse("graph.kk = 4\n", "mem").unwrap_err();
        assert!(err.to_string().contains("mem:1"), "{err}");
        assert!(RunConfig::parse("graph.k 4\n", "mem").is_err());
        assert!(RunConfig::parse("model.hidden = 1,2\n", "mem").is_err());
        assert!(RunConfig::parse("model.filters = 2:3\n", "mem").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("sampler.rho1=0.25").unwrap();
        assert_eq!(c.sampler.rho1, 0.25);
        assert!(c.apply_override("sampler.rho1").is_err());
        c.apply_override("model.hidden=16").unwrap();
        assert_eq!(c.model.hidden, [16; 4]);
    }
}
