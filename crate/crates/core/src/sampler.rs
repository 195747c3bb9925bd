//! Context sampling for the graph/label objective.
//!
//! A draw first picks its kind (label with probability `rho2`, else graph)
//! and its sign (positive with probability `rho1`), then a node pair:
//!
//! | kind  | sign | i                         | j                                  |
//! |-------|------|---------------------------|------------------------------------|
//! | graph | +    | uniform over non-isolated | uniform over symmetrized neighbors |
//! | graph | -    | uniform over all nodes    | uniform over non-neighbors         |
//! | label | +    | uniform over labeled      | uniform over same-class others     |
//! | label | -    | uniform over labeled      | uniform over other-class labeled   |

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::rng::Rng;

pub const DEFAULT_MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Probability that a draw is positive.
    pub rho1: f64,
    /// Probability that a draw is label-based rather than graph-based.
    pub rho2: f64,
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            rho1: 0.5,
            rho2: 0.5,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho1", self.rho1), ("rho2", self.rho2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Invalid(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        if self.max_retries == 0 {
            return Err(Error::Invalid("max_retries must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    Graph,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSample {
    pub i: usize,
    pub j: usize,
    pub positive: bool,
    pub kind: ContextKind,
}

impl ContextSample {
    /// `+1` for positive pairs, `-1` otherwise.
    pub fn gamma(&self) -> f64 {
        if self.positive {
            1.0
        } else {
            -1.0
        }
    }
}

/// Precomputed neighbor and class indexes over one graph.
#[derive(Debug, Clone)]
pub struct ContextSampler {
    config: SamplerConfig,
    /// Sorted symmetrized neighbor lists.
    neighbors: Vec<Vec<usize>>,
    connected: Vec<usize>,
    labels: Vec<Option<usize>>,
    labeled: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl ContextSampler {
    /// `labels[v]` is the class of node `v`, or `None` for unlabeled nodes.
    pub fn new(graph: &SimilarityGraph, labels: &[Option<usize>], config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let n = graph.node_count();
        if n < 2 {
            return Err(Error::Sampling(format!("graph needs at least 2 nodes, has {n}")));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} graph nodes", labels.len())));
        }
        let neighbors = graph.symmetrized();
        let connected = (0..n).filter(|&v| !neighbors[v].is_empty()).collect();
        let labeled: Vec<usize> = (0..n).filter(|&v| labels[v].is_some()).collect();
        let classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
        let mut by_class = vec![Vec::new(); classes];
        for &v in &labeled {
            by_class[labels[v].expect("labeled")].push(v);
        }
        Ok(Self {
            config,
            neighbors,
            connected,
            labels: labels.to_vec(),
            labeled,
            by_class,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_neighbor(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn label(&self, v: usize) -> Option<usize> {
        self.labels[v]
    }

    /// Draws one context sample.
    pub fn sample(&self, rng: &mut Rng) -> Result<ContextSample> {
        let kind = if rng.random::<f64>() < self.config.rho2 {
            ContextKind::Label
        } else {
            ContextKind::Graph
        };
        let positive = rng.random::<f64>() < self.config.rho1;
        let (i, j) = match (kind, positive) {
            (ContextKind::Graph, true) => self.graph_positive(rng)?,
            (ContextKind::Graph, false) => self.graph_negative(rng)?,
            (ContextKind::Label, true) => self.label_positive(rng)?,
            (ContextKind::Label, false) => self.label_negative(rng)?,
        };
        Ok(ContextSample { i, j, positive, kind })
    }

    /// `count` consecutive draws from the same stream.
    pub fn sample_batch(&self, count: usize, rng: &mut Rng) -> Result<Vec<ContextSample>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    fn graph_positive(&self, rng: &mut Rng) -> Result<(usize, usize)> {
        if self.connected.is_empty() {
            return Err(Error::Sampling("graph has no edges".into()));
        }
        let i = self.connected[rng.random_range(0..self.connected.len())];
        let nb = &self.neighbors[i];
        Ok((i, nb[rng.random_range(0..nb.len())]))
    }

    fn graph_negative(&self, rng: &mut Rng) -> Result<(usize, usize)> {
        let n = self.node_count();
        self.retry("graph negative", rng, |rng| {
            let i = rng.random_range(0..n);
            if self.neighbors[i].len() + 1 >= n {
                return None;
            }
            self.reject_until(rng, |rng| {
                let j = rng.random_range(0..n);
                (j != i && !self.is_neighbor(i, j)).then_some((i, j))
            })
        })
    }

    fn label_positive(&self, rng: &mut Rng) -> Result<(usize, usize)> {
        if !self.by_class.iter().any(|c| c.len() >= 2) {
            return Err(Error::Sampling("no class has two labeled nodes".into()));
        }
        self.retry("label positive", rng, |rng| {
            let i = self.labeled[rng.random_range(0..self.labeled.len())];
            let class = &self.by_class[self.labels[i].expect("labeled")];
            if class.len() < 2 {
                return None;
            }
            // uniform over the class minus i; class lists are sorted
            let pos = class.binary_search(&i).expect("i is in its class");
            let mut r = rng.random_range(0..class.len() - 1);
            if r >= pos {
                r += 1;
            }
            Some((i, class[r]))
        })
    }

    fn label_negative(&self, rng: &mut Rng) -> Result<(usize, usize)> {
        if self.by_class.iter().filter(|c| !c.is_empty()).count() < 2 {
            return Err(Error::Sampling(
                "label negatives need labeled nodes from two classes".into(),
            ));
        }
        self.retry("label negative", rng, |rng| {
            let i = self.labeled[rng.random_range(0..self.labeled.len())];
            let ci = self.labels[i];
            self.reject_until(rng, |rng| {
                let j = self.labeled[rng.random_range(0..self.labeled.len())];
                (self.labels[j] != ci).then_some((i, j))
            })
        })
    }

    fn reject_until<T>(&self, rng: &mut Rng, mut draw: impl FnMut(&mut Rng) -> Option<T>) -> Option<T> {
        (0..self.config.max_retries).find_map(|_| draw(rng))
    }

    fn retry<T>(&self, what: &str, rng: &mut Rng, draw: impl FnMut(&mut Rng) -> Option<T>) -> Result<T> {
        self.reject_until(rng, draw).ok_or_else(|| {
            Error::Sampling(format!(
                "{what}: no valid pair after {} retries",
                self.config.max_retries
            ))
        })
    }
}
