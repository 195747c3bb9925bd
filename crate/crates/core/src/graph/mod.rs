//! k-nearest-neighbour similarity graph over document vectors.
//!
//! Graph file format: a header line `n k`, then one `i j dist` line per
//! directed edge, grouped by source node in ascending distance order. A
//! sidecar file maps node indices to document ids, one `index<TAB>id` line
//! per node.

mod kdtree;

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::embedding::DocVector;
use crate::error::{Error, Result};

pub use kdtree::{KdTree, LEAF_SIZE};

pub const DEFAULT_K: usize = 10;

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "distance between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(kdtree::squared_distance(a, b).sqrt())
}

fn flatten(vectors: &[DocVector]) -> Result<(Vec<f64>, usize)> {
    let Some(first) = vectors.first() else {
        return Err(Error::Invalid("no document vectors".into()));
    };
    let dim = first.values.len();
    let mut flat = Vec::with_capacity(vectors.len() * dim);
    for v in vectors {
        if v.values.len() != dim {
            return Err(Error::Shape(format!(
                "document {} has dimension {}, expected {dim}",
                v.source_id,
                v.values.len()
            )));
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("document vector {}", v.source_id)));
        }
        flat.extend_from_slice(&v.values);
    }
    Ok((flat, dim))
}

pub fn build_kdtree(vectors: &[DocVector]) -> Result<KdTree> {
    let (flat, dim) = flatten(vectors)?;
    KdTree::build(flat, dim)
}

pub fn knn_query(tree: &KdTree, query_id: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    tree.knn_query(query_id, k)
}

/// Exhaustive k-NN over all `n - 1` candidates; the reference the tree is
/// checked against.
pub fn brute_force_knn(vectors: &[DocVector], query_id: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let (flat, dim) = flatten(vectors)?;
    kdtree::brute_force_knn(&flat, dim, query_id, k)
}

/// Directed k-NN adjacency. `adjacency[i]` lists `(neighbor, distance)`
/// sorted ascending by distance, then neighbor id.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    k: usize,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl SimilarityGraph {
    pub fn from_adjacency(k: usize, adjacency: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let graph = Self { k, adjacency };
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<()> {
        let n = self.adjacency.len();
        let degree = self.k.min(n.saturating_sub(1));
        for (i, edges) in self.adjacency.iter().enumerate() {
            if edges.len() != degree {
                return Err(Error::Invalid(format!(
                    "node {i} has {} neighbors, expected {degree}",
                    edges.len()
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for (pos, &(j, d)) in edges.iter().enumerate() {
                if j >= n || j == i || !seen.insert(j) {
                    return Err(Error::Invalid(format!("node {i}: invalid neighbor {j}")));
                }
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::Invalid(format!("node {i}: invalid distance {d}")));
                }
                if pos > 0 {
                    let (pj, pd) = edges[pos - 1];
                    if (pd, pj) > (d, j) {
                        return Err(Error::Invalid(format!("node {i}: neighbors not sorted")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adjacency[node]
    }

    pub fn adjacency(&self) -> &[Vec<(usize, f64)>] {
        &self.adjacency
    }

    /// Undirected neighbor sets: `j` neighbors `i` if either directed edge
    /// exists. Each list is sorted and duplicate-free.
    pub fn symmetrized(&self) -> Vec<Vec<usize>> {
        let mut sets: Vec<Vec<usize>> = vec![Vec::new(); self.node_count()];
        for (i, edges) in self.adjacency.iter().enumerate() {
            for &(j, _) in edges {
                sets[i].push(j);
                sets[j].push(i);
            }
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        sets
    }

    pub fn write<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.node_count(), self.k)?;
        let mut line = String::new();
        for (i, edges) in self.adjacency.iter().enumerate() {
            for &(j, d) in edges {
                line.clear();
                // `{}` prints the shortest representation that parses back exactly
                writeln!(line, "{i} {j} {d}").unwrap();
                out.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let (n, k) = match lines.next() {
            Some((_, Ok(line))) => {
                let parts: Vec<&str> = line.split_ascii_whitespace().collect();
                match parts.as_slice() {
                    [n, k] => match (n.parse::<usize>(), k.parse::<usize>()) {
                        (Ok(n), Ok(k)) => (n, k),
                        _ => return Err(Error::format(source, 1, format!("bad header {line:?}"))),
                    },
                    _ => return Err(Error::format(source, 1, format!("bad header {line:?}"))),
                }
            }
            Some((_, Err(e))) => return Err(Error::format(source, 1, e.to_string())),
            None => return Err(Error::format(source, 1, "empty graph file")),
        };
        let mut adjacency = vec![Vec::new(); n];
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::format(source, lineno, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_ascii_whitespace().collect();
            let [a, b, d] = parts.as_slice() else {
                return Err(Error::format(source, lineno, "expected `i j dist`"));
            };
            let parsed = (a.parse::<usize>(), b.parse::<usize>(), d.parse::<f64>());
            let (Ok(a), Ok(b), Ok(d)) = parsed else {
                return Err(Error::format(source, lineno, format!("bad edge {line:?}")));
            };
            if a >= n || b >= n {
                return Err(Error::format(
                    source,
                    lineno,
                    format!("node index out of range (n = {n})"),
                ));
            }
            adjacency[a].push((b, d));
        }
        Self::from_adjacency(k, adjacency).map_err(|e| Error::format(source, 0, e.to_string()))
    }
}

/// Builds the k-NN graph with an exact k-d tree. Queries run in parallel;
/// results land in per-node slots, so output does not depend on scheduling.
pub fn build_graph(vectors: &[DocVector], k: usize) -> Result<SimilarityGraph> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if vectors.len() < 2 {
        return Err(Error::Invalid(format!(
            "a similarity graph needs at least 2 nodes, got {}",
            vectors.len()
        )));
    }
    let tree = build_kdtree(vectors)?;
    let adjacency = (0..tree.len())
        .into_par_iter()
        .map(|i| tree.knn_query(i, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityGraph { k, adjacency })
}

/// Writes the `index<TAB>id` sidecar.
pub fn write_id_map<W: Write>(out: &mut W, ids: &[String]) -> std::io::Result<()> {
    for (i, id) in ids.iter().enumerate() {
        writeln!(out, "{i}\t{id}")?;
    }
    Ok(())
}

pub fn read_id_map<R: BufRead>(reader: R, source: &str) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::format(source, lineno, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let Some((idx, id)) = line.split_once('\t') else {
            return Err(Error::format(source, lineno, "expected `index<TAB>id`"));
        };
        if idx.parse::<usize>().ok() != Some(ids.len()) {
            return Err(Error::format(source, lineno, format!("expected index {}", ids.len())));
        }
        ids.push(id.to_owned());
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(points: &[&[f64]]) -> Vec<DocVector> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| DocVector {
                values: p.to_vec(),
                source_id: format!("d{i}"),
            })
            .collect()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        let d = euclidean_distance(&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!((d - 3f64.sqrt()).abs() < 1e-12);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn degree_is_capped_at_n_minus_one() {
        let v = docs(&[&[0.0], &[1.0], &[3.0], &[6.0], &[10.0]]);
        let g = build_graph(&v, DEFAULT_K).unwrap();
        assert_eq!(DEFAULT_K, 10);
        assert!(g.adjacency().iter().all(|e| e.len() == 4));
    }

    #[test]
    fn build_rejects_tiny_or_ragged_input() {
        assert!(build_graph(&docs(&[&[0.0]]), 3).is_err());
        assert!(build_graph(&docs(&[&[0.0], &[1.0, 2.0]]), 1).is_err());
        assert!(build_graph(&docs(&[&[0.0], &[1.0]]), 0).is_err());
    }

    #[test]
    fn symmetrized_union() {
        // 0 and 1 are mutual, 2's nearest is 1 but 1's nearest is 0
        let v = docs(&[&[0.0], &[1.0], &[3.0]]);
        let g = build_graph(&v, 1).unwrap();
        assert_eq!(g.neighbors(2), &[(1, 2.0)]);
        assert_eq!(g.symmetrized(), vec![vec![1], vec![0, 2], vec![1]]);
    }

    #[test]
    fn file_round_trip() {
        let v = docs(&[&[0.1, 0.2], &[0.3, -0.7], &[1.0 / 3.0, 2.0], &[5.0, 5.0]]);
        let g = build_graph(&v, 2).unwrap();
        let mut buf = Vec::new();
        g.write(&mut buf).unwrap();
        let back = SimilarityGraph::read(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn read_rejects_bad_graphs() {
        assert!(SimilarityGraph::read("2 1\n0 0 0.0\n1 0 1.0\n".as_bytes(), "m").is_err());
        assert!(SimilarityGraph::read("2 1\n0 5 1.0\n1 0 1.0\n".as_bytes(), "m").is_err());
        assert!(SimilarityGraph::read("2 1\n0 1 1.0\n".as_bytes(), "m").is_err());
        assert!(SimilarityGraph::read("3 2\n0 1 2.0\n0 2 1.0\n1 0 1\n1 2 1\n2 0 1\n2 1 1\n".as_bytes(), "m").is_err());
    }

    #[test]
    fn id_map_round_trip() {
        let ids = vec!["a".to_string(), "b c".to_string()];
        let mut buf = Vec::new();
        write_id_map(&mut buf, &ids).unwrap();
        assert_eq!(read_id_map(buf.as_slice(), "m").unwrap(), ids);
        assert!(read_id_map("1\ta\n".as_bytes(), "m").is_err());
    }
}
