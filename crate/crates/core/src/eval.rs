//! Embedding and graph quality metrics: child-cluster purity, cross-view
//! retrieval precision, and the quadruple ordering rate.
//!
//! All metrics run in f64 over f32 embedding rows, parallelize over
//! queries in fixed chunks, and reduce sequentially, so results do not
//! depend on the worker count.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AffinityGraph, ChildCluster};
use crate::matrix::Matrix;
use crate::parallel;
use crate::synth::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    /// Fraction of child clusters whose members all share one category.
    pub strict: f64,
    /// Mean majority-category fraction over child clusters.
    pub majority: f64,
    pub n_clusters: usize,
}

pub fn purity(children: &[ChildCluster], gt: &GroundTruth) -> Result<PurityReport> {
    if children.is_empty() {
        return Err(Error::Validation(
            "purity is undefined without child clusters".into(),
        ));
    }
    let mut strict = 0usize;
    let mut majority_sum = 0.0f64;
    for child in children {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &m in &child.members {
            *counts.entry(gt.category_of(m)?).or_default() += 1;
        }
        let top = counts.values().copied().max().unwrap_or(0);
        if counts.len() == 1 {
            strict += 1;
        }
        majority_sum += top as f64 / child.members.len() as f64;
    }
    Ok(PurityReport {
        strict: strict as f64 / children.len() as f64,
        majority: majority_sum / children.len() as f64,
        n_clusters: children.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalProtocol {
    /// Gallery items must come from a different view than the query.
    pub cross_view: bool,
    /// Gallery items from the query's own instance are excluded.
    pub cross_instance: bool,
}

impl Default for RetrievalProtocol {
    fn default() -> Self {
        RetrievalProtocol {
            cross_view: true,
            cross_instance: true,
        }
    }
}

/// Mean fraction of each query's top-k cosine neighbors that share the
/// query's category. Every node is a query; its gallery is filtered by the
/// protocol. Errors if any query's gallery holds fewer than k items.
pub fn retrieval_precision(
    embeddings: &Matrix,
    gt: &GroundTruth,
    k: usize,
    protocol: RetrievalProtocol,
) -> Result<f64> {
    let n = embeddings.rows();
    if k == 0 {
        return Err(Error::Config("retrieval k must be at least 1".into()));
    }
    if gt.len() != n {
        return Err(Error::Validation(format!(
            "ground truth covers {} nodes, embeddings have {n}",
            gt.len()
        )));
    }
    let norms = row_norms(embeddings)?;

    let precisions: Vec<Result<f64>> = parallel::map_indexed(n, |q| {
        let rec = gt.get(q as u32).expect("dense ground truth");
        let qrow = embeddings.row(q);
        let mut scored: Vec<(f64, u32)> = Vec::new();
        for g in 0..n {
            if g == q {
                continue;
            }
            let grec = gt.get(g as u32).expect("dense ground truth");
            if protocol.cross_view && grec.view == rec.view {
                continue;
            }
            if protocol.cross_instance && grec.instance == rec.instance {
                continue;
            }
            let dot: f64 = qrow
                .iter()
                .zip(embeddings.row(g))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            scored.push((dot / (norms[q] * norms[g]), g as u32));
        }
        if scored.len() < k {
            return Err(Error::Validation(format!(
                "query {q} has a gallery of {} items under the protocol, need {k}",
                scored.len()
            )));
        }
        scored.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let hits = scored[..k]
            .iter()
            .filter(|&&(_, g)| gt.get(g).expect("dense").category == rec.category)
            .count();
        Ok(hits as f64 / k as f64)
    });

    let mut sum = 0.0;
    for p in precisions {
        sum += p?;
    }
    Ok(sum / n as f64)
}

/// Fraction of sampled quadruples (A, A′, B, B′) with
/// D(A,A′) < D(A,B′) strictly, where (A,B) is an inter edge, A′ a track
/// partner of A, and B′ a track partner of B. Quadruples are drawn
/// uniformly over both orientations of every eligible edge.
pub fn quadruple_ordering_rate(
    embeddings: &Matrix,
    graph: &AffinityGraph,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    if embeddings.rows() != graph.n_nodes() {
        return Err(Error::Validation(format!(
            "embeddings cover {} nodes, graph has {}",
            embeddings.rows(),
            graph.n_nodes()
        )));
    }
    let norms = row_norms(embeddings)?;

    // Oriented quadruple spaces: (anchor, other, |P(anchor)|*|P(other)|).
    let mut spaces: Vec<(u32, u32, u64)> = Vec::new();
    let mut total = 0u64;
    for e in graph.inter_edges() {
        let pa = graph.intra_partners(e.a)?.len() as u64;
        let pb = graph.intra_partners(e.b)?.len() as u64;
        if pa > 0 && pb > 0 {
            spaces.push((e.a, e.b, pa * pb));
            spaces.push((e.b, e.a, pa * pb));
            total += 2 * pa * pb;
        }
    }
    if total == 0 {
        return Err(Error::Validation(
            "graph has no quadruples: need an inter edge with track partners on both ends"
                .into(),
        ));
    }

    let cos = |x: usize, y: usize| -> f64 {
        let dot: f64 = embeddings
            .row(x)
            .iter()
            .zip(embeddings.row(y))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        dot / (norms[x] * norms[y])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ordered = 0usize;
    for _ in 0..n_samples {
        let mut pick = rng.random_range(0..total);
        let mut chosen = spaces[0];
        for &s in &spaces {
            if pick < s.2 {
                chosen = s;
                break;
            }
            pick -= s.2;
        }
        let (a, b, _) = chosen;
        let pa = graph.intra_partners(a)?;
        let pb = graph.intra_partners(b)?;
        let a2 = pa[rng.random_range(0..pa.len())];
        let b2 = pb[rng.random_range(0..pb.len())];
        // D(A,A') < D(A,B')  <=>  cos(A,A') > cos(A,B').
        if cos(a as usize, a2 as usize) > cos(a as usize, b2 as usize) {
            ordered += 1;
        }
    }
    Ok(ordered as f64 / n_samples as f64)
}

fn row_norms(embeddings: &Matrix) -> Result<Vec<f64>> {
    (0..embeddings.rows())
        .map(|i| {
            let norm = crate::features::row_norm(embeddings.row(i));
            if norm < 1e-12 {
                Err(Error::ZeroNormRow { row: i })
            } else {
                Ok(norm)
            }
        })
        .collect()
}
