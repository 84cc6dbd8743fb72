//! Mutual nearest-neighbor groups inside parent clusters.
//!
//! Each assigned node ranks the other members of its parent cluster by
//! cosine similarity. Two nodes are mutual neighbors when each appears in
//! the other's top-k list; child clusters are the size-g cliques of that
//! mutual graph.

use crate::error::{Error, Result};
use crate::graph::ChildCluster;
use crate::matrix::Matrix;
use crate::parallel;

#[derive(Debug, Clone)]
pub struct NeighborConfig {
    /// Neighbor list length per node.
    pub k: usize,
    /// Child cluster size (clique size in the mutual graph).
    pub group_size: usize,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        NeighborConfig {
            k: 10,
            group_size: 4,
        }
    }
}

/// Top-k neighbors of each member among the other members, returned as
/// global node ids, most similar first. Ties break toward the lower id.
/// Lists are shorter than k when the cluster is small.
pub fn top_k_within(data: &Matrix, members: &[u32], k: usize) -> Vec<Vec<u32>> {
    parallel::map_indexed(members.len(), |i| {
        let row = data.row(members[i] as usize);
        let mut scored: Vec<(f64, u32)> = members
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &m)| {
                let dot: f64 = row
                    .iter()
                    .zip(data.row(m as usize))
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum();
                (dot, m)
            })
            .collect();
        scored.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.truncate(k);
        scored.into_iter().map(|(_, m)| m).collect()
    })
}

/// Mutual pairs (a < b): each endpoint lists the other in its top-k.
pub fn mutual_pairs(members: &[u32], knn: &[Vec<u32>]) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    for (i, &a) in members.iter().enumerate() {
        for &b in &knn[i] {
            if b <= a {
                continue;
            }
            let j = members.binary_search(&b).expect("knn lists stay within members");
            if knn[j].contains(&a) {
                pairs.push((a, b));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// All cliques of exactly `g` vertices, each sorted ascending, in
/// lexicographic order. `g == 0` yields nothing.
pub fn cliques_of_size(n: usize, edges: &[(usize, usize)], g: usize) -> Vec<Vec<usize>> {
    if g == 0 || n == 0 {
        return Vec::new();
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a == b {
            continue;
        }
        adj[a].push(b);
        adj[b].push(a);
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }

    let mut out = Vec::new();
    let mut current = Vec::with_capacity(g);
    let all: Vec<usize> = (0..n).collect();
    extend_cliques(&adj, g, &mut current, &all, &mut out);
    out
}

fn extend_cliques(
    adj: &[Vec<usize>],
    g: usize,
    current: &mut Vec<usize>,
    candidates: &[usize],
    out: &mut Vec<Vec<usize>>,
) {
    if current.len() == g {
        out.push(current.clone());
        return;
    }
    let need = g - current.len();
    for (i, &v) in candidates.iter().enumerate() {
        if candidates.len() - i < need {
            break;
        }
        current.push(v);
        let next: Vec<usize> = candidates[i + 1..]
            .iter()
            .copied()
            .filter(|u| adj[v].binary_search(u).is_ok())
            .collect();
        extend_cliques(adj, g, current, &next, out);
        current.pop();
    }
}

/// Mine child clusters from every parent cluster. Cluster ids are dense in
/// emission order: parents ascending, cliques lexicographic within each.
pub fn find_child_clusters(
    data: &Matrix,
    parent_of: &[Option<u32>],
    n_parents: usize,
    cfg: &NeighborConfig,
) -> Result<Vec<ChildCluster>> {
    if cfg.k == 0 {
        return Err(Error::Config("neighbor count k must be at least 1".into()));
    }
    if cfg.group_size < 2 {
        return Err(Error::Config(format!(
            "group_size {} cannot form pairs, need at least 2",
            cfg.group_size
        )));
    }
    if parent_of.len() != data.rows() {
        return Err(Error::Validation(format!(
            "assignment table covers {} nodes, feature matrix has {}",
            parent_of.len(),
            data.rows()
        )));
    }
    for &p in parent_of.iter().flatten() {
        if p as usize >= n_parents {
            return Err(Error::Validation(format!(
                "assignment references parent {p}, only {n_parents} exist"
            )));
        }
    }

    let members = crate::clustering::members_by_cluster(parent_of, n_parents);
    let mut children = Vec::new();
    for (parent, members) in members.iter().enumerate() {
        if members.len() < cfg.group_size {
            continue;
        }
        let knn = top_k_within(data, members, cfg.k);
        let pairs = mutual_pairs(members, &knn);
        // Clique search runs on local indices; members is sorted so the
        // mapping preserves order.
        let local: Vec<(usize, usize)> = pairs
            .iter()
            .map(|&(a, b)| {
                (
                    members.binary_search(&a).unwrap(),
                    members.binary_search(&b).unwrap(),
                )
            })
            .collect();
        for clique in cliques_of_size(members.len(), &local, cfg.group_size) {
            children.push(ChildCluster {
                cluster_id: children.len() as u32,
                parent_id: parent as u32,
                members: clique.into_iter().map(|i| members[i]).collect(),
            });
        }
    }
    Ok(children)
}
