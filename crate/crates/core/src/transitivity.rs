//! Positive-pair enumeration.
//!
//! Every inter edge (A,B) certifies that A and B look alike. Track
//! partners of A and B show the same objects from other viewpoints, so the
//! edge extends to ({A} ∪ partners(A)) × ({B} ∪ partners(B)): one inter
//! edge with one partner per side yields three extra pairs. Depth stops
//! there; inter edges are never chained through other inter edges.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AffinityGraph;
use crate::seed::derive_seed;

/// How a positive pair was obtained. `TrackedA` means the first endpoint
/// of the generating inter edge was replaced by one of its track partners;
/// likewise `TrackedB` and `TrackedBoth`. `Intra` pairs come straight from
/// track edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRelation {
    Inter,
    TrackedA,
    TrackedB,
    TrackedBoth,
    Intra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositivePair {
    pub a: u32,
    pub b: u32,
    pub relation: PairRelation,
}

impl PositivePair {
    /// Canonicalizes endpoint order; the relation tag records derivation,
    /// not orientation, so it is unaffected by the swap.
    pub fn new(x: u32, y: u32, relation: PairRelation) -> Result<Self> {
        if x == y {
            return Err(Error::Validation(format!("pair cannot link node {x} to itself")));
        }
        let (a, b) = if x < y { (x, y) } else { (y, x) };
        Ok(PositivePair { a, b, relation })
    }
}

#[derive(Debug, Clone)]
pub struct PairGenConfig {
    /// Target fraction of Intra pairs in the assembled dataset.
    pub intra_ratio: f64,
    pub seed: u64,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        PairGenConfig {
            intra_ratio: 2.0 / 9.0,
            seed: 0,
        }
    }
}

impl PairGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.intra_ratio.is_finite() || !(0.0..1.0).contains(&self.intra_ratio) {
            return Err(Error::Config(format!(
                "intra_ratio {} must lie in [0, 1)",
                self.intra_ratio
            )));
        }
        Ok(())
    }
}

const INTRA_SAMPLE_TAG: u64 = 0x7061_6972_5f69_6e74; // sub-stream: intra sampling
const SHUFFLE_TAG: u64 = 0x7061_6972_5f73_6866; // sub-stream: dataset shuffle

/// The closure of all inter edges over track partners.
///
/// Pairs are deduplicated as unordered sets. A pair reachable both as a
/// plain inter edge and through a track hop keeps the `Inter` tag: base
/// pairs are emitted for every edge first, transitive combinations after.
/// Output is sorted by (a, b).
pub fn transitive_pairs(graph: &AffinityGraph) -> Vec<PositivePair> {
    let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut out = Vec::new();
    {
        let mut push = |x: u32, y: u32, relation: PairRelation| {
            if x == y {
                return;
            }
            let key = if x < y { (x, y) } else { (y, x) };
            if seen.insert(key) {
                out.push(PositivePair {
                    a: key.0,
                    b: key.1,
                    relation,
                });
            }
        };
        for e in graph.inter_edges() {
            push(e.a, e.b, PairRelation::Inter);
        }
        for e in graph.inter_edges() {
            let pa = graph.intra_partners(e.a).expect("edge endpoints are valid");
            let pb = graph.intra_partners(e.b).expect("edge endpoints are valid");
            for &a2 in pa {
                push(a2, e.b, PairRelation::TrackedA);
            }
            for &b2 in pb {
                push(e.a, b2, PairRelation::TrackedB);
            }
            for &a2 in pa {
                for &b2 in pb {
                    push(a2, b2, PairRelation::TrackedBoth);
                }
            }
        }
    }
    out.sort_unstable_by_key(|p| (p.a, p.b));
    out
}

/// Every intra edge as a pair, sorted by (a, b).
pub fn all_intra_pairs(graph: &AffinityGraph) -> Vec<PositivePair> {
    graph
        .intra_edges()
        .map(|e| PositivePair {
            a: e.a,
            b: e.b,
            relation: PairRelation::Intra,
        })
        .collect()
}

/// Every inter edge as a pair, sorted by (a, b).
pub fn all_inter_pairs(graph: &AffinityGraph) -> Vec<PositivePair> {
    graph
        .inter_edges()
        .map(|e| PositivePair {
            a: e.a,
            b: e.b,
            relation: PairRelation::Inter,
        })
        .collect()
}

/// Uniform sample of intra edges, with replacement, `target_count` draws.
pub fn sample_intra_pairs(
    graph: &AffinityGraph,
    cfg: &PairGenConfig,
    target_count: usize,
) -> Result<Vec<PositivePair>> {
    cfg.validate()?;
    if target_count == 0 {
        return Ok(Vec::new());
    }
    let edges: Vec<_> = graph.intra_edges().collect();
    if edges.is_empty() {
        return Err(Error::Config(format!(
            "{target_count} intra pairs requested but the graph has no intra edges \
             (set intra_ratio to 0 for track-free graphs)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INTRA_SAMPLE_TAG));
    Ok((0..target_count)
        .map(|_| {
            let e = edges[rng.random_range(0..edges.len())];
            PositivePair {
                a: e.a,
                b: e.b,
                relation: PairRelation::Intra,
            }
        })
        .collect())
}

/// Intra pairs needed so that intra/(transitive+intra) hits `ratio`,
/// rounded to the nearest whole pair.
pub fn intra_target(transitive_count: usize, ratio: f64) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    (ratio * transitive_count as f64 / (1.0 - ratio)).round() as usize
}

/// Concatenate the transitive pairs with as many intra pairs as the ratio
/// asks for (clamped to what was provided) and shuffle deterministically.
pub fn assemble_pairs(
    transitive: &[PositivePair],
    intra_sampled: &[PositivePair],
    cfg: &PairGenConfig,
) -> Result<Vec<PositivePair>> {
    cfg.validate()?;
    let take = intra_target(transitive.len(), cfg.intra_ratio).min(intra_sampled.len());
    let mut out = Vec::with_capacity(transitive.len() + take);
    out.extend_from_slice(transitive);
    out.extend_from_slice(&intra_sampled[..take]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_TAG));
    out.shuffle(&mut rng);
    Ok(out)
}

/// Which positive pairs feed training. The first three are ablation
/// baselines; `Transitive` is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// Track edges only.
    IntraOnly,
    /// Inter edges only.
    InterOnly,
    /// Inter and intra edges, no closure.
    Union,
    /// Closure of inter edges plus ratio-sampled intra pairs.
    Transitive,
}

impl PairMode {
    pub const ALL: [PairMode; 4] = [
        PairMode::IntraOnly,
        PairMode::InterOnly,
        PairMode::Union,
        PairMode::Transitive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PairMode::IntraOnly => "intra-only",
            PairMode::InterOnly => "inter-only",
            PairMode::Union => "union",
            PairMode::Transitive => "transitive",
        }
    }
}

impl std::str::FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra-only" => Ok(PairMode::IntraOnly),
            "inter-only" => Ok(PairMode::InterOnly),
            "union" => Ok(PairMode::Union),
            "transitive" => Ok(PairMode::Transitive),
            other => Err(Error::Config(format!(
                "unknown pair mode {other:?}, expected intra-only|inter-only|union|transitive"
            ))),
        }
    }
}

/// The full pair dataset for one mode, deterministically shuffled.
pub fn pairs_for_mode(
    graph: &AffinityGraph,
    mode: PairMode,
    cfg: &PairGenConfig,
) -> Result<Vec<PositivePair>> {
    cfg.validate()?;
    let mut out = match mode {
        PairMode::IntraOnly => all_intra_pairs(graph),
        PairMode::InterOnly => all_inter_pairs(graph),
        PairMode::Union => {
            let mut v = all_inter_pairs(graph);
            v.extend(all_intra_pairs(graph));
            v
        }
        PairMode::Transitive => {
            let transitive = transitive_pairs(graph);
            let target = intra_target(transitive.len(), cfg.intra_ratio);
            let intra = sample_intra_pairs(graph, cfg, target)?;
            return assemble_pairs(&transitive, &intra, cfg);
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_TAG));
    out.shuffle(&mut rng);
    Ok(out)
}

pub fn save_pairs(pairs: &[PositivePair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for pair in pairs {
        serde_json::to_writer(&mut w, pair).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PositivePair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PositivePair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if pair.a >= pair.b {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("pair ({},{}) must satisfy a < b", pair.a, pair.b),
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::graph::{ChildCluster, PatchNode};

    /// Graph with explicit child-cluster member lists (parent = list
    /// index) and tracks given as node chains.
    pub(crate) fn test_graph(
        n: usize,
        children: &[Vec<u32>],
        tracks: &[Vec<u32>],
    ) -> AffinityGraph {
        let mut track_of = vec![None; n];
        let mut frame_of = vec![0u32; n];
        for (t, track) in tracks.iter().enumerate() {
            for (pos, &m) in track.iter().enumerate() {
                track_of[m as usize] = Some(t);
                frame_of[m as usize] = pos as u32;
            }
        }
        let nodes: Vec<PatchNode> = (0..n)
            .map(|i| PatchNode {
                node_id: i as u32,
                feature: vec![1.0],
                video_id: "v".into(),
                track_id: match track_of[i] {
                    Some(t) => format!("t{t}"),
                    None => format!("solo{i}"),
                },
                frame_index: frame_of[i],
            })
            .collect();
        let mut parent_of = vec![Some(0u32); n];
        let ccs: Vec<ChildCluster> = children
            .iter()
            .enumerate()
            .map(|(i, members)| {
                for &m in members {
                    parent_of[m as usize] = Some(i as u32);
                }
                ChildCluster {
                    cluster_id: i as u32,
                    parent_id: i as u32,
                    members: members.clone(),
                }
            })
            .collect();
        AffinityGraph::build(nodes, parent_of, ccs, tracks).unwrap()
    }

    fn keys(pairs: &[PositivePair]) -> Vec<(u32, u32)> {
        pairs.iter().map(|p| (p.a, p.b)).collect()
    }

    #[test]
    fn one_edge_one_partner_each_side_gives_four_pairs() {
        // Edge (0,1); 2 is 0's track partner, 3 is 1's.
        let g = test_graph(4, &[vec![0, 1]], &[vec![0, 2], vec![1, 3]]);
        let pairs = transitive_pairs(&g);
        assert_eq!(keys(&pairs), vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
        let rel: Vec<PairRelation> = pairs.iter().map(|p| p.relation).collect();
        assert_eq!(
            rel,
            vec![
                PairRelation::Inter,
                PairRelation::TrackedB,
                PairRelation::TrackedA,
                PairRelation::TrackedBoth
            ]
        );
    }

    #[test]
    fn no_partners_keeps_base_pair_only() {
        let g = test_graph(2, &[vec![0, 1]], &[]);
        let pairs = transitive_pairs(&g);
        assert_eq!(keys(&pairs), vec![(0, 1)]);
        assert_eq!(pairs[0].relation, PairRelation::Inter);
    }

    #[test]
    fn two_partners_one_side_gives_six_pairs() {
        // 0's partners are 2 and 3 (chain 2-0-3); 1's partner is 4.
        let g = test_graph(5, &[vec![0, 1]], &[vec![2, 0, 3], vec![1, 4]]);
        let pairs = transitive_pairs(&g);
        assert_eq!(
            keys(&pairs),
            vec![(0, 1), (0, 4), (1, 2), (1, 3), (2, 4), (3, 4)]
        );
    }

    #[test]
    fn self_and_duplicate_pairs_collapse() {
        // 0 and 1 share a track AND a child cluster: the closure reaches
        // (0,0), (1,1) and (1,0), all of which must fold into (0,1).
        let g = test_graph(2, &[vec![0, 1]], &[vec![0, 1]]);
        let pairs = transitive_pairs(&g);
        assert_eq!(keys(&pairs), vec![(0, 1)]);
        assert_eq!(pairs[0].relation, PairRelation::Inter);
    }

    #[test]
    fn closure_matches_cartesian_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n: usize = rng.random_range(25..60);
            // Disjoint chains over a shuffled node list.
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.shuffle(&mut rng);
            let mut tracks = Vec::new();
            let mut rest = order.as_slice();
            while !rest.is_empty() {
                let len = rng.random_range(1..=4.min(rest.len()));
                if len >= 2 {
                    tracks.push(rest[..len].to_vec());
                }
                rest = &rest[len..];
            }
            // Random child clusters of size 2-4. The helper assigns each
            // list its own parent, so lists must not share members; tracks
            // may overlap them freely.
            let mut pool: Vec<u32> = (0..n as u32).collect();
            pool.shuffle(&mut rng);
            let mut pool = pool.as_slice();
            let n_children = rng.random_range(1..6);
            let mut children = Vec::new();
            for _ in 0..n_children {
                if pool.len() < 2 {
                    break;
                }
                let size = rng.random_range(2..=4.min(pool.len()));
                let mut members = pool[..size].to_vec();
                members.sort_unstable();
                children.push(members);
                pool = &pool[size..];
            }
            let g = test_graph(n, &children, &tracks);

            let mut expect: BTreeSet<(u32, u32)> = BTreeSet::new();
            for e in g.inter_edges() {
                let mut ext_a = vec![e.a];
                ext_a.extend_from_slice(g.intra_partners(e.a).unwrap());
                let mut ext_b = vec![e.b];
                ext_b.extend_from_slice(g.intra_partners(e.b).unwrap());
                for &x in &ext_a {
                    for &y in &ext_b {
                        if x != y {
                            expect.insert(if x < y { (x, y) } else { (y, x) });
                        }
                    }
                }
            }
            let got = transitive_pairs(&g);
            let got_keys: BTreeSet<(u32, u32)> = keys(&got).into_iter().collect();
            assert_eq!(got_keys, expect, "trial {trial}");
            assert_eq!(got.len(), got_keys.len(), "no duplicates (trial {trial})");
        }
    }

    #[test]
    fn intra_sampling_edge_cases() {
        let cfg = PairGenConfig::default();
        let g = test_graph(4, &[vec![0, 1]], &[vec![2, 3]]);
        assert!(sample_intra_pairs(&g, &cfg, 0).unwrap().is_empty());
        let five = sample_intra_pairs(&g, &cfg, 5).unwrap();
        assert_eq!(five.len(), 5);
        for p in &five {
            assert_eq!((p.a, p.b, p.relation), (2, 3, PairRelation::Intra));
        }
        let no_intra = test_graph(2, &[vec![0, 1]], &[]);
        assert!(matches!(
            sample_intra_pairs(&no_intra, &cfg, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn intra_sampling_is_near_uniform() {
        // One 101-node chain: intra edges (i, i+1) for i in 0..100.
        let chain: Vec<u32> = (0..101).collect();
        let g = test_graph(101, &[], &[chain]);
        let cfg = PairGenConfig {
            seed: 9,
            ..Default::default()
        };
        let draws = 10_000usize;
        let sample = sample_intra_pairs(&g, &cfg, draws).unwrap();
        let mut counts = vec![0usize; 100];
        for p in &sample {
            counts[p.a as usize] += 1;
        }
        // Aggregate goodness of fit: chi-square over 100 cells has mean 99
        // and sd ~14 under uniformity; individual 3-sigma cell checks would
        // false-alarm too often across 100 comparisons.
        let expected = draws as f64 / 100.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 99.0 + 5.0 * 14.0, "chi-square {chi2}");
        // Loose per-edge sanity: 5 sigma.
        let sigma = (draws as f64 * 0.01 * 0.99).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() < 5.0 * sigma,
                "edge {i} drawn {c} times"
            );
        }
    }

    #[test]
    fn intra_target_examples() {
        assert_eq!(intra_target(7, 2.0 / 9.0), 2);
        assert_eq!(intra_target(70, 0.3), 30);
        assert_eq!(intra_target(100, 0.0), 0);
    }

    #[test]
    fn assemble_counts_and_determinism() {
        let transitive: Vec<PositivePair> = (0..7)
            .map(|i| PositivePair::new(i, i + 100, PairRelation::Inter).unwrap())
            .collect();
        let intra: Vec<PositivePair> = (0..5)
            .map(|i| PositivePair::new(i + 50, i + 60, PairRelation::Intra).unwrap())
            .collect();
        let cfg = PairGenConfig {
            intra_ratio: 2.0 / 9.0,
            seed: 77,
        };
        let out = assemble_pairs(&transitive, &intra, &cfg).unwrap();
        assert_eq!(out.len(), 9);
        let n_intra = out
            .iter()
            .filter(|p| p.relation == PairRelation::Intra)
            .count();
        assert_eq!(n_intra, 2);
        assert_eq!(out, assemble_pairs(&transitive, &intra, &cfg).unwrap());

        // Short on intra pairs: take what is there.
        let out = assemble_pairs(&transitive, &intra[..1], &cfg).unwrap();
        assert_eq!(out.len(), 8);

        let bad = PairGenConfig {
            intra_ratio: 1.0,
            seed: 0,
        };
        assert!(matches!(
            assemble_pairs(&transitive, &intra, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn union_mode_is_inter_plus_intra() {
        let g = test_graph(6, &[vec![0, 1, 2]], &[vec![3, 4, 5]]);
        let cfg = PairGenConfig::default();
        let union = pairs_for_mode(&g, PairMode::Union, &cfg).unwrap();
        assert_eq!(union.len(), 5); // 3 inter + 2 intra
        let intra = pairs_for_mode(&g, PairMode::IntraOnly, &cfg).unwrap();
        assert_eq!(intra.len(), 2);
        let inter = pairs_for_mode(&g, PairMode::InterOnly, &cfg).unwrap();
        assert_eq!(inter.len(), 3);
        assert!(inter.iter().all(|p| p.relation == PairRelation::Inter));
    }

    #[test]
    fn transitive_mode_hits_ratio() {
        // 3 inter edges with no partners -> 3 transitive pairs; ratio 0.25
        // wants 1 intra pair.
        let g = test_graph(8, &[vec![0, 1], vec![2, 3], vec![4, 5]], &[vec![6, 7]]);
        let cfg = PairGenConfig {
            intra_ratio: 0.25,
            seed: 5,
        };
        let pairs = pairs_for_mode(&g, PairMode::Transitive, &cfg).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(
            pairs
                .iter()
                .filter(|p| p.relation == PairRelation::Intra)
                .count(),
            1
        );
    }

    #[test]
    fn pairs_file_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = vec![
            PositivePair::new(3, 1, PairRelation::TrackedBoth).unwrap(),
            PositivePair::new(0, 9, PairRelation::Intra).unwrap(),
        ];
        assert_eq!(pairs[0].a, 1, "constructor canonicalizes order");
        save_pairs(&pairs, &path).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), pairs);
    }

    #[test]
    fn degenerate_pair_rejected() {
        assert!(PositivePair::new(4, 4, PairRelation::Inter).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        std::fs::write(&path, "{\"a\":4,\"b\":4,\"relation\":\"inter\"}\n").unwrap();
        assert!(matches!(
            load_pairs(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
