//! Batch stream of training triplets.
//!
//! Every epoch shuffles the pair list, partitions it into batches, flips a
//! coin per pair for the anchor/positive roles, and draws each negative
//! uniformly from the other pairs' nodes in the same batch whose parent
//! cluster differs from the anchor's. Pairs whose anchor was pruned from
//! the clustering draw instead from the global pool of assigned nodes.
//!
//! Hard guarantee on every emitted triplet: parent(negative) differs from
//! parent(anchor), and the three nodes are pairwise distinct.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::transitivity::{PairRelation, PositivePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: u32,
    pub positive: u32,
    pub negative: u32,
    pub relation: PairRelation,
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 100,
            seed: 0,
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} is too small, need at least 2",
                self.batch_size
            )));
        }
        Ok(())
    }
}

const EPOCH_TAG: u64 = 0x6570_6f63_68;
/// Epoch replans before giving up on an infeasible pair set.
const MAX_RETRIES: u64 = 32;

/// Batch sizes for one epoch. Every pair lands in exactly one batch; a
/// remainder of 1 is absorbed into the last full batch because a 1-pair
/// batch has no other pair to donate a negative.
pub fn batch_sizes(n_pairs: usize, batch_size: usize) -> Vec<usize> {
    let full = n_pairs / batch_size;
    let rem = n_pairs % batch_size;
    let mut sizes = vec![batch_size; full];
    match rem {
        0 => {}
        1 => match sizes.last_mut() {
            Some(last) => *last += 1,
            None => sizes.push(1),
        },
        r => sizes.push(r),
    }
    sizes
}

pub struct TripletStream<'a> {
    pairs: &'a [PositivePair],
    parent_of: &'a [Option<u32>],
    global_pool: Vec<u32>,
    cfg: BatchConfig,
    epoch: u64,
    plan: Vec<Vec<Triplet>>,
    cursor: usize,
    resamples: u64,
}

impl<'a> TripletStream<'a> {
    pub fn new(
        pairs: &'a [PositivePair],
        parent_of: &'a [Option<u32>],
        cfg: BatchConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if pairs.len() < 2 {
            return Err(Error::Validation(format!(
                "{} pair(s) cannot support in-batch negatives, need at least 2",
                pairs.len()
            )));
        }
        let n = parent_of.len();
        let mut parents_seen = Vec::new();
        let mut any_unassigned_endpoint = false;
        for pair in pairs {
            for node in [pair.a, pair.b] {
                if node as usize >= n {
                    return Err(Error::UnknownNode { id: node, n });
                }
                match parent_of[node as usize] {
                    Some(p) => parents_seen.push(p),
                    None => any_unassigned_endpoint = true,
                }
            }
            if pair.a == pair.b {
                return Err(Error::Validation(format!(
                    "pair links node {} to itself",
                    pair.a
                )));
            }
        }
        parents_seen.sort_unstable();
        parents_seen.dedup();
        if !parents_seen.is_empty() && parents_seen.len() < 2 {
            return Err(Error::Validation(
                "all assigned pair endpoints share one parent cluster; \
                 negatives require at least two"
                    .into(),
            ));
        }
        let global_pool: Vec<u32> = (0..n as u32)
            .filter(|&i| parent_of[i as usize].is_some())
            .collect();
        if any_unassigned_endpoint && global_pool.len() < 2 {
            return Err(Error::Validation(
                "pairs have unassigned endpoints but the assigned-node pool \
                 is too small to supply negatives"
                    .into(),
            ));
        }

        let mut stream = TripletStream {
            pairs,
            parent_of,
            global_pool,
            cfg,
            epoch: 0,
            plan: Vec::new(),
            cursor: 0,
            resamples: 0,
        };
        stream.plan = stream.plan_epoch(0)?;
        Ok(stream)
    }

    /// Epoch replans forced by batches whose pairs all shared one parent.
    pub fn resamples(&self) -> u64 {
        self.resamples
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.plan.len()
    }

    fn plan_epoch(&mut self, epoch: u64) -> Result<Vec<Vec<Triplet>>> {
        let epoch_seed = derive_seed(self.cfg.seed, EPOCH_TAG.wrapping_add(epoch));
        for attempt in 0..MAX_RETRIES {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, attempt));
            let mut order: Vec<usize> = (0..self.pairs.len()).collect();
            order.shuffle(&mut rng);

            let mut batches = Vec::new();
            let mut start = 0;
            let mut feasible = true;
            for size in batch_sizes(self.pairs.len(), self.cfg.batch_size) {
                let members = &order[start..start + size];
                start += size;
                match self.fill_batch(&mut rng, members) {
                    Some(batch) => batches.push(batch),
                    None => {
                        feasible = false;
                        break;
                    }
                }
            }
            if feasible {
                return Ok(batches);
            }
            self.resamples += 1;
        }
        Err(Error::Validation(format!(
            "no feasible batch composition after {MAX_RETRIES} attempts; \
             parent clusters are too imbalanced for batch_size {}",
            self.cfg.batch_size
        )))
    }

    /// One batch worth of triplets, or None if some pair found no legal
    /// negative under this composition.
    fn fill_batch(&self, rng: &mut ChaCha8Rng, members: &[usize]) -> Option<Vec<Triplet>> {
        let mut batch = Vec::with_capacity(members.len());
        let mut candidates = Vec::new();
        for (k, &pi) in members.iter().enumerate() {
            let pair = &self.pairs[pi];
            let (anchor, positive) = if rng.random::<bool>() {
                (pair.a, pair.b)
            } else {
                (pair.b, pair.a)
            };
            candidates.clear();
            match self.parent_of[anchor as usize] {
                Some(p) => {
                    for (j, &pj) in members.iter().enumerate() {
                        if j == k {
                            continue;
                        }
                        let other = &self.pairs[pj];
                        for node in [other.a, other.b] {
                            if node == anchor || node == positive {
                                continue;
                            }
                            match self.parent_of[node as usize] {
                                Some(q) if q != p => candidates.push(node),
                                _ => {}
                            }
                        }
                    }
                }
                None => {
                    candidates.extend(
                        self.global_pool
                            .iter()
                            .copied()
                            .filter(|&node| node != anchor && node != positive),
                    );
                }
            }
            candidates.sort_unstable();
            candidates.dedup();
            if candidates.is_empty() {
                return None;
            }
            let negative = candidates[rng.random_range(0..candidates.len())];
            batch.push(Triplet {
                anchor,
                positive,
                negative,
                relation: pair.relation,
            });
        }
        Some(batch)
    }
}

impl Iterator for TripletStream<'_> {
    type Item = Result<Vec<Triplet>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor == self.plan.len() {
            self.epoch += 1;
            self.cursor = 0;
            match self.plan_epoch(self.epoch) {
                Ok(plan) => self.plan = plan,
                Err(e) => return Some(Err(e)),
            }
        }
        let batch = self.plan[self.cursor].clone();
        self.cursor += 1;
        Some(Ok(batch))
    }
}

pub fn save_triplets(triplets: &[Triplet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Triplet = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if t.anchor == t.positive || t.anchor == t.negative || t.positive == t.negative {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!(
                    "triplet ({},{},{}) repeats a node",
                    t.anchor, t.positive, t.negative
                ),
            });
        }
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn pair(a: u32, b: u32) -> PositivePair {
        PositivePair::new(a, b, PairRelation::Inter).unwrap()
    }

    /// parent_of where node i belongs to parent i / per_parent.
    fn blocks(n: usize, per_parent: usize) -> Vec<Option<u32>> {
        (0..n).map(|i| Some((i / per_parent) as u32)).collect()
    }

    #[test]
    fn batch_size_partitions() {
        assert_eq!(batch_sizes(23, 10), vec![10, 10, 3]);
        assert_eq!(batch_sizes(20, 10), vec![10, 10]);
        assert_eq!(batch_sizes(21, 10), vec![10, 11]);
        assert_eq!(batch_sizes(5, 10), vec![5]);
        assert_eq!(batch_sizes(7, 2), vec![2, 2, 3]);
        assert_eq!(batch_sizes(1, 10), vec![1]);
    }

    #[test]
    fn two_pairs_two_parents_forces_the_other_pair() {
        // Pair (0,1) in parent 0, pair (2,3) in parent 1.
        let pairs = vec![pair(0, 1), pair(2, 3)];
        let parent_of = blocks(4, 2);
        let cfg = BatchConfig {
            batch_size: 2,
            seed: 1,
        };
        let mut stream = TripletStream::new(&pairs, &parent_of, cfg).unwrap();
        for _ in 0..20 {
            let batch = stream.next().unwrap().unwrap();
            assert_eq!(batch.len(), 2);
            for t in batch {
                let own = [t.anchor, t.positive];
                assert!(!own.contains(&t.negative));
                if own.contains(&0) {
                    assert!([2, 3].contains(&t.negative));
                } else {
                    assert!([0, 1].contains(&t.negative));
                }
            }
        }
    }

    #[test]
    fn constraint_and_distinctness_hold_across_stream() {
        // 30 pairs over 6 parents of 10 nodes each.
        let parent_of = blocks(60, 10);
        let pairs: Vec<PositivePair> = (0..30).map(|i| pair(2 * i, 2 * i + 1)).collect();
        let cfg = BatchConfig {
            batch_size: 7,
            seed: 3,
        };
        let stream = TripletStream::new(&pairs, &parent_of, cfg).unwrap();
        let mut seen = 0;
        for batch in stream.take(200) {
            for t in batch.unwrap() {
                assert_ne!(
                    parent_of[t.anchor as usize], parent_of[t.negative as usize],
                    "negative shares the anchor's parent"
                );
                assert!(parent_of[t.negative as usize].is_some());
                assert_ne!(t.anchor, t.positive);
                assert_ne!(t.anchor, t.negative);
                assert_ne!(t.positive, t.negative);
                seen += 1;
            }
        }
        // 200 batches = 40 epochs of 5 batches, 30 triplets per epoch.
        assert_eq!(seen, 40 * 30);
    }

    #[test]
    fn epoch_covers_every_pair_exactly_once() {
        let parent_of = blocks(40, 5);
        let pairs: Vec<PositivePair> = (0..17).map(|i| pair(2 * i, 2 * i + 1)).collect();
        let cfg = BatchConfig {
            batch_size: 5,
            seed: 8,
        };
        let mut stream = TripletStream::new(&pairs, &parent_of, cfg).unwrap();
        assert_eq!(stream.batches_per_epoch(), 4); // 5 + 5 + 5 + 2
        for epoch in 0..3 {
            let mut seen: Vec<(u32, u32)> = Vec::new();
            for _ in 0..4 {
                for t in stream.next().unwrap().unwrap() {
                    let key = if t.anchor < t.positive {
                        (t.anchor, t.positive)
                    } else {
                        (t.positive, t.anchor)
                    };
                    seen.push(key);
                }
            }
            seen.sort_unstable();
            let expect: Vec<(u32, u32)> = (0..17).map(|i| (2 * i, 2 * i + 1)).collect();
            assert_eq!(seen, expect, "epoch {epoch}");
        }
    }

    #[test]
    fn roles_are_randomized() {
        let parent_of = blocks(40, 5);
        let pairs: Vec<PositivePair> = (0..17).map(|i| pair(2 * i, 2 * i + 1)).collect();
        let cfg = BatchConfig {
            batch_size: 5,
            seed: 8,
        };
        let stream = TripletStream::new(&pairs, &parent_of, cfg).unwrap();
        let mut anchor_was_a = 0usize;
        let mut total = 0usize;
        for batch in stream.take(40) {
            for t in batch.unwrap() {
                if t.anchor < t.positive {
                    anchor_was_a += 1;
                }
                total += 1;
            }
        }
        // Fair coin over 170 flips (17 pairs, 10 epochs), allow 4 sigma.
        let dev = (anchor_was_a as f64 - total as f64 / 2.0).abs();
        assert!(dev < 4.0 * (total as f64 * 0.25).sqrt(), "deviation {dev}");
    }

    #[test]
    fn same_seed_same_stream() {
        let parent_of = blocks(30, 6);
        let pairs: Vec<PositivePair> = (0..12).map(|i| pair(2 * i, 2 * i + 1)).collect();
        let cfg = BatchConfig {
            batch_size: 4,
            seed: 5,
        };
        let a: Vec<_> = TripletStream::new(&pairs, &parent_of, cfg.clone())
            .unwrap()
            .take(10)
            .map(|b| b.unwrap())
            .collect();
        let b: Vec<_> = TripletStream::new(&pairs, &parent_of, cfg)
            .unwrap()
            .take(10)
            .map(|b| b.unwrap())
            .collect();
        assert_eq!(a, b);
        let other: Vec<_> = TripletStream::new(
            &pairs,
            &parent_of,
            BatchConfig {
                batch_size: 4,
                seed: 6,
            },
        )
        .unwrap()
        .take(10)
        .map(|b| b.unwrap())
        .collect();
        assert_ne!(a, other);
    }

    #[test]
    fn unassigned_anchor_draws_from_global_pool() {
        // Pair endpoints 0..4 all unassigned; nodes 10..20 assigned.
        let mut parent_of = vec![None; 20];
        for i in 10..20 {
            parent_of[i] = Some((i / 5) as u32);
        }
        let pairs = vec![pair(0, 1), pair(2, 3)];
        let cfg = BatchConfig {
            batch_size: 2,
            seed: 2,
        };
        let stream = TripletStream::new(&pairs, &parent_of, cfg).unwrap();
        for batch in stream.take(50) {
            for t in batch.unwrap() {
                assert!(t.negative >= 10);
                assert!(parent_of[t.negative as usize].is_some());
            }
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let parent_of = blocks(10, 2);
        let one = vec![pair(0, 1)];
        assert!(TripletStream::new(&one, &parent_of, BatchConfig::default()).is_err());

        let pairs = vec![pair(0, 1), pair(2, 3)];
        let bad_cfg = BatchConfig {
            batch_size: 1,
            seed: 0,
        };
        assert!(matches!(
            TripletStream::new(&pairs, &parent_of, bad_cfg),
            Err(Error::Config(_))
        ));

        // All endpoints in one parent: no negative can ever exist.
        let single = vec![Some(0u32); 10];
        assert!(matches!(
            TripletStream::new(&pairs, &single, BatchConfig { batch_size: 2, seed: 0 }),
            Err(Error::Validation(_))
        ));

        let out_of_range = vec![pair(0, 99), pair(2, 3)];
        assert!(matches!(
            TripletStream::new(&out_of_range, &parent_of, BatchConfig::default()),
            Err(Error::UnknownNode { .. })
        ));
    }

    #[test]
    fn impossible_composition_errors_after_recorded_retries() {
        // Four pairs confined to parent 0, one pair in parent 1, batches
        // of 2: some batch is always parent-0-only, so every replan fails.
        let mut parent_of = vec![Some(0u32); 12];
        parent_of[10] = Some(1);
        parent_of[11] = Some(1);
        let pairs = vec![pair(0, 1), pair(2, 3), pair(4, 5), pair(6, 7), pair(10, 11)];
        let cfg = BatchConfig {
            batch_size: 2,
            seed: 0,
        };
        match TripletStream::new(&pairs, &parent_of, cfg) {
            Err(Error::Validation(msg)) => assert!(msg.contains("batch")),
            other => panic!("expected infeasibility error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn negative_parents_match_in_batch_availability() {
        // Counting oracle: reconstruct each triplet's candidate pool from
        // the emitted batch and compare parent frequencies in expectation.
        let parent_of = blocks(50, 10);
        let pairs: Vec<PositivePair> = (0..25).map(|i| pair(2 * i, 2 * i + 1)).collect();
        let cfg = BatchConfig {
            batch_size: 5,
            seed: 13,
        };
        let stream = TripletStream::new(&pairs, &parent_of, cfg).unwrap();
        let mut actual: BTreeMap<u32, f64> = BTreeMap::new();
        let mut expected: BTreeMap<u32, f64> = BTreeMap::new();
        let mut variance: BTreeMap<u32, f64> = BTreeMap::new();
        for batch in stream.take(400) {
            let batch = batch.unwrap();
            for (k, t) in batch.iter().enumerate() {
                let p = parent_of[t.anchor as usize].unwrap();
                let mut pool: Vec<u32> = batch
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .flat_map(|(_, o)| {
                        // The emitted pair is (anchor, positive) in some order.
                        [o.anchor, o.positive]
                    })
                    .filter(|&node| {
                        node != t.anchor
                            && node != t.positive
                            && parent_of[node as usize].is_some_and(|q| q != p)
                    })
                    .collect();
                pool.sort_unstable();
                pool.dedup();
                assert!(pool.contains(&t.negative));
                *actual.entry(parent_of[t.negative as usize].unwrap()).or_default() += 1.0;
                for &node in &pool {
                    let q = parent_of[node as usize].unwrap();
                    let prob = 1.0 / pool.len() as f64;
                    *expected.entry(q).or_default() += prob;
                    *variance.entry(q).or_default() += prob * (1.0 - prob);
                }
            }
        }
        for (parent, &exp) in &expected {
            let act = actual.get(parent).copied().unwrap_or(0.0);
            let sigma = variance[parent].sqrt();
            assert!(
                (act - exp).abs() <= 3.0 * sigma + 1.0,
                "parent {parent}: actual {act}, expected {exp:.1}, sigma {sigma:.1}"
            );
        }
    }

    #[test]
    fn triplet_file_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triplets.jsonl");
        let triplets = vec![
            Triplet {
                anchor: 1,
                positive: 2,
                negative: 3,
                relation: PairRelation::TrackedBoth,
            },
            Triplet {
                anchor: 9,
                positive: 0,
                negative: 4,
                relation: PairRelation::Intra,
            },
        ];
        save_triplets(&triplets, &path).unwrap();
        assert_eq!(load_triplets(&path).unwrap(), triplets);

        std::fs::write(&path, "{\"anchor\":1,\"positive\":1,\"negative\":2,\"relation\":\"inter\"}\n")
            .unwrap();
        assert!(matches!(
            load_triplets(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
