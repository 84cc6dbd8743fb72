//! Synthetic corpus with known categories, instances, and views.
//!
//! Node features are built as normalize(R_view(prototype + instance
//! offset) + noise). Category prototypes are blends between a shared
//! direction and C orthonormal axes, so `category_separation` = 1 means
//! mutually orthogonal categories. Each view applies its own orthogonal
//! map: rotations by `view_distortion` radians in a seeded set of
//! disjoint coordinate planes covering about half the dimensions (view 0
//! is the identity). The untouched half is view-invariant, so a linear
//! embedding can in principle restore cross-view alignment by projecting
//! onto it. With no noise, cos(view 0, view v) = E_inv + cos(theta)*E_rot
//! where E_inv/E_rot split the unit vector's energy across the two
//! subspaces; the cosine always lies in [cos(theta), 1].
//!
//! Views of one instance share a track id with consecutive frame indices;
//! instance ids are global (category-major).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureStore, MetaRecord, NodeMeta};
use crate::matrix::Matrix;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_categories: usize,
    pub instances_per_category: usize,
    pub views_per_instance: usize,
    pub d_in: usize,
    /// 0 = all categories share one prototype direction, 1 = orthonormal.
    pub category_separation: f64,
    /// Scale of the per-instance offset and the per-node jitter.
    pub instance_noise: f64,
    /// Rotation angle (radians) of each view's distortion map.
    pub view_distortion: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_categories: 4,
            instances_per_category: 8,
            views_per_instance: 2,
            d_in: 32,
            category_separation: 1.0,
            instance_noise: 0.1,
            view_distortion: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0
            || self.instances_per_category == 0
            || self.views_per_instance == 0
            || self.d_in == 0
        {
            return Err(Error::Config("all synth counts must be at least 1".into()));
        }
        if self.d_in < self.n_categories {
            return Err(Error::Config(format!(
                "d_in {} cannot hold {} orthonormal category directions",
                self.d_in, self.n_categories
            )));
        }
        if !self.category_separation.is_finite()
            || !(0.0..=1.0).contains(&self.category_separation)
        {
            return Err(Error::Config(format!(
                "category_separation {} must lie in [0, 1]",
                self.category_separation
            )));
        }
        for (name, v) in [
            ("instance_noise", self.instance_noise),
            ("view_distortion", self.view_distortion),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_categories * self.instances_per_category * self.views_per_instance
    }

    pub fn n_instances(&self) -> usize {
        self.n_categories * self.instances_per_category
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub node: u32,
    pub category: u32,
    pub instance: u32,
    pub view: u32,
}

/// Per-node labels, dense by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    records: Vec<GroundTruthRecord>,
}

impl GroundTruth {
    pub fn new(records: Vec<GroundTruthRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.node as usize != i {
                return Err(Error::Validation(format!(
                    "ground-truth record {i} labels node {}, expected dense ids",
                    r.node
                )));
            }
        }
        Ok(GroundTruth { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[GroundTruthRecord] {
        &self.records
    }

    pub fn get(&self, node: u32) -> Result<&GroundTruthRecord> {
        self.records.get(node as usize).ok_or(Error::UnknownNode {
            id: node,
            n: self.records.len(),
        })
    }

    pub fn category_of(&self, node: u32) -> Result<u32> {
        Ok(self.get(node)?.category)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: GroundTruthRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
            records.push(r);
        }
        GroundTruth::new(records)
    }
}

const PROTO_TAG: u64 = 0x73796e_70726f74;
const INSTANCE_TAG: u64 = 0x73796e_696e7374;
const VIEW_TAG: u64 = 0x73796e_76696577;

/// Standard normal draws via the Box-Muller transform.
fn gauss_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d + 1);
    while out.len() < d {
        let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = std::f64::consts::TAU * u2;
        out.push(r * phi.cos());
        out.push(r * phi.sin());
    }
    out.truncate(d);
    out
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::ZeroVector);
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

/// C orthonormal directions via Gram-Schmidt over Gaussian draws.
fn orthonormal_axes(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Vec<Vec<f64>> {
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(c);
    while axes.len() < c {
        let mut v = gauss_vec(rng, d);
        for prev in &axes {
            let proj: f64 = v.iter().zip(prev).map(|(&a, &b)| a * b).sum();
            for (x, &p) in v.iter_mut().zip(prev) {
                *x -= proj * p;
            }
        }
        if normalize(&mut v).is_ok() {
            axes.push(v);
        }
        // A linearly dependent draw (norm ~ 0 after projection) is simply
        // redrawn; with d >= c this terminates immediately in practice.
    }
    axes
}

/// Rotation in a seeded set of disjoint coordinate planes covering about
/// half the dimensions; the rest pass through. View 0 is identity.
struct ViewMap {
    planes: Vec<(usize, usize)>,
    cos: f64,
    sin: f64,
}

impl ViewMap {
    fn new(seed: u64, view: usize, d: usize, angle: f64) -> ViewMap {
        if view == 0 || angle == 0.0 || d < 2 {
            return ViewMap {
                planes: Vec::new(),
                cos: 1.0,
                sin: 0.0,
            };
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, VIEW_TAG.wrapping_add(view as u64)));
        let mut coords: Vec<usize> = (0..d).collect();
        use rand::seq::SliceRandom;
        coords.shuffle(&mut rng);
        // ceil(d/4) planes touch at most half the coordinates, but at
        // least one plane so the distortion is never a no-op.
        let n_planes = (d / 2).div_ceil(2).max(1).min(d / 2);
        let planes = coords
            .chunks_exact(2)
            .take(n_planes)
            .map(|c| (c[0], c[1]))
            .collect();
        ViewMap {
            planes,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn apply(&self, v: &mut [f64]) {
        for &(i, j) in &self.planes {
            let (a, b) = (v[i], v[j]);
            v[i] = a * self.cos - b * self.sin;
            v[j] = a * self.sin + b * self.cos;
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<(FeatureStore, NodeMeta, GroundTruth)> {
    cfg.validate()?;
    let d = cfg.d_in;
    let c_count = cfg.n_categories;
    let s = cfg.category_separation;

    let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, PROTO_TAG));
    let axes = orthonormal_axes(&mut proto_rng, c_count, d);
    let mut shared = vec![0.0f64; d];
    for axis in &axes {
        for (sh, &a) in shared.iter_mut().zip(axis) {
            *sh += a;
        }
    }
    normalize(&mut shared)?;
    let mut prototypes = Vec::with_capacity(c_count);
    for axis in &axes {
        let mut p: Vec<f64> = shared
            .iter()
            .zip(axis)
            .map(|(&sh, &a)| (1.0 - s) * sh + s * a)
            .collect();
        normalize(&mut p)?;
        prototypes.push(p);
    }

    let views: Vec<ViewMap> = (0..cfg.views_per_instance)
        .map(|v| ViewMap::new(cfg.seed, v, d, cfg.view_distortion))
        .collect();

    let n = cfg.n_nodes();
    let mut data = Matrix::zeros(n, d);
    let mut meta = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    let mut inst_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INSTANCE_TAG));
    let noise_scale = cfg.instance_noise / (d as f64).sqrt();

    let mut node = 0u32;
    for c in 0..c_count {
        for i in 0..cfg.instances_per_category {
            let instance = (c * cfg.instances_per_category + i) as u32;
            let offset = gauss_vec(&mut inst_rng, d);
            let base: Vec<f64> = prototypes[c]
                .iter()
                .zip(&offset)
                .map(|(&p, &o)| p + o * noise_scale)
                .collect();
            for (v, view) in views.iter().enumerate() {
                let mut x = base.clone();
                view.apply(&mut x);
                let jitter = gauss_vec(&mut inst_rng, d);
                for (xi, &j) in x.iter_mut().zip(&jitter) {
                    *xi += j * noise_scale;
                }
                normalize(&mut x)?;
                for (out, &xi) in data.row_mut(node as usize).iter_mut().zip(&x) {
                    *out = xi as f32;
                }
                meta.push(MetaRecord {
                    node,
                    video: format!("vid{instance:05}"),
                    track: format!("trk{instance:05}"),
                    frame: v as u32,
                });
                gt.push(GroundTruthRecord {
                    node,
                    category: c as u32,
                    instance,
                    view: v as u32,
                });
                node += 1;
            }
        }
    }

    let store = FeatureStore::from_matrix(data)?;
    let meta = NodeMeta::new(meta)?;
    let gt = GroundTruth::new(gt)?;
    Ok((store, meta, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn counts_match_config() {
        let cfg = SynthConfig {
            n_categories: 3,
            instances_per_category: 4,
            views_per_instance: 2,
            d_in: 8,
            ..Default::default()
        };
        let (store, meta, gt) = generate(&cfg).unwrap();
        assert_eq!(store.n(), 24);
        assert_eq!(store.dim(), 8);
        assert_eq!(gt.len(), 24);
        let tracks = crate::graph::tracks_from_meta(&meta);
        assert_eq!(tracks.len(), 12, "one track per instance");
        assert!(tracks.iter().all(|t| t.len() == 2));
    }

    #[test]
    fn clean_config_gives_identical_views() {
        let cfg = SynthConfig {
            n_categories: 2,
            instances_per_category: 3,
            views_per_instance: 3,
            d_in: 6,
            category_separation: 1.0,
            instance_noise: 0.0,
            view_distortion: 0.0,
            seed: 4,
        };
        let (store, _, gt) = generate(&cfg).unwrap();
        for inst in 0..6u32 {
            let nodes: Vec<u32> = gt
                .records()
                .iter()
                .filter(|r| r.instance == inst)
                .map(|r| r.node)
                .collect();
            assert_eq!(nodes.len(), 3);
            let first = store.feature(nodes[0]).unwrap();
            for &other in &nodes[1..] {
                assert_eq!(store.feature(other).unwrap(), first, "bitwise equal views");
            }
        }
    }

    #[test]
    fn orthogonal_categories_sit_at_distance_one() {
        let cfg = SynthConfig {
            n_categories: 2,
            instances_per_category: 2,
            views_per_instance: 2,
            d_in: 8,
            category_separation: 1.0,
            instance_noise: 0.0,
            view_distortion: 0.0,
            seed: 7,
        };
        let (store, _, gt) = generate(&cfg).unwrap();
        for a in gt.records() {
            for b in gt.records() {
                let c = cos(
                    store.feature(a.node).unwrap(),
                    store.feature(b.node).unwrap(),
                );
                if a.category == b.category {
                    assert!((c - 1.0).abs() < 1e-6);
                } else {
                    assert!(c.abs() < 1e-6, "cross-category cosine {c}");
                }
            }
        }
    }

    #[test]
    fn view_map_rotates_half_the_coordinates() {
        for d in [4usize, 8, 9, 64] {
            let theta = 0.9f64;
            let map = ViewMap::new(3, 1, d, theta);
            assert_eq!(map.planes.len(), (d / 2).div_ceil(2));
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut x = gauss_vec(&mut rng, d);
            normalize(&mut x).unwrap();
            let before = x.clone();
            map.apply(&mut x);
            let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "rotation preserves norm");
            // cos(x, Rx) = E_inv + cos(theta) * E_rot, from the energy in
            // the rotated planes.
            let e_rot: f64 = map
                .planes
                .iter()
                .map(|&(i, j)| before[i] * before[i] + before[j] * before[j])
                .sum();
            let expected = (1.0 - e_rot) + theta.cos() * e_rot;
            let got: f64 = x.iter().zip(&before).map(|(&a, &b)| a * b).sum();
            assert!((got - expected).abs() < 1e-12, "d={d}: {got} vs {expected}");
        }
    }

    #[test]
    fn cross_view_cosine_tracks_the_rotation_angle() {
        // No noise: cos(view0, view_v) in [cos(theta), 1], and the mean
        // cross-view distance grows with theta.
        let mut last_distance = -1.0f64;
        for theta in [0.3, 0.6, 1.0, 1.4] {
            let cfg = SynthConfig {
                n_categories: 2,
                instances_per_category: 4,
                views_per_instance: 2,
                d_in: 8,
                category_separation: 1.0,
                instance_noise: 0.0,
                view_distortion: theta,
                seed: 11,
            };
            let (store, _, gt) = generate(&cfg).unwrap();
            let mut mean = 0.0;
            let mut count = 0;
            for inst in 0..8u32 {
                let nodes: Vec<u32> = gt
                    .records()
                    .iter()
                    .filter(|r| r.instance == inst)
                    .map(|r| r.node)
                    .collect();
                let c = cos(
                    store.feature(nodes[0]).unwrap(),
                    store.feature(nodes[1]).unwrap(),
                );
                assert!(
                    c >= theta.cos() - 1e-5 && c <= 1.0 + 1e-9,
                    "theta {theta}: cosine {c} outside [cos theta, 1]"
                );
                mean += 1.0 - c;
                count += 1;
            }
            mean /= count as f64;
            assert!(mean > last_distance, "distance must grow with theta");
            last_distance = mean;
        }
    }

    #[test]
    fn kmeans_recovers_clean_categories() {
        let cfg = SynthConfig {
            n_categories: 4,
            instances_per_category: 5,
            views_per_instance: 2,
            d_in: 8,
            category_separation: 1.0,
            instance_noise: 0.0,
            view_distortion: 0.0,
            seed: 2,
        };
        let (store, _, gt) = generate(&cfg).unwrap();
        let res = crate::clustering::spherical_kmeans(
            store.matrix(),
            &crate::clustering::KMeansConfig {
                k: 4,
                max_iters: 50,
                tol: 0.0,
                seed: 5,
            },
        )
        .unwrap();
        // Category -> cluster must be a bijection.
        let mut map = std::collections::BTreeMap::new();
        for r in gt.records() {
            let cluster = res.assignments[r.node as usize];
            let entry = map.entry(r.category).or_insert(cluster);
            assert_eq!(*entry, cluster, "category {} split", r.category);
        }
        let mut clusters: Vec<u32> = map.values().copied().collect();
        clusters.sort_unstable();
        clusters.dedup();
        assert_eq!(clusters.len(), 4);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let (a, ma, ga) = generate(&cfg).unwrap();
        let (b, mb, gb) = generate(&cfg).unwrap();
        assert_eq!(a.matrix().data(), b.matrix().data());
        assert_eq!(ma.records(), mb.records());
        assert_eq!(ga, gb);
    }

    #[test]
    fn ground_truth_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.jsonl");
        let (_, _, gt) = generate(&SynthConfig::default()).unwrap();
        gt.save(&path).unwrap();
        assert_eq!(GroundTruth::load(&path).unwrap(), gt);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let too_narrow = SynthConfig {
            n_categories: 8,
            d_in: 4,
            ..Default::default()
        };
        assert!(matches!(generate(&too_narrow), Err(Error::Config(_))));
        let zero = SynthConfig {
            views_per_instance: 0,
            ..Default::default()
        };
        assert!(matches!(generate(&zero), Err(Error::Config(_))));
        let bad_noise = SynthConfig {
            instance_noise: -0.5,
            ..Default::default()
        };
        assert!(matches!(generate(&bad_noise), Err(Error::Config(_))));
    }
}
