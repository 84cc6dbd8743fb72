//! File-based pipeline: synth -> cluster -> graph -> pairs -> triplets ->
//! train -> eval.
//!
//! Every stage reads its inputs from the artifact files of the stage
//! before it and writes its own, so running stages one at a time produces
//! byte-identical output to a single end-to-end run. All randomness flows
//! from one master seed through fixed per-stage derivations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{self, KMeansConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::features::{FeatureStore, NodeMeta};
use crate::graph::{tracks_from_meta, AffinityGraph, PatchNode};
use crate::matrix::Matrix;
use crate::model::{self, Architecture, EmbeddingModel, TrainConfig};
use crate::neighbors::{find_child_clusters, NeighborConfig};
use crate::sampler::{self, BatchConfig, TripletStream};
use crate::seed::{stage_seed, Stage};
use crate::synth::{self, GroundTruth, SynthConfig};
use crate::transitivity::{self, PairGenConfig, PairMode};

pub const FEATURES_FILE: &str = "features.tivg";
pub const META_FILE: &str = "meta.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const CENTROIDS_FILE: &str = "centroids.tivg";
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";
pub const GRAPH_FILE: &str = "graph.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";
pub const MODEL_DIR: &str = "model";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const REPORT_FILE: &str = "eval_report.json";
pub const MODES_FILE: &str = "eval_modes.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_categories: usize,
    pub instances_per_category: usize,
    pub views_per_instance: usize,
    pub d_in: usize,
    pub category_separation: f64,
    pub instance_noise: f64,
    pub view_distortion: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_categories: 20,
            instances_per_category: 10,
            views_per_instance: 2,
            d_in: 64,
            category_separation: 1.0,
            instance_noise: 0.9,
            view_distortion: 1.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Parent clusters smaller than this lose their assignments.
    pub min_cluster_size: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            k: 40,
            max_iters: 50,
            tol: 1e-6,
            min_cluster_size: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeighborParams {
    pub k: usize,
    pub group_size: usize,
}

impl Default for NeighborParams {
    fn default() -> Self {
        NeighborParams { k: 10, group_size: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairParams {
    pub mode: PairMode,
    pub intra_ratio: f64,
}

impl Default for PairParams {
    fn default() -> Self {
        PairParams {
            mode: PairMode::Transitive,
            intra_ratio: 2.0 / 9.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    /// None trains a single linear map, Some(h) adds a hidden layer.
    pub hidden: Option<usize>,
    pub d_out: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            hidden: None,
            d_out: 32,
            margin: 0.5,
            learning_rate: 0.05,
            iterations: 400,
            batch_size: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub precision_k: Vec<usize>,
    pub n_quadruples: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            precision_k: vec![5],
            n_quadruples: 2000,
        }
    }
}

/// Whole-pipeline configuration. `seed` is the master seed; each stage
/// derives its own seed from it, so one value reproduces every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthParams,
    pub cluster: ClusterParams,
    pub neighbors: NeighborParams,
    pub pairs: PairParams,
    pub train: TrainParams,
    pub eval: EvalParams,
}

impl PipelineConfig {
    /// Desk-scale defaults: runs end to end in seconds.
    pub fn desk() -> Self {
        PipelineConfig::default()
    }

    /// Published corpus-scale constants (5000 parent clusters of at least
    /// 100 patches, 10 neighbors, groups of 4, margin 0.5, learning rate
    /// 0.001, batches of 100). Meant for externally provided data at that
    /// scale; on the bundled synthetic world the cluster stage rejects
    /// k > n.
    pub fn paper() -> Self {
        PipelineConfig {
            cluster: ClusterParams {
                k: 5000,
                max_iters: 100,
                tol: 1e-6,
                min_cluster_size: 100,
            },
            train: TrainParams {
                learning_rate: 0.001,
                iterations: 100_000,
                ..TrainParams::default()
            },
            ..PipelineConfig::default()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_categories: self.synth.n_categories,
            instances_per_category: self.synth.instances_per_category,
            views_per_instance: self.synth.views_per_instance,
            d_in: self.synth.d_in,
            category_separation: self.synth.category_separation,
            instance_noise: self.synth.instance_noise,
            view_distortion: self.synth.view_distortion,
            seed: stage_seed(self.seed, Stage::Synth),
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.cluster.k,
            max_iters: self.cluster.max_iters,
            tol: self.cluster.tol,
            seed: stage_seed(self.seed, Stage::Cluster),
        }
    }

    pub fn neighbor_config(&self) -> NeighborConfig {
        NeighborConfig {
            k: self.neighbors.k,
            group_size: self.neighbors.group_size,
        }
    }

    pub fn pair_config(&self) -> PairGenConfig {
        PairGenConfig {
            intra_ratio: self.pairs.intra_ratio,
            seed: stage_seed(self.seed, Stage::Pairs),
        }
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            batch_size: self.train.batch_size,
            seed: stage_seed(self.seed, Stage::Triplets),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            margin: self.train.margin,
            learning_rate: self.train.learning_rate,
            iterations: self.train.iterations,
        }
    }

    pub fn architecture(&self, d_in: usize) -> Architecture {
        match self.train.hidden {
            None => Architecture::Linear {
                d_in,
                d_out: self.train.d_out,
            },
            Some(hidden) => Architecture::OneHidden {
                d_in,
                hidden,
                d_out: self.train.d_out,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.pair_config().validate()?;
        self.batch_config().validate()?;
        self.train_config().validate()?;
        self.architecture(self.synth.d_in).validate()?;
        if self.cluster.k == 0 {
            return Err(Error::Config("cluster k must be at least 1".into()));
        }
        if self.eval.precision_k.is_empty() || self.eval.precision_k.contains(&0) {
            return Err(Error::Config(
                "eval precision_k needs at least one positive k".into(),
            ));
        }
        if self.eval.n_quadruples == 0 {
            return Err(Error::Config("eval n_quadruples must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let cfg: PipelineConfig =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &PipelineConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, cfg).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// One node's parent-cluster assignment: the raw k-means cluster and the
/// surviving parent after small clusters are pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub node: u32,
    pub cluster: u32,
    pub parent: Option<u32>,
}

pub fn save_assignments(records: &[AssignmentRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_assignments(path: impl AsRef<Path>) -> Result<Vec<AssignmentRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: AssignmentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if r.node as usize != records.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("assignment for node {}, expected dense ids", r.node),
            });
        }
        records.push(r);
    }
    Ok(records)
}

pub fn run_synth(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let (store, meta, gt) = synth::generate(&cfg.synth_config())?;
    store.save(dir.join(FEATURES_FILE))?;
    meta.save(dir.join(META_FILE))?;
    gt.save(dir.join(GROUND_TRUTH_FILE))
}

pub fn run_cluster(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let store = FeatureStore::load(dir.join(FEATURES_FILE))?;
    let normalized = store.l2_normalize();
    let res = clustering::spherical_kmeans(normalized.matrix(), &cfg.kmeans_config())?;
    let parent_of =
        clustering::prune_small(&res.assignments, cfg.cluster.k, cfg.cluster.min_cluster_size);
    let records: Vec<AssignmentRecord> = res
        .assignments
        .iter()
        .zip(&parent_of)
        .enumerate()
        .map(|(node, (&cluster, &parent))| AssignmentRecord {
            node: node as u32,
            cluster,
            parent,
        })
        .collect();
    res.centroids.save(dir.join(CENTROIDS_FILE))?;
    save_assignments(&records, dir.join(ASSIGNMENTS_FILE))
}

pub fn run_graph(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let store = FeatureStore::load(dir.join(FEATURES_FILE))?;
    let meta = NodeMeta::load(dir.join(META_FILE))?;
    meta.validate_against(&store)?;
    let assignments = load_assignments(dir.join(ASSIGNMENTS_FILE))?;
    if assignments.len() != store.n() {
        return Err(Error::Validation(format!(
            "assignments cover {} nodes, feature store has {}",
            assignments.len(),
            store.n()
        )));
    }
    let parent_of: Vec<Option<u32>> = assignments.iter().map(|r| r.parent).collect();
    let normalized = store.l2_normalize();
    let children = find_child_clusters(
        normalized.matrix(),
        &parent_of,
        cfg.cluster.k,
        &cfg.neighbor_config(),
    )?;
    let nodes: Vec<PatchNode> = meta
        .records()
        .iter()
        .map(|r| PatchNode {
            node_id: r.node,
            feature: store.matrix().row(r.node as usize).to_vec(),
            video_id: r.video.clone(),
            track_id: r.track.clone(),
            frame_index: r.frame,
        })
        .collect();
    let tracks = tracks_from_meta(&meta);
    let graph = AffinityGraph::build(nodes, parent_of, children, &tracks)?;
    graph.save(dir.join(GRAPH_FILE))
}

pub fn run_pairs(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let graph = AffinityGraph::load(dir.join(GRAPH_FILE))?;
    let pairs = transitivity::pairs_for_mode(&graph, cfg.pairs.mode, &cfg.pair_config())?;
    transitivity::save_pairs(&pairs, dir.join(PAIRS_FILE))
}

/// Materialize the first epoch of the triplet stream as an inspectable
/// artifact. Training regenerates the stream from the pairs file with the
/// same derived seed, so this file is documentation, not an input.
pub fn run_triplets(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let graph = AffinityGraph::load(dir.join(GRAPH_FILE))?;
    let pairs = transitivity::load_pairs(dir.join(PAIRS_FILE))?;
    let mut stream = TripletStream::new(&pairs, graph.parent_of(), cfg.batch_config())?;
    let n_batches = stream.batches_per_epoch();
    let mut epoch = Vec::new();
    for _ in 0..n_batches {
        let batch = stream.next().expect("stream cycles forever")?;
        epoch.extend(batch);
    }
    sampler::save_triplets(&epoch, dir.join(TRIPLETS_FILE))
}

pub fn run_train(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let store = FeatureStore::load(dir.join(FEATURES_FILE))?;
    let graph = AffinityGraph::load(dir.join(GRAPH_FILE))?;
    let pairs = transitivity::load_pairs(dir.join(PAIRS_FILE))?;
    let stream = TripletStream::new(&pairs, graph.parent_of(), cfg.batch_config())?;
    let mut model = EmbeddingModel::init(
        cfg.architecture(store.dim()),
        stage_seed(cfg.seed, Stage::TrainInit),
    )?;
    let trace = model::train(&mut model, &store, stream, &cfg.train_config())?;
    let model_dir = dir.join(MODEL_DIR);
    std::fs::create_dir_all(&model_dir).map_err(|e| Error::io(&model_dir, e))?;
    model.save(&model_dir)?;
    model::save_trace(&trace, dir.join(TRACE_FILE))
}

/// Retrieval and ordering metrics for one embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub precision_at_k: BTreeMap<usize, f64>,
    pub ordering_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: String,
    pub n_pairs: usize,
    pub metrics: MetricBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent when the graph has no child clusters.
    pub purity: Option<eval::PurityReport>,
    /// Metrics of the freshly initialized model, before any training.
    pub untrained: MetricBlock,
    pub modes: Vec<ModeResult>,
}

pub fn save_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, report).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Long-format table for external plotting: mode,metric,value.
pub fn save_modes_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "mode,metric,value").map_err(io_err)?;
    let block = |w: &mut BufWriter<File>, name: &str, m: &MetricBlock| -> Result<()> {
        writeln!(w, "{name},ordering_rate,{}", m.ordering_rate).map_err(io_err)?;
        for (k, p) in &m.precision_at_k {
            writeln!(w, "{name},precision@{k},{p}").map_err(io_err)?;
        }
        Ok(())
    };
    block(&mut w, "untrained", &report.untrained)?;
    for mode in &report.modes {
        writeln!(w, "{},n_pairs,{}", mode.mode, mode.n_pairs).map_err(io_err)?;
        block(&mut w, &mode.mode, &mode.metrics)?;
    }
    w.flush().map_err(io_err)
}

fn metric_block(
    embeddings: &Matrix,
    gt: &GroundTruth,
    graph: &AffinityGraph,
    params: &EvalParams,
    seed: u64,
) -> Result<MetricBlock> {
    let mut precision_at_k = BTreeMap::new();
    for &k in &params.precision_k {
        precision_at_k.insert(
            k,
            eval::retrieval_precision(embeddings, gt, k, eval::RetrievalProtocol::default())?,
        );
    }
    let ordering_rate =
        eval::quadruple_ordering_rate(embeddings, graph, params.n_quadruples, seed)?;
    Ok(MetricBlock {
        precision_at_k,
        ordering_rate,
    })
}

pub fn run_eval(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let store = FeatureStore::load(dir.join(FEATURES_FILE))?;
    let gt = GroundTruth::load(dir.join(GROUND_TRUTH_FILE))?;
    let graph = AffinityGraph::load(dir.join(GRAPH_FILE))?;
    let pairs = transitivity::load_pairs(dir.join(PAIRS_FILE))?;
    let model = EmbeddingModel::load(dir.join(MODEL_DIR))?;
    let eval_seed = stage_seed(cfg.seed, Stage::Eval);

    let purity = if graph.child_clusters().is_empty() {
        None
    } else {
        Some(eval::purity(graph.child_clusters(), &gt)?)
    };
    let init = EmbeddingModel::init(
        model.architecture(),
        stage_seed(cfg.seed, Stage::TrainInit),
    )?;
    let untrained = metric_block(&init.embed_all(&store)?, &gt, &graph, &cfg.eval, eval_seed)?;
    let trained = metric_block(&model.embed_all(&store)?, &gt, &graph, &cfg.eval, eval_seed)?;

    let report = EvalReport {
        purity,
        untrained,
        modes: vec![ModeResult {
            mode: cfg.pairs.mode.name().to_string(),
            n_pairs: pairs.len(),
            metrics: trained,
        }],
    };
    save_report(&report, dir.join(REPORT_FILE))?;
    save_modes_csv(&report, dir.join(MODES_FILE))
}

/// All stages in order. Each stage round-trips through the files it would
/// use when invoked on its own.
pub fn run_pipeline(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    run_synth(cfg, dir)?;
    run_cluster(cfg, dir)?;
    run_graph(cfg, dir)?;
    run_pairs(cfg, dir)?;
    run_triplets(cfg, dir)?;
    run_train(cfg, dir)?;
    run_eval(cfg, dir)
}

/// In-memory ablation sweep: build the world and graph once, then train
/// one model per pair mode from a shared initialization and score each on
/// the same metrics. The untrained block doubles as the no-training
/// baseline.
pub fn mode_sweep(cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let (store, meta, gt) = synth::generate(&cfg.synth_config())?;
    let normalized = store.l2_normalize();
    let res = clustering::spherical_kmeans(normalized.matrix(), &cfg.kmeans_config())?;
    let parent_of =
        clustering::prune_small(&res.assignments, cfg.cluster.k, cfg.cluster.min_cluster_size);
    let children = find_child_clusters(
        normalized.matrix(),
        &parent_of,
        cfg.cluster.k,
        &cfg.neighbor_config(),
    )?;
    let nodes: Vec<PatchNode> = meta
        .records()
        .iter()
        .map(|r| PatchNode {
            node_id: r.node,
            feature: store.matrix().row(r.node as usize).to_vec(),
            video_id: r.video.clone(),
            track_id: r.track.clone(),
            frame_index: r.frame,
        })
        .collect();
    let tracks = tracks_from_meta(&meta);
    let graph = AffinityGraph::build(nodes, parent_of, children, &tracks)?;

    let purity = if graph.child_clusters().is_empty() {
        None
    } else {
        Some(eval::purity(graph.child_clusters(), &gt)?)
    };
    let eval_seed = stage_seed(cfg.seed, Stage::Eval);
    let init = EmbeddingModel::init(
        cfg.architecture(store.dim()),
        stage_seed(cfg.seed, Stage::TrainInit),
    )?;
    let untrained = metric_block(&init.embed_all(&store)?, &gt, &graph, &cfg.eval, eval_seed)?;

    let mut modes = Vec::new();
    for mode in PairMode::ALL {
        let pairs = transitivity::pairs_for_mode(&graph, mode, &cfg.pair_config())?;
        let stream = TripletStream::new(&pairs, graph.parent_of(), cfg.batch_config())?;
        let mut model = init.clone();
        model::train(&mut model, &store, stream, &cfg.train_config())?;
        let metrics = metric_block(&model.embed_all(&store)?, &gt, &graph, &cfg.eval, eval_seed)?;
        modes.push(ModeResult {
            mode: mode.name().to_string(),
            n_pairs: pairs.len(),
            metrics,
        });
    }
    Ok(EvalReport {
        purity,
        untrained,
        modes,
    })
}
