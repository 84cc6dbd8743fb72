//! Embedding model, cosine margin ranking loss, analytic gradients, and a
//! plain SGD trainer.
//!
//! Weights are held in f64 and all loss math runs in f64; checkpoints
//! store f32 matrices. `init` quantizes fresh weights to the f32 grid so a
//! just-initialized model survives a checkpoint round-trip bit for bit.
//! Training is sequential over batches: step order is part of the
//! determinism contract.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::matrix::Matrix;
use crate::parallel;
use crate::sampler::Triplet;

/// Norms below this are treated as zero vectors and rejected.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Linear {
        d_in: usize,
        d_out: usize,
    },
    /// One hidden layer with elementwise max(0, z) between the two maps.
    OneHidden {
        d_in: usize,
        hidden: usize,
        d_out: usize,
    },
}

impl Architecture {
    pub fn d_in(&self) -> usize {
        match *self {
            Architecture::Linear { d_in, .. } => d_in,
            Architecture::OneHidden { d_in, .. } => d_in,
        }
    }

    pub fn d_out(&self) -> usize {
        match *self {
            Architecture::Linear { d_out, .. } => d_out,
            Architecture::OneHidden { d_out, .. } => d_out,
        }
    }

    /// Output width of the first map: hidden if present, else d_out.
    fn mid(&self) -> usize {
        match *self {
            Architecture::Linear { d_out, .. } => d_out,
            Architecture::OneHidden { hidden, .. } => hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Architecture::Linear { d_in, d_out } => d_in > 0 && d_out > 0,
            Architecture::OneHidden { d_in, hidden, d_out } => d_in > 0 && hidden > 0 && d_out > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("architecture {self:?} has a zero dimension")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    arch: Architecture,
    /// mid × d_in, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// d_out × hidden, row-major; empty for Linear.
    w2: Vec<f64>,
    b2: Vec<f64>,
    seed: u64,
    iteration: u64,
}

impl EmbeddingModel {
    /// Uniform init in ±sqrt(6/(fan_in+fan_out)), biases zero, values
    /// snapped to the f32 grid.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |fan_in: usize, fan_out: usize, count: usize| -> Vec<f64> {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..count)
                .map(|_| rng.random_range(-bound..bound) as f32 as f64)
                .collect()
        };
        let (w1, b1, w2, b2) = match arch {
            Architecture::Linear { d_in, d_out } => {
                (sample(d_in, d_out, d_out * d_in), vec![0.0; d_out], Vec::new(), Vec::new())
            }
            Architecture::OneHidden { d_in, hidden, d_out } => (
                sample(d_in, hidden, hidden * d_in),
                vec![0.0; hidden],
                sample(hidden, d_out, d_out * hidden),
                vec![0.0; d_out],
            ),
        };
        Ok(EmbeddingModel {
            arch,
            w1,
            b1,
            w2,
            b2,
            seed,
            iteration: 0,
        })
    }

    pub fn from_parts(
        arch: Architecture,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        let mid = arch.mid();
        let expect_w2 = match arch {
            Architecture::Linear { .. } => 0,
            Architecture::OneHidden { hidden, d_out, .. } => d_out * hidden,
        };
        let expect_b2 = match arch {
            Architecture::Linear { .. } => 0,
            Architecture::OneHidden { d_out, .. } => d_out,
        };
        if w1.len() != mid * arch.d_in()
            || b1.len() != mid
            || w2.len() != expect_w2
            || b2.len() != expect_b2
        {
            return Err(Error::Validation(format!(
                "weight shapes do not fit architecture {arch:?}"
            )));
        }
        for &v in w1.iter().chain(&b1).chain(&w2).chain(&b2) {
            if !v.is_finite() {
                return Err(Error::Validation("model weights must be finite".into()));
            }
        }
        Ok(EmbeddingModel {
            arch,
            w1,
            b1,
            w2,
            b2,
            seed: 0,
            iteration: 0,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn d_in(&self) -> usize {
        self.arch.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.arch.d_out()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// SGD steps applied so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn forward(&self, x: &[f32]) -> Forward {
        let d_in = self.arch.d_in();
        let mid = self.arch.mid();
        let mut z = vec![0.0f64; mid];
        for r in 0..mid {
            let row = &self.w1[r * d_in..(r + 1) * d_in];
            let mut acc = self.b1[r];
            for (w, &v) in row.iter().zip(x) {
                acc += w * v as f64;
            }
            z[r] = acc;
        }
        match self.arch {
            Architecture::Linear { .. } => Forward {
                y: z,
                z: Vec::new(),
                h: Vec::new(),
            },
            Architecture::OneHidden { hidden, d_out, .. } => {
                let h: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
                let mut y = vec![0.0f64; d_out];
                for r in 0..d_out {
                    let row = &self.w2[r * hidden..(r + 1) * hidden];
                    let mut acc = self.b2[r];
                    for (w, &v) in row.iter().zip(&h) {
                        acc += w * v;
                    }
                    y[r] = acc;
                }
                Forward { y, z, h }
            }
        }
    }

    pub fn embed(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.arch.d_in() {
            return Err(Error::DimMismatch {
                expected: self.arch.d_in(),
                found: x.len(),
            });
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "input has non-finite component at index {pos}"
            )));
        }
        Ok(self.forward(x).y)
    }

    /// Embeddings for every row of the store, as an f32 matrix. Chunked so
    /// the result is identical for any worker count.
    pub fn embed_all(&self, store: &FeatureStore) -> Result<Matrix> {
        if store.dim() != self.arch.d_in() {
            return Err(Error::DimMismatch {
                expected: self.arch.d_in(),
                found: store.dim(),
            });
        }
        let d_out = self.arch.d_out();
        let rows = parallel::map_indexed(store.n(), |i| {
            let fwd = self.forward(store.matrix().row(i));
            fwd.y.into_iter().map(|v| v as f32).collect::<Vec<f32>>()
        });
        let mut out = Matrix::zeros(store.n(), d_out);
        for (i, row) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&row);
        }
        Ok(out)
    }

    /// Directory checkpoint: JSON manifest plus one binary matrix file per
    /// weight tensor (f32; in-memory f64 values are rounded).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            architecture: match self.arch {
                Architecture::Linear { .. } => "linear".into(),
                Architecture::OneHidden { .. } => "one-hidden".into(),
            },
            d_in: self.arch.d_in(),
            hidden: match self.arch {
                Architecture::Linear { .. } => None,
                Architecture::OneHidden { hidden, .. } => Some(hidden),
            },
            d_out: self.arch.d_out(),
            seed: self.seed,
            iteration: self.iteration,
        };
        let path = dir.join("manifest.json");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| Error::io(&path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;

        let mid = self.arch.mid();
        write_tensor(dir, "w1", &self.w1, mid, self.arch.d_in())?;
        write_tensor(dir, "b1", &self.b1, 1, mid)?;
        if let Architecture::OneHidden { hidden, d_out, .. } = self.arch {
            write_tensor(dir, "w2", &self.w2, d_out, hidden)?;
            write_tensor(dir, "b2", &self.b2, 1, d_out)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Format {
                path: path.clone(),
                msg: format!("bad checkpoint manifest: {e}"),
            })?;
        let arch = match (manifest.architecture.as_str(), manifest.hidden) {
            ("linear", None) => Architecture::Linear {
                d_in: manifest.d_in,
                d_out: manifest.d_out,
            },
            ("one-hidden", Some(hidden)) => Architecture::OneHidden {
                d_in: manifest.d_in,
                hidden,
                d_out: manifest.d_out,
            },
            _ => {
                return Err(Error::Format {
                    path,
                    msg: format!(
                        "architecture {:?} inconsistent with hidden field {:?}",
                        manifest.architecture, manifest.hidden
                    ),
                })
            }
        };
        arch.validate()?;
        let mid = arch.mid();
        let w1 = read_tensor(dir, "w1", mid, arch.d_in())?;
        let b1 = read_tensor(dir, "b1", 1, mid)?;
        let (w2, b2) = match arch {
            Architecture::Linear { .. } => (Vec::new(), Vec::new()),
            Architecture::OneHidden { hidden, d_out, .. } => (
                read_tensor(dir, "w2", d_out, hidden)?,
                read_tensor(dir, "b2", 1, d_out)?,
            ),
        };
        let mut model = EmbeddingModel::from_parts(arch, w1, b1, w2, b2)?;
        model.seed = manifest.seed;
        model.iteration = manifest.iteration;
        Ok(model)
    }
}

struct Forward {
    y: Vec<f64>,
    /// Pre-activation of the hidden layer (OneHidden only).
    z: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    architecture: String,
    d_in: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    d_out: usize,
    seed: u64,
    iteration: u64,
}

fn write_tensor(dir: &Path, name: &str, data: &[f64], rows: usize, cols: usize) -> Result<()> {
    let mut m = Matrix::zeros(rows, cols);
    for (out, &v) in m.data_mut().iter_mut().zip(data) {
        *out = v as f32;
    }
    m.save(dir.join(format!("{name}.tivg")))
}

fn read_tensor(dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let path = dir.join(format!("{name}.tivg"));
    let m = Matrix::load(&path)?;
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::Format {
            path,
            msg: format!(
                "tensor is {}x{}, manifest requires {rows}x{cols}",
                m.rows(),
                m.cols()
            ),
        });
    }
    Ok(m.data().iter().map(|&v| v as f64).collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// 1 − cos(u, v), in [0, 2]. Rejects near-zero vectors.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(Error::ZeroVector);
    }
    let cos = (u.iter().zip(v).map(|(&a, &b)| a * b).sum::<f64>() / (nu * nv)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Gradient of `cosine_distance(u, v)` with respect to u and v:
/// d/du = (cos·û − v̂)/‖u‖ and symmetrically for v.
pub fn cosine_distance_gradient(u: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(Error::ZeroVector);
    }
    let cos = u.iter().zip(v).map(|(&a, &b)| a * b).sum::<f64>() / (nu * nv);
    let du: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| (cos * a / nu - b / nv) / nu)
        .collect();
    let dv: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| (cos * b / nv - a / nu) / nv)
        .collect();
    Ok((du, dv))
}

/// Raw feature rows of one triplet, in (anchor, positive, negative) order.
#[derive(Debug, Clone, Copy)]
pub struct TripletFeatures<'a> {
    pub anchor: &'a [f32],
    pub positive: &'a [f32],
    pub negative: &'a [f32],
}

impl<'a> TripletFeatures<'a> {
    pub fn gather(store: &'a FeatureStore, t: &Triplet) -> Result<Self> {
        Ok(TripletFeatures {
            anchor: store.feature(t.anchor)?,
            positive: store.feature(t.positive)?,
            negative: store.feature(t.negative)?,
        })
    }
}

/// max{0, D(F(x), F(x⁺)) − D(F(x), F(x⁻)) + m}.
pub fn ranking_loss(model: &EmbeddingModel, t: &TripletFeatures, margin: f64) -> Result<f64> {
    let f = model.embed(t.anchor)?;
    let p = model.embed(t.positive)?;
    let q = model.embed(t.negative)?;
    let d_pos = cosine_distance(&f, &p)?;
    let d_neg = cosine_distance(&f, &q)?;
    Ok((d_pos - d_neg + margin).max(0.0))
}

/// Per-tensor gradient buffers, shaped like the model's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &EmbeddingModel) -> Gradients {
        Gradients {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self
            .w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
        {
            *v *= s;
        }
    }
}

/// Loss and its gradient over all weights. At the hinge kink (loss exactly
/// 0 from an active boundary) and at max(0,·) kinks the subgradient 0 is
/// used: the triplet contributes nothing.
pub fn loss_gradient(
    model: &EmbeddingModel,
    t: &TripletFeatures,
    margin: f64,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(model);
    let loss = accumulate_loss_gradient(model, t, margin, &mut grads)?;
    Ok((loss, grads))
}

/// Adds one triplet's gradient into `grads`; returns the triplet's loss.
pub fn accumulate_loss_gradient(
    model: &EmbeddingModel,
    t: &TripletFeatures,
    margin: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    for (name, x) in [("anchor", t.anchor), ("positive", t.positive), ("negative", t.negative)] {
        if x.len() != model.arch.d_in() {
            return Err(Error::DimMismatch {
                expected: model.arch.d_in(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("{name} features are not finite")));
        }
    }
    let ff = model.forward(t.anchor);
    let fp = model.forward(t.positive);
    let fq = model.forward(t.negative);

    let nf = norm(&ff.y);
    let np = norm(&fp.y);
    let nq = norm(&fq.y);
    if nf < NORM_FLOOR || np < NORM_FLOOR || nq < NORM_FLOOR {
        return Err(Error::ZeroVector);
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<f64>();
    let cos_fp = dot(&ff.y, &fp.y) / (nf * np);
    let cos_fq = dot(&ff.y, &fq.y) / (nf * nq);
    let d_pos = 1.0 - cos_fp.clamp(-1.0, 1.0);
    let d_neg = 1.0 - cos_fq.clamp(-1.0, 1.0);
    let hinge = d_pos - d_neg + margin;
    if hinge <= 0.0 {
        return Ok(0.0);
    }

    // dL/d(embedding) for each of the three towers.
    let g_f: Vec<f64> = (0..ff.y.len())
        .map(|i| {
            ((cos_fp - cos_fq) * ff.y[i] / nf - fp.y[i] / np + fq.y[i] / nq) / nf
        })
        .collect();
    let g_p: Vec<f64> = (0..fp.y.len())
        .map(|i| (cos_fp * fp.y[i] / np - ff.y[i] / nf) / np)
        .collect();
    let g_q: Vec<f64> = (0..fq.y.len())
        .map(|i| -(cos_fq * fq.y[i] / nq - ff.y[i] / nf) / nq)
        .collect();

    backprop(model, t.anchor, &ff, &g_f, grads);
    backprop(model, t.positive, &fp, &g_p, grads);
    backprop(model, t.negative, &fq, &g_q, grads);
    Ok(hinge)
}

fn backprop(model: &EmbeddingModel, x: &[f32], fwd: &Forward, g_out: &[f64], grads: &mut Gradients) {
    let d_in = model.arch.d_in();
    match model.arch {
        Architecture::Linear { .. } => {
            for (r, &g) in g_out.iter().enumerate() {
                grads.b1[r] += g;
                let row = &mut grads.w1[r * d_in..(r + 1) * d_in];
                for (w, &v) in row.iter_mut().zip(x) {
                    *w += g * v as f64;
                }
            }
        }
        Architecture::OneHidden { hidden, .. } => {
            let mut g_h = vec![0.0f64; hidden];
            for (r, &g) in g_out.iter().enumerate() {
                grads.b2[r] += g;
                let w2_row = &model.w2[r * hidden..(r + 1) * hidden];
                let gw2_row = &mut grads.w2[r * hidden..(r + 1) * hidden];
                for c in 0..hidden {
                    gw2_row[c] += g * fwd.h[c];
                    g_h[c] += g * w2_row[c];
                }
            }
            for (r, gz) in g_h.into_iter().enumerate() {
                // max(0,·) passes gradient only where z > 0; z == 0 blocks.
                if fwd.z[r] <= 0.0 {
                    continue;
                }
                grads.b1[r] += gz;
                let row = &mut grads.w1[r * d_in..(r + 1) * d_in];
                for (w, &v) in row.iter_mut().zip(x) {
                    *w += gz * v as f64;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.5,
            learning_rate: 0.001,
            iterations: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate {} must be nonnegative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub mean_loss: f64,
    pub active_fraction: f64,
}

/// SGD with the per-batch mean gradient. Consumes `cfg.iterations` batches
/// from the stream; the trace has one row per batch.
pub fn train(
    model: &mut EmbeddingModel,
    store: &FeatureStore,
    batches: impl Iterator<Item = Result<Vec<Triplet>>>,
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut grads = Gradients::zeros_like(model);
    let mut batches = batches;
    for step in 0..cfg.iterations {
        let batch = match batches.next() {
            Some(batch) => batch?,
            None => break,
        };
        if batch.is_empty() {
            return Err(Error::Validation(format!("batch {step} is empty")));
        }
        grads.scale(0.0);
        let mut loss_sum = 0.0f64;
        let mut active = 0usize;
        for t in &batch {
            let feats = TripletFeatures::gather(store, t)?;
            let loss = accumulate_loss_gradient(model, &feats, cfg.margin, &mut grads)?;
            loss_sum += loss;
            if loss > 0.0 {
                active += 1;
            }
        }
        let mean_loss = loss_sum / batch.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch: step });
        }
        let scale = cfg.learning_rate / batch.len() as f64;
        for (w, g) in model.w1.iter_mut().zip(&grads.w1) {
            *w -= scale * g;
        }
        for (w, g) in model.b1.iter_mut().zip(&grads.b1) {
            *w -= scale * g;
        }
        for (w, g) in model.w2.iter_mut().zip(&grads.w2) {
            *w -= scale * g;
        }
        for (w, g) in model.b2.iter_mut().zip(&grads.b2) {
            *w -= scale * g;
        }
        model.iteration += 1;
        trace.push(TraceRow {
            iteration: model.iteration,
            mean_loss,
            active_fraction: active as f64 / batch.len() as f64,
        });
    }
    Ok(trace)
}

pub fn save_trace(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "iteration,mean_loss,active_fraction").map_err(io_err)?;
    for row in trace {
        writeln!(w, "{},{},{}", row.iteration, row.mean_loss, row.active_fraction)
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if idx == 0 {
            if line != "iteration,mean_loss,active_fraction" {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let mut parts = line.split(',');
        let mut next = |what: &str| {
            parts
                .next()
                .ok_or_else(|| parse_err(format!("missing {what} column")))
        };
        let iteration = next("iteration")?
            .parse::<u64>()
            .map_err(|e| parse_err(e.to_string()))?;
        let mean_loss = next("mean_loss")?
            .parse::<f64>()
            .map_err(|e| parse_err(e.to_string()))?;
        let active_fraction = next("active_fraction")?
            .parse::<f64>()
            .map_err(|e| parse_err(e.to_string()))?;
        rows.push(TraceRow {
            iteration,
            mean_loss,
            active_fraction,
        });
    }
    Ok(rows)
}
