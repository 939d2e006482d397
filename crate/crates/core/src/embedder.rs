//! Hidden-state embedder trained as a Siamese network.
//!
//! The embedder mean-pools an L×H hidden state over tokens, standardizes it,
//! and applies three affine layers `H → h0 → h1 → d`. A second, frozen
//! standardization sits between the first and second layer. Two hidden states
//! are predicted similar when their embeddings are close:
//! `predicted = max(0, 1 - ‖fa - fb‖₂)`. Training pairs carry the APM
//! similarity score as ground truth and the loss is the squared difference.
//!
//! Training runs in f64 on a flat parameter vector (one set of weights serves
//! both Siamese branches); the trained embedder is stored in f32.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::similarity::{similarity_score_multihead, SimilarityScore};
use crate::tensor::{Apm, Matrix};

const MAGIC: &[u8; 4] = b"MEMB";
const VERSION: u32 = 1;
const STD_EPS: f64 = 1e-5;

pub type FeatureVector = Vec<f32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub input_dim: usize,
    pub hidden_dims: [usize; 2],
    pub output_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl EmbedderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: [128, 128],
            output_dim: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) || self.output_dim == 0 {
            return Err(Error::invalid("embedder dimensions must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    fn dims(&self) -> [usize; 4] {
        [self.input_dim, self.hidden_dims[0], self.hidden_dims[1], self.output_dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    in_mean: Vec<f32>,
    in_std: Vec<f32>,
    w1: Matrix,
    b1: Vec<f32>,
    mid_mean: Vec<f32>,
    mid_std: Vec<f32>,
    w2: Matrix,
    b2: Vec<f32>,
    w3: Matrix,
    b3: Vec<f32>,
}

fn affine(x: &[f32], w: &Matrix, b: &[f32]) -> Vec<f32> {
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn standardize(x: &mut [f32], mean: &[f32], std: &[f32]) {
    for ((v, m), s) in x.iter_mut().zip(mean).zip(std) {
        *v = (*v - m) / s;
    }
}

impl Embedder {
    /// An embedder whose layers and biases are all zero.
    pub fn zeros(input_dim: usize, hidden_dims: [usize; 2], output_dim: usize) -> Self {
        let [h, h0, h1, d] = [input_dim, hidden_dims[0], hidden_dims[1], output_dim];
        Self {
            in_mean: vec![0.0; h],
            in_std: vec![1.0; h],
            w1: Matrix::zeros(h, h0),
            b1: vec![0.0; h0],
            mid_mean: vec![0.0; h0],
            mid_std: vec![1.0; h0],
            w2: Matrix::zeros(h0, h1),
            b2: vec![0.0; h1],
            w3: Matrix::zeros(h1, d),
            b3: vec![0.0; d],
        }
    }

    /// Untrained embedder with seeded weights and unit statistics.
    pub fn random(config: &EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let net = Net::init(config.dims(), config.seed);
        Ok(net.to_embedder(&vec![0.0; config.input_dim], &vec![1.0; config.input_dim]))
    }

    pub fn input_dim(&self) -> usize {
        self.in_mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.b3.len()
    }

    /// Embeds an L×H hidden state.
    pub fn embed(&self, hidden: &Matrix) -> Result<FeatureVector> {
        if hidden.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "hidden state has {} columns, embedder expects {}",
                hidden.cols(),
                self.input_dim()
            )));
        }
        Ok(self.embed_pooled(&hidden.mean_rows()))
    }

    /// Embeds an already pooled H-vector.
    pub fn embed_pooled(&self, pooled: &[f32]) -> FeatureVector {
        let mut x = pooled.to_vec();
        standardize(&mut x, &self.in_mean, &self.in_std);
        let mut a1 = affine(&x, &self.w1, &self.b1);
        standardize(&mut a1, &self.mid_mean, &self.mid_std);
        let a2 = affine(&a1, &self.w2, &self.b2);
        affine(&a2, &self.w3, &self.b3)
    }

    /// The three weight matrices in application order.
    pub fn weights(&self) -> [&Matrix; 3] {
        [&self.w1, &self.w2, &self.w3]
    }

    /// Per-feature scale factors of the two standardization steps.
    pub fn standardization_scales(&self) -> (Vec<f32>, Vec<f32>) {
        (
            self.in_std.iter().map(|s| 1.0 / s).collect(),
            self.mid_std.iter().map(|s| 1.0 / s).collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(MAGIC, VERSION);
        for d in [self.input_dim(), self.w1.cols(), self.w2.cols(), self.output_dim()] {
            w.u32(d as u32);
        }
        w.f32s(&self.in_mean);
        w.f32s(&self.in_std);
        w.f32s(self.w1.data());
        w.f32s(&self.b1);
        w.f32s(&self.mid_mean);
        w.f32s(&self.mid_std);
        w.f32s(self.w2.data());
        w.f32s(&self.b2);
        w.f32s(self.w3.data());
        w.f32s(&self.b3);
        fs::write(path, w.into_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader::open(&bytes, path, MAGIC, VERSION)?;
        let [h, h0, h1, d] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
        let e = Self {
            in_mean: r.f32s(h)?,
            in_std: r.f32s(h)?,
            w1: Matrix::from_vec(h, h0, r.f32s(h * h0)?)?,
            b1: r.f32s(h0)?,
            mid_mean: r.f32s(h0)?,
            mid_std: r.f32s(h0)?,
            w2: Matrix::from_vec(h0, h1, r.f32s(h0 * h1)?)?,
            b2: r.f32s(h1)?,
            w3: Matrix::from_vec(h1, d, r.f32s(h1 * d)?)?,
            b3: r.f32s(d)?,
        };
        r.finish()?;
        Ok(e)
    }
}

/// `max(0, 1 - ‖fa - fb‖₂)`
pub fn predicted_similarity(fa: &[f32], fb: &[f32]) -> Result<f64> {
    if fa.len() != fb.len() {
        return Err(Error::shape(format!(
            "feature vectors of length {} and {}",
            fa.len(),
            fb.len()
        )));
    }
    let d2: f64 = fa
        .iter()
        .zip(fb)
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
        .sum();
    Ok(similarity_from_distance(d2.sqrt()))
}

/// The affine map from embedding distance to predicted similarity.
pub fn similarity_from_distance(distance: f64) -> f64 {
    (1.0 - distance).clamp(0.0, 1.0)
}

/// `(predicted - gt)²`
pub fn siamese_loss(fa: &[f32], fb: &[f32], gt: SimilarityScore) -> Result<f64> {
    Ok((predicted_similarity(fa, fb)? - gt.value()).powi(2))
}

/// A pair of dataset indices and the APM similarity between them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingPair {
    pub a: usize,
    pub b: usize,
    pub similarity: SimilarityScore,
}

/// Random access to the per-head APMs of a dataset.
pub trait ApmSource {
    fn len(&self) -> usize;
    fn apms(&self, index: usize) -> Result<Vec<Apm>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ApmSource for [Vec<Apm>] {
    fn len(&self) -> usize {
        <[Vec<Apm>]>::len(self)
    }

    fn apms(&self, index: usize) -> Result<Vec<Apm>> {
        Ok(self[index].clone())
    }
}

impl ApmSource for Vec<Vec<Apm>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn apms(&self, index: usize) -> Result<Vec<Apm>> {
        Ok(self[index].clone())
    }
}

/// For every anchor, draws up to `pairs_per_anchor` distinct partners
/// uniformly without replacement. Unordered duplicates across anchors are
/// dropped; the ground truth is the multi-head APM similarity.
pub fn sample_pairs<S: ApmSource + ?Sized>(
    source: &S,
    pairs_per_anchor: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let n = source.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 records to pair, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = pairs_per_anchor.min(n - 1);
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(n * k);
    for a in 0..n {
        let partners: Vec<usize> = rand::seq::index::sample(&mut rng, n - 1, k)
            .into_iter()
            .map(|j| if j >= a { j + 1 } else { j })
            .collect();
        let mut anchor = None;
        for b in partners {
            if !seen.insert((a.min(b), a.max(b))) {
                continue;
            }
            if anchor.is_none() {
                anchor = Some(source.apms(a)?);
            }
            let sim = similarity_score_multihead(anchor.as_ref().unwrap(), &source.apms(b)?)?;
            pairs.push(TrainingPair { a, b, similarity: sim });
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean loss over all pairs before the first update.
    pub initial_loss: f64,
    /// Mean loss over all pairs after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Trains an embedder on `inputs` (one L×H hidden state per record).
pub fn train(config: &EmbedderConfig, inputs: &[Matrix], pairs: &[TrainingPair]) -> Result<(Embedder, TrainReport)> {
    let pooled: Vec<Vec<f32>> = inputs.iter().map(Matrix::mean_rows).collect();
    train_pooled(config, &pooled, pairs)
}

/// Same as [`train`] with inputs already mean-pooled.
pub fn train_pooled(
    config: &EmbedderConfig,
    pooled: &[Vec<f32>],
    pairs: &[TrainingPair],
) -> Result<(Embedder, TrainReport)> {
    config.validate()?;
    if pairs.is_empty() || pooled.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if let Some(bad) = pooled.iter().find(|p| p.len() != config.input_dim) {
        return Err(Error::shape(format!(
            "input of dimension {} for embedder expecting {}",
            bad.len(),
            config.input_dim
        )));
    }
    if let Some(p) = pairs.iter().find(|p| p.a >= pooled.len() || p.b >= pooled.len()) {
        return Err(Error::invalid(format!("pair ({}, {}) out of range", p.a, p.b)));
    }

    let (in_mean, in_std) = column_stats(pooled.iter().map(|p| p.iter().map(|&v| f64::from(v))));
    let xs: Vec<Vec<f64>> = pooled
        .iter()
        .map(|p| {
            p.iter()
                .zip(&in_mean)
                .zip(&in_std)
                .map(|((v, m), s)| (f64::from(*v) - m) / s)
                .collect()
        })
        .collect();
    let pairs: Vec<(usize, usize, f64)> = pairs.iter().map(|p| (p.a, p.b, p.similarity.value())).collect();

    let mut net = Net::init(config.dims(), config.seed);
    net.refresh_mid_stats(&xs);
    net.calibrate_output_scale(&xs, &pairs);

    let initial_loss = net.mean_loss(&xs, &pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_5a1a);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut velocity = vec![0.0; net.theta.len()];
    let mut grad = vec![0.0; net.theta.len()];
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if epoch > 0 {
            net.refresh_mid_stats(&xs);
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| pairs[i]).collect();
            let loss = net.batch_loss_grad(&xs, &batch, &mut grad);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} in epoch {epoch}; lower the learning rate"
                )));
            }
            for ((p, v), g) in net.theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = config.momentum * *v + g;
                *p -= config.learning_rate * *v;
            }
        }
        let loss = net.mean_loss(&xs, &pairs);
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss after epoch {epoch}")));
        }
        log::debug!("embedder epoch {epoch}: loss {loss:.6}");
        epoch_losses.push(loss);
    }

    let embedder = net.to_embedder(&in_mean, &in_std);
    Ok((
        embedder,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

fn column_stats<I, R>(rows: I) -> (Vec<f64>, Vec<f64>)
where
    I: Iterator<Item = R>,
    R: Iterator<Item = f64>,
{
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for row in rows {
        for (i, v) in row.enumerate() {
            if i >= sum.len() {
                sum.push(0.0);
                sq.push(0.0);
            }
            sum[i] += v;
            sq[i] += v * v;
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / n - m * m).max(0.0) + STD_EPS).sqrt())
        .collect();
    (mean, std)
}

/// f64 training network over standardized inputs. Parameters live in one
/// flat vector laid out as `[w1, b1, w2, b2, w3, b3]`, weights row-major
/// `in × out`.
#[derive(Clone, Debug)]
pub(crate) struct Net {
    dims: [usize; 4],
    pub(crate) theta: Vec<f64>,
    mid_mean: Vec<f64>,
    mid_std: Vec<f64>,
}

struct Activations {
    a1: Vec<f64>,
    n1: Vec<f64>,
    a2: Vec<f64>,
    f: Vec<f64>,
}

impl Net {
    pub(crate) fn init(dims: [usize; 4], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::new();
        for l in 0..3 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            theta.extend((0..fan_in * fan_out).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            }));
            theta.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            dims,
            theta,
            mid_mean: vec![0.0; dims[1]],
            mid_std: vec![1.0; dims[1]],
        }
    }

    /// (weight offset, bias offset) of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.dims[k] * self.dims[k + 1] + self.dims[k + 1];
        }
        (off, off + self.dims[l] * self.dims[l + 1])
    }

    fn layer(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (w, b) = self.offsets(l);
        let out_dim = self.dims[l + 1];
        let mut out = self.theta[b..b + out_dim].to_vec();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.theta[w + i * out_dim..w + (i + 1) * out_dim];
            for (o, wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        out
    }

    fn forward(&self, x: &[f64]) -> Activations {
        let a1 = self.layer(0, x);
        let n1: Vec<f64> = a1
            .iter()
            .zip(&self.mid_mean)
            .zip(&self.mid_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let a2 = self.layer(1, &n1);
        let f = self.layer(2, &a2);
        Activations { a1, n1, a2, f }
    }

    pub(crate) fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).f
    }

    pub(crate) fn refresh_mid_stats(&mut self, xs: &[Vec<f64>]) {
        let (mean, std) = column_stats(xs.iter().map(|x| self.layer(0, x).into_iter()));
        self.mid_mean = mean;
        self.mid_std = std;
    }

    /// Rescales the last layer so the mean initial embedding distance over the
    /// training pairs equals the mean target distance `1 - gt`. Keeps the
    /// starting point inside the region where the clamp has gradient.
    fn calibrate_output_scale(&mut self, xs: &[Vec<f64>], pairs: &[(usize, usize, f64)]) {
        let sample = &pairs[..pairs.len().min(2048)];
        let mut dist = 0.0;
        let mut target = 0.0;
        for &(a, b, gt) in sample {
            dist += l2(&self.embed(&xs[a]), &self.embed(&xs[b]));
            target += 1.0 - gt;
        }
        let n = sample.len() as f64;
        let (dist, target) = (dist / n, (target / n).max(0.05));
        if dist > 0.0 {
            let (w, _) = self.offsets(2);
            let end = w + self.dims[2] * self.dims[3];
            let s = target / dist;
            self.theta[w..end].iter_mut().for_each(|v| *v *= s);
        }
    }

    fn pair_loss(&self, xa: &[f64], xb: &[f64], gt: f64) -> f64 {
        let d = l2(&self.embed(xa), &self.embed(xb));
        (clamped_similarity(d) - gt).powi(2)
    }

    pub(crate) fn mean_loss(&self, xs: &[Vec<f64>], pairs: &[(usize, usize, f64)]) -> f64 {
        pairs
            .iter()
            .map(|&(a, b, gt)| self.pair_loss(&xs[a], &xs[b], gt))
            .sum::<f64>()
            / pairs.len() as f64
    }

    /// Mean loss over `batch`; writes the matching gradient into `grad`.
    pub(crate) fn batch_loss_grad(&self, xs: &[Vec<f64>], batch: &[(usize, usize, f64)], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for &(a, b, gt) in batch {
            let fa = self.forward(&xs[a]);
            let fb = self.forward(&xs[b]);
            let diff: Vec<f64> = fa.f.iter().zip(&fb.f).map(|(p, q)| p - q).collect();
            let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            let pred = clamped_similarity(d);
            loss += (pred - gt).powi(2);
            if d >= 1.0 || d == 0.0 {
                continue;
            }
            // dL/dfa = 2(pred - gt) · (-(fa - fb)/d); dL/dfb = -dL/dfa
            let c = -2.0 * (pred - gt) / d;
            let ga: Vec<f64> = diff.iter().map(|v| c * v).collect();
            let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
            self.backward(&xs[a], &fa, &ga, grad);
            self.backward(&xs[b], &fb, &gb, grad);
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        loss * inv
    }

    fn backward(&self, x: &[f64], act: &Activations, g_f: &[f64], grad: &mut [f64]) {
        let g_a2 = self.backward_layer(2, &act.a2, g_f, grad);
        let g_n1 = self.backward_layer(1, &act.n1, &g_a2, grad);
        let g_a1: Vec<f64> = g_n1.iter().zip(&self.mid_std).map(|(g, s)| g / s).collect();
        debug_assert_eq!(g_a1.len(), act.a1.len());
        self.backward_layer(0, x, &g_a1, grad);
    }

    /// Accumulates weight/bias gradients of layer `l` and returns dL/d(input).
    fn backward_layer(&self, l: usize, input: &[f64], g_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (w, b) = self.offsets(l);
        let out_dim = self.dims[l + 1];
        for (gb, g) in grad[b..b + out_dim].iter_mut().zip(g_out) {
            *gb += g;
        }
        let mut g_in = vec![0.0; input.len()];
        for (i, &xi) in input.iter().enumerate() {
            let range = w + i * out_dim..w + (i + 1) * out_dim;
            let mut acc = 0.0;
            for ((gw, wij), g) in grad[range.clone()].iter_mut().zip(&self.theta[range]).zip(g_out) {
                *gw += xi * g;
                acc += wij * g;
            }
            g_in[i] = acc;
        }
        g_in
    }

    fn to_embedder(&self, in_mean: &[f64], in_std: &[f64]) -> Embedder {
        let f32s = |s: &[f64]| s.iter().map(|&v| v as f32).collect::<Vec<f32>>();
        let mat = |l: usize| {
            let (w, _) = self.offsets(l);
            let (r, c) = (self.dims[l], self.dims[l + 1]);
            Matrix::from_vec(r, c, f32s(&self.theta[w..w + r * c])).unwrap()
        };
        let bias = |l: usize| {
            let (_, b) = self.offsets(l);
            f32s(&self.theta[b..b + self.dims[l + 1]])
        };
        Embedder {
            in_mean: f32s(in_mean),
            in_std: f32s(in_std),
            w1: mat(0),
            b1: bias(0),
            mid_mean: f32s(&self.mid_mean),
            mid_std: f32s(&self.mid_std),
            w2: mat(1),
            b2: bias(1),
            w3: mat(2),
            b3: bias(2),
        }
    }
}

/// `max(0, 1 - d)` that lets NaN through so divergence is reported.
fn clamped_similarity(d: f64) -> f64 {
    if d >= 1.0 {
        0.0
    } else {
        1.0 - d
    }
}

/// Largest relative error between the analytic Siamese-loss gradient and
/// central finite differences (step 1e-6) on a seeded 5→4→4→3 network over
/// a small batch of pairs. Distances are scaled into (0, 1) first so the
/// clamp in the predicted similarity stays differentiable.
pub fn gradient_check(seed: u64) -> Result<f64> {
    use rand::Rng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let dims = [5, 4, 4, 3];
    let mut net = Net::init(dims, seed);
    let xs: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    net.refresh_mid_stats(&xs);
    let batch: Vec<(usize, usize, f64)> = vec![(0, 1, 0.3), (2, 3, 0.9), (4, 5, 0.5), (1, 4, 0.1)];
    let widest = batch
        .iter()
        .map(|&(a, b, _)| l2(&net.embed(&xs[a]), &net.embed(&xs[b])))
        .fold(0.0, f64::max);
    let (w3, b3) = net.offsets(2);
    for v in &mut net.theta[w3..b3] {
        *v *= 0.5 / widest.max(1e-12);
    }
    for &(a, b, _) in &batch {
        let d = l2(&net.embed(&xs[a]), &net.embed(&xs[b]));
        if !(d > 1e-3 && d < 0.99) {
            return Err(Error::invalid(format!("seed {seed} puts a pair at distance {d}, near a kink")));
        }
    }
    let mut grad = vec![0.0; net.theta.len()];
    net.batch_loss_grad(&xs, &batch, &mut grad);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..net.theta.len() {
        let orig = net.theta[i];
        net.theta[i] = orig + h;
        let up = net.mean_loss(&xs, &batch);
        net.theta[i] = orig - h;
        let down = net.mean_loss(&xs, &batch);
        net.theta[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
