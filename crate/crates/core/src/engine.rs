//! Online inference with per-layer attention memoization.
//!
//! For every layer the engine first asks the performance model whether
//! memoization can pay off. On layers that pass, each sequence's layer input
//! is embedded and looked up in the layer's index; a hit whose predicted
//! similarity clears the threshold reuses the stored APMs, everything else
//! falls back to full attention for that sequence only.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::embedder::{similarity_from_distance, Embedder};
use crate::error::{Error, Result};
use crate::index::AnnIndex;
use crate::model::{argmax, ToyTransformer};
use crate::profiler::{estimate_scaled, LayerProfile, Scaling, TimingEstimate, Workload};
use crate::report::{read_calibration, read_profiles, write_calibration, write_profiles};
use crate::store::ApmStore;
use crate::tensor::{attention_full, attention_memoized, LayerWeights, Matrix};

/// Named threshold settings; the named ones resolve through a
/// [`Calibration`] measured when the assets were built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoLevel {
    Conservative,
    Moderate,
    Aggressive,
    Custom,
}

impl MemoLevel {
    pub const NAMED: [MemoLevel; 3] = [MemoLevel::Conservative, MemoLevel::Moderate, MemoLevel::Aggressive];

    /// Percentile of the held-out predicted-similarity distribution used as
    /// this level's threshold.
    pub fn percentile(self) -> Option<f64> {
        match self {
            MemoLevel::Conservative => Some(90.0),
            MemoLevel::Moderate => Some(75.0),
            MemoLevel::Aggressive => Some(50.0),
            MemoLevel::Custom => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MemoLevel::Conservative => "conservative",
            MemoLevel::Moderate => "moderate",
            MemoLevel::Aggressive => "aggressive",
            MemoLevel::Custom => "custom",
        }
    }
}

impl FromStr for MemoLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conservative" => Ok(MemoLevel::Conservative),
            "moderate" => Ok(MemoLevel::Moderate),
            "aggressive" => Ok(MemoLevel::Aggressive),
            "custom" => Ok(MemoLevel::Custom),
            _ => Err(Error::invalid(format!("unknown memoization level {s:?}"))),
        }
    }
}

/// Thresholds for the named levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub conservative: f64,
    pub moderate: f64,
    pub aggressive: f64,
}

impl Calibration {
    /// Takes each level's percentile of `similarities`.
    pub fn from_similarities(similarities: &[f64]) -> Result<Self> {
        if similarities.is_empty() {
            return Err(Error::invalid("no similarities to calibrate on"));
        }
        let mut sorted = similarities.to_vec();
        sorted.sort_by(f64::total_cmp);
        let p = |level: MemoLevel| percentile(&sorted, level.percentile().unwrap());
        Ok(Self {
            conservative: p(MemoLevel::Conservative),
            moderate: p(MemoLevel::Moderate),
            aggressive: p(MemoLevel::Aggressive),
        })
    }

    pub fn threshold(&self, level: MemoLevel) -> Option<f64> {
        match level {
            MemoLevel::Conservative => Some(self.conservative),
            MemoLevel::Moderate => Some(self.moderate),
            MemoLevel::Aggressive => Some(self.aggressive),
            MemoLevel::Custom => None,
        }
    }
}

/// Linear interpolation between closest ranks of an ascending slice.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoConfig {
    pub threshold: f64,
    pub level: MemoLevel,
    /// Consult the performance model before attempting a layer.
    pub selective: bool,
    pub batch_size: usize,
    pub scaling: Scaling,
}

impl MemoConfig {
    pub fn with_threshold(threshold: f64) -> Result<Self> {
        let c = Self {
            threshold,
            level: MemoLevel::Custom,
            selective: false,
            batch_size: 32,
            scaling: Scaling::Linear,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_level(level: MemoLevel, calibration: &Calibration) -> Result<Self> {
        let threshold = calibration
            .threshold(level)
            .ok_or_else(|| Error::invalid("custom level needs an explicit threshold"))?;
        Ok(Self {
            level,
            ..Self::with_threshold(threshold)?
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LookupOutcome {
    Hit { record_id: u64, predicted_sim: f64 },
    Miss,
}

impl LookupOutcome {
    pub fn record_id(&self) -> Option<u64> {
        match self {
            LookupOutcome::Hit { record_id, .. } => Some(*record_id),
            LookupOutcome::Miss => None,
        }
    }
}

/// Strict gate; a zero threshold accepts every retrieved record.
fn passes(predicted: f64, threshold: f64) -> bool {
    threshold <= 0.0 || predicted > threshold
}

/// Per-layer counters and stage times accumulated over a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub attempted: bool,
    pub sequences: u64,
    pub hits: u64,
    pub misses: u64,
    pub embed_calls: u64,
    pub search_calls: u64,
    pub gather_calls: u64,
    pub embed: Duration,
    pub search: Duration,
    pub gather: Duration,
    pub attention: Duration,
    /// Residual, normalization and feed-forward.
    pub post: Duration,
}

impl LayerStats {
    fn new(layer: usize, attempted: bool) -> Self {
        Self {
            layer,
            attempted,
            ..Self::default()
        }
    }

    /// Hits over sequences seen by the layer.
    pub fn alpha(&self) -> f64 {
        if self.sequences == 0 {
            0.0
        } else {
            self.hits as f64 / self.sequences as f64
        }
    }

    pub fn overhead(&self) -> Duration {
        self.embed + self.search + self.gather
    }

    fn merge(&mut self, o: &LayerStats) {
        self.attempted |= o.attempted;
        self.sequences += o.sequences;
        self.hits += o.hits;
        self.misses += o.misses;
        self.embed_calls += o.embed_calls;
        self.search_calls += o.search_calls;
        self.gather_calls += o.gather_calls;
        self.embed += o.embed;
        self.search += o.search;
        self.gather += o.gather;
        self.attention += o.attention;
        self.post += o.post;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub start: usize,
    pub sequences: usize,
    pub token_embed: Duration,
    pub layers: Vec<LayerStats>,
    pub head: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferenceStats {
    pub batches: Vec<BatchStats>,
    pub total: Duration,
}

impl InferenceStats {
    pub fn sequences(&self) -> usize {
        self.batches.iter().map(|b| b.sequences).sum()
    }

    /// Per-layer totals over all batches.
    pub fn layers(&self) -> Vec<LayerStats> {
        let n = self.batches.first().map_or(0, |b| b.layers.len());
        let mut out: Vec<LayerStats> = (0..n).map(|l| LayerStats::new(l, false)).collect();
        for b in &self.batches {
            for (acc, s) in out.iter_mut().zip(&b.layers) {
                acc.merge(s);
            }
        }
        out
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.layers().iter().map(LayerStats::alpha).collect()
    }

    /// Memoization rate over all (sequence, layer) pairs.
    pub fn overall_alpha(&self) -> f64 {
        let layers = self.layers();
        let seqs: u64 = layers.iter().map(|l| l.sequences).sum();
        if seqs == 0 {
            return 0.0;
        }
        layers.iter().map(|l| l.hits).sum::<u64>() as f64 / seqs as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HitRecord {
    pub layer: usize,
    pub record_id: u64,
}

#[derive(Clone, Debug)]
pub struct InferenceRun {
    pub logits: Vec<Vec<f32>>,
    pub predictions: Vec<usize>,
    pub stats: InferenceStats,
    pub hit_log: Vec<HitRecord>,
    /// Layers that attempted memoization.
    pub active_layers: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselineTimings {
    pub token_embed: Duration,
    /// Attention plus the rest of each layer.
    pub layers: Vec<Duration>,
    pub attention: Vec<Duration>,
    pub head: Duration,
    pub total: Duration,
}

impl BaselineTimings {
    pub fn parts_sum(&self) -> Duration {
        self.token_embed + self.layers.iter().sum::<Duration>() + self.head
    }
}

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub logits: Vec<Vec<f32>>,
    pub predictions: Vec<usize>,
    pub timings: BaselineTimings,
}

/// Everything the engine needs for one layer.
pub struct LayerAssets {
    pub store: ApmStore,
    pub embedder: Embedder,
    pub index: AnnIndex,
}

pub struct MemoAssets {
    pub layers: Vec<LayerAssets>,
    pub profiles: Vec<LayerProfile>,
    pub calibration: Option<Calibration>,
}

pub fn layer_dir(root: &Path, layer: usize) -> PathBuf {
    root.join(format!("layer-{layer:02}"))
}

const PROFILES_FILE: &str = "profiles.tsv";
const CALIBRATION_FILE: &str = "levels.tsv";

impl MemoAssets {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn profile(&self, layer: usize) -> Option<&LayerProfile> {
        self.profiles.iter().find(|p| p.layer == layer)
    }

    pub fn total_records(&self) -> usize {
        self.layers.iter().map(|l| l.store.len()).sum()
    }

    /// Writes embedders, indexes, profiles and levels; stores are flushed.
    pub fn save(&mut self, root: &Path) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let dir = layer_dir(root, i);
            fs::create_dir_all(&dir)?;
            layer.store.flush()?;
            layer.embedder.save(&dir.join("embedder.bin"))?;
            layer.index.save(&dir.join("index.bin"))?;
        }
        write_profiles(&root.join(PROFILES_FILE), &self.profiles)?;
        if let Some(c) = &self.calibration {
            write_calibration(&root.join(CALIBRATION_FILE), c)?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let mut layers = Vec::new();
        while layer_dir(root, layers.len()).is_dir() {
            let dir = layer_dir(root, layers.len());
            layers.push(LayerAssets {
                store: ApmStore::open(&dir.join("store"))?,
                embedder: Embedder::load(&dir.join("embedder.bin"))?,
                index: AnnIndex::load(&dir.join("index.bin"))?,
            });
        }
        if layers.is_empty() {
            return Err(Error::invalid(format!("no layer assets under {}", root.display())));
        }
        let p = root.join(PROFILES_FILE);
        let profiles = if p.exists() { read_profiles(&p)? } else { Vec::new() };
        let c = root.join(CALIBRATION_FILE);
        let calibration = if c.exists() { Some(read_calibration(&c)?) } else { None };
        Ok(Self {
            layers,
            profiles,
            calibration,
        })
    }
}

fn elapsed(t: Instant) -> Duration {
    t.elapsed()
}

/// Embeds every hidden state, queries its nearest stored record and gates on
/// predicted similarity.
pub fn layer_lookup(
    hiddens: &[Matrix],
    embedder: &Embedder,
    index: &AnnIndex,
    threshold: f64,
) -> Result<Vec<LookupOutcome>> {
    let mut stats = LayerStats::default();
    lookup_timed(hiddens, embedder, index, threshold, &mut stats)
}

fn lookup_timed(
    hiddens: &[Matrix],
    embedder: &Embedder,
    index: &AnnIndex,
    threshold: f64,
    stats: &mut LayerStats,
) -> Result<Vec<LookupOutcome>> {
    if hiddens.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if embedder.output_dim() != index.dim() {
        return Err(Error::shape(format!(
            "embedder emits {} dimensions, index holds {}",
            embedder.output_dim(),
            index.dim()
        )));
    }
    let mut out = Vec::with_capacity(hiddens.len());
    for h in hiddens {
        let t = Instant::now();
        let f = embedder.embed(h)?;
        stats.embed += elapsed(t);
        stats.embed_calls += 1;

        let t = Instant::now();
        let found = index.query(&f, 1)?;
        stats.search += elapsed(t);
        stats.search_calls += 1;

        out.push(match found.first() {
            Some(r) => {
                let predicted_sim = similarity_from_distance(r.distance);
                if passes(predicted_sim, threshold) {
                    LookupOutcome::Hit {
                        record_id: r.record_id,
                        predicted_sim,
                    }
                } else {
                    LookupOutcome::Miss
                }
            }
            None => LookupOutcome::Miss,
        });
    }
    Ok(out)
}

/// Attention for a batch: hits reuse their records' APMs through one mapped
/// gather, misses compute from scratch. Output order follows the input.
pub fn mixed_attention(
    weights: &LayerWeights,
    hiddens: &[Matrix],
    outcomes: &[LookupOutcome],
    store: &ApmStore,
) -> Result<Vec<Matrix>> {
    let mut stats = LayerStats::default();
    mixed_timed(weights, hiddens, outcomes, store, &mut stats)
}

fn mixed_timed(
    weights: &LayerWeights,
    hiddens: &[Matrix],
    outcomes: &[LookupOutcome],
    store: &ApmStore,
    stats: &mut LayerStats,
) -> Result<Vec<Matrix>> {
    if outcomes.len() != hiddens.len() {
        return Err(Error::shape(format!(
            "{} outcomes for {} sequences",
            outcomes.len(),
            hiddens.len()
        )));
    }
    let mut out: Vec<Option<Matrix>> = vec![None; hiddens.len()];
    let hits: Vec<(usize, u64)> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.record_id().map(|id| (i, id)))
        .collect();
    if !hits.is_empty() {
        let ids: Vec<u64> = hits.iter().map(|h| h.1).collect();
        let t = Instant::now();
        let batch = store.gather_mapped(&ids)?;
        stats.gather += elapsed(t);
        stats.gather_calls += 1;

        let t = Instant::now();
        for (slot, &(i, _)) in hits.iter().enumerate() {
            out[i] = Some(attention_memoized(&hiddens[i], weights, &batch.record(slot))?);
        }
        stats.attention += elapsed(t);

        let t = Instant::now();
        batch.release()?;
        stats.gather += elapsed(t);
    }
    let t = Instant::now();
    for (i, o) in out.iter_mut().enumerate() {
        if o.is_none() {
            *o = Some(attention_full(&hiddens[i], weights)?.0);
        }
    }
    stats.attention += elapsed(t);
    stats.hits += hits.len() as u64;
    stats.misses += (hiddens.len() - hits.len()) as u64;
    Ok(out.into_iter().map(|m| m.expect("filled above")).collect())
}

/// The performance-model gate: memoize only when `T_atn·α − T_overhead > 0`.
/// Without a profile the layer is computed.
pub fn decide_layer(profile: Option<&LayerProfile>, est: &TimingEstimate) -> bool {
    match profile {
        Some(p) => est.t_atn_ms * p.alpha - est.t_overhead_ms > 0.0,
        None => {
            log::warn!("no profile for layer; memoization disabled there");
            false
        }
    }
}

/// Which layers attempt memoization for a workload.
pub fn plan_layers(assets: &MemoAssets, config: &MemoConfig, workload: Workload) -> Result<Vec<bool>> {
    (0..assets.num_layers())
        .map(|l| {
            if !config.selective {
                return Ok(true);
            }
            match assets.profile(l) {
                Some(p) => Ok(decide_layer(Some(p), &estimate_scaled(p, workload, config.scaling)?)),
                None => Ok(decide_layer(None, &TimingEstimate::default())),
            }
        })
        .collect()
}

fn embed_batch(model: &ToyTransformer, seqs: &[TokenSequence]) -> Result<Vec<Matrix>> {
    seqs.iter().map(|s| model.embed_tokens(s)).collect()
}

pub fn run_inference(
    model: &ToyTransformer,
    seqs: &[TokenSequence],
    assets: &MemoAssets,
    config: &MemoConfig,
) -> Result<InferenceRun> {
    config.validate()?;
    if assets.num_layers() != model.num_layers() {
        return Err(Error::invalid(format!(
            "assets cover {} layers, model has {}",
            assets.num_layers(),
            model.num_layers()
        )));
    }
    let active = plan_layers(assets, config, Workload::of(seqs))?;
    let start = Instant::now();
    let mut logits = Vec::with_capacity(seqs.len());
    let mut hit_log = Vec::new();
    let mut batches = Vec::new();

    for (b, chunk) in seqs.chunks(config.batch_size).enumerate() {
        let mut bs = BatchStats {
            start: b * config.batch_size,
            sequences: chunk.len(),
            ..BatchStats::default()
        };
        let t = Instant::now();
        let mut xs = embed_batch(model, chunk)?;
        bs.token_embed = elapsed(t);

        for (l, layer) in assets.layers.iter().enumerate() {
            let mut ls = LayerStats::new(l, active[l]);
            ls.sequences = chunk.len() as u64;
            let attn = if active[l] {
                let outcomes = lookup_timed(&xs, &layer.embedder, &layer.index, config.threshold, &mut ls)?;
                hit_log.extend(outcomes.iter().filter_map(|o| {
                    o.record_id().map(|record_id| HitRecord { layer: l, record_id })
                }));
                mixed_timed(model.layer(l), &xs, &outcomes, &layer.store, &mut ls)?
            } else {
                let t = Instant::now();
                let a = xs
                    .iter()
                    .map(|x| attention_full(x, model.layer(l)).map(|r| r.0))
                    .collect::<Result<Vec<_>>>()?;
                ls.attention = elapsed(t);
                ls.misses = chunk.len() as u64;
                a
            };
            let t = Instant::now();
            xs = xs
                .iter()
                .zip(&attn)
                .map(|(x, a)| model.post_attention(l, x, a))
                .collect::<Result<Vec<_>>>()?;
            ls.post = elapsed(t);
            bs.layers.push(ls);
        }
        let t = Instant::now();
        logits.extend(xs.iter().map(|x| model.logits(x)));
        bs.head = elapsed(t);
        batches.push(bs);
    }
    let stats = InferenceStats {
        batches,
        total: start.elapsed(),
    };
    Ok(InferenceRun {
        predictions: logits.iter().map(|l| argmax(l)).collect(),
        logits,
        stats,
        hit_log,
        active_layers: active,
    })
}

/// Plain forward passes with per-stage timers.
pub fn run_baseline(model: &ToyTransformer, seqs: &[TokenSequence]) -> Result<BaselineRun> {
    let n = model.num_layers();
    let mut timings = BaselineTimings {
        layers: vec![Duration::ZERO; n],
        attention: vec![Duration::ZERO; n],
        ..BaselineTimings::default()
    };
    let start = Instant::now();
    let mut logits = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let t = Instant::now();
        let mut x = model.embed_tokens(seq)?;
        timings.token_embed += elapsed(t);
        for l in 0..n {
            let t = Instant::now();
            let (attn, _) = attention_full(&x, model.layer(l))?;
            let ta = elapsed(t);
            x = model.post_attention(l, &x, &attn)?;
            timings.attention[l] += ta;
            timings.layers[l] += elapsed(t);
        }
        let t = Instant::now();
        logits.push(model.logits(&x));
        timings.head += elapsed(t);
    }
    timings.total = start.elapsed();
    Ok(BaselineRun {
        predictions: logits.iter().map(|l| argmax(l)).collect(),
        logits,
        timings,
    })
}

/// Mean over sequences of `‖a − b‖₂ / ‖b‖₂`, with `b` the baseline.
pub fn logit_deviation(logits: &[Vec<f32>], baseline: &[Vec<f32>]) -> Result<f64> {
    if logits.len() != baseline.len() {
        return Err(Error::shape(format!(
            "{} logit rows against {} baseline rows",
            logits.len(),
            baseline.len()
        )));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (a, b) in logits.iter().zip(baseline) {
        if a.len() != b.len() {
            return Err(Error::shape("logit vectors differ in length"));
        }
        let diff = a
            .iter()
            .zip(b)
            .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = b.iter().map(|y| f64::from(*y).powi(2)).sum::<f64>().sqrt();
        total += if norm > 0.0 { diff / norm } else { diff };
    }
    Ok(total / logits.len() as f64)
}

pub fn accuracy(predictions: &[usize], seqs: &[TokenSequence]) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    let right = predictions.iter().zip(seqs).filter(|(p, s)| **p == s.label).count();
    right as f64 / seqs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::EmbedderConfig;
    use crate::index::IndexConfig;
    use crate::store::StoreConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(hidden: usize, heads: usize, seed: u64) -> LayerWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LayerWeights::random(hidden, 16, heads, 1.5, &mut rng).unwrap()
    }

    fn hidden(l: usize, h: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_normal(l, h, 1.0, &mut rng)
    }

    fn embedder(h: usize) -> Embedder {
        Embedder::random(&EmbedderConfig {
            output_dim: 8,
            hidden_dims: [16, 16],
            ..EmbedderConfig::new(h)
        })
        .unwrap()
    }

    /// Store and index holding the true APMs and embeddings of `hs`.
    fn fixture(dir: &Path, w: &LayerWeights, hs: &[Matrix], emb: &Embedder) -> (ApmStore, AnnIndex) {
        let mut store = ApmStore::create(dir, StoreConfig::default()).unwrap();
        let mut index = AnnIndex::new(IndexConfig::new(emb.output_dim())).unwrap();
        for (i, h) in hs.iter().enumerate() {
            let (_, apms) = attention_full(h, w).unwrap();
            store.put_owned(100 + i as u64, &apms).unwrap();
            index.insert(100 + i as u64, &emb.embed(h).unwrap()).unwrap();
        }
        (store, index)
    }

    #[test]
    fn gate_endpoints() {
        let emb = embedder(8);
        let hs: Vec<Matrix> = (0..6).map(|s| hidden(5, 8, s)).collect();
        let w = weights(8, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        let (_, index) = fixture(dir.path(), &w, &hs[..3], &emb);
        let queries = &hs[3..];

        let none = layer_lookup(queries, &emb, &index, 1.0).unwrap();
        assert!(none.iter().all(|o| *o == LookupOutcome::Miss));
        let all = layer_lookup(queries, &emb, &index, 0.0).unwrap();
        assert!(all.iter().all(|o| o.record_id().is_some()));

        let empty = AnnIndex::new(IndexConfig::new(8)).unwrap();
        assert!(layer_lookup(queries, &emb, &empty, 0.0)
            .unwrap()
            .iter()
            .all(|o| *o == LookupOutcome::Miss));
        assert!(layer_lookup(&[], &emb, &index, 0.5).is_err());
        let wrong = AnnIndex::new(IndexConfig::new(9)).unwrap();
        assert!(matches!(layer_lookup(queries, &emb, &wrong, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn planted_duplicate_is_a_confident_hit() {
        let emb = embedder(8);
        let hs: Vec<Matrix> = (0..10).map(|s| hidden(6, 8, s)).collect();
        let w = weights(8, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        let (_, index) = fixture(dir.path(), &w, &hs, &emb);
        let out = layer_lookup(&hs[4..5], &emb, &index, 0.99).unwrap();
        match out[0] {
            LookupOutcome::Hit {
                record_id,
                predicted_sim,
            } => {
                assert_eq!(record_id, 104);
                assert_eq!(predicted_sim, 1.0);
            }
            LookupOutcome::Miss => panic!("expected a hit"),
        }
    }

    #[test]
    fn mixed_attention_matches_single_path_oracles() {
        let emb = embedder(8);
        let w = weights(8, 2, 3);
        let hs: Vec<Matrix> = (0..8).map(|s| hidden(7, 8, 50 + s)).collect();
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = fixture(dir.path(), &w, &hs, &emb);

        let full: Vec<Matrix> = hs.iter().map(|h| attention_full(h, &w).unwrap().0).collect();
        let misses = vec![LookupOutcome::Miss; hs.len()];
        assert_eq!(mixed_attention(&w, &hs, &misses, &store).unwrap(), full);

        let own: Vec<LookupOutcome> = (0..hs.len())
            .map(|i| LookupOutcome::Hit {
                record_id: 100 + i as u64,
                predicted_sim: 1.0,
            })
            .collect();
        assert_eq!(mixed_attention(&w, &hs, &own, &store).unwrap(), full);

        // alternate hits pointing at a foreign record and misses
        let mixed: Vec<LookupOutcome> = (0..hs.len())
            .map(|i| {
                if i % 2 == 0 {
                    LookupOutcome::Hit {
                        record_id: 100 + ((i + 3) % hs.len()) as u64,
                        predicted_sim: 0.5,
                    }
                } else {
                    LookupOutcome::Miss
                }
            })
            .collect();
        let got = mixed_attention(&w, &hs, &mixed, &store).unwrap();
        for (i, o) in mixed.iter().enumerate() {
            let want = match o.record_id() {
                Some(id) => {
                    let apms = store.get(id).unwrap();
                    let views: Vec<_> = apms.iter().map(|a| a.view()).collect();
                    attention_memoized(&hs[i], &w, &views).unwrap()
                }
                None => full[i].clone(),
            };
            assert_eq!(got[i], want, "sequence {i}");
        }

        let bogus = vec![
            LookupOutcome::Hit {
                record_id: 7,
                predicted_sim: 1.0,
            };
            hs.len()
        ];
        assert!(matches!(
            mixed_attention(&w, &hs, &bogus, &store),
            Err(Error::MissingRecord(7))
        ));
        assert!(mixed_attention(&w, &hs, &misses[..2], &store).is_err());
    }

    #[test]
    fn decide_layer_arithmetic() {
        let p = |alpha| LayerProfile {
            layer: 0,
            alpha,
            t_atn_ms: 100.0,
            t_overhead_ms: 20.0,
            reference_total_tokens: 10,
            reference_sequences: 1,
            threshold: 0.5,
        };
        let est = |p: &LayerProfile| TimingEstimate {
            t_atn_ms: p.t_atn_ms,
            t_overhead_ms: p.t_overhead_ms,
        };
        assert!(!decide_layer(Some(&p(0.0)), &est(&p(0.0))));
        assert!(!decide_layer(Some(&p(0.1)), &est(&p(0.1))));
        assert!(!decide_layer(Some(&p(0.2)), &est(&p(0.2))));
        assert!(decide_layer(Some(&p(0.3)), &est(&p(0.3))));
        assert!(!decide_layer(None, &est(&p(1.0))));
    }

    #[test]
    fn levels_and_config() {
        let sims: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let c = Calibration::from_similarities(&sims).unwrap();
        assert!((c.conservative - 0.9).abs() < 1e-12);
        assert!((c.moderate - 0.75).abs() < 1e-12);
        assert!((c.aggressive - 0.5).abs() < 1e-12);
        assert_eq!(MemoConfig::with_level(MemoLevel::Moderate, &c).unwrap().threshold, c.moderate);
        assert!(MemoConfig::with_level(MemoLevel::Custom, &c).is_err());
        assert!(MemoConfig::with_threshold(1.5).is_err());
        assert!(MemoConfig::with_threshold(-0.1).is_err());
        assert_eq!("moderate".parse::<MemoLevel>().unwrap(), MemoLevel::Moderate);
        assert!("loose".parse::<MemoLevel>().is_err());
        assert!(Calibration::from_similarities(&[]).is_err());
        assert_eq!(percentile(&[2.0], 75.0), 2.0);
    }

    #[test]
    fn deviation_and_accuracy() {
        let base = vec![vec![3.0f32, 4.0], vec![1.0, 0.0]];
        assert_eq!(logit_deviation(&base, &base).unwrap(), 0.0);
        let moved = vec![vec![3.0f32, 4.5], vec![1.0, 0.0]];
        assert!((logit_deviation(&moved, &base).unwrap() - 0.05).abs() < 1e-9);
        assert!(logit_deviation(&moved[..1], &base).is_err());
        let seqs = vec![
            TokenSequence {
                tokens: vec![1],
                label: 0,
            },
            TokenSequence {
                tokens: vec![1],
                label: 1,
            },
        ];
        assert_eq!(accuracy(&[0, 0], &seqs), 0.5);
    }
}
