//! Offline pipeline: harvest APMs into per-layer stores, train one embedder
//! and one index per layer, calibrate the named thresholds and measure the
//! per-layer profiles the performance model runs on.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::embedder::{sample_pairs, similarity_from_distance, train_pooled, EmbedderConfig};
use crate::engine::{layer_dir, run_inference, Calibration, LayerAssets, MemoAssets, MemoConfig, MemoLevel};
use crate::error::{Error, Result};
use crate::index::{AnnIndex, IndexConfig};
use crate::model::ToyTransformer;
use crate::store::{ApmStore, StoreConfig};
use crate::tensor::{attention_full, attention_memoized, ApmRef};

/// How profile times are carried over to a different workload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// Both times scale with the ratio of total tokens.
    #[default]
    Linear,
    /// Attention time scales with the sum of squared sequence lengths.
    Quadratic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Workload {
    pub total_tokens: u64,
    pub sequences: u64,
}

impl Workload {
    pub fn of(seqs: &[TokenSequence]) -> Self {
        Self {
            total_tokens: seqs.iter().map(|s| s.tokens.len() as u64).sum(),
            sequences: seqs.len() as u64,
        }
    }

    fn squared_tokens(&self) -> f64 {
        if self.sequences == 0 {
            return 0.0;
        }
        (self.total_tokens as f64).powi(2) / self.sequences as f64
    }
}

/// Measured inputs of the performance model for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    /// Memoization rate at `threshold`.
    pub alpha: f64,
    /// Attention time that memoization can remove, over the reference corpus.
    pub t_atn_ms: f64,
    /// Embedding, search and gathering time over the reference corpus.
    pub t_overhead_ms: f64,
    pub reference_total_tokens: u64,
    pub reference_sequences: u64,
    pub threshold: f64,
}

impl LayerProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.t_atn_ms >= 0.0 && self.t_overhead_ms >= 0.0) {
            return Err(Error::invalid("profile times must be non-negative"));
        }
        if self.reference_total_tokens == 0 {
            return Err(Error::invalid("profile has zero reference tokens"));
        }
        Ok(())
    }

    /// `T_atn·α − T_overhead` at the profiled scale.
    pub fn benefit_ms(&self) -> f64 {
        self.t_atn_ms * self.alpha - self.t_overhead_ms
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TimingEstimate {
    pub t_atn_ms: f64,
    pub t_overhead_ms: f64,
}

/// Scales both profile times by `inference_total_tokens / reference_total_tokens`.
pub fn estimate(profile: &LayerProfile, inference_total_tokens: u64) -> Result<TimingEstimate> {
    profile.validate()?;
    let f = inference_total_tokens as f64 / profile.reference_total_tokens as f64;
    Ok(TimingEstimate {
        t_atn_ms: profile.t_atn_ms * f,
        t_overhead_ms: profile.t_overhead_ms * f,
    })
}

pub fn estimate_scaled(profile: &LayerProfile, workload: Workload, scaling: Scaling) -> Result<TimingEstimate> {
    match scaling {
        Scaling::Linear => estimate(profile, workload.total_tokens),
        Scaling::Quadratic => {
            let linear = estimate(profile, workload.total_tokens)?;
            if profile.reference_sequences == 0 {
                return Err(Error::invalid("quadratic scaling needs the reference sequence count"));
            }
            let reference = Workload {
                total_tokens: profile.reference_total_tokens,
                sequences: profile.reference_sequences,
            };
            Ok(TimingEstimate {
                t_atn_ms: profile.t_atn_ms * workload.squared_tokens() / reference.squared_tokens(),
                ..linear
            })
        }
    }
}

/// Mean-pooled layer inputs gathered while populating the stores.
#[derive(Clone, Debug, PartialEq)]
pub struct Harvest {
    pub record_ids: Vec<u64>,
    /// `pooled[layer][sequence]`
    pub pooled: Vec<Vec<Vec<f32>>>,
}

/// Runs the model over `corpus` and stores every layer's APMs under record
/// id `id_base + sequence index`, one store per layer.
pub fn harvest(model: &ToyTransformer, corpus: &[TokenSequence], stores: &mut [ApmStore], id_base: u64) -> Result<Harvest> {
    if stores.len() != model.num_layers() {
        return Err(Error::invalid(format!(
            "{} stores for {} layers",
            stores.len(),
            model.num_layers()
        )));
    }
    let mut pooled = vec![Vec::with_capacity(corpus.len()); model.num_layers()];
    let mut record_ids = Vec::with_capacity(corpus.len());
    for (i, seq) in corpus.iter().enumerate() {
        let id = id_base + i as u64;
        let (_, trace) = model.forward_traced(seq)?;
        for (l, t) in trace.iter().enumerate() {
            stores[l].put_owned(id, &t.apms)?;
            pooled[l].push(t.hidden.mean_rows());
        }
        record_ids.push(id);
    }
    Ok(Harvest { record_ids, pooled })
}

/// Top-1 predicted similarity of every sequence on every layer, keyed on the
/// plain forward pass. Layers with an empty index contribute nothing.
pub fn predicted_similarities(model: &ToyTransformer, corpus: &[TokenSequence], assets: &MemoAssets) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::with_capacity(corpus.len()); assets.num_layers()];
    for seq in corpus {
        let (_, trace) = model.forward_traced(seq)?;
        for (l, (t, a)) in trace.iter().zip(&assets.layers).enumerate() {
            let f = a.embedder.embed(&t.hidden)?;
            if let Some(r) = a.index.query(&f, 1)?.first() {
                out[l].push(similarity_from_distance(r.distance));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileOptions {
    pub batch_size: usize,
    /// Each attention timing is the minimum over this many runs.
    pub timing_repeats: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            timing_repeats: 3,
        }
    }
}

fn min_time<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<Duration> {
    let mut best = Duration::MAX;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(t.elapsed());
    }
    Ok(best)
}

/// Per layer, the time full attention spends beyond the memoized path.
pub fn memoizable_attention_ms(model: &ToyTransformer, corpus: &[TokenSequence], repeats: usize) -> Result<Vec<f64>> {
    let mut full = vec![Duration::ZERO; model.num_layers()];
    let mut memo = vec![Duration::ZERO; model.num_layers()];
    for seq in corpus {
        let (_, trace) = model.forward_traced(seq)?;
        for (l, t) in trace.iter().enumerate() {
            let w = model.layer(l);
            let views: Vec<ApmRef<'_>> = t.apms.iter().map(|a| a.view()).collect();
            full[l] += min_time(repeats, || attention_full(&t.hidden, w))?;
            memo[l] += min_time(repeats, || attention_memoized(&t.hidden, w, &views))?;
        }
    }
    Ok(full
        .iter()
        .zip(&memo)
        .map(|(f, m)| f.saturating_sub(*m).as_secs_f64() * 1e3)
        .collect())
}

/// Measures α and the overhead through the engine itself (every layer
/// attempted) and the memoizable attention time from plain passes.
pub fn measure_profile(
    model: &ToyTransformer,
    held_out: &[TokenSequence],
    assets: &MemoAssets,
    threshold: f64,
) -> Result<Vec<LayerProfile>> {
    measure_profile_with(model, held_out, assets, threshold, ProfileOptions::default())
}

pub fn measure_profile_with(
    model: &ToyTransformer,
    held_out: &[TokenSequence],
    assets: &MemoAssets,
    threshold: f64,
    options: ProfileOptions,
) -> Result<Vec<LayerProfile>> {
    if held_out.is_empty() {
        return Err(Error::invalid("cannot profile on an empty corpus"));
    }
    let config = MemoConfig {
        batch_size: options.batch_size,
        ..MemoConfig::with_threshold(threshold)?
    };
    let run = run_inference(model, held_out, assets, &config)?;
    let t_atn = memoizable_attention_ms(model, held_out, options.timing_repeats)?;
    let workload = Workload::of(held_out);
    Ok(run
        .stats
        .layers()
        .iter()
        .zip(t_atn)
        .map(|(s, t_atn_ms)| LayerProfile {
            layer: s.layer,
            alpha: s.alpha(),
            t_atn_ms,
            t_overhead_ms: s.overhead().as_secs_f64() * 1e3,
            reference_total_tokens: workload.total_tokens,
            reference_sequences: workload.sequences,
            threshold,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildConfig {
    /// `input_dim` is taken from the model.
    pub embedder: EmbedderConfig,
    pub pairs_per_anchor: usize,
    /// `dim` is taken from the embedder.
    pub index: IndexConfig,
    pub store: StoreConfig,
    /// Threshold level the stored profiles are measured at.
    pub profile_level: MemoLevel,
    pub profile: ProfileOptions,
    pub seed: u64,
}

impl BuildConfig {
    pub fn new(hidden: usize) -> Self {
        let embedder = EmbedderConfig::new(hidden);
        Self {
            index: IndexConfig::new(embedder.output_dim),
            embedder,
            pairs_per_anchor: 16,
            store: StoreConfig::default(),
            profile_level: MemoLevel::Moderate,
            profile: ProfileOptions::default(),
            seed: 0,
        }
    }
}

/// Asset sizes and build costs for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBuildSummary {
    pub layer: usize,
    pub records: usize,
    pub db_bytes: u64,
    pub pairs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_time: Duration,
    pub index_time: Duration,
}

/// The whole offline path: harvest, pair sampling, embedder training, index
/// build, threshold calibration and profiling. Writes everything under `dir`.
pub fn build_assets(
    model: &ToyTransformer,
    train: &[TokenSequence],
    held_out: &[TokenSequence],
    config: &BuildConfig,
    dir: &Path,
) -> Result<(MemoAssets, Vec<LayerBuildSummary>)> {
    if held_out.is_empty() {
        return Err(Error::invalid("held-out corpus is empty"));
    }
    fs::create_dir_all(dir)?;
    let mut stores = (0..model.num_layers())
        .map(|l| ApmStore::create(&layer_dir(dir, l).join("store"), config.store))
        .collect::<Result<Vec<_>>>()?;
    if let Some(s) = stores.iter().find(|s| !s.is_empty()) {
        return Err(Error::invalid(format!("store {} is already populated", s.dir().display())));
    }
    let harvested = harvest(model, train, &mut stores, 0)?;
    for s in &mut stores {
        s.flush()?;
    }

    let mut layers = Vec::with_capacity(stores.len());
    let mut summaries = Vec::with_capacity(stores.len());
    for (l, store) in stores.into_iter().enumerate() {
        let pairs = sample_pairs(&store, config.pairs_per_anchor, config.seed ^ (l as u64) << 32)?;
        let ecfg = EmbedderConfig {
            input_dim: model.config().hidden,
            seed: config.embedder.seed.wrapping_add(l as u64),
            ..config.embedder.clone()
        };
        let t = Instant::now();
        let (embedder, report) = train_pooled(&ecfg, &harvested.pooled[l], &pairs)?;
        let train_time = t.elapsed();

        let t = Instant::now();
        let keys: Vec<(u64, Vec<f32>)> = harvested
            .record_ids
            .iter()
            .zip(&harvested.pooled[l])
            .map(|(id, p)| (*id, embedder.embed_pooled(p)))
            .collect();
        let icfg = IndexConfig {
            dim: embedder.output_dim(),
            ..config.index.clone()
        };
        let index = AnnIndex::build(icfg, &keys)?;
        let index_time = t.elapsed();
        log::info!(
            "layer {l}: {} records, loss {:.4} -> {:.4}",
            store.len(),
            report.initial_loss,
            report.final_loss()
        );
        summaries.push(LayerBuildSummary {
            layer: l,
            records: store.len(),
            db_bytes: store.total_bytes(),
            pairs: pairs.len(),
            initial_loss: report.initial_loss,
            final_loss: report.final_loss(),
            train_time,
            index_time,
        });
        layers.push(LayerAssets { store, embedder, index });
    }
    let mut assets = MemoAssets {
        layers,
        profiles: Vec::new(),
        calibration: None,
    };

    let sims: Vec<f64> = predicted_similarities(model, held_out, &assets)?.concat();
    let calibration = Calibration::from_similarities(&sims)?;
    let threshold = calibration
        .threshold(config.profile_level)
        .unwrap_or(calibration.moderate);
    assets.calibration = Some(calibration);
    assets.profiles = measure_profile_with(model, held_out, &assets, threshold, config.profile)?;
    assets.save(dir)?;
    Ok((assets, summaries))
}
