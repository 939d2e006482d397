//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS / FAIL / SKIP line each; exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p memoattn-core --test acceptance -- 3 4`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use memoattn_core::corpus::{generate, CorpusSpec, LabelRule, TokenSequence};
use memoattn_core::embedder::{gradient_check, sample_pairs, train_pooled, EmbedderConfig};
use memoattn_core::engine::{
    accuracy, decide_layer, logit_deviation, run_baseline, run_inference, MemoAssets, MemoConfig, MemoLevel,
};
use memoattn_core::index::{exhaustive_query, AnnIndex, IndexConfig};
use memoattn_core::model::{ModelConfig, ToyTransformer};
use memoattn_core::profiler::{build_assets, estimate, harvest, measure_profile, BuildConfig, LayerProfile};
use memoattn_core::engine::HitRecord;
use memoattn_core::report::reuse_counts;
use memoattn_core::similarity::{
    memoization_rate, similarity_score, similarity_score_multihead, tv_distance,
};
use memoattn_core::store::{ApmStore, StoreConfig};
use memoattn_core::tensor::{attention_full, attention_memoized, Apm, ApmRef, LayerWeights, Matrix};
use memoattn_core::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The library default of 0.1 oscillates on these corpora, whose pairwise
/// similarities sit in a narrow band.
const EMBEDDER_LR: f64 = 0.003;

struct Verdict {
    pass: bool,
    skipped: bool,
    detail: String,
}

impl Verdict {
    fn check(pass: bool, detail: String) -> Self {
        Self {
            pass,
            skipped: false,
            detail,
        }
    }

    fn skip(detail: String) -> Self {
        Self {
            pass: true,
            skipped: true,
            detail,
        }
    }
}

/// Shared state: the gather store is built once for criteria 3 and 4.
struct Ctx {
    root: tempfile::TempDir,
    gather_store: Option<ApmStore>,
}

impl Ctx {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn(&mut Ctx) -> Result<Verdict>,
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn corpus(n: usize, seq_len: usize, templates: usize, mutation_rate: f64, seed: u64) -> Vec<TokenSequence> {
    generate(&CorpusSpec {
        vocab_size: 1000,
        seq_len,
        num_sequences: n,
        num_templates: templates,
        mutation_rate,
        seed,
        label_rule: LabelRule::TemplateId,
    })
    .expect("valid corpus spec")
}

fn model(seq_len: usize, layers: usize, classes: usize, seed: u64) -> ToyTransformer {
    ToyTransformer::new(ModelConfig {
        vocab_size: 1000,
        max_len: seq_len,
        hidden: 64,
        num_heads: 2,
        num_layers: layers,
        ffn_dim: 64,
        num_classes: classes,
        attn_gain: 1.5,
        seed,
    })
    .expect("valid model config")
}

/// Trained model plus assets over `train`, with a disjoint evaluation split.
struct Pipeline {
    model: ToyTransformer,
    assets: MemoAssets,
    eval: Vec<TokenSequence>,
}

struct PipelineSpec {
    seq_len: usize,
    layers: usize,
    templates: usize,
    mutation_rate: f64,
    train: usize,
    held_out: usize,
    eval: usize,
    epochs: usize,
    pairs_per_anchor: usize,
    seed: u64,
}

fn pipeline(spec: &PipelineSpec, dir: &Path) -> Result<Pipeline> {
    let all = corpus(
        spec.train + spec.held_out + spec.eval,
        spec.seq_len,
        spec.templates,
        spec.mutation_rate,
        spec.seed,
    );
    let (train, rest) = all.split_at(spec.train);
    let (held_out, eval) = rest.split_at(spec.held_out);
    let mut model = model(spec.seq_len, spec.layers, spec.templates, spec.seed + 1);
    model.fit_head(train)?;
    let mut cfg = BuildConfig::new(64);
    cfg.embedder.epochs = spec.epochs;
    cfg.embedder.learning_rate = EMBEDDER_LR;
    cfg.pairs_per_anchor = spec.pairs_per_anchor;
    cfg.seed = spec.seed;
    let (assets, _) = build_assets(&model, train, held_out, &cfg, dir)?;
    Ok(Pipeline {
        model,
        assets,
        eval: eval.to_vec(),
    })
}

fn c1_memoized_identity(_: &mut Ctx) -> Result<Verdict> {
    let mut mismatched = Vec::new();
    for cfg in 0..100u64 {
        let mut r = rng(cfg);
        let heads = r.gen_range(1..=4);
        let head_dim = r.gen_range(1..=16);
        let l = r.gen_range(1..=64);
        let gain = r.gen_range(0.5..3.0);
        let w = LayerWeights::random(heads * head_dim, 32, heads, gain, &mut r)?;
        let x = Matrix::random_normal(l, heads * head_dim, 1.0, &mut r);
        let (full, apms) = attention_full(&x, &w)?;
        let views: Vec<ApmRef<'_>> = apms.iter().map(Apm::view).collect();
        let memo = attention_memoized(&x, &w, &views)?;
        if !bits_equal(full.data(), memo.data()) {
            mismatched.push(cfg);
        }
    }
    Ok(Verdict::check(
        mismatched.is_empty(),
        format!("100 configurations, bit-exact mismatches: {mismatched:?}"),
    ))
}

fn random_apm(l: usize, r: &mut ChaCha8Rng) -> Apm {
    let mut data: Vec<f32> = (0..l * l).map(|_| r.gen::<f32>().powi(3)).collect();
    for row in data.chunks_mut(l) {
        let s: f32 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Apm::from_vec(l, data).expect("normalized rows")
}

fn c2_similarity_suite(_: &mut Ctx) -> Result<Verdict> {
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-6 {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };
    expect("TV([1,0],[0,1])", tv_distance(&[1.0, 0.0], &[0.0, 1.0])?, 1.0);
    expect("TV([.5,.5],[1,0])", tv_distance(&[0.5, 0.5], &[1.0, 0.0])?, 0.5);
    expect("TV(p,p)", tv_distance(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5])?, 0.0);
    let eye = Apm::from_vec(2, vec![1.0, 0.0, 0.0, 1.0])?;
    let flip = Apm::from_vec(2, vec![0.0, 1.0, 1.0, 0.0])?;
    let uni = Apm::uniform(2);
    expect("SC(I,I)", similarity_score(&eye, &eye)?.value(), 1.0);
    expect("SC(I,flip)", similarity_score(&eye, &flip)?.value(), 0.0);
    expect("SC(I,uniform)", similarity_score(&eye, &uni)?.value(), 0.5);
    expect(
        "multihead mean",
        similarity_score_multihead(&[eye.clone(), eye.clone()], &[eye.clone(), flip.clone()])?.value(),
        0.5,
    );
    expect("ms = 42/(100*1)", memoization_rate(42, 100, 1)?.value(), 0.42);

    let mut r = rng(2);
    for t in 0..300 {
        let l = r.gen_range(1..=24);
        let (a, b, c) = (random_apm(l, &mut r), random_apm(l, &mut r), random_apm(l, &mut r));
        let ab = similarity_score(&a, &b)?.value();
        let ba = similarity_score(&b, &a)?.value();
        let ac = similarity_score(&a, &c)?.value();
        let bc = similarity_score(&b, &c)?.value();
        let aa = similarity_score(&a, &a)?.value();
        if (ab - ba).abs() > 1e-6 {
            failures.push(format!("asymmetric at trial {t}"));
        }
        if aa != 1.0 {
            failures.push(format!("SC(A,A) = {aa} at trial {t}"));
        }
        if !(0.0..=1.0).contains(&ab) {
            failures.push(format!("SC out of range at trial {t}"));
        }
        if (1.0 - ac) > (1.0 - ab) + (1.0 - bc) + 1e-6 {
            failures.push(format!("triangle bound violated at trial {t}"));
        }
    }
    Ok(Verdict::check(
        failures.is_empty(),
        if failures.is_empty() {
            "hand cases exact, 300 random triples satisfy symmetry/identity/range/triangle".into()
        } else {
            failures.join("; ")
        },
    ))
}

const GATHER_L: usize = 512;
const GATHER_RECORDS: u64 = 1024;

fn gather_store(ctx: &mut Ctx) -> Result<&ApmStore> {
    if ctx.gather_store.is_none() {
        let mut store = ApmStore::create(&ctx.dir("gather"), StoreConfig::default())?;
        let mut r = rng(3);
        let mut data = vec![0.0f32; GATHER_L * GATHER_L];
        for id in 0..GATHER_RECORDS {
            for row in data.chunks_mut(GATHER_L) {
                let mut s = 0.0f32;
                for v in row.iter_mut() {
                    *v = r.gen::<f32>();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            store.put(id, &[ApmRef::new(GATHER_L, &data)?])?;
        }
        store.flush()?;
        ctx.gather_store = Some(store);
    }
    Ok(ctx.gather_store.as_ref().unwrap())
}

fn c3_gather_equivalence(ctx: &mut Ctx) -> Result<Verdict> {
    let store = gather_store(ctx)?;
    let bytes = store.total_bytes();
    let mut r = rng(4);
    let mut mismatches = 0;
    let mut mapped_lists = 0;
    for trial in 0..500 {
        let len = if trial == 0 { 0 } else { r.gen_range(1..=24) };
        let ids: Vec<u64> = (0..len).map(|_| r.gen_range(0..GATHER_RECORDS)).collect();
        let copy = store.gather_copy(&ids)?;
        let mapped = store.gather_mapped(&ids)?;
        mapped_lists += usize::from(mapped.is_mapped());
        let same = match mapped.as_dense() {
            Some(dense) => bits_equal(dense, copy.data()),
            None => (0..ids.len()).all(|i| bits_equal(mapped.payload(i), &copy.data()[i * GATHER_L * GATHER_L..][..GATHER_L * GATHER_L])),
        };
        if !same {
            mismatches += 1;
        }
        mapped.release()?;
    }
    let path = if store.mapping_available() { "remapped" } else { "copy fallback" };
    Ok(Verdict::check(
        mismatches == 0 && bytes >= 1_000_000_000,
        format!(
            "store {:.2} GB, 500 id lists ({mapped_lists} via page remapping, path: {path}), {mismatches} byte mismatches",
            bytes as f64 / 1e9
        ),
    ))
}

fn c4_gather_speed(ctx: &mut Ctx) -> Result<Verdict> {
    let store = gather_store(ctx)?;
    if !store.mapping_available() {
        return Ok(Verdict::skip("SKIPPED: page remapping unavailable on this platform".into()));
    }
    let mut r = rng(5);
    let mut mapped_ms = Vec::new();
    let mut copy_ms = Vec::new();
    for _ in 0..21 {
        let ids: Vec<u64> = sample(&mut r, GATHER_RECORDS as usize, 64)
            .into_iter()
            .map(|i| i as u64)
            .collect();
        let t = Instant::now();
        let b = store.gather_mapped(&ids)?;
        let remapped = b.is_mapped();
        b.release()?;
        mapped_ms.push(ms(t.elapsed()));
        if !remapped {
            return Ok(Verdict::skip("SKIPPED: remapping failed at runtime, copy fallback used".into()));
        }
        let t = Instant::now();
        drop(std::hint::black_box(store.gather_copy(&ids)?));
        copy_ms.push(ms(t.elapsed()));
    }
    let (m, c) = (median(mapped_ms), median(copy_ms));
    let speedup = c / m;
    Ok(Verdict::check(
        speedup >= 10.0,
        format!("batch 64 x L=512: mapped {m:.3} ms, copy {c:.2} ms, speedup {speedup:.0}x (floor 10x)"),
    ))
}

fn c5_search_quality(ctx: &mut Ctx) -> Result<Verdict> {
    let (db_n, query_n, seq_len) = (5000, 200, 64);
    let all = corpus(db_n + query_n, seq_len, 50, 0.2, 50);
    let (db, queries) = all.split_at(db_n);
    let model = model(seq_len, 1, 50, 51);
    let mut stores = vec![ApmStore::create(&ctx.dir("search"), StoreConfig::default())?];
    let harvested = harvest(&model, db, &mut stores, 0)?;
    let store = &stores[0];
    let pairs = sample_pairs(store, 8, 52)?;
    let cfg = EmbedderConfig {
        epochs: 10,
        learning_rate: EMBEDDER_LR,
        seed: 53,
        ..EmbedderConfig::new(64)
    };
    let (embedder, report) = train_pooled(&cfg, &harvested.pooled[0], &pairs)?;
    let keys: Vec<(u64, Vec<f32>)> = harvested
        .record_ids
        .iter()
        .zip(&harvested.pooled[0])
        .map(|(id, p)| (*id, embedder.embed_pooled(p)))
        .collect();
    let index = AnnIndex::build(IndexConfig::new(embedder.output_dim()), &keys)?;
    let db_apms: Vec<Vec<Apm>> = (0..db_n as u64).map(|id| store.get(id)).collect::<Result<_>>()?;

    let mut gap = 0.0;
    let (mut fast, mut slow) = (Duration::ZERO, Duration::ZERO);
    for q in queries {
        let (_, trace) = model.forward_traced(q)?;
        let t = Instant::now();
        let f = embedder.embed(&trace[0].hidden)?;
        let hit = index.query(&f, 1)?[0].record_id;
        fast += t.elapsed();

        let t = Instant::now();
        let mut best = 0.0f64;
        for rec in &db_apms {
            best = best.max(similarity_score_multihead(&trace[0].apms, rec)?.value());
        }
        slow += t.elapsed();
        let got = similarity_score_multihead(&trace[0].apms, &db_apms[hit as usize])?.value();
        gap += best - got;
    }
    let gap = gap / query_n as f64;
    let ratio = slow.as_secs_f64() / fast.as_secs_f64();
    Ok(Verdict::check(
        gap < 0.1 && ratio >= 50.0,
        format!(
            "{db_n} records, {query_n} queries: mean SC gap {gap:.4} (< 0.1), search {:.3} ms vs exhaustive {:.1} ms per query = {ratio:.0}x (>= 50x); embedder loss {:.4} -> {:.4}",
            ms(fast) / query_n as f64,
            ms(slow) / query_n as f64,
            report.initial_loss,
            report.final_loss()
        ),
    ))
}

fn c6_ann_recall(_: &mut Ctx) -> Result<Verdict> {
    let dim = 128;
    let mut r = rng(6);
    let gaussian = |r: &mut ChaCha8Rng| -> Vec<f32> {
        (0..dim)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, r))
            .collect()
    };
    let data: Vec<(u64, Vec<f32>)> = (0..10_000u64).map(|i| (i, gaussian(&mut r))).collect();
    let queries: Vec<Vec<f32>> = (0..1000).map(|_| gaussian(&mut r)).collect();
    let t = Instant::now();
    let index = AnnIndex::build(IndexConfig::new(dim), &data)?;
    let build = t.elapsed();
    let mut hits = 0;
    let mut times = Vec::with_capacity(queries.len());
    for q in &queries {
        let t = Instant::now();
        let got = index.query(q, 1)?;
        times.push(ms(t.elapsed()));
        let want = exhaustive_query(data.iter().map(|(i, v)| (*i, v.as_slice())), q, 1)?;
        hits += usize::from(got[0].record_id == want[0].record_id);
    }
    let recall = hits as f64 / queries.len() as f64;
    let worst = times.iter().cloned().fold(0.0, f64::max);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    Ok(Verdict::check(
        recall >= 0.95 && worst < 2.0,
        format!(
            "10000 x 128-d, M=16 efC=200 efS=64: recall@1 {recall:.3} (>= 0.95), query mean {mean:.3} ms, max {worst:.3} ms (< 2 ms), build {:.1} s",
            build.as_secs_f64()
        ),
    ))
}

fn c7_gradients(_: &mut Ctx) -> Result<Verdict> {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        worst = worst.max(gradient_check(seed)?);
    }
    Ok(Verdict::check(
        worst < 1e-4,
        format!("20 micro-networks, worst relative error {worst:.2e} (< 1e-4)"),
    ))
}

const SWEEP: [f64; 6] = [0.0, 0.5, 0.8, 0.9, 0.99, 1.0];

fn planted_spec() -> PipelineSpec {
    PipelineSpec {
        seq_len: 256,
        layers: 2,
        templates: 16,
        mutation_rate: 0.2,
        train: 400,
        held_out: 100,
        eval: 200,
        epochs: 20,
        pairs_per_anchor: 16,
        seed: 80,
    }
}

fn c8_threshold_sweep(ctx: &mut Ctx) -> Result<Verdict> {
    let p = pipeline(&planted_spec(), &ctx.dir("sweep"))?;
    let base = run_baseline(&p.model, &p.eval)?;
    let mut rows = Vec::new();
    for t in SWEEP {
        let run = run_inference(&p.model, &p.eval, &p.assets, &MemoConfig::with_threshold(t)?)?;
        rows.push((t, run.stats.overall_alpha(), logit_deviation(&run.logits, &base.logits)?));
    }
    let alpha_ok = rows.windows(2).all(|w| w[1].1 <= w[0].1);
    let dev_ok = rows.windows(2).all(|w| w[1].2 <= w[0].2);
    let ends_ok = rows[0].1 == 1.0 && rows[5].1 == 0.0 && rows[5].2 == 0.0;
    let table: Vec<String> = rows
        .iter()
        .map(|(t, a, d)| format!("{t}: a={a:.3} dev={d:.4}"))
        .collect();
    Ok(Verdict::check(
        alpha_ok && dev_ok && ends_ok,
        format!(
            "alpha non-increasing {alpha_ok}, deviation non-increasing with threshold {dev_ok}, endpoints {ends_ok} [{}]",
            table.join(", ")
        ),
    ))
}

fn c9_end_to_end(ctx: &mut Ctx) -> Result<Verdict> {
    let p = pipeline(&planted_spec(), &ctx.dir("e2e"))?;
    let calibration = p.assets.calibration.expect("build calibrates levels");
    let config = MemoConfig {
        selective: true,
        ..MemoConfig::with_level(MemoLevel::Moderate, &calibration)?
    };
    let mut base_times = Vec::new();
    let mut memo_times = Vec::new();
    let mut last = None;
    for _ in 0..3 {
        let base = run_baseline(&p.model, &p.eval)?;
        base_times.push(base.timings.total);
        let run = run_inference(&p.model, &p.eval, &p.assets, &config)?;
        memo_times.push(run.stats.total);
        last = Some((base, run));
    }
    let (base, run) = last.unwrap();
    let (tb, tm) = (
        base_times.iter().min().copied().unwrap(),
        memo_times.iter().min().copied().unwrap(),
    );
    let dev = logit_deviation(&run.logits, &base.logits)?;
    let acc_base = accuracy(&base.predictions, &p.eval);
    let acc_memo = accuracy(&run.predictions, &p.eval);
    let drop = acc_base - acc_memo;
    let alphas: Vec<String> = run.stats.alphas().iter().map(|a| format!("{a:.3}")).collect();
    Ok(Verdict::check(
        tm < tb && dev < 0.05 && drop < 0.02,
        format!(
            "moderate threshold {:.4}, layers active {:?}, alpha [{}]: memo {:.0} ms vs baseline {:.0} ms (speedup {:.3}), deviation {dev:.4} (< 0.05), accuracy {acc_base:.3} -> {acc_memo:.3} (drop < 0.02)",
            config.threshold,
            run.active_layers,
            alphas.join(", "),
            ms(tm),
            ms(tb),
            tb.as_secs_f64() / tm.as_secs_f64()
        ),
    ))
}

fn c10_selective(ctx: &mut Ctx) -> Result<Verdict> {
    let spec = PipelineSpec {
        seq_len: 16,
        layers: 2,
        templates: 16,
        mutation_rate: 0.2,
        train: 400,
        held_out: 100,
        eval: 400,
        epochs: 10,
        pairs_per_anchor: 16,
        seed: 100,
    };
    let mut p = pipeline(&spec, &ctx.dir("selective"))?;
    let poisoned = 1;
    let cfg = p.assets.layers[poisoned].index.config().clone();
    p.assets.layers[poisoned].index = AnnIndex::new(cfg)?;
    let calibration = p.assets.calibration.expect("build calibrates levels");
    let held: Vec<TokenSequence> = corpus(600, 16, 16, 0.2, 100)[400..500].to_vec();
    p.assets.profiles = measure_profile(&p.model, &held, &p.assets, calibration.moderate)?;

    let on = MemoConfig {
        selective: true,
        ..MemoConfig::with_level(MemoLevel::Moderate, &calibration)?
    };
    let off = MemoConfig {
        selective: false,
        ..on.clone()
    };
    let (mut t_on, mut t_off) = (Vec::new(), Vec::new());
    let mut on_run = None;
    for _ in 0..5 {
        let a = run_inference(&p.model, &p.eval, &p.assets, &on)?;
        t_on.push(a.stats.total);
        let b = run_inference(&p.model, &p.eval, &p.assets, &off)?;
        t_off.push(b.stats.total);
        on_run = Some(a);
    }
    let (a, b) = (*t_on.iter().min().unwrap(), *t_off.iter().min().unwrap());
    let stats = on_run.unwrap().stats.layers();
    let s = &stats[poisoned];
    let calls = s.embed_calls + s.search_calls + s.gather_calls;
    Ok(Verdict::check(
        a < b && calls == 0,
        format!(
            "selective on {:.1} ms vs off {:.1} ms, poisoned layer profile alpha {:.3}, lookup calls with selective on: {calls}",
            ms(a),
            ms(b),
            p.assets.profile(poisoned).map_or(f64::NAN, |p| p.alpha)
        ),
    ))
}

fn c11_performance_model(_: &mut Ctx) -> Result<Verdict> {
    let mut profile = LayerProfile {
        layer: 0,
        alpha: 0.0,
        t_atn_ms: 567.2 - 32.2 - 47.3,
        t_overhead_ms: 38.4 + 1.0 + 15.1,
        reference_total_tokens: 1,
        reference_sequences: 1,
        threshold: 0.0,
    };
    let mut wrong = Vec::new();
    for (alpha, want) in [
        (1.0, true),
        (0.5, true),
        (0.2, true),
        (0.12, true),
        (0.10, false),
        (0.05, false),
        (0.0, false),
    ] {
        profile.alpha = alpha;
        let est = estimate(&profile, 1)?;
        if decide_layer(Some(&profile), &est) != want {
            wrong.push(alpha);
        }
    }
    Ok(Verdict::check(
        wrong.is_empty(),
        format!(
            "T_atn {:.1} ms, overhead {:.1} ms, break-even alpha {:.4}; wrong decisions at {wrong:?}",
            profile.t_atn_ms,
            profile.t_overhead_ms,
            profile.t_overhead_ms / profile.t_atn_ms
        ),
    ))
}

fn c12_reuse(ctx: &mut Ctx) -> Result<Verdict> {
    let spec = PipelineSpec {
        seq_len: 32,
        layers: 2,
        templates: 16,
        mutation_rate: 1.0,
        train: 1000,
        held_out: 200,
        eval: 500,
        epochs: 10,
        pairs_per_anchor: 16,
        seed: 120,
    };
    let p = pipeline(&spec, &ctx.dir("reuse"))?;
    let calibration = p.assets.calibration.expect("build calibrates levels");
    let run = run_inference(
        &p.model,
        &p.eval,
        &p.assets,
        &MemoConfig::with_level(MemoLevel::Moderate, &calibration)?,
    )?;
    let catalog: Vec<Vec<u64>> = p
        .assets
        .layers
        .iter()
        .map(|l| l.store.records().iter().map(|r| r.id).collect())
        .collect();
    let counts = reuse_counts(&run.hit_log, &catalog)?;
    let used: Vec<u64> = counts.iter().map(|c| c.count).filter(|&c| c > 0).collect();
    let few = used.iter().filter(|&&c| c <= 2).count();
    let frac = few as f64 / used.len().max(1) as f64;
    let max = used.iter().copied().max().unwrap_or(0);
    let hits: Vec<&HitRecord> = run.hit_log.iter().collect();
    Ok(Verdict::check(
        !used.is_empty() && frac >= 0.9,
        format!(
            "{} hits on {} distinct records: {:.1}% reused <= 2 times (>= 90%), max reuse {max}",
            hits.len(),
            used.len(),
            100.0 * frac
        ),
    ))
}

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { id: 1, name: "memoized-path identity", limit: secs(10), run: c1_memoized_identity },
        Criterion { id: 2, name: "similarity metric suite", limit: secs(1), run: c2_similarity_suite },
        Criterion { id: 3, name: "gather byte-equivalence", limit: secs(120), run: c3_gather_equivalence },
        Criterion { id: 4, name: "gather scaling", limit: secs(120), run: c4_gather_speed },
        Criterion { id: 5, name: "embedding search quality", limit: secs(900), run: c5_search_quality },
        Criterion { id: 6, name: "ANN recall", limit: secs(120), run: c6_ann_recall },
        Criterion { id: 7, name: "gradient correctness", limit: secs(30), run: c7_gradients },
        Criterion { id: 8, name: "threshold sweep monotonicity", limit: secs(600), run: c8_threshold_sweep },
        Criterion { id: 9, name: "end-to-end speedup", limit: secs(1200), run: c9_end_to_end },
        Criterion { id: 10, name: "selective-memoization benefit", limit: secs(600), run: c10_selective },
        Criterion { id: 11, name: "performance model on reference figures", limit: secs(1), run: c11_performance_model },
        Criterion { id: 12, name: "reuse-frequency report", limit: secs(600), run: c12_reuse },
    ]
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx {
        root: tempfile::tempdir().expect("temp dir"),
        gather_store: None,
    };
    let mut failed = Vec::new();
    for c in criteria() {
        if !wanted.is_empty() && !wanted.contains(&c.id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut ctx)));
        let took = start.elapsed();
        let (status, detail) = match outcome {
            Ok(Ok(v)) if v.skipped => ("SKIP", v.detail),
            Ok(Ok(v)) if v.pass && took < c.limit => ("PASS", v.detail),
            Ok(Ok(v)) if v.pass => ("FAIL", format!("{} [over time limit]", v.detail)),
            Ok(Ok(v)) => ("FAIL", v.detail),
            Ok(Err(e)) => ("FAIL", format!("error: {e}")),
            Err(_) => ("FAIL", "panicked".to_string()),
        };
        if status == "FAIL" {
            failed.push(c.id);
        }
        println!(
            "{status} criterion {:>2} {} ({:.1} s, limit {} s): {detail}",
            c.id,
            c.name,
            took.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
