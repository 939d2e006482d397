use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use memoattn_core::corpus::{read_corpus, read_text, write_corpus};
use memoattn_core::engine::{accuracy, logit_deviation, BaselineRun, InferenceRun};
use memoattn_core::profiler::Scaling;
use memoattn_core::report::{
    read_hit_log, report_path, reuse_counts, reuse_histogram, run_report_rows, write_gather_bench, write_hit_log,
    write_reuse_counts, write_reuse_histogram, write_run_report, write_sweep, GatherBenchRow, SweepRow, TextTable,
};
use memoattn_core::store::detected_page_size;
use memoattn_core::tensor::{softmax_rows, Matrix};
use memoattn_core::{
    build_assets, generate, measure_profile, run_baseline, run_inference, ApmStore, BuildConfig, CorpusSpec,
    LabelRule, MemoAssets, MemoConfig, MemoLevel, ModelConfig, StoreConfig, TokenSequence, ToyTransformer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::{manifest_path, RunManifest};
use crate::{BenchStoreArgs, BuildArgs, GenArgs, InferArgs, ReuseArgs, ServeArgs, SweepArgs};

pub const MODEL_FILE: &str = "model.bin";
pub const HELD_OUT_FILE: &str = "held-out.tsv";

fn sibling_manifest(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Vec<TokenSequence>> {
    let seqs = read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    ensure!(!seqs.is_empty(), "corpus {} is empty", path.display());
    Ok(seqs)
}

pub fn gen(args: &GenArgs) -> Result<()> {
    let mut m = RunManifest::start("gen", args)?;
    m.seed("corpus", args.seed);
    let seqs = match &args.from_text {
        Some(text) => {
            m.input(text);
            read_text(text, args.vocab_size, args.seq_len)?
        }
        None => {
            let label_rule = match args.label_rule.as_str() {
                "template-id" => LabelRule::TemplateId,
                "parity" => LabelRule::Parity,
                other => bail!("unknown label rule {other:?}; expected template-id or parity"),
            };
            generate(&CorpusSpec {
                vocab_size: args.vocab_size,
                seq_len: args.seq_len,
                num_sequences: args.num_sequences,
                num_templates: args.templates,
                mutation_rate: args.mutation_rate,
                seed: args.seed,
                label_rule,
            })?
        }
    };
    ensure_parent(&args.corpus)?;
    write_corpus(&args.corpus, &seqs)?;
    m.output(&args.corpus);
    println!("wrote {} sequences to {}", seqs.len(), args.corpus.display());
    m.finish(&sibling_manifest(&args.corpus))
}

pub fn build(args: &BuildArgs) -> Result<()> {
    ensure!(
        args.held_out > 0.0 && args.held_out < 1.0,
        "--held-out must be a fraction in (0, 1)"
    );
    let level: MemoLevel = args.level.parse()?;
    let mut m = RunManifest::start("build", args)?;
    m.seed("model", args.seed);
    m.input(&args.corpus);
    let seqs = load_corpus(&args.corpus)?;
    let held_n = ((seqs.len() as f64 * args.held_out).ceil() as usize).min(seqs.len() - 1);
    ensure!(held_n > 0, "corpus too small to hold out any sequences");
    let (train, held) = seqs.split_at(seqs.len() - held_n);

    let max_len = args
        .seq_len
        .unwrap_or_else(|| seqs.iter().map(|s| s.tokens.len()).max().unwrap_or(1));
    let vocab_size = seqs.iter().flat_map(|s| s.tokens.iter()).max().map_or(2, |&t| t + 1).max(2);
    let num_classes = seqs.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut model = ToyTransformer::new(ModelConfig {
        vocab_size,
        max_len,
        hidden: args.hidden_dim,
        num_heads: args.heads,
        num_layers: args.layers,
        ffn_dim: args.ffn_dim.unwrap_or(args.hidden_dim),
        num_classes,
        attn_gain: args.attn_gain,
        seed: args.seed,
    })?;
    model.fit_head(train)?;

    let mut cfg = BuildConfig::new(args.hidden_dim);
    cfg.embedder.epochs = args.epochs;
    cfg.embedder.learning_rate = args.learning_rate;
    cfg.embedder.seed = args.seed;
    cfg.pairs_per_anchor = args.pairs_per_anchor;
    cfg.profile_level = level;
    cfg.seed = args.seed;
    cfg.store = StoreConfig::default();

    let dir = &args.assets_dir;
    fs::create_dir_all(dir)?;
    let (assets, summaries) = build_assets(&model, train, held, &cfg, dir)
        .with_context(|| format!("building assets in {}", dir.display()))?;
    model.save(&dir.join(MODEL_FILE))?;
    write_corpus(&dir.join(HELD_OUT_FILE), held)?;

    let mut table = TextTable::new(
        "build-summary",
        1,
        &["layer", "records", "db_bytes", "pairs", "initial_loss", "final_loss", "train_s", "index_s"],
    );
    for s in &summaries {
        table.push(vec![
            s.layer.to_string(),
            s.records.to_string(),
            s.db_bytes.to_string(),
            s.pairs.to_string(),
            format!("{:.6}", s.initial_loss),
            format!("{:.6}", s.final_loss),
            format!("{:.3}", s.train_time.as_secs_f64()),
            format!("{:.3}", s.index_time.as_secs_f64()),
        ])?;
    }
    let summary_path = dir.join("build-summary.tsv");
    table.write(&summary_path)?;

    println!(
        "{} training / {} held-out sequences, {} layers, {} records total",
        train.len(),
        held.len(),
        assets.num_layers(),
        assets.total_records()
    );
    println!("{:>5} {:>8} {:>10} {:>10} {:>10}", "layer", "records", "db MiB", "train s", "index s");
    for s in &summaries {
        println!(
            "{:>5} {:>8} {:>10.1} {:>10.2} {:>10.2}",
            s.layer,
            s.records,
            s.db_bytes as f64 / (1 << 20) as f64,
            s.train_time.as_secs_f64(),
            s.index_time.as_secs_f64()
        );
    }
    if let Some(c) = &assets.calibration {
        println!(
            "levels: conservative {:.4}, moderate {:.4}, aggressive {:.4}",
            c.conservative, c.moderate, c.aggressive
        );
    }
    for p in &assets.profiles {
        println!(
            "layer {} profile at threshold {:.4}: alpha {:.3}, T_atn {:.2} ms, T_overhead {:.2} ms",
            p.layer, p.threshold, p.alpha, p.t_atn_ms, p.t_overhead_ms
        );
    }
    for out in [MODEL_FILE, HELD_OUT_FILE, "profiles.tsv", "levels.tsv", "build-summary.tsv"] {
        m.output(&dir.join(out));
    }
    m.finish(&manifest_path(dir, "build"))
}

struct Served {
    model: ToyTransformer,
    assets: MemoAssets,
    seqs: Vec<TokenSequence>,
    held_out: Option<Vec<TokenSequence>>,
}

fn load_served(args: &ServeArgs) -> Result<Served> {
    ensure!(args.repeats > 0, "--repeats must be positive");
    let model = ToyTransformer::load(&args.assets_dir.join(MODEL_FILE))
        .with_context(|| format!("loading model from {}", args.assets_dir.display()))?;
    let assets = MemoAssets::load(&args.assets_dir)
        .with_context(|| format!("loading assets from {}", args.assets_dir.display()))?;
    let seqs = load_corpus(&args.corpus)?;
    Ok(Served {
        model,
        assets,
        seqs,
        held_out: None,
    })
}

fn memo_config(args: &ServeArgs, base: MemoConfig) -> Result<MemoConfig> {
    let scaling = match args.scaling.as_str() {
        "linear" => Scaling::Linear,
        "quadratic" => Scaling::Quadratic,
        other => bail!("unknown scaling {other:?}; expected linear or quadratic"),
    };
    let c = MemoConfig {
        selective: args.selective,
        batch_size: args.batch_size,
        scaling,
        ..base
    };
    c.validate()?;
    Ok(c)
}

/// Profiles are measured at one threshold; selective decisions at another
/// need them re-measured on the held-out split.
fn align_profiles(s: &mut Served, dir: &Path, config: &MemoConfig) -> Result<()> {
    if !config.selective || s.assets.profiles.iter().all(|p| p.threshold == config.threshold) {
        return Ok(());
    }
    if s.held_out.is_none() {
        s.held_out = Some(load_corpus(&dir.join(HELD_OUT_FILE))?);
    }
    log::info!("re-measuring layer profiles at threshold {}", config.threshold);
    s.assets.profiles = measure_profile(&s.model, s.held_out.as_ref().unwrap(), &s.assets, config.threshold)?;
    Ok(())
}

fn fastest_baseline(s: &Served, repeats: usize) -> Result<BaselineRun> {
    let mut best: Option<BaselineRun> = None;
    for _ in 0..repeats {
        let run = run_baseline(&s.model, &s.seqs)?;
        if best.as_ref().is_none_or(|b| run.timings.total < b.timings.total) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn fastest_inference(s: &Served, config: &MemoConfig, repeats: usize) -> Result<InferenceRun> {
    let mut best: Option<InferenceRun> = None;
    for _ in 0..repeats {
        let run = run_inference(&s.model, &s.seqs, &s.assets, config)?;
        if best.as_ref().is_none_or(|b| run.stats.total < b.stats.total) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let serve = &args.serve;
    let mut m = RunManifest::start("infer", args)?;
    m.input(&serve.corpus);
    m.input(&serve.assets_dir);
    let mut s = load_served(serve)?;
    let base = match (args.threshold, &args.level) {
        (Some(t), _) => MemoConfig::with_threshold(t)?,
        (None, level) => {
            let level: MemoLevel = level.as_deref().unwrap_or("moderate").parse()?;
            let calibration = s
                .assets
                .calibration
                .context("assets carry no level calibration; pass --threshold")?;
            MemoConfig::with_level(level, &calibration)?
        }
    };
    let config = memo_config(serve, base)?;
    align_profiles(&mut s, &serve.assets_dir, &config)?;

    let baseline = fastest_baseline(&s, serve.repeats)?;
    let run = fastest_inference(&s, &config, serve.repeats)?;
    let deviation = logit_deviation(&run.logits, &baseline.logits)?;
    let acc_base = accuracy(&baseline.predictions, &s.seqs);
    let acc_memo = accuracy(&run.predictions, &s.seqs);
    let speedup = baseline.timings.total.as_secs_f64() / run.stats.total.as_secs_f64();

    fs::create_dir_all(&serve.report_out)?;
    let comments = vec![
        format!("level {} threshold {}", config.level.name(), config.threshold),
        format!("selective {} batch_size {}", config.selective, config.batch_size),
        format!(
            "baseline_ms {:.3} memo_ms {:.3} speedup {speedup:.4}",
            ms(baseline.timings.total),
            ms(run.stats.total)
        ),
        format!("deviation {deviation:.6} accuracy_baseline {acc_base:.4} accuracy_memo {acc_memo:.4}"),
    ];
    let rows = run_report_rows(&run.stats, &run.logits, &baseline.logits)?;
    let report = report_path(&serve.report_out, "run-report");
    write_run_report(&report, &rows, &comments)?;
    let hits = report_path(&serve.report_out, "hit-log");
    write_hit_log(&hits, &run.hit_log)?;

    println!(
        "{} sequences, level {} (threshold {:.4}), selective {}",
        s.seqs.len(),
        config.level.name(),
        config.threshold,
        config.selective
    );
    println!(
        "baseline {:.2} ms, memoized {:.2} ms, speedup {speedup:.3}x",
        ms(baseline.timings.total),
        ms(run.stats.total)
    );
    println!("logit deviation {deviation:.5}, accuracy {acc_base:.4} -> {acc_memo:.4}");
    println!(
        "{:>5} {:>6} {:>7} {:>9} {:>9} {:>9} {:>10} {:>9} {:>12}",
        "layer", "memo", "alpha", "embed", "search", "gather", "attention", "post", "base attn"
    );
    for l in run.stats.layers() {
        println!(
            "{:>5} {:>6} {:>7.3} {:>9.2} {:>9.2} {:>9.2} {:>10.2} {:>9.2} {:>12.2}",
            l.layer,
            if run.active_layers[l.layer] { "on" } else { "off" },
            l.alpha(),
            ms(l.embed),
            ms(l.search),
            ms(l.gather),
            ms(l.attention),
            ms(l.post),
            ms(baseline.timings.attention[l.layer])
        );
    }
    println!("stage times in ms summed over batches; reports in {}", serve.report_out.display());

    m.output(&report);
    m.output(&hits);
    m.finish(&manifest_path(&serve.report_out, "infer"))
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    ensure!(!args.thresholds.is_empty(), "threshold grid is empty");
    let serve = &args.serve;
    let mut m = RunManifest::start("sweep", args)?;
    m.input(&serve.corpus);
    m.input(&serve.assets_dir);
    let mut s = load_served(serve)?;
    let baseline = fastest_baseline(&s, serve.repeats)?;
    let mut rows = Vec::with_capacity(args.thresholds.len());
    println!("{:>9} {:>7} {:>9} {:>10} {:>8}", "threshold", "alpha", "accuracy", "deviation", "speedup");
    for &t in &args.thresholds {
        let config = memo_config(serve, MemoConfig::with_threshold(t)?)?;
        align_profiles(&mut s, &serve.assets_dir, &config)?;
        let run = fastest_inference(&s, &config, serve.repeats)?;
        let row = SweepRow {
            threshold: t,
            alpha: run.stats.overall_alpha(),
            accuracy: accuracy(&run.predictions, &s.seqs),
            deviation: logit_deviation(&run.logits, &baseline.logits)?,
            speedup: baseline.timings.total.as_secs_f64() / run.stats.total.as_secs_f64(),
        };
        println!(
            "{:>9} {:>7.3} {:>9.4} {:>10.5} {:>8.3}",
            t, row.alpha, row.accuracy, row.deviation, row.speedup
        );
        rows.push(row);
    }
    fs::create_dir_all(&serve.report_out)?;
    let out = report_path(&serve.report_out, "sweep");
    write_sweep(&out, &rows)?;
    m.output(&out);
    m.finish(&manifest_path(&serve.report_out, "sweep"))
}

pub fn reuse_report(args: &ReuseArgs) -> Result<()> {
    let mut m = RunManifest::start("reuse-report", args)?;
    let log_path = args
        .hit_log
        .clone()
        .unwrap_or_else(|| report_path(&args.report_out, "hit-log"));
    m.input(&log_path);
    m.input(&args.assets_dir);
    ensure!(log_path.exists(), "hit log {} not found; run infer first", log_path.display());
    let hits = read_hit_log(&log_path)?;
    let assets = MemoAssets::load(&args.assets_dir)?;
    let catalog: Vec<Vec<u64>> = assets
        .layers
        .iter()
        .map(|l| l.store.records().iter().map(|r| r.id).collect())
        .collect();
    let counts = reuse_counts(&hits, &catalog)?;
    let histogram = reuse_histogram(&counts);

    fs::create_dir_all(&args.report_out)?;
    let counts_path = report_path(&args.report_out, "reuse-counts");
    let hist_path = report_path(&args.report_out, "reuse-histogram");
    write_reuse_counts(&counts_path, &counts)?;
    write_reuse_histogram(&hist_path, &histogram)?;

    let used: Vec<u64> = counts.iter().map(|c| c.count).filter(|&c| c > 0).collect();
    let low = used.iter().filter(|&&c| c <= 2).count();
    println!(
        "{} hits on {} distinct records out of {}",
        hits.len(),
        used.len(),
        counts.len()
    );
    if !used.is_empty() {
        println!(
            "{:.1}% of hit records reused at most twice",
            100.0 * low as f64 / used.len() as f64
        );
    }
    println!("{:>6} {:>8}", "reuses", "records");
    for (reuses, records) in &histogram {
        println!("{reuses:>6} {records:>8}");
    }
    m.output(&counts_path);
    m.output(&hist_path);
    m.finish(&manifest_path(&args.report_out, "reuse-report"))
}

fn bench_store_for(dir: &Path, records: u64, l: usize, seed: u64) -> Result<ApmStore> {
    let mut store = ApmStore::create(dir, StoreConfig::default())?;
    if store.len() as u64 >= records {
        return Ok(store);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ l as u64);
    for id in store.len() as u64..records {
        let apm = softmax_rows(&Matrix::random_normal(l, l, 2.0, &mut rng));
        store.put(id, &[memoattn_core::tensor::ApmRef::new(l, apm.data())?])?;
    }
    store.flush()?;
    Ok(store)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

pub fn bench_store(args: &BenchStoreArgs) -> Result<()> {
    ensure!(args.records > 0 && args.repeats > 0, "--records and --repeats must be positive");
    let mut m = RunManifest::start("bench-store", args)?;
    m.seed("records", args.seed);
    let mut rows = Vec::new();
    println!("page size {} bytes", detected_page_size());
    println!(
        "{:>6} {:>6} {:>11} {:>11} {:>9} {:>9}",
        "batch", "L", "mapped ms", "copy ms", "speedup", "remapped"
    );
    for &l in &args.seq_lens {
        let dir = args.store_dir.join(format!("L{l}"));
        let store = bench_store_for(&dir, args.records, l, args.seed)?;
        m.input(&dir);
        for &batch in &args.batches {
            let ids: Vec<u64> = (0..batch as u64).map(|i| (i * 7919) % args.records).collect();
            let copy = store.gather_copy(&ids)?;
            let mapped = store.gather_mapped(&ids)?;
            let per = l * l;
            for i in 0..ids.len() {
                ensure!(
                    mapped.payload(i) == &copy.data()[i * per..(i + 1) * per],
                    "mapped and copied bytes differ for record {}",
                    ids[i]
                );
            }
            let remapped = mapped.is_mapped();
            mapped.release()?;
            drop(copy);

            let (mut tm, mut tc) = (Vec::new(), Vec::new());
            for _ in 0..args.repeats {
                let t = Instant::now();
                store.gather_mapped(&ids)?.release()?;
                tm.push(t.elapsed().as_secs_f64() * 1e3);
                let t = Instant::now();
                drop(std::hint::black_box(store.gather_copy(&ids)?));
                tc.push(t.elapsed().as_secs_f64() * 1e3);
            }
            let row = GatherBenchRow {
                batch,
                seq_len: l,
                mapped_ms: median(tm),
                copy_ms: median(tc),
                speedup: 0.0,
                remapped,
            };
            let row = GatherBenchRow {
                speedup: row.copy_ms / row.mapped_ms,
                ..row
            };
            println!(
                "{:>6} {:>6} {:>11.4} {:>11.4} {:>9.1} {:>9}",
                row.batch, row.seq_len, row.mapped_ms, row.copy_ms, row.speedup, row.remapped
            );
            rows.push(row);
        }
    }
    fs::create_dir_all(&args.report_out)?;
    let out = report_path(&args.report_out, "gather-bench");
    write_gather_bench(&out, &rows)?;
    m.output(&out);
    m.finish(&manifest_path(&args.report_out, "bench-store"))
}
