//! Plain-text report formats. Every file starts with
//! `# memoattn <kind> v<version>`, then a tab-separated header row and data
//! rows. Further `#` lines are comments. Floats are written in shortest
//! round-trip form, so reading a file back yields the exact values.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::engine::{Calibration, HitRecord, InferenceStats, MemoLevel};
use crate::error::{Error, Result};
use crate::profiler::LayerProfile;

const PREFIX: &str = "# memoattn ";

#[derive(Clone, Debug, PartialEq)]
pub struct TextTable {
    pub kind: String,
    pub version: u32,
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn new(kind: &str, version: u32, columns: &[&str]) -> Self {
        Self {
            kind: kind.to_string(),
            version,
            comments: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn comment(&mut self, text: impl Into<String>) {
        self.comments.push(text.into());
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::shape(format!(
                "row of {} cells for {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        if row.iter().any(|c| c.contains(['\t', '\n'])) {
            return Err(Error::invalid("table cells cannot contain tabs or newlines"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = format!("{PREFIX}{} v{}\n", self.kind, self.version);
        for c in &self.comments {
            s.push_str(&format!("# {c}\n"));
        }
        s.push_str(&self.columns.join("\t"));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let (kind, version) = head
            .strip_prefix(PREFIX)
            .and_then(|rest| rest.rsplit_once(" v"))
            .ok_or_else(|| bad(format!("bad header line {head:?}")))?;
        let version: u32 = version.parse().map_err(|_| bad(format!("bad version in {head:?}")))?;
        let mut table = Self {
            kind: kind.to_string(),
            version,
            comments: Vec::new(),
            columns: Vec::new(),
            rows: Vec::new(),
        };
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                table.comments.push(c.trim_start().to_string());
                continue;
            }
            let cells: Vec<String> = line.split('\t').map(str::to_string).collect();
            if table.columns.is_empty() {
                table.columns = cells;
            } else if cells.len() != table.columns.len() {
                return Err(bad(format!("row {:?} has {} cells", line, cells.len())));
            } else {
                table.rows.push(cells);
            }
        }
        if table.columns.is_empty() {
            return Err(bad("missing column header".into()));
        }
        Ok(table)
    }

    /// Reads a table and checks its kind, version and columns.
    pub fn read(path: &Path, kind: &str, version: u32, columns: &[&str]) -> Result<Self> {
        let t = Self::parse(&fs::read_to_string(path)?, path)?;
        if t.kind != kind {
            return Err(Error::format(path, format!("expected a {kind} table, found {}", t.kind)));
        }
        if t.version != version {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: t.version,
                expected: version,
            });
        }
        if t.columns != columns {
            return Err(Error::format(path, format!("unexpected columns {:?}", t.columns)));
        }
        Ok(t)
    }

    fn cell<T: FromStr>(&self, row: usize, col: usize, path: &Path) -> Result<T> {
        let s = &self.rows[row][col];
        s.parse().map_err(|_| {
            Error::format(
                path,
                format!("cannot parse {s:?} in column {} of row {row}", self.columns[col]),
            )
        })
    }
}

fn cells(values: &[&dyn Display]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}

/// Parses a table's rows into typed values with `f(table, row)`.
fn read_rows<T>(
    path: &Path,
    kind: &str,
    version: u32,
    columns: &[&str],
    f: impl Fn(&TextTable, usize, &Path) -> Result<T>,
) -> Result<Vec<T>> {
    let t = TextTable::read(path, kind, version, columns)?;
    (0..t.rows.len()).map(|r| f(&t, r, path)).collect()
}

const PROFILE_COLUMNS: [&str; 7] = [
    "layer",
    "alpha",
    "t_atn_ms",
    "t_overhead_ms",
    "reference_total_tokens",
    "reference_sequences",
    "threshold",
];

pub fn write_profiles(path: &Path, profiles: &[LayerProfile]) -> Result<()> {
    let mut t = TextTable::new("profiles", 1, &PROFILE_COLUMNS);
    for p in profiles {
        t.push(cells(&[
            &p.layer,
            &p.alpha,
            &p.t_atn_ms,
            &p.t_overhead_ms,
            &p.reference_total_tokens,
            &p.reference_sequences,
            &p.threshold,
        ]))?;
    }
    t.write(path)
}

pub fn read_profiles(path: &Path) -> Result<Vec<LayerProfile>> {
    read_rows(path, "profiles", 1, &PROFILE_COLUMNS, |t, r, p| {
        let profile = LayerProfile {
            layer: t.cell(r, 0, p)?,
            alpha: t.cell(r, 1, p)?,
            t_atn_ms: t.cell(r, 2, p)?,
            t_overhead_ms: t.cell(r, 3, p)?,
            reference_total_tokens: t.cell(r, 4, p)?,
            reference_sequences: t.cell(r, 5, p)?,
            threshold: t.cell(r, 6, p)?,
        };
        profile.validate()?;
        Ok(profile)
    })
}

const LEVEL_COLUMNS: [&str; 3] = ["level", "percentile", "threshold"];

pub fn write_calibration(path: &Path, c: &Calibration) -> Result<()> {
    let mut t = TextTable::new("levels", 1, &LEVEL_COLUMNS);
    t.comment("thresholds are percentiles of held-out top-1 predicted similarity");
    for level in MemoLevel::NAMED {
        t.push(cells(&[
            &level.name(),
            &level.percentile().unwrap(),
            &c.threshold(level).unwrap(),
        ]))?;
    }
    t.write(path)
}

pub fn read_calibration(path: &Path) -> Result<Calibration> {
    let rows = read_rows(path, "levels", 1, &LEVEL_COLUMNS, |t, r, p| {
        Ok((t.cell::<MemoLevel>(r, 0, p)?, t.cell::<f64>(r, 2, p)?))
    })?;
    let get = |level| {
        rows.iter()
            .find(|(l, _)| *l == level)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::format(path, format!("missing level {}", level.name())))
    };
    Ok(Calibration {
        conservative: get(MemoLevel::Conservative)?,
        moderate: get(MemoLevel::Moderate)?,
        aggressive: get(MemoLevel::Aggressive)?,
    })
}

/// One line of the run report: one layer of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReportRow {
    pub batch: usize,
    pub layer: usize,
    pub attempted: bool,
    pub sequences: u64,
    pub hits: u64,
    pub misses: u64,
    pub alpha: f64,
    pub embed_ms: f64,
    pub search_ms: f64,
    pub gather_ms: f64,
    pub attention_ms: f64,
    pub post_ms: f64,
    /// Mean relative L2 logit deviation of the batch against the baseline.
    pub deviation: f64,
}

const RUN_COLUMNS: [&str; 13] = [
    "batch",
    "layer",
    "attempted",
    "sequences",
    "hits",
    "misses",
    "alpha",
    "embed_ms",
    "search_ms",
    "gather_ms",
    "attention_ms",
    "post_ms",
    "deviation",
];

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn run_report_rows(stats: &InferenceStats, logits: &[Vec<f32>], baseline: &[Vec<f32>]) -> Result<Vec<RunReportRow>> {
    let mut rows = Vec::new();
    for (b, batch) in stats.batches.iter().enumerate() {
        let span = batch.start..batch.start + batch.sequences;
        if span.end > logits.len() || span.end > baseline.len() {
            return Err(Error::shape("batch extends past the logits"));
        }
        let deviation = crate::engine::logit_deviation(&logits[span.clone()], &baseline[span])?;
        for l in &batch.layers {
            rows.push(RunReportRow {
                batch: b,
                layer: l.layer,
                attempted: l.attempted,
                sequences: l.sequences,
                hits: l.hits,
                misses: l.misses,
                alpha: l.alpha(),
                embed_ms: ms(l.embed),
                search_ms: ms(l.search),
                gather_ms: ms(l.gather),
                attention_ms: ms(l.attention),
                post_ms: ms(l.post),
                deviation,
            });
        }
    }
    Ok(rows)
}

pub fn write_run_report(path: &Path, rows: &[RunReportRow], comments: &[String]) -> Result<()> {
    let mut t = TextTable::new("run-report", 1, &RUN_COLUMNS);
    for c in comments {
        t.comment(c.clone());
    }
    for r in rows {
        t.push(cells(&[
            &r.batch,
            &r.layer,
            &r.attempted,
            &r.sequences,
            &r.hits,
            &r.misses,
            &r.alpha,
            &r.embed_ms,
            &r.search_ms,
            &r.gather_ms,
            &r.attention_ms,
            &r.post_ms,
            &r.deviation,
        ]))?;
    }
    t.write(path)
}

pub fn read_run_report(path: &Path) -> Result<Vec<RunReportRow>> {
    read_rows(path, "run-report", 1, &RUN_COLUMNS, |t, r, p| {
        Ok(RunReportRow {
            batch: t.cell(r, 0, p)?,
            layer: t.cell(r, 1, p)?,
            attempted: t.cell(r, 2, p)?,
            sequences: t.cell(r, 3, p)?,
            hits: t.cell(r, 4, p)?,
            misses: t.cell(r, 5, p)?,
            alpha: t.cell(r, 6, p)?,
            embed_ms: t.cell(r, 7, p)?,
            search_ms: t.cell(r, 8, p)?,
            gather_ms: t.cell(r, 9, p)?,
            attention_ms: t.cell(r, 10, p)?,
            post_ms: t.cell(r, 11, p)?,
            deviation: t.cell(r, 12, p)?,
        })
    })
}

const HIT_COLUMNS: [&str; 2] = ["layer", "record_id"];

pub fn write_hit_log(path: &Path, hits: &[HitRecord]) -> Result<()> {
    let mut t = TextTable::new("hit-log", 1, &HIT_COLUMNS);
    for h in hits {
        t.push(cells(&[&h.layer, &h.record_id]))?;
    }
    t.write(path)
}

pub fn read_hit_log(path: &Path) -> Result<Vec<HitRecord>> {
    read_rows(path, "hit-log", 1, &HIT_COLUMNS, |t, r, p| {
        Ok(HitRecord {
            layer: t.cell(r, 0, p)?,
            record_id: t.cell(r, 1, p)?,
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReuseCount {
    pub layer: usize,
    pub record_id: u64,
    pub count: u64,
}

/// Hit count of every catalogued record, zeros included. `catalog[layer]`
/// lists the record ids stored for that layer.
pub fn reuse_counts(hits: &[HitRecord], catalog: &[Vec<u64>]) -> Result<Vec<ReuseCount>> {
    let mut counts: HashMap<(usize, u64), u64> = HashMap::new();
    for h in hits {
        *counts.entry((h.layer, h.record_id)).or_default() += 1;
    }
    let mut out = Vec::new();
    for (layer, ids) in catalog.iter().enumerate() {
        for &id in ids {
            out.push(ReuseCount {
                layer,
                record_id: id,
                count: counts.remove(&(layer, id)).unwrap_or(0),
            });
        }
    }
    if let Some((_, id)) = counts.into_keys().min() {
        return Err(Error::MissingRecord(id));
    }
    Ok(out)
}

/// `(reuse count, number of records)` pairs in ascending reuse order.
pub fn reuse_histogram(counts: &[ReuseCount]) -> Vec<(u64, u64)> {
    let mut h: BTreeMap<u64, u64> = BTreeMap::new();
    for c in counts {
        *h.entry(c.count).or_default() += 1;
    }
    h.into_iter().collect()
}

const REUSE_COLUMNS: [&str; 3] = ["layer", "record_id", "count"];
const HISTOGRAM_COLUMNS: [&str; 2] = ["reuse_count", "records"];

pub fn write_reuse_counts(path: &Path, counts: &[ReuseCount]) -> Result<()> {
    let mut t = TextTable::new("reuse-counts", 1, &REUSE_COLUMNS);
    for c in counts {
        t.push(cells(&[&c.layer, &c.record_id, &c.count]))?;
    }
    t.write(path)
}

pub fn read_reuse_counts(path: &Path) -> Result<Vec<ReuseCount>> {
    read_rows(path, "reuse-counts", 1, &REUSE_COLUMNS, |t, r, p| {
        Ok(ReuseCount {
            layer: t.cell(r, 0, p)?,
            record_id: t.cell(r, 1, p)?,
            count: t.cell(r, 2, p)?,
        })
    })
}

pub fn write_reuse_histogram(path: &Path, histogram: &[(u64, u64)]) -> Result<()> {
    let mut t = TextTable::new("reuse-histogram", 1, &HISTOGRAM_COLUMNS);
    for (reuse, records) in histogram {
        t.push(cells(&[reuse, records]))?;
    }
    t.write(path)
}

pub fn read_reuse_histogram(path: &Path) -> Result<Vec<(u64, u64)>> {
    read_rows(path, "reuse-histogram", 1, &HISTOGRAM_COLUMNS, |t, r, p| {
        Ok((t.cell(r, 0, p)?, t.cell(r, 1, p)?))
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub alpha: f64,
    pub accuracy: f64,
    pub deviation: f64,
    pub speedup: f64,
}

const SWEEP_COLUMNS: [&str; 5] = ["threshold", "alpha", "accuracy", "deviation", "speedup"];

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut t = TextTable::new("sweep", 1, &SWEEP_COLUMNS);
    for r in rows {
        t.push(cells(&[&r.threshold, &r.alpha, &r.accuracy, &r.deviation, &r.speedup]))?;
    }
    t.write(path)
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    read_rows(path, "sweep", 1, &SWEEP_COLUMNS, |t, r, p| {
        Ok(SweepRow {
            threshold: t.cell(r, 0, p)?,
            alpha: t.cell(r, 1, p)?,
            accuracy: t.cell(r, 2, p)?,
            deviation: t.cell(r, 3, p)?,
            speedup: t.cell(r, 4, p)?,
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatherBenchRow {
    pub batch: usize,
    pub seq_len: usize,
    pub mapped_ms: f64,
    pub copy_ms: f64,
    pub speedup: f64,
    /// False when the mapped path fell back to copying.
    pub remapped: bool,
}

const GATHER_COLUMNS: [&str; 6] = ["batch", "seq_len", "mapped_ms", "copy_ms", "speedup", "remapped"];

pub fn write_gather_bench(path: &Path, rows: &[GatherBenchRow]) -> Result<()> {
    let mut t = TextTable::new("gather-bench", 1, &GATHER_COLUMNS);
    for r in rows {
        t.push(cells(&[&r.batch, &r.seq_len, &r.mapped_ms, &r.copy_ms, &r.speedup, &r.remapped]))?;
    }
    t.write(path)
}

pub fn read_gather_bench(path: &Path) -> Result<Vec<GatherBenchRow>> {
    read_rows(path, "gather-bench", 1, &GATHER_COLUMNS, |t, r, p| {
        Ok(GatherBenchRow {
            batch: t.cell(r, 0, p)?,
            seq_len: t.cell(r, 1, p)?,
            mapped_ms: t.cell(r, 2, p)?,
            copy_ms: t.cell(r, 3, p)?,
            speedup: t.cell(r, 4, p)?,
            remapped: t.cell(r, 5, p)?,
        })
    })
}

/// Default file name of a report kind inside an output directory.
pub fn report_path(dir: &Path, kind: &str) -> PathBuf {
    dir.join(format!("{kind}.tsv"))
}
