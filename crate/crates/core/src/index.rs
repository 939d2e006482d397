//! Index database: HNSW approximate nearest-neighbour search over feature
//! vectors, plus the exhaustive scan used as its quality oracle.
//!
//! The graph follows Malkov & Yashunin: nodes get a random top layer with
//! geometrically decaying probability, search descends greedily through the
//! upper layers and runs a beam search of width `ef` on layer 0. Neighbours are
//! chosen with the diversity heuristic, topping up with pruned candidates when
//! the heuristic keeps fewer than `M`. Layer 0 allows `2M` links per node.
//!
//! Levels are a pure function of `(seed, insertion index)`, so a build is
//! reproducible without carrying RNG state. Ties on distance are broken by the
//! lower record id everywhere.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MIDX";
const VERSION: u32 = 1;
const MAX_LEVEL: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub dim: usize,
    pub max_neighbors: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl IndexConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            max_neighbors: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_neighbors < 2 {
            return Err(Error::invalid("max_neighbors must be at least 2"));
        }
        if self.ef_search == 0 || self.ef_construction == 0 {
            return Err(Error::invalid("ef parameters must be positive"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryResult {
    pub record_id: u64,
    /// Euclidean distance in embedding space.
    pub distance: f64,
}

#[derive(Clone, Copy, Debug)]
struct Cand {
    dist: f32,
    id: u64,
    idx: u32,
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        let d = a[i] - b[i];
        tail += d * d;
    }
    acc.iter().sum::<f32>() + tail
}

fn exact_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Clone, Debug)]
pub struct AnnIndex {
    config: IndexConfig,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    /// `links[node][layer]` holds neighbour node indices.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
    by_id: HashMap<u64, u32>,
}

impl AnnIndex {
    pub fn new(config: IndexConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            ids: Vec::new(),
            vectors: Vec::new(),
            links: Vec::new(),
            entry: None,
            max_level: 0,
            by_id: HashMap::new(),
        })
    }

    /// Builds an index by inserting `vectors` in order.
    pub fn build<V: AsRef<[f32]>>(config: IndexConfig, vectors: &[(u64, V)]) -> Result<Self> {
        let mut index = Self::new(config)?;
        for (id, v) in vectors {
            index.insert(*id, v.as_ref())?;
        }
        Ok(index)
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Sets the beam width used by [`AnnIndex::query`].
    pub fn set_ef_search(&mut self, ef: usize) -> Result<()> {
        if ef == 0 {
            return Err(Error::invalid("ef_search must be positive"));
        }
        self.config.ef_search = ef;
        Ok(())
    }

    fn vec_of(&self, idx: u32) -> &[f32] {
        let d = self.config.dim;
        &self.vectors[idx as usize * d..(idx as usize + 1) * d]
    }

    pub fn vector(&self, id: u64) -> Option<&[f32]> {
        self.by_id.get(&id).map(|&i| self.vec_of(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> + '_ {
        (0..self.ids.len() as u32).map(move |i| (self.ids[i as usize], self.vec_of(i)))
    }

    /// Number of links of `id` on each of its layers.
    pub fn degrees(&self, id: u64) -> Option<Vec<usize>> {
        self.by_id
            .get(&id)
            .map(|&i| self.links[i as usize].iter().map(Vec::len).collect())
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.config.max_neighbors
        } else {
            self.config.max_neighbors
        }
    }

    fn level_for(&self, idx: usize) -> usize {
        let h = splitmix64(self.config.seed ^ splitmix64(idx as u64));
        // uniform in (0, 1]
        let u = ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        let ml = 1.0 / (self.config.max_neighbors as f64).ln();
        ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL)
    }

    fn cand(&self, q: &[f32], idx: u32) -> Cand {
        Cand {
            dist: sq_dist(q, self.vec_of(idx)),
            id: self.ids[idx as usize],
            idx,
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes sorted ascending.
    fn search_layer(&self, q: &[f32], entry: &[Cand], ef: usize, layer: usize) -> Vec<Cand> {
        let mut visited = vec![false; self.ids.len()];
        let mut candidates: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        let mut found: BinaryHeap<Cand> = BinaryHeap::new();
        for &e in entry {
            if !visited[e.idx as usize] {
                visited[e.idx as usize] = true;
                candidates.push(Reverse(e));
                found.push(e);
            }
        }
        while found.len() > ef {
            found.pop();
        }
        while let Some(Reverse(c)) = candidates.pop() {
            if found.len() >= ef && c > *found.peek().unwrap() {
                break;
            }
            for &n in &self.links[c.idx as usize][layer] {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let nc = self.cand(q, n);
                if found.len() < ef || nc < *found.peek().unwrap() {
                    candidates.push(Reverse(nc));
                    found.push(nc);
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        found.into_sorted_vec()
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every neighbour already kept; fill up with pruned ones.
    fn select_neighbors(&self, sorted: &[Cand], m: usize) -> Vec<u32> {
        let mut kept: Vec<Cand> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for &c in sorted {
            if kept.len() >= m {
                break;
            }
            let v = self.vec_of(c.idx);
            if kept.iter().all(|k| c.dist < sq_dist(v, self.vec_of(k.idx))) {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for c in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept.into_iter().map(|c| c.idx).collect()
    }

    fn greedy_descend(&self, q: &[f32], from_level: usize, to_level: usize) -> Cand {
        let mut ep = self.cand(q, self.entry.expect("non-empty index"));
        for layer in (to_level + 1..=from_level).rev() {
            ep = self.search_layer(q, &[ep], 1, layer)[0];
        }
        ep
    }

    pub fn insert(&mut self, id: u64, v: &[f32]) -> Result<()> {
        if v.len() != self.config.dim {
            return Err(Error::shape(format!(
                "vector of dimension {} for index of dimension {}",
                v.len(),
                self.config.dim
            )));
        }
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        let idx = self.ids.len() as u32;
        let level = self.level_for(idx as usize);
        self.ids.push(id);
        self.vectors.extend_from_slice(v);
        self.links.push(vec![Vec::new(); level + 1]);
        self.by_id.insert(id, idx);

        let Some(_) = self.entry else {
            self.entry = Some(idx);
            self.max_level = level;
            return Ok(());
        };

        let q = v.to_vec();
        let top = self.max_level;
        let mut eps = vec![self.greedy_descend(&q, top, level.min(top))];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.config.ef_construction, layer);
            let neighbors = self.select_neighbors(&found, self.config.max_neighbors);
            for &n in &neighbors {
                self.link(n, idx, layer);
            }
            self.links[idx as usize][layer] = neighbors;
            eps = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(idx);
        }
        Ok(())
    }

    /// Adds `to` to `from`'s list on `layer`, re-pruning if over capacity.
    fn link(&mut self, from: u32, to: u32, layer: usize) {
        self.links[from as usize][layer].push(to);
        let cap = self.max_links(layer);
        if self.links[from as usize][layer].len() <= cap {
            return;
        }
        let base = self.vec_of(from).to_vec();
        let mut cands: Vec<Cand> = self.links[from as usize][layer]
            .iter()
            .map(|&n| self.cand(&base, n))
            .collect();
        cands.sort();
        let kept = self.select_neighbors(&cands, cap);
        self.links[from as usize][layer] = kept;
    }

    /// Up to `k` nearest stored vectors, ascending by distance then id.
    pub fn query(&self, v: &[f32], k: usize) -> Result<Vec<QueryResult>> {
        if v.len() != self.config.dim {
            return Err(Error::shape(format!(
                "query of dimension {} for index of dimension {}",
                v.len(),
                self.config.dim
            )));
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if k >= self.len() {
            return exhaustive_query(self.iter(), v, k);
        }
        let ep = self.greedy_descend(v, self.max_level, 0);
        let found = self.search_layer(v, &[ep], self.config.ef_search.max(k), 0);
        let mut out: Vec<QueryResult> = found
            .iter()
            .map(|c| QueryResult {
                record_id: c.id,
                distance: exact_dist(v, self.vec_of(c.idx)),
            })
            .collect();
        sort_results(&mut out);
        out.truncate(k);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut w = Writer::new(MAGIC, VERSION);
        for v in [c.dim, c.max_neighbors, c.ef_construction, c.ef_search] {
            w.u32(v as u32);
        }
        w.u64(c.seed);
        w.u64(self.ids.len() as u64);
        w.u32(self.entry.unwrap_or(u32::MAX));
        w.u32(self.max_level as u32);
        for (i, id) in self.ids.iter().enumerate() {
            w.u64(*id);
            w.u8(self.links[i].len() as u8);
            for layer in &self.links[i] {
                w.u16(layer.len() as u16);
                for n in layer {
                    w.u32(*n);
                }
            }
        }
        w.f32s(&self.vectors);
        fs::write(path, w.into_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader::open(&bytes, path, MAGIC, VERSION)?;
        let [dim, max_neighbors, ef_construction, ef_search] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
        let config = IndexConfig {
            dim,
            max_neighbors,
            ef_construction,
            ef_search,
            seed: r.u64()?,
        };
        config.validate()?;
        let n = r.u64()? as usize;
        let entry = match r.u32()? {
            u32::MAX => None,
            e => Some(e),
        };
        let max_level = r.u32()? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut links = Vec::with_capacity(n);
        let mut by_id = HashMap::with_capacity(n);
        for i in 0..n {
            let id = r.u64()?;
            let layers = r.u8()? as usize;
            let mut node = Vec::with_capacity(layers);
            for _ in 0..layers {
                let count = r.u16()? as usize;
                let mut ns = Vec::with_capacity(count);
                for _ in 0..count {
                    let nb = r.u32()?;
                    if nb as usize >= n {
                        return Err(r.err(format!("link to node {nb} of {n}")));
                    }
                    ns.push(nb);
                }
                node.push(ns);
            }
            if by_id.insert(id, i as u32).is_some() {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
            links.push(node);
        }
        let vectors = r.f32s(n * dim)?;
        r.finish()?;
        if entry.is_some_and(|e| e as usize >= n) || (entry.is_none() && n > 0) {
            return Err(Error::format(path, "bad entry point"));
        }
        Ok(Self {
            config,
            ids,
            vectors,
            links,
            entry,
            max_level,
            by_id,
        })
    }
}

fn sort_results(out: &mut [QueryResult]) {
    out.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.record_id.cmp(&b.record_id))
    });
}

/// Exact k-NN by full scan; ties go to the lower id.
pub fn exhaustive_query<'a, I>(vectors: I, v: &[f32], k: usize) -> Result<Vec<QueryResult>>
where
    I: IntoIterator<Item = (u64, &'a [f32])>,
{
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut out = Vec::new();
    for (id, x) in vectors {
        if x.len() != v.len() {
            return Err(Error::shape(format!(
                "stored vector of dimension {} vs query of dimension {}",
                x.len(),
                v.len()
            )));
        }
        out.push(QueryResult {
            record_id: id,
            distance: exact_dist(x, v),
        });
    }
    sort_results(&mut out);
    out.truncate(k);
    Ok(out)
}
