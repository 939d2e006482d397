//! Attention database: APM records in page-aligned shard files.
//!
//! Every record holds all heads of one (sequence, layer) pair, written
//! back-to-back as row-major f32 and zero-padded up to the store's page size.
//! One store holds one layer; the engine keeps a directory per layer.
//!
//! Batches are gathered either by copying payloads into an owned buffer or by
//! reserving one anonymous address range and mapping each record's file pages
//! over consecutive slots of it. The mapped path never touches payload bytes.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::marker::PhantomData;
use std::os::unix::fs::FileExt;
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};
use std::ptr::NonNull;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::embedder::ApmSource;
use crate::error::{Error, Result};
use crate::tensor::{Apm, ApmRef};

#[cfg(target_endian = "big")]
compile_error!("APM payloads are mapped as native little-endian f32");

pub const STORE_VERSION: u32 = 1;
const MANIFEST_MAGIC: &[u8; 4] = b"MAPM";
const MANIFEST_FILE: &str = "manifest.bin";
const HEADER_BYTES: usize = 12;
const ENTRY_BYTES: usize = 30;
const DEFAULT_SHARD_BYTES: u64 = 1 << 30;

pub fn system_page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if v > 0 {
        v as usize
    } else {
        4096
    }
}

/// Page size used for new stores and mapping decisions. `MEMOATTN_PAGE_SIZE`
/// overrides the value reported by the OS.
pub fn detected_page_size() -> usize {
    match std::env::var("MEMOATTN_PAGE_SIZE") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n.is_power_of_two() => n,
            _ => {
                log::warn!("ignoring MEMOATTN_PAGE_SIZE={v:?}");
                system_page_size()
            }
        },
        Err(_) => system_page_size(),
    }
}

fn shard_path(dir: &Path, shard: u32) -> PathBuf {
    dir.join(format!("shard-{shard:05}.bin"))
}

fn round_up(n: u64, to: u64) -> u64 {
    n.div_ceil(to) * to
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordMeta {
    pub id: u64,
    pub shard: u32,
    pub offset: u64,
    pub num_heads: u16,
    pub seq_len: u32,
    pub crc32: u32,
}

impl RecordMeta {
    pub fn payload_bytes(&self) -> u64 {
        u64::from(self.num_heads) * u64::from(self.seq_len).pow(2) * 4
    }

    pub fn padded_bytes(&self, page_size: usize) -> u64 {
        round_up(self.payload_bytes(), page_size as u64)
    }

    fn floats(&self) -> usize {
        self.payload_bytes() as usize / 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreConfig {
    pub page_size: usize,
    /// A new shard is started once the current one would exceed this.
    pub shard_bytes: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            page_size: detected_page_size(),
            shard_bytes: DEFAULT_SHARD_BYTES,
        }
    }
}

impl StoreConfig {
    pub fn with_page_size(page_size: usize) -> Self {
        Self {
            page_size,
            ..Self::default()
        }
    }
}

pub struct ApmStore {
    dir: PathBuf,
    config: StoreConfig,
    records: Vec<RecordMeta>,
    by_id: HashMap<u64, usize>,
    shards: Vec<File>,
    /// Write position in the last shard.
    tail: u64,
    dirty: bool,
    mapping_broken: AtomicBool,
}

impl std::fmt::Debug for ApmStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApmStore")
            .field("dir", &self.dir)
            .field("page_size", &self.config.page_size)
            .field("records", &self.records.len())
            .finish()
    }
}

impl ApmStore {
    /// Creates an empty store, or opens the one already at `dir` if it has
    /// the same version and page size.
    pub fn create(dir: &Path, config: StoreConfig) -> Result<Self> {
        if !config.page_size.is_power_of_two() || config.page_size < 4 {
            return Err(Error::invalid(format!(
                "page size {} is not a power of two",
                config.page_size
            )));
        }
        if config.shard_bytes < config.page_size as u64 {
            return Err(Error::invalid("shard size smaller than a page"));
        }
        if dir.join(MANIFEST_FILE).exists() {
            let mut store = Self::open(dir)?;
            if store.config.page_size != config.page_size {
                return Err(Error::invalid(format!(
                    "existing store at {} uses page size {}",
                    dir.display(),
                    store.config.page_size
                )));
            }
            store.config.shard_bytes = config.shard_bytes;
            return Ok(store);
        }
        fs::create_dir_all(dir)?;
        let store = Self {
            dir: dir.to_path_buf(),
            config,
            records: Vec::new(),
            by_id: HashMap::new(),
            shards: Vec::new(),
            tail: 0,
            dirty: true,
            mapping_broken: AtomicBool::new(false),
        };
        store.write_manifest()?;
        Ok(store)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&manifest)?;
        if bytes.len() < HEADER_BYTES || &bytes[..4] != MANIFEST_MAGIC {
            return Err(Error::format(&manifest, "not an APM store manifest"));
        }
        let le32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let le64 = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let version = le32(&bytes[4..8]);
        if version != STORE_VERSION {
            return Err(Error::Version {
                path: manifest,
                found: version,
                expected: STORE_VERSION,
            });
        }
        let page_size = le32(&bytes[8..12]) as usize;
        if !page_size.is_power_of_two() || page_size < 4 {
            return Err(Error::format(&manifest, format!("bad page size {page_size}")));
        }
        let table = &bytes[HEADER_BYTES..];
        if table.len() % ENTRY_BYTES != 0 {
            return Err(Error::format(&manifest, "truncated record table"));
        }
        let mut records = Vec::with_capacity(table.len() / ENTRY_BYTES);
        let mut by_id = HashMap::with_capacity(records.capacity());
        for e in table.chunks_exact(ENTRY_BYTES) {
            let meta = RecordMeta {
                id: le64(&e[0..8]),
                shard: le32(&e[8..12]),
                offset: le64(&e[12..20]),
                num_heads: u16::from_le_bytes([e[20], e[21]]),
                seq_len: le32(&e[22..26]),
                crc32: le32(&e[26..30]),
            };
            if by_id.insert(meta.id, records.len()).is_some() {
                return Err(Error::format(&manifest, format!("duplicate id {}", meta.id)));
            }
            records.push(meta);
        }

        let num_shards = records.iter().map(|r| r.shard as usize + 1).max().unwrap_or(0);
        let mut shards = Vec::with_capacity(num_shards);
        for s in 0..num_shards {
            shards.push(OpenOptions::new().read(true).write(true).open(shard_path(dir, s as u32))?);
        }
        let mut extents: Vec<(u32, u64, u64)> = Vec::with_capacity(records.len());
        for r in &records {
            let end = r.offset + r.padded_bytes(page_size);
            let len = shards[r.shard as usize].metadata()?.len();
            if r.offset % page_size as u64 != 0 || end > len || r.num_heads == 0 || r.seq_len == 0 {
                return Err(Error::format(&manifest, format!("record {} has a bad extent", r.id)));
            }
            extents.push((r.shard, r.offset, end));
        }
        extents.sort_unstable();
        if extents.windows(2).any(|w| w[0].0 == w[1].0 && w[1].1 < w[0].2) {
            return Err(Error::format(&manifest, "overlapping records"));
        }
        let tail = match shards.last() {
            Some(f) => round_up(f.metadata()?.len(), page_size as u64),
            None => 0,
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            config: StoreConfig {
                page_size,
                shard_bytes: DEFAULT_SHARD_BYTES,
            },
            records,
            by_id,
            shards,
            tail,
            dirty: false,
            mapping_broken: AtomicBool::new(false),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn page_size(&self) -> usize {
        self.config.page_size
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Catalog in insertion order.
    pub fn records(&self) -> &[RecordMeta] {
        &self.records
    }

    pub fn meta(&self, id: u64) -> Option<&RecordMeta> {
        self.by_id.get(&id).map(|&i| &self.records[i])
    }

    /// Bytes occupied in shard files, padding included.
    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.padded_bytes(self.config.page_size)).sum()
    }

    /// Appends one record. Durable only after [`ApmStore::flush`].
    pub fn put(&mut self, id: u64, apms: &[ApmRef<'_>]) -> Result<()> {
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        let Some(first) = apms.first() else {
            return Err(Error::invalid("record needs at least one head"));
        };
        let seq_len = first.seq_len();
        if apms.iter().any(|a| a.seq_len() != seq_len) {
            return Err(Error::shape("heads of one record must share sequence length"));
        }
        let num_heads = u16::try_from(apms.len()).map_err(|_| Error::invalid("too many heads"))?;
        let seq_len32 = u32::try_from(seq_len).map_err(|_| Error::invalid("sequence too long"))?;
        let mut meta = RecordMeta {
            id,
            shard: 0,
            offset: 0,
            num_heads,
            seq_len: seq_len32,
            crc32: 0,
        };
        let padded = meta.padded_bytes(self.config.page_size);
        if self.shards.is_empty() || (self.tail > 0 && self.tail + padded > self.config.shard_bytes) {
            let path = shard_path(&self.dir, self.shards.len() as u32);
            let f = OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(true)
                .open(path)?;
            self.shards.push(f);
            self.tail = 0;
        }
        meta.shard = (self.shards.len() - 1) as u32;
        meta.offset = self.tail;

        let file = &self.shards[meta.shard as usize];
        let mut crc = crc32fast::Hasher::new();
        let mut pos = meta.offset;
        for a in apms {
            let bytes: &[u8] = bytemuck::cast_slice(a.probs());
            file.write_all_at(bytes, pos)?;
            crc.update(bytes);
            pos += bytes.len() as u64;
        }
        file.set_len(meta.offset + padded)?;
        meta.crc32 = crc.finalize();

        self.tail = meta.offset + padded;
        self.by_id.insert(id, self.records.len());
        self.records.push(meta);
        self.dirty = true;
        Ok(())
    }

    pub fn put_owned(&mut self, id: u64, apms: &[Apm]) -> Result<()> {
        let views: Vec<ApmRef<'_>> = apms.iter().map(Apm::view).collect();
        self.put(id, &views)
    }

    fn write_manifest(&self) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_BYTES + ENTRY_BYTES * self.records.len());
        buf.extend_from_slice(MANIFEST_MAGIC);
        buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.config.page_size as u32).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&r.id.to_le_bytes());
            buf.extend_from_slice(&r.shard.to_le_bytes());
            buf.extend_from_slice(&r.offset.to_le_bytes());
            buf.extend_from_slice(&r.num_heads.to_le_bytes());
            buf.extend_from_slice(&r.seq_len.to_le_bytes());
            buf.extend_from_slice(&r.crc32.to_le_bytes());
        }
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        {
            let f = File::create(&tmp)?;
            f.write_all_at(&buf, 0)?;
            f.sync_all()?;
        }
        fs::rename(tmp, self.dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    /// Syncs shard data and atomically replaces the manifest.
    pub fn flush(&mut self) -> Result<()> {
        if !self.dirty {
            return Ok(());
        }
        for f in &self.shards {
            f.sync_data()?;
        }
        self.write_manifest()?;
        self.dirty = false;
        Ok(())
    }

    fn read_payload(&self, meta: &RecordMeta, out: &mut [f32]) -> Result<()> {
        let bytes: &mut [u8] = bytemuck::cast_slice_mut(out);
        self.shards[meta.shard as usize].read_exact_at(bytes, meta.offset)?;
        Ok(())
    }

    fn lookup(&self, id: u64) -> Result<&RecordMeta> {
        self.meta(id).ok_or(Error::MissingRecord(id))
    }

    /// Raw payload of one record, heads concatenated.
    pub fn get_payload(&self, id: u64) -> Result<Vec<f32>> {
        let meta = self.lookup(id)?;
        let mut out = vec![0.0f32; meta.floats()];
        self.read_payload(meta, &mut out)?;
        Ok(out)
    }

    pub fn get(&self, id: u64) -> Result<Vec<Apm>> {
        let meta = *self.lookup(id)?;
        let l = meta.seq_len as usize;
        self.get_payload(id)?
            .chunks_exact(l * l)
            .map(|head| Apm::from_vec(l, head.to_vec()))
            .collect()
    }

    /// Re-reads every payload and checks it against its catalog checksum.
    pub fn verify(&self) -> Result<()> {
        let mut buf = Vec::new();
        for meta in &self.records {
            buf.clear();
            buf.resize(meta.floats(), 0.0f32);
            self.read_payload(meta, &mut buf)?;
            if crc32fast::hash(bytemuck::cast_slice(&buf)) != meta.crc32 {
                return Err(Error::format(
                    shard_path(&self.dir, meta.shard),
                    format!("checksum mismatch for record {}", meta.id),
                ));
            }
        }
        Ok(())
    }

    fn batch_dims(&self, ids: &[u64]) -> Result<(Vec<RecordMeta>, u16, u32)> {
        let metas = ids
            .iter()
            .map(|&id| self.lookup(id).copied())
            .collect::<Result<Vec<_>>>()?;
        let (heads, l) = metas.first().map_or((0, 0), |m| (m.num_heads, m.seq_len));
        if metas.iter().any(|m| m.num_heads != heads || m.seq_len != l) {
            return Err(Error::shape("records in one batch must share heads and sequence length"));
        }
        Ok((metas, heads, l))
    }

    /// Reads the requested records into one owned dense buffer.
    pub fn gather_copy(&self, ids: &[u64]) -> Result<DenseBatch> {
        let (metas, heads, l) = self.batch_dims(ids)?;
        let per = metas.first().map_or(0, RecordMeta::floats);
        let mut data = vec![0.0f32; per * metas.len()];
        for (meta, slot) in metas.iter().zip(data.chunks_exact_mut(per.max(1))) {
            self.read_payload(meta, slot)?;
        }
        Ok(DenseBatch {
            ids: ids.to_vec(),
            num_heads: heads as usize,
            seq_len: l as usize,
            data,
        })
    }

    /// False when gathers will go through the copy path.
    pub fn mapping_available(&self) -> bool {
        self.config.page_size.is_multiple_of(detected_page_size()) && !self.mapping_broken.load(Ordering::Relaxed)
    }

    /// Maps the requested records back-to-back into one reserved address
    /// range. Falls back to [`ApmStore::gather_copy`] when remapping is not
    /// possible on this platform or page size.
    pub fn gather_mapped(&self, ids: &[u64]) -> Result<MappedBatch<'_>> {
        let (metas, heads, l) = self.batch_dims(ids)?;
        let header = |backing| MappedBatch {
            ids: ids.to_vec(),
            num_heads: heads as usize,
            seq_len: l as usize,
            backing,
            _store: PhantomData,
        };
        if metas.is_empty() {
            return Ok(header(Backing::Empty));
        }
        if !self.mapping_available() {
            if !self.mapping_broken.swap(true, Ordering::Relaxed) {
                log::warn!(
                    "store {} cannot remap pages (page size {} vs system {}); gathering by copy",
                    self.dir.display(),
                    self.config.page_size,
                    detected_page_size()
                );
            }
            return Ok(header(Backing::Copied(self.gather_copy(ids)?.data)));
        }
        let stride = metas[0].padded_bytes(self.config.page_size) as usize;
        let total = stride * metas.len();
        let region = Region::reserve(total)?;
        for (i, meta) in metas.iter().enumerate() {
            let fd = self.shards[meta.shard as usize].as_raw_fd();
            if let Err(e) = region.map_file(i * stride, stride, fd, meta.offset) {
                drop(region);
                if e.raw_os_error() == Some(libc::ENOMEM) {
                    return Err(Error::Mapping(e));
                }
                log::error!("page remapping failed ({e}); falling back to copy gathering");
                self.mapping_broken.store(true, Ordering::Relaxed);
                return Ok(header(Backing::Copied(self.gather_copy(ids)?.data)));
            }
        }
        Ok(header(Backing::Mapped { region, stride }))
    }
}

impl Drop for ApmStore {
    fn drop(&mut self) {
        if self.dirty {
            if let Err(e) = self.flush() {
                log::error!("failed to flush store {}: {e}", self.dir.display());
            }
        }
    }
}

impl ApmSource for ApmStore {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn apms(&self, index: usize) -> Result<Vec<Apm>> {
        let id = self
            .records
            .get(index)
            .ok_or_else(|| Error::invalid(format!("record index {index} out of range")))?
            .id;
        self.get(id)
    }
}

/// Owned batch of shape (batch, heads, L, L).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBatch {
    ids: Vec<u64>,
    num_heads: usize,
    seq_len: usize,
    data: Vec<f32>,
}

impl DenseBatch {
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn record(&self, i: usize) -> Vec<ApmRef<'_>> {
        let per = self.num_heads * self.seq_len * self.seq_len;
        heads_of(&self.data[i * per..(i + 1) * per], self.seq_len)
    }
}

fn heads_of(payload: &[f32], l: usize) -> Vec<ApmRef<'_>> {
    payload
        .chunks_exact(l * l)
        .map(|h| ApmRef::new(l, h).expect("payload sized by catalog"))
        .collect()
}

/// Anonymous reservation whose slots get file pages mapped over them.
struct Region {
    base: NonNull<u8>,
    len: usize,
}

impl Region {
    fn reserve(len: usize) -> Result<Self> {
        // SAFETY: a fresh private anonymous mapping with no fixed address.
        let p = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_NONE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if p == libc::MAP_FAILED {
            return Err(Error::Mapping(io::Error::last_os_error()));
        }
        Ok(Self {
            base: NonNull::new(p.cast()).expect("mmap returned null"),
            len,
        })
    }

    fn map_file(&self, at: usize, len: usize, fd: i32, offset: u64) -> io::Result<()> {
        debug_assert!(at + len <= self.len);
        // SAFETY: the target lies inside our own reservation, so MAP_FIXED
        // only replaces pages this region owns.
        let p = unsafe {
            libc::mmap(
                self.base.as_ptr().add(at).cast(),
                len,
                libc::PROT_READ,
                libc::MAP_SHARED | libc::MAP_FIXED,
                fd,
                offset as libc::off_t,
            )
        };
        if p == libc::MAP_FAILED {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    fn unmap(&mut self) -> io::Result<()> {
        if self.len == 0 {
            return Ok(());
        }
        // SAFETY: base/len describe exactly the range reserved in `reserve`.
        let rc = unsafe { libc::munmap(self.base.as_ptr().cast(), self.len) };
        self.len = 0;
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }
}

impl Drop for Region {
    fn drop(&mut self) {
        if let Err(e) = self.unmap() {
            log::error!("munmap failed: {e}");
        }
    }
}

enum Backing {
    Empty,
    Mapped { region: Region, stride: usize },
    Copied(Vec<f32>),
}

/// A gathered batch whose records sit back-to-back in request order.
///
/// Records are read-only: mapped pages are `PROT_READ` and only shared
/// slices are handed out. The borrow on the store keeps shards open and
/// unmodified for as long as the batch lives. Truncating a shard file from
/// outside the process while a batch is live is undefined.
pub struct MappedBatch<'s> {
    ids: Vec<u64>,
    num_heads: usize,
    seq_len: usize,
    backing: Backing,
    _store: PhantomData<&'s ApmStore>,
}

// SAFETY: the mapping is read-only and owned by the batch.
unsafe impl Send for MappedBatch<'_> {}
unsafe impl Sync for MappedBatch<'_> {}

impl<'s> MappedBatch<'s> {
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// True when backed by remapped file pages rather than a copy.
    pub fn is_mapped(&self) -> bool {
        matches!(self.backing, Backing::Mapped { .. })
    }

    fn record_floats(&self) -> usize {
        self.num_heads * self.seq_len * self.seq_len
    }

    /// Bytes between consecutive records in the range.
    pub fn stride_bytes(&self) -> usize {
        match &self.backing {
            Backing::Mapped { stride, .. } => *stride,
            _ => self.record_floats() * 4,
        }
    }

    pub fn mapped_bytes(&self) -> usize {
        match &self.backing {
            Backing::Mapped { region, .. } => region.len,
            _ => 0,
        }
    }

    /// Payload of record `i`, padding excluded.
    pub fn payload(&self, i: usize) -> &[f32] {
        assert!(i < self.ids.len(), "record {i} of {}", self.ids.len());
        let n = self.record_floats();
        match &self.backing {
            Backing::Empty => &[],
            Backing::Copied(data) => &data[i * n..(i + 1) * n],
            Backing::Mapped { region, stride } => {
                // SAFETY: slot i is mapped readable for `stride >= 4n` bytes,
                // page-aligned, and stays mapped while `self` is borrowed.
                unsafe { std::slice::from_raw_parts(region.base.as_ptr().add(i * stride).cast::<f32>(), n) }
            }
        }
    }

    pub fn record(&self, i: usize) -> Vec<ApmRef<'_>> {
        heads_of(self.payload(i), self.seq_len)
    }

    /// The whole batch as one (batch, heads, L, L) tensor, available when
    /// records carry no padding.
    pub fn as_dense(&self) -> Option<&[f32]> {
        let n = self.record_floats() * self.ids.len();
        match &self.backing {
            Backing::Empty => Some(&[]),
            Backing::Copied(data) => Some(data),
            Backing::Mapped { region, stride } if *stride == self.record_floats() * 4 => {
                // SAFETY: slots are contiguous and unpadded, so the range is
                // exactly n readable f32s.
                Some(unsafe { std::slice::from_raw_parts(region.base.as_ptr().cast::<f32>(), n) })
            }
            Backing::Mapped { .. } => None,
        }
    }

    /// Unmaps the batch. Dropping it has the same effect but hides errors.
    pub fn release(mut self) -> Result<()> {
        if let Backing::Mapped { region, .. } = &mut self.backing {
            region.unmap().map_err(Error::Mapping)?;
        }
        Ok(())
    }
}
