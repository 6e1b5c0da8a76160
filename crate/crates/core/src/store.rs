//! Single-file, memory-mapped key-value store for packed datasets (`M4DB`).
//!
//! A store holds one modality. Values are written back to back in key order;
//! a sorted index of `(key, offset, length, crc)` entries follows the data and
//! is loaded once at open. A lookup is a binary search over the index and one
//! slice of the mapping at `data_start + offset`.
//!
//! ```text
//! header (64 bytes)
//!   0  magic "M4DB"           4  version u16 (= 1)      6  reserved u16
//!   8  modality tag, 16 bytes UTF-8, zero padded
//!   24 entry count u64        32 index offset u64       40 data offset u64
//!   48 data length u64        56 reserved u64
//! data region: value blobs in key order
//! index region: count x 32-byte entries
//!   key (subject u16 BE, action u16 BE, frame u32 BE), offset u64 LE,
//!   length u64 LE, CRC-32 of the value u32 LE, reserved u32
//! footer (16 bytes): CRC-32 of header + index u32, reserved u32, "M4DB_END"
//! ```

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use memmap2::Mmap;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"M4DB";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;
pub const INDEX_ENTRY_LEN: usize = 32;
pub const FOOTER_LEN: usize = 16;
const END_MAGIC: &[u8; 8] = b"M4DB_END";
const TAG_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate key {0}")]
    DuplicateKey(SampleKey),
    #[error("key {0} not found")]
    NotFound(SampleKey),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O error at byte {position}: {source}")]
    Io { position: u64, source: std::io::Error },
}

fn io_at(position: u64) -> impl FnOnce(std::io::Error) -> StoreError {
    move |source| StoreError::Io { position, source }
}

/// `(subject, action, frame)` identity of a sample; ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleKey {
    pub subject_id: u16,
    pub action_id: u16,
    pub frame_id: u32,
}

impl SampleKey {
    pub fn new(subject_id: u16, action_id: u16, frame_id: u32) -> Self {
        SampleKey { subject_id, action_id, frame_id }
    }

    /// Big-endian encoding whose byte order equals key order.
    pub fn to_bytes(&self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[0..2].copy_from_slice(&self.subject_id.to_be_bytes());
        b[2..4].copy_from_slice(&self.action_id.to_be_bytes());
        b[4..8].copy_from_slice(&self.frame_id.to_be_bytes());
        b
    }

    pub fn from_bytes(b: [u8; 8]) -> Self {
        SampleKey {
            subject_id: u16::from_be_bytes([b[0], b[1]]),
            action_id: u16::from_be_bytes([b[2], b[3]]),
            frame_id: u32::from_be_bytes([b[4], b[5], b[6], b[7]]),
        }
    }
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{:02}/A{:02}/F{:06}", self.subject_id, self.action_id, self.frame_id)
    }
}

impl std::str::FromStr for SampleKey {
    type Err = StoreError;

    /// Parses the `S01/A05/F000123` display form.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StoreError::InvalidArgument(format!("malformed sample key {s:?}"));
        let mut parts = s.trim().split('/');
        let mut field = |prefix: char| -> Result<u64, StoreError> {
            let p = parts.next().ok_or_else(bad)?;
            p.strip_prefix(prefix).and_then(|d| d.parse().ok()).ok_or_else(bad)
        };
        let subject = field('S')?;
        let action = field('A')?;
        let frame = field('F')?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(SampleKey::new(
            u16::try_from(subject).map_err(|_| bad())?,
            u16::try_from(action).map_err(|_| bad())?,
            u32::try_from(frame).map_err(|_| bad())?,
        ))
    }
}

/// Dataset modalities, one store file each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Rt,
    Rpc,
    Mesh,
    Calib,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rt, Modality::Rpc, Modality::Mesh, Modality::Calib];

    pub fn tag(&self) -> &'static str {
        match self {
            Modality::Rt => "rt",
            Modality::Rpc => "rpc",
            Modality::Mesh => "mesh",
            Modality::Calib => "calib",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.tag() == s)
    }

    pub fn store_file_name(&self) -> String {
        format!("{}.m4db", self.tag())
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Location of one value inside the data region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreIndexEntry {
    pub key: SampleKey,
    pub offset: u64,
    pub length: u64,
    pub crc: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildSummary {
    pub entries: u64,
    pub data_bytes: u64,
    pub file_bytes: u64,
}

/// Writes a store containing `entries` to `path`. Input order is irrelevant;
/// the output bytes depend only on the entry set and the modality tag.
pub fn build(
    path: &Path,
    modality: &str,
    entries: impl IntoIterator<Item = (SampleKey, Vec<u8>)>,
) -> Result<BuildSummary, StoreError> {
    if modality.len() > TAG_LEN {
        return Err(StoreError::InvalidArgument(format!("modality tag '{modality}' longer than {TAG_LEN} bytes")));
    }
    let mut entries: Vec<(SampleKey, Vec<u8>)> = entries.into_iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(StoreError::DuplicateKey(w[0].0));
    }

    let mut index = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (key, value) in &entries {
        index.push(StoreIndexEntry { key: *key, offset, length: value.len() as u64, crc: crc32fast::hash(value) });
        offset += value.len() as u64;
    }
    let data_len = offset;

    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(MAGIC);
    header[4..6].copy_from_slice(&VERSION.to_le_bytes());
    header[8..8 + modality.len()].copy_from_slice(modality.as_bytes());
    header[24..32].copy_from_slice(&(entries.len() as u64).to_le_bytes());
    header[32..40].copy_from_slice(&(HEADER_LEN as u64 + data_len).to_le_bytes());
    header[40..48].copy_from_slice(&(HEADER_LEN as u64).to_le_bytes());
    header[48..56].copy_from_slice(&data_len.to_le_bytes());

    let mut index_bytes = Vec::with_capacity(index.len() * INDEX_ENTRY_LEN);
    for e in &index {
        index_bytes.extend_from_slice(&e.key.to_bytes());
        index_bytes.extend_from_slice(&e.offset.to_le_bytes());
        index_bytes.extend_from_slice(&e.length.to_le_bytes());
        index_bytes.extend_from_slice(&e.crc.to_le_bytes());
        index_bytes.extend_from_slice(&0u32.to_le_bytes());
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&header);
    hasher.update(&index_bytes);
    let mut footer = [0u8; FOOTER_LEN];
    footer[0..4].copy_from_slice(&hasher.finalize().to_le_bytes());
    footer[8..16].copy_from_slice(END_MAGIC);

    let file = File::create(path).map_err(io_at(0))?;
    let mut w = BufWriter::new(file);
    let mut position = 0u64;
    let mut put = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<(), StoreError> {
        w.write_all(bytes).map_err(io_at(position))?;
        position += bytes.len() as u64;
        Ok(())
    };
    put(&mut w, &header)?;
    for (_, value) in &entries {
        put(&mut w, value)?;
    }
    put(&mut w, &index_bytes)?;
    put(&mut w, &footer)?;
    let total = HEADER_LEN as u64 + data_len + index_bytes.len() as u64 + FOOTER_LEN as u64;
    w.flush().map_err(io_at(total))?;
    w.into_inner().map_err(|e| StoreError::Io { position: total, source: e.into_error() })?.sync_all().map_err(io_at(total))?;
    Ok(BuildSummary { entries: entries.len() as u64, data_bytes: data_len, file_bytes: total })
}

/// A read-only, memory-mapped store. Shareable across threads.
#[derive(Debug)]
pub struct Store {
    map: Mmap,
    modality: String,
    data_start: usize,
    index: Vec<StoreIndexEntry>,
}

impl Store {
    pub fn open(path: &Path) -> Result<Store, StoreError> {
        let file = File::open(path).map_err(io_at(0))?;
        // SAFETY: stores are write-once; the file is never modified while mapped.
        let map = unsafe { Mmap::map(&file) }.map_err(io_at(0))?;
        Store::from_map(map)
    }

    fn from_map(map: Mmap) -> Result<Store, StoreError> {
        let bytes: &[u8] = &map;
        let corrupt = |m: String| StoreError::Corrupt(m);
        if bytes.len() < HEADER_LEN + FOOTER_LEN {
            return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let count = u64_at(24);
        let index_offset = u64_at(32);
        let data_offset = u64_at(40);
        let data_len = u64_at(48);
        if data_offset != HEADER_LEN as u64 || index_offset != data_offset.saturating_add(data_len) {
            return Err(corrupt("header offsets inconsistent".into()));
        }
        let index_len = count.checked_mul(INDEX_ENTRY_LEN as u64).ok_or_else(|| corrupt("entry count overflow".into()))?;
        let expected = index_offset
            .checked_add(index_len)
            .and_then(|v| v.checked_add(FOOTER_LEN as u64))
            .ok_or_else(|| corrupt("size overflow".into()))?;
        if expected != bytes.len() as u64 {
            return Err(corrupt(format!("header implies {expected} bytes, file has {}", bytes.len())));
        }
        let index_start = index_offset as usize;
        let index_bytes = &bytes[index_start..index_start + index_len as usize];
        let footer = &bytes[bytes.len() - FOOTER_LEN..];
        if &footer[8..16] != END_MAGIC {
            return Err(corrupt("bad footer magic".into()));
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&bytes[..HEADER_LEN]);
        hasher.update(index_bytes);
        let stored = u32::from_le_bytes(footer[0..4].try_into().unwrap());
        if hasher.finalize() != stored {
            return Err(corrupt("header/index checksum mismatch".into()));
        }

        let tag = &bytes[8..8 + TAG_LEN];
        let tag_end = tag.iter().position(|&b| b == 0).unwrap_or(TAG_LEN);
        let modality = std::str::from_utf8(&tag[..tag_end])
            .map_err(|_| corrupt("modality tag is not UTF-8".into()))?
            .to_string();

        let mut index = Vec::with_capacity(count as usize);
        let mut expected_offset = 0u64;
        for raw in index_bytes.chunks_exact(INDEX_ENTRY_LEN) {
            let e = StoreIndexEntry {
                key: SampleKey::from_bytes(raw[0..8].try_into().unwrap()),
                offset: u64::from_le_bytes(raw[8..16].try_into().unwrap()),
                length: u64::from_le_bytes(raw[16..24].try_into().unwrap()),
                crc: u32::from_le_bytes(raw[24..28].try_into().unwrap()),
            };
            if let Some(prev) = index.last().map(|p: &StoreIndexEntry| p.key) {
                if e.key <= prev {
                    return Err(corrupt(format!("index not strictly sorted at {}", e.key)));
                }
            }
            if e.offset != expected_offset || e.offset.saturating_add(e.length) > data_len {
                return Err(corrupt(format!("entry {} has inconsistent extent", e.key)));
            }
            expected_offset = e.offset + e.length;
            index.push(e);
        }
        if expected_offset != data_len {
            return Err(corrupt("index does not cover the data region".into()));
        }
        Ok(Store { map, modality, data_start: data_offset as usize, index })
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &[StoreIndexEntry] {
        &self.index
    }

    pub fn keys(&self) -> impl Iterator<Item = SampleKey> + '_ {
        self.index.iter().map(|e| e.key)
    }

    pub fn contains(&self, key: &SampleKey) -> bool {
        self.locate(key).is_some()
    }

    pub fn locate(&self, key: &SampleKey) -> Option<&StoreIndexEntry> {
        self.index.binary_search_by(|e| e.key.cmp(key)).ok().map(|n| &self.index[n])
    }

    fn value(&self, e: &StoreIndexEntry) -> Result<&[u8], StoreError> {
        let start = self.data_start + e.offset as usize;
        let bytes = &self.map[start..start + e.length as usize];
        if crc32fast::hash(bytes) != e.crc {
            return Err(StoreError::Corrupt(format!("value checksum mismatch for {}", e.key)));
        }
        Ok(bytes)
    }

    /// The value stored under `key`, borrowed from the mapping.
    pub fn get(&self, key: &SampleKey) -> Result<&[u8], StoreError> {
        let e = self.locate(key).ok_or(StoreError::NotFound(*key))?;
        self.value(e)
    }

    /// Entries in key order, optionally restricted to a subject and/or action.
    pub fn scan(
        &self,
        subject: Option<u16>,
        action: Option<u16>,
    ) -> impl Iterator<Item = Result<(SampleKey, &[u8]), StoreError>> + '_ {
        let start = match subject {
            Some(s) => self.index.partition_point(|e| e.key.subject_id < s),
            None => 0,
        };
        self.index[start..]
            .iter()
            .take_while(move |e| subject.map_or(true, |s| e.key.subject_id == s))
            .filter(move |e| action.map_or(true, |a| e.key.action_id == a))
            .map(move |e| self.value(e).map(|v| (e.key, v)))
    }
}

/// Per-file path of a sample in the raw directory layout:
/// `<root>/S<ss>/A<aa>/<modality>/<ffffff>.bin`.
pub fn raw_sample_path(root: &Path, key: &SampleKey, modality: &str) -> PathBuf {
    root.join(format!("S{:02}", key.subject_id))
        .join(format!("A{:02}", key.action_id))
        .join(modality)
        .join(format!("{:06}.bin", key.frame_id))
}

/// Parses a raw-layout path relative to its root back into a key and modality.
pub fn parse_raw_sample_path(relative: &Path) -> Option<(SampleKey, String)> {
    let parts: Vec<&str> = relative.iter().filter_map(|p| p.to_str()).collect();
    if parts.len() != 4 {
        return None;
    }
    let subject = parts[0].strip_prefix('S')?.parse().ok()?;
    let action = parts[1].strip_prefix('A')?.parse().ok()?;
    let frame = parts[3].strip_suffix(".bin")?.parse().ok()?;
    Some((SampleKey::new(subject, action, frame), parts[2].to_string()))
}

/// Writes every entry of `store` as one file per sample under `root`.
pub fn export_directory(store: &Store, root: &Path) -> Result<usize, StoreError> {
    let mut n = 0;
    for item in store.scan(None, None) {
        let (key, value) = item?;
        let path = raw_sample_path(root, &key, store.modality());
        fs::create_dir_all(path.parent().expect("sample path has a parent")).map_err(io_at(0))?;
        fs::write(&path, value).map_err(io_at(0))?;
        n += 1;
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub lookups_per_sec: f64,
    pub bytes_per_sec: f64,
}

impl Throughput {
    fn from_run(lookups: usize, bytes: u64, elapsed: Duration) -> Self {
        let secs = elapsed.as_secs_f64().max(1e-9);
        Throughput { lookups_per_sec: lookups as f64 / secs, bytes_per_sec: bytes as f64 / secs }
    }
}

/// Random-access measurements for the mapped store and the one-file-per-sample
/// baseline. The cold pass is the first pass after opening; the warm pass
/// repeats the same keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessStats {
    pub lookups: usize,
    pub store_cold: Throughput,
    pub store_warm: Throughput,
    pub baseline_cold: Throughput,
    pub baseline_warm: Throughput,
}

/// Times `keys` lookups against the store at `store_path` and against the
/// per-file tree under `baseline_root`. Both paths copy the bytes out and
/// verify them against each other once.
pub fn bench_access(store_path: &Path, baseline_root: &Path, keys: &[SampleKey]) -> Result<AccessStats, StoreError> {
    let run_store = |store: &Store| -> Result<(u64, Duration), StoreError> {
        let started = Instant::now();
        let mut bytes = 0u64;
        for k in keys {
            let v = store.get(k)?.to_vec();
            bytes += v.len() as u64;
            std::hint::black_box(&v);
        }
        Ok((bytes, started.elapsed()))
    };
    let run_files = |modality: &str| -> Result<(u64, Duration), StoreError> {
        let started = Instant::now();
        let mut bytes = 0u64;
        for k in keys {
            let v = fs::read(raw_sample_path(baseline_root, k, modality)).map_err(io_at(0))?;
            bytes += v.len() as u64;
            std::hint::black_box(&v);
        }
        Ok((bytes, started.elapsed()))
    };

    let opened = Instant::now();
    let store = Store::open(store_path)?;
    let open_cost = opened.elapsed();
    for k in keys {
        let from_store = store.get(k)?;
        let from_file = fs::read(raw_sample_path(baseline_root, k, store.modality())).map_err(io_at(0))?;
        if from_store != from_file.as_slice() {
            return Err(StoreError::Corrupt(format!("baseline file for {k} differs from store value")));
        }
    }
    let (sb, st) = run_store(&store)?;
    let (sb2, st2) = run_store(&store)?;
    let (fb, ft) = run_files(store.modality())?;
    let (fb2, ft2) = run_files(store.modality())?;
    Ok(AccessStats {
        lookups: keys.len(),
        store_cold: Throughput::from_run(keys.len(), sb, st + open_cost),
        store_warm: Throughput::from_run(keys.len(), sb2, st2),
        baseline_cold: Throughput::from_run(keys.len(), fb, ft),
        baseline_warm: Throughput::from_run(keys.len(), fb2, ft2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(s: u16, a: u16, f: u32) -> SampleKey {
        SampleKey::new(s, a, f)
    }

    #[test]
    fn key_bytes_preserve_order() {
        let keys = [k(0, 0, 0), k(0, 0, 1), k(0, 1, 0), k(1, 0, 0), k(1, 0, u32::MAX), k(300, 2, 5)];
        for w in keys.windows(2) {
            assert!(w[0] < w[1]);
            assert!(w[0].to_bytes() < w[1].to_bytes());
            assert_eq!(SampleKey::from_bytes(w[1].to_bytes()), w[1]);
        }
        assert_eq!(k(3, 12, 45).to_string(), "S03/A12/F000045");
    }

    #[test]
    fn empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.m4db");
        let summary = build(&path, "rt", Vec::new()).unwrap();
        assert_eq!(summary.entries, 0);
        let store = Store::open(&path).unwrap();
        assert_eq!(store.len(), 0);
        assert_eq!(store.modality(), "rt");
        assert!(matches!(store.get(&k(1, 1, 1)), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn out_of_order_entries_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.m4db");
        let entries = vec![(k(2, 1, 0), b"two".to_vec()), (k(1, 5, 9), b"one".to_vec()), (k(1, 5, 3), vec![])];
        build(&path, "mesh", entries.clone()).unwrap();
        let store = Store::open(&path).unwrap();
        for (key, value) in &entries {
            assert_eq!(store.get(key).unwrap(), value.as_slice());
        }
        let keys: Vec<_> = store.keys().collect();
        assert_eq!(keys, vec![k(1, 5, 3), k(1, 5, 9), k(2, 1, 0)]);
        assert!(matches!(store.get(&k(9, 9, 9)), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn build_is_deterministic_over_input_order() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<_> = (0..50u32).map(|n| (k((n % 3) as u16, (n % 7) as u16, n), vec![n as u8; n as usize])).collect();
        let mut reversed = entries.clone();
        reversed.reverse();
        build(&dir.path().join("a"), "rt", entries).unwrap();
        build(&dir.path().join("b"), "rt", reversed).unwrap();
        assert_eq!(fs::read(dir.path().join("a")).unwrap(), fs::read(dir.path().join("b")).unwrap());
    }

    #[test]
    fn duplicate_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![(k(1, 1, 1), vec![1]), (k(1, 1, 1), vec![2])];
        match build(&dir.path().join("d"), "rt", entries) {
            Err(StoreError::DuplicateKey(key)) => assert_eq!(key, k(1, 1, 1)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(build(&dir.path().join("t"), "a-very-long-modality-tag", Vec::new()).is_err());
    }

    #[test]
    fn io_failure_reports_position() {
        let err = build(Path::new("/nonexistent-dir/x.m4db"), "rt", Vec::new()).unwrap_err();
        assert!(matches!(err, StoreError::Io { position: 0, .. }));
    }

    #[test]
    fn scan_filters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.m4db");
        let mut entries = Vec::new();
        for s in 1..4u16 {
            for a in 1..4u16 {
                for f in 0..3u32 {
                    entries.push((k(s, a, f), vec![s as u8, a as u8, f as u8]));
                }
            }
        }
        build(&path, "rt", entries.clone()).unwrap();
        let store = Store::open(&path).unwrap();
        let all: Vec<_> = store.scan(None, None).map(|r| r.unwrap().0).collect();
        assert_eq!(all.len(), 27);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        let s2: Vec<_> = store.scan(Some(2), None).map(|r| r.unwrap().0).collect();
        assert_eq!(s2, entries.iter().map(|e| e.0).filter(|k| k.subject_id == 2).collect::<Vec<_>>());
        let s2a3: Vec<_> = store.scan(Some(2), Some(3)).map(|r| r.unwrap().0).collect();
        assert_eq!(s2a3, vec![k(2, 3, 0), k(2, 3, 1), k(2, 3, 2)]);
        let a1 = store.scan(None, Some(1)).count();
        assert_eq!(a1, 9);
        assert_eq!(store.scan(Some(42), None).count(), 0);
    }

    #[test]
    fn corrupted_data_region_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.m4db");
        build(&path, "rt", vec![(k(1, 1, 1), vec![1, 2, 3, 4]), (k(1, 1, 2), vec![5, 6])]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[HEADER_LEN + 1] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        let store = Store::open(&path).unwrap();
        assert!(matches!(store.get(&k(1, 1, 1)), Err(StoreError::Corrupt(_))));
        assert_eq!(store.get(&k(1, 1, 2)).unwrap(), &[5, 6]);
    }

    #[test]
    fn raw_paths_round_trip() {
        let key = k(4, 17, 1234);
        let p = raw_sample_path(Path::new("root"), &key, "rt");
        assert_eq!(p, PathBuf::from("root/S04/A17/rt/001234.bin"));
        assert_eq!(parse_raw_sample_path(p.strip_prefix("root").unwrap()), Some((key, "rt".to_string())));
        assert_eq!(parse_raw_sample_path(Path::new("S04/rt/001234.bin")), None);
    }

    #[test]
    fn single_entry_bench_reads_both_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.m4db");
        build(&path, "rt", vec![(k(1, 1, 1), vec![9; 100])]).unwrap();
        let store = Store::open(&path).unwrap();
        export_directory(&store, &dir.path().join("raw")).unwrap();
        let stats = bench_access(&path, &dir.path().join("raw"), &[k(1, 1, 1)]).unwrap();
        assert_eq!(stats.lookups, 1);
        assert!(stats.store_warm.bytes_per_sec > 0.0 && stats.baseline_warm.bytes_per_sec > 0.0);
    }
}
