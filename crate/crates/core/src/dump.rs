//! SSDP activation dumps.
//!
//! A dump is a directory holding `manifest.json` plus one or more shard
//! files. Every shard starts with the 8-byte magic `SSDP0001` followed by
//! back-to-back records, all little-endian:
//!
//! ```text
//! id_len u64 | id bytes (UTF-8) | n_u u32 | n_v u32 | d u32
//! attn   f32[n_u * n_v]  row-major, instruction token x visual token
//! hidden f32[n_v * d]    row-major, visual token x hidden dim
//! ```
//!
//! Reading is strictly sequential; only one record is resident at a time.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::{self, AtomicFile};

pub const MAGIC: &[u8; 8] = b"SSDP0001";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Largest permitted excess of an attention row sum over 1.
pub const ATTN_ROW_SUM_SLACK: f64 = 1e-3;

/// Default number of errors collected by [`validate_dump`].
pub const DEFAULT_ERROR_CAP: usize = 20;

const RECORD_HEADER_LEN: u64 = 8 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u32,
    pub num_samples: u64,
    pub hidden_dim: u64,
    pub shards: Vec<String>,
    pub producer: String,
}

impl DumpManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::ManifestMissing(path));
        }
        let manifest: DumpManifest = fsutil::read_json(&path)?;
        manifest.check(&path)?;
        Ok(manifest)
    }

    fn check(&self, path: &Path) -> Result<()> {
        let fail = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.hidden_dim == 0 {
            return Err(fail("hidden_dim must be positive".into()));
        }
        if self.shards.is_empty() {
            return Err(fail("no shards listed".into()));
        }
        let mut seen = HashSet::new();
        for shard in &self.shards {
            if shard.is_empty() {
                return Err(fail("empty shard path".into()));
            }
            if !seen.insert(shard.as_str()) {
                return Err(fail(format!("shard {shard:?} listed twice")));
            }
        }
        Ok(())
    }
}

/// One sample's activation record.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDump {
    pub sample_id: String,
    /// Instruction tokens summed over all turns.
    pub n_u: usize,
    /// Visual tokens.
    pub n_v: usize,
    pub hidden_dim: usize,
    /// `n_u x n_v`, row-major. Head-averaged instruction-to-visual attention.
    pub attn: Vec<f32>,
    /// `n_v x hidden_dim`, row-major. Layer output at each visual token.
    pub hidden: Vec<f32>,
}

impl SampleDump {
    pub fn new(
        sample_id: impl Into<String>,
        n_u: usize,
        n_v: usize,
        hidden_dim: usize,
        attn: Vec<f32>,
        hidden: Vec<f32>,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        let bad = |message: String| Error::Validation {
            sample_id: sample_id.clone(),
            message,
        };
        if attn.len() != n_u * n_v {
            return Err(bad(format!(
                "attn has {} entries, expected {n_u}x{n_v}",
                attn.len()
            )));
        }
        if hidden.len() != n_v * hidden_dim {
            return Err(bad(format!(
                "hidden has {} entries, expected {n_v}x{hidden_dim}",
                hidden.len()
            )));
        }
        if n_u > u32::MAX as usize || n_v > u32::MAX as usize || hidden_dim > u32::MAX as usize {
            return Err(bad("dimension does not fit in u32".into()));
        }
        Ok(Self {
            sample_id,
            n_u,
            n_v,
            hidden_dim,
            attn,
            hidden,
        })
    }

    pub fn attn_row(&self, u: usize) -> &[f32] {
        &self.attn[u * self.n_v..(u + 1) * self.n_v]
    }

    pub fn hidden_row(&self, v: usize) -> &[f32] {
        &self.hidden[v * self.hidden_dim..(v + 1) * self.hidden_dim]
    }

    /// Size of this record in a shard, in bytes.
    pub fn encoded_len(&self) -> u64 {
        RECORD_HEADER_LEN
            + self.sample_id.len() as u64
            + 4 * (self.attn.len() as u64 + self.hidden.len() as u64)
    }

    /// Checks the value-level record invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Validation {
            sample_id: self.sample_id.clone(),
            message,
        };
        if self.n_v == 0 {
            return Err(bad("no visual tokens".into()));
        }
        if self.hidden_dim == 0 {
            return Err(bad("hidden_dim is zero".into()));
        }
        for u in 0..self.n_u {
            let mut sum = 0.0f64;
            for (v, &a) in self.attn_row(u).iter().enumerate() {
                if !a.is_finite() {
                    return Err(bad(format!("attn[{u},{v}] is not finite ({a})")));
                }
                if a < 0.0 {
                    return Err(bad(format!("attn[{u},{v}] is negative ({a})")));
                }
                sum += f64::from(a);
            }
            if sum > 1.0 + ATTN_ROW_SUM_SLACK {
                return Err(bad(format!("attn row {u} sums to {sum} > 1")));
            }
        }
        if let Some(pos) = self.hidden.iter().position(|h| !h.is_finite()) {
            let (v, c) = (pos / self.hidden_dim, pos % self.hidden_dim);
            return Err(bad(format!(
                "hidden[{v},{c}] is not finite ({})",
                self.hidden[pos]
            )));
        }
        Ok(())
    }

    /// Appends the record's SSDP encoding to `out`.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len() as usize);
        out.extend_from_slice(&(self.sample_id.len() as u64).to_le_bytes());
        out.extend_from_slice(self.sample_id.as_bytes());
        out.extend_from_slice(&(self.n_u as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_v as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden_dim as u32).to_le_bytes());
        for x in self.attn.iter().chain(&self.hidden) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn shard_file_name(index: usize) -> String {
    format!("shard-{index:05}.ssdp")
}

struct OpenShard {
    file: AtomicFile,
    records: usize,
}

/// Streams records into shards of at most `shard_size` records.
pub struct DumpWriter {
    dir: PathBuf,
    shard_size: usize,
    producer: String,
    hidden_dim: Option<usize>,
    ids: HashSet<String>,
    shards: Vec<String>,
    current: Option<OpenShard>,
    num_samples: u64,
    buf: Vec<u8>,
}

impl DumpWriter {
    pub fn create(
        dir: impl AsRef<Path>,
        shard_size: usize,
        producer: impl Into<String>,
    ) -> Result<Self> {
        if shard_size == 0 {
            return Err(Error::config("shard_size must be at least 1"));
        }
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            shard_size,
            producer: producer.into(),
            hidden_dim: None,
            ids: HashSet::new(),
            shards: Vec::new(),
            current: None,
            num_samples: 0,
            buf: Vec::new(),
        })
    }

    pub fn push(&mut self, record: &SampleDump) -> Result<()> {
        match self.hidden_dim {
            None => {
                if record.hidden_dim == 0 {
                    return Err(Error::Validation {
                        sample_id: record.sample_id.clone(),
                        message: "hidden_dim is zero".into(),
                    });
                }
                self.hidden_dim = Some(record.hidden_dim);
            }
            Some(d) if d != record.hidden_dim => {
                return Err(Error::DimensionMismatch {
                    sample_id: record.sample_id.clone(),
                    expected: d,
                    found: record.hidden_dim,
                })
            }
            Some(_) => {}
        }
        if !self.ids.insert(record.sample_id.clone()) {
            return Err(Error::DuplicateId(record.sample_id.clone()));
        }

        if self.current.is_none() {
            let name = shard_file_name(self.shards.len());
            let mut file = AtomicFile::create(self.dir.join(&name))?;
            file.write_all(MAGIC)?;
            self.shards.push(name);
            self.current = Some(OpenShard { file, records: 0 });
        }
        let shard = self.current.as_mut().expect("shard opened above");
        self.buf.clear();
        record.encode_into(&mut self.buf);
        shard.file.write_all(&self.buf)?;
        shard.records += 1;
        self.num_samples += 1;
        if shard.records == self.shard_size {
            self.current.take().expect("open shard").file.commit()?;
        }
        Ok(())
    }

    /// Closes the last shard and writes the manifest.
    pub fn finish(mut self) -> Result<DumpManifest> {
        if let Some(shard) = self.current.take() {
            shard.file.commit()?;
        }
        let hidden_dim = self
            .hidden_dim
            .ok_or(Error::EmptyInput("no records written"))?;
        let manifest = DumpManifest {
            format_version: FORMAT_VERSION,
            num_samples: self.num_samples,
            hidden_dim: hidden_dim as u64,
            shards: self.shards,
            producer: self.producer,
        };
        fsutil::write_json_atomic(self.dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

pub fn write_dump<I, R>(records: I, dir: impl AsRef<Path>, shard_size: usize) -> Result<DumpManifest>
where
    I: IntoIterator<Item = R>,
    R: std::borrow::Borrow<SampleDump>,
{
    write_dump_with_producer(records, dir, shard_size, concat!("subsel ", env!("CARGO_PKG_VERSION")))
}

pub fn write_dump_with_producer<I, R>(
    records: I,
    dir: impl AsRef<Path>,
    shard_size: usize,
    producer: &str,
) -> Result<DumpManifest>
where
    I: IntoIterator<Item = R>,
    R: std::borrow::Borrow<SampleDump>,
{
    let mut writer = DumpWriter::create(dir, shard_size, producer)?;
    for record in records {
        writer.push(record.borrow())?;
    }
    writer.finish()
}

/// Sequential reader over one shard file. Records are returned without
/// value-level validation; see [`SampleDump::validate`].
pub struct ShardReader {
    path: PathBuf,
    reader: BufReader<File>,
    len: u64,
    offset: u64,
}

impl ShardReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let mut reader = BufReader::with_capacity(1 << 20, file);
        let mut magic = [0u8; 8];
        if len < MAGIC.len() as u64 {
            return Err(Error::Format {
                path,
                message: format!("file is {len} bytes, too short for the magic header"),
            });
        }
        reader
            .read_exact(&mut magic)
            .map_err(|e| Error::io(&path, e))?;
        if &magic != MAGIC {
            let message = if magic[..4] == MAGIC[..4] {
                format!(
                    "unsupported format version {:?}",
                    String::from_utf8_lossy(&magic[4..])
                )
            } else {
                format!("bad magic bytes {magic:02x?}")
            };
            return Err(Error::Format { path, message });
        }
        Ok(Self {
            path,
            reader,
            len,
            offset: MAGIC.len() as u64,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Byte offset of the next record.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn corrupt(&self, offset: u64, message: String) -> Error {
        Error::Corruption {
            path: self.path.clone(),
            offset,
            message,
        }
    }

    fn read_bytes(&mut self, n: u64, record_start: u64, what: &str) -> Result<Vec<u8>> {
        let remaining = self.len - self.offset;
        if n > remaining {
            return Err(self.corrupt(
                record_start,
                format!("record truncated: {what} needs {n} bytes, {remaining} remain"),
            ));
        }
        let mut buf = vec![0u8; n as usize];
        self.reader
            .read_exact(&mut buf)
            .map_err(|e| Error::io(&self.path, e))?;
        self.offset += n;
        Ok(buf)
    }

    pub fn next_record(&mut self) -> Result<Option<SampleDump>> {
        if self.offset == self.len {
            return Ok(None);
        }
        let start = self.offset;
        let header = self.read_bytes(8, start, "id_len")?;
        let id_len = u64::from_le_bytes(header.try_into().expect("8 bytes"));
        let id = self.read_bytes(id_len, start, "sample id")?;
        let sample_id = String::from_utf8(id)
            .map_err(|_| self.corrupt(start, "sample id is not valid UTF-8".into()))?;
        let dims = self.read_bytes(12, start, "dimensions")?;
        let dim = |i: usize| u32::from_le_bytes(dims[4 * i..4 * i + 4].try_into().expect("4 bytes")) as u64;
        let (n_u, n_v, d) = (dim(0), dim(1), dim(2));
        let attn = self.read_f32s(n_u * n_v, start, "attn")?;
        let hidden = self.read_f32s(n_v * d, start, "hidden")?;
        Ok(Some(SampleDump {
            sample_id,
            n_u: n_u as usize,
            n_v: n_v as usize,
            hidden_dim: d as usize,
            attn,
            hidden,
        }))
    }

    fn read_f32s(&mut self, count: u64, start: u64, what: &str) -> Result<Vec<f32>> {
        let bytes = self.read_bytes(count * 4, start, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Streams validated records from every shard of a dump, in manifest order.
/// Iteration stops after the first error.
pub struct DumpReader {
    dir: PathBuf,
    manifest: DumpManifest,
    next_shard: usize,
    current: Option<ShardReader>,
    yielded: u64,
    done: bool,
}

impl DumpReader {
    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    fn advance(&mut self) -> Result<Option<SampleDump>> {
        loop {
            if self.current.is_none() {
                if self.next_shard == self.manifest.shards.len() {
                    if self.yielded != self.manifest.num_samples {
                        return Err(Error::Format {
                            path: self.dir.join(MANIFEST_FILE),
                            message: format!(
                                "manifest declares {} samples, shards hold {}",
                                self.manifest.num_samples, self.yielded
                            ),
                        });
                    }
                    return Ok(None);
                }
                let path = self.dir.join(&self.manifest.shards[self.next_shard]);
                self.next_shard += 1;
                self.current = Some(ShardReader::open(path)?);
            }
            let shard = self.current.as_mut().expect("shard open");
            match shard.next_record()? {
                None => self.current = None,
                Some(record) => {
                    let expected = self.manifest.hidden_dim as usize;
                    if record.hidden_dim != expected {
                        return Err(Error::DimensionMismatch {
                            sample_id: record.sample_id,
                            expected,
                            found: record.hidden_dim,
                        });
                    }
                    record.validate()?;
                    self.yielded += 1;
                    return Ok(Some(record));
                }
            }
        }
    }
}

impl Iterator for DumpReader {
    type Item = Result<SampleDump>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.advance() {
            Ok(Some(record)) => Some(Ok(record)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

pub fn read_dump(dir: impl AsRef<Path>) -> Result<(DumpManifest, DumpReader)> {
    let dir = dir.as_ref().to_path_buf();
    let manifest = DumpManifest::load(&dir)?;
    let reader = DumpReader {
        dir,
        manifest: manifest.clone(),
        next_shard: 0,
        current: None,
        yielded: 0,
        done: false,
    };
    Ok((manifest, reader))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardReport {
    pub path: String,
    pub records: u64,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub declared_samples: u64,
    pub num_samples: u64,
    pub hidden_dim: u64,
    pub min_n_v: Option<usize>,
    pub max_n_v: Option<usize>,
    pub min_n_u: Option<usize>,
    pub max_n_u: Option<usize>,
    pub shards: Vec<ShardReport>,
    /// Total number of problems found, including ones beyond the cap.
    pub error_count: usize,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.error_count == 0
    }

    pub fn to_text(&self) -> String {
        let range = |lo: Option<usize>, hi: Option<usize>| match (lo, hi) {
            (Some(lo), Some(hi)) => format!("{lo}..={hi}"),
            _ => "-".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!("samples     {} (manifest {})\n", self.num_samples, self.declared_samples));
        out.push_str(&format!("hidden_dim  {}\n", self.hidden_dim));
        out.push_str(&format!("n_v         {}\n", range(self.min_n_v, self.max_n_v)));
        out.push_str(&format!("n_u         {}\n", range(self.min_n_u, self.max_n_u)));
        for s in &self.shards {
            out.push_str(&format!("shard       {}  {} records  {} bytes  sha256 {}\n", s.path, s.records, s.bytes, s.sha256));
        }
        out.push_str(&format!("errors      {}\n", self.error_count));
        for e in &self.errors {
            out.push_str(&format!("  {e}\n"));
        }
        out
    }
}

pub fn validate_dump(dir: impl AsRef<Path>) -> Result<ValidationReport> {
    validate_dump_with_cap(dir, DEFAULT_ERROR_CAP)
}

/// Scans every record of a dump, collecting up to `cap` error messages
/// instead of stopping at the first one. Only a missing or unreadable
/// manifest aborts the scan.
pub fn validate_dump_with_cap(dir: impl AsRef<Path>, cap: usize) -> Result<ValidationReport> {
    let dir = dir.as_ref();
    let manifest = DumpManifest::load(dir)?;
    let expected_dim = manifest.hidden_dim as usize;

    let mut report = ValidationReport {
        declared_samples: manifest.num_samples,
        num_samples: 0,
        hidden_dim: manifest.hidden_dim,
        min_n_v: None,
        max_n_v: None,
        min_n_u: None,
        max_n_u: None,
        shards: Vec::new(),
        error_count: 0,
        errors: Vec::new(),
    };
    let note = |report: &mut ValidationReport, e: String| {
        report.error_count += 1;
        if report.errors.len() < cap {
            report.errors.push(e);
        }
    };
    let mut ids = HashSet::new();

    for name in &manifest.shards {
        let path = dir.join(name);
        let (bytes, sha256) = match hash_file(&path) {
            Ok(v) => v,
            Err(e) => {
                note(&mut report, e.to_string());
                continue;
            }
        };
        let mut shard_report = ShardReport {
            path: name.clone(),
            records: 0,
            bytes,
            sha256,
        };
        match ShardReader::open(&path) {
            Err(e) => note(&mut report, e.to_string()),
            Ok(mut shard) => loop {
                match shard.next_record() {
                    Ok(None) => break,
                    Err(e) => {
                        // framing is lost; the rest of this shard cannot be parsed
                        note(&mut report, e.to_string());
                        break;
                    }
                    Ok(Some(record)) => {
                        shard_report.records += 1;
                        report.num_samples += 1;
                        let widen = |lo: &mut Option<usize>, hi: &mut Option<usize>, x: usize| {
                            *lo = Some(lo.map_or(x, |v| v.min(x)));
                            *hi = Some(hi.map_or(x, |v| v.max(x)));
                        };
                        widen(&mut report.min_n_v, &mut report.max_n_v, record.n_v);
                        widen(&mut report.min_n_u, &mut report.max_n_u, record.n_u);
                        if record.hidden_dim != expected_dim {
                            note(
                                &mut report,
                                Error::DimensionMismatch {
                                    sample_id: record.sample_id.clone(),
                                    expected: expected_dim,
                                    found: record.hidden_dim,
                                }
                                .to_string(),
                            );
                        } else if let Err(e) = record.validate() {
                            note(&mut report, e.to_string());
                        }
                        if !ids.insert(record.sample_id.clone()) {
                            note(&mut report, Error::DuplicateId(record.sample_id).to_string());
                        }
                    }
                }
            },
        }
        report.shards.push(shard_report);
    }
    if report.num_samples != manifest.num_samples {
        let message = format!(
            "manifest declares {} samples, shards hold {}",
            manifest.num_samples, report.num_samples
        );
        note(&mut report, message);
    }
    Ok(report)
}

fn hash_file(path: &Path) -> Result<(u64, String)> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let bytes = std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
    let digest = hasher.finalize();
    let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok((bytes, hex))
}
