//! NDJSON and FDS1 binary record files.
//!
//! FDS1 layout (little-endian): magic `FDS1`, `u32` feature width, `u32`
//! record count, then per record `u32` id length, UTF-8 id, `u16` label
//! count, `u16` labels, `u32` frame count, and `N * D` `f32` values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{feature_dim, DataError, VideoRecord};

pub const MAGIC: &[u8; 4] = b"FDS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Ndjson,
    Bin,
}

impl Format {
    /// Guesses from the file extension; anything but `.ndjson`/`.jsonl` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ndjson" | "jsonl") => Format::Ndjson,
            _ => Format::Bin,
        }
    }
}

impl FromStr for Format {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ndjson" => Ok(Format::Ndjson),
            "bin" => Ok(Format::Bin),
            other => Err(DataError::Invalid(format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    id: String,
    labels: Vec<u16>,
    frames: Vec<Vec<f32>>,
}

pub fn write_records(records: &[VideoRecord], path: &Path, format: Format) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        Format::Ndjson => write_ndjson(records, &mut out)?,
        Format::Bin => write_bin(records, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path, format: Format) -> Result<Vec<VideoRecord>, DataError> {
    let input = BufReader::new(File::open(path)?);
    match format {
        Format::Ndjson => read_ndjson(input),
        Format::Bin => read_bin(input),
    }
}

pub fn write_ndjson<W: Write>(records: &[VideoRecord], mut out: W) -> Result<(), DataError> {
    if !records.is_empty() {
        feature_dim(records)?;
    }
    for r in records {
        let rec = JsonRecord {
            id: r.id.clone(),
            labels: r.labels.clone(),
            frames: r.frames().chunks(r.dim()).map(<[f32]>::to_vec).collect(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(input: R) -> Result<Vec<VideoRecord>, DataError> {
    let mut records: Vec<VideoRecord> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Line { line: line_no, msg };
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let dim = rec.frames.first().map_or(0, Vec::len);
        if rec.frames.iter().any(|f| f.len() != dim) {
            return Err(err("frame rows have different widths".into()));
        }
        if let Some(first) = records.first() {
            if first.dim() != dim {
                return Err(err(format!("feature width {dim} differs from {}", first.dim())));
            }
        }
        let r = VideoRecord::new(rec.id, rec.labels, rec.frames.concat(), dim).map_err(|e| err(e.to_string()))?;
        records.push(r);
    }
    Ok(records)
}

pub fn write_bin<W: Write>(records: &[VideoRecord], mut out: W) -> Result<(), DataError> {
    let dim = if records.is_empty() { 0 } else { feature_dim(records)? };
    let count = u32::try_from(records.len()).map_err(|_| DataError::Invalid("too many records".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&count.to_le_bytes())?;
    for r in records {
        let id = r.id.as_bytes();
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id)?;
        let n_labels =
            u16::try_from(r.labels.len()).map_err(|_| DataError::Invalid(format!("{}: too many labels", r.id)))?;
        out.write_all(&n_labels.to_le_bytes())?;
        for &l in &r.labels {
            out.write_all(&l.to_le_bytes())?;
        }
        out.write_all(&(r.n_frames() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(r.frames().len() * 4);
        for v in r.frames() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, DataError> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| DataError::Offset { offset: self.offset, msg: format!("reading {what}: {e}") })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().unwrap()))
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T, DataError> {
        Err(DataError::Offset { offset: self.offset, msg: msg.into() })
    }
}

pub fn read_bin<R: Read>(input: R) -> Result<Vec<VideoRecord>, DataError> {
    let mut cur = Cursor { inner: input, offset: 0 };
    let magic = cur.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(DataError::Offset { offset: 0, msg: format!("bad magic {magic:?}, expected FDS1") });
    }
    let dim = cur.u32("feature width")? as usize;
    let count = cur.u32("record count")? as usize;
    if count > 0 && dim == 0 {
        return cur.fail("feature width is zero");
    }
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let start = cur.offset;
        let id_len = cur.u32("id length")? as usize;
        let id = String::from_utf8(cur.bytes(id_len, "id")?)
            .map_err(|e| DataError::Offset { offset: start + 4, msg: format!("id is not UTF-8: {e}") })?;
        let n_labels = cur.u16("label count")? as usize;
        let labels = (0..n_labels).map(|_| cur.u16("label")).collect::<Result<Vec<_>, _>>()?;
        let n = cur.u32("frame count")? as usize;
        let raw = cur.bytes(n * dim * 4, "frames")?;
        let frames = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let rec = VideoRecord::new(id, labels, frames, dim)
            .map_err(|e| DataError::Offset { offset: start, msg: e.to_string() })?;
        records.push(rec);
    }
    let mut probe = [0u8; 1];
    if cur.inner.read(&mut probe)? != 0 {
        return cur.fail("trailing bytes after last record");
    }
    Ok(records)
}
