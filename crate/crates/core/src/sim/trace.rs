//! Gate-score trace files.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size          field
//! 0       16            magic "MOEGATETRACE\0v01"
//! 16      4             u32 num_experts
//! 20      4             u32 num_layers
//! 24      1             u8  phase_present (0 or 1)
//! 25      11 + 4n each  records: u32 batch, u16 layer, u32 token, u8 phase,
//!                       f32[num_experts] scores
//! len-4   4             u32 CRC-32 (IEEE) of bytes [16, len-4)
//! ```
//!
//! Phase bytes are 0 for prefill and 1 for decode. A file without its trailing CRC is
//! an unfinished write and is rejected.
//!
//! Files ending in `.ndjson` or `.jsonl` use a text variant: a header object
//! `{"num_experts", "num_layers", "phase_present"}` on the first line, then one
//! `{"batch", "layer", "token", "phase", "scores"}` object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crc32fast::Hasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateScores;

pub const MAGIC: &[u8; 16] = b"MOEGATETRACE\0v01";
pub const HEADER_LEN: u64 = 25;
const RECORD_FIXED: u64 = 11;
const CRC_LEN: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Prefill,
    Decode,
}

impl Phase {
    pub fn to_byte(self) -> u8 {
        match self {
            Phase::Prefill => 0,
            Phase::Decode => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Phase::Prefill),
            1 => Some(Phase::Decode),
            _ => None,
        }
    }
}

/// One token's gate scores in one layer of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub batch: u32,
    pub layer: u16,
    pub token: u32,
    pub phase: Phase,
    pub scores: GateScores<f64>,
}

impl TraceRecord {
    /// Scores as stored on disk.
    pub fn scores_f32(&self) -> Vec<f32> {
        self.scores.as_slice().iter().map(|&s| s as f32).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub num_experts: u32,
    pub num_layers: u32,
    pub phase_present: bool,
}

impl TraceHeader {
    fn validate(&self, offset: u64) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::format(offset, "num_experts must be positive"));
        }
        if self.num_layers == 0 || self.num_layers > u32::from(u16::MAX) + 1 {
            return Err(Error::format(
                offset + 4,
                format!("num_layers = {} outside [1, 65536]", self.num_layers),
            ));
        }
        Ok(())
    }

    pub fn record_len(&self) -> u64 {
        RECORD_FIXED + 4 * u64::from(self.num_experts)
    }
}

/// A fully validated trace held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn num_experts(&self) -> usize {
        self.header.num_experts as usize
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers as usize
    }
}

fn is_text_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("ndjson") | Some("jsonl")
    )
}

/// Streams a binary trace to any writer, tracking the checksum.
///
/// Dropping the writer without [`TraceWriter::finish`] leaves the trailing CRC off,
/// which readers reject.
pub struct TraceWriter<W: Write> {
    inner: W,
    header: TraceHeader,
    hasher: Hasher,
    records: u64,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut inner: W, header: TraceHeader) -> Result<Self> {
        header.validate(16)?;
        let mut hasher = Hasher::new();
        let mut head = Vec::with_capacity(9);
        head.extend_from_slice(&header.num_experts.to_le_bytes());
        head.extend_from_slice(&header.num_layers.to_le_bytes());
        head.push(u8::from(header.phase_present));
        inner.write_all(MAGIC).map_err(io_err)?;
        inner.write_all(&head).map_err(io_err)?;
        hasher.update(&head);
        Ok(Self {
            inner,
            header,
            hasher,
            records: 0,
        })
    }

    pub fn write_record(&mut self, record: &TraceRecord) -> Result<()> {
        self.check(record)?;
        let mut buf = Vec::with_capacity(self.header.record_len() as usize);
        buf.extend_from_slice(&record.batch.to_le_bytes());
        buf.extend_from_slice(&record.layer.to_le_bytes());
        buf.extend_from_slice(&record.token.to_le_bytes());
        buf.push(record.phase.to_byte());
        for s in record.scores_f32() {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        self.inner.write_all(&buf).map_err(io_err)?;
        self.hasher.update(&buf);
        self.records += 1;
        Ok(())
    }

    fn check(&self, record: &TraceRecord) -> Result<()> {
        if record.scores.len() != self.header.num_experts as usize {
            return Err(Error::input(format!(
                "record (batch {}, layer {}, token {}) has {} scores, header says {}",
                record.batch,
                record.layer,
                record.token,
                record.scores.len(),
                self.header.num_experts
            )));
        }
        if u32::from(record.layer) >= self.header.num_layers {
            return Err(Error::input(format!(
                "record layer {} outside header's {} layers",
                record.layer, self.header.num_layers
            )));
        }
        Ok(())
    }

    pub fn records_written(&self) -> u64 {
        self.records
    }

    /// Appends the CRC trailer and returns the underlying writer.
    pub fn finish(mut self) -> Result<W> {
        let crc = self.hasher.clone().finalize();
        self.inner.write_all(&crc.to_le_bytes()).map_err(io_err)?;
        self.inner.flush().map_err(io_err)?;
        Ok(self.inner)
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<trace stream>", e)
}

/// Iterator over a binary trace of known total length.
///
/// Yields records in file order; the CRC is verified once the last record has been
/// read, so a checksum failure arrives as the final item.
pub struct TraceReader<R: Read> {
    inner: R,
    header: TraceHeader,
    hasher: Hasher,
    offset: u64,
    body_end: u64,
    done: bool,
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut inner: R, total_len: u64) -> Result<Self> {
        if total_len < 16 {
            return Err(Error::format(
                total_len,
                "file ends inside the magic number",
            ));
        }
        let mut magic = [0u8; 16];
        read_exact_at(&mut inner, &mut magic, 0)?;
        if &magic != MAGIC {
            return Err(Error::format(0, "bad magic number, not a gate-score trace"));
        }
        if total_len < HEADER_LEN {
            return Err(Error::format(total_len, "file ends inside the header"));
        }
        let mut head = [0u8; 9];
        read_exact_at(&mut inner, &mut head, 16)?;
        let phase_flag = head[8];
        if phase_flag > 1 {
            return Err(Error::format(
                24,
                format!("phase_present flag is {phase_flag}, expected 0 or 1"),
            ));
        }
        let header = TraceHeader {
            num_experts: u32::from_le_bytes(head[0..4].try_into().expect("4 bytes")),
            num_layers: u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")),
            phase_present: phase_flag == 1,
        };
        header.validate(16)?;
        if total_len < HEADER_LEN + CRC_LEN {
            return Err(Error::format(
                total_len,
                "file ends before the checksum trailer",
            ));
        }
        let body = total_len - HEADER_LEN - CRC_LEN;
        let rec = header.record_len();
        if !body.is_multiple_of(rec) {
            let partial_start = HEADER_LEN + (body / rec) * rec;
            return Err(Error::format(
                total_len,
                format!(
                    "truncated: record starting at offset {partial_start} needs {rec} bytes \
                     plus the 4-byte checksum, file ends at {total_len}"
                ),
            ));
        }
        let mut hasher = Hasher::new();
        hasher.update(&head);
        Ok(Self {
            inner,
            header,
            hasher,
            offset: HEADER_LEN,
            body_end: HEADER_LEN + body,
            done: false,
        })
    }

    pub fn header(&self) -> TraceHeader {
        self.header
    }

    pub fn record_count(&self) -> u64 {
        (self.body_end - HEADER_LEN) / self.header.record_len()
    }

    fn next_record(&mut self) -> Result<TraceRecord> {
        let start = self.offset;
        let mut buf = vec![0u8; self.header.record_len() as usize];
        read_exact_at(&mut self.inner, &mut buf, start)?;
        self.hasher.update(&buf);
        self.offset += buf.len() as u64;

        let batch = u32::from_le_bytes(buf[0..4].try_into().expect("4 bytes"));
        let layer = u16::from_le_bytes(buf[4..6].try_into().expect("2 bytes"));
        let token = u32::from_le_bytes(buf[6..10].try_into().expect("4 bytes"));
        let phase = Phase::from_byte(buf[10]).ok_or_else(|| {
            Error::format(start + 10, format!("phase byte {} is not 0 or 1", buf[10]))
        })?;
        if u32::from(layer) >= self.header.num_layers {
            return Err(Error::format(
                start + 4,
                format!(
                    "layer {layer} outside header's {} layers",
                    self.header.num_layers
                ),
            ));
        }
        let scores: Vec<f64> = buf[11..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let scores = GateScores::new(scores).map_err(|e| {
            Error::format(
                start + RECORD_FIXED,
                format!("record (batch {batch}, layer {layer}, token {token}): {e}"),
            )
        })?;
        Ok(TraceRecord {
            batch,
            layer,
            token,
            phase,
            scores,
        })
    }

    fn verify_crc(&mut self) -> Result<()> {
        let mut trailer = [0u8; 4];
        read_exact_at(&mut self.inner, &mut trailer, self.body_end)?;
        let stored = u32::from_le_bytes(trailer);
        let computed = self.hasher.clone().finalize();
        if stored != computed {
            return Err(Error::format(
                self.body_end,
                format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"),
            ));
        }
        Ok(())
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.offset < self.body_end {
            let r = self.next_record();
            if r.is_err() {
                self.done = true;
            }
            return Some(r);
        }
        self.done = true;
        self.verify_crc().err().map(Err)
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(offset, "unexpected end of file")
        } else {
            Error::format(offset, format!("read failed: {e}"))
        }
    })
}

/// Reads and validates a whole trace, dispatching on the file extension.
pub fn read_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    if is_text_path(path) {
        return read_ndjson(path);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let reader = TraceReader::new(BufReader::new(file), len)?;
    let header = reader.header();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok(Trace { header, records })
}

/// Writes a trace, dispatching on the file extension.
pub fn write_trace(path: impl AsRef<Path>, trace: &Trace) -> Result<()> {
    write_records(path, trace.header, trace.records.iter())
}

pub fn write_records<'a>(
    path: impl AsRef<Path>,
    header: TraceHeader,
    records: impl IntoIterator<Item = &'a TraceRecord>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::new(file);
    if is_text_path(path) {
        return write_ndjson(out, header, records).map_err(|e| relabel_io(e, path));
    }
    let mut w = TraceWriter::new(out, header).map_err(|e| relabel_io(e, path))?;
    for r in records {
        w.write_record(r).map_err(|e| relabel_io(e, path))?;
    }
    w.finish().map_err(|e| relabel_io(e, path))?;
    Ok(())
}

fn relabel_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRecord {
    batch: u32,
    layer: u16,
    token: u32,
    #[serde(default)]
    phase: Phase,
    scores: Vec<f32>,
}

fn write_ndjson<'a, W: Write>(
    mut out: W,
    header: TraceHeader,
    records: impl IntoIterator<Item = &'a TraceRecord>,
) -> Result<()> {
    header.validate(0)?;
    let line = serde_json::to_string(&header).expect("header serializes");
    writeln!(out, "{line}").map_err(io_err)?;
    for r in records {
        if r.scores.len() != header.num_experts as usize {
            return Err(Error::input("record width differs from header"));
        }
        let text = TextRecord {
            batch: r.batch,
            layer: r.layer,
            token: r.token,
            phase: r.phase,
            scores: r.scores_f32(),
        };
        let line = serde_json::to_string(&text).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn read_ndjson(path: &Path) -> Result<Trace> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut offset = 0u64;
    let mut line = String::new();
    let mut header: Option<TraceHeader> = None;
    let mut records = Vec::new();
    loop {
        line.clear();
        let read = reader
            .read_line(&mut line)
            .map_err(|e| Error::format(offset, format!("read failed: {e}")))?;
        if read == 0 {
            break;
        }
        let start = offset;
        offset += read as u64;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        match header {
            None => {
                let h: TraceHeader = serde_json::from_str(text)
                    .map_err(|e| Error::format(start, format!("bad header line: {e}")))?;
                h.validate(start)?;
                header = Some(h);
            }
            Some(h) => {
                let r: TextRecord = serde_json::from_str(text)
                    .map_err(|e| Error::format(start, format!("bad record line: {e}")))?;
                if r.scores.len() != h.num_experts as usize {
                    return Err(Error::format(
                        start,
                        format!(
                            "record has {} scores, header says {}",
                            r.scores.len(),
                            h.num_experts
                        ),
                    ));
                }
                if u32::from(r.layer) >= h.num_layers {
                    return Err(Error::format(
                        start,
                        format!("layer {} outside header", r.layer),
                    ));
                }
                let scores = GateScores::new(r.scores.iter().map(|&s| f64::from(s)).collect())
                    .map_err(|e| Error::format(start, e.to_string()))?;
                records.push(TraceRecord {
                    batch: r.batch,
                    layer: r.layer,
                    token: r.token,
                    phase: r.phase,
                    scores,
                });
            }
        }
    }
    let header = header.ok_or_else(|| Error::format(0, "empty trace: missing header line"))?;
    Ok(Trace { header, records })
}
