//! Segment-set container and the JSON dataset manifest.
//!
//! Segment file layout (all integers little-endian):
//!
//! ```text
//! b"EGMSEG01" | u64 segment_length | u64 count |
//! count x { u8 label | u32 placement | u32 electrode | u64 start | f64 x segment_length }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, Segment, SegmentSet, SignalError};

const MAGIC: &[u8; 8] = b"EGMSEG01";

pub fn write_segments(set: &SegmentSet) -> Vec<u8> {
    let m = set.segment_length;
    let mut out = Vec::with_capacity(24 + set.len() * (17 + 8 * m));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for s in &set.segments {
        out.push(s.label);
        out.extend_from_slice(&s.placement.to_le_bytes());
        out.extend_from_slice(&s.electrode.to_le_bytes());
        out.extend_from_slice(&(s.start as u64).to_le_bytes());
        for v in &s.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(SignalError::Format(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_segments(bytes: &[u8]) -> Result<SegmentSet> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(SignalError::Format("bad magic".into()));
    }
    let m = c.u64()? as usize;
    let count = c.u64()? as usize;
    let record = 17 + 8 * m;
    if bytes.len() != 24 + count * record {
        return Err(SignalError::Format(format!(
            "expected {} bytes for {count} segments of length {m}, found {}",
            24 + count * record,
            bytes.len()
        )));
    }
    let mut set = SegmentSet::new(m);
    set.segments.reserve(count);
    for _ in 0..count {
        let label = c.take(1)?[0];
        if label > 1 {
            return Err(SignalError::Format(format!("label {label} out of range")));
        }
        let placement = c.u32()?;
        let electrode = c.u32()?;
        let start = c.u64()? as usize;
        let values = c
            .take(8 * m)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        set.segments.push(Segment {
            values,
            label,
            placement,
            electrode,
            start,
        });
    }
    Ok(set)
}

/// One recording referenced by a manifest. Exactly one of `header` (WFDB)
/// or `csv` must be given; each record becomes one placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<PathBuf>,
    /// Signal file; defaults to the file named in the WFDB header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: u32,
    pub label: u8,
}

fn default_rate() -> u32 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    #[serde(default)]
    pub splits: SplitSpec,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loads every record, z-scores it and cuts it into `m`-sample segments.
    /// Record `n` becomes placement `n`. Relative paths resolve against `base`.
    pub fn load_segments(&self, base: &Path, m: usize) -> Result<SegmentSet> {
        let mut all = SegmentSet::new(m);
        for (n, r) in self.records.iter().enumerate() {
            let rec = match (&r.header, &r.csv) {
                (Some(h), None) => {
                    let header_path = base.join(h);
                    let header_bytes = std::fs::read(&header_path)?;
                    let signal_path = match &r.signal {
                        Some(s) => base.join(s),
                        None => {
                            let text = String::from_utf8_lossy(&header_bytes);
                            let hdr = super::WfdbHeader::parse(&text)?;
                            header_path
                                .parent()
                                .unwrap_or(base)
                                .join(&hdr.channels[0].file)
                        }
                    };
                    super::parse_wfdb(&header_bytes, &std::fs::read(signal_path)?)?
                }
                (None, Some(c)) => {
                    super::parse_csv(&std::fs::read_to_string(base.join(c))?, r.sample_rate_hz)?
                }
                _ => {
                    return Err(SignalError::InvalidArgument(format!(
                        "manifest record {n} must name exactly one of `header` or `csv`"
                    )))
                }
            };
            let rec = rec.with_labels(vec![r.label])?;
            let norm = super::zscore_normalize(&rec)?;
            all.extend(super::segment_with_offset(&norm, m, n as u32)?)?;
        }
        Ok(all)
    }
}
