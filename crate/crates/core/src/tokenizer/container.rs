//! Binary container for tokenized datasets.
//!
//! ```text
//! b"EGMTOK01" | u32 levels | u32 segment_length | u64 count | records...
//! record: u32 len | u16 x len ids | u8 label | f64 s_min | f64 s_max
//!         | u32 signal_len | u32 aug_len | u8 degenerate | u8 has_mask
//!         [ u8 afib_masked | u32 n | u32 x n positions
//!           | u32 k | k x (u32 position, u16 original) ]
//! ```
//! All integers and floats little-endian.

use std::collections::BTreeMap;

use super::{MaskPlan, Result, TokenSequence, TokenizerError, Vocabulary};

const MAGIC: &[u8; 8] = b"EGMTOK01";

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    pub levels: usize,
    pub segment_length: usize,
    pub sequences: Vec<TokenSequence>,
}

impl TokenDataset {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::build(self.levels)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Tokenizes every segment of `set` with `levels` quantization levels.
    pub fn from_segments(set: &crate::signal_io::SegmentSet, levels: usize) -> Result<Self> {
        let vocab = Vocabulary::build(levels)?;
        Ok(Self {
            levels,
            segment_length: set.segment_length,
            sequences: set
                .segments
                .iter()
                .map(|s| super::tokenize_segment(&s.values, s.label, &vocab))
                .collect(),
        })
    }
}

pub fn write_dataset(data: &TokenDataset) -> Result<Vec<u8>> {
    if 2 * data.levels + 6 > u16::MAX as usize + 1 {
        return Err(TokenizerError::InvalidArgument(format!(
            "{} levels do not fit 16-bit token ids",
            data.levels
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(data.levels as u32).to_le_bytes());
    out.extend_from_slice(&(data.segment_length as u32).to_le_bytes());
    out.extend_from_slice(&(data.sequences.len() as u64).to_le_bytes());
    for s in &data.sequences {
        out.extend_from_slice(&(s.ids.len() as u32).to_le_bytes());
        for &id in &s.ids {
            out.extend_from_slice(&(id as u16).to_le_bytes());
        }
        out.push(s.label);
        out.extend_from_slice(&s.s_min.to_le_bytes());
        out.extend_from_slice(&s.s_max.to_le_bytes());
        out.extend_from_slice(&(s.signal_len as u32).to_le_bytes());
        out.extend_from_slice(&(s.aug_len as u32).to_le_bytes());
        out.push(s.degenerate as u8);
        match &s.mask {
            None => out.push(0),
            Some(plan) => {
                out.push(1);
                out.push(plan.afib_masked as u8);
                out.extend_from_slice(&(plan.masked_signal_positions.len() as u32).to_le_bytes());
                for &p in &plan.masked_signal_positions {
                    out.extend_from_slice(&(p as u32).to_le_bytes());
                }
                out.extend_from_slice(&(plan.originals.len() as u32).to_le_bytes());
                for (&p, &id) in &plan.originals {
                    out.extend_from_slice(&(p as u32).to_le_bytes());
                    out.extend_from_slice(&(id as u16).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TokenizerError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_dataset(bytes: &[u8]) -> Result<TokenDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(TokenizerError::Format("bad magic".into()));
    }
    let levels = r.u32()? as usize;
    let segment_length = r.u32()? as usize;
    let count = r.u64()? as usize;
    let vocab_size = 2 * levels as u32 + 6;
    let mut sequences = Vec::with_capacity(count.min(1 << 20));
    for n in 0..count {
        let len = r.u32()? as usize;
        let ids = (0..len)
            .map(|_| r.u16().map(u32::from))
            .collect::<Result<Vec<_>>>()?;
        if let Some(bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(TokenizerError::Format(format!("record {n}: token id {bad} out of range")));
        }
        let label = r.u8()?;
        let s_min = r.f64()?;
        let s_max = r.f64()?;
        let signal_len = r.u32()? as usize;
        let aug_len = r.u32()? as usize;
        let degenerate = r.u8()? != 0;
        if label > 1 || signal_len + aug_len + 4 != len {
            return Err(TokenizerError::Format(format!("record {n}: inconsistent layout")));
        }
        let mask = match r.u8()? {
            0 => None,
            _ => {
                let afib_masked = r.u8()? != 0;
                let k = r.u32()? as usize;
                let positions = (0..k)
                    .map(|_| r.u32().map(|p| p as usize))
                    .collect::<Result<Vec<_>>>()?;
                let k = r.u32()? as usize;
                let mut originals = BTreeMap::new();
                for _ in 0..k {
                    let p = r.u32()? as usize;
                    originals.insert(p, r.u16()? as u32);
                }
                Some(MaskPlan {
                    masked_signal_positions: positions,
                    afib_masked,
                    originals,
                })
            }
        };
        sequences.push(TokenSequence {
            ids,
            label,
            s_min,
            s_max,
            signal_len,
            aug_len,
            degenerate,
            mask,
        });
    }
    if r.pos != bytes.len() {
        return Err(TokenizerError::Format("trailing bytes".into()));
    }
    Ok(TokenDataset {
        levels,
        segment_length,
        sequences,
    })
}
