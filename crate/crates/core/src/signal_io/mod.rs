//! Recording ingestion, per-placement z-scoring, fixed-length segmentation,
//! placement-level dataset splits and a synthetic spike-train generator.
//!
//! A recording is indexed `(i, j, k)` = (time step, electrode, placement).
//! Each catheter placement is normalized independently and carries one
//! class label (0 normal, 1 AFib).

mod csv;
mod store;
mod synth;
mod wfdb;

pub use self::csv::parse_csv;
pub use self::store::{read_segments, write_segments, DatasetManifest, ManifestRecord, SplitSpec};
pub use self::synth::{synthesize_dataset, SynthParams, SPIKE_TEMPLATE};
pub use self::wfdb::{parse_wfdb, parse_wfdb_record, write_wfdb, ChannelSpec, WfdbHeader};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while reading, normalizing or splitting recordings.
#[derive(Debug, Error)]
pub enum SignalError {
    #[error("header line {line}: {reason}")]
    Header { line: usize, reason: String },
    #[error("signal payload length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("csv row {row}, column {column}: {reason}")]
    Csv {
        row: usize,
        column: usize,
        reason: String,
    },
    #[error("no samples")]
    NoSamples,
    #[error("placement {0} is constant (zero standard deviation)")]
    DegeneratePlacement(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("malformed segment file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Raw multi-electrode recording with dimensions (time, electrodes, placements).
///
/// Samples are stored placement-major, then time, then electrode, so a
/// single placement is a contiguous block of channel-interleaved frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingTensor {
    samples: Vec<f64>,
    time_steps: usize,
    electrodes: usize,
    placements: usize,
    pub sample_rate_hz: u32,
    pub labels: Vec<u8>,
}

impl RecordingTensor {
    pub fn new(
        samples: Vec<f64>,
        time_steps: usize,
        electrodes: usize,
        placements: usize,
        sample_rate_hz: u32,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(SignalError::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        if time_steps == 0 || electrodes == 0 || placements == 0 {
            return Err(SignalError::NoSamples);
        }
        if samples.len() != time_steps * electrodes * placements {
            return Err(SignalError::InvalidArgument(format!(
                "{} samples do not fill a {}x{}x{} tensor",
                samples.len(),
                time_steps,
                electrodes,
                placements
            )));
        }
        if labels.len() != placements {
            return Err(SignalError::InvalidArgument(format!(
                "{} labels for {} placements",
                labels.len(),
                placements
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(SignalError::InvalidArgument(format!(
                "label {bad} is not in {{0, 1}}"
            )));
        }
        Ok(Self {
            samples,
            time_steps,
            electrodes,
            placements,
            sample_rate_hz,
            labels,
        })
    }

    /// Stacks single- or multi-placement recordings sharing I, J and rate.
    pub fn stack(parts: &[RecordingTensor]) -> Result<Self> {
        let first = parts.first().ok_or(SignalError::NoSamples)?;
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.time_steps != first.time_steps
                || p.electrodes != first.electrodes
                || p.sample_rate_hz != first.sample_rate_hz
            {
                return Err(SignalError::InvalidArgument(
                    "stacked recordings must share time length, electrode count and rate".into(),
                ));
            }
            samples.extend_from_slice(&p.samples);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(
            samples,
            first.time_steps,
            first.electrodes,
            labels.len(),
            first.sample_rate_hz,
            labels,
        )
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        let n = self.placements;
        self.labels = labels;
        Self::new(
            self.samples,
            self.time_steps,
            self.electrodes,
            n,
            self.sample_rate_hz,
            self.labels,
        )
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn electrodes(&self) -> usize {
        self.electrodes
    }

    pub fn placements(&self) -> usize {
        self.placements
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.samples[(k * self.time_steps + i) * self.electrodes + j]
    }

    /// Channel-interleaved frames of placement `k`.
    pub fn placement(&self, k: usize) -> &[f64] {
        let len = self.time_steps * self.electrodes;
        &self.samples[k * len..(k + 1) * len]
    }
}

/// Z-scored recording plus the per-placement statistics of its source.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRecording {
    z: RecordingTensor,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NormalizedRecording {
    pub fn z_samples(&self) -> &RecordingTensor {
        &self.z
    }
}

/// Population mean and standard deviation of a sample slice.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-placement z-score: `(x - mu_k) / sigma_k` over all (time, electrode)
/// samples of placement `k`, using the population standard deviation.
pub fn zscore_normalize(rec: &RecordingTensor) -> Result<NormalizedRecording> {
    let mut mu = Vec::with_capacity(rec.placements);
    let mut sigma = Vec::with_capacity(rec.placements);
    let mut out = Vec::with_capacity(rec.samples.len());
    for k in 0..rec.placements {
        let block = rec.placement(k);
        let (m, s) = mean_std(block);
        if !(s > 0.0) || !s.is_finite() {
            return Err(SignalError::DegeneratePlacement(k));
        }
        out.extend(block.iter().map(|x| (x - m) / s));
        mu.push(m);
        sigma.push(s);
    }
    let z = RecordingTensor {
        samples: out,
        ..rec.clone()
    };
    Ok(NormalizedRecording { z, mu, sigma })
}

/// One fixed-length window of a single electrode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub values: Vec<f64>,
    pub label: u8,
    pub placement: u32,
    pub electrode: u32,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentSet {
    pub segment_length: usize,
    pub segments: Vec<Segment>,
}

impl SegmentSet {
    pub fn new(segment_length: usize) -> Self {
        Self {
            segment_length,
            segments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Distinct placement ids in ascending order.
    pub fn placement_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.segments.iter().map(|s| s.placement).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn extend(&mut self, other: SegmentSet) -> Result<()> {
        if !other.is_empty() && !self.is_empty() && other.segment_length != self.segment_length {
            return Err(SignalError::InvalidArgument(format!(
                "segment length {} does not match {}",
                other.segment_length, self.segment_length
            )));
        }
        if self.is_empty() {
            self.segment_length = other.segment_length;
        }
        self.segments.extend(other.segments);
        Ok(())
    }
}

/// Number of segments produced from an (I, J, K) recording at length `m`.
pub fn segment_count(time_steps: usize, electrodes: usize, placements: usize, m: usize) -> usize {
    if m == 0 {
        return 0;
    }
    (time_steps / m) * electrodes * placements
}

/// Cuts every electrode of every placement into non-overlapping windows of
/// `m` samples starting at index 0. The trailing remainder is dropped.
pub fn segment(norm: &NormalizedRecording, m: usize) -> Result<SegmentSet> {
    segment_with_offset(norm, m, 0)
}

/// Like [`segment`], numbering placements from `placement_offset`.
pub fn segment_with_offset(
    norm: &NormalizedRecording,
    m: usize,
    placement_offset: u32,
) -> Result<SegmentSet> {
    let rec = &norm.z;
    if m == 0 || m > rec.time_steps {
        return Err(SignalError::InvalidArgument(format!(
            "segment length {m} must be in 1..={}",
            rec.time_steps
        )));
    }
    let per_electrode = rec.time_steps / m;
    let mut set = SegmentSet::new(m);
    set.segments.reserve(segment_count(
        rec.time_steps,
        rec.electrodes,
        rec.placements,
        m,
    ));
    for k in 0..rec.placements {
        for j in 0..rec.electrodes {
            for s in 0..per_electrode {
                let start = s * m;
                let values = (start..start + m).map(|i| rec.get(i, j, k)).collect();
                set.segments.push(Segment {
                    values,
                    label: rec.labels[k],
                    placement: placement_offset + k as u32,
                    electrode: j as u32,
                    start,
                });
            }
        }
    }
    Ok(set)
}

/// Apportions `n` items over `ratios` by largest remainder, guaranteeing at
/// least one item to every split with a positive ratio.
fn apportion(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(SignalError::InvalidArgument(
            "split ratios must lie in [0, 1]".into(),
        ));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SignalError::InvalidArgument(format!(
            "split ratios sum to {total}, expected 1"
        )));
    }
    let nonempty = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < nonempty || n < 3 {
        return Err(SignalError::InvalidArgument(format!(
            "{n} placements cannot fill {nonempty} non-empty splits (need at least 3 placements)"
        )));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        // 0.8 * 10 may land a hair above or below 8
        *c = (e + 1e-9).floor() as usize;
    }
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            remaining -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&d| counts[d]).unwrap();
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    Ok(counts)
}

/// Shuffles placement ids with `seed` and partitions them into
/// train/validation/test so that no placement straddles two splits.
pub fn split_by_placement(
    set: &SegmentSet,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(SegmentSet, SegmentSet, SegmentSet)> {
    let mut ids = set.placement_ids();
    let counts = apportion(ids.len(), ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut which = std::collections::HashMap::new();
    for (n, &id) in ids.iter().enumerate() {
        let split = if n < counts[0] {
            0
        } else if n < counts[0] + counts[1] {
            1
        } else {
            2
        };
        which.insert(id, split);
    }
    let mut out = [
        SegmentSet::new(set.segment_length),
        SegmentSet::new(set.segment_length),
        SegmentSet::new(set.segment_length),
    ];
    for seg in &set.segments {
        out[which[&seg.placement]].segments.push(seg.clone());
    }
    let [train, val, test] = out;
    Ok((train, val, test))
}
