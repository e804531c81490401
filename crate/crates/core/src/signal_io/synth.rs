//! Synthetic two-class spike-train generator used in place of clinical data.
//!
//! Class 0 ("normal"): a biphasic spike every `base_interval` samples at a
//! random phase, fixed amplitude, low Gaussian noise.
//! Class 1 ("AFib"): intervals jittered uniformly by `±interval_jitter`,
//! amplitudes drawn from `amplitude_range`, plus a sinusoidal oscillation of
//! period `oscillation_period` samples on top of the same noise.
//! Both classes ride on a slow baseline wander: a sinusoid of amplitude
//! `wander_amplitude` whose period is drawn uniformly from `wander_period`.
//!
//! Segments are grouped `placement_size` at a time into synthetic placements
//! (single class each) and z-scored per placement, like ingested recordings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{mean_std, Result, Segment, SegmentSet, SignalError};

/// Biphasic spike shape; the peak sits at offset 2.
pub const SPIKE_TEMPLATE: [f64; 7] = [0.15, 0.5, 1.0, 0.3, -0.45, -0.25, -0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub base_interval: usize,
    pub interval_jitter: usize,
    pub amplitude_range: (f64, f64),
    pub oscillation_amplitude: f64,
    pub oscillation_period: f64,
    pub noise_std: f64,
    pub wander_amplitude: f64,
    pub wander_period: (f64, f64),
    pub placement_size: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            base_interval: 40,
            interval_jitter: 16,
            amplitude_range: (0.6, 1.4),
            oscillation_amplitude: 0.2,
            oscillation_period: 6.0,
            noise_std: 0.03,
            wander_amplitude: 0.2,
            wander_period: (60.0, 160.0),
            placement_size: 10,
        }
    }
}

fn add_spike(values: &mut [f64], peak: isize, amplitude: f64) {
    for (o, w) in SPIKE_TEMPLATE.iter().enumerate() {
        let t = peak + o as isize - 2;
        if t >= 0 && (t as usize) < values.len() {
            values[t as usize] += amplitude * w;
        }
    }
}

fn generate(class: u8, m: usize, p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, p.noise_std).expect("finite noise std");
    let mut values: Vec<f64> = (0..m).map(|_| noise.sample(rng)).collect();
    let mut t = rng.random_range(0..p.base_interval) as isize;
    while (t as usize) < m {
        if class == 0 {
            add_spike(&mut values, t, 1.0);
            t += p.base_interval as isize;
        } else {
            let amp = rng.random_range(p.amplitude_range.0..p.amplitude_range.1);
            add_spike(&mut values, t, amp);
            let j = p.interval_jitter as i64;
            t += (p.base_interval as i64 + rng.random_range(-j..=j)) as isize;
        }
    }
    if class == 1 {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for (i, v) in values.iter_mut().enumerate() {
            *v += p.oscillation_amplitude
                * (std::f64::consts::TAU * i as f64 / p.oscillation_period + phase).sin();
        }
    }
    if p.wander_amplitude != 0.0 {
        let period = rng.random_range(p.wander_period.0..=p.wander_period.1);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for (i, v) in values.iter_mut().enumerate() {
            *v += p.wander_amplitude * (std::f64::consts::TAU * i as f64 / period + phase).sin();
        }
    }
    values
}

/// Balanced synthetic dataset: `n_per_class` segments of length `m` per class.
pub fn synthesize_dataset(n_per_class: usize, m: usize, seed: u64) -> Result<SegmentSet> {
    synthesize_with(n_per_class, m, seed, &SynthParams::default())
}

pub fn synthesize_with(
    n_per_class: usize,
    m: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<SegmentSet> {
    if n_per_class == 0 {
        return Err(SignalError::InvalidArgument("n_per_class must be at least 1".into()));
    }
    if m == 0 {
        return Err(SignalError::InvalidArgument("segment length must be positive".into()));
    }
    if params.wander_period.0 <= 0.0 || params.wander_period.0 > params.wander_period.1 {
        return Err(SignalError::InvalidArgument("wander period range must be positive and ordered".into()));
    }
    if params.placement_size == 0 || params.base_interval == 0 {
        return Err(SignalError::InvalidArgument("placement size and interval must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups_per_class = n_per_class.div_ceil(params.placement_size);
    let mut set = SegmentSet::new(m);
    for class in 0..2u8 {
        let raw: Vec<Vec<f64>> = (0..n_per_class).map(|_| generate(class, m, params, &mut rng)).collect();
        for (g, group) in raw.chunks(params.placement_size).enumerate() {
            let flat: Vec<f64> = group.iter().flatten().copied().collect();
            let (mu, sigma) = mean_std(&flat);
            let placement = (class as usize * groups_per_class + g) as u32;
            for (e, values) in group.iter().enumerate() {
                set.segments.push(Segment {
                    values: values.iter().map(|v| (v - mu) / sigma).collect(),
                    label: class,
                    placement,
                    electrode: e as u32,
                    start: 0,
                });
            }
        }
    }
    Ok(set)
}
