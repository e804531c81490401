//! Minimal WFDB reader/writer: single-segment records, format 16 only.
//!
//! Header grammar (whitespace separated, `#` starts a comment line):
//!
//! ```text
//! <name> <nsig> <fs> <nsamples>
//! <file> <format> <gain> <baseline> <units>     (one line per signal)
//! ```
//!
//! The signal file holds little-endian two's-complement int16 samples,
//! channel-interleaved. Physical value = (adc - baseline) / gain.

use super::{RecordingTensor, Result, SignalError};

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub file: String,
    pub gain: f64,
    pub baseline: i32,
    pub units: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WfdbHeader {
    pub record_name: String,
    pub sample_rate_hz: u32,
    pub num_samples: usize,
    pub channels: Vec<ChannelSpec>,
}

impl WfdbHeader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (line_no, record_line) = lines.next().ok_or(SignalError::Header {
            line: 1,
            reason: "missing record line".into(),
        })?;
        let fields: Vec<&str> = record_line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(SignalError::Header {
                line: line_no,
                reason: format!(
                    "record line needs `name nsig fs nsamples`, found {} fields",
                    fields.len()
                ),
            });
        }
        if fields[0].contains('/') {
            return Err(SignalError::Header {
                line: line_no,
                reason: "multi-segment records are not supported".into(),
            });
        }
        let bad = |what: &str, v: &str| SignalError::Header {
            line: line_no,
            reason: format!("invalid {what} `{v}`"),
        };
        let nsig: usize = fields[1].parse().map_err(|_| bad("signal count", fields[1]))?;
        let fs: u32 = fields[2].parse().map_err(|_| bad("sampling frequency", fields[2]))?;
        let nsamples: usize = fields[3].parse().map_err(|_| bad("sample count", fields[3]))?;
        if nsig == 0 {
            return Err(bad("signal count", fields[1]));
        }
        if fs == 0 {
            return Err(bad("sampling frequency", fields[2]));
        }

        let mut channels = Vec::with_capacity(nsig);
        for _ in 0..nsig {
            let (n, line) = lines.next().ok_or(SignalError::Header {
                line: line_no + channels.len() + 1,
                reason: format!("expected {nsig} signal lines, found {}", channels.len()),
            })?;
            channels.push(parse_signal_line(n, line)?);
        }
        if let Some((n, _)) = lines.next() {
            return Err(SignalError::Header {
                line: n,
                reason: "unexpected line after signal specifications".into(),
            });
        }
        if channels.iter().any(|c| c.file != channels[0].file) {
            return Err(SignalError::Unsupported(
                "signals spread over several files".into(),
            ));
        }
        Ok(Self {
            record_name: fields[0].to_string(),
            sample_rate_hz: fs,
            num_samples: nsamples,
            channels,
        })
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{} {} {} {}\n",
            self.record_name,
            self.channels.len(),
            self.sample_rate_hz,
            self.num_samples
        );
        for c in &self.channels {
            out.push_str(&format!(
                "{} 16 {} {} {}\n",
                c.file, c.gain, c.baseline, c.units
            ));
        }
        out
    }
}

fn parse_signal_line(line_no: usize, line: &str) -> Result<ChannelSpec> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(SignalError::Header {
            line: line_no,
            reason: format!(
                "signal line needs `file format gain baseline units`, found {} fields",
                fields.len()
            ),
        });
    }
    let format: u32 = fields[1].parse().map_err(|_| SignalError::Header {
        line: line_no,
        reason: format!("invalid format `{}`", fields[1]),
    })?;
    if format != 16 {
        return Err(SignalError::Header {
            line: line_no,
            reason: format!("only format 16 is supported, found {format}"),
        });
    }
    let gain: f64 = fields[2]
        .parse()
        .ok()
        .filter(|g: &f64| g.is_finite() && *g > 0.0)
        .ok_or_else(|| SignalError::Header {
            line: line_no,
            reason: format!("invalid gain `{}`", fields[2]),
        })?;
    let baseline: i32 = fields[3].parse().map_err(|_| SignalError::Header {
        line: line_no,
        reason: format!("invalid baseline `{}`", fields[3]),
    })?;
    Ok(ChannelSpec {
        file: fields[0].to_string(),
        gain,
        baseline,
        units: fields[4].to_string(),
    })
}

/// Parses a header and its signal payload into a header description and a
/// single-placement recording (label 0).
pub fn parse_wfdb_record(header_text: &[u8], signal_bytes: &[u8]) -> Result<(WfdbHeader, RecordingTensor)> {
    let text = std::str::from_utf8(header_text).map_err(|e| SignalError::Header {
        line: 1,
        reason: format!("header is not UTF-8: {e}"),
    })?;
    let header = WfdbHeader::parse(text)?;
    let nsig = header.channels.len();
    let expected = 2 * header.num_samples * nsig;
    if signal_bytes.len() != expected {
        return Err(SignalError::LengthMismatch {
            expected,
            actual: signal_bytes.len(),
        });
    }
    let samples = signal_bytes
        .chunks_exact(2)
        .enumerate()
        .map(|(n, b)| {
            let adc = i16::from_le_bytes([b[0], b[1]]) as f64;
            let ch = &header.channels[n % nsig];
            (adc - ch.baseline as f64) / ch.gain
        })
        .collect();
    let rec = RecordingTensor::new(
        samples,
        header.num_samples,
        nsig,
        1,
        header.sample_rate_hz,
        vec![0],
    )?;
    Ok((header, rec))
}

pub fn parse_wfdb(header_text: &[u8], signal_bytes: &[u8]) -> Result<RecordingTensor> {
    parse_wfdb_record(header_text, signal_bytes).map(|(_, rec)| rec)
}

/// Encodes placement 0 of `rec` as a header and a format-16 payload.
/// Physical values are mapped back with `round(x * gain) + baseline` and
/// must fit in int16.
pub fn write_wfdb(
    rec: &RecordingTensor,
    record_name: &str,
    channels: &[ChannelSpec],
) -> Result<(String, Vec<u8>)> {
    if channels.len() != rec.electrodes() {
        return Err(SignalError::InvalidArgument(format!(
            "{} channel specs for {} electrodes",
            channels.len(),
            rec.electrodes()
        )));
    }
    let header = WfdbHeader {
        record_name: record_name.to_string(),
        sample_rate_hz: rec.sample_rate_hz,
        num_samples: rec.time_steps(),
        channels: channels.to_vec(),
    };
    let mut bytes = Vec::with_capacity(2 * rec.placement(0).len());
    for (n, &x) in rec.placement(0).iter().enumerate() {
        let ch = &channels[n % channels.len()];
        let adc = (x * ch.gain).round() + ch.baseline as f64;
        if !(i16::MIN as f64..=i16::MAX as f64).contains(&adc) {
            return Err(SignalError::InvalidArgument(format!(
                "sample {n} ({x}) does not fit in 16 bits at gain {}",
                ch.gain
            )));
        }
        bytes.extend_from_slice(&(adc as i16).to_le_bytes());
    }
    Ok((header.render(), bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "iaf1_afw 5 1000 4\n\
        iaf1_afw.dat 16 200 0 mV\n\
        iaf1_afw.dat 16 200 0 mV\n\
        iaf1_afw.dat 16 200 0 mV\n\
        iaf1_afw.dat 16 200 0 mV\n\
        iaf1_afw.dat 16 200 0 mV\n";

    fn payload(n: usize) -> Vec<u8> {
        (0..n as i16).flat_map(|v| (v * 3 - 10).to_le_bytes()).collect()
    }

    #[test]
    fn five_channel_header() {
        let rec = parse_wfdb(HEADER.as_bytes(), &payload(20)).unwrap();
        assert_eq!(rec.electrodes(), 5);
        assert_eq!(rec.sample_rate_hz, 1000);
        assert_eq!(rec.time_steps(), 4);
        assert_eq!(rec.get(0, 0, 0), -10.0 / 200.0);
        assert_eq!(rec.get(1, 2, 0), (7.0 * 3.0 - 10.0) / 200.0);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = payload(20);
        bytes.pop();
        match parse_wfdb(HEADER.as_bytes(), &bytes) {
            Err(SignalError::LengthMismatch { expected: 40, actual: 39 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let bad = "# comment\nrec 1 1000\n";
        match WfdbHeader::parse(bad) {
            Err(SignalError::Header { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let bad = "rec 1 1000 10\nrec.dat 212 200 0 mV\n";
        match WfdbHeader::parse(bad) {
            Err(SignalError::Header { line: 2, reason }) => assert!(reason.contains("format 16")),
            other => panic!("{other:?}"),
        }
        let bad = "rec 2 1000 10\nrec.dat 16 200 0 mV\n";
        assert!(matches!(WfdbHeader::parse(bad), Err(SignalError::Header { .. })));
        let bad = "rec 1 1000 10\nrec.dat 16 zero 0 mV\n";
        assert!(matches!(WfdbHeader::parse(bad), Err(SignalError::Header { line: 2, .. })));
    }

    #[test]
    fn writer_round_trip() {
        let rec = parse_wfdb(HEADER.as_bytes(), &payload(20)).unwrap();
        let header = WfdbHeader::parse(HEADER).unwrap();
        let (text, bytes) = write_wfdb(&rec, "iaf1_afw", &header.channels).unwrap();
        assert_eq!(bytes, payload(20));
        let back = parse_wfdb(text.as_bytes(), &bytes).unwrap();
        assert_eq!(back, rec);
    }

    proptest::proptest! {
        #[test]
        fn int16_round_trip_is_bit_exact(
            adc in proptest::collection::vec(proptest::num::i16::ANY, 1..120),
            gain in 1u32..2000,
            baseline in -500i32..500,
        ) {
            let nsig = 3;
            let n = adc.len() / nsig * nsig;
            proptest::prop_assume!(n > 0);
            let header = format!(
                "r {nsig} 250 {}\n{}",
                n / nsig,
                "r.dat 16 GAIN BASE uV\n".repeat(nsig)
                    .replace("GAIN", &gain.to_string())
                    .replace("BASE", &baseline.to_string())
            );
            // keep adc - baseline within int16 so the writer can re-encode it
            let bytes: Vec<u8> = adc[..n].iter()
                .map(|&a| (a as i32).clamp(i16::MIN as i32 + 500, i16::MAX as i32 - 500) as i16)
                .flat_map(|a| a.to_le_bytes())
                .collect();
            let (hdr, rec) = parse_wfdb_record(header.as_bytes(), &bytes).unwrap();
            let (_, again) = write_wfdb(&rec, "r", &hdr.channels).unwrap();
            proptest::prop_assert_eq!(again, bytes);
        }
    }
}
