use super::{RecordingTensor, Result, SignalError};

/// Parses a CSV recording: a header row naming the electrodes, then one row
/// per time step. Produces a single-placement recording with label 0.
pub fn parse_csv(text: &str, sample_rate_hz: u32) -> Result<RecordingTensor> {
    let mut rows = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = rows.next().ok_or(SignalError::NoSamples)?;
    let width = header.split(',').count();

    let mut samples = Vec::new();
    let mut time_steps = 0;
    for (row, line) in rows {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(SignalError::Csv {
                row,
                column: cells.len().min(width) + 1,
                reason: format!("expected {width} columns, found {}", cells.len()),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| SignalError::Csv {
                row,
                column: col + 1,
                reason: format!("`{}` is not a number", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(SignalError::Csv {
                    row,
                    column: col + 1,
                    reason: "non-finite value".into(),
                });
            }
            samples.push(v);
        }
        time_steps += 1;
    }
    if time_steps == 0 {
        return Err(SignalError::NoSamples);
    }
    RecordingTensor::new(samples, time_steps, width, 1, sample_rate_hz, vec![0])
}
