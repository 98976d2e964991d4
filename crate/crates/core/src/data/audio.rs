//! Reading and writing the sensor files: 16-bit mono PCM WAV and single-column text.

use std::path::Path;

use crate::data::manifest::SampleRecord;
use crate::error::{Error, Result};
use crate::signal::Waveform;

const PCM_SCALE: f32 = 32768.0;

fn audio_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Audio {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads a mono 16-bit integer WAV as samples in `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| audio_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(audio_err(path, format!("{} channels; only mono is supported", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(audio_err(
            path,
            format!("{:?} {}-bit encoding; only 16-bit PCM is supported", spec.sample_format, spec.bits_per_sample),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio_err(path, e.to_string()))?;
    Waveform::new(samples, spec.sample_rate as f64).map_err(|e| audio_err(path, e.to_string()))
}

/// Writes samples as 16-bit mono PCM, rounding to the nearest code and saturating.
pub fn write_wav(path: &Path, x: &Waveform) -> Result<()> {
    let rate = x.rate().round();
    if rate < 1.0 || rate > u32::MAX as f64 {
        return Err(audio_err(path, format!("rate {} not representable", x.rate())));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(|e| audio_err(path, e.to_string()))?;
        for &s in x.samples() {
            let q = (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(q).map_err(|e| audio_err(path, e.to_string()))?;
        }
        w.finalize().map_err(|e| audio_err(path, e.to_string()))?;
    }
    crate::io::write_atomic(path, &buf.into_inner())
}

/// Parses one decimal value per non-empty line.
pub fn parse_text_signal(text: &str, rate: f64, path: &Path) -> Result<Waveform> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f32 = t
            .replace('\u{2212}', "-")
            .parse()
            .map_err(|_| audio_err(path, format!("line {}: `{t}` is not a number", i + 1)))?;
        samples.push(v);
    }
    Waveform::new(samples, rate).map_err(|e| audio_err(path, e.to_string()))
}

pub fn read_text_signal(path: &Path, rate: f64) -> Result<Waveform> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text_signal(&text, rate, path)
}

/// Writes the shortest round-tripping decimal form of each sample, one per line.
pub fn write_text_signal(path: &Path, x: &Waveform) -> Result<()> {
    let mut text = String::with_capacity(x.len() * 12);
    for s in x.samples() {
        text.push_str(&s.to_string());
        text.push('\n');
    }
    crate::io::write_atomic(path, text.as_bytes())
}

fn is_wav(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Loads a record's acoustic and vibration signals at their native rates.
pub fn load_sample(record: &SampleRecord) -> Result<(Waveform, Waveform)> {
    let acoustic = read_wav(&record.acoustic_path)?;
    if (acoustic.rate() - record.acoustic_rate).abs() > 0.5 {
        return Err(audio_err(
            &record.acoustic_path,
            format!("file rate {} differs from declared {}", acoustic.rate(), record.acoustic_rate),
        ));
    }
    let vibration = if is_wav(&record.vibration_path) {
        let v = read_wav(&record.vibration_path)?;
        if (v.rate() - record.vibration_rate).abs() > 0.5 {
            return Err(audio_err(
                &record.vibration_path,
                format!("file rate {} differs from declared {}", v.rate(), record.vibration_rate),
            ));
        }
        v
    } else {
        read_text_signal(&record.vibration_path, record.vibration_rate)?
    };
    Ok((acoustic, vibration))
}
