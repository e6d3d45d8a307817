//! WAV input: PCM 16-bit signed little-endian, mono, 8 or 16 kHz.

use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::AudioSignal;

pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidData(format!(
            "{}: expected mono audio, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::InvalidData(format!(
            "{}: expected 16-bit signed PCM",
            path.display()
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let floats = samples.iter().map(|&s| s as f64 / 32768.0).collect();
    AudioSignal::new(floats, spec.sample_rate)
}

/// Write a signal as 16-bit PCM (used by the synthetic-audio demo path).
pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for &s in signal.samples() {
        let clipped = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(clipped)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let samples: Vec<f64> = (0..800)
            .map(|i| 0.25 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 8000.0).sin())
            .collect();
        let signal = AudioSignal::new(samples.clone(), 8000).unwrap();
        write_wav(&path, &signal).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 8000);
        assert_eq!(back.samples().len(), 800);
        for (a, b) in samples.iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            writer.write_sample(0i16).unwrap();
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();
        assert!(read_wav(&path).is_err());
    }
}
