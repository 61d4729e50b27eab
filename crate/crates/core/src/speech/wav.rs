use std::path::Path;

use super::{AudioClip, SpeechError};

/// Read a mono WAV file: 16-bit signed PCM (divided by 32768) or 32-bit
/// float.
pub fn read_wav_mono(path: &Path) -> Result<AudioClip, SpeechError> {
    let reader =
        hound::WavReader::open(path).map_err(|e| SpeechError::Io(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(SpeechError::Io(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Result<Vec<f64>, _> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect(),
        (fmt, bits) => {
            return Err(SpeechError::Io(format!(
                "{}: unsupported format {fmt:?}/{bits}-bit (need PCM16 or float32)",
                path.display()
            )))
        }
    };
    let samples = samples.map_err(|e| SpeechError::Io(format!("{}: {e}", path.display())))?;
    AudioClip::new(samples, spec.sample_rate)
}

/// Write 16 kHz PCM16 mono. Samples are clamped to [-1, 1].
pub fn write_wav_mono_16k(path: &Path, samples: &[f64]) -> Result<(), SpeechError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| SpeechError::Io(format!("{}: {e}", path.display())))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| SpeechError::Io(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| SpeechError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}
