//! 16-bit PCM WAV reading and writing.

use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every training clip must use.
pub const SAMPLE_RATE: u32 = 22050;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

/// Converts a signed 16-bit sample to `[-1, 1)`.
pub fn pcm16_to_float(v: i16) -> f32 {
    v as f32 / 32768.0
}

pub fn float_to_pcm16(v: f32) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn format_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a 16-bit PCM WAV at 22050 Hz, averaging channels down to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| format_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: only 16-bit integer PCM is supported ({:?}, {} bits)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            expected: SAMPLE_RATE,
            actual: spec.sample_rate,
        });
    }
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format_error(path, e))?;
    let channels = spec.channels.max(1) as usize;
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&v| pcm16_to_float(v)).sum::<f32>() / channels as f32)
        .collect();
    Ok(AudioClip::new(samples, spec.sample_rate))
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| format_error(path, e))?;
    for &s in &clip.samples {
        writer
            .write_sample(float_to_pcm16(s))
            .map_err(|e| format_error(path, e))?;
    }
    writer.finalize().map_err(|e| format_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm_scaling() {
        assert_eq!(pcm16_to_float(16384), 0.5);
        assert_eq!(pcm16_to_float(-32768), -1.0);
        assert_eq!(float_to_pcm16(1.0), 32767);
        assert_eq!(float_to_pcm16(-1.0), -32768);
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one_second.wav");
        let samples: Vec<f32> = (0..22050).map(|i| ((i % 100) as f32 / 100.0) - 0.5).collect();
        write_wav(&path, &AudioClip::new(samples.clone(), SAMPLE_RATE)).unwrap();
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.samples.len(), 22050);
        for (a, b) in clip.samples.iter().zip(&samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_is_downmixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(16384i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.samples, vec![0.25; 10]);
    }

    #[test]
    fn rejects_wrong_rate_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rate.wav");
        write_wav(&path, &AudioClip::new(vec![0.0; 16], 16000)).unwrap();
        assert!(matches!(
            load_wav(&path),
            Err(Error::SampleRate {
                expected: 22050,
                actual: 16000
            })
        ));
        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"definitely not a riff file").unwrap();
        assert!(matches!(load_wav(&junk), Err(Error::Format(_))));
    }
}
