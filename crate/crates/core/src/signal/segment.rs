use rand::Rng;

use super::mel::{log_mel, MelConfig, MelSpectrogram};
use super::wav::AudioClip;
use crate::error::Result;
use crate::tensor::Tensor3;

/// A training segment and the log-mel frames computed from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPair {
    pub wave: Tensor3<f32>,
    pub mel: MelSpectrogram,
}

/// Hop-aligned start positions available for a clip of `len` samples.
pub fn segment_starts(len: usize, segment: usize, hop: usize) -> usize {
    if len <= segment {
        1
    } else {
        (len - segment) / hop + 1
    }
}

/// Picks a uniformly random hop-aligned window of `segment` samples
/// (zero-padding short clips) and extracts its log-mel.
pub fn sample_segment<R: Rng + ?Sized>(
    clip: &AudioClip,
    segment: usize,
    cfg: &MelConfig,
    rng: &mut R,
) -> Result<SegmentPair> {
    let start = rng.gen_range(0..segment_starts(clip.len(), segment, cfg.hop)) * cfg.hop;
    let mut wave: Vec<f32> = clip
        .samples
        .iter()
        .skip(start)
        .take(segment)
        .copied()
        .collect();
    wave.resize(segment, 0.0);
    let mel = log_mel(&wave, cfg)?;
    Ok(SegmentPair {
        wave: Tensor3::from_signal(&wave),
        mel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::wav::SAMPLE_RATE;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(len: usize) -> AudioClip {
        AudioClip::new((0..len).map(|i| i as f32 / len as f32).collect(), SAMPLE_RATE)
    }

    #[test]
    fn exact_length_clip_starts_at_zero() {
        let cfg = MelConfig::default();
        let clip = ramp(8192);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let seg = sample_segment(&clip, 8192, &cfg, &mut rng).unwrap();
            assert_eq!(seg.wave.data(), clip.samples.as_slice());
            assert_eq!(seg.wave.shape().time, 8192);
            assert_eq!(seg.mel.n_frames, 33);
        }
    }

    #[test]
    fn starts_are_hop_aligned() {
        let cfg = MelConfig::default();
        let clip = ramp(8448);
        assert_eq!(segment_starts(8448, 8192, 256), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..40 {
            let seg = sample_segment(&clip, 8192, &cfg, &mut rng).unwrap();
            let start = (seg.wave.data()[0] * 8448.0).round() as usize;
            seen.insert(start);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 256]);
    }

    #[test]
    fn short_clip_is_zero_padded() {
        let cfg = MelConfig::default();
        let clip = ramp(1000);
        let seg = sample_segment(&clip, 8192, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(seg.wave.shape().time, 8192);
        assert!(seg.wave.data()[1000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mel_matches_recomputation() {
        let cfg = MelConfig::default();
        let clip = crate::signal::corpus::synth_clip(5, 0);
        let seg = sample_segment(&clip, 8192, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let again = log_mel(seg.wave.data(), &cfg).unwrap();
        assert_eq!(seg.mel, again);
    }
}
