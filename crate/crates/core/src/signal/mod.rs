//! Audio ingestion, log-mel features, segmenting and the synthetic corpus.

pub mod corpus;
pub mod mel;
pub mod segment;
pub mod wav;

pub use corpus::{synth_clip, synth_corpus};
pub use mel::{log_mel, mel_project, stft, LogMel, MelConfig, MelFilterbank, MelSpectrogram};
pub use segment::{sample_segment, SegmentPair};
pub use wav::{load_wav, write_wav, AudioClip, SAMPLE_RATE};
