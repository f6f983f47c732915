//! WAV loading, MFCC extraction and fixed-length segmentation.

mod mfcc;
mod segment;
mod wav;

pub use mfcc::{compute_mfcc, FeatureMatrix, MfccConfig, MfccExtractor};
pub use segment::{normalize_features, segment_utterance, FeatureSegment, FeatureStats, STD_FLOOR};
pub use wav::{load_wav, write_wav_i16, AudioClip};
