//! Attribution of speech recordings to one of five known synthetic-speech
//! generators or an "unknown" sixth class.
//!
//! The pipeline runs waveform -> log-mel spectrogram -> compact CNN, trained
//! with label smoothing, spectrogram augmentation, stratified five-fold
//! cross-validation, a soft pseudo-labeling round and probability-mean
//! ensembling. A procedural corpus of parametric generator families stands in
//! for real generator data.

pub mod audio_io;
pub mod augment;
pub mod datagen;
pub mod dsp;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod pipeline;
pub mod seed;

/// Five known generators plus the unknown class.
pub const NUM_CLASSES: usize = 6;
/// Index of the "unknown generator" class.
pub const UNKNOWN_CLASS: usize = 5;
