//! Training objectives, decoders and phonetic evaluation for phone recognition.
//!
//! * [`ipa`]: IPA segmentation and articulatory feature tables
//! * [`metrics`]: alignment, PER/PFER and per-feature error attribution
//! * [`ctc`]: vanilla, intermediate, self-conditioned, hierarchical and joint CTC objectives
//! * [`decode`]: greedy and prefix beam search decoding
//! * [`toymodel`]: a small trainable encoder/decoder with hand-written gradients
//! * [`analysis`]: coverage and rank-correlation analysis across languages
//! * [`formats`]: file formats consumed and produced by the CLI

pub mod analysis;
pub mod ctc;
pub mod decode;
pub mod formats;
pub mod ipa;
pub mod metrics;
pub mod toymodel;

pub use ctc::{LogPosteriorGrid, LossConfig, Objective, TargetSequence};
pub use ipa::{FeatureTable, Phone, PhoneSequence};
pub use metrics::{Alignment, ScoreReport};
