//! Audio-visual deepfake detection through modality-invariant and
//! modality-specific subspace representations.
//!
//! The pipeline: per-modality features (MFCC for audio, precomputed vectors
//! for video frames) are segmented into aligned sequences, encoded by LSTMs,
//! projected into a shared-dimension space, factored into specific and
//! invariant subspaces, fused by multi-head self-attention, and classified
//! per sequence with video-level score averaging. Training minimizes a
//! four-term objective: central moment discrepancy between the invariant
//! representations, soft orthogonality between subspaces, decoder
//! reconstruction error, and cross-entropy.
//!
//! Everything runs on a small reverse-mode autodiff tape in `f64`, verified
//! end to end by central finite differences.

pub mod audio;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use tape::{finite_diff_check, OpKind, Tape, Var};
pub use tensor::Tensor;
