//! Joint human motion prediction and action recognition.
//!
//! The model encodes an observed skeleton sequence with an embedding, a
//! graph convolution and a stacked bidirectional LSTM, extracts a non-local
//! attention feature map over frames, and decodes it twice: an LSTM decoder
//! that integrates predicted displacements into future poses, and a
//! CNN + linear-chain CRF head that labels the action.
//!
//! Everything runs on the in-crate [`tensor`] autodiff core in `f64`.

pub mod rng;
pub mod tensor;
pub mod skeleton;
pub mod layers;
pub mod loss;
pub mod encoder;
pub mod attention;
pub mod motion;
pub mod recognition;
pub mod model;
pub mod data;
pub mod train;
pub mod checkpoint;
pub mod verify;
