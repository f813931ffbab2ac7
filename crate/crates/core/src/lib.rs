//! Continual learning with rank-selective low-rank adapters on a toy
//! CLIP-style dual encoder.

pub mod adapter;
pub mod analysis;
pub mod encoder;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;
