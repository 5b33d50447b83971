//! Flow-guided latent warping for temporally consistent zero-shot video
//! translation with image diffusion samplers.
//!
//! The crate bundles the numerical pieces (tensor grids, flow warping,
//! occlusion masks, attention, a deterministic Euler sampler), a frame-loop
//! pipeline that aligns each frame's latents with the previous frame's, a
//! synthetic scene generator with exact flow, and temporal-consistency
//! metrics.

pub mod attention;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod grid;
pub mod kv;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use flow::FlowField;
pub use grid::{Boundary, FrameImage, LatentGrid};
pub use mask::{BinaryMask, MaskParams};
pub use pipeline::{PipelineConfig, SequenceBundle};
pub use synth::SceneSpec;
