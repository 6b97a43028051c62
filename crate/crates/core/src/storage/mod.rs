//! Datasets, wire formats and the synthetic scene generator.

pub mod codec;
pub mod dataset;
pub mod synthetic;

pub use codec::{
    checkpoint_size, decode_checkpoint, decode_delta, delta_size, encode_checkpoint, encode_delta, FrameDelta,
};
pub use dataset::{load_dataset, Dataset, FrameData};
pub use synthetic::{generate_synthetic, oracle_render, MotionScript, SceneSpec, SyntheticDataset};
