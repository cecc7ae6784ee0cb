//! Multi-modal dataset reinforcement and reinforced contrastive distillation
//! on a deterministic synthetic image-text world.
//!
//! The pipeline has two halves. Generation ([`coordinator`]) draws samples from
//! a [`world::World`], replays stored augmentations ([`augment`]), encodes them
//! with frozen teachers ([`encoders`]), and writes BF16 shards ([`shard`]).
//! Training ([`train`]) reads those shards and fits a linear two-tower student
//! with the mixed contrastive and ensemble-KL objective in [`loss`].

pub mod ablation;
pub mod augment;
pub mod container;
pub mod coordinator;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod loss;
pub mod seed;
pub mod shard;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{LogitScale, Matrix};
