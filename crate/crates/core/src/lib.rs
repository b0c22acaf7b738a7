//! Rank-wise merging, pruning and inspection of LoRA adapters.
//!
//! Each rank of a LoRA layer (row `i` of A with column `i` of B) is treated
//! as an independent unit. Units from several adapters are pooled per layer,
//! clustered with k-means, and the reweighted cluster centroids become the
//! ranks of the merged adapter.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`). The type
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! loaders, the experiment harness and the CLI use.

pub mod adapter;
pub mod cluster;
pub mod error;
pub mod harness;
pub mod merge;
pub mod msu;
pub mod rng;
pub mod safetensors;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Permutation;

pub type Matrix = tensor::Matrix<f64>;
pub type LoraLayer = adapter::LoraLayer<f64>;
pub type LoraAdapter = adapter::LoraAdapter<f64>;
pub type Msu = msu::Msu<f64>;
pub type MsuPool = msu::MsuPool<f64>;
pub type KmeansConfig = cluster::KmeansConfig<f64>;
pub type ClusterResult = cluster::ClusterResult<f64>;
pub type MergeOptions = merge::MergeOptions<f64>;
pub type TiesOptions = merge::TiesOptions<f64>;
pub type SyntheticTask = harness::SyntheticTask<f64>;

pub type Matrix32 = tensor::Matrix<f32>;
pub type LoraLayer32 = adapter::LoraLayer<f32>;
pub type LoraAdapter32 = adapter::LoraAdapter<f32>;
