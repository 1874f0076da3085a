//! Training-free subnet search and weight reformation for toy decoder-only
//! transformers: importance scoring, evolutionary mask search, ADMM column
//! reformation, and dense extraction of the final subnet.

pub mod container;
pub mod data;
pub mod error;
pub mod extract;
pub mod genome;
pub mod importance;
pub mod model;
pub mod numerics;
pub mod reference;
pub mod reform;
pub mod search;
pub mod util;

pub use container::TensorContainer;
pub use error::{Error, Result};
pub use extract::DenseSubnetModel;
pub use genome::{Genome, MutationParams, SearchSpace, SelectionMask, SimilarityMode};
pub use model::{CountScope, GramSet, ModelConfig, ModelWeights, Precision, TrainerSettings};
pub use numerics::Matrix;
