//! Neural-collapse-guided generalized category discovery: fixed simplex ETF
//! prototypes, spherical k-means with stable pseudo-labels, alignment and
//! contrastive objectives, a projection head, and GCD/NC evaluation.

pub mod clustering;
pub mod data;
pub mod error;
pub mod etf;
pub mod evaluation;
pub mod head;
pub mod losses;
pub mod numerics;
pub mod scm;
pub mod trainer;

#[cfg(any(test, feature = "test-oracles"))]
pub mod testing;

pub use clustering::{ClusterState, ConfidentSet};
pub use data::{EmbeddingFormat, GcdDataset, SplitSpec};
pub use error::{Error, Result};
pub use etf::EtfPrototypeSet;
pub use evaluation::{GcdAccuracy, NcMetrics};
pub use head::HeadParams;
pub use losses::LossValue;
pub use numerics::{EmbeddingBatch, Matrix, SeededRng};
pub use scm::{ContingencyMatrix, PermutationMap};
pub use trainer::{MetricsRecord, TrainConfig, TrainState};
