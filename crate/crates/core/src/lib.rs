//! Hierarchical clustering with soft binary decision trees trained by a
//! contrastive objective.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod training;
pub mod tree;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use export::HierarchyExport;
pub use metrics::{ClassDistanceMatrix, ClusterScores};
pub use training::{TrainSchedule, TrainState};
pub use tree::TreeTopology;
