//! Training-data attribution by information gain and information loss under
//! a Gaussian-process surrogate over tangent features.
//!
//! A [`FeatureStore`] holds one feature row per training example. Queries
//! are raw vectors in the same space. The greedy selectors in [`greedy`]
//! return the subset that most reduces (gain) or, when withheld, most
//! increases (loss) the posterior variance at the query, reported in nats.
//!
//! Runnable walkthroughs live in `crates/core/examples/`:
//!
//! ```text
//! cargo run --release --example attribution
//! cargo run --release --example backdoor_retrieval
//! ```

pub mod baselines;
pub mod cli;
pub mod criteria;
pub mod error;
pub mod gp;
pub mod greedy;
pub mod linalg;
pub mod oracle;
pub mod retrieval;
pub mod sketch;
pub mod store;
pub mod synth;

pub use criteria::{info_gain, info_loss, NatsScore};
pub use error::{Error, Result};
pub use gp::{ConditioningSet, NoiseModel, Surrogate};
pub use greedy::{AttributionResult, Criterion, GreedyConfig, GreedySelector};
pub use retrieval::{FlatIndex, GroundTruth, RankedList, Rankings};
pub use sketch::{sketch_features, SketchConfig, SketchFamily};
pub use store::{FeatureStore, QueryMatrix, QueryVector};
