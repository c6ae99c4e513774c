//! Discrete-time simulator for personalized federated learning at the edge.
//!
//! Each edge device runs a ridge-regularized linear predictor over its own
//! sensor stream. A central location aggregates device models with FedAvg and
//! broadcasts the merged model back. On top of that, devices choose between
//! their personalized and federated models with one of eight strategies:
//!
//! | strategy | prediction |
//! |----------|------------|
//! | `GM`   | one central model trained on raw data from every device |
//! | `FM`   | plain federated model, refreshed at epochs |
//! | `L`    | local model trained only on the device's stream |
//! | `EFM`  | local model re-seeded from the federated model when selected |
//! | `LFM`  | local model seeded once, pushed to the center at epochs |
//! | `SM`   | fixed blend of local and federated model |
//! | `ASM`  | blend weighted by a sliding window of binary rewards |
//! | `TOSM` | switches between the two models with an optimal-stopping rule |
//!
//! The [`sim`] module drives full experiments with seeded checkpoints,
//! parameter sweeps and JSON/CSV report output.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod linmodel;
pub mod metrics;
pub mod selection;
pub mod sim;
pub mod strategies;
pub mod window;

pub use config::ExperimentConfig;
pub use data::{DeviceStream, Sample};
pub use error::{Error, Result};
pub use linmodel::ModelParams;
pub use strategies::Strategy;
pub use window::SlidingWindow;
