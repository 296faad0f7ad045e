//! Federated transfer learning simulator.
//!
//! A frozen random-feature base stands in for a pre-trained extractor; only
//! the dense softmax head is trained by clients and exchanged with the
//! server. The server aggregates either with sample-weighted FedAvg or with
//! fine-tuned aggregation (FTA), which runs a golden-section search over the
//! step size applied to the averaged client delta, minimizing loss on a
//! server-held validation set.

pub mod aggregate;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod param;
pub mod rng;

pub use error::{Error, Result};
pub use param::ParamVector;
pub use rng::{SeededRng, Stream};
