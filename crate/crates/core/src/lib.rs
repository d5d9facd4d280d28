//! Map-matched trajectory recovery.
//!
//! The pipeline turns raw GPS traces into on-road `(segment, moving ratio)`
//! sequences at a fine target interval:
//!
//! - [`roadnet`]: road graph, projection, network distances
//! - [`trajectory`]: containers, sparsification and interval unification
//! - [`mapmatch`]: HMM map matching for ground truth
//! - [`prompts`]: natural-language trajectory prompt and regional flow grid
//! - [`embedder`]: interval-aware trajectory embedding
//! - [`encoder`]: frozen transformer with low-rank adapters and output heads
//! - [`training`]: losses, joint multi-interval training, fine-tuning
//! - [`metrics`]: segment accuracy/recall/precision and network-distance errors

pub mod autodiff;
pub mod config;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod geo;
pub mod mapmatch;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod prompts;
pub mod roadnet;
pub mod synth;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
pub use geo::{Bounds, LatLng};
pub use roadnet::{EdgeId, MatchedPoint, NodeId, RoadNetwork};
pub use trajectory::{GpsPoint, MapMatchedTrajectory, Slot, Trajectory, UnifiedTrajectory};
