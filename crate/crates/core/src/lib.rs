//! Two-stream attention encoder for continuous sequence recognition.
//!
//! A context stream and a hand stream of frame features are each encoded by
//! stacked self-attention units; a cross-attention layer lets hand positions
//! query the context stream, optionally restricted to a local window. Three
//! CTC heads (context, hand, combined) are trained jointly and the combined
//! head decodes.

pub mod attention;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Result, SanError};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
