//! Knowledge-enhanced doc-label attention network for multi-label text
//! classification.

pub mod attention;
pub mod bundle;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod head;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod params;
pub mod representation;
pub mod tape;
pub mod train;
pub mod visualize;

pub use error::{Error, Result};
