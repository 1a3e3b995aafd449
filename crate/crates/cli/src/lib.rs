//! File formats, dataset ingestion, experiment orchestration and plotting
//! around `robustnet-core`.

pub mod analysis;
pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod error;
pub mod experiment;
pub mod external;
pub mod fsutil;
pub mod plots;
pub mod spec_doc;
pub mod tables;

pub use error::{IoError, Result};
