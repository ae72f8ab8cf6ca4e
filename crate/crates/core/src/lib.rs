pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod observation;
pub mod pipeline;
pub mod pose_graph;
pub mod scan_context;
pub mod scene_graph;
pub mod server;
pub mod sim;
pub mod sparse;
pub mod wire;

pub use error::{Error, Result};
