//! Pedestrian trajectory forecasting with transformer encoders, random-walk
//! social encodings and a conditional variational decoder.

pub mod cvae;
pub mod data;
pub mod encoder;
pub mod encodings;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scene;
pub mod tensor;
pub mod train;
