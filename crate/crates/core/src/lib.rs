pub mod cfar;
pub mod body;
pub mod calib;
pub mod cli;
pub mod codec;
pub mod geometry;
pub mod localize;
pub mod metrics;
pub mod sim;
pub mod store;
pub mod sync;
pub mod tensor;
