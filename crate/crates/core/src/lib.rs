pub mod checkin;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod math;
pub mod model;
pub mod model_io;
pub mod spatial;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
