pub mod calibration;
pub mod data;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod training;
pub mod util;
