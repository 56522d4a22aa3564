//! Data, training flows, configuration and experiment runs around the
//! library modules.

pub mod config;
pub mod experiment;
pub mod lmdata;
pub mod pipeline;
pub mod pretrain;
pub mod synth;
pub mod training;
