pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod toy;
pub mod train;
