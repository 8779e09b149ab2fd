pub mod checkpoint;
pub mod error;
pub mod forecast;
pub mod fusion;
pub mod geo;
pub mod harness;
pub mod insitu_tokenizer;
pub mod sat_tokenizer;
pub mod seed;
pub mod synth;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
