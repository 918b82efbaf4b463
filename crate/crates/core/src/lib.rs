pub mod autoenc;
pub mod config;
pub mod datakit;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod memstore;
pub mod model;
pub mod numerics;
pub mod quant;
pub mod training;
pub mod tokenizer;

pub use error::{Error, Result};
