pub mod budget;
pub mod catalog;
pub mod config;
pub mod error;
pub mod gateway;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod preference;
pub mod recommender;
pub mod sft;
pub mod summarizer;
pub mod synthetic;
pub mod templates;

pub use error::{Error, Result};
