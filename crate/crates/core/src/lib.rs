pub mod archive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod integration;
pub mod interpretation;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod training;

pub use error::{PpnError, Result};
