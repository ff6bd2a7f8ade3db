pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod network;
pub mod nn;
pub mod param;
pub mod perception;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};
pub use param::{Module, Param, Real};
