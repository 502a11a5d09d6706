//! Constructive isometric perturbation of free embeddings on chart grids.

pub mod atlas;
pub mod error;
pub mod family;
pub mod fixed_point;
pub mod frame;
pub mod grid;
pub mod holder;
pub mod ops;
pub mod oracle;
pub mod poisson;
pub mod profile;
pub mod random;

pub use error::{Error, Result};
