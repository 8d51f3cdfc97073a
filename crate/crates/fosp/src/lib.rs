//! Safe model-based offline-to-online reinforcement learning at desk scale.
//!
//! A latent world model plus a feasibility-guided policy are pretrained from a
//! fixed trajectory dataset, then fine-tuned online via policy expansion. All
//! learned quantities are checkable against exact brute-force oracles on small
//! constrained MDPs ([`oracles`]).

pub mod actor;
pub mod approx;
pub mod datastore;
pub mod envs;
pub mod error;
pub mod expansion;
pub mod oracles;
pub mod safety;
pub mod trainer;
pub mod valuecrit;
pub mod worldmodel;

pub use error::FospError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FospError>;
