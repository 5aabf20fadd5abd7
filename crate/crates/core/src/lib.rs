//! Ladder self-attention vision transformer laboratory.

pub mod accounting;
pub mod analysis;
pub mod blocks;
pub mod data;
pub mod error;
pub mod image;
pub mod ladder;
pub mod layers;
pub mod model;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Shape, Tensor, Var};
