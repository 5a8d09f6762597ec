#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod error;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod protocols;
pub mod riccati;
pub mod scheduling;
pub mod sim;
#[cfg(any(test, feature = "random"))]
pub mod random;

pub use error::{Error, Result};
