pub mod distributions;
pub mod error;
pub mod exec;
pub mod field;
pub mod haar;
pub mod levy;
pub mod padic;
pub mod verify;
pub mod spherical;
pub mod stats;
