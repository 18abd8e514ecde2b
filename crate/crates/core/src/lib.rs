//! Worldsheet geometry, deformation calculus and covariant phase space of
//! closed Nambu-Goto strings with a Gauss-Bonnet term.

pub mod background;
pub mod deformation;
pub mod dynamics;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod solutions;
pub mod symplectic;

pub use field::{contract, Field, Slot};
pub use grid::{Grid, Mask};
