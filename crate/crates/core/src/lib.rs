//! Simulation and certification of a measurement-mediated multipartite
//! continuous-variable QND coupling built from two squeezed ancillas,
//! beam splitters, homodyne detection and feedforward.

pub mod cli;
pub mod entanglement;
pub mod error;
pub mod gaussian;
pub mod quadops;
pub mod scheme;

pub use error::{Error, Result};
