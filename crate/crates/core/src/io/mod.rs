//! Files, synthetic targets and the command line.

pub mod cli;
pub mod mesh;
pub mod ply;
pub mod shapes;
pub mod store;
