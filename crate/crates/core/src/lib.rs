//! Differentiable sequential lens simulation: exact ray tracing, coherent
//! point spread functions with a memory-light adjoint, optical merit terms
//! and a gradient-based prescription optimizer.

pub mod adjoint;
pub mod cli;
pub mod coherent_psf;
pub mod geometry;
pub mod imaging_sim;
pub mod io;
pub mod materials;
pub mod math;
pub mod optical_losses;
pub mod optimizer;
pub mod prescription;
pub mod system;
pub mod trace;
