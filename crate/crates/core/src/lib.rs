//! Green's function learning, neural preconditioners and hybrid iterative
//! solvers for elliptic boundary value problems.

pub mod config;
pub mod error;
pub mod experiments;
pub mod green;
pub mod hybrid;
pub mod iterative;
pub mod kernel;
pub mod linalg;
pub mod net;
pub mod precond;
pub mod problems;
pub mod spectral;

pub use error::{Error, Result};
