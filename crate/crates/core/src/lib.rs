//! Spectral simulator and Monte Carlo laboratory for the stochastic
//! parametrically forced nonlinear Schrödinger equation
//!
//! `du = [i Δu + L u + (i kappa / 3){u,u,u}] dt - i sigma u ∘ Phi dW`,
//! `L u = -i nu u - eps (gamma u - mu conj(u))`,
//!
//! on a periodic box, together with its linearization about the standing
//! sech wave, the second-order noise expansion and the statistical studies
//! built on top of it.

pub mod dynamics;
pub mod error;
pub mod expansion;
pub mod experiments;
pub mod io;
pub mod linearization;
pub mod model;
pub mod noise;
pub mod spectral;

pub use error::{Error, Result};
