//! Posterior sampling for linear inverse problems with score-based diffusion.
//!
//! The crate is organised bottom-up:
//!
//! - [`operator`]: matrix-free linear forward maps and their adjoints.
//! - [`gaussian`]: Gaussian priors, the analytic linear-Gaussian posterior and
//!   its diffused score.
//! - [`diffusion`]: variance-preserving forward/reverse SDE machinery.
//! - [`autodiff`]: a small reverse-mode engine, the spectral score network and
//!   the AdamW optimizer.
//! - [`ucos`]: unconditional representation of the conditional score
//!   (training and sampling), plus the regularized score mix.
//! - [`dps`]: the diffusion-posterior-sampling baseline.
//! - [`dotfwd`]: a finite-difference frequency-domain diffuse optical
//!   tomography forward model with adjoint Jacobians.
//! - [`phantom`]: random inclusion phantoms and fixed test targets.
//! - [`ensemble`]: sample ensembles and their pixelwise statistics.

pub mod autodiff;
pub mod diffusion;
pub mod dotfwd;
pub mod dps;
pub mod ensemble;
pub mod error;
pub mod field;
pub mod gaussian;
pub mod operator;
pub mod phantom;
pub mod rng;
pub mod ucos;

pub use error::{Error, Result};
pub use field::{Field, FieldShape, PixelGrid};
