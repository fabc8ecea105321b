pub mod cine;
pub mod corrupt;
pub mod detect;
pub mod error;
pub mod fourier;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod recon;
pub mod rng;
pub mod roi;
pub mod tensorlab;
pub mod train;

pub use cine::CineSequence;
pub use corrupt::LineMask;
pub use error::{Error, Result};
pub use fourier::KSpaceSequence;
