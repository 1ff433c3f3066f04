//! Simulation and analysis toolkit for a two-node trapped-ion quantum network.
//!
//! * [`hilbert`]: six-level ion–cavity space, node parameters, operators.
//! * [`dynamics`]: restricted and full master equations, envelopes, jitter.
//! * [`purebranch`]: no-jump branch, emission amplitudes, coherence kernels.
//! * [`pbsm`]: beamsplitter, coincidence densities and model visibility.
//! * [`empirical`]: empirical ion–ion density-matrix model.
//! * [`tomography`]: maximum-likelihood tomography and resampled fidelities.
//! * [`netsim`]: handshake, attempt simulation and HOM analysis of clicks.

pub mod error;
pub mod hilbert;
pub mod dynamics;
pub mod purebranch;
pub mod pbsm;
pub mod tomography;
pub mod empirical;
pub mod netsim;

pub use error::{Error, Result};
