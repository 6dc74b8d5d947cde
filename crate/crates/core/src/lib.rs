//! Simulation and analysis core for cold-atom Faraday magnetometry in a
//! crossed hollow-beam dipole trap.

pub mod atomkinetics;
pub mod beamforge;
pub mod compensator;
pub mod error;
pub mod export;
pub mod fit;
pub mod fieldscape;
pub mod kv;
pub mod physconst;
pub mod spectra;
pub mod spinsim;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
pub use physconst::AtomSpecies;
pub use rng::SeedTree;
