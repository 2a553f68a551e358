//! Digital twin synchronisation for a small cellular core.
//!
//! A physical callbox config becomes a [`model::TwinDescriptor`], which is
//! rendered into deployment files for the twin. Traffic is captured (or
//! simulated) on the physical side, cut into fixed windows, shipped over a
//! lossy link and replayed into the twin, and the two sides are compared.

pub mod model;
pub mod ingest;
pub mod emit;
pub mod capture;
pub mod transport;
pub mod clock;
pub mod replay;
pub mod metrics;
pub mod sim;
pub mod run;
pub mod cli;
