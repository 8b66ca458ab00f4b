//! Simulation side of a bandwidth-watermarking toolkit for anonymity-network
//! traffic.
//!
//! * [`waveform`] evaluates the modulation dictionary and the bounded rate law.
//! * [`shaper`] generates offered traffic and enforces the rate law with a
//!   token bucket.
//! * [`channel`] distorts the shaped stream the way a multi-hop path would.
//! * [`trace`] holds the packet/flow model, its JSON-lines format, the bit
//!   serialization fed to the encoder and timing statistics.
//! * [`corrmodel`] and [`exitsim`] quantify end-to-end correlation risk.

pub mod channel;
pub mod corrmodel;
pub mod error;
pub mod exitsim;
pub mod shaper;
pub mod trace;
pub mod waveform;

pub use error::{Error, Result};
