//! Automated multi-object video annotation.
//!
//! The engine turns per-frame detections into persistent, segmented object
//! tracks: detections are verified against sliced re-detection and a
//! per-frame dynamic confidence threshold ([`smart_od`]), associated into
//! identities by IoU ([`assoc`]), propagated as masks through the rest of
//! the sequence and cleaned up ([`ash`]). Long sequences fall back to
//! overlapping chunks with checkpointing ([`chunker`]). Neural models sit
//! behind the traits in [`backends`], which also provides a deterministic
//! synthetic world used as an oracle.

pub mod ash;
pub mod assoc;
pub mod backends;
pub mod chunker;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod smart_od;

pub use error::{BackendError, Error, Result};
