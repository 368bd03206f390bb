//! Desk-scale laboratory for continual test-time adaptation.
//!
//! A small source model is pretrained on synthetic Gaussian-blob data, then
//! adapted online to streams of corrupted batches without labels. Adaptation
//! follows a mean-teacher loop whose objective combines symmetric
//! cross-entropy with two direction-control regularizers: one damping the
//! model's sensitivity along the overall domain-shift direction, one steering
//! per-class shift directions away from other classes.
//!
//! Everything is built on an in-crate reverse-mode tape ([`autodiff`]) so each
//! loss term is finite-difference-checkable, and every run is a pure function
//! of its configuration and seed.

pub mod autodiff;
pub mod model;
pub mod datastream;
pub mod error;
pub mod gradcheck;

pub use error::{CttaError, Result};

/// Deterministic derivation of a purpose-specific seed from a run seed.
/// Tiny splitmix-style mix so independent components never share streams.
pub fn child_seed(seed: u64, tag: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    }
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
