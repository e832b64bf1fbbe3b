// SPDX-License-Identifier: Apache-2.0

//! Via-pattern analysis for standard cell libraries imaged by SEM.
//!
//! Every cell instance is reduced to the set of its via centers, expressed in
//! technology units. From those point sets this crate builds noise-robust
//! per-type representatives, scores how similar two cell types look, and
//! classifies individual instances against the representatives to find cells
//! that were swapped for a different type of the same width.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, image decoding
//! and the command-line driver live in the `viaprint` crate.

#![no_std]

extern crate alloc;

pub mod detection;
pub mod error;
pub mod extract;
pub mod geometry;
pub mod image;
pub mod ingest;
mod math;
pub mod representative;
pub mod rng;
pub mod similarity;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
pub use geometry::{
    align, candidate_translations, match_vias, similarity_score, AlignmentResult, Orientation,
    Translation, ViaPoint, ViaSet, MATCHING_RADIUS,
};
pub use image::{GrayImage, RgbImage};
