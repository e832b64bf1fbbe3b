// SPDX-License-Identifier: Apache-2.0

//! File formats, image IO and the command-line pipeline around
//! `viaprint-core`.
//!
//! Every stage writes into one output directory:
//!
//! | stage           | files                                                    |
//! |-----------------|----------------------------------------------------------|
//! | `extract`       | `vias.csv`, `extract_errors.csv`                         |
//! | `build-reps`    | `representatives.json`                                   |
//! | `verify-reps`   | `verification.json`, `overlays/*.png`                    |
//! | `analyze`       | `analysis.json`, `pairs.csv`, `top_pairs.csv`            |
//! | `dont-use`      | `dont_use.txt`                                           |
//! | `detect`        | `verdicts.csv`, `detect_errors.csv`                      |
//! | `eval`          | `eval.json`                                              |
//! | `gen-synthetic` | `manifest.json`, `tiles/*.png`, `truth.json`, `library.json` |

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod files;

pub use error::{Error, Result};
