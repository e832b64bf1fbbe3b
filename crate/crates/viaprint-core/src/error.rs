// SPDX-License-Identifier: Apache-2.0

use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point ({x}, {y}) lies outside the {width} x {height} cell box")]
    OutsideBox {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
    },

    #[error("instance `{instance_id}` references unknown {kind} `{id}`")]
    DanglingReference {
        kind: &'static str,
        id: String,
        instance_id: String,
    },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("bounding box of instance `{0}` lies entirely outside its tile")]
    BoxOutsideTile(String),

    #[error("cell type `{type_id}` has {count} instance(s); at least {required} are required")]
    TooFewInstances {
        type_id: String,
        count: usize,
        required: usize,
    },

    #[error(
        "degenerate library: representative of `{type_id}` has vias {distance:.4} units apart, \
         below the required separation {required:.4}"
    )]
    DegenerateLibrary {
        type_id: String,
        distance: f64,
        required: f64,
    },

    #[error("claimed type `{0}` has no representative")]
    MissingRepresentative(String),

    #[error("infeasible synthetic specification: {0}")]
    Infeasible(String),
}
