//! Automatic SPMD partitioning over a small tensor IR.
//!
//! Programs are written in a base tensor dialect ([`ir`]) and partitioned by
//! inserting tiling loops over named mesh axes ([`tiled`]). Tiling decisions
//! are pushed through the program by a rule registry ([`propagation`]),
//! lowered to per-device code with explicit collectives ([`spmd`]), checked
//! against a reference interpreter ([`interp`]) and scored by static cost
//! models ([`cost`]). [`search`] drives the decisions with Monte Carlo tree
//! search, optionally filtered by a learned node ranker ([`ranker`]).

pub mod cost;
pub mod interp;
pub mod ir;
pub mod mesh;
pub mod modelgen;
pub mod propagation;
pub mod ranker;
pub mod search;
pub mod spmd;
pub mod tensor;
pub mod tiled;
