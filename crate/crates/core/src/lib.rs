//! Training-free relative 6DoF pose estimation from two RGB-D frames by
//! matching per-point concept distributions, with a BOP-style evaluation
//! suite and a synthetic scene generator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod concept_cloud;
pub mod correspondence;
pub mod error;
pub mod evaluation;
pub mod filtering;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pose_solver;
pub mod renderer;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result, Stage};
