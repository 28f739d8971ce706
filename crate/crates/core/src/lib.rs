//! Multilevel regression and poststratification over demographic cell tables.
//!
//! The pipeline: define factors and a poststratification [`frame::Frame`],
//! parse turnout and preference formulas ([`formula`]), fit hierarchical
//! binomial logistic models ([`model`], [`infer`]), then predict, calibrate
//! and aggregate cell estimates ([`poststrat`]). [`synth`] generates
//! electorates with known truth for end-to-end checks.

pub mod cli;
pub mod formula;
pub mod frame;
pub mod infer;
pub mod model;
pub mod poststrat;
pub mod synth;
