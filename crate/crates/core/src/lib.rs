//! Prior-guided symbolic regression.
//!
//! The engine searches for closed-form equations that fit observational
//! data while respecting executable scientific prior constraints. Candidates
//! are generated (by a seeded grammar sampler or a chat-completion endpoint),
//! fitted, checked against a constraint catalog, scored with an annealed
//! constraint penalty and kept in an island-partitioned experience pool.
//!
//! Modules, bottom-up:
//! - [`expr`]: the expression DSL (parse, evaluate, serialize)
//! - [`datagen`]: benchmark datasets, noise, subsampling, CSV
//! - [`constraints`]: executable prior checks and per-system catalogs
//! - [`scoring`]: MSE scores, min-max normalisation, the annealed penalty,
//!   cluster softmax, NMSE, empirical Rademacher complexity
//! - [`optimizer`]: bounded quasi-Newton parameter fitting with retries
//! - [`pool`]: islands of score-keyed clusters plus the insight store
//! - [`generator`]: grammar and LLM candidate generators, prompt rendering
//! - [`refine`]: residual diagnostics, retrieval, repair and reflection
//! - [`pipeline`]: warm-up, evolution and refinement orchestration

pub mod constraints;
pub mod datagen;
pub mod expr;
pub mod generator;
pub mod optimizer;
pub mod pipeline;
pub mod pool;
pub mod refine;
pub mod scoring;

mod linalg;
mod seeds;

pub use expr::{parse, Expression, Params, MAX_PARAMS};
