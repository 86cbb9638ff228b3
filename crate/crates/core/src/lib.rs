//! Explainable recommendation by two cooperating agents walking a knowledge
//! graph: one over item categories, one over entities.

pub mod numcore;
pub mod kg;
pub mod transe;
pub mod cggnn;
pub mod darl;
pub mod recommend;
pub mod config;
pub mod checkpoint;
pub mod pipeline;
pub mod selfcheck;
