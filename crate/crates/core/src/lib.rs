//! Learning from natural-language feedback chains: data pipeline, a small
//! decoder-only transformer with hand-written gradients, Adam training,
//! sampling and evaluation.

pub mod batch;
pub mod chain;
pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod feedback;
pub mod gen;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod token;
