//! Laboratory harness for running behavioral-economics experiments on
//! artificial agents and estimating preference models from their choices.
//!
//! Experiments: a sequential urn-guessing game with costly links, dictator and
//! response games under group conditions, an upstream transfer game and a
//! downstream image-scoring game. Agents are either scripted policies with
//! known parameters or chat models reached through an OpenAI-compatible API.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod analysis;
pub mod estimation;
pub mod fixtures;
pub mod indirect_reciprocity;
pub mod llm_client;
pub mod prompts;
pub mod runner;
pub mod scalar;
pub mod session;
pub mod social_learning;
pub mod social_preference;
pub mod storage;
pub mod types;

pub use scalar::Real;

pub type CREstimate64 = estimation::CREstimate<f64>;
pub type CREstimate32 = estimation::CREstimate<f32>;
pub type GroupCREstimate64 = estimation::GroupCREstimate<f64>;
pub type GroupCREstimate32 = estimation::GroupCREstimate<f32>;
pub type LogitRegressionResult64 = estimation::LogitRegressionResult<f64>;
pub type LogitRegressionResult32 = estimation::LogitRegressionResult<f32>;
