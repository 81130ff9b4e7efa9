//! Detail-preserving image embeddings from patch features.
//!
//! The crate covers the numeric side of the pipeline: Complete Cover patch
//! geometry ([`cover`]), a small autodiff engine ([`tensor`]), the fusion
//! transformer and its query-proxy loss ([`fusion`]), class-prompted
//! retrieval scoring ([`retrieval`]), a synthetic scene/embedding world
//! ([`synth`]), the on-disk feature bank ([`bank`]) and experiment
//! orchestration ([`experiment`], [`resource`]).

pub mod cover;
pub mod tensor;
pub mod fusion;
pub mod bank;
pub mod synth;
pub mod retrieval;
pub mod resource;
pub mod experiment;
