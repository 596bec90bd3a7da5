//! Desk-scale flow-matching laboratory.
//!
//! A small conditional velocity network is trained by flow matching on
//! synthetic 2D targets and then aligned with three post-training methods:
//! offline Diffusion-DPO, group-relative policy optimization over an
//! SDE-sampled flow, and monolithic policy optimization (a single trajectory
//! and a single update per iteration, baselined by a per-condition Kalman
//! value tracker). Supporting pieces cover timestep samplers, weight
//! averaging, 3D multimodal rotary positions, quoted-span prompt
//! segmentation and deterministic curation rules.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align_dpo;
pub mod align_grpo;
pub mod align_mpo;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod net;
pub mod posenc;
pub mod prompttok;
pub mod rewards;
pub mod rng;
pub mod runner;
pub mod sde;
pub mod worldgen;

pub use error::{Error, Result};
pub use net::{NetworkSpec, OptimizerState, ParamVector, VelocityNet};
