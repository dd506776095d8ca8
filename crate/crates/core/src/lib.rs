//! Simulator and learning stack for a base station whose antenna surface can be
//! translated and rotated (a six-dimensional movable antenna, 6DMA) while it
//! serves UAVs and senses aerial targets with one transmit waveform.
//!
//! Layering, bottom-up:
//!
//! - [`geometry`]: surface kinematics, rotation matrices, blockage half-space.
//! - [`channel`]: line-of-sight array responses and channel vectors.
//! - [`isac`]: SINR, sum-rate, sensing SNR and transmit-power bookkeeping.
//! - [`env`]: the episodic environment with constraints and rewards.
//! - [`nn`]: small dense networks, backprop and Adam.
//! - [`rl`]: the TD3 building block and replay buffer.
//! - [`hdrl`]: the two-timescale trainer (slow surface agent, fast MATD3 layer).
//! - [`harness`]: experiment management behind the `sixdma` CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod env;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod hdrl;
pub mod isac;
pub mod nn;
pub mod rl;

pub use error::{Error, Result};
