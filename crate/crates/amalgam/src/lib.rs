//! Amalgamated visual attention with a hierarchical recurrent world model.
//!
//! This crate implements a small, fully deterministic sensorimotor learning
//! stack around one idea: fuse *bottom-up* saliency (where the image is
//! interesting) with *top-down* predictive queries (where the task needs to
//! look) into a single set of attention points, and let a hierarchical LSTM
//! predict the robot's next state through those points.
//!
//! The pipeline, end to end:
//!
//! ```text
//!  frame ──► CNN encoder ──► f_bu ──► spatial softmax ──► m_bu ──► BU points
//!                      │                    │
//!                      └──► f_td ───────────┴──► pseudo-queries q_bu
//!                                                       │
//!  h_shared(t-1) ──► query MLP ──► q_td ──► fusion ◄────┘
//!                                    │
//!                                    ▼
//!                       amalgamated queries q_a ──► TD points
//!                                                       │
//!  TD pts + BU pts + joints ──► hierarchical LSTM ──► next-step predictions
//!                                                       │
//!         peripheral + foveal reconstruction ◄──────────┘
//! ```
//!
//! Everything runs on a hand-rolled reverse-mode tape over `ndarray` (see
//! [`tensor`]), generic over `f32`/`f64` so training runs fast in single
//! precision while gradient checks run in double precision. No GPU, no BLAS,
//! no threads required; results are bit-reproducible for a fixed seed.
//!
//! The workspace binary (`amalgam`) exposes dataset generation, training,
//! ablation suites, closed-loop rollouts and report rendering on top of this
//! library. See the crate README for a walkthrough.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod reconstruction;
pub mod recurrent;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
