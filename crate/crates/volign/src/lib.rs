//! Kernelized volume-based cross-modal alignment for few-shot
//! classification.
//!
//! The library measures agreement between text, support, and synthetic
//! vision embeddings through the volume of the parallelotope they span in a
//! kernel feature space, trains a small fusion network against contrastive
//! volume losses on episodic synthetic data, and classifies queries against
//! convex combinations of text- and vision-derived prototypes.

pub mod autodiff;
pub mod geometry;
pub mod grads;
pub mod losses;
pub mod fusion;
pub mod fewshot;
pub mod synthdata;
pub mod trainer;
pub mod cip;
pub mod cli;
