//! Self-supervised contrastive learning harness for multivariate time-series
//! forecasting.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`data`] loads ETT/ECL-style CSV files, splits and normalizes them and
//!   cuts sliding windows.
//! * [`backbone`] holds the LSTM, dilated causal TCN and Informer-style
//!   Transformer encoders, all mapping `B×L×m` windows to `B×L×d`
//!   representations.
//! * [`augment`] builds stochastic views (masking, jitter, scale, shift,
//!   overlapping crops).
//! * [`loss`] implements MSE, InfoNCE, the hierarchical contrastive loss and
//!   momentum contrast with a memory queue.
//! * [`strategy`] drives end-to-end training, SSCL pretraining, frozen heads
//!   (ridge / MLP) and fine-tuning.
//! * [`eval`] and [`erf`] compute forecast metrics and input-gradient
//!   receptive-field maps.
//! * [`config`] and [`runner`] tie everything into the experiment matrix used
//!   by the `tscl` binary.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod erf;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod runner;
pub mod strategy;

pub use error::{Error, Result};
