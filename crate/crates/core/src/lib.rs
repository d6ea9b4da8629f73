//! Streaming rolling-window diffusion for sequence generation.
//!
//! A window of `N` future frames carries per-frame noise levels that grow
//! towards the tail. Each denoiser call lowers every level, the clean head
//! frame is emitted, and a fresh noise frame enters at the tail. Ladder
//! acceleration groups the window into blocks of `l` frames that share a
//! level, so one call cleans `l` frames at once.

pub mod cli;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod stream;
pub mod train;
