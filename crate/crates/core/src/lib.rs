//! Compute-in-memory inference simulator with static per-chip ADC offsets.
//!
//! The crate models a CIM accelerator at the level that matters for
//! chip-to-chip variation: weights are bit-sliced onto crossbar sub-arrays,
//! inputs are applied bit-serially, every column partial sum passes through
//! a Flash or SAR converter whose reference thresholds carry a static offset
//! drawn from a seeded stream, and the digital periphery reassembles the
//! result by shift-add. On top of that sit a small quantized CNN engine, the
//! hybrid (on-chip forward, off-chip backward) finetune loop, Carlini-Wagner
//! attacks with digital or hybrid gradients, and an experiment harness that
//! measures how well adversarial examples transfer between chips.

pub mod adcmodel;
pub mod attack;
pub mod chip;
pub mod crossbar;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod nnquant;
pub mod numstat;

pub use error::{Error, Result};
