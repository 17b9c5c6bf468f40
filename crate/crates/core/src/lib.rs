//! Two-pass deliberation networks at desk scale.
//!
//! A first-pass attention encoder-decoder produces an intermediate output; a
//! second pass attends over both the input and that intermediate output. The
//! crate provides every training objective for the pair (exact, upper bound,
//! Monte Carlo gradient, reparameterised Monte Carlo loss, separate training,
//! guided attention) together with an exhaustive-enumeration oracle over tiny
//! output spaces against which the approximations can be checked.

pub mod decode;
pub mod delib;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod seq2seq;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod training;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
