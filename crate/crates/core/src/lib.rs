//! CllrCE speaker-embedding training and verification evaluation.
//!
//! * [`losses`]: cross-entropy, minibatch Cllr and their equal-weight mix.
//! * [`model`]: frame network, statistics or conditioned attention pooling,
//!   embedding and speaker layers with analytic gradients.
//! * [`trainer`]: seeded Adam training loop.
//! * [`synthdata`]: synthetic multi-speaker, multi-style corpus.
//! * [`scoring`]: enrollment, cosine and two-covariance backends, trial grids.
//! * [`metrics`]: EER, minDCF, Cllr and McNemar's test.
//! * [`io`] and [`pipeline`]: file formats and the command implementations
//!   behind the `cllrce` binary.

pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
