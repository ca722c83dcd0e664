//! Dynamic neural models for student knowledge tracing.
//!
//! The task: given a student's history of (skill, response) interactions,
//! predict the probability that the next response is correct. The response is
//! treated as a function of the current and previous tested skills plus the
//! previous responses, realized as a two-part network:
//!
//! * an *encoding sub-network* — parallel skill/response embeddings, each
//!   followed by 1D spatial dropout, a 1D convolution, batch normalization
//!   and ReLU;
//! * a *tracing sub-network* — either a bidirectional GRU (recurrent, with
//!   potentially unbounded memory) or a time-delay network (finite window,
//!   flatten + Gaussian dropout) that produces a knowledge-state vector,
//!   topped by a small dense classifier with a sigmoid output.
//!
//! Every numerical kernel is written from first principles on a reverse-mode
//! autodiff tape ([`tensor`]) and verified against central differences
//! ([`gradcheck`]). The [`data`] module ingests ASSISTments-style CSV logs,
//! cleans them, builds sliding windows, and can synthesize desk-scale
//! datasets from a two-state mastery simulator. Training ([`optim`]) and
//! evaluation ([`eval`]) round out the pipeline; [`cli`] wires everything to
//! a small command-line front end.

pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

pub use tensor::{Graph, Tensor, TensorId};
