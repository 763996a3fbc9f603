//! Transition-based AMR parsing.
//!
//! The crate is organised bottom-up:
//!
//! * [`amr`]: graph model, PENMAN reading/writing, Smatch triples;
//! * [`corpus`]: aligned corpus and token annotation readers;
//! * [`transitions`]: the nine-action parser state machine;
//! * [`oracle`]: gold action sequences and corpus inventories;
//! * [`smatch`]: hill-climbing and exhaustive Smatch;
//! * [`autodiff`]: a small reverse-mode differentiation tape;
//! * [`model`]: Stack-LSTM state encoder with action and node softmaxes;
//! * [`trainer`]: greedy training, decoding, evaluation and checkpoints.

pub mod amr;
pub mod autodiff;
pub mod corpus;
pub mod model;
pub mod oracle;
pub mod smatch;
pub mod trainer;
pub mod transitions;

pub use amr::{parse_penman, serialize_penman, to_triples, AmrGraph, Triple};
pub use corpus::{AlignedExample, Token};
pub use transitions::{Action, ActionKind, ParserState};
