//! Consensus protocol synthesis and simulation for linear multi-agent
//! systems over Markov-switching directed graphs.

pub mod benchmark;
pub mod graphs;
pub mod io;
pub mod markov;
pub mod matops;
pub mod simcore;
pub mod synthesis;
