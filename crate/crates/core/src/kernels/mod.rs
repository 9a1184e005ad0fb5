//! Raw compute kernels shared by the tape ops and the tape-free paths.
//!
//! Every kernel uses a fixed per-output-element summation order, so results
//! are bitwise deterministic regardless of how work is split across threads.

pub mod conv;
pub mod penalty;
pub mod pool;
pub mod sample;
