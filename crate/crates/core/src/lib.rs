//! Long-context question answering: context shortening, answer generation
//! through pluggable backends, answer evaluation and scorer rationales.

pub mod backend;
pub mod corpus;
pub mod explain;
pub mod genclient;
pub mod metrics;
pub mod mockbackend;
pub mod pipeline;
pub mod scorer;
pub mod shorten;
pub mod textproc;
