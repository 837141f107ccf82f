//! Intersection discovery, trajectory windowing and video cut-list generation
//! for naturalistic driving studies.

pub mod geo;
pub mod ingest;
pub mod spatial;
pub mod time;
pub mod discovery;
pub mod review;
pub mod trajectory;
pub mod clips;
pub mod synth;
pub mod pipeline;
