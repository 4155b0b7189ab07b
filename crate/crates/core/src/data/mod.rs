//! Synthetic closed-book fact tasks.

pub mod dataset;
pub mod world;

pub use dataset::{build_dataset, Dataset, Example, Split, TaskKind};
pub use world::{generate_world, render_fact, FactWorld, Slot, Vocab, WorldSize, SEP};
