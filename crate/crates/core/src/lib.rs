pub mod geometry;
pub mod overlay;
pub mod pipeline;
pub mod priors;
pub mod protocol;
pub mod scenesim;
pub mod tracker;
