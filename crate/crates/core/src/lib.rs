pub mod cli;
pub mod encoder;
pub mod geometry;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod registration;
pub mod scenegraph;
pub mod training;
