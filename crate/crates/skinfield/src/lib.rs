//! Asset container, dataset IO, file formats, command-line pipeline and
//! benchmarks on top of `skinfield-core`.

pub mod assets;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod image_io;
pub mod obj;
pub mod pipeline;
pub mod render;
