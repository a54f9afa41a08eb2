#![no_std]
extern crate alloc;

pub mod camera;
pub mod extract;
pub mod field;
pub mod local_render;
pub mod math;
mod mc_table;
pub mod mesh;
pub mod raster;
pub mod raymarch;
pub mod simplify;
pub mod skinning;
pub mod synth;
pub mod trainer;
