#![allow(dead_code)]

use skinfield_core::field::{BoundingBox, FactorizedField, GridDims};
use skinfield_core::raymarch::RenderConfig;
use skinfield_core::synth::{phantom_dataset, sphere_phantom};
use skinfield_core::trainer::{Dataset, TrainConfig};

pub const RADIUS: f64 = 0.5;
pub const TAU: f64 = 0.15;

/// Sphere phantom on `[-1, 1]³` with `nodes` grid nodes per side; its
/// density falls off over about two voxels outside `RADIUS`.
pub fn phantom_field(n_samples: usize, nodes: usize) -> FactorizedField {
    let bbox = BoundingBox::new([-1.0; 3], [1.0; 3]).unwrap();
    let cfg = RenderConfig { n_samples, background: [0.0; 3], tau: TAU };
    sphere_phantom(&bbox, GridDims::cube(nodes).unwrap(), RADIUS, cfg.nominal_step(&bbox), [0.8, 0.45, 0.2])
}

/// Static sphere scene seen from `views` orbit cameras.
pub fn phantom_data(size: u32, views: usize) -> Dataset {
    let render = RenderConfig { n_samples: 64, background: [0.0; 3], tau: TAU };
    phantom_dataset(&phantom_field(64, 33), RADIUS, views, size, &render).unwrap()
}

/// Small, fast configuration for the phantom.
pub fn small_config(iters: u32) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        iters_per_epoch: iters,
        patch_size: 16,
        patches: 1,
        start_voxels: 20f64.powi(3),
        end_voxels: 20f64.powi(3),
        upsample_at: vec![],
        tau: Some(TAU),
        n_samples: 32,
        seed: 3,
        sparse_samples: 256,
        ..TrainConfig::default()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
