mod common;

use common::*;
use skinfield_core::local_render::{render_realtime, LocalMarchConfig};
use skinfield_core::math::psnr;
use skinfield_core::synth::phantom_dataset;
use skinfield_core::raymarch::{render_deformed_image, PosedScene, RenderConfig, RenderOutput};

fn mse(a: &RenderOutput, b: &RenderOutput) -> f64 {
    let s: f64 = a
        .color
        .iter()
        .zip(&b.color)
        .map(|(x, y)| (0..3).map(|k| ((x[k] - y[k]) as f64).powi(2)).sum::<f64>())
        .sum();
    s / (3.0 * a.color.len() as f64)
}

#[test]
fn local_march_tracks_the_full_raymarch_on_the_phantom() {
    // a fine, dense phantom whose halo lies inside the local march window
    let field = phantom_field(1024, 129);
    let cfg = RenderConfig { n_samples: 128, background: [0.0; 3], tau: TAU };
    let data = phantom_dataset(&field, RADIUS + 0.035, 3, 64, &cfg).unwrap();
    let local = LocalMarchConfig { n_local: 32, half_width: 0.1, background: [0.0; 3] };
    for f in data.frames() {
        let scene = PosedScene::new(data.template(), data.skeleton(), &f.pose, TAU);
        let full = render_deformed_image(&field, &scene, &f.camera, &cfg);
        let rt = render_realtime(&field, data.template(), &scene.affines, &f.camera, &local);
        let p = psnr(mse(&full, &rt));
        assert!(p >= 30.0, "psnr {p}");
    }
}
