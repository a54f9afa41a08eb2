use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use skinfield::assets::AssetContainer;
use skinfield::dataset::{image_path, mask_path, read_dataset, write_dataset};
use skinfield::pipeline::synth_dataset;
use skinfield_core::synth::SceneSpec;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skinfield")).args(args).output().expect("spawn skinfield")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "skinfield {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a command expected to fail and returns the parsed stderr record.
fn fails(args: &[&str]) -> Value {
    let out = run(args);
    assert_eq!(out.status.code(), Some(1), "skinfield {} should fail", args.join(" "));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "stderr is not one line: {err}");
    serde_json::from_str(err.trim()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("fit.dvha");
    let asset = dir.path().join("asset.dvha");
    ok(&["synth", "--bones", "2", "--frames", "3", "--size", "32", "--gt-samples", "64", "--out", s(&data)]);
    for f in 0..3 {
        assert!(image_path(&data, f).exists() && mask_path(&data, f).exists());
    }
    #[rustfmt::skip]
    ok(&[
        "fit", "--data", s(&data), "--out", s(&ckpt),
        "--set", "epochs=2", "--set", "iters_per_epoch=20", "--set", "patch_size=16", "--set", "patches=2",
        "--set", "start_voxels=4000", "--set", "end_voxels=8000", "--set", "upsample_at=21", "--set", "n_samples=32",
    ]);
    let log = std::fs::read_to_string(ckpt.with_extension("ndjson")).unwrap();
    let events: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let count = |e: &str| events.iter().filter(|v| v["event"] == e).count();
    assert_eq!((count("step"), count("upsample"), count("epoch")), (40, 1, 2));
    assert!(events.iter().all(|v| v["wall_s"].is_number()));

    let info: Value = serde_json::from_str(&ok(&["info", "--asset", s(&ckpt), "--json"])).unwrap();
    assert_eq!(info["frames"], 3);
    assert_eq!(info["bones"], 2);
    assert!(info["mesh_faces"].is_null());

    let png = dir.path().join("full.png");
    ok(&["render", "--checkpoint", s(&ckpt), "--camera", "45,10", "--size", "24", "--out", s(&png)]);
    assert_eq!(image::image_dimensions(&png).unwrap(), (24, 24));

    let err = fails(&["render-rt", "--checkpoint", s(&ckpt), "--out", s(&png)]);
    assert_eq!(err["error"], "no_mesh");
    assert!(err["message"].as_str().unwrap().contains("no mesh section"));
    assert_eq!(fails(&["export", "--checkpoint", s(&ckpt), "--out", s(&asset)])["error"], "no_mesh");

    let obj = dir.path().join("mesh.obj");
    ok(&["mesh", "--checkpoint", s(&ckpt), "--views", "4", "--resolution", "24", "--image-size", "32", "--faces", "300", "--obj", s(&obj)]);
    assert!(std::fs::read_to_string(&obj).unwrap().lines().any(|l| l.starts_with("f ")));
    let rt = dir.path().join("rt.png");
    ok(&["render-rt", "--checkpoint", s(&ckpt), "--frame", "2", "--size", "20", "--out", s(&rt)]);
    assert_eq!(image::image_dimensions(&rt).unwrap(), (20, 20));
    ok(&["export", "--checkpoint", s(&ckpt), "--out", s(&asset)]);
    let a = AssetContainer::load(&asset).unwrap().unwrap();
    assert!(a.mesh.is_some());

    let bench = ok(&["bench", "--asset", s(&asset), "--resolution", "16", "--frames", "2", "--warmup", "0"]);
    let record: Value = serde_json::from_str(bench.lines().last().unwrap()).unwrap();
    assert!(record["speedup"].as_f64().unwrap() > 0.0);
    assert_eq!(record["frames"], 2);
}

#[test]
fn error_records_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.dvha");
    assert_eq!(fails(&["info", "--asset", s(&missing)])["error"], "io");

    let junk = dir.path().join("junk.dvha");
    std::fs::write(&junk, b"not an asset at all").unwrap();
    let e = fails(&["info", "--asset", s(&junk)]);
    assert_eq!(e["error"], "asset");
    assert!(e["message"].as_str().unwrap().contains("magic"));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs = 2\nnot_a_key = 1\n").unwrap();
    let e = fails(&["fit", "--data", s(dir.path()), "--config", s(&cfg), "--out", s(&junk)]);
    assert_eq!(e["error"], "config");
    let m = e["message"].as_str().unwrap();
    assert!(m.contains("not_a_key") && m.contains('2'), "{m}");

    let e = fails(&["fit", "--data", s(dir.path()), "--set", "epochs=two", "--out", s(&junk)]);
    assert_eq!(e["error"], "config");
    assert_eq!(fails(&["fit", "--data", s(dir.path()), "--out", s(&junk)])["error"], "dataset");
}

#[test]
fn render_rejects_bad_camera_spec() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let ckpt = dir.path().join("c.dvha");
    ok(&["synth", "--frames", "1", "--size", "16", "--gt-samples", "32", "--out", s(&data)]);
    #[rustfmt::skip]
    ok(&[
        "fit", "--data", s(&data), "--out", s(&ckpt), "--set", "epochs=1", "--set", "iters_per_epoch=1",
        "--set", "patch_size=4", "--set", "patches=1", "--set", "start_voxels=512", "--set", "end_voxels=512",
        "--set", "upsample_at=", "--set", "n_samples=8",
    ]);
    let out = dir.path().join("x.png");
    for bad in ["30", "a,b", "0,95"] {
        assert_eq!(fails(&["render", "--checkpoint", s(&ckpt), "--camera", bad, "--out", s(&out)])["error"], "usage");
    }
    assert_eq!(fails(&["render", "--checkpoint", s(&ckpt), "--frame", "9", "--out", s(&out)])["error"], "usage");
}

#[test]
fn dataset_round_trips_through_files() {
    let (_, data) = synth_dataset(&SceneSpec::new(2, 2, 24, 5), 64).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.skeleton(), data.skeleton());
    assert_eq!(back.template(), data.template());
    for (a, b) in data.frames().iter().zip(back.frames()) {
        assert_eq!(a.pose, b.pose);
        assert_eq!(a.mask, b.mask);
        assert_eq!((a.camera.width, a.camera.height), (b.camera.width, b.camera.height));
        let ra = a.camera.pixel_ray(5, 7);
        let rb = b.camera.pixel_ray(5, 7);
        assert!((ra.origin - rb.origin).length() < 1e-9 && (ra.direction - rb.direction).length() < 1e-9);
        let worst = a.image.iter().zip(&b.image).flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs())).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "quantization error {worst}");
    }
}
