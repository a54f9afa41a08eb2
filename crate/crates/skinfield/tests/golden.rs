//! Committed golden files shared with the web viewer: a small capsule asset
//! with per-tensor checksums, its real-time render at the rest pose, and
//! forward-kinematics test vectors. Regenerate with `SKINFIELD_BLESS=1`.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use skinfield::assets::AssetContainer;
use skinfield::cli::posed_bounds;
use skinfield::dataset::{CameraJson, PoseJson, SkeletonJson};
use skinfield::image_io::load_rgb;
use skinfield::render::orbit_camera;
use skinfield_core::field::Factor;
use skinfield_core::skinning::{Pose, Skeleton, SkinnedTemplate};
use skinfield_core::synth::chain_skeleton;

const ASSET: &str = "capsule.dvha";
const CHECKSUMS: &str = "capsule.checksums.json";
const RENDER: &str = "capsule_rest_rt.png";
const CAMERA: &str = "camera.json";
const REST_POSE: &str = "rest_pose.json";
const FK: &str = "fk_vectors.json";
const GROUPS: [&str; 4] = ["density", "red", "green", "blue"];

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn blessing() -> bool {
    std::env::var_os("SKINFIELD_BLESS").is_some()
}

fn golden(name: &str) -> PathBuf {
    let p = golden_dir().join(name);
    assert!(p.exists(), "{} missing; regenerate with SKINFIELD_BLESS=1", p.display());
    p
}

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_skinfield")).args(args).output().expect("spawn skinfield");
    assert!(out.status.success(), "skinfield {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
}

fn sha_f32(v: impl IntoIterator<Item = f32>) -> (usize, String) {
    let mut h = Sha256::new();
    let mut n = 0;
    for x in v {
        h.update(x.to_le_bytes());
        n += 1;
    }
    (n, hex::encode(h.finalize()))
}

fn sha_u32(v: impl IntoIterator<Item = u32>) -> (usize, String) {
    let mut h = Sha256::new();
    let mut n = 0;
    for x in v {
        h.update(x.to_le_bytes());
        n += 1;
    }
    (n, hex::encode(h.finalize()))
}

fn entry((len, sha256): (usize, String)) -> Value {
    json!({ "len": len, "sha256": sha256 })
}

fn mesh_checksums(m: &SkinnedTemplate) -> Value {
    json!({
        "positions": entry(sha_f32(m.vertices.iter().flatten().copied())),
        "indices": entry(sha_u32(m.faces.iter().flatten().copied())),
        "bones": entry(sha_u32(m.weights.iter().flat_map(|w| w.bones).map(u32::from))),
        "weights": entry(sha_f32(m.weights.iter().flat_map(|w| w.weights))),
    })
}

/// Checksums over each tensor's little-endian payload, keyed as the
/// viewer names them.
fn checksums(a: &AssetContainer, file: &[u8]) -> Value {
    let mut field = Map::new();
    for (name, g) in GROUPS.iter().zip(a.field.groups()) {
        for f in Factor::ALL {
            field.insert(format!("{name}.{}", f.name()), entry(sha_f32(g.to_channel_major(f))));
        }
    }
    let anim = a.animation.iter().flat_map(|p| p.rotations.iter().flatten().chain(&p.root_translation).copied().collect::<Vec<_>>());
    json!({
        "file": { "len": file.len(), "sha256": hex::encode(Sha256::digest(file)) },
        "field": field,
        "mesh": a.mesh.as_ref().map(mesh_checksums),
        "template": a.template.as_ref().map(mesh_checksums),
        "animation": entry(sha_f32(anim)),
        "skeleton": entry(sha_f32(a.skeleton.offsets().iter().flatten().copied())),
    })
}

#[derive(Serialize, Deserialize)]
struct FkCase {
    skeleton: SkeletonJson,
    pose: PoseJson,
    /// Per bone, the row-major 3x4 affine mapping rest space to posed space.
    bone_affines: Vec<[[f64; 4]; 3]>,
}

fn rows(a: &glam::DAffine3) -> [[f64; 4]; 3] {
    let m = a.matrix3;
    let t = a.translation;
    [[m.x_axis.x, m.y_axis.x, m.z_axis.x, t.x], [m.x_axis.y, m.y_axis.y, m.z_axis.y, t.y], [m.x_axis.z, m.y_axis.z, m.z_axis.z, t.z]]
}

fn fk_cases() -> Vec<FkCase> {
    let right = std::f32::consts::FRAC_PI_2;
    let two = Skeleton::new(vec![None, Some(0)], vec![[0.0; 3], [1.0, 0.0, 0.0]], Pose::identity(2)).unwrap();
    let three = chain_skeleton(3, 0.5);
    let poses = [
        (&two, Pose { rotations: vec![[0.0, 0.0, right], [0.0, 0.0, 0.0]], root_translation: [0.0; 3] }),
        (&two, Pose { rotations: vec![[0.0, 0.0, right], [0.0, 0.0, right]], root_translation: [0.0; 3] }),
        (&two, Pose { rotations: vec![[0.3, -0.2, 0.1], [0.0, 0.7, -0.4]], root_translation: [0.1, 0.2, -0.3] }),
        (&three, three.rest_pose().clone()),
        (&three, Pose { rotations: vec![[0.5, 0.0, 0.0], [0.0, 0.0, -1.1], [0.2, 0.9, 0.3]], root_translation: [0.0, -0.5, 0.25] }),
    ];
    poses
        .into_iter()
        .map(|(sk, pose)| FkCase {
            skeleton: sk.into(),
            bone_affines: sk.bone_affines(&pose).0.iter().map(rows).collect(),
            pose: (&pose).into(),
        })
        .collect()
}

/// Builds the golden capsule through the command-line pipeline.
fn bless() {
    let dir = golden_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("capsule.ckpt");
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    cli(&["synth", "--bones", "2", "--frames", "6", "--size", "64", "--seed", "3", "--gt-samples", "256", "--out", &s(&data)]);
    #[rustfmt::skip]
    let sets = [
        "rank_density=4", "rank_color=4", "epochs=3", "iters_per_epoch=100", "patch_size=16", "patches=3",
        "start_voxels=4096", "end_voxels=32768", "upsample_at=100,200", "n_samples=48", "lr_pose=0",
    ];
    let mut fit = vec!["fit".to_owned(), "--data".into(), s(&data), "--out".into(), s(&ckpt)];
    for kv in sets {
        fit.extend(["--set".into(), kv.into()]);
    }
    cli(&fit.iter().map(String::as_str).collect::<Vec<_>>());
    cli(&["mesh", "--checkpoint", &s(&ckpt), "--views", "8", "--resolution", "48", "--image-size", "64", "--faces", "1500"]);
    let asset_path = dir.join(ASSET);
    cli(&["export", "--checkpoint", &s(&ckpt), "--out", &s(&asset_path)]);

    let asset = AssetContainer::load(&asset_path).unwrap().unwrap();
    let rest = asset.skeleton.rest_pose().clone();
    let camera = orbit_camera(&posed_bounds(&asset, &rest), 30.0, 15.0, 128, 128);
    std::fs::write(dir.join(CAMERA), serde_json::to_string_pretty(&vec![CameraJson::from(&camera)]).unwrap()).unwrap();
    std::fs::write(dir.join(REST_POSE), serde_json::to_string_pretty(&PoseJson::from(&rest)).unwrap()).unwrap();
    cli(&[
        "render-rt", "--checkpoint", &s(&asset_path), "--pose", &s(&dir.join(REST_POSE)), "--cameras", &s(&dir.join(CAMERA)),
        "--out", &s(&dir.join(RENDER)),
    ]);
    let bytes = std::fs::read(&asset_path).unwrap();
    std::fs::write(dir.join(CHECKSUMS), serde_json::to_string_pretty(&checksums(&asset, &bytes)).unwrap() + "\n").unwrap();
    std::fs::write(dir.join(FK), serde_json::to_string_pretty(&fk_cases()).unwrap() + "\n").unwrap();
}

fn ensure_blessed() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        if blessing() {
            bless();
        }
    });
}

#[test]
fn golden_asset_matches_recorded_checksums() {
    ensure_blessed();
    let bytes = std::fs::read(golden(ASSET)).unwrap();
    let asset = AssetContainer::from_bytes(&bytes).unwrap();
    let want: Value = serde_json::from_slice(&std::fs::read(golden(CHECKSUMS)).unwrap()).unwrap();
    assert_eq!(checksums(&asset, &bytes), want);
    assert_eq!(asset.to_bytes().unwrap(), bytes, "re-export is not byte-identical");
}

#[test]
fn golden_realtime_render_matches_png() {
    ensure_blessed();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rt.png");
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    cli(&[
        "render-rt", "--checkpoint", &s(&golden(ASSET)), "--pose", &s(&golden(REST_POSE)), "--cameras", &s(&golden(CAMERA)),
        "--out", &s(&out),
    ]);
    let camera = serde_json::from_slice::<Vec<CameraJson>>(&std::fs::read(golden(CAMERA)).unwrap()).unwrap()[0].to_camera().unwrap();
    let got = load_rgb(&out, camera.width, camera.height).unwrap();
    let want = load_rgb(&golden(RENDER), camera.width, camera.height).unwrap();
    let max = got.iter().zip(&want).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs())).fold(0.0f32, f32::max);
    assert!(max <= 1.0 / 255.0 + 1e-6, "max pixel difference {max}");
}

#[test]
fn golden_rest_pose_is_the_asset_rest_pose() {
    ensure_blessed();
    let asset = AssetContainer::load(&golden(ASSET)).unwrap().unwrap();
    let pose: PoseJson = serde_json::from_slice(&std::fs::read(golden(REST_POSE)).unwrap()).unwrap();
    assert_eq!(Pose::from(pose), *asset.skeleton.rest_pose());
}

#[test]
fn fk_vectors_match_forward_kinematics() {
    ensure_blessed();
    let cases: Vec<FkCase> = serde_json::from_slice(&std::fs::read(golden(FK)).unwrap()).unwrap();
    assert!(cases.len() >= 5);
    for c in &cases {
        let sk = c.skeleton.to_skeleton().unwrap();
        let got = sk.bone_affines(&Pose::from(PoseJson { rotations: c.pose.rotations.clone(), root_translation: c.pose.root_translation }));
        assert_eq!(got.0.len(), c.bone_affines.len());
        for (a, want) in got.0.iter().zip(&c.bone_affines) {
            let r = rows(a);
            for i in 0..3 {
                for j in 0..4 {
                    assert!((r[i][j] - want[i][j]).abs() <= 1e-12, "entry ({i},{j}): {} vs {}", r[i][j], want[i][j]);
                }
            }
        }
    }
    // hand-computed: bone 1 of the 2-bone chain at 90/90 sends (2,0,0) to (-1,1,0)
    let a = &cases[1].bone_affines[1];
    let p = [a[0][0] * 2.0 + a[0][3], a[1][0] * 2.0 + a[1][3], a[2][0] * 2.0 + a[2][3]];
    assert!((p[0] + 1.0).abs() < 1e-6 && (p[1] - 1.0).abs() < 1e-6 && p[2].abs() < 1e-6, "{p:?}");
}
