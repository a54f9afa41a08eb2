//! Wavefront OBJ export with optional per-vertex colors.

use std::fmt::Write;

use skinfield_core::skinning::SkinnedTemplate;

pub fn to_obj(mesh: &SkinnedTemplate, colors: Option<&[[f32; 3]]>) -> String {
    let mut s = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match colors.and_then(|c| c.get(i)) {
            Some(c) => writeln!(s, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]),
            None => writeln!(s, "v {} {} {}", v[0], v[1], v[2]),
        }
        .expect("string write");
    }
    for f in &mesh.faces {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
    }
    s
}
