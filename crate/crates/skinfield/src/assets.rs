//! Binary asset container: field factors, rigged meshes, skeleton, animation
//! and render constants. The byte layout is documented in `schema.md`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use skinfield_core::field::{BoundingBox, Factor, FactorGroup, FactorizedField, GridDims, MAX_RANK};
use skinfield_core::local_render::LocalMarchConfig;
use skinfield_core::raymarch::RenderConfig;
use skinfield_core::skinning::{Pose, Skeleton, SkinnedTemplate, VertexWeights};

pub const MAGIC: [u8; 4] = *b"DVHA";
pub const VERSION: u32 = 1;
pub const ENDIAN_LITTLE: u8 = 1;
/// Section payloads start on multiples of this.
pub const ALIGN: usize = 8;
/// Magic, version, endian flag and section count.
pub const HEADER_LEN: usize = 13;
pub const TABLE_ENTRY_LEN: usize = 20;
/// Fixed-size prefix of the FIELD payload before the tensors.
pub const FIELD_HEADER_LEN: usize = 52;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tag {
    Field = 1,
    Mesh = 2,
    Skel = 3,
    Anim = 4,
    Meta = 5,
    Tmpl = 6,
}

impl Tag {
    pub const ALL: [Tag; 6] = [Tag::Field, Tag::Mesh, Tag::Skel, Tag::Anim, Tag::Meta, Tag::Tmpl];

    pub fn from_u32(v: u32) -> Option<Tag> {
        Tag::ALL.into_iter().find(|t| *t as u32 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Field => "FIELD",
            Tag::Mesh => "MESH",
            Tag::Skel => "SKEL",
            Tag::Anim => "ANIM",
            Tag::Meta => "META",
            Tag::Tmpl => "TMPL",
        }
    }
}

const HEADER: &str = "HEADER";

#[derive(Debug, thiserror::Error)]
pub enum AssetError {
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported version {0} at offset 4")]
    UnsupportedVersion(u32),
    #[error("{section}: truncated at offset {offset}")]
    TruncatedSection { section: &'static str, offset: u64 },
    #[error("{section}: invariant violated at offset {offset}: {what}")]
    InvariantViolation { section: &'static str, offset: u64, what: String },
    #[error("{section}: write failed: {source}")]
    Write { section: &'static str, source: std::io::Error },
}

impl AssetError {
    fn invariant(section: &'static str, offset: usize, what: impl Into<String>) -> Self {
        AssetError::InvariantViolation { section, offset: offset as u64, what: what.into() }
    }
}

/// Render constants stored as JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderMeta {
    pub n_samples: usize,
    pub n_local: usize,
    pub half_width: f64,
    pub background: [f64; 3],
}

impl RenderMeta {
    /// Real-time defaults for a warp radius: 16 local samples over `±tau/2`.
    pub fn for_tau(n_samples: usize, tau: f32, background: [f64; 3]) -> Self {
        Self { n_samples, n_local: 16, half_width: 0.5 * tau as f64, background }
    }

    fn validate(&self) -> Result<(), &'static str> {
        if self.n_samples == 0 || self.n_local == 0 {
            return Err("sample counts must be positive");
        }
        if !(self.half_width.is_finite() && self.half_width > 0.0) {
            return Err("half_width must be positive");
        }
        if self.background.iter().any(|c| !c.is_finite()) {
            return Err("background must be finite");
        }
        Ok(())
    }
}

/// Everything the viewer and checkpoints need. `template` is the coarse
/// warp template used by the full raymarcher; `mesh` is the extracted rigged
/// surface used by the real-time path.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetContainer {
    pub field: FactorizedField,
    pub tau: f32,
    pub skeleton: Skeleton,
    pub template: Option<SkinnedTemplate>,
    pub mesh: Option<SkinnedTemplate>,
    pub animation: Vec<Pose>,
    pub meta: RenderMeta,
}

impl AssetContainer {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig { n_samples: self.meta.n_samples, background: self.meta.background, tau: self.tau as f64 }
    }

    pub fn local_config(&self) -> LocalMarchConfig {
        LocalMarchConfig { n_local: self.meta.n_local, half_width: self.meta.half_width, background: self.meta.background }
    }

    pub fn param_count(&self) -> usize {
        self.field.param_count()
    }

    pub fn sections(&self) -> Vec<Tag> {
        let mut t = vec![Tag::Field];
        if self.mesh.is_some() {
            t.push(Tag::Mesh);
        }
        t.push(Tag::Skel);
        if !self.animation.is_empty() {
            t.push(Tag::Anim);
        }
        t.push(Tag::Meta);
        if self.template.is_some() {
            t.push(Tag::Tmpl);
        }
        t
    }

    /// Checks the cross-section invariants that `from_bytes` enforces.
    pub fn validate(&self) -> Result<(), AssetError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(AssetError::invariant(Tag::Field.name(), 0, "tau must be positive"));
        }
        self.meta.validate().map_err(|e| AssetError::invariant(Tag::Meta.name(), 0, e))?;
        let bones = self.skeleton.bone_count();
        for (tag, m) in [(Tag::Mesh, &self.mesh), (Tag::Tmpl, &self.template)] {
            if let Some(m) = m {
                check_mesh(m, bones).map_err(|e| AssetError::invariant(tag.name(), 0, e))?;
            }
        }
        for (f, p) in self.animation.iter().enumerate() {
            if p.bone_count() != bones {
                return Err(AssetError::invariant(Tag::Anim.name(), 0, format!("frame {f} has {} bones", p.bone_count())));
            }
        }
        Ok(())
    }

    fn section_bytes(&self, tag: Tag) -> Vec<u8> {
        let mut out = Vec::new();
        match tag {
            Tag::Field => encode_field(&self.field, self.tau, &mut out),
            Tag::Mesh => encode_mesh(self.mesh.as_ref().expect("listed section"), &mut out),
            Tag::Tmpl => encode_mesh(self.template.as_ref().expect("listed section"), &mut out),
            Tag::Skel => encode_skeleton(&self.skeleton, &mut out),
            Tag::Anim => encode_animation(&self.animation, self.skeleton.bone_count(), &mut out),
            Tag::Meta => out.extend_from_slice(serde_json::to_string(&self.meta).expect("plain struct").as_bytes()),
        }
        out
    }

    /// Streams the canonical serialization; failures name the section.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), AssetError> {
        self.validate()?;
        let tags = self.sections();
        let payloads: Vec<Vec<u8>> = tags.iter().map(|t| self.section_bytes(*t)).collect();
        let mut header = Vec::with_capacity(HEADER_LEN + TABLE_ENTRY_LEN * tags.len());
        header.extend_from_slice(&MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.push(ENDIAN_LITTLE);
        header.extend_from_slice(&(tags.len() as u32).to_le_bytes());
        let mut offset = align(HEADER_LEN + TABLE_ENTRY_LEN * tags.len());
        let mut offsets = Vec::new();
        for (t, p) in tags.iter().zip(&payloads) {
            header.extend_from_slice(&(*t as u32).to_le_bytes());
            header.extend_from_slice(&(offset as u64).to_le_bytes());
            header.extend_from_slice(&(p.len() as u64).to_le_bytes());
            offsets.push(offset);
            offset = align(offset + p.len());
        }
        let mut pos = header.len();
        w.write_all(&header).map_err(|source| AssetError::Write { section: HEADER, source })?;
        for ((t, p), off) in tags.iter().zip(&payloads).zip(offsets) {
            let section = t.name();
            w.write_all(&vec![0u8; off - pos]).map_err(|source| AssetError::Write { section, source })?;
            w.write_all(p).map_err(|source| AssetError::Write { section, source })?;
            pos = off + p.len();
        }
        w.flush().map_err(|source| AssetError::Write { section: HEADER, source })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, AssetError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), AssetError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|source| AssetError::Write { section: HEADER, source })
    }

    /// Parses and validates a container. Never reads past declared lengths
    /// and never allocates more than the input size.
    pub fn from_bytes(buf: &[u8]) -> Result<Self, AssetError> {
        let mut r = Reader::new(buf, 0, buf.len(), HEADER);
        if r.bytes(4).map_err(|_| AssetError::BadMagic)? != MAGIC {
            return Err(AssetError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(AssetError::UnsupportedVersion(version));
        }
        if r.u8()? != ENDIAN_LITTLE {
            return Err(AssetError::invariant(HEADER, 8, "only little-endian files are supported"));
        }
        let count = r.u32()? as usize;
        if count > Tag::ALL.len() {
            return Err(AssetError::invariant(HEADER, 9, format!("{count} sections declared")));
        }
        let mut sections: Vec<(Tag, usize, usize)> = Vec::with_capacity(count);
        let mut end = HEADER_LEN + TABLE_ENTRY_LEN * count;
        for k in 0..count {
            let at = r.pos;
            let raw = r.u32()?;
            let tag = Tag::from_u32(raw).ok_or_else(|| AssetError::invariant(HEADER, at, format!("unknown section tag {raw}")))?;
            let (off, len) = (r.u64()?, r.u64()?);
            if sections.iter().any(|s| s.0 == tag) {
                return Err(AssetError::invariant(HEADER, at, format!("duplicate {} section", tag.name())));
            }
            if off < end as u64 {
                return Err(AssetError::invariant(HEADER, at, format!("section {k} overlaps its predecessor")));
            }
            let stop = off.checked_add(len).filter(|s| *s <= buf.len() as u64);
            let Some(stop) = stop else {
                return Err(AssetError::TruncatedSection { section: tag.name(), offset: buf.len() as u64 });
            };
            sections.push((tag, off as usize, len as usize));
            end = stop as usize;
        }
        if end != buf.len() {
            return Err(AssetError::invariant(HEADER, end, format!("{} trailing bytes", buf.len() - end)));
        }
        let find = |t: Tag| sections.iter().find(|s| s.0 == t).map(|s| Reader::new(buf, s.1, s.1 + s.2, t.name()));
        let missing = |t: Tag| AssetError::invariant(HEADER, HEADER_LEN, format!("missing {} section", t.name()));

        let skeleton = decode_skeleton(&mut find(Tag::Skel).ok_or_else(|| missing(Tag::Skel))?)?;
        let bones = skeleton.bone_count();
        let (field, tau) = decode_field(&mut find(Tag::Field).ok_or_else(|| missing(Tag::Field))?)?;
        let meta = decode_meta(&mut find(Tag::Meta).ok_or_else(|| missing(Tag::Meta))?)?;
        let mesh = find(Tag::Mesh).map(|mut r| decode_mesh(&mut r, bones)).transpose()?;
        let template = find(Tag::Tmpl).map(|mut r| decode_mesh(&mut r, bones)).transpose()?;
        let animation = match find(Tag::Anim) {
            Some(mut r) => decode_animation(&mut r, bones)?,
            None => Vec::new(),
        };
        Ok(Self { field, tau, skeleton, template, mesh, animation, meta })
    }

    pub fn load(path: &Path) -> std::io::Result<Result<Self, AssetError>> {
        Ok(Self::from_bytes(&std::fs::read(path)?))
    }
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Bounds-checked little-endian reader over one section.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    end: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], start: usize, end: usize, section: &'static str) -> Self {
        Self { buf, pos: start, end, section }
    }

    fn remaining(&self) -> usize {
        self.end - self.pos
    }

    fn truncated(&self) -> AssetError {
        AssetError::TruncatedSection { section: self.section, offset: self.end as u64 }
    }

    fn invariant(&self, what: impl Into<String>) -> AssetError {
        AssetError::invariant(self.section, self.pos, what)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], AssetError> {
        if n > self.remaining() {
            return Err(self.truncated());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, AssetError> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, AssetError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, AssetError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, AssetError> {
        Ok(i32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, AssetError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, AssetError> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    /// Reserves `count` elements of `size` bytes, failing before any
    /// allocation if the section is too short.
    fn need(&self, count: usize, size: usize) -> Result<(), AssetError> {
        match count.checked_mul(size) {
            Some(n) if n <= self.remaining() => Ok(()),
            _ => Err(self.truncated()),
        }
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, AssetError> {
        self.need(n, 4)?;
        (0..n).map(|_| self.f32()).collect()
    }

    fn vec3s(&mut self, n: usize) -> Result<Vec<[f32; 3]>, AssetError> {
        self.need(n, 12)?;
        (0..n).map(|_| Ok([self.f32()?, self.f32()?, self.f32()?])).collect()
    }

    fn finish(&self) -> Result<(), AssetError> {
        if self.remaining() != 0 {
            return Err(self.invariant(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_field(field: &FactorizedField, tau: f32, out: &mut Vec<u8>) {
    let d = field.dims();
    for v in [d.d, d.h, d.w, field.density().rank(), field.color()[0].rank()] {
        put_u32(out, v as u32);
    }
    put_f32s(out, &field.bbox().min_f32());
    put_f32s(out, &field.bbox().max_f32());
    put_f32s(out, &[field.gain(), tau]);
    for g in field.groups() {
        for f in Factor::ALL {
            put_f32s(out, &g.to_channel_major(f));
        }
    }
}

fn decode_field(r: &mut Reader) -> Result<(FactorizedField, f32), AssetError> {
    let [d, h, w, rd, rc] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
    let dims = GridDims::new(d, h, w).map_err(|e| r.invariant(e.to_string()))?;
    for rank in [rd, rc] {
        if rank == 0 || rank > MAX_RANK {
            return Err(r.invariant(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
    }
    let min = [r.f32()?, r.f32()?, r.f32()?];
    let max = [r.f32()?, r.f32()?, r.f32()?];
    let bbox = BoundingBox::new(min, max).map_err(|e| r.invariant(e.to_string()))?;
    let (gain, tau) = (r.f32()?, r.f32()?);
    if !(tau.is_finite() && tau > 0.0) {
        return Err(r.invariant("tau must be positive"));
    }
    let per_rank: usize = Factor::ALL.iter().map(|f| f.extent(dims)).map(|(a, b)| a * b).sum();
    r.need((rd + 3 * rc) * per_rank, 4)?;
    let mut group = |rank: usize| -> Result<FactorGroup, AssetError> {
        let t: Vec<Vec<f32>> = Factor::ALL
            .iter()
            .map(|f| {
                let (a, b) = f.extent(dims);
                r.f32s(rank * a * b)
            })
            .collect::<Result<_, _>>()?;
        let tensors: [&[f32]; 6] = core::array::from_fn(|k| t[k].as_slice());
        FactorGroup::from_channel_major(rank, dims, tensors).map_err(|e| r.invariant(e.to_string()))
    };
    let density = group(rd)?;
    let color = [group(rc)?, group(rc)?, group(rc)?];
    r.finish()?;
    let field = FactorizedField::new(bbox, density, color, gain).map_err(|e| r.invariant(e.to_string()))?;
    Ok((field, tau))
}

/// Mesh validity beyond what the constructor checks: finite positions and
/// bone indices inside the skeleton.
fn check_mesh(m: &SkinnedTemplate, bones: usize) -> Result<(), String> {
    m.validate(Some(bones)).map_err(|e| e.to_string())?;
    if m.vertices.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite vertex position".into());
    }
    Ok(())
}

/// Also the on-disk `template.mesh` format.
pub fn encode_mesh(m: &SkinnedTemplate, out: &mut Vec<u8>) {
    put_u32(out, m.vertices.len() as u32);
    put_u32(out, m.faces.len() as u32);
    for v in &m.vertices {
        put_f32s(out, v);
    }
    for f in &m.faces {
        for i in f {
            put_u32(out, *i);
        }
    }
    for w in &m.weights {
        for b in w.bones {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    for w in &m.weights {
        put_f32s(out, &w.weights);
    }
}

fn decode_mesh(r: &mut Reader, bones: usize) -> Result<SkinnedTemplate, AssetError> {
    let (nv, nf) = (r.u32()? as usize, r.u32()? as usize);
    r.need(nv, 36)?;
    let vertices = r.vec3s(nv)?;
    r.need(nf, 12)?;
    let faces = (0..nf).map(|_| Ok([r.u32()?, r.u32()?, r.u32()?])).collect::<Result<Vec<_>, AssetError>>()?;
    let ids = (0..nv).map(|_| Ok([r.u16()?, r.u16()?, r.u16()?, r.u16()?])).collect::<Result<Vec<_>, AssetError>>()?;
    let mut weights = Vec::with_capacity(nv);
    for b in ids {
        weights.push(VertexWeights { bones: b, weights: [r.f32()?, r.f32()?, r.f32()?, r.f32()?] });
    }
    r.finish()?;
    let m = SkinnedTemplate { vertices, faces, weights };
    check_mesh(&m, bones).map_err(|e| r.invariant(e))?;
    Ok(m)
}

/// Reads a standalone mesh payload (the `template.mesh` file).
pub fn mesh_from_bytes(buf: &[u8], bones: usize) -> Result<SkinnedTemplate, AssetError> {
    decode_mesh(&mut Reader::new(buf, 0, buf.len(), Tag::Mesh.name()), bones)
}

pub fn mesh_to_bytes(m: &SkinnedTemplate) -> Vec<u8> {
    let mut out = Vec::new();
    encode_mesh(m, &mut out);
    out
}

fn encode_pose(p: &Pose, out: &mut Vec<u8>) {
    for r in &p.rotations {
        put_f32s(out, r);
    }
    put_f32s(out, &p.root_translation);
}

fn decode_pose(r: &mut Reader, bones: usize) -> Result<Pose, AssetError> {
    let rotations = r.vec3s(bones)?;
    let root_translation = [r.f32()?, r.f32()?, r.f32()?];
    if rotations.iter().flatten().chain(&root_translation).any(|v| !v.is_finite()) {
        return Err(r.invariant("non-finite pose entry"));
    }
    Ok(Pose { rotations, root_translation })
}

fn encode_skeleton(s: &Skeleton, out: &mut Vec<u8>) {
    put_u32(out, s.bone_count() as u32);
    for p in s.parents() {
        out.extend_from_slice(&p.map_or(-1, |p| p as i32).to_le_bytes());
    }
    for o in s.offsets() {
        put_f32s(out, o);
    }
    encode_pose(s.rest_pose(), out);
}

fn decode_skeleton(r: &mut Reader) -> Result<Skeleton, AssetError> {
    let n = r.u32()? as usize;
    r.need(n, 28)?;
    let mut parents = Vec::with_capacity(n);
    for _ in 0..n {
        let p = r.i32()?;
        parents.push(match p {
            -1 => None,
            p if (0..=u16::MAX as i32).contains(&p) => Some(p as u16),
            _ => return Err(r.invariant(format!("bad parent index {p}"))),
        });
    }
    let offsets = r.vec3s(n)?;
    if offsets.iter().flatten().any(|v| !v.is_finite()) {
        return Err(r.invariant("non-finite bone offset"));
    }
    let rest = decode_pose(r, n)?;
    r.finish()?;
    Skeleton::new(parents, offsets, rest).map_err(|e| r.invariant(e.to_string()))
}

fn encode_animation(frames: &[Pose], bones: usize, out: &mut Vec<u8>) {
    put_u32(out, frames.len() as u32);
    put_u32(out, bones as u32);
    for p in frames {
        encode_pose(p, out);
    }
}

fn decode_animation(r: &mut Reader, bones: usize) -> Result<Vec<Pose>, AssetError> {
    let (n, b) = (r.u32()? as usize, r.u32()? as usize);
    if b != bones {
        return Err(r.invariant(format!("animation has {b} bones, skeleton has {bones}")));
    }
    if n == 0 {
        return Err(r.invariant("empty animation section"));
    }
    r.need(n, 12 * (bones + 1))?;
    let frames = (0..n).map(|_| decode_pose(r, bones)).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(frames)
}

fn decode_meta(r: &mut Reader) -> Result<RenderMeta, AssetError> {
    let start = r.pos;
    let bytes = r.bytes(r.remaining())?;
    let meta: RenderMeta =
        serde_json::from_slice(bytes).map_err(|e| AssetError::invariant(Tag::Meta.name(), start, e.to_string()))?;
    meta.validate().map_err(|e| AssetError::invariant(Tag::Meta.name(), start, e))?;
    Ok(meta)
}
