//! Factorized volumetric field.
//!
//! The canonical density and the three color channels are each a sum of
//! `rank` plane-line products,
//!
//! ```text
//! raw(x) = Σ_r P_yx[r](y, x)·l_z[r](z) + P_yz[r](y, z)·l_x[r](x) + P_xz[r](x, z)·l_y[r](y)
//! ```
//!
//! with bilinear interpolation on planes and linear interpolation on lines.
//! Density goes through a gained softplus, color through a sigmoid.
//!
//! Factors are stored texel-major (all channels of one texel are adjacent) so
//! that one bilinear lookup touches a handful of cache lines. The
//! channel-major order used on disk is available through
//! [`FactorGroup::to_channel_major`] and [`FactorGroup::from_channel_major`].

use alloc::vec;
use alloc::vec::Vec;

use glam::DVec3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::math::{sigmoid, softplus};

/// Upper bound on channels per group; lets the hot loops use stack buffers.
pub const MAX_RANK: usize = 32;

/// Default cap on `d·h·w`.
pub const MAX_VOXELS: usize = 1 << 27;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("grid dims {d}x{h}x{w} invalid: each side must be >= 2 and the product <= {max}")]
    InvalidDims { d: usize, h: usize, w: usize, max: usize },
    #[error("bounding box min must be < max componentwise")]
    InvalidBoundingBox,
    #[error("rank {0} exceeds the supported maximum of {MAX_RANK}")]
    RankTooLarge(usize),
    #[error("tensor {name} has length {got}, expected {expected}")]
    ShapeMismatch { name: &'static str, got: usize, expected: usize },
    #[error("upsample cannot shrink the grid")]
    Shrink,
    #[error("softplus gain must be positive and finite")]
    InvalidGain,
    #[error("factor tensors must be finite")]
    NonFinite,
}

/// Voxel counts along canonical Z (`d`), Y (`h`) and X (`w`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(d: usize, h: usize, w: usize) -> Result<Self, FieldError> {
        Self::with_max(d, h, w, MAX_VOXELS)
    }

    pub fn with_max(d: usize, h: usize, w: usize, max: usize) -> Result<Self, FieldError> {
        let ok = d >= 2
            && h >= 2
            && w >= 2
            && d.checked_mul(h).and_then(|v| v.checked_mul(w)).is_some_and(|v| v <= max);
        if ok {
            Ok(Self { d, h, w })
        } else {
            Err(FieldError::InvalidDims { d, h, w, max })
        }
    }

    pub fn cube(n: usize) -> Result<Self, FieldError> {
        Self::new(n, n, n)
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Dims whose product is close to `voxels`, with the aspect ratio of `bbox`.
    pub fn for_budget(bbox: &BoundingBox, voxels: f64) -> Result<Self, FieldError> {
        let e = bbox.extent();
        let s = libm::cbrt(voxels / (e.x * e.y * e.z));
        let side = |len: f64| (libm::round(len * s) as usize).max(2);
        Self::new(side(e.z), side(e.y), side(e.x))
    }

    pub fn contains(&self, other: &GridDims) -> bool {
        self.d >= other.d && self.h >= other.h && self.w >= other.w
    }
}

/// Axis-aligned box in canonical space. Stored in `f32` so that it survives
/// serialization bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    min: [f32; 3],
    max: [f32; 3],
}

impl BoundingBox {
    pub fn new(min: [f32; 3], max: [f32; 3]) -> Result<Self, FieldError> {
        let ok = (0..3).all(|i| min[i].is_finite() && max[i].is_finite() && min[i] < max[i]);
        if ok {
            Ok(Self { min, max })
        } else {
            Err(FieldError::InvalidBoundingBox)
        }
    }

    /// Box from `f64` corners, rounded outward to the nearest `f32`.
    pub fn from_corners(min: DVec3, max: DVec3) -> Result<Self, FieldError> {
        let down = |v: f64| {
            let f = v as f32;
            if (f as f64) > v { libm::nextafterf(f, f32::NEG_INFINITY) } else { f }
        };
        let up = |v: f64| {
            let f = v as f32;
            if (f as f64) < v { libm::nextafterf(f, f32::INFINITY) } else { f }
        };
        Self::new(
            [down(min.x), down(min.y), down(min.z)],
            [up(max.x), up(max.y), up(max.z)],
        )
    }

    /// Tight box around a point set.
    pub fn around(points: impl IntoIterator<Item = DVec3>) -> Option<Self> {
        let mut lo = DVec3::splat(f64::INFINITY);
        let mut hi = DVec3::splat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.min(p);
            hi = hi.max(p);
        }
        Self::from_corners(lo, hi).ok()
    }

    pub fn min(&self) -> DVec3 {
        DVec3::new(self.min[0] as f64, self.min[1] as f64, self.min[2] as f64)
    }

    pub fn max(&self) -> DVec3 {
        DVec3::new(self.max[0] as f64, self.max[1] as f64, self.max[2] as f64)
    }

    pub fn min_f32(&self) -> [f32; 3] {
        self.min
    }

    pub fn max_f32(&self) -> [f32; 3] {
        self.max
    }

    pub fn extent(&self) -> DVec3 {
        self.max() - self.min()
    }

    pub fn center(&self) -> DVec3 {
        0.5 * (self.min() + self.max())
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().length()
    }

    pub fn contains(&self, p: DVec3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        p.x >= lo.x && p.y >= lo.y && p.z >= lo.z && p.x <= hi.x && p.y <= hi.y && p.z <= hi.z
    }

    pub fn dilate(&self, margin: f64) -> Self {
        Self::from_corners(self.min() - DVec3::splat(margin), self.max() + DVec3::splat(margin))
            .expect("dilating a valid box by a finite margin")
    }

    pub fn union(&self, other: &BoundingBox) -> Self {
        Self::from_corners(self.min().min(other.min()), self.max().max(other.max()))
            .expect("union of valid boxes")
    }
}

/// One of the six factor tensors of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    /// `[R, H, W]`
    PlaneYx,
    /// `[R, H, D]`
    PlaneYz,
    /// `[R, W, D]`
    PlaneXz,
    /// `[R, D]`
    LineZ,
    /// `[R, W]`
    LineX,
    /// `[R, H]`
    LineY,
}

impl Factor {
    pub const ALL: [Factor; 6] = [
        Factor::PlaneYx,
        Factor::PlaneYz,
        Factor::PlaneXz,
        Factor::LineZ,
        Factor::LineX,
        Factor::LineY,
    ];

    /// `(rows, cols)` of one channel; lines are `(len, 1)`.
    pub fn extent(self, dims: GridDims) -> (usize, usize) {
        match self {
            Factor::PlaneYx => (dims.h, dims.w),
            Factor::PlaneYz => (dims.h, dims.d),
            Factor::PlaneXz => (dims.w, dims.d),
            Factor::LineZ => (dims.d, 1),
            Factor::LineX => (dims.w, 1),
            Factor::LineY => (dims.h, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Factor::PlaneYx => "plane_yx",
            Factor::PlaneYz => "plane_yz",
            Factor::PlaneXz => "plane_xz",
            Factor::LineZ => "line_z",
            Factor::LineX => "line_x",
            Factor::LineY => "line_y",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// The six tensors of a group, generic over the element type so the same
/// shape serves parameters, gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors<T> {
    tensors: [Vec<T>; 6],
}

impl<T: Copy + Default> Factors<T> {
    pub fn zeros(rank: usize, dims: GridDims) -> Self {
        Self {
            tensors: Factor::ALL.map(|f| {
                let (r, c) = f.extent(dims);
                vec![T::default(); rank * r * c]
            }),
        }
    }
}

impl<T> Factors<T> {
    pub fn get(&self, f: Factor) -> &[T] {
        &self.tensors[f.slot()]
    }

    pub fn get_mut(&mut self, f: Factor) -> &mut [T] {
        &mut self.tensors[f.slot()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Factor, &[T])> {
        Factor::ALL.into_iter().zip(self.tensors.iter().map(|t| t.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Factor, &mut [T])> {
        Factor::ALL.into_iter().zip(self.tensors.iter_mut().map(|t| t.as_mut_slice()))
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Linear interpolation stencil along one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisLerp {
    pub i0: usize,
    pub f: f64,
    /// d(grid coordinate)/d(world); zero where the coordinate was clamped.
    pub slope: f64,
}

impl AxisLerp {
    fn new(c: f64, n: usize, scale: f64) -> Self {
        let top = (n - 1) as f64;
        let clamped = c < 0.0 || c > top;
        let c = c.clamp(0.0, top);
        let i0 = (libm::floor(c) as usize).min(n - 2);
        Self { i0, f: c - i0 as f64, slope: if clamped { 0.0 } else { scale } }
    }
}

/// Interpolation stencils of one canonical point.
#[derive(Debug, Clone, Copy)]
pub struct GridPoint {
    pub(crate) x: AxisLerp,
    pub(crate) y: AxisLerp,
    pub(crate) z: AxisLerp,
}

/// One channel-vector bilinear fetch from a texel-major plane.
#[inline(always)]
fn bilerp(data: &[f32], cols: usize, rank: usize, row: AxisLerp, col: AxisLerp, out: &mut [f64]) {
    let b00 = (row.i0 * cols + col.i0) * rank;
    let b01 = b00 + rank;
    let b10 = b00 + cols * rank;
    let b11 = b10 + rank;
    let (fr, fc) = (row.f, col.f);
    let w00 = (1.0 - fr) * (1.0 - fc);
    let w01 = (1.0 - fr) * fc;
    let w10 = fr * (1.0 - fc);
    let w11 = fr * fc;
    for (ch, o) in out.iter_mut().enumerate().take(rank) {
        *o = w00 * data[b00 + ch] as f64
            + w01 * data[b01 + ch] as f64
            + w10 * data[b10 + ch] as f64
            + w11 * data[b11 + ch] as f64;
    }
}

/// Partial derivatives of a bilinear fetch w.r.t. the row and column coordinate.
#[inline(always)]
fn bilerp_grad(data: &[f32], cols: usize, rank: usize, row: AxisLerp, col: AxisLerp, ch: usize) -> (f64, f64) {
    let b00 = (row.i0 * cols + col.i0) * rank + ch;
    let v00 = data[b00] as f64;
    let v01 = data[b00 + rank] as f64;
    let v10 = data[b00 + cols * rank] as f64;
    let v11 = data[b00 + cols * rank + rank] as f64;
    let d_row = (1.0 - col.f) * (v10 - v00) + col.f * (v11 - v01);
    let d_col = (1.0 - row.f) * (v01 - v00) + row.f * (v11 - v10);
    (d_row, d_col)
}

#[inline(always)]
fn lerp(data: &[f32], rank: usize, at: AxisLerp, out: &mut [f64]) {
    let b0 = at.i0 * rank;
    let b1 = b0 + rank;
    for (ch, o) in out.iter_mut().enumerate().take(rank) {
        *o = (1.0 - at.f) * data[b0 + ch] as f64 + at.f * data[b1 + ch] as f64;
    }
}

#[inline(always)]
fn scatter_plane(grad: &mut [f64], cols: usize, rank: usize, row: AxisLerp, col: AxisLerp, ch: usize, g: f64) {
    let b00 = (row.i0 * cols + col.i0) * rank + ch;
    let (fr, fc) = (row.f, col.f);
    grad[b00] += g * (1.0 - fr) * (1.0 - fc);
    grad[b00 + rank] += g * (1.0 - fr) * fc;
    grad[b00 + cols * rank] += g * fr * (1.0 - fc);
    grad[b00 + cols * rank + rank] += g * fr * fc;
}

#[inline(always)]
fn scatter_line(grad: &mut [f64], rank: usize, at: AxisLerp, ch: usize, g: f64) {
    let b0 = at.i0 * rank + ch;
    grad[b0] += g * (1.0 - at.f);
    grad[b0 + rank] += g * at.f;
}

/// Per-channel plane and line values at one point.
struct Fetched {
    p_yx: [f64; MAX_RANK],
    p_yz: [f64; MAX_RANK],
    p_xz: [f64; MAX_RANK],
    l_z: [f64; MAX_RANK],
    l_x: [f64; MAX_RANK],
    l_y: [f64; MAX_RANK],
}

/// A rank-`R` set of plane-line products sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGroup {
    rank: usize,
    dims: GridDims,
    factors: Factors<f32>,
}

impl FactorGroup {
    pub fn zeros(rank: usize, dims: GridDims) -> Result<Self, FieldError> {
        if rank > MAX_RANK {
            return Err(FieldError::RankTooLarge(rank));
        }
        Ok(Self { rank, dims, factors: Factors::zeros(rank, dims) })
    }

    /// Planes filled with `plane`, lines with `line`.
    pub fn filled(rank: usize, dims: GridDims, plane: f32, line: f32) -> Result<Self, FieldError> {
        let mut g = Self::zeros(rank, dims)?;
        for (f, t) in g.factors.iter_mut() {
            let v = if matches!(f, Factor::PlaneYx | Factor::PlaneYz | Factor::PlaneXz) { plane } else { line };
            t.fill(v);
        }
        Ok(g)
    }

    /// Entries drawn from `N(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(rank: usize, dims: GridDims, scale: f64, rng: &mut R) -> Result<Self, FieldError> {
        let mut g = Self::zeros(rank, dims)?;
        for (_, t) in g.factors.iter_mut() {
            for v in t.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v = (scale * n) as f32;
            }
        }
        Ok(g)
    }

    /// Builds a group from channel-major tensors in [`Factor::ALL`] order.
    pub fn from_channel_major(rank: usize, dims: GridDims, tensors: [&[f32]; 6]) -> Result<Self, FieldError> {
        let mut g = Self::zeros(rank, dims)?;
        for (f, src) in Factor::ALL.into_iter().zip(tensors) {
            let (rows, cols) = f.extent(dims);
            let expected = rank * rows * cols;
            if src.len() != expected {
                return Err(FieldError::ShapeMismatch { name: f.name(), got: src.len(), expected });
            }
            if src.iter().any(|v| !v.is_finite()) {
                return Err(FieldError::NonFinite);
            }
            let dst = g.factors.get_mut(f);
            for r in 0..rank {
                for texel in 0..rows * cols {
                    dst[texel * rank + r] = src[r * rows * cols + texel];
                }
            }
        }
        Ok(g)
    }

    /// Channel-major copy (`[r][row][col]`) of one tensor.
    pub fn to_channel_major(&self, f: Factor) -> Vec<f32> {
        let (rows, cols) = f.extent(self.dims);
        let src = self.factors.get(f);
        let mut out = vec![0.0; src.len()];
        for r in 0..self.rank {
            for texel in 0..rows * cols {
                out[r * rows * cols + texel] = src[texel * self.rank + r];
            }
        }
        out
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn factors(&self) -> &Factors<f32> {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut Factors<f32> {
        &mut self.factors
    }

    /// Entry `[r][row][col]` of a tensor (lines use `col = 0`).
    pub fn get(&self, f: Factor, r: usize, row: usize, col: usize) -> f32 {
        let (_, cols) = f.extent(self.dims);
        self.factors.get(f)[(row * cols + col) * self.rank + r]
    }

    pub fn set(&mut self, f: Factor, r: usize, row: usize, col: usize, v: f32) {
        let (_, cols) = f.extent(self.dims);
        let rank = self.rank;
        self.factors.get_mut(f)[(row * cols + col) * rank + r] = v;
    }

    pub fn param_count(&self) -> usize {
        self.factors.len()
    }

    fn fetch(&self, p: &GridPoint) -> Fetched {
        let mut out = Fetched {
            p_yx: [0.0; MAX_RANK],
            p_yz: [0.0; MAX_RANK],
            p_xz: [0.0; MAX_RANK],
            l_z: [0.0; MAX_RANK],
            l_x: [0.0; MAX_RANK],
            l_y: [0.0; MAX_RANK],
        };
        let (r, d) = (self.rank, self.dims);
        let t = &self.factors;
        bilerp(t.get(Factor::PlaneYx), d.w, r, p.y, p.x, &mut out.p_yx);
        bilerp(t.get(Factor::PlaneYz), d.d, r, p.y, p.z, &mut out.p_yz);
        bilerp(t.get(Factor::PlaneXz), d.d, r, p.x, p.z, &mut out.p_xz);
        lerp(t.get(Factor::LineZ), r, p.z, &mut out.l_z);
        lerp(t.get(Factor::LineX), r, p.x, &mut out.l_x);
        lerp(t.get(Factor::LineY), r, p.y, &mut out.l_y);
        out
    }

    /// Pre-activation value of channel `r`.
    pub fn raw_channel(&self, p: &GridPoint, r: usize) -> f64 {
        let v = self.fetch(p);
        v.p_yx[r] * v.l_z[r] + v.p_yz[r] * v.l_x[r] + v.p_xz[r] * v.l_y[r]
    }

    /// Sum over all channels of the pre-activation value.
    pub fn raw_sum(&self, p: &GridPoint) -> f64 {
        let v = self.fetch(p);
        (0..self.rank).map(|r| v.p_yx[r] * v.l_z[r] + v.p_yz[r] * v.l_x[r] + v.p_xz[r] * v.l_y[r]).sum()
    }

    /// Gradient of [`raw_sum`](Self::raw_sum) w.r.t. the canonical position.
    pub fn raw_sum_spatial(&self, p: &GridPoint) -> DVec3 {
        let v = self.fetch(p);
        let (rank, d) = (self.rank, self.dims);
        let t = &self.factors;
        let line_slope = |data: &[f32], at: AxisLerp, ch: usize| {
            data[(at.i0 + 1) * rank + ch] as f64 - data[at.i0 * rank + ch] as f64
        };
        let mut g = DVec3::ZERO;
        for ch in 0..rank {
            let (yx_dy, yx_dx) = bilerp_grad(t.get(Factor::PlaneYx), d.w, rank, p.y, p.x, ch);
            let (yz_dy, yz_dz) = bilerp_grad(t.get(Factor::PlaneYz), d.d, rank, p.y, p.z, ch);
            let (xz_dx, xz_dz) = bilerp_grad(t.get(Factor::PlaneXz), d.d, rank, p.x, p.z, ch);
            let lz = line_slope(t.get(Factor::LineZ), p.z, ch);
            let lx = line_slope(t.get(Factor::LineX), p.x, ch);
            let ly = line_slope(t.get(Factor::LineY), p.y, ch);
            g.x += yx_dx * v.l_z[ch] + v.p_yz[ch] * lx + xz_dx * v.l_y[ch];
            g.y += yx_dy * v.l_z[ch] + yz_dy * v.l_x[ch] + v.p_xz[ch] * ly;
            g.z += v.p_yx[ch] * lz + yz_dz * v.l_x[ch] + xz_dz * v.l_y[ch];
        }
        DVec3::new(g.x * p.x.slope, g.y * p.y.slope, g.z * p.z.slope)
    }

    /// Accumulates `upstream · ∂raw_sum/∂θ` into `grad` for every touched entry.
    pub fn backprop_raw(&self, p: &GridPoint, upstream: f64, grad: &mut Factors<f64>) {
        if upstream == 0.0 {
            return;
        }
        let v = self.fetch(p);
        let (rank, d) = (self.rank, self.dims);
        for ch in 0..rank {
            scatter_plane(grad.get_mut(Factor::PlaneYx), d.w, rank, p.y, p.x, ch, upstream * v.l_z[ch]);
            scatter_line(grad.get_mut(Factor::LineZ), rank, p.z, ch, upstream * v.p_yx[ch]);
            scatter_plane(grad.get_mut(Factor::PlaneYz), d.d, rank, p.y, p.z, ch, upstream * v.l_x[ch]);
            scatter_line(grad.get_mut(Factor::LineX), rank, p.x, ch, upstream * v.p_yz[ch]);
            scatter_plane(grad.get_mut(Factor::PlaneXz), d.d, rank, p.x, p.z, ch, upstream * v.l_y[ch]);
            scatter_line(grad.get_mut(Factor::LineY), rank, p.y, ch, upstream * v.p_xz[ch]);
        }
    }

    /// Resamples every tensor onto `new_dims`.
    fn resample(&self, new_dims: GridDims) -> FactorGroup {
        let rank = self.rank;
        let mut out = FactorGroup::zeros(rank, new_dims).expect("rank already validated");
        let map = |i: usize, n_new: usize, n_old: usize| {
            let c = if n_new == 1 { 0.0 } else { i as f64 * (n_old - 1) as f64 / (n_new - 1) as f64 };
            AxisLerp::new(c, n_old, 0.0)
        };
        let mut buf = [0.0f64; MAX_RANK];
        for f in Factor::ALL {
            let (or, oc) = f.extent(self.dims);
            let (nr, nc) = f.extent(new_dims);
            let src = self.factors.get(f);
            let dst = out.factors.get_mut(f);
            for row in 0..nr {
                let rl = map(row, nr, or);
                for col in 0..nc {
                    let base = (row * nc + col) * rank;
                    if oc == 1 {
                        lerp(src, rank, rl, &mut buf);
                    } else {
                        bilerp(src, oc, rank, rl, map(col, nc, oc), &mut buf);
                    }
                    for ch in 0..rank {
                        dst[base + ch] = buf[ch] as f32;
                    }
                }
            }
        }
        out
    }
}

/// Result of evaluating the field at one canonical point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub rgb: [f64; 3],
}

/// Canonical density and color fields on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedField {
    dims: GridDims,
    bbox: BoundingBox,
    density: FactorGroup,
    color: [FactorGroup; 3],
    gain: f32,
}

impl FactorizedField {
    pub fn new(
        bbox: BoundingBox,
        density: FactorGroup,
        color: [FactorGroup; 3],
        gain: f32,
    ) -> Result<Self, FieldError> {
        if !(gain.is_finite() && gain > 0.0) {
            return Err(FieldError::InvalidGain);
        }
        let dims = density.dims();
        if color.iter().any(|c| c.dims() != dims) {
            return Err(FieldError::ShapeMismatch { name: "color", got: 0, expected: dims.voxels() });
        }
        Ok(Self { dims, bbox, density, color, gain })
    }

    pub fn zeros(dims: GridDims, bbox: BoundingBox, rank_density: usize, rank_color: usize, gain: f32) -> Result<Self, FieldError> {
        let c = FactorGroup::zeros(rank_color, dims)?;
        Self::new(bbox, FactorGroup::zeros(rank_density, dims)?, [c.clone(), c.clone(), c], gain)
    }

    pub fn random<R: Rng + ?Sized>(
        dims: GridDims,
        bbox: BoundingBox,
        rank_density: usize,
        rank_color: usize,
        gain: f32,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self, FieldError> {
        let density = FactorGroup::random(rank_density, dims, scale, rng)?;
        let color = [
            FactorGroup::random(rank_color, dims, scale, rng)?,
            FactorGroup::random(rank_color, dims, scale, rng)?,
            FactorGroup::random(rank_color, dims, scale, rng)?,
        ];
        Self::new(bbox, density, color, gain)
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn gain(&self) -> f32 {
        self.gain
    }

    pub fn density(&self) -> &FactorGroup {
        &self.density
    }

    pub fn color(&self) -> &[FactorGroup; 3] {
        &self.color
    }

    pub fn density_mut(&mut self) -> &mut FactorGroup {
        &mut self.density
    }

    pub fn color_mut(&mut self) -> &mut [FactorGroup; 3] {
        &mut self.color
    }

    /// All four groups: density first, then R, G, B.
    pub fn groups(&self) -> [&FactorGroup; 4] {
        [&self.density, &self.color[0], &self.color[1], &self.color[2]]
    }

    pub fn groups_mut(&mut self) -> [&mut FactorGroup; 4] {
        let [r, g, b] = &mut self.color;
        [&mut self.density, r, g, b]
    }

    /// Affine map of the box onto `[0, W-1]×[0, H-1]×[0, D-1]`.
    pub fn world_to_grid(&self, x: DVec3) -> DVec3 {
        let d = self.dims;
        let top = DVec3::new((d.w - 1) as f64, (d.h - 1) as f64, (d.d - 1) as f64);
        (x - self.bbox.min()) / self.bbox.extent() * top
    }

    /// Interpolation stencil, or `None` outside the box.
    pub fn grid_point(&self, x: DVec3) -> Option<GridPoint> {
        if !self.bbox.contains(x) {
            return None;
        }
        let d = self.dims;
        let g = self.world_to_grid(x);
        let e = self.bbox.extent();
        Some(GridPoint {
            x: AxisLerp::new(g.x, d.w, (d.w - 1) as f64 / e.x),
            y: AxisLerp::new(g.y, d.h, (d.h - 1) as f64 / e.y),
            z: AxisLerp::new(g.z, d.d, (d.d - 1) as f64 / e.z),
        })
    }

    /// Pre-activation value of one channel of `group`; zero outside the box.
    pub fn sample_raw(&self, group: &FactorGroup, x: DVec3, r: usize) -> f64 {
        self.grid_point(x).map_or(0.0, |p| group.raw_channel(&p, r))
    }

    pub fn sample_density(&self, x: DVec3) -> f64 {
        self.grid_point(x).map_or(0.0, |p| softplus(self.gain as f64 * self.density.raw_sum(&p)))
    }

    pub fn sample_color(&self, x: DVec3) -> [f64; 3] {
        match self.grid_point(x) {
            Some(p) => self.color.each_ref().map(|g| sigmoid(g.raw_sum(&p))),
            None => [0.5; 3],
        }
    }

    pub fn sample(&self, x: DVec3) -> FieldSample {
        match self.grid_point(x) {
            Some(p) => self.sample_at(&p),
            None => FieldSample { sigma: 0.0, rgb: [0.5; 3] },
        }
    }

    pub fn sample_at(&self, p: &GridPoint) -> FieldSample {
        FieldSample {
            sigma: softplus(self.gain as f64 * self.density.raw_sum(p)),
            rgb: self.color.each_ref().map(|g| sigmoid(g.raw_sum(p))),
        }
    }

    /// Density alone; cheaper than [`sample_at`](Self::sample_at).
    pub fn density_at(&self, p: &GridPoint) -> f64 {
        softplus(self.gain as f64 * self.density.raw_sum(p))
    }

    /// Accumulates `d_density·∂σ/∂θ + Σ_k d_rgb[k]·∂c_k/∂θ` into `grads`.
    pub fn backprop_sample(&self, x: DVec3, d_density: f64, d_rgb: [f64; 3], grads: &mut FieldGradients) {
        if let Some(p) = self.grid_point(x) {
            self.backprop_at(&p, d_density, d_rgb, Some(grads), false);
        }
    }

    /// Backward pass at one stencil. Returns the gradient w.r.t. the canonical
    /// position when `spatial` is set (zero otherwise).
    pub fn backprop_at(
        &self,
        p: &GridPoint,
        d_density: f64,
        d_rgb: [f64; 3],
        mut grads: Option<&mut FieldGradients>,
        spatial: bool,
    ) -> DVec3 {
        let mut dx = DVec3::ZERO;
        if d_density != 0.0 {
            let a = self.gain as f64 * self.density.raw_sum(p);
            let up = d_density * self.gain as f64 * sigmoid(a);
            if let Some(g) = grads.as_deref_mut() {
                self.density.backprop_raw(p, up, &mut g.density);
            }
            if spatial {
                dx += up * self.density.raw_sum_spatial(p);
            }
        }
        for k in 0..3 {
            if d_rgb[k] == 0.0 {
                continue;
            }
            let s = sigmoid(self.color[k].raw_sum(p));
            let up = d_rgb[k] * s * (1.0 - s);
            if let Some(g) = grads.as_deref_mut() {
                self.color[k].backprop_raw(p, up, &mut g.color[k]);
            }
            if spatial {
                dx += up * self.color[k].raw_sum_spatial(p);
            }
        }
        dx
    }

    /// Resamples all factors onto a finer grid. Values at old grid nodes are
    /// reproduced exactly when each `n_new - 1` is a multiple of `n_old - 1`.
    pub fn upsample(&self, new_dims: GridDims) -> Result<FactorizedField, FieldError> {
        if !new_dims.contains(&self.dims) {
            return Err(FieldError::Shrink);
        }
        if new_dims == self.dims {
            return Ok(self.clone());
        }
        Ok(FactorizedField {
            dims: new_dims,
            bbox: self.bbox,
            density: self.density.resample(new_dims),
            color: self.color.each_ref().map(|g| g.resample(new_dims)),
            gain: self.gain,
        })
    }

    /// `R_σ·S + 3·R_c·S` with `S = HW + HD + WD + H + W + D`.
    pub fn param_count(&self) -> usize {
        param_count(self.dims, self.density.rank(), self.color[0].rank())
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.factors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite())))
    }
}

/// Closed-form parameter count for given dims and ranks.
pub fn param_count(dims: GridDims, rank_density: usize, rank_color: usize) -> usize {
    let GridDims { d, h, w } = dims;
    let per_channel = h * w + h * d + w * d + h + w + d;
    rank_density * per_channel + 3 * rank_color * per_channel
}

/// Gradient buffers shaped like a [`FactorizedField`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradients {
    pub density: Factors<f64>,
    pub color: [Factors<f64>; 3],
}

impl FieldGradients {
    pub fn for_field(field: &FactorizedField) -> Self {
        let dims = field.dims();
        Self {
            density: Factors::zeros(field.density().rank(), dims),
            color: field.color().each_ref().map(|g| Factors::zeros(g.rank(), dims)),
        }
    }

    pub fn groups(&self) -> [&Factors<f64>; 4] {
        [&self.density, &self.color[0], &self.color[1], &self.color[2]]
    }

    pub fn groups_mut(&mut self) -> [&mut Factors<f64>; 4] {
        let [r, g, b] = &mut self.color;
        [&mut self.density, r, g, b]
    }

    pub fn reset(&mut self) {
        for g in self.groups_mut() {
            for (_, t) in g.iter_mut() {
                t.fill(0.0);
            }
        }
    }

    /// Elementwise sum, for reducing per-worker buffers.
    pub fn add_assign(&mut self, other: &FieldGradients) {
        for (dst, src) in self.groups_mut().into_iter().zip(other.groups()) {
            for ((_, a), (_, b)) in dst.iter_mut().zip(src.iter()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|(_, t)| t.iter().all(|v| *v == 0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> BoundingBox {
        BoundingBox::new([0.0; 3], [1.0; 3]).unwrap()
    }

    #[test]
    fn world_to_grid_corners() {
        let f = FactorizedField::zeros(GridDims::new(4, 5, 6).unwrap(), unit_box(), 1, 1, 1.0).unwrap();
        assert_eq!(f.world_to_grid(DVec3::ZERO), DVec3::ZERO);
        assert_eq!(f.world_to_grid(DVec3::ONE), DVec3::new(5.0, 4.0, 3.0));
        let g = FactorizedField::zeros(GridDims::cube(3).unwrap(), unit_box(), 1, 1, 1.0).unwrap();
        assert_eq!(g.world_to_grid(DVec3::splat(0.5)), DVec3::ONE);
    }

    #[test]
    fn raw_sampling_examples() {
        let dims = GridDims::cube(2).unwrap();
        let zero = FactorizedField::zeros(dims, unit_box(), 1, 1, 1.0).unwrap();
        assert_eq!(zero.sample_raw(zero.density(), DVec3::splat(0.3), 0), 0.0);

        let ones = FactorGroup::filled(1, dims, 1.0, 1.0).unwrap();
        let f = FactorizedField::new(unit_box(), ones.clone(), [ones.clone(), ones.clone(), ones], 1.0).unwrap();
        assert!((f.sample_raw(f.density(), DVec3::new(0.2, 0.7, 0.9), 0) - 3.0).abs() < 1e-12);

        let mut g = FactorGroup::zeros(1, dims).unwrap();
        // plane_yx rows are y, cols are x
        g.set(Factor::PlaneYx, 0, 0, 0, 1.0);
        g.set(Factor::PlaneYx, 0, 0, 1, 2.0);
        g.set(Factor::PlaneYx, 0, 1, 0, 3.0);
        g.set(Factor::PlaneYx, 0, 1, 1, 4.0);
        g.set(Factor::LineZ, 0, 0, 0, 5.0);
        g.set(Factor::LineZ, 0, 1, 0, 6.0);
        let z = FactorGroup::zeros(1, dims).unwrap();
        let f = FactorizedField::new(unit_box(), g, [z.clone(), z.clone(), z], 1.0).unwrap();
        assert!((f.sample_raw(f.density(), DVec3::splat(0.5), 0) - 13.75).abs() < 1e-12);
        // outside the box
        assert_eq!(f.sample_raw(f.density(), DVec3::splat(1.5), 0), 0.0);
        assert_eq!(f.sample_density(DVec3::splat(-0.1)), 0.0);
    }

    #[test]
    fn activations() {
        let dims = GridDims::cube(2).unwrap();
        let mk = |d: f32, rgb: [f32; 3], gain: f32| {
            // planes = value, lines = 1/3 so the raw sum equals the value
            let g = |v: f32| FactorGroup::filled(1, dims, v, 1.0 / 3.0).unwrap();
            FactorizedField::new(unit_box(), g(d), rgb.map(g), gain).unwrap()
        };
        let p = DVec3::splat(0.4);
        let f = mk(0.0, [0.0; 3], 1.0);
        assert!((f.sample_density(p) - core::f64::consts::LN_2).abs() < 1e-7);
        assert_eq!(f.sample_color(p), [0.5; 3]);
        let f = mk(2.0, [3f32.ln(), 0.0, -(3f32.ln())], 100.0);
        assert!((f.sample_density(p) - 200.0).abs() < 1e-4);
        let c = f.sample_color(p);
        assert!((c[0] - 0.75).abs() < 1e-6 && (c[1] - 0.5).abs() < 1e-12 && (c[2] - 0.25).abs() < 1e-6);
        let f = mk(-1e6, [1e6; 3], 1.0);
        assert_eq!(f.sample_density(p), 0.0);
        assert_eq!(f.sample_color(p), [1.0; 3]);
    }

    #[test]
    fn zero_upstream_leaves_gradients_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FactorizedField::random(GridDims::cube(4).unwrap(), unit_box(), 2, 2, 5.0, 0.3, &mut rng).unwrap();
        let mut g = FieldGradients::for_field(&f);
        f.backprop_sample(DVec3::splat(0.3), 0.0, [0.0; 3], &mut g);
        assert!(g.is_zero());
    }

    #[test]
    fn on_node_gradient_is_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = GridDims::cube(3).unwrap();
        let f = FactorizedField::random(dims, unit_box(), 1, 1, 1.0, 0.5, &mut rng).unwrap();
        let mut g = FieldGradients::for_field(&f);
        // grid node (x=1, y=0, z=2)
        f.backprop_sample(DVec3::new(0.5, 0.0, 1.0), 1.0, [0.0; 3], &mut g);
        let nonzero: Vec<(Factor, usize)> = g
            .density
            .iter()
            .flat_map(|(fac, t)| t.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(i, _)| (fac, i)))
            .collect();
        let expect = [
            (Factor::PlaneYx, 1), // row y=0, col x=1
            (Factor::PlaneYz, 2), // row y=0, col z=2
            (Factor::PlaneXz, 5), // row x=1, col z=2
            (Factor::LineZ, 2),
            (Factor::LineX, 1),
            (Factor::LineY, 0),
        ];
        assert_eq!(nonzero, expect);
    }

    #[test]
    fn upsample_line_midpoint_and_identity() {
        let dims = GridDims::new(2, 2, 2).unwrap();
        let mut g = FactorGroup::zeros(1, dims).unwrap();
        g.set(Factor::LineX, 0, 0, 0, 1.0);
        g.set(Factor::LineX, 0, 1, 0, 3.0);
        let z = FactorGroup::zeros(1, dims).unwrap();
        let f = FactorizedField::new(unit_box(), g, [z.clone(), z.clone(), z], 1.0).unwrap();
        let up = f.upsample(GridDims::new(2, 2, 3).unwrap()).unwrap();
        assert_eq!(up.density().to_channel_major(Factor::LineX), vec![1.0, 2.0, 3.0]);
        assert_eq!(f.upsample(dims).unwrap(), f);
        assert_eq!(up.upsample(dims), Err(FieldError::Shrink));
    }

    #[test]
    fn upsample_preserves_constants() {
        let dims = GridDims::new(3, 4, 5).unwrap();
        let c = FactorGroup::filled(2, dims, 0.7, -1.5).unwrap();
        let f = FactorizedField::new(unit_box(), c.clone(), [c.clone(), c.clone(), c], 2.0).unwrap();
        let up = f.upsample(GridDims::new(7, 9, 6).unwrap()).unwrap();
        for (_, t) in up.density().factors().iter() {
            assert!(t.iter().all(|v| *v == 0.7 || *v == -1.5));
        }
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count(GridDims::cube(100).unwrap(), 8, 8), 969_600);
        assert_eq!(param_count(GridDims::cube(100).unwrap(), 8, 0), 242_400);
        assert_eq!(param_count(GridDims::cube(2).unwrap(), 1, 0), 18);
        assert_eq!(param_count(GridDims::cube(2).unwrap(), 0, 0), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FactorizedField::random(GridDims::new(3, 4, 5).unwrap(), unit_box(), 3, 2, 1.0, 0.1, &mut rng).unwrap();
        let stored: usize = f.groups().iter().map(|g| g.param_count()).sum();
        assert_eq!(f.param_count(), stored);
    }

    #[test]
    fn channel_major_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = GridDims::new(3, 4, 5).unwrap();
        let g = FactorGroup::random(3, dims, 1.0, &mut rng).unwrap();
        let cm: Vec<Vec<f32>> = Factor::ALL.iter().map(|f| g.to_channel_major(*f)).collect();
        let back = FactorGroup::from_channel_major(3, dims, core::array::from_fn(|i| cm[i].as_slice())).unwrap();
        assert_eq!(back, g);
        // channel-major means channel r=1 of plane_yx starts at H*W
        assert_eq!(cm[0][4 * 5 + 2 * 5 + 3], g.get(Factor::PlaneYx, 1, 2, 3));
    }

    #[test]
    fn dims_validation() {
        assert!(GridDims::new(1, 2, 2).is_err());
        assert!(GridDims::with_max(4, 4, 4, 63).is_err());
        let b = BoundingBox::new([0.0, 0.0, 0.0], [2.0, 1.0, 1.0]).unwrap();
        let d = GridDims::for_budget(&b, 2.0 * 64.0 * 64.0 * 64.0).unwrap();
        assert_eq!((d.w, d.h, d.d), (128, 64, 64));
        assert!(BoundingBox::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }
}
