//! Patch-based fitting of the canonical field and per-frame pose deltas.
//!
//! The loss is `α·L_rgb + β·L_perceptual + γ·L_sparse`, with the weights
//! scheduled over the iteration index. Gradients are analytic: compositing,
//! field sampling and the inverse skinning warp are all differentiated by
//! hand, so a step needs no tape.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use glam::{DQuat, DVec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{ray_box, Camera, Ray};
use crate::field::{BoundingBox, Factor, FactorGroup, FactorizedField, FieldError, FieldGradients, GridDims, GridPoint};
use crate::raymarch::{composite_backward, render_deformed_image, PosedScene, RenderConfig, RenderOutput};
use crate::skinning::{inverse_warp, AffineGrad, Pose, Skeleton, SkinnedTemplate, SkinningError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("dataset has no frames")]
    NoFrames,
    #[error("frame {frame}: expected {expected} pixels, found {found}")]
    FrameSize { frame: usize, expected: usize, found: usize },
    #[error("frame {0}: camera resolution differs from the dataset")]
    CameraSize(usize),
    #[error("frame {0}: foreground mask is empty")]
    EmptyMask(usize),
    #[error("frame {frame}: {source}")]
    Pose { frame: usize, source: SkinningError },
    #[error("template: {0}")]
    Template(SkinningError),
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error("iteration {0} is outside the schedule range 0..=30000")]
    Iteration(u32),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("non-finite loss at iteration {iteration} (rgb {l_rgb}, sparse {l_sparse}, perceptual {l_perceptual:?})")]
    NonFinite { iteration: u32, l_rgb: f64, l_sparse: f64, l_perceptual: Option<f64> },
}

/// Last iteration covered by the loss-weight schedule.
pub const SCHEDULE_END: u32 = 30_000;

/// Loss weights at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// `α` ramps from 1 to 0.2 and `β` from 0 to 0.8 over the first 10000
/// iterations; `γ` switches on at 2000 and drops at 4000.
pub fn schedules(i: u32) -> Result<Schedule, TrainError> {
    if i > SCHEDULE_END {
        return Err(TrainError::Iteration(i));
    }
    let (alpha, beta) = if i < 10_000 {
        let ramp = 0.8 * i as f64 / 10_000.0;
        (1.0 - ramp, ramp)
    } else {
        (0.2, 0.8)
    };
    let gamma = match i {
        0..=1999 => 0.0,
        2000..=3999 => 8e-5,
        _ => 5e-5,
    };
    Ok(Schedule { alpha, beta, gamma })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Row-major RGB in `[0, 1]`.
    pub image: Vec<[f32; 3]>,
    pub mask: Vec<bool>,
    pub camera: Camera,
    pub pose: Pose,
}

/// Posed frames sharing one skeleton and template.
#[derive(Debug, Clone)]
pub struct Dataset {
    width: u32,
    height: u32,
    frames: Vec<Frame>,
    skeleton: Skeleton,
    template: SkinnedTemplate,
    foreground: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn new(frames: Vec<Frame>, skeleton: Skeleton, template: SkinnedTemplate) -> Result<Self, TrainError> {
        let first = frames.first().ok_or(TrainError::NoFrames)?;
        let (width, height) = (first.camera.width, first.camera.height);
        let n = (width * height) as usize;
        template.validate(Some(skeleton.bone_count())).map_err(TrainError::Template)?;
        let mut foreground = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            if f.camera.width != width || f.camera.height != height {
                return Err(TrainError::CameraSize(i));
            }
            for len in [f.image.len(), f.mask.len()] {
                if len != n {
                    return Err(TrainError::FrameSize { frame: i, expected: n, found: len });
                }
            }
            skeleton.check_pose(&f.pose).map_err(|source| TrainError::Pose { frame: i, source })?;
            let fg: Vec<u32> = (0..n as u32).filter(|p| f.mask[*p as usize]).collect();
            if fg.is_empty() {
                return Err(TrainError::EmptyMask(i));
            }
            foreground.push(fg);
        }
        Ok(Self { width, height, frames, skeleton, template, foreground })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn template(&self) -> &SkinnedTemplate {
        &self.template
    }

    /// Linear indices of the foreground pixels of frame `f`.
    pub fn foreground(&self, f: usize) -> &[u32] {
        &self.foreground[f]
    }

    /// Supervision color: the image inside the mask, `background` outside.
    pub fn target(&self, f: usize, pixel: usize, background: [f64; 3]) -> [f64; 3] {
        let fr = &self.frames[f];
        if fr.mask[pixel] {
            fr.image[pixel].map(|c| c as f64)
        } else {
            background
        }
    }

    /// Template bounds, the default canonical box before dilation.
    pub fn template_bounds(&self) -> BoundingBox {
        BoundingBox::around(self.template.positions()).unwrap_or_else(|| {
            let p = self.template.vertex(0);
            BoundingBox::from_corners(p - DVec3::splat(1e-3), p + DVec3::splat(1e-3)).expect("finite vertex")
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rank_density: usize,
    pub rank_color: usize,
    pub epochs: u32,
    pub iters_per_epoch: u32,
    pub patch_size: u32,
    pub patches: usize,
    pub start_voxels: f64,
    pub end_voxels: f64,
    /// Iterations before which the grid is refined; the voxel budget is
    /// interpolated geometrically between the endpoints.
    pub upsample_at: Vec<u32>,
    pub lr_factors: f64,
    pub lr_pose: f64,
    /// Both learning rates decay exponentially to this fraction of their
    /// initial value over the run.
    pub lr_decay: f64,
    /// Inverse-warp radius; `None` uses a tenth of the template diagonal.
    pub tau: Option<f64>,
    pub n_samples: usize,
    pub background: [f64; 3],
    pub seed: u64,
    /// Sampled entries per factor pair for the sparsity estimate.
    pub sparse_samples: usize,
    /// Standard deviation of the initial factor entries.
    pub init_scale: f64,
    /// Stratified jitter of the sample positions along each ray.
    pub jitter: bool,
    /// A ray stops accumulating once its transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank_density: 8,
            rank_color: 8,
            epochs: 30,
            iters_per_epoch: 1000,
            patch_size: 32,
            patches: 6,
            start_voxels: 1e6,
            end_voxels: 4.096e6,
            upsample_at: vec![2000, 4000, 6000, 8000],
            lr_factors: 0.02,
            lr_pose: 5e-4,
            lr_decay: 0.1,
            tau: None,
            n_samples: 128,
            background: [0.0; 3],
            seed: 0,
            sparse_samples: 4096,
            init_scale: 0.1,
            jitter: true,
            min_transmittance: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn total_iterations(&self) -> u32 {
        self.epochs * self.iters_per_epoch
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m| Err(TrainError::Config(m));
        if self.rank_density == 0 || self.rank_color == 0 {
            return bad("ranks must be positive");
        }
        if self.patch_size == 0 || self.patches == 0 {
            return bad("batch must contain at least one pixel");
        }
        if !(self.start_voxels >= 8.0 && self.end_voxels >= self.start_voxels && self.end_voxels.is_finite()) {
            return bad("voxel budgets must satisfy 8 <= start <= end");
        }
        if self.upsample_at.windows(2).any(|w| w[0] >= w[1]) {
            return bad("upsample iterations must be strictly increasing");
        }
        if self.upsample_at.first().is_some_and(|u| *u == 0)
            || self.upsample_at.last().is_some_and(|u| *u >= self.total_iterations())
        {
            return bad("upsample iterations must lie in 1..total");
        }
        if !(self.lr_factors > 0.0) || !(self.lr_pose >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning-rate decay must lie in (0, 1]");
        }
        if self.tau.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
            return bad("tau must be positive");
        }
        if self.n_samples == 0 || self.sparse_samples == 0 {
            return bad("sample counts must be positive");
        }
        if !(self.init_scale >= 0.0) || !(0.0..1.0).contains(&self.min_transmittance) {
            return bad("init scale or transmittance cutoff out of range");
        }
        Ok(())
    }

    /// Learning-rate multiplier at iteration `i`.
    pub fn lr_scale(&self, i: u32) -> f64 {
        let total = self.total_iterations().max(1) as f64;
        libm::pow(self.lr_decay, (i.saturating_sub(1) as f64 / total).min(1.0))
    }

    /// Voxel budget of refinement stage `k` (0 is the initial grid).
    pub fn stage_voxels(&self, k: usize) -> f64 {
        let n = self.upsample_at.len();
        if n == 0 {
            return self.start_voxels;
        }
        let t = k.min(n) as f64 / n as f64;
        self.start_voxels * libm::pow(self.end_voxels / self.start_voxels, t)
    }
}

/// Per-frame pose deltas: `θ = θ_ref ∘ θ_data`, bone rotations composed on
/// the left and the root translation added.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRefinement {
    pub rotations: Vec<Vec<DQuat>>,
    pub translations: Vec<DVec3>,
}

impl PoseRefinement {
    pub fn identity(frames: usize, bones: usize) -> Self {
        Self { rotations: vec![vec![DQuat::IDENTITY; bones]; frames], translations: vec![DVec3::ZERO; frames] }
    }

    pub fn is_identity(&self) -> bool {
        self.rotations.iter().flatten().all(|q| *q == DQuat::IDENTITY) && self.translations.iter().all(|t| *t == DVec3::ZERO)
    }

    /// Refined joint rotations and root translation of frame `f`.
    pub fn compose(&self, f: usize, pose: &Pose) -> (Vec<DQuat>, DVec3) {
        let q = self.rotations[f].iter().enumerate().map(|(b, r)| *r * pose.rotation(b)).collect();
        (q, pose.translation() + self.translations[f])
    }

    pub fn refined_pose(&self, f: usize, pose: &Pose) -> Pose {
        pose.refined(&self.rotations[f], self.translations[f])
    }
}

/// Weighted loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: u32,
    pub schedule: Schedule,
    pub l_rgb: f64,
    pub l_sparse: f64,
    /// `None` under the null perceptual hook.
    pub l_perceptual: Option<f64>,
    pub total: f64,
}

/// Perceptual term over one patch. Returns `None` when the hook is inactive;
/// otherwise the loss, with its gradient w.r.t. the rendered pixels written
/// to `d_rendered`.
pub trait PerceptualLoss {
    fn eval(&self, rendered: &[[f64; 3]], target: &[[f64; 3]], size: u32, d_rendered: &mut [[f64; 3]]) -> Option<f64>;
}

/// Contributes nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullPerceptual;

impl PerceptualLoss for NullPerceptual {
    fn eval(&self, _: &[[f64; 3]], _: &[[f64; 3]], _: u32, _: &mut [[f64; 3]]) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub frame: usize,
    pub x0: u32,
    pub y0: u32,
    pub size: u32,
}

impl Patch {
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.size).flat_map(move |j| (0..self.size).map(move |i| (self.x0 + i, self.y0 + j)))
    }
}

/// Patches of one step plus the seed of all its other randomness (ray
/// jitter, sparsity entries), so a batch can be re-evaluated exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub patches: Vec<Patch>,
    pub seed: u64,
}

/// Start of a `size`-wide window centered at `c`, shifted to fit in `0..len`.
pub fn window_start(c: u32, size: u32, len: u32) -> u32 {
    c.saturating_sub(size / 2).min(len.saturating_sub(size))
}

/// Draws `count` patches, each from a uniformly chosen frame and centered on
/// a uniformly chosen foreground pixel of that frame.
pub fn sample_batch<R: Rng + ?Sized>(data: &Dataset, count: usize, size: u32, rng: &mut R) -> Batch {
    let size = size.min(data.width).min(data.height);
    let patches = (0..count)
        .map(|_| {
            let frame = rng.gen_range(0..data.frames.len());
            let fg = data.foreground(frame);
            let p = fg[rng.gen_range(0..fg.len())];
            let (cx, cy) = (p % data.width, p / data.width);
            Patch {
                frame,
                x0: window_start(cx, size, data.width),
                y0: window_start(cy, size, data.height),
                size,
            }
        })
        .collect();
    Batch { patches, seed: rng.gen() }
}

/// Mean over pixels of the squared RGB error.
pub fn loss_rgb(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    assert_eq!(rendered.len(), target.len(), "pixel counts differ");
    if rendered.is_empty() {
        return 0.0;
    }
    let sum: f64 = rendered
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>())
        .sum();
    sum / rendered.len() as f64
}

const SPARSE_PAIRS: [(Factor, Factor); 3] =
    [(Factor::PlaneYx, Factor::LineZ), (Factor::PlaneYz, Factor::LineX), (Factor::PlaneXz, Factor::LineY)];

/// Texel-major offsets of the plane and line entries for pair `k` at
/// channel `r`, node `(x, y, z)`.
fn pair_offsets(k: usize, dims: GridDims, rank: usize, r: usize, x: usize, y: usize, z: usize) -> (usize, usize) {
    let (plane, line) = match k {
        0 => (y * dims.w + x, z),
        1 => (y * dims.d + z, x),
        _ => (x * dims.d + z, y),
    };
    (plane * rank + r, line * rank + r)
}

/// Unbiased estimate of `Σ_pairs mean_{r,x,y,z} (P·l)⁺` from `m` uniform
/// entries per pair. With `grad`, adds `weight` times its gradient.
pub fn sparse_term<R: Rng + ?Sized>(
    group: &FactorGroup,
    rng: &mut R,
    m: usize,
    weight: f64,
    mut grad: Option<&mut crate::field::Factors<f64>>,
) -> f64 {
    let (dims, rank) = (group.dims(), group.rank());
    let scale = 1.0 / m as f64;
    let mut total = 0.0;
    for (k, (pf, lf)) in SPARSE_PAIRS.iter().enumerate() {
        let (planes, lines) = (group.factors().get(*pf), group.factors().get(*lf));
        let mut sum = 0.0;
        for _ in 0..m {
            let r = rng.gen_range(0..rank);
            let (x, y, z) = (rng.gen_range(0..dims.w), rng.gen_range(0..dims.h), rng.gen_range(0..dims.d));
            let (pi, li) = pair_offsets(k, dims, rank, r, x, y, z);
            let (p, l) = (planes[pi] as f64, lines[li] as f64);
            if p * l > 0.0 {
                sum += p * l;
                if let Some(g) = grad.as_deref_mut() {
                    g.get_mut(*pf)[pi] += weight * scale * l;
                    g.get_mut(*lf)[li] += weight * scale * p;
                }
            }
        }
        total += sum * scale;
    }
    total
}

/// Stochastic sparsity loss of the density group.
pub fn loss_sparse<R: Rng + ?Sized>(field: &FactorizedField, rng: &mut R, m: usize) -> f64 {
    sparse_term(field.density(), rng, m, 0.0, None)
}

/// The full sum the estimator targets, by enumeration.
pub fn loss_sparse_exact(group: &FactorGroup) -> f64 {
    let (dims, rank) = (group.dims(), group.rank());
    let n = (rank * dims.voxels()) as f64;
    let mut total = 0.0;
    for (k, (pf, lf)) in SPARSE_PAIRS.iter().enumerate() {
        let (planes, lines) = (group.factors().get(*pf), group.factors().get(*lf));
        for r in 0..rank {
            for z in 0..dims.d {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        let (pi, li) = pair_offsets(k, dims, rank, r, x, y, z);
                        total += (planes[pi] as f64 * lines[li] as f64).max(0.0);
                    }
                }
            }
        }
    }
    total / n
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.99;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Advances the moments by `grads` and hands each parameter's update to
    /// `apply(index, delta)`.
    pub fn step(&mut self, grads: &[f64], mut apply: impl FnMut(usize, f64)) {
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - libm::pow(Self::BETA1, self.t as f64);
        let c2 = 1.0 - libm::pow(Self::BETA2, self.t as f64);
        for (i, g) in grads.iter().enumerate() {
            let m = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            let v = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            apply(i, -self.lr * (m / c1) / (libm::sqrt(v / c2) + Self::EPS));
        }
    }
}

/// One Adam per field tensor, group-major in [`Factor::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
struct FieldOptimizer(Vec<Adam>);

impl FieldOptimizer {
    fn new(field: &FactorizedField, lr: f64) -> Self {
        Self(field.groups().iter().flat_map(|g| g.factors().iter().map(|(_, t)| Adam::new(t.len(), lr))).collect())
    }

    fn set_lr(&mut self, lr: f64) {
        self.0.iter_mut().for_each(|a| a.lr = lr);
    }

    fn step(&mut self, field: &mut FactorizedField, grads: &FieldGradients) {
        let mut opt = self.0.iter_mut();
        for (group, g) in field.groups_mut().into_iter().zip(grads.groups()) {
            for ((_, params), (_, gt)) in group.factors_mut().iter_mut().zip(g.iter()) {
                opt.next().expect("one optimizer per tensor").step(gt, |i, d| params[i] = (params[i] as f64 + d) as f32);
            }
        }
    }
}

/// Tangent-space Adam per frame: `3·B` rotation coordinates then the root
/// translation. Rotations are retracted with `q ← exp(δ)·q`.
#[derive(Debug, Clone, PartialEq)]
struct PoseOptimizer(Vec<Adam>);

impl PoseOptimizer {
    fn new(frames: usize, bones: usize, lr: f64) -> Self {
        Self((0..frames).map(|_| Adam::new(3 * bones + 3, lr)).collect())
    }

    fn set_lr(&mut self, lr: f64) {
        self.0.iter_mut().for_each(|a| a.lr = lr);
    }

    fn step(&mut self, f: usize, refine: &mut PoseRefinement, rot: &[DVec3], trans: DVec3) {
        let bones = rot.len();
        let mut g: Vec<f64> = rot.iter().flat_map(|v| v.to_array()).collect();
        g.extend(trans.to_array());
        let mut delta = vec![0.0; g.len()];
        self.0[f].step(&g, |i, d| delta[i] = d);
        for b in 0..bones {
            let d = DVec3::new(delta[3 * b], delta[3 * b + 1], delta[3 * b + 2]);
            let q = &mut refine.rotations[f][b];
            *q = (DQuat::from_scaled_axis(d) * *q).normalize();
        }
        refine.translations[f] += DVec3::new(delta[3 * bones], delta[3 * bones + 1], delta[3 * bones + 2]);
    }
}

/// One recorded sample, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
struct Sample {
    p: GridPoint,
    xbar: DVec3,
    vertex: u32,
    sigma: f64,
    rgb: [f64; 3],
}

/// A batch ray: its sample span, the frame slot, and the step length.
#[derive(Debug, Clone, Copy)]
struct TracedRay {
    start: usize,
    end: usize,
    slot: usize,
    step: f64,
}

/// Scratch buffers reused across steps.
#[derive(Debug, Default)]
struct Scratch {
    samples: Vec<Sample>,
    rays: Vec<TracedRay>,
    rendered: Vec<[f64; 3]>,
    target: Vec<[f64; 3]>,
    d_pixel: Vec<[f64; 3]>,
    sigmas: Vec<f64>,
    colors: Vec<[f64; 3]>,
    d_sigma: Vec<f64>,
    d_colors: Vec<[f64; 3]>,
}

/// Posed geometry of one frame in the batch.
struct FrameSlot {
    frame: usize,
    rotations: Vec<DQuat>,
    translation: DVec3,
    scene: PosedScene,
}

/// Per-step summary handed to the observer of [`fit_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: u32,
    pub mean_rgb: f64,
    pub mean_total: f64,
    pub dims: GridDims,
}

pub enum FitEvent<'a> {
    Step(&'a LossReport),
    Upsampled { iteration: u32, dims: GridDims },
    Epoch { summary: &'a EpochSummary, trainer: &'a Trainer },
}

/// Training state: the field, the pose deltas and their optimizers.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub field: FactorizedField,
    pub refinement: PoseRefinement,
    pub render: RenderConfig,
    pub grads: FieldGradients,
    /// Rotation and translation gradients of the frames in the last batch.
    pub pose_grads: Vec<(usize, Vec<DVec3>, DVec3)>,
    perceptual: Box<dyn PerceptualLoss>,
    field_opt: FieldOptimizer,
    pose_opt: PoseOptimizer,
    stage: usize,
    scratch: Scratch,
    /// Ray bounds per frame, fixed at the data pose so that small pose
    /// deltas do not move the samples.
    frame_boxes: Vec<BoundingBox>,
}

impl Trainer {
    /// Random field over the dilated template box with the softplus gain set
    /// to the reciprocal nominal step.
    pub fn new(data: &Dataset, cfg: TrainConfig) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::with_rng(data, cfg, &mut rng)
    }

    fn with_rng(data: &Dataset, cfg: TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        cfg.validate()?;
        let body = data.template_bounds();
        let tau = cfg.tau.unwrap_or(0.1 * body.diagonal());
        let bbox = body.dilate(tau);
        let render = RenderConfig { n_samples: cfg.n_samples, background: cfg.background, tau };
        let gain = (1.0 / render.nominal_step(&bbox)) as f32;
        let dims = GridDims::for_budget(&bbox, cfg.stage_voxels(0))?;
        let field = FactorizedField::random(dims, bbox, cfg.rank_density, cfg.rank_color, gain, cfg.init_scale, rng)?;
        let (frames, bones) = (data.frames.len(), data.skeleton.bone_count());
        let frame_boxes = data
            .frames
            .iter()
            .map(|f| PosedScene::new(&data.template, &data.skeleton, &f.pose, tau).bbox.dilate(0.5 * tau))
            .collect();
        Ok(Self {
            frame_boxes,
            grads: FieldGradients::for_field(&field),
            field_opt: FieldOptimizer::new(&field, cfg.lr_factors),
            pose_opt: PoseOptimizer::new(frames, bones, cfg.lr_pose),
            refinement: PoseRefinement::identity(frames, bones),
            pose_grads: Vec::new(),
            perceptual: Box::new(NullPerceptual),
            stage: 0,
            scratch: Scratch::default(),
            render,
            field,
            cfg,
        })
    }

    pub fn set_perceptual(&mut self, hook: Box<dyn PerceptualLoss>) {
        self.perceptual = hook;
    }

    fn pose_enabled(&self) -> bool {
        self.cfg.lr_pose > 0.0
    }

    /// Posed scene of frame `f` under the current refinement.
    pub fn posed_scene(&self, data: &Dataset, f: usize) -> PosedScene {
        let (q, t) = self.refinement.compose(f, &data.frames[f].pose);
        PosedScene::from_affines(&data.template, data.skeleton.affines_from(&q, t), self.render.tau)
    }

    /// Full raymarch of a training frame with its refined pose.
    pub fn render_frame(&self, data: &Dataset, f: usize) -> RenderOutput {
        render_deformed_image(&self.field, &self.posed_scene(data, f), &data.frames[f].camera, &self.render)
    }

    /// Full raymarch of an arbitrary pose and camera.
    pub fn render_pose(&self, data: &Dataset, pose: &Pose, camera: &Camera) -> RenderOutput {
        let scene = PosedScene::new(&data.template, &data.skeleton, pose, self.render.tau);
        render_deformed_image(&self.field, &scene, camera, &self.render)
    }

    /// Loss of `batch` at iteration `i` without touching any state.
    pub fn loss(&mut self, data: &Dataset, batch: &Batch, i: u32) -> Result<LossReport, TrainError> {
        self.evaluate(data, batch, i, false)
    }

    /// Loss plus gradients in [`grads`](Self::grads) and
    /// [`pose_grads`](Self::pose_grads).
    pub fn loss_and_gradients(&mut self, data: &Dataset, batch: &Batch, i: u32) -> Result<LossReport, TrainError> {
        self.evaluate(data, batch, i, true)
    }

    /// Gradient evaluation followed by one optimizer update.
    pub fn train_step(&mut self, data: &Dataset, batch: &Batch, i: u32) -> Result<LossReport, TrainError> {
        let report = self.evaluate(data, batch, i, true)?;
        let scale = self.cfg.lr_scale(i);
        self.field_opt.set_lr(self.cfg.lr_factors * scale);
        self.pose_opt.set_lr(self.cfg.lr_pose * scale);
        self.field_opt.step(&mut self.field, &self.grads);
        if self.pose_enabled() {
            for (f, rot, trans) in &self.pose_grads {
                self.pose_opt.step(*f, &mut self.refinement, rot, *trans);
            }
        }
        Ok(report)
    }

    /// Moves to the next voxel budget, interpolating the factors, and resets
    /// the field optimizer.
    pub fn upsample(&mut self) -> Result<GridDims, TrainError> {
        self.stage += 1;
        let dims = GridDims::for_budget(self.field.bbox(), self.cfg.stage_voxels(self.stage))?;
        let dims = GridDims::new(dims.d.max(self.field.dims().d), dims.h.max(self.field.dims().h), dims.w.max(self.field.dims().w))?;
        self.field = self.field.upsample(dims)?;
        self.grads = FieldGradients::for_field(&self.field);
        self.field_opt = FieldOptimizer::new(&self.field, self.cfg.lr_factors);
        Ok(dims)
    }

    fn trace(&mut self, slot: usize, scene: &PosedScene, ray: &Ray, rng: Option<&mut ChaCha8Rng>) -> [f64; 3] {
        let bg = self.render.background;
        let start = self.scratch.samples.len();
        let Some((t0, t1)) = ray_box(ray, &scene.bbox) else {
            self.scratch.rays.push(TracedRay { start, end: start, slot, step: 0.0 });
            return bg;
        };
        let n = self.render.n_samples;
        let step = (t1 - t0) / n as f64;
        let mut rng = rng;
        let mut trans = 1.0;
        let mut color = [0.0; 3];
        for k in 0..n {
            let u = match rng.as_deref_mut() {
                Some(r) => r.gen::<f64>(),
                None => 0.5,
            };
            if trans < self.cfg.min_transmittance {
                continue;
            }
            let x = ray.at(t0 + (k as f64 + u) * step);
            let Some(w) = inverse_warp(x, &scene.posed, &scene.index, scene.tau) else { continue };
            let Some(p) = self.field.grid_point(w.canonical) else { continue };
            let s = self.field.sample_at(&p);
            if !(s.sigma > 0.0) {
                if s.sigma.is_nan() {
                    color = [f64::NAN; 3];
                }
                continue;
            }
            let next = trans * libm::exp(-step * s.sigma);
            for c in 0..3 {
                color[c] += (trans - next) * s.rgb[c];
            }
            trans = next;
            self.scratch.samples.push(Sample { p, xbar: w.canonical, vertex: w.vertex as u32, sigma: s.sigma, rgb: s.rgb });
        }
        self.scratch.rays.push(TracedRay { start, end: self.scratch.samples.len(), slot, step });
        [0, 1, 2].map(|c| color[c] + trans * bg[c])
    }

    fn evaluate(&mut self, data: &Dataset, batch: &Batch, i: u32, with_grads: bool) -> Result<LossReport, TrainError> {
        let sched = schedules(i.min(SCHEDULE_END))?;
        let pose_on = with_grads && self.pose_enabled();
        let mut slots: Vec<FrameSlot> = Vec::new();
        for p in &batch.patches {
            if !slots.iter().any(|s| s.frame == p.frame) {
                let (rotations, translation) = self.refinement.compose(p.frame, &data.frames[p.frame].pose);
                let affines = data.skeleton.affines_from(&rotations, translation);
                let mut scene = PosedScene::from_affines(&data.template, affines, self.render.tau);
                scene.bbox = self.frame_boxes[p.frame];
                slots.push(FrameSlot { frame: p.frame, rotations, translation, scene });
            }
        }

        self.scratch.samples.clear();
        self.scratch.rays.clear();
        self.scratch.rendered.clear();
        self.scratch.target.clear();
        let mut jitter = self.cfg.jitter.then(|| ChaCha8Rng::seed_from_u64(batch.seed));
        for p in &batch.patches {
            let slot = slots.iter().position(|s| s.frame == p.frame).expect("slot exists");
            let cam = &data.frames[p.frame].camera;
            for (x, y) in p.pixels() {
                let ray = cam.pixel_ray(x, y);
                let c = self.trace(slot, &slots[slot].scene, &ray, jitter.as_mut());
                self.scratch.rendered.push(c);
                let t = data.target(p.frame, (y * data.width + x) as usize, self.render.background);
                self.scratch.target.push(t);
            }
        }

        let s = &mut self.scratch;
        let n_px = s.rendered.len();
        let l_rgb = loss_rgb(&s.rendered, &s.target);
        s.d_pixel.clear();
        s.d_pixel.resize(n_px, [0.0; 3]);
        let mut l_perceptual = None;
        let mut offset = 0;
        for p in &batch.patches {
            let len = (p.size * p.size) as usize;
            let r = offset..offset + len;
            let mut d = vec![[0.0; 3]; len];
            if let Some(l) = self.perceptual.eval(&s.rendered[r.clone()], &s.target[r.clone()], p.size, &mut d) {
                *l_perceptual.get_or_insert(0.0) += l / batch.patches.len() as f64;
                for (dst, g) in s.d_pixel[r].iter_mut().zip(&d) {
                    for k in 0..3 {
                        dst[k] += sched.beta * g[k] / batch.patches.len() as f64;
                    }
                }
            }
            offset += len;
        }

        if with_grads {
            self.grads.reset();
        }
        let mut sparse_rng = ChaCha8Rng::seed_from_u64(batch.seed ^ 0x9e37_79b9_7f4a_7c15);
        let sparse_grad = (with_grads && sched.gamma > 0.0).then_some(&mut self.grads.density);
        let l_sparse = sparse_term(self.field.density(), &mut sparse_rng, self.cfg.sparse_samples, sched.gamma, sparse_grad);

        let total = sched.alpha * l_rgb + sched.beta * l_perceptual.unwrap_or(0.0) + sched.gamma * l_sparse;
        if !total.is_finite() {
            return Err(TrainError::NonFinite { iteration: i, l_rgb, l_sparse, l_perceptual });
        }
        let report = LossReport { iteration: i, schedule: sched, l_rgb, l_sparse, l_perceptual, total };
        if !with_grads {
            return Ok(report);
        }

        let mut affine_grads: Vec<Vec<AffineGrad>> =
            slots.iter().map(|_| vec![AffineGrad::ZERO; data.skeleton.bone_count()]).collect();
        let s = &mut self.scratch;
        let bg = self.render.background;
        for (ri, ray) in s.rays.iter().enumerate() {
            if ray.start == ray.end {
                continue;
            }
            let (c, t) = (s.rendered[ri], s.target[ri]);
            let d_color: [f64; 3] =
                [0, 1, 2].map(|k| sched.alpha * 2.0 * (c[k] - t[k]) / n_px as f64 + s.d_pixel[ri][k]);
            let samples = &s.samples[ray.start..ray.end];
            s.sigmas.clear();
            s.sigmas.extend(samples.iter().map(|x| x.sigma));
            s.colors.clear();
            s.colors.extend(samples.iter().map(|x| x.rgb));
            s.d_sigma.resize(samples.len(), 0.0);
            s.d_colors.resize(samples.len(), [0.0; 3]);
            composite_backward(&s.sigmas, &s.colors, ray.step, bg, d_color, &mut s.d_sigma, &mut s.d_colors);
            let scene = &slots[ray.slot].scene;
            for (k, smp) in samples.iter().enumerate() {
                let dx = self.field.backprop_at(&smp.p, s.d_sigma[k], s.d_colors[k], Some(&mut self.grads), pose_on);
                if pose_on && dx != DVec3::ZERO {
                    let v = smp.vertex as usize;
                    scene.posed.backprop_inverse(
                        v,
                        &data.template.weights[v],
                        smp.xbar,
                        dx,
                        &scene.affines,
                        &mut affine_grads[ray.slot],
                    );
                }
            }
        }
        self.pose_grads.clear();
        if pose_on {
            for (slot, ag) in slots.iter().zip(&affine_grads) {
                let (rot, trans) = data.skeleton.pose_gradient_from(&slot.rotations, slot.translation, &slot.scene.affines, ag);
                self.pose_grads.push((slot.frame, rot, trans));
            }
        }
        Ok(report)
    }
}

/// Result of a full fit.
pub struct FitOutput {
    pub trainer: Trainer,
    pub log: Vec<LossReport>,
    pub epochs: Vec<EpochSummary>,
}

impl FitOutput {
    pub fn field(&self) -> &FactorizedField {
        &self.trainer.field
    }

    pub fn refinement(&self) -> &PoseRefinement {
        &self.trainer.refinement
    }
}

pub fn fit(data: &Dataset, cfg: TrainConfig) -> Result<FitOutput, TrainError> {
    fit_with(data, cfg, |_| {})
}

/// Runs `epochs × iters_per_epoch` steps, refining the grid at the configured
/// iterations. All randomness derives from `cfg.seed`.
pub fn fit_with(data: &Dataset, cfg: TrainConfig, mut observe: impl FnMut(FitEvent<'_>)) -> Result<FitOutput, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::with_rng(data, cfg, &mut rng)?;
    let cfg = trainer.cfg.clone();
    let mut log = Vec::with_capacity(cfg.total_iterations() as usize);
    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    let mut i = 0;
    for epoch in 0..cfg.epochs {
        let (mut rgb, mut total) = (0.0, 0.0);
        for _ in 0..cfg.iters_per_epoch {
            i += 1;
            if cfg.upsample_at.contains(&i) {
                let dims = trainer.upsample()?;
                observe(FitEvent::Upsampled { iteration: i, dims });
            }
            let batch = sample_batch(data, cfg.patches, cfg.patch_size, &mut rng);
            let report = trainer.train_step(data, &batch, i)?;
            rgb += report.l_rgb;
            total += report.total;
            observe(FitEvent::Step(&report));
            log.push(report);
        }
        let n = cfg.iters_per_epoch.max(1) as f64;
        let summary = EpochSummary { epoch, mean_rgb: rgb / n, mean_total: total / n, dims: trainer.field.dims() };
        observe(FitEvent::Epoch { summary: &summary, trainer: &trainer });
        epochs.push(summary);
    }
    Ok(FitOutput { trainer, log, epochs })
}
