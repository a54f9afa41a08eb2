//! Library-level steps behind the commands: synthetic data, checkpoints,
//! mesh extraction and summaries.

use rayon::prelude::*;
use serde::Serialize;
use skinfield_core::extract::{extract_with, render_view_at_rest, ExtractConfig, ExtractError, TurntableView};
use skinfield_core::synth::{make_scene, render_ground_truth, SceneSpec, SynthError, SyntheticScene};
use skinfield_core::trainer::{Dataset, FitOutput, Frame, TrainConfig};

use crate::assets::{AssetContainer, RenderMeta};

/// Generates a scene and renders its training frames in parallel.
pub fn synth_dataset(spec: &SceneSpec, gt_samples: usize) -> Result<(SyntheticScene, Dataset), SynthError> {
    let scene = make_scene(spec)?;
    let frames = scene
        .poses
        .par_iter()
        .zip(&scene.cameras)
        .map(|(pose, cam)| {
            let gt = render_ground_truth(&scene, pose, cam, gt_samples);
            Frame { image: gt.render.color, mask: gt.mask, camera: *cam, pose: pose.clone() }
        })
        .collect();
    let data = Dataset::new(frames, scene.skeleton.clone(), scene.template.clone()).expect("synthetic frames are consistent");
    Ok((scene, data))
}

/// Resolves the automatic warp radius and rounds it to the stored precision
/// so training and the saved checkpoint use the same value.
pub fn pin_tau(cfg: &mut TrainConfig, data: &Dataset) {
    let tau = cfg.tau.unwrap_or(0.1 * data.template_bounds().diagonal());
    cfg.tau = Some(tau as f32 as f64);
}

/// Checkpoint of a fit: field, warp template, skeleton, refined per-frame
/// poses and render constants. No extracted mesh yet.
pub fn checkpoint(data: &Dataset, fit: &FitOutput) -> AssetContainer {
    let t = &fit.trainer;
    let animation = data.frames().iter().enumerate().map(|(f, fr)| t.refinement.refined_pose(f, &fr.pose)).collect();
    let tau = t.render.tau as f32;
    AssetContainer {
        field: t.field.clone(),
        tau,
        skeleton: data.skeleton().clone(),
        template: Some(data.template().clone()),
        mesh: None,
        animation,
        meta: RenderMeta::for_tau(t.render.n_samples, tau, t.render.background),
    }
}

/// Extracts the rigged surface of a checkpoint's field, rendering the
/// turntable views in parallel.
pub fn extract_mesh(asset: &AssetContainer, cfg: &ExtractConfig) -> Result<skinfield_core::extract::Extraction, ExtractError> {
    let template = asset.template.as_ref().or(asset.mesh.as_ref()).expect("checkpoint has a template");
    extract_with(&asset.field, template, cfg, |rig, scene| {
        rig.cameras.par_iter().map(|c| render_view_at_rest(&asset.field, scene, c, &cfg.render)).collect::<Vec<TurntableView>>()
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Info {
    pub dims: [usize; 3],
    pub rank_density: usize,
    pub rank_color: usize,
    pub param_count: usize,
    pub bbox_min: [f32; 3],
    pub bbox_max: [f32; 3],
    pub tau: f32,
    pub bones: usize,
    pub frames: usize,
    pub mesh_faces: Option<usize>,
    pub template_faces: Option<usize>,
    pub sections: Vec<&'static str>,
    pub meta: RenderMeta,
}

pub fn info(asset: &AssetContainer) -> Info {
    let f = &asset.field;
    let d = f.dims();
    let (rd, rc) = (f.density().rank(), f.color()[0].rank());
    Info {
        dims: [d.d, d.h, d.w],
        rank_density: rd,
        rank_color: rc,
        param_count: asset.param_count(),
        bbox_min: f.bbox().min_f32(),
        bbox_max: f.bbox().max_f32(),
        tau: asset.tau,
        bones: asset.skeleton.bone_count(),
        frames: asset.animation.len(),
        mesh_faces: asset.mesh.as_ref().map(|m| m.faces.len()),
        template_faces: asset.template.as_ref().map(|m| m.faces.len()),
        sections: asset.sections().iter().map(|t| t.name()).collect(),
        meta: asset.meta,
    }
}

impl Info {
    pub fn text(&self) -> String {
        let [d, h, w] = self.dims;
        let mut s = format!(
            "grid        D={d} H={h} W={w}\nranks       density {} color {}\nparam_count {}\nbbox        {:?} .. {:?}\ntau         {}\nbones       {}\nframes      {}\n",
            self.rank_density, self.rank_color, self.param_count, self.bbox_min, self.bbox_max, self.tau, self.bones, self.frames
        );
        if let Some(n) = self.mesh_faces {
            s.push_str(&format!("mesh        {n} faces\n"));
        }
        if let Some(n) = self.template_faces {
            s.push_str(&format!("template    {n} faces\n"));
        }
        s.push_str(&format!("sections    {}\n", self.sections.join(" ")));
        s.push_str(&format!(
            "render      n_samples {} n_local {} half_width {} background {:?}",
            self.meta.n_samples, self.meta.n_local, self.meta.half_width, self.meta.background
        ));
        s
    }
}
