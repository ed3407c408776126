use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::train;
use crate::error::{Error, Result};
use crate::model::SceneModel;
use crate::numerics::Tensor;
use crate::renderer::{all_pixels, psnr, refined_planes, render_pixels, ssim, Image};
use crate::scenegen::{generate_dataset, GenerateOptions, SceneDataset, SceneSpec};
use crate::Real;

/// View counts of the sweep.
pub const SWEEP_VIEWS: [usize; 4] = [3, 5, 10, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub index: usize,
    pub time: Real,
    /// `None` when the render matches the reference exactly.
    pub psnr: Option<Real>,
    pub ssim: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    /// Mean over the frames with a finite PSNR.
    pub mean_psnr: Option<Real>,
    pub mean_ssim: Real,
    /// Mean PSNR between renders of the same pose at consecutive times.
    pub temporal_stability: Option<Real>,
}

fn finite(v: Real) -> Option<Real> {
    v.is_finite().then_some(v)
}

fn mean(values: impl Iterator<Item = Real>) -> Option<Real> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as Real)
}

/// Scores `rendered[i]` against `data.frames[i].image`.
pub fn score_frames(rendered: &[Image], data: &SceneDataset) -> Result<EvalReport> {
    if rendered.len() != data.len() {
        return Err(Error::invalid(format!("{} renders for {} frames", rendered.len(), data.len())));
    }
    if data.is_empty() {
        return Err(Error::invalid("no frames to evaluate"));
    }
    let mut frames = Vec::with_capacity(data.len());
    for (i, (img, f)) in rendered.iter().zip(&data.frames).enumerate() {
        frames.push(FrameScore {
            index: i,
            time: f.time,
            psnr: finite(psnr(img, &f.image)?),
            ssim: ssim(img, &f.image)?,
        });
    }
    let mut by_pose: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut poses: Vec<[[Real; 4]; 4]> = Vec::new();
    for (i, f) in data.frames.iter().enumerate() {
        let k = match poses.iter().position(|p| *p == f.camera.c2w) {
            Some(k) => k,
            None => {
                poses.push(f.camera.c2w);
                poses.len() - 1
            }
        };
        by_pose.entry(k).or_default().push(i);
    }
    let mut stability = Vec::new();
    for idx in by_pose.values_mut() {
        idx.sort_by(|&a, &b| data.frames[a].time.total_cmp(&data.frames[b].time));
        for w in idx.windows(2) {
            if let Some(p) = finite(psnr(&rendered[w[0]], &rendered[w[1]])?) {
                stability.push(p);
            }
        }
    }
    Ok(EvalReport {
        mean_psnr: mean(frames.iter().filter_map(|f| f.psnr)),
        mean_ssim: mean(frames.iter().map(|f| f.ssim)).unwrap_or(0.0),
        temporal_stability: mean(stability.into_iter()),
        frames,
    })
}

/// Renders every frame of `data` the way `cfg` trains: with or without the
/// warp, from refined or stored planes.
pub fn render_frames(model: &SceneModel, cfg: &TrainConfig, data: &SceneDataset) -> Result<Vec<Image>> {
    let mut cache: Vec<(Real, Vec<Tensor>)> = Vec::new();
    let mut out = Vec::with_capacity(data.len());
    for f in &data.frames {
        let planes = if cfg.uses_refinement() {
            if !cache.iter().any(|(t, _)| *t == f.time) {
                cache.push((f.time, refined_planes(model, f.time)?));
            }
            cache.iter().find(|(t, _)| *t == f.time).map(|(_, p)| p.as_slice())
        } else {
            None
        };
        let cam = &f.camera;
        let (rgb, opacity) = render_pixels(
            model,
            cam,
            &all_pixels(cam),
            f.time,
            &cfg.render,
            !cfg.ablation.no_deformation,
            planes,
        )?;
        let mut img = Image::new(cam.width, cam.height, rgb)?;
        img.opacity = Some(opacity);
        out.push(img);
    }
    Ok(out)
}

pub fn evaluate(model: &SceneModel, cfg: &TrainConfig, data: &SceneDataset) -> Result<EvalReport> {
    let rendered = render_frames(model, cfg, data)?;
    score_frames(&rendered, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub views: usize,
    pub mean_psnr: Option<Real>,
    pub mean_ssim: Real,
}

/// Regenerates the scene with each view count under `work`, trains from
/// scratch with `cfg` and scores every run on the same held-out frames.
pub fn view_sweep(
    cfg: &TrainConfig,
    spec: &SceneSpec,
    gen: &GenerateOptions,
    test: &SceneDataset,
    work: &Path,
    views: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(views.len());
    for &n in views {
        let opts = GenerateOptions { views: n, ..gen.clone() };
        let data = generate_dataset(spec, &opts, &work.join(format!("views_{n}")), cfg.render.parallelism)?;
        let outcome = train(cfg, &data, None, None)?;
        let report = evaluate(&outcome.model, cfg, test)?;
        rows.push(SweepRow {
            views: n,
            mean_psnr: report.mean_psnr,
            mean_ssim: report.mean_ssim,
        });
    }
    Ok(rows)
}
