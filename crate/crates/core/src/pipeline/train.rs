use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::adam::{Adam, AdamConfig};
use super::config::TrainConfig;
use super::loss::{lower_reconstruction_loss, total_loss, LossParts};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::latentdiff::{diffusion_loss, lower_scaled_alpha_bar, plane_stats, temporal_loss, PREFIX};
use crate::model::SceneModel;
use crate::numerics::rng::{derived, seeded, SceneRng};
use crate::numerics::{accumulate, Graph, HasParams, NamedGrads, Tensor, Var};
use crate::parallel;
use crate::renderer::{generate_rays, lower_rays, lower_refinement, Camera, Frame, Refinement};
use crate::scenegen::SceneDataset;
use crate::Real;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const PRETRAIN_CHECKPOINT_FILE: &str = "pretrain.ckpt";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain_metrics.json";

/// Parameters updated during pretraining.
pub const PRETRAIN_PREFIXES: [&str; 2] = ["latentdiff.denoiser", "latentdiff.schedule"];

const STEP_STREAM: u64 = 0x7472_6169_6e00_0000;
const PRETRAIN_STREAM: u64 = 0x7072_6574_7200_0000;
const HELD_OUT_STREAM: u64 = 0x6865_6c64;
const HELD_OUT_DRAWS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub rec: Real,
    pub diff: Real,
    pub temporal: Real,
    pub total: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub steps: usize,
    pub records: Vec<StepRecord>,
    pub deformation_checksum_before: u64,
    pub deformation_checksum_after: u64,
    /// Optimizer updates applied to each parameter.
    pub updates: BTreeMap<String, u64>,
}

/// The distinct training cameras, stored with a checkpoint so poses can be
/// addressed by index later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSet {
    pub fov_x: Real,
    pub width: usize,
    pub height: usize,
    pub poses: Vec<[[Real; 4]; 4]>,
}

impl PoseSet {
    pub fn from_dataset(data: &SceneDataset) -> Self {
        let mut poses: Vec<[[Real; 4]; 4]> = Vec::new();
        for f in &data.frames {
            if !poses.contains(&f.camera.c2w) {
                poses.push(f.camera.c2w);
            }
        }
        Self {
            fov_x: data.fov_x,
            width: data.width,
            height: data.height,
            poses,
        }
    }

    pub fn camera(&self, index: usize) -> Result<Camera> {
        let c2w = self
            .poses
            .get(index)
            .ok_or_else(|| Error::invalid(format!("pose {index} out of range (0..{})", self.poses.len())))?;
        Camera::new(self.width, self.height, self.fov_x, *c2w)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SceneModel,
    pub metrics: TrainMetrics,
    pub checkpoint: Checkpoint,
}

/// Metadata stored with every checkpoint; it holds no paths or clocks.
pub fn checkpoint_metadata(kind: &str, step: usize, cfg: &TrainConfig, data: &SceneDataset) -> Result<serde_json::Value> {
    Ok(json!({
        "kind": kind,
        "step": step,
        "config": serde_json::to_value(cfg.portable())?,
        "poses": serde_json::to_value(PoseSet::from_dataset(data))?,
    }))
}

/// Rebuilds the model and training config stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(SceneModel, TrainConfig)> {
    let cfg_value = ckpt
        .metadata
        .get("config")
        .ok_or_else(|| Error::Checkpoint("metadata has no config".into()))?;
    let cfg: TrainConfig = serde_json::from_value(cfg_value.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut model = SceneModel::new(&cfg.model, cfg.seed)?;
    ckpt.apply(&mut model)?;
    Ok((model, cfg))
}

pub fn checkpoint_poses(ckpt: &Checkpoint) -> Result<PoseSet> {
    let v = ckpt
        .metadata
        .get("poses")
        .ok_or_else(|| Error::Checkpoint("metadata has no poses".into()))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("poses: {e}")))
}

fn initial_model(cfg: &TrainConfig, init: Option<&Checkpoint>) -> Result<SceneModel> {
    let mut model = SceneModel::new(&cfg.model, cfg.seed)?;
    if let Some(c) = init {
        c.apply(&mut model)?;
    }
    Ok(model)
}

fn check_dataset(data: &SceneDataset) -> Result<Vec<Real>> {
    if data.is_empty() {
        return Err(Error::invalid("dataset has no frames"));
    }
    Ok(data.times())
}

struct Pick {
    frame: usize,
    slot: usize,
    seed: u64,
}

/// Two consecutive times, an even share of the batch's views at each.
fn plan_batch(batch: usize, data: &SceneDataset, times: &[Real], rng: &mut SceneRng) -> (Vec<Real>, Vec<Pick>) {
    let slots = if times.len() >= 2 {
        let j = rng.random_range(0..times.len() - 1);
        vec![times[j], times[j + 1]]
    } else {
        vec![times[0]]
    };
    let per = (batch / slots.len()).max(1);
    let mut picks = Vec::with_capacity(per * slots.len());
    for (slot, &t) in slots.iter().enumerate() {
        let candidates = data.frames_at(t);
        let k = per.min(candidates.len());
        for i in sample(rng, candidates.len(), k) {
            picks.push(Pick {
                frame: candidates[i],
                slot,
                seed: rng.random(),
            });
        }
    }
    (slots, picks)
}

struct LatentTerms {
    refinement: Refinement,
    diff: Var,
    temporal: Var,
    objective: Var,
}

fn lower_latent_terms(g: &mut Graph, model: &SceneModel, cfg: &TrainConfig, slots: &[Real], rng: &mut SceneRng) -> Result<LatentTerms> {
    let refinement = lower_refinement(g, model, slots, cfg.uses_refinement())?;
    let z = &refinement.latents;
    let temporal = if z.len() >= 2 {
        temporal_loss(g, z[0], z[1])?
    } else {
        g.constant(Tensor::scalar(0.0))?
    };
    let d = model.latent.cfg.latent_dim;
    let detached: Vec<Real> = z.iter().flat_map(|&v| g.value(v).data().to_vec()).collect();
    let z0 = g.constant(Tensor::new(vec![z.len(), d], detached)?)?;
    let diff = diffusion_loss(g, &model.latent.denoiser, z0, refinement.alpha_bar, rng)?;
    let a = g.tape.scale(diff, cfg.weights.lambda_diff)?;
    let b = g.tape.scale(temporal, cfg.weights.lambda_temporal)?;
    let objective = g.tape.add(a, b)?;
    Ok(LatentTerms {
        refinement,
        diff,
        temporal,
        objective,
    })
}

fn first_non_finite(grads: &NamedGrads) -> Option<&str> {
    grads.iter().find(|(_, g)| !g.iter().all(|v| v.is_finite())).map(|(n, _)| n.as_str())
}

/// Loss parts and gradients of one optimizer step.
fn step_gradients(model: &SceneModel, cfg: &TrainConfig, data: &SceneDataset, times: &[Real], step: usize) -> Result<(LossParts, NamedGrads)> {
    let mut rng = derived(cfg.seed, STEP_STREAM + step as u64);
    let (slots, picks) = plan_batch(cfg.batch_size, data, times, &mut rng);
    let refine = cfg.uses_refinement();
    let mut lg = Graph::new();
    let latent = if cfg.ablation.no_diffusion {
        None
    } else {
        Some(lower_latent_terms(&mut lg, model, cfg, &slots, &mut rng)?)
    };
    let refined: Option<Vec<Vec<Tensor>>> = latent.as_ref().filter(|_| refine).map(|l| {
        l.refinement
            .refined
            .iter()
            .map(|set| set.iter().map(|&v| lg.value(v).clone()).collect())
            .collect()
    });
    let n = picks.len();
    let results = parallel::map(cfg.render.parallelism, &picks, |pick| -> Result<(Real, NamedGrads)> {
        let f = &data.frames[pick.frame];
        let mut prng = seeded(pick.seed);
        let (w, h) = (f.camera.width, f.camera.height);
        let pixels: Vec<(usize, usize)> = (0..cfg.rays_per_frame)
            .map(|_| (prng.random_range(0..w), prng.random_range(0..h)))
            .collect();
        let rays = generate_rays(&f.camera, &pixels)?;
        let target: Vec<Real> = pixels.iter().flat_map(|&(c, r)| f.image.pixel(c, r)).collect();
        let frame = Frame {
            model,
            t: f.time,
            deform: !cfg.ablation.no_deformation,
            planes: refined.as_ref().map(|r| r[pick.slot].as_slice()),
        };
        let mut g = Graph::new();
        let out = lower_rays(&mut g, &frame, &rays, &cfg.render, cfg.stratified.then_some(&mut prng))?;
        let loss = lower_reconstruction_loss(&mut g, out.rgb, &target, 1.0 / n as Real)?;
        let value = g.value(loss).item()?;
        Ok((value, g.backward(loss)?))
    });
    let names = model.plane_names();
    let mut seeds: Vec<Vec<Option<Vec<Real>>>> = vec![vec![None; names.len()]; slots.len()];
    let mut grads = NamedGrads::new();
    let mut parts = LossParts::default();
    for (pick, r) in picks.iter().zip(results) {
        let (value, mut fg) = r?;
        parts.rec += value;
        if refined.is_some() {
            for (k, name) in names.iter().enumerate() {
                if let Some(g) = fg.remove(name) {
                    match &mut seeds[pick.slot][k] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        accumulate(&mut grads, fg);
    }
    if let Some(l) = &latent {
        let mut list = vec![(l.objective, vec![1.0])];
        if refined.is_some() {
            for (slot, per_plane) in seeds.into_iter().enumerate() {
                for (k, s) in per_plane.into_iter().enumerate() {
                    if let Some(s) = s {
                        list.push((l.refinement.refined[slot][k], s));
                    }
                }
            }
        }
        accumulate(&mut grads, lg.backward_seeded(&list)?);
        parts.diff = lg.value(l.diff).item()?;
        parts.temporal = lg.value(l.temporal).item()?;
    }
    Ok((parts, grads))
}

fn diverged(step: usize, what: impl Into<String>) -> Error {
    Error::Diverged { step, what: what.into() }
}

/// Joint optimization of every trainable parameter. On divergence the last
/// good snapshot is written to `out` (when given) before the error returns.
pub fn train(cfg: &TrainConfig, data: &SceneDataset, init: Option<&Checkpoint>, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let times = check_dataset(data)?;
    let mut model = initial_model(cfg, init)?;
    let before = model.head.checksum();
    let plane_names = model.plane_names();
    let mut adam = Adam::new(AdamConfig::default());
    let mut records = Vec::new();
    let mut last_good = (0, model.clone());
    for step in 0..cfg.steps {
        let outcome = step_gradients(&model, cfg, data, &times, step).and_then(|(parts, grads)| {
            let total = total_loss(&parts, &cfg.weights, cfg.ablation.no_diffusion).map_err(|e| diverged(step, e.to_string()))?;
            if let Some(name) = first_non_finite(&grads) {
                return Err(diverged(step, format!("non-finite gradient for {name}")));
            }
            Ok((parts, total, grads))
        });
        let (parts, total, grads) = match outcome {
            Ok(v) => v,
            Err(e) => {
                let e = if e.is_numerical() { e } else { return Err(e) };
                let e = match e {
                    Error::NonFinite { op } => diverged(step, format!("{op} produced a non-finite value")),
                    other => other,
                };
                if let Some(dir) = out {
                    let meta = checkpoint_metadata("last_good", last_good.0, cfg, data)?;
                    Checkpoint::from_model(&last_good.1, meta).save(&dir.join(LAST_GOOD_FILE))?;
                }
                return Err(e);
            }
        };
        if step % cfg.metric_every == 0 || step + 1 == cfg.steps {
            records.push(StepRecord {
                step,
                rec: parts.rec,
                diff: parts.diff,
                temporal: parts.temporal,
                total,
            });
            last_good = (step, model.clone());
        }
        let decay = cfg.lr_decay(step, cfg.steps);
        adam.step(&mut model, &grads, |name| decay * cfg.learning_rate(name, &plane_names))?;
    }
    let metrics = TrainMetrics {
        steps: cfg.steps,
        records,
        deformation_checksum_before: before,
        deformation_checksum_after: model.head.checksum(),
        updates: adam.census(),
    };
    let checkpoint = Checkpoint::from_model(&model, checkpoint_metadata("train", cfg.steps, cfg, data)?);
    Ok(TrainOutcome {
        model,
        metrics,
        checkpoint,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: Real,
    pub held_out: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub steps: usize,
    pub held_out_time: Real,
    pub held_out_initial: Real,
    pub held_out_final: Real,
    pub records: Vec<PretrainRecord>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: SceneModel,
    pub metrics: PretrainMetrics,
    pub checkpoint: Checkpoint,
}

pub fn is_pretrained(name: &str) -> bool {
    PRETRAIN_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Latents of the stored planes at each time.
fn encode_all(model: &SceneModel, times: &[Real]) -> Result<Vec<Vec<Real>>> {
    let mut g = Graph::inference();
    let planes: Vec<Var> = model.planes().into_iter().map(|p| g.bind(p)).collect::<Result<_>>()?;
    let z = model.latent.encode_times(&mut g, &planes, times)?;
    Ok(z.into_iter().map(|v| g.value(v).data().to_vec()).collect())
}

fn pretrain_loss(g: &mut Graph, model: &SceneModel, stats: &[Real], z0: Vec<Real>, rows: usize, rng: &mut SceneRng) -> Result<Var> {
    let sv = g.constant(Tensor::new(vec![1, stats.len()], stats.to_vec())?)?;
    let m = model.latent.scale.lower(g, sv)?;
    let abar = lower_scaled_alpha_bar(g, &model.latent.schedule, m)?;
    let d = model.latent.cfg.latent_dim;
    let z = g.constant(Tensor::new(vec![rows, d], z0)?)?;
    diffusion_loss(g, &model.latent.denoiser, z, abar, rng)
}

/// Mean of the diffusion loss on the held-out latent over a fixed set of
/// steps and noise draws.
fn held_out_loss(model: &SceneModel, stats: &[Real], z: &[Real], seed: u64) -> Result<Real> {
    let mut rng = derived(seed, HELD_OUT_STREAM);
    let z0: Vec<Real> = (0..HELD_OUT_DRAWS).flat_map(|_| z.iter().copied()).collect();
    let mut g = Graph::inference();
    let loss = pretrain_loss(&mut g, model, stats, z0, HELD_OUT_DRAWS, &mut rng)?;
    g.value(loss).item()
}

/// Trains the denoiser and the noise-scale network with the diffusion loss
/// alone, on latents of the current planes at the dataset's times. The
/// middle time is held out and scored before and after.
pub fn pretrain(cfg: &TrainConfig, data: &SceneDataset, init: Option<&Checkpoint>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let times = check_dataset(data)?;
    let mut model = initial_model(cfg, init)?;
    let (held_time, train_times): (Real, Vec<Real>) = if times.len() >= 3 {
        let h = times.len() / 2;
        (times[h], times.iter().enumerate().filter(|&(i, _)| i != h).map(|(_, &t)| t).collect())
    } else {
        (times[0], times.clone())
    };
    let latents = encode_all(&model, &train_times)?;
    let held = encode_all(&model, &[held_time])?.remove(0);
    let values: Vec<&Tensor> = model.planes().into_iter().map(|p| &p.value).collect();
    let stats = plane_stats(&values)?;
    let initial = held_out_loss(&model, &stats, &held, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut records = Vec::new();
    let mut last = initial;
    for step in 0..cfg.pretrain_steps {
        let mut rng = derived(cfg.seed, PRETRAIN_STREAM + step as u64);
        let rows = cfg.batch_size;
        let z0: Vec<Real> = (0..rows)
            .flat_map(|_| latents[rng.random_range(0..latents.len())].iter().copied())
            .collect();
        let mut g = Graph::new();
        let loss = pretrain_loss(&mut g, &model, &stats, z0, rows, &mut rng)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(diverged(step, "diffusion loss is non-finite"));
        }
        let grads = g.backward(loss)?;
        if let Some(name) = first_non_finite(&grads) {
            return Err(diverged(step, format!("non-finite gradient for {name}")));
        }
        let lr = cfg.lr * cfg.lr_decay(step, cfg.pretrain_steps);
        adam.step(&mut model, &grads, |_| lr)?;
        if (step + 1) % cfg.metric_every == 0 || step + 1 == cfg.pretrain_steps {
            last = held_out_loss(&model, &stats, &held, cfg.seed)?;
            records.push(PretrainRecord {
                step: step + 1,
                loss: value,
                held_out: last,
            });
        }
    }
    let metrics = PretrainMetrics {
        steps: cfg.pretrain_steps,
        held_out_time: held_time,
        held_out_initial: initial,
        held_out_final: last,
        records,
    };
    let checkpoint = Checkpoint::from_model(&model, checkpoint_metadata("pretrain", cfg.pretrain_steps, cfg, data)?);
    Ok(PretrainOutcome {
        model,
        metrics,
        checkpoint,
    })
}

/// Pretty-printed JSON with a trailing newline; parent directories are created.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::invalid(format!("config key `{key}` is required")))
}

fn load_resume(cfg: &TrainConfig) -> Result<Option<Checkpoint>> {
    cfg.resume.as_deref().map(Checkpoint::load).transpose()
}

/// Loads the data named by `cfg`, trains, and writes the checkpoint and
/// metrics into `cfg.out`.
pub fn run_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data_dir = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let data = crate::scenegen::load_dataset(data_dir, cfg.render.background)?;
    let init = load_resume(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let outcome = train(cfg, &data, init.as_ref(), Some(out))?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write_json(&out.join(METRICS_FILE), &outcome.metrics)?;
    Ok(outcome)
}

pub fn run_pretrain(cfg: &TrainConfig) -> Result<PretrainOutcome> {
    let data_dir = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let data = crate::scenegen::load_dataset(data_dir, cfg.render.background)?;
    let init = load_resume(cfg)?;
    let outcome = pretrain(cfg, &data, init.as_ref())?;
    outcome.checkpoint.save(&out.join(PRETRAIN_CHECKPOINT_FILE))?;
    write_json(&out.join(PRETRAIN_METRICS_FILE), &outcome.metrics)?;
    Ok(outcome)
}

/// Names of the parameters whose values differ between two models.
pub fn changed_params(a: &SceneModel, b: &SceneModel) -> Vec<String> {
    a.params()
        .into_iter()
        .zip(b.params())
        .filter(|(x, y)| x.value != y.value)
        .map(|(x, _)| x.name.clone())
        .collect()
}

/// True for parameters of the latent diffusion component.
pub fn is_latent_param(name: &str) -> bool {
    name.starts_with(PREFIX)
}
