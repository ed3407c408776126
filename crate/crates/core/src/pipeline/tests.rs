use super::gradcheck::probe_config;
use super::*;
use crate::checkpoint::Checkpoint;
use crate::model::{Ablation, SceneModel};
use crate::numerics::{HasParams, NamedGrads, Param, Tensor};
use crate::parallel::Parallelism;
use crate::renderer::{psnr_from_mse, Image, RenderOptions};
use crate::scenegen::{generate_dataset, GenerateOptions, SceneDataset, SceneSpec};
use crate::Real;

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        batch_size: 4,
        steps: 6,
        pretrain_steps: 0,
        rays_per_frame: 16,
        seed: 3,
        metric_every: 2,
        model: probe_config(),
        render: RenderOptions {
            samples: 16,
            parallelism: Parallelism::Sequential,
            ..RenderOptions::default()
        },
        ..TrainConfig::default()
    }
}

fn tiny_dataset(dir: &std::path::Path) -> SceneDataset {
    let opts = GenerateOptions {
        views: 3,
        times: 3,
        width: 12,
        height: 12,
        seed: 5,
    };
    generate_dataset(&SceneSpec::moving_sphere(), &opts, dir, Parallelism::Sequential).unwrap()
}

#[test]
fn total_loss_examples() {
    let w = LossWeights {
        lambda_rec: 1.0,
        lambda_diff: 0.0,
        lambda_temporal: 0.0,
    };
    let p = LossParts {
        rec: 0.5,
        diff: 0.0,
        temporal: 0.0,
    };
    assert_eq!(total_loss(&p, &w, false).unwrap(), 0.5);
    let parts = LossParts {
        rec: 1.0,
        diff: 2.0,
        temporal: 3.0,
    };
    let d = LossWeights::default();
    assert!((total_loss(&parts, &d, false).unwrap() - 1.23).abs() < 1e-12);
    assert_eq!(total_loss(&parts, &d, true).unwrap(), 1.0);
}

#[test]
fn total_loss_rejects_bad_parts_and_weights() {
    let d = LossWeights::default();
    let neg = LossParts {
        rec: 1.0,
        diff: -0.1,
        temporal: 0.0,
    };
    assert!(total_loss(&neg, &d, false).is_err());
    let nan = LossParts {
        rec: Real::NAN,
        ..LossParts::default()
    };
    assert!(total_loss(&nan, &d, false).is_err());
    let zero_rec = LossWeights { lambda_rec: 0.0, ..d };
    assert!(total_loss(&LossParts::default(), &zero_rec, false).is_err());
}

#[test]
fn reconstruction_loss_examples() {
    let a = vec![0.2, 0.4, 0.6, 0.8, 0.1, 0.3];
    assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
    let b: Vec<Real> = a.iter().map(|v| v + 0.1).collect();
    assert!((reconstruction_loss(&a, &b).unwrap() - 0.01).abs() < 1e-12);
    assert!(reconstruction_loss(&a, &b[..5]).is_err());
    let img = Image::new(2, 1, a.clone()).unwrap();
    let other = Image::new(2, 1, b).unwrap();
    let p = crate::renderer::psnr(&img, &other).unwrap();
    let m = reconstruction_loss(&img.data, &other.data).unwrap();
    assert!((m - (10.0 as Real).powf(-p / 10.0)).abs() < 1e-12);
    assert!((psnr_from_mse(m) - p).abs() < 1e-9);
}

#[test]
fn lowered_reconstruction_loss_matches_direct() {
    let mut g = crate::numerics::Graph::new();
    let rgb = g.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).unwrap();
    let target = [0.0, 0.2, 0.5, 0.4, 0.4, 0.9];
    let l = lower_reconstruction_loss(&mut g, rgb, &target, 0.5).unwrap();
    let direct = reconstruction_loss(g.value(rgb).data(), &target).unwrap();
    assert!((g.value(l).item().unwrap() - 0.5 * direct).abs() < 1e-15);
}

struct One(Param);

impl HasParams for One {
    fn params(&self) -> Vec<&Param> {
        vec![&self.0]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.0]
    }
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut m = One(Param::new("x", Tensor::vector(vec![1.0, -2.0, 0.5])));
    let mut adam = Adam::new(AdamConfig::default());
    let grads = NamedGrads::from([("x".to_string(), vec![3.0, -0.01, 0.0])]);
    adam.step(&mut m, &grads, |_| 0.1).unwrap();
    let v = m.0.value.data();
    assert!((v[0] - 0.9).abs() < 1e-6);
    assert!((v[1] + 1.9).abs() < 1e-4);
    assert_eq!(v[2], 0.5);
    assert_eq!(adam.census()["x"], 1);
}

#[test]
fn adam_minimises_a_quadratic_and_skips_fixed_params() {
    let mut m = One(Param::new("x", Tensor::vector(vec![3.0, -4.0])));
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..2000 {
        let g: Vec<Real> = m.0.value.data().iter().map(|x| 2.0 * (x - 1.0)).collect();
        adam.step(&mut m, &NamedGrads::from([("x".to_string(), g)]), |_| 0.05).unwrap();
    }
    for v in m.0.value.data() {
        assert!((v - 1.0).abs() < 1e-3);
    }
    let mut fixed = One(Param::fixed("x", Tensor::vector(vec![3.0])));
    adam.step(&mut fixed, &NamedGrads::from([("x".to_string(), vec![1.0])]), |_| 0.1).unwrap();
    assert_eq!(fixed.0.value.data(), &[3.0]);
}

#[test]
fn config_json_defaults_overrides_and_paths() {
    let cfg = TrainConfig::from_json("{}").unwrap();
    assert_eq!(cfg, TrainConfig::default());
    assert_eq!(cfg.lr, 5e-4);
    assert_eq!(cfg.batch_size, 4);
    let cfg = TrainConfig::from_json(r#"{"steps": 7, "ablation": {"no_diffusion": true}, "weights": {"lambda_diff": 0.5}}"#).unwrap();
    assert_eq!(cfg.steps, 7);
    assert!(cfg.ablation.no_diffusion);
    assert_eq!(cfg.weights.lambda_diff, 0.5);
    assert_eq!(cfg.weights.lambda_rec, 1.0);
    assert!(TrainConfig::from_json(r#"{"stepz": 7}"#).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"data": "scene", "out": "/abs/out"}"#).unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.data.unwrap(), dir.path().join("scene"));
    assert_eq!(cfg.out.unwrap(), std::path::PathBuf::from("/abs/out"));
    let round: TrainConfig = serde_json::from_str(&serde_json::to_string(&tiny_train_config()).unwrap()).unwrap();
    assert_eq!(round, tiny_train_config());
}

#[test]
fn training_logs_consistent_losses_and_keeps_the_projection_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = tiny_train_config();
    let out = train(&cfg, &data, None, None).unwrap();
    let m = &out.metrics;
    assert_eq!(m.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
    for r in &m.records {
        let expected = cfg.weights.lambda_rec * r.rec + cfg.weights.lambda_diff * r.diff + cfg.weights.lambda_temporal * r.temporal;
        assert!((r.total - expected).abs() < 1e-9);
        assert!(r.rec > 0.0 && r.diff > 0.0);
    }
    assert_eq!(m.deformation_checksum_before, m.deformation_checksum_after);
    let init = SceneModel::new(&cfg.model, cfg.seed).unwrap();
    assert_eq!(init.head, out.model.head);
    let changed = changed_params(&init, &out.model);
    for prefix in ["radiance.sh", "radiance.density", "deformation.xy", "latentdiff.encoder", "latentdiff.denoiser", "latentdiff.decoder"] {
        assert!(changed.iter().any(|n| n.starts_with(prefix)), "{prefix} never updated");
    }
    assert!(m.updates.values().all(|&n| n == cfg.steps as u64 || n > 0));
}

#[test]
fn ablated_parts_receive_no_updates() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = TrainConfig {
        ablation: Ablation {
            no_deformation: true,
            no_diffusion: true,
        },
        ..tiny_train_config()
    };
    let out = train(&cfg, &data, None, None).unwrap();
    let init = SceneModel::new(&cfg.model, cfg.seed).unwrap();
    for name in changed_params(&init, &out.model) {
        assert!(!name.starts_with("deformation") && !is_latent_param(&name), "{name} changed");
    }
    for name in out.metrics.updates.keys() {
        assert!(name.starts_with("radiance"), "{name} updated");
    }
    for r in &out.metrics.records {
        assert_eq!(r.total, r.rec);
        assert_eq!((r.diff, r.temporal), (0.0, 0.0));
    }
}

#[test]
fn without_diffusion_latent_parameters_do_not_affect_renders() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = TrainConfig {
        ablation: Ablation {
            no_deformation: false,
            no_diffusion: true,
        },
        ..tiny_train_config()
    };
    let model = SceneModel::new(&cfg.model, 1).unwrap();
    let mut other = model.clone();
    for p in other.latent.params_mut() {
        for v in p.value.data_mut() {
            *v += 0.25;
        }
    }
    let sub = SceneDataset {
        frames: data.frames[..2].to_vec(),
        ..data
    };
    let a = render_frames(&model, &cfg, &sub).unwrap();
    let b = render_frames(&other, &cfg, &sub).unwrap();
    assert_eq!(a, b);
    let with = TrainConfig {
        ablation: Ablation::default(),
        ..cfg
    };
    assert_ne!(render_frames(&model, &with, &sub).unwrap(), render_frames(&other, &with, &sub).unwrap());
}

#[test]
fn training_is_deterministic_and_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = TrainConfig {
        steps: 3,
        ..tiny_train_config()
    };
    let a = train(&cfg, &data, None, None).unwrap();
    let b = train(&cfg, &data, None, None).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(serde_json::to_string(&a.metrics).unwrap(), serde_json::to_string(&b.metrics).unwrap());
    let mut threaded = cfg.clone();
    threaded.render.parallelism = Parallelism::Threads;
    let c = train(&threaded, &data, None, None).unwrap();
    assert_eq!(a.model, c.model);
}

#[test]
fn checkpoints_restore_model_config_and_poses() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"));
    let cfg = TrainConfig {
        steps: 2,
        ..tiny_train_config()
    };
    let out = train(&cfg, &data, None, None).unwrap();
    let path = dir.path().join("c.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let (model, restored) = model_from_checkpoint(&loaded).unwrap();
    assert_eq!(model, out.model);
    assert_eq!(restored, cfg.portable());
    let poses = checkpoint_poses(&loaded).unwrap();
    assert_eq!(poses.poses.len(), 3);
    assert_eq!(poses.camera(1).unwrap(), data.frames[1].camera);
    assert!(poses.camera(3).is_err());
    let resumed = train(&TrainConfig { steps: 0, ..cfg }, &data, Some(&loaded), None).unwrap();
    assert_eq!(resumed.model, out.model);
}

#[test]
fn divergence_is_reported_and_last_good_written() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"));
    let cfg = tiny_train_config();
    let mut model = SceneModel::new(&cfg.model, cfg.seed).unwrap();
    model.radiance.sh.planes[0].values.value.data_mut().fill(Real::NAN);
    let init = Checkpoint::from_model(&model, serde_json::json!({}));
    let out_dir = dir.path().join("out");
    std::fs::create_dir_all(&out_dir).unwrap();
    let err = train(&cfg, &data, Some(&init), Some(&out_dir)).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    assert!(out_dir.join(LAST_GOOD_FILE).exists());
}

#[test]
fn pretraining_with_zero_steps_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = tiny_train_config();
    let out = pretrain(&cfg, &data, None).unwrap();
    assert_eq!(out.model, SceneModel::new(&cfg.model, cfg.seed).unwrap());
    assert_eq!(out.metrics.held_out_initial, out.metrics.held_out_final);
}

#[test]
fn pretraining_only_touches_the_diffusion_prior_and_lowers_held_out_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = TrainConfig {
        pretrain_steps: 300,
        lr: 2e-3,
        metric_every: 100,
        ..tiny_train_config()
    };
    let out = pretrain(&cfg, &data, None).unwrap();
    let init = SceneModel::new(&cfg.model, cfg.seed).unwrap();
    let changed = changed_params(&init, &out.model);
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| is_pretrained(n)));
    assert!(out.metrics.held_out_final < out.metrics.held_out_initial, "{:?}", out.metrics);
    let again = pretrain(&cfg, &data, None).unwrap();
    assert_eq!(again.checkpoint.to_bytes().unwrap(), out.checkpoint.to_bytes().unwrap());
}

#[test]
fn ground_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let gt: Vec<Image> = data.frames.iter().map(|f| f.image.clone()).collect();
    let r = score_frames(&gt, &data).unwrap();
    assert!(r.frames.iter().all(|f| f.psnr.is_none()));
    assert!(r.frames.iter().all(|f| (f.ssim - 1.0).abs() < 1e-12));
    assert_eq!(r.mean_psnr, None);
    assert!(r.temporal_stability.is_some());
}

#[test]
fn mean_psnr_is_the_mean_of_finite_frames() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let mut imgs: Vec<Image> = data.frames.iter().map(|f| f.image.clone()).collect();
    for (i, img) in imgs.iter_mut().enumerate().skip(1) {
        for v in &mut img.data {
            *v = (*v - 0.01 * i as Real).max(0.0);
        }
    }
    let r = score_frames(&imgs, &data).unwrap();
    let finite: Vec<Real> = r.frames.iter().filter_map(|f| f.psnr).collect();
    assert_eq!(finite.len(), data.len() - 1);
    let mean = finite.iter().sum::<Real>() / finite.len() as Real;
    assert!((r.mean_psnr.unwrap() - mean).abs() < 1e-12);
    assert!(score_frames(&imgs[1..], &data).is_err());
}

#[test]
fn gradient_suite_passes_for_every_module() {
    let reports = run_gradcheck(None).unwrap();
    assert_eq!(reports.len(), MODULES.len());
    for r in &reports {
        assert!(r.passed, "{}: {:?}", r.module, r.params);
    }
    assert!(run_gradcheck(Some("nope")).is_err());
    assert_eq!(run_gradcheck(Some("decoder")).unwrap().len(), 1);
}

#[test]
fn learning_rate_decay_runs_from_one_to_the_final_factor() {
    let cfg = TrainConfig {
        final_lr_factor: 0.01,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.lr_decay(0, 101), 1.0);
    assert!((cfg.lr_decay(50, 101) - 0.1).abs() < 1e-12);
    assert!((cfg.lr_decay(100, 101) - 0.01).abs() < 1e-15);
    assert_eq!(TrainConfig::default().lr_decay(70, 101), 1.0);
    let bad = TrainConfig {
        final_lr_factor: 0.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}
