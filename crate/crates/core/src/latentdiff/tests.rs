use proptest::prelude::*;

use super::*;
use crate::numerics::rng::{seeded, uniform_vec};
use crate::numerics::{param_grad_check, Linear};

fn small_cfg() -> LatentConfig {
    LatentConfig {
        patch: 4,
        token_dim: 16,
        layers: 2,
        heads: 2,
        ff_dim: 24,
        latent_dim: 12,
        decoder_hidden: 10,
        decoder_sub: 2,
        diffusion_steps: 100,
        beta_start: 1e-4,
        beta_end: 0.02,
        ddim_steps: 10,
        inference_alpha_bar: 0.7,
        denoiser_hidden: 16,
        denoiser_blocks: 2,
        scale_hidden: 8,
    }
}

fn layout() -> PlaneLayout {
    PlaneLayout {
        resolution: 8,
        channels: vec![2, 3],
    }
}

fn random_planes(seed: u64, layout: &PlaneLayout) -> Vec<Param> {
    let mut rng = seeded(seed);
    let r = layout.resolution;
    (0..layout.planes())
        .map(|i| {
            let c = layout.channels[i / 3];
            Param::new(format!("plane{i}"), Tensor::new(vec![r, r, c], uniform_vec(&mut rng, r * r * c, -1.0, 1.0)).unwrap())
        })
        .collect()
}

fn bind_all(g: &mut Graph, planes: &[Param]) -> Vec<Var> {
    planes.iter().map(|p| g.bind(p).unwrap()).collect()
}

fn model(seed: u64) -> LatentDiffusion {
    LatentDiffusion::new(&small_cfg(), layout(), &mut seeded(seed)).unwrap()
}

fn perturb(lin: &mut Linear, seed: u64, scale: Real) {
    let mut rng = seeded(seed);
    let n = lin.weight.value.len();
    lin.weight.value = Tensor::new(lin.weight.value.shape().to_vec(), uniform_vec(&mut rng, n, -scale, scale)).unwrap();
    let n = lin.bias.value.len();
    lin.bias.value = Tensor::vector(uniform_vec(&mut rng, n, -scale, scale));
}

#[test]
fn token_counts() {
    let full = PlaneLayout {
        resolution: 256,
        channels: vec![32, 75, 16],
    };
    assert_eq!(full.token_count(16).unwrap(), 768);
    let desk = PlaneLayout {
        resolution: 64,
        channels: vec![16],
    };
    assert_eq!(desk.token_count(16).unwrap(), 48);
    assert!(PlaneLayout {
        resolution: 60,
        channels: vec![1]
    }
    .token_count(16)
    .is_err());
}

#[test]
fn patchify_places_cells_in_their_patch() {
    let l = layout();
    let planes = random_planes(1, &l);
    let mut g = Graph::inference();
    let vars = bind_all(&mut g, &planes);
    let tok = patchify(&mut g, &l, 4, &vars).unwrap();
    let t = g.value(tok);
    assert_eq!(t.shape(), &[12, 16 * 5]);
    // yz plane of set 1 (input 4), cell (5, 2): token 1*4 + 1*2 + 0, slot (1, 2)
    let src = &planes[4].value.data()[(5 * 8 + 2) * 3..][..3];
    let dst = &t.data()[6 * 80 + (4 + 2) * 5 + 2..][..3];
    assert_eq!(src, dst);
}

#[test]
fn sequences_at_two_times_differ_only_in_the_temporal_token() {
    let m = model(2);
    let planes = random_planes(3, &m.layout);
    let mut g = Graph::inference();
    let vars = bind_all(&mut g, &planes);
    let tokens = m.tokenizer.patch_tokens(&mut g, &m.layout, &vars).unwrap();
    let a = m.tokenizer.sequence(&mut g, tokens, 0.2).unwrap();
    let b = m.tokenizer.sequence(&mut g, tokens, 0.9).unwrap();
    let (a, b) = (g.value(a).data(), g.value(b).data());
    let w = 16;
    assert_eq!(a.len(), 13 * w);
    assert_eq!(a[..12 * w], b[..12 * w]);
    assert_ne!(a[12 * w..], b[12 * w..]);
}

#[test]
fn latent_has_configured_width() {
    let m = model(4);
    let planes = random_planes(5, &m.layout);
    let mut g = Graph::inference();
    let vars = bind_all(&mut g, &planes);
    let z = m.encode_times(&mut g, &vars, &[0.5]).unwrap()[0];
    assert_eq!(g.value(z).shape(), &[1, 12]);
}

#[test]
fn zero_pool_weights_give_constant_latent() {
    let mut m = model(6);
    m.encoder.pool.weight.value.data_mut().fill(0.0);
    m.encoder.pool.bias.value = Tensor::vector((0..12).map(|i| i as Real).collect());
    for seed in [7, 8] {
        let planes = random_planes(seed, &m.layout);
        let mut g = Graph::inference();
        let vars = bind_all(&mut g, &planes);
        let z = m.encode_times(&mut g, &vars, &[0.3]).unwrap()[0];
        assert_eq!(g.value(z).data(), m.encoder.pool.bias.value.data());
    }
}

#[test]
fn pooling_is_invariant_to_token_order() {
    let m = model(9);
    let mut rng = seeded(10);
    let tokens: Vec<Real> = uniform_vec(&mut rng, 13 * 16, -1.0, 1.0);
    let mut perm: Vec<usize> = (0..13).collect();
    perm.reverse();
    perm.swap(2, 7);
    let permuted: Vec<Real> = perm.iter().flat_map(|&r| tokens[r * 16..(r + 1) * 16].iter().copied()).collect();
    let eval = |data: Vec<Real>| {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(vec![13, 16], data).unwrap()).unwrap();
        let z = m.encoder.lower(&mut g, x).unwrap();
        g.value(z).data().to_vec()
    };
    let (a, b) = (eval(tokens), eval(permuted));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn zero_output_layer_round_trip_is_exact() {
    let m = model(11);
    let planes = random_planes(12, &m.layout);
    let mut g = Graph::inference();
    let vars = bind_all(&mut g, &planes);
    let z = m.encode_times(&mut g, &vars, &[0.4]).unwrap()[0];
    let abar = m.alpha_bar(&mut g, &vars).unwrap();
    let refined = m.refine(&mut g, &vars, z, abar, 0.4, 99).unwrap();
    for (p, r) in planes.iter().zip(refined) {
        assert_eq!(g.value(r).shape(), p.value.shape());
        assert_eq!(g.value(r).data(), p.value.data());
    }
}

#[test]
fn perturbing_the_latent_changes_the_planes() {
    let mut m = model(13);
    perturb(&mut m.decoder.out, 14, 0.3);
    let z = Tensor::new(vec![1, 12], uniform_vec(&mut seeded(15), 12, -1.0, 1.0)).unwrap();
    let build = |g: &mut Graph| {
        let zv = g.bind(&Param::new("z", z.clone()))?;
        let res = m.decoder.lower(g, &m.layout, zv)?;
        let mut acc = None;
        for r in res {
            let s = g.tape.sin(r)?;
            let s = g.tape.sum(s)?;
            acc = Some(match acc {
                Some(a) => g.tape.add(a, s)?,
                None => s,
            });
        }
        Ok(acc.unwrap())
    };
    let coords: Vec<usize> = (0..12).collect();
    let r = param_grad_check(build, "z", &z, &coords, 1e-6, 1e-6).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.numeric.iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn patch_round_trip_gradients_match_finite_differences() {
    let m = model(16);
    let planes = random_planes(17, &m.layout);
    for target in [0, 4] {
        let build = |g: &mut Graph| {
            let vars = bind_all(g, &planes);
            let tok = patchify(g, &m.layout, 4, &vars)?;
            let s = g.tape.sin(tok)?;
            g.tape.sum(s)
        };
        let p = &planes[target];
        let coords: Vec<usize> = (0..p.value.len()).step_by(5).collect();
        let r = param_grad_check(build, &p.name, &p.value, &coords, 1e-6, 1e-6).unwrap();
        assert!(r.passed);
    }
}

#[test]
fn q_sample_boundaries() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let abar = sched.alpha_bar();
    assert!((abar[0] - 1.0).abs() < 1e-3);
    let z0: Vec<Real> = (0..8).map(|i| i as Real * 0.3 - 1.0).collect();
    let eps: Vec<Real> = (0..8).map(|i| (i as Real).sin()).collect();
    let zs = q_sample(&z0, 0, &eps, &abar).unwrap();
    for (a, b) in zs.iter().zip(&z0) {
        assert!((a - b).abs() < 0.02);
    }
    let clean = q_sample(&z0, 500, &[0.0; 8], &abar).unwrap();
    for (a, b) in clean.iter().zip(&z0) {
        assert_eq!(*a, abar[500].sqrt() * b);
    }
    assert!(q_sample(&z0, 1000, &eps, &abar).is_err());
}

#[test]
fn q_sample_variance_matches_schedule() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let abar = sched.alpha_bar();
    let s = 300;
    let mut rng = seeded(18);
    let draws = 10_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let eps = normal_vec(&mut rng, 512);
        let z = q_sample(&[0.0; 512], s, &eps, &abar).unwrap();
        total += z.iter().map(|v| v * v).sum::<Real>();
    }
    let expect = (1.0 - abar[s]) * 512.0;
    assert!((total / draws as Real - expect).abs() < 0.05 * expect);
}

fn abar_var(g: &mut Graph, abar: &[Real]) -> Var {
    g.constant(Tensor::new(vec![1, abar.len()], abar.to_vec()).unwrap()).unwrap()
}

#[test]
fn exact_noise_predictor_has_zero_loss() {
    let abar = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap().alpha_bar();
    let mut rng = seeded(19);
    for _ in 0..5 {
        let z0 = Tensor::new(vec![1, 12], normal_vec(&mut rng, 12)).unwrap();
        let eps = Tensor::new(vec![1, 12], normal_vec(&mut rng, 12)).unwrap();
        let mut g = Graph::inference();
        let zv = g.constant(z0).unwrap();
        let a = abar_var(&mut g, &abar);
        let loss = diffusion_loss_at(&mut g, &FixedNoise(eps.clone()), zv, a, &[37], &eps).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
    }
}

#[test]
fn zero_predictor_loss_is_noise_energy() {
    let abar = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap().alpha_bar();
    let mut rng = seeded(20);
    let eps = Tensor::new(vec![1, 512], normal_vec(&mut rng, 512)).unwrap();
    let mut g = Graph::inference();
    let zv = g.constant(Tensor::zeros(vec![1, 512])).unwrap();
    let a = abar_var(&mut g, &abar);
    let loss = diffusion_loss_at(&mut g, &FixedNoise(Tensor::zeros(vec![1, 512])), zv, a, &[3], &eps).unwrap();
    let energy: Real = eps.data().iter().map(|v| v * v).sum();
    assert!((g.value(loss).item().unwrap() - energy).abs() < 1e-9);
    assert!((energy - 512.0).abs() < 4.0 * (2.0 * 512.0 as Real).sqrt());
}

fn loss_probe(m: &LatentDiffusion, planes: &[Param], z0: &Tensor, eps: &Tensor) -> impl Fn(&mut Graph) -> crate::Result<Var> {
    let (m, planes, z0, eps) = (m.clone(), planes.to_vec(), z0.clone(), eps.clone());
    move |g: &mut Graph| {
        let vars = bind_all(g, &planes);
        let abar = m.alpha_bar(g, &vars)?;
        let zv = g.constant(z0.clone())?;
        diffusion_loss_at(g, &m.denoiser, zv, abar, &[10, 80], &eps)
    }
}

#[test]
fn diffusion_loss_gradients_match_finite_differences() {
    let mut m = model(21);
    for f in &mut m.denoiser.films {
        perturb(f, 22, 0.2);
    }
    perturb(m.scale.mlp.last_layer_mut(), 23, 0.5);
    let planes = random_planes(24, &m.layout);
    let mut rng = seeded(25);
    let z0 = Tensor::new(vec![2, 12], normal_vec(&mut rng, 24)).unwrap();
    let eps = Tensor::new(vec![2, 12], normal_vec(&mut rng, 24)).unwrap();
    let probe = loss_probe(&m, &planes, &z0, &eps);
    let params: Vec<Param> = m.denoiser.params().into_iter().chain(m.scale.params()).cloned().collect();
    for p in params {
        let coords: Vec<usize> = (0..p.value.len()).step_by(11).collect();
        let r = param_grad_check(&probe, &p.name, &p.value, &coords, 1e-4, 1e-5).unwrap();
        assert!(r.passed, "{}: {:?}", p.name, r);
    }
}

/// Predicts the exact noise for a known clean latent.
struct Oracle {
    z0: Vec<Real>,
    abar: Vec<Real>,
}

impl NoisePredictor for Oracle {
    fn predict(&self, g: &mut Graph, z: Var, steps: &[usize]) -> crate::Result<Var> {
        let a = self.abar[steps[0]];
        let zs = g.value(z).data();
        let eps: Vec<Real> = zs.iter().zip(&self.z0).map(|(z, x)| (z - a.sqrt() * x) / (1.0 - a).sqrt()).collect();
        g.constant(Tensor::new(vec![1, eps.len()], eps)?)
    }
}

#[test]
fn ddim_with_exact_noise_recovers_the_clean_latent() {
    let abar = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap().alpha_bar();
    let mut rng = seeded(26);
    let z0 = normal_vec(&mut rng, 32);
    let eps = normal_vec(&mut rng, 32);
    let start = start_step(&abar, 0.7);
    let zi = q_sample(&z0, start, &eps, &abar).unwrap();
    let oracle = Oracle { z0: z0.clone(), abar: abar.clone() };
    let out = ddim_sample(&oracle, &Tensor::new(vec![1, 32], zi).unwrap(), &abar, start, 10).unwrap();
    for (a, b) in out.data().iter().zip(&z0) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn ddim_single_step_from_clean_end_is_near_identity() {
    let m = model(27);
    let abar = m.schedule.alpha_bar();
    let z = Tensor::new(vec![1, 12], normal_vec(&mut seeded(28), 12)).unwrap();
    let out = ddim_sample(&m.denoiser, &z, &abar, 0, 1).unwrap();
    let tol = 3.0 * (1.0 - abar[0]).sqrt() * 12.0;
    for (a, b) in out.data().iter().zip(z.data()) {
        assert!((a - b).abs() < tol);
    }
}

#[test]
fn ddim_is_bit_deterministic() {
    let m = model(29);
    let abar = m.schedule.alpha_bar();
    let z = Tensor::new(vec![1, 12], normal_vec(&mut seeded(30), 12)).unwrap();
    let a = ddim_sample(&m.denoiser, &z, &abar, 60, 10).unwrap();
    let b = ddim_sample(&m.denoiser, &z, &abar, 60, 10).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ddim_timesteps_descend_from_start() {
    assert_eq!(ddim_timesteps(100, 4).unwrap(), vec![100, 75, 50, 25]);
    assert_eq!(ddim_timesteps(3, 10).unwrap(), vec![3, 2, 1, 0]);
    assert!(ddim_timesteps(5, 0).is_err());
}

#[test]
fn temporal_loss_definition() {
    let mut g = Graph::inference();
    let a = g.constant(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let b = g.constant(Tensor::new(vec![1, 3], vec![0.5, 0.0, 2.0]).unwrap()).unwrap();
    let same = temporal_loss(&mut g, a, a).unwrap();
    let ab = temporal_loss(&mut g, a, b).unwrap();
    let ba = temporal_loss(&mut g, b, a).unwrap();
    assert_eq!(g.value(same).item().unwrap(), 0.0);
    assert_eq!(g.value(ab).item().unwrap(), 1.0);
    assert_eq!(g.value(ab).item().unwrap(), g.value(ba).item().unwrap());
}

#[test]
fn zero_scale_mlp_gives_midpoint_multiplier() {
    let m = model(31);
    let planes = random_planes(32, &m.layout);
    let values: Vec<&Tensor> = planes.iter().map(|p| &p.value).collect();
    let stats = plane_stats(&values).unwrap();
    assert_eq!(stats.len(), 12);
    assert_eq!(m.scale.multiplier(&stats).unwrap(), 1.25);
    let mut g = Graph::inference();
    let vars = bind_all(&mut g, &planes);
    let abar = m.alpha_bar(&mut g, &vars).unwrap();
    assert_eq!(g.value(abar).data(), m.schedule.scaled_alpha_bar(1.25).as_slice());
}

#[test]
fn scaled_alpha_bar_gradient_matches_finite_differences() {
    let sched = NoiseSchedule::linear(50, 1e-4, 0.3).unwrap();
    let w: Vec<Real> = (0..50).map(|i| ((i * 7) % 11) as Real - 5.0).collect();
    for m in [0.6, 1.3, 1.9] {
        let build = |g: &mut Graph| {
            let mv = g.bind(&Param::new("m", Tensor::new(vec![1, 1], vec![m]).unwrap()))?;
            let a = lower_scaled_alpha_bar(g, &sched, mv)?;
            let wv = g.constant(Tensor::new(vec![1, 50], w.clone()).unwrap())?;
            let p = g.tape.mul(a, wv)?;
            g.tape.sum(p)
        };
        let r = param_grad_check(build, "m", &Tensor::new(vec![1, 1], vec![m]).unwrap(), &[0], 1e-6, 1e-7).unwrap();
        assert!(r.passed, "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn multiplier_stays_inside_its_range(seed in 0u64..10_000) {
        let mut m = model(seed);
        perturb(m.scale.mlp.last_layer_mut(), seed + 1, 30.0);
        let stats = uniform_vec(&mut seeded(seed + 2), 12, -5.0, 5.0);
        let v = m.scale.multiplier(&stats).unwrap();
        prop_assert!(v >= 0.5 && v <= 2.0);
    }

    #[test]
    fn scaled_alpha_bar_strictly_decreases(m in 0.5f64..=2.0) {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let a = sched.scaled_alpha_bar(m as Real);
        prop_assert!(a.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
