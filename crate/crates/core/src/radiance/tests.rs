use proptest::prelude::*;

use super::*;
use crate::numerics::rng::{normal_vec, seeded, uniform_vec};
use crate::numerics::param_grad_check;

fn unit(v: [Real; 3]) -> [Real; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn fields(seed: u64, order: usize) -> RadianceFields {
    let cfg = RadianceConfig {
        sh_order: order,
        attention_hidden: 16,
        density_channels: 4,
        density_bias: -2.0,
    };
    RadianceFields::new(&cfg, 6, Aabb::default(), 0.1, &mut seeded(seed)).unwrap()
}

fn randomize_attention(f: &mut RadianceFields, seed: u64) {
    let mut rng = seeded(seed);
    for p in f.attention.params_mut() {
        let n = p.value.len();
        p.value = Tensor::new(p.value.shape().to_vec(), uniform_vec(&mut rng, n, -0.5, 0.5)).unwrap();
    }
}

#[test]
fn constant_band() {
    for d in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], unit([0.3, -0.7, 0.2])] {
        assert!((sh_basis(d, 0).unwrap()[0] - 0.28209479).abs() < 1e-8);
    }
}

#[test]
fn first_band_along_z() {
    let y = sh_basis([0.0, 0.0, 1.0], 1).unwrap();
    assert!((y[2] - 0.48860251).abs() < 1e-8);
    assert!(y[1].abs() < 1e-15 && y[3].abs() < 1e-15);
}

#[test]
fn low_orders_match_closed_forms() {
    let [x, y, z] = unit([0.3, -0.5, 0.8]);
    let b = sh_basis([x, y, z], 2).unwrap();
    let c1 = 0.488_602_511_902_919_9;
    let expect = [
        0.282_094_791_773_878_1,
        -c1 * y,
        c1 * z,
        -c1 * x,
        1.092_548_430_592_079_2 * x * y,
        -1.092_548_430_592_079_2 * y * z,
        0.315_391_565_252_520_0 * (3.0 * z * z - 1.0),
        -1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (x * x - y * y),
    ];
    for (a, e) in b.iter().zip(expect) {
        assert!((a - e).abs() < 1e-14, "{a} vs {e}");
    }
}

#[test]
fn order_above_table_is_rejected() {
    assert!(sh_basis([0.0, 0.0, 1.0], 11).is_err());
    assert!(sh_basis([0.0, 0.0, 1.0], 10).is_ok());
}

#[test]
fn unnormalized_directions_are_normalized() {
    let a = sh_basis([0.0, 0.0, 5.0], 3).unwrap();
    let b = sh_basis([0.0, 0.0, 1.0], 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_final_layer_gives_unit_weights() {
    let f = fields(1, 4);
    for (d, t) in [([0.0, 0.0, 1.0], 0.0), (unit([1.0, 2.0, -3.0]), 0.77)] {
        let a = f.attention.weights(d, t).unwrap();
        assert_eq!(a.len(), 25);
        assert!(a.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}

#[test]
fn zero_sh_planes_give_mid_gray() {
    let mut f = fields(2, 2);
    randomize_attention(&mut f, 3);
    for p in &mut f.sh.planes {
        p.values.value.data_mut().fill(0.0);
    }
    let c = f.color([0.1, 0.2, 0.3], unit([1.0, 1.0, 0.0]), 0.4, ColorMode::Attention).unwrap();
    assert_eq!(c, [0.5; 3]);
}

#[test]
fn constant_band_alone_is_view_independent() {
    let mut f = fields(4, 2);
    let k = f.bands();
    for p in &mut f.sh.planes {
        for (i, v) in p.values.value.data_mut().iter_mut().enumerate() {
            if i % k != 0 {
                *v = 0.0;
            }
        }
    }
    let x = [0.2, -0.1, 0.4];
    let a = f.color(x, [0.0, 0.0, 1.0], 0.3, ColorMode::Attention).unwrap();
    let b = f.color(x, unit([-0.4, 0.9, 0.1]), 0.3, ColorMode::Attention).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unit_weights_equal_direct_sh_decode() {
    let f = fields(5, 3);
    let k = f.bands();
    let x = [0.31, -0.47, 0.12];
    let d = unit([0.2, 0.5, -0.8]);
    let y = sh_basis(d, 3).unwrap();
    // independent decode: sample each plane by hand and sum
    let mut coeff = vec![0.0; 3 * k];
    for plane in &f.sh.planes {
        let (a, b) = plane.axes.axes();
        for (c, v) in crate::triplane::sample_plane(plane, &f.sh.bounds, x[a], x[b]).unwrap().into_iter().enumerate() {
            coeff[c] += v;
        }
    }
    let got = f.color(x, d, 0.6, ColorMode::Attention).unwrap();
    let plain = f.color(x, d, 0.6, ColorMode::PlainSh).unwrap();
    for ch in 0..3 {
        let raw: Real = (0..k).map(|i| coeff[ch * k + i] * y[i]).sum();
        let expect = 1.0 / (1.0 + (-raw).exp());
        assert!((got[ch] - expect).abs() < 1e-14);
        assert!((plain[ch] - expect).abs() < 1e-14);
    }
}

#[test]
fn empty_density_planes_give_softplus_of_bias() {
    let mut f = fields(6, 1);
    for p in &mut f.density.planes.planes {
        p.values.value.data_mut().fill(0.0);
    }
    for x in [[0.0, 0.0, 0.0], [0.9, -0.3, 0.5], [3.0, 3.0, 3.0]] {
        assert!((f.density.density(x).unwrap() - 0.126_928_011_042_972_1).abs() < 1e-12);
    }
}

#[test]
fn density_is_never_negative() {
    let mut rng = seeded(7);
    let mut f = fields(7, 1);
    for p in f.density.params_mut() {
        let n = p.value.len();
        p.value = Tensor::new(p.value.shape().to_vec(), uniform_vec(&mut rng, n, -20.0, 20.0)).unwrap();
    }
    let pts = uniform_vec(&mut rng, 3 * 10_000, -1.2, 1.2);
    for p in pts.chunks(3) {
        assert!(f.density.density([p[0], p[1], p[2]]).unwrap() >= 0.0);
    }
}

#[test]
fn density_cell_gradients_match_finite_differences() {
    let f = fields(8, 1);
    let pts = Tensor::new(vec![2, 3], vec![0.13, -0.41, 0.77, -0.62, 0.35, 0.05]).unwrap();
    for p in f.density.params() {
        let coords: Vec<usize> = (0..p.value.len()).step_by(3).collect();
        let build = |g: &mut Graph| {
            let x = g.constant(pts.clone())?;
            let s = f.density.lower(g, x)?;
            g.tape.sum(s)
        };
        let r = param_grad_check(build, &p.name, &p.value, &coords, 1e-6, 1e-6).unwrap();
        assert!(r.passed, "{}: {r:?}", p.name);
    }
}

fn contract_probe(g: &mut Graph, coeffs: &Tensor, weights: &Tensor) -> crate::Result<Var> {
    let c = g.bind(&Param::new("coeffs", coeffs.clone()))?;
    let a = g.bind(&Param::new("weights", weights.clone()))?;
    let out = sh_contract(g, c, a, Arc::new(vec![0, 1, 1, 0, 1]))?;
    let s = g.tape.sin(out)?;
    g.tape.sum(s)
}

#[test]
fn sh_contraction_gradients_match_finite_differences() {
    let mut rng = seeded(9);
    let coeffs = Tensor::new(vec![5, 12], normal_vec(&mut rng, 60)).unwrap();
    let weights = Tensor::new(vec![2, 4], normal_vec(&mut rng, 8)).unwrap();
    for (name, x) in [("coeffs", &coeffs), ("weights", &weights)] {
        let coords: Vec<usize> = (0..x.len()).collect();
        let r = param_grad_check(|g| contract_probe(g, &coeffs, &weights), name, x, &coords, 1e-6, 1e-6).unwrap();
        assert!(r.passed, "{name}: {r:?}");
    }
}

#[test]
fn tape_attention_matches_direct_attention() {
    let mut f = fields(10, 2);
    randomize_attention(&mut f, 11);
    let dirs = [unit([0.1, 0.2, 0.9]), unit([-0.7, 0.1, 0.3])];
    let mut input = Vec::new();
    for d in dirs {
        input.extend(AttentionHead::input(d, 0.25).unwrap());
    }
    let mut g = Graph::inference();
    let x = g.constant(Tensor::new(vec![2, ATTENTION_INPUT], input).unwrap()).unwrap();
    let a = f.attention.lower(&mut g, x).unwrap();
    for (r, d) in dirs.iter().enumerate() {
        let direct = f.attention.weights(*d, 0.25).unwrap();
        for k in 0..9 {
            assert!((g.value(a).data()[r * 9 + k] - direct[k]).abs() < 1e-13);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn addition_theorem(seed in 0u64..10_000) {
        let v = normal_vec(&mut seeded(seed), 3);
        let d = unit([v[0], v[1], v[2]]);
        let y = sh_basis(d, MAX_SH_ORDER).unwrap();
        for l in 0..=MAX_SH_ORDER {
            let s: Real = y[l * l..(l + 1) * (l + 1)].iter().map(|v| v * v).sum();
            let expect = (2 * l + 1) as Real / (4.0 * std::f64::consts::PI as Real);
            prop_assert!((s - expect).abs() < 1e-10, "l={} {} vs {}", l, s, expect);
        }
    }

    #[test]
    fn attention_weights_sum_to_band_count(seed in 0u64..10_000, t in 0.0f64..1.0) {
        let mut f = fields(seed, 4);
        randomize_attention(&mut f, seed + 1);
        let v = normal_vec(&mut seeded(seed + 2), 3);
        let a = f.attention.weights(unit([v[0], v[1], v[2]]), t as Real).unwrap();
        let s: Real = a.iter().sum();
        prop_assert!((s - 25.0).abs() < 1e-9);
        prop_assert!(a.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn colors_stay_inside_the_unit_interval(seed in 0u64..10_000) {
        let mut f = fields(seed, 2);
        randomize_attention(&mut f, seed + 3);
        let v = normal_vec(&mut seeded(seed + 4), 6);
        let c = f.color([v[0].tanh(), v[1].tanh(), v[2].tanh()], unit([v[3], v[4], v[5]]), 0.5, ColorMode::Attention).unwrap();
        prop_assert!(c.iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
