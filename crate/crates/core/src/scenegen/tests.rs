use super::*;
use crate::parallel::Parallelism;
use crate::renderer::{Camera, Ray};
use proptest::prelude::*;

fn sphere_at_origin(radius: Real) -> SceneSpec {
    SceneSpec {
        primitives: vec![Primitive {
            shape: Shape::Sphere { radius },
            albedo: [0.5, 0.6, 0.7],
            center: [0.0; 3],
            motion: Motion::Static,
        }],
        light_dir: [0.0, 0.0, 1.0],
        background: [1.0, 1.0, 1.0],
        specular: false,
        capture: Capture::default(),
    }
}

fn small_opts(views: usize, times: usize) -> GenerateOptions {
    GenerateOptions {
        views,
        times,
        width: 8,
        height: 6,
        seed: 11,
    }
}

#[test]
fn miss_returns_background() {
    let mut spec = sphere_at_origin(0.3);
    spec.background = [0.1, 0.2, 0.3];
    let ray = Ray {
        origin: [0.0, 2.0, 4.0],
        dir: [0.0, 0.0, -1.0],
    };
    assert!(intersect(&spec, &ray, 0.5).is_none());
    assert_eq!(shade(&spec, &ray, 0.5), [0.1, 0.2, 0.3]);
}

#[test]
fn head_on_hit_with_light_behind_the_eye_gives_the_albedo() {
    let spec = sphere_at_origin(0.5);
    let ray = Ray {
        origin: [0.0, 0.0, 4.0],
        dir: [0.0, 0.0, -1.0],
    };
    let hit = intersect(&spec, &ray, 0.0).unwrap();
    assert!((hit.distance - 3.5).abs() < 1e-12);
    assert!((hit.normal[2] - 1.0).abs() < 1e-12);
    let rgb = shade(&spec, &ray, 0.0);
    for k in 0..3 {
        assert!((rgb[k] - spec.primitives[0].albedo[k]).abs() < 1e-12);
    }
}

#[test]
fn box_face_hit_and_normal() {
    let mut spec = sphere_at_origin(0.5);
    spec.primitives[0].shape = Shape::Box {
        half_extents: [0.2, 0.3, 0.4],
    };
    let ray = Ray {
        origin: [3.0, 0.1, 0.1],
        dir: [-1.0, 0.0, 0.0],
    };
    let hit = intersect(&spec, &ray, 0.0).unwrap();
    assert!((hit.distance - 2.8).abs() < 1e-12);
    assert_eq!(hit.normal, [1.0, 0.0, 0.0]);
}

#[test]
fn nearest_primitive_wins() {
    let mut spec = sphere_at_origin(0.2);
    spec.primitives.push(Primitive {
        shape: Shape::Sphere { radius: 0.2 },
        albedo: [0.0, 1.0, 0.0],
        center: [0.0, 0.0, 0.5],
        motion: Motion::Static,
    });
    let ray = Ray {
        origin: [0.0, 0.0, 4.0],
        dir: [0.0, 0.0, -1.0],
    };
    assert_eq!(intersect(&spec, &ray, 0.0).unwrap().primitive, 1);
}

#[test]
fn silhouette_area_matches_projection() {
    let r = 0.4;
    let z = 4.0;
    let spec = sphere_at_origin(r);
    let cam = Camera::look_at(200, 200, 0.6911, [0.0, 0.0, z], [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
    let img = oracle_render(&spec, &cam, 0.0, Parallelism::Sequential).unwrap();
    let covered = (0..200 * 200)
        .filter(|&i| img.data[3 * i..3 * i + 3] != [1.0, 1.0, 1.0])
        .count() as Real;
    let f = cam.focal();
    let radius_px = f * r / (z * z - r * r).sqrt();
    let expected = std::f64::consts::PI as Real * radius_px * radius_px;
    assert!((covered - expected).abs() / expected < 0.02, "{covered} vs {expected}");
}

#[test]
fn specular_highlight_brightens_and_stays_bounded() {
    let mut spec = sphere_at_origin(0.5);
    let ray = Ray {
        origin: [0.0, 0.0, 4.0],
        dir: [0.0, 0.0, -1.0],
    };
    let flat = shade(&spec, &ray, 0.0);
    spec.specular = true;
    let shiny = shade(&spec, &ray, 0.0);
    for k in 0..3 {
        assert!((shiny[k] - (flat[k] + 0.3).min(1.0)).abs() < 1e-12);
    }
}

#[test]
fn motion_tracks_are_zero_at_canonical_time() {
    let tracks = [
        Motion::Static,
        Motion::Sinusoidal {
            amplitude: [0.3, 0.2, 0.1],
            frequency: 0.7,
        },
        Motion::Linear {
            keyframes: vec![(0.0, [0.5, 0.0, 0.0]), (1.0, [0.0; 3])],
        },
    ];
    for m in &tracks {
        for v in m.offset(1.0) {
            assert!(v.abs() < 1e-12);
        }
    }
    let lin = &tracks[2];
    assert!((lin.offset(0.5)[0] - 0.25).abs() < 1e-12);
    assert_eq!(lin.offset(-1.0), [0.5, 0.0, 0.0]);
}

#[test]
fn bounds_validation() {
    assert!(SceneSpec::moving_sphere().validate().is_ok());
    let mut spec = sphere_at_origin(0.5);
    spec.primitives[0].motion = Motion::Sinusoidal {
        amplitude: [0.6, 0.0, 0.0],
        frequency: 0.5,
    };
    assert!(spec.validate().is_err());
    let mut none = sphere_at_origin(0.5);
    none.primitives.clear();
    assert!(none.validate().is_err());
    let mut unsorted = sphere_at_origin(0.2);
    unsorted.primitives[0].motion = Motion::Linear {
        keyframes: vec![(0.5, [0.0; 3]), (0.2, [0.0; 3])],
    };
    assert!(unsorted.validate().is_err());
}

#[test]
fn spec_json_round_trip() {
    let spec = SceneSpec::moving_sphere();
    let text = serde_json::to_string(&spec).unwrap();
    let back: SceneSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
    let minimal = r#"{"primitives":[{"shape":{"sphere":{"radius":0.3}},"albedo":[1,0,0],"center":[0,0,0]}],"light_dir":[0,1,0]}"#;
    let parsed: SceneSpec = serde_json::from_str(minimal).unwrap();
    assert_eq!(parsed.background, [1.0; 3]);
    assert_eq!(parsed.primitives[0].motion, Motion::Static);
}

#[test]
fn generation_writes_every_frame_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::moving_sphere();
    let ds = generate_dataset(&spec, &small_opts(5, 8), dir.path(), Parallelism::Sequential).unwrap();
    assert_eq!(ds.len(), 40);
    for i in 0..40 {
        assert!(dir.path().join(format!("train/r_{i}.png")).exists());
    }
    assert_eq!(ds.times().len(), 8);
    assert_eq!(ds.frames[7].time, ds.frames[5].time);
    assert!((ds.frames[39].time - 1.0).abs() < 1e-15);
    assert!(dir.path().join("transforms_train.json").exists());
    assert!(dir.path().join("transforms_test.json").exists());
    assert!(dir.path().join(SCENE_FILE).exists());
    let test = load_split(dir.path(), Split::Test, spec.background).unwrap();
    assert_eq!(test.len(), spec.capture.test_views * 8);
    let (s, o) = load_scene_record(dir.path()).unwrap();
    assert_eq!(s, spec);
    assert_eq!(o, small_opts(5, 8));
}

#[test]
fn generation_is_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = SceneSpec::moving_sphere();
    generate_dataset(&spec, &small_opts(3, 2), a.path(), Parallelism::Sequential).unwrap();
    generate_dataset(&spec, &small_opts(3, 2), b.path(), Parallelism::Threads).unwrap();
    for name in ["transforms_train.json", "transforms_test.json", "train/r_0.png", "train/r_5.png", "test/r_1.png"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn round_trip_preserves_poses_and_times() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::moving_sphere();
    let ds = generate_dataset(&spec, &small_opts(4, 3), dir.path(), Parallelism::Sequential).unwrap();
    let back = load_dataset(dir.path(), spec.background).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!((back.width, back.height), (8, 6));
    for (a, b) in ds.frames.iter().zip(&back.frames) {
        assert_eq!(a.time, b.time);
        for i in 0..4 {
            for j in 0..4 {
                assert!((a.camera.c2w[i][j] - b.camera.c2w[i][j]).abs() < 1e-9);
            }
        }
        for (x, y) in a.image.data.iter().zip(&b.image.data) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn identity_transform_loads() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("train")).unwrap();
    crate::renderer::Image::filled(4, 3, [0.2, 0.4, 0.6])
        .save_png(&dir.path().join("train/a.png"))
        .unwrap();
    let meta = serde_json::json!({
        "camera_angle_x": 0.5,
        "frames": [{
            "file_path": "./train/a",
            "time": 0.0,
            "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]],
        }],
    });
    std::fs::write(dir.path().join("transforms_train.json"), meta.to_string()).unwrap();
    let ds = load_dataset(dir.path(), [1.0; 3]).unwrap();
    let cam = &ds.frames[0].camera;
    assert_eq!(cam.origin(), [0.0; 3]);
    assert_eq!(cam.forward(), [0.0, 0.0, -1.0]);
    assert_eq!((cam.width, cam.height), (4, 3));
}

#[test]
fn malformed_metadata_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let write = |v: serde_json::Value| std::fs::write(dir.path().join("transforms_train.json"), v.to_string()).unwrap();
    write(serde_json::json!({"frames": []}));
    let e = load_dataset(dir.path(), [1.0; 3]).unwrap_err().to_string();
    assert!(e.contains("camera_angle_x"), "{e}");
    write(serde_json::json!({"camera_angle_x": 0.5, "frames": [{"file_path": "x", "time": 0.0}]}));
    let e = load_dataset(dir.path(), [1.0; 3]).unwrap_err().to_string();
    assert!(e.contains("transform_matrix"), "{e}");
    write(serde_json::json!({"camera_angle_x": 0.5, "frames": [{"file_path": "x", "time": "a", "transform_matrix": []}]}));
    let e = load_dataset(dir.path(), [1.0; 3]).unwrap_err().to_string();
    assert!(e.contains("frames[0].time"), "{e}");
}

#[test]
fn out_of_range_times_are_rescaled() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("train")).unwrap();
    let id = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]];
    let mut frames = Vec::new();
    for (i, t) in [2.0, 4.0, 6.0].into_iter().enumerate() {
        crate::renderer::Image::filled(2, 2, [0.5; 3])
            .save_png(&dir.path().join(format!("train/{i}.png")))
            .unwrap();
        frames.push(serde_json::json!({"file_path": format!("train/{i}.png"), "time": t, "transform_matrix": id}));
    }
    let meta = serde_json::json!({"camera_angle_x": 0.5, "frames": frames});
    std::fs::write(dir.path().join("transforms_train.json"), meta.to_string()).unwrap();
    let ds = load_dataset(dir.path(), [1.0; 3]).unwrap();
    assert_eq!(ds.times(), vec![0.0, 0.5, 1.0]);
}

#[test]
fn test_cameras_sit_between_training_azimuths() {
    let cap = Capture::default();
    let train = orbit_cameras(&cap, 6, 4, 4, 3).unwrap();
    let test = test_cameras(&cap, 6, 4, 4).unwrap();
    assert_eq!(test.len(), cap.test_views);
    for t in &test {
        let [x, _, z] = t.origin();
        for c in &train {
            let [a, _, b] = c.origin();
            let gap = (z.atan2(x) - b.atan2(a)).rem_euclid(2.0 * std::f64::consts::PI as Real);
            let gap = gap.min(2.0 * std::f64::consts::PI as Real - gap);
            assert!(gap > 0.1, "test view too close to a training view");
        }
    }
}

proptest! {
    #[test]
    fn orbit_cameras_look_at_the_origin(views in 1usize..12, seed in any::<u64>()) {
        let cap = Capture::default();
        for cam in orbit_cameras(&cap, views, 4, 4, seed).unwrap() {
            let o = cam.origin();
            let f = cam.forward();
            let r = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
            prop_assert!((r - cap.radius).abs() < 1e-9);
            for k in 0..3 {
                prop_assert!((f[k] + o[k] / r).abs() < 1e-9);
            }
            let elevation = (o[1] / r).asin();
            prop_assert!(elevation >= cap.elevation[0] - 1e-9 && elevation <= cap.elevation[1] + 1e-9);
        }
    }

    #[test]
    fn shading_stays_in_unit_range(x in -0.9f64..0.9, y in -0.9f64..0.9, specular in any::<bool>()) {
        let mut spec = SceneSpec::moving_sphere();
        spec.specular = specular;
        let ray = Ray { origin: [x as Real, y as Real, 4.0], dir: [0.0, 0.0, -1.0] };
        for c in shade(&spec, &ray, 0.3) {
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}
