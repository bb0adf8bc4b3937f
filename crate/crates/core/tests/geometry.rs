use mvstr_core::camera::{look_at, unproject_depth, Camera};
use mvstr_core::hypotheses::DepthHypotheses;
use mvstr_core::synth::{render_scene, toy_specs, Geometry, SceneSpec};
use mvstr_core::warp::build_warp_grid;
use mvstr_tensor::Tape;
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_camera(rng: &mut ChaCha8Rng, size: f64) -> Camera {
    let eye = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-4.0..-2.5));
    let target = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let (r, t) = look_at(&eye, &target).unwrap();
    let roll = Rotation3::from_axis_angle(&Vector3::z_axis(), rng.gen_range(-0.2..0.2));
    let r = roll.matrix() * r;
    let t = roll.matrix() * t;
    let f = size * rng.gen_range(0.8..1.4);
    let k = Matrix3::new(
        f,
        rng.gen_range(-0.5..0.5),
        size / 2.0 + rng.gen_range(-2.0..2.0),
        0.0,
        f * rng.gen_range(0.95..1.05),
        size / 2.0 + rng.gen_range(-2.0..2.0),
        0.0,
        0.0,
        1.0,
    );
    Camera::new(k, r, t, 1.5, 5.0).unwrap()
}

/// Plane-induced homography for the fronto-parallel reference plane `z = d`.
fn homography(reference: &Camera, source: &Camera, d: f64) -> Matrix3<f64> {
    let r_rel = source.r * reference.r.transpose();
    let t_rel = source.t - r_rel * reference.t;
    let n = Vector3::new(0.0, 0.0, 1.0);
    source.k * (r_rel + t_rel * n.transpose() / d) * reference.k.try_inverse().unwrap()
}

#[test]
fn warp_grid_matches_plane_homographies_on_random_rigs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let size = 24usize;
    let mut worst = 0.0f64;
    let mut compared = 0;
    for _ in 0..20 {
        let reference = random_camera(&mut rng, size as f64);
        let source = random_camera(&mut rng, size as f64);
        let planes: Vec<f64> = (0..6).map(|_| rng.gen_range(1.5..5.0)).collect();
        let hyp = DepthHypotheses::broadcast(&planes, size, size, 1);
        let grid = build_warp_grid(&reference, &source, &hyp).unwrap();
        for (d, &depth) in planes.iter().enumerate() {
            let h = homography(&reference, &source, depth);
            for v in 0..size {
                for u in 0..size {
                    let q = h * Vector3::new(u as f64, v as f64, 1.0);
                    if grid.valid.get(&[d, v, u]) == 0.0 {
                        continue;
                    }
                    let (x, y) = (q.x / q.z, q.y / q.z);
                    worst = worst.max((grid.coords.get(&[d, v, u, 0]) - x).abs());
                    worst = worst.max((grid.coords.get(&[d, v, u, 1]) - y).abs());
                    compared += 1;
                }
            }
        }
    }
    assert!(compared > 1000, "only {compared} valid samples");
    assert!(worst < 1e-4, "worst deviation {worst} px");
}

#[test]
fn identical_cameras_give_the_pixel_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = random_camera(&mut rng, 16.0);
    let hyp = DepthHypotheses::broadcast(&[2.0, 3.0, 4.5], 16, 16, 1);
    let grid = build_warp_grid(&cam, &cam, &hyp).unwrap();
    for d in 0..3 {
        for v in 0..16 {
            for u in 0..16 {
                assert_eq!(grid.coords.get(&[d, v, u, 0]), u as f64);
                assert_eq!(grid.coords.get(&[d, v, u, 1]), v as f64);
            }
        }
    }
}

#[test]
fn unprojected_gt_depth_lies_on_the_plane() {
    let point = Vector3::new(0.1, -0.2, 0.3);
    let normal = Vector3::new(0.2, -0.1, -1.0).normalize();
    let spec = SceneSpec {
        geometry: Geometry::Plane {
            point: point.into(),
            normal: normal.into(),
        },
        ..SceneSpec::default()
    };
    for view in render_scene(&spec).unwrap() {
        let pts = unproject_depth(&view.camera, &view.depth).unwrap();
        let mut n = 0;
        for (i, &ok) in view.valid.data().iter().enumerate() {
            if ok > 0.0 {
                let p = &pts.data()[3 * i..3 * i + 3];
                let x = Vector3::new(p[0], p[1], p[2]);
                assert!((x - point).dot(&normal).abs() < 1e-9);
                n += 1;
            }
        }
        assert_eq!(n, 64 * 64);
    }
}

/// Warps a source image into the reference with the reference's true depth,
/// over the pixels both cameras see.
fn gt_warp_error(spec: &SceneSpec) -> f64 {
    let views = render_scene(spec).unwrap();
    let (h, w) = (spec.height, spec.width);
    let reference = &views[0];
    let mut total = 0.0;
    let mut count = 0usize;
    for source in &views[1..] {
        let hyp = DepthHypotheses {
            values: reference.depth.reshape(vec![1, h, w]).unwrap(),
            stage: 1,
        };
        let grid = build_warp_grid(&reference.camera, &source.camera, &hyp).unwrap();
        let tape = Tape::<f64>::new();
        let img = tape.constant(source.image.reshape(vec![1, 3, h, w]).unwrap());
        let src_depth = tape.constant(source.depth.reshape(vec![1, 1, h, w]).unwrap());
        let coords = tape.constant(grid.coords.reshape(vec![1, h, w, 2]).unwrap());
        let warped = img.grid_sample(coords).unwrap().0.value();
        let seen_depth = src_depth.grid_sample(coords).unwrap().0.value();
        for v in 0..h {
            for u in 0..w {
                if reference.valid.get(&[v, u]) == 0.0 || grid.valid.get(&[0, v, u]) == 0.0 {
                    continue;
                }
                let x = reference.camera.unproject(u as f64, v as f64, reference.depth.get(&[v, u])).unwrap();
                let z = source.camera.project(&x).2;
                if (seen_depth.get(&[0, 0, v, u]) - z).abs() > 1e-2 * z {
                    continue;
                }
                for c in 0..3 {
                    total += (warped.get(&[0, c, v, u]) - reference.image.get(&[c, v, u])).abs();
                    count += 1;
                }
            }
        }
    }
    assert!(count > 3 * h * w, "too little overlap");
    total / count as f64
}

#[test]
fn gt_depth_warp_reproduces_the_reference_image() {
    let mut scenes = toy_specs(64);
    scenes.extend([
        SceneSpec::default(),
        SceneSpec {
            seed: 4,
            geometry: Geometry::Plane {
                point: [0.0, 0.0, 0.2],
                normal: [0.3, 0.2, -1.0],
            },
            ..SceneSpec::default()
        },
        SceneSpec {
            seed: 9,
            geometry: Geometry::Sphere {
                center: [0.0, 0.0, 0.5],
                radius: 1.5,
            },
            ..SceneSpec::default()
        },
    ]);
    for spec in &scenes {
        let err = gt_warp_error(spec);
        assert!(err < 2.0 / 255.0, "{:?}: mean abs error {err}", spec.geometry);
    }
}

#[test]
fn camera_text_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cam = random_camera(&mut rng, 32.0);
    let back = Camera::from_text(&cam.to_text()).unwrap();
    assert_eq!(back, cam);
}

#[test]
fn unproject_then_project_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let cam = random_camera(&mut rng, 32.0);
        let (u, v, d) = (rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0), rng.gen_range(1.0..6.0));
        let x = cam.unproject(u, v, d).unwrap();
        let (pu, pv, pz) = cam.project(&x);
        assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9 && (pz - d).abs() < 1e-12);
    }
}
