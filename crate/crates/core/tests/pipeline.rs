use meshcorr::autodiff::{ParamStore, Tape, Tensor};
use meshcorr::groundtruth::{compute_gt, GroundTruthConfig};
use meshcorr::network::{FeatureSelection, Model, ModelOptions};
use meshcorr::raster::rasterize;
use meshcorr::scene::{CameraPose, Mesh};
use meshcorr::synthetic::{apply_corruptions, default_intrinsics, generate, Corruption, Layout, Region, SceneSpec};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_head_model() -> Model<f32> {
    let opts = ModelOptions {
        zero_head: false,
        ..ModelOptions::default()
    };
    Model::build_with(FeatureSelection::ALL, 9, opts).unwrap()
}

#[test]
fn fronto_parallel_bias_gives_expected_error() {
    // reference plane at z = 2, camera surface pulled 0.5 m toward the camera
    let v = |x: f64, y: f64| Vector3::new(x, y, 2.0);
    let mesh = Mesh::new(
        vec![v(-5.0, -5.0), v(5.0, -5.0), v(5.0, 5.0), v(-5.0, 5.0)],
        vec![],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap();
    let layout = Layout { mesh, obstacles: vec![] };
    let everything = Region::new(Vector3::repeat(-10.0), Vector3::repeat(10.0));
    let camera_mesh = apply_corruptions(&layout, &[Corruption::depth_bias(0.5, everything)]).unwrap();

    let intr = default_intrinsics();
    let pose = CameraPose::identity();
    let cam = rasterize(&camera_mesh, &pose, &intr);
    let laser = rasterize(&layout.mesh, &pose, &intr);
    let gt = compute_gt(&cam, &laser, &GroundTruthConfig::default()).unwrap();
    assert_eq!(gt.mask.count(), intr.width * intr.height);
    let expected = 1.0 / 1.5 - 1.0 / 2.0;
    for &d in gt.delta.data() {
        assert!((d - expected).abs() < 1e-6, "{d} vs {expected}");
    }
}

#[test]
fn holes_are_excluded_from_the_target_mask() {
    let scene = generate(&SceneSpec::street(2)).unwrap();
    let intr = default_intrinsics();
    let mut hole_pixels = 0;
    for pose in scene.trajectory.poses() {
        let cam = rasterize(&scene.camera, pose, &intr);
        let laser = rasterize(&scene.laser, pose, &intr);
        let gt = compute_gt(&cam, &laser, &GroundTruthConfig::default()).unwrap();
        for p in 0..gt.mask.data().len() {
            let joint = cam.mask.data()[p] && laser.mask.data()[p];
            assert_eq!(gt.mask.data()[p], joint);
            if !joint {
                assert_eq!(gt.delta.data()[p], 0.0);
            }
            if laser.mask.data()[p] && !cam.mask.data()[p] {
                hole_pixels += 1;
            }
        }
    }
    assert!(hole_pixels > 0, "the hole never shows up");
}

#[test]
fn removing_geometry_leaves_the_remaining_error_at_zero() {
    // a hole only deletes triangles, so wherever both renders still see
    // a surface it is the same surface
    let mut spec = SceneSpec::clean(4);
    spec.box_count = 0;
    let h = spec.camera_height;
    spec.corruptions = vec![Corruption::hole(Region::new(
        Vector3::new(-3.0, h - 0.5, 6.0),
        Vector3::new(3.0, h + 0.5, 30.0),
    ))];
    let scene = generate(&spec).unwrap();
    let intr = default_intrinsics();
    for pose in scene.trajectory.poses() {
        let cam = rasterize(&scene.camera, pose, &intr);
        let laser = rasterize(&scene.laser, pose, &intr);
        let gt = compute_gt(&cam, &laser, &GroundTruthConfig::default()).unwrap();
        assert!(gt.delta.data().iter().all(|&d| d == 0.0));
        assert!(gt.mask.count() < laser.mask.count());
    }
}

#[test]
fn corruptions_are_visible_in_several_frames() {
    let intr = default_intrinsics();
    for spec in [SceneSpec::bias_task(1), SceneSpec::street(1)] {
        let scene = generate(&spec).unwrap();
        let frames = scene
            .trajectory
            .poses()
            .iter()
            .filter(|pose| {
                let cam = rasterize(&scene.camera, pose, &intr);
                let laser = rasterize(&scene.laser, pose, &intr);
                let gt = compute_gt(&cam, &laser, &GroundTruthConfig::default()).unwrap();
                gt.delta.data().iter().any(|d| d.abs() > 1e-3)
            })
            .count();
        assert!(frames >= 3, "corruption visible in {frames} frames");
    }
}

#[test]
fn network_is_fully_convolutional() {
    let model = random_head_model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = model.predict(&random_tensor(&mut rng, [1, 128, 192, 10])).unwrap();
    assert_eq!(out.shape(), [1, 128, 192, 1]);
    assert!(out.all_finite());
    assert!(model.predict(&random_tensor(&mut rng, [1, 64, 100, 10])).is_err());
}

#[test]
fn batch_entries_are_independent() {
    let model = random_head_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let single = random_tensor(&mut rng, [1, 64, 96, 10]);
    let mut doubled = single.data().to_vec();
    doubled.extend_from_slice(single.data());
    let doubled = Tensor::from_vec([2, 64, 96, 10], doubled).unwrap();
    let a = model.predict(&single).unwrap();
    let b = model.predict(&doubled).unwrap();
    for half in b.data().chunks_exact(a.len()) {
        assert_eq!(half, a.data());
    }
}

#[test]
fn masked_pixels_do_not_affect_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2 * 4 * 6;
    let pred = Tensor::from_vec([2, 4, 6, 1], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let mut scrambled = target.clone();
    for (t, &m) in scrambled.iter_mut().zip(&mask) {
        if !m {
            *t = 1e3;
        }
    }
    let store = ParamStore::<f64>::new();
    let run = |target: &[f64]| {
        let mut tape = Tape::new(&store);
        let x = tape.input(pred.clone());
        let l = tape.berhu(x, target, &mask).unwrap();
        let loss = tape.value(l).data()[0];
        let g = tape.backward(l);
        (loss, g.input(x).unwrap().clone())
    };
    let (la, ga) = run(&target);
    let (lb, gb) = run(&scrambled);
    assert_eq!(la, lb);
    assert_eq!(ga, gb);
    for (g, &m) in ga.data().iter().zip(&mask) {
        if !m {
            assert_eq!(*g, 0.0);
        }
    }
}
