use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{box_mesh, Mat3};
use crate::renderer::tests::camera;
use crate::scene_io::Pose;

fn plane_volume() -> (TsdfVolume, View, Vec<f64>) {
    let view = camera(32, 24);
    let depth = vec![1.0; 32 * 24];
    let bbox = Aabb::new(Vec3::new(-0.2, -0.15, 0.7), Vec3::new(0.2, 0.15, 1.3));
    let mut vol = TsdfVolume::new(&bbox, TsdfConfig::default()).unwrap();
    vol.integrate(&depth, None, &view).unwrap();
    (vol, view, depth)
}

#[test]
fn plane_zero_crossing_is_within_half_a_voxel() {
    let (vol, _, _) = plane_volume();
    let h = vol.cfg.voxel;
    let [nx, ny, nz] = vol.dims;
    let mut columns = 0;
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..nz - 1 {
                let (a, b) = (vol.cell(i, j, k), vol.cell(i, j, k + 1));
                if a.weight > 0.0 && b.weight > 0.0 && a.sdf >= 0.0 && b.sdf < 0.0 {
                    let z = vol.point(i, j, k).z + h * a.sdf / (a.sdf - b.sdf);
                    assert!((z - 1.0).abs() <= 0.5 * h, "column ({i},{j}) crosses at {z}");
                    columns += 1;
                }
            }
        }
    }
    assert!(columns > 100, "only {columns} columns crossed");
    let mesh = vol.extract_mesh();
    assert!(!mesh.faces.is_empty());
    for v in &mesh.vertices {
        assert!((v.z - 1.0).abs() <= 0.5 * h, "vertex at z {}", v.z);
    }
}

#[test]
fn integrating_twice_keeps_sdf_and_doubles_weight() {
    let (once, view, depth) = plane_volume();
    let mut twice = once.clone();
    twice.integrate(&depth, None, &view).unwrap();
    for (a, b) in once.cells.iter().zip(&twice.cells) {
        assert_eq!(a.sdf, b.sdf);
        assert_eq!(2.0 * a.weight, b.weight);
    }
}

#[test]
fn invalid_depth_leaves_the_volume_unchanged() {
    let (vol, view, _) = plane_volume();
    let mut v2 = vol.clone();
    v2.integrate(&vec![0.0; 32 * 24], None, &view).unwrap();
    assert_eq!(vol, v2);
    let mut v3 = vol.clone();
    v3.integrate(&vec![1.0; 32 * 24], Some(&vec![0.2; 32 * 24]), &view).unwrap();
    assert_eq!(vol, v3);
    assert!(matches!(v3.integrate(&[1.0], None, &view), Err(Error::Shape(_))));
}

fn orbit_view(angle: f64, w: usize, h: usize) -> View {
    let mut v = camera(w, h);
    let c = Vec3::new(2.0 * angle.sin(), 2.0 * angle.cos(), 0.3);
    let fwd = (-c).normalize();
    let right = fwd.cross(&Vec3::z()).normalize();
    let down = fwd.cross(&right);
    let r = Mat3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
    v.pose = Pose {
        rotation: r,
        translation: -(r * c),
    };
    v
}

#[test]
fn fusion_is_order_invariant() {
    let cube = box_mesh(Vec3::repeat(-0.3), Vec3::repeat(0.3), false);
    let bvh = Bvh::new(cube);
    let views: Vec<View> = (0..4).map(|i| orbit_view(i as f64 * 1.3, 40, 30)).collect();
    let depths: Vec<Vec<f64>> = views.iter().map(|v| mesh_depth(&bvh, v)).collect();
    let bbox = Aabb::new(Vec3::repeat(-0.4), Vec3::repeat(0.4));
    let cfg = TsdfConfig {
        voxel: 0.05,
        ..TsdfConfig::default()
    };
    let run = |order: &[usize]| {
        let mut vol = TsdfVolume::new(&bbox, cfg).unwrap();
        for &i in order {
            vol.integrate(&depths[i], None, &views[i]).unwrap();
        }
        vol
    };
    let a = run(&[0, 1, 2, 3]);
    let b = run(&[3, 1, 0, 2]);
    assert!(a.cells.iter().any(|c| c.weight > 1.0));
    for (x, y) in a.cells.iter().zip(&b.cells) {
        assert_eq!(x.weight, y.weight);
        assert!((x.sdf - y.sdf).abs() < 1e-9);
    }
}

fn sphere(spacing: f64, sign: f64) -> SampledField {
    let n = (1.4 / spacing).round() as usize + 1;
    // Offset so no lattice point sits exactly on the sphere.
    SampledField::from_fn(Vec3::repeat(-0.7137), spacing, [n + 1; 3], |p| sign * (p.norm() - 0.5))
}

/// Directed edge multiset must pair every edge with its reverse.
fn assert_closed_oriented(mesh: &TriMesh) {
    let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
    for f in &mesh.faces {
        for k in 0..3 {
            *edges.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
        }
    }
    for (&(a, b), &n) in &edges {
        assert_eq!(n, 1, "edge ({a},{b}) used {n} times in one direction");
        assert_eq!(edges.get(&(b, a)), Some(&1), "edge ({a},{b}) has no twin");
    }
}

#[test]
fn sphere_vertices_lie_on_the_sphere() {
    let h = 0.05;
    let mesh = marching_cubes(&sphere(h, 1.0), 0.0);
    assert!(mesh.faces.len() > 500);
    let errs: Vec<f64> = mesh.vertices.iter().map(|v| (v.norm() - 0.5).abs()).collect();
    let max = errs.iter().cloned().fold(0.0, f64::max);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(max < h, "max radius error {max}");
    assert!(mean < 0.25 * h, "mean radius error {mean}");
    assert_closed_oriented(&mesh);
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        let n = (b - a).cross(&(c - a));
        assert!(n.dot(&((a + b + c) / 3.0)) > -1e-12, "face {f} points inward");
    }
}

#[test]
fn all_positive_field_gives_an_empty_mesh() {
    let f = SampledField::from_fn(Vec3::zeros(), 0.1, [5, 5, 5], |_| 1.0);
    assert!(marching_cubes(&f, 0.0).is_empty());
}

#[test]
fn flipping_the_sign_inverts_winding() {
    let a = marching_cubes(&sphere(0.1, 1.0), 0.0);
    let b = marching_cubes(&sphere(0.1, -1.0), 0.0);
    assert_eq!(a.vertices.len(), b.vertices.len());
    assert_eq!(a.faces.len(), b.faces.len());
    assert!(!a.faces.is_empty());
    for (f, g) in a.faces.iter().zip(&b.faces) {
        let pa = [f[0], f[2], f[1]].map(|i| a.vertices[i as usize]);
        let pb = g.map(|i| b.vertices[i as usize]);
        assert_eq!(pa, pb);
    }
}

#[test]
fn random_fields_give_closed_meshes_in_the_interior() {
    // A noisy field that is positive on the lattice boundary closes everywhere.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 9;
    let mut vals = vec![1.0; n * n * n];
    for k in 1..n - 1 {
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                vals[(k * n + j) * n + i] = rng.random_range(-1.0..1.0);
            }
        }
    }
    let f = SampledField {
        origin: Vec3::zeros(),
        spacing: 1.0,
        dims: [n; 3],
        values: vals,
    };
    let mesh = marching_cubes(&f, 0.0);
    assert!(!mesh.faces.is_empty());
    assert_closed_oriented(&mesh);
}

fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
        .collect()
}

#[test]
fn chamfer_matches_brute_force() {
    for seed in 0..5 {
        let (a, b) = (cloud(100, seed), cloud(100, seed + 100));
        let fast = chamfer(&a, &b).unwrap();
        let slow = chamfer_brute(&a, &b).unwrap();
        assert!((fast - slow).abs() < 1e-9);
        assert!((fast - chamfer(&b, &a).unwrap()).abs() < 1e-12);
    }
    let a = cloud(50, 9);
    assert_eq!(chamfer(&a, &a), Some(0.0));
    assert_eq!(chamfer(&a, &[]), None);
}

#[test]
fn kdtree_nearest_matches_brute_force() {
    let pts = cloud(500, 1);
    let tree = KdTree::new(&pts);
    for q in cloud(200, 2) {
        let best = pts.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
        assert_eq!(tree.nearest_dist2(&q), Some(best));
    }
    assert_eq!(KdTree::new(&[]).nearest_dist2(&Vec3::zeros()), None);
}

fn eval_scene() -> SceneBundle {
    let mesh = box_mesh(Vec3::repeat(-1.0), Vec3::repeat(1.0), true).subdivided(0.5);
    let bvh = Bvh::new(mesh.clone());
    let mut view = camera(16, 12);
    view.name = "heldout_0.png".into();
    view.gt_depth = Some(mesh_depth(&bvh, &view));
    SceneBundle {
        views: vec![view],
        points: Vec::new(),
        gt_mesh: Some(mesh),
        bbox: Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0)),
    }
}

#[test]
fn perfect_prediction_scores_perfectly() {
    let scene = eval_scene();
    let gt = scene.views[0].gt_depth.clone().unwrap();
    let r = evaluate(scene.gt_mesh.as_ref().unwrap(), &[(0, gt)], &scene).unwrap();
    assert_eq!(r.abs_err, 0.0);
    assert_eq!([r.acc_2cm, r.acc_5cm, r.acc_10cm], [1.0; 3]);
    assert_eq!(r.chamfer, 0.0);
    assert!(r.table().contains("Abs Err"));
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
}

#[test]
fn constant_depth_bias_is_reported_exactly() {
    let scene = eval_scene();
    let gt = scene.views[0].gt_depth.clone().unwrap();
    let biased: Vec<f64> = gt.iter().map(|d| d + 0.03).collect();
    let r = evaluate(scene.gt_mesh.as_ref().unwrap(), &[(0, biased)], &scene).unwrap();
    assert!((r.abs_err - 0.03).abs() < 1e-12);
    assert_eq!(r.acc_2cm, 0.0);
    assert_eq!(r.acc_5cm, 1.0);
}

#[test]
fn evaluation_requires_ground_truth() {
    let mut scene = eval_scene();
    let gt = scene.views[0].gt_depth.clone().unwrap();
    let mesh = scene.gt_mesh.take().unwrap();
    assert!(matches!(
        evaluate(&mesh, &[(0, gt.clone())], &scene),
        Err(Error::MissingGroundTruth(_))
    ));
    scene.gt_mesh = Some(mesh.clone());
    scene.views[0].gt_depth = None;
    assert!(matches!(evaluate(&mesh, &[(0, gt)], &scene), Err(Error::MissingGroundTruth(_))));
}

#[test]
fn predicted_vertices_outside_the_bounds_are_cropped() {
    let scene = eval_scene();
    let gt = scene.views[0].gt_depth.clone().unwrap();
    let mut pred = scene.gt_mesh.clone().unwrap();
    pred.vertices.push(Vec3::repeat(5.0));
    let r = evaluate(&pred, &[(0, gt)], &scene).unwrap();
    assert_eq!(r.chamfer, 0.0);
}

proptest! {
    #[test]
    fn accuracies_are_monotone(errs in proptest::collection::vec(-0.3f64..0.3, 1..200)) {
        let gt = vec![1.0; errs.len()];
        let pred: Vec<f64> = errs.iter().map(|e| 1.0 + e).collect();
        let m = depth_metrics(&[(&pred, &gt)]).unwrap();
        prop_assert!(m.acc[0] <= m.acc[1] && m.acc[1] <= m.acc[2]);
        prop_assert!(m.acc.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn chamfer_is_symmetric(seed in 0u64..1000, n in 1usize..40, m in 1usize..40) {
        let (a, b) = (cloud(n, seed), cloud(m, seed ^ 77));
        prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-12);
    }
}
