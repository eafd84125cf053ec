use super::*;
use crate::geometry::{box_mesh, Vec3};
use crate::renderer::tests::{camera, random_scene};
use crate::renderer::{render, RenderSettings};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..w * h * 3).map(|_| rng.random::<f64>()).collect()
}

#[test]
fn identical_images_have_zero_loss() {
    let x = random_image(13, 9, 1);
    let (l, g) = rendering_loss(&x, &x, 13, 9).unwrap();
    assert!(l.abs() < 1e-12, "{l}");
    assert!(g.iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn rendering_loss_rejects_mismatched_shapes() {
    let x = random_image(4, 4, 1);
    assert!(matches!(rendering_loss(&x, &x[..30], 4, 4), Err(Error::Shape(_))));
}

#[test]
fn constant_images_differ_only_by_l1_and_luminance() {
    let x = vec![0.5; 8 * 8 * 3];
    let y = vec![0.25; 8 * 8 * 3];
    let (l, _) = rendering_loss(&x, &y, 8, 8).unwrap();
    let (s, _) = ssim(&x, &y, 8, 8, false);
    assert!((l - (0.8 * 0.25 + 0.2 * (1.0 - s))).abs() < 1e-12);
    assert!(s < 1.0 && s > 0.0);
}

#[test]
fn blur_preserves_mass_in_the_interior() {
    let img = vec![1.0; 30 * 30];
    let b = blur(&img, 30, 30);
    assert!((b[15 * 30 + 15] - 1.0).abs() < 1e-12);
    assert!(b[0] < 0.5);
}

#[test]
fn rendering_loss_gradient_matches_finite_differences() {
    let (w, h) = (14, 11);
    let x = random_image(w, h, 3);
    let y = random_image(w, h, 4);
    let (_, g) = rendering_loss(&x, &y, w, h).unwrap();
    let eps = 1e-6;
    for i in (0..x.len()).step_by(7) {
        let mut xp = x.clone();
        xp[i] += eps;
        let mut xm = x.clone();
        xm[i] -= eps;
        let fd = (rendering_loss(&xp, &y, w, h).unwrap().0 - rendering_loss(&xm, &y, w, h).unwrap().0) / (2.0 * eps);
        assert!((fd - g[i]).abs() < 1e-7 + 1e-4 * fd.abs(), "{i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn depth_loss_example_and_empty_mask() {
    let d = depth_loss(&[1.0, 2.0, 3.0], &[1.0, 0.0, 2.0], None).unwrap();
    assert!((d.value - 0.5).abs() < 1e-12);
    assert_eq!(d.grad, vec![0.0, 0.0, 0.5]);
    assert!(!d.empty);
    let e = depth_loss(&[1.0, 2.0], &[0.0, 0.0], None).unwrap();
    assert!(e.empty && e.value == 0.0);
    let m = depth_loss(&[1.0, 2.0], &[3.0, 3.0], Some(&[false, true])).unwrap();
    assert!((m.value - 1.0).abs() < 1e-12);
    assert!(matches!(depth_loss(&[1.0], &[1.0, 2.0], None), Err(Error::Shape(_))));
}

fn floor_bvh() -> Bvh {
    Bvh::new(box_mesh(Vec3::new(-5.0, -5.0, -1.0), Vec3::new(5.0, 5.0, 0.0), false))
}

fn splat_with_normal_z(flip: bool) -> Gaussian2D {
    // Identity rotation has normal +z; a half turn about x gives -z.
    let rotation = if flip { [0.0, 1.0, 0.0, 0.0] } else { [1.0, 0.0, 0.0, 0.0] };
    Gaussian2D {
        center: Vec3::new(0.3, -0.2, 0.1),
        scales: [0.1, 0.1],
        rotation,
        opacity: 0.7,
        color: Vec3::new(0.5, 0.5, 0.5),
    }
}

#[test]
fn normal_loss_extremes() {
    let bvh = floor_bvh();
    let (aligned, _) = normal_loss(&[splat_with_normal_z(false)], &bvh).unwrap();
    let (opposed, _) = normal_loss(&[splat_with_normal_z(true)], &bvh).unwrap();
    assert!(aligned.abs() < 1e-12, "{aligned}");
    assert!((opposed - 2.0).abs() < 1e-12, "{opposed}");
}

#[test]
fn normal_loss_without_mesh_fails() {
    let bvh = Bvh::new(crate::geometry::TriMesh::default());
    assert!(matches!(normal_loss(&[], &bvh), Err(Error::MissingGroundTruth(_))));
}

#[test]
fn normal_loss_gradient_reaches_rotation_only() {
    let bvh = floor_bvh();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gs: Vec<Gaussian2D> = (0..6)
        .map(|_| {
            let mut q = [0.0; 4];
            q.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            Gaussian2D {
                center: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.2),
                scales: [0.1, 0.1],
                rotation: q.map(|v| v / n),
                opacity: rng.random_range(0.1..1.0),
                color: Vec3::zeros(),
            }
        })
        .collect();
    let (_, g) = normal_loss(&gs, &bvh).unwrap();
    assert!(g.center.iter().all(|c| c.norm() == 0.0));
    assert!(g.opacity.iter().all(|&o| o == 0.0));
    let eps = 1e-6;
    for i in 0..gs.len() {
        for c in 0..4 {
            let mut p = gs.clone();
            p[i].rotation[c] += eps;
            let mut m = gs.clone();
            m[i].rotation[c] -= eps;
            let fd = (normal_loss(&p, &bvh).unwrap().0 - normal_loss(&m, &bvh).unwrap().0) / (2.0 * eps);
            assert!((fd - g.rotation[i][c]).abs() < 1e-6, "{i},{c}: {fd} vs {}", g.rotation[i][c]);
        }
    }
}

fn distortion_oracle(w: &[f64], z: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..w.len() {
        for j in 0..w.len() {
            s += w[i] * w[j] * (z[i] - z[j]).abs();
        }
    }
    s
}

#[test]
fn distortion_two_fragment_example() {
    let (d, _, _) = ray_distortion(&[0.5, 0.25], &[1.0, 2.0]);
    assert!((d - 0.25).abs() < 1e-15);
    let (single, dw, dz) = ray_distortion(&[0.9], &[3.0]);
    assert_eq!((single, dw[0], dz[0]), (0.0, 0.0, 0.0));
}

#[test]
fn distortion_gradient_matches_finite_differences() {
    let w = [0.2, 0.5, 0.1, 0.7];
    let z = [2.0, 1.0, 3.5, 1.7];
    let (_, dw, dz) = ray_distortion(&w, &z);
    let eps = 1e-7;
    for i in 0..4 {
        let mut wp = w;
        wp[i] += eps;
        let mut wm = w;
        wm[i] -= eps;
        let fd = (distortion_oracle(&wp, &z) - distortion_oracle(&wm, &z)) / (2.0 * eps);
        assert!((fd - dw[i]).abs() < 1e-6);
        let mut zp = z;
        zp[i] += eps;
        let mut zm = z;
        zm[i] -= eps;
        let fd = (distortion_oracle(&w, &zp) - distortion_oracle(&w, &zm)) / (2.0 * eps);
        assert!((fd - dz[i]).abs() < 1e-6);
    }
}

#[test]
fn distortion_loss_on_a_render_averages_opaque_rays() {
    let gs = random_scene(40, 5);
    let view = camera(24, 20);
    let out = render(&gs, &view, &RenderSettings::default());
    let (v, g) = distortion_loss(&out);
    assert_eq!(g.weight.len(), out.fragments.len());
    let mut sum = 0.0;
    let mut rays = 0;
    for p in 0..out.pixels() {
        if out.alpha[p] > 0.5 {
            let r = out.fragments.pixel(p);
            let w: Vec<f64> = r.clone().map(|k| out.fragments.alpha[k] * out.fragments.trans[k]).collect();
            sum += distortion_oracle(&w, &out.fragments.z[r]);
            rays += 1;
        }
    }
    assert!(rays > 0);
    assert!((v - sum / rays as f64).abs() < 1e-12);
}

#[test]
fn bce_examples() {
    let (l, _) = bce(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
    assert!(l < 1e-5 && l >= 0.0);
    let (l, _) = bce(&[0.0], &[1.0]).unwrap();
    assert!((l - (1e6f64).ln()).abs() < 1e-6);
    let (l, g) = bce(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-12);
    assert!((g[0] + 1.0).abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12);
    assert!(matches!(bce(&[0.5], &[]), Err(Error::Shape(_))));
}

#[test]
fn occupancy_loss_checks_levels() {
    use crate::voxel_grid::VoxelKey;
    let key = VoxelKey { i: 0, j: 0, k: 0 };
    let pred = SparseGrid::from_parts(0.1, 1, 0, vec![key], vec![], vec![0.9]).unwrap();
    let gt0 = SparseGrid::from_parts(0.05, 0, 0, vec![key], vec![], vec![1.0]).unwrap();
    assert!(matches!(occupancy_loss(&pred, &gt0), Err(Error::Key(_))));
    let gt1 = SparseGrid::from_parts(0.1, 1, 0, vec![key], vec![], vec![1.0]).unwrap();
    let (l, _) = occupancy_loss(&pred, &gt1).unwrap();
    assert!((l + 0.9f64.ln()).abs() < 1e-12);
}

#[test]
fn default_loss_weights() {
    let s1 = LossWeights::stage1();
    assert_eq!((s1.color, s1.depth, s1.occupancy, s1.normal, s1.distortion), (1.0, 1.0, 1.0, 0.01, 10.0));
    let s2 = LossWeights::stage2();
    assert_eq!((s2.color, s2.depth, s2.normal, s2.distortion), (1.0, 1.0, 0.0, 10.0));
    let r = LossReport {
        color: 1.0,
        depth: 2.0,
        normal: 3.0,
        distortion: 4.0,
        occupancy: 5.0,
        total: 0.0,
    };
    assert!((assemble_stage1(&r, &s1) - (1.0 + 2.0 + 5.0 + 0.03 + 40.0)).abs() < 1e-12);
    assert!((assemble_stage2(&r, &s2) - (1.0 + 2.0 + 40.0 + 5.0)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn distortion_matches_quadratic_oracle(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..10.0), 0..40)) {
        let w: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let z: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (d, _, _) = ray_distortion(&w, &z);
        let o = distortion_oracle(&w, &z);
        prop_assert!((d - o).abs() <= 1e-9 * (1.0 + o.abs()));
        prop_assert!(d >= -1e-12);
    }

    #[test]
    fn distortion_is_permutation_invariant(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..10.0), 1..20), rot in 0usize..20) {
        let w: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let z: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = rot % w.len();
        let mut w2 = w.clone();
        w2.rotate_left(r);
        let mut z2 = z.clone();
        z2.rotate_left(r);
        let (a, _, _) = ray_distortion(&w, &z);
        let (b, _, _) = ray_distortion(&w2, &z2);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn rendering_loss_is_nonnegative(seed in 0u64..1000) {
        let x = random_image(12, 12, seed);
        let y = random_image(12, 12, seed + 1);
        let (l, _) = rendering_loss(&x, &y, 12, 12).unwrap();
        prop_assert!(l >= 0.0);
    }
}
