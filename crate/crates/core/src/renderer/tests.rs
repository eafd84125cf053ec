use super::*;
use crate::error::Error;
use crate::geometry::Mat3;
use crate::scene_io::{Intrinsics, Pose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) fn camera(w: usize, h: usize) -> View {
    View {
        name: "cam.png".into(),
        image: RgbImage::new(w, h),
        intrinsics: Intrinsics {
            fx: w as f64,
            fy: w as f64,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
        },
        pose: Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        },
        gt_depth: None,
        gt_normal: None,
    }
}

fn unit_q<R: Rng>(rng: &mut R) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// Splats in front of the camera, facing it within ±60°.
pub(crate) fn random_scene(n: usize, seed: u64) -> Vec<Gaussian2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut q = unit_q(&mut rng);
            if rotation_normal_z(&q).abs() < 0.5 {
                q = [1.0, 0.2 * q[1], 0.2 * q[2], q[3]];
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                q = q.map(|v| v / n);
            }
            Gaussian2D {
                center: Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4), rng.random_range(1.0..3.0)),
                scales: [rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)],
                rotation: q,
                opacity: rng.random_range(0.05..0.95),
                color: Vec3::new(rng.random(), rng.random(), rng.random()),
            }
        })
        .collect()
}

fn rotation_normal_z(q: &[f64; 4]) -> f64 {
    crate::splat_model::rotation_matrix(q)[(2, 2)]
}

fn facing(center: Vec3, opacity: f64, color: Vec3) -> Gaussian2D {
    Gaussian2D {
        center,
        scales: [0.1, 0.1],
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity,
        color,
    }
}

#[test]
fn ray_hits_disk_center() {
    let g = facing(Vec3::zeros(), 1.0, Vec3::zeros());
    let hit = ray_splat_intersect(&g, &Vec3::new(0.0, 0.0, -1.0), &Vec3::z(), 0.01).unwrap();
    assert_eq!(hit, Hit { u: 0.0, v: 0.0, z: 1.0 });
    let off = ray_splat_intersect(&g, &Vec3::new(0.1, 0.0, -1.0), &Vec3::z(), 0.01).unwrap();
    assert!((off.u - 1.0).abs() < 1e-12 && off.v.abs() < 1e-12);
    assert!(ray_splat_intersect(&g, &Vec3::new(0.0, 0.0, -1.0), &Vec3::x(), 0.01).is_none());
    assert!(ray_splat_intersect(&g, &Vec3::new(0.0, 0.0, 1.0), &Vec3::z(), 0.01).is_none());
}

#[test]
fn random_hits_lie_on_the_plane() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for g in random_scene(100, 3) {
        let o = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0);
        let d = (g.center - o + Vec3::new(rng.random_range(-0.1..0.1), 0.0, 0.0)).normalize();
        if let Some(h) = ray_splat_intersect(&g, &o, &d, 0.01) {
            assert!(g.normal().dot(&(o + d * h.z - g.center)).abs() < 1e-9);
        }
    }
}

#[test]
fn single_splat_composites_by_opacity() {
    // 1x1 image: the only ray goes through the splat center.
    let view = camera(1, 1);
    let g = facing(Vec3::new(0.0, 0.0, 2.0), 0.5, Vec3::new(1.0, 0.0, 0.0));
    let out = render(&[g], &view, &RenderSettings::default());
    assert!((out.color[0] - 0.5).abs() < 1e-15 && out.color[1] == 0.0 && out.color[2] == 0.0);
    assert!((out.alpha[0] - 0.5).abs() < 1e-15);
    assert!((out.depth[0] - 2.0).abs() < 1e-12);
}

#[test]
fn two_splats_follow_front_to_back_order() {
    let view = camera(1, 1);
    let red = facing(Vec3::new(0.0, 0.0, 1.0), 0.5, Vec3::new(1.0, 0.0, 0.0));
    let blue = facing(Vec3::new(0.0, 0.0, 2.0), 0.5, Vec3::new(0.0, 0.0, 1.0));
    let out = render(&[blue, red], &view, &RenderSettings::default());
    assert!((out.color[0] - 0.5).abs() < 1e-15);
    assert!((out.color[2] - 0.25).abs() < 1e-15);
    assert_eq!(out.fragments.trans, vec![1.0, 0.5]);
}

#[test]
fn empty_scene_is_black() {
    let out = render(&[], &camera(8, 6), &RenderSettings::default());
    assert!(out.color.iter().chain(&out.depth).chain(&out.alpha).all(|v| *v == 0.0));
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn tiled_matches_reference() {
    let view = camera(40, 33);
    for seed in 0..5 {
        let gs = random_scene(60, seed);
        let s = RenderSettings::default();
        let a = render(&gs, &view, &s);
        let b = render_reference(&gs, &view, &s);
        assert!(max_diff(&a.color, &b.color) < 1e-12);
        assert!(max_diff(&a.depth, &b.depth) < 1e-12);
        assert!(max_diff(&a.alpha, &b.alpha) < 1e-12);
        assert_eq!(a.fragments, b.fragments);
    }
}

#[test]
fn tiled_matches_reference_for_splats_crossing_the_near_plane() {
    let view = camera(40, 33);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..5 {
        let mut gs = random_scene(40, seed);
        // Large tilted splats around and behind the camera.
        for g in gs.iter_mut().take(15) {
            g.center = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.4..0.4));
            g.scales = [rng.random_range(0.1..0.6), rng.random_range(0.1..0.6)];
            g.rotation = unit_q(&mut rng);
        }
        let s = RenderSettings::default();
        let a = render(&gs, &view, &s);
        let b = render_reference(&gs, &view, &s);
        assert!(max_diff(&a.color, &b.color) < 1e-12);
        assert!(max_diff(&a.depth, &b.depth) < 1e-12);
        assert_eq!(a.fragments, b.fragments);
    }
}

#[test]
fn alpha_equals_one_minus_product_of_transmittances() {
    let view = camera(32, 24);
    let out = render(&random_scene(40, 9), &view, &RenderSettings::default());
    for p in 0..out.pixels() {
        let prod: f64 = out.fragments.pixel(p).map(|k| 1.0 - out.fragments.alpha[k]).product();
        assert!((out.alpha[p] - (1.0 - prod)).abs() < 1e-6);
        let t = &out.fragments.trans[out.fragments.pixel(p)];
        assert!(t.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn shuffling_input_order_changes_nothing() {
    let view = camera(32, 24);
    let gs = random_scene(30, 4);
    let mut rev = gs.clone();
    rev.reverse();
    let a = render(&gs, &view, &RenderSettings::default());
    let b = render(&rev, &view, &RenderSettings::default());
    assert_eq!(a.color, b.color);
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.alpha, b.alpha);
}

fn smooth() -> RenderSettings {
    RenderSettings {
        near: 0.01,
        cutoff: 1e3,
        min_alpha: 0.0,
        t_min: 0.0,
    }
}

/// Depth-separated splats around the optical axis so the fragment order is stable.
fn layered_scene(n: usize, seed: u64) -> Vec<Gaussian2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let q = [1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.5..0.5)];
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            Gaussian2D {
                center: Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 1.0 + 0.4 * i as f64),
                scales: [rng.random_range(0.15..0.3), rng.random_range(0.15..0.3)],
                rotation: q.map(|v| v / qn),
                opacity: rng.random_range(0.2..0.8),
                color: Vec3::new(rng.random(), rng.random(), rng.random()),
            }
        })
        .collect()
}

struct Probe {
    color: Vec<f64>,
    depth: Vec<f64>,
    normal: Vec<f64>,
    alpha: Vec<f64>,
}

impl Probe {
    fn new(px: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        Self {
            color: v(px * 3),
            depth: v(px),
            normal: v(px * 3),
            alpha: v(px),
        }
    }

    fn eval(&self, out: &RenderOutput) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&self.color, &out.color) + dot(&self.depth, &out.depth) + dot(&self.normal, &out.normal) + dot(&self.alpha, &out.alpha)
    }

    fn grads(&self) -> PixelGrads {
        PixelGrads {
            color: self.color.clone(),
            depth: self.depth.clone(),
            normal: self.normal.clone(),
            alpha: self.alpha.clone(),
        }
    }
}

fn perturb(gs: &[Gaussian2D], i: usize, p: usize, h: f64) -> Vec<Gaussian2D> {
    let mut gs = gs.to_vec();
    let g = &mut gs[i];
    match p {
        0..=2 => g.center[p] += h,
        3..=4 => g.scales[p - 3] += h,
        5..=8 => g.rotation[p - 5] += h,
        9 => g.opacity += h,
        _ => g.color[p - 10] += h,
    }
    gs
}

#[test]
fn gradients_match_central_differences() {
    let view = camera(12, 10);
    let s = smooth();
    for seed in 0..3 {
        let gs = layered_scene(4, seed);
        let probe = Probe::new(view.width() * view.height(), 100 + seed);
        let out = render(&gs, &view, &s);
        let g = render_backward(&gs, &view, &s, &out, &probe.grads(), None).unwrap();
        let flat = g.to_flat();
        let h = 1e-6;
        for i in 0..gs.len() {
            for p in 0..13 {
                let fp = probe.eval(&render(&perturb(&gs, i, p, h), &view, &s));
                let fm = probe.eval(&render(&perturb(&gs, i, p, -h), &view, &s));
                let fd = (fp - fm) / (2.0 * h);
                let an = flat[i * 13 + p];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-3, "splat {i} param {p}: fd {fd} analytic {an}");
            }
        }
    }
}

#[test]
fn fragment_weight_gradients_match_central_differences() {
    let view = camera(8, 8);
    let s = smooth();
    let gs = layered_scene(3, 7);
    let out = render(&gs, &view, &s);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ew: Vec<f64> = (0..out.fragments.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ez: Vec<f64> = (0..out.fragments.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    // L = Σ ew_k w_k + Σ ez_k z_k over the fixed fragment structure.
    let eval = |o: &RenderOutput| -> f64 {
        (0..o.fragments.len())
            .map(|k| ew[k] * o.fragments.alpha[k] * o.fragments.trans[k] + ez[k] * o.fragments.z[k])
            .sum()
    };
    let fg = FragmentGrads {
        weight: ew.clone(),
        depth: ez.clone(),
    };
    let g = render_backward(&gs, &view, &s, &out, &PixelGrads::default(), Some(&fg)).unwrap().to_flat();
    let h = 1e-6;
    for i in 0..gs.len() {
        for p in 0..13 {
            let a = render(&perturb(&gs, i, p, h), &view, &s);
            let b = render(&perturb(&gs, i, p, -h), &view, &s);
            assert_eq!(a.fragments.len(), out.fragments.len());
            let fd = (eval(&a) - eval(&b)) / (2.0 * h);
            let an = g[i * 13 + p];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-3, "splat {i} param {p}: fd {fd} analytic {an}");
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let view = camera(16, 12);
    let gs = random_scene(10, 2);
    let s = RenderSettings::default();
    let out = render(&gs, &view, &s);
    let g = render_backward(&gs, &view, &s, &out, &PixelGrads::zeros(16 * 12), None).unwrap();
    assert!(g.to_flat().iter().all(|v| *v == 0.0));
}

#[test]
fn terminated_fragments_get_no_gradient() {
    let view = camera(1, 1);
    let front = facing(Vec3::new(0.0, 0.0, 1.0), 1.0, Vec3::new(1.0, 0.0, 0.0));
    let back = facing(Vec3::new(0.0, 0.0, 2.0), 0.5, Vec3::new(0.0, 1.0, 0.0));
    let gs = [front, back];
    let s = RenderSettings::default();
    let out = render(&gs, &view, &s);
    assert_eq!(out.fragments.len(), 1);
    let g = render_backward(&gs, &view, &s, &out, &PixelGrads {
        color: vec![1.0, 1.0, 1.0],
        depth: vec![1.0],
        normal: vec![],
        alpha: vec![1.0],
    }, None)
    .unwrap();
    assert!(g.to_flat()[13..].iter().all(|v| *v == 0.0));
}

#[test]
fn stale_cache_is_detected() {
    let view = camera(8, 8);
    let mut gs = random_scene(5, 1);
    let s = RenderSettings::default();
    let out = render(&gs, &view, &s);
    gs[2].opacity *= 0.5;
    assert!(matches!(
        render_backward(&gs, &view, &s, &out, &PixelGrads::default(), None),
        Err(Error::StaleCache)
    ));
}

#[test]
fn single_splat_opacity_gradient_of_l2_color_loss() {
    let view = camera(6, 6);
    let s = RenderSettings::default();
    let gs = vec![Gaussian2D {
        center: Vec3::new(0.01, -0.02, 1.5),
        scales: [0.2, 0.15],
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity: 0.6,
        color: Vec3::new(0.3, 0.7, 0.2),
    }];
    let target: Vec<f64> = (0..6 * 6 * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    let loss = |o: &RenderOutput| o.color.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let out = render(&gs, &view, &s);
    let grads = PixelGrads {
        color: out.color.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect(),
        ..Default::default()
    };
    let g = render_backward(&gs, &view, &s, &out, &grads, None).unwrap();
    let h = 1e-4;
    let fd = (loss(&render(&perturb(&gs, 0, 9, h), &view, &s)) - loss(&render(&perturb(&gs, 0, 9, -h), &view, &s))) / (2.0 * h);
    assert!((fd - g.opacity[0]).abs() / fd.abs().max(1e-6) < 1e-3);
}

