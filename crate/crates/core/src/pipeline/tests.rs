use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{stage1_gradients, stage2_timestep};
use super::*;
use crate::geometry::Vec3;
use crate::renderer::tests::camera;
use crate::scene_io::{generate_synthetic_room, RoomSpec};

fn dec_cfg() -> DecoderConfig {
    DecoderConfig {
        feature_width: 32,
        hidden: 32,
        ..DecoderConfig::default()
    }
}

fn net_cfg() -> NetConfig {
    NetConfig::desk()
}

fn tiny_scene() -> PreparedScene {
    static SCENE: OnceLock<PreparedScene> = OnceLock::new();
    SCENE
        .get_or_init(|| {
            let spec = RoomSpec {
                size: [1.0, 0.8, 0.7],
                origin: [0.013, 0.007, 0.011],
                objects: 1,
                cameras: 4,
                width: 32,
                height: 24,
                holdout_every: 4,
                mesh_spacing: Some(0.05),
                seed: 5,
                ..RoomSpec::default()
            };
            let scene = generate_synthetic_room(&spec).unwrap();
            PreparedScene::new("tiny", scene, dec_cfg().voxel_edge).unwrap()
        })
        .clone()
}

fn models() -> Models {
    Models::new(net_cfg(), dec_cfg()).unwrap()
}

fn short_loop() -> LoopConfig {
    LoopConfig {
        densify_base: 200,
        ..LoopConfig::desk()
    }
}

#[test]
fn densification_counts_halve() {
    let c = LoopConfig::default();
    assert_eq!((0..5).map(|t| c.n_at(t)).collect::<Vec<_>>(), [20000, 10000, 5000, 2500, 1250]);
    assert_eq!(c.timesteps, 5);
    assert_eq!(c.views_per_accum, 100);
    let d = LoopConfig::desk();
    assert_eq!((d.n_at(0), d.n_at(1), d.n_at(2)), (2000, 1000, 500));
    assert_eq!(d.views_per_accum, 0);
    assert_eq!(c.n_at(200), 0);
    assert!(LoopConfig { timesteps: 0, ..c }.validate().is_err());
}

#[test]
fn accumulation_views_are_strided_and_deterministic() {
    let views: Vec<usize> = (0..10).collect();
    let all = LoopConfig::desk();
    assert_eq!(all.accum_views(&views, 3), views);
    let c = LoopConfig {
        views_per_accum: 3,
        ..all
    };
    assert_eq!(c.accum_views(&views, 0), [0, 3, 6]);
    assert_eq!(c.accum_views(&views, 1), [1, 4, 7]);
    assert_eq!(c.accum_views(&views, 1), c.accum_views(&views, 1));
}

fn keys(n: usize) -> Vec<VoxelKey> {
    (0..n as i32).map(|i| VoxelKey::new(i, 0, 0)).collect()
}

#[test]
fn inference_sampling_takes_the_top_occupancies() {
    let k = keys(3);
    assert_eq!(importance_sample(&k, &[0.9, 0.8, 0.1], 2, Sampling::Inference), [0, 1]);
    // Ties go to the smaller key.
    assert_eq!(importance_sample(&k, &[0.5, 0.5, 0.5], 2, Sampling::Inference), [0, 1]);
    assert_eq!(importance_sample(&k, &[0.2, 0.3, 0.1], 10, Sampling::Inference), [0, 1, 2]);
}

#[test]
fn train_sampling_skips_zero_weights_and_is_uniform_for_equal_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = keys(4);
    for _ in 0..200 {
        let s = importance_sample(&k, &[0.0, 0.7, 0.0, 0.2], 2, Sampling::Train(&mut rng));
        assert_eq!(s, [1, 3]);
    }
    let n = 10;
    let k = keys(n);
    let (trials, pick) = (10_000, 3);
    let mut counts = vec![0usize; n];
    for _ in 0..trials {
        let s = importance_sample(&k, &vec![0.4; n], pick, Sampling::Train(&mut rng));
        assert_eq!(s.len(), pick);
        s.iter().for_each(|&i| counts[i] += 1);
    }
    let p = pick as f64 / n as f64;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - trials as f64 * p).abs() < 3.0 * sigma, "count {c}");
    }
}

#[test]
fn train_sampling_prefers_higher_occupancy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = keys(2);
    let hits = (0..4000)
        .filter(|_| importance_sample(&k, &[0.8, 0.2], 1, Sampling::Train(&mut rng)) == [0])
        .count();
    // P(first) = 0.8 for a single draw.
    let sigma = (4000.0f64 * 0.8 * 0.2).sqrt();
    assert!((hits as f64 - 3200.0).abs() < 4.0 * sigma, "{hits}");
}

/// Five voxels in front of the test camera, random features.
fn five_voxel_grid(seed: u64) -> (SparseGrid, Aabb, DecoderParams) {
    let cfg = dec_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = [(0.0, 0.0), (0.05, 0.02), (-0.06, 0.03), (0.02, -0.05), (-0.03, -0.04)];
    let keys: Vec<VoxelKey> = pts
        .iter()
        .map(|&(x, y)| VoxelKey::containing(&Vec3::new(x, y, 0.5), cfg.voxel_edge))
        .collect();
    let n = keys.len();
    let f: Vec<f64> = (0..n * cfg.feature_width).map(|_| rng.random_range(-0.5..0.5)).collect();
    let occ: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..0.95)).collect();
    let grid = SparseGrid::from_parts(cfg.voxel_edge, 0, cfg.feature_width, keys, f, occ).unwrap();
    let bbox = Aabb::new(Vec3::new(-0.2, -0.2, 0.3), Vec3::new(0.2, 0.2, 0.7));
    (grid, bbox, DecoderParams::init(cfg, seed))
}

fn target_view(seed: u64) -> View {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = camera(24, 18);
    v.image.data.iter_mut().for_each(|p| *p = rng.random());
    v
}

#[test]
fn accumulation_is_linear_in_the_view_list() {
    let (grid, bbox, dec) = five_voxel_grid(1);
    let v = target_view(2);
    let s = RenderSettings::default();
    let (one, r1) = accumulate_gradients(&grid, &dec, &bbox, &[&v], &s).unwrap();
    let (two, r2) = accumulate_gradients(&grid, &dec, &bbox, &[&v, &v], &s).unwrap();
    assert!(one.data.iter().any(|g| *g != 0.0));
    for (a, b) in one.data.iter().zip(&two.data) {
        assert_eq!(2.0 * a, *b);
    }
    assert_eq!(r1, r2);
    assert!(matches!(
        accumulate_gradients(&grid, &dec, &bbox, &[], &s),
        Err(Error::EmptyInput(_))
    ));
}

#[test]
fn accumulation_equals_per_view_chain_rule_and_finite_differences() {
    let (grid, bbox, dec) = five_voxel_grid(3);
    let views = [target_view(4), target_view(5)];
    let refs: Vec<&View> = views.iter().collect();
    let s = RenderSettings::default();
    let (acc, _) = accumulate_gradients(&grid, &dec, &bbox, &refs, &s).unwrap();
    // Per view: decode, render, loss, render backward, decode backward; then sum.
    let mut manual = GradBuffer::for_grid(&grid);
    for v in &refs {
        let d = decode(&grid, &dec, &bbox).unwrap();
        let out = render(&d.gaussians, v, &s);
        let (_, dl) = rendering_loss(&out.color, &v.image.data, v.width(), v.height()).unwrap();
        let pg = PixelGrads {
            color: dl,
            ..PixelGrads::default()
        };
        let gg = render_backward(&d.gaussians, v, &s, &out, &pg, None).unwrap();
        manual.add_assign(&decode_backward(&grid, &dec, &bbox, &gg).unwrap().features).unwrap();
    }
    for (a, b) in acc.data.iter().zip(&manual.data) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }
    let loss = |g: &SparseGrid| -> f64 {
        let d = decode(g, &dec, &bbox).unwrap();
        refs.iter()
            .map(|v| {
                let out = render(&d.gaussians, v, &s);
                rendering_loss(&out.color, &v.image.data, v.width(), v.height()).unwrap().0
            })
            .sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-6;
    let mut checked = 0;
    for _ in 0..40 {
        let i = rng.random_range(0..grid.features.len());
        let mut gp = grid.clone();
        gp.features[i] += h;
        let mut gm = grid.clone();
        gm.features[i] -= h;
        let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
        let err = (fd - acc.data[i]).abs();
        assert!(err <= 1e-3 * fd.abs().max(acc.data[i].abs()) + 1e-6, "entry {i}: fd {fd} analytic {}", acc.data[i]);
        checked += 1;
    }
    assert_eq!(checked, 40);
}

#[test]
fn matching_render_gives_a_vanishing_buffer() {
    let (grid, bbox, dec) = five_voxel_grid(7);
    let s = RenderSettings::default();
    let mut v = camera(24, 18);
    let d = decode(&grid, &dec, &bbox).unwrap();
    v.image.data = render(&d.gaussians, &v, &s).color;
    let (g, r) = accumulate_gradients(&grid, &dec, &bbox, &[&v], &s).unwrap();
    assert!(r.color.abs() < 1e-12);
    assert!(g.data.iter().all(|x| x.abs() < 1e-8), "max {}", g.data.iter().fold(0.0f64, |m, x| m.max(x.abs())));
}

#[test]
fn voxels_outside_every_view_receive_zero_gradient() {
    let (grid, bbox, dec) = five_voxel_grid(8);
    let cfg = dec_cfg();
    let mut keys = grid.keys().to_vec();
    keys.push(VoxelKey::containing(&Vec3::new(0.0, 0.0, -0.5), cfg.voxel_edge));
    let mut f = grid.features.clone();
    f.extend(std::iter::repeat_n(0.1, cfg.feature_width));
    let mut o = grid.occupancy.clone();
    o.push(0.9);
    let g2 = SparseGrid::from_parts(cfg.voxel_edge, 0, cfg.feature_width, keys, f, o).unwrap();
    let v = target_view(9);
    let (g, _) = accumulate_gradients(&g2, &dec, &bbox, &[&v], &RenderSettings::default()).unwrap();
    assert!(g.row(5).iter().all(|x| *x == 0.0));
    assert!(g.row(0).iter().any(|x| *x != 0.0));
}

fn zero_optimizer(m: &mut Models) {
    m.optimizer.params.tensors.iter_mut().for_each(|t| t.data.fill(0.0));
}

#[test]
fn loop_without_densifier_and_with_a_silent_optimizer_is_the_identity() {
    let prep = tiny_scene();
    let mut m = models();
    zero_optimizer(&mut m);
    let variant = LoopVariant {
        initializer: true,
        densifier: false,
    };
    let s = RenderSettings::default();
    let g0 = initial_grid(&prep, &m, variant).unwrap();
    let st = run_loop(&prep, &m, &short_loop(), &s, variant).unwrap();
    assert_eq!(st.grid.keys(), g0.keys());
    assert_eq!(st.grid.features, g0.features);
    assert_eq!(st.grid.occupancy, g0.occupancy);
}

#[test]
fn loop_trace_follows_the_algorithm() {
    let prep = tiny_scene();
    let m = models();
    let cfg = short_loop();
    let st = run_loop(&prep, &m, &cfg, &RenderSettings::default(), LoopVariant::FULL).unwrap();
    let names: Vec<&str> = st.trace.iter().map(TraceOp::name).collect();
    let expected = expected_trace(cfg.timesteps, |t| {
        cfg.accum_views(&prep.train, t)
            .iter()
            .map(|&v| prep.scene.views[v].name.clone())
            .collect()
    });
    assert_eq!(names, expected);
    let mut voxels = match st.trace[0] {
        TraceOp::Initialize { voxels } => voxels,
        _ => unreachable!(),
    };
    let mut selected = 0;
    for op in &st.trace {
        match *op {
            TraceOp::Sample { selected: s, .. } => selected = s,
            TraceOp::ExtendGrad { new_rows, all_zero, .. } => {
                assert_eq!(new_rows, selected);
                assert!(all_zero);
            }
            TraceOp::Concatenate { voxels: v, .. } => {
                assert_eq!(v, voxels + selected);
                voxels = v;
            }
            _ => {}
        }
    }
    assert_eq!(st.grid.len(), voxels);
    assert_eq!(st.history.len(), cfg.timesteps);
    for w in st.history.windows(2) {
        assert_eq!(w[1].voxels, w[0].voxels + w[0].selected);
    }
    assert!(st.history.iter().any(|r| r.selected > 0));
    assert!(st.history.iter().all(|r| r.selected <= cfg.n_at(r.t)));
    let json = serde_json::to_string(&st.trace).unwrap();
    assert!(json.contains("\"op\":\"extend_grad\""));
}

#[test]
fn loop_is_bit_deterministic() {
    let prep = tiny_scene();
    let m = models();
    let s = RenderSettings::default();
    let a = run_loop(&prep, &m, &short_loop(), &s, LoopVariant::FULL).unwrap();
    let b = run_loop(&prep, &m, &short_loop(), &s, LoopVariant::FULL).unwrap();
    assert_eq!(a.grid.keys(), b.grid.keys());
    assert_eq!(a.grid.features, b.grid.features);
    assert_eq!(a.history, b.history);
}

#[test]
fn loop_errors_carry_the_timestep() {
    let mut prep = tiny_scene();
    let v = prep.train[0];
    prep.scene.views[v].image.data.truncate(5);
    let err = run_loop(&prep, &models(), &short_loop(), &RenderSettings::default(), LoopVariant::FULL).unwrap_err();
    assert!(matches!(err, Error::AtTimestep { t: 0, .. }), "{err}");
    assert!(matches!(err.root(), Error::Shape(_)));
}

#[test]
fn sfm_only_start_uses_the_raw_voxels() {
    let prep = tiny_scene();
    let m = models();
    let g = initial_grid(
        &prep,
        &m,
        LoopVariant {
            initializer: false,
            densifier: false,
        },
    )
    .unwrap();
    assert_eq!(g.keys(), prep.input.keys());
    assert!(g.occupancy.iter().all(|o| *o == 1.0));
    assert!(g.features.iter().all(|f| *f == 0.0));
}

#[test]
fn refinement_keeps_count_and_lowers_the_loss() {
    let (grid, bbox, dec) = five_voxel_grid(10);
    let g = decode(&grid, &dec, &bbox).unwrap().gaussians;
    let v = target_view(11);
    let s = RenderSettings::default();
    let cfg = RefineConfig {
        steps: 0,
        ..RefineConfig::default()
    };
    assert_eq!(sgd_refine(&g, &[&v], 1.0, &s, &cfg).unwrap(), g);
    let cfg = RefineConfig {
        steps: 60,
        ..RefineConfig::default()
    };
    let r = sgd_refine(&g, &[&v], 1.0, &s, &cfg).unwrap();
    assert_eq!(r.len(), g.len());
    assert!(r.iter().all(Gaussian2D::is_valid));
    let w = refine::refine_weights();
    let before = view_loss(&g, &v, &s, &w).unwrap().report.total;
    let after = view_loss(&r, &v, &s, &w).unwrap().report.total;
    assert!(after < before, "{after} >= {before}");
    assert_eq!(sgd_refine(&g, &[&v], 1.0, &s, &cfg).unwrap(), r);
}

#[test]
fn refinement_defaults() {
    let c = RefineConfig::default();
    assert_eq!(c.steps, 2000);
    assert_eq!([c.lr_center, c.lr_scale, c.lr_rotation, c.lr_opacity, c.lr_color], [1.6e-4, 5e-3, 1e-3, 5e-2, 2.5e-3]);
    let w = refine::refine_weights();
    assert_eq!((w.color, w.depth, w.distortion), (1.0, 1.0, 10.0));
}

#[test]
fn stage_configs_follow_the_stated_values() {
    assert_eq!(Stage1Config::default().lr, 1e-4);
    assert_eq!(Stage2Config::default().lr, 1e-4);
    assert_eq!(Stage1Config::default().weights, LossWeights::stage1());
    assert_eq!(Stage2Config::default().weights, LossWeights::stage2());
}

fn stage1_cfg() -> Stage1Config {
    Stage1Config {
        views_per_step: 2,
        ..Stage1Config::desk()
    }
}

fn stage2_cfg() -> Stage2Config {
    Stage2Config {
        views_per_step: 2,
        looping: LoopConfig {
            timesteps: 2,
            ..short_loop()
        },
        ..Stage2Config::desk()
    }
}

#[test]
fn stage1_first_loss_is_reproducible_and_the_step_updates_weights() {
    let prep = [tiny_scene()];
    let s = RenderSettings::default();
    let run = || {
        let mut m = models();
        let mut tr = Stage1Trainer::new(stage1_cfg(), &m);
        let log = tr.step(&mut m, &prep, &s).unwrap();
        (log, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    assert!(a.total.is_finite() && a.total > 0.0);
    assert_eq!(ma.initializer.params.tensors, mb.initializer.params.tensors);
    let fresh = models();
    assert_ne!(ma.initializer.params.tensors, fresh.initializer.params.tensors);
    assert_ne!(decoder_tensors(&ma.decoder), decoder_tensors(&fresh.decoder));
}

#[test]
fn stage1_needs_ground_truth() {
    let mut prep = tiny_scene();
    prep.gt = None;
    let m = models();
    let r = stage1_gradients(&m, &prep, &prep.train.clone(), &RenderSettings::default(), &LossWeights::stage1());
    assert!(matches!(r, Err(Error::MissingGroundTruth(_))));
}

#[test]
fn stage1_without_any_loss_weight_has_zero_gradient() {
    let prep = tiny_scene();
    let m = models();
    let w = LossWeights {
        color: 0.0,
        depth: 0.0,
        occupancy: 0.0,
        normal: 0.0,
        distortion: 0.0,
    };
    let g = stage1_gradients(&m, &prep, &prep.train, &RenderSettings::default(), &w).unwrap();
    assert!(g.initializer.iter().chain(&g.decoder).all(|t| t.data.iter().all(|x| *x == 0.0)));
}

#[test]
fn stage2_freezes_initializer_and_decoder() {
    let prep = [tiny_scene()];
    let mut m = models();
    let (init, dec) = (m.initializer.params.clone(), decoder_tensors(&m.decoder));
    let (dens, opt) = (m.densifier.params.clone(), m.optimizer.params.clone());
    let mut tr = Stage2Trainer::new(stage2_cfg(), &m);
    let log = tr.step(&mut m, &prep, &RenderSettings::default()).unwrap();
    assert_eq!(log.timesteps.len(), 2);
    assert_eq!(m.initializer.params, init);
    assert_eq!(decoder_tensors(&m.decoder), dec);
    assert_ne!(m.densifier.params.tensors, dens.tensors);
    assert_ne!(m.optimizer.params.tensors, opt.tensors);
}

#[test]
fn earlier_timestep_applications_get_no_gradient_from_later_losses() {
    let prep = tiny_scene();
    let m = models();
    let s = RenderSettings::default();
    let cfg = stage2_cfg();
    let g0 = initial_grid(&prep, &m, LoopVariant::FULL).unwrap();
    let (gt, _) = prep.require_gt().unwrap();
    let grad0 = GradBuffer::for_grid(&g0);
    let seeds_for = |tape: &Tape, n: &StepNodes| {
        let f = tape.value(n.features);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seed = Mat::from_vec(f.rows, f.cols, (0..f.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
        vec![(n.features, seed)]
    };
    // Both timesteps on one tape; the second starts from detached values.
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n0 = loop_step(&mut tape, &m, &g0, &grad0, 0, 50, true, Sampling::Train(&mut rng), Some(gt), &mut Vec::new()).unwrap();
    let g1 = grid_from_nodes(&tape, &n0, dec_cfg().voxel_edge).unwrap();
    let grad1 = GradBuffer::for_grid(&g1);
    let mut rng1 = ChaCha8Rng::seed_from_u64(3);
    let n1 = loop_step(&mut tape, &m, &g1, &grad1, 1, 25, true, Sampling::Train(&mut rng1), Some(gt), &mut Vec::new()).unwrap();
    let seeds = seeds_for(&tape, &n1);
    let joint = tape.backward(seeds).unwrap();
    // Only the second timestep.
    let mut tape2 = Tape::new();
    let mut rng1 = ChaCha8Rng::seed_from_u64(3);
    let m1 = loop_step(&mut tape2, &m, &g1, &grad1, 1, 25, true, Sampling::Train(&mut rng1), Some(gt), &mut Vec::new()).unwrap();
    let seeds = seeds_for(&tape2, &m1);
    let alone = tape2.backward(seeds).unwrap();
    assert_eq!(joint.for_set(&m.optimizer.params), alone.for_set(&m.optimizer.params));
    assert_eq!(joint.for_set(&m.densifier.params), alone.for_set(&m.densifier.params));
    assert!(alone.for_set(&m.optimizer.params).iter().any(|t| t.max_abs() > 0.0));
    // And the stage-2 timestep routine starts each timestep from plain values.
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let a = stage2_timestep(&m, &prep, &g1, 1, &cfg, &s, &mut r).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let b = stage2_timestep(&m, &prep, &g1.clone(), 1, &cfg, &s, &mut r).unwrap();
    assert_eq!(a.optimizer, b.optimizer);
    assert!(a.record.loss.is_finite());
}

#[test]
fn resumed_training_continues_identically() {
    let prep = [tiny_scene()];
    let s = RenderSettings::default();
    let dir = tempfile::tempdir().unwrap();
    // Uninterrupted: three stage-1 steps.
    let mut m = models();
    let mut tr = Stage1Trainer::new(stage1_cfg(), &m);
    let full: Vec<StepLog> = (0..3).map(|_| tr.step(&mut m, &prep, &s).unwrap()).collect();
    // Interrupted after two.
    let mut m2 = models();
    let mut tr2 = Stage1Trainer::new(stage1_cfg(), &m2);
    for _ in 0..2 {
        tr2.step(&mut m2, &prep, &s).unwrap();
    }
    tr2.save(&m2, dir.path()).unwrap();
    let (mut m3, mut tr3) = Stage1Trainer::resume(stage1_cfg(), net_cfg(), dec_cfg(), dir.path()).unwrap();
    assert_eq!(tr3.step_count(), 2);
    let next = tr3.step(&mut m3, &prep, &s).unwrap();
    assert_eq!(next, full[2]);
    assert_eq!(m3.initializer.params.tensors, m.initializer.params.tensors);

    // Stage 2 on top of the saved stage-1 weights.
    let mut a = Models::load_stage1(dir.path(), net_cfg(), dec_cfg()).unwrap();
    let mut ta = Stage2Trainer::new(stage2_cfg(), &a);
    let full2: Vec<StepLog> = (0..2).map(|_| ta.step(&mut a, &prep, &s).unwrap()).collect();
    let mut b = Models::load_stage1(dir.path(), net_cfg(), dec_cfg()).unwrap();
    let mut tb = Stage2Trainer::new(stage2_cfg(), &b);
    tb.step(&mut b, &prep, &s).unwrap();
    tb.save(&b, dir.path()).unwrap();
    let (mut c, mut tc) = Stage2Trainer::resume(stage2_cfg(), net_cfg(), dec_cfg(), dir.path()).unwrap();
    assert_eq!(tc.step_count(), 1);
    assert_eq!(tc.step(&mut c, &prep, &s).unwrap(), full2[1]);
}

#[test]
fn stage2_resume_requires_a_stage1_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let r = Stage2Trainer::resume(stage2_cfg(), net_cfg(), dec_cfg(), dir.path());
    assert!(matches!(r.err().map(|e| e), Some(Error::MissingAsset(_))));
}

#[test]
fn decoder_checkpoints_round_trip_and_check_the_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let m = models();
    m.save_stage1(dir.path()).unwrap();
    m.save_stage2(dir.path()).unwrap();
    let back = Models::load(dir.path(), net_cfg(), dec_cfg()).unwrap();
    assert_eq!(decoder_tensors(&back.decoder), decoder_tensors(&m.decoder));
    assert_eq!(back.optimizer.params.tensors, m.optimizer.params.tensors);
    let other = DecoderConfig {
        hidden: 16,
        ..dec_cfg()
    };
    assert!(matches!(
        Models::load_stage1(dir.path(), net_cfg(), other),
        Err(Error::ConfigMismatch { .. })
    ));
    assert!(Models::new(net_cfg(), DecoderConfig::default()).is_err());
}

#[test]
fn reconstruct_produces_a_mesh_and_a_report() {
    let prep = tiny_scene();
    let m = models();
    let cfg = ReconstructConfig {
        looping: LoopConfig {
            timesteps: 2,
            ..short_loop()
        },
        refine: RefineConfig {
            steps: 3,
            ..RefineConfig::default()
        },
        ..ReconstructConfig::default()
    };
    let r = reconstruct(&prep, &m, &cfg).unwrap();
    assert_eq!(r.gaussians.len(), r.decoded.len());
    let rep = r.report.unwrap();
    assert!(rep.abs_err.is_finite() && rep.runtime_s > 0.0);
    assert_eq!(r.heldout_depths.len(), prep.heldout.len());
    let cfg_mesh = ReconstructConfig {
        depth_source: crate::meshing::DepthSource::Mesh,
        ..cfg
    };
    let r2 = reconstruct(&prep, &m, &cfg_mesh).unwrap();
    assert_eq!(r2.mesh, r.mesh);
}
