//! The densification-optimization loop, its training stages and the
//! gradient-descent refinement of decoded splats.

mod adam;
mod reconstruct;
mod refine;
mod train;

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use reconstruct::{reconstruct, reconstruct_initial, Reconstruction, ReconstructConfig};
pub use refine::{sgd_refine, RefineConfig};
pub use train::{Stage1Config, Stage1Trainer, Stage2Config, Stage2Trainer, StepLog};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Bvh};
use crate::losses::{depth_loss, distortion_loss, rendering_loss, LossReport, LossWeights};
use crate::nets::{
    config_hash, read_checkpoint, write_checkpoint, DensifierNet, InitializerNet, LoopInput, Mode, NetConfig,
    OccupancyPyramid, OptimizerNet, Tape, Var,
};
use crate::renderer::{render, render_backward, PixelGrads, RenderSettings};
use crate::scene_io::{SceneBundle, View};
use crate::splat_model::{decode, decode_backward, DecoderConfig, DecoderParams, Gaussian2D, GaussianGrads};
use crate::tensor::Mat;
use crate::voxel_grid::{voxelize_points, GradBuffer, SparseGrid, VoxelKey};

/// Loop length, densification budget and view sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    /// `T`.
    pub timesteps: usize,
    /// `s` in `n(t) = floor(s / 2^t)`.
    pub densify_base: usize,
    /// Views whose gradients are accumulated per timestep; 0 means all.
    pub views_per_accum: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            timesteps: 5,
            densify_base: 20_000,
            views_per_accum: 100,
            seed: 0,
        }
    }
}

impl LoopConfig {
    /// Budget for rooms of a few square meters: `s = 2000`, every view.
    pub fn desk() -> Self {
        Self {
            densify_base: 2000,
            views_per_accum: 0,
            ..Self::default()
        }
    }

    /// `n(t) = floor(s / 2^t)`.
    pub fn n_at(&self, t: usize) -> usize {
        u32::try_from(t)
            .ok()
            .and_then(|t| self.densify_base.checked_shr(t))
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Validation("the loop needs at least one timestep".into()));
        }
        Ok(())
    }

    /// Deterministic strided subset of `views` for timestep `t`.
    pub fn accum_views(&self, views: &[usize], t: usize) -> Vec<usize> {
        let n = views.len();
        let k = self.views_per_accum;
        if k == 0 || k >= n {
            return views.to_vec();
        }
        let mut picked: Vec<usize> = (0..k).map(|i| views[(i * n / k + t) % n]).collect();
        picked.sort_unstable();
        picked.dedup();
        picked
    }
}

/// Seed for a sub-stream identified by `parts`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    h
}

/// All trainable parameters.
pub struct Models {
    pub initializer: InitializerNet,
    pub densifier: DensifierNet,
    pub optimizer: OptimizerNet,
    pub decoder: DecoderParams,
}

const STAGE1: &str = "stage1";
const STAGE2: &str = "stage2";

pub fn decoder_tensors(p: &DecoderParams) -> Vec<Mat> {
    p.named().into_iter().map(|(_, m)| m.clone()).collect()
}

pub fn save_decoder(p: &DecoderParams, path: &Path) -> Result<()> {
    write_checkpoint(path, &config_hash("decoder", &p.cfg), &p.named())
}

pub fn load_decoder(cfg: DecoderConfig, path: &Path) -> Result<DecoderParams> {
    let t = read_checkpoint(path, &config_hash("decoder", &cfg))?;
    let mut p = DecoderParams::init(cfg, 0);
    if t.len() != 6 {
        return Err(Error::ConfigMismatch { path: path.to_path_buf() });
    }
    for (dst, (_, src)) in p.tensors_mut().into_iter().zip(t) {
        if dst.shape() != src.shape() {
            return Err(Error::ConfigMismatch { path: path.to_path_buf() });
        }
        *dst = src;
    }
    Ok(p)
}

impl Models {
    pub fn new(net: NetConfig, decoder: DecoderConfig) -> Result<Self> {
        if net.feature_width != decoder.feature_width {
            return Err(Error::Validation(format!(
                "network feature width {} differs from decoder feature width {}",
                net.feature_width, decoder.feature_width
            )));
        }
        Ok(Self {
            initializer: InitializerNet::new(net)?,
            densifier: DensifierNet::new(net)?,
            optimizer: OptimizerNet::new(net)?,
            decoder: DecoderParams::init(decoder, net.seed ^ 0x4),
        })
    }

    pub fn stage1_dir(dir: &Path) -> std::path::PathBuf {
        dir.join(STAGE1)
    }

    pub fn stage2_dir(dir: &Path) -> std::path::PathBuf {
        dir.join(STAGE2)
    }

    pub fn save_stage1(&self, dir: &Path) -> Result<()> {
        let d = Self::stage1_dir(dir);
        self.initializer.save(&d.join("initializer.ckpt"))?;
        save_decoder(&self.decoder, &d.join("decoder.ckpt"))
    }

    pub fn save_stage2(&self, dir: &Path) -> Result<()> {
        let d = Self::stage2_dir(dir);
        self.densifier.save(&d.join("densifier.ckpt"))?;
        self.optimizer.save(&d.join("optimizer.ckpt"))
    }

    /// Stage-1 weights from `dir`; densifier and optimizer freshly initialized.
    pub fn load_stage1(dir: &Path, net: NetConfig, decoder: DecoderConfig) -> Result<Self> {
        let mut m = Self::new(net, decoder)?;
        let d = Self::stage1_dir(dir);
        m.initializer = InitializerNet::load(net, &d.join("initializer.ckpt"))?;
        m.decoder = load_decoder(decoder, &d.join("decoder.ckpt"))?;
        Ok(m)
    }

    /// Both stages from `dir`.
    pub fn load(dir: &Path, net: NetConfig, decoder: DecoderConfig) -> Result<Self> {
        let mut m = Self::load_stage1(dir, net, decoder)?;
        let d = Self::stage2_dir(dir);
        m.densifier = DensifierNet::load(net, &d.join("densifier.ckpt"))?;
        m.optimizer = OptimizerNet::load(net, &d.join("optimizer.ckpt"))?;
        Ok(m)
    }
}

/// A scene with the derived inputs and supervision the pipeline needs.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub name: String,
    pub scene: SceneBundle,
    /// Voxelized SfM statistics at level 0.
    pub input: SparseGrid,
    /// Indices of training views.
    pub train: Vec<usize>,
    /// Indices of held-out views.
    pub heldout: Vec<usize>,
    pub gt: Option<OccupancyPyramid>,
    pub bvh: Option<Bvh>,
}

impl PreparedScene {
    pub fn new(name: impl Into<String>, scene: SceneBundle, voxel_edge: f64) -> Result<Self> {
        let input = voxelize_points(&scene.points, voxel_edge)?;
        let (heldout, train): (Vec<usize>, Vec<usize>) = (0..scene.views.len()).partition(|&i| scene.views[i].is_heldout());
        if train.is_empty() {
            return Err(Error::EmptyInput("training views"));
        }
        let gt = match &scene.gt_mesh {
            Some(m) if !m.faces.is_empty() => Some(OccupancyPyramid::from_mesh(m, voxel_edge)?),
            _ => None,
        };
        let bvh = scene
            .gt_mesh
            .as_ref()
            .filter(|m| !m.faces.is_empty())
            .map(|m| Bvh::new(m.clone()));
        Ok(Self {
            name: name.into(),
            scene,
            input,
            train,
            heldout,
            gt,
            bvh,
        })
    }

    pub fn bbox(&self) -> &Aabb {
        &self.scene.bbox
    }

    pub fn views(&self, idx: &[usize]) -> Vec<&View> {
        idx.iter().map(|&i| &self.scene.views[i]).collect()
    }

    pub fn require_gt(&self) -> Result<(&OccupancyPyramid, &Bvh)> {
        match (&self.gt, &self.bvh) {
            (Some(g), Some(b)) => Ok((g, b)),
            _ => Err(Error::MissingGroundTruth("mesh for training")),
        }
    }
}

/// Loss of one rendered view and its gradient with respect to the splats.
#[derive(Debug, Clone)]
pub struct ViewLoss {
    pub report: LossReport,
    pub grads: GaussianGrads,
}

/// Renders `view` and differentiates the weighted color, depth and distortion
/// terms. Terms with zero weight are skipped; depth is skipped without ground truth.
pub fn view_loss(gaussians: &[Gaussian2D], view: &View, settings: &RenderSettings, w: &LossWeights) -> Result<ViewLoss> {
    let out = render(gaussians, view, settings);
    let (lc, dc) = rendering_loss(&out.color, &view.image.data, view.width(), view.height())?;
    let mut report = LossReport {
        color: lc,
        ..LossReport::default()
    };
    let mut pg = PixelGrads {
        color: dc.iter().map(|g| g * w.color).collect(),
        ..PixelGrads::default()
    };
    if w.depth != 0.0 {
        if let Some(gt) = &view.gt_depth {
            let d = depth_loss(&out.depth, gt, None)?;
            report.depth = d.value;
            pg.depth = d.grad.iter().map(|g| g * w.depth).collect();
        }
    }
    let mut frag = None;
    if w.distortion != 0.0 {
        let (v, mut fg) = distortion_loss(&out);
        report.distortion = v;
        fg.weight.iter_mut().chain(fg.depth.iter_mut()).for_each(|g| *g *= w.distortion);
        frag = Some(fg);
    }
    report.total = w.color * report.color + w.depth * report.depth + w.distortion * report.distortion;
    let grads = render_backward(gaussians, view, settings, &out, &pg, frag.as_ref())?;
    Ok(ViewLoss { report, grads })
}

/// Sums per-view splat gradients in view order.
pub fn sum_view_losses(
    gaussians: &[Gaussian2D],
    views: &[&View],
    settings: &RenderSettings,
    w: &LossWeights,
) -> Result<(GaussianGrads, LossReport)> {
    let per_view = crate::par::map_slice(views, |v| view_loss(gaussians, v, settings, w));
    let mut grads = GaussianGrads::zeros(gaussians.len());
    let mut reports = Vec::with_capacity(views.len());
    for r in per_view {
        let r = r?;
        grads.add_assign(&r.grads)?;
        reports.push(r.report);
    }
    Ok((grads, LossReport::mean(&reports)))
}

/// `∇G`: the rendering-loss gradient with respect to every latent feature,
/// summed over `views`, and the mean loss report.
pub fn accumulate_gradients(
    grid: &SparseGrid,
    decoder: &DecoderParams,
    bbox: &Aabb,
    views: &[&View],
    settings: &RenderSettings,
) -> Result<(GradBuffer, LossReport)> {
    if views.is_empty() {
        return Err(Error::EmptyInput("views for gradient accumulation"));
    }
    let decoded = decode(grid, decoder, bbox)?;
    let color_only = LossWeights {
        color: 1.0,
        depth: 0.0,
        occupancy: 0.0,
        normal: 0.0,
        distortion: 0.0,
    };
    let (grads, report) = sum_view_losses(&decoded.gaussians, views, settings, &color_only)?;
    let back = decode_backward(grid, decoder, bbox, &grads)?;
    Ok((back.features, report))
}

/// How densification candidates are chosen.
#[derive(Debug)]
pub enum Sampling<'a> {
    /// Weighted sampling without replacement, proportional to occupancy.
    Train(&'a mut ChaCha8Rng),
    /// Top `n` by occupancy, ties broken by key order.
    Inference,
}

/// Indices (ascending) of the selected candidates.
pub fn importance_sample(keys: &[VoxelKey], occupancy: &[f64], n: usize, sampling: Sampling) -> Vec<usize> {
    assert_eq!(keys.len(), occupancy.len(), "one occupancy per candidate");
    let mut ranked: Vec<(f64, usize)> = match sampling {
        Sampling::Inference => (0..keys.len()).map(|i| (occupancy[i], i)).collect(),
        Sampling::Train(rng) => {
            // Efraimidis-Spirakis: the n largest u^(1/w) form a weighted sample.
            let mut r = Vec::with_capacity(keys.len());
            for (i, &w) in occupancy.iter().enumerate() {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                if w > 0.0 {
                    r.push((u.ln() / w, i));
                }
            }
            r
        }
    };
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(keys[a.1].cmp(&keys[b.1])));
    let mut out: Vec<usize> = ranked.into_iter().take(n).map(|(_, i)| i).collect();
    out.sort_unstable();
    out
}

/// Which networks the loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopVariant {
    /// Without it, `G_0` holds the SfM voxels with zero features and occupancy 1.
    pub initializer: bool,
    pub densifier: bool,
}

impl LoopVariant {
    pub const FULL: Self = Self {
        initializer: true,
        densifier: true,
    };
}

/// One operation of the loop, in execution order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TraceOp {
    Initialize { voxels: usize },
    ZeroGrad { t: usize },
    AccumulateView { t: usize, view: String },
    Densify { t: usize, candidates: usize },
    Sample { t: usize, selected: usize },
    Concatenate { t: usize, voxels: usize },
    ExtendGrad { t: usize, new_rows: usize, all_zero: bool },
    Optimize { t: usize },
    Update { t: usize, voxels: usize },
}

/// Per-timestep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub t: usize,
    pub voxels: usize,
    pub selected: usize,
    /// Mean rendering loss of `G_t` over the accumulated views.
    pub loss: LossReport,
}

/// State after the loop.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub t: usize,
    pub grid: SparseGrid,
    pub grad: GradBuffer,
    pub history: Vec<LoopRecord>,
    pub trace: Vec<TraceOp>,
}

/// `G_0`: the initializer's output, or the raw SfM voxels.
pub fn initial_grid(prep: &PreparedScene, models: &Models, variant: LoopVariant) -> Result<SparseGrid> {
    let edge = models.decoder.cfg.voxel_edge;
    if variant.initializer {
        let mut tape = Tape::new();
        let out = models.initializer.forward(&mut tape, &prep.input, Mode::Inference, None)?;
        if out.keys.is_empty() {
            return Err(Error::EmptyInput("initializer output"));
        }
        out.grid(&tape, edge)
    } else {
        let n = prep.input.len();
        let f = models.decoder.cfg.feature_width;
        SparseGrid::from_parts(edge, 0, f, prep.input.keys().to_vec(), vec![0.0; n * f], vec![1.0; n])
    }
}

/// Tape nodes of one densify-concatenate-update step.
pub(crate) struct StepNodes {
    pub keys: Vec<VoxelKey>,
    pub features: Var,
    pub occupancy: Var,
    pub occ_loss: Option<Var>,
    pub selected: usize,
}

/// `Ĝ_t = f_D(G_t, ∇G_t, t)`, `Ḡ_t = G_t ∪ Ĝ_t`, `G_{t+1} = Ḡ_t + f_O(Ḡ_t, ∇Ḡ_t, t)`,
/// recorded on `tape` with `G_t` as a constant.
#[allow(clippy::too_many_arguments)]
pub(crate) fn loop_step(
    tape: &mut Tape,
    models: &Models,
    grid: &SparseGrid,
    grad: &GradBuffer,
    t: usize,
    n: usize,
    densify: bool,
    sampling: Sampling,
    gt: Option<&OccupancyPyramid>,
    trace: &mut Vec<TraceOp>,
) -> Result<StepNodes> {
    let f = tape.input(Mat::from_vec(grid.len(), grid.width, grid.features.clone()));
    let o = tape.input(Mat::from_vec(grid.len(), 1, grid.occupancy.clone()));
    let mode = if gt.is_some() { Mode::Train } else { Mode::Inference };
    let (mut keys, mut fbar, mut obar) = (grid.keys().to_vec(), f, o);
    let (mut selected, mut occ_loss) = (0, None);
    if densify {
        let inp = LoopInput {
            keys: grid.keys(),
            features: f,
            occupancy: o,
            grad,
            t,
        };
        let out = models.densifier.forward(tape, &inp, mode, gt)?;
        trace.push(TraceOp::Densify {
            t,
            candidates: out.keys.len(),
        });
        let occ = tape.value(out.occupancy).data.clone();
        let pick = importance_sample(&out.keys, &occ, n, sampling);
        selected = pick.len();
        trace.push(TraceOp::Sample { t, selected });
        let idx: Vec<Option<usize>> = pick.iter().map(|&i| Some(i)).collect();
        let nf = tape.gather_rows(out.features, idx.clone());
        let no = tape.gather_rows(out.occupancy, idx);
        fbar = tape.concat_rows(&[f, nf]);
        obar = tape.concat_rows(&[o, no]);
        keys.extend(pick.iter().map(|&i| out.keys[i]));
        occ_loss = out.occupancy_loss(tape);
    } else {
        trace.push(TraceOp::Densify { t, candidates: 0 });
        trace.push(TraceOp::Sample { t, selected: 0 });
    }
    trace.push(TraceOp::Concatenate { t, voxels: keys.len() });
    let mut gbar = grad.clone();
    gbar.extend_zeros(selected);
    let new_grad_zero = gbar.data[grad.data.len()..].iter().all(|&v| v == 0.0);
    trace.push(TraceOp::ExtendGrad {
        t,
        new_rows: selected,
        all_zero: new_grad_zero,
    });
    let inp = LoopInput {
        keys: &keys,
        features: fbar,
        occupancy: obar,
        grad: &gbar,
        t,
    };
    let delta = models.optimizer.forward(tape, &inp)?;
    trace.push(TraceOp::Optimize { t });
    let next = tape.add(fbar, delta);
    trace.push(TraceOp::Update { t, voxels: keys.len() });
    Ok(StepNodes {
        keys,
        features: next,
        occupancy: obar,
        occ_loss,
        selected,
    })
}

pub(crate) fn grid_from_nodes(tape: &Tape, nodes: &StepNodes, edge: f64) -> Result<SparseGrid> {
    let f = tape.value(nodes.features);
    SparseGrid::from_parts(
        edge,
        0,
        f.cols,
        nodes.keys.clone(),
        f.data.clone(),
        tape.value(nodes.occupancy).data.clone(),
    )
}

fn at(t: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtTimestep {
        t,
        source: Box::new(e),
    }
}

/// Runs the loop for `cfg.timesteps` steps from `G_0` (inference-mode densifier).
pub fn run_loop(
    prep: &PreparedScene,
    models: &Models,
    cfg: &LoopConfig,
    settings: &RenderSettings,
    variant: LoopVariant,
) -> Result<LoopState> {
    cfg.validate()?;
    let bbox = prep.bbox();
    let edge = models.decoder.cfg.voxel_edge;
    let mut grid = initial_grid(prep, models, variant)?;
    let mut trace = vec![TraceOp::Initialize { voxels: grid.len() }];
    let mut history = Vec::new();
    let mut grad = GradBuffer::for_grid(&grid);
    for t in 0..cfg.timesteps {
        trace.push(TraceOp::ZeroGrad { t });
        let views = cfg.accum_views(&prep.train, t);
        let (g, report) =
            accumulate_gradients(&grid, &models.decoder, bbox, &prep.views(&views), settings).map_err(at(t))?;
        for &v in &views {
            trace.push(TraceOp::AccumulateView {
                t,
                view: prep.scene.views[v].name.clone(),
            });
        }
        let mut tape = Tape::new();
        let nodes = loop_step(
            &mut tape,
            models,
            &grid,
            &g,
            t,
            cfg.n_at(t),
            variant.densifier,
            Sampling::Inference,
            None,
            &mut trace,
        )
        .map_err(at(t))?;
        history.push(LoopRecord {
            t,
            voxels: grid.len(),
            selected: nodes.selected,
            loss: report,
        });
        grid = grid_from_nodes(&tape, &nodes, edge).map_err(at(t))?;
        grad = g;
    }
    Ok(LoopState {
        t: cfg.timesteps,
        grid,
        grad,
        history,
        trace,
    })
}

/// The operation sequence the loop must emit for the given view names per timestep.
pub fn expected_trace(timesteps: usize, views_at: impl Fn(usize) -> Vec<String>) -> Vec<&'static str> {
    let mut out = vec!["initialize"];
    for t in 0..timesteps {
        out.push("zero_grad");
        out.extend(views_at(t).iter().map(|_| "accumulate_view"));
        out.extend(["densify", "sample", "concatenate", "extend_grad", "optimize", "update"]);
    }
    out
}

impl TraceOp {
    pub fn name(&self) -> &'static str {
        match self {
            TraceOp::Initialize { .. } => "initialize",
            TraceOp::ZeroGrad { .. } => "zero_grad",
            TraceOp::AccumulateView { .. } => "accumulate_view",
            TraceOp::Densify { .. } => "densify",
            TraceOp::Sample { .. } => "sample",
            TraceOp::Concatenate { .. } => "concatenate",
            TraceOp::ExtendGrad { .. } => "extend_grad",
            TraceOp::Optimize { .. } => "optimize",
            TraceOp::Update { .. } => "update",
        }
    }
}

/// Keys of `a` missing from `b`.
pub fn new_keys(a: &[VoxelKey], b: &[VoxelKey]) -> Vec<VoxelKey> {
    let set: HashSet<&VoxelKey> = b.iter().collect();
    a.iter().filter(|k| !set.contains(k)).copied().collect()
}

/// Rng for a step and timestep of a seeded run.
pub fn step_rng(seed: u64, step: u64, t: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[step, t]))
}

#[cfg(test)]
mod tests;
