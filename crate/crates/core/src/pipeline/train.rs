//! The two training stages.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{
    accumulate_gradients, at, decoder_tensors, grid_from_nodes, initial_grid, loop_step, step_rng, sum_view_losses, Adam,
    LoopConfig, LoopRecord, LoopVariant, Models, PreparedScene, Sampling,
};
use crate::error::{Error, Result};
use crate::losses::{assemble_stage1, assemble_stage2, normal_loss, LossReport, LossWeights};
use crate::nets::{Mode, NetConfig, Tape, Var};
use crate::renderer::RenderSettings;
use crate::scene_io::View;
use crate::splat_model::{decode, decode_backward, DecoderConfig, DecoderParams, GaussianGrads};
use crate::tensor::Mat;
use crate::voxel_grid::SparseGrid;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub step: u64,
    pub scene: String,
    /// Voxels after the step's forward pass (after the last timestep in stage 2).
    pub voxels: usize,
    /// Stage 1: the step's losses. Stage 2: the last timestep's losses.
    pub loss: LossReport,
    /// Objective minimized by the step.
    pub total: f64,
    /// Stage 2 only: per-timestep records.
    pub timesteps: Vec<LoopRecord>,
}

/// Stage-1 hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub steps: u64,
    pub lr: f64,
    /// Training views rendered per step; 0 means all.
    pub views_per_step: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-4,
            views_per_step: 4,
            weights: LossWeights::stage1(),
            seed: 0,
        }
    }
}

impl Stage1Config {
    /// Short single-scene runs: a larger step size.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            ..Self::default()
        }
    }
}

/// Stage-2 hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: u64,
    pub lr: f64,
    /// Training views rendered for each timestep's loss; 0 means all.
    pub views_per_step: usize,
    pub weights: LossWeights,
    pub looping: LoopConfig,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-4,
            views_per_step: 4,
            weights: LossWeights::stage2(),
            looping: LoopConfig::default(),
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            looping: LoopConfig::desk(),
            ..Self::default()
        }
    }
}

/// Seeded subset of `train` of size `k` (all when `k` is 0 or too large), ascending.
fn pick_views(train: &[usize], k: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    if k == 0 || k >= train.len() {
        return train.to_vec();
    }
    let mut idx: Vec<usize> = sample(rng, train.len(), k).into_iter().map(|i| train[i]).collect();
    idx.sort_unstable();
    idx
}

fn scaled(g: &GaussianGrads, s: f64) -> GaussianGrads {
    GaussianGrads::from_flat(&g.to_flat().iter().map(|v| v * s).collect::<Vec<_>>())
}

fn render_weights(w: &LossWeights) -> LossWeights {
    LossWeights {
        occupancy: 0.0,
        normal: 0.0,
        ..*w
    }
}

/// Gradients flowing back from the decoded splats into a grid held on a tape.
struct DecodedLoss {
    report: LossReport,
    features: Mat,
    occupancy: Mat,
    decoder: DecoderParams,
    voxels: usize,
}

/// Mean rendering loss of `grid` over `views`, plus the weighted normal loss
/// when `bvh` is given, differentiated back to the grid and decoder.
fn decoded_loss(
    grid: &SparseGrid,
    decoder: &DecoderParams,
    prep: &PreparedScene,
    views: &[usize],
    settings: &RenderSettings,
    w: &LossWeights,
    with_normal: bool,
) -> Result<DecodedLoss> {
    let decoded = decode(grid, decoder, prep.bbox())?;
    let vw: Vec<&View> = prep.views(views);
    let (gg, mut report) = sum_view_losses(&decoded.gaussians, &vw, settings, &render_weights(w))?;
    let mut gg = scaled(&gg, 1.0 / vw.len() as f64);
    if with_normal && w.normal != 0.0 {
        let (_, bvh) = prep.require_gt()?;
        let (ln, gn) = normal_loss(&decoded.gaussians, bvh)?;
        report.normal = ln;
        gg.add_assign(&scaled(&gn, w.normal))?;
    }
    let back = decode_backward(grid, decoder, prep.bbox(), &gg)?;
    Ok(DecodedLoss {
        report,
        features: Mat::from_vec(grid.len(), grid.width, back.features.data),
        occupancy: Mat::from_vec(grid.len(), 1, back.occupancy),
        decoder: back.params,
        voxels: grid.len(),
    })
}

fn seeds(features: Var, occupancy: Var, occ_loss: Option<Var>, l: &DecodedLoss, w_occ: f64) -> Vec<(Var, Mat)> {
    let mut s = vec![(features, l.features.clone()), (occupancy, l.occupancy.clone())];
    if let Some(o) = occ_loss {
        s.push((o, Mat::scalar(w_occ)));
    }
    s
}

fn check_finite(report: &LossReport, step: u64) -> Result<()> {
    if report.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("training loss at step {step}")))
    }
}

/// Stage-1 losses and gradients for one scene and view subset.
pub struct Stage1Grads {
    pub report: LossReport,
    pub voxels: usize,
    pub initializer: Vec<Mat>,
    pub decoder: Vec<Mat>,
}

/// Stage-1 objective on `views` of `prep` and its gradient with respect to the
/// initializer and decoder.
pub fn stage1_gradients(
    models: &Models,
    prep: &PreparedScene,
    views: &[usize],
    settings: &RenderSettings,
    w: &LossWeights,
) -> Result<Stage1Grads> {
    let (gt, _) = prep.require_gt()?;
    let mut tape = Tape::new();
    let out = models.initializer.forward(&mut tape, &prep.input, Mode::Train, Some(gt))?;
    let grid = out.grid(&tape, models.decoder.cfg.voxel_edge)?;
    let mut l = decoded_loss(&grid, &models.decoder, prep, views, settings, w, true)?;
    let occ = out.occupancy_loss(&mut tape);
    l.report.occupancy = occ.map_or(0.0, |v| tape.value(v).data[0]);
    l.report.total = assemble_stage1(&l.report, w);
    let grads = tape.backward(seeds(out.features, out.occupancy, occ, &l, w.occupancy))?;
    Ok(Stage1Grads {
        report: l.report,
        voxels: l.voxels,
        initializer: grads.for_set(&models.initializer.params),
        decoder: decoder_tensors(&l.decoder),
    })
}

const ADAM_FILE: &str = "adam.state";

/// Adam over the initializer and decoder.
pub struct Stage1Trainer {
    pub cfg: Stage1Config,
    adam: Adam,
}

impl Stage1Trainer {
    pub fn new(cfg: Stage1Config, models: &Models) -> Self {
        let dec = decoder_tensors(&models.decoder);
        let adam = Adam::new(cfg.lr, models.initializer.params.tensors.iter().chain(&dec));
        Self { cfg, adam }
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.adam.steps()
    }

    /// One update on scene `step mod |scenes|`.
    pub fn step(&mut self, models: &mut Models, scenes: &[PreparedScene], settings: &RenderSettings) -> Result<StepLog> {
        if scenes.is_empty() {
            return Err(Error::EmptyInput("training scenes"));
        }
        let step = self.adam.steps();
        let prep = &scenes[(step % scenes.len() as u64) as usize];
        let mut rng = step_rng(self.cfg.seed, step, 0);
        let views = pick_views(&prep.train, self.cfg.views_per_step, &mut rng);
        let g = stage1_gradients(models, prep, &views, settings, &self.cfg.weights)?;
        check_finite(&g.report, step)?;
        let grads: Vec<Mat> = g.initializer.into_iter().chain(g.decoder).collect();
        self.adam.step(
            models.initializer.params.tensors.iter_mut().chain(models.decoder.tensors_mut()),
            &grads,
        )?;
        Ok(StepLog {
            stage: 1,
            step,
            scene: prep.name.clone(),
            voxels: g.voxels,
            loss: g.report,
            total: g.report.total,
            timesteps: Vec::new(),
        })
    }

    /// Writes the weights and optimizer state under `dir`.
    pub fn save(&self, models: &Models, dir: &Path) -> Result<()> {
        models.save_stage1(dir)?;
        self.adam.save(&Models::stage1_dir(dir).join(ADAM_FILE))
    }

    /// Restores a run saved by [`Stage1Trainer::save`].
    pub fn resume(cfg: Stage1Config, net: NetConfig, decoder: DecoderConfig, dir: &Path) -> Result<(Models, Self)> {
        let models = Models::load_stage1(dir, net, decoder)?;
        let mut t = Self::new(cfg, &models);
        t.adam.load(&Models::stage1_dir(dir).join(ADAM_FILE))?;
        Ok((models, t))
    }
}

/// Per-timestep stage-2 result.
pub struct TimestepGrads {
    pub record: LoopRecord,
    pub next: SparseGrid,
    pub densifier: Vec<Mat>,
    pub optimizer: Vec<Mat>,
}

/// One timestep of stage 2 from a detached `grid`: accumulate, densify, sample,
/// optimize, then differentiate the stage-2 loss of the result. Only this
/// timestep's network applications are on the tape.
#[allow(clippy::too_many_arguments)]
pub fn stage2_timestep(
    models: &Models,
    prep: &PreparedScene,
    grid: &SparseGrid,
    t: usize,
    cfg: &Stage2Config,
    settings: &RenderSettings,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<TimestepGrads> {
    let (gt, _) = prep.require_gt()?;
    let accum = cfg.looping.accum_views(&prep.train, t);
    let (grad, _) = accumulate_gradients(grid, &models.decoder, prep.bbox(), &prep.views(&accum), settings)?;
    let mut tape = Tape::new();
    let nodes = loop_step(
        &mut tape,
        models,
        grid,
        &grad,
        t,
        cfg.looping.n_at(t),
        true,
        Sampling::Train(rng),
        Some(gt),
        &mut Vec::new(),
    )?;
    let next = grid_from_nodes(&tape, &nodes, models.decoder.cfg.voxel_edge)?;
    let views = pick_views(&prep.train, cfg.views_per_step, rng);
    let mut l = decoded_loss(&next, &models.decoder, prep, &views, settings, &cfg.weights, false)?;
    l.report.occupancy = nodes.occ_loss.map_or(0.0, |v| tape.value(v).data[0]);
    l.report.total = assemble_stage2(&l.report, &cfg.weights);
    let grads = tape.backward(seeds(nodes.features, nodes.occupancy, nodes.occ_loss, &l, cfg.weights.occupancy))?;
    Ok(TimestepGrads {
        record: LoopRecord {
            t,
            voxels: next.len(),
            selected: nodes.selected,
            loss: l.report,
        },
        next,
        densifier: grads.for_set(&models.densifier.params),
        optimizer: grads.for_set(&models.optimizer.params),
    })
}

/// Adam over the densifier and optimizer; the initializer and decoder stay frozen.
pub struct Stage2Trainer {
    pub cfg: Stage2Config,
    adam: Adam,
    initial: Vec<Option<SparseGrid>>,
}

fn add_all(acc: &mut [Mat], g: &[Mat]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| a.add_assign(b));
}

impl Stage2Trainer {
    pub fn new(cfg: Stage2Config, models: &Models) -> Self {
        let adam = Adam::new(
            cfg.lr,
            models.densifier.params.tensors.iter().chain(&models.optimizer.params.tensors),
        );
        Self {
            cfg,
            adam,
            initial: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.adam.steps()
    }

    /// One update: the loop runs `T` timesteps on scene `step mod |scenes|`,
    /// every timestep's loss counts with weight 1, and the summed gradient
    /// drives a single parameter update.
    pub fn step(&mut self, models: &mut Models, scenes: &[PreparedScene], settings: &RenderSettings) -> Result<StepLog> {
        if scenes.is_empty() {
            return Err(Error::EmptyInput("training scenes"));
        }
        self.cfg.looping.validate()?;
        let step = self.adam.steps();
        let si = (step % scenes.len() as u64) as usize;
        let prep = &scenes[si];
        self.initial.resize(scenes.len(), None);
        if self.initial[si].is_none() {
            self.initial[si] = Some(initial_grid(prep, models, LoopVariant::FULL)?);
        }
        let mut grid = self.initial[si].clone().expect("filled above");
        let mut acc_d = models.densifier.params.zeros_like();
        let mut acc_o = models.optimizer.params.zeros_like();
        let mut records = Vec::new();
        let mut total = 0.0;
        for t in 0..self.cfg.looping.timesteps {
            let mut rng = step_rng(self.cfg.seed, step, t as u64 + 1);
            let r = stage2_timestep(models, prep, &grid, t, &self.cfg, settings, &mut rng).map_err(at(t))?;
            check_finite(&r.record.loss, step).map_err(at(t))?;
            add_all(&mut acc_d, &r.densifier);
            add_all(&mut acc_o, &r.optimizer);
            total += r.record.loss.total;
            records.push(r.record);
            grid = r.next;
        }
        let grads: Vec<Mat> = acc_d.into_iter().chain(acc_o).collect();
        self.adam.step(
            models
                .densifier
                .params
                .tensors
                .iter_mut()
                .chain(models.optimizer.params.tensors.iter_mut()),
            &grads,
        )?;
        Ok(StepLog {
            stage: 2,
            step,
            scene: prep.name.clone(),
            voxels: grid.len(),
            loss: records.last().map(|r| r.loss).unwrap_or_default(),
            total,
            timesteps: records,
        })
    }

    pub fn save(&self, models: &Models, dir: &Path) -> Result<()> {
        models.save_stage2(dir)?;
        self.adam.save(&Models::stage2_dir(dir).join(ADAM_FILE))
    }

    /// Restores a run saved by [`Stage2Trainer::save`]; stage-1 weights come from `dir` too.
    pub fn resume(cfg: Stage2Config, net: NetConfig, decoder: DecoderConfig, dir: &Path) -> Result<(Models, Self)> {
        let models = Models::load(dir, net, decoder)?;
        let mut t = Self::new(cfg, &models);
        t.adam.load(&Models::stage2_dir(dir).join(ADAM_FILE))?;
        Ok((models, t))
    }
}
