//! Sparse convolutional prior networks and the tape that trains them.
//!
//! All three networks share an encoder that embeds level-0 voxels and
//! downsamples four times with stride-2 sparse convolutions. They differ in
//! what happens on the way back up:
//!
//! * [`InitializerNet`] runs residual blocks on the dense coarse grid, then
//!   proposes children level by level and keeps those its occupancy heads
//!   accept.
//! * [`DensifierNet`] has no dense bottleneck; it proposes children of the
//!   input's ancestors and returns level-0 candidates that are not yet allocated.
//! * [`OptimizerNet`] is a UNet over the input key sets and returns a bounded
//!   per-voxel feature update.

mod checkpoint;
mod conv;
mod tape;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, read_checkpoint, write_checkpoint};
pub use conv::{down_rules, subm_rules, tap, up_rules, ConvRules, KERNEL};
pub use tape::{Activation, Grads, ParamSet, Tape, Var};

use crate::error::{Error, Result};
use crate::geometry::TriMesh;
use crate::tensor::Mat;
use crate::voxel_grid::{GradBuffer, SparseGrid, VoxelKey, POINT_STATS};

/// Number of stride-2 levels in every network.
pub const LEVELS: usize = 4;

/// Architecture of the prior networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Channels at levels 0..3; level 4 reuses the last entry.
    pub channels: [usize; 4],
    /// Latent feature width (must match the decoder).
    pub feature_width: usize,
    /// Number of loop timesteps the time embedding covers.
    pub timesteps: usize,
    pub time_embed: usize,
    pub residual_blocks: usize,
    /// Largest dense bottleneck grid, in cells.
    pub dense_budget: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 96, 128],
            feature_width: 64,
            timesteps: 5,
            time_embed: 16,
            residual_blocks: 2,
            dense_budget: 32_768,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// Small channel plan that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            channels: [16, 24, 32, 32],
            feature_width: 32,
            ..Self::default()
        }
    }

    pub fn ch(&self, level: usize) -> usize {
        self.channels[level.min(3)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.feature_width == 0 || self.timesteps == 0 || self.time_embed == 0 {
            return Err(Error::Validation("network widths and timesteps must be positive".into()));
        }
        Ok(())
    }
}

/// Whether occupancy heads are supervised and ground truth guides allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Ground-truth occupied keys at levels `0..=LEVELS`.
#[derive(Debug, Clone, Default)]
pub struct OccupancyPyramid {
    pub levels: Vec<HashSet<VoxelKey>>,
}

impl OccupancyPyramid {
    /// Voxelizes dense samples of `mesh` at level 0 and takes parents upward.
    pub fn from_mesh(mesh: &TriMesh, edge: f64) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::MissingGroundTruth("mesh for occupancy targets"));
        }
        let samples = mesh.lattice_samples(edge / 4.0);
        let level0: HashSet<VoxelKey> = samples.iter().map(|p| VoxelKey::containing(p, edge)).collect();
        let mut levels = vec![level0];
        for l in 1..=LEVELS {
            let up = levels[l - 1].iter().map(|k| k.parent(1)).collect();
            levels.push(up);
        }
        Ok(Self { levels })
    }

    pub fn contains(&self, level: usize, key: &VoxelKey) -> bool {
        self.levels.get(level).is_some_and(|s| s.contains(key))
    }

    pub fn targets(&self, level: usize, keys: &[VoxelKey]) -> Vec<f64> {
        keys.iter()
            .map(|k| if self.contains(level, k) { 1.0 } else { 0.0 })
            .collect()
    }

    /// As a sorted grid with occupancy 1.
    pub fn grid(&self, level: usize, edge: f64) -> SparseGrid {
        SparseGrid::from_keys(
            edge * f64::from(1u32 << level),
            level as u32,
            0,
            self.levels[level].iter().copied(),
            1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn apply(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Var {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: usize,
    b: usize,
}

impl Conv {
    fn apply(&self, tape: &mut Tape, ps: &ParamSet, x: Var, rules: &Arc<ConvRules>) -> Var {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        tape.conv(x, w, b, rules.clone())
    }
}

struct Builder {
    ps: ParamSet,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            ps: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, gain: f64) -> Linear {
        let bound = gain * (6.0 / cin.max(1) as f64).sqrt();
        let w = self.ps.add(format!("{name}.w"), Mat::uniform(cin, cout, bound, &mut self.rng));
        let b = self.ps.add(format!("{name}.b"), Mat::zeros(1, cout));
        Linear { w, b }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let bound = (6.0 / (KERNEL * cin).max(1) as f64).sqrt();
        let w = self
            .ps
            .add(format!("{name}.w"), Mat::uniform(KERNEL * cin, cout, bound, &mut self.rng));
        let b = self.ps.add(format!("{name}.b"), Mat::zeros(1, cout));
        Conv { w, b }
    }

    fn table(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        let bound = (6.0 / rows as f64).sqrt();
        self.ps.add(name.to_string(), Mat::uniform(rows, cols, bound, &mut self.rng))
    }
}

fn sorted_parents(keys: &[VoxelKey]) -> Vec<VoxelKey> {
    keys.iter().map(|k| k.parent(1)).collect::<BTreeSet<_>>().into_iter().collect()
}

fn sorted_children(keys: &[VoxelKey]) -> Vec<VoxelKey> {
    keys.iter()
        .flat_map(|k| (0..8).map(move |c| k.child(c)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn slot_map(keys: &[VoxelKey]) -> HashMap<VoxelKey, usize> {
    keys.iter().enumerate().map(|(s, k)| (*k, s)).collect()
}

fn gather_index(from: &[VoxelKey], to: &[VoxelKey]) -> Vec<Option<usize>> {
    let map = slot_map(from);
    to.iter().map(|k| map.get(k).copied()).collect()
}

/// Shared stride-2 encoder: level `l` keys and activations for `l = 0..=4`.
struct Encoder {
    input: Linear,
    time: Vec<Linear>,
    same: Vec<Conv>,
    down: Vec<Conv>,
}

struct Encoded {
    keys: Vec<Vec<VoxelKey>>,
    h: Vec<Var>,
    time_bias: Vec<Option<Var>>,
}

impl Encoder {
    fn build(b: &mut Builder, cfg: &NetConfig, cin: usize, timed: bool) -> Self {
        let input = b.linear("enc.input", cin, cfg.ch(0), 1.0);
        let time = if timed {
            (0..=LEVELS)
                .map(|l| b.linear(&format!("time.proj{l}"), cfg.time_embed, cfg.ch(l), 1.0))
                .collect()
        } else {
            Vec::new()
        };
        let same = (0..=LEVELS)
            .map(|l| b.conv(&format!("enc.same{l}"), cfg.ch(l), cfg.ch(l)))
            .collect();
        let down = (1..=LEVELS)
            .map(|l| b.conv(&format!("enc.down{l}"), cfg.ch(l - 1), cfg.ch(l)))
            .collect();
        Self {
            input,
            time,
            same,
            down,
        }
    }

    fn run(&self, tape: &mut Tape, ps: &ParamSet, keys: &[VoxelKey], x: Var, temb: Option<Var>) -> Encoded {
        let time_bias: Vec<Option<Var>> = (0..=LEVELS)
            .map(|l| temb.map(|e| self.time[l].apply(tape, ps, e)))
            .collect();
        let with_time = |tape: &mut Tape, h: Var, l: usize| match time_bias[l] {
            Some(tb) => {
                let rows = tape.value(h).rows;
                let bb = tape.broadcast(tb, rows);
                tape.add(h, bb)
            }
            None => h,
        };
        let mut all_keys = vec![keys.to_vec()];
        let a = self.input.apply(tape, ps, x);
        let a = with_time(tape, a, 0);
        let a = tape.leaky(a);
        let r = Arc::new(subm_rules(keys));
        let a = self.same[0].apply(tape, ps, a, &r);
        let mut h = vec![tape.leaky(a)];
        for l in 1..=LEVELS {
            let coarse = sorted_parents(&all_keys[l - 1]);
            let rd = Arc::new(down_rules(&all_keys[l - 1], &coarse));
            let a = self.down[l - 1].apply(tape, ps, h[l - 1], &rd);
            let a = with_time(tape, a, l);
            let a = tape.leaky(a);
            let rs = Arc::new(subm_rules(&coarse));
            let a = self.same[l].apply(tape, ps, a, &rs);
            h.push(tape.leaky(a));
            all_keys.push(coarse);
        }
        Encoded {
            keys: all_keys,
            h,
            time_bias,
        }
    }
}

/// One upsampling stage: transposed conv, skip concatenation, same-level conv.
struct UpBlock {
    up: Conv,
    mix: Conv,
    head: Option<Linear>,
}

impl UpBlock {
    fn build(b: &mut Builder, cfg: &NetConfig, level: usize, head: bool) -> Self {
        Self {
            up: b.conv(&format!("dec.up{level}"), cfg.ch(level + 1), cfg.ch(level)),
            mix: b.conv(&format!("dec.mix{level}"), 2 * cfg.ch(level), cfg.ch(level)),
            head: head.then(|| b.linear(&format!("dec.head{level}"), cfg.ch(level), 1, 1.0)),
        }
    }

    /// Activations on `fine` keys from `h` on `coarse` keys and the encoder's
    /// level activations as skip input.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        coarse: &[VoxelKey],
        h: Var,
        fine: &[VoxelKey],
        skip_keys: &[VoxelKey],
        skip: Var,
        time_bias: Option<Var>,
    ) -> Var {
        let ru = Arc::new(up_rules(coarse, fine));
        let mut u = self.up.apply(tape, ps, h, &ru);
        if let Some(tb) = time_bias {
            let bb = tape.broadcast(tb, fine.len());
            u = tape.add(u, bb);
        }
        let u = tape.leaky(u);
        let s = tape.gather_rows(skip, gather_index(skip_keys, fine));
        let m = tape.concat_cols(&[u, s]);
        let rs = Arc::new(subm_rules(fine));
        let a = self.mix.apply(tape, ps, m, &rs);
        tape.leaky(a)
    }

    fn occupancy(&self, tape: &mut Tape, ps: &ParamSet, h: Var) -> Var {
        let logits = self.head.expect("block has a head").apply(tape, ps, h);
        tape.act(logits, Activation::Sigmoid)
    }
}

fn dense_box(keys: &[VoxelKey], budget: usize) -> Result<Vec<VoxelKey>> {
    let (mut lo, mut hi) = ([i32::MAX; 3], [i32::MIN; 3]);
    for k in keys {
        for (a, v) in [k.i, k.j, k.k].into_iter().enumerate() {
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    let cells: usize = (0..3).map(|a| (hi[a] - lo[a] + 1) as usize).product();
    if cells > budget {
        return Err(Error::BudgetExceeded { cells, budget });
    }
    let mut out = Vec::with_capacity(cells);
    for i in lo[0]..=hi[0] {
        for j in lo[1]..=hi[1] {
            for k in lo[2]..=hi[2] {
                out.push(VoxelKey::new(i, j, k));
            }
        }
    }
    Ok(out)
}

fn select<T: Copy>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i]).collect()
}

/// Occupancy predictions of one upsampling level.
#[derive(Debug, Clone)]
pub struct LevelPrediction {
    pub level: usize,
    pub keys: Vec<VoxelKey>,
    pub occupancy: Vec<f64>,
}

/// Per-voxel features, occupancy and the supervision terms of a forward pass.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub keys: Vec<VoxelKey>,
    /// `n x feature_width`.
    pub features: Var,
    /// `n x 1`.
    pub occupancy: Var,
    /// Mean BCE per supervised level (training mode only).
    pub occ_losses: Vec<Var>,
    pub levels: Vec<LevelPrediction>,
}

impl NetOutput {
    /// Output as a level-0 grid holding the current tape values.
    pub fn grid(&self, tape: &Tape, edge: f64) -> Result<SparseGrid> {
        let f = tape.value(self.features);
        let o = tape.value(self.occupancy);
        SparseGrid::from_parts(edge, 0, f.cols, self.keys.clone(), f.data.clone(), o.data.clone())
    }

    /// Mean of the per-level occupancy losses, or `None` without supervision.
    pub fn occupancy_loss(&self, tape: &mut Tape) -> Option<Var> {
        if self.occ_losses.is_empty() {
            return None;
        }
        let c = 1.0 / self.occ_losses.len() as f64;
        let terms: Vec<(Var, f64)> = self.occ_losses.iter().map(|&v| (v, c)).collect();
        Some(tape.weighted(&terms))
    }
}

fn check_gt(mode: Mode, gt: Option<&OccupancyPyramid>) -> Result<Option<&OccupancyPyramid>> {
    match (mode, gt) {
        (Mode::Train, None) => Err(Error::MissingGroundTruth("occupancy targets for training")),
        (Mode::Train, Some(g)) => Ok(Some(g)),
        (Mode::Inference, _) => Ok(None),
    }
}

/// Predicts a dense level-0 latent grid from voxelized SfM statistics.
pub struct InitializerNet {
    pub cfg: NetConfig,
    pub params: ParamSet,
    enc: Encoder,
    dense: Vec<(Conv, Conv)>,
    up: Vec<UpBlock>,
    out: Linear,
}

impl InitializerNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(cfg.seed ^ 0x1);
        let enc = Encoder::build(&mut b, &cfg, POINT_STATS, false);
        let c4 = cfg.ch(LEVELS);
        let dense = (0..cfg.residual_blocks)
            .map(|r| (b.conv(&format!("dense{r}.a"), c4, c4), b.conv(&format!("dense{r}.b"), c4, c4)))
            .collect();
        let up = (0..LEVELS).map(|l| UpBlock::build(&mut b, &cfg, l, true)).collect();
        let out = b.linear("out", cfg.ch(0), cfg.feature_width, 1.0);
        Ok(Self {
            cfg,
            params: b.ps,
            enc,
            dense,
            up,
            out,
        })
    }

    /// `grid` must hold raw point statistics at level 0.
    pub fn forward(
        &self,
        tape: &mut Tape,
        grid: &SparseGrid,
        mode: Mode,
        gt: Option<&OccupancyPyramid>,
    ) -> Result<NetOutput> {
        if grid.is_empty() {
            return Err(Error::EmptyInput("initializer input grid"));
        }
        if grid.width != POINT_STATS || grid.level != 0 {
            return Err(Error::Shape(format!(
                "initializer expects level-0 point statistics of width {POINT_STATS}"
            )));
        }
        let gt = check_gt(mode, gt)?;
        let ps = &self.params;
        let x = tape.input(Mat::from_vec(grid.len(), grid.width, grid.features.clone()));
        let enc = self.enc.run(tape, ps, grid.keys(), x, None);
        let dense_keys = dense_box(&enc.keys[LEVELS], self.cfg.dense_budget)?;
        let mut h = tape.gather_rows(enc.h[LEVELS], gather_index(&enc.keys[LEVELS], &dense_keys));
        let rd = Arc::new(subm_rules(&dense_keys));
        for (a, b) in &self.dense {
            let t = a.apply(tape, ps, h, &rd);
            let t = tape.leaky(t);
            let t = b.apply(tape, ps, t, &rd);
            let s = tape.add(h, t);
            h = tape.leaky(s);
        }
        let mut keys = dense_keys;
        let mut occ = None;
        let mut occ_losses = Vec::new();
        let mut levels = Vec::new();
        for l in (0..LEVELS).rev() {
            let fine = sorted_children(&keys);
            let hf = self.up[l].run(tape, ps, &keys, h, &fine, &enc.keys[l], enc.h[l], None);
            let o = self.up[l].occupancy(tape, ps, hf);
            if let Some(g) = gt {
                occ_losses.push(tape.bce(o, g.targets(l, &fine)));
            }
            let ov = tape.value(o).data.clone();
            let keep: Vec<usize> = (0..fine.len())
                .filter(|&i| ov[i] > 0.5 || gt.is_some_and(|g| g.contains(l, &fine[i])))
                .collect();
            levels.push(LevelPrediction {
                level: l,
                keys: fine.clone(),
                occupancy: ov,
            });
            let idx: Vec<Option<usize>> = keep.iter().map(|&i| Some(i)).collect();
            h = tape.gather_rows(hf, idx.clone());
            occ = Some(tape.gather_rows(o, idx));
            keys = select(&fine, &keep);
        }
        let features = self.out.apply(tape, ps, h);
        Ok(NetOutput {
            keys,
            features,
            occupancy: occ.expect("at least one level"),
            occ_losses,
            levels,
        })
    }
}

/// Per-voxel gradient direction and log-magnitude: `F + 1` columns.
pub fn normalize_grads(grad: &GradBuffer) -> Mat {
    let w = grad.width;
    let mut out = Mat::zeros(grad.rows(), w + 1);
    for s in 0..grad.rows() {
        let g = grad.row(s);
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
        let row = out.row_mut(s);
        for (o, v) in row.iter_mut().zip(g) {
            *o = v / n;
        }
        row[w] = n.ln();
    }
    out
}

fn time_input(tape: &mut Tape, ps: &ParamSet, table: usize, t: usize, timesteps: usize) -> Result<Var> {
    if t >= timesteps {
        return Err(Error::Validation(format!("timestep {t} outside 0..{timesteps}")));
    }
    let e = tape.param(ps, table);
    Ok(tape.gather_rows(e, vec![Some(t)]))
}

/// Inputs shared by the densifier and the optimizer.
pub struct LoopInput<'a> {
    pub keys: &'a [VoxelKey],
    /// `n x F` latent features.
    pub features: Var,
    /// `n x 1` occupancy.
    pub occupancy: Var,
    pub grad: &'a GradBuffer,
    pub t: usize,
}

fn loop_features(tape: &mut Tape, inp: &LoopInput, width: usize) -> Result<Var> {
    let n = inp.keys.len();
    if n == 0 {
        return Err(Error::EmptyInput("voxel grid"));
    }
    let f = tape.value(inp.features);
    if f.rows != n || f.cols != width || tape.value(inp.occupancy).rows != n {
        return Err(Error::Shape("features, occupancy and keys disagree".into()));
    }
    if inp.grad.rows() != n || inp.grad.width != width {
        return Err(Error::Shape(format!(
            "gradient buffer of {} x {} for {n} voxels of width {width}",
            inp.grad.rows(),
            inp.grad.width
        )));
    }
    let g = tape.input(normalize_grads(inp.grad));
    Ok(tape.concat_cols(&[inp.features, g, inp.occupancy]))
}

/// Proposes new level-0 voxels around an existing grid.
pub struct DensifierNet {
    pub cfg: NetConfig,
    pub params: ParamSet,
    time: usize,
    enc: Encoder,
    up: Vec<UpBlock>,
    out: Linear,
}

impl DensifierNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(cfg.seed ^ 0x2);
        let time = b.table("time.embed", cfg.timesteps, cfg.time_embed);
        let enc = Encoder::build(&mut b, &cfg, 2 * cfg.feature_width + 2, true);
        let up = (0..LEVELS).map(|l| UpBlock::build(&mut b, &cfg, l, true)).collect();
        let out = b.linear("out", cfg.ch(0), cfg.feature_width, 1.0);
        Ok(Self {
            cfg,
            params: b.ps,
            time,
            enc,
            up,
            out,
        })
    }

    /// Candidate voxels not in `inp.keys`, sorted, with features and occupancy.
    pub fn forward(
        &self,
        tape: &mut Tape,
        inp: &LoopInput,
        mode: Mode,
        gt: Option<&OccupancyPyramid>,
    ) -> Result<NetOutput> {
        let gt = check_gt(mode, gt)?;
        let ps = &self.params;
        let x = loop_features(tape, inp, self.cfg.feature_width)?;
        let temb = time_input(tape, ps, self.time, inp.t, self.cfg.timesteps)?;
        let enc = self.enc.run(tape, ps, inp.keys, x, Some(temb));
        let existing: HashSet<VoxelKey> = inp.keys.iter().copied().collect();
        let mut keys = enc.keys[LEVELS].clone();
        let mut h = enc.h[LEVELS];
        let mut occ_losses = Vec::new();
        let mut levels = Vec::new();
        for l in (0..LEVELS).rev() {
            let fine = sorted_children(&keys);
            let hf = self.up[l].run(tape, ps, &keys, h, &fine, &enc.keys[l], enc.h[l], enc.time_bias[l]);
            let o = self.up[l].occupancy(tape, ps, hf);
            let ov = tape.value(o).data.clone();
            if l > 0 {
                if let Some(g) = gt {
                    occ_losses.push(tape.bce(o, g.targets(l, &fine)));
                }
                let ancestors: HashSet<VoxelKey> = enc.keys[l].iter().copied().collect();
                let keep: Vec<usize> = (0..fine.len())
                    .filter(|&i| {
                        ov[i] > 0.5 || ancestors.contains(&fine[i]) || gt.is_some_and(|g| g.contains(l, &fine[i]))
                    })
                    .collect();
                levels.push(LevelPrediction {
                    level: l,
                    keys: fine.clone(),
                    occupancy: ov,
                });
                h = tape.gather_rows(hf, keep.iter().map(|&i| Some(i)).collect());
                keys = select(&fine, &keep);
            } else {
                let cand: Vec<usize> = (0..fine.len()).filter(|&i| !existing.contains(&fine[i])).collect();
                let ckeys = select(&fine, &cand);
                let idx: Vec<Option<usize>> = cand.iter().map(|&i| Some(i)).collect();
                let hc = tape.gather_rows(hf, idx.clone());
                let oc = tape.gather_rows(o, idx);
                if let Some(g) = gt {
                    occ_losses.push(tape.bce(oc, g.targets(0, &ckeys)));
                }
                levels.push(LevelPrediction {
                    level: 0,
                    keys: ckeys.clone(),
                    occupancy: select(&ov, &cand),
                });
                let features = self.out.apply(tape, ps, hc);
                return Ok(NetOutput {
                    keys: ckeys,
                    features,
                    occupancy: oc,
                    occ_losses,
                    levels,
                });
            }
        }
        unreachable!("level 0 returns")
    }
}

/// Predicts a bounded update for every latent feature.
pub struct OptimizerNet {
    pub cfg: NetConfig,
    pub params: ParamSet,
    time: usize,
    enc: Encoder,
    up: Vec<UpBlock>,
    out: Linear,
}

impl OptimizerNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(cfg.seed ^ 0x3);
        let time = b.table("time.embed", cfg.timesteps, cfg.time_embed);
        let enc = Encoder::build(&mut b, &cfg, 2 * cfg.feature_width + 2, true);
        let up = (0..LEVELS).map(|l| UpBlock::build(&mut b, &cfg, l, false)).collect();
        // A small output layer starts the loop close to the identity update.
        let out = b.linear("out", cfg.ch(0), cfg.feature_width, 0.01);
        Ok(Self {
            cfg,
            params: b.ps,
            time,
            enc,
            up,
            out,
        })
    }

    /// `ΔG` in `[-1, 1]`, one row per input voxel in input order.
    pub fn forward(&self, tape: &mut Tape, inp: &LoopInput) -> Result<Var> {
        let ps = &self.params;
        let x = loop_features(tape, inp, self.cfg.feature_width)?;
        let temb = time_input(tape, ps, self.time, inp.t, self.cfg.timesteps)?;
        let enc = self.enc.run(tape, ps, inp.keys, x, Some(temb));
        let mut h = enc.h[LEVELS];
        for l in (0..LEVELS).rev() {
            h = self.up[l].run(
                tape,
                ps,
                &enc.keys[l + 1],
                h,
                &enc.keys[l],
                &enc.keys[l],
                enc.h[l],
                enc.time_bias[l],
            );
        }
        let a = self.out.apply(tape, ps, h);
        Ok(tape.act(a, Activation::Tanh))
    }
}

macro_rules! checkpointed {
    ($t:ty, $kind:literal) => {
        impl $t {
            pub fn config_hash(&self) -> String {
                config_hash($kind, &self.cfg)
            }

            pub fn save(&self, path: &Path) -> Result<()> {
                let named: Vec<(String, &Mat)> = self.params.names.iter().cloned().zip(&self.params.tensors).collect();
                write_checkpoint(path, &self.config_hash(), &named)
            }

            /// Builds the architecture for `cfg` and loads weights from `path`.
            pub fn load(cfg: NetConfig, path: &Path) -> Result<Self> {
                let mut net = Self::new(cfg)?;
                let tensors = read_checkpoint(path, &net.config_hash())?;
                if tensors.iter().map(|(n, _)| n).ne(net.params.names.iter()) {
                    return Err(Error::ConfigMismatch { path: path.to_path_buf() });
                }
                net.params.load(tensors.into_iter().map(|(_, m)| m).collect())?;
                Ok(net)
            }
        }
    };
}

checkpointed!(InitializerNet, "initializer");
checkpointed!(DensifierNet, "densifier");
checkpointed!(OptimizerNet, "optimizer");
