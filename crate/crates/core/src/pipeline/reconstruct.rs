//! End-to-end reconstruction of one scene.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    initial_grid, run_loop, sgd_refine, LoopConfig, LoopState, LoopVariant, Models, PreparedScene, RefineConfig, TraceOp,
};
use crate::error::Result;
use crate::geometry::{Bvh, TriMesh};
use crate::meshing::{evaluate, fuse, mesh_depth, DepthSource, EvalReport, TsdfConfig, TsdfVolume};
use crate::renderer::{render, RenderSettings};
use crate::splat_model::{decode, Gaussian2D};
use crate::voxel_grid::GradBuffer;

/// Everything `reconstruct` needs besides the scene and weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub looping: LoopConfig,
    pub refine: RefineConfig,
    pub tsdf: TsdfConfig,
    pub render: RenderSettings,
    pub depth_source: DepthSource,
    pub variant: LoopVariant,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            looping: LoopConfig::default(),
            refine: RefineConfig::default(),
            tsdf: TsdfConfig::default(),
            render: RenderSettings::default(),
            depth_source: DepthSource::Splats,
            variant: LoopVariant::FULL,
        }
    }
}

impl Default for LoopVariant {
    fn default() -> Self {
        Self::FULL
    }
}

/// Output of [`reconstruct`].
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub state: LoopState,
    /// Splats decoded from the final grid, before refinement.
    pub decoded: Vec<Gaussian2D>,
    /// Splats after refinement (equal to `decoded` with zero refinement steps).
    pub gaussians: Vec<Gaussian2D>,
    pub volume: TsdfVolume,
    pub mesh: TriMesh,
    /// Depth of each held-out view, by view index.
    pub heldout_depths: Vec<(usize, Vec<f64>)>,
    /// Present when the scene has ground truth.
    pub report: Option<EvalReport>,
}

/// Loop, optional refinement, TSDF fusion of the training-view depth renders,
/// marching cubes and evaluation on the held-out views.
pub fn reconstruct(prep: &PreparedScene, models: &Models, cfg: &ReconstructConfig) -> Result<Reconstruction> {
    let start = Instant::now();
    let state = run_loop(prep, models, &cfg.looping, &cfg.render, cfg.variant)?;
    finish(prep, models, cfg, state, start)
}

/// Like [`reconstruct`] but skips the loop: `G_0` goes straight to refinement
/// and meshing. This isolates what the loop adds on top of the initializer.
pub fn reconstruct_initial(prep: &PreparedScene, models: &Models, cfg: &ReconstructConfig) -> Result<Reconstruction> {
    let start = Instant::now();
    let grid = initial_grid(prep, models, cfg.variant)?;
    let state = LoopState {
        t: 0,
        grad: GradBuffer::for_grid(&grid),
        trace: vec![TraceOp::Initialize { voxels: grid.len() }],
        grid,
        history: Vec::new(),
    };
    finish(prep, models, cfg, state, start)
}

fn finish(
    prep: &PreparedScene,
    models: &Models,
    cfg: &ReconstructConfig,
    state: LoopState,
    start: Instant,
) -> Result<Reconstruction> {
    let decoded = decode(&state.grid, &models.decoder, prep.bbox())?.gaussians;
    let train = prep.views(&prep.train);
    let extent = prep.bbox().extent().norm();
    let gaussians = sgd_refine(&decoded, &train, extent, &cfg.render, &cfg.refine)?;
    let renders: Vec<_> = train.iter().map(|v| render(&gaussians, v, &cfg.render)).collect();
    let maps: Vec<(&[f64], Option<&[f64]>)> = renders
        .iter()
        .map(|r| (r.depth.as_slice(), Some(r.alpha.as_slice())))
        .collect();
    let (volume, mesh) = fuse(prep.bbox(), cfg.tsdf, &train, &maps)?;
    let bvh = (cfg.depth_source == DepthSource::Mesh).then(|| Bvh::new(mesh.clone()));
    let heldout_depths: Vec<(usize, Vec<f64>)> = prep
        .heldout
        .iter()
        .map(|&i| {
            let v = &prep.scene.views[i];
            let d = match &bvh {
                Some(b) => mesh_depth(b, v),
                None => render(&gaussians, v, &cfg.render).depth,
            };
            (i, d)
        })
        .collect();
    let has_gt = prep.scene.gt_mesh.is_some()
        && !heldout_depths.is_empty()
        && prep.heldout.iter().all(|&i| prep.scene.views[i].gt_depth.is_some());
    let report = if has_gt {
        let mut r = evaluate(&mesh, &heldout_depths, &prep.scene)?;
        r.runtime_s = start.elapsed().as_secs_f64();
        Some(r)
    } else {
        None
    };
    Ok(Reconstruction {
        state,
        decoded,
        gaussians,
        volume,
        mesh,
        heldout_depths,
        report,
    })
}
