//! Surface extraction by TSDF fusion and marching cubes, and the depth and
//! Chamfer metrics used for evaluation.

mod kdtree;
mod mc;

use serde::{Deserialize, Serialize};

pub use kdtree::KdTree;
pub use mc::{case_table, marching_cubes, Lattice, EDGES};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Bvh, TriMesh, Vec3};
use crate::par;
use crate::scene_io::{SceneBundle, View};

/// TSDF fusion parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsdfConfig {
    /// Lattice spacing, meters.
    pub voxel: f64,
    /// Truncation distance, meters.
    pub truncation: f64,
    /// Rendered pixels below this alpha carry no depth.
    pub min_alpha: f64,
    /// Largest lattice the volume may allocate.
    pub max_cells: usize,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            voxel: 0.02,
            truncation: 0.08,
            min_alpha: 0.5,
            max_cells: 1 << 26,
        }
    }
}

impl TsdfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel > 0.0 && self.truncation > 0.0 && self.voxel.is_finite() && self.truncation.is_finite()) {
            return Err(Error::Validation("TSDF voxel and truncation must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_alpha) {
            return Err(Error::Validation("TSDF alpha threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TsdfCell {
    /// Signed distance over the truncation, in `[-1, 1]`.
    pub sdf: f64,
    pub weight: f64,
}

/// Truncated signed distances on a regular lattice of sample points.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vec3,
    pub cfg: TsdfConfig,
    pub dims: [usize; 3],
    /// x-fastest.
    pub cells: Vec<TsdfCell>,
}

impl TsdfVolume {
    /// Lattice covering `bbox` padded by the truncation distance.
    pub fn new(bbox: &Aabb, cfg: TsdfConfig) -> Result<Self> {
        cfg.validate()?;
        if !bbox.is_valid() {
            return Err(Error::Validation("TSDF bounds must satisfy min < max".into()));
        }
        let origin = bbox.min - Vec3::repeat(cfg.truncation);
        let ext = bbox.extent() + Vec3::repeat(2.0 * cfg.truncation);
        let dims = [0, 1, 2].map(|a| (ext[a] / cfg.voxel).ceil() as usize + 1);
        let cells = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
        if cells > cfg.max_cells {
            return Err(Error::BudgetExceeded {
                cells,
                budget: cfg.max_cells,
            });
        }
        Ok(Self {
            origin,
            cfg,
            dims,
            cells: vec![TsdfCell::default(); cells],
        })
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> TsdfCell {
        self.cells[self.index(i, j, k)]
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.cfg.voxel
    }

    /// Projective update with one depth map. Pixels whose depth is not
    /// positive, or whose `alpha` is below the threshold, are skipped, as are
    /// lattice points further than the truncation behind the observed surface.
    pub fn integrate(&mut self, depth: &[f64], alpha: Option<&[f64]>, view: &View) -> Result<()> {
        let (w, h) = (view.width(), view.height());
        if depth.len() != w * h || alpha.is_some_and(|a| a.len() != w * h) {
            return Err(Error::Shape(format!("depth map for a {w}x{h} view has {} entries", depth.len())));
        }
        let [nx, ny, _] = self.dims;
        let (origin, voxel, trunc, min_alpha) = (self.origin, self.cfg.voxel, self.cfg.truncation, self.cfg.min_alpha);
        par::for_each_chunk_mut(&mut self.cells, nx * ny, |k, slab| {
            for (n, cell) in slab.iter_mut().enumerate() {
                let (i, j) = (n % nx, n / nx);
                let p = origin + Vec3::new(i as f64, j as f64, k as f64) * voxel;
                let (x, y, z) = view.project(&p);
                if !(z > 0.0 && x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
                    continue;
                }
                let px = y as usize * w + x as usize;
                let d = depth[px];
                if !(d > 0.0 && d.is_finite()) || alpha.is_some_and(|a| a[px] < min_alpha) {
                    continue;
                }
                let sdf = d - z;
                if sdf < -trunc {
                    continue;
                }
                let tsdf = (sdf / trunc).min(1.0);
                cell.sdf = (cell.sdf * cell.weight + tsdf) / (cell.weight + 1.0);
                cell.weight += 1.0;
            }
        });
        Ok(())
    }

    /// Zero level set of the observed cells.
    pub fn extract_mesh(&self) -> TriMesh {
        marching_cubes(self, 0.0)
    }
}

impl Lattice for TsdfVolume {
    fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn origin(&self) -> Vec3 {
        self.origin
    }

    fn spacing(&self) -> f64 {
        self.cfg.voxel
    }

    fn value(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        let c = self.cell(i, j, k);
        (c.weight > 0.0).then_some(c.sdf)
    }
}

/// Samples of a function on a lattice, for analytic tests and tools.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl SampledField {
    pub fn from_fn(origin: Vec3, spacing: f64, dims: [usize; 3], f: impl Fn(&Vec3) -> f64 + Sync + Send) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        let values = par::map_range(n, |idx| {
            let (i, j, k) = (idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1]));
            f(&(origin + Vec3::new(i as f64, j as f64, k as f64) * spacing))
        });
        Self {
            origin,
            spacing,
            dims,
            values,
        }
    }
}

impl Lattice for SampledField {
    fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn origin(&self) -> Vec3 {
        self.origin
    }

    fn spacing(&self) -> f64 {
        self.spacing
    }

    fn value(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        Some(self.values[(k * self.dims[1] + j) * self.dims[0] + i])
    }
}

/// Fuses `depths[v]` rendered from `views[v]` and extracts the mesh.
pub fn fuse(bbox: &Aabb, cfg: TsdfConfig, views: &[&View], depths: &[(&[f64], Option<&[f64]>)]) -> Result<(TsdfVolume, TriMesh)> {
    if views.len() != depths.len() {
        return Err(Error::Shape(format!("{} depth maps for {} views", depths.len(), views.len())));
    }
    let mut vol = TsdfVolume::new(bbox, cfg)?;
    for (v, (d, a)) in views.iter().zip(depths) {
        vol.integrate(d, *a, v)?;
    }
    let mesh = vol.extract_mesh();
    Ok((vol, mesh))
}

/// Where evaluated depth comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    /// Depth rendered from the splats.
    #[default]
    Splats,
    /// Depth ray-cast against the extracted mesh.
    Mesh,
}

/// Depth of the first mesh hit along every pixel ray, 0 where nothing is hit.
pub fn mesh_depth(bvh: &Bvh, view: &View) -> Vec<f64> {
    let (w, h) = (view.width(), view.height());
    par::map_range(w * h, |p| {
        let (o, d) = view.pixel_ray(p % w, p / w);
        bvh.ray_cast(&o, &d, 1e-6).map_or(0.0, |(t, _)| t)
    })
}

/// Symmetric Chamfer distance: the mean of both directed mean
/// nearest-neighbor distances. `None` when either cloud is empty.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let directed = |from: &[Vec3], to: &[Vec3]| {
        let tree = KdTree::new(to);
        let d = par::map_slice(from, |p| tree.nearest_dist2(p).expect("non-empty").sqrt());
        d.iter().sum::<f64>() / from.len() as f64
    };
    Some(0.5 * (directed(a, b) + directed(b, a)))
}

/// Quadratic-time [`chamfer`].
pub fn chamfer_brute(a: &[Vec3], b: &[Vec3]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let directed = |from: &[Vec3], to: &[Vec3]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
            .sum::<f64>()
            / from.len() as f64
    };
    Some(0.5 * (directed(a, b) + directed(b, a)))
}

/// Accuracy thresholds, meters.
pub const ACC_THRESHOLDS: [f64; 3] = [0.02, 0.05, 0.10];

/// Depth error statistics over valid pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_err: f64,
    pub acc: [f64; 3],
    pub pixels: usize,
}

/// Mean absolute error and threshold accuracies over pixels where `gt > 0`.
pub fn depth_metrics(maps: &[(&[f64], &[f64])]) -> Result<DepthMetrics> {
    let (mut sum, mut hits, mut n) = (0.0, [0usize; 3], 0usize);
    for (pred, gt) in maps {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("depth maps of {} and {} pixels", pred.len(), gt.len())));
        }
        for (p, g) in pred.iter().zip(gt.iter()) {
            if *g > 0.0 && g.is_finite() {
                let e = (p - g).abs();
                sum += e;
                for (h, t) in hits.iter_mut().zip(ACC_THRESHOLDS) {
                    *h += usize::from(e <= t);
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("valid ground-truth depth pixels"));
    }
    Ok(DepthMetrics {
        abs_err: sum / n as f64,
        acc: hits.map(|h| h as f64 / n as f64),
        pixels: n,
    })
}

/// Reconstruction quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean absolute depth error over held-out views, meters.
    pub abs_err: f64,
    pub acc_2cm: f64,
    pub acc_5cm: f64,
    pub acc_10cm: f64,
    /// Symmetric Chamfer distance between cropped predicted and ground-truth vertices, meters.
    pub chamfer: f64,
    pub runtime_s: f64,
    pub depth_pixels: usize,
    pub pred_vertices: usize,
}

impl EvalReport {
    /// Plain-text table with the usual column names.
    pub fn table(&self) -> String {
        format!(
            "| Abs Err | Acc 2cm | Acc 5cm | Acc 10cm | Chamfer | Time (s) |\n\
             |---------|---------|---------|----------|---------|----------|\n\
             | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.1} |\n",
            self.abs_err, self.acc_2cm, self.acc_5cm, self.acc_10cm, self.chamfer, self.runtime_s
        )
    }
}

/// Depth metrics of `pred_depths` (view index, depth map) against the views'
/// ground truth, and Chamfer distance of `pred_mesh` against the ground-truth
/// mesh with predicted vertices outside the ground-truth bounds dropped.
pub fn evaluate(pred_mesh: &TriMesh, pred_depths: &[(usize, Vec<f64>)], scene: &SceneBundle) -> Result<EvalReport> {
    let gt_mesh = scene
        .gt_mesh
        .as_ref()
        .filter(|m| !m.vertices.is_empty())
        .ok_or(Error::MissingGroundTruth("mesh for evaluation"))?;
    let mut maps = Vec::with_capacity(pred_depths.len());
    for (v, d) in pred_depths {
        let view = scene
            .views
            .get(*v)
            .ok_or_else(|| Error::Validation(format!("no view with index {v}")))?;
        let gt = view
            .gt_depth
            .as_ref()
            .ok_or(Error::MissingGroundTruth("depth for evaluation"))?;
        maps.push((d.as_slice(), gt.as_slice()));
    }
    if maps.is_empty() {
        return Err(Error::EmptyInput("depth maps for evaluation"));
    }
    let dm = depth_metrics(&maps)?;
    let bounds = gt_mesh.bbox();
    let pred: Vec<Vec3> = pred_mesh.vertices.iter().filter(|p| bounds.contains(p)).copied().collect();
    let chamfer =
        chamfer(&pred, &gt_mesh.vertices).ok_or(Error::EmptyInput("predicted vertices inside the ground-truth bounds"))?;
    Ok(EvalReport {
        abs_err: dm.abs_err,
        acc_2cm: dm.acc[0],
        acc_5cm: dm.acc[1],
        acc_10cm: dm.acc[2],
        chamfer,
        runtime_s: 0.0,
        depth_pixels: dm.pixels,
        pred_vertices: pred.len(),
    })
}

#[cfg(test)]
mod tests;
