//! Training objectives and their gradients with respect to rendered outputs.

mod ssim;

use serde::{Deserialize, Serialize};

pub use ssim::{blur, ssim, C1, C2, SIGMA, WINDOW};

use crate::error::{Error, Result};
use crate::geometry::Bvh;
use crate::renderer::{FragmentGrads, RenderOutput};
use crate::splat_model::{rotation_matrix_grad, Gaussian2D, GaussianGrads};
use crate::voxel_grid::{SparseGrid, VoxelKey};

pub const L1_WEIGHT: f64 = 0.8;
pub const SSIM_WEIGHT: f64 = 0.2;
pub const DISTORTION_MIN_ALPHA: f64 = 0.5;
pub const BCE_EPS: f64 = 1e-6;

/// Image loss `0.8 * mean|x - y| + 0.2 * (1 - SSIM(x, y))` over interleaved
/// RGB images, with its gradient with respect to `rendered`.
pub fn rendering_loss(rendered: &[f64], target: &[f64], width: usize, height: usize) -> Result<(f64, Vec<f64>)> {
    let n = width * height * 3;
    if rendered.len() != n || target.len() != n {
        return Err(Error::Shape(format!(
            "images of {} and {} values for {width}x{height} RGB",
            rendered.len(),
            target.len()
        )));
    }
    let l1 = rendered.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    let (s, sg) = ssim(rendered, target, width, height, true);
    let grad = rendered
        .iter()
        .zip(target)
        .zip(&sg)
        .map(|((a, b), g)| {
            let sign = if a > b {
                1.0
            } else if a < b {
                -1.0
            } else {
                0.0
            };
            L1_WEIGHT * sign / n as f64 - SSIM_WEIGHT * g
        })
        .collect();
    Ok((L1_WEIGHT * l1 + SSIM_WEIGHT * (1.0 - s), grad))
}

/// Masked mean absolute depth error.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    /// No valid pixel: value and gradient are zero.
    pub empty: bool,
}

/// Mean `|rendered - gt|` over pixels where `valid` holds (default: `gt > 0`).
pub fn depth_loss(rendered: &[f64], gt: &[f64], valid: Option<&[bool]>) -> Result<DepthLoss> {
    if rendered.len() != gt.len() || valid.is_some_and(|v| v.len() != gt.len()) {
        return Err(Error::Shape("depth maps differ in size".into()));
    }
    let ok = |i: usize| valid.map_or(gt[i] > 0.0, |v| v[i] && gt[i] > 0.0);
    let count = (0..gt.len()).filter(|&i| ok(i)).count();
    if count == 0 {
        log::warn!("depth loss has no valid pixels");
        return Ok(DepthLoss {
            value: 0.0,
            grad: vec![0.0; gt.len()],
            empty: true,
        });
    }
    let m = count as f64;
    let mut value = 0.0;
    let grad = (0..gt.len())
        .map(|i| {
            if !ok(i) {
                return 0.0;
            }
            let d = rendered[i] - gt[i];
            value += d.abs();
            if d > 0.0 {
                1.0 / m
            } else if d < 0.0 {
                -1.0 / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(DepthLoss {
        value: value / m,
        grad,
        empty: false,
    })
}

/// Opacity-weighted mean of `1 - n_g · n_m`, where `n_m` is the normal of the
/// mesh face closest to each splat center. The gradient reaches rotations only.
pub fn normal_loss(gaussians: &[Gaussian2D], mesh: &Bvh) -> Result<(f64, GaussianGrads)> {
    if mesh.mesh().faces.is_empty() {
        return Err(Error::MissingGroundTruth("mesh for the normal loss"));
    }
    let mut grads = GaussianGrads::zeros(gaussians.len());
    let wsum: f64 = gaussians.iter().map(|g| g.opacity).sum();
    if gaussians.is_empty() || wsum <= 0.0 {
        return Ok((0.0, grads));
    }
    let targets = crate::par::map_slice(gaussians, |g| {
        let hit = mesh.closest(&g.center).expect("non-empty mesh");
        mesh.mesh().face_normal(hit.face)
    });
    let mut value = 0.0;
    for (i, g) in gaussians.iter().enumerate() {
        let frame = g.frame();
        let n = frame.column(2);
        value += g.opacity * (1.0 - n.dot(&targets[i]));
        let mut gr = crate::geometry::Mat3::zeros();
        gr.set_column(2, &(-targets[i] * (g.opacity / wsum)));
        grads.rotation[i] = rotation_matrix_grad(&g.rotation, &gr);
    }
    Ok((value / wsum, grads))
}

/// `Σ_ij w_i w_j |z_i - z_j|` for one ray and its gradients, in `O(n log n)`.
pub fn ray_distortion(w: &[f64], z: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = w.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    let total_w: f64 = w.iter().sum();
    let total_s: f64 = w.iter().zip(z).map(|(a, b)| a * b).sum();
    let (mut w_lo, mut s_lo) = (0.0, 0.0);
    let mut value = 0.0;
    let mut dw = vec![0.0; n];
    let mut dz = vec![0.0; n];
    for &i in &order {
        let w_hi = total_w - w_lo - w[i];
        let s_hi = total_s - s_lo - w[i] * z[i];
        value += 2.0 * w[i] * (z[i] * w_lo - s_lo);
        dw[i] = 2.0 * (z[i] * w_lo - s_lo + s_hi - z[i] * w_hi);
        dz[i] = 2.0 * w[i] * (w_lo - w_hi);
        w_lo += w[i];
        s_lo += w[i] * z[i];
    }
    (value, dw, dz)
}

/// Mean ray distortion over pixels with alpha above 0.5, with gradients with
/// respect to each fragment's weight and depth.
pub fn distortion_loss(out: &RenderOutput) -> (f64, FragmentGrads) {
    let fr = &out.fragments;
    let mut grads = FragmentGrads {
        weight: vec![0.0; fr.len()],
        depth: vec![0.0; fr.len()],
    };
    let rays: Vec<usize> = (0..out.pixels()).filter(|&p| out.alpha[p] > DISTORTION_MIN_ALPHA).collect();
    if rays.is_empty() {
        return (0.0, grads);
    }
    let m = rays.len() as f64;
    let mut value = 0.0;
    for p in rays {
        let r = fr.pixel(p);
        let w: Vec<f64> = r.clone().map(|k| fr.alpha[k] * fr.trans[k]).collect();
        let (d, dw, dz) = ray_distortion(&w, &fr.z[r.clone()]);
        value += d;
        for (j, k) in r.enumerate() {
            grads.weight[k] = dw[j] / m;
            grads.depth[k] = dz[j] / m;
        }
    }
    (value / m, grads)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-6, 1 - 1e-6]`.
pub fn bce(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape("prediction and target lengths differ".into()));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            value -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
            if p < BCE_EPS || p > 1.0 - BCE_EPS {
                0.0
            } else {
                (-t / q + (1.0 - t) / (1.0 - q)) / n
            }
        })
        .collect();
    Ok((value / n, grad))
}

/// 1 where `gt` has the key, else 0.
pub fn occupancy_targets(keys: &[VoxelKey], gt: &SparseGrid) -> Vec<f64> {
    keys.iter().map(|k| if gt.contains(k) { 1.0 } else { 0.0 }).collect()
}

/// BCE between the predicted occupancy of candidate voxels and the voxelized
/// ground truth at the same level.
pub fn occupancy_loss(pred: &SparseGrid, gt: &SparseGrid) -> Result<(f64, Vec<f64>)> {
    if pred.level != gt.level || (pred.edge - gt.edge).abs() > 1e-12 * gt.edge {
        return Err(Error::Key(format!(
            "prediction at level {} but ground truth at level {}",
            pred.level, gt.level
        )));
    }
    bce(&pred.occupancy, &occupancy_targets(pred.keys(), gt))
}

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub color: f64,
    pub depth: f64,
    pub occupancy: f64,
    pub normal: f64,
    pub distortion: f64,
}

impl LossWeights {
    /// Initializer training: `L_c + L_d + L_occ + 0.01 L_n + 10 L_dist`.
    pub const fn stage1() -> Self {
        Self {
            color: 1.0,
            depth: 1.0,
            occupancy: 1.0,
            normal: 0.01,
            distortion: 10.0,
        }
    }

    /// Densifier/optimizer training: `L_c + L_d + 10 L_dist`; the densifier's
    /// occupancy loss is added on top with weight 1.
    pub const fn stage2() -> Self {
        Self {
            color: 1.0,
            depth: 1.0,
            occupancy: 1.0,
            normal: 0.0,
            distortion: 10.0,
        }
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub color: f64,
    pub depth: f64,
    pub normal: f64,
    pub distortion: f64,
    pub occupancy: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.color, self.depth, self.normal, self.distortion, self.occupancy, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.color += r.color / n;
            m.depth += r.depth / n;
            m.normal += r.normal / n;
            m.distortion += r.distortion / n;
            m.occupancy += r.occupancy / n;
            m.total += r.total / n;
        }
        m
    }
}

/// Stage-1 total with the given weights.
pub fn assemble_stage1(r: &LossReport, w: &LossWeights) -> f64 {
    w.color * r.color + w.depth * r.depth + w.occupancy * r.occupancy + w.normal * r.normal + w.distortion * r.distortion
}

/// Stage-2 total: `L_c + L_d + 10 L_dist` plus the densifier's occupancy loss.
pub fn assemble_stage2(r: &LossReport, w: &LossWeights) -> f64 {
    w.color * r.color + w.depth * r.depth + w.distortion * r.distortion + w.occupancy * r.occupancy
}

#[cfg(test)]
mod tests;
