//! Direct gradient descent on decoded splat parameters.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{step_rng, view_loss, Adam};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::renderer::RenderSettings;
use crate::scene_io::View;
use crate::splat_model::{Gaussian2D, MIN_SCALE};
use crate::tensor::Mat;

/// Step count and per-attribute learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub steps: usize,
    /// Multiplied by the scene extent (bounding-box diagonal).
    pub lr_center: f64,
    /// On log-scales.
    pub lr_scale: f64,
    pub lr_rotation: f64,
    /// On logit-opacity.
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_center: 1.6e-4,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            seed: 0,
        }
    }
}

/// Weights of the refinement objective: `L_c + L_d + 10 L_dist`.
pub fn refine_weights() -> LossWeights {
    LossWeights {
        color: 1.0,
        depth: 1.0,
        occupancy: 0.0,
        normal: 0.0,
        distortion: 10.0,
    }
}

const OPACITY_CLAMP: f64 = 1e-4;

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Refines `gaussians` for `cfg.steps` single-view steps. The splat count never
/// changes. Views are visited in a seeded permutation, reshuffled every epoch.
pub fn sgd_refine(
    gaussians: &[Gaussian2D],
    views: &[&View],
    extent: f64,
    settings: &RenderSettings,
    cfg: &RefineConfig,
) -> Result<Vec<Gaussian2D>> {
    if cfg.steps == 0 || gaussians.is_empty() {
        return Ok(gaussians.to_vec());
    }
    if views.is_empty() {
        return Err(Error::EmptyInput("views for refinement"));
    }
    let n = gaussians.len();
    let mut center = Mat::from_vec(n, 3, gaussians.iter().flat_map(|g| g.center.iter().copied()).collect());
    let mut log_scale = Mat::from_vec(n, 2, gaussians.iter().flat_map(|g| g.scales.map(f64::ln)).collect());
    let mut quat = Mat::from_vec(n, 4, gaussians.iter().flat_map(|g| g.rotation).collect());
    let mut logit_op = Mat::from_vec(n, 1, gaussians.iter().map(|g| logit(g.opacity)).collect());
    let mut color = Mat::from_vec(n, 3, gaussians.iter().flat_map(|g| g.color.iter().copied()).collect());
    let mut adam = Adam::new(0.0, [&center, &log_scale, &quat, &logit_op, &color]);
    let lrs = [
        cfg.lr_center * extent,
        cfg.lr_scale,
        cfg.lr_rotation,
        cfg.lr_opacity,
        cfg.lr_color,
    ];
    let weights = refine_weights();
    let mut current = gaussians.to_vec();
    let mut order: Vec<usize> = Vec::new();
    let mut rng = step_rng(cfg.seed, 0, 0);
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let v = order.pop().expect("refilled above");
        let vl = view_loss(&current, views[v], settings, &weights)?;
        if !vl.report.total.is_finite() {
            return Err(Error::NonFinite(format!("refinement loss at step {step}")));
        }
        let g = &vl.grads;
        let grads = [
            Mat::from_vec(n, 3, g.center.iter().flat_map(|c| c.iter().copied()).collect()),
            Mat::from_vec(
                n,
                2,
                (0..n).flat_map(|i| [0, 1].map(|k| g.scales[i][k] * current[i].scales[k])).collect(),
            ),
            Mat::from_vec(n, 4, g.rotation.iter().flat_map(|q| *q).collect()),
            Mat::from_vec(
                n,
                1,
                (0..n).map(|i| g.opacity[i] * current[i].opacity * (1.0 - current[i].opacity)).collect(),
            ),
            Mat::from_vec(n, 3, g.color.iter().flat_map(|c| c.iter().copied()).collect()),
        ];
        adam.step_scaled(
            [&mut center, &mut log_scale, &mut quat, &mut logit_op, &mut color],
            &grads,
            Some(&lrs),
        )?;
        for (i, s) in current.iter_mut().enumerate() {
            let q = quat.row_mut(i);
            let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            q.iter_mut().for_each(|x| *x /= qn);
            s.center = crate::geometry::Vec3::from_row_slice(center.row(i));
            s.scales = [0, 1].map(|k| log_scale.at(i, k).exp().max(MIN_SCALE));
            s.rotation = [q[0], q[1], q[2], q[3]];
            let o = 1.0 / (1.0 + (-logit_op.at(i, 0)).exp());
            s.opacity = o.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
            let c = color.row_mut(i);
            c.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
            s.color = crate::geometry::Vec3::from_row_slice(c);
        }
    }
    Ok(current)
}
