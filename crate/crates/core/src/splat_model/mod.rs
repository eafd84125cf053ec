//! Flat Gaussian splats and the per-voxel MLP that decodes them from latent
//! voxel features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Mat3, Vec3};
use crate::par;
use crate::tensor::Mat;
use crate::voxel_grid::{GradBuffer, SparseGrid};

/// Raw decoder outputs per splat: position (3), scales (2), quaternion (4),
/// an unused opacity slot (1) and color (3).
pub const RAW_PER_SPLAT: usize = 13;
/// Width of the voxel-center positional encoding appended to each feature.
pub const PE_WIDTH: usize = 10;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const MIN_SCALE: f64 = 1e-4;

/// A flat elliptical Gaussian disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    pub center: Vec3,
    pub scales: [f64; 2],
    /// Quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: Vec3,
}

impl Gaussian2D {
    /// Columns are the two tangent axes and the normal.
    pub fn frame(&self) -> Mat3 {
        rotation_matrix(&self.rotation)
    }

    pub fn normal(&self) -> Vec3 {
        gaussian_normal(self)
    }

    pub fn is_valid(&self) -> bool {
        let qn = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        (qn - 1.0).abs() <= 1e-6
            && self.scales.iter().all(|s| *s > 0.0)
            && (0.0..=1.0).contains(&self.opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
            && self.center.iter().all(|c| c.is_finite())
    }
}

/// Rotation matrix of a (unit) quaternion `(w, x, y, z)`. The formula is used
/// as is, without renormalizing.
pub fn rotation_matrix(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient with respect to [`rotation_matrix`] back to the quaternion.
pub fn rotation_matrix_grad(q: &[f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Unit normal of the disk: the third column of its rotation.
pub fn gaussian_normal(g: &Gaussian2D) -> Vec3 {
    rotation_matrix(&g.rotation).column(2).into_owned()
}

/// Per-splat partial derivatives, aligned with the decode order.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub center: Vec<Vec3>,
    pub scales: Vec<[f64; 2]>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vec3>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            center: vec![Vec3::zeros(); n],
            scales: vec![[0.0; 2]; n],
            rotation: vec![[0.0; 4]; n],
            opacity: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    /// Flattened as 13 values per splat: center, scales, rotation, opacity, color.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * RAW_PER_SPLAT);
        for i in 0..self.len() {
            out.extend(self.center[i].iter());
            out.extend(self.scales[i]);
            out.extend(self.rotation[i]);
            out.push(self.opacity[i]);
            out.extend(self.color[i].iter());
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let n = flat.len() / RAW_PER_SPLAT;
        let mut g = Self::zeros(n);
        for (i, c) in flat.chunks_exact(RAW_PER_SPLAT).enumerate() {
            g.center[i] = Vec3::new(c[0], c[1], c[2]);
            g.scales[i] = [c[3], c[4]];
            g.rotation[i] = [c[5], c[6], c[7], c[8]];
            g.opacity[i] = c[9];
            g.color[i] = Vec3::new(c[10], c[11], c[12]);
        }
        g
    }

    pub fn add_assign(&mut self, o: &GaussianGrads) -> Result<()> {
        if o.len() != self.len() {
            return Err(Error::Shape(format!(
                "gradient sets of {} and {} splats",
                self.len(),
                o.len()
            )));
        }
        for i in 0..self.len() {
            self.center[i] += o.center[i];
            for k in 0..2 {
                self.scales[i][k] += o.scales[i][k];
            }
            for k in 0..4 {
                self.rotation[i][k] += o.rotation[i][k];
            }
            self.opacity[i] += o.opacity[i];
            self.color[i] += o.color[i];
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Decoder architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub feature_width: usize,
    pub hidden: usize,
    /// Splats per voxel (`v_g`).
    pub splats_per_voxel: usize,
    /// Level-0 voxel edge (`v_d`), meters.
    pub voxel_edge: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            feature_width: 64,
            hidden: 128,
            splats_per_voxel: 2,
            voxel_edge: 0.04,
        }
    }
}

impl DecoderConfig {
    /// Radius of the cube in which a splat center may move around its voxel center.
    pub fn offset_radius(&self) -> f64 {
        offset_radius(self.voxel_edge)
    }

    pub fn max_scale(&self) -> f64 {
        4.0 * self.voxel_edge
    }

    pub fn raw_width(&self) -> usize {
        RAW_PER_SPLAT * self.splats_per_voxel
    }
}

/// `R = 4 v_d`.
pub fn offset_radius(voxel_edge: f64) -> f64 {
    4.0 * voxel_edge
}

/// Weights of the three-layer decoder MLP. `w[l]` is `in x out`, `b[l]` is `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    pub w: [Mat; 3],
    pub b: [Mat; 3],
}

impl DecoderParams {
    pub fn init(cfg: DecoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [cfg.feature_width + PE_WIDTH, cfg.hidden, cfg.hidden, cfg.raw_width()];
        let layer = |l: usize, rng: &mut ChaCha8Rng| {
            let fan_in = dims[l] as f64;
            let gain = if l == 2 { 0.1 } else { 1.0 };
            Mat::uniform(dims[l], dims[l + 1], gain * (6.0 / fan_in).sqrt(), rng)
        };
        let w = [layer(0, &mut rng), layer(1, &mut rng), layer(2, &mut rng)];
        let mut b3 = Mat::zeros(1, cfg.raw_width());
        let scale_bias = ((cfg.voxel_edge / 2.0).exp_m1()).ln();
        for j in 0..cfg.splats_per_voxel {
            let o = j * RAW_PER_SPLAT;
            b3.data[o + 3] = scale_bias;
            b3.data[o + 4] = scale_bias;
            b3.data[o + 5] = 1.0;
        }
        Self {
            cfg,
            w,
            b: [Mat::zeros(1, dims[1]), Mat::zeros(1, dims[2]), b3],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg,
            w: self.w.clone().map(|m| Mat::zeros(m.rows, m.cols)),
            b: self.b.clone().map(|m| Mat::zeros(m.rows, m.cols)),
        }
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        (0..3)
            .flat_map(|l| [(format!("decoder.w{l}"), &self.w[l]), (format!("decoder.b{l}"), &self.b[l])])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let DecoderParams { w, b, .. } = self;
        w.iter_mut()
            .zip(b.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|m| m.is_finite())
    }
}

/// Level, bbox-normalized center in `[-1, 1]^3`, and its sines and cosines.
pub fn positional_encoding(center: &Vec3, level: u32, bbox: &Aabb) -> [f64; PE_WIDTH] {
    let ext = bbox.extent();
    let mut out = [0.0; PE_WIDTH];
    out[0] = level as f64;
    for a in 0..3 {
        let c = if ext[a] > 0.0 {
            (2.0 * (center[a] - bbox.min[a]) / ext[a] - 1.0).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        out[1 + a] = c;
        out[4 + a] = (std::f64::consts::PI * c).sin();
        out[7 + a] = (std::f64::consts::PI * c).cos();
    }
    out
}

/// Decoder input rows: feature followed by positional encoding.
pub fn decoder_input(grid: &SparseGrid, bbox: &Aabb) -> Mat {
    let w = grid.width + PE_WIDTH;
    let mut x = Mat::zeros(grid.len(), w);
    for s in 0..grid.len() {
        let row = x.row_mut(s);
        row[..grid.width].copy_from_slice(grid.feature(s));
        row[grid.width..].copy_from_slice(&positional_encoding(&grid.center(s), grid.level, bbox));
    }
    x
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, linear above 20.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_grad(x: f64) -> f64 {
    if x > 20.0 {
        1.0
    } else {
        sigmoid(x)
    }
}

pub fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Quaternion from raw outputs: zero vectors get `w += 1e-8` first.
pub fn normalize_quaternion(raw: &[f64]) -> ([f64; 4], f64) {
    let mut q = [raw[0], raw[1], raw[2], raw[3]];
    let mut n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        q[0] += 1e-8;
        n = 1e-8;
    }
    (q.map(|v| v / n), n)
}

/// Splat from one block of raw outputs.
pub fn splat_from_raw(raw: &[f64], voxel_center: &Vec3, cfg: &DecoderConfig, opacity: f64) -> Gaussian2D {
    let r = cfg.offset_radius();
    let center = voxel_center + Vec3::new(raw[0], raw[1], raw[2]).map(|x| r * (2.0 * sigmoid(x) - 1.0));
    let scale = |x: f64| softplus(x).clamp(MIN_SCALE, cfg.max_scale());
    let (rotation, _) = normalize_quaternion(&raw[5..9]);
    Gaussian2D {
        center,
        scales: [scale(raw[3]), scale(raw[4])],
        rotation,
        opacity,
        color: Vec3::new(sigmoid(raw[10]), sigmoid(raw[11]), sigmoid(raw[12])),
    }
}

/// Gradient with respect to the raw outputs given gradients of one splat.
pub fn splat_raw_grad(
    raw: &[f64],
    cfg: &DecoderConfig,
    gc: &Vec3,
    gs: &[f64; 2],
    gq: &[f64; 4],
    gcol: &Vec3,
    out: &mut [f64],
) {
    let r = cfg.offset_radius();
    for a in 0..3 {
        let s = sigmoid(raw[a]);
        out[a] = gc[a] * 2.0 * r * s * (1.0 - s);
    }
    for k in 0..2 {
        let sp = softplus(raw[3 + k]);
        out[3 + k] = if sp > MIN_SCALE && sp < cfg.max_scale() {
            gs[k] * softplus_grad(raw[3 + k])
        } else {
            0.0
        };
    }
    let (q, n) = normalize_quaternion(&raw[5..9]);
    let dot: f64 = (0..4).map(|k| q[k] * gq[k]).sum();
    for k in 0..4 {
        out[5 + k] = (gq[k] - q[k] * dot) / n;
    }
    out[9] = 0.0;
    for a in 0..3 {
        let s = sigmoid(raw[10 + a]);
        out[10 + a] = gcol[a] * s * (1.0 - s);
    }
}

/// Decoded splats; splat `i` comes from voxel slot `slots[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub gaussians: Vec<Gaussian2D>,
    pub slots: Vec<usize>,
}

struct Forward {
    x: Mat,
    a1: Mat,
    h1: Mat,
    a2: Mat,
    h2: Mat,
    raw: Mat,
}

fn forward(grid: &SparseGrid, params: &DecoderParams, bbox: &Aabb) -> Result<Forward> {
    if grid.width != params.cfg.feature_width {
        return Err(Error::Shape(format!(
            "grid features have width {}, decoder expects {}",
            grid.width, params.cfg.feature_width
        )));
    }
    let x = decoder_input(grid, bbox);
    let mut a1 = x.matmul(&params.w[0]);
    a1.add_row(&params.b[0]);
    let h1 = a1.map(leaky);
    let mut a2 = h1.matmul(&params.w[1]);
    a2.add_row(&params.b[1]);
    let h2 = a2.map(leaky);
    let mut raw = h2.matmul(&params.w[2]);
    raw.add_row(&params.b[2]);
    Ok(Forward { x, a1, h1, a2, h2, raw })
}

/// Raw decoder outputs, one row per voxel.
pub fn decode_raw(grid: &SparseGrid, params: &DecoderParams, bbox: &Aabb) -> Result<Mat> {
    Ok(forward(grid, params, bbox)?.raw)
}

/// Decodes every voxel into `v_g` splats; opacity is the voxel's occupancy.
pub fn decode(grid: &SparseGrid, params: &DecoderParams, bbox: &Aabb) -> Result<Decoded> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("voxel grid"));
    }
    let raw = decode_raw(grid, params, bbox)?;
    Ok(splats_from_raw(grid, &raw, &params.cfg))
}

pub fn splats_from_raw(grid: &SparseGrid, raw: &Mat, cfg: &DecoderConfig) -> Decoded {
    let g = cfg.splats_per_voxel;
    let per_voxel = par::map_range(grid.len(), |s| {
        let c = grid.center(s);
        (0..g)
            .map(|j| splat_from_raw(&raw.row(s)[j * RAW_PER_SPLAT..(j + 1) * RAW_PER_SPLAT], &c, cfg, grid.occupancy[s]))
            .collect::<Vec<_>>()
    });
    Decoded {
        gaussians: per_voxel.into_iter().flatten().collect(),
        slots: (0..grid.len()).flat_map(|s| std::iter::repeat_n(s, g)).collect(),
    }
}

/// Gradients of the raw decoder outputs, one row per voxel.
pub fn raw_grads(grid: &SparseGrid, raw: &Mat, cfg: &DecoderConfig, grads: &GaussianGrads) -> Mat {
    let g = cfg.splats_per_voxel;
    let mut out = Mat::zeros(grid.len(), cfg.raw_width());
    let width = out.cols;
    par::for_each_chunk_mut(&mut out.data, width, |s, row| {
        for j in 0..g {
            let i = s * g + j;
            let o = j * RAW_PER_SPLAT;
            splat_raw_grad(
                &raw.row(s)[o..o + RAW_PER_SPLAT],
                cfg,
                &grads.center[i],
                &grads.scales[i],
                &grads.rotation[i],
                &grads.color[i],
                &mut row[o..o + RAW_PER_SPLAT],
            );
        }
    });
    out
}

/// Result of [`decode_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBackward {
    pub features: GradBuffer,
    /// Per-slot gradient of the occupancy (the splats' opacity).
    pub occupancy: Vec<f64>,
    pub params: DecoderParams,
}

/// Chain rule through the decoder.
pub fn decode_backward(
    grid: &SparseGrid,
    params: &DecoderParams,
    bbox: &Aabb,
    grads: &GaussianGrads,
) -> Result<DecoderBackward> {
    let g = params.cfg.splats_per_voxel;
    if grads.len() != grid.len() * g {
        return Err(Error::Shape(format!(
            "{} splat gradients for {} voxels x {g}",
            grads.len(),
            grid.len()
        )));
    }
    let f = forward(grid, params, bbox)?;
    let d_raw = raw_grads(grid, &f.raw, &params.cfg, grads);
    let mut out = params.zeros_like();
    out.w[2] = f.h2.matmul_tn(&d_raw);
    out.b[2] = d_raw.col_sums();
    let mut d_a2 = d_raw.matmul_nt(&params.w[2]);
    for (d, a) in d_a2.data.iter_mut().zip(&f.a2.data) {
        *d *= leaky_grad(*a);
    }
    out.w[1] = f.h1.matmul_tn(&d_a2);
    out.b[1] = d_a2.col_sums();
    let mut d_a1 = d_a2.matmul_nt(&params.w[1]);
    for (d, a) in d_a1.data.iter_mut().zip(&f.a1.data) {
        *d *= leaky_grad(*a);
    }
    out.w[0] = f.x.matmul_tn(&d_a1);
    out.b[0] = d_a1.col_sums();
    let d_x = d_a1.matmul_nt(&params.w[0]);
    let mut features = GradBuffer::for_grid(grid);
    for s in 0..grid.len() {
        features.data[s * grid.width..(s + 1) * grid.width].copy_from_slice(&d_x.row(s)[..grid.width]);
    }
    let occupancy = (0..grid.len())
        .map(|s| (0..g).map(|j| grads.opacity[s * g + j]).sum())
        .collect();
    Ok(DecoderBackward {
        features,
        occupancy,
        params: out,
    })
}
