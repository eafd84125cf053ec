//! Reverse pass over the cached fragment lists.

use super::{input_key, RenderOutput, RenderSettings, TILE};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::par;
use crate::scene_io::View;
use crate::splat_model::{rotation_matrix_grad, Gaussian2D, GaussianGrads};

/// Upstream gradients with respect to the rendered maps. Empty vectors mean zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelGrads {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl PixelGrads {
    pub fn zeros(pixels: usize) -> Self {
        Self {
            color: vec![0.0; pixels * 3],
            depth: vec![0.0; pixels],
            normal: vec![0.0; pixels * 3],
            alpha: vec![0.0; pixels],
        }
    }
}

/// Upstream gradients with respect to each fragment's blending weight
/// `w = alpha * T` and depth, aligned with [`super::Fragments`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FragmentGrads {
    pub weight: Vec<f64>,
    pub depth: Vec<f64>,
}

const ACC: usize = 18;

/// Accumulates `[center 3, tu 3, tv 3, n 3, su, sv, opacity, color 3]` per splat.
fn pixel_backward(
    p: usize,
    out: &RenderOutput,
    grads: &PixelGrads,
    frag: Option<&FragmentGrads>,
    gaussians: &[Gaussian2D],
    frames: &[Mat3],
    o: &Vec3,
    d: &Vec3,
    acc: &mut [f64],
) {
    let range = out.fragments.pixel(p);
    if range.is_empty() {
        return;
    }
    let get3 = |v: &Vec<f64>| {
        if v.is_empty() {
            Vec3::zeros()
        } else {
            Vec3::new(v[p * 3], v[p * 3 + 1], v[p * 3 + 2])
        }
    };
    let get1 = |v: &Vec<f64>| if v.is_empty() { 0.0 } else { v[p] };
    let g_rgb = get3(&grads.color);
    let g_n = get3(&grads.normal);
    let g_depth = get1(&grads.depth);
    let b1 = out.alpha[p];
    let g_z = g_depth / b1.max(1e-6);
    let g_1 = get1(&grads.alpha) + if b1 > 1e-6 { -g_depth * out.depth[p] / b1 } else { 0.0 };
    if g_rgb == Vec3::zeros()
        && g_n == Vec3::zeros()
        && g_z == 0.0
        && g_1 == 0.0
        && frag.is_none()
    {
        return;
    }
    let fr = &out.fragments;
    let mut q_next = 0.0;
    for k in range.rev() {
        let id = fr.id[k] as usize;
        let g = &gaussians[id];
        let m = &frames[id];
        let n = m.column(2).into_owned();
        let (alpha, z, t) = (fr.alpha[k], fr.z[k], fr.trans[k]);
        let w = alpha * t;
        let (e_w, e_z) = frag.map_or((0.0, 0.0), |f| (f.weight[k], f.depth[k]));
        let gk = g_rgb.dot(&g.color) + g_z * z + g_n.dot(&n) + g_1 + e_w;
        let d_alpha = t * (gk - q_next);
        q_next = gk * alpha + (1.0 - alpha) * q_next;

        let d_z = w * g_z + e_z;
        let (u, v) = (fr.u[k], fr.v[k]);
        let d_u = -d_alpha * alpha * u;
        let d_v = -d_alpha * alpha * v;
        let (su, sv) = (g.scales[0], g.scales[1]);
        let tu = m.column(0).into_owned();
        let tv = m.column(1).into_owned();
        let delta = g.center - o;
        let b = n.dot(d);
        let (dtu, dtv) = (d.dot(&tu), d.dot(&tv));
        // Total derivative through the hit depth t.
        let d_t = d_z + d_u * dtu / su + d_v * dtv / sv;
        let gc = n * (d_t / b) - tu * (d_u / su) - tv * (d_v / sv);
        let hit_off = d * z - delta;
        let g_tu = hit_off * (d_u / su);
        let g_tv = hit_off * (d_v / sv);
        let g_nrm = (delta - d * z) * (d_t / b) + g_n * w;
        let a = &mut acc[id * ACC..(id + 1) * ACC];
        for c in 0..3 {
            a[c] += gc[c];
            a[3 + c] += g_tu[c];
            a[6 + c] += g_tv[c];
            a[9 + c] += g_nrm[c];
            a[15 + c] += w * g_rgb[c];
        }
        a[12] += -d_u * u / su;
        a[13] += -d_v * v / sv;
        a[14] += d_alpha * fr.weight[k];
    }
}

/// Gradients of a scalar loss with respect to every splat parameter, given
/// the loss gradients with respect to the rendered maps (and optionally the
/// fragment weights and depths).
pub fn render_backward(
    gaussians: &[Gaussian2D],
    view: &View,
    settings: &RenderSettings,
    out: &RenderOutput,
    grads: &PixelGrads,
    frag: Option<&FragmentGrads>,
) -> Result<GaussianGrads> {
    if input_key(gaussians, view, settings) != out.key {
        return Err(Error::StaleCache);
    }
    let npx = out.pixels();
    let sizes_ok = [(grads.color.len(), 3), (grads.normal.len(), 3), (grads.depth.len(), 1), (grads.alpha.len(), 1)]
        .iter()
        .all(|&(l, c)| l == 0 || l == npx * c);
    if !sizes_ok {
        return Err(Error::Shape("pixel gradient maps do not match the render".into()));
    }
    if let Some(f) = frag {
        if f.weight.len() != out.fragments.len() || f.depth.len() != out.fragments.len() {
            return Err(Error::Shape("fragment gradients do not match the render".into()));
        }
    }
    let frames: Vec<Mat3> = gaussians.iter().map(|g| g.frame()).collect();
    let o = view.pose.camera_center();
    let (w, h) = (out.width, out.height);
    let n = gaussians.len();
    // Fixed bands of tile rows, summed in band order.
    let bands = h.div_ceil(TILE);
    let partial = par::map_range(bands, |band| {
        let mut acc = vec![0.0; n * ACC];
        for y in band * TILE..((band + 1) * TILE).min(h) {
            for x in 0..w {
                let (_, d) = view.pixel_ray(x, y);
                pixel_backward(y * w + x, out, grads, frag, gaussians, &frames, &o, &d, &mut acc);
            }
        }
        acc
    });
    let mut acc = vec![0.0; n * ACC];
    for p in &partial {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    let mut res = GaussianGrads::zeros(n);
    for (i, g) in gaussians.iter().enumerate() {
        let a = &acc[i * ACC..(i + 1) * ACC];
        res.center[i] = Vec3::new(a[0], a[1], a[2]);
        let gr = Mat3::from_columns(&[
            Vec3::new(a[3], a[4], a[5]),
            Vec3::new(a[6], a[7], a[8]),
            Vec3::new(a[9], a[10], a[11]),
        ]);
        res.rotation[i] = rotation_matrix_grad(&g.rotation, &gr);
        res.scales[i] = [a[12], a[13]];
        res.opacity[i] = a[14];
        res.color[i] = Vec3::new(a[15], a[16], a[17]);
    }
    Ok(res)
}
