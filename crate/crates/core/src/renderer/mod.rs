//! Differentiable tiled rasterizer for flat Gaussian disks.
//!
//! Every pixel casts one ray through its center and intersects it exactly with
//! each disk plane. Fragments are sorted per pixel by `(depth, id)` and
//! alpha-composited front to back. The fragment lists are kept so that the
//! backward pass and the distortion loss can replay them.

mod backward;

use std::hash::{Hash, Hasher};

pub use backward::{render_backward, FragmentGrads, PixelGrads};
pub use crate::splat_model::GaussianGrads;

use crate::geometry::Vec3;
use crate::par;
use crate::scene_io::{RgbImage, View};
use crate::splat_model::Gaussian2D;

pub const TILE: usize = 16;

/// Culling and termination thresholds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    /// Fragments at depth `<= near` are dropped.
    pub near: f64,
    /// Fragments with `u² + v² > cutoff²` are dropped.
    pub cutoff: f64,
    /// Fragments with alpha below this are dropped.
    pub min_alpha: f64,
    /// Compositing stops once transmittance falls below this.
    pub t_min: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            near: 0.01,
            cutoff: 3.0,
            min_alpha: 1.0 / 255.0,
            t_min: 1e-4,
        }
    }
}

/// Ray/disk intersection in the disk's local frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub u: f64,
    pub v: f64,
    /// Ray parameter of the hit.
    pub z: f64,
}

/// Intersects the ray `origin + z * dir` with the plane of `g`. Returns `None`
/// when the ray is parallel to the plane or the hit is not beyond `near`.
pub fn ray_splat_intersect(g: &Gaussian2D, origin: &Vec3, dir: &Vec3, near: f64) -> Option<Hit> {
    let m = g.frame();
    let n = m.column(2);
    let b = n.dot(dir);
    if b.abs() < 1e-8 * dir.norm() {
        return None;
    }
    let delta = g.center - origin;
    let z = n.dot(&delta) / b;
    if z <= near {
        return None;
    }
    let off = dir * z - delta;
    Some(Hit {
        u: off.dot(&m.column(0)) / g.scales[0],
        v: off.dot(&m.column(1)) / g.scales[1],
        z,
    })
}

/// Depth-sorted fragments of every pixel in compressed row form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fragments {
    /// Pixel `p` owns entries `offsets[p]..offsets[p + 1]`.
    pub offsets: Vec<usize>,
    pub id: Vec<u32>,
    pub alpha: Vec<f64>,
    pub z: Vec<f64>,
    /// Transmittance in front of the fragment.
    pub trans: Vec<f64>,
    /// Gaussian falloff `exp(-(u² + v²) / 2)`.
    pub weight: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Fragments {
    pub fn len(&self) -> usize {
        self.id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id.is_empty()
    }

    pub fn pixel(&self, p: usize) -> std::ops::Range<usize> {
        self.offsets[p]..self.offsets[p + 1]
    }

    fn push(&mut self, f: &Fragment) {
        self.id.push(f.id);
        self.alpha.push(f.alpha);
        self.z.push(f.z);
        self.trans.push(f.trans);
        self.weight.push(f.weight);
        self.u.push(f.u);
        self.v.push(f.v);
    }
}

/// Rendered maps plus the fragment cache.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, composited over black.
    pub color: Vec<f64>,
    /// Expected depth `Σ z w / max(alpha, 1e-6)`.
    pub depth: Vec<f64>,
    /// Blended world-space normals (not renormalized).
    pub normal: Vec<f64>,
    pub alpha: Vec<f64>,
    pub fragments: Fragments,
    /// Hash of the inputs that produced this output.
    pub key: u64,
}

impl RenderOutput {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn color_image(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.color.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Fragment {
    id: u32,
    alpha: f64,
    z: f64,
    trans: f64,
    weight: f64,
    u: f64,
    v: f64,
}

#[derive(Debug, Default)]
struct PixelResult {
    color: [f64; 3],
    depth: f64,
    normal: [f64; 3],
    alpha: f64,
    frags: Vec<Fragment>,
}

pub(crate) fn input_key(gaussians: &[Gaussian2D], view: &View, settings: &RenderSettings) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    let mut put = |v: f64| v.to_bits().hash(&mut h);
    for g in gaussians {
        g.center.iter().for_each(|v| put(*v));
        g.scales.iter().for_each(|v| put(*v));
        g.rotation.iter().for_each(|v| put(*v));
        put(g.opacity);
        g.color.iter().for_each(|v| put(*v));
    }
    let k = &view.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy, k.width as f64, k.height as f64] {
        put(v);
    }
    view.pose.rotation.iter().for_each(|v| put(*v));
    view.pose.translation.iter().for_each(|v| put(*v));
    for v in [settings.near, settings.cutoff, settings.min_alpha, settings.t_min] {
        put(v);
    }
    gaussians.len().hash(&mut h);
    h.finish()
}

/// Per-splat data reused for every pixel.
struct Prepared {
    frame: crate::geometry::Mat3,
    normal: Vec3,
}

fn prepare(gaussians: &[Gaussian2D]) -> Vec<Prepared> {
    gaussians
        .iter()
        .map(|g| {
            let frame = g.frame();
            Prepared {
                normal: frame.column(2).into_owned(),
                frame,
            }
        })
        .collect()
}

fn fragment(
    id: usize,
    g: &Gaussian2D,
    p: &Prepared,
    o: &Vec3,
    d: &Vec3,
    s: &RenderSettings,
) -> Option<Fragment> {
    let n = &p.normal;
    let b = n.dot(d);
    if b.abs() < 1e-8 * d.norm() {
        return None;
    }
    let delta = g.center - o;
    let z = n.dot(&delta) / b;
    if z <= s.near {
        return None;
    }
    let off = d * z - delta;
    let u = off.dot(&p.frame.column(0)) / g.scales[0];
    let v = off.dot(&p.frame.column(1)) / g.scales[1];
    let r2 = u * u + v * v;
    if r2 > s.cutoff * s.cutoff {
        return None;
    }
    let weight = (-0.5 * r2).exp();
    let alpha = g.opacity * weight;
    if alpha < s.min_alpha || alpha <= 0.0 {
        return None;
    }
    Some(Fragment {
        id: id as u32,
        alpha,
        z,
        trans: 0.0,
        weight,
        u,
        v,
    })
}

fn composite(
    mut frags: Vec<Fragment>,
    gaussians: &[Gaussian2D],
    prep: &[Prepared],
    s: &RenderSettings,
) -> PixelResult {
    frags.sort_by(|a, b| a.z.total_cmp(&b.z).then(a.id.cmp(&b.id)));
    let mut out = PixelResult::default();
    let mut t = 1.0;
    let mut bz = 0.0;
    let mut kept = 0;
    for f in frags.iter_mut() {
        if t < s.t_min {
            break;
        }
        let g = &gaussians[f.id as usize];
        let w = f.alpha * t;
        for c in 0..3 {
            out.color[c] += w * g.color[c];
            out.normal[c] += w * prep[f.id as usize].normal[c];
        }
        bz += w * f.z;
        out.alpha += w;
        f.trans = t;
        t *= 1.0 - f.alpha;
        kept += 1;
    }
    frags.truncate(kept);
    out.depth = bz / out.alpha.max(1e-6);
    out.frags = frags;
    out
}

/// Inclusive pixel rectangle that may receive fragments from `g`.
fn screen_rect(g: &Gaussian2D, p: &Prepared, view: &View, s: &RenderSettings) -> Option<[usize; 4]> {
    let (w, h) = (view.width(), view.height());
    if w == 0 || h == 0 {
        return None;
    }
    let tu = p.frame.column(0) * (s.cutoff * g.scales[0]);
    let tv = p.frame.column(1) * (s.cutoff * g.scales[1]);
    // The cutoff ellipse lies inside this square. Clip the square to the
    // half-space in front of the near plane, then bound its projection.
    let cam = [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)]
        .map(|(a, b)| view.pose.to_camera(&(g.center + tu * a + tv * b)));
    let mut poly: Vec<Vec3> = Vec::with_capacity(8);
    for k in 0..4 {
        let (a, b) = (&cam[k], &cam[(k + 1) % 4]);
        let (ina, inb) = (a.z >= s.near, b.z >= s.near);
        if ina {
            poly.push(*a);
        }
        if ina != inb {
            let f = (s.near - a.z) / (b.z - a.z);
            let mut c = a + (b - a) * f;
            c.z = s.near;
            poly.push(c);
        }
    }
    if poly.is_empty() {
        return None;
    }
    let k = &view.intrinsics;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in &poly {
        let (x, y) = (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
        if !x.is_finite() || !y.is_finite() {
            return Some([0, 0, w - 1, h - 1]);
        }
        lo = [lo[0].min(x), lo[1].min(y)];
        hi = [hi[0].max(x), hi[1].max(y)];
    }
    // Pixel centers sit at i + 0.5.
    let x0 = (lo[0] - 0.5).ceil().max(0.0);
    let y0 = (lo[1] - 0.5).ceil().max(0.0);
    let x1 = (hi[0] - 0.5).floor().min(w as f64 - 1.0);
    let y1 = (hi[1] - 0.5).floor().min(h as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some([x0 as usize, y0 as usize, x1 as usize, y1 as usize])
}

fn assemble(width: usize, height: usize, pixels: Vec<PixelResult>, key: u64) -> RenderOutput {
    let n = width * height;
    let mut out = RenderOutput {
        width,
        height,
        color: vec![0.0; n * 3],
        depth: vec![0.0; n],
        normal: vec![0.0; n * 3],
        alpha: vec![0.0; n],
        fragments: Fragments::default(),
        key,
    };
    let total: usize = pixels.iter().map(|p| p.frags.len()).sum();
    let fr = &mut out.fragments;
    fr.offsets.reserve(n + 1);
    for v in [&mut fr.alpha, &mut fr.z, &mut fr.trans, &mut fr.weight, &mut fr.u, &mut fr.v] {
        v.reserve(total);
    }
    fr.id.reserve(total);
    fr.offsets.push(0);
    for (i, p) in pixels.into_iter().enumerate() {
        out.color[i * 3..i * 3 + 3].copy_from_slice(&p.color);
        out.normal[i * 3..i * 3 + 3].copy_from_slice(&p.normal);
        out.depth[i] = p.depth;
        out.alpha[i] = p.alpha;
        for f in &p.frags {
            fr.push(f);
        }
        fr.offsets.push(fr.id.len());
    }
    out
}

/// Tiled forward rendering.
pub fn render(gaussians: &[Gaussian2D], view: &View, settings: &RenderSettings) -> RenderOutput {
    let (w, h) = (view.width(), view.height());
    let prep = prepare(gaussians);
    let (ntx, nty) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let rects = par::map_range(gaussians.len(), |i| screen_rect(&gaussians[i], &prep[i], view, settings));
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); ntx * nty];
    for (i, r) in rects.iter().enumerate() {
        if let Some([x0, y0, x1, y1]) = *r {
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    bins[ty * ntx + tx].push(i as u32);
                }
            }
        }
    }
    let o = view.pose.camera_center();
    let tiles = par::map_range(ntx * nty, |t| {
        let (tx, ty) = (t % ntx, t / ntx);
        let mut res = Vec::with_capacity(TILE * TILE);
        for y in ty * TILE..((ty + 1) * TILE).min(h) {
            for x in tx * TILE..((tx + 1) * TILE).min(w) {
                let (_, d) = view.pixel_ray(x, y);
                let frags: Vec<Fragment> = bins[t]
                    .iter()
                    .filter(|&&i| {
                        // Bins are tile-granular; skip splats whose rectangle misses this pixel.
                        let [x0, y0, x1, y1] = rects[i as usize].expect("binned splats have a rectangle");
                        (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
                    })
                    .filter_map(|&i| fragment(i as usize, &gaussians[i as usize], &prep[i as usize], &o, &d, settings))
                    .collect();
                res.push((y * w + x, composite(frags, gaussians, &prep, settings)));
            }
        }
        res
    });
    let mut pixels: Vec<PixelResult> = (0..w * h).map(|_| PixelResult::default()).collect();
    for tile in tiles {
        for (p, r) in tile {
            pixels[p] = r;
        }
    }
    assemble(w, h, pixels, input_key(gaussians, view, settings))
}

/// Untiled reference renderer: every pixel tests every splat.
pub fn render_reference(gaussians: &[Gaussian2D], view: &View, settings: &RenderSettings) -> RenderOutput {
    let (w, h) = (view.width(), view.height());
    let prep = prepare(gaussians);
    let o = view.pose.camera_center();
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (_, d) = view.pixel_ray(x, y);
            let mut frags = Vec::new();
            for (i, g) in gaussians.iter().enumerate() {
                if let Some(hit) = ray_splat_intersect(g, &o, &d, settings.near) {
                    let r2 = hit.u * hit.u + hit.v * hit.v;
                    let weight = (-0.5 * r2).exp();
                    let alpha = g.opacity * weight;
                    if r2 <= settings.cutoff * settings.cutoff && alpha >= settings.min_alpha && alpha > 0.0 {
                        frags.push(Fragment {
                            id: i as u32,
                            alpha,
                            z: hit.z,
                            trans: 0.0,
                            weight,
                            u: hit.u,
                            v: hit.v,
                        });
                    }
                }
            }
            pixels.push(composite(frags, gaussians, &prep, settings));
        }
    }
    assemble(w, h, pixels, input_key(gaussians, view, settings))
}

/// Writes color, normal (mapped to `[0, 1]`) and depth (16-bit mm) images.
pub fn dump_debug_images(out: &RenderOutput, dir: &std::path::Path, stem: &str) -> crate::Result<()> {
    use crate::scene_io::{save_depth_mm, save_rgb};
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut color = out.color_image();
    color.data.iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
    save_rgb(&color, &dir.join(format!("{stem}_color.png")))?;
    let normal = RgbImage {
        width: out.width,
        height: out.height,
        data: out.normal.iter().map(|n| (0.5 * n + 0.5).clamp(0.0, 1.0)).collect(),
    };
    save_rgb(&normal, &dir.join(format!("{stem}_normal.png")))?;
    save_depth_mm(out.width, out.height, &out.depth, &dir.join(format!("{stem}_depth.png")))
}

#[cfg(test)]
pub(crate) mod tests;
