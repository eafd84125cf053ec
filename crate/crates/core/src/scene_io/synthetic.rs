//! Procedural box rooms with textured walls, ray-cast ground truth and
//! texture-gated SfM points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Intrinsics, Pose, RgbImage, SceneBundle, SfmPoint, View};
use crate::error::{Error, Result};
use crate::geometry::{box_mesh, look_rotation, sphere_mesh, Aabb, Bvh, TriMesh, Vec3};
use crate::par;

/// Width of the high-frequency trim along every wall edge, meters.
const TRIM: f64 = 0.15;
const LIGHT: [f64; 3] = [0.3, 0.5, 0.8];

/// Parameters of a synthetic room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoomSpec {
    /// Room extent in meters (x, y, z); z is up.
    pub size: [f64; 3],
    /// Position of the room's minimum corner.
    pub origin: [f64; 3],
    /// Boxes and spheres standing on the floor, at most 8.
    pub objects: usize,
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    /// Standard deviation of SfM position noise, meters.
    pub noise: f64,
    /// Minimum luminance gradient (per meter) for a surface sample to become an SfM point.
    pub texture_threshold: f64,
    /// Candidate surface samples per square meter.
    pub sample_density: f64,
    /// Tessellate the ground-truth mesh so no edge exceeds this length.
    pub mesh_spacing: Option<f64>,
    /// Every n-th camera (the last of each group of n) is held out for evaluation; 0 keeps all.
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            size: [4.0, 3.0, 2.5],
            origin: [0.0; 3],
            objects: 0,
            cameras: 8,
            width: 192,
            height: 128,
            noise: 0.0,
            texture_threshold: 2.0,
            sample_density: 2000.0,
            mesh_spacing: None,
            holdout_every: 0,
            seed: 0,
        }
    }
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Validation("room dimensions must be positive".into()));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Validation("room origin must be finite".into()));
        }
        if self.cameras < 2 {
            return Err(Error::Validation("at least 2 cameras are required".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image size must be positive".into()));
        }
        if self.objects > 8 {
            return Err(Error::Validation("at most 8 objects are supported".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Validation("noise must be >= 0".into()));
        }
        if !(self.texture_threshold.is_finite() && self.texture_threshold >= 0.0) {
            return Err(Error::Validation("texture_threshold must be >= 0".into()));
        }
        if !(self.sample_density.is_finite() && self.sample_density > 0.0) {
            return Err(Error::Validation("sample_density must be positive".into()));
        }
        if let Some(s) = self.mesh_spacing {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Validation("mesh_spacing must be positive".into()));
            }
        }
        if self.holdout_every == 1 {
            return Err(Error::Validation("holdout_every = 1 would hold out every view".into()));
        }
        Ok(())
    }

    fn min_corner(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    fn max_corner(&self) -> Vec3 {
        Vec3::from(self.origin) + Vec3::from(self.size)
    }
}

/// How the wall SfM points split between the textured trim and the plain interior.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SfmRecord {
    pub edge_area: f64,
    pub edge_points: usize,
    pub interior_area: f64,
    pub interior_points: usize,
}

impl SfmRecord {
    pub fn edge_density(&self) -> f64 {
        self.edge_points as f64 / self.edge_area
    }

    pub fn interior_density(&self) -> f64 {
        self.interior_points as f64 / self.interior_area
    }
}

#[derive(Debug, Clone)]
enum Surface {
    /// Axis-aligned rectangle; `(a, b)` are the two in-plane axes.
    Wall {
        axes: [usize; 2],
        lo: [f64; 2],
        hi: [f64; 2],
        base: Vec3,
        poster: [f64; 3],
    },
    BoxFace {
        axes: [usize; 2],
        base: Vec3,
    },
    Sphere {
        center: Vec3,
        base: Vec3,
    },
}

impl Surface {
    fn albedo(&self, p: &Vec3) -> Vec3 {
        use std::f64::consts::TAU;
        match self {
            Surface::Wall {
                axes,
                lo,
                hi,
                base,
                poster,
            } => {
                let (a, b) = (p[axes[0]], p[axes[1]]);
                let smooth = 0.92 + 0.08 * (TAU * (a + 0.5 * b) / 3.0).sin();
                let mut c = base * smooth;
                let edge = (a - lo[0]).min(hi[0] - a).min(b - lo[1]).min(hi[1] - b);
                if edge < TRIM {
                    let s = 0.5 + 0.5 * (TAU * a / 0.06).sin() * (TAU * b / 0.06).sin();
                    c = c * 0.35 + Vec3::new(0.9, 0.85, 0.7) * (0.6 * s);
                }
                let r = ((a - poster[0]).powi(2) + (b - poster[1]).powi(2)).sqrt();
                if r < poster[2] {
                    let s = 0.5 + 0.5 * (TAU * (a - b) / 0.05).sin();
                    c = Vec3::new(0.2 + 0.6 * s, 0.3, 0.8 - 0.5 * s);
                }
                c
            }
            Surface::BoxFace { axes, base } => {
                let (a, b) = (p[axes[0]], p[axes[1]]);
                let s = 0.5 + 0.5 * (TAU * a / 0.05).sin() * (TAU * b / 0.05).sin();
                base * (0.5 + 0.5 * s)
            }
            Surface::Sphere { center, base } => {
                let d = (p - center).normalize();
                let s = 0.5 + 0.5 * (12.0 * d.z.acos()).sin() * (12.0 * d.y.atan2(d.x)).sin();
                base * (0.5 + 0.5 * s)
            }
        }
    }

    /// Whether `p` lies in a wall's high-texture trim.
    fn in_trim(&self, p: &Vec3) -> Option<bool> {
        match self {
            Surface::Wall { axes, lo, hi, .. } => {
                let (a, b) = (p[axes[0]], p[axes[1]]);
                Some(a - lo[0] < TRIM || hi[0] - a < TRIM || b - lo[1] < TRIM || hi[1] - b < TRIM)
            }
            _ => None,
        }
    }
}

fn luminance(c: &Vec3) -> f64 {
    0.299 * c.x + 0.587 * c.y + 0.114 * c.z
}

fn shade(albedo: &Vec3, n: &Vec3) -> Vec3 {
    let l = Vec3::from(LIGHT).normalize();
    albedo * (0.7 + 0.3 * n.dot(&l).abs())
}

fn quantize(c: f64) -> f64 {
    (c.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Room {
    mesh: TriMesh,
    face_surface: Vec<usize>,
    surfaces: Vec<Surface>,
}

fn build_room(spec: &RoomSpec, rng: &mut ChaCha8Rng) -> Room {
    let lo = spec.min_corner();
    let hi = spec.max_corner();
    let mut mesh = box_mesh(lo, hi, true);
    mesh.normals.clear();
    let mut surfaces = Vec::new();
    let mut face_surface = Vec::new();
    // box_mesh emits two triangles per face in the order z-, z+, y-, y+, x-, x+.
    for axis in [2usize, 2, 1, 1, 0, 0] {
        let axes = match axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        let (l, h) = ([lo[axes[0]], lo[axes[1]]], [hi[axes[0]], hi[axes[1]]]);
        let base = Vec3::new(
            rng.random_range(0.45..0.8),
            rng.random_range(0.45..0.8),
            rng.random_range(0.45..0.8),
        );
        let pr = 0.2 * (h[0] - l[0]).min(h[1] - l[1]);
        let poster = [
            rng.random_range(l[0] + TRIM + pr..h[0] - TRIM - pr).max(l[0]),
            rng.random_range(l[1] + TRIM + pr..h[1] - TRIM - pr).max(l[1]),
            pr,
        ];
        face_surface.extend([surfaces.len(); 2]);
        surfaces.push(Surface::Wall {
            axes,
            lo: l,
            hi: h,
            base,
            poster,
        });
    }

    let size = Vec3::from(spec.size);
    let s = 0.2 * size.x.min(size.y);
    let margin = 0.05 * size.x.min(size.y);
    let anchors = [
        (0.0, 0.0),
        (1.0, 1.0),
        (1.0, 0.0),
        (0.0, 1.0),
        (0.5, 0.0),
        (0.5, 1.0),
        (0.0, 0.5),
        (1.0, 0.5),
    ];
    for (i, &(ax, ay)) in anchors.iter().take(spec.objects).enumerate() {
        let span = |a: f64, len: f64| margin + s / 2.0 + a * (len - 2.0 * margin - s);
        let c = Vec3::new(lo.x + span(ax, size.x), lo.y + span(ay, size.y), lo.z);
        let base = Vec3::new(
            rng.random_range(0.2..0.9),
            rng.random_range(0.2..0.9),
            rng.random_range(0.2..0.9),
        );
        let half = s / 2.0;
        let height = (s * rng.random_range(0.8..1.4)).min(0.8 * size.z);
        let mut part = if i % 2 == 0 {
            box_mesh(
                Vec3::new(c.x - half, c.y - half, lo.z),
                Vec3::new(c.x + half, c.y + half, lo.z + height),
                false,
            )
        } else {
            sphere_mesh(Vec3::new(c.x, c.y, lo.z + half), half, 10, 20)
        };
        part.normals.clear();
        if i % 2 == 0 {
            for axis in [2usize, 2, 1, 1, 0, 0] {
                let axes = match axis {
                    0 => [1, 2],
                    1 => [0, 2],
                    _ => [0, 1],
                };
                face_surface.extend([surfaces.len(); 2]);
                surfaces.push(Surface::BoxFace { axes, base });
            }
        } else {
            face_surface.extend(std::iter::repeat_n(surfaces.len(), part.faces.len()));
            surfaces.push(Surface::Sphere {
                center: Vec3::new(c.x, c.y, lo.z + half),
                base,
            });
        }
        mesh.append(&part);
    }
    Room {
        mesh,
        face_surface,
        surfaces,
    }
}

fn texture_gradient(surface: &Surface, p: &Vec3, n: &Vec3) -> f64 {
    let t1 = if n.x.abs() < 0.9 {
        n.cross(&Vec3::x())
    } else {
        n.cross(&Vec3::y())
    }
    .normalize();
    let t2 = n.cross(&t1);
    let h = 0.002;
    let lum = |q: Vec3| luminance(&surface.albedo(&q));
    let gu = (lum(p + t1 * h) - lum(p - t1 * h)) / (2.0 * h);
    let gv = (lum(p + t2 * h) - lum(p - t2 * h)) / (2.0 * h);
    (gu * gu + gv * gv).sqrt()
}

fn camera_views(spec: &RoomSpec, room: &Room, bvh: &Bvh) -> Vec<View> {
    let lo = spec.min_corner();
    let hi = spec.max_corner();
    let center = (lo + hi) * 0.5;
    let radius = 0.15 * spec.size[0].min(spec.size[1]);
    let (w, h) = (spec.width, spec.height);
    let intrinsics = Intrinsics {
        fx: w as f64 / 2.0,
        fy: w as f64 / 2.0,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        width: w,
        height: h,
    };
    let pitch = 30f64.to_radians();
    (0..spec.cameras)
        .map(|i| {
            let yaw = std::f64::consts::TAU * i as f64 / spec.cameras as f64;
            let phi = if i % 2 == 0 { -pitch } else { pitch };
            let pos = center + Vec3::new(yaw.cos(), yaw.sin(), 0.0) * radius;
            let fwd = Vec3::new(yaw.cos() * phi.cos(), yaw.sin() * phi.cos(), phi.sin());
            let rotation = look_rotation(&fwd, &Vec3::z());
            let pose = Pose {
                rotation,
                translation: -(rotation * pos),
            };
            let heldout = spec.holdout_every > 0 && i % spec.holdout_every == spec.holdout_every - 1;
            let name = if heldout {
                format!("heldout_{i:03}.png")
            } else {
                format!("view_{i:03}.png")
            };
            let mut view = View {
                name,
                image: RgbImage::new(w, h),
                intrinsics,
                pose,
                gt_depth: None,
                gt_normal: None,
            };
            let pixels = par::map_range(w * h, |idx| {
                let (x, y) = (idx % w, idx / w);
                let (o, d) = view.pixel_ray(x, y);
                match bvh.ray_cast(&o, &d, 1e-9) {
                    Some((t, f)) => {
                        let p = o + d * t;
                        let mut n = room.mesh.face_normal(f);
                        if n.dot(&d) > 0.0 {
                            n = -n;
                        }
                        let c = shade(&room.surfaces[room.face_surface[f]].albedo(&p), &n);
                        (t, rotation * n, c)
                    }
                    None => (0.0, Vec3::zeros(), Vec3::zeros()),
                }
            });
            let mut depth = Vec::with_capacity(w * h);
            let mut normal = Vec::with_capacity(w * h);
            for (i, (t, n, c)) in pixels.into_iter().enumerate() {
                depth.push(t);
                normal.push(n);
                for k in 0..3 {
                    view.image.data[i * 3 + k] = quantize(c[k]);
                }
            }
            view.gt_depth = Some(depth);
            view.gt_normal = Some(normal);
            view
        })
        .collect()
}

/// Generates a textured box room with ground-truth depth, normals and mesh.
pub fn generate_synthetic_room(spec: &RoomSpec) -> Result<SceneBundle> {
    generate_synthetic_room_with_record(spec).map(|(s, _)| s)
}

/// As [`generate_synthetic_room`], also reporting how wall SfM points split
/// between textured trim and plain interior.
pub fn generate_synthetic_room_with_record(spec: &RoomSpec) -> Result<(SceneBundle, SfmRecord)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let room = build_room(spec, &mut rng);
    let bvh = Bvh::new(room.mesh.clone());
    let views = camera_views(spec, &room, &bvh);

    let mut record = SfmRecord::default();
    for s in &room.surfaces {
        if let Surface::Wall { lo, hi, .. } = s {
            let total = (hi[0] - lo[0]) * (hi[1] - lo[1]);
            let inner = (hi[0] - lo[0] - 2.0 * TRIM).max(0.0) * (hi[1] - lo[1] - 2.0 * TRIM).max(0.0);
            record.edge_area += total - inner;
            record.interior_area += inner;
        }
    }
    let count = (spec.sample_density * room.mesh.total_area()).round() as usize;
    let samples = room.mesh.sample_surface(count, &mut rng);
    let noise = Normal::new(0.0, spec.noise.max(0.0))
        .map_err(|e| Error::Validation(format!("noise: {e}")))?;
    let mut points = Vec::new();
    for (p, f) in samples {
        let surface = &room.surfaces[room.face_surface[f]];
        let n = room.mesh.face_normal(f);
        if texture_gradient(surface, &p, &n) <= spec.texture_threshold {
            continue;
        }
        match surface.in_trim(&p) {
            Some(true) => record.edge_points += 1,
            Some(false) => record.interior_points += 1,
            None => {}
        }
        let c = shade(&surface.albedo(&p), &n);
        let offset = if spec.noise > 0.0 {
            Vec3::new(
                noise.sample(&mut rng),
                noise.sample(&mut rng),
                noise.sample(&mut rng),
            )
        } else {
            Vec3::zeros()
        };
        points.push(SfmPoint {
            position: p + offset,
            color: c.map(quantize),
        });
    }

    let mut gt_mesh = match spec.mesh_spacing {
        Some(s) => room.mesh.subdivided(s),
        None => room.mesh.clone(),
    };
    gt_mesh.compute_vertex_normals();
    let bbox = Aabb::new(spec.min_corner(), spec.max_corner());
    let scene = SceneBundle {
        views,
        points,
        gt_mesh: Some(gt_mesh),
        bbox,
    };
    scene.validate()?;
    Ok((scene, record))
}
