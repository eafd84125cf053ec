//! Scenes on disk and in memory: posed views, SfM points, ground-truth mesh.
//!
//! Directory layout:
//!
//! ```text
//! cameras.json      list of CameraRecord
//! points.ply        SfM points (x, y, z, red, green, blue)
//! images/<name>     8-bit PNG per camera record
//! depth/<stem>.png  optional 16-bit depth in millimeters
//! mesh.ply          optional ground-truth mesh
//! ```

mod cameras;
mod images;
mod ply;
mod synthetic;

use std::path::Path;

pub use cameras::{check_rotation, read_cameras, write_cameras, CameraRecord};
pub use images::{load_depth_mm, load_rgb, save_depth_mm, save_rgb, RgbImage};
pub use ply::{read_ply, read_ply_from, save_mesh, save_pointcloud, write_ply_to};
pub use synthetic::{
    generate_synthetic_room, generate_synthetic_room_with_record, RoomSpec, SfmRecord,
};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Mat3, TriMesh, Vec3};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// World-to-camera rigid transform: `p_cam = rotation * p_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// A posed image with optional ground truth.
#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    pub image: RgbImage,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    /// Camera-z depth in meters, 0 = invalid.
    pub gt_depth: Option<Vec<f64>>,
    /// Unit normals in the camera frame.
    pub gt_normal: Option<Vec<Vec3>>,
}

impl View {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Held-out views are reserved for evaluation; they are named `heldout_*`.
    pub fn is_heldout(&self) -> bool {
        self.name.starts_with("heldout_")
    }

    /// Ray through the center of pixel `(x, y)`. The direction has unit camera-z
    /// component, so the ray parameter of a hit equals its camera depth.
    pub fn pixel_ray(&self, x: usize, y: usize) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let d_cam = Vec3::new(
            (x as f64 + 0.5 - k.cx) / k.fx,
            (y as f64 + 0.5 - k.cy) / k.fy,
            1.0,
        );
        (
            self.pose.camera_center(),
            self.pose.rotation.transpose() * d_cam,
        )
    }

    /// Projects a world point to `(x, y, z)`: continuous pixel coordinates
    /// (pixel centers at `i + 0.5`) and camera depth.
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        let c = self.pose.to_camera(p);
        let k = &self.intrinsics;
        (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z)
    }

    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.pose.rotation, 1e-6)
            .map_err(|e| Error::Validation(format!("view {}: {e}", self.name)))?;
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::Validation(format!(
                "view {}: focal lengths must be positive",
                self.name
            )));
        }
        if self.image.width != k.width || self.image.height != k.height {
            return Err(Error::Validation(format!(
                "view {}: image is {}x{} but intrinsics say {}x{}",
                self.name, self.image.width, self.image.height, k.width, k.height
            )));
        }
        if let Some(d) = &self.gt_depth {
            if d.len() != k.width * k.height {
                return Err(Error::Validation(format!("view {}: depth size", self.name)));
            }
            if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Validation(format!(
                    "view {}: depth must be finite and >= 0",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Whether any part of `bbox` can be seen: the camera sits inside it or a
    /// sample of the box projects into the image in front of the camera.
    pub fn sees_box(&self, bbox: &Aabb) -> bool {
        if bbox.contains(&self.pose.camera_center()) {
            return true;
        }
        let k = &self.intrinsics;
        let n = 4;
        for i in 0..=n {
            for j in 0..=n {
                for l in 0..=n {
                    let t = Vec3::new(i as f64, j as f64, l as f64) / n as f64;
                    let p = bbox.min + bbox.extent().component_mul(&t);
                    let (x, y, z) = self.project(&p);
                    if z > 0.0 && x >= 0.0 && y >= 0.0 && x <= k.width as f64 && y <= k.height as f64
                    {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// A colored structure-from-motion point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfmPoint {
    pub position: Vec3,
    pub color: Vec3,
}

/// Everything known about one scene.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub views: Vec<View>,
    pub points: Vec<SfmPoint>,
    pub gt_mesh: Option<TriMesh>,
    pub bbox: Aabb,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::Validation("scene bbox must satisfy min < max".into()));
        }
        for v in &self.views {
            v.validate()?;
            if !v.sees_box(&self.bbox) {
                return Err(Error::Validation(format!(
                    "view {} does not look at the scene box",
                    v.name
                )));
            }
        }
        let outer = self.bbox.expanded(1.0);
        if let Some(p) = self.points.iter().find(|p| !outer.contains(&p.position)) {
            return Err(Error::Validation(format!(
                "SfM point {:?} lies more than 1 m outside the scene box",
                p.position
            )));
        }
        Ok(())
    }

    /// SfM points as a colored point cloud.
    pub fn points_as_cloud(&self) -> TriMesh {
        TriMesh {
            vertices: self.points.iter().map(|p| p.position).collect(),
            colors: self
                .points
                .iter()
                .map(|p| {
                    let q = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
                    [q(p.color.x), q(p.color.y), q(p.color.z)]
                })
                .collect(),
            ..Default::default()
        }
    }
}

fn stem(name: &str) -> &str {
    Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name)
}

/// Loads and validates a scene directory.
pub fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let records = read_cameras(&dir.join("cameras.json"))?;
    let cloud = read_ply(&dir.join("points.ply"))?;
    let points = cloud
        .vertices
        .iter()
        .enumerate()
        .map(|(i, p)| SfmPoint {
            position: *p,
            color: cloud
                .colors
                .get(i)
                .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0)
                .unwrap_or_else(|| Vec3::repeat(0.5)),
        })
        .collect::<Vec<_>>();
    let mesh_path = dir.join("mesh.ply");
    let gt_mesh = if mesh_path.exists() {
        Some(read_ply(&mesh_path)?)
    } else {
        None
    };
    let mut views = Vec::with_capacity(records.len());
    for rec in &records {
        let image = load_rgb(&dir.join("images").join(&rec.image))?;
        let depth_path = dir.join("depth").join(format!("{}.png", stem(&rec.image)));
        let gt_depth = if depth_path.exists() {
            let (w, h, d) = load_depth_mm(&depth_path)?;
            if (w, h) != (rec.width as usize, rec.height as usize) {
                return Err(Error::Validation(format!(
                    "depth map {} has the wrong size",
                    depth_path.display()
                )));
            }
            Some(d)
        } else {
            None
        };
        let view = View {
            name: rec.image.clone(),
            image,
            intrinsics: Intrinsics {
                fx: rec.fx,
                fy: rec.fy,
                cx: rec.cx,
                cy: rec.cy,
                width: rec.width as usize,
                height: rec.height as usize,
            },
            pose: Pose {
                rotation: rec.rotation(),
                translation: rec.translation(),
            },
            gt_depth,
            gt_normal: None,
        };
        views.push(view);
    }
    let bbox = match &gt_mesh {
        Some(m) if !m.vertices.is_empty() => m.bbox(),
        _ => Aabb::from_points(points.iter().map(|p| &p.position)),
    };
    let bundle = SceneBundle {
        views,
        points,
        gt_mesh,
        bbox,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a scene in the directory layout read by [`load_scene`].
pub fn save_scene(scene: &SceneBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(scene.views.len());
    let any_depth = scene.views.iter().any(|v| v.gt_depth.is_some());
    if any_depth {
        std::fs::create_dir_all(dir.join("depth")).map_err(|e| Error::io(dir, e))?;
    }
    for v in &scene.views {
        let k = &v.intrinsics;
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = v.pose.rotation[(i, j)];
            }
        }
        records.push(CameraRecord {
            image: v.name.clone(),
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width as u32,
            height: k.height as u32,
            r,
            t: [v.pose.translation.x, v.pose.translation.y, v.pose.translation.z],
        });
        save_rgb(&v.image, &dir.join("images").join(&v.name))?;
        if let Some(d) = &v.gt_depth {
            save_depth_mm(
                k.width,
                k.height,
                d,
                &dir.join("depth").join(format!("{}.png", stem(&v.name))),
            )?;
        }
    }
    write_cameras(&records, &dir.join("cameras.json"))?;
    save_pointcloud(&scene.points_as_cloud(), &dir.join("points.ply"))?;
    if let Some(m) = &scene.gt_mesh {
        save_mesh(m, &dir.join("mesh.ply"))?;
    }
    Ok(())
}
