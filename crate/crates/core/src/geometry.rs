//! Shared geometric primitives: boxes, triangle meshes and a BVH for ray and
//! closest-point queries.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in pts {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb::new(self.min.inf(&o.min), self.max.sup(&o.max))
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a] < self.max[a])
    }

    pub fn expanded(&self, by: f64) -> Aabb {
        Aabb::new(self.min.add_scalar(-by), self.max.add_scalar(by))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Squared distance from `p` to the box (0 inside).
    pub fn dist2(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let v = if p[a] < self.min[a] {
                self.min[a] - p[a]
            } else if p[a] > self.max[a] {
                p[a] - self.max[a]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }

    /// Slab test; returns the entry parameter if the ray hits within `[t0, t1]`.
    pub fn ray_hit(&self, o: &Vec3, inv_d: &Vec3, t0: f64, t1: f64) -> Option<f64> {
        let mut lo = t0;
        let mut hi = t1;
        for a in 0..3 {
            let mut ta = (self.min[a] - o[a]) * inv_d[a];
            let mut tb = (self.max[a] - o[a]) * inv_d[a];
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            // NaN from 0 * inf means the ray lies in the slab plane; keep going.
            if ta.is_nan() || tb.is_nan() {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            lo = lo.max(ta);
            hi = hi.min(tb);
            if lo > hi {
                return None;
            }
        }
        Some(lo)
    }
}

/// Indexed triangle mesh. `normals` and `colors` are per-vertex and may be
/// empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub colors: Vec<[u8; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty() && self.vertices.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::z()
        }
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    /// Appends `other`, offsetting its indices.
    pub fn append(&mut self, other: &TriMesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.normals.extend_from_slice(&other.normals);
        self.colors.extend_from_slice(&other.colors);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
    }

    /// Area-weighted vertex normals from face normals.
    pub fn compute_vertex_normals(&mut self) {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let [a, b, c] = self.triangle(fi);
            let n = (b - a).cross(&(c - a));
            for &v in f {
                acc[v as usize] += n;
            }
        }
        self.normals = acc
            .into_iter()
            .map(|n| {
                let l = n.norm();
                if l > 0.0 {
                    n / l
                } else {
                    Vec3::z()
                }
            })
            .collect();
    }

    /// Splits every triangle into `k*k` congruent sub-triangles with `k` chosen
    /// so that no edge exceeds `max_edge`. Planar pieces keep their exact
    /// geometry; coincident vertices are welded.
    pub fn subdivided(&self, max_edge: f64) -> TriMesh {
        use std::collections::HashMap;
        let mut out = TriMesh::default();
        let mut weld: HashMap<[i64; 3], u32> = HashMap::new();
        let quant = |p: &Vec3| -> [i64; 3] {
            [
                (p.x * 1e9).round() as i64,
                (p.y * 1e9).round() as i64,
                (p.z * 1e9).round() as i64,
            ]
        };
        for fi in 0..self.faces.len() {
            let p = self.triangle(fi);
            let longest = (p[1] - p[0])
                .norm()
                .max((p[2] - p[1]).norm())
                .max((p[0] - p[2]).norm());
            let k = ((longest / max_edge).ceil() as usize).max(1);
            let mut idx = vec![vec![0u32; k + 1]; k + 1];
            for i in 0..=k {
                for j in 0..=(k - i) {
                    let pos = p[0]
                        + (p[1] - p[0]) * (i as f64 / k as f64)
                        + (p[2] - p[0]) * (j as f64 / k as f64);
                    let id = *weld.entry(quant(&pos)).or_insert_with(|| {
                        out.vertices.push(pos);
                        out.vertices.len() as u32 - 1
                    });
                    idx[i][j] = id;
                }
            }
            for i in 0..k {
                for j in 0..(k - i) {
                    out.faces.push([idx[i][j], idx[i + 1][j], idx[i][j + 1]]);
                    if i + j + 1 < k {
                        out.faces
                            .push([idx[i + 1][j], idx[i + 1][j + 1], idx[i][j + 1]]);
                    }
                }
            }
        }
        if !self.normals.is_empty() {
            out.compute_vertex_normals();
        }
        out
    }

    /// Uniform area-weighted surface samples: `(point, face index)`.
    pub fn sample_surface<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<(Vec3, usize)> {
        let areas: Vec<f64> = (0..self.faces.len()).map(|f| self.face_area(f)).collect();
        let total: f64 = areas.iter().sum();
        if total <= 0.0 {
            return Vec::new();
        }
        let mut cdf = Vec::with_capacity(areas.len());
        let mut run = 0.0;
        for a in &areas {
            run += a / total;
            cdf.push(run);
        }
        (0..count)
            .map(|_| {
                let r: f64 = rng.random();
                let f = cdf.partition_point(|&c| c < r).min(areas.len() - 1);
                let [a, b, c] = self.triangle(f);
                let mut u: f64 = rng.random();
                let mut v: f64 = rng.random();
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                (a + (b - a) * u + (c - a) * v, f)
            })
            .collect()
    }

    /// Deterministic surface samples on a barycentric lattice whose spacing is
    /// at most `spacing`.
    pub fn lattice_samples(&self, spacing: f64) -> Vec<Vec3> {
        let mut out = Vec::new();
        for fi in 0..self.faces.len() {
            let [a, b, c] = self.triangle(fi);
            let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
            let k = ((longest / spacing).ceil() as usize).max(1);
            for i in 0..=k {
                for j in 0..=(k - i) {
                    out.push(a + (b - a) * (i as f64 / k as f64) + (c - a) * (j as f64 / k as f64));
                }
            }
        }
        out
    }
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Möller–Trumbore; returns the ray parameter of a front- or back-face hit.
pub fn ray_triangle(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pv = d.cross(&e2);
    let det = e1.dot(&pv);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = o - a;
    let u = tv.dot(&pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qv = tv.cross(&e1);
    let v = d.dot(&qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&qv) * inv)
}

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Aabb,
    // Leaf: start..start+count into `order`. Inner: children at `left`, `left + 1`.
    start: u32,
    count: u32,
    left: u32,
}

/// Bounding volume hierarchy over a mesh's triangles.
#[derive(Debug, Clone)]
pub struct Bvh {
    mesh: TriMesh,
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

/// Result of a closest-point query.
#[derive(Debug, Clone, Copy)]
pub struct ClosestHit {
    pub point: Vec3,
    pub face: usize,
    pub dist2: f64,
}

impl Bvh {
    pub fn new(mesh: TriMesh) -> Self {
        let n = mesh.faces.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let centroids: Vec<Vec3> = (0..n)
            .map(|f| {
                let [a, b, c] = mesh.triangle(f);
                (a + b + c) / 3.0
            })
            .collect();
        let boxes: Vec<Aabb> = (0..n)
            .map(|f| Aabb::from_points(&mesh.triangle(f)))
            .collect();
        let mut nodes = Vec::new();
        if n > 0 {
            nodes.push(BvhNode {
                bounds: Aabb::empty(),
                start: 0,
                count: n as u32,
                left: 0,
            });
            let mut stack = vec![0usize];
            while let Some(ni) = stack.pop() {
                let (start, count) = (nodes[ni].start as usize, nodes[ni].count as usize);
                let slice = &mut order[start..start + count];
                let mut b = Aabb::empty();
                let mut cb = Aabb::empty();
                for &f in slice.iter() {
                    b = b.union(&boxes[f as usize]);
                    cb.grow(&centroids[f as usize]);
                }
                nodes[ni].bounds = b;
                if count <= 4 {
                    continue;
                }
                let ext = cb.extent();
                let axis = if ext.x >= ext.y && ext.x >= ext.z {
                    0
                } else if ext.y >= ext.z {
                    1
                } else {
                    2
                };
                let mid = count / 2;
                slice.select_nth_unstable_by(mid, |&p, &q| {
                    centroids[p as usize][axis]
                        .total_cmp(&centroids[q as usize][axis])
                        .then(p.cmp(&q))
                });
                let left = nodes.len() as u32;
                nodes.push(BvhNode {
                    bounds: Aabb::empty(),
                    start: start as u32,
                    count: mid as u32,
                    left: 0,
                });
                nodes.push(BvhNode {
                    bounds: Aabb::empty(),
                    start: (start + mid) as u32,
                    count: (count - mid) as u32,
                    left: 0,
                });
                nodes[ni].left = left;
                nodes[ni].count = 0;
                stack.push(left as usize);
                stack.push(left as usize + 1);
            }
        }
        Self { mesh, nodes, order }
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    /// Nearest hit with parameter `t > t_min`: `(t, face)`.
    pub fn ray_cast(&self, o: &Vec3, d: &Vec3, t_min: f64) -> Option<(f64, usize)> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / d.x, 1.0 / d.y, 1.0 / d.z);
        let mut best: Option<(f64, usize)> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            let limit = best.map_or(f64::INFINITY, |b| b.0);
            if node.bounds.ray_hit(o, &inv, t_min, limit).is_none() {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let [a, b, c] = self.mesh.triangle(f as usize);
                    if let Some(t) = ray_triangle(o, d, &a, &b, &c) {
                        let better = match best {
                            None => true,
                            Some((bt, bf)) => t < bt || (t == bt && (f as usize) < bf),
                        };
                        if t > t_min && better {
                            best = Some((t, f as usize));
                        }
                    }
                }
            } else {
                stack.push(node.left as usize);
                stack.push(node.left as usize + 1);
            }
        }
        best
    }

    /// Closest surface point to `p`.
    pub fn closest(&self, p: &Vec3) -> Option<ClosestHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<ClosestHit> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            let bound = best.map_or(f64::INFINITY, |b| b.dist2);
            if node.bounds.dist2(p) > bound {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let [a, b, c] = self.mesh.triangle(f as usize);
                    let q = closest_point_on_triangle(p, &a, &b, &c);
                    let d2 = (q - p).norm_squared();
                    let better = match best {
                        None => true,
                        Some(h) => d2 < h.dist2 || (d2 == h.dist2 && (f as usize) < h.face),
                    };
                    if better {
                        best = Some(ClosestHit {
                            point: q,
                            face: f as usize,
                            dist2: d2,
                        });
                    }
                }
            } else {
                let l = node.left as usize;
                let (dl, dr) = (
                    self.nodes[l].bounds.dist2(p),
                    self.nodes[l + 1].bounds.dist2(p),
                );
                // Visit the nearer child first.
                if dl <= dr {
                    stack.push(l + 1);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(l + 1);
                }
            }
        }
        best
    }
}

/// Axis-aligned box as 12 triangles with outward (`inward = false`) or
/// inward-facing winding.
pub fn box_mesh(min: Vec3, max: Vec3, inward: bool) -> TriMesh {
    let v = |x: usize, y: usize, z: usize| {
        Vec3::new(
            if x == 0 { min.x } else { max.x },
            if y == 0 { min.y } else { max.y },
            if z == 0 { min.z } else { max.z },
        )
    };
    let vertices = vec![
        v(0, 0, 0),
        v(1, 0, 0),
        v(1, 1, 0),
        v(0, 1, 0),
        v(0, 0, 1),
        v(1, 0, 1),
        v(1, 1, 1),
        v(0, 1, 1),
    ];
    // Outward-facing quads (counter-clockwise seen from outside).
    let quads: [[u32; 4]; 6] = [
        [0, 3, 2, 1], // z = min
        [4, 5, 6, 7], // z = max
        [0, 1, 5, 4], // y = min
        [3, 7, 6, 2], // y = max
        [0, 4, 7, 3], // x = min
        [1, 2, 6, 5], // x = max
    ];
    let mut faces = Vec::with_capacity(12);
    for q in quads {
        let (t0, t1) = ([q[0], q[1], q[2]], [q[0], q[2], q[3]]);
        for t in [t0, t1] {
            faces.push(if inward { [t[0], t[2], t[1]] } else { t });
        }
    }
    let mut m = TriMesh {
        vertices,
        faces,
        ..Default::default()
    };
    m.compute_vertex_normals();
    m
}

/// Latitude/longitude sphere with outward winding.
pub fn sphere_mesh(center: Vec3, radius: f64, stacks: usize, slices: usize) -> TriMesh {
    let mut m = TriMesh::default();
    let stacks = stacks.max(2);
    let slices = slices.max(3);
    m.vertices.push(center + Vec3::new(0.0, 0.0, radius));
    for i in 1..stacks {
        let th = std::f64::consts::PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let ph = 2.0 * std::f64::consts::PI * j as f64 / slices as f64;
            m.vertices.push(
                center
                    + Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()) * radius,
            );
        }
    }
    m.vertices.push(center - Vec3::new(0.0, 0.0, radius));
    let ring = |i: usize, j: usize| (1 + (i - 1) * slices + (j % slices)) as u32;
    let bottom = (m.vertices.len() - 1) as u32;
    for j in 0..slices {
        m.faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            let (a, b, c, d) = (ring(i, j), ring(i + 1, j), ring(i + 1, j + 1), ring(i, j + 1));
            m.faces.push([a, b, c]);
            m.faces.push([a, c, d]);
        }
    }
    for j in 0..slices {
        m.faces.push([bottom, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    m.compute_vertex_normals();
    m
}

/// Rotation matrix from yaw about +z then pitch about the camera's right axis,
/// returned as a world-to-camera rotation for a camera looking along +z
/// (x right, y down).
pub fn look_rotation(forward: &Vec3, up_hint: &Vec3) -> Mat3 {
    let f = forward.normalize();
    let mut right = f.cross(up_hint);
    if right.norm() < 1e-9 {
        right = f.cross(&Vec3::x());
    }
    let right = right.normalize();
    let down = f.cross(&right);
    // Rows are camera axes expressed in world coordinates.
    Mat3::from_rows(&[right.transpose(), down.transpose(), f.transpose()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closest_point_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mesh = sphere_mesh(Vec3::new(0.1, -0.2, 0.3), 0.7, 8, 12);
        let bvh = Bvh::new(mesh.clone());
        for _ in 0..200 {
            let p = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let brute = (0..mesh.faces.len())
                .map(|f| {
                    let [a, b, c] = mesh.triangle(f);
                    (closest_point_on_triangle(&p, &a, &b, &c) - p).norm_squared()
                })
                .fold(f64::INFINITY, f64::min);
            let got = bvh.closest(&p).unwrap().dist2;
            assert!((brute - got).abs() < 1e-12);
        }
    }

    #[test]
    fn ray_cast_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mesh = box_mesh(Vec3::zeros(), Vec3::new(2.0, 1.0, 1.5), true);
        let bvh = Bvh::new(mesh.clone());
        for _ in 0..200 {
            let o = Vec3::new(
                rng.random_range(0.1..1.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..1.4),
            );
            let d = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let brute = (0..mesh.faces.len())
                .filter_map(|f| {
                    let [a, b, c] = mesh.triangle(f);
                    ray_triangle(&o, &d, &a, &b, &c).filter(|&t| t > 0.0)
                })
                .fold(f64::INFINITY, f64::min);
            let (t, _) = bvh.ray_cast(&o, &d, 0.0).unwrap();
            assert!((t - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn subdivision_preserves_area_and_shares_vertices() {
        let m = box_mesh(Vec3::zeros(), Vec3::repeat(0.5), false);
        let s = m.subdivided(0.1);
        assert!((m.total_area() - s.total_area()).abs() < 1e-9);
        // Closed surface: V - E + F = 2 with E = 3F/2.
        let f = s.faces.len() as i64;
        let v = s.vertices.len() as i64;
        assert_eq!(v - 3 * f / 2 + f, 2);
    }

    #[test]
    fn box_normals_point_inward_when_requested() {
        let m = box_mesh(Vec3::zeros(), Vec3::repeat(1.0), true);
        let c = Vec3::repeat(0.5);
        for f in 0..m.faces.len() {
            let [a, _, _] = m.triangle(f);
            assert!(m.face_normal(f).dot(&(c - a)) > 0.0);
        }
    }
}
