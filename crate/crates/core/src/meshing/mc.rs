//! Marching cubes with a case table built from per-face contour rules.
//!
//! Corner `c` of a cube sits at offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
//! A corner is inside when its value is below the iso level. Every face
//! contributes contour segments between its crossed edges; on a face with
//! alternating corners the face-center value decides whether the inside
//! corners connect. Since that decision depends only on the face itself,
//! neighboring cubes agree and the surface closes across cube boundaries.
//! The segments chain into loops, each fanned into triangles whose normals
//! point from inside to outside.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::geometry::{TriMesh, Vec3};
use crate::par;

/// The 12 cube edges as corner pairs `(a, b)` with `a < b`.
pub const EDGES: [(u8, u8); 12] = {
    let mut e = [(0u8, 0u8); 12];
    let mut n = 0;
    let mut bit = 1u8;
    while bit <= 4 {
        let mut a = 0u8;
        while a < 8 {
            if a & bit == 0 {
                e[n] = (a, a | bit);
                n += 1;
            }
            a += 1;
        }
        bit <<= 1;
    }
    e
};

/// Corners of each face in cyclic order.
const FACES: [[u8; 4]; 6] = {
    let mut f = [[0u8; 4]; 6];
    let mut axis = 0;
    while axis < 3 {
        let (u, v) = (1u8 << ((axis + 1) % 3), 1u8 << ((axis + 2) % 3));
        let mut side = 0;
        while side < 2 {
            let base = if side == 1 { 1u8 << axis } else { 0 };
            f[axis * 2 + side] = [base, base | u, base | u | v, base | v];
            side += 1;
        }
        axis += 1;
    }
    f
};

fn edge_index(a: u8, b: u8) -> usize {
    let (a, b) = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == (a, b)).expect("adjacent corners")
}

fn corner_pos(c: u8) -> Vec3 {
    Vec3::new(f64::from(c & 1), f64::from(c >> 1 & 1), f64::from(c >> 2 & 1))
}

/// Outward normal of face `fi`.
fn face_normal(fi: usize) -> Vec3 {
    let mut n = Vec3::zeros();
    n[fi / 2] = if fi % 2 == 1 { 1.0 } else { -1.0 };
    n
}

/// Triangles (as edge triples) for an inside-corner mask and, per face, whether
/// the face center is inside.
///
/// Each face segment is directed along `N x n_f`, with `N` the in-face
/// direction from inside to outside and `n_f` the face's outward normal. The
/// segments then chain head to tail into loops that wind counterclockwise
/// around the outward surface normal.
fn build_case(mask: u8, center_inside: u8) -> Vec<[u8; 3]> {
    let inside = |c: u8| mask >> c & 1 == 1;
    let mid = |e: usize| (corner_pos(EDGES[e].0) + corner_pos(EDGES[e].1)) * 0.5;
    let mut next: [Option<usize>; 12] = [None; 12];
    for (fi, face) in FACES.iter().enumerate() {
        let nf = face_normal(fi);
        let edge = |k: usize| edge_index(face[k], face[(k + 1) % 4]);
        let mut link = |e0: usize, e1: usize, n: Vec3| {
            let (a, b) = if n.cross(&nf).dot(&(mid(e1) - mid(e0))) >= 0.0 { (e0, e1) } else { (e1, e0) };
            debug_assert!(next[a].is_none());
            next[a] = Some(b);
        };
        let crossed: Vec<usize> = (0..4).filter(|&k| inside(face[k]) != inside(face[(k + 1) % 4])).collect();
        match crossed.len() {
            2 => {
                let (mut cin, mut cout) = (Vec3::zeros(), Vec3::zeros());
                for &c in face {
                    if inside(c) {
                        cin += corner_pos(c);
                    } else {
                        cout += corner_pos(c);
                    }
                }
                let nin = face.iter().filter(|&&c| inside(c)).count() as f64;
                let n = cout / (4.0 - nin) - cin / nin;
                link(edge(crossed[0]), edge(crossed[1]), n);
            }
            4 => {
                // Cut off the corners of the class that stays disconnected.
                let connect_inside = center_inside >> fi & 1 == 1;
                for k in 0..4 {
                    let c = face[k];
                    if inside(c) != connect_inside {
                        let (e0, e1) = (edge((k + 3) % 4), edge(k));
                        let away = (mid(e0) + mid(e1)) * 0.5 - corner_pos(c);
                        link(e0, e1, if inside(c) { away } else { -away });
                    }
                }
            }
            _ => {}
        }
    }
    let mut seen = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if seen[start] || next[start].is_none() {
            continue;
        }
        let mut cycle: Vec<usize> = vec![start];
        seen[start] = true;
        let mut cur = next[start].expect("checked");
        while cur != start {
            seen[cur] = true;
            cycle.push(cur);
            cur = next[cur].expect("every crossed edge has a successor");
        }
        triangulate(cycle, &mut tris);
    }
    tris
}

/// Bit set of the faces containing cube edge `e`.
fn faces_of(e: usize) -> u8 {
    let (a, b) = EDGES[e];
    (0..6)
        .filter(|&f| FACES[f].contains(&a) && FACES[f].contains(&b))
        .fold(0, |m, f| m | 1 << f)
}

/// Ear clipping that avoids diagonals lying on a cube face, which a
/// neighboring cube could duplicate.
fn triangulate(mut cycle: Vec<usize>, tris: &mut Vec<[u8; 3]>) {
    while cycle.len() > 3 {
        let n = cycle.len();
        let ear = (0..n)
            .find(|&k| faces_of(cycle[(k + n - 1) % n]) & faces_of(cycle[(k + 1) % n]) == 0)
            .unwrap_or(0);
        let (a, b, c) = (cycle[(ear + n - 1) % n], cycle[ear], cycle[(ear + 1) % n]);
        tris.push([a as u8, b as u8, c as u8]);
        cycle.remove(ear);
    }
    tris.push([cycle[0] as u8, cycle[1] as u8, cycle[2] as u8]);
}

/// Case table indexed by `mask | center_bits << 8`.
pub fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..256 * 64)
            .map(|i| {
                let (mask, centers) = ((i & 0xff) as u8, (i >> 8) as u8);
                // Derive half the cases from their complements so that
                // negating a field reverses every triangle exactly.
                if mask & 1 == 0 {
                    build_case(mask, centers)
                } else {
                    build_case(!mask, !centers & 0x3f).into_iter().map(|[a, b, c]| [a, c, b]).collect()
                }
            })
            .collect()
    })
}

/// Scalar samples on a regular lattice.
pub trait Lattice: Sync {
    fn dims(&self) -> [usize; 3];
    fn origin(&self) -> Vec3;
    fn spacing(&self) -> f64;
    /// Value at a lattice point, or `None` if the point has no data.
    fn value(&self, i: usize, j: usize, k: usize) -> Option<f64>;
}

/// Extracts the `iso` level set. Vertices are shared between cubes and
/// numbered by first use in z-y-x cube order.
pub fn marching_cubes(lat: &impl Lattice, iso: f64) -> TriMesh {
    let [nx, ny, nz] = lat.dims();
    if nx < 2 || ny < 2 || nz < 2 {
        return TriMesh::default();
    }
    let table = case_table();
    let point_id = |i: usize, j: usize, k: usize| ((k * ny + j) * nx + i) as u64;
    let slabs = par::map_range(nz - 1, |k| {
        let mut tris: Vec<[u64; 3]> = Vec::new();
        let mut vals = [0.0; 8];
        for j in 0..ny - 1 {
            'cube: for i in 0..nx - 1 {
                let mut mask = 0u8;
                for c in 0..8u8 {
                    let (di, dj, dk) = (usize::from(c & 1), usize::from(c >> 1 & 1), usize::from(c >> 2 & 1));
                    match lat.value(i + di, j + dj, k + dk) {
                        Some(v) => vals[c as usize] = v,
                        None => continue 'cube,
                    }
                    if vals[c as usize] < iso {
                        mask |= 1 << c;
                    }
                }
                if mask == 0 || mask == 255 {
                    continue;
                }
                let mut centers = 0u8;
                for (fi, f) in FACES.iter().enumerate() {
                    let m = f.iter().map(|&c| vals[c as usize]).sum::<f64>() / 4.0;
                    if m < iso {
                        centers |= 1 << fi;
                    }
                }
                for t in &table[mask as usize | (centers as usize) << 8] {
                    tris.push(t.map(|e| {
                        let (a, b) = EDGES[e as usize];
                        let axis = u64::from((b ^ a).trailing_zeros());
                        let (di, dj, dk) = (usize::from(a & 1), usize::from(a >> 1 & 1), usize::from(a >> 2 & 1));
                        point_id(i + di, j + dj, k + dk) * 3 + axis
                    }));
                }
            }
        }
        tris
    });
    let (o, h) = (lat.origin(), lat.spacing());
    let pos = |id: u64| {
        let (p, axis) = ((id / 3) as usize, (id % 3) as usize);
        let (i, j, k) = (p % nx, (p / nx) % ny, p / (nx * ny));
        let mut q = [i, j, k];
        let va = lat.value(i, j, k).expect("cube corners carry data");
        q[axis] += 1;
        let vb = lat.value(q[0], q[1], q[2]).expect("cube corners carry data");
        let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
        let mut x = Vec3::new(i as f64, j as f64, k as f64);
        x[axis] += t;
        o + x * h
    };
    let mut mesh = TriMesh::default();
    let mut index: HashMap<u64, u32> = HashMap::new();
    for tri in slabs.into_iter().flatten() {
        let f = tri.map(|id| {
            *index.entry(id).or_insert_with(|| {
                mesh.vertices.push(pos(id));
                (mesh.vertices.len() - 1) as u32
            })
        });
        mesh.faces.push(f);
    }
    mesh
}
