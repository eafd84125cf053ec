//! Sparse hash-indexed voxel grids carrying latent features and occupancy.
//!
//! Level 0 is the finest level with cell edge `v_d`; level `l` has edge
//! `v_d * 2^l`. Grids built by this module list their slots in sorted key
//! order, so every traversal is deterministic.

mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap};

pub use io::{read_grid, read_grid_from, write_grid, write_grid_to};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scene_io::SfmPoint;

/// Lattice coordinates of a voxel at some level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl VoxelKey {
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        Self { i, j, k }
    }

    /// Cell containing `p` for cells of size `edge`.
    pub fn containing(p: &Vec3, edge: f64) -> Self {
        Self::new(
            (p.x / edge).floor() as i32,
            (p.y / edge).floor() as i32,
            (p.z / edge).floor() as i32,
        )
    }

    pub fn center(&self, edge: f64) -> Vec3 {
        Vec3::new(
            (self.i as f64 + 0.5) * edge,
            (self.j as f64 + 0.5) * edge,
            (self.k as f64 + 0.5) * edge,
        )
    }

    pub fn offset(&self, d: [i32; 3]) -> Self {
        Self::new(self.i + d[0], self.j + d[1], self.k + d[2])
    }

    /// Key `levels` levels coarser.
    pub fn parent(&self, levels: u32) -> Self {
        Self::new(self.i >> levels, self.j >> levels, self.k >> levels)
    }

    /// Child `c` in `0..8` one level finer; bit 0 is x, bit 1 is y, bit 2 is z.
    pub fn child(&self, c: usize) -> Self {
        Self::new(
            2 * self.i + (c & 1) as i32,
            2 * self.j + ((c >> 1) & 1) as i32,
            2 * self.k + ((c >> 2) & 1) as i32,
        )
    }

    pub fn chebyshev(&self, o: &VoxelKey) -> i32 {
        (self.i - o.i)
            .abs()
            .max((self.j - o.j).abs())
            .max((self.k - o.k).abs())
    }
}

/// Sparse voxels with one feature row and one occupancy value per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    /// Cell edge at this grid's level, meters.
    pub edge: f64,
    pub level: u32,
    pub width: usize,
    keys: Vec<VoxelKey>,
    slots: HashMap<VoxelKey, usize>,
    /// Row-major `len() x width`.
    pub features: Vec<f64>,
    pub occupancy: Vec<f64>,
}

impl SparseGrid {
    pub fn empty(edge: f64, level: u32, width: usize) -> Self {
        Self {
            edge,
            level,
            width,
            keys: Vec::new(),
            slots: HashMap::new(),
            features: Vec::new(),
            occupancy: Vec::new(),
        }
    }

    /// Builds a grid whose slots follow `keys` in the given order.
    pub fn from_parts(
        edge: f64,
        level: u32,
        width: usize,
        keys: Vec<VoxelKey>,
        features: Vec<f64>,
        occupancy: Vec<f64>,
    ) -> Result<Self> {
        if features.len() != keys.len() * width || occupancy.len() != keys.len() {
            return Err(Error::Shape(format!(
                "{} keys need {} features and {} occupancies, got {} and {}",
                keys.len(),
                keys.len() * width,
                keys.len(),
                features.len(),
                occupancy.len()
            )));
        }
        let mut slots = HashMap::with_capacity(keys.len());
        for (s, k) in keys.iter().enumerate() {
            if slots.insert(*k, s).is_some() {
                return Err(Error::Key(format!("duplicate key {k:?}")));
            }
        }
        if let Some(o) = occupancy.iter().find(|o| !(0.0..=1.0).contains(*o)) {
            return Err(occupancy_error(*o));
        }
        Ok(Self {
            edge,
            level,
            width,
            keys,
            slots,
            features,
            occupancy,
        })
    }

    /// Sorted keys with zero features and the given occupancy.
    pub fn from_keys(edge: f64, level: u32, width: usize, keys: impl IntoIterator<Item = VoxelKey>, occ: f64) -> Self {
        let keys: Vec<_> = keys.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let n = keys.len();
        Self::from_parts(edge, level, width, keys, vec![0.0; n * width], vec![occ; n])
            .expect("consistent by construction")
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[VoxelKey] {
        &self.keys
    }

    pub fn slot(&self, key: &VoxelKey) -> Option<usize> {
        self.slots.get(key).copied()
    }

    pub fn contains(&self, key: &VoxelKey) -> bool {
        self.slots.contains_key(key)
    }

    pub fn feature(&self, slot: usize) -> &[f64] {
        &self.features[slot * self.width..(slot + 1) * self.width]
    }

    pub fn feature_mut(&mut self, slot: usize) -> &mut [f64] {
        let w = self.width;
        &mut self.features[slot * w..(slot + 1) * w]
    }

    pub fn center(&self, slot: usize) -> Vec3 {
        self.keys[slot].center(self.edge)
    }

    /// Inserts a key (appended as the last slot) or overwrites an existing one.
    pub fn insert(&mut self, key: VoxelKey, feature: &[f64], occupancy: f64) -> Result<usize> {
        if feature.len() != self.width {
            return Err(Error::Shape(format!(
                "feature of width {} for a grid of width {}",
                feature.len(),
                self.width
            )));
        }
        if !(0.0..=1.0).contains(&occupancy) {
            return Err(occupancy_error(occupancy));
        }
        let slot = match self.slots.get(&key) {
            Some(&s) => s,
            None => {
                self.keys.push(key);
                self.features.extend(std::iter::repeat_n(0.0, self.width));
                self.occupancy.push(0.0);
                self.slots.insert(key, self.keys.len() - 1);
                self.keys.len() - 1
            }
        };
        self.feature_mut(slot).copy_from_slice(feature);
        self.occupancy[slot] = occupancy;
        Ok(slot)
    }

    /// Same content with slots in sorted key order.
    pub fn sorted(&self) -> SparseGrid {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&s| self.keys[s]);
        self.select(&order)
    }

    /// Grid made of the given slots, in that order.
    pub fn select(&self, slots: &[usize]) -> SparseGrid {
        let keys = slots.iter().map(|&s| self.keys[s]).collect();
        let features = slots.iter().flat_map(|&s| self.feature(s).iter().copied()).collect();
        let occupancy = slots.iter().map(|&s| self.occupancy[s]).collect();
        SparseGrid::from_parts(self.edge, self.level, self.width, keys, features, occupancy)
            .expect("subset of a valid grid")
    }

    /// Appends the slots of `other` (whose keys must be new) after this grid's slots.
    pub fn concat(&self, other: &SparseGrid) -> Result<SparseGrid> {
        if other.width != self.width || other.level != self.level {
            return Err(Error::Shape("grids differ in width or level".into()));
        }
        let mut keys = self.keys.clone();
        keys.extend_from_slice(&other.keys);
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut occupancy = self.occupancy.clone();
        occupancy.extend_from_slice(&other.occupancy);
        SparseGrid::from_parts(self.edge, self.level, self.width, keys, features, occupancy)
    }
}

/// Per-slot gradients with respect to a grid's features.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub width: usize,
    /// Row-major `rows x width`.
    pub data: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            width,
            data: vec![0.0; rows * width],
        }
    }

    pub fn for_grid(grid: &SparseGrid) -> Self {
        Self::zeros(grid.len(), grid.width)
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        &self.data[slot * self.width..(slot + 1) * self.width]
    }

    pub fn add_assign(&mut self, other: &GradBuffer) -> Result<()> {
        if other.data.len() != self.data.len() {
            return Err(Error::Shape("gradient buffers differ in size".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Appends `rows` zero rows (gradients of newly allocated voxels).
    pub fn extend_zeros(&mut self, rows: usize) {
        self.data.extend(std::iter::repeat_n(0.0, rows * self.width));
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Width of the per-voxel statistics produced by [`voxelize_points`].
pub const POINT_STATS: usize = 7;

/// Level-0 grid with one voxel per cell containing at least one point.
///
/// Features are raw statistics of the points in each cell: mean color (3),
/// `ln(1 + count)` (1) and mean offset from the cell center in units of the
/// edge (3). The networks embed these with a learned input layer. Occupancy
/// is 1 everywhere.
pub fn voxelize_points(points: &[SfmPoint], edge: f64) -> Result<SparseGrid> {
    if !(edge.is_finite() && edge > 0.0) {
        return Err(Error::Validation("voxel edge must be positive".into()));
    }
    if points.is_empty() {
        return Err(Error::EmptyInput("SfM point set"));
    }
    // Sorting points first makes the floating-point sums independent of input order.
    let mut sorted: Vec<&SfmPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        let ka = [a.position.x, a.position.y, a.position.z, a.color.x, a.color.y, a.color.z];
        let kb = [b.position.x, b.position.y, b.position.z, b.color.x, b.color.y, b.color.z];
        ka.iter()
            .zip(&kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut cells: BTreeMap<VoxelKey, (Vec3, Vec3, usize)> = BTreeMap::new();
    for p in sorted {
        let key = VoxelKey::containing(&p.position, edge);
        let e = cells.entry(key).or_insert((Vec3::zeros(), Vec3::zeros(), 0));
        e.0 += p.color;
        e.1 += (p.position - key.center(edge)) / edge;
        e.2 += 1;
    }
    let mut keys = Vec::with_capacity(cells.len());
    let mut features = Vec::with_capacity(cells.len() * POINT_STATS);
    for (key, (color, offset, count)) in cells {
        let n = count as f64;
        keys.push(key);
        features.extend_from_slice(&[
            color.x / n,
            color.y / n,
            color.z / n,
            (1.0 + n).ln(),
            offset.x / n,
            offset.y / n,
            offset.z / n,
        ]);
    }
    let n = keys.len();
    SparseGrid::from_parts(edge, 0, POINT_STATS, keys, features, vec![1.0; n])
}

/// Level-0 grid of the cells touched by `samples` (occupancy 1, no features).
pub fn voxelize_samples(samples: &[Vec3], edge: f64, level: u32) -> SparseGrid {
    let e = edge * f64::from(1u32 << level);
    SparseGrid::from_keys(e, level, 0, samples.iter().map(|p| VoxelKey::containing(p, e)), 1.0)
}

/// Merges children into parents `levels` levels up: features are averaged and
/// occupancy is the maximum over children.
pub fn downsample(grid: &SparseGrid, levels: u32) -> Result<SparseGrid> {
    if levels == 0 {
        return Err(Error::Validation("downsample needs at least one level".into()));
    }
    let w = grid.width;
    let mut acc: BTreeMap<VoxelKey, (Vec<f64>, f64, usize)> = BTreeMap::new();
    for (s, key) in grid.keys().iter().enumerate() {
        let e = acc
            .entry(key.parent(levels))
            .or_insert_with(|| (vec![0.0; w], 0.0, 0));
        for (a, f) in e.0.iter_mut().zip(grid.feature(s)) {
            *a += f;
        }
        e.1 = f64::max(e.1, grid.occupancy[s]);
        e.2 += 1;
    }
    let mut keys = Vec::with_capacity(acc.len());
    let mut features = Vec::with_capacity(acc.len() * w);
    let mut occupancy = Vec::with_capacity(acc.len());
    for (k, (f, o, n)) in acc {
        keys.push(k);
        features.extend(f.iter().map(|v| v / n as f64));
        occupancy.push(o);
    }
    SparseGrid::from_parts(
        grid.edge * f64::from(1u32 << levels),
        grid.level + levels,
        w,
        keys,
        features,
        occupancy,
    )
}

/// Allocates the children selected by `mask` (8 entries per parent slot, in
/// [`VoxelKey::child`] order). Children inherit the parent's feature and
/// occupancy; the result is sorted.
pub fn upsample(grid: &SparseGrid, mask: &[bool]) -> Result<SparseGrid> {
    if grid.level == 0 {
        return Err(Error::Validation("cannot upsample below level 0".into()));
    }
    if mask.len() != 8 * grid.len() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} parents",
            mask.len(),
            grid.len()
        )));
    }
    let mut out = SparseGrid::empty(grid.edge / 2.0, grid.level - 1, grid.width);
    for (s, key) in grid.keys().iter().enumerate() {
        for c in 0..8 {
            if mask[s * 8 + c] {
                out.insert(key.child(c), grid.feature(s), grid.occupancy[s])?;
            }
        }
    }
    Ok(out.sorted())
}

/// Adds every key within Chebyshev distance `radius` of an existing key. New
/// voxels get zero features and occupancy 0; the result is sorted.
pub fn dilate(grid: &SparseGrid, radius: u32) -> Result<SparseGrid> {
    if radius == 0 {
        return Err(Error::Validation("dilation radius must be at least 1".into()));
    }
    let r = radius as i32;
    let mut keys: BTreeSet<VoxelKey> = BTreeSet::new();
    for key in grid.keys() {
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    keys.insert(key.offset([dx, dy, dz]));
                }
            }
        }
    }
    let w = grid.width;
    let mut features = Vec::with_capacity(keys.len() * w);
    let mut occupancy = Vec::with_capacity(keys.len());
    for k in &keys {
        match grid.slot(k) {
            Some(s) => {
                features.extend_from_slice(grid.feature(s));
                occupancy.push(grid.occupancy[s]);
            }
            None => {
                features.extend(std::iter::repeat_n(0.0, w));
                occupancy.push(0.0);
            }
        }
    }
    SparseGrid::from_parts(grid.edge, grid.level, w, keys.into_iter().collect(), features, occupancy)
}

/// NaN occupancy comes from diverged networks; other out-of-range values are bad input.
fn occupancy_error(o: f64) -> Error {
    if o.is_nan() {
        Error::NonFinite("voxel occupancy".into())
    } else {
        Error::Validation(format!("occupancy {o} outside [0, 1]"))
    }
}
