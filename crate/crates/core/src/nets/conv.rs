//! Sparse 3x3x3 convolutions expressed as gather rules between key sets.

use std::collections::HashMap;

use crate::par;
use crate::tensor::Mat;
use crate::voxel_grid::VoxelKey;

pub const KERNEL: usize = 27;

/// Kernel offset of tap `k`.
pub fn tap(k: usize) -> [i32; 3] {
    [(k / 9) as i32 - 1, ((k / 3) % 3) as i32 - 1, (k % 3) as i32 - 1]
}

/// Which input row feeds which output row through which kernel tap.
///
/// Rules are stored three ways so that the forward pass and both backward
/// products can run in parallel without atomics, each with a fixed
/// summation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRules {
    pub n_in: usize,
    pub n_out: usize,
    out_off: Vec<usize>,
    out_ent: Vec<(u32, u8)>,
    in_off: Vec<usize>,
    in_ent: Vec<(u32, u8)>,
    by_tap: Vec<Vec<(u32, u32)>>,
}

fn csr(n: usize, pairs: impl Iterator<Item = (usize, u32, u8)> + Clone) -> (Vec<usize>, Vec<(u32, u8)>) {
    let mut off = vec![0usize; n + 1];
    for (r, _, _) in pairs.clone() {
        off[r + 1] += 1;
    }
    for i in 0..n {
        off[i + 1] += off[i];
    }
    let mut fill = off.clone();
    let mut ent = vec![(0u32, 0u8); off[n]];
    for (r, o, k) in pairs {
        ent[fill[r]] = (o, k);
        fill[r] += 1;
    }
    (off, ent)
}

impl ConvRules {
    /// Builds the tables from `(out, in, tap)` triples. Triples should be
    /// listed with taps ascending per output so sums run in tap order.
    pub fn new(n_in: usize, n_out: usize, mut rules: Vec<(u32, u32, u8)>) -> Self {
        rules.sort_unstable_by_key(|&(o, i, k)| (o, k, i));
        let (out_off, out_ent) = csr(n_out, rules.iter().map(|&(o, i, k)| (o as usize, i, k)));
        let mut by_in = rules.clone();
        by_in.sort_unstable_by_key(|&(o, i, k)| (i, k, o));
        let (in_off, in_ent) = csr(n_in, by_in.iter().map(|&(o, i, k)| (i as usize, o, k)));
        let mut by_tap = vec![Vec::new(); KERNEL];
        for &(o, i, k) in &rules {
            by_tap[k as usize].push((o, i));
        }
        Self {
            n_in,
            n_out,
            out_off,
            out_ent,
            in_off,
            in_ent,
            by_tap,
        }
    }

    pub fn len(&self) -> usize {
        self.out_ent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out_ent.is_empty()
    }

    /// `(in, tap)` pairs feeding output row `o`.
    pub fn inputs_of(&self, o: usize) -> &[(u32, u8)] {
        &self.out_ent[self.out_off[o]..self.out_off[o + 1]]
    }

    /// `x` is `n_in x cin`, `w` is `27 cin x cout` (tap-major), `b` is `1 x cout`.
    pub fn forward(&self, x: &Mat, w: &Mat, b: &Mat) -> Mat {
        let cin = x.cols;
        assert_eq!(x.rows, self.n_in, "conv input rows");
        assert_eq!(w.rows, KERNEL * cin, "conv weight rows");
        let cout = w.cols;
        let mut y = Mat::zeros(self.n_out, cout);
        if cout == 0 {
            return y;
        }
        par::for_each_chunk_mut(&mut y.data, cout * 32, |ci, chunk| {
            for (ri, row) in chunk.chunks_mut(cout).enumerate() {
                let o = ci * 32 + ri;
                row.copy_from_slice(&b.data);
                for &(i, k) in self.inputs_of(o) {
                    let xr = x.row(i as usize);
                    for (c, &xv) in xr.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (a, &wv) in row.iter_mut().zip(w.row(k as usize * cin + c)) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        });
        y
    }

    /// Gradient with respect to the input rows.
    pub fn input_grad(&self, g: &Mat, w: &Mat) -> Mat {
        let cout = g.cols;
        let cin = w.rows / KERNEL;
        let mut dx = Mat::zeros(self.n_in, cin);
        if cin == 0 {
            return dx;
        }
        par::for_each_chunk_mut(&mut dx.data, cin * 32, |ci, chunk| {
            for (ri, row) in chunk.chunks_mut(cin).enumerate() {
                let i = ci * 32 + ri;
                for &(o, k) in &self.in_ent[self.in_off[i]..self.in_off[i + 1]] {
                    let gr = g.row(o as usize);
                    for (c, a) in row.iter_mut().enumerate() {
                        let wr = &w.row(k as usize * cin + c)[..cout];
                        *a += gr.iter().zip(wr).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
        });
        dx
    }

    /// Gradient with respect to the tap-major weight matrix.
    pub fn weight_grad(&self, x: &Mat, g: &Mat, cin: usize) -> Mat {
        let cout = g.cols;
        let mut dw = Mat::zeros(KERNEL * cin, cout);
        if cin * cout == 0 {
            return dw;
        }
        par::for_each_chunk_mut(&mut dw.data, cin * cout, |k, block| {
            for &(o, i) in &self.by_tap[k] {
                let xr = x.row(i as usize);
                let gr = g.row(o as usize);
                for (c, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (a, &gv) in block[c * cout..(c + 1) * cout].iter_mut().zip(gr) {
                        *a += xv * gv;
                    }
                }
            }
        });
        dw
    }
}

fn index(keys: &[VoxelKey]) -> HashMap<VoxelKey, u32> {
    keys.iter().enumerate().map(|(s, k)| (*k, s as u32)).collect()
}

/// Same-level convolution: output and input share `keys`.
pub fn subm_rules(keys: &[VoxelKey]) -> ConvRules {
    let map = index(keys);
    let mut rules = Vec::new();
    for (o, key) in keys.iter().enumerate() {
        for k in 0..KERNEL {
            if let Some(&i) = map.get(&key.offset(tap(k))) {
                rules.push((o as u32, i, k as u8));
            }
        }
    }
    ConvRules::new(keys.len(), keys.len(), rules)
}

/// Stride-2 convolution from `fine` keys to `coarse` keys one level up:
/// `out[P] = Σ_d W_d in[2P + d]`.
pub fn down_rules(fine: &[VoxelKey], coarse: &[VoxelKey]) -> ConvRules {
    let map = index(fine);
    let mut rules = Vec::new();
    for (o, p) in coarse.iter().enumerate() {
        let base = VoxelKey::new(2 * p.i, 2 * p.j, 2 * p.k);
        for k in 0..KERNEL {
            if let Some(&i) = map.get(&base.offset(tap(k))) {
                rules.push((o as u32, i, k as u8));
            }
        }
    }
    ConvRules::new(fine.len(), coarse.len(), rules)
}

/// Transposed stride-2 convolution from `coarse` keys to `fine` keys one level
/// down: child `c` receives `W_d in[P]` whenever `c = 2P + d`.
pub fn up_rules(coarse: &[VoxelKey], fine: &[VoxelKey]) -> ConvRules {
    let map = index(coarse);
    let mut rules = Vec::new();
    for (o, c) in fine.iter().enumerate() {
        for k in 0..KERNEL {
            let d = tap(k);
            let (x, y, z) = (c.i - d[0], c.j - d[1], c.k - d[2]);
            if x % 2 != 0 || y % 2 != 0 || z % 2 != 0 {
                continue;
            }
            if let Some(&i) = map.get(&VoxelKey::new(x / 2, y / 2, z / 2)) {
                rules.push((o as u32, i, k as u8));
            }
        }
    }
    ConvRules::new(coarse.len(), fine.len(), rules)
}
