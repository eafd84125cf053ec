//! SSIM with an 11x11 Gaussian window (sigma 1.5) and zero padding, plus its
//! analytic gradient.

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter of a single-channel `w x h` image with zero padding.
pub fn blur(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = kernel();
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * img[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(img: &[f64], c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and the three channels of two interleaved RGB images,
/// and (optionally) its gradient with respect to `x`.
pub fn ssim(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Vec<f64>) {
    let n = w * h;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; n * 3] } else { Vec::new() };
    for c in 0..3 {
        let xc = channel(x, c);
        let yc = channel(y, c);
        let xx: Vec<f64> = xc.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yc.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b).collect();
        let (mx, my) = (blur(&xc, w, h), blur(&yc, w, h));
        let (mxx, myy, mxy) = (blur(&xx, w, h), blur(&yy, w, h), blur(&xy, w, h));
        let mut da = vec![0.0; n];
        let mut dxx = vec![0.0; n];
        let mut dxy = vec![0.0; n];
        for p in 0..n {
            let (a, b) = (mx[p], my[p]);
            let n1 = 2.0 * a * b + C1;
            let n2 = 2.0 * (mxy[p] - a * b) + C2;
            let d1 = a * a + b * b + C1;
            let d2 = (mxx[p] - a * a) + (myy[p] - b * b) + C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let dd = d1 * d2;
                da[p] = ((2.0 * b * n2 - 2.0 * b * n1) * dd - n1 * n2 * (2.0 * a * d2 - 2.0 * a * d1)) / (dd * dd);
                dxx[p] = -s / d2;
                dxy[p] = 2.0 * n1 / dd;
            }
        }
        if want_grad {
            let (ba, bxx, bxy) = (blur(&da, w, h), blur(&dxx, w, h), blur(&dxy, w, h));
            for p in 0..n {
                grad[p * 3 + c] = (ba[p] + 2.0 * xc[p] * bxx[p] + yc[p] * bxy[p]) / (3 * n) as f64;
            }
        }
    }
    (total / (3 * n) as f64, grad)
}
