//! First/second-moment adaptive gradient descent.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{config_hash, read_checkpoint, write_checkpoint};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new<'a>(lr: f64, shapes: impl IntoIterator<Item = &'a Mat>) -> Self {
        let m: Vec<Mat> = shapes.into_iter().map(|s| Mat::zeros(s.rows, s.cols)).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` (in the order given at construction).
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Mat>, grads: &[Mat]) -> Result<()> {
        self.step_scaled(params, grads, None)
    }

    /// As [`Adam::step`] with a learning rate per tensor.
    pub fn step_scaled<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Mat>,
        grads: &[Mat],
        lrs: Option<&[f64]>,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!("{} gradients for {} tensors", grads.len(), self.m.len())));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut n = 0;
        for (i, p) in params.into_iter().enumerate() {
            let g = &grads[i];
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::Shape(format!("tensor {i} shape changed")));
            }
            let lr = lrs.map_or(self.lr, |l| l[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.data.len() {
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * g.data[k];
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * g.data[k] * g.data[k];
                p.data[k] -= lr * (m.data[k] / c1) / ((v.data[k] / c2).sqrt() + self.eps);
            }
            n += 1;
        }
        if n != grads.len() {
            return Err(Error::Shape(format!("{n} parameters for {} gradients", grads.len())));
        }
        Ok(())
    }

    fn hash(&self) -> String {
        config_hash("adam", &(self.m.iter().map(Mat::shape).collect::<Vec<_>>(), self.beta1, self.beta2, self.eps))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let step = Mat::from_vec(1, 1, vec![self.t as f64]);
        let mut named: Vec<(String, &Mat)> = vec![("step".into(), &step)];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            named.push((format!("m{i}"), m));
            named.push((format!("v{i}"), v));
        }
        write_checkpoint(path, &self.hash(), &named)
    }

    /// Restores moments and step count saved by an optimizer of the same shapes.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let t = read_checkpoint(path, &self.hash())?;
        if t.len() != 1 + 2 * self.m.len() {
            return Err(Error::ConfigMismatch { path: path.to_path_buf() });
        }
        let mut it = t.into_iter();
        self.t = it.next().expect("step").1.data[0] as u64;
        for i in 0..self.m.len() {
            self.m[i] = it.next().expect("m").1;
            self.v[i] = it.next().expect("v").1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = vec![Mat::from_vec(1, 2, vec![1.0, -1.0])];
        let mut a = Adam::new(0.1, &p);
        a.step(p.iter_mut(), &[Mat::from_vec(1, 2, vec![3.0, -0.5])]).unwrap();
        assert!((p[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Mat::from_vec(1, 1, vec![5.0])];
        let mut a = Adam::new(0.1, &p);
        for _ in 0..500 {
            let g = Mat::from_vec(1, 1, vec![2.0 * (p[0].data[0] - 1.0)]);
            a.step(p.iter_mut(), &[g]).unwrap();
        }
        assert!((p[0].data[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = vec![Mat::from_vec(1, 2, vec![1.0, 2.0])];
        let mut a = Adam::new(0.1, &p);
        a.step(p.iter_mut(), &[Mat::from_vec(1, 2, vec![0.3, 0.1])]).unwrap();
        a.save(&dir.path().join("a.ckpt")).unwrap();
        let mut b = Adam::new(0.1, &p);
        b.load(&dir.path().join("a.ckpt")).unwrap();
        assert_eq!(a, b);
        assert!(matches!(a.step(p.iter_mut(), &[Mat::scalar(f64::NAN)]), Err(Error::NonFinite(_))));
    }
}
