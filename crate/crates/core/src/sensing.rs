//! Random Gaussian measurement operators with orthonormal rows.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sidecar metadata stored next to a serialized sensing matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensingMeta {
    pub n: usize,
    pub m: usize,
    pub cs_ratio: f64,
    pub seed: u64,
}

/// `m x n` measurement matrix with orthonormal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SensingOperator {
    matrix: Tensor,
    meta: SensingMeta,
}

/// Number of measurements kept for a signal of length `n`.
pub fn measurement_count(n: usize, cs_ratio: f64) -> Result<usize> {
    if !(cs_ratio > 0.0 && cs_ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "CS ratio must lie in (0, 1], got {cs_ratio}"
        )));
    }
    let m = (cs_ratio * n as f64).round() as usize;
    if m == 0 {
        return Err(Error::InvalidParameter(format!(
            "CS ratio {cs_ratio} keeps no measurements of a length-{n} signal"
        )));
    }
    Ok(m.min(n))
}

/// Draws an i.i.d. standard normal `m x n` matrix from a seeded generator and
/// orthonormalizes its rows.
pub fn make_sensing(n: usize, cs_ratio: f64, seed: u64) -> Result<SensingOperator> {
    let m = measurement_count(n, cs_ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<f64> = (0..m * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    orthonormalize_rows(&mut rows, m, n)?;
    Ok(SensingOperator {
        matrix: Tensor::new(vec![m, n], rows)?,
        meta: SensingMeta { n, m, cs_ratio, seed },
    })
}

/// Modified Gram-Schmidt with one re-orthogonalization pass per row.
fn orthonormalize_rows(a: &mut [f64], m: usize, n: usize) -> Result<()> {
    for i in 0..m {
        let (done, rest) = a.split_at_mut(i * n);
        let row = &mut rest[..n];
        for _pass in 0..2 {
            for j in 0..i {
                let q = &done[j * n..(j + 1) * n];
                let proj: f64 = q.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                for (r, qv) in row.iter_mut().zip(q) {
                    *r -= proj * qv;
                }
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::InvalidParameter("random rows are numerically dependent".into()));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

impl SensingOperator {
    /// Wraps an existing matrix, checking its rows are orthonormal.
    pub fn from_matrix(matrix: Tensor, meta: SensingMeta) -> Result<Self> {
        if matrix.shape() != [meta.m, meta.n] {
            return Err(Error::shape(
                "SensingOperator::from_matrix",
                format!("[{}, {}]", meta.m, meta.n),
                format!("{:?}", matrix.shape()),
            ));
        }
        let op = SensingOperator { matrix, meta };
        let err = op.orthonormality_error();
        if err > 1e-8 {
            return Err(Error::InvalidParameter(format!(
                "sensing rows are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(op)
    }

    pub fn m(&self) -> usize {
        self.meta.m
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn meta(&self) -> &SensingMeta {
        &self.meta
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.matrix.data()[i * self.meta.n..(i + 1) * self.meta.n]
    }

    /// `max |Phi Phi^T - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.meta.m;
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in i..m {
                let d: f64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    pub(crate) fn measure_slice(&self, x: &[f64]) -> Vec<f64> {
        (0..self.meta.m)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub(crate) fn adjoint_slice(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.meta.n];
        for (i, &yi) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += yi * a;
            }
        }
        out
    }

    /// `y = Phi x`; `x` is flattened row-major and must hold `n` values.
    pub fn measure(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.meta.n {
            return Err(Error::shape("measure", self.meta.n, x.len()));
        }
        Ok(Tensor::from_vec(self.measure_slice(x.data())))
    }

    /// `Phi^T y`, returned with the given signal shape.
    pub fn adjoint(&self, y: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if y.len() != self.meta.m {
            return Err(Error::shape("adjoint", self.meta.m, y.len()));
        }
        Tensor::new(shape.to_vec(), self.adjoint_slice(y.data()))
    }

    /// `r = x - rho Phi^T (Phi x - y)`, shaped like `x`.
    pub fn gradient_step(&self, x: &Tensor, y: &Tensor, rho: f64) -> Result<Tensor> {
        Ok(self.gradient_step_with_residual(x, y, rho)?.0)
    }

    /// Like [`Self::gradient_step`] but also returns `Phi^T (Phi x - y)`,
    /// which the backward pass needs for the step-size gradient.
    pub(crate) fn gradient_step_with_residual(&self, x: &Tensor, y: &Tensor, rho: f64) -> Result<(Tensor, Tensor)> {
        if x.len() != self.meta.n {
            return Err(Error::shape("gradient_step", self.meta.n, x.len()));
        }
        if y.len() != self.meta.m {
            return Err(Error::shape("gradient_step", self.meta.m, y.len()));
        }
        let mut resid = self.measure_slice(x.data());
        for (r, yv) in resid.iter_mut().zip(y.data()) {
            *r -= yv;
        }
        let back = Tensor::new(x.shape().to_vec(), self.adjoint_slice(&resid))?;
        let mut r = x.clone();
        r.axpy(-rho, &back);
        Ok((r, back))
    }

    /// `||Phi x - y||_2`.
    pub fn residual_norm(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let px = self.measure(x)?;
        Ok(px.sub(y).norm())
    }

    /// Writes `<stem>.pavt` (the matrix) and `<stem>.json` (the sidecar).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut buf = Vec::new();
        self.matrix.write_pavt(&mut buf)?;
        fs::write(dir.join(format!("{stem}.pavt")), buf)?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.meta)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: SensingMeta = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
        let bytes = fs::read(dir.join(format!("{stem}.pavt")))?;
        let matrix = Tensor::read_pavt(&mut &bytes[..])?;
        SensingOperator::from_matrix(matrix, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn naive_measure(op: &SensingOperator, x: &[f64]) -> Vec<f64> {
        let (m, n) = (op.m(), op.n());
        let a = op.matrix().data();
        let mut y = vec![0.0; m];
        for i in 0..m {
            for j in 0..n {
                y[i] += a[i * n + j] * x[j];
            }
        }
        y
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn rows_are_orthonormal() {
        for (n, ratio) in [(64, 0.25), (100, 0.1), (49, 0.5), (81, 1.0)] {
            let op = make_sensing(n, ratio, 7).unwrap();
            assert_eq!(op.m(), (ratio * n as f64).round() as usize);
            assert!(op.orthonormality_error() <= 1e-10);
        }
    }

    #[test]
    fn full_ratio_is_orthogonal() {
        let op = make_sensing(36, 1.0, 3).unwrap();
        let a = op.matrix().data();
        for i in 0..36 {
            for j in 0..36 {
                let d: f64 = (0..36).map(|k| a[k * 36 + i] * a[k * 36 + j]).sum();
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((d - t).abs() <= 1e-10);
            }
        }
        let x = Tensor::from_vec(random_vec(36, 1));
        let y = op.measure(&x).unwrap();
        assert!((y.norm() - x.norm()).abs() <= 1e-10);
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = make_sensing(50, 0.3, 99).unwrap();
        let b = make_sensing(50, 0.3, 99).unwrap();
        assert_eq!(a.matrix().data(), b.matrix().data());
        assert_ne!(a.matrix().data(), make_sensing(50, 0.3, 100).unwrap().matrix().data());
    }

    #[test]
    fn ratio_validation() {
        assert!(make_sensing(10, 0.0, 1).is_err());
        assert!(make_sensing(10, 1.5, 1).is_err());
        assert!(make_sensing(10, 0.01, 1).is_err());
    }

    #[test]
    fn measure_matches_naive_loops() {
        let op = make_sensing(30, 0.4, 5).unwrap();
        let x = random_vec(30, 2);
        let y = op.measure(&Tensor::from_vec(x.clone())).unwrap();
        for (a, b) in y.data().iter().zip(naive_measure(&op, &x)) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(op.measure(&Tensor::zeros(&[30])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(op.measure(&Tensor::zeros(&[31])).is_err());
    }

    #[test]
    fn gradient_step_cases() {
        let sq = make_sensing(25, 1.0, 11).unwrap();
        let x_true = Tensor::from_vec(random_vec(25, 3));
        let y = sq.measure(&x_true).unwrap();
        let start = Tensor::from_vec(random_vec(25, 4));
        let r = sq.gradient_step(&start, &y, 1.0).unwrap();
        for (a, b) in r.data().iter().zip(x_true.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let op = make_sensing(40, 0.3, 12).unwrap();
        let x_true = Tensor::from_vec(random_vec(40, 5));
        let y = op.measure(&x_true).unwrap();
        for rho in [0.1, 0.7, 1.3] {
            let r = op.gradient_step(&x_true, &y, rho).unwrap();
            for (a, b) in r.data().iter().zip(x_true.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }

        // dense oracle
        let x = random_vec(40, 6);
        let r = op.gradient_step(&Tensor::from_vec(x.clone()), &y, 0.6).unwrap();
        let mut resid = naive_measure(&op, &x);
        for (rv, yv) in resid.iter_mut().zip(y.data()) {
            *rv -= yv;
        }
        let a = op.matrix().data();
        for j in 0..40 {
            let back: f64 = (0..op.m()).map(|i| a[i * 40 + j] * resid[i]).sum();
            assert!((r.data()[j] - (x[j] - 0.6 * back)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_step_does_not_increase_data_term() {
        let op = make_sensing(60, 0.25, 21).unwrap();
        for seed in 0..20 {
            let x_true = Tensor::from_vec(random_vec(60, 100 + seed));
            let y = op.measure(&x_true).unwrap();
            let x = Tensor::from_vec(random_vec(60, 200 + seed));
            for rho in [0.2, 0.5, 1.0] {
                let r = op.gradient_step(&x, &y, rho).unwrap();
                assert!(op.residual_norm(&r, &y).unwrap() <= op.residual_norm(&x, &y).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let op = make_sensing(20, 0.5, 8).unwrap();
        op.save(dir.path(), "phi").unwrap();
        let back = SensingOperator::load(dir.path(), "phi").unwrap();
        assert_eq!(back, op);
    }
}
