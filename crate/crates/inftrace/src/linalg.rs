//! Dense symmetric matrices and an LDL^T factorization, sized for the
//! damped-Hessian systems the influence math solves (P capped at 4096).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Dimension(format!(
                "{} entries for a {n}x{n} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += value;
        }
    }

    pub fn matvec(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            out[i] = row.iter().zip(v).map(|(a, x)| a * x).sum();
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        worst
    }

    pub fn symmetrize(&mut self) {
        for i in 0..self.n {
            for j in 0..i {
                let avg = 0.5 * (self.at(i, j) + self.at(j, i));
                *self.at_mut(i, j) = avg;
                *self.at_mut(j, i) = avg;
            }
        }
    }
}

/// LDL^T factorization of a symmetric matrix, no pivoting. The systems we
/// factor are damped (H + lambda I with lambda > 0), which keeps pivots away
/// from zero; a vanishing pivot is reported as a singularity so callers can
/// raise the damping.
#[derive(Debug)]
pub struct LdltFactor {
    n: usize,
    /// Unit lower triangle, packed in a full row-major square.
    l: Vec<f64>,
    d: Vec<f64>,
}

pub fn ldlt(m: &DenseMatrix) -> Result<LdltFactor> {
    let n = m.n();
    let mut l = vec![0.0; n * n];
    let mut d = vec![0.0; n];
    let scale = (0..n)
        .map(|i| m.at(i, i).abs())
        .fold(1.0f64, f64::max);
    let tiny = scale * 1e-14;
    for j in 0..n {
        let mut dj = m.at(j, j);
        for k in 0..j {
            dj -= l[j * n + k] * l[j * n + k] * d[k];
        }
        if dj.abs() <= tiny || !dj.is_finite() {
            return Err(Error::SingularHessian {
                column: j,
                pivot: dj,
            });
        }
        d[j] = dj;
        l[j * n + j] = 1.0;
        for i in j + 1..n {
            let mut acc = m.at(i, j);
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k] * d[k];
            }
            l[i * n + j] = acc / dj;
        }
    }
    Ok(LdltFactor { n, l, d })
}

impl LdltFactor {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        // L y = b
        for i in 0..n {
            let mut acc = x[i];
            for k in 0..i {
                acc -= self.l[i * n + k] * x[k];
            }
            x[i] = acc;
        }
        // D z = y
        for i in 0..n {
            x[i] /= self.d[i];
        }
        // L^T x = z
        for i in (0..n).rev() {
            let mut acc = x[i];
            for k in i + 1..n {
                acc -= self.l[k * n + i] * x[k];
            }
            x[i] = acc;
        }
        x
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
