use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major square matrix, sized for small state spaces (M <= 32).
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> SquareMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![T::zero(); n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidModel(format!(
                    "row {} has {} entries, expected {}",
                    i + 1,
                    row.len(),
                    n
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn scale(&self, s: T) -> Self {
        Self { n: self.n, data: self.data.iter().map(|&x| x * s).collect() }
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.n, rhs.n);
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == T::zero() {
                    continue;
                }
                let rr = &rhs.data[k * n..(k + 1) * n];
                let or = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    or[j] += a * rr[j];
                }
            }
        }
        out
    }

    /// `out_i = sum_j self[j][i] * v_j`; the adjoint action a row-stochastic
    /// transition matrix applies to a distribution over states. Writes into
    /// `out` so per-stage integrator calls allocate nothing.
    pub fn transpose_apply(&self, v: &[T], out: &mut [T]) {
        assert_eq!(v.len(), self.n);
        assert_eq!(out.len(), self.n);
        let n = self.n;
        out.fill(T::zero());
        for j in 0..n {
            let vj = v[j];
            if vj == T::zero() {
                continue;
            }
            let rr = &self.data[j * n..(j + 1) * n];
            for i in 0..n {
                out[i] += rr[i] * vj;
            }
        }
    }

    /// Maximum absolute row sum.
    pub fn inf_norm(&self) -> T {
        let mut best = T::zero();
        for i in 0..self.n {
            let s = self.row(i).iter().fold(T::zero(), |acc, &x| acc + x.abs());
            if s > best {
                best = s;
            }
        }
        best
    }

    /// Matrix exponential by scaling-and-squaring with a truncated Taylor
    /// series. The scaled norm is held at or below 1/2, and the series is cut
    /// only once the rigorous remainder bound
    /// `||B||^(k+1) / ((k+1)! (1 - ||B||/(k+2)))` falls below the target, so
    /// the truncation error is controlled, not guessed.
    pub fn expm(&self) -> Self {
        let n = self.n;
        let norm = self.inf_norm().as_f64();
        assert!(norm.is_finite(), "matrix exponential of a non-finite matrix");
        if norm == 0.0 {
            return Self::identity(n);
        }
        let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
        let b = self.scale(T::of((0.5f64).powi(squarings as i32)));
        let bnorm = norm * (0.5f64).powi(squarings as i32);

        let target = T::epsilon().as_f64() * 0.25;
        let mut sum = Self::identity(n);
        let mut term = Self::identity(n);
        let mut bound = 1.0f64; // ||B||^k / k! running majorant
        for k in 1..200u32 {
            term = term.matmul(&b);
            let inv_k = T::of(1.0 / f64::from(k));
            for x in term.data.iter_mut() {
                *x = *x * inv_k;
            }
            for (s, t) in sum.data.iter_mut().zip(term.data.iter()) {
                *s += *t;
            }
            bound *= bnorm / f64::from(k);
            let tail = bound * bnorm / f64::from(k + 1) / (1.0 - bnorm / f64::from(k + 2));
            if tail < target {
                break;
            }
        }
        let mut result = sum;
        for _ in 0..squarings {
            result = result.matmul(&result);
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle for generator matrices: uniformization. With
    /// `L = max_i |a_ii|` and the stochastic matrix `P = I + A/L`,
    /// `e^A = sum_k e^{-L} L^k / k! * P^k`. Every term is nonnegative, so the
    /// sum accumulates without cancellation; it shares no code with `expm`.
    fn uniformization_expm(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let l = a.iter().enumerate().map(|(i, row)| -row[i]).fold(0.0f64, f64::max);
        assert!(l > 0.0);
        let mut p = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                p[i][j] = a[i][j] / l + if i == j { 1.0 } else { 0.0 };
            }
        }
        let mut sum = vec![vec![0.0; n]; n];
        let mut pk = vec![vec![0.0; n]; n];
        for i in 0..n {
            pk[i][i] = 1.0;
        }
        let mut weight = (-l).exp();
        let mut covered = 0.0;
        for k in 0..400u32 {
            if k > 0 {
                weight *= l / f64::from(k);
                let mut next = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for m in 0..n {
                        for j in 0..n {
                            next[i][j] += pk[i][m] * p[m][j];
                        }
                    }
                }
                pk = next;
            }
            for i in 0..n {
                for j in 0..n {
                    sum[i][j] += weight * pk[i][j];
                }
            }
            covered += weight;
            if 1.0 - covered < 1e-16 {
                break;
            }
        }
        sum
    }

    #[test]
    fn expm_zero_is_identity() {
        let m = SquareMatrix::<f64>::zeros(3).expm();
        assert_eq!(m, SquareMatrix::identity(3));
    }

    #[test]
    fn expm_matches_uniformization_oracle_symmetric_two_state() {
        let a = vec![vec![-0.5, 0.5], vec![0.5, -0.5]];
        let m = SquareMatrix::from_rows(&a).unwrap().expm();
        let oracle = uniformization_expm(&a);
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.get(i, j) - oracle[i][j]).abs() < 1e-14);
            }
        }
        // closed form for the symmetric 2-state generator at rate 1/2, t = 1
        let p11 = 0.5 * (1.0 + (-1.0f64).exp());
        assert!((m.get(0, 0) - p11).abs() < 1e-14);
    }

    #[test]
    fn expm_matches_uniformization_oracle_stiff_three_state() {
        // rates large enough to force several squarings
        let a = vec![
            vec![-12.0, 7.0, 5.0],
            vec![2.0, -6.0, 4.0],
            vec![9.0, 1.0, -10.0],
        ];
        let m = SquareMatrix::from_rows(&a).unwrap().expm();
        let oracle = uniformization_expm(&a);
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (m.get(i, j) - oracle[i][j]).abs() < 1e-12,
                    "({i},{j}): {} vs {}",
                    m.get(i, j),
                    oracle[i][j]
                );
            }
        }
    }

    #[test]
    fn transpose_apply_matches_manual() {
        let m = SquareMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mut out = vec![0.0; 2];
        m.transpose_apply(&[10.0, 100.0], &mut out);
        assert_eq!(out, vec![310.0, 420.0]);
    }
}
