//! LU factorization with partial pivoting and a Hager-Higham estimate of
//! the 1-norm condition number.

use super::Tensor;

/// `P·A = L·U`, stored packed: strict lower triangle holds `L` (unit
/// diagonal implied), upper triangle holds `U`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    packed: Vec<f64>,
    /// `perm[i]` is the row of `A` that ended up in row `i`.
    perm: Vec<usize>,
}

impl Lu {
    /// Returns `None` when a pivot is exactly zero or non-finite.
    pub fn factor(a: &Tensor) -> Option<Self> {
        let n = a.rows();
        debug_assert_eq!(n, a.cols());
        let mut m = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) =
                (k..n)
                    .map(|i| (i, m[i * n + k].abs()))
                    .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot == 0.0 || !pivot.is_finite() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    m.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let d = m[k * n + k];
            for i in k + 1..n {
                let f = m[i * n + k] / d;
                m[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        m[i * n + j] -= f * m[k * n + j];
                    }
                }
            }
        }
        Some(Self { n, packed: m, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A·X = B` column by column.
    pub fn solve(&self, b: &Tensor) -> Tensor {
        let n = self.n;
        let m = b.cols();
        debug_assert_eq!(b.rows(), n);
        let mut x = vec![0.0; n * m];
        for (i, &src) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(b.row(src));
        }
        // L·y = P·b
        for i in 0..n {
            for k in 0..i {
                let l = self.packed[i * n + k];
                if l != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= l * x[k * m + c];
                    }
                }
            }
        }
        // U·x = y
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.packed[i * n + k];
                if u != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= u * x[k * m + c];
                    }
                }
            }
            let d = self.packed[i * n + i];
            for c in 0..m {
                x[i * m + c] /= d;
            }
        }
        Tensor::matrix(n, m, x)
    }

    /// Solves `Aᵀ·X = B`.
    pub fn solve_transpose(&self, b: &Tensor) -> Tensor {
        let n = self.n;
        let m = b.cols();
        debug_assert_eq!(b.rows(), n);
        let mut w = b.data().to_vec();
        // Uᵀ·w = b (forward)
        for i in 0..n {
            for k in 0..i {
                let u = self.packed[k * n + i];
                if u != 0.0 {
                    for c in 0..m {
                        w[i * m + c] -= u * w[k * m + c];
                    }
                }
            }
            let d = self.packed[i * n + i];
            for c in 0..m {
                w[i * m + c] /= d;
            }
        }
        // Lᵀ·v = w (backward)
        for i in (0..n).rev() {
            for k in i + 1..n {
                let l = self.packed[k * n + i];
                if l != 0.0 {
                    for c in 0..m {
                        w[i * m + c] -= l * w[k * m + c];
                    }
                }
            }
        }
        // x = Pᵀ·v
        let mut x = vec![0.0; n * m];
        for (i, &dst) in self.perm.iter().enumerate() {
            x[dst * m..(dst + 1) * m].copy_from_slice(&w[i * m..(i + 1) * m]);
        }
        Tensor::matrix(n, m, x)
    }

    /// Lower-bound estimate of `‖A⁻¹‖₁` (Hager's method with Higham's
    /// alternating-sign safeguard, plus a pivot bound). Uses a handful of
    /// solves, no inverse. Infinite when a solve overflows.
    pub fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 0.0;
        }
        let mut x = Tensor::full(n, 1, 1.0 / n as f64);
        let mut est = 0.0;
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let y = self.solve(&x);
            let cur = y.data().iter().map(|v| v.abs()).sum::<f64>();
            if !cur.is_finite() {
                return f64::INFINITY;
            }
            est = f64::max(est, cur);
            let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let z = self.solve_transpose(&xi);
            let (j, zmax) =
                z.data().iter().enumerate().fold((0, -1.0), |b, (i, v)| if v.abs() > b.1 { (i, v.abs()) } else { b });
            let ztx: f64 = z.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            if zmax <= ztx || j == last_j {
                break;
            }
            last_j = j;
            x = Tensor::zeros(n, 1);
            x.set(j, 0, 1.0);
        }
        let alt = Tensor::matrix(
            n,
            1,
            (0..n)
                .map(|i| {
                    let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                    s * (1.0 + i as f64 / (n.max(2) - 1) as f64)
                })
                .collect(),
        );
        let alt_est = 2.0 * self.solve(&alt).data().iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
        // U⁻¹ = A⁻¹·Pᵀ·L and ‖L‖₁ ≤ n, so every pivot bounds ‖A⁻¹‖₁ from
        // below. Catches isolated tiny pivots the iteration can step past.
        let pivot_bound = (0..n).map(|i| 1.0 / self.packed[i * n + i].abs()).fold(0.0, f64::max) / n as f64;
        if !alt_est.is_finite() {
            return f64::INFINITY;
        }
        est.max(alt_est).max(pivot_bound)
    }
}

pub fn norm1(a: &Tensor) -> f64 {
    let (r, c) = (a.rows(), a.cols());
    (0..c).map(|j| (0..r).map(|i| a.get(i, j).abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Estimated 1-norm condition number of the factored matrix `a`.
pub fn condition_estimate(a: &Tensor, lu: &Lu) -> f64 {
    norm1(a) * lu.inverse_norm1_estimate()
}
