//! Small dense linear-algebra helpers shared by the solvers.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Cholesky factorization A = R^T R of a small symmetric positive-definite
/// matrix, with incremental column append / removal.
///
/// R is stored densely as upper-triangular rows. Append runs a forward
/// substitution against the existing factor; removal deletes a column and
/// restores triangularity with Givens rotations.
#[derive(Debug, Clone)]
pub(crate) struct Cholesky {
    n: usize,
    // r[i][j] for j >= i; rows padded to length n.
    r: Vec<Vec<f64>>,
}

impl Cholesky {
    pub fn empty() -> Self {
        Cholesky { n: 0, r: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Factorizes a full matrix given by its entries. Returns `None` when a
    /// pivot falls below `min_pivot` (matrix not numerically SPD).
    pub fn from_gram(n: usize, entry: impl Fn(usize, usize) -> f64, min_pivot: f64) -> Option<Self> {
        let mut chol = Cholesky::empty();
        for k in 0..n {
            let col: Vec<f64> = (0..k).map(|i| entry(i, k)).collect();
            if !chol.try_append(&col, entry(k, k), min_pivot) {
                return None;
            }
        }
        Some(chol)
    }

    /// Appends one column: `col` holds the new off-diagonal Gram entries
    /// against the existing columns, `diag` the new diagonal entry. Returns
    /// false (leaving the factor untouched) when the pivot is below
    /// `min_pivot`.
    pub fn try_append(&mut self, col: &[f64], diag: f64, min_pivot: f64) -> bool {
        debug_assert_eq!(col.len(), self.n);
        // Solve R^T r = col by forward substitution.
        let mut r = col.to_vec();
        for i in 0..self.n {
            let mut v = r[i];
            for k in 0..i {
                v -= self.r[k][i] * r[k];
            }
            r[i] = v / self.r[i][i];
        }
        let rho2 = diag - dot(&r, &r);
        if rho2 <= min_pivot {
            return false;
        }
        for (i, row) in self.r.iter_mut().enumerate() {
            row.push(r[i]);
        }
        r.push(rho2.sqrt());
        // New row has zeros below the diagonal position by construction.
        let mut new_row = vec![0.0; self.n + 1];
        new_row[self.n] = r[self.n];
        self.r.push(new_row);
        self.n += 1;
        true
    }

    /// Removes column `k`, re-triangularizing the trailing block.
    pub fn remove(&mut self, k: usize) {
        debug_assert!(k < self.n);
        for row in self.r.iter_mut() {
            row.remove(k);
        }
        self.n -= 1;
        // Rows k.. now have one subdiagonal entry each; chase them with Givens.
        for j in k..self.n {
            let (a, b) = (self.r[j][j], self.r[j + 1][j]);
            let h = a.hypot(b);
            if h == 0.0 {
                continue;
            }
            let (c, s) = (a / h, b / h);
            for col in j..self.n {
                let (x, y) = (self.r[j][col], self.r[j + 1][col]);
                self.r[j][col] = c * x + s * y;
                self.r[j + 1][col] = -s * x + c * y;
            }
            self.r[j + 1][j] = 0.0;
        }
        self.r.pop();
    }

    /// Solves A x = b via the factor (two triangular solves).
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.n);
        let mut y = b.to_vec();
        for i in 0..self.n {
            let mut v = y[i];
            for k in 0..i {
                v -= self.r[k][i] * y[k];
            }
            y[i] = v / self.r[i][i];
        }
        for i in (0..self.n).rev() {
            let mut v = y[i];
            for k in i + 1..self.n {
                v -= self.r[i][k] * y[k];
            }
            y[i] = v / self.r[i][i];
        }
        y
    }

    pub fn min_diag(&self) -> f64 {
        (0..self.n).map(|i| self.r[i][i]).fold(f64::INFINITY, f64::min)
    }
}

/// Gaussian elimination with partial pivoting for small systems.
/// Returns `None` on a (numerically) singular matrix.
pub(crate) fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert!(a.len() == n && a.iter().all(|row| row.len() == n));
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-13 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row][j] -= f * a[col][j];
            }
            b[row] -= f * b[col];
        }
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for j in i + 1..n {
            v -= a[i][j] * b[j];
        }
        b[i] = v / a[i][i];
    }
    Some(b)
}
