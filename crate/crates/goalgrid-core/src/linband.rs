//! Banded LU factorization with partial pivoting.
//!
//! The implicit backward-Euler systems couple each cell to its grid neighbors
//! only, so in row-major cell order the matrix has bandwidth `n2 + 1` (one
//! wealth axis: bandwidth 1). LAPACK-style band storage with `kl` extra rows
//! absorbs the fill-in caused by row interchanges.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
#[error("singular linear system at column {col}")]
pub struct SingularMatrix {
    pub col: usize,
}

/// Band matrix `A[i][j]` defined for `|i - j| <= kl` (sub) / `ku` (super).
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        BandMatrix {
            n,
            kl,
            ku,
            ldab,
            ab: vec![0.0; n * ldab],
        }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        // Row `kl + ku + i - j` of column `j`; the top `kl` rows hold fill-in.
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.ab[self.slot(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j + self.kl >= i && i + self.ku >= j, "entry outside band");
        let s = self.slot(i, j);
        self.ab[s] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j + self.kl >= i && i + self.ku >= j, "entry outside band");
        let s = self.slot(i, j);
        self.ab[s] += v;
    }

    pub fn reset(&mut self) {
        self.ab.fill(0.0);
    }

    /// `A x` for a residual check; only assembled bands contribute.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let jlo = i.saturating_sub(self.kl);
            let jhi = (i + self.ku).min(self.n - 1);
            let mut acc = 0.0;
            for j in jlo..=jhi {
                acc += self.get(i, j) * x[j];
            }
            out[i] = acc;
        }
    }

    /// In-place LU with partial pivoting (unblocked band algorithm).
    pub fn factor(mut self) -> Result<BandLu, SingularMatrix> {
        let (n, kl, kv) = (self.n, self.kl, self.kl + self.ku);
        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            let imax = (j + kl).min(n - 1);
            let mut p = j;
            let mut best = self.get(j, j).abs();
            for i in j + 1..=imax {
                // Subdiagonal entries within the original band (fill-in never
                // extends below row j + kl in column j).
                let a = self.ab[self.slot(i, j)].abs();
                if a > best {
                    best = a;
                    p = i;
                }
            }
            if best == 0.0 {
                return Err(SingularMatrix { col: j });
            }
            ipiv[j] = p;
            let khi = (j + kv).min(n - 1);
            if p != j {
                for k in j..=khi {
                    let (sj, sp) = (self.slot(j, k), self.slot(p, k));
                    self.ab.swap(sj, sp);
                }
            }
            let pivot = self.ab[self.slot(j, j)];
            for i in j + 1..=imax {
                let sij = self.slot(i, j);
                let l = self.ab[sij] / pivot;
                self.ab[sij] = l;
                if l != 0.0 {
                    for k in j + 1..=khi {
                        let u = self.ab[self.slot(j, k)];
                        if u != 0.0 {
                            let sik = self.slot(i, k);
                            self.ab[sik] -= l * u;
                        }
                    }
                }
            }
        }
        Ok(BandLu { mat: self, ipiv })
    }
}

/// Factored form; `solve_in_place` applies `P A = L U` to a right-hand side.
#[derive(Debug, Clone)]
pub struct BandLu {
    mat: BandMatrix,
    ipiv: Vec<usize>,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let m = &self.mat;
        let (n, kl, kv) = (m.n, m.kl, m.kl + m.ku);
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let bj = b[j];
            if bj != 0.0 {
                let imax = (j + kl).min(n - 1);
                for i in j + 1..=imax {
                    b[i] -= m.ab[m.slot(i, j)] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            let x = b[j] / m.ab[m.slot(j, j)];
            b[j] = x;
            if x != 0.0 {
                let ilo = j.saturating_sub(kv);
                for i in ilo..j {
                    b[i] -= m.ab[m.slot(i, j)] * x;
                }
            }
        }
    }
}
