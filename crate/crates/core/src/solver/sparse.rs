//! Compressed sparse row storage and the direct/iterative kernels used by the
//! golden solver.

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    /// Square matrix from `(row, col, value)` triplets; duplicates are summed
    /// in triplet order so the result is bitwise reproducible.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.row(i).find(|&(c, _)| c == j).map(|(_, v)| v).unwrap_or_else(T::zero)
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = T::zero();
            for (c, v) in self.row(i) {
                acc += v * x[c];
            }
            *yi = acc;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut d = vec![vec![T::zero(); self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(i) {
                row[c] = v;
            }
        }
        d
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| (v - self.get(j, i)).abs() <= tol))
    }
}

/// Reverse Cuthill-McKee ordering: `perm[new] = old`.
pub fn reverse_cuthill_mckee<T: Real>(a: &CsrMatrix<T>) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).filter(|&(c, _)| c != i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(a, seed, &degree);
        let comp_start = order.len();
        visited[start] = true;
        order.push(start);
        let mut head = comp_start;
        let mut nbrs = Vec::new();
        while head < order.len() {
            let u = order[head];
            head += 1;
            nbrs.clear();
            nbrs.extend(a.row(u).map(|(c, _)| c).filter(|&c| !visited[c]));
            nbrs.sort_by_key(|&c| (degree[c], c));
            for &c in &nbrs {
                if !visited[c] {
                    visited[c] = true;
                    order.push(c);
                }
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral<T: Real>(a: &CsrMatrix<T>, seed: usize, degree: &[usize]) -> usize {
    let mut start = seed;
    let mut ecc = 0usize;
    for _ in 0..8 {
        let levels = bfs_levels(a, start);
        let far = levels.iter().copied().filter_map(|l| l).max().unwrap_or(0);
        if far <= ecc && ecc > 0 {
            break;
        }
        ecc = far;
        let next = levels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(far))
            .min_by_key(|&(i, _)| (degree[i], i))
            .map(|(i, _)| i)
            .unwrap_or(start);
        if next == start {
            break;
        }
        start = next;
    }
    start
}

fn bfs_levels<T: Real>(a: &CsrMatrix<T>, start: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; a.dim()];
    level[start] = Some(0);
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        let lu = level[u].unwrap();
        for (c, _) in a.row(u) {
            if level[c].is_none() {
                level[c] = Some(lu + 1);
                queue.push_back(c);
            }
        }
    }
    level
}

/// Envelope (skyline) Cholesky factor `P A Pᵀ = L Lᵀ` of an SPD matrix.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky<T> {
    perm: Vec<usize>,
    first: Vec<usize>,
    offsets: Vec<usize>,
    rows: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite {
    pub pivot: usize,
}

impl<T: Real> EnvelopeCholesky<T> {
    pub fn factor(a: &CsrMatrix<T>) -> Result<Self, NotPositiveDefinite> {
        let n = a.dim();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (new, &old) in perm.iter().enumerate() {
            for (c, _) in a.row(old) {
                let j = inv[c];
                if j < first[new] {
                    first[new] = j;
                }
            }
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + (i - first[i] + 1);
        }
        let mut rows = vec![T::zero(); offsets[n]];
        for (new, &old) in perm.iter().enumerate() {
            for (c, v) in a.row(old) {
                let j = inv[c];
                if j <= new {
                    rows[offsets[new] + j - first[new]] += v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let (head, tail) = rows.split_at_mut(offsets[i]);
                let row_i = &mut tail[..i - fi + 1];
                let dot: T = if j == i {
                    row_i[k0 - fi..j - fi].iter().map(|&v| v * v).sum()
                } else {
                    let row_j = &head[offsets[j]..offsets[j + 1]];
                    row_i[k0 - fi..j - fi]
                        .iter()
                        .zip(&row_j[k0 - fj..j - fj])
                        .map(|(&x, &y)| x * y)
                        .sum()
                };
                let aij = row_i[j - fi] - dot;
                if j == i {
                    if !(aij > T::zero()) {
                        return Err(NotPositiveDefinite { pivot: i });
                    }
                    row_i[j - fi] = aij.sqrt();
                } else {
                    let ljj = head[offsets[j + 1] - 1];
                    row_i[j - fi] = aij / ljj;
                }
            }
        }
        Ok(EnvelopeCholesky { perm, first, offsets, rows })
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.perm.len();
        let mut y: Vec<T> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.rows[self.offsets[i]..self.offsets[i + 1]];
            let dot: T = row[..i - fi].iter().zip(&y[fi..i]).map(|(&l, &v)| l * v).sum();
            y[i] = (y[i] - dot) / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.rows[self.offsets[i]..self.offsets[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (k, &l) in row[..i - fi].iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        let mut x = vec![T::zero(); n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    pub fn envelope_size(&self) -> usize {
        self.rows.len()
    }
}

/// Outcome of a preconditioned conjugate-gradient run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome<T> {
    pub iterations: usize,
    /// `‖D⁻¹ r‖∞` at exit.
    pub residual: T,
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradient; stops when `‖D⁻¹ r‖∞ ≤ tol`.
pub fn pcg_jacobi<T: Real>(
    a: &CsrMatrix<T>,
    b: &[T],
    x: &mut [T],
    tol: T,
    max_iter: usize,
) -> CgOutcome<T> {
    let n = a.dim();
    let inv_diag: Vec<T> = a.diagonal().into_iter().map(|d| T::one() / d).collect();
    let mut r = vec![T::zero(); n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let scaled_norm =
        |r: &[T]| r.iter().zip(&inv_diag).fold(T::zero(), |m, (&ri, &di)| m.max((ri * di).abs()));
    let mut z: Vec<T> = r.iter().zip(&inv_diag).map(|(&ri, &di)| ri * di).collect();
    let mut p = z.clone();
    let mut ap = vec![T::zero(); n];
    let mut rz: T = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
    let mut res = scaled_norm(&r);
    let mut it = 0;
    while res > tol && it < max_iter {
        a.mul_vec(&p, &mut ap);
        let pap: T = p.iter().zip(&ap).map(|(&a, &b)| a * b).sum();
        if pap <= T::zero() {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: T = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
        res = scaled_norm(&r);
    }
    CgOutcome { iterations: it, residual: res, converged: res <= tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> CsrMatrix<f64> {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, t)
    }

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, vec![(0, 1, -0.5), (0, 1, -0.5), (0, 0, 1.0)]);
        assert_eq!(m.get(0, 1), -1.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn cholesky_solves_tridiagonal() {
        let a = laplacian_1d(30);
        let x_true: Vec<f64> = (0..30).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut b = vec![0.0; 30];
        a.mul_vec(&x_true, &mut b);
        let f = EnvelopeCholesky::factor(&a).unwrap();
        let x = f.solve(&b);
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-10);
        }
        // bandwidth one after RCM
        assert!(f.envelope_size() <= 2 * 30);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(EnvelopeCholesky::factor(&a).is_err());
    }

    #[test]
    fn pcg_matches_direct() {
        let a = laplacian_1d(50);
        let b: Vec<f64> = (0..50).map(|i| 1.0 + (i % 3) as f64).collect();
        let direct = EnvelopeCholesky::factor(&a).unwrap().solve(&b);
        let mut x = vec![0.0; 50];
        let out = pcg_jacobi(&a, &b, &mut x, 1e-12, 500);
        assert!(out.converged);
        for (u, v) in x.iter().zip(&direct) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn rcm_is_permutation() {
        let a = laplacian_1d(17);
        let mut p = reverse_cuthill_mckee(&a);
        p.sort();
        assert_eq!(p, (0..17).collect::<Vec<_>>());
    }
}
