//! Sparse symmetric positive-definite solver: minimum-degree ordering on a
//! block graph plus an up-looking Cholesky factorization.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Upper triangle (row ≤ col) of a symmetric matrix in compressed columns.
#[derive(Debug, Clone)]
pub struct CscUpper {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscUpper {
    /// Builds from `(row, col, value)` triplets; entries below the diagonal
    /// are mirrored, duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &mut [(usize, usize, f64)]) -> Self {
        for t in triplets.iter_mut() {
            if t.0 > t.1 {
                std::mem::swap(&mut t.0, &mut t.1);
            }
        }
        triplets.sort_by_key(|t| (t.1, t.0));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in triplets.iter() {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        Self { n, col_ptr, row_idx, values }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                d[r][c] = self.values[p];
                d[c][r] = self.values[p];
            }
        }
        d
    }
}

/// Minimum-degree elimination order of an undirected graph given as
/// adjacency lists. Returns `order[k] = vertex eliminated k-th`.
pub fn minimum_degree_order(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut adj: Vec<BTreeSet<usize>> = adjacency
        .iter()
        .enumerate()
        .map(|(i, a)| a.iter().copied().filter(|&j| j != i).collect())
        .collect();
    // symmetrize
    for i in 0..n {
        let nb: Vec<usize> = adj[i].iter().copied().collect();
        for j in nb {
            adj[j].insert(i);
        }
    }
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|i| (adj[i].len(), i)).collect();
    let mut order = Vec::with_capacity(n);
    while let Some((_, v)) = queue.pop_first() {
        order.push(v);
        let nb: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nb {
            queue.remove(&(adj[u].len(), u));
            adj[u].remove(&v);
        }
        for (a, &u) in nb.iter().enumerate() {
            for &w in &nb[a + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        for &u in &nb {
            queue.insert((adj[u].len(), u));
        }
    }
    order
}

/// Symbolic analysis shared by every numeric factorization of one pattern.
#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    parent: Vec<Option<usize>>,
    col_ptr: Vec<usize>,
}

fn etree(a: &CscUpper) -> Vec<Option<usize>> {
    let n = a.n;
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for p in a.col_ptr[k]..a.col_ptr[k + 1] {
            let mut i = Some(a.row_idx[p]);
            while let Some(cur) = i {
                if cur >= k {
                    break;
                }
                let next = ancestor[cur];
                ancestor[cur] = Some(k);
                if next.is_none() {
                    parent[cur] = Some(k);
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of L (excluding the diagonal), written to
/// `stack[top..]` in topological order; returns `top`.
fn ereach(
    a: &CscUpper,
    k: usize,
    parent: &[Option<usize>],
    stack: &mut [usize],
    mark: &mut [usize],
    stamp: usize,
) -> usize {
    let n = a.n;
    let mut top = n;
    mark[k] = stamp;
    let mut path = Vec::new();
    for p in a.col_ptr[k]..a.col_ptr[k + 1] {
        let mut i = a.row_idx[p];
        if i > k {
            continue;
        }
        path.clear();
        while mark[i] != stamp {
            path.push(i);
            mark[i] = stamp;
            match parent[i] {
                Some(pi) => i = pi,
                None => break,
            }
        }
        while let Some(v) = path.pop() {
            top -= 1;
            stack[top] = v;
        }
    }
    top
}

impl Symbolic {
    pub fn analyze(a: &CscUpper) -> Self {
        let n = a.n;
        let parent = etree(a);
        let mut counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![usize::MAX; n];
        for k in 0..n {
            let top = ereach(a, k, &parent, &mut stack, &mut mark, k);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            col_ptr[k + 1] = col_ptr[k] + counts[k];
        }
        Self { n, parent, col_ptr }
    }

    pub fn factor_nnz(&self) -> usize {
        self.col_ptr[self.n]
    }
}

/// Lower-triangular Cholesky factor, diagonal stored first in each column.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl Cholesky {
    pub fn factor(sym: &Symbolic, a: &CscUpper) -> Result<Self> {
        let n = a.n;
        if n != sym.n {
            return Err(Error::Parameter("symbolic pattern dimension mismatch".into()));
        }
        let nnz = sym.factor_nnz();
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![0.0f64; nnz];
        let mut next: Vec<usize> = sym.col_ptr[..n].to_vec();
        let mut x = vec![0.0f64; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![usize::MAX; n];
        for k in 0..n {
            let top = ereach(a, k, &sym.parent, &mut stack, &mut mark, k);
            x[k] = 0.0;
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let i = a.row_idx[p];
                if i <= k {
                    x[i] = a.values[p];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / values[sym.col_ptr[i]];
                x[i] = 0.0;
                for p in sym.col_ptr[i] + 1..next[i] {
                    x[row_idx[p]] -= values[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                row_idx[p] = k;
                values[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Parameter(format!(
                    "matrix not positive definite at column {k}"
                )));
            }
            let p = next[k];
            next[k] += 1;
            row_idx[p] = k;
            values[p] = d.sqrt();
        }
        Ok(Self { n, col_ptr: sym.col_ptr.clone(), row_idx, values })
    }

    /// Solves `L Lᵀ x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        for j in 0..self.n {
            let p0 = self.col_ptr[j];
            b[j] /= self.values[p0];
            let bj = b[j];
            for p in p0 + 1..self.col_ptr[j + 1] {
                b[self.row_idx[p]] -= self.values[p] * bj;
            }
        }
        for j in (0..self.n).rev() {
            let p0 = self.col_ptr[j];
            let mut s = b[j];
            for p in p0 + 1..self.col_ptr[j + 1] {
                s -= self.values[p] * b[self.row_idx[p]];
            }
            b[j] = s / self.values[p0];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::new();
        let mut diag = vec![1.0; n];
        for c in 0..n {
            for r in 0..c {
                if rng.random::<f64>() < density {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    t.push((r, c, v));
                    diag[r] += v.abs();
                    diag[c] += v.abs();
                }
            }
        }
        for (i, d) in diag.into_iter().enumerate() {
            t.push((i, i, d));
        }
        t
    }

    #[test]
    fn matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 5, 30, 80] {
            let mut trip = random_spd(n, 0.1, &mut rng);
            let a = CscUpper::from_triplets(n, &mut trip);
            let sym = Symbolic::analyze(&a);
            let l = Cholesky::factor(&sym, &a).unwrap();
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut x = b.clone();
            l.solve_in_place(&mut x);
            let dense = a.to_dense();
            let m = DMatrix::from_fn(n, n, |r, c| dense[r][c]);
            let expect = m.lu().solve(&DVector::from_vec(b)).unwrap();
            for i in 0..n {
                assert!((x[i] - expect[i]).abs() < 1e-10, "n={n} i={i}");
            }
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut t = vec![(0, 0, 1.0), (0, 1, 2.0), (1, 1, 1.0)];
        let a = CscUpper::from_triplets(2, &mut t);
        let sym = Symbolic::analyze(&a);
        assert!(Cholesky::factor(&sym, &a).is_err());
    }

    #[test]
    fn min_degree_is_permutation() {
        // cycle of 6 plus a chord
        let mut adj = vec![Vec::new(); 6];
        for i in 0..6 {
            adj[i].push((i + 1) % 6);
        }
        adj[0].push(3);
        let mut order = minimum_degree_order(&adj);
        order.sort_unstable();
        assert_eq!(order, (0..6).collect::<Vec<_>>());
    }
}
