use nalgebra::DMatrix;

use super::{NetworkError, NetworkModel};

/// Above this many buses the dense `R`, `X`, `M`, `Z` matrices are not
/// materialized; callers use the column and product routines instead.
pub const DEFAULT_DENSE_THRESHOLD: usize = 2048;

/// Topology-derived quantities of a radial network.
///
/// The descendant matrix `D` (`D[n][m] = 1` iff `m` is in the subtree rooted
/// at `n`) is stored through a depth-first preorder: the subtree of `n` is the
/// contiguous slice `preorder[pos[n] .. pos[n] + size[n]]`. With that,
///
/// * `R = D^T diag(r) D`, so `R[n][i]` is the resistance of the common path
///   from the slack to `n` and `i` (zero if they hang off different slack
///   lines). Same for `X`.
/// * `M = D^T diag(r) (I - 2D) diag(r) + D^T diag(x) (I - 2D) diag(x)`.
/// * `Z[n][i] = |R[n][i] + j X[n][i]|`.
#[derive(Debug, Clone)]
pub struct DerivedTopology {
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    preorder: Vec<usize>,
    pos: Vec<usize>,
    size: Vec<usize>,
    depth: Vec<usize>,
    r: Vec<f64>,
    x: Vec<f64>,
    path_r: Vec<f64>,
    path_x: Vec<f64>,
    dense: Option<DenseMatrices>,
}

#[derive(Debug, Clone)]
pub struct DenseMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

pub fn derive_topology(model: &NetworkModel) -> Result<DerivedTopology, NetworkError> {
    derive_topology_with(model, DEFAULT_DENSE_THRESHOLD)
}

pub fn derive_topology_with(model: &NetworkModel, dense_threshold: usize) -> Result<DerivedTopology, NetworkError> {
    model.validate()?;
    let mut topo = DerivedTopology::build(&model.parent, &model.r, &model.x);
    if topo.n() <= dense_threshold {
        topo.dense = Some(topo.compute_dense());
    }
    Ok(topo)
}

impl DerivedTopology {
    fn build(parent: &[Option<usize>], r: &[f64], x: &[f64]) -> Self {
        let n = parent.len();
        let mut children = vec![Vec::new(); n];
        let mut roots = Vec::new();
        for (k, p) in parent.iter().enumerate() {
            match p {
                Some(p) => children[*p].push(k),
                None => roots.push(k),
            }
        }

        let mut preorder = Vec::with_capacity(n);
        let mut depth = vec![0; n];
        let mut path_r = vec![0.0; n];
        let mut path_x = vec![0.0; n];
        let mut stack: Vec<usize> = roots.iter().rev().copied().collect();
        while let Some(b) = stack.pop() {
            preorder.push(b);
            let (d, pr, px) = match parent[b] {
                Some(p) => (depth[p] + 1, path_r[p], path_x[p]),
                None => (1, 0.0, 0.0),
            };
            depth[b] = d;
            path_r[b] = pr + r[b];
            path_x[b] = px + x[b];
            stack.extend(children[b].iter().rev());
        }
        debug_assert_eq!(preorder.len(), n);

        let mut pos = vec![0; n];
        for (k, &b) in preorder.iter().enumerate() {
            pos[b] = k;
        }
        let mut size = vec![1; n];
        for &b in preorder.iter().rev() {
            if let Some(p) = parent[b] {
                size[p] += size[b];
            }
        }

        DerivedTopology {
            parent: parent.to_vec(),
            children,
            preorder,
            pos,
            size,
            depth,
            r: r.to_vec(),
            x: x.to_vec(),
            path_r,
            path_x,
            dense: None,
        }
    }

    pub fn n(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, n: usize) -> Option<usize> {
        self.parent[n]
    }

    pub fn children(&self, n: usize) -> &[usize] {
        &self.children[n]
    }

    /// Number of lines between the slack and bus `n`.
    pub fn depth(&self, n: usize) -> usize {
        self.depth[n]
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    /// Buses in depth-first preorder; every parent precedes its children.
    pub fn preorder(&self) -> &[usize] {
        &self.preorder
    }

    /// `d(n)`: row `n` of the descendant matrix, `n` first.
    pub fn descendants(&self, n: usize) -> &[usize] {
        &self.preorder[self.pos[n]..self.pos[n] + self.size[n]]
    }

    /// `D[n][m]`: true iff `m` lies in the subtree of `n` (inclusive).
    pub fn is_descendant(&self, n: usize, m: usize) -> bool {
        let (p, q) = (self.pos[n], self.pos[m]);
        p <= q && q < p + self.size[n]
    }

    /// Column `m` of the descendant matrix: `m`, its parent, ..., up to the
    /// bus attached to the slack.
    pub fn ancestors(&self, m: usize) -> Ancestors<'_> {
        Ancestors {
            parent: &self.parent,
            next: Some(m),
        }
    }

    /// Bus directly below the slack on the path to `n`.
    pub fn feeder_head(&self, n: usize) -> usize {
        self.ancestors(n).last().expect("ancestors include n")
    }

    /// Deepest common ancestor of `a` and `b`, if they share any line.
    pub fn lca(&self, mut a: usize, mut b: usize) -> Option<usize> {
        while self.depth[a] > self.depth[b] {
            a = self.parent[a]?;
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b]?;
        }
        while a != b {
            a = self.parent[a]?;
            b = self.parent[b]?;
        }
        Some(a)
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn r_entry(&self, n: usize, i: usize) -> f64 {
        self.lca(n, i).map_or(0.0, |c| self.path_r[c])
    }

    pub fn x_entry(&self, n: usize, i: usize) -> f64 {
        self.lca(n, i).map_or(0.0, |c| self.path_x[c])
    }

    pub fn z_entry(&self, n: usize, i: usize) -> f64 {
        self.lca(n, i).map_or(0.0, |c| self.path_r[c].hypot(self.path_x[c]))
    }

    pub fn m_entry(&self, n: usize, i: usize) -> f64 {
        let own = if self.is_descendant(i, n) {
            self.r[i] * self.r[i] + self.x[i] * self.x[i]
        } else {
            0.0
        };
        own - 2.0 * (self.r[i] * self.r_entry(n, i) + self.x[i] * self.x_entry(n, i))
    }

    /// Fills `out_r[n] = R[n][i]` and `out_x[n] = X[n][i]` for every bus in
    /// the feeder of `i` and returns that feeder's buses (in preorder). Entries
    /// outside the feeder are left untouched; they are zero in `R` and `X`.
    pub fn rx_column_into(&self, i: usize, out_r: &mut [f64], out_x: &mut [f64]) -> &[usize] {
        let feeder = self.descendants(self.feeder_head(i));
        for &n in feeder {
            if self.is_descendant(n, i) {
                out_r[n] = self.path_r[n];
                out_x[n] = self.path_x[n];
            } else {
                let p = self.parent[n].expect("feeder buses below the head have parents");
                out_r[n] = out_r[p];
                out_x[n] = out_x[p];
            }
        }
        feeder
    }

    /// `D v`: subtree sums.
    pub fn subtree_sum(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for &b in self.preorder.iter().rev() {
            if let Some(p) = self.parent[b] {
                out[p] += out[b];
            }
        }
        out
    }

    /// `D^T v`: sums along the path from the slack.
    pub fn path_sum(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for &b in &self.preorder {
            if let Some(p) = self.parent[b] {
                out[b] += out[p];
            }
        }
        out
    }

    /// `R v`.
    pub fn r_mul(&self, v: &[f64]) -> Vec<f64> {
        self.path_sum(&hadamard(&self.r, &self.subtree_sum(v)))
    }

    /// `X v`.
    pub fn x_mul(&self, v: &[f64]) -> Vec<f64> {
        self.path_sum(&hadamard(&self.x, &self.subtree_sum(v)))
    }

    /// `M v`.
    pub fn m_mul(&self, v: &[f64]) -> Vec<f64> {
        let part = |w: &[f64]| {
            let u = hadamard(w, v);
            let du = self.subtree_sum(&u);
            let t: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a - 2.0 * b).collect();
            self.path_sum(&hadamard(w, &t))
        };
        let a = part(&self.r);
        let b = part(&self.x);
        a.iter().zip(&b).map(|(a, b)| a + b).collect()
    }

    /// Real and imaginary parts of `(D - I) diag(z) v` for real `v`.
    pub fn strict_subtree_impedance_sum(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rv = hadamard(&self.r, v);
        let xv = hadamard(&self.x, v);
        let sr = self.subtree_sum(&rv);
        let sx = self.subtree_sum(&xv);
        (
            sr.iter().zip(&rv).map(|(s, o)| s - o).collect(),
            sx.iter().zip(&xv).map(|(s, o)| s - o).collect(),
        )
    }

    pub fn dense(&self) -> Option<&DenseMatrices> {
        self.dense.as_ref()
    }

    /// Dense `R`, `X`, `M`, `Z` regardless of the threshold.
    pub fn compute_dense(&self) -> DenseMatrices {
        let n = self.n();
        let mut r = DMatrix::zeros(n, n);
        let mut x = DMatrix::zeros(n, n);
        let mut m = DMatrix::zeros(n, n);
        let mut z = DMatrix::zeros(n, n);
        let mut cr = vec![0.0; n];
        let mut cx = vec![0.0; n];
        for i in 0..n {
            cr.iter_mut().for_each(|v| *v = 0.0);
            cx.iter_mut().for_each(|v| *v = 0.0);
            self.rx_column_into(i, &mut cr, &mut cx);
            let own = self.r[i] * self.r[i] + self.x[i] * self.x[i];
            for k in 0..n {
                r[(k, i)] = cr[k];
                x[(k, i)] = cx[k];
                z[(k, i)] = cr[k].hypot(cx[k]);
                let diag = if self.is_descendant(i, k) { own } else { 0.0 };
                m[(k, i)] = diag - 2.0 * (self.r[i] * cr[k] + self.x[i] * cx[k]);
            }
        }
        DenseMatrices { r, x, m, z }
    }

    /// Dense 0/1 descendant matrix. Test and small-case use only.
    pub fn descendant_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |a, b| if self.is_descendant(a, b) { 1.0 } else { 0.0 })
    }
}

pub struct Ancestors<'a> {
    parent: &'a [Option<usize>],
    next: Option<usize>,
}

impl Iterator for Ancestors<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let cur = self.next?;
        self.next = self.parent[cur];
        Some(cur)
    }
}

pub(crate) fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a * b).collect()
}
