//! Sparse symmetric indefinite `LDLᵀ` factorization for KKT matrices.
//!
//! The matrix is expected in full symmetric storage with the primal
//! variables first and the constraint rows (structurally zero diagonal)
//! after them. The analysis phase pairs every constraint row with a primal
//! variable through a bipartite matching, orders the resulting 1×1 and 2×2
//! supernodes by reverse Cuthill–McKee with dense nodes moved to the end,
//! and sizes a row envelope. The numeric phase is a left-looking profile
//! factorization with block pivots on the symmetrically equilibrated
//! matrix; a vanishing 1×1 pivot is merged with its successor into a 2×2
//! block when both are free.

use std::collections::VecDeque;

use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdlOptions {
    /// Pivots of the equilibrated matrix below this magnitude count as zero.
    pub pivot_tol: f64,
    pub refinement_steps: usize,
}

impl Default for LdlOptions {
    fn default() -> Self {
        LdlOptions {
            pivot_tol: 1e-12,
            refinement_steps: 3,
        }
    }
}

/// Ordering, static pivot pairs and envelope of one sparsity pattern.
#[derive(Debug, Clone)]
pub struct SymbolicLdl {
    n: usize,
    /// New position to original index.
    perm: Vec<usize>,
    /// Original index to new position.
    iperm: Vec<usize>,
    /// `pair[r]` is true when rows `r` and `r + 1` form a static 2×2 block.
    pair: Vec<bool>,
    first: Vec<usize>,
    row_ptr: Vec<usize>,
    /// `can_merge[r]`: rows `r` and `r + 1` may be joined into a 2×2 pivot
    /// during factorization without breaking any later envelope.
    can_merge: Vec<bool>,
    dense_nodes: usize,
}

impl SymbolicLdl {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored off-diagonal factor entries.
    pub fn envelope_size(&self) -> usize {
        self.row_ptr[self.n]
    }

    pub fn num_static_pairs(&self) -> usize {
        self.pair.iter().filter(|p| **p).count()
    }

    pub fn num_dense_nodes(&self) -> usize {
        self.dense_nodes
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn matches_pattern(&self, a: &CsrMatrix) -> bool {
        if a.nrows() != self.n || a.ncols() != self.n {
            return false;
        }
        (0..self.n).all(|i| {
            let r = self.iperm[i];
            a.row(i).all(|(j, _)| {
                let c = self.iperm[j];
                c >= r || c >= self.first[r]
            })
        })
    }
}

/// Builds the symbolic analysis. `num_primal` leading indices are primal
/// variables; the rest are constraint rows to be paired.
pub fn analyze(a: &CsrMatrix, num_primal: usize) -> SymbolicLdl {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "KKT matrix must be square");
    assert!(num_primal <= n);
    let scale = equilibrate(a);

    let degree: Vec<usize> = (0..n)
        .map(|i| a.row(i).filter(|&(j, _)| j != i).count())
        .collect();
    let dense_limit = 64usize.max((2.0 * (n as f64).sqrt()) as usize);
    let dense: Vec<bool> = degree.iter().map(|&d| d > dense_limit).collect();

    let mate = match_constraints(a, num_primal, &dense, &scale);

    // Supernodes: each matched (variable, constraint) pair, then singles.
    let mut node_of = vec![usize::MAX; n];
    let mut members: Vec<[usize; 2]> = Vec::with_capacity(n);
    let mut is_pair: Vec<bool> = Vec::with_capacity(n);
    for c in num_primal..n {
        if let Some(v) = mate[c] {
            node_of[v] = members.len();
            node_of[c] = members.len();
            members.push([v, c]);
            is_pair.push(true);
        }
    }
    for i in 0..n {
        if node_of[i] == usize::MAX {
            node_of[i] = members.len();
            members.push([i, i]);
            is_pair.push(false);
        }
    }
    let ns = members.len();
    let node_members = |s: usize| -> &[usize] {
        if is_pair[s] {
            &members[s][..]
        } else {
            &members[s][..1]
        }
    };

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); ns];
    for (s, list) in adj.iter_mut().enumerate() {
        for &i in node_members(s) {
            for (j, _) in a.row(i) {
                let t = node_of[j];
                if t != s {
                    list.push(t);
                }
            }
        }
        list.sort_unstable();
        list.dedup();
    }
    let node_dense: Vec<bool> = (0..ns)
        .map(|s| node_members(s).iter().any(|&i| dense[i]))
        .collect();

    let mut order = reverse_cuthill_mckee(&adj, &node_dense);
    let mut tail: Vec<usize> = (0..ns).filter(|&s| node_dense[s]).collect();
    tail.sort_by_key(|&s| (adj[s].len(), s));
    order.extend(tail);

    let mut perm = Vec::with_capacity(n);
    let mut pair = Vec::with_capacity(n);
    for &s in &order {
        let m = node_members(s);
        perm.extend_from_slice(m);
        pair.push(m.len() == 2);
        if m.len() == 2 {
            pair.push(false);
        }
    }
    let mut iperm = vec![0; n];
    for (r, &i) in perm.iter().enumerate() {
        iperm[i] = r;
    }

    let dense_nodes = perm.iter().filter(|&&i| dense[i]).count();
    let (first, row_ptr) = envelope(a, &perm, &iperm, &pair);
    let mut can_merge: Vec<bool> = (0..n)
        .map(|r| r + 1 < n && !pair[r] && !pair[r + 1] && first[r + 1] <= r)
        .collect();
    for (s, &f) in first.iter().enumerate() {
        if f > 0 && f < s {
            can_merge[f - 1] = false;
        }
    }
    SymbolicLdl {
        n,
        perm,
        iperm,
        pair,
        first,
        row_ptr,
        can_merge,
        dense_nodes,
    }
}

/// Maximum matching of constraint rows to primal variables, preferring
/// sparse variables with a vanishing diagonal, then other sparse variables,
/// then dense ones; within a tier larger coupling entries come first.
fn match_constraints(
    a: &CsrMatrix,
    num_primal: usize,
    dense: &[bool],
    scale: &[f64],
) -> Vec<Option<usize>> {
    let n = a.nrows();
    let tier = |v: usize| -> usize {
        if dense[v] {
            2
        } else if (scale[v] * scale[v] * a.get(v, v)).abs() <= 1e-10 {
            0
        } else {
            1
        }
    };
    let cands: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|c| {
            if c < num_primal {
                return Vec::new();
            }
            let mut list: Vec<(usize, usize, f64)> = a
                .row(c)
                .filter(|&(v, x)| v < num_primal && x != 0.0)
                .map(|(v, x)| (tier(v), v, (scale[c] * x * scale[v]).abs()))
                .collect();
            list.sort_by(|p, q| p.0.cmp(&q.0).then(q.2.total_cmp(&p.2)).then(p.1.cmp(&q.1)));
            list.into_iter().map(|(t, v, _)| (t, v)).collect()
        })
        .collect();

    let mut mate: Vec<Option<usize>> = vec![None; n];
    let mut owner: Vec<Option<usize>> = vec![None; num_primal];
    let mut visited = vec![usize::MAX; num_primal];
    let mut stamp = 0;
    for max_tier in 0..3 {
        for c in num_primal..n {
            if mate[c].is_some() {
                continue;
            }
            if let Some(&(_, v)) = cands[c]
                .iter()
                .find(|&&(t, v)| t <= max_tier && owner[v].is_none())
            {
                mate[c] = Some(v);
                owner[v] = Some(c);
            }
        }
        for c in num_primal..n {
            if mate[c].is_none() {
                augment(c, max_tier, &cands, &mut mate, &mut owner, &mut visited, stamp);
                stamp += 1;
            }
        }
    }
    mate
}

/// Iterative augmenting-path search from the unmatched constraint `root`.
fn augment(
    root: usize,
    max_tier: usize,
    cands: &[Vec<(usize, usize)>],
    mate: &mut [Option<usize>],
    owner: &mut [Option<usize>],
    visited: &mut [usize],
    stamp: usize,
) -> bool {
    // Stack of (constraint, next candidate position, variable taken).
    let mut stack: Vec<(usize, usize, usize)> = vec![(root, 0, usize::MAX)];
    while let Some(top) = stack.last_mut() {
        let (c, pos) = (top.0, top.1);
        let next = cands[c][pos..]
            .iter()
            .position(|&(t, v)| t <= max_tier && visited[v] != stamp);
        match next {
            None => {
                stack.pop();
            }
            Some(off) => {
                let v = cands[c][pos + off].1;
                top.1 = pos + off + 1;
                top.2 = v;
                visited[v] = stamp;
                match owner[v] {
                    None => {
                        for &(c, _, v) in stack.iter().rev() {
                            mate[c] = Some(v);
                            owner[v] = Some(c);
                        }
                        return true;
                    }
                    Some(c2) => stack.push((c2, 0, usize::MAX)),
                }
            }
        }
    }
    false
}

/// Reverse Cuthill–McKee over the non-dense nodes of a graph.
fn reverse_cuthill_mckee(adj: &[Vec<usize>], skip: &[bool]) -> Vec<usize> {
    let n = adj.len();
    let deg: Vec<usize> = (0..n)
        .map(|s| adj[s].iter().filter(|&&t| !skip[t]).count())
        .collect();
    let mut placed = skip.to_vec();
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).filter(|&s| !skip[s]).collect();
    by_degree.sort_by_key(|&s| (deg[s], s));
    let mut queue = VecDeque::new();
    let mut level = vec![usize::MAX; n];
    for &seed in &by_degree {
        if placed[seed] {
            continue;
        }
        let start = pseudo_peripheral(seed, adj, skip, &deg, &mut level);
        placed[start] = true;
        queue.push_back(start);
        let mut nbrs = Vec::new();
        while let Some(s) = queue.pop_front() {
            order.push(s);
            nbrs.clear();
            nbrs.extend(adj[s].iter().copied().filter(|&t| !placed[t]));
            nbrs.sort_by_key(|&t| (deg[t], t));
            for &t in &nbrs {
                placed[t] = true;
                queue.push_back(t);
            }
        }
    }
    order.reverse();
    order
}

/// Repeated breadth-first search towards a node of maximal eccentricity.
fn pseudo_peripheral(
    seed: usize,
    adj: &[Vec<usize>],
    skip: &[bool],
    deg: &[usize],
    level: &mut [usize],
) -> usize {
    let mut start = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let (last_level, height) = bfs_levels(start, adj, skip, level);
        let best = last_level
            .into_iter()
            .min_by_key(|&t| (deg[t], t))
            .unwrap_or(start);
        if height <= ecc {
            break;
        }
        ecc = height;
        start = best;
    }
    start
}

fn bfs_levels(
    start: usize,
    adj: &[Vec<usize>],
    skip: &[bool],
    level: &mut [usize],
) -> (Vec<usize>, usize) {
    let mut visited = Vec::new();
    let mut frontier = vec![start];
    level[start] = 0;
    visited.push(start);
    let mut height = 0;
    loop {
        let mut next = Vec::new();
        for &s in &frontier {
            for &t in &adj[s] {
                if !skip[t] && level[t] == usize::MAX {
                    level[t] = height + 1;
                    visited.push(t);
                    next.push(t);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        height += 1;
        frontier = next;
    }
    for s in visited {
        level[s] = usize::MAX;
    }
    (frontier, height)
}

fn envelope(
    a: &CsrMatrix,
    perm: &[usize],
    iperm: &[usize],
    pair: &[bool],
) -> (Vec<usize>, Vec<usize>) {
    let n = perm.len();
    let block_start: Vec<usize> = (0..n)
        .map(|r| if r > 0 && pair[r - 1] { r - 1 } else { r })
        .collect();
    let single = |r: usize| !pair[r] && block_start[r] == r;
    let mut first: Vec<usize> = (0..n)
        .map(|r| {
            a.row(perm[r])
                .map(|(j, _)| iperm[j])
                .filter(|&c| c <= r)
                .min()
                .unwrap_or(r)
                .min(block_start[r])
        })
        .collect();
    for r in 0..n {
        let mut f = block_start[first[r]];
        // Room for merging two successive singles into one pivot block.
        if f > 0 && single(f) && single(f - 1) {
            f -= 1;
        }
        first[r] = f;
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    for r in 0..n {
        row_ptr.push(row_ptr[r] + (r - first[r]));
    }
    (first, row_ptr)
}

/// Symmetric Ruiz scaling: a few sweeps of `s_i ← s_i / sqrt(max_j |s_i a_ij s_j|)`.
fn equilibrate(a: &CsrMatrix) -> Vec<f64> {
    let n = a.nrows();
    let mut s = vec![1.0; n];
    for _ in 0..10 {
        let mut worst = 0.0f64;
        let row_max: Vec<f64> = (0..n)
            .map(|i| a.row(i).fold(0.0f64, |m, (j, v)| m.max((s[i] * v * s[j]).abs())))
            .collect();
        for (si, rm) in s.iter_mut().zip(&row_max) {
            if *rm > 0.0 {
                *si /= rm.sqrt();
                worst = worst.max((1.0 - rm).abs());
            }
        }
        if worst < 1e-2 {
            break;
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pivot {
    Single(f64),
    /// First row of a 2×2 block `[[a, b], [b, c]]`.
    Lead { a: f64, b: f64, c: f64 },
    /// Second row of a 2×2 block.
    Trail,
}

/// Numeric factor `P A Pᵀ = L D Lᵀ`.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    symbolic: SymbolicLdl,
    /// Symmetric scaling `S`, factor of `S A S`.
    scale: Vec<f64>,
    l: Vec<f64>,
    pivots: Vec<Pivot>,
    inertia: Inertia,
    dynamic_pairs: usize,
}

impl LdlFactor {
    pub fn factor(symbolic: &SymbolicLdl, a: &CsrMatrix, opts: &LdlOptions) -> LdlFactor {
        let sym = symbolic;
        let n = sym.n;
        assert_eq!(a.nrows(), n);
        let nnz = sym.envelope_size();
        let mut l = vec![0.0; nnz];
        let mut w = vec![0.0; nnz];
        let mut pivots = vec![Pivot::Single(0.0); n];
        let mut inertia = Inertia::default();
        let mut dynamic_pairs = 0;
        let scale = equilibrate(a);
        let tol = opts.pivot_tol;

        let mut arow: Vec<f64> = Vec::new();
        // Diagonal of the pending lead row of a 2×2 block, if any.
        let mut pending: Option<f64> = None;
        let mut pending_static = false;

        for r in 0..n {
            let fr = sym.first[r];
            arow.clear();
            arow.resize(r + 1 - fr, 0.0);
            for (j, v) in a.row(sym.perm[r]) {
                let c = sym.iperm[j];
                if c <= r {
                    debug_assert!(c >= fr, "entry outside envelope");
                    arow[c - fr] += scale[sym.perm[r]] * v * scale[j];
                }
            }
            let own_start = if pending.is_some() { r - 1 } else { r };
            let (_, rest) = l.split_at_mut(sym.row_ptr[r]);
            let lr = &mut rest[..r - fr];
            let (wbefore, wrest) = w.split_at_mut(sym.row_ptr[r]);
            let wr = &mut wrest[..r - fr];

            let dot = |lr: &[f64], wbefore: &[f64], j: usize, upto: usize| -> f64 {
                let lo = fr.max(sym.first[j]);
                if lo >= upto {
                    return 0.0;
                }
                let wj = &wbefore[sym.row_ptr[j] + (lo - sym.first[j])..sym.row_ptr[j] + (upto - sym.first[j])];
                let li = &lr[lo - fr..upto - fr];
                li.iter().zip(wj).map(|(x, y)| x * y).sum()
            };

            let mut j = fr;
            while j < own_start {
                match pivots[j] {
                    Pivot::Lead { a: d11, b: d21, c: d22 } => {
                        let s0 = arow[j - fr] - dot(lr, wbefore, j, j);
                        let s1 = arow[j + 1 - fr] - dot(lr, wbefore, j + 1, j);
                        wr[j - fr] = s0;
                        wr[j + 1 - fr] = s1;
                        let det = d11 * d22 - d21 * d21;
                        lr[j - fr] = (d22 * s0 - d21 * s1) / det;
                        lr[j + 1 - fr] = (d11 * s1 - d21 * s0) / det;
                        j += 2;
                    }
                    Pivot::Single(d) => {
                        let s = arow[j - fr] - dot(lr, wbefore, j, j);
                        wr[j - fr] = s;
                        lr[j - fr] = s / d;
                        j += 1;
                    }
                    Pivot::Trail => unreachable!("block rows are consumed in pairs"),
                }
            }

            let self_dot: f64 = lr[..own_start - fr]
                .iter()
                .zip(&wr[..own_start - fr])
                .map(|(x, y)| x * y)
                .sum();
            let diag = arow[r - fr] - self_dot;

            if let Some(d11) = pending.take() {
                let lead = r - 1;
                let off = arow[lead - fr] - dot(lr, wbefore, lead, lead);
                lr[lead - fr] = 0.0;
                wr[lead - fr] = off;
                let (d21, d22) = (off, diag);
                let det = d11 * d22 - d21 * d21;
                let mag = d11.abs().max(d21.abs()).max(d22.abs());
                if det.abs() <= tol * mag.max(tol) || !det.is_finite() {
                    inertia.zero += 2;
                } else if det < 0.0 {
                    inertia.positive += 1;
                    inertia.negative += 1;
                } else if d11 + d22 > 0.0 {
                    inertia.positive += 2;
                } else {
                    inertia.negative += 2;
                }
                if !pending_static {
                    dynamic_pairs += 1;
                }
                pivots[lead] = Pivot::Lead { a: d11, b: d21, c: d22 };
                pivots[r] = Pivot::Trail;
            } else if sym.pair[r] {
                pending = Some(diag);
                pending_static = true;
            } else if diag.abs() > tol && diag.is_finite() {
                pivots[r] = Pivot::Single(diag);
                if diag > 0.0 {
                    inertia.positive += 1;
                } else {
                    inertia.negative += 1;
                }
            } else if sym.can_merge[r] {
                pending = Some(diag);
                pending_static = false;
            } else {
                pivots[r] = Pivot::Single(if diag == 0.0 { tol } else { diag });
                inertia.zero += 1;
            }
        }
        if let Some(d) = pending {
            pivots[n - 1] = Pivot::Single(d);
            inertia.zero += 1;
        }

        LdlFactor {
            symbolic: sym.clone(),
            scale,
            l,
            pivots,
            inertia,
            dynamic_pairs,
        }
    }

    pub fn inertia(&self) -> Inertia {
        self.inertia
    }

    pub fn is_singular(&self) -> bool {
        self.inertia.zero > 0
    }

    pub fn dynamic_pairs(&self) -> usize {
        self.dynamic_pairs
    }

    pub fn symbolic(&self) -> &SymbolicLdl {
        &self.symbolic
    }

    /// Solves `A x = b` with the factor alone.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let sym = &self.symbolic;
        let n = sym.n;
        assert_eq!(b.len(), n);
        let mut y: Vec<f64> = sym.perm.iter().map(|&i| self.scale[i] * b[i]).collect();
        for r in 0..n {
            let fr = sym.first[r];
            let lr = &self.l[sym.row_ptr[r]..sym.row_ptr[r + 1]];
            let s: f64 = lr.iter().zip(&y[fr..r]).map(|(x, v)| x * v).sum();
            y[r] -= s;
        }
        let mut r = 0;
        while r < n {
            match self.pivots[r] {
                Pivot::Single(d) => {
                    y[r] /= d;
                    r += 1;
                }
                Pivot::Lead { a, b, c } => {
                    let det = a * c - b * b;
                    let (u, v) = (y[r], y[r + 1]);
                    y[r] = (c * u - b * v) / det;
                    y[r + 1] = (a * v - b * u) / det;
                    r += 2;
                }
                Pivot::Trail => unreachable!(),
            }
        }
        for r in (0..n).rev() {
            let fr = sym.first[r];
            let lr = &self.l[sym.row_ptr[r]..sym.row_ptr[r + 1]];
            let xr = y[r];
            if xr != 0.0 {
                for (x, v) in lr.iter().zip(&mut y[fr..r]) {
                    *v -= x * xr;
                }
            }
        }
        let mut x = vec![0.0; n];
        for (r, &i) in sym.perm.iter().enumerate() {
            x[i] = self.scale[i] * y[r];
        }
        x
    }

    /// Solves `A x = b` followed by iterative refinement against `a`.
    pub fn solve_refined(&self, a: &CsrMatrix, b: &[f64], steps: usize) -> Vec<f64> {
        let mut x = self.solve(b);
        let bnorm = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let anorm = a.max_abs();
        for _ in 0..steps {
            let ax = a.mul_vec(&x);
            let res: Vec<f64> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
            let rnorm = res.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let xnorm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if rnorm <= 1e-15 * (anorm * xnorm + bnorm) {
                break;
            }
            let dx = self.solve(&res);
            for (x, d) in x.iter_mut().zip(dx) {
                *x += d;
            }
        }
        x
    }
}
