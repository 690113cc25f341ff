//! Real symmetric semidefinite programming.
//!
//! Problems are stored in the SDPA primal-dual pair
//!
//! ```text
//! (P)  maximize C•X  subject to A_k•X = b_k,  X ⪰ 0
//! (D)  minimize b·y  subject to Σ y_k A_k − C = Z ⪰ 0
//! ```
//!
//! with block-diagonal data. The solver is an infeasible primal-dual
//! path-following method using the HKM search direction with a Mehrotra
//! predictor-corrector. Files use the SDPA sparse format (`.dat-s`).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

pub type RMatrix = DMatrix<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("numerical trouble: {0}")]
    NumericalTrouble(String),
    #[error("I/O failure: {0}")]
    Io(String),
    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type SdpResult<T> = Result<T, SdpError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Dense,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub size: usize,
    pub kind: BlockKind,
}

impl Block {
    pub fn dense(size: usize) -> Self {
        Self {
            size,
            kind: BlockKind::Dense,
        }
    }

    pub fn diagonal(size: usize) -> Self {
        Self {
            size,
            kind: BlockKind::Diagonal,
        }
    }

    fn sdpa_size(&self) -> i64 {
        match self.kind {
            BlockKind::Dense => self.size as i64,
            BlockKind::Diagonal => -(self.size as i64),
        }
    }
}

/// Upper-triangle entries `(block, i, j, value)` with `i ≤ j`, zero-based,
/// sorted and merged.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseSym {
    entries: Vec<(usize, usize, usize, f64)>,
}

impl SparseSym {
    /// Entries below the diagonal are mirrored; duplicates are summed.
    pub fn new(entries: impl IntoIterator<Item = (usize, usize, usize, f64)>) -> Self {
        let mut map: HashMap<(usize, usize, usize), f64> = HashMap::new();
        for (b, i, j, v) in entries {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            *map.entry((b, i, j)).or_insert(0.0) += v;
        }
        let mut entries: Vec<_> = map
            .into_iter()
            .filter(|(_, v)| *v != 0.0)
            .map(|((b, i, j), v)| (b, i, j, v))
            .collect();
        entries.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|&(b, i, j, v)| (b, i, j, v * s))
                .collect(),
        }
    }

    /// Frobenius norm of the full symmetric matrix.
    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(_, i, j, v)| if i == j { v * v } else { 2.0 * v * v })
            .sum::<f64>()
            .sqrt()
    }

    /// `tr(A M)` for block matrices `M` (not necessarily symmetric).
    pub fn dot(&self, m: &[RMatrix]) -> f64 {
        self.entries
            .iter()
            .map(|&(b, i, j, v)| {
                if i == j {
                    v * m[b][(i, i)]
                } else {
                    v * (m[b][(i, j)] + m[b][(j, i)])
                }
            })
            .sum()
    }

    pub fn to_dense(&self, blocks: &[Block]) -> Vec<RMatrix> {
        let mut out: Vec<RMatrix> = blocks
            .iter()
            .map(|b| RMatrix::zeros(b.size, b.size))
            .collect();
        self.add_to(&mut out, 1.0);
        out
    }

    fn add_to(&self, m: &mut [RMatrix], s: f64) {
        for &(b, i, j, v) in &self.entries {
            m[b][(i, j)] += s * v;
            if i != j {
                m[b][(j, i)] += s * v;
            }
        }
    }

    /// Frobenius inner product with another sparse matrix.
    pub fn inner(&self, other: &SparseSym) -> f64 {
        let (mut p, mut q, mut acc) = (0, 0, 0.0);
        while p < self.entries.len() && q < other.entries.len() {
            let a = self.entries[p];
            let b = other.entries[q];
            match (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)) {
                std::cmp::Ordering::Less => p += 1,
                std::cmp::Ordering::Greater => q += 1,
                std::cmp::Ordering::Equal => {
                    acc += if a.1 == a.2 {
                        a.3 * b.3
                    } else {
                        2.0 * a.3 * b.3
                    };
                    p += 1;
                    q += 1;
                }
            }
        }
        acc
    }
}

/// `maximize C•X  s.t.  A_k•X = b_k,  X ⪰ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    blocks: Vec<Block>,
    c: SparseSym,
    a: Vec<SparseSym>,
    b: Vec<f64>,
}

impl SdpProblem {
    pub fn new(
        blocks: Vec<Block>,
        c: SparseSym,
        a: Vec<SparseSym>,
        b: Vec<f64>,
    ) -> SdpResult<Self> {
        if blocks.is_empty() || blocks.iter().any(|b| b.size == 0) {
            return Err(SdpError::Invalid("empty block structure".into()));
        }
        if a.is_empty() {
            return Err(SdpError::Invalid(
                "at least one constraint is required".into(),
            ));
        }
        if a.len() != b.len() {
            return Err(SdpError::Invalid(format!(
                "{} constraint matrices but {} right-hand sides",
                a.len(),
                b.len()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(SdpError::Invalid("non-finite right-hand side".into()));
        }
        for (k, m) in std::iter::once(&c).chain(&a).enumerate() {
            for &(blk, i, j, v) in m.entries() {
                let Some(block) = blocks.get(blk) else {
                    return Err(SdpError::Invalid(format!(
                        "matrix {k}: block {blk} out of range"
                    )));
                };
                if j >= block.size || !v.is_finite() {
                    return Err(SdpError::Invalid(format!(
                        "matrix {k}: bad entry ({blk}, {i}, {j})"
                    )));
                }
                if block.kind == BlockKind::Diagonal && i != j {
                    return Err(SdpError::Invalid(format!(
                        "matrix {k}: off-diagonal entry in diagonal block {blk}"
                    )));
                }
            }
        }
        Ok(Self { blocks, c, a, b })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn objective(&self) -> &SparseSym {
        &self.c
    }

    pub fn constraints(&self) -> &[SparseSym] {
        &self.a
    }

    pub fn rhs(&self) -> &[f64] {
        &self.b
    }

    pub fn num_constraints(&self) -> usize {
        self.a.len()
    }

    /// Same problem with the objective multiplied by `s`.
    pub fn with_scaled_objective(&self, s: f64) -> Self {
        Self {
            c: self.c.scaled(s),
            ..self.clone()
        }
    }

    /// `max_k |b_k − A_k•X|`.
    pub fn primal_residual(&self, x: &[RMatrix]) -> f64 {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| (b - a.dot(x)).abs())
            .fold(0.0, f64::max)
    }
}

/// Extra iterations taken after the tolerances are first met, aiming for a
/// hundredfold smaller gap.
const POLISH_STEPS: usize = 3;

/// Maximal refinement passes of each search direction against the exact
/// constraint operator.
const REFINE_STEPS: usize = 10;

/// Dual objective magnitude, relative to the data, past which a dual iterate
/// with negligible relative residual is taken as a Farkas certificate.
const INFEASIBILITY_SCALE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SolverStatus {
    Optimal,
    /// The dual iterate is an approximate Farkas certificate: no X satisfies
    /// the equality constraints.
    PrimalInfeasible,
    MaxIter,
    NumericalTrouble,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Relative duality gap `|p − d| / (1 + |p|)`.
    pub gap_tol: f64,
    /// Absolute primal and dual residuals.
    pub feas_tol: f64,
    pub step_fraction: f64,
    pub regularization: f64,
    /// Check weak duality at near-feasible iterates.
    pub check_duality: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gap_tol: 1e-7,
            feas_tol: 1e-8,
            step_fraction: 0.98,
            regularization: 1e-12,
            check_duality: cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub primal_value: f64,
    pub dual_value: f64,
    pub x: Vec<RMatrix>,
    pub y: Vec<f64>,
    pub z: Vec<RMatrix>,
    pub status: SolverStatus,
    pub iterations: usize,
    /// `|primal − dual|`.
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// Indices of a maximal linearly independent subset of the constraints,
/// found by pivoted Cholesky on their Gram matrix. Dependent constraints
/// must have consistent right-hand sides.
fn independent_constraints(p: &SdpProblem) -> SdpResult<Vec<usize>> {
    let m = p.a.len();
    let mut by_pos: HashMap<(usize, usize, usize), Vec<(usize, f64)>> = HashMap::new();
    for (k, a) in p.a.iter().enumerate() {
        for &(b, i, j, v) in a.entries() {
            let w = if i == j {
                v
            } else {
                v * std::f64::consts::SQRT_2
            };
            by_pos.entry((b, i, j)).or_default().push((k, w));
        }
    }
    let mut gram = RMatrix::zeros(m, m);
    for list in by_pos.values() {
        for &(k, u) in list {
            for &(l, v) in list {
                gram[(k, l)] += u * v;
            }
        }
    }
    let scale = (0..m).map(|k| gram[(k, k)]).fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(SdpError::Invalid("all constraint matrices vanish".into()));
    }
    // Right-looking pivoted Cholesky on a working copy.
    let mut work = gram.clone();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut rank = 0;
    let tol = 1e-11 * scale;
    let mut l = RMatrix::zeros(m, m);
    while rank < m {
        let (piv, best) = (rank..m)
            .map(|t| (t, work[(perm[t], perm[t])]))
            .fold((rank, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= tol {
            break;
        }
        perm.swap(rank, piv);
        let pk = perm[rank];
        let d = best.sqrt();
        l[(pk, rank)] = d;
        for t in rank + 1..m {
            let pt = perm[t];
            l[(pt, rank)] = work[(pt, pk)] / d;
        }
        for t in rank + 1..m {
            let pt = perm[t];
            let lt = l[(pt, rank)];
            for s in rank + 1..m {
                let ps = perm[s];
                work[(pt, ps)] -= lt * l[(ps, rank)];
            }
        }
        rank += 1;
    }
    let mut keep: Vec<usize> = perm[..rank].to_vec();
    keep.sort_unstable();
    if rank < m {
        let sub = RMatrix::from_fn(rank, rank, |i, j| gram[(keep[i], keep[j])]);
        let chol = Cholesky::new(sub)
            .ok_or_else(|| SdpError::NumericalTrouble("presolve factorization".into()))?;
        let b_keep = DVector::from_iterator(rank, keep.iter().map(|&k| p.b[k]));
        for &k in &perm[rank..] {
            let rhs = DVector::from_iterator(rank, keep.iter().map(|&i| gram[(i, k)]));
            let coef = chol.solve(&rhs);
            let predicted = coef.dot(&b_keep);
            if (predicted - p.b[k]).abs() > 1e-8 * (1.0 + p.b[k].abs()) {
                return Err(SdpError::Infeasible(format!(
                    "constraint {k} depends on others but b = {} vs implied {predicted}",
                    p.b[k]
                )));
            }
        }
    }
    Ok(keep)
}

fn blocks_dot(a: &[RMatrix], b: &[RMatrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn max_abs_blocks(a: &[RMatrix]) -> f64 {
    a.iter().map(|m| m.amax()).fold(0.0, f64::max)
}

/// Largest `α ≤ 1` with `X + α/frac·ΔX ⪰ 0`, times the step fraction.
fn step_length(x: &[RMatrix], dx: &[RMatrix], frac: f64) -> Option<f64> {
    let mut alpha_max = f64::INFINITY;
    for (xb, db) in x.iter().zip(dx) {
        let l = Cholesky::new(xb.clone())?.l();
        let linv = l.clone().try_inverse()?;
        let m = &linv * db * linv.transpose();
        let m = (&m + m.transpose()) * 0.5;
        let lam = SymmetricEigen::new(m).eigenvalues.min();
        if lam < 0.0 {
            alpha_max = alpha_max.min(-1.0 / lam);
        }
    }
    Some((frac * alpha_max).min(1.0))
}

fn sym(m: RMatrix) -> RMatrix {
    (&m + m.transpose()) * 0.5
}

struct Scaled {
    blocks: Vec<Block>,
    c: SparseSym,
    a: Vec<SparseSym>,
    b: Vec<f64>,
    c_scale: f64,
    a_scale: Vec<f64>,
}

/// `T = X A Z⁻¹` per block, exploiting sparsity of `A` when worthwhile.
fn sandwich(a: &SparseSym, x: &[RMatrix], zinv: &[RMatrix], blocks: &[Block]) -> Vec<RMatrix> {
    let mut counts = vec![0usize; blocks.len()];
    for &(b, ..) in a.entries() {
        counts[b] += 1;
    }
    let mut out: Vec<RMatrix> = blocks
        .iter()
        .map(|b| RMatrix::zeros(b.size, b.size))
        .collect();
    let mut dense_blocks = vec![false; blocks.len()];
    for (b, blk) in blocks.iter().enumerate() {
        dense_blocks[b] = counts[b] > 2 * blk.size;
    }
    for (b, blk) in blocks.iter().enumerate() {
        if dense_blocks[b] {
            let mut ad = RMatrix::zeros(blk.size, blk.size);
            for &(bb, i, j, v) in a.entries() {
                if bb == b {
                    ad[(i, j)] += v;
                    if i != j {
                        ad[(j, i)] += v;
                    }
                }
            }
            out[b] = &x[b] * ad * &zinv[b];
        }
    }
    for &(b, i, j, v) in a.entries() {
        if dense_blocks[b] || counts[b] == 0 {
            continue;
        }
        let t = &mut out[b];
        t.ger(v, &x[b].column(i), &zinv[b].row(j).transpose(), 1.0);
        if i != j {
            t.ger(v, &x[b].column(j), &zinv[b].row(i).transpose(), 1.0);
        }
    }
    out
}

/// Solves `p` to the tolerances of `cfg`.
pub fn solve(p: &SdpProblem, cfg: &SolverConfig) -> SdpResult<SdpSolution> {
    let keep = independent_constraints(p)?;
    let c_norm = p.c.norm();
    let c_scale = if c_norm > 0.0 { c_norm } else { 1.0 };
    let mut a = Vec::with_capacity(keep.len());
    let mut b = Vec::with_capacity(keep.len());
    let mut a_scale = Vec::with_capacity(keep.len());
    for &k in &keep {
        let s = p.a[k].norm();
        a.push(p.a[k].scaled(1.0 / s));
        b.push(p.b[k] / s);
        a_scale.push(s);
    }
    let sc = Scaled {
        blocks: p.blocks.clone(),
        c: p.c.scaled(1.0 / c_scale),
        a,
        b,
        c_scale,
        a_scale,
    };
    let mut sol = solve_scaled(&sc, cfg)?;
    // Undo the scaling and restore dropped constraints with zero multipliers.
    let mut y = vec![0.0; p.a.len()];
    for (idx, &k) in keep.iter().enumerate() {
        y[k] = sol.y[idx] * sc.c_scale / sc.a_scale[idx];
    }
    sol.y = y;
    sol.z.iter_mut().for_each(|z| *z *= sc.c_scale);
    sol.primal_value = p.c.dot(&sol.x);
    sol.dual_value = p.b.iter().zip(&sol.y).map(|(b, y)| b * y).sum();
    sol.gap = (sol.primal_value - sol.dual_value).abs();
    sol.primal_residual = p.primal_residual(&sol.x);
    Ok(sol)
}

fn solve_scaled(p: &Scaled, cfg: &SolverConfig) -> SdpResult<SdpSolution> {
    let m = p.a.len();
    let blocks = &p.blocks;
    let n_total: usize = blocks.iter().map(|b| b.size).sum();
    let nf = n_total as f64;
    let bmax = p.b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let xi = 10.0f64.max(nf.sqrt()).max(nf.sqrt() * bmax * 10.0);
    let eta = 10.0f64.max(nf.sqrt());
    let eye = |s: f64| -> Vec<RMatrix> {
        blocks
            .iter()
            .map(|b| RMatrix::identity(b.size, b.size) * s)
            .collect()
    };
    let mut x = eye(xi);
    let mut z = eye(eta);
    let mut y = DVector::<f64>::zeros(m);
    let c_dense = p.c.to_dense(blocks);
    let a_dense_mul = |y: &DVector<f64>| -> Vec<RMatrix> {
        let mut out: Vec<RMatrix> = blocks
            .iter()
            .map(|b| RMatrix::zeros(b.size, b.size))
            .collect();
        for (k, a) in p.a.iter().enumerate() {
            if y[k] != 0.0 {
                a.add_to(&mut out, y[k]);
            }
        }
        out
    };
    let orig_primal_res = |x: &[RMatrix]| -> f64 {
        p.a.iter()
            .zip(&p.b)
            .zip(&p.a_scale)
            .map(|((a, b), s)| ((b - a.dot(x)) * s).abs())
            .fold(0.0, f64::max)
    };

    // Blocks where constraints average more than 2n entries are handled
    // with dense stacked matrices, the rest entry by entry.
    let mut block_nnz = vec![0usize; blocks.len()];
    for a in &p.a {
        for &(b, ..) in a.entries() {
            block_nnz[b] += 1;
        }
    }
    let dense_block: Vec<bool> = blocks
        .iter()
        .zip(&block_nnz)
        .map(|(b, &nnz)| b.kind == BlockKind::Dense && nnz > 2 * m * b.size)
        .collect();
    let dense_a: Vec<Option<(RMatrix, RMatrix)>> = blocks
        .iter()
        .enumerate()
        .map(|(bk, b)| {
            dense_block[bk].then(|| {
                let mut stacked = RMatrix::zeros(b.size * b.size, m);
                for (k, a) in p.a.iter().enumerate() {
                    for &(bb, i, j, v) in a.entries() {
                        if bb == bk {
                            stacked[(i + j * b.size, k)] += v;
                            if i != j {
                                stacked[(j + i * b.size, k)] += v;
                            }
                        }
                    }
                }
                let rows = stacked.transpose();
                (stacked, rows)
            })
        })
        .collect();
    let sparse_a: Vec<SparseSym> =
        p.a.iter()
            .map(|a| SparseSym::new(a.entries().iter().cloned().filter(|e| !dense_block[e.0])))
            .collect();
    let has_sparse = sparse_a.iter().any(|a| !a.is_empty());

    let mut status = SolverStatus::MaxIter;
    let mut iterations = 0;
    let mut best: Option<(f64, Vec<RMatrix>, DVector<f64>, Vec<RMatrix>)> = None;
    let mut stall = 0;
    // Best iterate meeting the tolerances, and iterations spent past it.
    let c_norm = p.c.norm() * p.c_scale;
    let mut qualified: Option<(f64, Vec<RMatrix>, DVector<f64>, Vec<RMatrix>)> = None;
    let mut polish = 0;
    for it in 0..=cfg.max_iter {
        iterations = it;
        let ay = a_dense_mul(&y);
        let rd: Vec<RMatrix> = (0..blocks.len())
            .map(|bk| &c_dense[bk] - &ay[bk] + &z[bk])
            .collect();
        let pobj = p.c.dot(&x) * p.c_scale;
        let dobj = p.b.iter().zip(y.iter()).map(|(b, y)| b * y).sum::<f64>() * p.c_scale;
        let pres = orig_primal_res(&x);
        let dres = max_abs_blocks(&rd) * p.c_scale;
        let gap_rel = (pobj - dobj).abs() / (1.0 + pobj.abs());
        if cfg.check_duality && pres < 1e-9 && dres < 1e-9 {
            debug_assert!(
                dobj >= pobj - 1e-8 * (1.0 + pobj.abs()),
                "weak duality violated: {dobj} < {pobj}"
            );
        }
        if std::env::var_os("SEQRAND_SDP_TRACE").is_some() {
            eprintln!("it {it:3} p {pobj:+.10e} d {dobj:+.10e} gap {gap_rel:.2e} pres {pres:.2e} dres {dres:.2e}");
        }
        let merit = gap_rel.max(pres).max(dres);
        if best.as_ref().map_or(true, |b| merit < b.0) {
            best = Some((merit, x.clone(), y.clone(), z.clone()));
        }
        if gap_rel < cfg.gap_tol && pres < cfg.feas_tol && dres < cfg.feas_tol {
            if qualified.as_ref().map_or(true, |q| gap_rel < q.0) {
                qualified = Some((gap_rel, x.clone(), y.clone(), z.clone()));
            }
            if gap_rel < 1e-2 * cfg.gap_tol || polish == POLISH_STEPS {
                status = SolverStatus::Optimal;
                break;
            }
            polish += 1;
        }
        if -dobj > INFEASIBILITY_SCALE * (1.0 + c_norm + pobj.abs())
            && dres < cfg.feas_tol * dobj.abs()
        {
            status = SolverStatus::PrimalInfeasible;
            break;
        }
        if it == cfg.max_iter {
            break;
        }

        let mu = blocks_dot(&x, &z) / nf;
        let zinv: Vec<RMatrix> = match z
            .iter()
            .map(|zb| Cholesky::new(zb.clone()).map(|c| c.inverse()))
            .collect()
        {
            Some(v) => v,
            None => {
                status = SolverStatus::NumericalTrouble;
                break;
            }
        };
        // Schur complement H_kl = tr(A_k X A_l Z⁻¹).
        let mut h = RMatrix::zeros(m, m);
        if has_sparse {
            for l in 0..m {
                let t = sandwich(&sparse_a[l], &x, &zinv, blocks);
                for k in l..m {
                    let v = sparse_a[k].dot(&t);
                    h[(k, l)] = v;
                    h[(l, k)] = v;
                }
            }
        }
        for (bk, stacked) in dense_a.iter().enumerate() {
            let Some((stacked, rows)) = stacked else {
                continue;
            };
            let nb = blocks[bk].size;
            let mut t = RMatrix::zeros(nb * nb, m);
            for l in 0..m {
                let al = RMatrix::from_column_slice(nb, nb, stacked.column(l).as_slice());
                let prod = &x[bk] * al * &zinv[bk];
                t.column_mut(l).copy_from_slice(prod.as_slice());
            }
            let hb = rows * t;
            h += (&hb + hb.transpose()) * 0.5;
        }
        let diag_max = (0..m).map(|k| h[(k, k)]).fold(0.0, f64::max).max(1e-300);
        let mut reg = cfg.regularization * diag_max;
        let chol = loop {
            let mut hr = h.clone();
            for k in 0..m {
                hr[(k, k)] += reg;
            }
            if let Some(c) = Cholesky::new(hr) {
                break Some(c);
            }
            reg *= 100.0;
            if reg > 1e-4 * diag_max {
                break None;
            }
        };
        let Some(chol) = chol else {
            status = SolverStatus::NumericalTrouble;
            break;
        };

        let xrdz: Vec<RMatrix> = (0..blocks.len())
            .map(|bk| &x[bk] * &rd[bk] * &zinv[bk])
            .collect();
        let rp: Vec<f64> = p.a.iter().zip(&p.b).map(|(a, b)| b - a.dot(&x)).collect();
        let direction = |target: &[RMatrix]| -> (DVector<f64>, Vec<RMatrix>, Vec<RMatrix>) {
            // target = (σμ I − corr) Z⁻¹
            let r: Vec<RMatrix> = (0..blocks.len())
                .map(|bk| &target[bk] + &xrdz[bk])
                .collect();
            let rhs = DVector::from_iterator(m, p.a.iter().zip(&p.b).map(|(a, b)| a.dot(&r) - b));
            let mut dy = chol.solve(&rhs);
            // Iterative refinement against the unregularized system.
            let mut res_norm = (&rhs - &h * &dy).amax();
            for _ in 0..4 {
                let r = &rhs - &h * &dy;
                let cand = &dy + chol.solve(&r);
                let cand_norm = (&rhs - &h * &cand).amax();
                if cand_norm >= res_norm {
                    break;
                }
                dy = cand;
                res_norm = cand_norm;
            }
            let step = |dy: &DVector<f64>| {
                let ady = a_dense_mul(dy);
                let dz: Vec<RMatrix> = (0..blocks.len())
                    .map(|bk| sym(&ady[bk] - &rd[bk]))
                    .collect();
                let dx: Vec<RMatrix> = (0..blocks.len())
                    .map(|bk| sym(&target[bk] - &x[bk] - &x[bk] * &dz[bk] * &zinv[bk]))
                    .collect();
                let res = DVector::from_iterator(
                    m,
                    p.a.iter().enumerate().map(|(k, a)| rp[k] - a.dot(&dx)),
                );
                (dx, dz, res)
            };
            // Refinement against the exact operator: A(dx) = b − A(X).
            let (mut dx, mut dz, mut res) = step(&dy);
            for _ in 0..REFINE_STEPS {
                let norm = res.amax();
                let cand = &dy - chol.solve(&res);
                let (cx, cz, cres) = step(&cand);
                if cres.amax() >= norm {
                    break;
                }
                (dy, dx, dz, res) = (cand, cx, cz, cres);
            }
            (dy, dx, dz)
        };

        // Predictor.
        let target0: Vec<RMatrix> = zinv.iter().map(|zi| zi * 0.0).collect();
        let (_, dx_a, dz_a) = direction(&target0);
        let (Some(ap), Some(ad)) = (step_length(&x, &dx_a, 1.0), step_length(&z, &dz_a, 1.0))
        else {
            status = SolverStatus::NumericalTrouble;
            break;
        };
        let mut mu_aff = 0.0;
        for bk in 0..blocks.len() {
            mu_aff += (&x[bk] + &dx_a[bk] * ap).dot(&(&z[bk] + &dz_a[bk] * ad));
        }
        mu_aff /= nf;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let target: Vec<RMatrix> = (0..blocks.len())
            .map(|bk| {
                let n = blocks[bk].size;
                (RMatrix::identity(n, n) * (sigma * mu) - &dx_a[bk] * &dz_a[bk]) * &zinv[bk]
            })
            .collect();
        let (dy, dx, dz) = direction(&target);
        let (Some(ap), Some(ad)) = (
            step_length(&x, &dx, cfg.step_fraction),
            step_length(&z, &dz, cfg.step_fraction),
        ) else {
            status = SolverStatus::NumericalTrouble;
            break;
        };
        if ap < 1e-10 && ad < 1e-10 {
            stall += 1;
            if stall > 3 {
                status = SolverStatus::NumericalTrouble;
                break;
            }
        } else {
            stall = 0;
        }
        for bk in 0..blocks.len() {
            x[bk] = sym(&x[bk] + &dx[bk] * ap);
            z[bk] = sym(&z[bk] + &dz[bk] * ad);
        }
        y += dy * ad;
    }
    if let Some((_, qx, qy, qz)) = qualified {
        x = qx;
        y = qy;
        z = qz;
        status = SolverStatus::Optimal;
    } else if status != SolverStatus::Optimal {
        if let Some((_, bx, by, bz)) = best {
            x = bx;
            y = by;
            z = bz;
        }
    }
    let ay = a_dense_mul(&y);
    let rd: Vec<RMatrix> = (0..blocks.len())
        .map(|bk| &c_dense[bk] - &ay[bk] + &z[bk])
        .collect();
    Ok(SdpSolution {
        primal_value: 0.0,
        dual_value: 0.0,
        x,
        y: y.iter().cloned().collect(),
        z,
        status,
        iterations,
        gap: 0.0,
        primal_residual: 0.0,
        dual_residual: max_abs_blocks(&rd) * p.c_scale,
    })
}

/// SDPA sparse text for `p`.
pub fn to_sdpa_string(p: &SdpProblem) -> String {
    let mut s = String::new();
    s.push_str("\"seqrand SDP export: maximize C.X s.t. A_k.X = b_k, X psd\n");
    let _ = writeln!(s, "{}", p.a.len());
    let _ = writeln!(s, "{}", p.blocks.len());
    let sizes: Vec<String> = p.blocks.iter().map(|b| b.sdpa_size().to_string()).collect();
    let _ = writeln!(s, "{}", sizes.join(" "));
    let rhs: Vec<String> = p.b.iter().map(|v| format!("{v:.16e}")).collect();
    let _ = writeln!(s, "{}", rhs.join(" "));
    for (k, m) in std::iter::once(&p.c).chain(&p.a).enumerate() {
        for &(b, i, j, v) in m.entries() {
            let _ = writeln!(s, "{k} {} {} {} {v:.16e}", b + 1, i + 1, j + 1);
        }
    }
    s
}

pub fn export_sdpa(p: &SdpProblem, path: &Path) -> SdpResult<()> {
    std::fs::write(path, to_sdpa_string(p))
        .map_err(|e| SdpError::Io(format!("{}: {e}", path.display())))
}

pub fn import_sdpa(path: &Path) -> SdpResult<SdpProblem> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SdpError::Io(format!("{}: {e}", path.display())))?;
    parse_sdpa(&text)
}

/// Parses SDPA sparse text; lines starting with `"` or `*` are comments and
/// `{ } ( ) ,` are treated as separators in the header.
pub fn parse_sdpa(text: &str) -> SdpResult<SdpProblem> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('"') && !l.starts_with('*'));
    let mut last = 0;
    let mut tokens_of = |what: &str, count: Option<usize>| -> SdpResult<(usize, Vec<String>)> {
        let mut out = Vec::new();
        loop {
            let Some((ln, l)) = lines.next() else {
                return Err(SdpError::Parse {
                    line: last + 1,
                    reason: format!("unexpected end of file while reading {what}"),
                });
            };
            last = ln;
            out.extend(
                l.split(|ch: char| ch.is_whitespace() || "{}(),".contains(ch))
                    .filter(|t| !t.is_empty())
                    .map(String::from),
            );
            match count {
                Some(n) if out.len() < n => continue,
                _ => return Ok((ln, out)),
            }
        }
    };
    let parse_usize = |line: usize, t: &str, what: &str| -> SdpResult<usize> {
        t.parse().map_err(|_| SdpError::Parse {
            line,
            reason: format!("invalid {what} '{t}'"),
        })
    };
    let (ln, t) = tokens_of("constraint count", Some(1))?;
    let m = parse_usize(ln, &t[0], "constraint count")?;
    let (ln, t) = tokens_of("block count", Some(1))?;
    let nb = parse_usize(ln, &t[0], "block count")?;
    let (ln, t) = tokens_of("block sizes", Some(nb))?;
    let mut blocks = Vec::with_capacity(nb);
    for s in t.iter().take(nb) {
        let v: i64 = s.parse().map_err(|_| SdpError::Parse {
            line: ln,
            reason: format!("invalid block size '{s}'"),
        })?;
        if v == 0 {
            return Err(SdpError::Parse {
                line: ln,
                reason: "zero block size".into(),
            });
        }
        blocks.push(if v > 0 {
            Block::dense(v as usize)
        } else {
            Block::diagonal(v.unsigned_abs() as usize)
        });
    }
    let (ln, t) = tokens_of("right-hand side", Some(m))?;
    let mut b = Vec::with_capacity(m);
    for s in t.iter().take(m) {
        b.push(s.parse::<f64>().map_err(|_| SdpError::Parse {
            line: ln,
            reason: format!("invalid right-hand value '{s}'"),
        })?);
    }
    let mut mats: Vec<Vec<(usize, usize, usize, f64)>> = vec![Vec::new(); m + 1];
    for (ln, l) in lines {
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 5 {
            return Err(SdpError::Parse {
                line: ln,
                reason: format!("expected 5 fields 'k blk i j v', found {}", t.len()),
            });
        }
        let k = parse_usize(ln, t[0], "matrix index")?;
        let blk = parse_usize(ln, t[1], "block index")?;
        let i = parse_usize(ln, t[2], "row index")?;
        let j = parse_usize(ln, t[3], "column index")?;
        let v: f64 = t[4].parse().map_err(|_| SdpError::Parse {
            line: ln,
            reason: format!("invalid value '{}'", t[4]),
        })?;
        if k > m || blk == 0 || blk > nb || i == 0 || j == 0 || i.max(j) > blocks[blk - 1].size {
            return Err(SdpError::Parse {
                line: ln,
                reason: "index out of range".into(),
            });
        }
        mats[k].push((blk - 1, i - 1, j - 1, v));
    }
    let mut it = mats.into_iter().map(SparseSym::new);
    let c = it.next().expect("objective slot");
    SdpProblem::new(blocks, c, it.collect(), b).map_err(|e| SdpError::Parse {
        line: 0,
        reason: e.to_string(),
    })
}
