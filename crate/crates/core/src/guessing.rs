//! Guessing probabilities of an adversary holding classical or quantum side
//! information about sequential measurements, and the matching min-entropy.
//!
//! Classical side information is modelled as an ensemble decomposition of
//! the state together with projective decompositions of each round's POVM.
//! The quantum side of the comparison uses explicit Eve strategies: the
//! purification-based projectors for projective chains and a Naimark
//! dilation with a purified ancilla for decomposed POVM chains.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::cglmp::{tuples, StateKind};
use crate::qcore::{
    apply_on_factors, c, hermitian_eigen, identity, kron, max_abs, outer, psd_sqrt, validate_povm,
    CMatrix, CVector, DensityOperator, Povm, QError, StateVector, Tolerances, C64,
};
use crate::seqsim::{
    bob_basis, bob_decompositions, sequential_distribution, PvmMixture, SeqError,
    SequentialScenario,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuessError {
    #[error("guessing probability {0} outside (0, 1]")]
    OutOfRange(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("round {0} is not projective")]
    NotProjective(usize),
    #[error("not a valid mixture: {0}")]
    NotAValidMixture(String),
    #[error("constraint '{constraint}' violated (residual {residual:.3e})")]
    ConstraintViolated { constraint: String, residual: f64 },
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Quantum(#[from] QError),
}

pub type GuessResult<T> = Result<T, GuessError>;

/// `−log₂ g`.
pub fn min_entropy(g: f64) -> GuessResult<f64> {
    if !(g > 0.0 && g <= 1.0) {
        return Err(GuessError::OutOfRange(g));
    }
    Ok(-g.log2())
}

/// Which outcomes the adversary has to guess.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuessScope {
    /// Both Bob outcomes.
    Local,
    /// Alice's and both Bob outcomes.
    Global,
}

impl GuessScope {
    pub fn name(self) -> &'static str {
        match self {
            GuessScope::Local => "local",
            GuessScope::Global => "global",
        }
    }
}

impl std::str::FromStr for GuessScope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(GuessScope::Local),
            "global" => Ok(GuessScope::Global),
            other => Err(format!(
                "unknown scope '{other}' (expected local or global)"
            )),
        }
    }
}

/// Guessing probability with its min-entropy.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GuessReport {
    pub guess_probability: f64,
    pub min_entropy: f64,
    pub strategy: String,
}

impl GuessReport {
    /// Values within 1e-9 above one are rounded down to one.
    pub fn new(g: f64, strategy: impl Into<String>) -> GuessResult<Self> {
        let g = if g > 1.0 && g <= 1.0 + 1e-9 { 1.0 } else { g };
        Ok(Self {
            guess_probability: g,
            min_entropy: min_entropy(g)?,
            strategy: strategy.into(),
        })
    }
}

/// Pure-state ensemble `{p(λ), |φ_λ⟩}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDecomposition {
    weights: Vec<f64>,
    states: Vec<StateVector>,
}

impl EnsembleDecomposition {
    pub fn new(weights: Vec<f64>, states: Vec<StateVector>, tol: &Tolerances) -> GuessResult<Self> {
        if weights.is_empty() || weights.len() != states.len() {
            return Err(GuessError::DimensionMismatch(
                "weights and states differ in length".into(),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0))
            || (weights.iter().sum::<f64>() - 1.0).abs() > tol.norm
        {
            return Err(GuessError::NotAValidMixture(
                "ensemble weights are not a distribution".into(),
            ));
        }
        let dim = states[0].dim();
        if states.iter().any(|s| s.dim() != dim) {
            return Err(GuessError::DimensionMismatch(
                "ensemble states differ in dimension".into(),
            ));
        }
        Ok(Self { weights, states })
    }

    /// A single pure state.
    pub fn pure(state: StateVector) -> Self {
        Self {
            weights: vec![1.0],
            states: vec![state],
        }
    }

    /// Eigen-ensemble of `rho` over its support.
    pub fn eigen(rho: &DensityOperator, tol: &Tolerances) -> Self {
        let (vals, vecs) = hermitian_eigen(rho.matrix());
        let mut weights = Vec::new();
        let mut states = Vec::new();
        for (k, &v) in vals.iter().enumerate() {
            if v > tol.psd {
                weights.push(v);
                states.push(
                    StateVector::normalized(vecs.column(k).into_owned()).expect("unit eigenvector"),
                );
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { weights, states }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn density(&self) -> DensityOperator {
        let m = self
            .weights
            .iter()
            .zip(&self.states)
            .fold(CMatrix::zeros(self.dim(), self.dim()), |acc, (w, s)| {
                acc + s.projector().scale(*w)
            });
        DensityOperator::from_trusted(m)
    }

    /// Largest deviation of `Σ p(λ)|φ_λ⟩⟨φ_λ|` from `rho`.
    pub fn residual(&self, rho: &DensityOperator) -> f64 {
        max_abs(&(self.density().matrix() - rho.matrix()))
    }
}

/// Branch weights across the state ensemble and the rounds.
#[derive(Debug, Clone, PartialEq)]
pub enum BranchWeights {
    /// Product of ensemble and per-round mixture weights.
    Independent,
    /// Explicit joint table of `(state index, branch per round, weight)`.
    Joint(Vec<(usize, Vec<usize>, f64)>),
}

/// Kraus operator of one outcome of one branch: the element itself for a
/// projector, its square root otherwise.
fn branch_kraus(p: &Povm, tol: &Tolerances) -> GuessResult<Vec<CMatrix>> {
    if p.is_projective() {
        Ok(p.elements().to_vec())
    } else {
        Ok(p.elements()
            .iter()
            .map(|m| psd_sqrt(m, tol))
            .collect::<Result<_, _>>()?)
    }
}

/// Outcome probabilities of a pure state under a chain of Kraus maps,
/// indexed by the row-major flattened outcome tuple.
pub fn chain_probabilities(state: &CVector, chain: &[&[CMatrix]]) -> Vec<f64> {
    let mut out = Vec::new();
    fn rec(v: &CVector, chain: &[&[CMatrix]], out: &mut Vec<f64>) {
        match chain.split_first() {
            None => out.push(v.norm_squared()),
            Some((ops, rest)) => {
                for k in ops.iter() {
                    rec(&(k * v), rest, out);
                }
            }
        }
    }
    rec(state, chain, &mut out);
    out
}

/// Index of the largest entry, taking the first (lexicographically smallest
/// outcome tuple) among entries within `1e-12` of the maximum.
pub fn lexmin_argmax(values: &[f64]) -> usize {
    let best = values.iter().cloned().fold(f64::MIN, f64::max);
    values
        .iter()
        .position(|&v| v >= best - 1e-12)
        .expect("non-empty")
}

fn joint_weights(
    ensemble: &EnsembleDecomposition,
    mixtures: &[Vec<(f64, Povm)>],
    weights: &BranchWeights,
    tol: &Tolerances,
) -> GuessResult<Vec<(usize, Vec<usize>, f64)>> {
    match weights {
        BranchWeights::Independent => {
            let counts: Vec<usize> = mixtures.iter().map(|m| m.len()).collect();
            let mut out = Vec::new();
            for (s, &ps) in ensemble.weights().iter().enumerate() {
                for t in tuples(&counts) {
                    let w = t.iter().zip(mixtures).fold(ps, |acc, (&j, m)| acc * m[j].0);
                    if w > 0.0 {
                        out.push((s, t, w));
                    }
                }
            }
            Ok(out)
        }
        BranchWeights::Joint(table) => {
            let mut state_marg = vec![0.0; ensemble.weights().len()];
            let mut round_marg: Vec<Vec<f64>> =
                mixtures.iter().map(|m| vec![0.0; m.len()]).collect();
            for (s, t, w) in table {
                if *s >= state_marg.len()
                    || t.len() != mixtures.len()
                    || t.iter().zip(mixtures).any(|(&j, m)| j >= m.len())
                    || !(*w >= 0.0)
                {
                    return Err(GuessError::NotAValidMixture(
                        "joint table entry out of range".into(),
                    ));
                }
                state_marg[*s] += w;
                for (r, &j) in t.iter().enumerate() {
                    round_marg[r][j] += w;
                }
            }
            let mut residual = state_marg
                .iter()
                .zip(ensemble.weights())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            for (marg, mix) in round_marg.iter().zip(mixtures) {
                for (a, (b, _)) in marg.iter().zip(mix) {
                    residual = residual.max((a - b).abs());
                }
            }
            if residual > tol.norm {
                return Err(GuessError::ConstraintViolated {
                    constraint: "joint branch table marginals".into(),
                    residual,
                });
            }
            Ok(table.clone())
        }
    }
}

/// Classical guessing probability for arbitrary branch measurements (each
/// branch a POVM, applied with square-root Kraus operators).
pub fn classical_guess_general(
    ensemble: &EnsembleDecomposition,
    rounds: &[Vec<(f64, Povm)>],
    weights: &BranchWeights,
) -> GuessResult<GuessReport> {
    let tol = Tolerances::default();
    let dim = ensemble.dim();
    for (r, round) in rounds.iter().enumerate() {
        if round.is_empty() || round.iter().any(|(_, p)| p.dim() != dim) {
            return Err(GuessError::DimensionMismatch(format!(
                "round {r} does not act on dimension {dim}"
            )));
        }
    }
    let kraus: Vec<Vec<Vec<CMatrix>>> = rounds
        .iter()
        .map(|round| round.iter().map(|(_, p)| branch_kraus(p, &tol)).collect())
        .collect::<GuessResult<_>>()?;
    let table = joint_weights(ensemble, rounds, weights, &tol)?;
    let mut g = 0.0;
    for (s, t, w) in &table {
        let chain: Vec<&[CMatrix]> = t
            .iter()
            .enumerate()
            .map(|(r, &j)| &kraus[r][j][..])
            .collect();
        let probs = chain_probabilities(ensemble.states()[*s].amplitudes(), &chain);
        g += w * probs.iter().cloned().fold(0.0, f64::max);
    }
    GuessReport::new(g, "classical: fixed ensemble and branch decomposition")
}

/// Classical guessing probability `Σ weight · max_{b⃗} P(b⃗ | branch)` over
/// the ensemble and the per-round projective decompositions.
pub fn classical_guess(
    ensemble: &EnsembleDecomposition,
    rounds: &[PvmMixture],
    weights: &BranchWeights,
) -> GuessResult<GuessReport> {
    let general: Vec<Vec<(f64, Povm)>> = rounds.iter().map(|m| m.branches().to_vec()).collect();
    classical_guess_general(ensemble, &general, weights)
}

/// Projectors of one round acting on the listed tensor factors.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOperators {
    pub targets: Vec<usize>,
    pub projectors: Vec<CMatrix>,
}

/// Eve's measurement, one element per flattened outcome tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct EveMeasurement {
    pub targets: Vec<usize>,
    pub elements: Vec<CMatrix>,
}

/// Purification with Eve's projective guess measurement built from the
/// per-component argmax sets.
#[derive(Debug, Clone, PartialEq)]
pub struct EveStrategy {
    pub purification: StateVector,
    pub dims: Vec<usize>,
    pub rounds: Vec<RoundOperators>,
    pub eve: EveMeasurement,
}

fn eve_projectors(assignments: &[usize], outcomes: usize, eve_dims: &[usize]) -> Vec<CMatrix> {
    let n: usize = eve_dims.iter().product();
    (0..outcomes)
        .map(|b| {
            let mut m = CMatrix::zeros(n, n);
            for (k, &a) in assignments.iter().enumerate() {
                if a == b {
                    m[(k, k)] = c(1.0);
                }
            }
            m
        })
        .collect()
}

/// Builds the purification `Σ_λ √p_λ |φ_λ⟩|e_λ⟩` and Eve's projectors onto
/// the `λ` whose most likely outcome tuple is `b⃗`; evaluates the resulting
/// quantum guessing probability.
pub fn eve_optimal_pvm(
    ensemble: &EnsembleDecomposition,
    rounds: &[Povm],
) -> GuessResult<(EveStrategy, GuessReport)> {
    let dim = ensemble.dim();
    for (r, p) in rounds.iter().enumerate() {
        if !p.is_projective() {
            return Err(GuessError::NotProjective(r));
        }
        if p.dim() != dim {
            return Err(GuessError::DimensionMismatch(format!(
                "round {r} dimension {}",
                p.dim()
            )));
        }
    }
    let l = ensemble.weights().len();
    let mut amps = CVector::zeros(dim * l);
    for (k, (w, s)) in ensemble.weights().iter().zip(ensemble.states()).enumerate() {
        for i in 0..dim {
            amps[i * l + k] = s.amplitudes()[i] * w.sqrt();
        }
    }
    let purification = StateVector::normalized(amps)?;
    let chain: Vec<&[CMatrix]> = rounds.iter().map(|p| p.elements()).collect();
    let assignments: Vec<usize> = ensemble
        .states()
        .iter()
        .map(|s| lexmin_argmax(&chain_probabilities(s.amplitudes(), &chain)))
        .collect();
    let outcomes: usize = rounds.iter().map(|p| p.outcomes()).product();
    let strategy = EveStrategy {
        purification,
        dims: vec![dim, l],
        rounds: rounds
            .iter()
            .map(|p| RoundOperators {
                targets: vec![0],
                projectors: p.elements().to_vec(),
            })
            .collect(),
        eve: EveMeasurement {
            targets: vec![1],
            elements: eve_projectors(&assignments, outcomes, &[l]),
        },
    };
    let report = quantum_guess_eval(&strategy, None)?;
    Ok((strategy, report))
}

fn check_projective_complete(ops: &[CMatrix], tol: &Tolerances, what: &str) -> GuessResult<()> {
    let n = ops[0].nrows();
    let mut sum = CMatrix::zeros(n, n);
    for p in ops {
        let r = max_abs(&(p * p - p)).max(max_abs(&(p - p.adjoint())));
        if r > tol.num {
            return Err(GuessError::ConstraintViolated {
                constraint: format!("{what} projectivity"),
                residual: r,
            });
        }
        sum += p;
    }
    let r = max_abs(&(sum - identity(n)));
    if r > tol.num {
        return Err(GuessError::ConstraintViolated {
            constraint: format!("{what} completeness"),
            residual: r,
        });
    }
    Ok(())
}

/// Evaluates `Σ_{b⃗} ⟨ψ| (Π^{b⃗})† (Π^{b⃗}) ⊗ M_E^{b⃗} |ψ⟩` for a fixed strategy.
///
/// Every round must be projective and complete and Eve's measurement a
/// complete POVM. When `expected` is given, the outcome statistics with
/// Eve ignored must reproduce it.
pub fn quantum_guess_eval(
    strategy: &EveStrategy,
    expected: Option<&[f64]>,
) -> GuessResult<GuessReport> {
    let tol = Tolerances::default();
    let total: usize = strategy.dims.iter().product();
    if strategy.purification.dim() != total {
        return Err(GuessError::DimensionMismatch(format!(
            "state dimension {} vs register {total}",
            strategy.purification.dim()
        )));
    }
    for (r, round) in strategy.rounds.iter().enumerate() {
        let sub: usize = round.targets.iter().map(|&t| strategy.dims[t]).product();
        if round.projectors.iter().any(|p| p.nrows() != sub) {
            return Err(GuessError::DimensionMismatch(format!(
                "round {r} operator size"
            )));
        }
        check_projective_complete(&round.projectors, &tol, &format!("round {r}"))?;
    }
    let eve_sub: usize = strategy
        .eve
        .targets
        .iter()
        .map(|&t| strategy.dims[t])
        .product();
    if strategy.eve.elements.iter().any(|m| m.nrows() != eve_sub) {
        return Err(GuessError::DimensionMismatch("Eve operator size".into()));
    }
    let n_out: usize = strategy.rounds.iter().map(|r| r.projectors.len()).product();
    if strategy.eve.elements.len() != n_out {
        return Err(GuessError::DimensionMismatch(format!(
            "Eve has {} outcomes, chain has {n_out}",
            strategy.eve.elements.len()
        )));
    }
    validate_povm(strategy.eve.elements.clone(), &tol).map_err(|e| {
        GuessError::ConstraintViolated {
            constraint: format!("Eve measurement: {e}"),
            residual: f64::NAN,
        }
    })?;

    let mut stats = Vec::with_capacity(n_out);
    let mut finals = Vec::with_capacity(n_out);
    fn rec(v: CVector, s: &EveStrategy, r: usize, finals: &mut Vec<CVector>) {
        if r == s.rounds.len() {
            finals.push(v);
            return;
        }
        for p in &s.rounds[r].projectors {
            rec(
                apply_on_factors(&v, &s.dims, &s.rounds[r].targets, p),
                s,
                r + 1,
                finals,
            );
        }
    }
    rec(
        strategy.purification.amplitudes().clone(),
        strategy,
        0,
        &mut finals,
    );
    let mut g = 0.0;
    for (b, v) in finals.iter().enumerate() {
        stats.push(v.norm_squared());
        let mv = apply_on_factors(
            v,
            &strategy.dims,
            &strategy.eve.targets,
            &strategy.eve.elements[b],
        );
        g += v.dotc(&mv).re;
    }
    if let Some(exp) = expected {
        if exp.len() != stats.len() {
            return Err(GuessError::DimensionMismatch(
                "expected statistics length".into(),
            ));
        }
        let r = exp
            .iter()
            .zip(&stats)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if r > tol.num {
            return Err(GuessError::ConstraintViolated {
                constraint: "outcome statistics".into(),
                residual: r,
            });
        }
    }
    GuessReport::new(g, "quantum: constructed Eve measurement")
}

/// Naimark dilation of one round: system ⊗ outcome register ⊗ branch register.
#[derive(Debug, Clone, PartialEq)]
pub struct NaimarkRound {
    pub dim: usize,
    pub outcomes: usize,
    pub weights: Vec<f64>,
    /// Unitary on `S ⊗ A' ⊗ A''`.
    pub unitary: CMatrix,
    /// `U† (I ⊗ |b⟩⟨b| ⊗ I) U` on `S ⊗ A' ⊗ A''`.
    pub projectors: Vec<CMatrix>,
    /// `|0⟩⟨0| ⊗ Σ_j p_j |j⟩⟨j|` on `A' ⊗ A''`.
    pub ancilla_state: CMatrix,
    /// Branch projectors used to build the dilation.
    pub branches: Vec<Vec<CMatrix>>,
}

impl NaimarkRound {
    pub fn ancilla_dim(&self) -> usize {
        self.outcomes * self.weights.len()
    }

    /// `tr_A[Π^b (I ⊗ σ_A)]` for every outcome.
    pub fn recovered_povm(&self) -> Vec<CMatrix> {
        let anc = self.ancilla_dim();
        let lifted = kron(&identity(self.dim), &self.ancilla_state);
        self.projectors
            .iter()
            .map(|p| {
                crate::qcore::partial_trace(&(p * &lifted), &[self.dim, anc], &[0]).expect("square")
            })
            .collect()
    }

    pub fn recovery_residual(&self, target: &[CMatrix]) -> f64 {
        self.recovered_povm()
            .iter()
            .zip(target)
            .fold(0.0, |m, (a, b)| m.max(max_abs(&(a - b))))
    }
}

/// Dilations of every round plus the register layout
/// `[S, A'_1, A''_1, …, A'_n, A''_n, E_1, …, E_n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaimarkExtension {
    pub rounds: Vec<NaimarkRound>,
}

/// Completes the orthonormal columns of `partial` to a unitary.
fn complete_unitary(partial: &CMatrix) -> CMatrix {
    let n = partial.nrows();
    let mut cols: Vec<CVector> = (0..partial.ncols())
        .map(|j| partial.column(j).into_owned())
        .collect();
    for e in 0..n {
        if cols.len() == n {
            break;
        }
        let mut v = CVector::zeros(n);
        v[e] = c(1.0);
        // Two Gram-Schmidt passes for stability.
        for _ in 0..2 {
            for u in &cols {
                let proj = u.dotc(&v);
                v -= u * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            cols.push(v.unscale(norm));
        }
    }
    CMatrix::from_columns(&cols)
}

fn dilate(mix: &PvmMixture) -> NaimarkRound {
    let d = mix.dim();
    let m = mix.outcomes();
    let j_count = mix.len();
    let block = d * m;
    let mut unitary = CMatrix::zeros(block * j_count, block * j_count);
    let mut branches = Vec::with_capacity(j_count);
    for (j, (_, pvm)) in mix.branches().iter().enumerate() {
        // V_j |s⟩ = Σ_b P_j^b |s⟩ ⊗ |b⟩, placed on inputs |s, 0⟩.
        let mut partial = CMatrix::zeros(block, d);
        for s in 0..d {
            for b in 0..m {
                let col = pvm.element(b).column(s);
                for r in 0..d {
                    partial[(r * m + b, s)] = col[r];
                }
            }
        }
        let full = complete_unitary(&partial);
        // Column k of `full` is the image of |s, 0⟩ for k < d; map the
        // remaining columns onto inputs |s, b ≠ 0⟩.
        let mut u_j = CMatrix::zeros(block, block);
        let mut next = d;
        for s in 0..d {
            for b in 0..m {
                let src = if b == 0 {
                    s
                } else {
                    next += 1;
                    next - 1
                };
                u_j.set_column(s * m + b, &full.column(src));
            }
        }
        // Embed as U_j ⊗ |j⟩⟨j| in S ⊗ A' ⊗ A'' ordering.
        for r in 0..block {
            for col in 0..block {
                unitary[(r * j_count + j, col * j_count + j)] = u_j[(r, col)];
            }
        }
        branches.push(pvm.elements().to_vec());
    }
    let mut projectors = Vec::with_capacity(m);
    for b in 0..m {
        let mut sel = CMatrix::zeros(m, m);
        sel[(b, b)] = c(1.0);
        let mid = kron(&kron(&identity(d), &sel), &identity(j_count));
        let p = unitary.adjoint() * mid * &unitary;
        projectors.push((&p + p.adjoint()).scale(0.5));
    }
    let weights: Vec<f64> = mix.branches().iter().map(|(w, _)| *w).collect();
    let mut zero = CMatrix::zeros(m, m);
    zero[(0, 0)] = c(1.0);
    let diag = CMatrix::from_diagonal(&CVector::from_iterator(
        j_count,
        weights.iter().map(|&w| c(w)),
    ));
    NaimarkRound {
        dim: d,
        outcomes: m,
        weights,
        unitary,
        projectors,
        ancilla_state: kron(&zero, &diag),
        branches,
    }
}

/// Projective extension of each round's decomposition on system ⊗ ancilla.
pub fn naimark_dilation(decomps: &[PvmMixture]) -> GuessResult<NaimarkExtension> {
    let tol = Tolerances::default();
    if decomps.is_empty() {
        return Err(GuessError::NotAValidMixture("no rounds".into()));
    }
    let d = decomps[0].dim();
    let mut rounds = Vec::with_capacity(decomps.len());
    for (r, mix) in decomps.iter().enumerate() {
        if mix.dim() != d {
            return Err(GuessError::DimensionMismatch(format!(
                "round {r} dimension"
            )));
        }
        let round = dilate(mix);
        let u = &round.unitary;
        let unit_res = max_abs(&(u.adjoint() * u - identity(u.nrows())));
        if unit_res > tol.num {
            return Err(GuessError::NotAValidMixture(format!(
                "dilation not unitary ({unit_res:.3e})"
            )));
        }
        let rec = round.recovery_residual(&mix.reconstruct());
        if rec > tol.num {
            return Err(GuessError::NotAValidMixture(format!(
                "POVM recovery residual {rec:.3e}"
            )));
        }
        rounds.push(round);
    }
    Ok(NaimarkExtension { rounds })
}

impl NaimarkExtension {
    /// Register dimensions `[S, A'_1, A''_1, …, E_1, …]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.rounds[0].dim];
        for r in &self.rounds {
            dims.push(r.outcomes);
            dims.push(r.weights.len());
        }
        for r in &self.rounds {
            dims.push(r.weights.len());
        }
        dims
    }

    /// `|ψ⟩ ⊗ Σ_{j⃗} √p(j⃗) |0, j_1, …, 0, j_n⟩ |j_1 … j_n⟩_E`.
    pub fn purified_state(&self, psi: &StateVector) -> GuessResult<StateVector> {
        if psi.dim() != self.rounds[0].dim {
            return Err(GuessError::DimensionMismatch("state dimension".into()));
        }
        let dims = self.dims();
        let strides = crate::qcore::strides_of(&dims);
        let n = self.rounds.len();
        let counts: Vec<usize> = self.rounds.iter().map(|r| r.weights.len()).collect();
        let mut amps = CVector::zeros(dims.iter().product());
        for js in tuples(&counts) {
            let w: f64 = js
                .iter()
                .zip(&self.rounds)
                .map(|(&j, r)| r.weights[j])
                .product();
            if w == 0.0 {
                continue;
            }
            let mut offset = 0;
            for (r, &j) in js.iter().enumerate() {
                offset += j * strides[2 + 2 * r];
                offset += j * strides[1 + 2 * n + r];
            }
            for s in 0..psi.dim() {
                amps[s * strides[0] + offset] += psi.amplitudes()[s] * w.sqrt();
            }
        }
        Ok(StateVector::normalized(amps)?)
    }

    /// Eve's joint measurement over all branch registers: `j⃗` is assigned
    /// to the most likely outcome tuple of `psi` under branches `j⃗`.
    pub fn eve_measurement(&self, psi: &StateVector) -> EveMeasurement {
        let n = self.rounds.len();
        let counts: Vec<usize> = self.rounds.iter().map(|r| r.weights.len()).collect();
        let outcomes: usize = self.rounds.iter().map(|r| r.outcomes).product();
        let assignments: Vec<usize> = tuples(&counts)
            .iter()
            .map(|js| {
                let chain: Vec<&[CMatrix]> = js
                    .iter()
                    .zip(&self.rounds)
                    .map(|(&j, r)| &r.branches[j][..])
                    .collect();
                lexmin_argmax(&chain_probabilities(psi.amplitudes(), &chain))
            })
            .collect();
        EveMeasurement {
            targets: (1 + 2 * n..1 + 3 * n).collect(),
            elements: eve_projectors(&assignments, outcomes, &counts),
        }
    }

    /// Complete Eve strategy for the pure state `psi`.
    pub fn strategy(&self, psi: &StateVector) -> GuessResult<EveStrategy> {
        Ok(EveStrategy {
            purification: self.purified_state(psi)?,
            dims: self.dims(),
            rounds: self
                .rounds
                .iter()
                .enumerate()
                .map(|(r, nr)| RoundOperators {
                    targets: vec![0, 1 + 2 * r, 2 + 2 * r],
                    projectors: nr.projectors.clone(),
                })
                .collect(),
            eve: self.eve_measurement(psi),
        })
    }

    /// Outcome statistics of the undilated chain under the mixture
    /// instruments, for the post-state consistency check.
    pub fn expected_statistics(&self, psi: &StateVector) -> Vec<f64> {
        let counts: Vec<usize> = self.rounds.iter().map(|r| r.weights.len()).collect();
        let outcomes: usize = self.rounds.iter().map(|r| r.outcomes).product();
        let mut stats = vec![0.0; outcomes];
        for js in tuples(&counts) {
            let w: f64 = js
                .iter()
                .zip(&self.rounds)
                .map(|(&j, r)| r.weights[j])
                .product();
            let chain: Vec<&[CMatrix]> = js
                .iter()
                .zip(&self.rounds)
                .map(|(&j, r)| &r.branches[j][..])
                .collect();
            for (s, p) in stats
                .iter_mut()
                .zip(chain_probabilities(psi.amplitudes(), &chain))
            {
                *s += w * p;
            }
        }
        stats
    }
}

/// Branch-resolved guess for the CGLMP chain at one setting.
///
/// `p_branch(a, b₁, b₂) = tr[(I⊗P^{b₁}) ρ (I⊗P^{b₁}) (A_x^a ⊗ M_{y₂}^{b₂})]`
/// and `G = Σ_branch w · max p_branch`; the local scope sums over `a` first.
pub fn guess_cglmp(
    scenario: &SequentialScenario,
    decomposition: &PvmMixture,
    setting: (usize, usize, usize),
    scope: GuessScope,
) -> GuessResult<GuessReport> {
    let table = branch_tables(scenario, decomposition, setting)?;
    let mut g = 0.0;
    for (w, p) in &table {
        g += w * best_guess(p, scope);
    }
    GuessReport::new(g, format!("decomposition attack, {} branches", table.len()))
}

/// Largest entry of a 3-index table `p[a][b1][b2]` (flattened), after
/// summing over `a` for the local scope.
pub fn best_guess(p: &[f64], scope: GuessScope) -> f64 {
    let n_a = p.len() / 9;
    match scope {
        GuessScope::Global => p.iter().cloned().fold(0.0, f64::max),
        GuessScope::Local => (0..9)
            .map(|k| (0..n_a).map(|a| p[a * 9 + k]).sum::<f64>())
            .fold(0.0, f64::max),
    }
}

/// Normalized per-branch tables `p_branch(a, b₁, b₂)` with their weights.
pub fn branch_tables(
    scenario: &SequentialScenario,
    decomposition: &PvmMixture,
    setting: (usize, usize, usize),
) -> GuessResult<Vec<(f64, Vec<f64>)>> {
    let (x, _y1, y2) = setting;
    if scenario.rounds.len() != 2 {
        return Err(GuessError::DimensionMismatch(
            "need exactly two Bob rounds".into(),
        ));
    }
    let tol = Tolerances::default();
    let alice = scenario
        .alice
        .get(x)
        .ok_or_else(|| GuessError::DimensionMismatch(format!("no Alice setting {x}")))?;
    let last = scenario.rounds[1]
        .get(y2)
        .ok_or_else(|| GuessError::DimensionMismatch(format!("no Bob² setting {y2}")))?;
    let bob2: Vec<CMatrix> = (0..last.outcomes()).map(|b| last.effect(b)).collect();
    check_projective_complete(&bob2, &tol, "Bob² measurement")
        .map_err(|_| GuessError::NotProjective(1))?;
    if !alice.is_projective() {
        return Err(GuessError::NotProjective(0));
    }
    let da = scenario.alice_dim();
    let db = scenario.bob_dim();
    if decomposition.dim() != db {
        return Err(GuessError::DimensionMismatch(
            "decomposition acts on the wrong space".into(),
        ));
    }
    let rho = scenario.state.matrix();
    let id_a = identity(da);
    let finals: Vec<Vec<CMatrix>> = alice
        .elements()
        .iter()
        .map(|a| bob2.iter().map(|m| kron(a, m)).collect())
        .collect();
    let mut out = Vec::with_capacity(decomposition.len());
    for (w, pvm) in decomposition.branches() {
        let mut table = vec![0.0; alice.outcomes() * pvm.outcomes() * bob2.len()];
        for b1 in 0..pvm.outcomes() {
            let k = kron(&id_a, pvm.element(b1));
            let post = &k * rho * k.adjoint();
            for a in 0..alice.outcomes() {
                for (b2, op) in finals[a].iter().enumerate() {
                    table[(a * pvm.outcomes() + b1) * bob2.len() + b2] = (op * &post).trace().re;
                }
            }
        }
        out.push((*w, table));
    }
    Ok(out)
}

/// Observed table `p(a, b₁, b₂ | x, y₁, y₂)` of the scenario at one setting.
pub fn observed_table(
    scenario: &SequentialScenario,
    setting: (usize, usize, usize),
) -> GuessResult<Vec<f64>> {
    let dist = sequential_distribution(scenario)?;
    Ok(dist.slice(&[setting.0, setting.1, setting.2]).to_vec())
}

/// Trusted-scheme guess over a grid of Bob¹ sharpness values.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GuessPoint {
    pub epsilon: f64,
    pub guess: f64,
    pub min_entropy: f64,
    pub modal_probability: f64,
}

/// Choice of the auxiliary basis of the extremal decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaBasis {
    /// The measured setting's own eigenbasis.
    Eigen,
    /// The computational basis.
    Computational,
}

impl std::str::FromStr for ThetaBasis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "eigen" => Ok(ThetaBasis::Eigen),
            "computational" => Ok(ThetaBasis::Computational),
            other => Err(format!(
                "unknown theta basis '{other}' (expected eigen or computational)"
            )),
        }
    }
}

pub fn theta_vectors(theta: ThetaBasis, y1: usize) -> GuessResult<Vec<CVector>> {
    Ok(match theta {
        ThetaBasis::Eigen => bob_basis(y1)?,
        ThetaBasis::Computational => (0..3)
            .map(|k| CVector::from_fn(3, |j, _| c(if j == k { 1.0 } else { 0.0 })))
            .collect(),
    })
}

/// Explicit auxiliary basis shared by both settings, or `None` when each
/// setting uses its own eigenbasis.
pub fn theta_override(theta: ThetaBasis) -> GuessResult<Option<Vec<CVector>>> {
    Ok(match theta {
        ThetaBasis::Eigen => None,
        ThetaBasis::Computational => Some(theta_vectors(theta, 0)?),
    })
}

/// Extremal decomposition of Bob¹'s setting-`y1` POVM at sharpness `eps`.
pub fn bob1_decomposition(eps: f64, y1: usize, theta: ThetaBasis) -> GuessResult<PvmMixture> {
    let th = theta_override(theta)?;
    let decs = bob_decompositions(eps, th.as_deref())?;
    Ok(decs[y1].clone())
}

/// Mixture-instrument CGLMP chain with a sharp second round, whose
/// statistics the decomposition attack realizes exactly.
pub fn mixture_scenario(
    kind: StateKind,
    eps: f64,
    theta: ThetaBasis,
) -> GuessResult<SequentialScenario> {
    let th = theta_override(theta)?;
    Ok(crate::seqsim::cglmp_scenario(
        kind,
        &[eps, 1.0],
        crate::seqsim::InstrumentMode::Mixture,
        th.as_deref(),
    )?)
}

/// `guess_cglmp` along a grid; the observed statistics use the mixture
/// instrument built from the same decomposition.
pub fn guess_curve(
    kind: StateKind,
    grid: &[f64],
    setting: (usize, usize, usize),
    scope: GuessScope,
    theta: ThetaBasis,
) -> GuessResult<Vec<GuessPoint>> {
    grid.par_iter()
        .map(|&eps| {
            let scenario = mixture_scenario(kind, eps, theta)?;
            let dec = bob1_decomposition(eps, setting.1, theta)?;
            let report = guess_cglmp(&scenario, &dec, setting, scope)?;
            let obs = observed_table(&scenario, setting)?;
            Ok(GuessPoint {
                epsilon: eps,
                guess: report.guess_probability,
                min_entropy: report.min_entropy,
                modal_probability: best_guess(&obs, scope),
            })
        })
        .collect()
}

/// Haar-random unitary via QR of a complex Gaussian matrix.
pub fn random_unitary(dim: usize, rng: &mut ChaCha8Rng) -> CMatrix {
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        C64::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        )
    });
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let phases = DMatrix::from_diagonal(&CVector::from_fn(dim, |i, _| {
        let d = r[(i, i)];
        if d.norm() > 0.0 {
            d / d.norm()
        } else {
            c(1.0)
        }
    }));
    q * phases
}

pub fn random_state(dim: usize, rng: &mut ChaCha8Rng) -> StateVector {
    let v = CVector::from_fn(dim, |_, _| {
        C64::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        )
    });
    StateVector::normalized(v).expect("non-zero Gaussian vector")
}

/// Rank-1 PVM onto the columns of a random unitary.
pub fn random_pvm(dim: usize, rng: &mut ChaCha8Rng) -> Povm {
    let u = random_unitary(dim, rng);
    let vecs: Vec<CVector> = (0..dim).map(|j| u.column(j).into_owned()).collect();
    Povm::from_basis(&vecs, &Tolerances::default()).expect("unitary columns")
}

pub fn random_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.05).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

pub fn random_mixture(dim: usize, max_branches: usize, rng: &mut ChaCha8Rng) -> PvmMixture {
    let n = rng.gen_range(1..=max_branches);
    let w = random_weights(n, rng);
    PvmMixture::new(
        w.into_iter().map(|wi| (wi, random_pvm(dim, rng))).collect(),
        &Tolerances::default(),
    )
    .expect("random mixture")
}

/// Residuals of the random-instance theorem battery.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TheoremReport {
    pub instances: usize,
    pub max_projective_residual: f64,
    pub max_dilation_residual: f64,
    pub max_recovery_residual: f64,
}

/// One random mixed-state/projective-chain instance; returns `|G_Q − G_C|`.
pub fn projective_instance(rng: &mut ChaCha8Rng) -> GuessResult<f64> {
    let dim = 3;
    let rank = rng.gen_range(1..=3);
    let u = random_unitary(dim, rng);
    let w = random_weights(rank, rng);
    let mut m = CMatrix::zeros(dim, dim);
    for (k, wk) in w.iter().enumerate() {
        m += outer(&u.column(k).into_owned()).scale(*wk);
    }
    let rho = DensityOperator::new((&m + m.adjoint()).scale(0.5), &Tolerances::default())?;
    let ensemble = EnsembleDecomposition::eigen(&rho, &Tolerances::default());
    let chain = vec![random_pvm(dim, rng), random_pvm(dim, rng)];
    let (_, quantum) = eve_optimal_pvm(&ensemble, &chain)?;
    let mixtures: Vec<PvmMixture> = chain
        .into_iter()
        .map(PvmMixture::trivial)
        .collect::<Result<_, _>>()?;
    let classical = classical_guess(&ensemble, &mixtures, &BranchWeights::Independent)?;
    Ok((quantum.guess_probability - classical.guess_probability).abs())
}

/// One random pure-state/decomposed-POVM instance; returns
/// `(|G_Q − G_C|, max POVM recovery residual)`.
pub fn dilation_instance(rng: &mut ChaCha8Rng) -> GuessResult<(f64, f64)> {
    let dim = 3;
    let psi = random_state(dim, rng);
    let mixes = vec![random_mixture(dim, 4, rng), random_mixture(dim, 4, rng)];
    let ext = naimark_dilation(&mixes)?;
    let recovery = ext
        .rounds
        .iter()
        .zip(&mixes)
        .map(|(r, m)| r.recovery_residual(&m.reconstruct()))
        .fold(0.0, f64::max);
    let strategy = ext.strategy(&psi)?;
    let expected = ext.expected_statistics(&psi);
    let quantum = quantum_guess_eval(&strategy, Some(&expected))?;
    let classical = classical_guess(
        &EnsembleDecomposition::pure(psi),
        &mixes,
        &BranchWeights::Independent,
    )?;
    Ok((
        (quantum.guess_probability - classical.guess_probability).abs(),
        recovery,
    ))
}

/// Seeded battery; instance `i` uses seed `seed + i`, so results do not
/// depend on the thread count.
pub fn theorem_battery(seed: u64, instances: usize) -> GuessResult<TheoremReport> {
    use rand::SeedableRng;
    let results: Vec<(f64, f64, f64)> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let p = projective_instance(&mut rng)?;
            let (d, r) = dilation_instance(&mut rng)?;
            Ok((p, d, r))
        })
        .collect::<GuessResult<_>>()?;
    Ok(TheoremReport {
        instances,
        max_projective_residual: results.iter().map(|r| r.0).fold(0.0, f64::max),
        max_dilation_residual: results.iter().map(|r| r.1).fold(0.0, f64::max),
        max_recovery_residual: results.iter().map(|r| r.2).fold(0.0, f64::max),
    })
}

/// The qubit warm-up: `|Φ+⟩`, Bob's σ_z measurement decomposed into the
/// computational PVM and its relabeling, with both rounds sharing the same
/// branch.
pub fn chsh_correlated_attack(eps: f64) -> GuessResult<GuessReport> {
    let tol = Tolerances::default();
    let s = 0.5f64.sqrt();
    let phi = StateVector::new(CVector::from_vec(vec![c(s), c(0.0), c(0.0), c(s)]), &tol)?;
    let zero = CVector::from_vec(vec![c(1.0), c(0.0)]);
    let one = CVector::from_vec(vec![c(0.0), c(1.0)]);
    let p0 = Povm::from_basis(&[zero.clone(), one.clone()], &tol)?.embed_right(2);
    let p1 = Povm::from_basis(&[one, zero], &tol)?.embed_right(2);
    let mix = PvmMixture::new(vec![(eps, p0), (1.0 - eps, p1)], &tol)?;
    let joint = BranchWeights::Joint(vec![(0, vec![0, 0], eps), (0, vec![1, 1], 1.0 - eps)]);
    let mut report = classical_guess(
        &EnsembleDecomposition::pure(phi),
        &[mix.clone(), mix],
        &joint,
    )?;
    report.strategy = "correlated branch attack on the qubit chain".into();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cglmp::{canonical_state, optimal_measurements, CglmpSettings};
    use crate::seqsim::{cglmp_scenario, extremal_decomposition, InstrumentMode};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn z_pvm() -> Povm {
        let tol = Tolerances::default();
        Povm::from_basis(
            &[
                CVector::from_vec(vec![c(1.0), c(0.0)]),
                CVector::from_vec(vec![c(0.0), c(1.0)]),
            ],
            &tol,
        )
        .unwrap()
    }

    #[test]
    fn min_entropy_values() {
        assert_relative_eq!(min_entropy(0.5).unwrap(), 1.0);
        assert_relative_eq!(min_entropy(1.0).unwrap(), 0.0);
        assert_relative_eq!(min_entropy(0.25).unwrap(), 2.0);
        assert!(min_entropy(0.0).is_err());
        assert!(min_entropy(1.5).is_err());
    }

    #[test]
    fn classical_examples() {
        let ens = EnsembleDecomposition::eigen(
            &DensityOperator::maximally_mixed(2),
            &Tolerances::default(),
        );
        let z = PvmMixture::trivial(z_pvm()).unwrap();
        let g = classical_guess(&ens, &[z.clone()], &BranchWeights::Independent).unwrap();
        assert_relative_eq!(g.guess_probability, 1.0, epsilon = 1e-12);
        let plus = StateVector::normalized(CVector::from_vec(vec![c(1.0), c(1.0)])).unwrap();
        let g = classical_guess(
            &EnsembleDecomposition::pure(plus),
            &[z],
            &BranchWeights::Independent,
        )
        .unwrap();
        assert_relative_eq!(g.guess_probability, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn chsh_warm_up() {
        for eps in [0.3, 0.5, 0.9] {
            let r = chsh_correlated_attack(eps).unwrap();
            assert!((r.guess_probability - 0.5).abs() < 4.0 * f64::EPSILON);
            assert!((r.min_entropy - 1.0).abs() < 8.0 * f64::EPSILON);
        }
    }

    #[test]
    fn joint_table_marginals_are_checked() {
        let ens = EnsembleDecomposition::pure(StateVector::basis(2, 0));
        let tol = Tolerances::default();
        let mix = PvmMixture::new(vec![(0.5, z_pvm()), (0.5, z_pvm())], &tol).unwrap();
        let bad = BranchWeights::Joint(vec![(0, vec![0], 1.0)]);
        assert!(matches!(
            classical_guess(&ens, &[mix], &bad),
            Err(GuessError::ConstraintViolated { .. })
        ));
    }

    #[test]
    fn theorem_one_diagonal_case() {
        let ens = EnsembleDecomposition::eigen(
            &DensityOperator::maximally_mixed(2),
            &Tolerances::default(),
        );
        let (strategy, q) = eve_optimal_pvm(&ens, &[z_pvm(), z_pvm()]).unwrap();
        assert_relative_eq!(q.guess_probability, 1.0, epsilon = 1e-12);
        let sum = strategy
            .eve
            .elements
            .iter()
            .fold(CMatrix::zeros(2, 2), |a, m| a + m);
        assert!(max_abs(&(sum - identity(2))) < 1e-15);
    }

    #[test]
    fn theorem_one_non_orthogonal_ensembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..=3);
            let w = random_weights(n, &mut rng);
            let states = (0..n).map(|_| random_state(3, &mut rng)).collect();
            let ens = EnsembleDecomposition::new(w, states, &Tolerances::default()).unwrap();
            let chain = vec![random_pvm(3, &mut rng), random_pvm(3, &mut rng)];
            let (_, q) = eve_optimal_pvm(&ens, &chain).unwrap();
            let mixes: Vec<PvmMixture> = chain
                .into_iter()
                .map(|p| PvmMixture::trivial(p).unwrap())
                .collect();
            let cl = classical_guess(&ens, &mixes, &BranchWeights::Independent).unwrap();
            assert!((q.guess_probability - cl.guess_probability).abs() < 1e-10);
        }
    }

    #[test]
    fn eve_optimal_rejects_povm() {
        let p = crate::seqsim::bob_weak_povms(0.5).unwrap();
        let ens = EnsembleDecomposition::pure(StateVector::basis(3, 0));
        assert!(matches!(
            eve_optimal_pvm(&ens, &p),
            Err(GuessError::NotProjective(0))
        ));
    }

    #[test]
    fn wrong_eve_measurement_is_worse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let psi = random_state(3, &mut rng);
            let mixes = vec![
                random_mixture(3, 3, &mut rng),
                random_mixture(3, 3, &mut rng),
            ];
            let ext = naimark_dilation(&mixes).unwrap();
            let mut strategy = ext.strategy(&psi).unwrap();
            let best = quantum_guess_eval(&strategy, None)
                .unwrap()
                .guess_probability;
            let n = strategy.eve.elements[0].nrows();
            let k = strategy.eve.elements.len();
            strategy.eve.elements = vec![identity(n).unscale(k as f64); k];
            let split = quantum_guess_eval(&strategy, None)
                .unwrap()
                .guess_probability;
            assert!(split <= best + 1e-12);
            assert_relative_eq!(split, 1.0 / k as f64, epsilon = 1e-10);
            strategy.eve.elements = (0..k)
                .map(|b| {
                    if b == 0 {
                        identity(n)
                    } else {
                        CMatrix::zeros(n, n)
                    }
                })
                .collect();
            assert!(
                quantum_guess_eval(&strategy, None)
                    .unwrap()
                    .guess_probability
                    <= best + 1e-12
            );
        }
    }

    #[test]
    fn constraint_violations_are_reported() {
        let ens = EnsembleDecomposition::pure(StateVector::basis(2, 0));
        let (mut strategy, _) = eve_optimal_pvm(&ens, &[z_pvm()]).unwrap();
        strategy.eve.elements[0] = identity(1).scale(0.5);
        assert!(matches!(
            quantum_guess_eval(&strategy, None),
            Err(GuessError::ConstraintViolated { .. })
        ));
        let (strategy, _) = eve_optimal_pvm(&ens, &[z_pvm()]).unwrap();
        assert!(matches!(
            quantum_guess_eval(&strategy, Some(&[0.5, 0.5])),
            Err(GuessError::ConstraintViolated { .. })
        ));
    }

    #[test]
    fn trivial_dilation_matches_pvm() {
        let pvm = random_pvm(3, &mut ChaCha8Rng::seed_from_u64(1));
        let ext = naimark_dilation(&[PvmMixture::trivial(pvm.clone()).unwrap()]).unwrap();
        let r = &ext.rounds[0];
        assert_eq!(r.weights.len(), 1);
        // Restricted to the |0⟩ ancilla input the projectors act as the PVM.
        for b in 0..3 {
            for s in 0..3 {
                for t in 0..3 {
                    let z = r.projectors[b][(s * 3, t * 3)];
                    assert!((z - pvm.element(b)[(s, t)]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dilation_recovers_weak_povm() {
        let povm = &crate::seqsim::bob_weak_povms(0.7).unwrap()[0];
        let mix = extremal_decomposition(povm, &bob_basis(1).unwrap()).unwrap();
        let ext = naimark_dilation(&[mix]).unwrap();
        assert!(ext.rounds[0].recovery_residual(povm.elements()) < 1e-10);
        for p in &ext.rounds[0].projectors {
            assert!(max_abs(&(p * p - p)) < 1e-10);
        }
    }

    #[test]
    fn theorem_two_small_battery() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (d, r) = dilation_instance(&mut rng).unwrap();
            assert!(d < 1e-8 && r < 1e-10, "{d} {r}");
        }
    }

    #[test]
    fn coarse_graining_last_round_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tol = Tolerances::default();
        for _ in 0..20 {
            let psi = random_state(3, &mut rng);
            let ens = EnsembleDecomposition::pure(psi);
            let first = random_mixture(3, 3, &mut rng);
            let (p, q) = (random_pvm(3, &mut rng), random_pvm(3, &mut rng));
            let w = rng.gen::<f64>() * 0.8 + 0.1;
            let fine = PvmMixture::new(vec![(w, p.clone()), (1.0 - w, q.clone())], &tol).unwrap();
            let merged: Vec<CMatrix> = p
                .elements()
                .iter()
                .zip(q.elements())
                .map(|(a, b)| a.scale(w) + b.scale(1.0 - w))
                .collect();
            let coarse = vec![(1.0, validate_povm(merged, &tol).unwrap())];
            let first_g: Vec<(f64, Povm)> = first.branches().to_vec();
            let g_fine =
                classical_guess(&ens, &[first, fine], &BranchWeights::Independent).unwrap();
            let g_coarse =
                classical_guess_general(&ens, &[first_g, coarse], &BranchWeights::Independent)
                    .unwrap();
            assert!(g_coarse.guess_probability <= g_fine.guess_probability + 1e-12);
        }
    }

    #[test]
    fn relabeling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let tol = Tolerances::default();
        for _ in 0..10 {
            let ens = EnsembleDecomposition::pure(random_state(3, &mut rng));
            let mixes = vec![
                random_mixture(3, 3, &mut rng),
                random_mixture(3, 3, &mut rng),
            ];
            let g0 = classical_guess(&ens, &mixes, &BranchWeights::Independent).unwrap();
            let perm = [2, 0, 1];
            let relabeled: Vec<PvmMixture> = mixes
                .iter()
                .map(|m| {
                    let br = m
                        .branches()
                        .iter()
                        .map(|(w, p)| {
                            let els = perm.iter().map(|&k| p.element(k).clone()).collect();
                            (*w, validate_povm(els, &tol).unwrap())
                        })
                        .collect();
                    PvmMixture::new(br, &tol).unwrap()
                })
                .collect();
            let g1 = classical_guess(&ens, &relabeled, &BranchWeights::Independent).unwrap();
            assert!((g0.guess_probability - g1.guess_probability).abs() < 1e-12);
        }
    }

    /// Brute force: enumerate branches and triples with hand-built operators.
    fn oracle(
        kind: StateKind,
        eps: f64,
        setting: (usize, usize, usize),
        theta: ThetaBasis,
        scope: GuessScope,
    ) -> f64 {
        let cfg = CglmpSettings::default();
        let (alice, bob) = optimal_measurements(&cfg).unwrap();
        let psi = canonical_state(kind, 3).unwrap();
        let (x, y1, y2) = setting;
        let eig = bob_basis(y1).unwrap();
        let th = theta_vectors(theta, y1).unwrap();
        let mut branches: Vec<(f64, Vec<CVector>)> = vec![(eps, eig.clone())];
        for c in 0..3 {
            branches.push((
                (1.0 - eps) / 3.0,
                (0..3).map(|l| th[(l + c) % 3].clone()).collect(),
            ));
        }
        let mut g = 0.0;
        for (w, vecs) in branches {
            let mut best: f64 = 0.0;
            let mut local = [0.0; 9];
            for a in 0..3 {
                for b1 in 0..3 {
                    for b2 in 0..3 {
                        let p1 = outer(&vecs[b1]);
                        let op = kron(alice[x].element(a), &(&p1 * bob[y2].element(b2) * &p1));
                        let p = psi.expectation(&op).re;
                        best = best.max(p);
                        local[b1 * 3 + b2] += p;
                    }
                }
            }
            g += w * match scope {
                GuessScope::Global => best,
                GuessScope::Local => local.iter().cloned().fold(0.0, f64::max),
            };
        }
        g
    }

    #[test]
    fn cglmp_guess_matches_oracle() {
        for theta in [ThetaBasis::Eigen, ThetaBasis::Computational] {
            for setting in [(0, 0, 1), (1, 0, 0), (0, 1, 1)] {
                for scope in [GuessScope::Local, GuessScope::Global] {
                    let eps = 0.8;
                    let s = mixture_scenario(StateKind::Mes, eps, theta).unwrap();
                    let dec = bob1_decomposition(eps, setting.1, theta).unwrap();
                    let g = guess_cglmp(&s, &dec, setting, scope)
                        .unwrap()
                        .guess_probability;
                    assert!((g - oracle(StateKind::Mes, eps, setting, theta, scope)).abs() < 1e-12);
                    let obs = observed_table(&s, setting).unwrap();
                    assert!(g >= best_guess(&obs, scope) - 1e-12);
                }
            }
        }
    }

    #[test]
    fn cglmp_guess_sharp_limit_is_modal() {
        let s = cglmp_scenario(StateKind::Mvs, &[1.0, 1.0], InstrumentMode::Sqrt, None).unwrap();
        let dec = bob1_decomposition(1.0, 0, ThetaBasis::Eigen).unwrap();
        assert_eq!(dec.len(), 1);
        let g = guess_cglmp(&s, &dec, (0, 0, 1), GuessScope::Global).unwrap();
        let obs = observed_table(&s, (0, 0, 1)).unwrap();
        assert_relative_eq!(
            g.guess_probability,
            obs.iter().cloned().fold(0.0, f64::max),
            epsilon = 1e-12
        );
    }
}
