//! Sequential measurement chains: unsharp POVMs, their projective
//! decompositions, instruments, joint distributions of one Alice and a
//! chain of Bobs, violation curves and double-violation windows.

use rayon::prelude::*;
use thiserror::Error;

use crate::cglmp::{
    basis_vectors, canonical_state, cglmp_value, mes_max_violation, mvs_max_violation,
    optimal_measurements, CglmpError, CglmpSettings, JointDistribution, Party, StateKind,
};
use crate::qcore::{
    c, hermitian_eigen, identity, kron, max_abs, outer, psd_sqrt, validate_povm, CMatrix, CVector,
    DensityOperator, Povm, QError, Tolerances,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeqError {
    #[error("sharpness {0} is outside [0, 1]")]
    EpsilonOutOfRange(f64),
    #[error("POVM is not of the white-noise weak form: {0}")]
    NotWeakPovmForm(String),
    #[error("extremal-mixture instrument needs a decomposition")]
    MissingDecomposition,
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no double-violation window for {0:?}")]
    NoWindow(StateKind),
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Quantum(#[from] QError),
    #[error(transparent)]
    Cglmp(#[from] CglmpError),
}

pub type SeqResult<T> = Result<T, SeqError>;

/// Sharpness and eigenbasis of a white-noise weak measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakPovmSpec {
    pub epsilon: f64,
    pub basis: Vec<CVector>,
}

impl WeakPovmSpec {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }
}

/// Elements `ε|l⟩⟨l| + ((1−ε)/d) I`.
pub fn weak_povm(spec: &WeakPovmSpec) -> SeqResult<Povm> {
    let eps = spec.epsilon;
    if !(0.0..=1.0).contains(&eps) {
        return Err(SeqError::EpsilonOutOfRange(eps));
    }
    let d = spec.dim();
    if d == 0 {
        return Err(SeqError::DimensionMismatch("empty basis".into()));
    }
    let noise = identity(d).scale((1.0 - eps) / d as f64);
    let elements = spec
        .basis
        .iter()
        .map(|v| outer(v).scale(eps) + &noise)
        .collect();
    Ok(validate_povm(elements, &Tolerances::default())?)
}

/// Convex mixture of projective measurements with a common outcome set.
#[derive(Debug, Clone, PartialEq)]
pub struct PvmMixture {
    branches: Vec<(f64, Povm)>,
}

impl PvmMixture {
    pub fn new(branches: Vec<(f64, Povm)>, tol: &Tolerances) -> SeqResult<Self> {
        let first = &branches
            .first()
            .ok_or_else(|| SeqError::InvalidMixture("no branches".into()))?
            .1;
        let (dim, outcomes) = (first.dim(), first.outcomes());
        let mut total = 0.0;
        for (w, p) in &branches {
            if !(*w >= -tol.num) || !w.is_finite() {
                return Err(SeqError::InvalidMixture(format!("negative weight {w}")));
            }
            if !p.is_projective() {
                return Err(SeqError::InvalidMixture("branch is not projective".into()));
            }
            if p.dim() != dim || p.outcomes() != outcomes {
                return Err(SeqError::InvalidMixture("branch shapes differ".into()));
            }
            total += w;
        }
        if (total - 1.0).abs() > tol.norm {
            return Err(SeqError::InvalidMixture(format!("weights sum to {total}")));
        }
        Ok(Self { branches })
    }

    /// The projective measurement itself as a one-branch mixture.
    pub fn trivial(pvm: Povm) -> SeqResult<Self> {
        Self::new(vec![(1.0, pvm)], &Tolerances::default())
    }

    pub fn branches(&self) -> &[(f64, Povm)] {
        &self.branches
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.branches[0].1.dim()
    }

    pub fn outcomes(&self) -> usize {
        self.branches[0].1.outcomes()
    }

    /// `Σ_i w_i P_i^b` for every outcome.
    pub fn reconstruct(&self) -> Vec<CMatrix> {
        (0..self.outcomes())
            .map(|b| {
                self.branches
                    .iter()
                    .fold(CMatrix::zeros(self.dim(), self.dim()), |acc, (w, p)| {
                        acc + p.element(b).scale(*w)
                    })
            })
            .collect()
    }

    /// Largest entrywise deviation of the reconstruction from `povm`.
    pub fn reconstruction_residual(&self, povm: &Povm) -> f64 {
        self.reconstruct()
            .iter()
            .zip(povm.elements())
            .fold(0.0, |m, (a, b)| m.max(max_abs(&(a - b))))
    }

    /// The mixed POVM.
    pub fn povm(&self) -> Povm {
        Povm::from_trusted(self.reconstruct(), self.branches.len() == 1)
    }

    /// Merges branches whose projectors coincide.
    pub fn coalesce(&self, tol: &Tolerances) -> PvmMixture {
        let mut merged: Vec<(f64, Povm)> = Vec::new();
        for (w, p) in &self.branches {
            let same = merged.iter_mut().find(|(_, q)| {
                p.elements()
                    .iter()
                    .zip(q.elements())
                    .all(|(a, b)| max_abs(&(a - b)) <= tol.num)
            });
            match same {
                Some((acc, _)) => *acc += w,
                None => merged.push((*w, p.clone())),
            }
        }
        PvmMixture { branches: merged }
    }
}

/// Recovers `(ε, eigenbasis)` from a POVM of the white-noise weak form.
pub fn weak_form_parameters(povm: &Povm, tol: &Tolerances) -> SeqResult<(f64, Vec<CVector>)> {
    let d = povm.dim();
    if povm.outcomes() != d || d < 2 {
        return Err(SeqError::NotWeakPovmForm(format!(
            "{} outcomes on dimension {d}",
            povm.outcomes()
        )));
    }
    let mut eps_values = Vec::with_capacity(d);
    let mut basis = Vec::with_capacity(d);
    for m in povm.elements() {
        let (vals, vecs) = hermitian_eigen(m);
        let top = vals[d - 1];
        eps_values.push((d as f64 * top - 1.0) / (d as f64 - 1.0));
        basis.push(vecs.column(d - 1).into_owned());
    }
    let eps = eps_values.iter().sum::<f64>() / d as f64;
    if eps_values.iter().any(|e| (e - eps).abs() > tol.num)
        || !(-tol.num..=1.0 + tol.num).contains(&eps)
    {
        return Err(SeqError::NotWeakPovmForm(format!(
            "inconsistent sharpness {eps_values:?}"
        )));
    }
    let eps = eps.clamp(0.0, 1.0);
    if eps <= tol.num {
        // All elements are I/d; any orthonormal basis describes them.
        let basis = (0..d)
            .map(|k| CVector::from_fn(d, |j, _| c(if j == k { 1.0 } else { 0.0 })))
            .collect();
        return Ok((0.0, basis));
    }
    let spec = WeakPovmSpec {
        epsilon: eps,
        basis: basis.clone(),
    };
    let rebuilt = weak_povm(&spec)?;
    let residual = rebuilt
        .elements()
        .iter()
        .zip(povm.elements())
        .fold(0.0f64, |m, (a, b)| m.max(max_abs(&(a - b))));
    if residual > tol.num {
        return Err(SeqError::NotWeakPovmForm(format!(
            "residual {residual:.3e}"
        )));
    }
    Ok((eps, basis))
}

/// Decomposes `ε|l⟩⟨l| + ((1−ε)/d) I` into the projective measurement in
/// its own eigenbasis (weight ε) plus the `d` cyclic outcome assignments of
/// `theta` (weight (1−ε)/d each). Branches of zero weight are dropped.
pub fn extremal_decomposition(povm: &Povm, theta: &[CVector]) -> SeqResult<PvmMixture> {
    let tol = Tolerances::default();
    let (eps, basis) = weak_form_parameters(povm, &tol)?;
    let d = basis.len();
    if theta.len() != d || theta.iter().any(|v| v.len() != d) {
        return Err(SeqError::DimensionMismatch(format!(
            "theta basis must have {d} vectors of length {d}"
        )));
    }
    let mut branches = Vec::new();
    if eps > 0.0 {
        branches.push((eps, Povm::from_basis(&basis, &tol)?));
    }
    let rest = (1.0 - eps) / d as f64;
    if rest > 0.0 {
        for shift in 0..d {
            let rotated: Vec<CVector> = (0..d).map(|l| theta[(l + shift) % d].clone()).collect();
            let pvm = Povm::from_basis(&rotated, &tol)
                .map_err(|e| SeqError::InvalidMixture(format!("theta basis: {e}")))?;
            branches.push((rest, pvm));
        }
    }
    let mixture = PvmMixture::new(branches, &tol)?;
    let residual = mixture.reconstruction_residual(povm);
    if residual > 1e-10 {
        return Err(SeqError::NotWeakPovmForm(format!(
            "reconstruction residual {residual:.3e}"
        )));
    }
    Ok(mixture)
}

/// State-update rule attached to a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstrumentMode {
    /// One Kraus operator per outcome, the square root of the element.
    Sqrt,
    /// Kraus operators `√w_i Π_i^b` from a projective decomposition.
    Mixture,
}

impl std::str::FromStr for InstrumentMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sqrt" => Ok(InstrumentMode::Sqrt),
            "mixture" => Ok(InstrumentMode::Mixture),
            other => Err(format!(
                "unknown instrument mode '{other}' (expected sqrt or mixture)"
            )),
        }
    }
}

impl InstrumentMode {
    pub fn name(self) -> &'static str {
        match self {
            InstrumentMode::Sqrt => "sqrt",
            InstrumentMode::Mixture => "mixture",
        }
    }
}

/// Per-outcome Kraus operators.
#[derive(Debug, Clone, PartialEq)]
pub struct Instrument {
    kraus: Vec<Vec<CMatrix>>,
    mode: InstrumentMode,
}

impl Instrument {
    pub fn mode(&self) -> InstrumentMode {
        self.mode
    }

    pub fn outcomes(&self) -> usize {
        self.kraus.len()
    }

    pub fn dim(&self) -> usize {
        self.kraus[0][0].ncols()
    }

    pub fn kraus(&self, outcome: usize) -> &[CMatrix] {
        &self.kraus[outcome]
    }

    /// `Σ_k K_k† K_k` for one outcome.
    pub fn effect(&self, outcome: usize) -> CMatrix {
        self.kraus[outcome]
            .iter()
            .fold(CMatrix::zeros(self.dim(), self.dim()), |acc, k| {
                acc + k.adjoint() * k
            })
    }

    pub fn completeness_residual(&self) -> f64 {
        let total = (0..self.outcomes()).fold(CMatrix::zeros(self.dim(), self.dim()), |acc, b| {
            acc + self.effect(b)
        });
        max_abs(&(total - identity(self.dim())))
    }

    /// Unnormalized post-measurement state for one outcome.
    pub fn apply(&self, rho: &CMatrix, outcome: usize) -> CMatrix {
        self.kraus[outcome]
            .iter()
            .fold(CMatrix::zeros(rho.nrows(), rho.ncols()), |acc, k| {
                acc + k * rho * k.adjoint()
            })
    }

    /// Non-selective channel: sum over outcomes.
    pub fn channel(&self, rho: &CMatrix) -> CMatrix {
        (0..self.outcomes()).fold(CMatrix::zeros(rho.nrows(), rho.ncols()), |acc, b| {
            acc + self.apply(rho, b)
        })
    }

    /// Same instrument acting on the right factor of `left_dim ⊗ dim`.
    pub fn embed_right(&self, left_dim: usize) -> Instrument {
        let id = identity(left_dim);
        Instrument {
            kraus: self
                .kraus
                .iter()
                .map(|ks| ks.iter().map(|k| kron(&id, k)).collect())
                .collect(),
            mode: self.mode,
        }
    }
}

/// Builds an instrument realizing `povm`.
pub fn instrument(
    povm: &Povm,
    mode: InstrumentMode,
    decomposition: Option<&PvmMixture>,
) -> SeqResult<Instrument> {
    let tol = Tolerances::default();
    let kraus = match mode {
        InstrumentMode::Sqrt => povm
            .elements()
            .iter()
            .map(|m| psd_sqrt(m, &tol).map(|r| vec![r]))
            .collect::<Result<Vec<_>, _>>()?,
        InstrumentMode::Mixture => {
            let mix = decomposition.ok_or(SeqError::MissingDecomposition)?;
            if mix.dim() != povm.dim() || mix.outcomes() != povm.outcomes() {
                return Err(SeqError::DimensionMismatch(
                    "decomposition shape differs from POVM".into(),
                ));
            }
            let residual = mix.reconstruction_residual(povm);
            if residual > tol.num {
                return Err(SeqError::InvalidMixture(format!(
                    "decomposition does not reproduce the POVM (residual {residual:.3e})"
                )));
            }
            (0..povm.outcomes())
                .map(|b| {
                    mix.branches()
                        .iter()
                        .map(|(w, p)| p.element(b).scale(w.sqrt()))
                        .collect()
                })
                .collect()
        }
    };
    let inst = Instrument { kraus, mode };
    let residual = inst.completeness_residual();
    if residual > tol.num {
        return Err(SeqError::InvalidMixture(format!(
            "Kraus completeness residual {residual:.3e}"
        )));
    }
    Ok(inst)
}

/// One Alice and a time-ordered chain of Bob rounds sharing a bipartite state.
#[derive(Debug, Clone)]
pub struct SequentialScenario {
    pub state: DensityOperator,
    pub alice: Vec<Povm>,
    /// `rounds[i][y]`: instrument of Bob round `i` for setting `y`.
    pub rounds: Vec<Vec<Instrument>>,
    /// Input distribution of each Bob round, used when averaging inputs.
    pub input_weights: Vec<Vec<f64>>,
}

impl SequentialScenario {
    /// Uniform input weights for every round.
    pub fn new(
        state: DensityOperator,
        alice: Vec<Povm>,
        rounds: Vec<Vec<Instrument>>,
    ) -> SeqResult<Self> {
        let input_weights = rounds
            .iter()
            .map(|r| vec![1.0 / r.len().max(1) as f64; r.len()])
            .collect();
        let s = Self {
            state,
            alice,
            rounds,
            input_weights,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn alice_dim(&self) -> usize {
        self.alice[0].dim()
    }

    pub fn bob_dim(&self) -> usize {
        self.rounds[0][0].dim()
    }

    pub fn validate(&self) -> SeqResult<()> {
        if self.alice.is_empty()
            || self.rounds.is_empty()
            || self.rounds.iter().any(|r| r.is_empty())
        {
            return Err(SeqError::DimensionMismatch(
                "every party needs at least one setting".into(),
            ));
        }
        let da = self.alice_dim();
        let db = self.bob_dim();
        if self.state.dim() != da * db {
            return Err(SeqError::DimensionMismatch(format!(
                "state dimension {} is not {da}x{db}",
                self.state.dim()
            )));
        }
        if self
            .alice
            .iter()
            .any(|p| p.dim() != da || p.outcomes() != self.alice[0].outcomes())
        {
            return Err(SeqError::DimensionMismatch(
                "Alice settings disagree".into(),
            ));
        }
        for round in &self.rounds {
            if round
                .iter()
                .any(|i| i.dim() != db || i.outcomes() != round[0].outcomes())
            {
                return Err(SeqError::DimensionMismatch(
                    "Bob round settings disagree".into(),
                ));
            }
        }
        if self.input_weights.len() != self.rounds.len()
            || self
                .input_weights
                .iter()
                .zip(&self.rounds)
                .any(|(w, r)| w.len() != r.len() || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9)
        {
            return Err(SeqError::DimensionMismatch(
                "input weights do not match rounds".into(),
            ));
        }
        Ok(())
    }
}

/// `p(a, b_1, …, b_n | x, y_1, …, y_n)` of the chain.
pub fn sequential_distribution(s: &SequentialScenario) -> SeqResult<JointDistribution> {
    s.validate()?;
    let da = s.alice_dim();
    let mut outcomes = vec![s.alice[0].outcomes()];
    let mut settings = vec![s.alice.len()];
    for r in &s.rounds {
        outcomes.push(r[0].outcomes());
        settings.push(r.len());
    }
    let embedded: Vec<Vec<Instrument>> = s
        .rounds
        .iter()
        .map(|r| r.iter().map(|i| i.embed_right(da)).collect())
        .collect();
    let db = s.bob_dim();
    let alice_ops: Vec<Vec<CMatrix>> = s
        .alice
        .iter()
        .map(|p| {
            p.elements()
                .iter()
                .map(|m| kron(m, &identity(db)))
                .collect()
        })
        .collect();
    let mut dist = JointDistribution::zeros(outcomes.clone(), settings.clone());
    let bob_settings = crate::cglmp::tuples(&settings[1..]);
    let bob_outcomes = crate::cglmp::tuples(&outcomes[1..]);
    for ys in &bob_settings {
        for bs in &bob_outcomes {
            let mut rho = s.state.matrix().clone();
            for (round, (&y, &b)) in ys.iter().zip(bs).enumerate() {
                rho = embedded[round][y].apply(&rho, b);
            }
            for (x, ops) in alice_ops.iter().enumerate() {
                for (a, op) in ops.iter().enumerate() {
                    let p = (op * &rho).trace().re;
                    let mut st = vec![x];
                    st.extend_from_slice(ys);
                    let mut ot = vec![a];
                    ot.extend_from_slice(bs);
                    dist.set(&st, &ot, p);
                }
            }
        }
    }
    Ok(dist)
}

/// Alice versus Bob round `round` (0-based), averaging earlier Bob inputs
/// with `input_weights` and summing all other Bob outcomes.
pub fn pair_marginal(
    dist: &JointDistribution,
    round: usize,
    input_weights: &[Vec<f64>],
) -> JointDistribution {
    let oc = dist.outcome_counts();
    let sc = dist.setting_counts();
    let n_rounds = oc.len() - 1;
    let mut out = JointDistribution::zeros(vec![oc[0], oc[round + 1]], vec![sc[0], sc[round + 1]]);
    let all_settings = dist.setting_tuples();
    let all_outcomes = dist.outcome_tuples();
    for s in &all_settings {
        // Later rounds do not influence earlier statistics; fix them to 0.
        if s[round + 2..].iter().any(|&y| y != 0) {
            continue;
        }
        let mut w = 1.0;
        for r in 0..round {
            w *= input_weights[r][s[r + 1]];
        }
        let slice = dist.slice(s);
        for (o, &p) in all_outcomes.iter().zip(slice) {
            let key_s = [s[0], s[round + 1]];
            let key_o = [o[0], o[round + 1]];
            let cur = out.get(&key_s, &key_o);
            out.set(&key_s, &key_o, cur + w * p);
        }
    }
    debug_assert!(round < n_rounds);
    out
}

/// CGLMP value of Alice with each Bob round.
pub fn round_violations(s: &SequentialScenario, d: usize) -> SeqResult<Vec<f64>> {
    let dist = sequential_distribution(s)?;
    (0..s.rounds.len())
        .map(|r| Ok(cglmp_value(&pair_marginal(&dist, r, &s.input_weights), d)?))
        .collect()
}

/// The eigenbasis of Bob's setting `y` (the |l⟩ vectors).
pub fn bob_basis(y: usize) -> SeqResult<Vec<CVector>> {
    Ok(basis_vectors(Party::Bob, y, &CglmpSettings::default())?)
}

/// Weak POVMs of one Bob round for both settings.
pub fn bob_weak_povms(eps: f64) -> SeqResult<Vec<Povm>> {
    (0..2)
        .map(|y| {
            weak_povm(&WeakPovmSpec {
                epsilon: eps,
                basis: bob_basis(y)?,
            })
        })
        .collect()
}

/// Decomposition used by the mixture instrument of each setting; `theta`
/// defaults to the setting's own eigenbasis.
pub fn bob_decompositions(eps: f64, theta: Option<&[CVector]>) -> SeqResult<Vec<PvmMixture>> {
    bob_weak_povms(eps)?
        .iter()
        .enumerate()
        .map(|(y, p)| {
            let own;
            let th = match theta {
                Some(t) => t,
                None => {
                    own = bob_basis(y)?;
                    &own[..]
                }
            };
            extremal_decomposition(p, th)
        })
        .collect()
}

/// The qutrit CGLMP chain: canonical state, optimal bases, one weak Bob
/// round per entry of `eps`.
pub fn cglmp_scenario(
    kind: StateKind,
    eps: &[f64],
    mode: InstrumentMode,
    theta: Option<&[CVector]>,
) -> SeqResult<SequentialScenario> {
    let cfg = CglmpSettings::default();
    let (alice, _) = optimal_measurements(&cfg)?;
    let psi = canonical_state(kind, 3)?;
    let mut rounds = Vec::with_capacity(eps.len());
    for &e in eps {
        let povms = bob_weak_povms(e)?;
        let insts = match mode {
            InstrumentMode::Sqrt => povms
                .iter()
                .map(|p| instrument(p, mode, None))
                .collect::<SeqResult<Vec<_>>>()?,
            InstrumentMode::Mixture => {
                let decs = bob_decompositions(e, theta)?;
                povms
                    .iter()
                    .zip(&decs)
                    .map(|(p, d)| instrument(p, mode, Some(d)))
                    .collect::<SeqResult<Vec<_>>>()?
            }
        };
        rounds.push(insts);
    }
    SequentialScenario::new(psi.density(), alice, rounds)
}

/// Closed-form first-round violation `I_3^1(ε)`.
pub fn closed_i1(kind: StateKind, eps: f64) -> f64 {
    match kind {
        StateKind::Mes => mes_max_violation() * eps,
        StateKind::Mvs => mvs_max_violation() * eps,
    }
}

/// The printed MES second-round expression, with the term `(24 + 8√3 ε)`.
pub fn mes_i2_printed(eps: f64) -> f64 {
    let s3 = 3f64.sqrt();
    (56.0 * s3 - (24.0 + 8.0 * s3 * eps)
        + (48.0 + 16.0 * s3) * (1.0 - eps).max(0.0).sqrt() * (1.0 + 2.0 * eps).sqrt()
        + 60.0)
        / 81.0
}

/// The MES second-round expression with the term `(24 + 8√3) ε`; equals
/// the square-root instrument averaged over Bob¹'s inputs.
pub fn mes_i2_corrected(eps: f64) -> f64 {
    let s3 = 3f64.sqrt();
    (56.0 * s3 - (24.0 + 8.0 * s3) * eps
        + (48.0 + 16.0 * s3) * (1.0 - eps).max(0.0).sqrt() * (1.0 + 2.0 * eps).sqrt()
        + 60.0)
        / 81.0
}

/// The MVS second-round expression with its three-digit coefficients.
pub fn mvs_i2(eps: f64) -> f64 {
    1.929 + 0.986 * ((1.0 - eps).max(0.0) * (1.0 + 2.0 * eps)).sqrt() - 0.493 * eps
}

/// Closed-form second-round violation used as ground truth.
pub fn closed_i2(kind: StateKind, eps: f64) -> f64 {
    match kind {
        StateKind::Mes => mes_i2_corrected(eps),
        StateKind::Mvs => mvs_i2(eps),
    }
}

/// One row of a violation curve.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub i1: f64,
    pub i2: f64,
    pub i1_closed: f64,
    pub i2_closed: f64,
}

/// Simulated and closed-form `I_3^1`, `I_3^2` over a grid of Bob¹
/// sharpness values, with Bob² projective.
pub fn violation_curves(
    kind: StateKind,
    mode: InstrumentMode,
    grid: &[f64],
) -> SeqResult<Vec<CurvePoint>> {
    grid.par_iter()
        .map(|&eps| {
            let s = cglmp_scenario(kind, &[eps, 1.0], mode, None)?;
            let v = round_violations(&s, 3)?;
            Ok(CurvePoint {
                epsilon: eps,
                i1: v[0],
                i2: v[1],
                i1_closed: closed_i1(kind, eps),
                i2_closed: closed_i2(kind, eps),
            })
        })
        .collect()
}

/// Bisection for a sign change of `f` on `[lo, hi]` to interval width `tol`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Option<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    let lo_sign = flo.signum();
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid).signum() == lo_sign {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Range of Bob¹ sharpness where both rounds violate the local bound 2,
/// from the closed forms.
pub fn double_violation_window(kind: StateKind) -> SeqResult<(f64, f64)> {
    window_from(kind, |e| closed_i1(kind, e), |e| closed_i2(kind, e))
}

/// Window computed from arbitrary first- and second-round curves.
pub fn window_from(
    kind: StateKind,
    i1: impl Fn(f64) -> f64,
    i2: impl Fn(f64) -> f64,
) -> SeqResult<(f64, f64)> {
    let lo = bisect(|e| i1(e) - 2.0, 0.0, 1.0, 1e-12).ok_or(SeqError::NoWindow(kind))?;
    if i2(lo) <= 2.0 {
        return Err(SeqError::NoWindow(kind));
    }
    let hi = bisect(|e| i2(e) - 2.0, lo, 1.0, 1e-8).ok_or(SeqError::NoWindow(kind))?;
    Ok((lo, hi))
}

/// Exact lower window end `2 / I_3^1(1)`.
pub fn window_lower(kind: StateKind) -> f64 {
    2.0 / closed_i1(kind, 1.0)
}

/// Evenly spaced ε values `lo, lo+step, …, hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl EpsilonGrid {
    pub fn new(lo: f64, hi: f64, step: f64) -> SeqResult<Self> {
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) {
            return Err(SeqError::BadGrid("non-finite bound".into()));
        }
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
            return Err(SeqError::BadGrid(format!(
                "bounds {lo}:{hi} must lie in [0, 1]"
            )));
        }
        if hi < lo {
            return Err(SeqError::BadGrid("upper bound below lower bound".into()));
        }
        if step <= 0.0 {
            return Err(SeqError::BadGrid("step must be positive".into()));
        }
        Ok(Self { lo, hi, step })
    }

    /// Parses `lo:hi:step`.
    pub fn parse(text: &str) -> SeqResult<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(SeqError::BadGrid(format!("'{text}' is not lo:hi:step")));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| SeqError::BadGrid(format!("'{s}' is not a number")))
        };
        Self::new(num(parts[0])?, num(parts[1])?, num(parts[2])?)
    }

    pub fn points(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| (self.lo + i as f64 * self.step).min(self.hi))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cglmp::born_joint_settings;
    use approx::assert_relative_eq;

    fn spec(eps: f64) -> WeakPovmSpec {
        WeakPovmSpec {
            epsilon: eps,
            basis: bob_basis(0).unwrap(),
        }
    }

    #[test]
    fn weak_povm_limits() {
        let sharp = weak_povm(&spec(1.0)).unwrap();
        assert!(sharp.is_projective());
        let trivial = weak_povm(&spec(0.0)).unwrap();
        for m in trivial.elements() {
            assert!(max_abs(&(m - identity(3).unscale(3.0))) < 1e-14);
        }
        let mid = weak_povm(&spec(0.7)).unwrap();
        let (vals, _) = hermitian_eigen(mid.element(2));
        assert_relative_eq!(vals[0], 0.1, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 0.1, epsilon = 1e-12);
        assert_relative_eq!(vals[2], 0.8, epsilon = 1e-12);
        assert!(matches!(
            weak_povm(&spec(1.2)),
            Err(SeqError::EpsilonOutOfRange(_))
        ));
    }

    #[test]
    fn decomposition_reconstructs() {
        let theta = bob_basis(1).unwrap();
        for eps in [0.0, 0.3, 0.7, 1.0] {
            let povm = weak_povm(&spec(eps)).unwrap();
            let mix = extremal_decomposition(&povm, &theta).unwrap();
            assert!(mix.reconstruction_residual(&povm) < 1e-10);
        }
        let povm = weak_povm(&spec(1.0)).unwrap();
        let mix = extremal_decomposition(&povm, &theta).unwrap();
        assert_eq!(mix.len(), 1);
        assert_relative_eq!(mix.branches()[0].0, 1.0);
    }

    #[test]
    fn eigenbasis_decomposition_coalesces_to_three_branches() {
        let eps = 0.8;
        let povm = weak_povm(&spec(eps)).unwrap();
        let mix = extremal_decomposition(&povm, &bob_basis(0).unwrap()).unwrap();
        assert_eq!(mix.len(), 4);
        let merged = mix.coalesce(&Tolerances::default());
        let mut w: Vec<f64> = merged.branches().iter().map(|b| b.0).collect();
        w.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(w.len(), 3);
        assert_relative_eq!(w[0], (1.0 + 2.0 * eps) / 3.0, epsilon = 1e-12);
        assert_relative_eq!(w[1], (1.0 - eps) / 3.0, epsilon = 1e-12);
        assert_relative_eq!(w[2], (1.0 - eps) / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_weak_form() {
        let mut els: Vec<CMatrix> = weak_povm(&spec(0.5)).unwrap().elements().to_vec();
        let shift = outer(&bob_basis(0).unwrap()[0]).scale(0.1);
        els[0] += &shift;
        els[1] -= &shift;
        let p = validate_povm(els, &Tolerances::default()).unwrap();
        assert!(matches!(
            extremal_decomposition(&p, &bob_basis(0).unwrap()),
            Err(SeqError::NotWeakPovmForm(_))
        ));
    }

    #[test]
    fn instruments() {
        let p0 = weak_povm(&spec(0.0)).unwrap();
        let sq = instrument(&p0, InstrumentMode::Sqrt, None).unwrap();
        let rho = canonical_state(StateKind::Mvs, 3).unwrap().density();
        let red = crate::qcore::partial_trace(rho.matrix(), &[3, 3], &[1]).unwrap();
        let mut off = red.clone();
        off[(0, 1)] = c(0.2);
        off[(1, 0)] = c(0.2);
        assert!(max_abs(&(sq.channel(&off) - &off)) < 1e-12);
        assert!(matches!(
            instrument(&p0, InstrumentMode::Mixture, None),
            Err(SeqError::MissingDecomposition)
        ));
        let basis = bob_basis(0).unwrap();
        let mix = extremal_decomposition(&p0, &basis).unwrap();
        let mi = instrument(&p0, InstrumentMode::Mixture, Some(&mix)).unwrap();
        // Off-diagonals in the eigenbasis vanish.
        let out = mi.channel(&off);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let z = basis[i].dotc(&(&out * &basis[j]));
                    assert!(z.norm() < 1e-12);
                }
            }
        }
        for eps in [0.2, 0.9] {
            let p = weak_povm(&spec(eps)).unwrap();
            let m = extremal_decomposition(&p, &bob_basis(1).unwrap()).unwrap();
            assert!(
                instrument(&p, InstrumentMode::Sqrt, None)
                    .unwrap()
                    .completeness_residual()
                    < 1e-10
            );
            assert!(
                instrument(&p, InstrumentMode::Mixture, Some(&m))
                    .unwrap()
                    .completeness_residual()
                    < 1e-10
            );
        }
    }

    #[test]
    fn projective_chain_equals_sandwich() {
        let s = cglmp_scenario(StateKind::Mes, &[1.0, 1.0], InstrumentMode::Sqrt, None).unwrap();
        let dist = sequential_distribution(&s).unwrap();
        let cfg = CglmpSettings::default();
        let (alice, bob) = optimal_measurements(&cfg).unwrap();
        let psi = canonical_state(StateKind::Mes, 3).unwrap();
        for x in 0..2 {
            for y1 in 0..2 {
                for y2 in 0..2 {
                    for a in 0..3 {
                        for b1 in 0..3 {
                            for b2 in 0..3 {
                                let sand =
                                    bob[y1].element(b1) * bob[y2].element(b2) * bob[y1].element(b1);
                                let op = kron(alice[x].element(a), &sand);
                                let p = psi.expectation(&op).re;
                                assert!((p - dist.get(&[x, y1, y2], &[a, b1, b2])).abs() < 1e-12);
                            }
                        }
                    }
                }
            }
        }
        let m = cglmp_scenario(StateKind::Mes, &[1.0, 1.0], InstrumentMode::Mixture, None).unwrap();
        assert!(dist.max_abs_diff(&sequential_distribution(&m).unwrap()) < 1e-10);
    }

    #[test]
    fn normalization_and_first_round() {
        for mode in [InstrumentMode::Sqrt, InstrumentMode::Mixture] {
            for eps in [0.0, 0.5, 0.8] {
                let s = cglmp_scenario(StateKind::Mes, &[eps, 1.0], mode, None).unwrap();
                let dist = sequential_distribution(&s).unwrap();
                dist.validate(&Tolerances::default()).unwrap();
                let v = round_violations(&s, 3).unwrap();
                assert!((v[0] - closed_i1(StateKind::Mes, eps)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sqrt_identity_channel_at_zero() {
        let s = cglmp_scenario(StateKind::Mvs, &[0.0, 1.0], InstrumentMode::Sqrt, None).unwrap();
        let v = round_violations(&s, 3).unwrap();
        assert!((v[1] - mvs_max_violation()).abs() < 1e-9);
    }

    #[test]
    fn sqrt_mode_matches_second_round_forms() {
        for eps in [0.0, 0.25, 0.7, 0.85, 0.95, 1.0] {
            let s =
                cglmp_scenario(StateKind::Mes, &[eps, 1.0], InstrumentMode::Sqrt, None).unwrap();
            let v = round_violations(&s, 3).unwrap();
            assert!((v[1] - mes_i2_corrected(eps)).abs() < 1e-12, "eps {eps}");
            let s =
                cglmp_scenario(StateKind::Mvs, &[eps, 1.0], InstrumentMode::Sqrt, None).unwrap();
            let v = round_violations(&s, 3).unwrap();
            assert!((v[1] - mvs_i2(eps)).abs() < 1e-3, "eps {eps}");
        }
    }

    #[test]
    fn closed_form_values() {
        assert_relative_eq!(mes_i2_printed(0.0), 2.5766378, epsilon = 1e-7);
        assert_relative_eq!(closed_i1(StateKind::Mvs, 1.0), 2.9148542, epsilon = 1e-7);
        assert_relative_eq!(window_lower(StateKind::Mes), 0.6961524, epsilon = 1e-7);
        assert_relative_eq!(window_lower(StateKind::Mvs), 0.6861407, epsilon = 1e-7);
        let (lo, hi) = double_violation_window(StateKind::Mvs).unwrap();
        assert_relative_eq!(lo, 0.6861407, epsilon = 1e-7);
        assert!((hi - 0.902).abs() < 0.015);
        let (_, hi) = double_violation_window(StateKind::Mes).unwrap();
        assert!((hi - 0.904).abs() < 0.015);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(
            EpsilonGrid::parse("0:1:0.001").unwrap().points().len(),
            1001
        );
        assert_eq!(
            EpsilonGrid::parse("0.7:0.9:0.05").unwrap().points().len(),
            5
        );
        assert!(EpsilonGrid::parse("0:2:0.1").is_err());
        assert!(EpsilonGrid::parse("0:1").is_err());
        assert!(EpsilonGrid::parse("0:1:0").is_err());
    }

    #[test]
    fn pair_marginal_of_single_round_matches_born() {
        let s = cglmp_scenario(StateKind::Mes, &[1.0], InstrumentMode::Sqrt, None).unwrap();
        let dist = sequential_distribution(&s).unwrap();
        let cfg = CglmpSettings::default();
        let (alice, bob) = optimal_measurements(&cfg).unwrap();
        let psi = canonical_state(StateKind::Mes, 3).unwrap();
        let born = born_joint_settings(&psi, &alice, &bob).unwrap();
        assert!(pair_marginal(&dist, 0, &s.input_weights).max_abs_diff(&born) < 1e-12);
    }
}
