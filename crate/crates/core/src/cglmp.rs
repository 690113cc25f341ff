//! CGLMP inequality: Fourier-phase measurement bases, the canonical qutrit
//! states and the I_d functional on joint outcome distributions.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::qcore::{c, kron, CVector, Povm, QError, StateVector, Tolerances};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CglmpError {
    #[error("setting index {setting} out of range (have {available})")]
    BadSetting { setting: usize, available: usize },
    #[error("dimension {0} is not supported here")]
    UnsupportedDimension(usize),
    #[error("distribution shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Quantum(#[from] QError),
}

pub type CglmpResult<T> = Result<T, CglmpError>;

/// Outcome dimension and per-setting phase offsets of both parties.
#[derive(Debug, Clone, PartialEq)]
pub struct CglmpSettings {
    pub d: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl CglmpSettings {
    /// The optimal offsets α = (0, 1/2), β = (1/4, −1/4).
    pub fn optimal(d: usize) -> CglmpResult<Self> {
        if d < 2 {
            return Err(CglmpError::UnsupportedDimension(d));
        }
        Ok(Self {
            d,
            alpha: vec![0.0, 0.5],
            beta: vec![0.25, -0.25],
        })
    }
}

impl Default for CglmpSettings {
    fn default() -> Self {
        Self::optimal(3).expect("d = 3 is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    Alice,
    Bob,
}

/// The `d` orthonormal vectors of one measurement setting.
///
/// Alice: `|k⟩ = d^{-1/2} Σ_j exp(2πi j (k + α_x) / d) |j⟩`;
/// Bob: `|l⟩ = d^{-1/2} Σ_j exp(2πi j (−l + β_y) / d) |j⟩`.
pub fn basis_vectors(
    party: Party,
    setting: usize,
    cfg: &CglmpSettings,
) -> CglmpResult<Vec<CVector>> {
    let offsets = match party {
        Party::Alice => &cfg.alpha,
        Party::Bob => &cfg.beta,
    };
    let offset = *offsets.get(setting).ok_or(CglmpError::BadSetting {
        setting,
        available: offsets.len(),
    })?;
    let d = cfg.d;
    let norm = 1.0 / (d as f64).sqrt();
    Ok((0..d)
        .map(|k| {
            let shift = match party {
                Party::Alice => k as f64 + offset,
                Party::Bob => -(k as f64) + offset,
            };
            CVector::from_fn(d, |j, _| {
                Complex64::from_polar(norm, 2.0 * PI * j as f64 * shift / d as f64)
            })
        })
        .collect())
}

/// Rank-1 projective measurement for one setting of one party.
pub fn measurement_basis(party: Party, setting: usize, cfg: &CglmpSettings) -> CglmpResult<Povm> {
    let vectors = basis_vectors(party, setting, cfg)?;
    Ok(Povm::from_basis(&vectors, &Tolerances::default())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Mes,
    Mvs,
}

impl StateKind {
    pub fn name(self) -> &'static str {
        match self {
            StateKind::Mes => "mes",
            StateKind::Mvs => "mvs",
        }
    }
}

impl std::str::FromStr for StateKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mes" => Ok(StateKind::Mes),
            "mvs" => Ok(StateKind::Mvs),
            other => Err(format!(
                "unknown state kind '{other}' (expected mes or mvs)"
            )),
        }
    }
}

/// γ = (√11 − √3)/2, the middle Schmidt coefficient of the qutrit MVS.
pub fn mvs_gamma() -> f64 {
    (11f64.sqrt() - 3f64.sqrt()) / 2.0
}

/// Schmidt coefficients of the canonical state, normalized.
pub fn schmidt_coefficients(kind: StateKind, d: usize) -> CglmpResult<Vec<f64>> {
    match kind {
        StateKind::Mes if d >= 2 => Ok(vec![1.0 / (d as f64).sqrt(); d]),
        StateKind::Mvs if d == 3 => {
            let g = mvs_gamma();
            let n = (2.0 + g * g).sqrt();
            Ok(vec![1.0 / n, g / n, 1.0 / n])
        }
        _ => Err(CglmpError::UnsupportedDimension(d)),
    }
}

/// `Σ_j c_j |jj⟩` for the chosen kind.
pub fn canonical_state(kind: StateKind, d: usize) -> CglmpResult<StateVector> {
    let coeffs = schmidt_coefficients(kind, d)?;
    let mut amps = CVector::zeros(d * d);
    for (j, &cj) in coeffs.iter().enumerate() {
        amps[j * d + j] = c(cj);
    }
    Ok(StateVector::new(amps, &Tolerances::default())?)
}

/// Conditional outcome table `p(o_0, o_1, … | s_0, s_1, …)` for a chain of
/// parties (Alice first, then the Bob rounds in order).
///
/// Storage is row-major with all setting indices first, then all outcome
/// indices.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    outcomes: Vec<usize>,
    settings: Vec<usize>,
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(outcomes: Vec<usize>, settings: Vec<usize>, probs: Vec<f64>) -> CglmpResult<Self> {
        if outcomes.is_empty() || outcomes.len() != settings.len() {
            return Err(CglmpError::ShapeMismatch(
                "outcome and setting counts must be given per party".into(),
            ));
        }
        if outcomes.iter().chain(&settings).any(|&n| n == 0) {
            return Err(CglmpError::ShapeMismatch("zero-sized party".into()));
        }
        let expected: usize =
            outcomes.iter().product::<usize>() * settings.iter().product::<usize>();
        if probs.len() != expected {
            return Err(CglmpError::ShapeMismatch(format!(
                "expected {expected} entries, found {}",
                probs.len()
            )));
        }
        Ok(Self {
            outcomes,
            settings,
            probs,
        })
    }

    pub fn zeros(outcomes: Vec<usize>, settings: Vec<usize>) -> Self {
        let n = outcomes.iter().product::<usize>() * settings.iter().product::<usize>();
        Self {
            outcomes,
            settings,
            probs: vec![0.0; n],
        }
    }

    pub fn parties(&self) -> usize {
        self.outcomes.len()
    }

    pub fn outcome_counts(&self) -> &[usize] {
        &self.outcomes
    }

    pub fn setting_counts(&self) -> &[usize] {
        &self.settings
    }

    pub fn raw(&self) -> &[f64] {
        &self.probs
    }

    pub fn slice_len(&self) -> usize {
        self.outcomes.iter().product()
    }

    fn setting_index(&self, settings: &[usize]) -> usize {
        debug_assert_eq!(settings.len(), self.settings.len());
        settings
            .iter()
            .zip(&self.settings)
            .fold(0, |acc, (&s, &n)| {
                debug_assert!(s < n);
                acc * n + s
            })
    }

    fn outcome_index(&self, outcomes: &[usize]) -> usize {
        debug_assert_eq!(outcomes.len(), self.outcomes.len());
        outcomes
            .iter()
            .zip(&self.outcomes)
            .fold(0, |acc, (&o, &n)| {
                debug_assert!(o < n);
                acc * n + o
            })
    }

    pub fn get(&self, settings: &[usize], outcomes: &[usize]) -> f64 {
        self.probs[self.setting_index(settings) * self.slice_len() + self.outcome_index(outcomes)]
    }

    pub fn set(&mut self, settings: &[usize], outcomes: &[usize], value: f64) {
        let idx = self.setting_index(settings) * self.slice_len() + self.outcome_index(outcomes);
        self.probs[idx] = value;
    }

    /// Outcome table for one setting tuple, in row-major outcome order.
    pub fn slice(&self, settings: &[usize]) -> &[f64] {
        let n = self.slice_len();
        let start = self.setting_index(settings) * n;
        &self.probs[start..start + n]
    }

    pub fn slice_mut(&mut self, settings: &[usize]) -> &mut [f64] {
        let n = self.slice_len();
        let start = self.setting_index(settings) * n;
        &mut self.probs[start..start + n]
    }

    /// All setting tuples in storage order.
    pub fn setting_tuples(&self) -> Vec<Vec<usize>> {
        tuples(&self.settings)
    }

    pub fn outcome_tuples(&self) -> Vec<Vec<usize>> {
        tuples(&self.outcomes)
    }

    /// Checks entries lie in [0, 1] and every slice sums to one.
    pub fn validate(&self, tol: &Tolerances) -> CglmpResult<()> {
        for s in self.setting_tuples() {
            let slice = self.slice(&s);
            if let Some(bad) = slice
                .iter()
                .find(|&&p| !(p >= -tol.num && p <= 1.0 + tol.num))
            {
                return Err(CglmpError::ShapeMismatch(format!(
                    "entry {bad} outside [0,1] for settings {s:?}"
                )));
            }
            let total: f64 = slice.iter().sum();
            if (total - 1.0).abs() > tol.norm.max(tol.num) {
                return Err(CglmpError::ShapeMismatch(format!(
                    "slice for settings {s:?} sums to {total}"
                )));
            }
        }
        Ok(())
    }

    /// Marginal over the listed parties (kept in the given order).
    ///
    /// Settings of discarded parties are fixed to `fixed[party]`; for a
    /// causally consistent table the choice does not matter for earlier
    /// parties.
    pub fn marginal(&self, keep: &[usize], fixed: &[usize]) -> JointDistribution {
        let outcomes: Vec<usize> = keep.iter().map(|&p| self.outcomes[p]).collect();
        let settings: Vec<usize> = keep.iter().map(|&p| self.settings[p]).collect();
        let mut out = JointDistribution::zeros(outcomes, settings);
        let full_outcomes = self.outcome_tuples();
        for ks in out.setting_tuples() {
            let mut full_s = fixed.to_vec();
            for (slot, &p) in keep.iter().enumerate() {
                full_s[p] = ks[slot];
            }
            let slice = self.slice(&full_s).to_vec();
            for (o, &p) in full_outcomes.iter().zip(&slice) {
                let ko: Vec<usize> = keep.iter().map(|&q| o[q]).collect();
                let cur = out.get(&ks, &ko);
                out.set(&ks, &ko, cur + p);
            }
        }
        out
    }

    /// Largest entry of one slice.
    pub fn modal_probability(&self, settings: &[usize]) -> f64 {
        self.slice(settings)
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max)
    }

    /// Largest absolute entrywise difference to another table of the same shape.
    pub fn max_abs_diff(&self, other: &JointDistribution) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

pub(crate) fn tuples(dims: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = dims.iter().product();
    (0..total)
        .map(|i| crate::qcore::unflatten(i, dims))
        .collect()
}

/// Born-rule table `p(a, b) = ⟨ψ| A_a ⊗ B_b |ψ⟩` for one setting pair.
pub fn born_joint(
    state: &StateVector,
    pvm_a: &Povm,
    pvm_b: &Povm,
) -> CglmpResult<JointDistribution> {
    born_joint_settings(
        state,
        std::slice::from_ref(pvm_a),
        std::slice::from_ref(pvm_b),
    )
}

/// Born-rule table over every setting pair of the two measurement lists.
pub fn born_joint_settings(
    state: &StateVector,
    alice: &[Povm],
    bob: &[Povm],
) -> CglmpResult<JointDistribution> {
    let (first_a, first_b) = match (alice.first(), bob.first()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(CglmpError::ShapeMismatch("empty measurement list".into())),
    };
    let dim = first_a.dim() * first_b.dim();
    if state.dim() != dim {
        return Err(CglmpError::DimensionMismatch {
            expected: dim,
            found: state.dim(),
        });
    }
    let oa = first_a.outcomes();
    let ob = first_b.outcomes();
    if alice
        .iter()
        .any(|p| p.outcomes() != oa || p.dim() != first_a.dim())
        || bob
            .iter()
            .any(|p| p.outcomes() != ob || p.dim() != first_b.dim())
    {
        return Err(CglmpError::ShapeMismatch(
            "settings of one party must share outcome count and dimension".into(),
        ));
    }
    let mut dist = JointDistribution::zeros(vec![oa, ob], vec![alice.len(), bob.len()]);
    for (x, pa) in alice.iter().enumerate() {
        for (y, pb) in bob.iter().enumerate() {
            for a in 0..oa {
                for b in 0..ob {
                    let op = kron(pa.element(a), pb.element(b));
                    let p = state.expectation(&op).re;
                    dist.set(&[x, y], &[a, b], p);
                }
            }
        }
    }
    Ok(dist)
}

fn check_cglmp_shape(dist: &JointDistribution, d: usize) -> CglmpResult<()> {
    if dist.parties() != 2 || dist.outcome_counts() != [d, d] || dist.setting_counts() != [2, 2] {
        return Err(CglmpError::ShapeMismatch(format!(
            "need two parties with 2 settings and {d} outcomes each, found outcomes {:?} settings {:?}",
            dist.outcome_counts(),
            dist.setting_counts()
        )));
    }
    Ok(())
}

/// `P(A_x = B_y + k)`: sum over `b` of `p(a = (b+k) mod d, b | x, y)`.
pub fn prob_a_eq_b_plus(dist: &JointDistribution, x: usize, y: usize, k: i64, d: usize) -> f64 {
    (0..d)
        .map(|b| {
            let a = (b as i64 + k).rem_euclid(d as i64) as usize;
            dist.get(&[x, y], &[a, b])
        })
        .sum()
}

/// `P(B_y = A_x + k)`: sum over `a` of `p(a, b = (a+k) mod d | x, y)`.
pub fn prob_b_eq_a_plus(dist: &JointDistribution, x: usize, y: usize, k: i64, d: usize) -> f64 {
    (0..d)
        .map(|a| {
            let b = (a as i64 + k).rem_euclid(d as i64) as usize;
            dist.get(&[x, y], &[a, b])
        })
        .sum()
}

/// The CGLMP functional
/// `I_d = Σ_{k=0}^{⌊d/2⌋−1} (1 − 2k/(d−1)) [f(k) − f(−k−1)]` with
/// `f(k) = P(A0=B0+k) + P(B0=A1+k+1) + P(A1=B1+k) + P(B1=A0+k)`.
///
/// Local bound 2.
pub fn cglmp_value(dist: &JointDistribution, d: usize) -> CglmpResult<f64> {
    if d < 2 {
        return Err(CglmpError::UnsupportedDimension(d));
    }
    check_cglmp_shape(dist, d)?;
    let f = |k: i64| {
        prob_a_eq_b_plus(dist, 0, 0, k, d)
            + prob_b_eq_a_plus(dist, 1, 0, k + 1, d)
            + prob_a_eq_b_plus(dist, 1, 1, k, d)
            + prob_b_eq_a_plus(dist, 0, 1, k, d)
    };
    let mut total = 0.0;
    for k in 0..(d / 2) as i64 {
        let weight = 1.0 - 2.0 * k as f64 / (d as f64 - 1.0);
        total += weight * (f(k) - f(-k - 1));
    }
    Ok(total)
}

/// The qutrit inequality written out term by term, evaluated by direct
/// enumeration of outcome pairs.
pub fn cglmp3_expanded(dist: &JointDistribution) -> CglmpResult<f64> {
    check_cglmp_shape(dist, 3)?;
    // p summed over pairs with a − b ≡ r (mod 3).
    let diff = |x: usize, y: usize, r: usize| -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                if (a + 3 - b) % 3 == r {
                    s += dist.get(&[x, y], &[a, b]);
                }
            }
        }
        s
    };
    // A0 = B0, B0 = A1 + 1, A1 = B1, B1 = A0
    let plus = diff(0, 0, 0) + diff(1, 0, 2) + diff(1, 1, 0) + diff(0, 1, 0);
    // A0 = B0 − 1, B0 = A1, A1 = B1 − 1, B1 = A0 − 1
    let minus = diff(0, 0, 2) + diff(1, 0, 0) + diff(1, 1, 2) + diff(0, 1, 1);
    Ok(plus - minus)
}

/// Alice's two and Bob's two projective measurements for `cfg`.
pub fn optimal_measurements(cfg: &CglmpSettings) -> CglmpResult<(Vec<Povm>, Vec<Povm>)> {
    let alice = (0..cfg.alpha.len())
        .map(|x| measurement_basis(Party::Alice, x, cfg))
        .collect::<CglmpResult<Vec<_>>>()?;
    let bob = (0..cfg.beta.len())
        .map(|y| measurement_basis(Party::Bob, y, cfg))
        .collect::<CglmpResult<Vec<_>>>()?;
    Ok((alice, bob))
}

/// `(4/9)(3 + 2√3)`: maximal MES violation with the optimal bases.
pub fn mes_max_violation() -> f64 {
    4.0 / 9.0 * (3.0 + 2.0 * 3f64.sqrt())
}

/// `1 + √(11/3)`: maximal MVS violation with the optimal bases.
pub fn mvs_max_violation() -> f64 {
    1.0 + (11.0f64 / 3.0).sqrt()
}
