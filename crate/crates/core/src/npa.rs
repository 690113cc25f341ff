//! Sequential NPA relaxation (level 1+AB) of Eve's guessing probability.
//!
//! Operators are projectors `A_{a|x}`, `B1_{b|y}`, `B2_{b|y}` and Eve's
//! `E_e`. Alice, the Bob block and Eve commute with each other; the two Bob
//! rounds do not. Moments are real: a word and its reverse share one id.
//! The moment problem is reduced to an LMI in the free moments by exact
//! elimination of all linear constraints and then handed to the SDP solver.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DVector, SymmetricEigen};
use thiserror::Error;

use crate::cglmp::{
    canonical_state, optimal_measurements, CglmpError, CglmpSettings, JointDistribution, StateKind,
};
use crate::guessing::{
    lexmin_argmax, mixture_scenario, theta_vectors, GuessError, GuessReport, ThetaBasis,
};
use crate::qcore::{identity, kron, outer, CMatrix, CVector, QError};
use crate::sdp::{
    solve, Block, RMatrix, SdpError, SdpProblem, SdpSolution, SolverConfig, SolverStatus, SparseSym,
};
use crate::seqsim::{bob_basis, sequential_distribution, SeqError};

pub const SETTINGS: usize = 2;
pub const OUTCOMES: usize = 3;
pub const ROUNDS: usize = 2;
pub const EVE_OUTCOMES: usize = OUTCOMES * OUTCOMES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NpaError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid letter: {0}")]
    InvalidLetter(String),
    #[error("word profile too small: {0}")]
    ProfileTooSmall(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("solver failure: status {status:?}, gap {gap:.3e}")]
    SolverFailure { status: SolverStatus, gap: f64 },
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Guess(#[from] GuessError),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Cglmp(#[from] CglmpError),
    #[error(transparent)]
    Quantum(#[from] QError),
}

pub type NpaResult<T> = Result<T, NpaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Alice,
    /// Bob round, 1-based.
    Bob(u8),
    Eve,
}

impl Role {
    fn block(self) -> u8 {
        match self {
            Role::Alice => 0,
            Role::Bob(_) => 1,
            Role::Eve => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Letter {
    pub role: Role,
    pub setting: u8,
    pub outcome: u8,
}

impl Letter {
    pub fn new(role: Role, setting: usize, outcome: usize) -> NpaResult<Self> {
        let (settings, outcomes) = match role {
            Role::Alice => (SETTINGS, OUTCOMES),
            Role::Bob(r) if (1..=ROUNDS as u8).contains(&r) => (SETTINGS, OUTCOMES),
            Role::Bob(r) => return Err(NpaError::InvalidLetter(format!("no Bob round {r}"))),
            Role::Eve => (1, EVE_OUTCOMES),
        };
        if setting >= settings || outcome >= outcomes {
            return Err(NpaError::InvalidLetter(format!(
                "{role:?} setting {setting} outcome {outcome}"
            )));
        }
        Ok(Self {
            role,
            setting: setting as u8,
            outcome: outcome as u8,
        })
    }

    pub fn alice(x: usize, a: usize) -> Self {
        Self::new(Role::Alice, x, a).expect("valid Alice letter")
    }

    pub fn bob(round: u8, y: usize, b: usize) -> Self {
        Self::new(Role::Bob(round), y, b).expect("valid Bob letter")
    }

    pub fn eve(e: usize) -> Self {
        Self::new(Role::Eve, 0, e).expect("valid Eve letter")
    }

    fn outcome_count(&self) -> usize {
        match self.role {
            Role::Eve => EVE_OUTCOMES,
            _ => OUTCOMES,
        }
    }

    fn with_outcome(&self, o: usize) -> Self {
        Self {
            outcome: o as u8,
            ..*self
        }
    }

    fn same_measurement(&self, other: &Letter) -> bool {
        self.role == other.role && self.setting == other.setting
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::Alice => write!(f, "A{}|{}", self.outcome, self.setting),
            Role::Bob(r) => write!(f, "B{r}_{}|{}", self.outcome, self.setting),
            Role::Eve => write!(f, "E{}", self.outcome),
        }
    }
}

/// Operator product, leftmost letter first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Word {
    letters: Vec<Letter>,
    zero: bool,
}

impl Word {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn zero() -> Self {
        Self {
            letters: Vec::new(),
            zero: true,
        }
    }

    pub fn new(letters: Vec<Letter>) -> Self {
        Self {
            letters,
            zero: false,
        }
    }

    pub fn letters(&self) -> &[Letter] {
        &self.letters
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    /// Reverse order (all letters are Hermitian).
    pub fn dagger(&self) -> Self {
        Self {
            letters: self.letters.iter().rev().cloned().collect(),
            zero: self.zero,
        }
    }

    pub fn concat(&self, other: &Word) -> Self {
        if self.zero || other.zero {
            return Self::zero();
        }
        let mut letters = self.letters.clone();
        letters.extend_from_slice(&other.letters);
        Self::new(letters)
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.zero {
            return write!(f, "0");
        }
        if self.letters.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self.letters.iter().map(|l| l.to_string()).collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Sorts Alice left and Eve right (Bob order preserved), then applies
/// idempotence and orthogonality inside each block.
pub fn canonicalize(w: &Word) -> Word {
    if w.zero {
        return Word::zero();
    }
    let mut out = Vec::with_capacity(w.letters.len());
    for block in 0..3u8 {
        let start = out.len();
        for l in w.letters.iter().filter(|l| l.role.block() == block) {
            if out.len() > start {
                let top: &Letter = out.last().expect("non-empty");
                if top.same_measurement(l) {
                    if top.outcome == l.outcome {
                        continue;
                    }
                    return Word::zero();
                }
            }
            out.push(*l);
        }
    }
    Word::new(out)
}

/// Moment identifier: the smaller of the canonical word and its canonical
/// reverse, or `None` for a vanishing word.
pub fn moment_key(w: &Word) -> Option<Vec<Letter>> {
    let c = canonicalize(w);
    if c.zero {
        return None;
    }
    let d = canonicalize(&c.dagger());
    Some(if d.letters < c.letters {
        d.letters
    } else {
        c.letters
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordProfile {
    /// `1, A, B1, B2, E, A·B1, B2·B1, B1·E`.
    Default,
    /// Adds `B1·B2` and `A·B2`.
    Extended,
}

impl WordProfile {
    pub fn name(self) -> &'static str {
        match self {
            WordProfile::Default => "default",
            WordProfile::Extended => "extended",
        }
    }
}

impl std::str::FromStr for WordProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "default" => Ok(WordProfile::Default),
            "extended" => Ok(WordProfile::Extended),
            other => Err(format!(
                "unknown profile '{other}' (expected default or extended)"
            )),
        }
    }
}

fn family(role: Role) -> Vec<Letter> {
    let settings = if role == Role::Eve { 1 } else { SETTINGS };
    let outcomes = if role == Role::Eve {
        EVE_OUTCOMES
    } else {
        OUTCOMES
    };
    (0..settings)
        .flat_map(|s| (0..outcomes).map(move |o| (s, o)))
        .map(|(s, o)| Letter::new(role, s, o).expect("in range"))
        .collect()
}

fn products(left: &[Letter], right: &[Letter]) -> Vec<Word> {
    left.iter()
        .flat_map(|l| right.iter().map(move |r| Word::new(vec![*l, *r])))
        .collect()
}

/// Word list of a profile, in row order.
pub fn profile_words(profile: WordProfile) -> Vec<Word> {
    let a = family(Role::Alice);
    let b1 = family(Role::Bob(1));
    let b2 = family(Role::Bob(2));
    let e = family(Role::Eve);
    let mut w = vec![Word::identity()];
    for fam in [&a, &b1, &b2, &e] {
        w.extend(fam.iter().map(|l| Word::new(vec![*l])));
    }
    w.extend(products(&a, &b1));
    w.extend(products(&b2, &b1));
    w.extend(products(&b1, &e));
    if profile == WordProfile::Extended {
        w.extend(products(&b1, &b2));
        w.extend(products(&a, &b2));
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    Normalization,
    Completeness,
    Data,
}

/// `Σ coef · moment = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEquation {
    pub kind: ConstraintKind,
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// Indexed moment matrix with its linear constraints and objective.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentProblem {
    pub profile: WordProfile,
    pub target: (usize, usize),
    words: Vec<Word>,
    keys: Vec<Vec<Letter>>,
    placement: Vec<Vec<Option<usize>>>,
    equations: Vec<LinearEquation>,
    objective: Vec<(usize, f64)>,
}

/// Data and objective word `A B1 B2 B1` or `B1 B2 B1 E`.
fn sandwich_key(
    prefix: Option<Letter>,
    b1: Letter,
    b2: Letter,
    suffix: Option<Letter>,
) -> Option<Vec<Letter>> {
    let mut letters = Vec::new();
    letters.extend(prefix);
    letters.extend([b1, b2, b1]);
    letters.extend(suffix);
    moment_key(&Word::new(letters))
}

/// Compiles the moment problem. `p_obs = None` drops the data constraints;
/// `eve_labels[3 b₁ + b₂]` is the Eve outcome that guesses `(b₁, b₂)`.
pub fn build_problem_with(
    p_obs: Option<&JointDistribution>,
    target: (usize, usize),
    profile: WordProfile,
    eve_labels: &[usize],
) -> NpaResult<MomentProblem> {
    if target.0 >= SETTINGS || target.1 >= SETTINGS {
        return Err(NpaError::ShapeMismatch(format!(
            "target setting {target:?}"
        )));
    }
    let mut seen = vec![false; EVE_OUTCOMES];
    if eve_labels.len() != EVE_OUTCOMES
        || eve_labels
            .iter()
            .any(|&e| e >= EVE_OUTCOMES || std::mem::replace(&mut seen[e], true))
    {
        return Err(NpaError::ShapeMismatch(
            "Eve labels must permute 0..9".into(),
        ));
    }
    if let Some(p) = p_obs {
        if p.outcome_counts() != [OUTCOMES; 3] || p.setting_counts() != [SETTINGS; 3] {
            return Err(NpaError::ShapeMismatch(format!(
                "p_obs has outcomes {:?} and settings {:?}, expected 3x3x3 and 2x2x2",
                p.outcome_counts(),
                p.setting_counts()
            )));
        }
    }
    let words = profile_words(profile);
    let n = words.len();
    let mut id_of: HashMap<Vec<Letter>, usize> = HashMap::new();
    let mut keys: Vec<Vec<Letter>> = Vec::new();
    let mut placement = vec![vec![None; n]; n];
    for (i, u) in words.iter().enumerate() {
        let ud = u.dagger();
        for (j, v) in words.iter().enumerate() {
            if let Some(k) = moment_key(&ud.concat(v)) {
                let next = keys.len();
                let id = *id_of.entry(k.clone()).or_insert(next);
                if id == next {
                    keys.push(k);
                }
                placement[i][j] = Some(id);
            }
        }
    }

    let mut equations = vec![LinearEquation {
        kind: ConstraintKind::Normalization,
        terms: vec![(id_of[&Vec::new()], 1.0)],
        rhs: 1.0,
    }];
    let mut complete: std::collections::BTreeSet<(Vec<usize>, Option<usize>)> = Default::default();
    for key in &keys {
        'pos: for (i, l) in key.iter().enumerate() {
            let mut fam = Vec::with_capacity(l.outcome_count());
            for o in 0..l.outcome_count() {
                let mut w = key.clone();
                w[i] = l.with_outcome(o);
                if let Some(k) = moment_key(&Word::new(w)) {
                    match id_of.get(&k) {
                        Some(&id) => fam.push(id),
                        None => continue 'pos,
                    }
                }
            }
            let mut rest = key.clone();
            rest.remove(i);
            let reduced = match moment_key(&Word::new(rest)) {
                None => None,
                Some(k) => match id_of.get(&k) {
                    Some(&id) => Some(id),
                    None => continue 'pos,
                },
            };
            fam.sort_unstable();
            complete.insert((fam, reduced));
        }
    }
    for (fam, reduced) in complete {
        let mut terms: Vec<(usize, f64)> = fam.into_iter().map(|id| (id, 1.0)).collect();
        if let Some(r) = reduced {
            terms.push((r, -1.0));
        }
        equations.push(LinearEquation {
            kind: ConstraintKind::Completeness,
            terms,
            rhs: 0.0,
        });
    }
    if let Some(p) = p_obs {
        for x in 0..SETTINGS {
            for y1 in 0..SETTINGS {
                for y2 in 0..SETTINGS {
                    for a in 0..OUTCOMES {
                        for b1 in 0..OUTCOMES {
                            for b2 in 0..OUTCOMES {
                                let key = sandwich_key(
                                    Some(Letter::alice(x, a)),
                                    Letter::bob(1, y1, b1),
                                    Letter::bob(2, y2, b2),
                                    None,
                                )
                                .expect("non-vanishing data word");
                                let id = *id_of.get(&key).ok_or_else(|| {
                                    NpaError::ProfileTooSmall(format!(
                                        "data moment {}",
                                        Word::new(key.clone())
                                    ))
                                })?;
                                equations.push(LinearEquation {
                                    kind: ConstraintKind::Data,
                                    terms: vec![(id, 1.0)],
                                    rhs: p.get(&[x, y1, y2], &[a, b1, b2]),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    let mut objective = Vec::new();
    for b1 in 0..OUTCOMES {
        for b2 in 0..OUTCOMES {
            let key = sandwich_key(
                None,
                Letter::bob(1, target.0, b1),
                Letter::bob(2, target.1, b2),
                Some(Letter::eve(eve_labels[b1 * OUTCOMES + b2])),
            )
            .expect("non-vanishing objective word");
            let id = *id_of.get(&key).ok_or_else(|| {
                NpaError::ProfileTooSmall(format!("objective moment {}", Word::new(key.clone())))
            })?;
            objective.push((id, 1.0));
        }
    }
    Ok(MomentProblem {
        profile,
        target,
        words,
        keys,
        placement,
        equations,
        objective,
    })
}

/// `build_problem_with` with the identity Eve labeling.
pub fn build_problem(
    p_obs: Option<&JointDistribution>,
    target: (usize, usize),
    profile: WordProfile,
) -> NpaResult<MomentProblem> {
    let labels: Vec<usize> = (0..EVE_OUTCOMES).collect();
    build_problem_with(p_obs, target, profile, &labels)
}

/// Affine expression `constant + Σ coef · free_var`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Affine {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl Affine {
    fn is_zero(&self) -> bool {
        self.constant.abs() <= 1e-12 && self.terms.is_empty()
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(k, c)| c * y[k]).sum::<f64>()
    }
}

const COEF_TOL: f64 = 1e-12;

/// Gaussian elimination of the equations; returns every variable as an
/// affine function of the free ones and the number of free variables.
/// `priority` ranks variables for elimination (higher first).
fn eliminate<'a>(
    n: usize,
    equations: impl Iterator<Item = (&'a [(usize, f64)], f64)>,
    priority: &dyn Fn(usize) -> usize,
) -> NpaResult<(Vec<Affine>, usize)> {
    let mut pivot: Vec<Option<(Vec<(usize, f64)>, f64)>> = vec![None; n];
    let mut order: Vec<usize> = Vec::new();
    let mut scratch = vec![0.0f64; n];
    let mut touched_flag = vec![false; n];
    for (terms, rhs0) in equations {
        let mut rhs = rhs0;
        let mut touched: Vec<usize> = Vec::new();
        let mut stack: Vec<usize> = Vec::new();
        for &(v, c) in terms {
            scratch[v] += c;
            if !touched_flag[v] {
                touched_flag[v] = true;
                touched.push(v);
            }
            if pivot[v].is_some() {
                stack.push(v);
            }
        }
        while let Some(v) = stack.pop() {
            let c = scratch[v];
            if c == 0.0 {
                continue;
            }
            scratch[v] = 0.0;
            let (expr, konst) = pivot[v].as_ref().expect("pivot");
            rhs -= c * konst;
            for &(u, a) in expr {
                scratch[u] += c * a;
                if !touched_flag[u] {
                    touched_flag[u] = true;
                    touched.push(u);
                }
                if pivot[u].is_some() {
                    stack.push(u);
                }
            }
        }
        let live: Vec<(usize, f64)> = touched
            .iter()
            .filter(|&&v| pivot[v].is_none() && scratch[v].abs() > COEF_TOL)
            .map(|&v| (v, scratch[v]))
            .collect();
        for &v in &touched {
            scratch[v] = 0.0;
            touched_flag[v] = false;
        }
        if live.is_empty() {
            if rhs.abs() > 1e-9 {
                return Err(NpaError::Infeasible(format!(
                    "inconsistent linear constraints (residual {rhs:.3e})"
                )));
            }
            continue;
        }
        let cmax = live.iter().map(|(_, c)| c.abs()).fold(0.0, f64::max);
        let &(p, cp) = live
            .iter()
            .filter(|(_, c)| c.abs() >= 0.5 * cmax)
            .max_by_key(|(v, _)| (priority(*v), *v))
            .expect("non-empty");
        let expr: Vec<(usize, f64)> = live
            .iter()
            .filter(|(v, _)| *v != p)
            .map(|&(v, c)| (v, -c / cp))
            .collect();
        pivot[p] = Some((expr, rhs / cp));
        order.push(p);
    }
    let mut free_index = vec![usize::MAX; n];
    let mut free = 0;
    for v in 0..n {
        if pivot[v].is_none() {
            free_index[v] = free;
            free += 1;
        }
    }
    let mut out: Vec<Affine> = (0..n)
        .map(|v| {
            if pivot[v].is_none() {
                Affine {
                    constant: 0.0,
                    terms: vec![(free_index[v], 1.0)],
                }
            } else {
                Affine::default()
            }
        })
        .collect();
    for &p in order.iter().rev() {
        let (expr, konst) = pivot[p].as_ref().expect("pivot");
        let mut acc: HashMap<usize, f64> = HashMap::new();
        let mut constant = *konst;
        for &(u, a) in expr {
            let e = &out[u];
            constant += a * e.constant;
            for &(k, c) in &e.terms {
                *acc.entry(k).or_insert(0.0) += a * c;
            }
        }
        let mut terms: Vec<(usize, f64)> = acc
            .into_iter()
            .filter(|(_, c)| c.abs() > COEF_TOL)
            .collect();
        terms.sort_by_key(|t| t.0);
        out[p] = Affine { constant, terms };
    }
    Ok((out, free))
}

/// LMI form of a moment problem and its SDP encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    /// Every moment id as an affine function of the free moments.
    pub moments: Vec<Affine>,
    pub free_variables: usize,
    /// Word rows kept in the PSD block.
    pub kept_rows: Vec<usize>,
    /// Rows removed because their diagonal vanishes identically.
    pub zero_rows: Vec<usize>,
    /// Rows removed as linear combinations of kept rows.
    pub dependent_rows: Vec<usize>,
    /// SDPA pair of the LMI: `C = −F₀`, `A_k = G_k`, `b = −w`.
    pub problem: SdpProblem,
    /// Objective constant: `G = offset − primal value`.
    pub offset: f64,
    /// Facial-reduction steps applied to `problem`.
    pub face_steps: usize,
}

impl MomentProblem {
    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn dim(&self) -> usize {
        self.words.len()
    }

    pub fn moment_count(&self) -> usize {
        self.keys.len()
    }

    pub fn moment_word(&self, id: usize) -> Word {
        Word::new(self.keys[id].clone())
    }

    pub fn placement(&self, i: usize, j: usize) -> Option<usize> {
        self.placement[i][j]
    }

    pub fn equations(&self) -> &[LinearEquation] {
        &self.equations
    }

    pub fn count(&self, kind: ConstraintKind) -> usize {
        self.equations.iter().filter(|e| e.kind == kind).count()
    }

    pub fn objective(&self) -> &[(usize, f64)] {
        &self.objective
    }

    /// Residuals of a candidate moment matrix against every constraint.
    pub fn check_witness(&self, m: &RMatrix) -> NpaResult<WitnessReport> {
        let n = self.dim();
        if m.nrows() != n || m.ncols() != n {
            return Err(NpaError::ShapeMismatch(format!(
                "witness is {}x{}, expected {n}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut value: Vec<Option<f64>> = vec![None; self.keys.len()];
        let mut identification: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                match self.placement[i][j] {
                    None => identification = identification.max(m[(i, j)].abs()),
                    Some(id) => match value[id] {
                        None => value[id] = Some(m[(i, j)]),
                        Some(v) => identification = identification.max((v - m[(i, j)]).abs()),
                    },
                }
            }
        }
        let value: Vec<f64> = value.into_iter().map(|v| v.unwrap_or(0.0)).collect();
        let mut equation: f64 = 0.0;
        for eq in &self.equations {
            let lhs: f64 = eq.terms.iter().map(|&(id, c)| c * value[id]).sum();
            equation = equation.max((lhs - eq.rhs).abs());
        }
        let sym = (m + m.transpose()) * 0.5;
        let min_eigenvalue = SymmetricEigen::new(sym).eigenvalues.min();
        let objective = self.objective.iter().map(|&(id, c)| c * value[id]).sum();
        Ok(WitnessReport {
            identification_residual: identification,
            equation_residual: equation,
            min_eigenvalue,
            objective,
        })
    }

    /// Witness restricted to the kept rows of `red`, grouped per Bob¹
    /// setting: rows of words that are empty or a single non-Bob¹ letter,
    /// plus Eve-free words ending in a Bob¹ letter of that setting.
    pub fn face_hint(&self, red: &Reduction, witness: &RMatrix) -> FaceHint {
        let kept = &red.kept_rows;
        let matrix = RMatrix::from_fn(kept.len(), kept.len(), |i, j| witness[(kept[i], kept[j])]);
        let groups = (0..SETTINGS as u8)
            .map(|y| {
                (0..kept.len())
                    .filter(|&i| {
                        let w = &self.words[kept[i]];
                        if w.letters().iter().any(|l| l.role == Role::Eve) {
                            return false;
                        }
                        match w.letters().last() {
                            None => true,
                            Some(l) if l.role == Role::Bob(1) => l.setting == y,
                            Some(_) => w.len() == 1,
                        }
                    })
                    .collect()
            })
            .collect();
        FaceHint { matrix, groups }
    }

    /// Eliminates all equalities, drops rows forced to zero and rows
    /// linearly dependent on others for every feasible point, and encodes
    /// the remaining LMI `M(y) ⪰ 0, max w·y` as an SDPA pair with
    /// `C = −F₀`, `A_k = G_k` and `b = −w`.
    pub fn reduce(&self) -> NpaResult<Reduction> {
        let n = self.dim();
        let priority = |id: usize| self.keys[id].len();
        let mut extra: Vec<LinearEquation> = Vec::new();
        let mut zero_rows: Vec<usize> = Vec::new();
        let (moments, free) = loop {
            let eqs = self
                .equations
                .iter()
                .chain(&extra)
                .map(|e| (&e.terms[..], e.rhs));
            let (moments, free) = eliminate(self.keys.len(), eqs, &priority)?;
            let mut new_rows = Vec::new();
            for i in 0..n {
                if zero_rows.contains(&i) {
                    continue;
                }
                let diag_zero = match self.placement[i][i] {
                    None => true,
                    Some(id) => moments[id].is_zero(),
                };
                if diag_zero {
                    new_rows.push(i);
                }
            }
            if new_rows.is_empty() {
                break (moments, free);
            }
            for &i in &new_rows {
                for j in 0..n {
                    if let Some(id) = self.placement[i][j] {
                        if !moments[id].is_zero() {
                            extra.push(LinearEquation {
                                kind: ConstraintKind::Completeness,
                                terms: vec![(id, 1.0)],
                                rhs: 0.0,
                            });
                        }
                    }
                }
                zero_rows.push(i);
            }
        };
        zero_rows.sort_unstable();
        let live: Vec<usize> = (0..n).filter(|i| !zero_rows.contains(i)).collect();
        let dependent_rows = dependent_rows(&self.placement, &moments, free, &live);
        let kept_rows: Vec<usize> = live
            .iter()
            .cloned()
            .filter(|i| !dependent_rows.contains(i))
            .collect();

        // Objective and LMI data on the kept rows.
        let mut w = vec![0.0; free];
        let mut offset = 0.0;
        for &(id, c) in &self.objective {
            offset += c * moments[id].constant;
            for &(k, a) in &moments[id].terms {
                w[k] += c * a;
            }
        }
        let mut c_entries = Vec::new();
        let mut g_entries: Vec<Vec<(usize, usize, usize, f64)>> = vec![Vec::new(); free];
        for (p, &i) in kept_rows.iter().enumerate() {
            for (q, &j) in kept_rows.iter().enumerate().skip(p) {
                if let Some(id) = self.placement[i][j] {
                    let e = &moments[id];
                    if e.constant != 0.0 {
                        c_entries.push((0, p, q, -e.constant));
                    }
                    for &(k, a) in &e.terms {
                        g_entries[k].push((0, p, q, a));
                    }
                }
            }
        }
        let mut a_mats = Vec::new();
        let mut b = Vec::new();
        for (k, entries) in g_entries.into_iter().enumerate() {
            if entries.is_empty() {
                if w[k].abs() > COEF_TOL {
                    return Err(NpaError::ProfileTooSmall(format!(
                        "objective depends on free moment {} outside the matrix",
                        k
                    )));
                }
                continue;
            }
            a_mats.push(SparseSym::new(entries));
            b.push(-w[k]);
        }
        if a_mats.is_empty() {
            return Err(NpaError::ProfileTooSmall("no free moments remain".into()));
        }
        let problem = SdpProblem::new(
            vec![Block::dense(kept_rows.len())],
            SparseSym::new(c_entries),
            a_mats,
            b,
        )?;
        Ok(Reduction {
            moments,
            free_variables: free,
            kept_rows,
            zero_rows,
            dependent_rows,
            problem,
            offset,
            face_steps: 0,
        })
    }
}

/// Rows whose vectors lie in the common null space structure: a set `R`
/// such that every feasible `M` satisfies `M v = 0` for null vectors `v`
/// supported with an invertible restriction to `R`. Later rows are
/// preferred for removal.
fn dependent_rows(
    placement: &[Vec<Option<usize>>],
    moments: &[Affine],
    free: usize,
    live: &[usize],
) -> Vec<usize> {
    let n = live.len();
    // S = F0² + Σ G_k², whose kernel is the common kernel of the pencil.
    let mut f0 = RMatrix::zeros(n, n);
    let mut cols: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); free];
    for (p, &i) in live.iter().enumerate() {
        for (q, &j) in live.iter().enumerate() {
            if let Some(id) = placement[i][j] {
                f0[(p, q)] = moments[id].constant;
                for &(k, a) in &moments[id].terms {
                    cols[k].push((q, p, a));
                }
            }
        }
    }
    let mut s = &f0 * &f0;
    for mut list in cols {
        list.sort_by_key(|t| t.0);
        let mut start = 0;
        while start < list.len() {
            let col = list[start].0;
            let mut end = start;
            while end < list.len() && list[end].0 == col {
                end += 1;
            }
            for &(_, r1, v1) in &list[start..end] {
                for &(_, r2, v2) in &list[start..end] {
                    s[(r1, r2)] += v1 * v2;
                }
            }
            start = end;
        }
    }
    let eig = SymmetricEigen::new(s);
    let lmax = eig.eigenvalues.max().max(1e-300);
    let null: Vec<usize> = (0..n)
        .filter(|&k| eig.eigenvalues[k] <= 1e-10 * lmax)
        .collect();
    let r = null.len();
    if r == 0 {
        return Vec::new();
    }
    let basis = RMatrix::from_fn(n, r, |i, j| eig.eigenvectors[(i, null[j])]);
    // Greedy rank-revealing choice of rows of the null basis.
    let mut chosen: Vec<usize> = Vec::new();
    let mut q: Vec<nalgebra::DVector<f64>> = Vec::new();
    for p in (0..n).rev() {
        if chosen.len() == r {
            break;
        }
        let mut v = basis.row(p).transpose();
        let norm0 = v.norm();
        if norm0 < 1e-12 {
            continue;
        }
        for _ in 0..2 {
            for u in &q {
                let d = u.dot(&v);
                v -= u * d;
            }
        }
        let norm = v.norm();
        if norm > 1e-6 * norm0.max(1e-3) {
            q.push(v / norm);
            chosen.push(p);
        }
    }
    let mut rows: Vec<usize> = chosen.into_iter().map(|p| live[p]).collect();
    rows.sort_unstable();
    rows
}

/// Residuals of a realized moment matrix.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct WitnessReport {
    pub identification_residual: f64,
    pub equation_residual: f64,
    pub min_eigenvalue: f64,
    pub objective: f64,
}

/// Sequential NPA bound with solver diagnostics.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DiGuessReport {
    pub report: GuessReport,
    #[serde(skip)]
    pub status: SolverStatus,
    pub gap: f64,
    pub iterations: usize,
    pub matrix_dim: usize,
    pub free_variables: usize,
    pub face_steps: usize,
}

/// Maximal local guessing probability of `(b₁, b₂)` at `target` consistent
/// with `p_obs` under the relaxation. Fails unless the solver reports
/// `Optimal`.
pub fn di_guess_bound(
    p_obs: Option<&JointDistribution>,
    target: (usize, usize),
    profile: WordProfile,
    cfg: &SolverConfig,
) -> NpaResult<DiGuessReport> {
    let problem = build_problem(p_obs, target, profile)?;
    solve_moment_problem(&problem, cfg, None)
}

/// [`di_guess_bound`] on the mixture-instrument statistics at sharpness
/// `eps`, using the decomposition realization as a face hint.
pub fn mixture_guess_bound(
    kind: StateKind,
    eps: f64,
    target: (usize, usize),
    theta: ThetaBasis,
    profile: WordProfile,
    cfg: &SolverConfig,
) -> NpaResult<DiGuessReport> {
    let realization = decomposition_realization(kind, eps, target, theta)?;
    let p_obs = sequential_distribution(&mixture_scenario(kind, eps, theta)?)?;
    let problem = build_problem(Some(&p_obs), target, profile)?;
    let witness = realization.moment_matrix(&problem);
    solve_moment_problem(&problem, cfg, Some(&witness))
}

/// Maximum number of facial-reduction steps tried after a failed solve.
pub const MAX_FACE_STEPS: usize = 3;

/// Reduces `problem` and solves it, applying facial reduction whenever the
/// solver fails to reach `Optimal` (the LMI then has no interior point).
///
/// `witness`, a feasible moment matrix over all words, helps locate the
/// minimal face exactly; the face is certified independently of it.
pub fn prepare(
    problem: &MomentProblem,
    cfg: &SolverConfig,
    witness: Option<&RMatrix>,
) -> NpaResult<(Reduction, SdpSolution)> {
    let mut red = problem.reduce()?;
    if let Some(m) = witness {
        // A witness on the boundary signals a missing interior; try the
        // hinted reduction before spending a failing solve.
        let hint = problem.face_hint(&red, m);
        if let Some((p, offset)) =
            facial_reduction_step(&red.problem, red.offset, cfg, Some(&hint))?
        {
            red.problem = p;
            red.offset = offset;
            red.face_steps += 1;
        }
    }
    loop {
        let sol = solve(&red.problem, cfg)?;
        if sol.status == SolverStatus::Optimal {
            return Ok((red, sol));
        }
        let failure = NpaError::SolverFailure {
            status: sol.status,
            gap: sol.gap,
        };
        if red.face_steps == MAX_FACE_STEPS {
            return Err(failure);
        }
        match facial_reduction_step(&red.problem, red.offset, cfg, None)? {
            Some((p, offset)) => {
                red.problem = p;
                red.offset = offset;
                red.face_steps += 1;
            }
            None => return Err(failure),
        }
    }
}

/// Solves the relaxation and packages the bound.
pub fn solve_moment_problem(
    problem: &MomentProblem,
    cfg: &SolverConfig,
    witness: Option<&RMatrix>,
) -> NpaResult<DiGuessReport> {
    let (red, sol) = prepare(problem, cfg, witness)?;
    let g = red.offset - sol.primal_value;
    // Values past 1 within solver accuracy are the trivial bound.
    let slack = 10.0 * cfg.gap_tol.max(cfg.feas_tol) * (1.0 + red.offset.abs());
    let g = if g > 1.0 && g <= 1.0 + slack { 1.0 } else { g };
    let report = GuessReport::new(
        g,
        format!(
            "sequential NPA level 1+AB, {} profile",
            problem.profile.name()
        ),
    )?;
    Ok(DiGuessReport {
        report,
        status: sol.status,
        gap: sol.gap,
        iterations: sol.iterations,
        matrix_dim: red.problem.blocks()[0].size,
        free_variables: red.problem.num_constraints(),
        face_steps: red.face_steps,
    })
}

/// Single-block LMI `M(y) = F₀ + Σ y_k G_k` of an SDPA pair.
fn lmi_parts(p: &SdpProblem) -> (RMatrix, Vec<RMatrix>) {
    let blocks = p.blocks();
    let f0 = -p.objective().to_dense(blocks).remove(0);
    let g = p
        .constraints()
        .iter()
        .map(|a| a.to_dense(blocks).remove(0))
        .collect();
    (f0, g)
}

fn upper_entries(m: &RMatrix) -> SparseSym {
    let n = m.nrows();
    let floor = 1e-15 * m.amax();
    let mut e = Vec::new();
    for i in 0..n {
        for j in i..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            if v.abs() > floor {
                e.push((0, i, j, v));
            }
        }
    }
    SparseSym::new(e)
}

/// Orthonormal basis of the face certificate's range: a `W ⪰ 0` with
/// `tr W = 1`, `F₀•W = 0` and `G_k•W = 0`, which forces `M(y) W = 0` on
/// every feasible point. The interior-point solution of the auxiliary
/// problem has maximal rank; it is then polished by Gauss–Newton on
/// `W = B Bᵀ`, or snapped onto `hint`. `Ok(None)` when no certificate is
/// found.
fn face_certificate(
    p: &SdpProblem,
    cfg: &SolverConfig,
    hint: Option<&FaceHint>,
) -> NpaResult<Option<RMatrix>> {
    let n = p.blocks()[0].size;
    let mut a: Vec<SparseSym> = p.constraints().to_vec();
    a.push(p.objective().clone());
    a.push(SparseSym::new((0..n).map(|i| (0, i, i, 1.0))));
    let mut b = vec![0.0; a.len()];
    b[a.len() - 1] = 1.0;
    let aux = SdpProblem::new(p.blocks().to_vec(), SparseSym::new(Vec::new()), a, b)?;
    let aux_cfg = SolverConfig {
        max_iter: cfg.max_iter.min(80),
        ..*cfg
    };
    let sol = match solve(&aux, &aux_cfg) {
        Ok(s) if s.status == SolverStatus::Optimal => s,
        Ok(_) | Err(SdpError::Infeasible(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let eig = SymmetricEigen::new(sol.x[0].clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let lam: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let r = lam.iter().filter(|&&l| l > 1e-6 * lam[0]).count();
    if r == n {
        return Err(NpaError::Infeasible(
            "moment matrix forced to vanish".into(),
        ));
    }
    if r == 0 || lam[r] > 1e-3 * lam[r - 1] {
        return Ok(None);
    }
    let mut bm = RMatrix::from_fn(n, r, |i, c| eig.eigenvectors[(i, order[c])] * lam[c].sqrt());
    if let Some(h) = hint {
        let u = RMatrix::from_fn(n, r, |i, c| eig.eigenvectors[(i, order[c])]);
        return Ok(snap_to_hint(p, &u, h));
    }
    let (f0, gs) = lmi_parts(p);
    let mut ls: Vec<(RMatrix, f64)> = gs
        .into_iter()
        .chain(std::iter::once(f0))
        .map(|g| {
            let s = g.norm();
            (g, s)
        })
        .collect();
    ls.retain(|(_, s)| *s > 0.0);
    let rows = ls.len() + 1;
    let mut residual = f64::INFINITY;
    for _ in 0..20 {
        let mut jac = RMatrix::zeros(rows, n * r);
        let mut res = DVector::zeros(rows);
        for (i, (l, s)) in ls.iter().enumerate() {
            let lb = l * &bm;
            res[i] = lb.dot(&bm) / s;
            for (t, v) in lb.iter().enumerate() {
                jac[(i, t)] = 2.0 * v / s;
            }
        }
        res[rows - 1] = bm.norm_squared() - 1.0;
        for (t, v) in bm.iter().enumerate() {
            jac[(rows - 1, t)] = 2.0 * v;
        }
        residual = res.amax();
        if residual < 1e-15 {
            break;
        }
        let svd = jac.svd(true, true);
        let cut = 1e-9 * svd.singular_values.max();
        let step = svd
            .solve(&(-res), cut)
            .map_err(|_| NpaError::SolverFailure {
                status: SolverStatus::NumericalTrouble,
                gap: f64::NAN,
            })?;
        bm += RMatrix::from_column_slice(n, r, step.as_slice());
    }
    let svd = bm.svd(true, false);
    let u = svd
        .u
        .expect("left singular vectors")
        .columns(0, r)
        .into_owned();
    Ok((residual <= 1e-12).then_some(u))
}

/// Null vectors of a feasible matrix restricted to row groups. Certificate
/// ranges computed in floating point are snapped onto their span.
pub struct FaceHint {
    pub matrix: RMatrix,
    pub groups: Vec<Vec<usize>>,
}

/// Replaces the approximate range `u` by the span of the group null vectors
/// of `hint` when the two coincide, and re-certifies it exactly: there must
/// be `Q ≻ 0` with `L(K Q Kᵀ) = 0` for every LMI coefficient `L`.
fn snap_to_hint(p: &SdpProblem, u: &RMatrix, hint: &FaceHint) -> Option<RMatrix> {
    let n = u.nrows();
    let r = u.ncols();
    let scale = hint.matrix.amax().max(1.0);
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for g in &hint.groups {
        if g.is_empty() {
            continue;
        }
        let sub = RMatrix::from_fn(g.len(), g.len(), |i, j| hint.matrix[(g[i], g[j])]);
        let eig = SymmetricEigen::new(sub);
        let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        for k in 0..g.len() {
            if eig.eigenvalues[k].abs() < 1e-10 * scale {
                let mut v = DVector::zeros(n);
                for (i, &row) in g.iter().enumerate() {
                    v[row] = eig.eigenvectors[(i, k)];
                }
                cols.push(v);
            }
        }
    }
    if cols.len() < r {
        return None;
    }
    let kb = RMatrix::from_columns(&cols);
    let (lam, vecs) = sorted_eigen(&kb * kb.transpose());
    let rank = lam.iter().filter(|&&l| l > 1e-12).count();
    if rank != r {
        return None;
    }
    let k = vecs.columns(0, r).into_owned();
    let cos = (k.transpose() * u).svd(false, false).singular_values;
    if cos.min() < 1.0 - 1e-6 {
        return None;
    }
    // Exact certificate on span(K).
    let (f0, gs) = lmi_parts(p);
    let pairs: Vec<(usize, usize)> = (0..r).flat_map(|a| (a..r).map(move |b| (a, b))).collect();
    let restricted: Vec<RMatrix> = gs
        .iter()
        .chain(std::iter::once(&f0))
        .map(|g| k.transpose() * g * &k)
        .filter(|m| m.amax() > 0.0)
        .collect();
    let l = RMatrix::from_fn(restricted.len(), pairs.len(), |i, c| {
        let (a, b) = pairs[c];
        if a == b {
            restricted[i][(a, a)]
        } else {
            2.0 * restricted[i][(a, b)]
        }
    });
    let (lam, vecs) = sorted_eigen(l.transpose() * &l);
    let lmax = lam[0].max(1e-300);
    let null: Vec<usize> = (0..lam.len()).filter(|&i| lam[i] <= 1e-12 * lmax).collect();
    if null.is_empty() {
        return None;
    }
    // Project the identity onto the certificate space and test definiteness.
    let ident = DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(a, b)| if a == b { 1.0 } else { 0.0 }),
    );
    let mut q = DVector::zeros(pairs.len());
    for &i in &null {
        let col = vecs.column(i);
        q += col * col.dot(&ident);
    }
    let mut qm = RMatrix::zeros(r, r);
    for (c, &(a, b)) in pairs.iter().enumerate() {
        qm[(a, b)] = q[c];
        qm[(b, a)] = q[c];
    }
    let eig = SymmetricEigen::new(qm);
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo > 1e-6 * hi && hi > 0.0 {
        Some(k)
    } else {
        None
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
fn sorted_eigen(m: RMatrix) -> (Vec<f64>, RMatrix) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let lam = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = RMatrix::from_fn(n, n, |i, c| eig.eigenvectors[(i, order[c])]);
    (lam, vecs)
}

/// Full orthogonal factor of a QR decomposition of `m` (tall).
fn full_q(m: RMatrix) -> RMatrix {
    let rows = m.nrows();
    let qr = m.qr();
    let mut q_t = RMatrix::identity(rows, rows);
    qr.q_tr_mul(&mut q_t);
    q_t.transpose()
}

/// One facial-reduction step: restricts the LMI to the complement of the
/// certified common kernel `V` and eliminates the implied equalities
/// `M(y) V = 0` by `y = y₀ + N z`.
pub fn facial_reduction_step(
    p: &SdpProblem,
    offset: f64,
    cfg: &SolverConfig,
    hint: Option<&FaceHint>,
) -> NpaResult<Option<(SdpProblem, f64)>> {
    if p.blocks().len() != 1 {
        return Err(NpaError::ShapeMismatch(
            "facial reduction needs a single block".into(),
        ));
    }
    let Some(v) = face_certificate(p, cfg, hint)? else {
        return Ok(None);
    };
    let n = v.nrows();
    let r = v.ncols();
    let (f0, gs) = lmi_parts(p);
    let m = gs.len();
    let mut e = RMatrix::zeros(n * r, m);
    for (k, g) in gs.iter().enumerate() {
        let gv = g * &v;
        e.column_mut(k).copy_from_slice(gv.as_slice());
    }
    let rhs = DVector::from_column_slice((-(&f0 * &v)).as_slice());
    // Spectral split of EᵀE; its eigenvectors give both the row space and
    // an orthonormal null basis.
    let (lam, vecs) = sorted_eigen(e.transpose() * &e);
    let l0 = lam.first().copied().unwrap_or(0.0).max(1e-300);
    let rank = lam.iter().filter(|&&l| l > 1e-12 * l0).count();
    let etr = e.transpose() * &rhs;
    let mut y0 = DVector::zeros(m);
    for c in 0..rank {
        let col = vecs.column(c);
        y0 += col * (col.dot(&etr) / lam[c]);
    }
    let mismatch = (&e * &y0 - &rhs).amax();
    if mismatch > 1e-8 * (1.0 + rhs.amax()) {
        return Err(NpaError::Infeasible(format!(
            "face equalities inconsistent ({mismatch:.3e})"
        )));
    }
    let null = vecs.columns(rank, m - rank).into_owned();
    let comp = full_q(v.clone()).columns(r, n - r).into_owned();

    // Objective: w·y = w·y₀ + (Nᵀ w)·z with w = −b.
    let b = DVector::from_column_slice(p.rhs());
    let new_offset = offset - b.dot(&y0);
    let new_b = null.transpose() * &b;
    let mut f_new = f0;
    for (k, g) in gs.iter().enumerate() {
        if y0[k] != 0.0 {
            f_new += g * y0[k];
        }
    }
    let c_new = -(comp.transpose() * f_new * &comp);
    // Stack G_k as columns to combine them with N in one product.
    let mut gmat = RMatrix::zeros(n * n, m);
    for (k, g) in gs.iter().enumerate() {
        gmat.column_mut(k).copy_from_slice(g.as_slice());
    }
    let combos = gmat * &null;
    let mut a_new = Vec::new();
    let mut b_kept = Vec::new();
    let norms: Vec<(RMatrix, f64)> = (0..m - rank)
        .map(|j| {
            let s = RMatrix::from_column_slice(n, n, combos.column(j).as_slice());
            let a = comp.transpose() * s * &comp;
            let nrm = a.norm();
            (a, nrm)
        })
        .collect();
    let amax = norms.iter().map(|t| t.1).fold(0.0, f64::max);
    for (j, (a, nrm)) in norms.into_iter().enumerate() {
        if nrm <= 1e-12 * amax {
            if new_b[j].abs() > 1e-9 * (1.0 + new_b.amax()) {
                return Err(NpaError::ProfileTooSmall(
                    "objective direction unconstrained by the matrix".into(),
                ));
            }
            continue;
        }
        a_new.push(upper_entries(&a));
        b_kept.push(new_b[j]);
    }
    if a_new.is_empty() {
        return Err(NpaError::ProfileTooSmall(
            "no free moments remain after facial reduction".into(),
        ));
    }
    let problem = SdpProblem::new(
        vec![Block::dense(n - r)],
        upper_entries(&c_new),
        a_new,
        b_kept,
    )?;
    Ok(Some((problem, new_offset)))
}

/// Explicit operators and state on `A ⊗ B ⊗ Λ ⊗ E` realizing the
/// decomposition attack: Bob¹ reads the branch register Λ, Eve holds a
/// purification copy of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub dims: Vec<usize>,
    pub state: CVector,
    operators: HashMap<Letter, CMatrix>,
}

fn branch_projectors(eps: f64, y: usize, theta: ThetaBasis) -> NpaResult<Vec<(f64, Vec<CMatrix>)>> {
    let eig = bob_basis(y)?;
    let th = match theta {
        ThetaBasis::Eigen => eig.clone(),
        ThetaBasis::Computational => theta_vectors(theta, y)?,
    };
    let mut out = vec![(eps, eig.iter().map(outer).collect::<Vec<_>>())];
    for shift in 0..OUTCOMES {
        out.push((
            (1.0 - eps) / OUTCOMES as f64,
            (0..OUTCOMES)
                .map(|l| outer(&th[(l + shift) % OUTCOMES]))
                .collect(),
        ));
    }
    Ok(out)
}

/// Realization of the mixture-instrument chain at Bob¹ sharpness `eps`
/// with Eve guessing the most likely `(b₁, b₂)` of each branch at `target`.
pub fn decomposition_realization(
    kind: StateKind,
    eps: f64,
    target: (usize, usize),
    theta: ThetaBasis,
) -> NpaResult<Realization> {
    let cfg = CglmpSettings::default();
    let (alice, bob) = optimal_measurements(&cfg)?;
    let psi = canonical_state(kind, 3)?;
    let branches: Vec<Vec<(f64, Vec<CMatrix>)>> = (0..SETTINGS)
        .map(|y| branch_projectors(eps, y, theta))
        .collect::<NpaResult<_>>()?;
    let lam = branches[0].len();
    let dims = vec![3, 3, lam, lam];
    let id3 = identity(3);
    let id_l = identity(lam);
    let proj = |k: usize| {
        let mut m = CMatrix::zeros(lam, lam);
        m[(k, k)] = crate::qcore::c(1.0);
        m
    };
    let mut operators = HashMap::new();
    for x in 0..SETTINGS {
        for a in 0..OUTCOMES {
            let op = kron(&kron(alice[x].element(a), &id3), &identity(lam * lam));
            operators.insert(Letter::alice(x, a), op);
        }
    }
    for y in 0..SETTINGS {
        for b in 0..OUTCOMES {
            let mut b1 = CMatrix::zeros(9 * lam, 9 * lam);
            for (k, (_, pv)) in branches[y].iter().enumerate() {
                b1 += kron(&kron(&id3, &pv[b]), &proj(k));
            }
            operators.insert(Letter::bob(1, y, b), kron(&b1, &id_l));
            operators.insert(
                Letter::bob(2, y, b),
                kron(&kron(&id3, bob[y].element(b)), &identity(lam * lam)),
            );
        }
    }
    // Eve's guess per branch at the target setting.
    let rho = psi.projector();
    let mut guesses = Vec::with_capacity(lam);
    for (_, pv) in &branches[target.0] {
        let mut p = vec![0.0; EVE_OUTCOMES];
        for b1 in 0..OUTCOMES {
            let k = kron(&id3, &pv[b1]);
            let post = &k * &rho * &k;
            for b2 in 0..OUTCOMES {
                p[b1 * OUTCOMES + b2] = (kron(&id3, bob[target.1].element(b2)) * &post).trace().re;
            }
        }
        guesses.push(lexmin_argmax(&p));
    }
    for e in 0..EVE_OUTCOMES {
        let mut m = CMatrix::zeros(lam, lam);
        for (k, &g) in guesses.iter().enumerate() {
            if g == e {
                m[(k, k)] = crate::qcore::c(1.0);
            }
        }
        operators.insert(Letter::eve(e), kron(&identity(9 * lam), &m));
    }
    let mut anc = CVector::zeros(lam * lam);
    for (k, (w, _)) in branches[0].iter().enumerate() {
        anc[k * lam + k] = crate::qcore::c(w.sqrt());
    }
    let state = crate::qcore::kron_vec(psi.amplitudes(), &anc);
    Ok(Realization {
        dims,
        state,
        operators,
    })
}

impl Realization {
    pub fn operator(&self, l: &Letter) -> &CMatrix {
        &self.operators[l]
    }

    /// `w |ψ⟩`, rightmost letter applied first.
    pub fn apply(&self, w: &Word) -> CVector {
        if w.is_zero() {
            return CVector::zeros(self.state.len());
        }
        w.letters()
            .iter()
            .rev()
            .fold(self.state.clone(), |v, l| &self.operators[l] * v)
    }

    /// Real part of `⟨ψ| u_i† u_j |ψ⟩` over the problem's words.
    pub fn moment_matrix(&self, problem: &MomentProblem) -> RMatrix {
        let vecs: Vec<CVector> = problem.words().iter().map(|w| self.apply(w)).collect();
        let n = vecs.len();
        RMatrix::from_fn(n, n, |i, j| vecs[i].dotc(&vecs[j]).re)
    }

    /// `p(a, b₁, b₂ | x, y₁, y₂) = ⟨A B1 B2 B1⟩`.
    pub fn distribution(&self) -> JointDistribution {
        let mut dist = JointDistribution::zeros(vec![OUTCOMES; 3], vec![SETTINGS; 3]);
        for x in 0..SETTINGS {
            for y1 in 0..SETTINGS {
                for y2 in 0..SETTINGS {
                    for a in 0..OUTCOMES {
                        for b1 in 0..OUTCOMES {
                            for b2 in 0..OUTCOMES {
                                let u = self.apply(&Word::new(vec![Letter::bob(1, y1, b1)]));
                                let v = self.apply(&Word::new(vec![
                                    Letter::alice(x, a),
                                    Letter::bob(2, y2, b2),
                                    Letter::bob(1, y1, b1),
                                ]));
                                dist.set(&[x, y1, y2], &[a, b1, b2], u.dotc(&v).re);
                            }
                        }
                    }
                }
            }
        }
        dist
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guessing::{bob1_decomposition, guess_cglmp, observed_table, GuessScope};
    use proptest::prelude::*;

    fn w(letters: &[Letter]) -> Word {
        Word::new(letters.to_vec())
    }

    #[test]
    fn canonical_examples() {
        let a00 = Letter::alice(0, 0);
        assert_eq!(canonicalize(&w(&[a00, a00])), w(&[a00]));
        assert!(canonicalize(&w(&[a00, Letter::alice(0, 1)])).is_zero());
        let b2 = Letter::bob(2, 0, 0);
        let a01 = Letter::alice(1, 0);
        assert_eq!(canonicalize(&w(&[b2, a01])), w(&[a01, b2]));
        let b1 = Letter::bob(1, 0, 0);
        assert_eq!(canonicalize(&w(&[b1, b2, b1])), w(&[b1, b2, b1]));
        let e = Letter::eve(4);
        assert_eq!(canonicalize(&w(&[e, b1, a00])), w(&[a00, b1, e]));
        // Different Alice settings do not commute.
        assert_eq!(canonicalize(&w(&[a00, a01, a00])), w(&[a00, a01, a00]));
    }

    #[test]
    fn letters_are_validated() {
        assert!(Letter::new(Role::Alice, 2, 0).is_err());
        assert!(Letter::new(Role::Bob(3), 0, 0).is_err());
        assert!(Letter::new(Role::Eve, 0, 9).is_err());
        assert!(Letter::new(Role::Eve, 0, 8).is_ok());
    }

    fn any_letter() -> impl Strategy<Value = Letter> {
        prop_oneof![
            (0..2usize, 0..3usize).prop_map(|(s, o)| Letter::alice(s, o)),
            (1..3u8, 0..2usize, 0..3usize).prop_map(|(r, s, o)| Letter::bob(r, s, o)),
            (0..9usize).prop_map(Letter::eve),
        ]
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(letters in proptest::collection::vec(any_letter(), 0..7)) {
            let c = canonicalize(&Word::new(letters));
            prop_assert_eq!(canonicalize(&c), c.clone());
        }

        #[test]
        fn moment_key_is_conjugation_invariant(letters in proptest::collection::vec(any_letter(), 0..7)) {
            let word = Word::new(letters);
            prop_assert_eq!(moment_key(&word), moment_key(&word.dagger()));
        }
    }

    #[test]
    fn default_profile_counts() {
        let p = build_problem(None, (0, 1), WordProfile::Default).unwrap();
        assert_eq!(p.dim(), 154);
        assert_eq!(p.count(ConstraintKind::Normalization), 1);
        assert_eq!(p.count(ConstraintKind::Data), 0);
        let ext = build_problem(None, (0, 1), WordProfile::Extended).unwrap();
        assert_eq!(ext.dim(), 226);
        let extended = profile_words(WordProfile::Extended);
        assert!(profile_words(WordProfile::Default)
            .iter()
            .all(|w| extended.contains(w)));
    }

    #[test]
    fn data_rows_and_shape_checks() {
        let s = mixture_scenario(StateKind::Mes, 0.8, ThetaBasis::Eigen).unwrap();
        let p_obs = sequential_distribution(&s).unwrap();
        let p = build_problem(Some(&p_obs), (0, 1), WordProfile::Default).unwrap();
        assert_eq!(p.count(ConstraintKind::Data), 216);
        assert_eq!(p.count(ConstraintKind::Normalization), 1);
        let bad = JointDistribution::zeros(vec![3, 3], vec![2, 2]);
        assert!(matches!(
            build_problem(Some(&bad), (0, 1), WordProfile::Default),
            Err(NpaError::ShapeMismatch(_))
        ));
        assert!(build_problem(None, (2, 0), WordProfile::Default).is_err());
    }

    #[test]
    fn realization_reproduces_mixture_statistics() {
        for theta in [ThetaBasis::Eigen, ThetaBasis::Computational] {
            let r = decomposition_realization(StateKind::Mvs, 0.75, (0, 1), theta).unwrap();
            let s = mixture_scenario(StateKind::Mvs, 0.75, theta).unwrap();
            let p = sequential_distribution(&s).unwrap();
            assert!(r.distribution().max_abs_diff(&p) < 1e-12);
        }
    }

    #[test]
    fn witness_satisfies_all_constraints() {
        for (kind, eps, target) in [
            (StateKind::Mes, 0.8, (0, 1)),
            (StateKind::Mvs, 0.75, (1, 1)),
        ] {
            let r = decomposition_realization(kind, eps, target, ThetaBasis::Eigen).unwrap();
            let p_obs = r.distribution();
            let problem = build_problem(Some(&p_obs), target, WordProfile::Default).unwrap();
            let rep = problem.check_witness(&r.moment_matrix(&problem)).unwrap();
            assert!(rep.identification_residual < 1e-8, "{rep:?}");
            assert!(rep.equation_residual < 1e-8, "{rep:?}");
            assert!(rep.min_eigenvalue > -1e-8, "{rep:?}");
            let s = mixture_scenario(kind, eps, ThetaBasis::Eigen).unwrap();
            let dec = bob1_decomposition(eps, target.0, ThetaBasis::Eigen).unwrap();
            let g = guess_cglmp(&s, &dec, (0, target.0, target.1), GuessScope::Local).unwrap();
            assert!((rep.objective - g.guess_probability).abs() < 1e-10);
            let _ = observed_table;
        }
    }

    #[test]
    fn witness_detects_broken_constraints() {
        let r = decomposition_realization(StateKind::Mes, 0.8, (0, 1), ThetaBasis::Eigen).unwrap();
        let mut p_obs = r.distribution();
        let v = p_obs.get(&[0, 0, 0], &[0, 0, 0]);
        p_obs.set(&[0, 0, 0], &[0, 0, 0], v + 1e-3);
        let problem = build_problem(Some(&p_obs), (0, 1), WordProfile::Default).unwrap();
        let rep = problem.check_witness(&r.moment_matrix(&problem)).unwrap();
        assert!(rep.equation_residual > 1e-4);
    }

    #[test]
    fn reduction_keeps_witness_feasible() {
        let target = (0, 1);
        let r = decomposition_realization(StateKind::Mes, 0.8, target, ThetaBasis::Eigen).unwrap();
        let problem = build_problem(Some(&r.distribution()), target, WordProfile::Default).unwrap();
        let red = problem.reduce().unwrap();
        let m = r.moment_matrix(&problem);
        // Every moment must be reproduced by its affine expression at the
        // witness values of the free moments.
        let mut value = vec![None; problem.moment_count()];
        for i in 0..problem.dim() {
            for j in 0..problem.dim() {
                if let Some(id) = problem.placement(i, j) {
                    value[id] = Some(m[(i, j)]);
                }
            }
        }
        let mut y = vec![0.0; red.free_variables];
        for (id, e) in red.moments.iter().enumerate() {
            if e.terms.len() == 1 && e.constant == 0.0 && e.terms[0].1 == 1.0 {
                y[e.terms[0].0] = value[id].unwrap();
            }
        }
        for (id, e) in red.moments.iter().enumerate() {
            assert!(
                (e.eval(&y) - value[id].unwrap()).abs() < 1e-9,
                "moment {}",
                problem.moment_word(id)
            );
        }
        assert!(red.kept_rows.len() < problem.dim());
    }

    #[test]
    fn no_data_bound_is_trivial() {
        let r =
            di_guess_bound(None, (0, 1), WordProfile::Default, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, SolverStatus::Optimal);
        assert!((r.report.guess_probability - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn mixture_bound_dominates_decomposition_attack() {
        let (kind, eps, target) = (StateKind::Mes, 0.8, (0, 1));
        let r = mixture_guess_bound(
            kind,
            eps,
            target,
            ThetaBasis::Eigen,
            WordProfile::Default,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(r.status, SolverStatus::Optimal);
        assert!(r.gap < 1e-6);
        let s = mixture_scenario(kind, eps, ThetaBasis::Eigen).unwrap();
        let dec = bob1_decomposition(eps, target.0, ThetaBasis::Eigen).unwrap();
        let g = guess_cglmp(&s, &dec, (0, target.0, target.1), GuessScope::Local).unwrap();
        assert!(r.report.guess_probability >= g.guess_probability - 1e-6);
        assert!(r.report.guess_probability <= 1.0);
    }

    #[test]
    fn eve_relabeling_leaves_bound_unchanged() {
        let s = mixture_scenario(StateKind::Mvs, 0.8, ThetaBasis::Eigen).unwrap();
        let p = sequential_distribution(&s).unwrap();
        let cfg = SolverConfig::default();
        let labels: Vec<usize> = (0..EVE_OUTCOMES).rev().collect();
        let base = build_problem(Some(&p), (0, 1), WordProfile::Default).unwrap();
        let relabeled =
            build_problem_with(Some(&p), (0, 1), WordProfile::Default, &labels).unwrap();
        let a = solve_moment_problem(&base, &cfg, None).unwrap();
        let b = solve_moment_problem(&relabeled, &cfg, None).unwrap();
        assert!((a.report.guess_probability - b.report.guess_probability).abs() < 1e-6);
    }
}
