//! Game structure: agent layout, local box sets, shared affine constraints,
//! feasibility tests, feasible sampling and the preference-oracle abstraction.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_util;

/// Default tolerance for equality constraints and inequality slack.
pub const DEFAULT_TOL_EQ: f64 = 1e-8;

/// Minimum acceptance rate tolerated by rejection sampling.
const MIN_ACCEPTANCE_RATE: f64 = 1e-4;
/// Number of trials after which the acceptance rate is checked.
const SAMPLING_TRIAL_BUDGET: usize = 10_000;

/// Partition of the stacked decision vector into per-agent blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct AgentLayout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl AgentLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("a game needs at least one agent".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(
                "every agent needs at least one decision variable".into(),
            ));
        }
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for &d in &dims {
            offsets.push(total);
            total += d;
        }
        Ok(Self { dims, offsets, total })
    }

    pub fn num_agents(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, agent: usize) -> usize {
        self.dims[agent]
    }

    /// Total dimension `n`.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Dimension of the opponents' vector `x_{-i}`.
    pub fn others_dim(&self, agent: usize) -> usize {
        self.total - self.dims[agent]
    }

    pub fn range(&self, agent: usize) -> Range<usize> {
        self.offsets[agent]..self.offsets[agent] + self.dims[agent]
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.total {
            return Err(Error::DimensionMismatch {
                context: "stacked decision vector",
                expected: self.total,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Block `x_i`.
    pub fn extract(&self, agent: usize, x: &DVector<f64>) -> DVector<f64> {
        let r = self.range(agent);
        DVector::from_column_slice(&x.as_slice()[r])
    }

    /// Opponents' vector `x_{-i}`, agents kept in their natural order.
    pub fn others(&self, agent: usize, x: &DVector<f64>) -> DVector<f64> {
        let r = self.range(agent);
        let s = x.as_slice();
        DVector::from_iterator(
            self.others_dim(agent),
            s[..r.start].iter().chain(&s[r.end..]).copied(),
        )
    }

    /// Returns `x` with block `agent` replaced by `block`.
    pub fn insert(&self, agent: usize, block: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        out.as_mut_slice()[self.range(agent)].copy_from_slice(block.as_slice());
        out
    }

    /// Rebuilds the stacked vector from `x_i` and `x_{-i}`.
    pub fn assemble(&self, agent: usize, block: &DVector<f64>, others: &DVector<f64>) -> DVector<f64> {
        let r = self.range(agent);
        let o = others.as_slice();
        let mut out = Vec::with_capacity(self.total);
        out.extend_from_slice(&o[..r.start]);
        out.extend_from_slice(block.as_slice());
        out.extend_from_slice(&o[r.start..]);
        DVector::from_vec(out)
    }
}

impl TryFrom<Vec<usize>> for AgentLayout {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<AgentLayout> for Vec<usize> {
    fn from(l: AgentLayout) -> Self {
        l.dims
    }
}

/// Axis-aligned box `lower <= x <= upper`; bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxDoc", into = "BoxDoc")]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxDoc {
    #[serde(with = "serde_util::bounds")]
    lower: Vec<f64>,
    #[serde(with = "serde_util::bounds")]
    upper: Vec<f64>,
}

impl TryFrom<BoxDoc> for BoxSet {
    type Error = Error;
    fn try_from(d: BoxDoc) -> Result<Self> {
        BoxSet::new(d.lower, d.upper)
    }
}

impl From<BoxSet> for BoxDoc {
    fn from(b: BoxSet) -> Self {
        BoxDoc { lower: b.lower, upper: b.upper }
    }
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                context: "box bounds",
                expected: lower.len(),
                actual: upper.len(),
            });
        }
        if lower.iter().chain(&upper).any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("NaN box bound".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::InvalidArgument("box lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    /// The box `[lower, upper]^dim`.
    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|v| v.is_finite())
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|v| *v == f64::NEG_INFINITY)
            && self.upper.iter().all(|v| *v == f64::INFINITY)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(v, (l, u))| v.clamp(*l, *u)),
        )
    }

    /// Uniform sample; the box must be bounded.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(l, u)| {
                    if l == u {
                        *l
                    } else if (u - l).is_finite() {
                        rng.random_range(*l..=*u)
                    } else {
                        // width overflows f64; blend the endpoints instead
                        let t: f64 = rng.random();
                        (l * (1.0 - t) + u * t).clamp(*l, *u)
                    }
                }),
        )
    }

    /// Concatenation of several boxes.
    pub fn stack<'a>(boxes: impl IntoIterator<Item = &'a BoxSet>) -> BoxSet {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for b in boxes {
            lower.extend_from_slice(&b.lower);
            upper.extend_from_slice(&b.upper);
        }
        BoxSet { lower, upper }
    }
}

/// Shared affine constraints `G x + g0 <= 0`, `H x + h0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraints {
    pub g: DMatrix<f64>,
    pub g0: DVector<f64>,
    pub h: DMatrix<f64>,
    pub h0: DVector<f64>,
}

impl AffineConstraints {
    /// No constraints on a vector of dimension `dim`.
    pub fn none(dim: usize) -> Self {
        Self {
            g: DMatrix::zeros(0, dim),
            g0: DVector::zeros(0),
            h: DMatrix::zeros(0, dim),
            h0: DVector::zeros(0),
        }
    }

    pub fn new(g: DMatrix<f64>, g0: DVector<f64>, h: DMatrix<f64>, h0: DVector<f64>) -> Result<Self> {
        if g.nrows() != g0.len() {
            return Err(Error::DimensionMismatch {
                context: "inequality offset",
                expected: g.nrows(),
                actual: g0.len(),
            });
        }
        if h.nrows() != h0.len() {
            return Err(Error::DimensionMismatch {
                context: "equality offset",
                expected: h.nrows(),
                actual: h0.len(),
            });
        }
        if g.ncols() != h.ncols() {
            return Err(Error::DimensionMismatch {
                context: "constraint columns",
                expected: g.ncols(),
                actual: h.ncols(),
            });
        }
        Ok(Self { g, g0, h, h0 })
    }

    pub fn inequality(g: DMatrix<f64>, g0: DVector<f64>) -> Result<Self> {
        let dim = g.ncols();
        Self::new(g, g0, DMatrix::zeros(0, dim), DVector::zeros(0))
    }

    pub fn equality(h: DMatrix<f64>, h0: DVector<f64>) -> Result<Self> {
        let dim = h.ncols();
        Self::new(DMatrix::zeros(0, dim), DVector::zeros(0), h, h0)
    }

    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn n_ineq(&self) -> usize {
        self.g.nrows()
    }

    pub fn n_eq(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.n_ineq() == 0 && self.n_eq() == 0
    }

    pub fn satisfied(&self, x: &DVector<f64>, tol: f64) -> bool {
        if self.n_ineq() > 0 && (&self.g * x + &self.g0).iter().any(|v| *v > tol) {
            return false;
        }
        self.n_eq() == 0 || (&self.h * x + &self.h0).amax() <= tol
    }

    /// Restriction to agent `agent`'s block with the opponents fixed:
    /// `G_i x_i + (g0 + G_{-i} x_{-i}) <= 0` and likewise for `H`.
    pub fn slice_for_agent(&self, layout: &AgentLayout, agent: usize, others: &DVector<f64>) -> Self {
        let r = layout.range(agent);
        let split = |m: &DMatrix<f64>, off: &DVector<f64>| {
            let own = m.columns(r.start, r.len()).into_owned();
            let mut shift = off.clone();
            let mut col = 0;
            for j in (0..layout.total()).filter(|j| !r.contains(j)) {
                shift.axpy(others[col], &m.column(j), 1.0);
                col += 1;
            }
            (own, shift)
        };
        let (g, g0) = split(&self.g, &self.g0);
        let (h, h0) = split(&self.h, &self.h0);
        Self { g, g0, h, h0 }
    }

    /// Orthogonal projection onto `{x : H x + h0 = 0}`; identity without equalities.
    pub fn project_equalities(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if self.n_eq() == 0 {
            return Ok(x.clone());
        }
        let hht = &self.h * self.h.transpose();
        let resid = &self.h * x + &self.h0;
        let lambda = hht
            .clone()
            .cholesky()
            .map(|c| c.solve(&resid))
            .or_else(|| hht.lu().solve(&resid))
            .ok_or_else(|| Error::InvalidArgument("equality constraints are rank deficient".into()))?;
        Ok(x - self.h.transpose() * lambda)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineDoc {
    #[serde(default)]
    g: Vec<Vec<f64>>,
    #[serde(default)]
    g0: Vec<f64>,
    #[serde(default)]
    h: Vec<Vec<f64>>,
    #[serde(default)]
    h0: Vec<f64>,
}

/// Stacked-game constraint structure of the GNEP; objectives live elsewhere
/// (quadratic surrogates or an opaque preference oracle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GameDoc", into = "GameDoc")]
pub struct ConstrainedGame {
    layout: AgentLayout,
    local: Vec<BoxSet>,
    shared: AffineConstraints,
    sampling: Option<Vec<BoxSet>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GameDoc {
    dims: Vec<usize>,
    local: Vec<BoxSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shared: Option<AffineDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sampling: Option<Vec<BoxSet>>,
}

impl TryFrom<GameDoc> for ConstrainedGame {
    type Error = Error;

    fn try_from(doc: GameDoc) -> Result<Self> {
        let layout = AgentLayout::new(doc.dims)?;
        let n = layout.total();
        let shared = match doc.shared {
            None => AffineConstraints::none(n),
            Some(a) => {
                let bad = |e: serde::de::value::Error| Error::InvalidArgument(e.to_string());
                let mut g = serde_util::matrix::from_rows(a.g).map_err(bad)?;
                let mut h = serde_util::matrix::from_rows(a.h).map_err(bad)?;
                if g.nrows() == 0 {
                    g = DMatrix::zeros(0, n);
                }
                if h.nrows() == 0 {
                    h = DMatrix::zeros(0, n);
                }
                AffineConstraints::new(g, DVector::from_vec(a.g0), h, DVector::from_vec(a.h0))?
            }
        };
        let game = ConstrainedGame::new(layout, doc.local, shared)?;
        match doc.sampling {
            Some(s) => game.with_sampling_boxes(s),
            None => Ok(game),
        }
    }
}

impl From<ConstrainedGame> for GameDoc {
    fn from(g: ConstrainedGame) -> Self {
        let shared = (!g.shared.is_empty()).then(|| AffineDoc {
            g: serde_util::matrix::to_rows(&g.shared.g),
            g0: g.shared.g0.iter().copied().collect(),
            h: serde_util::matrix::to_rows(&g.shared.h),
            h0: g.shared.h0.iter().copied().collect(),
        });
        GameDoc {
            dims: g.layout.dims.clone(),
            local: g.local,
            shared,
            sampling: g.sampling,
        }
    }
}

impl ConstrainedGame {
    pub fn new(layout: AgentLayout, local: Vec<BoxSet>, shared: AffineConstraints) -> Result<Self> {
        if local.len() != layout.num_agents() {
            return Err(Error::DimensionMismatch {
                context: "local sets per agent",
                expected: layout.num_agents(),
                actual: local.len(),
            });
        }
        for (i, b) in local.iter().enumerate() {
            if b.dim() != layout.dim(i) {
                return Err(Error::DimensionMismatch {
                    context: "local box dimension",
                    expected: layout.dim(i),
                    actual: b.dim(),
                });
            }
        }
        if shared.dim() != layout.total() {
            return Err(Error::DimensionMismatch {
                context: "shared constraint columns",
                expected: layout.total(),
                actual: shared.dim(),
            });
        }
        Ok(Self {
            layout,
            local,
            shared,
            sampling: None,
        })
    }

    /// Game with unconstrained agents of the given dimensions.
    pub fn unconstrained(dims: Vec<usize>) -> Result<Self> {
        let layout = AgentLayout::new(dims)?;
        let local = layout.dims().iter().map(|&d| BoxSet::unbounded(d)).collect();
        let n = layout.total();
        Self::new(layout, local, AffineConstraints::none(n))
    }

    /// Explicit per-agent sampling boxes, used wherever a local set is unbounded.
    pub fn with_sampling_boxes(mut self, boxes: Vec<BoxSet>) -> Result<Self> {
        if boxes.len() != self.layout.num_agents()
            || boxes.iter().enumerate().any(|(i, b)| b.dim() != self.layout.dim(i) || !b.is_bounded())
        {
            return Err(Error::InvalidArgument(
                "sampling boxes must be bounded and match the agent layout".into(),
            ));
        }
        self.sampling = Some(boxes);
        Ok(self)
    }

    pub fn layout(&self) -> &AgentLayout {
        &self.layout
    }

    pub fn num_agents(&self) -> usize {
        self.layout.num_agents()
    }

    pub fn local(&self, agent: usize) -> &BoxSet {
        &self.local[agent]
    }

    pub fn shared(&self) -> &AffineConstraints {
        &self.shared
    }

    /// Box of the stacked vector (product of the local sets).
    pub fn joint_box(&self) -> BoxSet {
        BoxSet::stack(&self.local)
    }

    /// Bounded box used to sample agent `agent`'s decisions: the local set
    /// when bounded, otherwise the configured sampling box.
    pub fn sampling_box(&self, agent: usize) -> Result<BoxSet> {
        let local = &self.local[agent];
        if local.is_bounded() {
            return Ok(local.clone());
        }
        match &self.sampling {
            Some(s) => {
                // intersect so samples respect whatever finite bounds exist
                let sb = &s[agent];
                let lower = local.lower.iter().zip(&sb.lower).map(|(a, b)| a.max(*b)).collect();
                let upper = local.upper.iter().zip(&sb.upper).map(|(a, b)| a.min(*b)).collect();
                BoxSet::new(lower, upper)
            }
            None => Err(Error::UnboundedSampling { agent }),
        }
    }

    /// Checks local boxes and shared constraints at tolerance `tol_eq`.
    pub fn feasible(&self, x: &DVector<f64>, tol_eq: f64) -> Result<bool> {
        self.layout.check(x)?;
        let in_boxes = (0..self.num_agents())
            .all(|i| self.local[i].contains(&x.as_slice()[self.layout.range(i)], tol_eq));
        Ok(in_boxes && self.shared.satisfied(x, tol_eq))
    }

    /// Draws `count` jointly feasible points by rejection sampling inside the
    /// sampling boxes, projecting onto the equality subspace first.
    pub fn sample_feasible<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let boxes = (0..self.num_agents())
            .map(|i| self.sampling_box(i))
            .collect::<Result<Vec<_>>>()?;
        let joint = BoxSet::stack(&boxes);
        let mut out = Vec::with_capacity(count);
        let mut trials = 0usize;
        while out.len() < count {
            trials += 1;
            let candidate = self.shared.project_equalities(&joint.sample(rng))?;
            if self.feasible(&candidate, DEFAULT_TOL_EQ)? {
                out.push(candidate);
            }
            if trials >= SAMPLING_TRIAL_BUDGET && (out.len() as f64) < MIN_ACCEPTANCE_RATE * trials as f64 {
                return Err(Error::SamplingFailed { budget: trials });
            }
        }
        Ok(out)
    }

    /// Samples a decision for `agent` that is feasible jointly with `others`.
    pub fn sample_agent_feasible<R: Rng + ?Sized>(
        &self,
        agent: usize,
        others: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let sbox = self.sampling_box(agent)?;
        let slice = self.shared.slice_for_agent(&self.layout, agent, others);
        for _ in 0..SAMPLING_TRIAL_BUDGET {
            let candidate = slice.project_equalities(&sbox.sample(rng))?;
            if self.local[agent].contains(candidate.as_slice(), DEFAULT_TOL_EQ)
                && slice.satisfied(&candidate, DEFAULT_TOL_EQ)
            {
                return Ok(candidate);
            }
        }
        Err(Error::SamplingFailed {
            budget: SAMPLING_TRIAL_BUDGET,
        })
    }
}

/// Answers pairwise preference queries for the agents of a game whose
/// objectives are hidden from the learner.
pub trait PreferenceOracle: Send + Sync {
    fn num_agents(&self) -> usize;

    /// `true` (π = 1) when agent `agent` weakly prefers `x1` over `x2` given `others`.
    fn query(&self, agent: usize, x1: &DVector<f64>, x2: &DVector<f64>, others: &DVector<f64>) -> Result<bool>;

    /// Number of queries answered so far.
    fn query_count(&self) -> u64;

    /// Diagnostic access to the hidden objective, for evaluation only.
    fn objective_value(&self, _agent: usize, _x: &DVector<f64>, _others: &DVector<f64>) -> Option<Result<f64>> {
        None
    }
}

/// Black-box objective `J_i(x_i, x_{-i})`.
pub type ObjectiveFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> Result<f64> + Send + Sync>;

/// Oracle built from explicit objective functions.
pub struct FnOracle {
    objectives: Vec<ObjectiveFn>,
    queries: AtomicU64,
}

impl std::fmt::Debug for FnOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnOracle")
            .field("agents", &self.objectives.len())
            .field("queries", &self.query_count())
            .finish()
    }
}

pub fn make_preference_oracle(objectives: Vec<ObjectiveFn>) -> FnOracle {
    FnOracle {
        objectives,
        queries: AtomicU64::new(0),
    }
}

impl PreferenceOracle for FnOracle {
    fn num_agents(&self) -> usize {
        self.objectives.len()
    }

    fn query(&self, agent: usize, x1: &DVector<f64>, x2: &DVector<f64>, others: &DVector<f64>) -> Result<bool> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let f = &self.objectives[agent];
        Ok(f(x1, others)? <= f(x2, others)?)
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn objective_value(&self, agent: usize, x: &DVector<f64>, others: &DVector<f64>) -> Option<Result<f64>> {
        Some((self.objectives[agent])(x, others))
    }
}

/// One dataset entry `(x_i^1, x_i^2, x_{-i}, π_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    #[serde(with = "serde_util::vector")]
    pub x1: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub x2: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub x_others: DVector<f64>,
    pub label: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    samples: Vec<PreferenceSample>,
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample: PreferenceSample) {
        self.samples.push(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[PreferenceSample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PreferenceSample> {
        self.samples.iter()
    }
}

impl FromIterator<PreferenceSample> for PreferenceDataset {
    fn from_iter<T: IntoIterator<Item = PreferenceSample>>(iter: T) -> Self {
        Self {
            samples: iter.into_iter().collect(),
        }
    }
}
