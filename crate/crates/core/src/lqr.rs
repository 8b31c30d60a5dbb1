//! Feedback Nash LQR games.
//!
//! Agents share `ξ(t+1) = A ξ(t) + Σ_i B_i u_i(t)` and each applies a static
//! gain `u_i = −K_i ξ`. A gain is judged by its squared Frobenius distance to
//! the finite-horizon best response against the other agents' gains.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{AffineConstraints, AgentLayout, BoxSet, ConstrainedGame, PreferenceOracle};
use crate::serde_util;

pub const RICCATI_DIVERGENCE: f64 = 1e12;
pub const DEFAULT_HORIZON: usize = 50;
pub const DEFAULT_GAIN_BOUND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    #[serde(with = "serde_util::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub b: DMatrix<f64>,
    /// Input count `m_i` of each agent; agent `i` owns consecutive columns of `B`.
    pub inputs: Vec<usize>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, inputs: Vec<usize>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "state matrix columns",
                expected: n,
                actual: a.ncols(),
            });
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "input matrix rows",
                expected: n,
                actual: b.nrows(),
            });
        }
        let m: usize = inputs.iter().sum();
        if m != b.ncols() {
            return Err(Error::DimensionMismatch {
                context: "input partition",
                expected: b.ncols(),
                actual: m,
            });
        }
        if inputs.is_empty() || inputs.contains(&0) {
            return Err(Error::InvalidArgument("every agent needs at least one input".into()));
        }
        Ok(Self { a, b, inputs })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn num_agents(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_offset(&self, agent: usize) -> usize {
        self.inputs[..agent].iter().sum()
    }

    pub fn b_block(&self, agent: usize) -> DMatrix<f64> {
        self.b.columns(self.input_offset(agent), self.inputs[agent]).into_owned()
    }

    pub fn closed_loop(&self, k: &GainProfile) -> DMatrix<f64> {
        &self.a - &self.b * k.stacked()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrCost {
    #[serde(with = "serde_util::matrix")]
    pub q: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub r: DMatrix<f64>,
}

impl LqrCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax());
        if !q.is_square() || !sym(&q) || q.clone().symmetric_eigenvalues().min() < -1e-10 * (1.0 + q.amax()) {
            return Err(Error::InvalidArgument("state weight must be symmetric positive semidefinite".into()));
        }
        if !r.is_square() || !sym(&r) || r.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("input weight must be symmetric positive definite".into()));
        }
        Ok(Self { q, r })
    }
}

/// Per-agent gains `K_i` (`m_i × n_ξ`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainProfile {
    #[serde(with = "serde_gains")]
    pub gains: Vec<DMatrix<f64>>,
}

mod serde_gains {
    use super::serde_util::matrix;
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(matrix::to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Vec::<Vec<Vec<f64>>>::deserialize(d)?.into_iter().map(matrix::from_rows).collect()
    }
}

impl GainProfile {
    pub fn zeros(system: &LinearSystem) -> Self {
        Self {
            gains: system.inputs.iter().map(|&m| DMatrix::zeros(m, system.state_dim())).collect(),
        }
    }

    /// `K = [K_1; …; K_N]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let n = self.gains.first().map_or(0, |k| k.ncols());
        let m: usize = self.gains.iter().map(|k| k.nrows()).sum();
        let mut out = DMatrix::zeros(m, n);
        let mut row = 0;
        for k in &self.gains {
            out.rows_mut(row, k.nrows()).copy_from(k);
            row += k.nrows();
        }
        out
    }

    /// Row-major vectorization of one gain.
    pub fn vectorize_gain(k: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(k.len(), k.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()))
    }

    pub fn unvectorize_gain(x: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        if x.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "vectorized gain",
                expected: rows * cols,
                actual: x.len(),
            });
        }
        Ok(DMatrix::from_row_slice(rows, cols, x.as_slice()))
    }

    /// Concatenation of the agents' vectorized gains, matching [`lqr_layout`].
    pub fn vectorize(&self) -> DVector<f64> {
        let parts: Vec<f64> = self.gains.iter().flat_map(|k| Self::vectorize_gain(k).data.as_vec().clone()).collect();
        DVector::from_vec(parts)
    }

    pub fn from_vector(system: &LinearSystem, x: &DVector<f64>) -> Result<Self> {
        let n = system.state_dim();
        let total: usize = system.inputs.iter().map(|m| m * n).sum();
        if x.len() != total {
            return Err(Error::DimensionMismatch {
                context: "stacked gains",
                expected: total,
                actual: x.len(),
            });
        }
        let mut gains = Vec::with_capacity(system.num_agents());
        let mut at = 0;
        for &m in &system.inputs {
            gains.push(DMatrix::from_row_slice(m, n, &x.as_slice()[at..at + m * n]));
            at += m * n;
        }
        Ok(Self { gains })
    }
}

/// Decision layout of the gain game: agent `i` owns `m_i · n_ξ` entries.
pub fn lqr_layout(system: &LinearSystem) -> AgentLayout {
    AgentLayout::new(system.inputs.iter().map(|m| m * system.state_dim()).collect()).expect("nonempty partition")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrGame {
    pub system: LinearSystem,
    pub costs: Vec<LqrCost>,
    pub horizon: usize,
}

impl LqrGame {
    pub fn new(system: LinearSystem, costs: Vec<LqrCost>, horizon: usize) -> Result<Self> {
        if costs.len() != system.num_agents() {
            return Err(Error::DimensionMismatch {
                context: "agent costs",
                expected: system.num_agents(),
                actual: costs.len(),
            });
        }
        for (i, c) in costs.iter().enumerate() {
            if c.q.nrows() != system.state_dim() {
                return Err(Error::DimensionMismatch {
                    context: "state weight",
                    expected: system.state_dim(),
                    actual: c.q.nrows(),
                });
            }
            if c.r.nrows() != system.inputs[i] {
                return Err(Error::DimensionMismatch {
                    context: "input weight",
                    expected: system.inputs[i],
                    actual: c.r.nrows(),
                });
            }
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        Ok(Self { system, costs, horizon })
    }

    pub fn num_agents(&self) -> usize {
        self.system.num_agents()
    }

    /// Box `[−bound, bound]` on every gain entry and no shared constraints.
    pub fn constrained_game(&self, bound: f64) -> Result<ConstrainedGame> {
        let layout = lqr_layout(&self.system);
        let local = layout
            .dims()
            .iter()
            .map(|&d| BoxSet::uniform(d, -bound, bound))
            .collect::<Result<Vec<_>>>()?;
        ConstrainedGame::new(layout.clone(), local, AffineConstraints::none(layout.total()))
    }
}

/// `Q_i` selecting the `m_i` states `i m_i … (i+1) m_i − 1`, `R_i = I`; `m_i = m / N`.
pub fn benchmark_costs(state_dim: usize, input_dim: usize, agents: usize) -> Result<Vec<LqrCost>> {
    if agents == 0 || input_dim % agents != 0 {
        return Err(Error::InvalidArgument(format!(
            "{input_dim} inputs cannot be split evenly over {agents} agents"
        )));
    }
    let mi = input_dim / agents;
    if agents * mi > state_dim {
        return Err(Error::InvalidArgument("state weights need n_xi >= m".into()));
    }
    (0..agents)
        .map(|i| {
            let mut q = DMatrix::zeros(state_dim, state_dim);
            for s in i * mi..(i + 1) * mi {
                q[(s, s)] = 1.0;
            }
            LqrCost::new(q, DMatrix::identity(mi, mi))
        })
        .collect()
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

/// Gaussian `A` rescaled to the requested spectral radius and Gaussian `B`.
pub fn random_system<R: Rng + ?Sized>(
    state_dim: usize,
    inputs: Vec<usize>,
    radius: f64,
    rng: &mut R,
) -> Result<LinearSystem> {
    if state_dim == 0 || !(radius > 0.0) {
        return Err(Error::InvalidArgument("need n_xi >= 1 and a positive spectral radius".into()));
    }
    let m: usize = inputs.iter().sum();
    let a = loop {
        let a0 = DMatrix::from_fn(state_dim, state_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let rho = spectral_radius(&a0);
        if rho > 1e-12 {
            break a0 * (radius / rho);
        }
    };
    let b = DMatrix::from_fn(state_dim, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    LinearSystem::new(a, b, inputs)
}

/// Stage-0 gain of the `T`-step Riccati recursion for `(a, b, q, r)`.
pub fn finite_horizon_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    horizon: usize,
    agent: usize,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    let mut k = DMatrix::zeros(b.ncols(), a.nrows());
    for _ in 0..horizon {
        let bp = b.tr_mul(&p);
        let s = r + &bp * b;
        let rhs = &bp * a;
        k = match s.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => s.lu().solve(&rhs).ok_or(Error::RiccatiDivergence {
                agent,
                norm: f64::INFINITY,
            })?,
        };
        let next = q + a.tr_mul(&p) * (a - b * &k);
        p = (&next + next.transpose()) * 0.5;
        let norm = p.norm();
        if !(norm <= RICCATI_DIVERGENCE) {
            return Err(Error::RiccatiDivergence { agent, norm });
        }
    }
    Ok(k)
}

/// `Ã = A − Σ_{j≠i} B_j K_j`.
fn opponents_closed_loop(system: &LinearSystem, agent: usize, profile: &GainProfile) -> DMatrix<f64> {
    let mut a = system.a.clone();
    for (j, kj) in profile.gains.iter().enumerate() {
        if j != agent {
            a -= system.b.columns(system.input_offset(j), system.inputs[j]) * kj;
        }
    }
    a
}

/// Best response of `agent` to the other gains in `profile` (its own entry is ignored).
pub fn best_response_gain(game: &LqrGame, agent: usize, profile: &GainProfile) -> Result<DMatrix<f64>> {
    let a_tilde = opponents_closed_loop(&game.system, agent, profile);
    let c = &game.costs[agent];
    finite_horizon_gain(&a_tilde, &game.system.b_block(agent), &c.q, &c.r, game.horizon, agent)
}

/// `‖K_i^{BR}(K_{−i}) − K_i‖_F²`.
pub fn br_deviation(game: &LqrGame, agent: usize, profile: &GainProfile) -> Result<f64> {
    let br = best_response_gain(game, agent, profile)?;
    Ok((br - &profile.gains[agent]).norm_squared())
}

pub fn max_deviation(game: &LqrGame, profile: &GainProfile) -> Result<f64> {
    (0..game.num_agents()).try_fold(0.0f64, |m, i| Ok(m.max(br_deviation(game, i, profile)?)))
}

/// Cyclic best-response sweeps taken before switching to Newton steps.
pub const GAUSS_SEIDEL_SWEEPS: usize = 200;
/// Cap on Levenberg–Marquardt steps after the sweeps.
pub const NEWTON_STEPS: usize = 100;

/// Feedback Nash gains with every agent's deviation at most `tol`.
///
/// Starts with undamped cyclic best-response sweeps from zero gains. When
/// these do not settle (they can cycle on unstable plants), Levenberg–Marquardt
/// steps on the fixed-point residual `BR_i(K_{−i}) − K_i` are taken from the
/// best sweep. `max_sweeps` bounds both phases together.
pub fn nash_gains(game: &LqrGame, tol: f64, max_sweeps: usize) -> Result<GainProfile> {
    let mut profile = GainProfile::zeros(&game.system);
    let mut trace = Vec::new();
    let mut best: Option<(f64, GainProfile)> = None;
    let sweeps = max_sweeps.min(GAUSS_SEIDEL_SWEEPS);
    for _ in 0..sweeps {
        for i in 0..game.num_agents() {
            profile.gains[i] = best_response_gain(game, i, &profile)?;
        }
        let dev = max_deviation(game, &profile)?;
        trace.push(dev);
        if dev <= tol {
            return Ok(profile);
        }
        if best.as_ref().is_none_or(|(d, _)| dev < *d) {
            best = Some((dev, profile.clone()));
        }
    }
    if let Some((_, start)) = best {
        log::debug!("best-response sweeps stalled; switching to Newton steps");
        if let Some(p) = newton_nash(game, start, tol, (max_sweeps - sweeps).min(NEWTON_STEPS), &mut trace)? {
            return Ok(p);
        }
    }
    let last = trace.last().copied().unwrap_or(f64::NAN);
    Err(Error::NashNoConvergence {
        sweeps: max_sweeps,
        trace,
        last,
    })
}

/// Stacked residual `vec(BR_i(K_{−i}) − K_i)`.
fn br_residual(game: &LqrGame, x: &DVector<f64>) -> Result<DVector<f64>> {
    let profile = GainProfile::from_vector(&game.system, x)?;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..game.num_agents() {
        let r = best_response_gain(game, i, &profile)? - &profile.gains[i];
        out.extend(GainProfile::vectorize_gain(&r).iter());
    }
    Ok(DVector::from_vec(out))
}

fn newton_nash(
    game: &LqrGame,
    start: GainProfile,
    tol: f64,
    max_iter: usize,
    trace: &mut Vec<f64>,
) -> Result<Option<GainProfile>> {
    let layout = lqr_layout(&game.system);
    let agent_dev = |r: &DVector<f64>| {
        (0..layout.num_agents())
            .map(|i| r.rows(layout.range(i).start, layout.dim(i)).norm_squared())
            .fold(0.0, f64::max)
    };
    let mut x = start.vectorize();
    let mut r = br_residual(game, &x)?;
    let mut lambda = 1e-6;
    let n = x.len();
    for _ in 0..max_iter {
        let h = 1e-6;
        let mut jac = DMatrix::zeros(n, n);
        for c in 0..n {
            let step = h * (1.0 + x[c].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += step;
            xm[c] -= step;
            let col = (br_residual(game, &xp)? - br_residual(game, &xm)?) / (2.0 * step);
            jac.set_column(c, &col);
        }
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&r);
        let mut improved = false;
        for _ in 0..20 {
            let mut lhs = jtj.clone();
            for d in 0..n {
                lhs[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
            }
            let Some(delta) = lhs.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = &x + delta;
            match br_residual(game, &cand) {
                Ok(rc) if rc.norm() < r.norm() => {
                    x = cand;
                    r = rc;
                    lambda = (lambda * 0.1).max(1e-12);
                    improved = true;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        let dev = agent_dev(&r);
        trace.push(dev);
        if dev <= tol {
            return Ok(Some(GainProfile::from_vector(&game.system, &x)?));
        }
        if !improved {
            break;
        }
    }
    Ok(None)
}

/// Draws random systems with [`benchmark_costs`] until [`nash_gains`] converges.
/// Returns the game, its Nash gains and the number of systems drawn.
#[allow(clippy::too_many_arguments)]
pub fn random_game_with_nash<R: Rng + ?Sized>(
    state_dim: usize,
    input_dim: usize,
    agents: usize,
    radius: f64,
    horizon: usize,
    tol: f64,
    max_draws: usize,
    rng: &mut R,
) -> Result<(LqrGame, GainProfile, usize)> {
    let costs = benchmark_costs(state_dim, input_dim, agents)?;
    let mut last = None;
    for draw in 1..=max_draws {
        let system = random_system(state_dim, vec![input_dim / agents; agents], radius, rng)?;
        let game = LqrGame::new(system, costs.clone(), horizon)?;
        match nash_gains(&game, tol, 1000) {
            Ok(k) => return Ok((game, k, draw)),
            Err(e @ (Error::NashNoConvergence { .. } | Error::RiccatiDivergence { .. })) => {
                log::debug!("system draw {draw} rejected: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::InvalidArgument("max_draws must be positive".into())))
}

#[derive(Debug, Clone)]
pub struct Simulation {
    /// `ξ_0 … ξ_T`.
    pub states: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
}

/// Closed-loop rollout `ξ_{j+1} = (A − BK) ξ_j` with per-agent costs
/// `Σ_{j=0}^{T} ξ_jᵀ Q_i ξ_j + u_{i,j}ᵀ R_i u_{i,j}`.
pub fn simulate(game: &LqrGame, profile: &GainProfile, xi0: &DVector<f64>, horizon: usize) -> Simulation {
    let acl = game.system.closed_loop(profile);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut costs = vec![0.0; game.num_agents()];
    let mut xi = xi0.clone();
    for j in 0..=horizon {
        for (i, c) in game.costs.iter().enumerate() {
            let u = &profile.gains[i] * &xi;
            costs[i] += xi.dot(&(&c.q * &xi)) + u.dot(&(&c.r * &u));
        }
        let next = &acl * &xi;
        states.push(std::mem::replace(&mut xi, next));
        if j == horizon {
            break;
        }
    }
    Simulation { states, costs }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEvaluation {
    pub normalized_rmse: f64,
    /// `max_i` best-response deviation of the learned profile.
    pub max_dev: f64,
    pub deviations: Vec<f64>,
    /// Same normalization applied to each agent's own cost.
    pub per_agent_rmse: Vec<f64>,
}

fn normalized_rmse(learned: &[f64], star: &[f64]) -> Result<f64> {
    let (lo, hi) = star
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::DegenerateNormalizer);
    }
    let mse = learned.iter().zip(star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / star.len() as f64;
    Ok(mse.sqrt() / range)
}

/// Standard normal initial states for [`evaluate_profile`].
pub fn random_initial_states<R: Rng + ?Sized>(state_dim: usize, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| DVector::from_fn(state_dim, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Compares a learned profile with a reference one over the given initial
/// states; the per-state cost is the sum of the agents' costs.
pub fn evaluate_profile(
    game: &LqrGame,
    learned: &GainProfile,
    star: &GainProfile,
    initial_states: &[DVector<f64>],
) -> Result<ProfileEvaluation> {
    let n_agents = game.num_agents();
    let mut total = (Vec::new(), Vec::new());
    let mut per_agent = vec![(Vec::new(), Vec::new()); n_agents];
    for xi0 in initial_states {
        let a = simulate(game, learned, xi0, game.horizon).costs;
        let b = simulate(game, star, xi0, game.horizon).costs;
        total.0.push(a.iter().sum::<f64>());
        total.1.push(b.iter().sum::<f64>());
        for i in 0..n_agents {
            per_agent[i].0.push(a[i]);
            per_agent[i].1.push(b[i]);
        }
    }
    let deviations = (0..n_agents)
        .map(|i| br_deviation(game, i, learned))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProfileEvaluation {
        normalized_rmse: normalized_rmse(&total.0, &total.1)?,
        max_dev: deviations.iter().copied().fold(0.0, f64::max),
        deviations,
        per_agent_rmse: per_agent
            .iter()
            .map(|(a, b)| normalized_rmse(a, b).unwrap_or(f64::NAN))
            .collect(),
    })
}

/// Answers preference queries by comparing best-response deviations.
#[derive(Debug)]
pub struct LqrPreferenceOracle {
    game: LqrGame,
    queries: AtomicU64,
}

impl LqrPreferenceOracle {
    pub fn new(game: LqrGame) -> Self {
        Self {
            game,
            queries: AtomicU64::new(0),
        }
    }

    pub fn game(&self) -> &LqrGame {
        &self.game
    }

    fn profile(&self, agent: usize, x: &DVector<f64>, others: &DVector<f64>) -> Result<GainProfile> {
        let layout = lqr_layout(&self.game.system);
        if x.len() != layout.dim(agent) || others.len() != layout.others_dim(agent) {
            return Err(Error::DimensionMismatch {
                context: "gain query",
                expected: layout.total(),
                actual: x.len() + others.len(),
            });
        }
        GainProfile::from_vector(&self.game.system, &layout.assemble(agent, x, others))
    }
}

impl PreferenceOracle for LqrPreferenceOracle {
    fn num_agents(&self) -> usize {
        self.game.num_agents()
    }

    fn query(&self, agent: usize, x1: &DVector<f64>, x2: &DVector<f64>, others: &DVector<f64>) -> Result<bool> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let p1 = self.profile(agent, x1, others)?;
        let k2 = self.profile(agent, x2, others)?.gains.swap_remove(agent);
        // both candidates face the same opponents, so one best response serves both
        let br = best_response_gain(&self.game, agent, &p1)?;
        let d1 = (&br - &p1.gains[agent]).norm_squared();
        let d2 = (&br - k2).norm_squared();
        Ok(d1 <= d2)
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn objective_value(&self, agent: usize, x: &DVector<f64>, others: &DVector<f64>) -> Option<Result<f64>> {
        Some(self.profile(agent, x, others).and_then(|p| br_deviation(&self.game, agent, &p)))
    }
}
