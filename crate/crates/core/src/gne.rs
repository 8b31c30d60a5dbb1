//! Equilibria of quadratic games.
//!
//! A quadratic game has an affine pseudo-gradient `F(x) = M x + c`. Its
//! variational GNE is the solution of the VI `⟨F(x*), x − x*⟩ >= 0` over the
//! joint feasible set, found here by projected extragradient. When the
//! iteration stalls on a non-monotone operator a damped Gauss–Seidel
//! best-response sweep is tried from the best iterate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{AffineConstraints, BoxSet, ConstrainedGame};
use crate::qp;
use crate::quadratic::QuadraticAgentObjective;

/// Proximal exploration term `(δ/2)‖x_i − x̄_i‖²` added to every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Exploration {
    pub weight: f64,
    pub centers: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    NonMonotoneWarning,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max-iterations",
            SolveStatus::NonMonotoneWarning => "non-monotone-warning",
        }
    }
}

impl std::str::FromStr for SolveStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "converged" => Ok(SolveStatus::Converged),
            "max-iterations" => Ok(SolveStatus::MaxIterations),
            "non-monotone-warning" => Ok(SolveStatus::NonMonotoneWarning),
            other => Err(Error::InvalidArgument(format!("unknown solver status {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GneSolution {
    pub x: DVector<f64>,
    /// `‖x − Π(x − γ F(x))‖₂` at the returned point.
    pub residual: f64,
    /// Step `γ` used in the residual.
    pub step: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

#[derive(Debug, Clone)]
pub struct GneOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub warm_start: Option<DVector<f64>>,
    /// Also consider the projected unconstrained stationary point as a start.
    pub linear_initialization: bool,
    pub fallback_sweeps: usize,
    pub fallback_damping: f64,
}

impl Default for GneOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
            warm_start: None,
            linear_initialization: true,
            fallback_sweeps: 500,
            fallback_damping: 0.5,
        }
    }
}

const DIVERGENCE_FACTOR: f64 = 1e8;
const STALL_WINDOW: usize = 2_000;

/// Affine pseudo-gradient `F(x) = M x + c` of a quadratic game.
#[derive(Debug, Clone)]
pub struct AffineOperator {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineOperator {
    pub fn new(game: &ConstrainedGame, objectives: &[QuadraticAgentObjective], exploration: Option<&Exploration>) -> Result<Self> {
        let layout = game.layout();
        let n = layout.total();
        if objectives.len() != layout.num_agents() {
            return Err(Error::DimensionMismatch {
                context: "objectives per agent",
                expected: layout.num_agents(),
                actual: objectives.len(),
            });
        }
        if let Some(e) = exploration {
            if e.centers.len() != layout.num_agents() {
                return Err(Error::DimensionMismatch {
                    context: "exploration centers",
                    expected: layout.num_agents(),
                    actual: e.centers.len(),
                });
            }
        }
        let mut matrix = DMatrix::zeros(n, n);
        let mut offset = DVector::zeros(n);
        for (i, obj) in objectives.iter().enumerate() {
            let r = layout.range(i);
            if obj.own_dim() != r.len() || obj.others_dim() != n - r.len() {
                return Err(Error::DimensionMismatch {
                    context: "objective dimensions",
                    expected: r.len(),
                    actual: obj.own_dim(),
                });
            }
            let mut own = obj.hessian();
            let mut lin = obj.q.clone();
            if let Some(e) = exploration {
                if e.centers[i].len() != r.len() {
                    return Err(Error::DimensionMismatch {
                        context: "exploration center",
                        expected: r.len(),
                        actual: e.centers[i].len(),
                    });
                }
                for d in 0..r.len() {
                    own[(d, d)] += e.weight;
                }
                lin -= &e.centers[i] * e.weight;
            }
            matrix.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&own);
            offset.rows_mut(r.start, r.len()).copy_from(&lin);
            // Aᵀ x_{-i}: column k of Aᵀ multiplies the k-th opponent variable
            let at = obj.a.transpose();
            for (k, j) in (0..n).filter(|j| !r.contains(j)).enumerate() {
                matrix.view_mut((r.start, j), (r.len(), 1)).copy_from(&at.column(k));
            }
        }
        Ok(Self { matrix, offset })
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.offset
    }

    /// Spectral norm of `M` by power iteration on `MᵀM`.
    pub fn lipschitz(&self) -> f64 {
        let n = self.matrix.ncols();
        let mtm = self.matrix.tr_mul(&self.matrix);
        let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * i as f64);
        v /= v.norm();
        let mut est = 0.0;
        for _ in 0..1000 {
            let w = &mtm * &v;
            let norm = w.norm();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm.sqrt();
            v = w / norm;
            if (next - est).abs() <= 1e-12 * next {
                est = next;
                break;
            }
            est = next;
        }
        est
    }

    /// Smallest eigenvalue of the symmetric part of `M`.
    pub fn monotonicity(&self) -> f64 {
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }
}

/// Stacked per-agent gradients `P_i x_i + q_i + A_iᵀ x_{-i} + δ (x_i − x̄_i)`.
pub fn pseudo_gradient(
    game: &ConstrainedGame,
    objectives: &[QuadraticAgentObjective],
    x: &DVector<f64>,
    exploration: Option<&Exploration>,
) -> Result<DVector<f64>> {
    let layout = game.layout();
    if x.len() != layout.total() {
        return Err(Error::DimensionMismatch {
            context: "pseudo-gradient point",
            expected: layout.total(),
            actual: x.len(),
        });
    }
    let mut out = DVector::zeros(layout.total());
    for (i, obj) in objectives.iter().enumerate() {
        let xi = layout.extract(i, x);
        let mut g = obj.gradient(&xi, &layout.others(i, x));
        if let Some(e) = exploration {
            g += (&xi - &e.centers[i]) * e.weight;
        }
        out.rows_mut(layout.range(i).start, g.len()).copy_from(&g);
    }
    Ok(out)
}

struct JointProjector<'a> {
    bounds: BoxSet,
    shared: &'a AffineConstraints,
}

impl JointProjector<'_> {
    fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        qp::project(x, &self.bounds, self.shared)
    }
}

/// VI natural residual `‖x − Π(x − γ F(x))‖₂`.
pub fn vi_residual(game: &ConstrainedGame, op: &AffineOperator, x: &DVector<f64>, step: f64) -> Result<f64> {
    let proj = JointProjector {
        bounds: game.joint_box(),
        shared: game.shared(),
    };
    residual_at(&proj, op, x, step)
}

fn residual_at(proj: &JointProjector, op: &AffineOperator, x: &DVector<f64>, step: f64) -> Result<f64> {
    let y = proj.project(&(x - op.eval(x) * step))?;
    Ok((x - y).norm())
}

/// Variational GNE of the quadratic game, optionally with exploration terms.
pub fn solve_gne(
    game: &ConstrainedGame,
    objectives: &[QuadraticAgentObjective],
    exploration: Option<&Exploration>,
    opts: &GneOptions,
) -> Result<GneSolution> {
    let op = AffineOperator::new(game, objectives, exploration)?;
    let proj = JointProjector {
        bounds: game.joint_box(),
        shared: game.shared(),
    };
    let lip = op.lipschitz();
    let step = if lip > 0.0 { 0.9 / (lip * 1.01) } else { 1.0 };

    let mut starts = Vec::new();
    if let Some(w) = &opts.warm_start {
        if w.len() != game.layout().total() {
            return Err(Error::DimensionMismatch {
                context: "warm start",
                expected: game.layout().total(),
                actual: w.len(),
            });
        }
        starts.push(proj.project(w)?);
    }
    if opts.linear_initialization || starts.is_empty() {
        if let Some(sol) = op.matrix.clone().lu().solve(&(-&op.offset)) {
            if sol.iter().all(|v| v.is_finite()) {
                starts.push(proj.project(&sol)?);
            }
        }
    }
    if starts.is_empty() {
        starts.push(proj.project(&DVector::zeros(game.layout().total()))?);
    }
    let mut x = starts[0].clone();
    let mut best_r = residual_at(&proj, &op, &x, step)?;
    for s in &starts[1..] {
        let r = residual_at(&proj, &op, s, step)?;
        if r < best_r {
            best_r = r;
            x = s.clone();
        }
    }

    let sol = extragradient(&proj, &op, x, step, opts)?;
    if sol.status != SolveStatus::NonMonotoneWarning || opts.fallback_sweeps == 0 {
        return Ok(sol);
    }
    log::debug!("extragradient stalled (residual {:e}); trying best-response sweeps", sol.residual);
    match gauss_seidel(game, &proj, &op, &sol.x, step, opts) {
        Ok(gs) if gs.residual < sol.residual => Ok(gs),
        _ => Ok(sol),
    }
}

fn extragradient(proj: &JointProjector, op: &AffineOperator, mut x: DVector<f64>, step: f64, opts: &GneOptions) -> Result<GneSolution> {
    let mut best_x = x.clone();
    let mut best_r = f64::INFINITY;
    let mut window_start_best = f64::INFINITY;
    let mut monotone: Option<bool> = None;
    let mut is_monotone = |op: &AffineOperator| *monotone.get_or_insert_with(|| op.monotonicity() >= -1e-12);

    for it in 0..opts.max_iter {
        let fx = op.eval(&x);
        let y = proj.project(&(&x - &fx * step))?;
        let r = (&x - &y).norm();
        if r < best_r {
            best_r = r;
            best_x = x.clone();
        }
        if r <= opts.tol {
            return Ok(GneSolution {
                x,
                residual: r,
                step,
                iterations: it,
                status: SolveStatus::Converged,
            });
        }
        if !r.is_finite() || r > DIVERGENCE_FACTOR * best_r.max(1e-300) {
            return Ok(GneSolution {
                x: best_x,
                residual: best_r,
                step,
                iterations: it,
                status: SolveStatus::NonMonotoneWarning,
            });
        }
        if it > 0 && it % STALL_WINDOW == 0 {
            if best_r >= 0.999 * window_start_best && !is_monotone(op) {
                return Ok(GneSolution {
                    x: best_x,
                    residual: best_r,
                    step,
                    iterations: it,
                    status: SolveStatus::NonMonotoneWarning,
                });
            }
            window_start_best = best_r;
        }
        let fy = op.eval(&y);
        x = proj.project(&(&x - fy * step))?;
    }
    // the final iterate has not been measured yet
    let r = residual_at(proj, op, &x, step)?;
    if r < best_r {
        best_r = r;
        best_x = x;
    }
    let status = if best_r <= opts.tol {
        SolveStatus::Converged
    } else if is_monotone(op) {
        SolveStatus::MaxIterations
    } else {
        SolveStatus::NonMonotoneWarning
    };
    Ok(GneSolution {
        x: best_x,
        residual: best_r,
        step,
        iterations: opts.max_iter,
        status,
    })
}

fn gauss_seidel(
    game: &ConstrainedGame,
    proj: &JointProjector,
    op: &AffineOperator,
    start: &DVector<f64>,
    step: f64,
    opts: &GneOptions,
) -> Result<GneSolution> {
    let layout = game.layout();
    let mut x = start.clone();
    let mut best_x = x.clone();
    let mut best_r = residual_at(proj, op, &x, step)?;
    for sweep in 1..=opts.fallback_sweeps {
        for i in 0..layout.num_agents() {
            let br = operator_best_response(game, op, i, &x)?;
            let r = layout.range(i);
            let xi = layout.extract(i, &x);
            let next = &xi * (1.0 - opts.fallback_damping) + br * opts.fallback_damping;
            x.rows_mut(r.start, r.len()).copy_from(&next);
        }
        let r = residual_at(proj, op, &x, step)?;
        if r < best_r {
            best_r = r;
            best_x = x.clone();
        }
        if r <= opts.tol {
            return Ok(GneSolution {
                x,
                residual: r,
                step,
                iterations: sweep,
                status: SolveStatus::Converged,
            });
        }
        if !r.is_finite() {
            break;
        }
    }
    Ok(GneSolution {
        x: best_x,
        residual: best_r,
        step,
        iterations: opts.fallback_sweeps,
        status: SolveStatus::NonMonotoneWarning,
    })
}

/// Agent `i`'s best response in the game defined by `op`, opponents taken from `x`.
fn operator_best_response(game: &ConstrainedGame, op: &AffineOperator, agent: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
    let layout = game.layout();
    let r = layout.range(agent);
    let own = op.matrix.view((r.start, r.start), (r.len(), r.len())).into_owned();
    let own = (&own + own.transpose()) * 0.5;
    // linear term: c_i + M_{i,-i} x_{-i} = F_i(x) − M_ii x_i
    let xi = layout.extract(agent, x);
    let full = op.eval(x).rows(r.start, r.len()).into_owned();
    let lin = full - &own * &xi;
    let slice = game.shared().slice_for_agent(layout, agent, &layout.others(agent, x));
    qp::solve_qp(&own, &lin, game.local(agent), &slice).map_err(|e| match e {
        Error::QpInfeasible => Error::BestResponseInfeasible { agent },
        e => e,
    })
}

/// `argmin_{x_i ∈ F_i(x_{-i})} J_i(x_i, x_{-i})` for a quadratic objective.
pub fn best_response(
    game: &ConstrainedGame,
    agent: usize,
    objective: &QuadraticAgentObjective,
    others: &DVector<f64>,
) -> Result<DVector<f64>> {
    let layout = game.layout();
    if others.len() != layout.others_dim(agent) {
        return Err(Error::DimensionMismatch {
            context: "opponent vector",
            expected: layout.others_dim(agent),
            actual: others.len(),
        });
    }
    let q = &objective.q + objective.a.tr_mul(others);
    let slice = game.shared().slice_for_agent(layout, agent, others);
    qp::solve_qp(&objective.hessian(), &q, game.local(agent), &slice).map_err(|e| match e {
        Error::QpInfeasible => Error::BestResponseInfeasible { agent },
        e => e,
    })
}
