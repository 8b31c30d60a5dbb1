//! Problems the runner knows how to build.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use prefnash::gne::{self, AffineOperator, GneOptions, SolveStatus};
use prefnash::lqr::{self, GainProfile, LqrGame, LqrPreferenceOracle};
use prefnash::{
    make_preference_oracle, AffineConstraints, AgentLayout, BoxSet, ConstrainedGame, ObjectiveFn, PreferenceOracle,
    QuadraticAgentObjective,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::config::problem_params;
use crate::error::BenchError;

/// Game-theoretic LQR data needed for the family's metrics.
pub struct LqrSetup {
    pub game: LqrGame,
    pub nash: GainProfile,
    pub initial_states: Vec<DVector<f64>>,
    /// Systems drawn until one with reachable Nash gains turned up.
    pub system_draws: usize,
}

pub enum Family {
    /// Hidden objectives can be evaluated through the oracle.
    Objective,
    Lqr(Box<LqrSetup>),
}

pub struct Problem {
    pub id: String,
    pub game: ConstrainedGame,
    pub oracle: Box<dyn PreferenceOracle>,
    /// Known equilibrium, used for the distance metric.
    pub reference: Option<DVector<f64>>,
    pub family: Family,
    /// Surrogate coupling matrices are pinned to zero regardless of the config.
    pub no_coupling: bool,
}

impl Problem {
    pub fn lqr(&self) -> Option<&LqrSetup> {
        match &self.family {
            Family::Lqr(s) => Some(s),
            Family::Objective => None,
        }
    }
}

/// Builds a problem from its `[params]` table and the run seed.
pub type Builder = fn(&toml::Table, u64) -> Result<Problem, BenchError>;

struct Entry {
    summary: &'static str,
    builder: Builder,
}

pub struct Registry {
    entries: BTreeMap<String, Entry>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        let builtins: [(&str, &'static str, Builder); 6] = [
            (
                "synthetic-quadratic",
                "two-agent scalar quadratic game with known equilibrium, or a random quadratic game",
                build_synthetic,
            ),
            ("lqr-game", "game-theoretic LQR on a random unstable system", build_lqr),
            ("quadratic-file", "quadratic game read from a TOML description", build_quadratic_file),
            ("picheny-4.1", "two-player nonlinear game (stub)", stub_picheny),
            ("facchinei-A3", "three-player quadratic GNEP with shared constraints (stub)", stub_facchinei),
            ("pavel-ex1", "ten-player quadratic game (stub)", stub_pavel),
        ];
        for (id, summary, builder) in builtins {
            r.register(id, summary, builder).expect("builtin ids are distinct");
        }
        r
    }

    pub fn register(&mut self, id: &str, summary: &'static str, builder: Builder) -> Result<(), BenchError> {
        if self.entries.contains_key(id) {
            return Err(BenchError::Config(format!("problem id {id:?} is already registered")));
        }
        self.entries.insert(id.to_owned(), Entry { summary, builder });
        Ok(())
    }

    pub fn list(&self) -> Vec<(&str, &'static str)> {
        self.entries.iter().map(|(id, e)| (id.as_str(), e.summary)).collect()
    }

    pub fn build(&self, id: &str, params: &toml::Table, seed: u64) -> Result<Problem, BenchError> {
        let entry = self.entries.get(id).ok_or_else(|| {
            let ids: Vec<_> = self.entries.keys().map(String::as_str).collect();
            BenchError::Config(format!("unknown problem {id:?}; available: {}", ids.join(", ")))
        })?;
        (entry.builder)(params, seed)
    }
}

fn quadratic_oracle(objectives: &[QuadraticAgentObjective]) -> Box<dyn PreferenceOracle> {
    let fns: Vec<ObjectiveFn> = objectives
        .iter()
        .cloned()
        .map(|o| Box::new(move |x: &DVector<f64>, others: &DVector<f64>| Ok(o.value(x, others))) as ObjectiveFn)
        .collect();
    Box::new(make_preference_oracle(fns))
}

fn reference_equilibrium(game: &ConstrainedGame, objectives: &[QuadraticAgentObjective]) -> Result<DVector<f64>, BenchError> {
    let sol = gne::solve_gne(game, objectives, None, &GneOptions::default())?;
    if sol.status != SolveStatus::Converged {
        return Err(BenchError::Config(format!(
            "reference equilibrium not found ({}, residual {:e})",
            sol.status.as_str(),
            sol.residual
        )));
    }
    Ok(sol.x)
}

fn quadratic_problem(
    id: &str,
    game: ConstrainedGame,
    objectives: Vec<QuadraticAgentObjective>,
) -> Result<Problem, BenchError> {
    let reference = reference_equilibrium(&game, &objectives)?;
    Ok(Problem {
        id: id.to_owned(),
        oracle: quadratic_oracle(&objectives),
        game,
        reference: Some(reference),
        family: Family::Objective,
        no_coupling: false,
    })
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SyntheticParams {
    bound: f64,
    /// Draw a random monotone game instead of the fixed two-agent one.
    random: bool,
    agents: usize,
    dim: usize,
    /// Seed of the random game; the run seed when absent.
    game_seed: Option<u64>,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            bound: 2.0,
            random: false,
            agents: 2,
            dim: 1,
            game_seed: None,
        }
    }
}

fn build_synthetic(params: &toml::Table, seed: u64) -> Result<Problem, BenchError> {
    let p: SyntheticParams = problem_params("synthetic-quadratic", params)?;
    if !(p.bound > 0.0) {
        return Err(BenchError::Config("[params] bound must be positive".into()));
    }
    if !p.random {
        // J_1 = ½x₁² + x₁ + ½x₂x₁, J_2 = ½x₂² + ¼x₁x₂
        let scalar = |q: f64, a: f64| {
            QuadraticAgentObjective::from_hessian(
                &DMatrix::from_element(1, 1, 1.0),
                DVector::from_element(1, q),
                DMatrix::from_element(1, 1, a),
            )
        };
        let objectives = vec![scalar(1.0, 0.5)?, scalar(0.0, 0.25)?];
        let game = boxed_game(vec![1, 1], p.bound)?;
        return quadratic_problem("synthetic-quadratic", game, objectives);
    }
    if p.agents < 2 || p.dim == 0 {
        return Err(BenchError::Config("[params] random games need agents >= 2 and dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.game_seed.unwrap_or(seed));
    let dims = vec![p.dim; p.agents];
    let game = boxed_game(dims, p.bound)?;
    for _ in 0..100 {
        let objectives = random_quadratic_objectives(game.layout(), &mut rng)?;
        if AffineOperator::new(&game, &objectives, None)?.monotonicity() > 0.0 {
            return quadratic_problem("synthetic-quadratic", game, objectives);
        }
    }
    Err(BenchError::Config("could not draw a monotone random game".into()))
}

fn boxed_game(dims: Vec<usize>, bound: f64) -> Result<ConstrainedGame, BenchError> {
    let n: usize = dims.iter().sum();
    let local = dims
        .iter()
        .map(|&d| BoxSet::uniform(d, -bound, bound))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ConstrainedGame::new(AgentLayout::new(dims)?, local, AffineConstraints::none(n))?)
}

/// Hessians `BBᵀ/n + I`, linear terms in `[−1, 1]` and weak coupling.
fn random_quadratic_objectives<R: Rng>(layout: &AgentLayout, rng: &mut R) -> Result<Vec<QuadraticAgentObjective>, BenchError> {
    (0..layout.num_agents())
        .map(|i| {
            let (n, no) = (layout.dim(i), layout.others_dim(i));
            let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let p = &b * b.transpose() / n as f64 + DMatrix::identity(n, n);
            let q = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let scale = 0.5 / (no as f64).sqrt();
            let a = DMatrix::from_fn(no, n, |_, _| rng.random_range(-scale..scale));
            Ok(QuadraticAgentObjective::from_hessian(&p, q, a)?)
        })
        .collect()
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LqrParams {
    state_dim: usize,
    input_dim: usize,
    agents: usize,
    horizon: usize,
    spectral_radius: f64,
    /// Seed of the random system; the run seed when absent.
    system_seed: Option<u64>,
    /// Box on every gain entry.
    gain_bound: f64,
    eval_states: usize,
    max_system_draws: usize,
    nash_tol: f64,
}

impl Default for LqrParams {
    fn default() -> Self {
        Self {
            state_dim: 6,
            input_dim: 6,
            agents: 3,
            horizon: lqr::DEFAULT_HORIZON,
            spectral_radius: 1.1,
            system_seed: None,
            gain_bound: lqr::DEFAULT_GAIN_BOUND,
            eval_states: 100,
            max_system_draws: 50,
            nash_tol: 1e-10,
        }
    }
}

fn build_lqr(params: &toml::Table, seed: u64) -> Result<Problem, BenchError> {
    let p: LqrParams = problem_params("lqr-game", params)?;
    if p.agents == 0 || p.input_dim % p.agents != 0 {
        return Err(BenchError::Config(format!(
            "[params] input_dim {} must split evenly over {} agents",
            p.input_dim, p.agents
        )));
    }
    if p.state_dim == 0 || p.horizon == 0 || p.eval_states < 2 || p.max_system_draws == 0 {
        return Err(BenchError::Config(
            "[params] state_dim, horizon and max_system_draws must be positive and eval_states at least 2".into(),
        ));
    }
    if !(p.spectral_radius > 0.0 && p.gain_bound > 0.0 && p.nash_tol > 0.0) {
        return Err(BenchError::Config("[params] spectral_radius, gain_bound and nash_tol must be positive".into()));
    }
    let system_seed = p.system_seed.unwrap_or(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(system_seed);
    let (game, nash, system_draws) = lqr::random_game_with_nash(
        p.state_dim,
        p.input_dim,
        p.agents,
        p.spectral_radius,
        p.horizon,
        p.nash_tol,
        p.max_system_draws,
        &mut rng,
    )?;
    let mut state_rng = ChaCha8Rng::seed_from_u64(system_seed);
    state_rng.set_stream(1);
    let initial_states = lqr::random_initial_states(p.state_dim, p.eval_states, &mut state_rng);
    let constrained = game.constrained_game(p.gain_bound)?;
    let reference = nash.vectorize();
    let within = reference.iter().all(|v| v.abs() <= p.gain_bound);
    if !within {
        log::warn!("Nash gains leave the gain box of half-width {}", p.gain_bound);
    }
    Ok(Problem {
        id: "lqr-game".into(),
        oracle: Box::new(LqrPreferenceOracle::new(game.clone())),
        game: constrained,
        reference: Some(reference),
        family: Family::Lqr(Box::new(LqrSetup {
            game,
            nash,
            initial_states,
            system_draws,
        })),
        no_coupling: false,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileParams {
    path: PathBuf,
}

/// On-disk description of a quadratic game. Matrices are lists of rows.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadraticFile {
    agent: Vec<AgentSpec>,
    #[serde(default)]
    shared: Option<SharedSpec>,
    /// Learn surrogate coupling matrices (default true).
    #[serde(default)]
    coupling: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentSpec {
    hessian: Vec<Vec<f64>>,
    q: Vec<f64>,
    /// `(n − n_i) × n_i`, zero when absent.
    #[serde(default)]
    coupling: Option<Vec<Vec<f64>>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SharedSpec {
    g: Vec<Vec<f64>>,
    g0: Vec<f64>,
    h: Vec<Vec<f64>>,
    h0: Vec<f64>,
}

fn rows_to_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>, BenchError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(BenchError::Config(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

fn build_quadratic_file(params: &toml::Table, _seed: u64) -> Result<Problem, BenchError> {
    let p: FileParams = problem_params("quadratic-file", params)?;
    let text = std::fs::read_to_string(&p.path)
        .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", p.path.display())))?;
    let spec: QuadraticFile =
        toml::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", p.path.display())))?;
    if spec.agent.is_empty() {
        return Err(BenchError::Config("a game needs at least one [[agent]]".into()));
    }
    let dims: Vec<usize> = spec.agent.iter().map(|a| a.q.len()).collect();
    let n: usize = dims.iter().sum();
    let mut objectives = Vec::with_capacity(dims.len());
    let mut local = Vec::with_capacity(dims.len());
    for (i, a) in spec.agent.iter().enumerate() {
        let ni = dims[i];
        let hessian = rows_to_matrix(&a.hessian, ni, ni, &format!("agent {i} hessian"))?;
        let coupling = match &a.coupling {
            Some(rows) => rows_to_matrix(rows, n - ni, ni, &format!("agent {i} coupling"))?,
            None => DMatrix::zeros(n - ni, ni),
        };
        objectives.push(QuadraticAgentObjective::from_hessian(&hessian, DVector::from_vec(a.q.clone()), coupling)?);
        local.push(BoxSet::new(a.lower.clone(), a.upper.clone())?);
    }
    let shared = match spec.shared {
        None => AffineConstraints::none(n),
        Some(s) => AffineConstraints::new(
            rows_to_matrix(&s.g, s.g0.len(), n, "shared g")?,
            DVector::from_vec(s.g0),
            rows_to_matrix(&s.h, s.h0.len(), n, "shared h")?,
            DVector::from_vec(s.h0),
        )?,
    };
    let game = ConstrainedGame::new(AgentLayout::new(dims)?, local, shared)?;
    let mut problem = quadratic_problem("quadratic-file", game, objectives)?;
    problem.no_coupling = spec.coupling == Some(false);
    Ok(problem)
}

fn stub(id: &str, source: &str, settings: &str) -> BenchError {
    BenchError::Config(format!(
        "{id}: objective functions are not bundled; transcribe them from {source} into a \
         quadratic-file description or register a builder ({settings})"
    ))
}

fn stub_picheny(_: &toml::Table, _: u64) -> Result<Problem, BenchError> {
    Err(stub(
        "picheny-4.1",
        "Picheny, Binois and Habbal, J. Global Optim. 2019, section 4.1",
        "n = 2, N = 2, no shared constraints, delta = 0.5, k_max = 80, surrogate coupling disabled",
    ))
}

fn stub_facchinei(_: &toml::Table, _: u64) -> Result<Problem, BenchError> {
    Err(stub(
        "facchinei-A3",
        "Facchinei and Kanzow, GNEP test problems report 2009, example A.3",
        "n = 7, N = 3, shared inequality constraints, delta = 0.2, k_max = 150",
    ))
}

fn stub_pavel(_: &toml::Table, _: u64) -> Result<Problem, BenchError> {
    Err(stub(
        "pavel-ex1",
        "Salehisadaghiani, Shi and Pavel, example 1, in the ten-agent configuration of Fabiani et al., IEEE TAC 2024, section VI.B",
        "n = 10, N = 10, no shared constraints, delta = 0.3, k_max = 150",
    ))
}
