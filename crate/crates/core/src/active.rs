//! Active preference learning of a GNE.
//!
//! Each iteration solves the surrogate game augmented with a proximal
//! exploration term, perturbs every agent's surrogate best response, asks the
//! agents which of the two decisions they prefer, and retrains the surrogates
//! on the grown datasets.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{ConstrainedGame, PreferenceDataset, PreferenceOracle, PreferenceSample};
use crate::gne::{self, Exploration, GneOptions, GneSolution, SolveStatus};
use crate::preference::{self, ThetaVector, TrainConfig};
use crate::quadratic::QuadraticAgentObjective;
use crate::serde_util;

/// Retries with fresh exploration centers when a surrogate best response is infeasible.
pub const MAX_RETRIES: usize = 5;
pub const SPACE_FILLING_CANDIDATES: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub delta: f64,
    pub sigma: f64,
    pub delta_floor: f64,
    pub sigma_floor: f64,
    pub p_delta: f64,
    pub p_sigma: f64,
    pub k_max: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            sigma: 0.3,
            delta_floor: 0.001,
            sigma_floor: 0.001,
            p_delta: 5.0,
            p_sigma: 4.0,
            k_max: 100,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return fail(format!("delta must be positive, got {}", self.delta));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("delta_floor", self.delta_floor),
            ("sigma_floor", self.sigma_floor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if self.delta_floor > self.delta {
            return fail(format!("delta_floor {} exceeds delta {}", self.delta_floor, self.delta));
        }
        if self.sigma_floor > self.sigma {
            return fail(format!("sigma_floor {} exceeds sigma {}", self.sigma_floor, self.sigma));
        }
        for (name, p) in [("p_delta", self.p_delta), ("p_sigma", self.p_sigma)] {
            if !(p >= 1.0 && p.is_finite()) {
                return fail(format!("{name} must be at least 1, got {p}"));
            }
        }
        if self.k_max == 0 {
            return fail("k_max must be at least 1".into());
        }
        Ok(())
    }
}

fn decay(base: f64, k: usize, k_max: usize, power: f64, floor: f64) -> f64 {
    let r = 1.0 - k as f64 / k_max as f64;
    let r = r.max(0.0);
    let v = if power.fract() == 0.0 && power.abs() < i32::MAX as f64 {
        r.powi(power as i32)
    } else {
        r.powf(power)
    };
    (base * v).max(floor)
}

/// `max(δ (1 − k/k_max)^{p_δ}, δ_floor)`.
pub fn delta_schedule(k: usize, cfg: &ScheduleConfig) -> f64 {
    decay(cfg.delta, k, cfg.k_max, cfg.p_delta, cfg.delta_floor)
}

/// `max(σ (1 − k/k_max)^{p_σ}, σ_floor)`.
pub fn sigma_schedule(k: usize, cfg: &ScheduleConfig) -> f64 {
    decay(cfg.sigma, k, cfg.k_max, cfg.p_sigma, cfg.sigma_floor)
}

/// How the exploration centers `x̄_i` are chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplorationMode {
    /// Uniform sample from the agent's local set.
    #[default]
    Uniform,
    /// Sampled candidate farthest from all points queried so far.
    SpaceFilling,
}

/// Candidate maximizing the distance to its nearest data point. Ties keep the
/// first candidate; with no data the first candidate is returned.
pub fn space_filling_argmax<'a>(
    candidates: &'a [DVector<f64>],
    data: &[&DVector<f64>],
) -> Option<&'a DVector<f64>> {
    let mut best: Option<(&DVector<f64>, f64)> = None;
    for c in candidates {
        let score = data.iter().map(|d| (c - *d).norm()).fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((c, score));
        }
    }
    best.map(|(c, _)| c)
}

pub fn exploration_center<R: Rng + ?Sized>(
    game: &ConstrainedGame,
    agent: usize,
    mode: ExplorationMode,
    dataset: &PreferenceDataset,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let sbox = game.sampling_box(agent)?;
    match mode {
        ExplorationMode::Uniform => Ok(sbox.sample(rng)),
        ExplorationMode::SpaceFilling if dataset.is_empty() => Ok(sbox.sample(rng)),
        ExplorationMode::SpaceFilling => {
            let candidates: Vec<_> = (0..SPACE_FILLING_CANDIDATES).map(|_| sbox.sample(rng)).collect();
            let data: Vec<&DVector<f64>> = dataset.iter().flat_map(|s| [&s.x1, &s.x2]).collect();
            Ok(space_filling_argmax(&candidates, &data).expect("nonempty candidate pool").clone())
        }
    }
}

/// Equilibrium of the surrogate game with exploration weight `delta` pulling
/// each agent toward its center.
pub fn query_gnep(
    game: &ConstrainedGame,
    objectives: &[QuadraticAgentObjective],
    centers: &[DVector<f64>],
    delta: f64,
    opts: &GneOptions,
) -> Result<GneSolution> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("exploration weight must be nonnegative, got {delta}")));
    }
    let exploration = Exploration {
        weight: delta,
        centers: centers.to_vec(),
    };
    gne::solve_gne(game, objectives, Some(&exploration), opts)
}

/// `x̂ + σ w ‖x̂‖_∞` with each `w_j` uniform on `[−0.5, 0.5]`.
pub fn perturb<R: Rng + ?Sized>(x_hat: &DVector<f64>, sigma: f64, rng: &mut R) -> DVector<f64> {
    let w = DVector::from_fn(x_hat.len(), |_, _| rng.random_range(-0.5..=0.5));
    perturb_with(x_hat, sigma, &w)
}

pub fn perturb_with(x_hat: &DVector<f64>, sigma: f64, w: &DVector<f64>) -> DVector<f64> {
    x_hat + w * (sigma * x_hat.amax())
}

/// Surrogate best response against `others` and its noisy copy.
pub fn perturbed_best_response<R: Rng + ?Sized>(
    game: &ConstrainedGame,
    agent: usize,
    objective: &QuadraticAgentObjective,
    others: &DVector<f64>,
    sigma: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let x_hat = gne::best_response(game, agent, objective, others)?;
    let x2 = perturb(&x_hat, sigma, rng);
    Ok((x_hat, x2))
}

/// Replaces a best response that agrees with the query to solver precision by
/// the query itself, so that vanishing exploration and noise give exact ties.
fn snap(x_hat: DVector<f64>, x1: &DVector<f64>) -> DVector<f64> {
    if (&x_hat - x1).amax() <= SNAP_TOL * (1.0 + x1.amax()) {
        x1.clone()
    } else {
        x_hat
    }
}

const SNAP_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ActiveLearningConfig {
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Initial dataset size per agent.
    pub m0: usize,
    pub exploration: ExplorationMode,
    /// Learn the coupling matrices `A_i`; when false they are pinned to zero.
    pub coupling: bool,
    pub gne_tol: f64,
    pub gne_max_iter: usize,
    /// Train the agents' surrogates on separate threads.
    pub parallel: bool,
    /// Start each retraining from the previous parameters instead of the initial ones.
    pub warm_start: bool,
}

impl Default for ActiveLearningConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            m0: 50,
            exploration: ExplorationMode::Uniform,
            coupling: true,
            gne_tol: 1e-10,
            gne_max_iter: 100_000,
            parallel: true,
            warm_start: true,
        }
    }
}

impl ActiveLearningConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.train.validate()?;
        if self.m0 == 0 {
            return Err(Error::InvalidArgument("m0 must be at least 1".into()));
        }
        if !(self.gne_tol > 0.0) || self.gne_max_iter == 0 {
            return Err(Error::InvalidArgument("equilibrium solver tolerance and budget must be positive".into()));
        }
        Ok(())
    }

    fn gne_options(&self, warm_start: Option<DVector<f64>>) -> GneOptions {
        GneOptions {
            tol: self.gne_tol,
            max_iter: self.gne_max_iter,
            warm_start,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub delta: f64,
    pub sigma: f64,
    /// Query point `x^k` of the exploration game.
    #[serde(with = "serde_util::vector")]
    pub query: DVector<f64>,
    pub query_status: SolveStatus,
    pub query_residual: f64,
    /// Equilibrium of the surrogate game after retraining.
    #[serde(with = "serde_util::vector")]
    pub learned: DVector<f64>,
    pub learned_status: SolveStatus,
    pub learned_residual: f64,
    pub labels: Vec<bool>,
    pub train_loss: Vec<f64>,
    pub train_warnings: usize,
    pub retries: usize,
    /// Oracle queries answered so far, including initialization.
    pub oracle_queries: u64,
}

/// Everything the loop carries between iterations. Randomness is derived from
/// `seed` and the iteration index, so the state needs no generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ALState {
    pub k: usize,
    pub seed: u64,
    pub thetas: Vec<ThetaVector>,
    pub datasets: Vec<PreferenceDataset>,
    pub history: Vec<IterationRecord>,
}

impl ALState {
    pub fn objectives(&self) -> Vec<QuadraticAgentObjective> {
        self.thetas.iter().map(ThetaVector::unpack).collect()
    }

    pub fn last_query(&self) -> Option<&DVector<f64>> {
        self.history.last().map(|r| &r.query)
    }
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Initial = 0,
    Center = 1,
    Noise = 2,
}

/// Generator for one `(iteration, agent, purpose, attempt)` stream.
fn stream_rng(seed: u64, k: usize, agent: usize, purpose: Purpose, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 24) | ((agent as u64) << 8) | ((attempt as u64) << 4) | purpose as u64);
    rng
}

/// `M₀` random pairs per agent, each feasible jointly with a sampled opponent profile, labelled by the oracle.
pub fn initial_datasets(
    game: &ConstrainedGame,
    oracle: &dyn PreferenceOracle,
    m0: usize,
    seed: u64,
) -> Result<Vec<PreferenceDataset>> {
    let layout = game.layout();
    let mut out = Vec::with_capacity(layout.num_agents());
    for i in 0..layout.num_agents() {
        let mut rng = stream_rng(seed, 0, i, Purpose::Initial, 0);
        let mut data = PreferenceDataset::new();
        for _ in 0..m0 {
            let joint = game.sample_feasible(1, &mut rng)?.remove(0);
            let others = layout.others(i, &joint);
            let x1 = game.sample_agent_feasible(i, &others, &mut rng)?;
            let x2 = game.sample_agent_feasible(i, &others, &mut rng)?;
            let label = oracle.query(i, &x1, &x2, &others)?;
            data.push(PreferenceSample {
                x1,
                x2,
                x_others: others,
                label,
            });
        }
        out.push(data);
    }
    Ok(out)
}

fn train_all(
    thetas: &[ThetaVector],
    datasets: &[PreferenceDataset],
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<Vec<preference::TrainReport>> {
    if !parallel || thetas.len() < 2 {
        return thetas.iter().zip(datasets).map(|(t, d)| preference::train(t, d, cfg)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = thetas
            .iter()
            .zip(datasets)
            .map(|(t, d)| s.spawn(move || preference::train(t, d, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

fn initial_thetas(game: &ConstrainedGame, cfg: &ActiveLearningConfig) -> Vec<ThetaVector> {
    let layout = game.layout();
    (0..layout.num_agents())
        .map(|i| {
            let t = ThetaVector::initial(layout.dim(i), layout.others_dim(i));
            if cfg.coupling {
                t
            } else {
                t.without_coupling()
            }
        })
        .collect()
}

/// Samples the initial datasets and fits the initial surrogates.
pub fn initialize(
    game: &ConstrainedGame,
    oracle: &dyn PreferenceOracle,
    cfg: &ActiveLearningConfig,
    seed: u64,
) -> Result<ALState> {
    cfg.validate()?;
    if oracle.num_agents() != game.num_agents() {
        return Err(Error::DimensionMismatch {
            context: "oracle agents",
            expected: game.num_agents(),
            actual: oracle.num_agents(),
        });
    }
    let datasets = initial_datasets(game, oracle, cfg.m0, seed)?;
    let init = initial_thetas(game, cfg);
    let thetas = train_all(&init, &datasets, &cfg.train, cfg.parallel)?
        .into_iter()
        .map(|r| r.theta)
        .collect();
    Ok(ALState {
        k: 0,
        seed,
        thetas,
        datasets,
        history: Vec::new(),
    })
}

/// One pass of the loop. On error the state is left untouched.
pub fn al_iteration(
    state: &mut ALState,
    oracle: &dyn PreferenceOracle,
    game: &ConstrainedGame,
    cfg: &ActiveLearningConfig,
) -> Result<()> {
    let k = state.k + 1;
    iterate(state, oracle, game, cfg, k).map_err(|e| e.at_iteration(k))
}

fn iterate(
    state: &mut ALState,
    oracle: &dyn PreferenceOracle,
    game: &ConstrainedGame,
    cfg: &ActiveLearningConfig,
    k: usize,
) -> Result<()> {
    if state.k >= cfg.schedule.k_max {
        return Err(Error::InvalidArgument(format!("iteration budget {} exhausted", cfg.schedule.k_max)));
    }
    let layout = game.layout();
    let n_agents = layout.num_agents();
    let delta = delta_schedule(k, &cfg.schedule);
    let sigma = sigma_schedule(k, &cfg.schedule);
    let objectives = state.objectives();

    let mut attempt = 0;
    let (query, pairs) = loop {
        let centers = (0..n_agents)
            .map(|i| {
                let mut rng = stream_rng(state.seed, k, i, Purpose::Center, attempt);
                exploration_center(game, i, cfg.exploration, &state.datasets[i], &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let query = query_gnep(game, &objectives, &centers, delta, &cfg.gne_options(state.last_query().cloned()))?;
        if query.status != SolveStatus::Converged {
            log::warn!("iteration {k}: query equilibrium {} (residual {:e})", query.status.as_str(), query.residual);
        }
        let pairs = (0..n_agents)
            .map(|i| {
                let others = layout.others(i, &query.x);
                let mut rng = stream_rng(state.seed, k, i, Purpose::Noise, attempt);
                let x1 = layout.extract(i, &query.x);
                let x_hat = snap(gne::best_response(game, i, &objectives[i], &others)?, &x1);
                Ok((x1, perturb(&x_hat, sigma, &mut rng), others))
            })
            .collect::<Result<Vec<_>>>();
        match pairs {
            Ok(p) => break (query, p),
            Err(Error::BestResponseInfeasible { agent }) if attempt < MAX_RETRIES => {
                log::warn!("iteration {k}: best response of agent {agent} infeasible, redrawing centers");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };

    let mut labels = Vec::with_capacity(n_agents);
    for (i, (x1, x2, others)) in pairs.iter().enumerate() {
        labels.push(oracle.query(i, x1, x2, others)?);
    }
    let mut datasets = state.datasets.clone();
    for (i, (x1, x2, others)) in pairs.into_iter().enumerate() {
        datasets[i].push(PreferenceSample {
            x1,
            x2,
            x_others: others,
            label: labels[i],
        });
    }
    let reports = if cfg.warm_start {
        train_all(&state.thetas, &datasets, &cfg.train, cfg.parallel)?
    } else {
        train_all(&initial_thetas(game, cfg), &datasets, &cfg.train, cfg.parallel)?
    };
    let thetas: Vec<ThetaVector> = reports.iter().map(|r| r.theta.clone()).collect();
    let learned_objectives: Vec<_> = thetas.iter().map(ThetaVector::unpack).collect();
    let learned = gne::solve_gne(game, &learned_objectives, None, &cfg.gne_options(Some(query.x.clone())))?;

    state.history.push(IterationRecord {
        k,
        delta,
        sigma,
        query: query.x,
        query_status: query.status,
        query_residual: query.residual,
        learned: learned.x,
        learned_status: learned.status,
        learned_residual: learned.residual,
        labels,
        train_loss: reports.iter().map(|r| r.loss).collect(),
        train_warnings: reports.iter().filter(|r| r.warning).count(),
        retries: attempt,
        oracle_queries: oracle.query_count(),
    });
    state.thetas = thetas;
    state.datasets = datasets;
    state.k = k;
    Ok(())
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Equilibrium of the final surrogate game.
    pub x_final: DVector<f64>,
    pub final_status: SolveStatus,
    pub state: ALState,
}

/// Runs the loop to `k_max`, calling `observer` after every iteration.
pub fn run_with_observer(
    oracle: &dyn PreferenceOracle,
    game: &ConstrainedGame,
    cfg: &ActiveLearningConfig,
    seed: u64,
    mut observer: impl FnMut(&ALState),
) -> Result<RunOutput> {
    let mut state = initialize(game, oracle, cfg, seed).map_err(|e| e.at_iteration(0))?;
    observer(&state);
    while state.k < cfg.schedule.k_max {
        al_iteration(&mut state, oracle, game, cfg)?;
        observer(&state);
    }
    // The last record already holds the δ = 0 equilibrium at θ^{k_max},
    // warm-started from the last query.
    let last = state.history.last().expect("k_max >= 1");
    Ok(RunOutput {
        x_final: last.learned.clone(),
        final_status: last.learned_status,
        state,
    })
}

pub fn run(
    oracle: &dyn PreferenceOracle,
    game: &ConstrainedGame,
    cfg: &ActiveLearningConfig,
    seed: u64,
) -> Result<RunOutput> {
    run_with_observer(oracle, game, cfg, seed, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{make_preference_oracle, AgentLayout, BoxSet, ObjectiveFn};
    use crate::AffineConstraints;
    use nalgebra::DMatrix;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn scalar(p: f64, q: f64, a: f64) -> QuadraticAgentObjective {
        QuadraticAgentObjective::from_hessian(&DMatrix::from_element(1, 1, p), v(&[q]), DMatrix::from_element(1, 1, a)).unwrap()
    }

    /// J_1 = ½x₁² + x₁ + ½x₂x₁, J_2 = ½x₂² + ¼x₁x₂ on [−2, 2]²; NE (−8/7, 2/7).
    fn reference_game() -> (ConstrainedGame, Vec<QuadraticAgentObjective>) {
        let game = ConstrainedGame::new(
            AgentLayout::new(vec![1, 1]).unwrap(),
            vec![BoxSet::uniform(1, -2.0, 2.0).unwrap(); 2],
            AffineConstraints::none(2),
        )
        .unwrap();
        (game, vec![scalar(1.0, 1.0, 0.5), scalar(1.0, 0.0, 0.25)])
    }

    fn oracle_for(objs: &[QuadraticAgentObjective]) -> crate::FnOracle {
        let fs: Vec<ObjectiveFn> = objs
            .iter()
            .cloned()
            .map(|o| Box::new(move |x: &DVector<f64>, others: &DVector<f64>| Ok(o.value(x, others))) as ObjectiveFn)
            .collect();
        make_preference_oracle(fs)
    }

    #[test]
    fn schedule_arithmetic() {
        let cfg = ScheduleConfig {
            delta: 5.0,
            k_max: 100,
            ..Default::default()
        };
        assert_eq!(delta_schedule(50, &cfg), 0.15625);
        assert_eq!(delta_schedule(100, &cfg), 0.001);
        let linear = ScheduleConfig {
            p_delta: 1.0,
            delta_floor: 0.0,
            ..cfg.clone()
        };
        assert_eq!(delta_schedule(25, &linear), 5.0 * 0.75);
        let s = ScheduleConfig {
            k_max: 200,
            ..Default::default()
        };
        assert_eq!(sigma_schedule(100, &s), 0.01875);
        assert_eq!(sigma_schedule(200, &s), 0.001);
        let off = ScheduleConfig {
            sigma: 0.0,
            sigma_floor: 0.0,
            ..Default::default()
        };
        assert!((1..=100).all(|k| sigma_schedule(k, &off) == 0.0));
    }

    #[test]
    fn schedules_are_monotone_and_floored() {
        let cfg = ScheduleConfig {
            delta: 3.0,
            p_delta: 2.5,
            k_max: 37,
            ..Default::default()
        };
        let mut prev = f64::INFINITY;
        for k in 1..=cfg.k_max {
            let d = delta_schedule(k, &cfg);
            assert!(d <= prev && d >= cfg.delta_floor);
            prev = d;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(ScheduleConfig::default().validate().is_ok());
        for bad in [
            ScheduleConfig {
                delta: 0.0,
                ..Default::default()
            },
            ScheduleConfig {
                p_sigma: 0.5,
                ..Default::default()
            },
            ScheduleConfig {
                sigma: 0.0,
                ..Default::default()
            },
            ScheduleConfig {
                k_max: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn space_filling_picks_midpoint() {
        let candidates: Vec<_> = (0..=200).map(|j| v(&[j as f64 / 100.0])).collect();
        let (a, b) = (v(&[0.0]), v(&[2.0]));
        let c = space_filling_argmax(&candidates, &[&a, &b]).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn centers_lie_in_local_set() {
        let game = ConstrainedGame::new(
            AgentLayout::new(vec![2]).unwrap(),
            vec![BoxSet::uniform(2, 0.0, 1.0).unwrap()],
            AffineConstraints::none(2),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [ExplorationMode::Uniform, ExplorationMode::SpaceFilling] {
            for _ in 0..20 {
                let c = exploration_center(&game, 0, mode, &PreferenceDataset::new(), &mut rng).unwrap();
                assert!(game.local(0).contains(c.as_slice(), 0.0));
            }
        }
        let open = ConstrainedGame::unconstrained(vec![1]).unwrap();
        assert!(matches!(
            exploration_center(&open, 0, ExplorationMode::Uniform, &PreferenceDataset::new(), &mut rng),
            Err(Error::UnboundedSampling { .. })
        ));
    }

    #[test]
    fn query_with_exploration_solves_shifted_system() {
        let game = ConstrainedGame::unconstrained(vec![1, 1]).unwrap();
        let objs = vec![scalar(1.0, 1.0, 0.5), scalar(1.0, 0.0, 0.25)];
        let sol = query_gnep(&game, &objs, &[v(&[0.0]), v(&[0.0])], 1.0, &GneOptions::default()).unwrap();
        assert!((sol.x[0] + 16.0 / 31.0).abs() < 1e-9 && (sol.x[1] - 2.0 / 31.0).abs() < 1e-9);
        let pure = query_gnep(&game, &objs, &[v(&[0.0]), v(&[0.0])], 0.0, &GneOptions::default()).unwrap();
        assert!((pure.x[0] + 8.0 / 7.0).abs() < 1e-9 && (pure.x[1] - 2.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn large_exploration_projects_centers() {
        let (game, objs) = reference_game();
        let sol = query_gnep(&game, &objs, &[v(&[1.5]), v(&[-0.3])], 1e8, &GneOptions::default()).unwrap();
        assert!((sol.x[0] - 1.5).abs() < 1e-6 && (sol.x[1] + 0.3).abs() < 1e-6);
    }

    #[test]
    fn perturbation_formula() {
        let x = v(&[2.0, -1.0]);
        let p = perturb_with(&x, 0.1, &v(&[0.5, -0.5]));
        assert!((p[0] - 2.1).abs() < 1e-15 && (p[1] + 1.1).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb(&x, 0.0, &mut rng), x);
        assert_eq!(perturb(&v(&[0.0, 0.0]), 0.3, &mut rng), v(&[0.0, 0.0]));
    }

    fn small_config(k_max: usize) -> ActiveLearningConfig {
        ActiveLearningConfig {
            schedule: ScheduleConfig {
                delta: 1.0,
                k_max,
                ..Default::default()
            },
            m0: 20,
            ..Default::default()
        }
    }

    #[test]
    fn one_iteration_bookkeeping() {
        let (game, objs) = reference_game();
        let oracle = oracle_for(&objs);
        let cfg = ActiveLearningConfig {
            m0: 50,
            ..small_config(10)
        };
        let mut state = initialize(&game, &oracle, &cfg, 7).unwrap();
        assert_eq!(oracle.query_count(), 100);
        al_iteration(&mut state, &oracle, &game, &cfg).unwrap();
        assert_eq!(state.k, 1);
        assert!(state.datasets.iter().all(|d| d.len() == 51));
        assert_eq!(oracle.query_count(), 102);
        assert_eq!(state.history.len(), 1);
        let rec = &state.history[0];
        assert!(game.feasible(&rec.query, 1e-8).unwrap());
    }

    #[test]
    fn no_exploration_no_noise_gives_ties() {
        let (game, objs) = reference_game();
        let oracle = oracle_for(&objs);
        let mut cfg = small_config(3);
        cfg.schedule = ScheduleConfig {
            // δ must be positive; the smallest normal number makes the exploration term vanish
            delta: f64::MIN_POSITIVE,
            sigma: 0.0,
            delta_floor: 0.0,
            sigma_floor: 0.0,
            k_max: 3,
            ..Default::default()
        };
        let mut state = initialize(&game, &oracle, &cfg, 3).unwrap();
        for _ in 0..3 {
            al_iteration(&mut state, &oracle, &game, &cfg).unwrap();
        }
        for d in &state.datasets {
            for s in &d.samples()[cfg.m0..] {
                assert!((&s.x1 - &s.x2).amax() < 1e-9, "{:?} vs {:?}", s.x1, s.x2);
                assert!(s.label);
            }
        }
    }

    #[test]
    fn failed_iteration_leaves_state_untouched() {
        let (game, objs) = reference_game();
        let oracle = oracle_for(&objs);
        let cfg = small_config(1);
        let mut state = initialize(&game, &oracle, &cfg, 5).unwrap();
        al_iteration(&mut state, &oracle, &game, &cfg).unwrap();
        let snapshot = (state.k, state.datasets.clone(), state.thetas.clone());
        let err = al_iteration(&mut state, &oracle, &game, &cfg).unwrap_err();
        assert!(matches!(err, Error::Iteration { iteration: 2, .. }));
        assert_eq!((state.k, state.datasets.clone(), state.thetas.clone()), snapshot);
    }

    #[test]
    fn runs_are_deterministic() {
        let (game, objs) = reference_game();
        let cfg = small_config(4);
        let a = run(&oracle_for(&objs), &game, &cfg, 42).unwrap();
        let b = run(&oracle_for(&objs), &game, &cfg, 42).unwrap();
        assert_eq!(a.state.history, b.state.history);
        assert_eq!(a.x_final, b.x_final);
        let serial = ActiveLearningConfig {
            parallel: false,
            ..cfg.clone()
        };
        let c = run(&oracle_for(&objs), &game, &serial, 42).unwrap();
        assert_eq!(a.state.history, c.state.history);
        let d = run(&oracle_for(&objs), &game, &cfg, 43).unwrap();
        assert_ne!(a.state.history, d.state.history);
    }

    #[test]
    fn recovers_reference_equilibrium() {
        let (game, objs) = reference_game();
        let cfg = ActiveLearningConfig {
            m0: 50,
            ..small_config(60)
        };
        let oracle = oracle_for(&objs);
        let out = run(&oracle, &game, &cfg, 1).unwrap();
        let star = v(&[-8.0 / 7.0, 2.0 / 7.0]);
        let err = (&out.x_final - star).amax();
        assert!(err <= 0.05, "final error {err}, x = {:?}", out.x_final);
        assert!(game.feasible(&out.x_final, 1e-8).unwrap());
        assert!(out.state.datasets.iter().all(|d| d.len() == 110));
        assert_eq!(oracle.query_count(), 2 * 110);
    }
}
