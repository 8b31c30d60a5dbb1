//! Seeded execution of the learning loop with per-iteration metrics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use prefnash::active::{self, IterationRecord};
use prefnash::gne::{self, GneOptions, SolveStatus};
use prefnash::lqr::{self, GainProfile};
use prefnash::preference::ThetaVector;

use crate::config::ExperimentConfig;
use crate::error::BenchError;
use crate::record::{Aggregate, IterationRow, MetricKind, RunRecord, ThetaFile, AGGREGATE_FILE, CONFIG_FILE, THETA_FILE};
use crate::registry::{Problem, Registry};

/// Per-agent metrics, reference distance and (optionally) RMSE at a joint decision.
struct Metrics {
    per_agent: Vec<f64>,
    ref_error: Option<f64>,
    rmse: Option<f64>,
}

fn metrics_at(problem: &Problem, x: &DVector<f64>, with_rmse: bool) -> Metrics {
    let layout = problem.game.layout();
    let ref_error = problem.reference.as_ref().map(|r| (x - r).amax());
    if let Some(setup) = problem.lqr() {
        let Ok(profile) = GainProfile::from_vector(&setup.game.system, x) else {
            return Metrics {
                per_agent: vec![f64::NAN; layout.num_agents()],
                ref_error,
                rmse: None,
            };
        };
        // a diverging Riccati recursion means an arbitrarily bad profile
        let per_agent = (0..layout.num_agents())
            .map(|i| lqr::br_deviation(&setup.game, i, &profile).unwrap_or(f64::INFINITY))
            .collect();
        let rmse = with_rmse.then(|| {
            lqr::evaluate_profile(&setup.game, &profile, &setup.nash, &setup.initial_states)
                .map_or(f64::INFINITY, |e| e.normalized_rmse)
        });
        return Metrics {
            per_agent,
            ref_error,
            rmse,
        };
    }
    let per_agent = (0..layout.num_agents())
        .map(|i| match problem.oracle.objective_value(i, &layout.extract(i, x), &layout.others(i, x)) {
            Some(Ok(v)) => v,
            _ => f64::NAN,
        })
        .collect();
    Metrics {
        per_agent,
        ref_error,
        rmse: None,
    }
}

fn metric_kind(problem: &Problem) -> MetricKind {
    if problem.lqr().is_some() {
        MetricKind::BrDeviation
    } else {
        MetricKind::Objective
    }
}

fn iteration_row(problem: &Problem, rec: &IterationRecord, with_rmse: bool) -> IterationRow {
    let m = metrics_at(problem, &rec.learned, with_rmse);
    IterationRow {
        k: rec.k,
        delta: rec.delta,
        sigma: rec.sigma,
        query_status: rec.query_status,
        query_residual: rec.query_residual,
        learned_status: rec.learned_status,
        learned_residual: rec.learned_residual,
        train_warnings: rec.train_warnings,
        retries: rec.retries,
        oracle_queries: rec.oracle_queries,
        query: rec.query.as_slice().to_vec(),
        learned: rec.learned.as_slice().to_vec(),
        metrics: m.per_agent,
        ref_error: m.ref_error,
        rmse: m.rmse,
    }
}

/// Configuration as it applies to a single seeded run.
pub fn config_snapshot(cfg: &ExperimentConfig, seed: u64) -> String {
    let mut c = cfg.clone();
    c.seed = seed;
    c.repeat = 1;
    c.out = None;
    c.to_toml()
}

/// Runs one seed. When `out` is given the run directory is written, also
/// for a run that fails part way (with the completed iterations).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    registry: &Registry,
    seed: u64,
    out: Option<&Path>,
) -> Result<RunRecord, BenchError> {
    cfg.validate()?;
    let problem = registry.build(&cfg.problem, &cfg.params, seed)?;
    let mut al = cfg.active_learning();
    if problem.no_coupling {
        al.coupling = false;
    }
    let k_max = cfg.schedule.k_max;
    let every = cfg.learning.rmse_every;
    let start = Instant::now();
    let mut rows: Vec<IterationRow> = Vec::with_capacity(k_max);
    let mut thetas: Vec<ThetaVector> = Vec::new();
    let result = active::run_with_observer(&*problem.oracle, &problem.game, &al, seed, |state| {
        thetas.clone_from(&state.thetas);
        if let Some(rec) = state.history.last() {
            if rows.last().map_or(true, |r| r.k < rec.k) {
                rows.push(iteration_row(&problem, rec, rec.k % every == 0 || rec.k == k_max));
            }
        }
    });
    let (x_final, final_status, error) = match result {
        Ok(out) => (out.x_final.as_slice().to_vec(), Some(out.final_status), None),
        Err(e) => (rows.last().map(|r| r.learned.clone()).unwrap_or_default(), None, Some(e)),
    };
    let record = RunRecord {
        problem: cfg.problem.clone(),
        seed,
        metric: metric_kind(&problem),
        rows,
        x_final,
        final_status,
        thetas,
        reference: problem.reference.as_ref().map(|r| r.as_slice().to_vec()),
        oracle_queries: problem.oracle.query_count(),
        wall_time_s: start.elapsed().as_secs_f64(),
        error: error.as_ref().map(ToString::to_string),
    };
    if let Some(dir) = out {
        record.write(dir, &config_snapshot(cfg, seed))?;
    }
    match error {
        Some(e) => Err(e.into()),
        None => Ok(record),
    }
}

/// Directory of repeat `index` under `root`; a single run uses `root` itself.
pub fn run_dir(root: &Path, repeat: usize, seed: u64) -> PathBuf {
    if repeat == 1 {
        root.to_path_buf()
    } else {
        root.join(format!("seed-{seed}"))
    }
}

/// Runs seeds `cfg.seed .. cfg.seed + cfg.repeat` on separate threads and,
/// for more than one repeat, writes an aggregate of the final metrics.
pub fn run_repeats(cfg: &ExperimentConfig, registry: &Registry, out: Option<&Path>) -> Result<Vec<RunRecord>, BenchError> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.repeat as u64).map(|r| cfg.seed + r).collect();
    let dirs: Vec<Option<PathBuf>> = seeds.iter().map(|&s| out.map(|o| run_dir(o, cfg.repeat, s))).collect();
    let results: Vec<Result<RunRecord, BenchError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .zip(&dirs)
            .map(|(&seed, dir)| scope.spawn(move || run_experiment(cfg, registry, seed, dir.as_deref())))
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    if let (Some(root), true) = (out, cfg.repeat > 1) {
        let run_dirs: Vec<PathBuf> = dirs.into_iter().flatten().collect();
        let agg = Aggregate::from_dirs(&run_dirs)?;
        let path = root.join(AGGREGATE_FILE);
        std::fs::write(&path, agg.to_text()).map_err(|e| BenchError::io(path, e))?;
    }
    Ok(records)
}

/// Metrics recomputed from a stored run's final parameters.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    pub metrics: Vec<f64>,
    pub ref_error: Option<f64>,
    pub rmse: Option<f64>,
    /// Largest deviation from the stored final equilibrium.
    pub stored_gap: f64,
}

pub fn evaluate_run(dir: &Path, registry: &Registry) -> Result<Evaluation, BenchError> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| BenchError::io(path, e))
    };
    let cfg = ExperimentConfig::parse(&read(CONFIG_FILE)?)?;
    let theta: ThetaFile = serde_json::from_str(&read(THETA_FILE)?)?;
    let problem = registry.build(&cfg.problem, &cfg.params, theta.seed)?;
    if theta.thetas.len() != problem.game.num_agents() {
        return Err(BenchError::Format("parameter file does not match the problem".into()));
    }
    let objectives: Vec<_> = theta.thetas.iter().map(ThetaVector::unpack).collect();
    let stored = DVector::from_vec(theta.x_final.clone());
    let opts = GneOptions {
        tol: cfg.learning.gne_tol,
        max_iter: cfg.learning.gne_max_iter,
        warm_start: (stored.len() == problem.game.layout().total()).then(|| stored.clone()),
        ..Default::default()
    };
    let sol = gne::solve_gne(&problem.game, &objectives, None, &opts)?;
    let m = metrics_at(&problem, &sol.x, true);
    let stored_gap = if stored.len() == sol.x.len() {
        (&sol.x - &stored).amax()
    } else {
        f64::INFINITY
    };
    Ok(Evaluation {
        x: sol.x.as_slice().to_vec(),
        status: sol.status,
        metrics: m.per_agent,
        ref_error: m.ref_error,
        rmse: m.rmse,
        stored_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{read_iterations, ITERATIONS_FILE};

    fn synthetic(k_max: usize) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "problem = \"synthetic-quadratic\"\n[schedule]\nk_max = {k_max}\n[learning]\nm0 = 10\n"
        ))
        .unwrap()
    }

    #[test]
    fn record_has_one_row_per_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let rec = run_experiment(&synthetic(8), &Registry::default(), 3, Some(dir.path())).unwrap();
        assert_eq!(rec.rows.len(), 8);
        assert_eq!(rec.oracle_queries, 2 * (10 + 8));
        assert!(rec.rows.iter().all(|r| r.ref_error.is_some() && r.metrics.len() == 2));
        let (rows, kind) = read_iterations(&dir.path().join(ITERATIONS_FILE)).unwrap();
        assert_eq!(kind, MetricKind::Objective);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[7].learned, rec.x_final);
    }

    #[test]
    fn evaluate_recovers_final_equilibrium() {
        let dir = tempfile::tempdir().unwrap();
        let rec = run_experiment(&synthetic(6), &Registry::default(), 9, Some(dir.path())).unwrap();
        let ev = evaluate_run(dir.path(), &Registry::default()).unwrap();
        assert!(ev.stored_gap < 1e-6, "{}", ev.stored_gap);
        let last = rec.rows.last().unwrap();
        assert!((ev.ref_error.unwrap() - last.ref_error.unwrap()).abs() < 1e-6);
    }

    #[test]
    fn repeats_write_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = synthetic(5);
        cfg.repeat = 3;
        cfg.seed = 20;
        let records = run_repeats(&cfg, &Registry::default(), Some(dir.path())).unwrap();
        assert_eq!(records.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![20, 21, 22]);
        let text = std::fs::read_to_string(dir.path().join(AGGREGATE_FILE)).unwrap();
        assert!(text.contains("runs = 3"));
        let from_files = Aggregate::from_dirs(&[20, 21, 22].map(|s| dir.path().join(format!("seed-{s}")))).unwrap();
        assert_eq!(from_files, Aggregate::from_records(&records));
    }

    // Two scalar agents whose objectives start failing after `FAIL_AFTER`
    // evaluations: 40 for the initial pairs, then 4 per iteration for the
    // queries and 2 for the metrics, so the third iteration fails.
    const FAIL_AFTER: u64 = 40 + 2 * 6;

    fn flaky(_: &toml::Table, _: u64) -> Result<Problem, BenchError> {
        use prefnash::{make_preference_oracle, BoxSet, ConstrainedGame, ObjectiveFn};
        use std::sync::atomic::{AtomicU64, Ordering};
        use std::sync::Arc;
        let calls = Arc::new(AtomicU64::new(0));
        let objectives: Vec<ObjectiveFn> = (0..2)
            .map(|i| {
                let calls = Arc::clone(&calls);
                Box::new(move |x: &DVector<f64>, o: &DVector<f64>| {
                    if calls.fetch_add(1, Ordering::SeqCst) >= FAIL_AFTER {
                        return Err(prefnash::Error::Objective("simulator offline".into()));
                    }
                    Ok((x[0] - 0.2 * i as f64).powi(2) + 0.1 * x[0] * o[0])
                }) as ObjectiveFn
            })
            .collect();
        let game = ConstrainedGame::new(
            prefnash::AgentLayout::new(vec![1, 1])?,
            vec![BoxSet::uniform(1, -1.0, 1.0)?; 2],
            prefnash::AffineConstraints::none(2),
        )?;
        Ok(Problem {
            id: "flaky".into(),
            game,
            oracle: Box::new(make_preference_oracle(objectives)),
            reference: None,
            family: crate::registry::Family::Objective,
            no_coupling: false,
        })
    }

    #[test]
    fn failed_run_flushes_partial_record() {
        let mut registry = Registry::empty();
        registry.register("flaky", "fails mid-run", flaky).unwrap();
        let cfg = ExperimentConfig::parse("problem = \"flaky\"\n[schedule]\nk_max = 10\n[learning]\nm0 = 10\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&cfg, &registry, 0, Some(dir.path())).unwrap_err();
        assert!(err.to_string().contains("simulator offline"), "{err}");
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("error = "), "{summary}");
        let (rows, _) = read_iterations(&dir.path().join(ITERATIONS_FILE)).unwrap();
        assert_eq!(rows.len(), 2);
    }
}
