//! Surrogate objectives trained as pairwise preference classifiers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{PreferenceDataset, PreferenceSample};
use crate::optim::{projected_lbfgs, AdamConfig, AdamState, LbfgsSettings, LbfgsStatus};
use crate::quadratic::QuadraticAgentObjective;
use crate::serde_util;

pub const DEFAULT_EPS_D: f64 = 1e-6;
pub const DEFAULT_P_CLAMP: f64 = 1e-12;
/// Lower bound on the diagonal of the Cholesky factor.
pub const DEFAULT_CHOL_FLOOR: f64 = 1e-4;

/// `log(‖x1 − x2‖_∞ + 1 + ε_d)`.
pub fn dissimilarity(x1: &[f64], x2: &[f64], eps_d: f64) -> f64 {
    Dissimilarity::LogInf.eval(x1, x2, eps_d)
}

/// Scale applied to surrogate cost differences before the sigmoid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dissimilarity {
    /// `log(‖x1 − x2‖_∞ + 1 + ε_d)`
    #[default]
    LogInf,
    /// `‖x1 − x2‖₂ + ε_d`
    Euclidean,
    /// `√‖x1 − x2‖₂ + ε_d`
    SqrtEuclidean,
}

impl Dissimilarity {
    pub fn eval(&self, x1: &[f64], x2: &[f64], eps_d: f64) -> f64 {
        debug_assert_eq!(x1.len(), x2.len());
        match self {
            Self::LogInf => {
                let inf = x1.iter().zip(x2).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                (inf + 1.0 + eps_d).ln()
            }
            Self::Euclidean => euclid(x1, x2) + eps_d,
            Self::SqrtEuclidean => euclid(x1, x2).sqrt() + eps_d,
        }
    }
}

fn euclid(x1: &[f64], x2: &[f64]) -> f64 {
    x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `1 / (1 + exp(s))` without overflow.
fn sigmoid_neg(s: f64) -> f64 {
    if s > 0.0 {
        let e = (-s).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + s.exp())
    }
}

/// Probability that `x1` is preferred to `x2` given the cost difference
/// `delta = Ĵ(x1) − Ĵ(x2)` and dissimilarity `d`.
pub fn probability_from_difference(delta: f64, d: f64) -> f64 {
    if delta == 0.0 {
        return 0.5;
    }
    sigmoid_neg(delta / d)
}

/// Modelled probability that the agent prefers `x1` over `x2`.
pub fn pref_probability(
    obj: &QuadraticAgentObjective,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    others: &DVector<f64>,
    eps_d: f64,
) -> f64 {
    let delta = obj.value(x1, others) - obj.value(x2, others);
    probability_from_difference(delta, dissimilarity(x1.as_slice(), x2.as_slice(), eps_d))
}

/// Binary cross-entropy with the predicted probability clamped to `[p_clamp, 1 − p_clamp]`.
pub fn cross_entropy(label: bool, p_hat: f64, p_clamp: f64) -> f64 {
    let p = p_hat.clamp(p_clamp, 1.0 - p_clamp);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Training form of [`cross_entropy`] as a function of the logit `z = −Δ/d`,
/// returning the loss and its derivative in `z`. It agrees with the clamped
/// loss while the predicted probability of the observed label is at least
/// `p_clamp`, and continues linearly beyond that point so badly misclassified
/// pairs keep a gradient.
pub fn logistic_loss(label: bool, z: f64, p_clamp: f64) -> (f64, f64) {
    // work with the logit of the observed label
    let s = if label { z } else { -z };
    let s_c = (p_clamp / (1.0 - p_clamp)).ln();
    let (loss, dlds) = if s < s_c {
        (-p_clamp.ln() + (1.0 - p_clamp) * (s_c - s), -(1.0 - p_clamp))
    } else {
        // −ln σ(s) and its slope −σ(−s)
        let e = (-s.abs()).exp();
        let softplus = (-s).max(0.0) + e.ln_1p();
        let sig_neg = if s > 0.0 { e / (1.0 + e) } else { 1.0 / (1.0 + e) };
        (softplus, -sig_neg)
    };
    if label {
        (loss, dlds)
    } else {
        (loss, -dlds)
    }
}

/// Sizes of one agent's parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub own: usize,
    pub others: usize,
}

impl ThetaLayout {
    pub fn new(own: usize, others: usize) -> Self {
        Self { own, others }
    }

    pub fn n_chol(&self) -> usize {
        self.own * (self.own + 1) / 2
    }

    pub fn q_offset(&self) -> usize {
        self.n_chol()
    }

    pub fn a_offset(&self) -> usize {
        self.n_chol() + self.own
    }

    pub fn len(&self) -> usize {
        self.a_offset() + self.others * self.own
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of `L[r][c]` (`c ≤ r`) in the packed vector.
    pub fn chol_index(&self, r: usize, c: usize) -> usize {
        debug_assert!(c <= r);
        r * (r + 1) / 2 + c
    }
}

/// Packed surrogate parameters `θ_i` with their box `Θ_i`.
///
/// Order: lower triangle of `L` row by row, then `q`, then `A` row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    pub layout: ThetaLayout,
    pub values: Vec<f64>,
    #[serde(with = "serde_util::bounds")]
    pub lower: Vec<f64>,
    #[serde(with = "serde_util::bounds")]
    pub upper: Vec<f64>,
}

impl ThetaVector {
    /// `L = I`, `q = 0`, `A = 0` with default bounds.
    pub fn initial(own: usize, others: usize) -> Self {
        let layout = ThetaLayout::new(own, others);
        let mut values = vec![0.0; layout.len()];
        for r in 0..own {
            values[layout.chol_index(r, r)] = 1.0;
        }
        Self::with_default_bounds(layout, values, DEFAULT_CHOL_FLOOR)
    }

    fn with_default_bounds(layout: ThetaLayout, values: Vec<f64>, floor: f64) -> Self {
        let n = layout.len();
        let mut lower = vec![f64::NEG_INFINITY; n];
        for r in 0..layout.own {
            lower[layout.chol_index(r, r)] = floor;
        }
        Self {
            layout,
            values,
            lower,
            upper: vec![f64::INFINITY; n],
        }
    }

    /// Packs an objective; values below the diagonal floor are kept as is and
    /// only clamped by a later `project`.
    pub fn pack(obj: &QuadraticAgentObjective) -> Self {
        let layout = ThetaLayout::new(obj.own_dim(), obj.others_dim());
        let mut values = Vec::with_capacity(layout.len());
        for r in 0..layout.own {
            for c in 0..=r {
                values.push(obj.chol[(r, c)]);
            }
        }
        values.extend(obj.q.iter());
        for r in 0..layout.others {
            for c in 0..layout.own {
                values.push(obj.a[(r, c)]);
            }
        }
        Self::with_default_bounds(layout, values, DEFAULT_CHOL_FLOOR)
    }

    pub fn from_values(layout: ThetaLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: layout.len(),
                actual: values.len(),
            });
        }
        Ok(Self::with_default_bounds(layout, values, DEFAULT_CHOL_FLOOR))
    }

    pub fn unpack(&self) -> QuadraticAgentObjective {
        let ThetaLayout { own, others } = self.layout;
        let mut chol = DMatrix::zeros(own, own);
        for r in 0..own {
            for c in 0..=r {
                chol[(r, c)] = self.values[self.layout.chol_index(r, c)];
            }
        }
        let q0 = self.layout.q_offset();
        let q = DVector::from_column_slice(&self.values[q0..q0 + own]);
        let a0 = self.layout.a_offset();
        let a = DMatrix::from_row_slice(others, own, &self.values[a0..]);
        QuadraticAgentObjective { chol, q, a }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Pins the coupling block `A` to zero.
    pub fn without_coupling(mut self) -> Self {
        for j in self.layout.a_offset()..self.layout.len() {
            self.values[j] = 0.0;
            self.lower[j] = 0.0;
            self.upper[j] = 0.0;
        }
        self
    }

    pub fn with_chol_floor(mut self, floor: f64) -> Self {
        for r in 0..self.layout.own {
            self.lower[self.layout.chol_index(r, r)] = floor;
        }
        self
    }

    pub fn project(&mut self) {
        for ((v, l), u) in self.values.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam_iters: usize,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lbfgs_max_iters: usize,
    pub lbfgs_history: usize,
    /// Projected-gradient stopping tolerance of the quasi-Newton phase.
    pub lbfgs_tol: f64,
    /// Weight ρ of the `ρ‖θ‖²` regularizer.
    pub reg_weight: f64,
    pub eps_d: f64,
    pub p_clamp: f64,
    pub dissimilarity: Dissimilarity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam_iters: 500,
            adam_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lbfgs_max_iters: 1000,
            lbfgs_history: 10,
            lbfgs_tol: 1e-5,
            reg_weight: 1e-3,
            eps_d: DEFAULT_EPS_D,
            p_clamp: DEFAULT_P_CLAMP,
            dissimilarity: Dissimilarity::LogInf,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("adam_lr", self.adam_lr),
            ("adam_eps", self.adam_eps),
            ("eps_d", self.eps_d),
            ("lbfgs_tol", self.lbfgs_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("reg_weight must be nonnegative, got {}", self.reg_weight)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.p_clamp > 0.0 && self.p_clamp < 0.5) {
            return Err(Error::InvalidArgument(format!("p_clamp must lie in (0, 0.5), got {}", self.p_clamp)));
        }
        if self.lbfgs_history == 0 {
            return Err(Error::InvalidArgument("lbfgs_history must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.adam_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Dataset flattened for repeated loss evaluation. The dissimilarity does not
/// depend on θ, so it is computed once.
struct Objective<'a> {
    layout: ThetaLayout,
    x1: Vec<f64>,
    x2: Vec<f64>,
    xo: Vec<f64>,
    inv_d: Vec<f64>,
    labels: Vec<bool>,
    cfg: &'a TrainConfig,
}

impl<'a> Objective<'a> {
    fn new(layout: ThetaLayout, data: &PreferenceDataset, cfg: &'a TrainConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let m = data.len();
        let mut x1 = Vec::with_capacity(m * layout.own);
        let mut x2 = Vec::with_capacity(m * layout.own);
        let mut xo = Vec::with_capacity(m * layout.others);
        let mut inv_d = Vec::with_capacity(m);
        let mut labels = Vec::with_capacity(m);
        for s in data.iter() {
            check_sample(&layout, s)?;
            x1.extend(s.x1.iter());
            x2.extend(s.x2.iter());
            xo.extend(s.x_others.iter());
            inv_d.push(1.0 / cfg.dissimilarity.eval(s.x1.as_slice(), s.x2.as_slice(), cfg.eps_d));
            labels.push(s.label);
        }
        Ok(Self {
            layout,
            x1,
            x2,
            xo,
            inv_d,
            labels,
            cfg,
        })
    }

    fn m(&self) -> usize {
        self.labels.len()
    }

    /// Loss, and its gradient written into `grad` when given.
    fn eval(&self, theta: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let ThetaLayout { own: n, others: no } = self.layout;
        let (q0, a0) = (self.layout.q_offset(), self.layout.a_offset());
        let rho = self.cfg.reg_weight;
        let scale = 1.0 / self.m() as f64;
        let mut loss = rho * theta.iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = grad.as_deref_mut() {
            for (gj, tj) in g.iter_mut().zip(theta) {
                *gj = 2.0 * rho * tj;
            }
        }
        let mut y1 = vec![0.0; n];
        let mut y2 = vec![0.0; n];
        let mut dx = vec![0.0; n];
        for j in 0..self.m() {
            let a = &self.x1[j * n..(j + 1) * n];
            let b = &self.x2[j * n..(j + 1) * n];
            let o = &self.xo[j * no..(j + 1) * no];
            // y = Lᵀ x
            for c in 0..n {
                let (mut s1, mut s2) = (0.0, 0.0);
                for r in c..n {
                    let l = theta[self.layout.chol_index(r, c)];
                    s1 += l * a[r];
                    s2 += l * b[r];
                }
                y1[c] = s1;
                y2[c] = s2;
            }
            let mut delta = 0.0;
            for c in 0..n {
                dx[c] = a[c] - b[c];
                delta += 0.5 * (y1[c] * y1[c] - y2[c] * y2[c]) + theta[q0 + c] * dx[c];
            }
            for r in 0..no {
                let row = &theta[a0 + r * n..a0 + (r + 1) * n];
                delta += o[r] * row.iter().zip(&dx).map(|(u, v)| u * v).sum::<f64>();
            }
            let (l, dldz) = logistic_loss(self.labels[j], -delta * self.inv_d[j], self.cfg.p_clamp);
            loss += scale * l;

            let Some(g) = grad.as_deref_mut() else { continue };
            // z = −Δ/d, so inside the clamp d loss / d Δ = (π − P) / d
            let w = -scale * dldz * self.inv_d[j];
            if w == 0.0 {
                continue;
            }
            for r in 0..n {
                let base = r * (r + 1) / 2;
                for c in 0..=r {
                    g[base + c] += w * (a[r] * y1[c] - b[r] * y2[c]);
                }
            }
            for c in 0..n {
                g[q0 + c] += w * dx[c];
            }
            for r in 0..no {
                let wr = w * o[r];
                for c in 0..n {
                    g[a0 + r * n + c] += wr * dx[c];
                }
            }
        }
        loss
    }
}

fn check_sample(layout: &ThetaLayout, s: &PreferenceSample) -> Result<()> {
    for (context, expected, actual) in [
        ("first query point", layout.own, s.x1.len()),
        ("second query point", layout.own, s.x2.len()),
        ("opponent decisions", layout.others, s.x_others.len()),
    ] {
        if expected != actual {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                actual,
            });
        }
    }
    Ok(())
}

/// `ρ‖θ‖² + (1/M) Σ_j L(π_j, P_j)`.
pub fn training_loss(theta: &ThetaVector, data: &PreferenceDataset, cfg: &TrainConfig) -> Result<f64> {
    Ok(Objective::new(theta.layout, data, cfg)?.eval(&theta.values, None))
}

/// Analytic gradient of [`training_loss`] with respect to the packed parameters.
pub fn training_gradient(theta: &ThetaVector, data: &PreferenceDataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let obj = Objective::new(theta.layout, data, cfg)?;
    let mut g = vec![0.0; theta.len()];
    obj.eval(&theta.values, Some(&mut g));
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub theta: ThetaVector,
    pub loss: f64,
    pub initial_loss: f64,
    pub lbfgs_iterations: usize,
    pub lbfgs_status: LbfgsStatus,
    /// Set when the quasi-Newton line search gave up; `theta` is still the best iterate seen.
    pub warning: bool,
}

/// Adam warm-up followed by box-constrained L-BFGS; returns the lowest-loss iterate.
pub fn train(init: &ThetaVector, data: &PreferenceDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let obj = Objective::new(init.layout, data, cfg)?;
    let (lower, upper) = (&init.lower, &init.upper);
    let mut x = init.values.clone();
    for ((v, l), u) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*l, *u);
    }
    let mut g = vec![0.0; x.len()];
    let initial_loss = obj.eval(&init.values, None);
    let mut best = (initial_loss, init.values.clone());

    let adam_cfg = cfg.adam();
    let mut adam = AdamState::new(x.len());
    for _ in 0..cfg.adam_iters {
        let f = obj.eval(&x, Some(&mut g));
        if f < best.0 {
            best = (f, x.clone());
        }
        adam.step(&mut x, &g, &adam_cfg, lower, upper);
    }

    let settings = LbfgsSettings {
        max_iter: cfg.lbfgs_max_iters,
        history: cfg.lbfgs_history,
        pgtol: cfg.lbfgs_tol,
        ..Default::default()
    };
    let report = projected_lbfgs(|t, gr| obj.eval(t, Some(gr)), &x, lower, upper, &settings);
    if report.f < best.0 {
        best = (report.f, report.x);
    }
    let mut theta = init.clone();
    theta.values = best.1;
    Ok(TrainReport {
        theta,
        loss: best.0,
        initial_loss,
        lbfgs_iterations: report.iterations,
        lbfgs_status: report.status,
        warning: report.status == LbfgsStatus::LineSearchFailed,
    })
}

/// Fraction of pairs on which the surrogate's preferred point matches the label.
pub fn preference_accuracy(obj: &QuadraticAgentObjective, data: &PreferenceDataset) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let hits = data
        .iter()
        .filter(|s| (obj.value(&s.x1, &s.x_others) <= obj.value(&s.x2, &s.x_others)) == s.label)
        .count();
    hits as f64 / data.len() as f64
}
