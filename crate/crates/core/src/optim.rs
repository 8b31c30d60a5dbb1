//! Box-constrained first- and quasi-second-order optimizers on flat parameter vectors.

use std::collections::VecDeque;

fn project_into(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, l), u) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*l, *u);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates of Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected Adam update followed by projection onto `[lower, upper]`.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], cfg: &AdamConfig, lower: &[f64], upper: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for j in 0..x.len() {
            self.m[j] = cfg.beta1 * self.m[j] + (1.0 - cfg.beta1) * grad[j];
            self.v[j] = cfg.beta2 * self.v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
            let m_hat = self.m[j] / bc1;
            let v_hat = self.v[j] / bc2;
            x[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        project_into(x, lower, upper);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsSettings {
    pub max_iter: usize,
    pub history: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Stop when the projected gradient falls below this (∞-norm).
    pub pgtol: f64,
    /// Stop on relative function decrease below this.
    pub ftol: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            history: 10,
            c1: 1e-4,
            pgtol: 1e-5,
            ftol: 2.2e-9,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub status: LbfgsStatus,
}

/// Limited-memory BFGS with gradient projection for box constraints.
///
/// Variables sitting on a bound with the gradient pushing outward are frozen
/// for the iteration; the two-loop direction is computed on the remaining
/// ones and a projected backtracking line search enforces the Armijo
/// condition along the projection arc.
pub fn projected_lbfgs<F>(mut fg: F, x0: &[f64], lower: &[f64], upper: &[f64], s: &LbfgsSettings) -> LbfgsReport
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project_into(&mut x, lower, upper);
    let mut g = vec![0.0; n];
    let mut f = fg(&x, &mut g);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(s.history);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    for it in 0..s.max_iter {
        let pg = (0..n)
            .map(|j| (x[j] - (x[j] - g[j]).clamp(lower[j], upper[j])).abs())
            .fold(0.0, f64::max);
        if pg <= s.pgtol {
            return LbfgsReport {
                x,
                f,
                iterations: it,
                status: LbfgsStatus::Converged,
            };
        }
        let frozen: Vec<bool> = (0..n)
            .map(|j| (x[j] <= lower[j] && g[j] > 0.0) || (x[j] >= upper[j] && g[j] < 0.0))
            .collect();

        let mut d = two_loop(&g, &frozen, &mem);
        if dot(&g, &d) >= 0.0 || d.iter().any(|v| !v.is_finite()) {
            mem.clear();
            d = (0..n).map(|j| if frozen[j] { 0.0 } else { -g[j] }).collect();
        }
        let mut alpha = if mem.is_empty() {
            (1.0 / d.iter().fold(0.0f64, |a, v| a.max(v.abs()))).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..s.max_backtracks {
            for j in 0..n {
                x_new[j] = (x[j] + alpha * d[j]).clamp(lower[j], upper[j]);
            }
            let f_try = fg(&x_new, &mut g_new);
            let decrease: f64 = (0..n).map(|j| g[j] * (x_new[j] - x[j])).sum();
            if f_try.is_finite() && f_try <= f + s.c1 * decrease {
                accepted = Some(f_try);
                break;
            }
            alpha *= 0.5;
        }
        let Some(f_next) = accepted else {
            return LbfgsReport {
                x,
                f,
                iterations: it,
                status: LbfgsStatus::LineSearchFailed,
            };
        };

        let sv: Vec<f64> = (0..n).map(|j| x_new[j] - x[j]).collect();
        let yv: Vec<f64> = (0..n).map(|j| g_new[j] - g[j]).collect();
        let sy = dot(&sv, &yv);
        if sy > 1e-10 * dot(&sv, &sv).sqrt() * dot(&yv, &yv).sqrt() {
            if mem.len() == s.history {
                mem.pop_front();
            }
            mem.push_back((sv, yv, 1.0 / sy));
        }
        let f_prev = f;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_next;
        if (f_prev - f) <= s.ftol * f_prev.abs().max(f.abs()).max(1.0) {
            return LbfgsReport {
                x,
                f,
                iterations: it + 1,
                status: LbfgsStatus::Converged,
            };
        }
    }
    LbfgsReport {
        x,
        f,
        iterations: s.max_iter,
        status: LbfgsStatus::MaxIterations,
    }
}

fn two_loop(g: &[f64], frozen: &[bool], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let n = g.len();
    let mask = |v: &mut [f64]| {
        for j in 0..n {
            if frozen[j] {
                v[j] = 0.0;
            }
        }
    };
    let mut q = g.to_vec();
    mask(&mut q);
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        for j in 0..n {
            q[j] -= a * y[j];
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        for v in q.iter_mut() {
            *v *= gamma;
        }
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for j in 0..n {
            q[j] += (a - b) * s[j];
        }
    }
    mask(&mut q);
    for v in q.iter_mut() {
        *v = -*v;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_on_square() {
        // f = θ², θ = 1: g = 2, m̂ = 2, v̂ = 4 → θ = 1 − 0.001·2/(2 + 1e−8)
        let mut x = vec![1.0];
        let mut st = AdamState::new(1);
        st.step(&mut x, &[2.0], &AdamConfig::default(), &[f64::NEG_INFINITY], &[f64::INFINITY]);
        let expected = 1.0 - 0.001 * 2.0 / (2.0 + 1e-8);
        assert!((x[0] - expected).abs() < 1e-15);
        assert!((x[0] - 0.999).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_is_stationary() {
        let mut x = vec![0.7, -2.0];
        let mut st = AdamState::new(2);
        for _ in 0..100 {
            st.step(&mut x, &[0.0, 0.0], &AdamConfig::default(), &[-10.0; 2], &[10.0; 2]);
        }
        assert_eq!(x, vec![0.7, -2.0]);
    }

    #[test]
    fn adam_respects_lower_bound() {
        let mut x = vec![0.5];
        let mut st = AdamState::new(1);
        for _ in 0..10 {
            st.step(&mut x, &[1.0], &AdamConfig::default(), &[0.5], &[f64::INFINITY]);
            assert_eq!(x[0], 0.5);
        }
    }

    #[test]
    fn lbfgs_minimizes_rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let s = LbfgsSettings {
            pgtol: 1e-10,
            ftol: 0.0,
            ..Default::default()
        };
        let r = projected_lbfgs(f, &[-1.2, 1.0], &[f64::NEG_INFINITY; 2], &[f64::INFINITY; 2], &s);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn lbfgs_stops_on_active_bound() {
        // min (x − 3)² + (y + 1)² on [0, 2]² → (2, 0)
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 3.0);
            g[1] = 2.0 * (x[1] + 1.0);
            (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2)
        };
        let r = projected_lbfgs(f, &[1.0, 1.0], &[0.0; 2], &[2.0; 2], &LbfgsSettings::default());
        assert_eq!(r.status, LbfgsStatus::Converged);
        assert_eq!(r.x, vec![2.0, 0.0]);
    }

    #[test]
    fn lbfgs_handles_ill_conditioned_quadratic() {
        let scales = [1.0, 10.0, 100.0, 1000.0];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for j in 0..4 {
                g[j] = scales[j] * (x[j] - 1.0);
                v += 0.5 * scales[j] * (x[j] - 1.0).powi(2);
            }
            v
        };
        let s = LbfgsSettings {
            pgtol: 1e-9,
            ftol: 0.0,
            ..Default::default()
        };
        let r = projected_lbfgs(f, &[0.0; 4], &[f64::NEG_INFINITY; 4], &[f64::INFINITY; 4], &s);
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-8), "{r:?}");
    }
}
