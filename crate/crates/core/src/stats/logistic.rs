//! L2-regularized logistic regression.
//!
//! Objective, for labels `y ∈ {0,1}` and per-sample weights `s_i`:
//!
//! ```text
//! J(w, b) = (1/n) Σ s_i · BCE(σ(x_i·w + b), y_i) + ‖w‖² / (2·C·n)
//! ```
//!
//! Minimized by deterministic full-batch L-BFGS with Armijo backtracking,
//! starting from `w = 0, b = 0`.

use std::collections::VecDeque;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    /// `w_c = n / (2·n_c)`.
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub c: f64,
    pub class_weighting: ClassWeighting,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            c: 1.0,
            class_weighting: ClassWeighting::None,
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub reg_strength: f64,
    pub class_weighting: ClassWeighting,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn decision(&self, x: ArrayView1<'_, f64>) -> f64 {
        x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>() + self.bias
    }

    /// Decision values for every row of `x`.
    pub fn decision_rows(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        let w = ArrayView1::from(&self.weights[..]);
        Ok(x.dot(&w).iter().map(|z| z + self.bias).collect())
    }

    pub fn predict_proba(&self, x: ArrayView1<'_, f64>) -> f64 {
        sigmoid(self.decision(x))
    }

    /// Fraction of rows whose sign of the decision value matches the label.
    pub fn accuracy(&self, x: ArrayView2<'_, f64>, y: &[bool]) -> Result<f64> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows vs {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if y.is_empty() {
            return Err(Error::Insufficient("no rows to score".into()));
        }
        let z = self.decision_rows(x)?;
        let hits = z.iter().zip(y).filter(|(z, &y)| (**z > 0.0) == y).count();
        Ok(hits as f64 / y.len() as f64)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sample_weights(y: &[bool], weighting: ClassWeighting) -> Result<Vec<f64>> {
    let n = y.len();
    let n_pos = y.iter().filter(|&&v| v).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!(
            "{n_pos} positive, {n_neg} negative"
        )));
    }
    Ok(match weighting {
        ClassWeighting::None => vec![1.0; n],
        ClassWeighting::Balanced => {
            let wp = n as f64 / (2.0 * n_pos as f64);
            let wn = n as f64 / (2.0 * n_neg as f64);
            y.iter().map(|&v| if v { wp } else { wn }).collect()
        }
    })
}

fn check_inputs(x: ArrayView2<'_, f64>, y: &[bool], c: f64) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows vs {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Insufficient(format!(
            "{} samples, need at least 2",
            x.nrows()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::InvalidInput("zero feature columns".into()));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidInput(format!(
            "regularization C must be positive, got {c}"
        )));
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "feature matrix at row {}, column {}",
            pos / x.ncols(),
            pos % x.ncols()
        )));
    }
    Ok(())
}

struct Problem<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [bool],
    s: Vec<f64>,
    inv_cn: f64,
}

impl Problem<'_> {
    /// Objective and gradient at `theta = [w; b]`.
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = self.x.ncols();
        let n = self.x.nrows() as f64;
        let w = ArrayView1::from(&theta[..d]);
        let b = theta[d];
        let z = self.x.dot(&w);
        let mut loss = 0.0;
        let mut r = Array1::<f64>::zeros(self.x.nrows());
        for i in 0..self.x.nrows() {
            let zi = z[i] + b;
            let yi = if self.y[i] { 1.0 } else { 0.0 };
            loss += self.s[i] * (softplus(zi) - yi * zi);
            r[i] = self.s[i] * (sigmoid(zi) - yi) / n;
        }
        let reg = 0.5 * self.inv_cn * w.dot(&w);
        let gw = self.x.t().dot(&r);
        let mut g: Vec<f64> = gw
            .iter()
            .zip(w.iter())
            .map(|(g, w)| g + self.inv_cn * w)
            .collect();
        g.push(r.sum());
        (loss / n + reg, g)
    }
}

/// Analytic gradient of the fitting objective at `(w, b)`.
pub fn logistic_gradient(
    x: ArrayView2<'_, f64>,
    y: &[bool],
    w: &[f64],
    b: f64,
    c: f64,
    weighting: ClassWeighting,
) -> Result<(Vec<f64>, f64)> {
    check_inputs(x, y, c)?;
    if w.len() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} features",
            w.len(),
            x.ncols()
        )));
    }
    let p = problem(x, y, c, weighting)?;
    let mut theta = w.to_vec();
    theta.push(b);
    let (_, mut g) = p.eval(&theta);
    let gb = g.pop().expect("bias component");
    Ok((g, gb))
}

/// Value of the fitting objective at `(w, b)`.
pub fn logistic_objective(
    x: ArrayView2<'_, f64>,
    y: &[bool],
    w: &[f64],
    b: f64,
    c: f64,
    weighting: ClassWeighting,
) -> Result<f64> {
    check_inputs(x, y, c)?;
    let p = problem(x, y, c, weighting)?;
    let mut theta = w.to_vec();
    theta.push(b);
    Ok(p.eval(&theta).0)
}

fn problem<'a>(
    x: ArrayView2<'a, f64>,
    y: &'a [bool],
    c: f64,
    weighting: ClassWeighting,
) -> Result<Problem<'a>> {
    Ok(Problem {
        x,
        y,
        s: sample_weights(y, weighting)?,
        inv_cn: 1.0 / (c * x.nrows() as f64),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

const HISTORY: usize = 10;

pub fn fit_logistic(
    x: ArrayView2<'_, f64>,
    y: &[bool],
    cfg: &LogisticConfig,
) -> Result<LogisticModel> {
    check_inputs(x, y, cfg.c)?;
    let p = problem(x, y, cfg.c, cfg.class_weighting)?;
    let dim = x.ncols() + 1;
    let mut theta = vec![0.0; dim];
    let (mut f, mut g) = p.eval(&theta);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(HISTORY);
    let mut converged = max_abs(&g) < cfg.tol;
    let mut iterations = 0;

    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let mut dir = two_loop(&g, &hist);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut t = if hist.is_empty() {
            (1.0 / max_abs(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            let (fc, gc) = p.eval(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * t * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            continue;
        };
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if hist.len() == HISTORY {
                hist.pop_front();
            }
            hist.push_back((s, yv, 1.0 / sy));
        }
        theta = cand;
        f = fc;
        g = gc;
        converged = max_abs(&g) < cfg.tol;
    }

    let bias = theta.pop().expect("bias component");
    if theta.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
        return Err(Error::NonFinite("fitted logistic weights".into()));
    }
    Ok(LogisticModel {
        weights: theta,
        bias,
        reg_strength: cfg.c,
        class_weighting: cfg.class_weighting,
        converged,
        iterations,
    })
}

fn two_loop(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}
