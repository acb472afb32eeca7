//! Minimal limited-memory BFGS with Armijo backtracking, used to optimise
//! nudging controls stage by stage. The objective callback returns `None`
//! when an evaluation fails (e.g. a timestep refuses to converge); a
//! failure at the start aborts, later failures end the search at the best
//! point found.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 20,
            grad_tol: 1e-6,
            memory: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum LbfgsError {
    #[error("objective evaluation failed at the starting point")]
    InitialEvalFailed,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimise `f`, which returns value and gradient, starting from `x0`.
pub fn minimize<F>(x0: Vec<f64>, opts: &LbfgsOptions, mut f: F) -> Result<LbfgsResult, LbfgsError>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x).ok_or(LbfgsError::InitialEvalFailed)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = norm(&g) <= opts.grad_tol;

    while !converged && iterations < opts.max_iters {
        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y).max(1e-300);
            for v in d.iter_mut() {
                *v *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (a - b) * s[i];
            }
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        // Armijo line search: backtrack on failure, expand on immediate
        // success (a stale quasi-Newton metric can make unit steps creep
        // along flat valleys).
        let trial = |t: f64, f: &mut F| -> Option<(Vec<f64>, f64, Vec<f64>)> {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            let (ft, gt) = f(&xt)?;
            (ft.is_finite() && ft <= fx + 1e-4 * t * slope).then_some((xt, ft, gt))
        };
        let mut accepted = trial(1.0, &mut f);
        match &accepted {
            Some(_) => {
                let mut t = 2.0;
                for _ in 0..20 {
                    match trial(t, &mut f) {
                        Some(next)
                            if next.1 < accepted.as_ref().expect("accepted is set").1 =>
                        {
                            accepted = Some(next);
                            t *= 2.0;
                        }
                        _ => break,
                    }
                }
            }
            None => {
                let mut t = 0.5;
                for _ in 0..30 {
                    if let Some(hit) = trial(t, &mut f) {
                        accepted = Some(hit);
                        break;
                    }
                    t *= 0.5;
                }
            }
        }
        let Some((xt, ft, gt)) = accepted else {
            break; // line search stalled; return the best point so far
        };

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ys = dot(&y, &s);
        if ys > 1e-12 * norm(&y) * norm(&s) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / ys));
        }
        x = xt;
        fx = ft;
        g = gt;
        iterations += 1;
        converged = norm(&g) <= opts.grad_tol;
    }

    Ok(LbfgsResult {
        x,
        value: fx,
        iterations,
        converged,
    })
}
