//! Gradient-based maximization: L-BFGS directions with Armijo backtracking.
//!
//! Accepted steps never decrease the objective; convergence is declared when
//! the objective changes by less than `tol` for `tol_iters` consecutive
//! iterations or `max_iters` is reached. Optional box constraints are
//! enforced by projection.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    pub tol: f64,
    pub tol_iters: usize,
    pub memory: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iters: 2000,
            tol: 1e-6,
            tol_iters: 5,
            memory: 10,
        }
    }
}

/// One accepted optimizer step, for the machine-readable iteration log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(b) = bounds {
        for (xi, &(lo, hi)) in x.iter_mut().zip(b) {
            *xi = xi.clamp(lo, hi);
        }
    }
}

/// Maximizes `f` from `x0`. The closure returns the objective value and its
/// gradient. Errors if the objective is non-finite at the starting point.
pub fn maximize<F>(
    mut f: F,
    x0: &[f64],
    settings: &OptimizerSettings,
    bounds: Option<&[(f64, f64)]>,
) -> Result<OptimOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let (mut fx, mut gx) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::OptimizerDiverged(
            "objective non-finite at initialization".into(),
        ));
    }

    // L-BFGS memory of (s, y, rho) for the minimization of -f
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = Vec::new();
    let mut flat_count = 0usize;
    let mut converged = false;

    for iter in 0..settings.max_iters {
        let gnorm = norm(&gx);
        if gnorm == 0.0 {
            converged = true;
            break;
        }

        // two-loop recursion on g (ascent): direction approximates H^{-1} g
        let mut d = gx.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let yy = dot(y, y);
            if yy > 0.0 {
                let gamma = dot(s, y) / yy;
                for di in d.iter_mut() {
                    *di *= gamma;
                }
            }
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }

        // fall back to steepest ascent if the curvature info is unusable
        if dot(&d, &gx) <= 0.0 || d.iter().any(|v| !v.is_finite()) {
            d = gx.clone();
            mem.clear();
        }

        // Armijo backtracking on the ascent direction
        let slope = dot(&d, &gx);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            project(&mut xt, bounds);
            match f(&xt) {
                Ok((ft, gt)) if ft.is_finite() && ft >= fx + 1e-4 * step * slope => {
                    accepted = Some((xt, ft, gt));
                    break;
                }
                Ok(_) | Err(_) => {}
            }
            step *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            // no acceptable step along any direction: treat as converged
            converged = true;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        // y for the minimization of -f is -(g_new - g_old)
        let y: Vec<f64> = gx.iter().zip(&g_new).map(|(old, new)| old - new).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if mem.len() == settings.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }

        let delta = f_new - fx;
        x = x_new;
        fx = f_new;
        gx = g_new;
        iterations.push(IterationRecord {
            iteration: iter,
            objective: fx,
            grad_norm: norm(&gx),
            step_size: step,
        });

        if delta.abs() < settings.tol {
            flat_count += 1;
            if flat_count >= settings.tol_iters {
                converged = true;
                break;
            }
        } else {
            flat_count = 0;
        }
    }

    Ok(OptimOutcome {
        x,
        objective: fx,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic() {
        // f(x) = -(x0-1)^2 - 2(x1+0.5)^2
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = -(x[0] - 1.0).powi(2) - 2.0 * (x[1] + 0.5).powi(2);
            Ok((v, vec![-2.0 * (x[0] - 1.0), -4.0 * (x[1] + 0.5)]))
        };
        let out = maximize(f, &[5.0, 5.0], &OptimizerSettings::default(), None).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-4);
        assert!((out.x[1] + 0.5).abs() < 1e-4);
    }

    #[test]
    fn objective_is_monotone_over_accepted_steps() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            // Rosenbrock-style ridge, maximized
            let a = 1.0 - x[0];
            let b = x[1] - x[0] * x[0];
            let v = -(a * a + 100.0 * b * b);
            Ok((
                v,
                vec![2.0 * a + 400.0 * x[0] * b, -200.0 * b],
            ))
        };
        let out = maximize(f, &[-1.2, 1.0], &OptimizerSettings::default(), None).unwrap();
        let mut last = f64::NEG_INFINITY;
        for rec in &out.iterations {
            assert!(rec.objective >= last - 1e-12);
            last = rec.objective;
        }
        assert!((out.x[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn respects_box_bounds() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((x[0], vec![1.0]))
        };
        let out = maximize(f, &[0.0], &OptimizerSettings::default(), Some(&[(-1.0, 2.0)])).unwrap();
        assert!((out.x[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn errors_on_non_finite_start() {
        let f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(maximize(f, &[0.0], &OptimizerSettings::default(), None).is_err());
    }

    #[test]
    fn stationary_start_stays_put() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((-(x[0] * x[0]), vec![-2.0 * x[0]]))
        };
        let out = maximize(f, &[0.0], &OptimizerSettings::default(), None).unwrap();
        assert!(out.x[0].abs() < 1e-12);
        assert!(out.converged);
    }
}
