//! Resumable descent with a backtracking line search.
//!
//! Directions come from a limited-memory quasi-Newton update and fall back to
//! the negative gradient whenever they fail to descend. All state lives in
//! [`DescentState`], so running `a` iterations and then `b` more is identical
//! to running `a + b` at once.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct DescentConfig {
    /// Relative objective change below which a run is declared converged.
    pub rel_tol: f64,
    /// Length of the first trial step along the negative gradient.
    pub initial_step: f64,
    /// Largest allowed change of any single parameter per iteration.
    pub max_step: f64,
    pub max_backtracks: usize,
    pub memory: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            initial_step: 0.1,
            max_step: 1.0,
            max_backtracks: 40,
            memory: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DescentState {
    pub params: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective values after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    history: VecDeque<(Vec<f64>, Vec<f64>)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DescentState {
    pub fn new<F>(params: Vec<f64>, objective: &mut F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (value, grad) = objective(&params)?;
        Ok(Self {
            params,
            value,
            grad,
            iterations: 0,
            converged: false,
            trace: vec![value],
            history: VecDeque::new(),
        })
    }

    /// Re-evaluates the current point under a changed objective and clears
    /// the curvature memory.
    pub fn reset<F>(&mut self, objective: &mut F) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (value, grad) = objective(&self.params)?;
        self.value = value;
        self.grad = grad;
        self.converged = false;
        self.history.clear();
        self.trace.push(value);
        Ok(())
    }

    fn direction(&self) -> Vec<f64> {
        let mut q: Vec<f64> = self.grad.iter().map(|g| -g).collect();
        if self.history.is_empty() {
            return q;
        }
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y) in self.history.iter().rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push((a, rho));
        }
        let (s, y) = self.history.back().unwrap();
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y), (a, rho)) in self.history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q
    }

    /// Runs up to `max_iters` iterations (fewer once converged). Returns the
    /// number of iterations performed.
    pub fn run<F>(&mut self, objective: &mut F, max_iters: usize, cfg: &DescentConfig) -> usize
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let mut done = 0;
        while done < max_iters && !self.converged {
            done += 1;
            self.iterations += 1;
            if !self.step(objective, cfg) {
                self.converged = true;
            }
        }
        done
    }

    /// One line-searched step. Returns false when no decrease was found.
    fn step<F>(&mut self, objective: &mut F, cfg: &DescentConfig) -> bool
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        if self.grad.iter().all(|g| *g == 0.0) {
            return false;
        }
        let mut use_memory = !self.history.is_empty();
        loop {
            let mut d = if use_memory {
                self.direction()
            } else {
                self.grad.iter().map(|g| -g).collect()
            };
            let mut slope = dot(&self.grad, &d);
            if !(slope < 0.0) || d.iter().any(|v| !v.is_finite()) {
                d = self.grad.iter().map(|g| -g).collect();
                slope = dot(&self.grad, &d);
                use_memory = false;
            }
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut t = if use_memory { 1.0 } else { cfg.initial_step / dmax.max(1.0) };
            if t * dmax > cfg.max_step {
                t = cfg.max_step / dmax;
            }
            for _ in 0..cfg.max_backtracks {
                let trial: Vec<f64> = self.params.iter().zip(&d).map(|(p, di)| p + t * di).collect();
                if let Ok((value, grad)) = objective(&trial) {
                    if value.is_finite()
                        && grad.iter().all(|g| g.is_finite())
                        && value <= self.value + 1e-4 * t * slope
                    {
                        let s: Vec<f64> = trial.iter().zip(&self.params).map(|(a, b)| a - b).collect();
                        let y: Vec<f64> = grad.iter().zip(&self.grad).map(|(a, b)| a - b).collect();
                        if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                            self.history.push_back((s, y));
                            if self.history.len() > cfg.memory {
                                self.history.pop_front();
                            }
                        }
                        let change = (self.value - value).abs();
                        self.converged = change <= cfg.rel_tol * self.value.abs().max(1.0);
                        self.params = trial;
                        self.value = value;
                        self.grad = grad;
                        self.trace.push(value);
                        return true;
                    }
                }
                t *= 0.5;
            }
            if use_memory {
                self.history.clear();
                use_memory = false;
            } else {
                return false;
            }
        }
    }
}
