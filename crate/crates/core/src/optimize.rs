//! Limited-memory BFGS with simple bounds handled by projection, and a
//! strong-Wolfe line search that tolerates failed forward solves.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_steps: usize,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    /// Stop when the projected gradient's ∞-norm falls below this.
    pub pg_tol: f64,
    /// Stop when `|Δf| / max(|f_old|, |f_new|)` falls below this.
    pub rel_loss_tol: f64,
    /// Consecutive failed trial points tolerated inside one line search.
    pub max_rejections: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_steps: 100,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            pg_tol: 1e-10,
            rel_loss_tol: 1e-12,
            max_rejections: 20,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config(format!(
                "line search needs 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.memory == 0 {
            return Err(Error::Config("L-BFGS memory must be at least 1".into()));
        }
        if self.max_rejections == 0 {
            return Err(Error::Config("max_rejections must be at least 1".into()));
        }
        if !(self.pg_tol >= 0.0 && self.rel_loss_tol >= 0.0) {
            return Err(Error::Config("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Box constraints `lower ≤ x ≤ upper`; infinite entries mean unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn none(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn lower(n: usize, value: f64) -> Self {
        Self {
            lower: vec![value; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::contract("bounds do not match the parameter count"));
        }
        if let Some(i) = (0..n).find(|&i| !(self.lower[i] <= self.upper[i])) {
            return Err(Error::contract(format!("empty bound interval at index {i}")));
        }
        Ok(())
    }

    fn project(&self, x: &mut [f64]) {
        for ((x, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(*l, *u);
        }
    }

    /// `x - P(x - g)`: zero exactly where the gradient pushes against an active bound.
    fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| x[i] - (x[i] - g[i]).clamp(self.lower[i], self.upper[i]))
            .collect()
    }

    fn active(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        (0..x.len())
            .map(|i| (x[i] <= self.lower[i] && g[i] > 0.0) || (x[i] >= self.upper[i] && g[i] < 0.0))
            .collect()
    }

    /// Largest step along `d` that stays inside the box.
    fn max_step(&self, x: &[f64], d: &[f64]) -> f64 {
        let mut alpha = f64::INFINITY;
        for i in 0..x.len() {
            if d[i] < 0.0 && self.lower[i].is_finite() {
                alpha = alpha.min((self.lower[i] - x[i]) / d[i]);
            } else if d[i] > 0.0 && self.upper[i].is_finite() {
                alpha = alpha.min((self.upper[i] - x[i]) / d[i]);
            }
        }
        alpha.max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ProjectedGradient,
    LossChange,
    MaxSteps,
}

/// Reported after every accepted step.
#[derive(Clone, Debug)]
pub struct StepInfo<'a> {
    pub step: usize,
    pub loss: f64,
    pub x: &'a [f64],
    pub projected_gradient_norm: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub x: Vec<f64>,
    pub loss: f64,
    pub initial_loss: f64,
    /// Loss after each accepted step.
    pub loss_history: Vec<f64>,
    pub evaluations: usize,
    pub termination: Termination,
}

impl OptimizeResult {
    pub fn steps(&self) -> usize {
        self.loss_history.len()
    }
}

/// Failures that reject a trial point instead of aborting the run.
fn is_rejectable(e: &Error) -> bool {
    matches!(e, Error::NonConvergence { .. } | Error::Singular { .. } | Error::Numeric { .. })
}

struct Point {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    bounds: &'a Bounds,
    x0: &'a [f64],
    d: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    max_rejections: usize,
    rejections: usize,
    evaluations: usize,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    /// `None` when the forward model failed at this step length.
    fn eval(&mut self, alpha: f64) -> Result<Option<Point>> {
        let mut x: Vec<f64> = self.x0.iter().zip(self.d).map(|(x, d)| x + alpha * d).collect();
        self.bounds.project(&mut x);
        self.evaluations += 1;
        match (self.f)(&x) {
            Ok((f, g)) if f.is_finite() => {
                self.rejections = 0;
                let slope = g.iter().zip(self.d).map(|(g, d)| g * d).sum();
                Ok(Some(Point { alpha, x, f, g, slope }))
            }
            Ok(_) => self.reject(alpha, "non-finite loss".into()),
            Err(e) if is_rejectable(&e) => self.reject(alpha, e.to_string()),
            Err(e) => Err(e),
        }
    }

    fn reject(&mut self, alpha: f64, why: String) -> Result<Option<Point>> {
        self.rejections += 1;
        if self.rejections >= self.max_rejections {
            return Err(Error::LineSearch(format!(
                "{} consecutive trial points failed; last at step length {alpha:e}: {why}",
                self.rejections
            )));
        }
        Ok(None)
    }

    fn armijo(&self, p: &Point) -> bool {
        p.f <= self.f0 + self.c1 * p.alpha * self.slope0
    }

    fn curvature(&self, p: &Point) -> bool {
        p.slope.abs() <= -self.c2 * self.slope0
    }

    fn run(&mut self, alpha_init: f64, alpha_max: f64) -> Result<Point> {
        let mut prev = Point {
            alpha: 0.0,
            x: self.x0.to_vec(),
            f: self.f0,
            g: Vec::new(),
            slope: self.slope0,
        };
        let mut alpha = alpha_init.min(alpha_max);
        for i in 0..60 {
            let Some(p) = self.eval(alpha)? else {
                alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
                continue;
            };
            if !self.armijo(&p) || (i > 0 && p.f >= prev.f) {
                return self.zoom(prev, p);
            }
            if self.curvature(&p) {
                return Ok(p);
            }
            if p.slope >= 0.0 {
                return self.zoom(p, prev);
            }
            if alpha >= alpha_max {
                return Ok(p);
            }
            alpha = (2.0 * alpha).min(alpha_max);
            prev = p;
        }
        if prev.alpha > 0.0 {
            return Ok(prev);
        }
        Err(Error::LineSearch("no acceptable step length found".into()))
    }

    /// `lo` satisfies Armijo and has the lower loss; the minimizer lies between `lo` and `hi`.
    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Result<Point> {
        for _ in 0..40 {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            let width = b - a;
            if width <= 1e-14 * b.max(1.0) {
                break;
            }
            let mut alpha = quadratic_min(&lo, &hi).unwrap_or(0.5 * (a + b));
            alpha = alpha.clamp(a + 0.1 * width, b - 0.1 * width);
            let Some(p) = self.eval(alpha)? else {
                // Treat the failure as an infinitely bad point and shrink towards `lo`.
                hi = Point {
                    alpha,
                    x: Vec::new(),
                    f: f64::INFINITY,
                    g: Vec::new(),
                    slope: f64::NAN,
                };
                continue;
            };
            if !self.armijo(&p) || p.f >= lo.f {
                hi = p;
                continue;
            }
            if self.curvature(&p) {
                return Ok(p);
            }
            if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
        if lo.alpha > 0.0 {
            return Ok(lo);
        }
        Err(Error::LineSearch("step length interval collapsed without decrease".into()))
    }
}

/// Minimizer of the quadratic through `lo` (value and slope) and `hi` (value).
fn quadratic_min(lo: &Point, hi: &Point) -> Option<f64> {
    if !hi.f.is_finite() {
        return None;
    }
    let h = hi.alpha - lo.alpha;
    let curv = (hi.f - lo.f - lo.slope * h) / (h * h);
    if curv <= 0.0 || !curv.is_finite() {
        return None;
    }
    Some(lo.alpha - lo.slope / (2.0 * curv))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Two-loop recursion applied to `q`, restricted to the free variables.
fn two_loop(memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, mut q: Vec<f64>, free: &[bool]) -> Vec<f64> {
    let mask = |v: &mut Vec<f64>| {
        for (x, &f) in v.iter_mut().zip(free) {
            if !f {
                *x = 0.0;
            }
        }
    };
    mask(&mut q);
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(q, y)| *q -= a * y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|q| *q *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(q, s)| *q += (a - b) * s);
    }
    mask(&mut q);
    q
}

/// Minimizes `f` from `x0` inside `bounds`. `f` returns the loss and its
/// gradient; `on_step` sees every accepted iterate and may abort the run.
pub fn lbfgs_optimize<F, C>(
    mut f: F,
    x0: &[f64],
    bounds: &Bounds,
    config: &OptimizerConfig,
    mut on_step: C,
) -> Result<OptimizeResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    C: FnMut(&StepInfo) -> Result<()>,
{
    config.validate()?;
    let n = x0.len();
    bounds.validate(n)?;
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::Numeric {
            op: "objective".into(),
            detail: format!("initial loss is {fx}"),
        });
    }
    if g.len() != n {
        return Err(Error::contract("gradient length does not match the parameters"));
    }
    let initial_loss = fx;
    let mut evaluations = 1;
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);
    let mut history = Vec::new();
    let mut termination = Termination::MaxSteps;

    let mut pg = bounds.projected_gradient(&x, &g);
    if inf_norm(&pg) < config.pg_tol {
        termination = Termination::ProjectedGradient;
    }
    while termination == Termination::MaxSteps && history.len() < config.max_steps {
        let free: Vec<bool> = bounds.active(&x, &g).iter().map(|a| !a).collect();
        let mut d: Vec<f64> = two_loop(&memory, g.clone(), &free).iter().map(|v| -v).collect();
        if !(dot(&d, &g) < 0.0) {
            memory.clear();
            d = pg.iter().map(|v| -v).collect();
        }
        let alpha_max = bounds.max_step(&x, &d);
        let alpha_init = if memory.is_empty() {
            (1.0 / inf_norm(&d)).min(1.0)
        } else {
            1.0
        };
        let mut ls = LineSearch {
            f: &mut f,
            bounds,
            x0: &x,
            d: &d,
            f0: fx,
            slope0: dot(&g, &d),
            c1: config.c1,
            c2: config.c2,
            max_rejections: config.max_rejections,
            rejections: 0,
            evaluations: 0,
        };
        let result = ls.run(alpha_init, alpha_max);
        evaluations += ls.evaluations;
        let p = result?;

        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if memory.len() == config.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let f_old = fx;
        x = p.x;
        fx = p.f;
        g = p.g;
        pg = bounds.projected_gradient(&x, &g);
        history.push(fx);
        let pg_norm = inf_norm(&pg);
        on_step(&StepInfo {
            step: history.len(),
            loss: fx,
            x: &x,
            projected_gradient_norm: pg_norm,
        })?;
        if pg_norm < config.pg_tol {
            termination = Termination::ProjectedGradient;
        } else if (f_old - fx).abs() <= config.rel_loss_tol * f_old.abs().max(fx.abs()) {
            termination = Termination::LossChange;
        }
    }
    Ok(OptimizeResult {
        x,
        loss: fx,
        initial_loss,
        loss_history: history,
        evaluations,
        termination,
    })
}
