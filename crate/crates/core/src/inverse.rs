//! Inverse problems: synthetic observations, the data-misfit loss, and the
//! optimization loop that fits a coefficient field through the solvers.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{cavity_viscosity, Experiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fem::{Component, DirichletSpec, NodalField, StructuredGrid};
use crate::field::{clamp_positive, init_params, ClampMonitor, FieldModel, Variant, POSITIVITY_FLOOR};
use crate::optimize::{lbfgs_optimize, Bounds, StepInfo, Termination};
use crate::solver::{
    cavity_dirichlet, heat_solve, newton_solve, transport_integrate, uniform_temperature_dirichlet, NewtonConfig,
};
use crate::tape::{finite_difference_check, GradCheck, NodeId, Tape, Tensor};

/// Sampled nodal data: `values[c][i]` is component `components[c]` at `nodes[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub nodes: Vec<usize>,
    pub components: Vec<Component>,
    pub values: Vec<Vec<f64>>,
    pub noise_epsilon: f64,
    pub seed: u64,
}

/// Samples `n_points` distinct nodes without replacement. Asking for every
/// node returns them in order.
pub fn make_observations(
    grid: &StructuredGrid,
    reference: &[(Component, Vec<f64>)],
    n_points: usize,
    seed: u64,
) -> Result<ObservationSet> {
    let n = grid.node_count();
    if n_points > n {
        return Err(Error::contract(format!("{n_points} observations requested from {n} nodes")));
    }
    if let Some((c, _)) = reference.iter().find(|(_, v)| v.len() != n) {
        return Err(Error::contract(format!("reference {} is not a nodal field", c.as_str())));
    }
    let nodes = if n_points == n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = sample(&mut rng, n, n_points).into_vec();
        nodes.sort_unstable();
        nodes
    };
    let values: Vec<Vec<f64>> = reference
        .iter()
        .map(|(_, field)| nodes.iter().map(|&i| field[i]).collect())
        .collect();
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::contract("reference fields contain non-finite values"));
    }
    Ok(ObservationSet {
        nodes,
        components: reference.iter().map(|(c, _)| *c).collect(),
        values,
        noise_epsilon: 0.0,
        seed,
    })
}

impl ObservationSet {
    /// Multiplies every value by `1 + η` with `η ~ U[-ε, ε]` drawn independently.
    pub fn add_noise(&self, epsilon: f64, seed: u64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::contract(format!("noise level must be non-negative, got {epsilon}")));
        }
        let mut out = self.clone();
        out.noise_epsilon = epsilon;
        if epsilon == 0.0 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        for v in out.values.iter_mut().flatten() {
            *v *= 1.0 + rng.gen_range(-epsilon..=epsilon);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.nodes.len() * self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `Σ (pred - obs)²` over every observed component and node.
pub fn compute_loss(tape: &mut Tape, predictions: &[(Component, NodeId)], obs: &ObservationSet) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(obs.components.len());
    for (c, values) in obs.components.iter().zip(&obs.values) {
        let &(_, field) = predictions
            .iter()
            .find(|(p, _)| p == c)
            .ok_or_else(|| Error::contract(format!("no prediction for observed component {}", c.as_str())))?;
        if let Some(&bad) = obs.nodes.iter().find(|&&n| n >= tape.value(field).len()) {
            return Err(Error::contract(format!("observed node {bad} outside the predicted field")));
        }
        let pred = tape.gather(field, obs.nodes.clone())?;
        let data = tape.constant(Tensor::vector(values.clone()));
        parts.push(tape.sub(pred, data)?);
    }
    let r = tape.concat(&parts)?;
    tape.dot(r, r)
}

/// `100 Σ(est - ref)² / Σ ref²`
pub fn relative_mse_values(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::contract("estimate and reference differ in length"));
    }
    let denom: f64 = reference.iter().map(|r| r * r).sum();
    if denom == 0.0 {
        return Err(Error::contract("reference field is identically zero"));
    }
    let num: f64 = estimate.iter().zip(reference).map(|(e, r)| (e - r).powi(2)).sum();
    Ok(100.0 * num / denom)
}

pub fn relative_mse(estimate: &NodalField, reference: &NodalField) -> Result<f64> {
    if estimate.grid() != reference.grid() {
        return Err(Error::contract("fields live on different grids"));
    }
    relative_mse_values(estimate.values(), reference.values())
}

/// Relative errors of the flow re-solved with the estimated viscosity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowErrors {
    pub u: f64,
    pub v: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub experiment: Experiment,
    pub variant: Variant,
    pub loss_history: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub termination: Termination,
    pub evaluations: usize,
    pub relative_mse_percent: f64,
    /// Newton iterations of the forward solve at every accepted step.
    pub newton_iters: Vec<usize>,
    /// Nodes held at the positivity floor in the final estimate.
    pub clamped_nodes: usize,
    pub flow_relative_mse_percent: Option<FlowErrors>,
    pub noise_epsilon: f64,
    pub observation_count: usize,
    pub model_seed: u64,
    pub observation_seed: u64,
    pub wall_clock_seconds: f64,
    pub config_echo: serde_json::Value,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Velocity and pressure of the true flow and of the flow re-solved with the estimate.
#[derive(Clone, Debug)]
pub struct FlowComparison {
    pub reference: [NodalField; 3],
    pub estimate: [NodalField; 3],
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub reference: NodalField,
    pub estimate: NodalField,
    pub model: FieldModel,
    pub flow: Option<FlowComparison>,
}

/// Per-step progress of a run.
#[derive(Clone, Debug, Serialize)]
pub struct Progress {
    pub step: usize,
    pub loss: f64,
    pub projected_gradient_norm: f64,
    pub newton_iterations: usize,
    pub newton_residuals: Vec<f64>,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Spot-check the gradient at every accepted step (3 coordinates, 1e-4).
    pub debug_gradcheck: bool,
    pub progress: Option<&'a mut dyn FnMut(&Progress)>,
}

pub const DEBUG_GRADCHECK_TOL: f64 = 1e-4;

/// Loss and gradient at one parameter vector.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub newton_iterations: usize,
    pub newton_residuals: Vec<f64>,
    pub clamped: usize,
}

/// Forward model, observations and boundary data of one configured experiment.
#[derive(Clone, Debug)]
pub struct Problem {
    pub config: ExperimentConfig,
    pub grid: StructuredGrid,
    pub reference: NodalField,
    pub observations: ObservationSet,
    newton: NewtonConfig,
    ns_bc: DirichletSpec,
    heat_bc: DirichletSpec,
    /// Fixed flow of the heat experiment.
    flow: Option<FixedFlow>,
}

#[derive(Clone, Debug)]
struct FixedFlow {
    u: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    residuals: Vec<f64>,
}

/// Every simulated nodal field for one coefficient, with the Newton
/// residual history of the flow solve behind them.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub fields: Vec<(Component, Vec<f64>)>,
    pub newton_residuals: Vec<f64>,
}

struct Forward {
    predictions: Vec<(Component, NodeId)>,
    newton_iterations: usize,
    newton_residuals: Vec<f64>,
}

impl Problem {
    /// Validates the configuration, runs the reference simulation and
    /// samples noisy observations. Sweeps must be split beforehand.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let levels = config.noise_levels();
        let [epsilon] = levels[..] else {
            return Err(Error::Config("a single run needs exactly one noise level".into()));
        };
        let grid = StructuredGrid::new(config.grid.nx, config.grid.ny)?;
        let name = config.name();
        let reference = NodalField::from_fn(&grid, |x, y| name.reference_coefficient(x, y));
        let mut problem = Self {
            config: config.clone(),
            ns_bc: cavity_dirichlet(&grid, config.boundary.lid_velocity)?,
            heat_bc: uniform_temperature_dirichlet(&grid, config.boundary.temperature)?,
            newton: config.solver.newton(),
            grid,
            reference,
            observations: ObservationSet {
                nodes: vec![],
                components: vec![],
                values: vec![],
                noise_epsilon: 0.0,
                seed: 0,
            },
            flow: None,
        };
        if name == Experiment::ConjugateHeat {
            let nu = NodalField::from_fn(&problem.grid, cavity_viscosity);
            let mut tape = Tape::new();
            let nu = tape.constant(Tensor::vector(nu.into_values()));
            let ns = newton_solve(&mut tape, &problem.grid, nu, &config.physics, &problem.ns_bc, &problem.newton)?;
            let values = |n: NodeId| tape.value(n).data().to_vec();
            problem.flow = Some(FixedFlow {
                u: values(ns.u),
                v: values(ns.v),
                p: values(ns.p),
                residuals: ns.residual_history,
            });
        }
        let truth = problem.simulate(problem.reference.values())?;
        let wanted = name.observed_components();
        let truth: Vec<(Component, Vec<f64>)> = truth.into_iter().filter(|(c, _)| wanted.contains(c)).collect();
        let seed = config.observations.seed;
        problem.observations =
            make_observations(&problem.grid, &truth, config.observation_count(), seed)?.add_noise(epsilon, seed)?;
        Ok(problem)
    }

    fn forward(&self, tape: &mut Tape, coef: NodeId) -> Result<Forward> {
        let c = &self.config;
        let (predictions, ns) = match c.name() {
            Experiment::CavityViscosity => {
                let ns = newton_solve(tape, &self.grid, coef, &c.physics, &self.ns_bc, &self.newton)?;
                (vec![(Component::U, ns.u), (Component::V, ns.v), (Component::P, ns.p)], Some(ns))
            }
            Experiment::ConjugateHeat => {
                let flow = self.flow.as_ref().expect("flow solved at construction");
                let u = tape.constant(Tensor::vector(flow.u.clone()));
                let v = tape.constant(Tensor::vector(flow.v.clone()));
                let p = tape.constant(Tensor::vector(flow.p.clone()));
                let t = heat_solve(tape, &self.grid, u, v, coef, &c.physics, &self.heat_bc)?;
                (
                    vec![(Component::U, u), (Component::V, v), (Component::P, p), (Component::T, t)],
                    None,
                )
            }
            Experiment::PassiveTransport => {
                let ns = newton_solve(tape, &self.grid, coef, &c.physics, &self.ns_bc, &self.newton)?;
                let zero = tape.constant(Tensor::vector(vec![0.0; self.grid.node_count()]));
                let w = transport_integrate(tape, &ns, &c.physics, [zero, zero], c.solver.dt, c.solver.n_steps)?;
                (
                    vec![
                        (Component::U, ns.u),
                        (Component::V, ns.v),
                        (Component::P, ns.p),
                        (Component::W1, w.final_w1()),
                        (Component::W2, w.final_w2()),
                    ],
                    Some(ns),
                )
            }
        };
        Ok(Forward {
            predictions,
            newton_iterations: ns.as_ref().map_or(0, |s| s.newton_iterations),
            newton_residuals: ns.map_or_else(Vec::new, |s| s.residual_history),
        })
    }

    /// Every simulated nodal field for a given coefficient field.
    pub fn simulate(&self, coef: &[f64]) -> Result<Vec<(Component, Vec<f64>)>> {
        Ok(self.simulate_traced(coef)?.fields)
    }

    pub fn simulate_traced(&self, coef: &[f64]) -> Result<Simulation> {
        if coef.len() != self.grid.node_count() {
            return Err(Error::contract("coefficient is not a nodal field on this grid"));
        }
        let mut tape = Tape::new();
        let coef = tape.constant(Tensor::vector(coef.to_vec()));
        let fwd = self.forward(&mut tape, coef)?;
        let newton_residuals = match &self.flow {
            Some(flow) => flow.residuals.clone(),
            None => fwd.newton_residuals,
        };
        Ok(Simulation {
            fields: fwd
                .predictions
                .into_iter()
                .map(|(c, n)| (c, tape.value(n).data().to_vec()))
                .collect(),
            newton_residuals,
        })
    }

    /// Data misfit of a fixed coefficient field.
    pub fn loss_for_field(&self, coef: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let coef = tape.constant(Tensor::vector(coef.to_vec()));
        let fwd = self.forward(&mut tape, coef)?;
        let loss = compute_loss(&mut tape, &fwd.predictions, &self.observations)?;
        Ok(tape.value(loss).item())
    }

    /// The untrained field model this configuration starts from.
    pub fn initial_model(&self) -> FieldModel {
        init_params(
            self.config.variant(),
            self.config.model.seed,
            self.config.init_scale(),
            self.config.transform(),
            self.grid.node_count(),
        )
    }

    pub fn bounds(&self, model: &FieldModel) -> Bounds {
        match model.variant {
            Variant::Pointwise => Bounds::lower(model.param_count(), POSITIVITY_FLOOR),
            _ => Bounds::none(model.param_count()),
        }
    }

    /// Loss and reverse-mode gradient through the model, the floor and the solvers.
    pub fn evaluate(&self, model: &FieldModel, theta: &[f64]) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let params = tape.variable(Tensor::vector(theta.to_vec()));
        let field = model.eval_on_grid(&mut tape, params, &self.grid)?;
        let (coef, clamped) = clamp_positive(&mut tape, field)?;
        let fwd = self.forward(&mut tape, coef)?;
        let loss = compute_loss(&mut tape, &fwd.predictions, &self.observations)?;
        let grads = tape.backward(loss)?;
        Ok(Evaluation {
            loss: tape.value(loss).item(),
            grad: grads.get(params).expect("parameters are a variable").data().to_vec(),
            newton_iterations: fwd.newton_iterations,
            newton_residuals: fwd.newton_residuals,
            clamped,
        })
    }

    /// Central differences against the reverse-mode gradient at the given coordinates.
    pub fn gradcheck(&self, model: &FieldModel, theta: &[f64], indices: &[usize], step: f64) -> Result<GradCheck> {
        finite_difference_check(
            |t: &[f64]| self.evaluate(model, t).map(|e| (e.loss, e.grad)),
            theta,
            step,
            Some(indices),
        )
    }

    /// Nodal coefficient of a model, after the positivity floor.
    pub fn coefficient(&self, model: &FieldModel) -> Result<NodalField> {
        let values = model
            .field_values(&self.grid)?
            .into_iter()
            .map(|v| v.max(POSITIVITY_FLOOR))
            .collect();
        NodalField::new(&self.grid, values)
    }

    pub fn run(&self) -> Result<RunOutput> {
        self.run_with(RunOptions::default())
    }

    pub fn run_with(&self, mut options: RunOptions) -> Result<RunOutput> {
        let start = Instant::now();
        let mut model = self.initial_model();
        let n_nodes = self.grid.node_count();
        let recent: RefCell<VecDeque<(Vec<f64>, Evaluation)>> = RefCell::new(VecDeque::new());
        let objective = |theta: &[f64]| {
            let e = self.evaluate(&model, theta)?;
            let mut r = recent.borrow_mut();
            if r.len() == 64 {
                r.pop_front();
            }
            r.push_back((theta.to_vec(), e.clone()));
            Ok((e.loss, e.grad))
        };
        let mut monitor = ClampMonitor::default();
        let mut newton_iters = Vec::new();
        let mut check_rng = ChaCha8Rng::seed_from_u64(self.config.model.seed);
        check_rng.set_stream(2);
        let on_step = |info: &StepInfo| {
            let eval = recent
                .borrow()
                .iter()
                .rev()
                .find(|(x, _)| x.as_slice() == info.x)
                .map(|(_, e)| e.clone())
                .ok_or_else(|| Error::Graph("accepted point was never evaluated".into()))?;
            monitor.record(eval.clamped, n_nodes)?;
            newton_iters.push(eval.newton_iterations);
            if let Some(cb) = options.progress.as_mut() {
                cb(&Progress {
                    step: info.step,
                    loss: info.loss,
                    projected_gradient_norm: info.projected_gradient_norm,
                    newton_iterations: eval.newton_iterations,
                    newton_residuals: eval.newton_residuals.clone(),
                });
            }
            if options.debug_gradcheck {
                let n = info.x.len();
                let indices = sample(&mut check_rng, n, n.min(3)).into_vec();
                let check = self.gradcheck(&model, info.x, &indices, crate::tape::DEFAULT_FD_STEP)?;
                if !(check.max_rel_error < DEBUG_GRADCHECK_TOL) {
                    return Err(Error::GradientCheck {
                        max_rel_error: check.max_rel_error,
                        tolerance: DEBUG_GRADCHECK_TOL,
                    });
                }
            }
            Ok(())
        };
        let result = lbfgs_optimize(objective, &model.params, &self.bounds(&model), &self.config.optimizer, on_step)?;
        model.params = result.x.clone();

        let estimate = self.coefficient(&model)?;
        let clamped_nodes = model
            .field_values(&self.grid)?
            .iter()
            .filter(|&&v| v < POSITIVITY_FLOOR)
            .count();
        let relative_mse_percent = relative_mse(&estimate, &self.reference)?;
        let flow = match self.config.name() {
            Experiment::CavityViscosity => Some(self.compare_flow(estimate.values())?),
            _ => None,
        };
        let flow_errors = flow
            .as_ref()
            .map(|f| -> Result<FlowErrors> {
                Ok(FlowErrors {
                    u: relative_mse(&f.estimate[0], &f.reference[0])?,
                    v: relative_mse(&f.estimate[1], &f.reference[1])?,
                    p: relative_mse(&f.estimate[2], &f.reference[2])?,
                })
            })
            .transpose()?;
        let report = RunReport {
            experiment: self.config.name(),
            variant: model.variant,
            initial_loss: result.initial_loss,
            final_loss: result.loss,
            steps: result.steps(),
            termination: result.termination,
            evaluations: result.evaluations,
            loss_history: result.loss_history,
            relative_mse_percent,
            newton_iters,
            clamped_nodes,
            flow_relative_mse_percent: flow_errors,
            noise_epsilon: self.observations.noise_epsilon,
            observation_count: self.observations.nodes.len(),
            model_seed: self.config.model.seed,
            observation_seed: self.config.observations.seed,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            config_echo: serde_json::to_value(&self.config).expect("config serializes"),
        };
        Ok(RunOutput {
            report,
            reference: self.reference.clone(),
            estimate,
            model,
            flow,
        })
    }

    /// Re-solves the flow with `coef` and with the reference coefficient.
    pub fn compare_flow(&self, coef: &[f64]) -> Result<FlowComparison> {
        let pick = |fields: Vec<(Component, Vec<f64>)>| -> Result<[NodalField; 3]> {
            let get = |c: Component| {
                let v = fields.iter().find(|(k, _)| *k == c).map(|(_, v)| v.clone());
                NodalField::new(&self.grid, v.ok_or_else(|| Error::contract("experiment has no flow field"))?)
            };
            Ok([get(Component::U)?, get(Component::V)?, get(Component::P)?])
        };
        Ok(FlowComparison {
            reference: pick(self.simulate(self.reference.values())?)?,
            estimate: pick(self.simulate(coef)?)?,
        })
    }
}

/// Builds the problem for `config` and fits the coefficient field.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    Problem::new(config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(experiment: Experiment) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(experiment);
        c.grid.nx = 6;
        c.grid.ny = 6;
        c.observations.count = Some(match experiment {
            Experiment::CavityViscosity => 36,
            _ => 12,
        });
        c
    }

    #[test]
    fn observations_cover_all_nodes_in_order() {
        let grid = StructuredGrid::new(4, 4).unwrap();
        let field: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let obs = make_observations(&grid, &[(Component::U, field.clone())], 16, 9).unwrap();
        assert_eq!(obs.nodes, (0..16).collect::<Vec<_>>());
        assert_eq!(obs.values[0], field);
        assert!(make_observations(&grid, &[(Component::U, field)], 17, 9).is_err());
    }

    #[test]
    fn sampled_observations_are_distinct_and_seeded() {
        let grid = StructuredGrid::new(21, 21).unwrap();
        let field = vec![1.0; 441];
        let a = make_observations(&grid, &[(Component::T, field.clone())], 40, 5).unwrap();
        let b = make_observations(&grid, &[(Component::T, field.clone())], 40, 5).unwrap();
        assert_eq!(a, b);
        let mut nodes = a.nodes.clone();
        nodes.dedup();
        assert_eq!(nodes.len(), 40);
        assert!(nodes.iter().all(|&n| n < 441));
    }

    #[test]
    fn noise_is_bounded_and_reproducible() {
        let grid = StructuredGrid::new(6, 6).unwrap();
        let field: Vec<f64> = (0..36).map(|i| 1.0 + i as f64).collect();
        let obs = make_observations(&grid, &[(Component::U, field)], 36, 0).unwrap();
        assert_eq!(obs.add_noise(0.0, 1).unwrap().values, obs.values);
        let noisy = obs.add_noise(0.05, 1).unwrap();
        for (a, b) in noisy.values[0].iter().zip(&obs.values[0]) {
            assert!((a / b - 1.0).abs() <= 0.05);
        }
        assert_eq!(noisy, obs.add_noise(0.05, 1).unwrap());
        assert_ne!(noisy.values, obs.values);
        assert!(obs.add_noise(-0.1, 1).is_err());
    }

    #[test]
    fn loss_examples() {
        let grid = StructuredGrid::new(2, 2).unwrap();
        let obs = make_observations(&grid, &[(Component::T, vec![1.0, 2.0, 3.0, 4.0])], 4, 0).unwrap();
        let mut tape = Tape::new();
        let same = tape.variable(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let l = compute_loss(&mut tape, &[(Component::T, same)], &obs).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let off = tape.variable(Tensor::vector(vec![3.0, 2.0, 3.0, 4.0]));
        let l = compute_loss(&mut tape, &[(Component::T, off)], &obs).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(off).unwrap().data(), &[4.0, 0.0, 0.0, 0.0]);

        assert!(compute_loss(&mut tape, &[(Component::U, off)], &obs).is_err());
    }

    #[test]
    fn relative_mse_examples() {
        let r = vec![1.0, -2.0, 3.0];
        assert_eq!(relative_mse_values(&r, &r).unwrap(), 0.0);
        assert_eq!(relative_mse_values(&[0.0; 3], &r).unwrap(), 100.0);
        let scaled: Vec<f64> = r.iter().map(|v| 1.1 * v).collect();
        assert!((relative_mse_values(&scaled, &r).unwrap() - 1.0).abs() < 1e-12);
        assert!(relative_mse_values(&r, &[0.0; 3]).is_err());
    }

    #[test]
    fn reference_field_has_zero_loss() {
        for e in [Experiment::CavityViscosity, Experiment::ConjugateHeat, Experiment::PassiveTransport] {
            let p = Problem::new(&small(e)).unwrap();
            let loss = p.loss_for_field(p.reference.values()).unwrap();
            assert!(loss < 1e-24, "{e}: {loss}");
            assert_eq!(relative_mse(&p.reference, &p.reference).unwrap(), 0.0);
        }
    }

    #[test]
    fn full_chain_gradients_match_fd() {
        for e in [Experiment::CavityViscosity, Experiment::ConjugateHeat, Experiment::PassiveTransport] {
            let p = Problem::new(&small(e)).unwrap();
            let model = p.initial_model();
            let check = p.gradcheck(&model, &model.params, &[0, 17, 100, 400, 460], 1e-5).unwrap();
            assert!(check.max_rel_error < 1e-5, "{e}: {check:?}");
        }
    }

    #[test]
    fn pointwise_fit_interpolates_noise_free_data() {
        let mut c = small(Experiment::CavityViscosity);
        c.model.variant = Some(Variant::Pointwise);
        c.optimizer.max_steps = 1000;
        let out = Problem::new(&c).unwrap().run().unwrap();
        assert!(out.report.final_loss < 1e-8, "{:?} {:?} {} {:?}", out.report.final_loss, out.report.termination, out.report.steps, &out.report.loss_history[out.report.steps.saturating_sub(5)..]);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut c = small(Experiment::ConjugateHeat);
        c.optimizer.max_steps = 5;
        c.observations.noise = crate::config::NoiseLevels::Single(0.01);
        let a = run_experiment(&c).unwrap().report;
        let b = run_experiment(&c).unwrap().report;
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.relative_mse_percent, b.relative_mse_percent);
        let history = &a.loss_history;
        assert!(history.windows(2).all(|w| w[1] <= w[0]));
        assert!(history[0] <= a.initial_loss);
    }
}
