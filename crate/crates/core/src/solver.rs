//! Forward simulations recorded on the tape: steady incompressible
//! Navier-Stokes by Newton's method, steady advection-diffusion of
//! temperature, and relaxation of passive-particle velocities.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{
    apply_dirichlet, assemble_advection_diffusion, assemble_convection_blocks, assemble_diffusion_block,
    assemble_grad_div_blocks, Boundary, Component, DirichletSpec, DofLayout, StructuredGrid,
};
use crate::sparse::{solve_differentiable, spmv_differentiable, BlockSum, CsrMatrix, Placement, SparseBlock, SparsityPattern};
use crate::tape::{expect_inputs, NodeId, Op, Tape, Tensor};

/// A right-hand-side field given either as one value or per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Constant(f64),
    Nodal(Vec<f64>),
}

impl Default for Source {
    fn default() -> Self {
        Source::Constant(0.0)
    }
}

impl Source {
    pub fn nodal(&self, grid: &StructuredGrid) -> Result<Vec<f64>> {
        match self {
            Source::Constant(c) => Ok(vec![*c; grid.node_count()]),
            Source::Nodal(v) if v.len() == grid.node_count() => Ok(v.clone()),
            Source::Nodal(v) => Err(Error::contract(format!(
                "source has {} values, grid has {} nodes",
                v.len(),
                grid.node_count()
            ))),
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            Source::Constant(c) => *c == 0.0,
            Source::Nodal(v) => v.iter().all(|&x| x == 0.0),
        }
    }

    /// `M s`: the load vector of the source against every test function.
    fn load(&self, grid: &StructuredGrid) -> Result<Vec<f64>> {
        grid.mass_matrix().spmv(&self.nodal(grid)?)
    }
}

/// Form of the pressure stabilization added to the continuity equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stabilization {
    /// `β h² (∇p, ∇q)`
    #[default]
    Fixed,
    /// `β h² (ν⁻¹ ∇p, ∇q)`: keeps the Stokes velocity independent of the viscosity scale.
    ViscosityScaled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConstants {
    pub rho: f64,
    pub cp: f64,
    pub body_force_f: Source,
    pub body_force_g: Source,
    pub heat_source: Source,
    pub kappa1: f64,
    pub kappa2: f64,
    pub q1: f64,
    pub q2: f64,
    /// Pressure stabilization weight `β`.
    pub beta: f64,
    pub stabilization: Stabilization,
}

impl Default for PhysicsConstants {
    fn default() -> Self {
        Self {
            rho: 1.0,
            cp: 1.0,
            body_force_f: Source::Constant(0.0),
            body_force_g: Source::Constant(0.0),
            heat_source: Source::Constant(1.0),
            kappa1: 1.0,
            kappa2: 1.0,
            q1: 0.0,
            q2: 0.0,
            beta: 0.01,
            stabilization: Stabilization::Fixed,
        }
    }
}

impl PhysicsConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [("rho", self.rho), ("cp", self.cp), ("kappa1", self.kappa1), ("kappa2", self.kappa2)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.q1.is_finite() && self.q2.is_finite()) {
            return Err(Error::Config("particle accelerations must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    /// Stop once the ∞-norm of the residual drops below this.
    pub tol_residual: f64,
    pub max_iter: usize,
    /// Interleaved `[u, v, p]` start vector; `None` lifts the Dirichlet data
    /// onto an otherwise zero field.
    #[serde(skip)]
    pub initial_guess: Option<Vec<f64>>,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol_residual: 1e-8,
            max_iter: 10,
            initial_guess: None,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_residual > 0.0) {
            return Err(Error::Config(format!("tol_residual must be positive, got {}", self.tol_residual)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Velocity and pressure after a converged Newton solve.
#[derive(Clone, Debug)]
pub struct NSState {
    pub u: NodeId,
    pub v: NodeId,
    pub p: NodeId,
    /// Interleaved `[u, v, p]` per node.
    pub x: NodeId,
    pub newton_iterations: usize,
    pub final_residual_norm: f64,
    /// Residual ∞-norm at every iterate, starting with the initial guess.
    pub residual_history: Vec<f64>,
}

/// Lid-driven cavity data: `u = lid` on `y = 0` (corners included), no-slip
/// elsewhere, and the pressure pinned to zero at node 0.
pub fn cavity_dirichlet(grid: &StructuredGrid, lid: f64) -> Result<DirichletSpec> {
    let mut spec = DirichletSpec::new();
    let lid_nodes = grid.boundary_nodes(Boundary::Bottom);
    for n in grid.all_boundary_nodes() {
        let u = if lid_nodes.contains(&n) { lid } else { 0.0 };
        spec.push(n, Component::U, u)?;
        spec.push(n, Component::V, 0.0)?;
    }
    spec.push(0, Component::P, 0.0)?;
    Ok(spec)
}

/// The same value for `T` on every boundary node.
pub fn uniform_temperature_dirichlet(grid: &StructuredGrid, value: f64) -> Result<DirichletSpec> {
    let mut spec = DirichletSpec::new();
    for n in grid.all_boundary_nodes() {
        spec.push(n, Component::T, value)?;
    }
    Ok(spec)
}

fn ns_layout() -> DofLayout {
    DofLayout::new(vec![Component::U, Component::V, Component::P])
}

/// Everything about the coupled system that does not depend on the iterate.
struct NsSystem {
    grid: StructuredGrid,
    layout: DofLayout,
    pattern: Arc<SparsityPattern>,
    /// `place[r][c]`: where the scalar block coupling component `r` (row) to
    /// component `c` (column) lands in the coupled pattern.
    place: [[Arc<Vec<usize>>; 3]; 3],
    grad_x: NodeId,
    grad_y: NodeId,
    div_x: NodeId,
    div_y: NodeId,
    stab_weight: f64,
    stabilization: Stabilization,
    inv_rho: f64,
    load: NodeId,
    free_mask: NodeId,
    ones: NodeId,
    prescribed: Vec<Option<f64>>,
    zero_spec: DirichletSpec,
}

impl NsSystem {
    fn new(tape: &mut Tape, grid: &StructuredGrid, constants: &PhysicsConstants, bc: &DirichletSpec) -> Result<Self> {
        constants.validate()?;
        let layout = ns_layout();
        let scalar = grid.pattern();
        let n = grid.node_count();
        let pattern = Arc::new(SparsityPattern::from_entries(
            3 * n,
            3 * n,
            scalar
                .entries()
                .flat_map(|(a, b)| (0..3).flat_map(move |r| (0..3).map(move |c| (3 * a + r, 3 * b + c)))),
        )?);
        let place = [0, 1, 2].map(|r| {
            [0, 1, 2].map(|c| {
                let mut pos = Vec::with_capacity(scalar.nnz());
                for a in 0..n {
                    let start = scalar.row_range(a).start;
                    let row = pattern.row_range(3 * a + r).start;
                    for k in scalar.row_range(a) {
                        pos.push(row + 3 * (k - start) + c);
                    }
                }
                Arc::new(pos)
            })
        });

        let gd = assemble_grad_div_blocks(grid);
        let mut constant_block = |m: CsrMatrix| tape.constant(Tensor::vector(m.values().to_vec()));
        let (grad_x, grad_y, div_x, div_y) = (
            constant_block(gd.grad_x),
            constant_block(gd.grad_y),
            constant_block(gd.div_x),
            constant_block(gd.div_y),
        );
        let (hx, hy) = grid.spacing();

        let fx = constants.body_force_f.load(grid)?;
        let fy = constants.body_force_g.load(grid)?;
        let mut load = vec![0.0; 3 * n];
        for a in 0..n {
            load[3 * a] = fx[a];
            load[3 * a + 1] = fy[a];
        }
        let prescribed = bc.dof_values(&layout, 3 * n)?;
        for (dof, p) in prescribed.iter().enumerate() {
            if p.is_some() {
                load[dof] = 0.0;
            }
        }
        let load = tape.constant(Tensor::vector(load));
        let free_mask = tape.constant(Tensor::vector(
            prescribed.iter().map(|p| if p.is_some() { 0.0 } else { 1.0 }).collect(),
        ));
        let ones = tape.constant(Tensor::vector(vec![1.0; n]));
        let mut zero_spec = DirichletSpec::new();
        for &(node, c, _) in bc.entries() {
            zero_spec.push(node, c, 0.0)?;
        }
        Ok(Self {
            grid: grid.clone(),
            layout,
            pattern,
            place,
            grad_x,
            grad_y,
            div_x,
            div_y,
            stab_weight: constants.beta * hx * hy,
            stabilization: constants.stabilization,
            inv_rho: 1.0 / constants.rho,
            load,
            free_mask,
            ones,
            prescribed,
            zero_spec,
        })
    }

    fn placement(&self, r: usize, c: usize, weight: f64) -> Placement {
        Placement {
            positions: self.place[r][c].clone(),
            weight,
        }
    }

    /// Coupled matrix from weighted scalar blocks `(row, col, weight, values)`.
    fn combine(&self, tape: &mut Tape, parts: &[(usize, usize, f64, NodeId)]) -> Result<SparseBlock> {
        let placements = parts.iter().map(|&(r, c, w, _)| self.placement(r, c, w)).collect();
        let inputs: Vec<NodeId> = parts.iter().map(|p| p.3).collect();
        let values = tape.apply(BlockSum::new(self.pattern.nnz(), placements), &inputs)?;
        Ok(SparseBlock {
            pattern: self.pattern.clone(),
            values,
        })
    }

    fn split(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        let n = self.grid.node_count();
        let mut comp = |c: usize| tape.gather(x, (0..n).map(|a| 3 * a + c).collect());
        Ok((comp(0)?, comp(1)?, comp(2)?))
    }

    /// Residual at `x` (Dirichlet rows zeroed) and, if asked, the Jacobian.
    fn evaluate(&self, tape: &mut Tape, x: NodeId, nu: NodeId, jacobian: bool) -> Result<(NodeId, Option<SparseBlock>)> {
        let (u, v, _) = self.split(tape, x)?;
        let k = assemble_diffusion_block(tape, &self.grid, nu)?;
        let conv = assemble_convection_blocks(tape, &self.grid, u, v)?;
        let stab_coeff = match self.stabilization {
            Stabilization::Fixed => self.ones,
            Stabilization::ViscosityScaled => tape.recip(nu)?,
        };
        let stab = assemble_diffusion_block(tape, &self.grid, stab_coeff)?;
        let g = -self.inv_rho;
        let mut parts = vec![
            (0, 0, 1.0, conv.advection.values),
            (0, 0, 1.0, k.values),
            (1, 1, 1.0, conv.advection.values),
            (1, 1, 1.0, k.values),
            (0, 2, g, self.grad_x),
            (1, 2, g, self.grad_y),
            (2, 0, 1.0, self.div_x),
            (2, 1, 1.0, self.div_y),
            (2, 2, self.stab_weight, stab.values),
        ];
        let operator = self.combine(tape, &parts)?;
        let ax = spmv_differentiable(tape, &operator, x)?;
        let r = tape.sub(ax, self.load)?;
        let r = tape.mul(r, self.free_mask)?;
        if !jacobian {
            return Ok((r, None));
        }
        parts.extend([
            (0, 0, 1.0, conv.du_dx.values),
            (0, 1, 1.0, conv.du_dy.values),
            (1, 0, 1.0, conv.dv_dx.values),
            (1, 1, 1.0, conv.dv_dy.values),
        ]);
        let jac = self.combine(tape, &parts)?;
        Ok((r, Some(jac)))
    }

    fn lifted_guess(&self) -> Vec<f64> {
        self.prescribed.iter().map(|p| p.unwrap_or(0.0)).collect()
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Residual of the discrete steady Navier-Stokes system at the interleaved
/// state `x`, with Dirichlet rows zeroed.
pub fn ns_residual(
    tape: &mut Tape,
    grid: &StructuredGrid,
    x: NodeId,
    nu: NodeId,
    constants: &PhysicsConstants,
    bc: &DirichletSpec,
) -> Result<NodeId> {
    if tape.value(x).len() != 3 * grid.node_count() || tape.value(nu).len() != grid.node_count() {
        return Err(Error::contract("state or viscosity not sized to the grid"));
    }
    let sys = NsSystem::new(tape, grid, constants, bc)?;
    Ok(sys.evaluate(tape, x, nu, false)?.0)
}

/// Newton matrix at the interleaved state `x` with Dirichlet rows replaced,
/// as used for the update from `x`.
pub fn ns_jacobian(
    grid: &StructuredGrid,
    x: &[f64],
    nu: &[f64],
    constants: &PhysicsConstants,
    bc: &DirichletSpec,
) -> Result<CsrMatrix> {
    if x.len() != 3 * grid.node_count() || nu.len() != grid.node_count() {
        return Err(Error::contract("state or viscosity not sized to the grid"));
    }
    let mut tape = Tape::new();
    let sys = NsSystem::new(&mut tape, grid, constants, bc)?;
    let x = tape.constant(Tensor::vector(x.to_vec()));
    let nu = tape.constant(Tensor::vector(nu.to_vec()));
    let (r, jac) = sys.evaluate(&mut tape, x, nu, true)?;
    let (jac, _) = apply_dirichlet(&mut tape, &sys.layout, &jac.expect("jacobian requested"), r, &sys.zero_spec)?;
    Ok(jac.to_matrix(&tape))
}

/// Newton's method on the steady Navier-Stokes system. Every iterate is
/// recorded, so gradients flow through all linear solves. At least one
/// Newton update is always taken.
pub fn newton_solve(
    tape: &mut Tape,
    grid: &StructuredGrid,
    nu: NodeId,
    constants: &PhysicsConstants,
    bc: &DirichletSpec,
    config: &NewtonConfig,
) -> Result<NSState> {
    config.validate()?;
    let n = grid.node_count();
    if tape.value(nu).len() != n {
        return Err(Error::contract(format!(
            "viscosity has {} values, grid has {n} nodes",
            tape.value(nu).len()
        )));
    }
    if let Some(bad) = tape.value(nu).data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::contract(format!("viscosity must be positive, got {bad}")));
    }
    let sys = NsSystem::new(tape, grid, constants, bc)?;
    let x0 = match &config.initial_guess {
        Some(g) if g.len() == 3 * n => {
            let mut g = g.clone();
            for (slot, p) in g.iter_mut().zip(&sys.prescribed) {
                if let Some(v) = p {
                    *slot = *v;
                }
            }
            g
        }
        Some(_) => return Err(Error::contract("initial guess not sized to the grid")),
        None => sys.lifted_guess(),
    };
    let mut x = tape.constant(Tensor::vector(x0));
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (r, jac) = sys.evaluate(tape, x, nu, true)?;
        let norm = inf_norm(tape.value(r).data());
        history.push(norm);
        if iterations > 0 && norm < config.tol_residual {
            break;
        }
        if iterations == config.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                residual: norm,
            });
        }
        let minus_r = tape.scale(r, -1.0)?;
        let (jac, rhs) = apply_dirichlet(tape, &sys.layout, &jac.expect("jacobian requested"), minus_r, &sys.zero_spec)?;
        let delta = solve_differentiable(tape, &jac, rhs)?;
        x = tape.add(x, delta)?;
        iterations += 1;
    }
    let (u, v, p) = sys.split(tape, x)?;
    Ok(NSState {
        u,
        v,
        p,
        x,
        newton_iterations: iterations,
        final_residual_norm: *history.last().unwrap(),
        residual_history: history,
    })
}

/// Temperature from `ρC_p (u·∇T) = ∇·(k∇T) + Q` with the velocity of a
/// converged flow; temperature does not feed back into the flow.
pub fn heat_solve(
    tape: &mut Tape,
    grid: &StructuredGrid,
    u: NodeId,
    v: NodeId,
    k: NodeId,
    constants: &PhysicsConstants,
    bc: &DirichletSpec,
) -> Result<NodeId> {
    constants.validate()?;
    let a = assemble_advection_diffusion(tape, grid, u, v, k, constants.rho * constants.cp)?;
    let rhs = if constants.heat_source.is_zero() {
        vec![0.0; grid.node_count()]
    } else {
        constants.heat_source.load(grid)?
    };
    let rhs = tape.constant(Tensor::vector(rhs));
    let (a, rhs) = apply_dirichlet(tape, &DofLayout::scalar(Component::T), &a, rhs, bc)?;
    solve_differentiable(tape, &a, rhs)
}

/// One implicit Euler step of `dw/dt = κ(u − w) + q` at every node:
/// `w' = (w + dt(κu + q)) / (1 + dtκ)`.
struct RelaxStep {
    dt: f64,
    q: f64,
}

impl Op for RelaxStep {
    fn name(&self) -> &'static str {
        "relax_step"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 3)?;
        let (w, u) = (inputs[0].data(), inputs[1].data());
        if w.len() != u.len() || !inputs[2].is_scalar() {
            return Err(Error::contract("relax_step: expects w, u of equal length and a scalar rate"));
        }
        let kappa = inputs[2].item();
        let denom = 1.0 + self.dt * kappa;
        Ok(Tensor::vector(
            w.iter()
                .zip(u)
                .map(|(w, u)| (w + self.dt * (kappa * u + self.q)) / denom)
                .collect(),
        ))
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let u = inputs[1].data();
        let kappa = inputs[2].item();
        let denom = 1.0 + self.dt * kappa;
        let gw = g.iter().map(|g| g / denom).collect();
        let gu = g.iter().map(|g| g * self.dt * kappa / denom).collect();
        let gk = g
            .iter()
            .zip(u)
            .zip(out.data())
            .map(|((g, u), o)| g * self.dt * (u - o) / denom)
            .sum();
        Ok(vec![Some(gw), Some(gu), Some(vec![gk])])
    }
}

/// States `w^0 … w^n` of the relaxation towards `u` with rate `kappa` (a
/// scalar node) and constant acceleration `q`.
pub fn relax_towards(
    tape: &mut Tape,
    u: NodeId,
    kappa: NodeId,
    q: f64,
    w_init: NodeId,
    dt: f64,
    n_steps: usize,
) -> Result<Vec<NodeId>> {
    if !(dt > 0.0) {
        return Err(Error::contract(format!("time step must be positive, got {dt}")));
    }
    if n_steps == 0 {
        return Err(Error::contract("at least one time step is required"));
    }
    let mut states = vec![w_init];
    for _ in 0..n_steps {
        let w = *states.last().unwrap();
        states.push(tape.apply(RelaxStep { dt, q }, &[w, u, kappa])?);
    }
    Ok(states)
}

/// Particle velocities, one node per time step including the initial state.
#[derive(Clone, Debug)]
pub struct ParticleState {
    pub w1: Vec<NodeId>,
    pub w2: Vec<NodeId>,
    pub dt: f64,
    pub steps: usize,
}

impl ParticleState {
    pub fn final_w1(&self) -> NodeId {
        *self.w1.last().unwrap()
    }

    pub fn final_w2(&self) -> NodeId {
        *self.w2.last().unwrap()
    }
}

/// Passive particles dragged by the flow: `∂w₁/∂t = κ₁(u − w₁) + q₁` and the
/// `v` analogue, integrated at every node.
pub fn transport_integrate(
    tape: &mut Tape,
    ns: &NSState,
    constants: &PhysicsConstants,
    w_init: [NodeId; 2],
    dt: f64,
    n_steps: usize,
) -> Result<ParticleState> {
    constants.validate()?;
    let k1 = tape.constant(Tensor::scalar(constants.kappa1));
    let k2 = tape.constant(Tensor::scalar(constants.kappa2));
    Ok(ParticleState {
        w1: relax_towards(tape, ns.u, k1, constants.q1, w_init[0], dt, n_steps)?,
        w2: relax_towards(tape, ns.v, k2, constants.q2, w_init[1], dt, n_steps)?,
        dt,
        steps: n_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::NodalField;
    use crate::tape::finite_difference_check;

    fn nu_ref(x: f64, y: f64) -> f64 {
        1.0 + 6.0 * x * x + x / (1.0 + 2.0 * y * y)
    }

    fn solve_cavity(grid: &StructuredGrid, nu: &[f64], lid: f64) -> (Tape, NSState) {
        let mut tape = Tape::new();
        let nu = tape.constant(Tensor::vector(nu.to_vec()));
        let bc = cavity_dirichlet(grid, lid).unwrap();
        let state = newton_solve(
            &mut tape,
            grid,
            nu,
            &PhysicsConstants::default(),
            &bc,
            &NewtonConfig::default(),
        )
        .unwrap();
        (tape, state)
    }

    fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn rest_state_has_zero_residual() {
        let grid = StructuredGrid::new(5, 5).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 75]));
        let nu = tape.constant(Tensor::vector(vec![1.0; 25]));
        let bc = cavity_dirichlet(&grid, 0.0).unwrap();
        let r = ns_residual(&mut tape, &grid, x, nu, &PhysicsConstants::default(), &bc).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_pressure_leaves_interior_momentum_balanced() {
        let grid = StructuredGrid::new(5, 5).unwrap();
        let mut tape = Tape::new();
        let x: Vec<f64> = (0..75).map(|d| if d % 3 == 2 { 1.0 } else { 0.0 }).collect();
        let x = tape.constant(Tensor::vector(x));
        let nu = tape.constant(Tensor::vector(vec![1.0; 25]));
        let bc = cavity_dirichlet(&grid, 0.0).unwrap();
        let r = ns_residual(&mut tape, &grid, x, nu, &PhysicsConstants::default(), &bc).unwrap();
        let r = tape.value(r).data();
        for n in 0..25 {
            assert!(r[3 * n].abs() < 1e-14 && r[3 * n + 1].abs() < 1e-14);
        }
    }

    #[test]
    fn zero_lid_converges_in_one_iteration() {
        let grid = StructuredGrid::new(5, 5).unwrap();
        let (tape, state) = solve_cavity(&grid, &[1.0; 25], 0.0);
        assert_eq!(state.newton_iterations, 1);
        assert!(tape.value(state.x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cavity_converges_and_keeps_boundary_values() {
        let grid = StructuredGrid::new(21, 21).unwrap();
        let nu = NodalField::from_fn(&grid, nu_ref);
        let (tape, state) = solve_cavity(&grid, nu.values(), 1.0);
        assert!(state.final_residual_norm < 1e-8);
        assert!(state.newton_iterations <= 10);
        for w in state.residual_history[1..].windows(2) {
            assert!(w[1] < w[0], "{:?}", state.residual_history);
        }
        let u = tape.value(state.u).data();
        let v = tape.value(state.v).data();
        for n in grid.all_boundary_nodes() {
            let lid = if n < grid.nx() { 1.0 } else { 0.0 };
            assert_eq!(u[n], lid);
            assert_eq!(v[n], 0.0);
        }
        assert_eq!(tape.value(state.p).data()[0], 0.0);
        // The lid drags the fluid next to it.
        assert!(u[grid.node(10, 1)] > 0.0);
    }

    #[test]
    fn converged_state_is_a_fixed_point() {
        let grid = StructuredGrid::new(9, 9).unwrap();
        let nu = NodalField::from_fn(&grid, nu_ref);
        let (mut tape, state) = solve_cavity(&grid, nu.values(), 1.0);
        let x = tape.constant(tape.value(state.x).clone());
        let nu = tape.constant(Tensor::vector(nu.values().to_vec()));
        let bc = cavity_dirichlet(&grid, 1.0).unwrap();
        let r = ns_residual(&mut tape, &grid, x, nu, &PhysicsConstants::default(), &bc).unwrap();
        assert!(inf_norm(tape.value(r).data()) < 1e-8);
    }

    #[test]
    fn jacobian_matches_residual_differences() {
        let grid = StructuredGrid::new(4, 4).unwrap();
        let n = grid.node_count();
        let nu = NodalField::from_fn(&grid, nu_ref).into_values();
        let bc = cavity_dirichlet(&grid, 1.0).unwrap();
        let constants = PhysicsConstants::default();
        let x: Vec<f64> = (0..3 * n).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let jac = ns_jacobian(&grid, &x, &nu, &constants, &bc).unwrap();
        let free = bc.dof_values(&ns_layout(), 3 * n).unwrap();
        let residual = |x: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(x.to_vec()));
            let nu = tape.constant(Tensor::vector(nu.clone()));
            let r = ns_residual(&mut tape, &grid, x, nu, &constants, &bc).unwrap();
            tape.value(r).data().to_vec()
        };
        let h = 1e-6;
        for j in (0..3 * n).filter(|&j| free[j].is_none()) {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let (rp, rm) = (residual(&xp), residual(&xm));
            for i in (0..3 * n).filter(|&i| free[i].is_none()) {
                let fd = (rp[i] - rm[i]) / (2.0 * h);
                assert!((jac.get(i, j) - fd).abs() < 1e-7, "({i}, {j}): {} vs {fd}", jac.get(i, j));
            }
        }
        for i in (0..3 * n).filter(|&i| free[i].is_some()) {
            assert_eq!(jac.get(i, i), 1.0);
        }
    }

    #[test]
    fn high_viscosity_approaches_stokes_limit() {
        let grid = StructuredGrid::new(11, 11).unwrap();
        let base = NodalField::from_fn(&grid, nu_ref);
        let constants = PhysicsConstants {
            stabilization: Stabilization::ViscosityScaled,
            ..Default::default()
        };
        let bc = cavity_dirichlet(&grid, 1.0).unwrap();
        let u_for = |s: f64| {
            let mut tape = Tape::new();
            let nu = tape.constant(Tensor::vector(base.values().iter().map(|v| v * s).collect()));
            let state = newton_solve(&mut tape, &grid, nu, &constants, &bc, &NewtonConfig::default()).unwrap();
            tape.value(state.u).data().to_vec()
        };
        let (u1, u2, u100, u200) = (u_for(1.0), u_for(2.0), u_for(100.0), u_for(200.0));
        assert!(diff_norm(&u1, &u2) > 0.0);
        assert!(diff_norm(&u100, &u200) < diff_norm(&u1, &u2));
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let grid = StructuredGrid::new(9, 9).unwrap();
        let mut tape = Tape::new();
        let nu = tape.constant(Tensor::vector(vec![0.01; 81]));
        let bc = cavity_dirichlet(&grid, 1.0).unwrap();
        let config = NewtonConfig {
            max_iter: 1,
            ..Default::default()
        };
        let err = newton_solve(&mut tape, &grid, nu, &PhysicsConstants::default(), &bc, &config).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 1, .. }));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let grid = StructuredGrid::new(4, 4).unwrap();
        let mut tape = Tape::new();
        let bc = cavity_dirichlet(&grid, 1.0).unwrap();
        let nu = tape.constant(Tensor::vector(vec![1.0; 16]));
        let bad = NewtonConfig {
            max_iter: 0,
            ..Default::default()
        };
        assert!(matches!(
            newton_solve(&mut tape, &grid, nu, &PhysicsConstants::default(), &bc, &bad),
            Err(Error::Config(_))
        ));
        let neg = tape.constant(Tensor::vector(vec![-1.0; 16]));
        assert!(newton_solve(&mut tape, &grid, neg, &PhysicsConstants::default(), &bc, &NewtonConfig::default()).is_err());
    }

    fn heat(grid: &StructuredGrid, u: &[f64], v: &[f64], k: &[f64], q: f64, bc: &DirichletSpec) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::vector(u.to_vec()));
        let v = tape.constant(Tensor::vector(v.to_vec()));
        let k = tape.constant(Tensor::vector(k.to_vec()));
        let constants = PhysicsConstants {
            heat_source: Source::Constant(q),
            ..Default::default()
        };
        let t = heat_solve(&mut tape, grid, u, v, k, &constants, bc)?;
        Ok(tape.value(t).data().to_vec())
    }

    #[test]
    fn heat_reproduces_linear_and_constant_solutions() {
        let grid = StructuredGrid::new(6, 6).unwrap();
        let zero = vec![0.0; 36];
        let mut bc = DirichletSpec::new();
        for n in grid.all_boundary_nodes() {
            bc.push(n, Component::T, grid.coords()[n][0]).unwrap();
        }
        let t = heat(&grid, &zero, &zero, &[1.0; 36], 0.0, &bc).unwrap();
        for (t, p) in t.iter().zip(grid.coords()) {
            assert!((t - p[0]).abs() < 1e-12);
        }

        let swirl: Vec<f64> = grid.coords().iter().map(|p| p[1] - 0.5).collect();
        let bc = uniform_temperature_dirichlet(&grid, 2.5).unwrap();
        let t = heat(&grid, &swirl, &zero, &[1.0; 36], 0.0, &bc).unwrap();
        assert!(t.iter().all(|t| (t - 2.5).abs() < 1e-12));
    }

    #[test]
    fn heat_without_conduction_or_flow_is_singular() {
        let grid = StructuredGrid::new(5, 5).unwrap();
        let zero = vec![0.0; 25];
        let bc = uniform_temperature_dirichlet(&grid, 0.0).unwrap();
        assert!(matches!(heat(&grid, &zero, &zero, &zero, 1.0, &bc), Err(Error::Singular { .. })));
    }

    #[test]
    fn heat_with_zero_velocity_ignores_its_sign() {
        let grid = StructuredGrid::new(6, 6).unwrap();
        let k: Vec<f64> = grid.coords().iter().map(|p| 1.0 + p[0] * p[0]).collect();
        let zero = vec![0.0; 36];
        let neg_zero = vec![-0.0; 36];
        let bc = uniform_temperature_dirichlet(&grid, 0.0).unwrap();
        let a = heat(&grid, &zero, &zero, &k, 1.0, &bc).unwrap();
        let b = heat(&grid, &neg_zero, &neg_zero, &k, 1.0, &bc).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|&t| t > 0.0));
    }

    #[test]
    fn heat_gradient_wrt_conductivity_matches_fd() {
        let grid = StructuredGrid::new(6, 6).unwrap();
        let u: Vec<f64> = grid.coords().iter().map(|p| (3.0 * p[1]).sin()).collect();
        let v: Vec<f64> = grid.coords().iter().map(|p| -(2.0 * p[0]).cos()).collect();
        let k0: Vec<f64> = grid.coords().iter().map(|p| 1.0 + p[0] * p[0] + p[0] / (1.0 + p[1] * p[1])).collect();
        let bc = uniform_temperature_dirichlet(&grid, 0.0).unwrap();
        let f = |k: &[f64]| {
            let mut tape = Tape::new();
            let uu = tape.constant(Tensor::vector(u.clone()));
            let vv = tape.constant(Tensor::vector(v.clone()));
            let kk = tape.variable(Tensor::vector(k.to_vec()));
            let t = heat_solve(&mut tape, &grid, uu, vv, kk, &PhysicsConstants::default(), &bc)?;
            let s = tape.sum(t)?;
            let g = tape.backward(s)?;
            Ok((tape.value(s).item(), g.get(kk).unwrap().data().to_vec()))
        };
        let check = finite_difference_check(f, &k0, 1e-5, None).unwrap();
        assert!(check.max_rel_error < 1e-5, "{}", check.max_rel_error);
    }

    #[test]
    fn relaxation_matches_closed_form() {
        let mut tape = Tape::new();
        let c = 0.7;
        let u = tape.constant(Tensor::vector(vec![c; 4]));
        let k = tape.constant(Tensor::scalar(1.0));
        let w0 = tape.constant(Tensor::vector(vec![0.0; 4]));
        let dt = 0.1;
        let states = relax_towards(&mut tape, u, k, 0.0, w0, dt, 50).unwrap();
        let mut prev = 0.0;
        for (m, s) in states.iter().enumerate() {
            let expected = c * (1.0 - (1.0 + dt).powi(-(m as i32)));
            let w = tape.value(*s).data()[0];
            assert!((w - expected).abs() < 1e-14);
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn relaxation_fixed_point() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::vector(vec![0.3, -1.2, 4.0]));
        let k = tape.constant(Tensor::scalar(1.0));
        let states = relax_towards(&mut tape, u, k, 0.0, u, 0.1, 10).unwrap();
        for s in &states {
            let w = tape.value(*s).data();
            for (a, b) in w.iter().zip([0.3, -1.2, 4.0]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(relax_towards(&mut tape, u, k, 0.0, u, 0.0, 10).is_err());
        assert!(relax_towards(&mut tape, u, k, 0.0, u, 0.1, 0).is_err());
    }

    #[test]
    fn relaxation_gradient_wrt_rate_matches_fd() {
        let u: Vec<f64> = (0..6).map(|i| (i as f64 * 0.9).sin()).collect();
        let f = |k: &[f64]| {
            let mut tape = Tape::new();
            let uu = tape.constant(Tensor::vector(u.clone()));
            let kk = tape.variable(Tensor::scalar(k[0]));
            let w0 = tape.constant(Tensor::vector(vec![0.1; 6]));
            let states = relax_towards(&mut tape, uu, kk, 0.2, w0, 0.1, 50)?;
            let s = tape.sum(*states.last().unwrap())?;
            let g = tape.backward(s)?;
            Ok((tape.value(s).item(), g.get(kk).unwrap().data().to_vec()))
        };
        let check = finite_difference_check(f, &[1.0], 1e-5, None).unwrap();
        assert!(check.max_rel_error < 1e-5, "{}", check.max_rel_error);
    }

    #[test]
    fn newton_gradient_wrt_viscosity_matches_fd() {
        let grid = StructuredGrid::new(6, 6).unwrap();
        let nu0: Vec<f64> = NodalField::from_fn(&grid, nu_ref).into_values();
        let weights: Vec<f64> = (0..108).map(|i| ((i as f64) * 1.7).sin()).collect();
        let bc = cavity_dirichlet(&grid, 1.0).unwrap();
        for stabilization in [Stabilization::Fixed, Stabilization::ViscosityScaled] {
            let constants = PhysicsConstants {
                stabilization,
                ..Default::default()
            };
            let f = |nu: &[f64]| {
                let mut tape = Tape::new();
                let nn = tape.variable(Tensor::vector(nu.to_vec()));
                let s = newton_solve(&mut tape, &grid, nn, &constants, &bc, &NewtonConfig::default())?;
                let w = tape.constant(Tensor::vector(weights.clone()));
                let l = tape.dot(s.x, w)?;
                let g = tape.backward(l)?;
                Ok((tape.value(l).item(), g.get(nn).unwrap().data().to_vec()))
            };
            let check = finite_difference_check(f, &nu0, 1e-5, Some(&[0, 7, 9, 14, 21, 28])).unwrap();
            assert!(check.max_rel_error < 1e-5, "{stabilization:?}: {check:?}");
        }
    }
}
