//! Bilinear (Q1) finite elements on a structured grid over the unit square.
//!
//! Nodes are numbered row-major with `x` running fastest, so node `(i, j)`
//! sits at `(i * hx, j * hy)` with index `j * nx + i`. Every element uses the
//! same 2×2 Gauss rule, and because the grid is uniform the element integrals
//! reduce to a handful of precomputed local tensors. Assembly of a
//! coefficient-weighted block is then linear in the nodal coefficient, which
//! makes the adjoint a plain gather through the same tensors.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, SparseBlock, SparsityPattern};
use crate::tape::{expect_inputs, NodeId, Op, Tape, Tensor};

/// Reference-square corners, counterclockwise from `(-1, -1)`.
const CORNERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

/// `T[c][a][b]`: contribution of nodal value `c` to local entry (test `a`, trial `b`).
pub type LocalTensor = [[[f64; 4]; 4]; 4];
pub type LocalMatrix = [[f64; 4]; 4];

fn shape_values(xi: f64, eta: f64) -> [f64; 4] {
    CORNERS.map(|[a, b]| 0.25 * (1.0 + a * xi) * (1.0 + b * eta))
}

fn shape_ref_gradients(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    CORNERS.map(|[a, b]| [0.25 * a * (1.0 + b * eta), 0.25 * b * (1.0 + a * xi)])
}

/// 2×2 Gauss points with shape data for one `hx × hy` element.
#[derive(Clone, Debug)]
pub struct QuadraturePointSet {
    pub reference_points: [[f64; 2]; 4],
    pub weights: [f64; 4],
    /// `values[q][a]`
    pub values: [[f64; 4]; 4],
    /// Physical gradients `gradients[q][a] = [∂φ_a/∂x, ∂φ_a/∂y]`.
    pub gradients: [[[f64; 2]; 4]; 4],
    pub jacobian_det: f64,
}

impl QuadraturePointSet {
    pub fn gauss_2x2(hx: f64, hy: f64) -> Self {
        let g = 1.0 / 3.0_f64.sqrt();
        let reference_points = [[-g, -g], [g, -g], [g, g], [-g, g]];
        let mut values = [[0.0; 4]; 4];
        let mut gradients = [[[0.0; 2]; 4]; 4];
        for (q, &[xi, eta]) in reference_points.iter().enumerate() {
            values[q] = shape_values(xi, eta);
            for (a, [dxi, deta]) in shape_ref_gradients(xi, eta).into_iter().enumerate() {
                gradients[q][a] = [dxi * 2.0 / hx, deta * 2.0 / hy];
            }
        }
        Self {
            reference_points,
            weights: [1.0; 4],
            values,
            gradients,
            jacobian_det: hx * hy / 4.0,
        }
    }

    fn wdet(&self, q: usize) -> f64 {
        self.weights[q] * self.jacobian_det
    }

    fn tensor(&self, f: impl Fn(usize, usize, usize, usize) -> f64) -> LocalTensor {
        let mut t = [[[0.0; 4]; 4]; 4];
        for (c, tc) in t.iter_mut().enumerate() {
            for (a, ta) in tc.iter_mut().enumerate() {
                for (b, tab) in ta.iter_mut().enumerate() {
                    *tab = (0..4).map(|q| self.wdet(q) * f(q, c, a, b)).sum();
                }
            }
        }
        t
    }

    fn matrix(&self, f: impl Fn(usize, usize, usize) -> f64) -> LocalMatrix {
        let mut m = [[0.0; 4]; 4];
        for (a, ma) in m.iter_mut().enumerate() {
            for (b, mab) in ma.iter_mut().enumerate() {
                *mab = (0..4).map(|q| self.wdet(q) * f(q, a, b)).sum();
            }
        }
        m
    }
}

/// Element integrals shared by every cell of a uniform grid.
#[derive(Clone, Debug)]
struct LocalOperators {
    /// `∫ φ_c ∇φ_a·∇φ_b`
    diffusion: LocalTensor,
    /// `∫ φ_c φ_a ∂φ_b/∂x`, and the `y` analogue
    advection: [LocalTensor; 2],
    /// `∫ φ_a φ_b ∂φ_c/∂x`, and the `y` analogue
    reaction: [LocalTensor; 2],
    mass: LocalMatrix,
    /// `∫ ∇φ_a·∇φ_b`
    stiffness: LocalMatrix,
    /// `∫ φ_b ∂φ_a/∂x`, and the `y` analogue (test function differentiated)
    gradient: [LocalMatrix; 2],
}

impl LocalOperators {
    fn new(quad: &QuadraturePointSet) -> Self {
        let n = &quad.values;
        let d = &quad.gradients;
        let dot = |q: usize, a: usize, b: usize| d[q][a][0] * d[q][b][0] + d[q][a][1] * d[q][b][1];
        Self {
            diffusion: quad.tensor(|q, c, a, b| n[q][c] * dot(q, a, b)),
            advection: [0, 1].map(|k| quad.tensor(|q, c, a, b| n[q][c] * n[q][a] * d[q][b][k])),
            reaction: [0, 1].map(|k| quad.tensor(|q, c, a, b| n[q][a] * n[q][b] * d[q][c][k])),
            mass: quad.matrix(|q, a, b| n[q][a] * n[q][b]),
            stiffness: quad.matrix(dot),
            gradient: [0, 1].map(|k| quad.matrix(|q, a, b| n[q][b] * d[q][a][k])),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Boundary {
    Left,
    Right,
    Bottom,
    Top,
}

struct GridData {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    coords: Vec<[f64; 2]>,
    elements: Vec<[usize; 4]>,
    pattern: Arc<SparsityPattern>,
    element_positions: Vec<[[usize; 4]; 4]>,
    quadrature: QuadraturePointSet,
    local: LocalOperators,
}

/// Uniform quadrilateral grid of `nx × ny` nodes on `[0, 1]²`.
#[derive(Clone)]
pub struct StructuredGrid {
    inner: Arc<GridData>,
}

impl fmt::Debug for StructuredGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StructuredGrid({}x{})", self.inner.nx, self.inner.ny)
    }
}

impl PartialEq for StructuredGrid {
    fn eq(&self, other: &Self) -> bool {
        self.inner.nx == other.inner.nx && self.inner.ny == other.inner.ny
    }
}

impl StructuredGrid {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::contract(format!(
                "a grid needs at least 2 nodes per axis, got {nx}x{ny}"
            )));
        }
        let hx = 1.0 / (nx - 1) as f64;
        let hy = 1.0 / (ny - 1) as f64;
        let coords = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| [i as f64 * hx, j as f64 * hy]))
            .collect();
        let node = |i: usize, j: usize| j * nx + i;
        let elements: Vec<[usize; 4]> = (0..ny - 1)
            .flat_map(|j| {
                (0..nx - 1).map(move |i| [node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)])
            })
            .collect();
        let pattern = SparsityPattern::from_entries(
            nx * ny,
            nx * ny,
            elements
                .iter()
                .flat_map(|e| e.iter().flat_map(move |&a| e.iter().map(move |&b| (a, b)))),
        )?;
        let element_positions = elements
            .iter()
            .map(|e| e.map(|a| e.map(|b| pattern.find(a, b).expect("element pair in pattern"))))
            .collect();
        let quadrature = QuadraturePointSet::gauss_2x2(hx, hy);
        let local = LocalOperators::new(&quadrature);
        Ok(Self {
            inner: Arc::new(GridData {
                nx,
                ny,
                hx,
                hy,
                coords,
                elements,
                pattern: Arc::new(pattern),
                element_positions,
                quadrature,
                local,
            }),
        })
    }

    pub fn nx(&self) -> usize {
        self.inner.nx
    }

    pub fn ny(&self) -> usize {
        self.inner.ny
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.inner.hx, self.inner.hy)
    }

    pub fn node_count(&self) -> usize {
        self.inner.nx * self.inner.ny
    }

    pub fn element_count(&self) -> usize {
        self.inner.elements.len()
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * self.inner.nx + i
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.inner.coords
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.inner.elements
    }

    /// Node-to-node coupling pattern shared by every scalar block.
    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.inner.pattern
    }

    pub fn quadrature(&self) -> &QuadraturePointSet {
        &self.inner.quadrature
    }

    pub fn boundary_nodes(&self, side: Boundary) -> Vec<usize> {
        let (nx, ny) = (self.inner.nx, self.inner.ny);
        match side {
            Boundary::Left => (0..ny).map(|j| self.node(0, j)).collect(),
            Boundary::Right => (0..ny).map(|j| self.node(nx - 1, j)).collect(),
            Boundary::Bottom => (0..nx).map(|i| self.node(i, 0)).collect(),
            Boundary::Top => (0..nx).map(|i| self.node(i, ny - 1)).collect(),
        }
    }

    /// Every node on the boundary, ascending.
    pub fn all_boundary_nodes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = [Boundary::Left, Boundary::Right, Boundary::Bottom, Boundary::Top]
            .into_iter()
            .flat_map(|s| self.boundary_nodes(s))
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let (i, j) = (node % self.inner.nx, node / self.inner.nx);
        i == 0 || j == 0 || i == self.inner.nx - 1 || j == self.inner.ny - 1
    }

    fn assemble_constant(&self, local: &LocalMatrix) -> CsrMatrix {
        let mut values = vec![0.0; self.inner.pattern.nnz()];
        for pos in &self.inner.element_positions {
            for a in 0..4 {
                for b in 0..4 {
                    values[pos[a][b]] += local[a][b];
                }
            }
        }
        CsrMatrix::new(self.inner.pattern.clone(), values).expect("pattern sized")
    }

    /// `M_ij = ∫ φ_j φ_i`
    pub fn mass_matrix(&self) -> CsrMatrix {
        self.assemble_constant(&self.inner.local.mass)
    }

    /// `K_ij = ∫ ∇φ_j·∇φ_i`
    pub fn stiffness_matrix(&self) -> CsrMatrix {
        self.assemble_constant(&self.inner.local.stiffness)
    }

    /// Locates `(x, y)`: element index and the four bilinear weights.
    pub fn locate(&self, x: f64, y: f64) -> Result<(usize, [f64; 4])> {
        const SLACK: f64 = 1e-12;
        if !(x.is_finite() && y.is_finite())
            || x < -SLACK
            || y < -SLACK
            || x > 1.0 + SLACK
            || y > 1.0 + SLACK
        {
            return Err(Error::contract(format!("point ({x}, {y}) lies outside the unit square")));
        }
        let (nx, ny, hx, hy) = (self.inner.nx, self.inner.ny, self.inner.hx, self.inner.hy);
        // Snap to grid lines so nodal evaluation is exact.
        let snap = |s: f64| {
            let r = s.round();
            if (s - r).abs() < 1e-10 {
                r
            } else {
                s
            }
        };
        let (sx, sy) = (snap(x / hx).max(0.0), snap(y / hy).max(0.0));
        let ex = (sx.floor() as usize).min(nx - 2);
        let ey = (sy.floor() as usize).min(ny - 2);
        let xi = 2.0 * (sx - ex as f64) - 1.0;
        let eta = 2.0 * (sy - ey as f64) - 1.0;
        Ok((ey * (nx - 1) + ex, shape_values(xi, eta)))
    }
}

/// One scalar value per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalField {
    grid: StructuredGrid,
    values: Vec<f64>,
}

impl NodalField {
    pub fn new(grid: &StructuredGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::contract(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    pub fn from_fn(grid: &StructuredGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            grid: grid.clone(),
            values: grid.coords().iter().map(|&[x, y]| f(x, y)).collect(),
        }
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Bilinear interpolation at arbitrary points of the closed unit square.
    pub fn interpolate(&self, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        points
            .iter()
            .map(|&[x, y]| {
                let (e, w) = self.grid.locate(x, y)?;
                let nodes = self.grid.elements()[e];
                Ok((0..4).map(|a| w[a] * self.values[nodes[a]]).sum())
            })
            .collect()
    }

    /// CSV with header `x,y,value`, one row per node in storage order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,value")?;
        for (&[x, y], v) in self.grid.coords().iter().zip(&self.values) {
            writeln!(w, "{x:.16e},{y:.16e},{v:.16e}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(grid: &StructuredGrid, r: R) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "x,y,value" => {}
            _ => return Err(Error::Io("missing `x,y,value` header".into())),
        }
        let mut values = Vec::with_capacity(grid.node_count());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let last = line
                .rsplit(',')
                .next()
                .ok_or_else(|| Error::Io(format!("malformed row `{line}`")))?;
            values.push(
                f64::from_str(last.trim()).map_err(|e| Error::Io(format!("bad value `{last}`: {e}")))?,
            );
        }
        Self::new(grid, values)
    }
}

/// Maps nodal fields linearly to block values through per-element tensors:
/// `out[pos(e, a, b)] += Σ_k Σ_c field_k[node(e, c)] · T_k[c][a][b]`.
struct FieldToBlock {
    grid: StructuredGrid,
    tensors: Vec<LocalTensor>,
}

impl Op for FieldToBlock {
    fn name(&self) -> &'static str {
        "fem_assemble"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, self.tensors.len())?;
        let n = self.grid.node_count();
        if let Some(bad) = inputs.iter().find(|t| t.len() != n) {
            return Err(Error::contract(format!(
                "nodal field has {} values, grid has {n} nodes",
                bad.len()
            )));
        }
        let data = &self.grid.inner;
        let mut out = vec![0.0; data.pattern.nnz()];
        for (nodes, pos) in data.elements.iter().zip(&data.element_positions) {
            for (field, t) in inputs.iter().zip(&self.tensors) {
                for c in 0..4 {
                    let fc = field.data()[nodes[c]];
                    if fc == 0.0 {
                        continue;
                    }
                    for a in 0..4 {
                        for b in 0..4 {
                            out[pos[a][b]] += fc * t[c][a][b];
                        }
                    }
                }
            }
        }
        Ok(Tensor::vector(out))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let data = &self.grid.inner;
        Ok(self
            .tensors
            .iter()
            .map(|t| {
                let mut gf = vec![0.0; self.grid.node_count()];
                for (nodes, pos) in data.elements.iter().zip(&data.element_positions) {
                    for c in 0..4 {
                        let mut s = 0.0;
                        for a in 0..4 {
                            for b in 0..4 {
                                s += t[c][a][b] * g[pos[a][b]];
                            }
                        }
                        gf[nodes[c]] += s;
                    }
                }
                Some(gf)
            })
            .collect())
    }
}

fn scaled(t: &LocalTensor, s: f64) -> LocalTensor {
    t.map(|m| m.map(|r| r.map(|v| v * s)))
}

fn block(tape: &mut Tape, grid: &StructuredGrid, tensors: Vec<LocalTensor>, fields: &[NodeId]) -> Result<SparseBlock> {
    let values = tape.apply(
        FieldToBlock {
            grid: grid.clone(),
            tensors,
        },
        fields,
    )?;
    Ok(SparseBlock {
        pattern: grid.pattern().clone(),
        values,
    })
}

/// `K_ij = Σ_q w ν(x_q) ∇φ_j·∇φ_i` with `ν` interpolated from the nodes.
pub fn assemble_diffusion_block(tape: &mut Tape, grid: &StructuredGrid, coeff: NodeId) -> Result<SparseBlock> {
    block(tape, grid, vec![grid.inner.local.diffusion], &[coeff])
}

/// Convection blocks from a velocity iterate `(u_k, v_k)`.
#[derive(Clone, Debug)]
pub struct ConvectionBlocks {
    /// `∫ (u_k ∂φ_j/∂x + v_k ∂φ_j/∂y) φ_i`
    pub advection: SparseBlock,
    /// `∫ φ_j (∂u_k/∂x) φ_i`
    pub du_dx: SparseBlock,
    pub du_dy: SparseBlock,
    pub dv_dx: SparseBlock,
    pub dv_dy: SparseBlock,
}

pub fn assemble_convection_blocks(
    tape: &mut Tape,
    grid: &StructuredGrid,
    u: NodeId,
    v: NodeId,
) -> Result<ConvectionBlocks> {
    let l = &grid.inner.local;
    let [ax, ay] = l.advection;
    let [rx, ry] = l.reaction;
    Ok(ConvectionBlocks {
        advection: block(tape, grid, vec![ax, ay], &[u, v])?,
        du_dx: block(tape, grid, vec![rx], &[u])?,
        du_dy: block(tape, grid, vec![ry], &[u])?,
        dv_dx: block(tape, grid, vec![rx], &[v])?,
        dv_dy: block(tape, grid, vec![ry], &[v])?,
    })
}

/// Constant pressure-gradient and divergence blocks.
#[derive(Clone, Debug)]
pub struct GradDivBlocks {
    /// `∫ φ_j ∂φ_i/∂x`: pairs pressure trial `j` with velocity test `i`.
    pub grad_x: CsrMatrix,
    pub grad_y: CsrMatrix,
    /// `∫ (∂φ_j/∂x) φ_i`, the transpose of `grad_x`.
    pub div_x: CsrMatrix,
    pub div_y: CsrMatrix,
}

pub fn assemble_grad_div_blocks(grid: &StructuredGrid) -> GradDivBlocks {
    let [gx, gy] = grid.inner.local.gradient;
    let transpose = |m: LocalMatrix| {
        let mut t = [[0.0; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                t[a][b] = m[b][a];
            }
        }
        t
    };
    GradDivBlocks {
        grad_x: grid.assemble_constant(&gx),
        grad_y: grid.assemble_constant(&gy),
        div_x: grid.assemble_constant(&transpose(gx)),
        div_y: grid.assemble_constant(&transpose(gy)),
    }
}

/// `ρC_p ∫ (u ∂φ_j/∂x + v ∂φ_j/∂y) φ_i + ∫ k ∇φ_j·∇φ_i`.
pub fn assemble_advection_diffusion(
    tape: &mut Tape,
    grid: &StructuredGrid,
    u: NodeId,
    v: NodeId,
    conductivity: NodeId,
    rho_cp: f64,
) -> Result<SparseBlock> {
    let l = &grid.inner.local;
    block(
        tape,
        grid,
        vec![scaled(&l.advection[0], rho_cp), scaled(&l.advection[1], rho_cp), l.diffusion],
        &[u, v, conductivity],
    )
}

/// Physical field attached to a degree of freedom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    U,
    V,
    P,
    T,
    W1,
    W2,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::U => "u",
            Component::V => "v",
            Component::P => "p",
            Component::T => "t",
            Component::W1 => "w1",
            Component::W2 => "w2",
        }
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "u" => Ok(Component::U),
            "v" => Ok(Component::V),
            "p" => Ok(Component::P),
            "t" => Ok(Component::T),
            "w1" => Ok(Component::W1),
            "w2" => Ok(Component::W2),
            other => Err(Error::Config(format!("unknown component `{other}`"))),
        }
    }
}

/// Interleaved numbering of several components per node:
/// `dof = node * n_components + slot(component)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DofLayout {
    components: Vec<Component>,
}

impl DofLayout {
    pub fn new(components: Vec<Component>) -> Self {
        Self { components }
    }

    pub fn scalar(c: Component) -> Self {
        Self { components: vec![c] }
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn per_node(&self) -> usize {
        self.components.len()
    }

    pub fn dof(&self, node: usize, c: Component) -> Option<usize> {
        self.components
            .iter()
            .position(|&k| k == c)
            .map(|slot| node * self.components.len() + slot)
    }
}

/// Prescribed nodal values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DirichletSpec {
    entries: Vec<(usize, Component, f64)>,
}

impl DirichletSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, node: usize, component: Component, value: f64) -> Result<()> {
        if self.entries.iter().any(|&(n, c, _)| n == node && c == component) {
            return Err(Error::contract(format!(
                "node {node} component {} constrained twice",
                component.as_str()
            )));
        }
        self.entries.push((node, component, value));
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, Component, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Per-dof prescribed value, `None` for free dofs.
    pub fn dof_values(&self, layout: &DofLayout, n_dofs: usize) -> Result<Vec<Option<f64>>> {
        let mut out = vec![None; n_dofs];
        for &(node, c, v) in &self.entries {
            let dof = layout
                .dof(node, c)
                .filter(|&d| d < n_dofs)
                .ok_or_else(|| Error::contract(format!("no dof for node {node} component {}", c.as_str())))?;
            out[dof] = Some(v);
        }
        Ok(out)
    }
}

/// Zeroes constrained rows and columns and puts 1 on their diagonal.
struct ConstrainMatrix {
    zeroed: Vec<usize>,
    diagonal: Vec<usize>,
}

impl Op for ConstrainMatrix {
    fn name(&self) -> &'static str {
        "dirichlet_matrix"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 1)?;
        let mut out = inputs[0].data().to_vec();
        for &k in &self.zeroed {
            out[k] = 0.0;
        }
        for &k in &self.diagonal {
            out[k] = 1.0;
        }
        Ok(Tensor::vector(out))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let mut ga = g.to_vec();
        for &k in self.zeroed.iter().chain(&self.diagonal) {
            ga[k] = 0.0;
        }
        Ok(vec![Some(ga)])
    }
}

/// Constrained rows take the prescribed value; free rows lose the column
/// contributions of constrained dofs: `b_r - Σ_c A_rc g_c`.
struct ConstrainRhs {
    pattern: Arc<SparsityPattern>,
    prescribed: Vec<Option<f64>>,
}

impl Op for ConstrainRhs {
    fn name(&self) -> &'static str {
        "dirichlet_rhs"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 2)?;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        if b.len() != self.prescribed.len() {
            return Err(Error::contract("dirichlet_rhs: right-hand side has the wrong length"));
        }
        let mut out = b.to_vec();
        for (r, slot) in out.iter_mut().enumerate() {
            if let Some(g) = self.prescribed[r] {
                *slot = g;
                continue;
            }
            for k in self.pattern.row_range(r) {
                if let Some(g) = self.prescribed[self.pattern.col_indices()[k]] {
                    *slot -= a[k] * g;
                }
            }
        }
        Ok(Tensor::vector(out))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let mut ga = vec![0.0; inputs[0].len()];
        let mut gb = g.to_vec();
        for r in 0..gb.len() {
            if self.prescribed[r].is_some() {
                gb[r] = 0.0;
                continue;
            }
            for k in self.pattern.row_range(r) {
                if let Some(val) = self.prescribed[self.pattern.col_indices()[k]] {
                    ga[k] = -g[r] * val;
                }
            }
        }
        Ok(vec![Some(ga), Some(gb)])
    }
}

/// Imposes Dirichlet values by row replacement with symmetric column
/// elimination. Both outputs stay differentiable in the original entries.
pub fn apply_dirichlet(
    tape: &mut Tape,
    layout: &DofLayout,
    matrix: &SparseBlock,
    rhs: NodeId,
    spec: &DirichletSpec,
) -> Result<(SparseBlock, NodeId)> {
    if spec.is_empty() {
        return Ok((matrix.clone(), rhs));
    }
    let pattern = &matrix.pattern;
    let prescribed = spec.dof_values(layout, pattern.n_rows())?;
    let mut zeroed = Vec::new();
    let mut diagonal = Vec::new();
    for (k, (i, j)) in pattern.entries().enumerate() {
        if prescribed[i].is_some() || prescribed[j].is_some() {
            if i == j {
                diagonal.push(k);
            } else {
                zeroed.push(k);
            }
        }
    }
    if let Some(missing) = (0..pattern.n_rows()).find(|&i| prescribed[i].is_some() && pattern.find(i, i).is_none()) {
        return Err(Error::contract(format!("constrained dof {missing} has no diagonal entry")));
    }
    let new_rhs = tape.apply(
        ConstrainRhs {
            pattern: pattern.clone(),
            prescribed,
        },
        &[matrix.values, rhs],
    )?;
    let values = tape.apply(ConstrainMatrix { zeroed, diagonal }, &[matrix.values])?;
    Ok((
        SparseBlock {
            pattern: pattern.clone(),
            values,
        },
        new_rhs,
    ))
}

/// Bilinear interpolation as a linear map from nodal values.
struct Interpolate {
    stencils: Vec<([usize; 4], [f64; 4])>,
    n_nodes: usize,
}

impl Op for Interpolate {
    fn name(&self) -> &'static str {
        "interpolate"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 1)?;
        if inputs[0].len() != self.n_nodes {
            return Err(Error::contract("interpolate: field does not match the grid"));
        }
        let f = inputs[0].data();
        Ok(Tensor::vector(
            self.stencils
                .iter()
                .map(|(nodes, w)| (0..4).map(|a| w[a] * f[nodes[a]]).sum())
                .collect(),
        ))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let mut gf = vec![0.0; self.n_nodes];
        for ((nodes, w), gv) in self.stencils.iter().zip(g) {
            for a in 0..4 {
                gf[nodes[a]] += w[a] * gv;
            }
        }
        Ok(vec![Some(gf)])
    }
}

pub fn interpolate_at_points(
    tape: &mut Tape,
    grid: &StructuredGrid,
    field: NodeId,
    points: &[[f64; 2]],
) -> Result<NodeId> {
    let stencils = points
        .iter()
        .map(|&[x, y]| {
            let (e, w) = grid.locate(x, y)?;
            Ok((grid.elements()[e], w))
        })
        .collect::<Result<Vec<_>>>()?;
    tape.apply(
        Interpolate {
            stencils,
            n_nodes: grid.node_count(),
        },
        &[field],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{lu_factorize, solve_differentiable};
    use crate::tape::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nu_ref(x: f64, y: f64) -> f64 {
        1.0 + 6.0 * x * x + x / (1.0 + 2.0 * y * y)
    }

    #[test]
    fn grid_counts_and_orientation() {
        let g = StructuredGrid::new(4, 3).unwrap();
        assert_eq!(g.node_count(), 12);
        assert_eq!(g.element_count(), 6);
        for e in g.elements() {
            let p: Vec<[f64; 2]> = e.iter().map(|&n| g.coords()[n]).collect();
            let area2: f64 = (0..4)
                .map(|a| {
                    let b = (a + 1) % 4;
                    p[a][0] * p[b][1] - p[b][0] * p[a][1]
                })
                .sum();
            assert!(area2 > 0.0, "element not counterclockwise");
        }
        assert!(StructuredGrid::new(1, 5).is_err());
    }

    #[test]
    fn quadrature_partition_of_unity() {
        let q = QuadraturePointSet::gauss_2x2(0.1, 0.2);
        assert_eq!(q.weights.iter().sum::<f64>(), 4.0);
        for qp in 0..4 {
            assert!((q.values[qp].iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let gsum: [f64; 2] = [0, 1].map(|k| q.gradients[qp].iter().map(|g| g[k]).sum());
            assert!(gsum[0].abs() < 1e-13 && gsum[1].abs() < 1e-13);
        }
    }

    #[test]
    fn unit_square_element_stiffness() {
        let g = StructuredGrid::new(2, 2).unwrap();
        let mut tape = Tape::new();
        let nu = tape.constant(Tensor::vector(vec![1.0; 4]));
        let k = assemble_diffusion_block(&mut tape, &g, nu).unwrap().to_matrix(&tape);
        let expect = |a: usize, b: usize| match (a as i64 - b as i64).rem_euclid(4) {
            0 => 2.0 / 3.0,
            2 => -1.0 / 3.0,
            _ => -1.0 / 6.0,
        };
        let local = g.elements()[0];
        for a in 0..4 {
            let mut row = 0.0;
            for b in 0..4 {
                let kab = k.get(local[a], local[b]);
                assert!((kab - expect(a, b)).abs() < 1e-14, "({a},{b})");
                row += kab;
            }
            assert!(row.abs() < 1e-14);
        }
        let zero = tape.constant(Tensor::vector(vec![0.0; 4]));
        let k0 = assemble_diffusion_block(&mut tape, &g, zero).unwrap();
        assert!(tape.value(k0.values).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_coefficient_stiffness_is_symmetric_psd_with_constant_nullspace() {
        let g = StructuredGrid::new(5, 4).unwrap();
        let k = g.stiffness_matrix();
        let n = g.node_count();
        let d = k.to_dense();
        for i in 0..n {
            for j in 0..n {
                assert!((d[i * n + j] - d[j * n + i]).abs() < 1e-14);
            }
        }
        let ones = k.spmv(&vec![1.0; n]).unwrap();
        assert!(ones.iter().all(|v| v.abs() < 1e-13));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kx = k.spmv(&x).unwrap();
            assert!(x.iter().zip(&kx).map(|(a, b)| a * b).sum::<f64>() >= -1e-13);
        }
    }

    fn random_weights(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn block_sum_grad_check(make: impl Fn(&mut Tape, NodeId) -> Result<NodeId>, theta0: &[f64]) -> f64 {
        let f = |theta: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.variable(Tensor::vector(theta.to_vec()));
            let vals = make(&mut tape, x)?;
            let l = tape.sum(vals)?;
            let g = tape.backward(l)?;
            Ok((tape.value(l).item(), g.get(x).unwrap().data().to_vec()))
        };
        finite_difference_check(f, theta0, 1e-5, None).unwrap().max_rel_error
    }

    #[test]
    fn diffusion_block_gradient_matches_fd() {
        let g = StructuredGrid::new(6, 6).unwrap();
        let nu = NodalField::from_fn(&g, nu_ref);
        // Plain sum of entries is identically zero (rows sum to zero), so weight them.
        let weights = random_weights(g.pattern().nnz(), 2);
        let err = block_sum_grad_check(
            |tape, x| {
                let b = assemble_diffusion_block(tape, &g, x)?;
                let w = tape.constant(Tensor::vector(weights.clone()));
                tape.mul(b.values, w)
            },
            nu.values(),
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn convection_blocks_zero_and_constant_velocity() {
        let g = StructuredGrid::new(4, 4).unwrap();
        let n = g.node_count();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0; n]));
        let c = assemble_convection_blocks(&mut tape, &g, z, z).unwrap();
        for b in [&c.advection, &c.du_dx, &c.du_dy, &c.dv_dx, &c.dv_dy] {
            assert!(tape.value(b.values).data().iter().all(|&v| v == 0.0));
        }
        let one = tape.constant(Tensor::vector(vec![1.0; n]));
        let c = assemble_convection_blocks(&mut tape, &g, one, z).unwrap();
        let dx = assemble_grad_div_blocks(&g).div_x;
        for (a, b) in tape.value(c.advection.values).data().iter().zip(dx.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        for b in [&c.du_dx, &c.du_dy] {
            assert!(tape.value(b.values).data().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn convection_gradient_matches_fd() {
        let g = StructuredGrid::new(5, 5).unwrap();
        let n = g.node_count();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let theta0: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..g.pattern().nnz()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = block_sum_grad_check(
            |tape, x| {
                let u = tape.gather(x, (0..n).collect())?;
                let v = tape.gather(x, (n..2 * n).collect())?;
                let c = assemble_convection_blocks(tape, &g, u, v)?;
                let w = tape.constant(Tensor::vector(weights.clone()));
                let mut acc = tape.mul(c.advection.values, w)?;
                for b in [&c.du_dx, &c.du_dy, &c.dv_dx, &c.dv_dy] {
                    let wb = tape.mul(b.values, w)?;
                    acc = tape.add(acc, wb)?;
                }
                Ok(acc)
            },
            &theta0,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_div_blocks() {
        let g = StructuredGrid::new(5, 5).unwrap();
        let n = g.node_count();
        let gd = assemble_grad_div_blocks(&g);
        let gp = gd.grad_x.spmv(&vec![1.0; n]).unwrap();
        for node in 0..n {
            if !g.is_boundary(node) {
                assert!(gp[node].abs() < 1e-15);
            }
        }
        let x = NodalField::from_fn(&g, |x, _| x);
        let dxu = gd.div_x.spmv(x.values()).unwrap();
        let m1 = g.mass_matrix().spmv(&vec![1.0; n]).unwrap();
        for (a, b) in dxu.iter().zip(&m1) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(gd.div_y.spmv(&vec![0.0; n]).unwrap().iter().all(|&v| v == 0.0));
        // div is the transpose of grad
        for (i, j) in g.pattern().entries() {
            assert_eq!(gd.div_x.get(i, j), gd.grad_x.get(j, i));
        }
    }

    #[test]
    fn one_element_dx_on_linear_field_matches_dense_quadrature() {
        // Dense 5×5 tensor-Gauss oracle, independent of the 2×2 rule.
        let g = StructuredGrid::new(2, 2).unwrap();
        let dx = assemble_grad_div_blocks(&g).div_x;
        let u = NodalField::from_fn(&g, |x, _| x);
        let got = dx.spmv(u.values()).unwrap();
        let pts = [-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664];
        let wts = [0.236_926_885_056_189, 0.478_628_670_499_366, 0.568_888_888_888_889, 0.478_628_670_499_366, 0.236_926_885_056_189];
        for (i, &[x, y]) in g.coords().iter().enumerate() {
            let mut s = 0.0;
            for (px, wx) in pts.iter().zip(wts) {
                for (py, wy) in pts.iter().zip(wts) {
                    let (qx, qy) = ((px + 1.0) / 2.0, (py + 1.0) / 2.0);
                    let phi = (if x == 0.0 { 1.0 - qx } else { qx }) * (if y == 0.0 { 1.0 - qy } else { qy });
                    s += wx * wy * 0.25 * phi;
                }
            }
            assert!((got[i] - s).abs() < 1e-12, "{} vs {}", got[i], s);
        }
    }

    #[test]
    fn advection_diffusion_limits_and_gradient() {
        let g = StructuredGrid::new(6, 6).unwrap();
        let n = g.node_count();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0; n]));
        let one = tape.constant(Tensor::vector(vec![1.0; n]));
        let a = assemble_advection_diffusion(&mut tape, &g, z, z, one, 1.0).unwrap();
        for (x, y) in tape.value(a.values).data().iter().zip(g.stiffness_matrix().values()) {
            assert!((x - y).abs() < 1e-14);
        }
        let a = assemble_advection_diffusion(&mut tape, &g, one, z, z, 2.0).unwrap();
        for (x, y) in tape.value(a.values).data().iter().zip(assemble_grad_div_blocks(&g).div_x.values()) {
            assert!((x - 2.0 * y).abs() < 1e-14);
        }

        let k = NodalField::from_fn(&g, |x, y| 1.0 + x * x + x / (1.0 + y * y));
        let u = NodalField::from_fn(&g, |x, y| (3.0 * x).sin() * y);
        let weights = random_weights(g.pattern().nnz(), 3);
        let err = block_sum_grad_check(
            |tape, x| {
                let uu = tape.constant(Tensor::vector(u.values().to_vec()));
                let b = assemble_advection_diffusion(tape, &g, uu, uu, x, 1.0)?;
                let w = tape.constant(Tensor::vector(weights.clone()));
                tape.mul(b.values, w)
            },
            k.values(),
        );
        assert!(err < 1e-6, "{err}");
    }

    fn poisson_with_boundary(g: &StructuredGrid, exact: impl Fn(f64, f64) -> f64, all_nodes: bool) -> Vec<f64> {
        let mut tape = Tape::new();
        let n = g.node_count();
        let one = tape.constant(Tensor::vector(vec![1.0; n]));
        let k = assemble_diffusion_block(&mut tape, g, one).unwrap();
        let rhs = tape.constant(Tensor::vector(vec![0.0; n]));
        let mut spec = DirichletSpec::new();
        for node in 0..n {
            if all_nodes || g.is_boundary(node) {
                let [x, y] = g.coords()[node];
                spec.push(node, Component::T, exact(x, y)).unwrap();
            }
        }
        let layout = DofLayout::scalar(Component::T);
        let (kc, bc) = apply_dirichlet(&mut tape, &layout, &k, rhs, &spec).unwrap();
        let sol = solve_differentiable(&mut tape, &kc, bc).unwrap();
        tape.value(sol).data().to_vec()
    }

    #[test]
    fn patch_test_reproduces_linear_fields() {
        for (nx, ny) in [(5, 5), (7, 4), (21, 21)] {
            let g = StructuredGrid::new(nx, ny).unwrap();
            for all in [false, true] {
                let sol = poisson_with_boundary(&g, |x, y| x + y, all);
                for (s, &[x, y]) in sol.iter().zip(g.coords()) {
                    assert!((s - (x + y)).abs() < 1e-12);
                }
            }
            let sol = poisson_with_boundary(&g, |x, y| 0.3 - 2.0 * x + 0.7 * y, false);
            for (s, &[x, y]) in sol.iter().zip(g.coords()) {
                assert!((s - (0.3 - 2.0 * x + 0.7 * y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dirichlet_empty_and_duplicate() {
        let g = StructuredGrid::new(3, 3).unwrap();
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::vector(vec![1.0; 9]));
        let k = assemble_diffusion_block(&mut tape, &g, one).unwrap();
        let (kc, b) = apply_dirichlet(&mut tape, &DofLayout::scalar(Component::T), &k, one, &DirichletSpec::new()).unwrap();
        assert_eq!(kc.values, k.values);
        assert_eq!(b, one);
        let mut spec = DirichletSpec::new();
        spec.push(0, Component::U, 1.0).unwrap();
        assert!(matches!(spec.push(0, Component::U, 2.0), Err(Error::Contract(_))));
    }

    #[test]
    fn dirichlet_ops_are_differentiable() {
        let g = StructuredGrid::new(4, 4).unwrap();
        let n = g.node_count();
        let mut spec = DirichletSpec::new();
        for node in g.boundary_nodes(Boundary::Left) {
            spec.push(node, Component::T, 0.5 + node as f64 * 0.1).unwrap();
        }
        let layout = DofLayout::scalar(Component::T);
        let k = NodalField::from_fn(&g, |x, y| 1.0 + x + y * y);
        let f = |theta: &[f64]| {
            let mut tape = Tape::new();
            let kn = tape.variable(Tensor::vector(theta.to_vec()));
            let a = assemble_diffusion_block(&mut tape, &g, kn)?;
            let b = tape.constant(Tensor::vector(vec![1.0; n]));
            let (ac, bc) = apply_dirichlet(&mut tape, &layout, &a, b, &spec)?;
            let t = solve_differentiable(&mut tape, &ac, bc)?;
            let w = tape.constant(Tensor::vector((0..n).map(|i| (i as f64).sin()).collect()));
            let l = tape.dot(t, w)?;
            let gr = tape.backward(l)?;
            Ok((tape.value(l).item(), gr.get(kn).unwrap().data().to_vec()))
        };
        let check = finite_difference_check(f, k.values(), 1e-6, None).unwrap();
        assert!(check.max_rel_error < 1e-6, "{}", check.max_rel_error);
    }

    #[test]
    fn interpolation_exact_at_nodes_and_on_linears() {
        let g = StructuredGrid::new(6, 5).unwrap();
        let f = NodalField::from_fn(&g, |x, y| (x * 3.0).sin() + y * y);
        let nodes: Vec<[f64; 2]> = g.coords().to_vec();
        assert_eq!(f.interpolate(&nodes).unwrap(), f.values());
        let lin = NodalField::from_fn(&g, |x, _| x);
        let v = lin.interpolate(&[[0.3, 0.7]]).unwrap()[0];
        assert!((v - 0.3).abs() < 1e-15);
        assert!(matches!(lin.interpolate(&[[1.2, 0.1]]), Err(Error::Contract(_))));
    }

    #[test]
    fn interpolation_matches_shape_function_oracle() {
        let g = StructuredGrid::new(7, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..g.node_count()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = NodalField::new(&g, vals.clone()).unwrap();
        let pts: Vec<[f64; 2]> = (0..50).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let got = f.interpolate(&pts).unwrap();
        let (hx, hy) = g.spacing();
        for (p, v) in pts.iter().zip(got) {
            // Oracle: direct tensor-product hat functions over all nodes.
            let mut s = 0.0;
            for (k, &[xn, yn]) in g.coords().iter().enumerate() {
                let wx = (1.0 - (p[0] - xn).abs() / hx).max(0.0);
                let wy = (1.0 - (p[1] - yn).abs() / hy).max(0.0);
                s += vals[k] * wx * wy;
            }
            assert!((s - v).abs() < 1e-14, "{s} vs {v}");
        }

        let mut tape = Tape::new();
        let fx = tape.variable(Tensor::vector(vals));
        let out = interpolate_at_points(&mut tape, &g, fx, &pts).unwrap();
        let l = tape.sum(out).unwrap();
        let gr = tape.backward(l).unwrap();
        let total: f64 = gr.get(fx).unwrap().data().iter().sum();
        assert!((total - 50.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let g = StructuredGrid::new(5, 4).unwrap();
        let f = NodalField::from_fn(&g, |x, y| (x * 17.3).exp() / (1.0 + y) - 1.0 / 3.0);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,y,value\n"));
        assert_eq!(text.lines().count(), 21);
        let back = NodalField::read_csv(&g, buf.as_slice()).unwrap();
        assert_eq!(back.values(), f.values());
    }

    #[test]
    fn pressure_pin_raises_rank_by_one() {
        // Stokes-type saddle system on a 4×4 grid, velocity fixed on the boundary.
        let g = StructuredGrid::new(4, 4).unwrap();
        let n = g.node_count();
        let k = g.stiffness_matrix();
        let gd = assemble_grad_div_blocks(&g);
        let lap = g.stiffness_matrix();
        let m = 3 * n;
        let mut dense = vec![0.0; m * m];
        for (idx, (i, j)) in g.pattern().entries().enumerate() {
            let kk = k.values()[idx];
            dense[(3 * i) * m + 3 * j] += kk;
            dense[(3 * i + 1) * m + 3 * j + 1] += kk;
            dense[(3 * i) * m + 3 * j + 2] -= gd.grad_x.values()[idx];
            dense[(3 * i + 1) * m + 3 * j + 2] -= gd.grad_y.values()[idx];
            dense[(3 * i + 2) * m + 3 * j] += gd.div_x.values()[idx];
            dense[(3 * i + 2) * m + 3 * j + 1] += gd.div_y.values()[idx];
            dense[(3 * i + 2) * m + 3 * j + 2] += 0.01 * lap.values()[idx] / 9.0;
        }
        let constrain = |d: &mut Vec<f64>, dof: usize| {
            for c in 0..m {
                d[dof * m + c] = 0.0;
                d[c * m + dof] = 0.0;
            }
            d[dof * m + dof] = 1.0;
        };
        for node in g.all_boundary_nodes() {
            constrain(&mut dense, 3 * node);
            constrain(&mut dense, 3 * node + 1);
        }
        let unpinned = dense_rank(&dense, m);
        constrain(&mut dense, 2);
        let pinned = dense_rank(&dense, m);
        assert_eq!(unpinned + 1, pinned);
        assert_eq!(pinned, m);
    }

    fn dense_rank(a: &[f64], n: usize) -> usize {
        let mut a = a.to_vec();
        let scale = a.iter().fold(0.0_f64, |s, v| s.max(v.abs()));
        let tol = scale * 1e-10;
        let mut rank = 0;
        let mut row = 0;
        for col in 0..n {
            let Some(p) = (row..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs())) else {
                break;
            };
            if a[p * n + col].abs() <= tol {
                continue;
            }
            for c in 0..n {
                a.swap(row * n + c, p * n + c);
            }
            for r in row + 1..n {
                let f = a[r * n + col] / a[row * n + col];
                for c in col..n {
                    a[r * n + c] -= f * a[row * n + c];
                }
            }
            row += 1;
            rank += 1;
        }
        rank
    }

    #[test]
    fn lu_on_grid_pattern() {
        let g = StructuredGrid::new(6, 6).unwrap();
        let mut k = g.stiffness_matrix();
        let m = g.mass_matrix();
        for (a, b) in k.values_mut().iter_mut().zip(m.values()) {
            *a += b;
        }
        let b: Vec<f64> = (0..36).map(|i| i as f64).collect();
        let x = lu_factorize(&k).unwrap().solve(&b).unwrap();
        let r = k.spmv(&x).unwrap();
        for (p, q) in r.iter().zip(&b) {
            assert!((p - q).abs() < 1e-10);
        }
    }
}
