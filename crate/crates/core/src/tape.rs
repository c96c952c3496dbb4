//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every value produced during a forward simulation lives on a [`Tape`] as a
//! node. A node remembers the [`Op`] that produced it and the nodes it read,
//! so [`Tape::backward`] can walk the list in reverse and push gradients from
//! a scalar loss back to the trainable variables. Ops are coarse: a whole
//! finite-element assembly or a sparse solve is a single node, with its
//! adjoint written by hand.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// A differentiable operator. The struct implementing it carries whatever
/// context the backward pass needs (sparsity patterns, saved activations).
pub trait Op {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian product: given `dL/d(output)`, return `dL/d(input)` for
    /// each input, or `None` for inputs the op is not differentiable in.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

struct Node {
    op: Option<Box<dyn Op>>,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computational graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    variables: Vec<NodeId>,
}

/// Result of [`Tape::backward`]: one gradient per trainable variable.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_variable: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_variable.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_variable.iter().map(|(k, v)| (*k, v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a trainable leaf.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        let id = self.push_leaf(value, true);
        self.variables.push(id);
        id
    }

    /// Adds a fixed leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            needs_grad,
        });
        id
    }

    pub fn variables(&self) -> &[NodeId] {
        &self.variables
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Whether any trainable variable is upstream of `id`.
    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_inputs(&self, inputs: &[NodeId]) -> Result<()> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Graph(format!(
                    "input {id} does not exist (tape has {} nodes)",
                    self.nodes.len()
                )));
            }
        }
        Ok(())
    }

    /// Runs `op` forward on the given inputs and records the result.
    pub fn apply<O: Op + 'static>(&mut self, op: O, inputs: &[NodeId]) -> Result<NodeId> {
        self.check_inputs(inputs)?;
        let output = {
            let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            op.forward(&values)?
        };
        self.record(Box::new(op), inputs, output)
    }

    /// Records an already computed output produced by `op` from `inputs`.
    pub fn record(&mut self, op: Box<dyn Op>, inputs: &[NodeId], output: Tensor) -> Result<NodeId> {
        self.check_inputs(inputs)?;
        if let Some(at) = output.first_non_finite() {
            return Err(Error::Numeric {
                op: op.name().to_string(),
                detail: format!("forward output entry {at} is {}", output.data[at]),
            });
        }
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value: output,
            needs_grad,
        });
        Ok(id)
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check_inputs(&[loss])?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, node {loss} has shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut accum: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        accum[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = accum[idx].take() else {
                continue;
            };
            let Some(op) = &node.op else {
                out.by_variable.insert(
                    NodeId(idx),
                    Tensor {
                        shape: node.value.shape.clone(),
                        data: grad,
                    },
                );
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Graph(format!(
                    "`{}` returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                if g.len() != self.nodes[input.0].value.len() {
                    return Err(Error::Graph(format!(
                        "`{}` returned a gradient of length {} for an input of length {}",
                        op.name(),
                        g.len(),
                        self.nodes[input.0].value.len()
                    )));
                }
                if let Some(at) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        op: op.name().to_string(),
                        detail: format!("gradient entry {at} for input {input} is {}", g[at]),
                    });
                }
                match &mut accum[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for &v in &self.variables {
            if v.0 <= loss.0 && !out.by_variable.contains_key(&v) {
                out.by_variable
                    .insert(v, Tensor::zeros(self.nodes[v.0].value.shape.clone()));
            }
        }
        Ok(out)
    }
}

pub(crate) fn expect_inputs(name: &str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Graph(format!(
            "`{name}` expects {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

fn same_len(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "`{name}` operands differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

struct Add;

impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 2)?;
        same_len(self.name(), inputs[0], inputs[1])?;
        let data = inputs[0].data.iter().zip(&inputs[1].data).map(|(a, b)| a + b).collect();
        Tensor::new(inputs[0].shape.clone(), data)
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(g.to_vec()), Some(g.to_vec())])
    }
}

struct Sub;

impl Op for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 2)?;
        same_len(self.name(), inputs[0], inputs[1])?;
        let data = inputs[0].data.iter().zip(&inputs[1].data).map(|(a, b)| a - b).collect();
        Tensor::new(inputs[0].shape.clone(), data)
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())])
    }
}

/// `a * x + b` with fixed scalars.
struct Affine {
    scale: f64,
    shift: f64,
}

impl Op for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 1)?;
        let data = inputs[0].data.iter().map(|v| self.scale * v + self.shift).collect();
        Tensor::new(inputs[0].shape.clone(), data)
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(g.iter().map(|v| self.scale * v).collect())])
    }
}

struct Mul;

impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 2)?;
        same_len(self.name(), inputs[0], inputs[1])?;
        let data = inputs[0].data.iter().zip(&inputs[1].data).map(|(a, b)| a * b).collect();
        Tensor::new(inputs[0].shape.clone(), data)
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let ga = g.iter().zip(&inputs[1].data).map(|(g, b)| g * b).collect();
        let gb = g.iter().zip(&inputs[0].data).map(|(g, a)| g * a).collect();
        Ok(vec![Some(ga), Some(gb)])
    }
}

struct Sum;

impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 1)?;
        Ok(Tensor::scalar(inputs[0].data.iter().sum()))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(vec![g[0]; inputs[0].len()])])
    }
}

struct Dot;

impl Op for Dot {
    fn name(&self) -> &'static str {
        "dot"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 2)?;
        same_len(self.name(), inputs[0], inputs[1])?;
        Ok(Tensor::scalar(
            inputs[0].data.iter().zip(&inputs[1].data).map(|(a, b)| a * b).sum(),
        ))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let ga = inputs[1].data.iter().map(|b| g[0] * b).collect();
        let gb = inputs[0].data.iter().map(|a| g[0] * a).collect();
        Ok(vec![Some(ga), Some(gb)])
    }
}

/// Dense matrix (shape `[m, n]`) times vector (length `n`).
struct MatVec;

impl Op for MatVec {
    fn name(&self) -> &'static str {
        "matvec"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 2)?;
        let (a, x) = (inputs[0], inputs[1]);
        let &[m, n] = a.shape() else {
            return Err(Error::contract(format!("matvec needs a 2-d matrix, got {:?}", a.shape())));
        };
        if x.len() != n {
            return Err(Error::contract(format!(
                "matvec: matrix has {n} columns, vector has {} entries",
                x.len()
            )));
        }
        let data = (0..m)
            .map(|i| a.data[i * n..(i + 1) * n].iter().zip(&x.data).map(|(a, b)| a * b).sum())
            .collect();
        Ok(Tensor::vector(data))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (a, x) = (inputs[0], inputs[1]);
        let n = a.shape()[1];
        let mut ga = vec![0.0; a.len()];
        let mut gx = vec![0.0; n];
        for (i, gi) in g.iter().enumerate() {
            for j in 0..n {
                ga[i * n + j] = gi * x.data[j];
                gx[j] += gi * a.data[i * n + j];
            }
        }
        Ok(vec![Some(ga), Some(gx)])
    }
}

/// Picks entries by index; repeated indices accumulate in the adjoint.
struct Gather {
    indices: Vec<usize>,
}

impl Op for Gather {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 1)?;
        let src = &inputs[0].data;
        if let Some(bad) = self.indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for length {}",
                src.len()
            )));
        }
        Ok(Tensor::vector(self.indices.iter().map(|&i| src[i]).collect()))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let mut gi = vec![0.0; inputs[0].len()];
        for (&i, gv) in self.indices.iter().zip(g) {
            gi[i] += gv;
        }
        Ok(vec![Some(gi)])
    }
}

struct Concat;

impl Op for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::vector(
            inputs.iter().flat_map(|t| t.data.iter().copied()).collect(),
        ))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let mut offset = 0;
        Ok(inputs
            .iter()
            .map(|t| {
                let part = g[offset..offset + t.len()].to_vec();
                offset += t.len();
                Some(part)
            })
            .collect())
    }
}

/// `max(x, floor)` elementwise; clamped entries pass no gradient.
struct ClampMin {
    floor: f64,
}

impl Op for ClampMin {
    fn name(&self) -> &'static str {
        "clamp_min"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 1)?;
        let data = inputs[0].data.iter().map(|&v| v.max(self.floor)).collect();
        Tensor::new(inputs[0].shape.clone(), data)
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let gi = inputs[0]
            .data
            .iter()
            .zip(g)
            .map(|(&v, &g)| if v < self.floor { 0.0 } else { g })
            .collect();
        Ok(vec![Some(gi)])
    }
}

/// Elementwise `1 / x`.
struct Recip;

impl Op for Recip {
    fn name(&self) -> &'static str {
        "recip"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 1)?;
        let data = inputs[0].data.iter().map(|&v| 1.0 / v).collect();
        Tensor::new(inputs[0].shape.clone(), data)
    }
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(out.data.iter().zip(g).map(|(r, g)| -g * r * r).collect())])
    }
}

impl Tape {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Affine { scale: factor, shift: 0.0 }, &[x])
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.apply(Affine { scale, shift }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Sum, &[x])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Dot, &[a, b])
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        self.apply(MatVec, &[a, x])
    }

    pub fn gather(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.apply(Gather { indices }, &[x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Concat, parts)
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.apply(ClampMin { floor }, &[x])
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Recip, &[x])
    }
}

/// Outcome of comparing a reverse-mode gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |g_ad - g_fd| / (|g_fd| + 1e-12)`
    pub max_rel_error: f64,
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference check of `f` at `theta0`.
///
/// `f` returns the loss and its reverse-mode gradient; only the loss is used
/// at the perturbed points. `indices` selects the coordinates to probe (all
/// of them when `None`).
pub fn finite_difference_check<F>(
    mut f: F,
    theta0: &[f64],
    step: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, grad) = f(theta0)?;
    if grad.len() != theta0.len() {
        return Err(Error::contract(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            theta0.len()
        )));
    }
    let indices: Vec<usize> = match indices {
        Some(ix) => ix.to_vec(),
        None => (0..theta0.len()).collect(),
    };
    let mut theta = theta0.to_vec();
    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let mut worst = 0.0_f64;
    for &i in &indices {
        if i >= theta.len() {
            return Err(Error::contract(format!("probe index {i} out of range")));
        }
        let probe = |theta: &[f64], f: &mut F| {
            f(theta)
                .map(|(v, _)| v)
                .map_err(|e| Error::Probe { index: i, source: Box::new(e) })
        };
        theta[i] = theta0[i] + step;
        let plus = probe(&theta, &mut f)?;
        theta[i] = theta0[i] - step;
        let minus = probe(&theta, &mut f)?;
        theta[i] = theta0[i];
        let fd = (plus - minus) / (2.0 * step);
        let rel = (grad[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(rel);
        analytic.push(grad[i]);
        numeric.push(fd);
    }
    Ok(GradCheck {
        indices,
        analytic,
        numeric,
        max_rel_error: worst,
    })
}
