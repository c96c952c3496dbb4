//! Parameterizations of an unknown coefficient field: a small tanh MLP over
//! `(x, y)`, a layered MLP over `x` alone, and one free value per node.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::StructuredGrid;
use crate::tape::{expect_inputs, NodeId, Op, Tape, Tensor};

pub const HIDDEN_WIDTH: usize = 20;
pub const HIDDEN_LAYERS: usize = 3;

/// Physical coefficients are floored here before they reach the assembly.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// MLP of `(x, y)`.
    Dnn2d,
    /// MLP of `x` only.
    DnnLayered,
    /// One parameter per grid node.
    Pointwise,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dnn2d => "dnn2d",
            Variant::DnnLayered => "dnn_layered",
            Variant::Pointwise => "pointwise",
        }
    }

    fn input_dim(self) -> Option<usize> {
        match self {
            Variant::Dnn2d => Some(2),
            Variant::DnnLayered => Some(1),
            Variant::Pointwise => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dnn2d" => Ok(Variant::Dnn2d),
            "dnn_layered" => Ok(Variant::DnnLayered),
            "pointwise" => Ok(Variant::Pointwise),
            other => Err(Error::Config(format!("unknown field model `{other}`"))),
        }
    }
}

/// Layer widths of a fully connected network and where each layer's
/// parameters sit in the flat vector: weights (row-major, `fan_out × fan_in`)
/// followed by biases, layer after layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl MlpLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::contract(format!("invalid layer sizes {sizes:?}")));
        }
        let mut offsets = vec![0];
        for w in sizes.windows(2) {
            let last = *offsets.last().unwrap();
            offsets.push(last + w[0] * w[1] + w[1]);
        }
        Ok(Self { sizes, offsets })
    }

    /// `[d_in, 20, 20, 20, 1]`
    pub fn standard(input_dim: usize) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend([HIDDEN_WIDTH; HIDDEN_LAYERS]);
        sizes.push(1);
        Self::new(sizes).expect("static sizes")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// `(weight range, bias range)` of layer `l` in the flat vector.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start = self.offsets[l];
        let w_end = start + self.sizes[l] * self.sizes[l + 1];
        (start..w_end, w_end..self.offsets[l + 1])
    }

    fn check(&self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!(
                "{} parameters for a network that needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    /// Forward pass for one point, keeping every layer's output.
    fn activations(&self, flat: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![input.to_vec()];
        for l in 0..self.layer_count() {
            let (wr, br) = self.layer_ranges(l);
            let (w, b) = (&flat[wr], &flat[br]);
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let prev = acts.last().unwrap();
            let last_layer = l + 1 == self.layer_count();
            let next = (0..fan_out)
                .map(|o| {
                    let z = b[o] + (0..fan_in).map(|i| w[o * fan_in + i] * prev[i]).sum::<f64>();
                    if last_layer {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(next);
        }
        acts
    }

    pub fn eval(&self, flat: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check(flat)?;
        if input.len() != self.input_dim() {
            return Err(Error::contract("network input has the wrong dimension"));
        }
        Ok(self.activations(flat, input).pop().unwrap())
    }

    /// Accumulates `d(out · g_out)/d(params)` for one point into `grad`.
    fn backprop(&self, flat: &[f64], input: &[f64], g_out: &[f64], grad: &mut [f64]) {
        let acts = self.activations(flat, input);
        let mut delta = g_out.to_vec();
        for l in (0..self.layer_count()).rev() {
            let (wr, br) = self.layer_ranges(l);
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let prev = &acts[l];
            for o in 0..fan_out {
                grad[br.start + o] += delta[o];
                for i in 0..fan_in {
                    grad[wr.start + o * fan_in + i] += delta[o] * prev[i];
                }
            }
            if l == 0 {
                break;
            }
            let w = &flat[wr];
            delta = (0..fan_in)
                .map(|i| {
                    let back: f64 = (0..fan_out).map(|o| w[o * fan_in + i] * delta[o]).sum();
                    back * (1.0 - prev[i] * prev[i])
                })
                .collect();
        }
    }
}

/// Structured view of a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn unflatten(layout: &MlpLayout, flat: &[f64]) -> Result<Self> {
        layout.check(flat)?;
        let (weights, biases) = (0..layout.layer_count())
            .map(|l| {
                let (wr, br) = layout.layer_ranges(l);
                (flat[wr].to_vec(), flat[br].to_vec())
            })
            .unzip();
        Ok(Self { weights, biases })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

/// Batched MLP evaluation: one scalar output per point.
struct MlpEval {
    layout: MlpLayout,
    points: Vec<Vec<f64>>,
}

impl Op for MlpEval {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 1)?;
        let flat = inputs[0].data();
        self.layout.check(flat)?;
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: self.name().into(),
                detail: format!("parameter {i} is {}", flat[i]),
            });
        }
        let out = self
            .points
            .iter()
            .map(|p| self.layout.activations(flat, p).pop().unwrap()[0])
            .collect();
        Ok(Tensor::vector(out))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let flat = inputs[0].data();
        let mut grad = vec![0.0; flat.len()];
        for (p, gp) in self.points.iter().zip(g) {
            if *gp != 0.0 {
                self.layout.backprop(flat, p, &[*gp], &mut grad);
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// Evaluates a scalar-output MLP at a batch of points.
pub fn mlp_eval(tape: &mut Tape, layout: &MlpLayout, params: NodeId, points: &[Vec<f64>]) -> Result<NodeId> {
    if layout.output_dim() != 1 {
        return Err(Error::contract("mlp_eval needs a scalar-output network"));
    }
    if let Some(p) = points.iter().find(|p| p.len() != layout.input_dim()) {
        return Err(Error::contract(format!(
            "point of dimension {} for a network with input dimension {}",
            p.len(),
            layout.input_dim()
        )));
    }
    tape.apply(
        MlpEval {
            layout: layout.clone(),
            points: points.to_vec(),
        },
        &[params],
    )
}

/// Maps raw network output to a physical value: `offset + scale * raw`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputTransform {
    pub offset: f64,
    pub scale: f64,
}

impl Default for OutputTransform {
    fn default() -> Self {
        Self { offset: 0.0, scale: 1.0 }
    }
}

impl OutputTransform {
    pub fn offset(offset: f64) -> Self {
        Self { offset, scale: 1.0 }
    }

    pub fn apply(&self, raw: f64) -> f64 {
        self.offset + self.scale * raw
    }
}

/// A coefficient-field parameterization together with its current parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel {
    pub variant: Variant,
    pub layout: Option<MlpLayout>,
    pub params: Vec<f64>,
    pub transform: OutputTransform,
    pub seed: u64,
}

/// Xavier-uniform weights scaled by `init_scale`, zero biases. Pointwise
/// models start at the transform offset on every one of `node_count` nodes.
pub fn init_params(
    variant: Variant,
    seed: u64,
    init_scale: f64,
    transform: OutputTransform,
    node_count: usize,
) -> FieldModel {
    match variant.input_dim() {
        None => FieldModel {
            variant,
            layout: None,
            params: vec![transform.offset; node_count],
            transform: OutputTransform::default(),
            seed,
        },
        Some(d) => {
            let layout = MlpLayout::standard(d);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = vec![0.0; layout.param_count()];
            for l in 0..layout.layer_count() {
                let (fan_in, fan_out) = (layout.sizes[l], layout.sizes[l + 1]);
                let bound = init_scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
                let (wr, _) = layout.layer_ranges(l);
                for w in &mut params[wr] {
                    *w = if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 };
                }
            }
            FieldModel {
                variant,
                layout: Some(layout),
                params,
                transform,
                seed,
            }
        }
    }
}

impl FieldModel {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Nodal coefficient values (before any positivity floor) on the tape.
    pub fn eval_on_grid(&self, tape: &mut Tape, params: NodeId, grid: &StructuredGrid) -> Result<NodeId> {
        if tape.value(params).len() != self.params.len() {
            return Err(Error::contract("parameter node does not match the model"));
        }
        match (self.variant, &self.layout) {
            (Variant::Pointwise, _) => {
                if self.params.len() != grid.node_count() {
                    return Err(Error::contract(format!(
                        "pointwise model has {} values for {} nodes",
                        self.params.len(),
                        grid.node_count()
                    )));
                }
                Ok(params)
            }
            (Variant::Dnn2d, Some(layout)) => {
                let pts: Vec<Vec<f64>> = grid.coords().iter().map(|p| p.to_vec()).collect();
                let raw = mlp_eval(tape, layout, params, &pts)?;
                tape.affine(raw, self.transform.scale, self.transform.offset)
            }
            (Variant::DnnLayered, Some(layout)) => {
                // Evaluate once per grid column, then copy down each column.
                let (hx, _) = grid.spacing();
                let pts: Vec<Vec<f64>> = (0..grid.nx()).map(|i| vec![i as f64 * hx]).collect();
                let raw = mlp_eval(tape, layout, params, &pts)?;
                let cols = tape.affine(raw, self.transform.scale, self.transform.offset)?;
                tape.gather(cols, (0..grid.node_count()).map(|n| n % grid.nx()).collect())
            }
            _ => Err(Error::contract("network model without a layout")),
        }
    }

    /// Plain evaluation on the grid without a tape.
    pub fn field_values(&self, grid: &StructuredGrid) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(self.params.clone()));
        let v = self.eval_on_grid(&mut tape, p, grid)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Writes the `variant,layer_sizes,seed` header line followed by the
    /// parameters as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let sizes = match &self.layout {
            Some(l) => l.sizes().iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-"),
            None => self.params.len().to_string(),
        };
        writeln!(w, "{},{},{}", self.variant, sizes, self.seed)?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a checkpoint; the output transform is not stored and must be supplied.
    pub fn read_checkpoint<R: BufRead>(mut r: R, transform: OutputTransform) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let parts: Vec<&str> = header.trim_end().split(',').collect();
        let [variant, sizes, seed] = parts[..] else {
            return Err(Error::Io(format!("bad checkpoint header `{}`", header.trim_end())));
        };
        let variant: Variant = variant.parse()?;
        let seed: u64 = seed.parse().map_err(|_| Error::Io(format!("bad seed `{seed}`")))?;
        let sizes: Vec<usize> = sizes
            .split('-')
            .map(|s| s.parse().map_err(|_| Error::Io(format!("bad layer size `{s}`"))))
            .collect::<Result<_>>()?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Io("checkpoint payload is not a whole number of f64".into()));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (layout, transform) = match variant {
            Variant::Pointwise => {
                if sizes != [params.len()] {
                    return Err(Error::Io("pointwise checkpoint length mismatch".into()));
                }
                (None, OutputTransform::default())
            }
            _ => {
                let layout = MlpLayout::new(sizes)?;
                layout.check(&params)?;
                (Some(layout), transform)
            }
        };
        Ok(Self {
            variant,
            layout,
            params,
            transform,
            seed,
        })
    }
}

/// Floors a coefficient field at [`POSITIVITY_FLOOR`]; returns the new node
/// and how many entries were clamped.
pub fn clamp_positive(tape: &mut Tape, field: NodeId) -> Result<(NodeId, usize)> {
    let clamped = tape.value(field).data().iter().filter(|&&v| v < POSITIVITY_FLOOR).count();
    Ok((tape.clamp_min(field, POSITIVITY_FLOOR)?, clamped))
}

/// Tracks how often the positivity floor fires across optimizer steps.
#[derive(Clone, Debug)]
pub struct ClampMonitor {
    pub max_fraction: f64,
    pub max_consecutive: usize,
    consecutive: usize,
}

impl Default for ClampMonitor {
    fn default() -> Self {
        Self {
            max_fraction: 0.1,
            max_consecutive: 10,
            consecutive: 0,
        }
    }
}

impl ClampMonitor {
    pub fn record(&mut self, clamped: usize, total: usize) -> Result<()> {
        if total > 0 && clamped as f64 > self.max_fraction * total as f64 {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        if self.consecutive >= self.max_consecutive {
            return Err(Error::Diverged(format!(
                "more than {:.0}% of nodes clamped for {} consecutive steps",
                100.0 * self.max_fraction,
                self.consecutive
            )));
        }
        Ok(())
    }
}
