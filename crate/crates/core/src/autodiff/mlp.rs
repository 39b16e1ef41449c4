//! Small fully connected networks recorded onto a [`Tape`].

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var, VarRange};
use crate::error::{Error, Result};

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Output head of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Two-class softmax; the final width must be 2.
    Softmax2,
    /// Independent sigmoid per output coordinate.
    Sigmoid,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Softmax2 => "softmax2",
            Head::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax2" => Ok(Head::Softmax2),
            "sigmoid" => Ok(Head::Sigmoid),
            other => Err(Error::InvalidArgument(format!("unknown head `{other}`"))),
        }
    }
}

/// Shape descriptor of a multilayer perceptron.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activation: Activation,
    head: Head,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, head: Head) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least two layer widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!("layer widths must be positive: {widths:?}")));
        }
        if head == Head::Softmax2 && *widths.last().unwrap() != 2 {
            return Err(Error::InvalidArgument(format!(
                "softmax2 head needs final width 2, got {}",
                widths.last().unwrap()
            )));
        }
        Ok(MlpSpec { widths, activation, head })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Named parameter segments: `layer{l}.weight` (row-major, out × in) then
    /// `layer{l}.bias` for each layer.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::with_capacity(2 * self.layer_count());
        let mut offset = 0;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            out.push(Segment { name: format!("layer{l}.weight"), offset, len: fan_in * fan_out });
            offset += fan_in * fan_out;
            out.push(Segment { name: format!("layer{l}.bias"), offset, len: fan_out });
            offset += fan_out;
        }
        out
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mlp")?;
        for w in &self.widths {
            write!(f, " {w}")?;
        }
        write!(f, " {} {}", self.activation.name(), self.head.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter storage with named segments tiling `[0, len)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        ParamVector { values: vec![0.0; spec.param_count()], segments: spec.segments() }
    }

    pub fn from_values(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, network `{spec}` needs {}",
                values.len(),
                spec.param_count()
            )));
        }
        Ok(ParamVector { values, segments: spec.segments() })
    }

    /// LeCun-normal weights (variance 1/fan_in) and zero biases.
    pub fn init_random<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        for (l, w) in spec.widths.windows(2).enumerate() {
            p.fill_lecun(l, w[0], rng);
        }
        p
    }

    /// First layer starts as one tanh detector per input coordinate,
    /// `tanh(gain * (x_j - threshold))`, plus Gaussian jitter on every weight;
    /// later layers are LeCun-normal. Needs `widths[1] == widths[0]`.
    pub fn init_pixelwise<R: Rng + ?Sized>(
        spec: &MlpSpec,
        gain: f64,
        threshold: f64,
        jitter: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = spec.input_dim();
        if spec.widths.len() < 3 || spec.widths[1] != d {
            return Err(Error::InvalidArgument(format!(
                "pixelwise init needs a hidden layer as wide as the input, got `{spec}`"
            )));
        }
        let mut p = Self::zeros(spec);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let w = p.segment_mut("layer0.weight");
        for (i, wi) in w.iter_mut().enumerate() {
            let (row, col) = (i / d, i % d);
            let diag = if row == col { gain } else { 0.0 };
            *wi = diag + jitter * normal.sample(rng);
        }
        p.segment_mut("layer0.bias").fill(-gain * threshold);
        for (l, w) in spec.widths.windows(2).enumerate().skip(1) {
            p.fill_lecun(l, w[0], rng);
        }
        Ok(p)
    }

    fn fill_lecun<R: Rng + ?Sized>(&mut self, layer: usize, fan_in: usize, rng: &mut R) {
        let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
        for v in self.segment_mut(&format!("layer{layer}.weight")) {
            *v = normal.sample(rng);
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        let s = self.find(name);
        &self.values[s.offset..s.offset + s.len]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [f64] {
        let s = self.find(name).clone();
        &mut self.values[s.offset..s.offset + s.len]
    }

    fn find(&self, name: &str) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter segment named `{name}`"))
    }
}

/// Where a recorded network takes its parameters from.
#[derive(Clone, Copy, Debug)]
pub enum Weights<'w> {
    /// Parameters already on the tape (usually leaves), laid out as in [`MlpSpec::segments`].
    Vars(VarRange),
    /// Fixed parameter values; no gradient flows to them.
    Fixed(&'w [f64]),
}

/// Node ranges produced by [`build_mlp`].
#[derive(Clone, Copy, Debug)]
pub struct MlpNodes {
    /// Pre-head values of the final layer.
    pub logits: VarRange,
    /// Head outputs (clamped probabilities).
    pub outputs: VarRange,
}

/// Records the network on `tape` and returns its logits and head outputs.
pub fn build_mlp<'w>(
    tape: &mut Tape<'w>,
    spec: &MlpSpec,
    weights: Weights<'w>,
    input: VarRange,
) -> Result<MlpNodes> {
    if input.len() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input has length {}, network `{spec}` expects {}",
            input.len(),
            spec.input_dim()
        )));
    }
    let n_params = match weights {
        Weights::Vars(r) => r.len(),
        Weights::Fixed(w) => w.len(),
    };
    if n_params != spec.param_count() {
        return Err(Error::Shape(format!(
            "{n_params} parameters supplied, network `{spec}` needs {}",
            spec.param_count()
        )));
    }

    let mut h = input;
    let mut offset = 0;
    let layers = spec.layer_count();
    for (l, w) in spec.widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let w_off = offset;
        let b_off = offset + fan_in * fan_out;
        offset = b_off + fan_out;

        let start = tape.len();
        for j in 0..fan_out {
            let row = w_off + j * fan_in;
            match weights {
                Weights::Vars(p) => {
                    tape.linear(p.slice(row, fan_in), h, p.get(b_off + j));
                }
                Weights::Fixed(p) => {
                    tape.linear_fixed(&p[row..row + fan_in], h, p[b_off + j]);
                }
            }
        }
        let pre = range_from(tape, start, fan_out);
        if l + 1 == layers {
            let outputs = apply_head(tape, spec.head, pre);
            return Ok(MlpNodes { logits: pre, outputs });
        }
        let start = tape.len();
        for v in pre.iter() {
            match spec.activation {
                Activation::Tanh => tape.tanh(v),
            };
        }
        h = range_from(tape, start, fan_out);
    }
    unreachable!("MlpSpec guarantees at least one layer")
}

fn range_from(tape: &Tape<'_>, start: usize, len: usize) -> VarRange {
    debug_assert_eq!(tape.len(), start + len);
    VarRange::new(start, len)
}

fn apply_head(tape: &mut Tape<'_>, head: Head, logits: VarRange) -> VarRange {
    match head {
        Head::Softmax2 => {
            let diff = tape.sub(logits.get(1), logits.get(0));
            let p1 = tape.sigmoid(diff);
            let p1 = tape.clamp(p1, PROB_CLAMP, 1.0 - PROB_CLAMP);
            // [p0, p1] must be contiguous: p0 = 1 - p1, then a copy of p1.
            let neg = tape.scale(p1, -1.0);
            let p0 = tape.offset(neg, 1.0);
            tape.identity(p1);
            VarRange::new(p0.index(), 2)
        }
        Head::Sigmoid => {
            let raw: Vec<Var> = logits.iter().map(|v| tape.sigmoid(v)).collect();
            let start = tape.len();
            for v in raw {
                tape.clamp(v, PROB_CLAMP, 1.0 - PROB_CLAMP);
            }
            VarRange::new(start, logits.len())
        }
    }
}

/// Evaluates the network with parameters and input both recorded as leaves
/// (input leaves first, then parameters in segment order).
pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<(Vec<f64>, Tape<'static>)> {
    if params.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "{} parameters supplied, network `{spec}` needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaves(input);
    let p = tape.leaves(params.values());
    let nodes = build_mlp(&mut tape, spec, Weights::Vars(p), x)?;
    let out = tape.values(nodes.outputs).to_vec();
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("network output {bad}")));
    }
    Ok((out, tape))
}

/// A network shape together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, network `{spec}` needs {}",
                params.len(),
                spec.param_count()
            )));
        }
        Ok(Mlp { spec, params })
    }

    /// Head outputs at `input` with parameters held fixed.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::with_capacity(4 * self.spec.input_dim());
        let x = tape.constants(input);
        let nodes = build_mlp(&mut tape, &self.spec, Weights::Fixed(self.params.values()), x)?;
        Ok(tape.values(nodes.outputs).to_vec())
    }
}
