//! Gating functions mapping a gate input to weights over a committee of
//! experts: a softmax over affine logits, and a soft binary tree whose leaf
//! reach probabilities form the weight vector.
//!
//! Tree nodes are stored in heap order (children of `n` at `2n+1`, `2n+2`)
//! and gate index `l` is the `l`-th leaf in left-to-right order. Node `n`
//! routes to its left child with probability σ(w_n·x + b_n).

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::pose::PoseAngles;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// A probability vector over experts.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights(Vec<f64>);

impl GateWeights {
    /// Tolerance on |Σ − 1|.
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("gate weights must be non-empty"));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::invalid(format!("gate weight {w} outside [0, 1]")));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::invalid(format!("gate weights sum to {s}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(experts: usize) -> Result<Self> {
        if experts == 0 {
            return Err(Error::invalid("uniform gate needs at least one expert"));
        }
        Ok(Self(vec![1.0 / experts as f64; experts]))
    }

    /// Wraps values produced by a gate forward pass without re-validating.
    pub(crate) fn from_gate_output(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.0.iter().enumerate() {
            if w > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }
}

/// Softmax gate: g(x) = softmax(W·x + b), W is L×dim.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxGate {
    pub experts: usize,
    pub input_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SoftmaxGate {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        experts: usize,
        input_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if experts == 0 || input_dim == 0 {
            return Err(Error::invalid("softmax gate needs experts and inputs"));
        }
        let weight = store.add_uniform(
            format!("{prefix}.weight"),
            vec![experts, input_dim],
            input_dim,
            rng,
        )?;
        let bias = store.add_zeros(format!("{prefix}.bias"), vec![experts])?;
        Ok(Self {
            experts,
            input_dim,
            weight,
            bias,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let logits = affine(tape, self.weight, self.bias, x)?;
        tape.softmax(logits)
    }
}

/// Complete soft binary tree of the given depth; 2^depth leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeGate {
    pub depth: usize,
    pub input_dim: usize,
    /// Node weights, (2^depth − 1) × dim, heap order.
    pub weight: ParamId,
    /// Node biases, 2^depth − 1.
    pub bias: ParamId,
}

impl TreeGate {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        input_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 || input_dim == 0 {
            return Err(Error::invalid("tree gate needs depth >= 1 and inputs"));
        }
        let nodes = (1 << depth) - 1;
        let weight = store.add_uniform(
            format!("{prefix}.weight"),
            vec![nodes, input_dim],
            input_dim,
            rng,
        )?;
        let bias = store.add_zeros(format!("{prefix}.bias"), vec![nodes])?;
        Ok(Self {
            depth,
            input_dim,
            weight,
            bias,
        })
    }

    pub fn nodes(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn leaves(&self) -> usize {
        1 << self.depth
    }

    /// Routing probabilities d_n(x) of every split node, heap order.
    pub fn routing(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let logits = affine(tape, self.weight, self.bias, x)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let logits = affine(tape, self.weight, self.bias, x)?;
        tape.tree_leaves(logits, self.depth)
    }
}

/// W·x + b for a vector `x`.
pub(crate) fn affine(tape: &mut Tape<'_>, weight: ParamId, bias: ParamId, x: Var) -> Result<Var> {
    let w = tape.p(weight)?;
    let b = tape.p(bias)?;
    let n = tape.value(x).len();
    let xc = tape.reshape(x, vec![n, 1])?;
    let wx = tape.matmul(w, xc)?;
    let rows = tape.dims(wx)[0];
    let wx = tape.reshape(wx, vec![rows])?;
    tape.add(wx, b)
}

/// Gating strategy of a committee.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    /// One expert, weight 1.
    Single,
    /// Fixed 1/L weights.
    Uniform { experts: usize },
    Softmax(SoftmaxGate),
    Tree(TreeGate),
}

impl Gate {
    pub fn experts(&self) -> usize {
        match self {
            Gate::Single => 1,
            Gate::Uniform { experts } => *experts,
            Gate::Softmax(g) => g.experts,
            Gate::Tree(g) => g.leaves(),
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Gate::Softmax(_) | Gate::Tree(_))
    }

    /// Gate weights as a tape vector. `x` is only read by learned gates.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Option<Var>) -> Result<Var> {
        match self {
            Gate::Single => Ok(tape.constant_vec(vec![1.0])),
            Gate::Uniform { experts } => {
                Ok(tape.constant_vec(GateWeights::uniform(*experts)?.0))
            }
            Gate::Softmax(g) => {
                let x = x.ok_or_else(|| Error::invalid("softmax gate needs an input"))?;
                g.forward(tape, x)
            }
            Gate::Tree(g) => {
                let x = x.ok_or_else(|| Error::invalid("tree gate needs an input"))?;
                g.forward(tape, x)
            }
        }
    }
}

/// Source of the vector fed to a gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateInput {
    /// The (yaw, pitch, roll) estimate.
    Pose,
    /// The layer's own input, unchanged.
    Identity,
}

impl GateInput {
    pub fn name(self) -> &'static str {
        match self {
            GateInput::Pose => "pose",
            GateInput::Identity => "identity",
        }
    }
}

/// Selects the gate input vector for `mode`.
pub fn gate_input(h: &[f64], pose: Option<&PoseAngles>, mode: GateInput) -> Result<Vec<f64>> {
    match mode {
        GateInput::Identity => Ok(h.to_vec()),
        GateInput::Pose => pose.map(|p| p.to_vec()).ok_or(Error::MissingPose),
    }
}

/// d_n(x) = σ(w_n·x + b_n)
pub fn routing_prob(x: &[f64], w: &[f64], b: f64) -> Result<f64> {
    if x.len() != w.len() {
        return Err(Error::DimensionMismatch {
            op: "routing_prob",
            left: vec![w.len()],
            right: vec![x.len()],
        });
    }
    let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
    Ok(sigmoid(z))
}

/// Evaluates a softmax gate outside of training.
pub fn softmax_gate(x: &[f64], gate: &SoftmaxGate, store: &ParamStore) -> Result<GateWeights> {
    check_input("softmax_gate", x, gate.input_dim)?;
    let mut tape = Tape::with_params(store);
    let xv = tape.constant_vec(x.to_vec());
    let g = gate.forward(&mut tape, xv)?;
    Ok(GateWeights(tape.value(g).to_vec()))
}

/// Evaluates a tree gate outside of training.
pub fn leaf_probabilities(x: &[f64], gate: &TreeGate, store: &ParamStore) -> Result<GateWeights> {
    check_input("leaf_probabilities", x, gate.input_dim)?;
    let mut tape = Tape::with_params(store);
    let xv = tape.constant_vec(x.to_vec());
    let g = gate.forward(&mut tape, xv)?;
    Ok(GateWeights(tape.value(g).to_vec()))
}

fn check_input(op: &'static str, x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            op,
            left: vec![dim],
            right: vec![x.len()],
        });
    }
    Ok(())
}

impl From<GateWeights> for Tensor {
    fn from(g: GateWeights) -> Tensor {
        Tensor::vector(g.0)
    }
}
