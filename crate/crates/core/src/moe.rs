//! Expert committees and their combination.
//!
//! A committee evaluates L experts, stacks their outputs as the columns of a
//! matrix and multiplies by the gate vector. The same combiner serves the
//! representation layer (columns are CNN feature vectors) and the regression
//! layer (columns are landmark displacements).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gates::{affine, Gate, GateInput, GateWeights, SoftmaxGate, TreeGate};
use crate::params::{mix_seed, seeded_rng, ParamId, ParamStore};
use crate::representation::{ExpertCnn, RepresentationBank};
use crate::tape::{Tape, Var};

/// Convolution layer shape: `out_channels @ kernel×kernel`, stride `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}x{}s{}", self.out_channels, self.kernel, self.kernel, self.stride)
    }
}

impl FromStr for ConvSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad conv spec `{s}`, expected C@KxKsS"));
        let (c, rest) = s.split_once('@').ok_or_else(bad)?;
        let (k, rest) = rest.split_once('x').ok_or_else(bad)?;
        let (k2, stride) = rest.split_once('s').ok_or_else(bad)?;
        if k != k2 {
            return Err(bad());
        }
        Ok(Self {
            out_channels: c.parse().map_err(|_| bad())?,
            kernel: k.parse().map_err(|_| bad())?,
            stride: stride.parse().map_err(|_| bad())?,
        })
    }
}

/// Architecture dimensions shared by every stage of a cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct Dims {
    /// Landmarks P.
    pub landmarks: usize,
    /// Patch side q.
    pub patch: usize,
    pub image_size: usize,
    /// CNN used when the representation layer has a single expert.
    pub single_cnn: Vec<ConvSpec>,
    /// CNN of each member of a representation committee.
    pub expert_cnn: Vec<ConvSpec>,
    /// L_h
    pub rep_experts: usize,
    /// L′
    pub reg_experts: usize,
    /// Hidden width of each regression expert.
    pub reg_hidden: usize,
    /// Hidden width of the single baseline regressor.
    pub baseline_hidden: usize,
}

impl Dims {
    /// Small configuration used for training on one machine.
    pub fn desk() -> Self {
        Self {
            landmarks: 12,
            patch: 16,
            image_size: 96,
            single_cnn: vec![
                ConvSpec::new(4, 3, 2),
                ConvSpec::new(8, 3, 2),
                ConvSpec::new(8, 3, 1),
                ConvSpec::new(8, 1, 1),
            ],
            expert_cnn: vec![
                ConvSpec::new(2, 3, 2),
                ConvSpec::new(4, 3, 2),
                ConvSpec::new(8, 3, 1),
                ConvSpec::new(8, 1, 1),
            ],
            rep_experts: 4,
            reg_experts: 16,
            reg_hidden: 32,
            baseline_hidden: 512,
        }
    }

    /// The full-size configuration: 68 landmarks, 32×32 patches, 30
    /// features per landmark, 8 representation and 64 regression experts.
    pub fn paper() -> Self {
        Self {
            landmarks: 68,
            patch: 32,
            image_size: 150,
            single_cnn: vec![
                ConvSpec::new(20, 5, 2),
                ConvSpec::new(40, 5, 2),
                ConvSpec::new(80, 3, 1),
                ConvSpec::new(160, 3, 1),
                ConvSpec::new(30, 1, 1),
            ],
            expert_cnn: vec![
                ConvSpec::new(7, 5, 2),
                ConvSpec::new(14, 5, 2),
                ConvSpec::new(28, 3, 1),
                ConvSpec::new(56, 3, 1),
                ConvSpec::new(30, 1, 1),
            ],
            rep_experts: 8,
            reg_experts: 64,
            reg_hidden: 128,
            baseline_hidden: 8192,
        }
    }

    /// Features per landmark n (output channels of the last conv layer).
    pub fn features(&self) -> usize {
        self.single_cnn.last().map_or(0, |c| c.out_channels)
    }

    /// Length of the representation vector h, P·n.
    pub fn feature_dim(&self) -> usize {
        self.landmarks * self.features()
    }

    pub fn shape_dim(&self) -> usize {
        2 * self.landmarks
    }

    pub fn validate(&self) -> Result<()> {
        if self.landmarks < 2 {
            return Err(Error::invalid("at least two landmarks are required"));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(2) {
            return Err(Error::invalid(format!("patch size {} must be even", self.patch)));
        }
        let (a, b) = (
            self.single_cnn.last().map(|c| c.out_channels),
            self.expert_cnn.last().map(|c| c.out_channels),
        );
        if a.is_none() || a != b {
            return Err(Error::invalid(
                "single and expert CNNs must end with the same feature count",
            ));
        }
        for specs in [&self.single_cnn, &self.expert_cnn] {
            cnn_output_side(self.patch, specs)
                .filter(|&s| s == 1)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "CNN {specs:?} does not reduce a {0}x{0} patch to 1x1",
                        self.patch
                    ))
                })?;
        }
        for (name, l) in [("rep_experts", self.rep_experts), ("reg_experts", self.reg_experts)] {
            if !l.is_power_of_two() || l < 2 {
                return Err(Error::invalid(format!(
                    "{name} = {l} must be a power of two >= 2 so a tree gate fits"
                )));
            }
        }
        if self.reg_hidden == 0 || self.baseline_hidden == 0 || self.image_size == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

/// Spatial side after applying `specs` to a square input, if valid.
pub fn cnn_output_side(input: usize, specs: &[ConvSpec]) -> Option<usize> {
    specs.iter().try_fold(input, |side, c| {
        (c.kernel <= side && c.stride > 0).then(|| (side - c.kernel) / c.stride + 1)
    })
}

/// Two-layer regressor: w₁·max(0, w₀·h + b₀) + b₁.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFc {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
}

impl ExpertFc {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w0 = store.add_uniform(format!("{prefix}.w0"), vec![hidden, input_dim], input_dim, rng)?;
        let b0 = store.add_zeros(format!("{prefix}.b0"), vec![hidden])?;
        // zero output layer: a new cascade stage starts by predicting no displacement
        let w1 = store.add_zeros(format!("{prefix}.w1"), vec![output_dim, hidden])?;
        let b1 = store.add_zeros(format!("{prefix}.b1"), vec![output_dim])?;
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
            w0,
            b0,
            w1,
            b1,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        if tape.value(h).len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                op: "expert_fc_forward",
                left: vec![self.hidden, self.input_dim],
                right: tape.dims(h).to_vec(),
            });
        }
        let z = affine(tape, self.w0, self.b0, h)?;
        let a = tape.relu(z);
        affine(tape, self.w1, self.b1, a)
    }
}

/// Weighted sum of expert columns: `[o_1 … o_L] · g`.
pub fn combine_vars(tape: &mut Tape<'_>, outputs: &[Var], g: Var) -> Result<Var> {
    let l = outputs.len();
    if l == 0 || tape.value(g).len() != l {
        return Err(Error::DimensionMismatch {
            op: "combine",
            left: vec![l],
            right: tape.dims(g).to_vec(),
        });
    }
    let rows = tape.value(outputs[0]).len();
    let stacked = tape.concat(outputs)?;
    let stacked = tape.reshape(stacked, vec![l, rows])?;
    let columns = tape.transpose(stacked)?;
    let gc = tape.reshape(g, vec![l, 1])?;
    let out = tape.matmul(columns, gc)?;
    tape.reshape(out, vec![rows])
}

/// Expert responses stacked column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutputs {
    columns: Vec<Vec<f64>>,
}

impl ExpertOutputs {
    pub fn new(columns: Vec<Vec<f64>>) -> Result<Self> {
        let first = columns
            .first()
            .ok_or_else(|| Error::invalid("expert outputs need at least one column"))?;
        if first.is_empty() {
            return Err(Error::invalid("expert output columns must be non-empty"));
        }
        if let Some(c) = columns.iter().find(|c| c.len() != first.len()) {
            return Err(Error::DimensionMismatch {
                op: "expert_outputs",
                left: vec![first.len()],
                right: vec![c.len()],
            });
        }
        Ok(Self { columns })
    }

    pub fn num_experts(&self) -> usize {
        self.columns.len()
    }

    pub fn rows(&self) -> usize {
        self.columns[0].len()
    }

    pub fn column(&self, l: usize) -> &[f64] {
        &self.columns[l]
    }
}

/// Gate-weighted sum of expert columns.
pub fn combine(outputs: &ExpertOutputs, g: &GateWeights) -> Result<Vec<f64>> {
    if outputs.num_experts() != g.len() {
        return Err(Error::DimensionMismatch {
            op: "combine",
            left: vec![outputs.rows(), outputs.num_experts()],
            right: vec![g.len()],
        });
    }
    let mut tape = Tape::new();
    let cols: Vec<Var> = outputs
        .columns
        .iter()
        .map(|c| tape.constant_vec(c.clone()))
        .collect();
    let gv = tape.constant_vec(g.as_slice().to_vec());
    let out = combine_vars(&mut tape, &cols, gv)?;
    Ok(tape.value(out).to_vec())
}

pub fn uniform_gate(experts: usize) -> Result<GateWeights> {
    GateWeights::uniform(experts)
}

/// Average over samples of the descending-sorted cumulative gate mass.
///
/// Entry `k` is the mean fraction of gate mass carried by each sample's
/// `k+1` heaviest experts.
pub fn expert_usage(samples: &[GateWeights]) -> Result<Vec<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("expert_usage: no gate samples"))?;
    let l = first.len();
    let mut curve = vec![0.0; l];
    for g in samples {
        if g.len() != l {
            return Err(Error::DimensionMismatch {
                op: "expert_usage",
                left: vec![l],
                right: vec![g.len()],
            });
        }
        let mut sorted = g.as_slice().to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut acc = 0.0;
        for (c, w) in curve.iter_mut().zip(sorted) {
            acc += w;
            *c += acc;
        }
    }
    let n = samples.len() as f64;
    curve.iter_mut().for_each(|c| *c /= n);
    Ok(curve)
}

/// Gating family of a committee.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    Single,
    Uniform,
    Softmax,
    Tree,
}

impl Gating {
    pub fn name(self) -> &'static str {
        match self {
            Gating::Single => "single",
            Gating::Uniform => "uniform",
            Gating::Softmax => "softmax",
            Gating::Tree => "tree",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub gating: Gating,
    pub gate_input: GateInput,
    pub tree_depth: Option<usize>,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::invalid("a committee needs at least one expert"));
        }
        match (self.gating, self.tree_depth) {
            (Gating::Single, _) if self.num_experts != 1 => Err(Error::invalid(format!(
                "single gating requires one expert, got {}",
                self.num_experts
            ))),
            (Gating::Tree, Some(d)) if (1..31).contains(&d) && 1usize << d == self.num_experts => Ok(()),
            (Gating::Tree, d) => Err(Error::invalid(format!(
                "tree gating over {} experts needs depth log2(L), got {d:?}",
                self.num_experts
            ))),
            (_, Some(_)) => Err(Error::invalid("tree_depth is only valid with tree gating")),
            _ => Ok(()),
        }
    }

    fn single() -> Self {
        Self {
            num_experts: 1,
            gating: Gating::Single,
            gate_input: GateInput::Identity,
            tree_depth: None,
        }
    }

    fn committee(experts: usize, gating: Gating, gate_input: GateInput) -> Self {
        Self {
            num_experts: experts,
            gating,
            gate_input,
            tree_depth: (gating == Gating::Tree).then(|| experts.trailing_zeros() as usize),
        }
    }
}

fn build_gate(
    cfg: &MoeConfig,
    store: &mut ParamStore,
    prefix: &str,
    input_dim: usize,
    rng: &mut impl Rng,
) -> Result<Gate> {
    cfg.validate()?;
    Ok(match cfg.gating {
        Gating::Single => Gate::Single,
        Gating::Uniform => Gate::Uniform {
            experts: cfg.num_experts,
        },
        Gating::Softmax => Gate::Softmax(SoftmaxGate::build(
            store,
            prefix,
            cfg.num_experts,
            input_dim,
            rng,
        )?),
        Gating::Tree => Gate::Tree(TreeGate::build(
            store,
            prefix,
            cfg.tree_depth.expect("validated"),
            input_dim,
            rng,
        )?),
    })
}

/// Committee of FC regressors gated on the representation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBank {
    pub experts: Vec<ExpertFc>,
    pub gate: Gate,
}

impl RegressionBank {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &MoeConfig,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.gate_input != GateInput::Identity {
            return Err(Error::invalid("the regression gate reads the representation"));
        }
        let experts = (0..cfg.num_experts)
            .map(|l| {
                let mut rng = seeded_rng(mix_seed(seed, l as u64));
                ExpertFc::build(
                    store,
                    &format!("{prefix}.expert{l}"),
                    input_dim,
                    hidden,
                    output_dim,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = seeded_rng(mix_seed(seed, u64::MAX));
        let gate = build_gate(cfg, store, &format!("{prefix}.gate"), input_dim, &mut rng)?;
        Ok(Self { experts, gate })
    }

    /// Returns (displacement, gate weights).
    pub fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<(Var, Var)> {
        let outputs = self
            .experts
            .iter()
            .map(|e| e.forward(tape, h))
            .collect::<Result<Vec<_>>>()?;
        let g = self.gate.forward(tape, Some(h))?;
        let ds = combine_vars(tape, &outputs, g)?;
        Ok((ds, g))
    }
}

/// The six named architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Moe,
    SoftmaxMoe,
    TreeMoe,
    PoseSoftmaxMoe,
    PoseTreeMoe,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Moe,
        Variant::SoftmaxMoe,
        Variant::TreeMoe,
        Variant::PoseSoftmaxMoe,
        Variant::PoseTreeMoe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Moe => "moe",
            Variant::SoftmaxMoe => "softmax-moe",
            Variant::TreeMoe => "tree-moe",
            Variant::PoseSoftmaxMoe => "pose-softmax-moe",
            Variant::PoseTreeMoe => "pose-tree-moe",
        }
    }

    pub fn uses_pose(self) -> bool {
        matches!(self, Variant::PoseSoftmaxMoe | Variant::PoseTreeMoe)
    }

    /// (representation, regression) committee configurations.
    pub fn layer_configs(self, dims: &Dims) -> (MoeConfig, MoeConfig) {
        let rep_l = dims.rep_experts;
        let reg_l = dims.reg_experts;
        let id = GateInput::Identity;
        match self {
            Variant::Baseline => (MoeConfig::single(), MoeConfig::single()),
            Variant::Moe => (
                MoeConfig::single(),
                MoeConfig::committee(reg_l, Gating::Uniform, id),
            ),
            Variant::SoftmaxMoe => (
                MoeConfig::single(),
                MoeConfig::committee(reg_l, Gating::Softmax, id),
            ),
            Variant::TreeMoe => (
                MoeConfig::single(),
                MoeConfig::committee(reg_l, Gating::Tree, id),
            ),
            Variant::PoseSoftmaxMoe => (
                MoeConfig::committee(rep_l, Gating::Softmax, GateInput::Pose),
                MoeConfig::committee(reg_l, Gating::Softmax, id),
            ),
            Variant::PoseTreeMoe => (
                MoeConfig::committee(rep_l, Gating::Tree, GateInput::Pose),
                MoeConfig::committee(reg_l, Gating::Tree, id),
            ),
        }
    }

    /// Hidden width of each regression expert.
    pub fn reg_hidden(self, dims: &Dims) -> usize {
        match self {
            Variant::Baseline => dims.baseline_hidden,
            _ => dims.reg_hidden,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!(
                    "unknown variant `{s}`; valid names: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Builds the representation and regression committees of one stage,
/// registering their parameters under `prefix` in `store`.
pub fn build_variant(
    variant: Variant,
    dims: &Dims,
    store: &mut ParamStore,
    prefix: &str,
    seed: u64,
) -> Result<(RepresentationBank, RegressionBank)> {
    dims.validate()?;
    let (rep_cfg, reg_cfg) = variant.layer_configs(dims);
    let cnn = if rep_cfg.num_experts == 1 {
        &dims.single_cnn
    } else {
        &dims.expert_cnn
    };
    let rep_seed = mix_seed(seed, 1);
    let experts = (0..rep_cfg.num_experts)
        .map(|l| {
            let mut rng = seeded_rng(mix_seed(rep_seed, l as u64));
            ExpertCnn::build(
                store,
                &format!("{prefix}.rep.expert{l}"),
                cnn,
                1,
                dims.patch,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seeded_rng(mix_seed(rep_seed, u64::MAX));
    let rep_gate = build_gate(&rep_cfg, store, &format!("{prefix}.rep.gate"), 3, &mut rng)?;
    let representation = RepresentationBank::new(experts, rep_gate, rep_cfg.gate_input)?;

    let regression = RegressionBank::build(
        store,
        &format!("{prefix}.reg"),
        &reg_cfg,
        dims.feature_dim(),
        variant.reg_hidden(dims),
        dims.shape_dim(),
        mix_seed(seed, 2),
    )?;
    Ok((representation, regression))
}

/// Weight and bias counts of one block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub weights: usize,
    pub biases: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            weights: self.weights + o.weights,
            biases: self.biases + o.biases,
        }
    }
}

/// Per-stage parameter counts of a variant, split by block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantParams {
    pub representation: ParamCount,
    pub representation_gate: ParamCount,
    pub regression: ParamCount,
    pub regression_gate: ParamCount,
}

impl VariantParams {
    pub fn total(&self) -> usize {
        (self.representation + self.representation_gate + self.regression + self.regression_gate)
            .total()
    }
}

fn gate_count(cfg: &MoeConfig, input_dim: usize) -> ParamCount {
    let rows = match cfg.gating {
        Gating::Single | Gating::Uniform => 0,
        Gating::Softmax => cfg.num_experts,
        Gating::Tree => cfg.num_experts - 1,
    };
    ParamCount {
        weights: rows * input_dim,
        biases: rows,
    }
}

/// Counts parameters analytically, without allocating them.
pub fn variant_param_count(variant: Variant, dims: &Dims) -> VariantParams {
    let (rep_cfg, reg_cfg) = variant.layer_configs(dims);
    let cnn = if rep_cfg.num_experts == 1 {
        &dims.single_cnn
    } else {
        &dims.expert_cnn
    };
    let mut one_cnn = ParamCount::default();
    let mut c_in = 1;
    for c in cnn {
        one_cnn.weights += c.out_channels * c_in * c.kernel * c.kernel;
        one_cnn.biases += c.out_channels;
        c_in = c.out_channels;
    }
    let hidden = variant.reg_hidden(dims);
    let (d_in, d_out) = (dims.feature_dim(), dims.shape_dim());
    let one_fc = ParamCount {
        weights: d_in * hidden + hidden * d_out,
        biases: hidden + d_out,
    };
    let times = |p: ParamCount, k: usize| ParamCount {
        weights: p.weights * k,
        biases: p.biases * k,
    };
    VariantParams {
        representation: times(one_cnn, rep_cfg.num_experts),
        representation_gate: gate_count(&rep_cfg, 3),
        regression: times(one_fc, reg_cfg.num_experts),
        regression_gate: gate_count(&reg_cfg, d_in),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_gate_values() {
        assert_eq!(uniform_gate(1).unwrap().as_slice(), &[1.0]);
        let g = uniform_gate(64).unwrap();
        assert!(g.as_slice().iter().all(|&w| w == 0.015625));
        assert_eq!(g.as_slice().iter().sum::<f64>(), 1.0);
        assert!(uniform_gate(0).is_err());
    }

    #[test]
    fn combine_reductions() {
        let v = vec![1.0, -2.0, 3.5];
        let single = ExpertOutputs::new(vec![v.clone()]).unwrap();
        assert_eq!(combine(&single, &uniform_gate(1).unwrap()).unwrap(), v);

        let same = ExpertOutputs::new(vec![v.clone(); 3]).unwrap();
        let g = GateWeights::new(vec![0.2, 0.5, 0.3]).unwrap();
        let out = combine(&same, &g).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(combine(&same, &uniform_gate(2).unwrap()).is_err());
    }

    #[test]
    fn usage_curves() {
        let g = GateWeights::new(vec![0.2, 0.5, 0.3]).unwrap();
        let c = expert_usage(&[g]).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15 && (c[2] - 1.0).abs() < 1e-15);
        let onehot = GateWeights::new(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(expert_usage(&[onehot]).unwrap(), vec![1.0; 4]);
        let u = expert_usage(&[uniform_gate(4).unwrap()]).unwrap();
        assert_eq!(u, vec![0.25, 0.5, 0.75, 1.0]);
        assert!(expert_usage(&[]).is_err());
    }

    fn randomize(store: &mut ParamStore, id: ParamId) {
        use rand::Rng;
        let mut rng = seeded_rng(77);
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }

    #[test]
    fn expert_fc_zero_and_dead() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let e = ExpertFc::build(&mut store, "e", 5, 4, 6, &mut rng).unwrap();
        let h = Tensor::vector(vec![0.3, -1.0, 2.0, 0.5, 0.0]);

        randomize(&mut store, e.w1);
        let mut zero = store.clone();
        for id in zero.ids().collect::<Vec<_>>() {
            zero.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::with_params(&zero);
        let hv = t.leaf(&h);
        let y = e.forward(&mut t, hv).unwrap();
        assert_eq!(t.value(y), &[0.0; 6]);

        let mut dead = store.clone();
        dead.get_mut(e.b0).data_mut().iter_mut().for_each(|v| *v = -1e6);
        let b1: Vec<f64> = (0..6).map(|i| i as f64 * 0.25).collect();
        dead.get_mut(e.b1).data_mut().copy_from_slice(&b1);
        let mut t = Tape::with_params(&dead);
        let hv = t.leaf(&h);
        let y = e.forward(&mut t, hv).unwrap();
        assert_eq!(t.value(y), b1.as_slice());

        let mut t = Tape::with_params(&store);
        let bad = t.constant_vec(vec![0.0; 4]);
        assert!(e.forward(&mut t, bad).is_err());
    }

    #[test]
    fn moe_config_invariants() {
        let ok = MoeConfig::committee(8, Gating::Tree, GateInput::Pose);
        assert_eq!(ok.tree_depth, Some(3));
        ok.validate().unwrap();
        let bad = MoeConfig {
            num_experts: 2,
            gating: Gating::Single,
            gate_input: GateInput::Identity,
            tree_depth: None,
        };
        assert!(bad.validate().is_err());
        let bad = MoeConfig {
            num_experts: 6,
            gating: Gating::Tree,
            gate_input: GateInput::Identity,
            tree_depth: Some(2),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let err = "resnet".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("pose-tree-moe"), "{err}");
    }

    #[test]
    fn conv_spec_parse() {
        let c: ConvSpec = "20@5x5s2".parse().unwrap();
        assert_eq!(c, ConvSpec::new(20, 5, 2));
        assert_eq!(c.to_string().parse::<ConvSpec>().unwrap(), c);
        assert!("20@5x3s2".parse::<ConvSpec>().is_err());
    }

    #[test]
    fn desk_and_paper_dims_are_valid() {
        Dims::desk().validate().unwrap();
        Dims::paper().validate().unwrap();
        assert_eq!(Dims::paper().feature_dim(), 2040);
        assert_eq!(Dims::desk().feature_dim(), 96);
    }

    #[test]
    fn analytic_count_matches_allocation() {
        let dims = Dims::desk();
        for v in Variant::ALL {
            let mut store = ParamStore::new();
            build_variant(v, &dims, &mut store, "s0", 11).unwrap();
            assert_eq!(store.num_scalars(), variant_param_count(v, &dims).total(), "{v}");
        }
    }
}
