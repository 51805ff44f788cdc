//! Head pose: a shared CNN embedding φ with separate yaw, pitch and roll
//! heads, each squashed into [−π, π] by π·tanh.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::gates::affine;
use crate::optim::{batch_gradient, Adam, AdamConfig};
use crate::params::{mix_seed, seeded_rng, ParamId, ParamStore};
use crate::representation::ConvLayer;
use crate::synthdata::{GrayImage, Sample};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Yaw γ, pitch β, roll α in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl PoseAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Result<Self> {
        for (name, v) in [("yaw", yaw), ("pitch", pitch), ("roll", roll)] {
            if !(-PI..=PI).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [-pi, pi]")));
            }
        }
        Ok(Self { yaw, pitch, roll })
    }

    pub fn from_degrees(yaw: f64, pitch: f64, roll: f64) -> Result<Self> {
        Self::new(yaw.to_radians(), pitch.to_radians(), roll.to_radians())
    }

    pub fn zero() -> Self {
        Self {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.yaw, self.pitch, self.roll]
    }

    /// Pose of the horizontally mirrored head.
    pub fn mirrored(&self) -> Self {
        Self {
            yaw: -self.yaw,
            pitch: self.pitch,
            roll: -self.roll,
        }
    }

    pub fn yaw_degrees(&self) -> f64 {
        self.yaw.to_degrees()
    }
}

/// Ground-truth pose of a sample.
pub fn pose_oracle(sample: &Sample) -> Result<PoseAngles> {
    sample.pose.ok_or(Error::MissingPose)
}

/// Side of the square the pose network sees.
pub const POSE_INPUT: usize = 64;

const BACKBONE: [(usize, usize, usize); 4] = [(8, 4, 4), (16, 3, 2), (32, 3, 2), (64, 3, 1)];
const HEAD_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseHead {
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
}

impl PoseHead {
    fn forward(&self, tape: &mut Tape<'_>, phi: Var) -> Result<Var> {
        let z = affine(tape, self.w0, self.b0, phi)?;
        let a = tape.relu(z);
        let o = affine(tape, self.w1, self.b1, a)?;
        let t = tape.tanh(o);
        Ok(tape.scale(t, PI))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNet {
    pub store: ParamStore,
    pub backbone: Vec<ConvLayer>,
    /// Yaw, pitch, roll.
    pub heads: [PoseHead; 3],
}

impl PoseNet {
    pub fn new(seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(mix_seed(seed, 0));
        let mut backbone = Vec::new();
        let mut c_in = 1;
        for (i, &(c, k, s)) in BACKBONE.iter().enumerate() {
            let kernels = store.add_uniform(
                format!("pose.conv{i}.kernels"),
                vec![c, c_in, k, k],
                c_in * k * k,
                &mut rng,
            )?;
            let bias = store.add_zeros(format!("pose.conv{i}.bias"), vec![c])?;
            backbone.push(ConvLayer {
                kernels,
                bias,
                stride: s,
            });
            c_in = c;
        }
        let mut head = |name: &str, stream: u64| -> Result<PoseHead> {
            let mut rng = seeded_rng(mix_seed(seed, stream));
            Ok(PoseHead {
                w0: store.add_uniform(format!("pose.{name}.w0"), vec![HEAD_HIDDEN, c_in], c_in, &mut rng)?,
                b0: store.add_zeros(format!("pose.{name}.b0"), vec![HEAD_HIDDEN])?,
                w1: store.add_uniform(format!("pose.{name}.w1"), vec![1, HEAD_HIDDEN], HEAD_HIDDEN, &mut rng)?,
                b1: store.add_zeros(format!("pose.{name}.b1"), vec![1])?,
            })
        };
        let heads = [head("yaw", 1)?, head("pitch", 2)?, head("roll", 3)?];
        Ok(Self {
            store,
            backbone,
            heads,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        BACKBONE[BACKBONE.len() - 1].0
    }

    /// Records the network on `tape` (which must be bound to `self.store`)
    /// and returns the `[3]` angle vector.
    pub fn forward_var(&self, tape: &mut Tape<'_>, input: Var) -> Result<Var> {
        let d = tape.dims(input);
        if d != [1, POSE_INPUT, POSE_INPUT] {
            return Err(Error::DimensionMismatch {
                op: "pose_forward",
                left: vec![1, POSE_INPUT, POSE_INPUT],
                right: d.to_vec(),
            });
        }
        let mut x = input;
        for layer in &self.backbone {
            let k = tape.p(layer.kernels)?;
            let b = tape.p(layer.bias)?;
            x = tape.conv2d(x, k, b, layer.stride)?;
            x = tape.relu(x);
        }
        let phi = tape.reshape(x, vec![self.embedding_dim()])?;
        let outs = self
            .heads
            .iter()
            .map(|h| h.forward(tape, phi))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&outs)
    }

    /// Pose of a `[1, 64, 64]` input tensor.
    pub fn forward_tensor(&self, input: &Tensor) -> Result<PoseAngles> {
        let mut tape = Tape::with_params(&self.store);
        let x = tape.constant(input.clone());
        let out = self.forward_var(&mut tape, x)?;
        let v = tape.value(out);
        // π·tanh can round to a hair above π
        let c = |a: f64| a.clamp(-PI, PI);
        PoseAngles::new(c(v[0]), c(v[1]), c(v[2]))
    }

    pub fn forward(&self, image: &GrayImage) -> Result<PoseAngles> {
        self.forward_tensor(&pose_input(image)?)
    }
}

/// Bilinear resample of an image to the 64×64 pose input.
pub fn pose_input(image: &GrayImage) -> Result<Tensor> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Err(Error::invalid("degenerate image"));
    }
    let n = POSE_INPUT;
    let mut out = Vec::with_capacity(n * n);
    let sy = h as f64 / n as f64;
    let sx = w as f64 / n as f64;
    for r in 0..n {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for c in 0..n {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = image.value(y0, x0) * (1.0 - fx) + image.value(y0, x1) * fx;
            let bot = image.value(y1, x0) * (1.0 - fx) + image.value(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::new(vec![1, n, n], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PoseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Fits the network by Adam on the mean squared angle error. Returns the
/// mean loss of every epoch.
pub fn train_pose(net: &mut PoseNet, samples: &[Sample], cfg: &PoseTrainConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("pose training needs samples"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let data: Vec<(Tensor, [f64; 3])> = samples
        .iter()
        .map(|s| {
            let p = pose_oracle(s)?;
            Ok((pose_input(&s.image)?, [p.yaw, p.pitch, p.roll]))
        })
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &net.store,
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seeded_rng(mix_seed(cfg.seed, 1000 + epoch as u64));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&(Tensor, [f64; 3])> = batch.iter().map(|&i| &data[i]).collect();
            let (mut grads, loss) = batch_gradient(&net.store, &items, |tape, item| {
                let x = tape.constant(item.0.clone());
                let out = net.forward_var(tape, x)?;
                let target = tape.constant_vec(item.1.to_vec());
                let d = tape.sub(out, target)?;
                let sq = tape.mul(d, d)?;
                Ok(tape.mean(sq))
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { stage: 0, step });
            }
            total += loss;
            grads.scale(1.0 / batch.len() as f64);
            net.store.zero_grad();
            net.store.accumulate_table(&grads)?;
            adam.step(&mut net.store)?;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}
