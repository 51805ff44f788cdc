//! Cascaded shape regression.
//!
//! Shapes inside the model are expressed relative to the face box: a point
//! `p` maps to `(p − center) / √(h·w)`. The mean shape lives in those units
//! and every stage predicts its displacement in them, so one model serves
//! faces of any size.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gates::GateWeights;
use crate::moe::{build_variant, Dims, RegressionBank, Variant};
use crate::optim::{batch_gradient, Adam, AdamConfig};
use crate::params::{mix_seed, seeded_rng, ParamStore};
use crate::pose::{PoseAngles, PoseNet};
use crate::representation::{extract_with, RepresentationBank, Shape2D};
use crate::synthdata::{BBox, GrayImage, Sample, Template3D};
use crate::tape::{Tape, Var};

/// Where pose-gated layers get their pose from.
#[derive(Debug, Clone, PartialEq)]
pub enum PoseSource {
    None,
    /// The sample's ground-truth pose.
    Oracle,
    /// A frozen pose network.
    Model(Box<PoseNet>),
}

impl PoseSource {
    pub fn name(&self) -> &'static str {
        match self {
            PoseSource::None => "none",
            PoseSource::Oracle => "oracle",
            PoseSource::Model(_) => "model",
        }
    }

    pub fn resolve(&self, sample: &Sample) -> Result<Option<PoseAngles>> {
        match self {
            PoseSource::None => Ok(None),
            PoseSource::Oracle => sample.pose.map(Some).ok_or(Error::MissingPose),
            PoseSource::Model(net) => net.forward(&sample.image).map(Some),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub representation: RepresentationBank,
    pub regression: RegressionBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stages: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// σ of the initial-shape translation, pixels. `None` scales 10 px at
    /// 150×150 to the image size.
    pub translation_px: Option<f64>,
    /// σ of the initial-shape scale factor around 1.
    pub scale_sigma: f64,
    pub flip_prob: f64,
    /// A stage stops early once its epoch loss improves by less than this
    /// relative amount over `plateau_window` epochs.
    pub plateau_tol: f64,
    pub plateau_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            lr: 1e-3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            translation_px: None,
            scale_sigma: 0.1,
            flip_prob: 0.5,
            plateau_tol: 1e-4,
            plateau_window: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("stages, epochs and batch size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if self.scale_sigma < 0.0 || self.translation_px.is_some_and(|t| t < 0.0) {
            return Err(Error::invalid("augmentation spreads must be >= 0"));
        }
        Ok(())
    }

    pub fn translation_for(&self, image_size: usize) -> f64 {
        self.translation_px
            .unwrap_or(10.0 * image_size as f64 / 150.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub variant: Variant,
    pub dims: Dims,
    pub seed: u64,
    /// Box-normalized mean shape, 2P values.
    pub mean_shape: Vec<f64>,
    pub stages: Vec<Stage>,
    pub store: ParamStore,
    pub pose: PoseSource,
    /// Configuration of the run that trained the model, if any.
    pub train_config: Option<TrainConfig>,
}

/// Intermediate results of a cascade pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// s⁽⁰⁾, …, s⁽ᴷ⁾ in pixels.
    pub shapes: Vec<Shape2D>,
    /// Pixel displacement of every stage.
    pub displacements: Vec<Vec<f64>>,
    pub representation_gates: Vec<GateWeights>,
    pub regression_gates: Vec<GateWeights>,
}

impl Trace {
    pub fn prediction(&self) -> &Shape2D {
        self.shapes.last().expect("trace holds the initial shape")
    }
}

/// Places a box-normalized shape in `bbox`.
pub fn place_shape(normalized: &[f64], bbox: &BBox) -> Result<Shape2D> {
    let (cx, cy) = bbox.center();
    let s = bbox.size();
    Shape2D::new(
        normalized
            .chunks_exact(2)
            .flat_map(|p| [cx + s * p[0], cy + s * p[1]])
            .collect(),
    )
}

pub fn normalize_shape(shape: &Shape2D, bbox: &BBox) -> Vec<f64> {
    let (cx, cy) = bbox.center();
    let s = bbox.size();
    shape
        .points()
        .flat_map(|(x, y)| [(x - cx) / s, (y - cy) / s])
        .collect()
}

/// Coordinate-wise mean.
pub fn mean_shape(shapes: &[Shape2D]) -> Result<Shape2D> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::invalid("mean shape of an empty set"))?;
    let mut acc = vec![0.0; first.as_slice().len()];
    for s in shapes {
        if s.as_slice().len() != acc.len() {
            return Err(Error::DimensionMismatch {
                op: "mean_shape",
                left: vec![acc.len()],
                right: vec![s.as_slice().len()],
            });
        }
        acc.iter_mut().zip(s.as_slice()).for_each(|(a, b)| *a += b);
    }
    let n = shapes.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Shape2D::new(acc)
}

/// Box-normalized mean of the ground-truth shapes.
pub fn normalized_mean_shape(samples: &[Sample]) -> Result<Vec<f64>> {
    let shapes = samples
        .iter()
        .map(|s| Shape2D::new(normalize_shape(&s.gt, &s.bbox)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_shape(&shapes)?.into_vec())
}

/// Random perturbation of one training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub flip: bool,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
            flip: false,
        }
    }

    pub fn draw(rng: &mut impl Rng, cfg: &TrainConfig, image_size: usize) -> Self {
        let t = cfg.translation_for(image_size);
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        let ds: f64 = rng.sample(StandardNormal);
        let flip = rng.gen::<f64>() < cfg.flip_prob;
        Self {
            dx: t * dx,
            dy: t * dy,
            scale: 1.0 + cfg.scale_sigma * ds,
            flip,
        }
    }
}

/// Mirrors image, landmarks, box and pose left to right.
pub fn flip_sample(sample: &Sample, mirror: &[usize]) -> Result<Sample> {
    let p = sample.gt.landmarks();
    if mirror.len() != p {
        return Err(Error::invalid(format!(
            "mirror table of {} entries for {p} landmarks",
            mirror.len()
        )));
    }
    let w = (sample.image.width() - 1) as f64;
    let gt = Shape2D::from_points(
        &mirror
            .iter()
            .map(|&m| {
                let (x, y) = sample.gt.point(m);
                (w - x, y)
            })
            .collect::<Vec<_>>(),
    )?;
    let b = sample.bbox;
    Ok(Sample {
        id: sample.id,
        seed: sample.seed,
        image: sample.image.flipped_horizontal(),
        gt,
        pose: sample.pose.map(|p| p.mirrored()),
        bbox: BBox {
            x: w - (b.x + b.w),
            ..b
        },
    })
}

/// Applies `aug` to a sample: optionally flips it, then places the
/// normalized `mean` in its box, scaled about the box center and shifted.
/// Returns the (possibly flipped) sample and its initial shape.
pub fn augment(
    sample: &Sample,
    aug: &Augmentation,
    mean: &[f64],
    mirror: &[usize],
) -> Result<(Sample, Shape2D)> {
    let s = if aug.flip {
        flip_sample(sample, mirror)?
    } else {
        sample.clone()
    };
    let init = perturbed_init(mean, &s.bbox, aug)?;
    Ok((s, init))
}

fn perturbed_init(mean: &[f64], bbox: &BBox, aug: &Augmentation) -> Result<Shape2D> {
    let (cx, cy) = bbox.center();
    let size = bbox.size() * aug.scale;
    Shape2D::new(
        mean.chunks_exact(2)
            .flat_map(|p| [cx + aug.dx + size * p[0], cy + aug.dy + size * p[1]])
            .collect(),
    )
}

impl CascadeModel {
    /// Freshly initialized model with a zero mean shape.
    pub fn new(variant: Variant, dims: Dims, stages: usize, seed: u64, pose: PoseSource) -> Result<Self> {
        if stages == 0 {
            return Err(Error::invalid("a cascade needs at least one stage"));
        }
        dims.validate()?;
        let mut store = ParamStore::new();
        let built = (0..stages)
            .map(|k| {
                let (representation, regression) = build_variant(
                    variant,
                    &dims,
                    &mut store,
                    &format!("stage{}", k + 1),
                    mix_seed(seed, 100 + k as u64),
                )?;
                Ok(Stage {
                    representation,
                    regression,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_shape = vec![0.0; dims.shape_dim()];
        Ok(Self {
            variant,
            dims,
            seed,
            mean_shape,
            stages: built,
            store,
            pose,
            train_config: None,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn initial_shape(&self, bbox: &BBox) -> Result<Shape2D> {
        place_shape(&self.mean_shape, bbox)
    }

    fn check_pose(&self, pose: Option<&PoseAngles>) -> Result<()> {
        if self.variant.uses_pose() && pose.is_none() {
            return Err(Error::MissingPose);
        }
        Ok(())
    }

    /// Runs the whole cascade from the mean shape placed in `bbox`.
    pub fn forward(&self, image: &GrayImage, bbox: &BBox, pose: Option<&PoseAngles>) -> Result<Trace> {
        self.forward_from(image, bbox, pose, self.initial_shape(bbox)?)
    }

    pub fn forward_from(
        &self,
        image: &GrayImage,
        bbox: &BBox,
        pose: Option<&PoseAngles>,
        init: Shape2D,
    ) -> Result<Trace> {
        self.check_pose(pose)?;
        let mut trace = Trace {
            shapes: vec![init],
            displacements: Vec::new(),
            representation_gates: Vec::new(),
            regression_gates: Vec::new(),
        };
        for k in 0..self.stages.len() {
            let current = trace.shapes.last().expect("non-empty");
            let (delta, rg, gg) = self.stage_eval(k, image, bbox, current, pose)?;
            let next: Vec<f64> = current.as_slice().iter().zip(&delta).map(|(s, d)| s + d).collect();
            trace.shapes.push(Shape2D::new(next)?);
            trace.displacements.push(delta);
            trace.representation_gates.push(rg);
            trace.regression_gates.push(gg);
        }
        Ok(trace)
    }

    /// Pose from the model's source, then the full cascade.
    pub fn predict(&self, sample: &Sample) -> Result<Trace> {
        let pose = if self.variant.uses_pose() {
            self.pose.resolve(sample)?
        } else {
            None
        };
        self.forward(&sample.image, &sample.bbox, pose.as_ref())
    }

    /// Records stage `k` on the tape; returns (normalized displacement,
    /// representation gate, regression gate).
    pub fn stage_forward(
        &self,
        tape: &mut Tape<'_>,
        k: usize,
        image: &GrayImage,
        shape: &Shape2D,
        pose: Option<&PoseAngles>,
    ) -> Result<(Var, Var, Var)> {
        let stage = &self.stages[k];
        let patches = extract_with(
            image.height(),
            image.width(),
            shape,
            self.dims.patch,
            |r, c| image.value(r, c),
        )?;
        let pv = tape.constant(patches.into_tensor());
        let (h, rg) = stage.representation.forward(tape, pv, pose)?;
        let (ds, gg) = stage.regression.forward(tape, h)?;
        Ok((ds, rg, gg))
    }

    /// Pixel displacement and gate weights of stage `k` at `shape`.
    pub fn stage_eval(
        &self,
        k: usize,
        image: &GrayImage,
        bbox: &BBox,
        shape: &Shape2D,
        pose: Option<&PoseAngles>,
    ) -> Result<(Vec<f64>, GateWeights, GateWeights)> {
        let mut tape = Tape::with_params(&self.store);
        let (ds, rg, gg) = self.stage_forward(&mut tape, k, image, shape, pose)?;
        let size = bbox.size();
        let delta = tape.value(ds).iter().map(|d| d * size).collect();
        Ok((
            delta,
            GateWeights::from_gate_output(tape.value(rg).to_vec()),
            GateWeights::from_gate_output(tape.value(gg).to_vec()),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub mean_loss: f64,
}

struct TrainItem<'s> {
    image: Cow<'s, GrayImage>,
    bbox: BBox,
    gt: Vec<f64>,
    pose: Option<PoseAngles>,
    shape: Shape2D,
}

/// Trains every stage in turn on `trainset`. Sets the model's mean shape
/// and returns the per-epoch loss history; `on_epoch` sees each record as
/// it is produced.
pub fn train(
    model: &mut CascadeModel,
    trainset: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if cfg.stages != model.num_stages() {
        return Err(Error::invalid(format!(
            "config asks for {} stages but the model has {}",
            cfg.stages,
            model.num_stages()
        )));
    }
    if trainset.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let p = model.dims.landmarks;
    if let Some(s) = trainset.iter().find(|s| s.gt.landmarks() != p) {
        return Err(Error::invalid(format!(
            "sample {} has {} landmarks, model expects {p}",
            s.id,
            s.gt.landmarks()
        )));
    }
    model.mean_shape = normalized_mean_shape(trainset)?;
    model.train_config = Some(cfg.clone());

    let template = Template3D::standard();
    let mirror: Vec<usize> = if template.landmarks() == p {
        template.mirror.clone()
    } else {
        (0..p).collect()
    };
    let mut items = trainset
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seeded_rng(mix_seed(cfg.seed, 2_000_000 + i as u64));
            let aug = Augmentation::draw(&mut rng, cfg, s.image.width());
            let init = perturbed_init(&model.mean_shape, &flipped_box(s, aug.flip), &aug)?;
            let (image, bbox, gt, pose) = if aug.flip {
                let f = flip_sample(s, &mirror)?;
                (Cow::Owned(f.image), f.bbox, f.gt, f.pose)
            } else {
                (Cow::Borrowed(&s.image), s.bbox, s.gt.clone(), s.pose)
            };
            let pose = if model.variant.uses_pose() {
                match &model.pose {
                    PoseSource::None => return Err(Error::MissingPose),
                    PoseSource::Oracle => Some(pose.ok_or(Error::MissingPose)?),
                    PoseSource::Model(net) => Some(net.forward(&image)?),
                }
            } else {
                None
            };
            Ok(TrainItem {
                image,
                bbox,
                gt: gt.into_vec(),
                pose,
                shape: init,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    for k in 0..model.num_stages() {
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            &model.store,
        );
        let mut losses: Vec<f64> = Vec::new();
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let mut rng = seeded_rng(mix_seed(cfg.seed, 1_000 * (k as u64 + 1) + epoch as u64));
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                step += 1;
                let refs: Vec<&TrainItem> = batch.iter().map(|&i| &items[i]).collect();
                let m: &CascadeModel = model;
                let (mut grads, loss) = batch_gradient(&m.store, &refs, |tape, item| {
                    stage_loss(m, tape, k, item)
                })?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { stage: k + 1, step });
                }
                total += loss;
                grads.scale(1.0 / batch.len() as f64);
                model.store.zero_grad();
                model.store.accumulate_table(&grads)?;
                adam.step(&mut model.store)?;
            }
            let rec = EpochRecord {
                stage: k + 1,
                epoch: epoch + 1,
                mean_loss: total / items.len() as f64,
            };
            on_epoch(&rec);
            history.push(rec);
            losses.push(rec.mean_loss);
            if plateaued(&losses, cfg.plateau_window, cfg.plateau_tol) {
                break;
            }
        }
        model.store.zero_grad();
        let m: &CascadeModel = model;
        let updates = items
            .par_iter()
            .map(|it| {
                let (delta, _, _) = m.stage_eval(k, &it.image, &it.bbox, &it.shape, it.pose.as_ref())?;
                Ok(it.shape.as_slice().iter().zip(&delta).map(|(s, d)| s + d).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        for (it, s) in items.iter_mut().zip(updates) {
            it.shape = Shape2D::new(s)?;
        }
    }
    Ok(history)
}

fn flipped_box(s: &Sample, flip: bool) -> BBox {
    if flip {
        let w = (s.image.width() - 1) as f64;
        BBox {
            x: w - (s.bbox.x + s.bbox.w),
            ..s.bbox
        }
    } else {
        s.bbox
    }
}

fn stage_loss(model: &CascadeModel, tape: &mut Tape<'_>, k: usize, item: &TrainItem) -> Result<Var> {
    let (ds, _, _) = model.stage_forward(tape, k, &item.image, &item.shape, item.pose.as_ref())?;
    let size = item.bbox.size();
    let target: Vec<f64> = item
        .gt
        .iter()
        .zip(item.shape.as_slice())
        .map(|(g, s)| (g - s) / size)
        .collect();
    let t = tape.constant_vec(target);
    let d = tape.sub(ds, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// True once the last `window` epochs improved the loss by less than `tol`
/// relative to the loss `window` epochs ago.
pub fn plateaued(losses: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || losses.len() <= window {
        return false;
    }
    let then = losses[losses.len() - 1 - window];
    let now = losses[losses.len() - 1];
    then > 0.0 && (then - now) / then < tol
}
