//! Shape-indexed features: patches cropped around the current landmarks are
//! passed through CNN experts whose kernels are shared across landmarks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gates::{Gate, GateInput};
use crate::moe::{cnn_output_side, combine_vars, ConvSpec};
use crate::params::{ParamId, ParamStore};
use crate::pose::PoseAngles;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Landmark coordinates interleaved as (x₁, y₁, …, x_P, y_P), pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape2D {
    coords: Vec<f64>,
}

impl Shape2D {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if !coords.len().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "shape has an odd coordinate count {}",
                coords.len()
            )));
        }
        if coords.len() < 4 {
            return Err(Error::invalid("a shape needs at least two landmarks"));
        }
        Ok(Self { coords })
    }

    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        Self::new(points.iter().flat_map(|&(x, y)| [x, y]).collect())
    }

    pub fn zeros(landmarks: usize) -> Result<Self> {
        Self::new(vec![0.0; 2 * landmarks])
    }

    pub fn landmarks(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        (self.coords[2 * i], self.coords[2 * i + 1])
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.coords.chunks_exact(2).map(|c| (c[0], c[1]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }
}

/// P patches of C×q×q, stored batch-major as `[P, C, q, q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    patches: Tensor,
    pub patch_size: usize,
    /// Source landmark of each patch.
    pub landmarks: Vec<usize>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.patches
    }

    pub fn into_tensor(self) -> Tensor {
        self.patches
    }

    /// Pixels of patch `i`, row-major.
    pub fn patch(&self, i: usize) -> &[f64] {
        let n = self.patches.numel() / self.len();
        &self.patches.data()[i * n..(i + 1) * n]
    }

    /// Reorders patches; patch `j` of the result is patch `order[j]` here.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::invalid("permutation length differs from patch count"));
        }
        let mut data = Vec::with_capacity(self.patches.numel());
        for &i in order {
            data.extend_from_slice(self.patch(i));
        }
        Ok(Self {
            patches: Tensor::new(self.patches.dims().to_vec(), data)?,
            patch_size: self.patch_size,
            landmarks: order.iter().map(|&i| self.landmarks[i]).collect(),
        })
    }
}

/// Crops one q×q window per landmark from a `[1, H, W]` (or `[H, W]`) image.
///
/// The window of a landmark at (x, y) spans columns `round(x) − q/2 ..
/// round(x) + q/2` (exclusive) and likewise for rows. Rounding is half away
/// from zero; pixels outside the image read as 0.
pub fn extract_patches(image: &Tensor, shape: &Shape2D, q: usize) -> Result<PatchSet> {
    let (h, w) = match image.dims() {
        [1, h, w] | [h, w] => (*h, *w),
        d => {
            return Err(Error::invalid(format!(
                "extract_patches expects a single-channel image, got dims {d:?}"
            )))
        }
    };
    let data = image.data();
    extract_with(h, w, shape, q, |r, c| data[r * w + c])
}

pub(crate) fn extract_with(
    h: usize,
    w: usize,
    shape: &Shape2D,
    q: usize,
    pixel: impl Fn(usize, usize) -> f64,
) -> Result<PatchSet> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("degenerate image"));
    }
    if q == 0 || !q.is_multiple_of(2) {
        return Err(Error::invalid(format!("patch size {q} must be even and positive")));
    }
    let p = shape.landmarks();
    let half = (q / 2) as i64;
    let mut out = vec![0.0; p * q * q];
    for (i, (x, y)) in shape.points().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::invalid(format!("landmark {i} is not finite")));
        }
        let (cx, cy) = (x.round() as i64, y.round() as i64);
        let patch = &mut out[i * q * q..(i + 1) * q * q];
        for pr in 0..q {
            let r = cy - half + pr as i64;
            if r < 0 || r >= h as i64 {
                continue;
            }
            for pc in 0..q {
                let c = cx - half + pc as i64;
                if c >= 0 && c < w as i64 {
                    patch[pr * q + pc] = pixel(r as usize, c as usize);
                }
            }
        }
    }
    Ok(PatchSet {
        patches: Tensor::new(vec![p, 1, q, q], out)?,
        patch_size: q,
        landmarks: (0..p).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

/// CNN applied with the same kernels to every patch; ReLU between layers,
/// none after the last. Reduces each patch to `features` values.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCnn {
    pub layers: Vec<ConvLayer>,
    pub patch_size: usize,
    pub in_channels: usize,
    pub features: usize,
}

impl ExpertCnn {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        specs: &[ConvSpec],
        in_channels: usize,
        patch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        match cnn_output_side(patch_size, specs) {
            Some(1) => {}
            side => {
                return Err(Error::invalid(format!(
                    "CNN must reduce a {patch_size}x{patch_size} patch to 1x1, got {side:?}"
                )))
            }
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut c_in = in_channels;
        for (i, s) in specs.iter().enumerate() {
            let fan_in = c_in * s.kernel * s.kernel;
            let kernels = store.add_uniform(
                format!("{prefix}.conv{i}.kernels"),
                vec![s.out_channels, c_in, s.kernel, s.kernel],
                fan_in,
                rng,
            )?;
            let bias = store.add_zeros(format!("{prefix}.conv{i}.bias"), vec![s.out_channels])?;
            layers.push(ConvLayer {
                kernels,
                bias,
                stride: s.stride,
            });
            c_in = s.out_channels;
        }
        Ok(Self {
            layers,
            patch_size,
            in_channels,
            features: c_in,
        })
    }

    /// `patches` is `[P, C, q, q]`; returns h = f(patch₁) ‖ … ‖ f(patch_P).
    pub fn forward(&self, tape: &mut Tape<'_>, patches: Var) -> Result<Var> {
        let d = tape.dims(patches).to_vec();
        if d.len() != 4 || d[1] != self.in_channels || d[2] != self.patch_size || d[3] != self.patch_size {
            return Err(Error::DimensionMismatch {
                op: "expert_cnn_forward",
                left: vec![self.in_channels, self.patch_size, self.patch_size],
                right: d,
            });
        }
        let mut x = patches;
        for (i, layer) in self.layers.iter().enumerate() {
            let k = tape.p(layer.kernels)?;
            let b = tape.p(layer.bias)?;
            x = tape.conv2d(x, k, b, layer.stride)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x);
            }
        }
        tape.reshape(x, vec![d[0] * self.features])
    }
}

/// Representation committee: expert CNNs blended by a gate over the pose.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationBank {
    pub experts: Vec<ExpertCnn>,
    pub gate: Gate,
    pub gate_input: GateInput,
}

impl RepresentationBank {
    pub fn new(experts: Vec<ExpertCnn>, gate: Gate, gate_input: GateInput) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::invalid("representation bank needs an expert"))?;
        if experts
            .iter()
            .any(|e| e.features != first.features || e.patch_size != first.patch_size)
        {
            return Err(Error::invalid(
                "representation experts must share patch size and feature count",
            ));
        }
        if gate.experts() != experts.len() {
            return Err(Error::invalid(format!(
                "gate over {} experts for a bank of {}",
                gate.experts(),
                experts.len()
            )));
        }
        if gate.is_learned() && gate_input != GateInput::Pose {
            return Err(Error::invalid("a learned representation gate reads the pose"));
        }
        Ok(Self {
            experts,
            gate,
            gate_input,
        })
    }

    pub fn features(&self) -> usize {
        self.experts[0].features
    }

    pub fn patch_size(&self) -> usize {
        self.experts[0].patch_size
    }

    pub fn needs_pose(&self) -> bool {
        self.gate.is_learned() && self.gate_input == GateInput::Pose
    }

    /// Returns (h, gate weights). A single-expert bank returns its expert's
    /// output unchanged.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        patches: Var,
        pose: Option<&PoseAngles>,
    ) -> Result<(Var, Var)> {
        if self.experts.len() == 1 {
            let h = self.experts[0].forward(tape, patches)?;
            let g = self.gate.forward(tape, None)?;
            return Ok((h, g));
        }
        let gate_in = if self.needs_pose() {
            let p = pose.ok_or(Error::MissingPose)?;
            Some(tape.constant_vec(p.to_vec()))
        } else {
            None
        };
        let outputs = self
            .experts
            .iter()
            .map(|e| e.forward(tape, patches))
            .collect::<Result<Vec<_>>>()?;
        let g = self.gate.forward(tape, gate_in)?;
        let h = combine_vars(tape, &outputs, g)?;
        Ok((h, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, h, w], (0..h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn shape_validation() {
        assert!(Shape2D::new(vec![1.0, 2.0, 3.0]).is_err());
        assert!(Shape2D::new(vec![1.0, 2.0]).is_err());
        let s = Shape2D::from_points(&[(1.0, 2.0), (3.0, 4.0)]).unwrap();
        assert_eq!(s.point(1), (3.0, 4.0));
    }

    #[test]
    fn center_patch_is_direct_slice() {
        let img = ramp(8, 8);
        let s = Shape2D::from_points(&[(3.5, 3.5), (3.5, 3.5)]).unwrap();
        let p = extract_patches(&img, &s, 4).unwrap();
        let mut want = Vec::new();
        for r in 2..6 {
            for c in 2..6 {
                want.push((r * 8 + c) as f64);
            }
        }
        assert_eq!(p.patch(0), want.as_slice());
    }

    #[test]
    fn corner_patch_is_zero_padded() {
        let img = ramp(8, 8);
        let s = Shape2D::from_points(&[(0.0, 0.0), (4.0, 4.0)]).unwrap();
        let p = extract_patches(&img, &s, 4).unwrap();
        #[rustfmt::skip]
        let want = [
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            0.0, 0.0, 8.0, 9.0,
        ];
        assert_eq!(p.patch(0), &want);
    }

    #[test]
    fn constant_image_constant_patches() {
        let img = Tensor::new(vec![1, 10, 10], vec![0.25; 100]).unwrap();
        let s = Shape2D::from_points(&[(4.0, 5.0), (6.2, 3.7), (5.0, 5.0)]).unwrap();
        let p = extract_patches(&img, &s, 4).unwrap();
        assert!(p.tensor().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let s = Shape2D::from_points(&[(0.0, 0.0), (1.0, 1.0)]).unwrap();
        assert!(extract_patches(&ramp(4, 4), &s, 3).is_err());
        assert!(extract_with(0, 4, &s, 2, |_, _| 0.0).is_err());
    }

    fn tiny_cnn(store: &mut ParamStore) -> ExpertCnn {
        let specs = [ConvSpec::new(2, 3, 1), ConvSpec::new(3, 2, 1)];
        ExpertCnn::build(store, "cnn", &specs, 1, 4, &mut seeded_rng(3)).unwrap()
    }

    #[test]
    fn cnn_must_end_at_one_pixel() {
        let mut store = ParamStore::new();
        let specs = [ConvSpec::new(2, 3, 1)];
        assert!(ExpertCnn::build(&mut store, "c", &specs, 1, 4, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn identical_patches_identical_blocks() {
        let mut store = ParamStore::new();
        let cnn = tiny_cnn(&mut store);
        let img = ramp(8, 8);
        let s = Shape2D::from_points(&[(3.0, 3.0), (3.0, 3.0)]).unwrap();
        let patches = extract_patches(&img, &s, 4).unwrap().into_tensor();
        let mut t = Tape::with_params(&store);
        let pv = t.constant(patches);
        let h = cnn.forward(&mut t, pv).unwrap();
        let v = t.value(h);
        assert_eq!(v.len(), 6);
        assert_eq!(v[..3], v[3..]);
    }

    #[test]
    fn zero_kernels_give_bias_pattern() {
        let mut store = ParamStore::new();
        let cnn = tiny_cnn(&mut store);
        for l in &cnn.layers {
            store.get_mut(l.kernels).data_mut().fill(0.0);
        }
        store
            .get_mut(cnn.layers[1].bias)
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0]);
        let img = ramp(8, 8);
        let s = Shape2D::from_points(&[(2.0, 3.0), (5.0, 4.0)]).unwrap();
        let patches = extract_patches(&img, &s, 4).unwrap().into_tensor();
        let mut t = Tape::with_params(&store);
        let pv = t.constant(patches);
        let h = cnn.forward(&mut t, pv).unwrap();
        assert_eq!(t.value(h), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }
}
