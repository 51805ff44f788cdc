//! Synthetic pose-varying faces.
//!
//! A 12-point 3D template in a unit head frame (x right, y up, z towards the
//! camera) is rotated by `R = R_yaw(γ) · R_pitch(β) · R_roll(α)`, where yaw
//! turns about y, pitch about x and roll about z, then projected
//! orthographically: `x = cx + r·X`, `y = cy − r·Y` in pixel coordinates
//! whose integer values are pixel centers.
//!
//! A seed with the top bit set draws the noise of the same seed without it,
//! mirrored, so `(γ, β, α, s)` and `(−γ, β, −α, s | MIRROR_BIT)` are
//! horizontal mirror images of each other under the template's
//! correspondence table.
//!
//! On disk every sample is three files sharing the stem `{id:06}`: a binary
//! PGM image, a `.pts` file with one `x y` pair per line and a `.meta` file of
//! `key=value` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{mix_seed, seeded_rng};
use crate::pose::PoseAngles;
use crate::representation::Shape2D;
use crate::tensor::Tensor;

pub const MIRROR_BIT: u64 = 1 << 63;

/// 8-bit grayscale image; pixel `p` stands for `p / 127.5 − 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("degenerate image"));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(quantize(f(r, c)));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Normalized value of the pixel at row `r`, column `c`.
    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c] as f64 / 127.5 - 1.0
    }

    /// `[1, H, W]` tensor of normalized values.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("image dims are positive")
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks_exact(self.width) {
            pixels.extend(row.iter().rev());
        }
        Self { pixels, ..*self }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(path, format!("byte {pos}"), "truncated PGM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::format(path, "byte 0", format!("expected P5 magic, found {:?}", fields[0])));
        }
        let num = |i: usize| -> Result<usize> {
            fields[i].parse().map_err(|_| {
                Error::format(path, "header", format!("bad PGM header field {:?}", fields[i]))
            })
        };
        let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(Error::format(path, "header", format!("maxval {maxval} unsupported, expected 255")));
        }
        if w == 0 || h == 0 {
            return Err(Error::format(path, "header", "zero image dimension"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let expected = w * h;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != expected {
            return Err(Error::format(
                path,
                format!("byte {pos}"),
                format!("expected {expected} pixels, found {}", raster.len()),
            ));
        }
        Self::new(w, h, raster.to_vec())
    }
}

/// Landmark template in the unit head frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Template3D {
    pub points: Vec<[f64; 3]>,
    /// `mirror[i]` is the landmark that `i` becomes under a left-right flip.
    pub mirror: Vec<usize>,
    pub pupils: (usize, usize),
}

impl Template3D {
    /// Brows 0/1, pupils 2/3, nose tip 4, nostrils 5/6, mouth corners 7/8,
    /// chin 9, jaw 10/11. Even indices of each pair sit on the image left
    /// of a frontal face.
    pub fn standard() -> Self {
        let sphere = |x: f64, y: f64| [x, y, (1.0 - x * x - y * y).sqrt()];
        let points = vec![
            sphere(-0.40, 0.38),
            sphere(0.40, 0.38),
            sphere(-0.33, 0.20),
            sphere(0.33, 0.20),
            [0.0, -0.08, 1.12],
            sphere(-0.13, -0.22),
            sphere(0.13, -0.22),
            sphere(-0.30, -0.50),
            sphere(0.30, -0.50),
            sphere(0.0, -0.85),
            sphere(-0.78, -0.35),
            sphere(0.78, -0.35),
        ];
        Self {
            points,
            mirror: vec![1, 0, 3, 2, 4, 6, 5, 8, 7, 9, 11, 10],
            pupils: (2, 3),
        }
    }

    pub fn landmarks(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.mirror.len() != n || self.mirror.iter().enumerate().any(|(i, &m)| m >= n || self.mirror[m] != i) {
            return Err(Error::invalid("mirror table is not an involution"));
        }
        let (a, b) = self.pupils;
        if a == b || a >= n || b >= n {
            return Err(Error::invalid("pupils must be two distinct landmarks"));
        }
        Ok(())
    }
}

/// Axis-aligned box: origin (x, y) is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub w: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// √(h·w)
    pub fn size(&self) -> f64 {
        (self.h * self.w).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub seed: u64,
    pub image: GrayImage,
    pub gt: Shape2D,
    pub pose: Option<PoseAngles>,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub image_size: usize,
    /// σ of per-landmark 2D jitter, pixels.
    pub jitter_px: f64,
    /// σ of 3D template deformation, head radii.
    pub deform: f64,
    /// Half-range of the uniform head-center offset, pixels.
    pub center_px: f64,
    /// Half-range of the uniform relative head-scale change.
    pub scale_range: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            jitter_px: 1.0,
            deform: 0.02,
            center_px: 4.0,
            scale_range: 0.08,
        }
    }
}

impl GenConfig {
    pub fn noiseless(image_size: usize) -> Self {
        Self {
            image_size,
            jitter_px: 0.0,
            deform: 0.0,
            center_px: 0.0,
            scale_range: 0.0,
        }
    }

    /// Frontal head radius before scale variation.
    pub fn radius(&self) -> f64 {
        0.3 * self.image_size as f64
    }
}

pub type Mat3 = [[f64; 3]; 3];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn apply(m: &Mat3, p: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
}

fn apply_t(m: &Mat3, p: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[0][i] * p[0] + m[1][i] * p[1] + m[2][i] * p[2])
}

/// R_yaw(γ) · R_pitch(β) · R_roll(α).
pub fn rotation(pose: &PoseAngles) -> Mat3 {
    let (sy, cy) = pose.yaw.sin_cos();
    let (sp, cp) = pose.pitch.sin_cos();
    let (sr, cr) = pose.roll.sin_cos();
    let yaw = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let pitch = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let roll = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&yaw, &matmul3(&pitch, &roll))
}

pub fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

pub fn check_pose_range(pose: &PoseAngles) -> Result<()> {
    let lim = |v: f64, deg: f64| v.abs() <= deg.to_radians() + 1e-12;
    if !(lim(pose.yaw, 90.0) && lim(pose.pitch, 90.0) && lim(pose.roll, 45.0)) {
        return Err(Error::invalid(format!(
            "pose ({:.4}, {:.4}, {:.4}) rad outside |yaw|,|pitch| <= 90 deg, |roll| <= 45 deg",
            pose.yaw, pose.pitch, pose.roll
        )));
    }
    Ok(())
}

struct Noise {
    center: (f64, f64),
    scale: f64,
    jitter: Vec<(f64, f64)>,
    deform: Vec<[f64; 3]>,
}

fn draw_noise(seed: u64, template: &Template3D, cfg: &GenConfig) -> Noise {
    let mut rng = seeded_rng(seed & !MIRROR_BIT);
    let mut gauss = || -> f64 { rng.sample(StandardNormal) };
    let p = template.landmarks();
    let jitter: Vec<(f64, f64)> = (0..p)
        .map(|_| (cfg.jitter_px * gauss(), cfg.jitter_px * gauss()))
        .collect();
    let deform: Vec<[f64; 3]> = (0..p)
        .map(|_| [cfg.deform * gauss(), cfg.deform * gauss(), cfg.deform * gauss()])
        .collect();
    let mut rng = seeded_rng(mix_seed(seed & !MIRROR_BIT, 1));
    let mut uni = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
    let center = (uni(cfg.center_px), uni(cfg.center_px));
    let scale = 1.0 + uni(cfg.scale_range);
    let mut n = Noise {
        center,
        scale,
        jitter,
        deform,
    };
    if seed & MIRROR_BIT != 0 {
        n.center.0 = -n.center.0;
        n.jitter = template
            .mirror
            .iter()
            .map(|&m| (-n.jitter[m].0, n.jitter[m].1))
            .collect();
        n.deform = template
            .mirror
            .iter()
            .map(|&m| [-n.deform[m][0], n.deform[m][1], n.deform[m][2]])
            .collect();
    }
    n
}

/// Renders and annotates one face.
pub fn generate_sample(pose: &PoseAngles, seed: u64, cfg: &GenConfig) -> Result<Sample> {
    generate_with(&Template3D::standard(), pose, seed, cfg)
}

pub fn generate_with(
    template: &Template3D,
    pose: &PoseAngles,
    seed: u64,
    cfg: &GenConfig,
) -> Result<Sample> {
    check_pose_range(pose)?;
    template.validate()?;
    if cfg.image_size < 8 {
        return Err(Error::invalid("image size must be at least 8"));
    }
    let noise = draw_noise(seed, template, cfg);
    let size = cfg.image_size as f64;
    let cx = (size - 1.0) / 2.0 + noise.center.0;
    let cy = (size - 1.0) / 2.0 + noise.center.1;
    let r = cfg.radius() * noise.scale;
    let rot = rotation(pose);

    let mut coords = Vec::with_capacity(2 * template.landmarks());
    for (i, t) in template.points.iter().enumerate() {
        let d = noise.deform[i];
        let p = apply(&rot, &[t[0] + d[0], t[1] + d[1], t[2] + d[2]]);
        coords.push(round6(cx + r * p[0] + noise.jitter[i].0));
        coords.push(round6(cy - r * p[1] + noise.jitter[i].1));
    }
    let image = render(template, &rot, cx, cy, r, cfg.image_size)?;
    Ok(Sample {
        id: 0,
        seed,
        image,
        gt: Shape2D::new(coords)?,
        pose: Some(*pose),
        bbox: BBox {
            x: cx - r,
            y: cy - r,
            h: 2.0 * r,
            w: 2.0 * r,
        },
    })
}

fn normalize(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn segment_dist2(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let t = ((0..3).map(|i| ab[i] * ap[i]).sum::<f64>() / (0..3).map(|i| ab[i] * ab[i]).sum::<f64>())
        .clamp(0.0, 1.0);
    dist2(p, &[a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]])
}

/// Shaded sphere with dark blobs at the features, a mouth stroke and hair.
fn render(template: &Template3D, rot: &Mat3, cx: f64, cy: f64, r: f64, size: usize) -> Result<GrayImage> {
    const DARKNESS: [f64; 12] = [0.7, 0.7, 0.9, 0.9, -0.35, 0.5, 0.5, 0.4, 0.4, 0.25, 0.3, 0.3];
    let light = normalize([0.0, 0.4, 1.0]);
    let marks: Vec<[f64; 3]> = template.points.iter().map(|&p| normalize(p)).collect();
    let (m7, m8) = (marks[7.min(marks.len() - 1)], marks[8.min(marks.len() - 1)]);
    let blob = 2.0 * 0.09 * 0.09;
    let h = size as f64;
    GrayImage::from_fn(size, size, |row, col| {
        let x = (col as f64 - cx) / r;
        let y = -(row as f64 - cy) / r;
        let rr = x * x + y * y;
        if rr >= 1.0 {
            return -0.6 + 0.2 * row as f64 / h;
        }
        let n = [x, y, (1.0 - rr).sqrt()];
        let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
        let q = apply_t(rot, &n);
        if q[1] > 0.55 || q[2] < -0.1 {
            return -0.75 + 0.15 * lambert;
        }
        let mut v = -0.2 + 0.9 * lambert;
        for (m, d) in marks.iter().zip(DARKNESS.iter().cycle()) {
            v -= d * (-dist2(&q, m) / blob).exp();
        }
        if marks.len() > 8 {
            v -= 0.6 * (-segment_dist2(&q, &m7, &m8) / (2.0 * 0.035 * 0.035)).exp();
        }
        v
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    /// Fraction of samples assigned to the training split.
    pub split: f64,
    pub yaw_max_deg: f64,
    pub pitch_max_deg: f64,
    pub roll_max_deg: f64,
    pub gen: GenConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 100,
            seed: 0,
            split: 0.8,
            yaw_max_deg: 90.0,
            pitch_max_deg: 20.0,
            roll_max_deg: 15.0,
            gen: GenConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid("a dataset needs at least two samples"));
        }
        if !(0.0..=1.0).contains(&self.split) {
            return Err(Error::invalid(format!("split {} outside [0, 1]", self.split)));
        }
        if !(0.0..=90.0).contains(&self.yaw_max_deg)
            || !(0.0..=90.0).contains(&self.pitch_max_deg)
            || !(0.0..=45.0).contains(&self.roll_max_deg)
        {
            return Err(Error::invalid("pose ranges exceed the generator's valid range"));
        }
        Ok(())
    }
}

/// Pose of sample `id`: yaw, pitch and roll uniform on their ranges.
pub fn sample_pose(cfg: &DatasetConfig, id: u64) -> PoseAngles {
    let mut rng = seeded_rng(mix_seed(cfg.seed, id));
    let mut uni = |deg: f64| {
        let a = deg.to_radians();
        if a > 0.0 {
            rng.gen_range(-a..=a)
        } else {
            0.0
        }
    };
    let yaw = uni(cfg.yaw_max_deg);
    let pitch = uni(cfg.pitch_max_deg);
    let roll = uni(cfg.roll_max_deg);
    PoseAngles { yaw, pitch, roll }
}

pub fn sample_seed(cfg: &DatasetConfig, id: u64) -> u64 {
    mix_seed(cfg.seed ^ 0x005E_ED0F_5A4D_17E5, id) & !MIRROR_BIT
}

/// Ids of the training split: ids ordered by a seeded hash, the first
/// `round(n·split)` of them.
pub fn train_ids(cfg: &DatasetConfig) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..cfg.n as u64).collect();
    ids.sort_by_key(|&id| (mix_seed(cfg.seed ^ 0x5B11_7000, id), id));
    let k = (cfg.n as f64 * cfg.split).round() as usize;
    let mut train = ids[..k].to_vec();
    train.sort_unstable();
    train
}

/// Generates every sample in memory; returns (train, test), each sorted by id.
pub fn generate_split(cfg: &DatasetConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let samples = (0..cfg.n as u64)
        .into_par_iter()
        .map(|id| {
            let mut s = generate_sample(&sample_pose(cfg, id), sample_seed(cfg, id), &cfg.gen)?;
            s.id = id;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let train = train_ids(cfg);
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for s in samples {
        if train.binary_search(&s.id).is_ok() {
            tr.push(s);
        } else {
            te.push(s);
        }
    }
    Ok((tr, te))
}

pub const MANIFEST: &str = "dataset.txt";

/// Writes `train/` and `test/` sample directories and a manifest under `out`.
pub fn generate_dataset(out: &Path, cfg: &DatasetConfig) -> Result<(usize, usize)> {
    let (train, test) = generate_split(cfg)?;
    for (name, set) in [("train", &train), ("test", &test)] {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in set.iter() {
            write_sample(s, &dir)?;
        }
    }
    let mut m = String::new();
    let _ = writeln!(m, "format=tmoe-synth-1");
    let _ = writeln!(m, "n={}", cfg.n);
    let _ = writeln!(m, "seed={}", cfg.seed);
    let _ = writeln!(m, "split={}", cfg.split);
    let _ = writeln!(m, "yaw_max_deg={}", cfg.yaw_max_deg);
    let _ = writeln!(m, "pitch_max_deg={}", cfg.pitch_max_deg);
    let _ = writeln!(m, "roll_max_deg={}", cfg.roll_max_deg);
    let _ = writeln!(m, "image_size={}", cfg.gen.image_size);
    let _ = writeln!(m, "landmarks={}", Template3D::standard().landmarks());
    let _ = writeln!(m, "train={}", train.len());
    let _ = writeln!(m, "test={}", test.len());
    let path = out.join(MANIFEST);
    fs::write(&path, m).map_err(|e| Error::io(&path, e))?;
    Ok((train.len(), test.len()))
}

pub fn sample_stem(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("{id:06}"))
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `{id:06}.pgm`, `.pts` and `.meta` into `dir`.
pub fn write_sample(sample: &Sample, dir: &Path) -> Result<()> {
    let stem = sample_stem(dir, sample.id);
    let write = |ext: &str, bytes: &[u8]| {
        let p = with_ext(&stem, ext);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("pgm", &sample.image.to_pgm())?;
    let mut pts = String::new();
    for (x, y) in sample.gt.points() {
        let _ = writeln!(pts, "{x:.6} {y:.6}");
    }
    write("pts", pts.as_bytes())?;
    let mut meta = String::new();
    let _ = writeln!(meta, "id={}", sample.id);
    let _ = writeln!(meta, "seed={}", sample.seed);
    if let Some(p) = sample.pose {
        let _ = writeln!(meta, "pose_yaw={}", p.yaw);
        let _ = writeln!(meta, "pose_pitch={}", p.pitch);
        let _ = writeln!(meta, "pose_roll={}", p.roll);
    }
    let b = sample.bbox;
    let _ = writeln!(meta, "bbox_x={}", b.x);
    let _ = writeln!(meta, "bbox_y={}", b.y);
    let _ = writeln!(meta, "bbox_h={}", b.h);
    let _ = writeln!(meta, "bbox_w={}", b.w);
    write("meta", meta.as_bytes())
}

/// Reads the sample whose files share `stem` (a path without extension).
pub fn read_sample(stem: &Path) -> Result<Sample> {
    let read = |ext: &str| {
        let p = with_ext(stem, ext);
        fs::read(&p).map(|b| (p.clone(), b)).map_err(|e| Error::io(&p, e))
    };
    let (img_path, img) = read("pgm")?;
    let image = GrayImage::from_pgm(&img, &img_path)?;

    let (pts_path, pts) = read("pts")?;
    let pts = String::from_utf8(pts).map_err(|_| Error::format(&pts_path, "file", "not UTF-8"))?;
    let mut coords = Vec::new();
    for (i, line) in pts.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        for tok in line.split_whitespace() {
            coords.push(tok.parse::<f64>().map_err(|_| {
                Error::format(&pts_path, format!("line {}", i + 1), format!("bad number {tok:?}"))
            })?);
        }
    }
    if coords.len() % 2 != 0 {
        return Err(Error::format(
            &pts_path,
            "file",
            format!("odd coordinate count {}", coords.len()),
        ));
    }
    let gt = Shape2D::new(coords).map_err(|e| Error::format(&pts_path, "file", e.to_string()))?;

    let (meta_path, meta) = read("meta")?;
    let meta = String::from_utf8(meta).map_err(|_| Error::format(&meta_path, "file", "not UTF-8"))?;
    let kv = parse_kv(&meta, &meta_path)?;
    let get = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    let num = |k: &str| -> Result<f64> {
        let v = get(k).ok_or_else(|| Error::format(&meta_path, k, "missing key"))?;
        v.parse()
            .map_err(|_| Error::format(&meta_path, k, format!("bad value {v:?}")))
    };
    let int = |k: &str| -> Result<u64> {
        let v = get(k).ok_or_else(|| Error::format(&meta_path, k, "missing key"))?;
        v.parse()
            .map_err(|_| Error::format(&meta_path, k, format!("bad value {v:?}")))
    };
    let pose = match get("pose_yaw") {
        Some(_) => Some(
            PoseAngles::new(num("pose_yaw")?, num("pose_pitch")?, num("pose_roll")?)
                .map_err(|e| Error::format(&meta_path, "pose", e.to_string()))?,
        ),
        None => None,
    };
    let bbox = BBox {
        x: num("bbox_x")?,
        y: num("bbox_y")?,
        h: num("bbox_h")?,
        w: num("bbox_w")?,
    };
    if !(bbox.h > 0.0 && bbox.w > 0.0) {
        return Err(Error::format(&meta_path, "bbox", "box must have positive size"));
    }
    Ok(Sample {
        id: int("id")?,
        seed: int("seed")?,
        image,
        gt,
        pose,
        bbox,
    })
}

pub(crate) fn parse_kv(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::format(path, format!("line {}", i + 1), "expected key=value"))
        })
        .collect()
}

/// Reads every sample in a split directory, sorted by id.
pub fn read_split(dir: &Path) -> Result<Vec<Sample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "meta") {
            stems.push(p.with_extension(""));
        }
    }
    stems.sort();
    let mut samples = stems
        .par_iter()
        .map(|s| read_sample(s))
        .collect::<Result<Vec<_>>>()?;
    samples.sort_by_key(|s| s.id);
    Ok(samples)
}

/// Reads `root/train` and `root/test`.
pub fn read_dataset(root: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    Ok((read_split(&root.join("train"))?, read_split(&root.join("test"))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_consistent() {
        let t = Template3D::standard();
        t.validate().unwrap();
        for (i, &m) in t.mirror.iter().enumerate() {
            let (a, b) = (t.points[i], t.points[m]);
            assert_eq!(a[0], -b[0]);
            assert_eq!(a[1], b[1]);
            assert_eq!(a[2], b[2]);
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation(&PoseAngles::new(0.7, -0.3, 0.2).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn quantize_endpoints() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(5.0), 255);
    }

    #[test]
    fn out_of_range_pose_rejected() {
        let p = PoseAngles::from_degrees(10.0, 0.0, 60.0).unwrap();
        assert!(generate_sample(&p, 1, &GenConfig::default()).is_err());
    }

    #[test]
    fn pgm_errors() {
        let img = GrayImage::new(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = img.to_pgm();
        let p = Path::new("x.pgm");
        assert_eq!(GrayImage::from_pgm(&bytes, p).unwrap(), img);
        let err = GrayImage::from_pgm(&bytes[..bytes.len() - 1], p).unwrap_err().to_string();
        assert!(err.contains("expected 6 pixels"), "{err}");
        assert!(GrayImage::from_pgm(b"P2\n1 1\n255\n\x00", p).is_err());
    }

    #[test]
    fn split_counts_are_exact() {
        let cfg = DatasetConfig {
            n: 10,
            split: 0.8,
            ..Default::default()
        };
        assert_eq!(train_ids(&cfg).len(), 8);
    }
}
