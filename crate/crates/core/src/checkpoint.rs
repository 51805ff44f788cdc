//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TMOE"  u32 version
//! u32 header length, header (UTF-8 key=value lines)
//! u32 block count
//! per block: u32 name length, name, u64 payload length, u32 CRC32, payload (f64 LE)
//! ```
//!
//! The header records everything needed to rebuild the architecture; the
//! blocks carry the mean shape and every named parameter tensor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cascade::{CascadeModel, PoseSource, TrainConfig};
use crate::error::{Error, Result};
use crate::moe::{ConvSpec, Dims, Variant};
use crate::params::ParamStore;
use crate::pose::PoseNet;
use crate::synthdata::parse_kv;

pub const MAGIC: &[u8; 4] = b"TMOE";
pub const VERSION: u32 = 1;
pub const LEAF_ORDER: &str = "heap-order-nodes,left-to-right-leaves";

struct Block<'a> {
    name: &'a str,
    data: &'a [f64],
}

fn encode(header: &str, blocks: &[Block<'_>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        let payload: Vec<u8> = b.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::checkpoint(
                section,
                format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }
}

type Decoded = (Vec<(String, String)>, Vec<(String, Vec<f64>)>);

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::checkpoint("magic", "not a TMOE checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::checkpoint(
            "version",
            format!("unsupported format version {version}, expected {VERSION}"),
        ));
    }
    let hlen = r.u32("header")? as usize;
    let header = std::str::from_utf8(r.take(hlen, "header")?)
        .map_err(|_| Error::checkpoint("header", "header is not UTF-8"))?;
    let kv = parse_kv(header, Path::new("<checkpoint header>"))
        .map_err(|e| Error::checkpoint("header", e.to_string()))?;
    let count = r.u32("block count")?;
    let mut blocks = Vec::with_capacity(count as usize);
    for i in 0..count {
        let section = format!("block {i}");
        let nlen = r.u32(&section)? as usize;
        let name = std::str::from_utf8(r.take(nlen, &section)?)
            .map_err(|_| Error::checkpoint(&section, "block name is not UTF-8"))?
            .to_string();
        let len = r.u64(&name)? as usize;
        let crc = r.u32(&name)?;
        let payload = r.take(len, &name)?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::checkpoint(&name, "checksum mismatch"));
        }
        if !len.is_multiple_of(8) {
            return Err(Error::checkpoint(&name, format!("payload length {len} is not a multiple of 8")));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.push((name, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::checkpoint(
            "trailer",
            format!("{} unexpected bytes after the last block", bytes.len() - r.pos),
        ));
    }
    Ok((kv, blocks))
}

fn specs_str(specs: &[ConvSpec]) -> String {
    specs.iter().map(ConvSpec::to_string).collect::<Vec<_>>().join(",")
}

fn header_for(model: &CascadeModel) -> String {
    let d = &model.dims;
    let mut h = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(h, "{k}={v}");
    };
    kv("kind", "cascade".into());
    kv("variant", model.variant.name().into());
    kv("stages", model.num_stages().to_string());
    kv("seed", model.seed.to_string());
    kv("landmarks", d.landmarks.to_string());
    kv("patch", d.patch.to_string());
    kv("image_size", d.image_size.to_string());
    kv("single_cnn", specs_str(&d.single_cnn));
    kv("expert_cnn", specs_str(&d.expert_cnn));
    kv("rep_experts", d.rep_experts.to_string());
    kv("reg_experts", d.reg_experts.to_string());
    kv("reg_hidden", d.reg_hidden.to_string());
    kv("baseline_hidden", d.baseline_hidden.to_string());
    kv("leaf_order", LEAF_ORDER.into());
    kv("pose_source", model.pose.name().into());
    if let Some(t) = &model.train_config {
        kv("train.stages", t.stages.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.seed", t.seed.to_string());
        if let Some(tp) = t.translation_px {
            kv("train.translation_px", tp.to_string());
        }
        kv("train.scale_sigma", t.scale_sigma.to_string());
        kv("train.flip_prob", t.flip_prob.to_string());
        kv("train.plateau_tol", t.plateau_tol.to_string());
        kv("train.plateau_window", t.plateau_window.to_string());
    }
    h
}

fn store_blocks<'a>(store: &'a ParamStore, out: &mut Vec<Block<'a>>) {
    for (name, t) in store.iter() {
        out.push(Block { name, data: t.data() });
    }
}

pub fn encode_model(model: &CascadeModel) -> Vec<u8> {
    let header = header_for(model);
    let mut blocks = vec![Block {
        name: "mean_shape",
        data: &model.mean_shape,
    }];
    store_blocks(&model.store, &mut blocks);
    if let PoseSource::Model(net) = &model.pose {
        store_blocks(&net.store, &mut blocks);
    }
    encode(&header, &blocks)
}

struct Header(Vec<(String, String)>);

impl Header {
    fn get(&self, k: &str) -> Option<&str> {
        self.0.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str())
    }

    fn req(&self, k: &str) -> Result<&str> {
        self.get(k)
            .ok_or_else(|| Error::checkpoint("header", format!("missing key `{k}`")))
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<T> {
        let v = self.req(k)?;
        v.parse()
            .map_err(|_| Error::checkpoint("header", format!("bad value {v:?} for `{k}`")))
    }

    fn specs(&self, k: &str) -> Result<Vec<ConvSpec>> {
        self.req(k)?
            .split(',')
            .map(|s| s.parse().map_err(|e: Error| Error::checkpoint("header", e.to_string())))
            .collect()
    }
}

fn fill_store(store: &mut ParamStore, blocks: &mut Vec<(String, Vec<f64>)>) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let pos = blocks
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::checkpoint(&name, "parameter block missing"))?;
        let (_, data) = blocks.swap_remove(pos);
        let t = store.get_mut(id);
        if data.len() != t.numel() {
            return Err(Error::checkpoint(
                &name,
                format!("expected {} values for dims {:?}, found {}", t.numel(), t.dims(), data.len()),
            ));
        }
        t.data_mut().copy_from_slice(&data);
    }
    Ok(())
}

pub fn decode_model(bytes: &[u8]) -> Result<CascadeModel> {
    let (kv, mut blocks) = decode(bytes)?;
    let h = Header(kv);
    if h.req("kind")? != "cascade" {
        return Err(Error::checkpoint("header", format!("expected a cascade checkpoint, found kind `{}`", h.req("kind")?)));
    }
    if h.req("leaf_order")? != LEAF_ORDER {
        return Err(Error::checkpoint("header", "unknown leaf ordering convention"));
    }
    let variant: Variant = h
        .req("variant")?
        .parse()
        .map_err(|e: Error| Error::checkpoint("header", e.to_string()))?;
    let dims = Dims {
        landmarks: h.parse("landmarks")?,
        patch: h.parse("patch")?,
        image_size: h.parse("image_size")?,
        single_cnn: h.specs("single_cnn")?,
        expert_cnn: h.specs("expert_cnn")?,
        rep_experts: h.parse("rep_experts")?,
        reg_experts: h.parse("reg_experts")?,
        reg_hidden: h.parse("reg_hidden")?,
        baseline_hidden: h.parse("baseline_hidden")?,
    };
    let pose = match h.req("pose_source")? {
        "none" => PoseSource::None,
        "oracle" => PoseSource::Oracle,
        "model" => {
            let mut net = PoseNet::new(0)?;
            fill_store(&mut net.store, &mut blocks)?;
            PoseSource::Model(Box::new(net))
        }
        other => return Err(Error::checkpoint("header", format!("unknown pose source `{other}`"))),
    };
    let mut model = CascadeModel::new(variant, dims, h.parse("stages")?, h.parse("seed")?, pose)
        .map_err(|e| Error::checkpoint("header", e.to_string()))?;
    let pos = blocks
        .iter()
        .position(|(n, _)| n == "mean_shape")
        .ok_or_else(|| Error::checkpoint("mean_shape", "block missing"))?;
    let (_, mean) = blocks.swap_remove(pos);
    if mean.len() != model.dims.shape_dim() {
        return Err(Error::checkpoint(
            "mean_shape",
            format!("expected {} values, found {}", model.dims.shape_dim(), mean.len()),
        ));
    }
    model.mean_shape = mean;
    fill_store(&mut model.store, &mut blocks)?;
    if let Some((name, _)) = blocks.first() {
        return Err(Error::checkpoint(name, "block does not belong to this architecture"));
    }
    if h.get("train.stages").is_some() {
        model.train_config = Some(TrainConfig {
            stages: h.parse("train.stages")?,
            lr: h.parse("train.lr")?,
            epochs: h.parse("train.epochs")?,
            batch_size: h.parse("train.batch_size")?,
            seed: h.parse("train.seed")?,
            translation_px: match h.get("train.translation_px") {
                Some(_) => Some(h.parse("train.translation_px")?),
                None => None,
            },
            scale_sigma: h.parse("train.scale_sigma")?,
            flip_prob: h.parse("train.flip_prob")?,
            plateau_tol: h.parse("train.plateau_tol")?,
            plateau_window: h.parse("train.plateau_window")?,
        });
    }
    Ok(model)
}

pub fn save_model(model: &CascadeModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<CascadeModel> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_pose(net: &PoseNet) -> Vec<u8> {
    let mut blocks = Vec::new();
    store_blocks(&net.store, &mut blocks);
    encode("kind=pose\n", &blocks)
}

pub fn decode_pose(bytes: &[u8]) -> Result<PoseNet> {
    let (kv, mut blocks) = decode(bytes)?;
    let h = Header(kv);
    if h.req("kind")? != "pose" {
        return Err(Error::checkpoint("header", format!("expected a pose checkpoint, found kind `{}`", h.req("kind")?)));
    }
    let mut net = PoseNet::new(0)?;
    fill_store(&mut net.store, &mut blocks)?;
    if let Some((name, _)) = blocks.first() {
        return Err(Error::checkpoint(name, "block does not belong to the pose network"));
    }
    Ok(net)
}

pub fn save_pose(net: &PoseNet, path: &Path) -> Result<()> {
    fs::write(path, encode_pose(net)).map_err(|e| Error::io(path, e))
}

pub fn load_pose(path: &Path) -> Result<PoseNet> {
    decode_pose(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
