use rand::Rng;
use tmoe::cascade::{CascadeModel, PoseSource, TrainConfig};
use tmoe::checkpoint::*;
use tmoe::moe::{Dims, Variant};
use tmoe::params::seeded_rng;
use tmoe::pose::{PoseAngles, PoseNet};
use tmoe::synthdata::{generate_sample, GenConfig};
use tmoe::Error;

fn model(variant: Variant, pose: PoseSource, seed: u64) -> CascadeModel {
    let mut m = CascadeModel::new(variant, Dims::desk(), 2, seed, pose).unwrap();
    let mut rng = seeded_rng(seed);
    for id in m.store.ids().collect::<Vec<_>>() {
        m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
    }
    m.mean_shape = (0..m.dims.shape_dim()).map(|_| rng.gen_range(-0.4..0.4)).collect();
    m.train_config = Some(TrainConfig {
        stages: 2,
        seed,
        translation_px: Some(2.5),
        ..Default::default()
    });
    m
}

fn all_models() -> Vec<CascadeModel> {
    let mut out: Vec<CascadeModel> = Variant::ALL
        .iter()
        .map(|&v| {
            let pose = if v.uses_pose() { PoseSource::Oracle } else { PoseSource::None };
            model(v, pose, 3)
        })
        .collect();
    out.push(model(Variant::PoseTreeMoe, PoseSource::Model(Box::new(PoseNet::new(5).unwrap())), 4));
    out
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for m in all_models() {
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_model(&m, &a).unwrap();
        let back = load_model(&a).unwrap();
        save_model(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "{}", m.variant);
        assert_eq!(back.variant, m.variant);
        assert_eq!(back.dims, m.dims);
        assert_eq!(back.train_config, m.train_config);
        assert_eq!(back.pose.name(), m.pose.name());
    }
}

#[test]
fn loaded_model_forward_is_bit_identical() {
    let pose = PoseAngles::from_degrees(-55.0, 7.0, 2.0).unwrap();
    let s = generate_sample(&pose, 8, &GenConfig::default()).unwrap();
    for m in all_models() {
        let back = decode_model(&encode_model(&m)).unwrap();
        let a = m.predict(&s).unwrap();
        let b = back.predict(&s).unwrap();
        for (x, y) in a.shapes.iter().zip(&b.shapes) {
            let xb: Vec<u64> = x.as_slice().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(a.regression_gates, b.regression_gates);
    }
}

fn payload_offset(bytes: &[u8]) -> usize {
    let header = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12 + header + 4;
    let name = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4 + name + 8 + 4;
    pos
}

#[test]
fn corrupted_payload_fails_checksum() {
    let m = model(Variant::TreeMoe, PoseSource::None, 1);
    let bytes = encode_model(&m);
    let start = payload_offset(&bytes);
    for at in [start, start + 3, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x10;
        let err = decode_model(&bad).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
        assert!(err.to_string().contains("checksum"), "{err}");
    }
}

#[test]
fn truncation_is_rejected_everywhere() {
    let m = model(Variant::Baseline, PoseSource::None, 2);
    let bytes = encode_model(&m);
    let mut rng = seeded_rng(1);
    let mut cuts: Vec<usize> = (0..40).map(|_| rng.gen_range(0..bytes.len())).collect();
    cuts.extend([0, 3, 8, 12, bytes.len() - 1]);
    for cut in cuts {
        let err = decode_model(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "cut {cut}: {err}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_model(&long).is_err());
}

#[test]
fn wrong_magic_and_version_are_named() {
    let bytes = encode_model(&model(Variant::Moe, PoseSource::None, 3));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_model(&bad).unwrap_err().to_string().contains("magic"));
    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let err = decode_model(&v).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn pose_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let net = PoseNet::new(9).unwrap();
    let p = dir.path().join("pose.ckpt");
    save_pose(&net, &p).unwrap();
    let back = load_pose(&p).unwrap();
    assert_eq!(encode_pose(&back), encode_pose(&net));
    let s = generate_sample(&PoseAngles::from_degrees(30.0, 0.0, 0.0).unwrap(), 1, &GenConfig::default()).unwrap();
    assert_eq!(back.forward(&s.image).unwrap(), net.forward(&s.image).unwrap());
    let err = decode_model(&encode_pose(&net)).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }));
}
