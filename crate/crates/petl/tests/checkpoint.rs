use petl::checkpoint::{self, decode, delta_bytes, fingerprint, load_delta, load_delta_bytes, save_delta, Content};
use petl::Error;
use petl_core::backbone::{ArchConfig, Backbone, Head, HeadConfig, OutputKind, Plain};
use petl_core::petl::{AdaptedModel, LoraScope, Method, PetlConfig};
use petl_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn input(t: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..t * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_f64(&v, &[t, d]).unwrap()
}

/// Moves every trainable value off its initialization, as training would.
fn pretend_trained(model: &AdaptedModel<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for p in model.trainable() {
        for v in p.tensor.data_mut().iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += 0.05 * e as f32;
        }
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn every_method_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for arch in [ArchConfig::transformer(16, 3, 2), ArchConfig::conformer(16, 3, 2).with_conv_kernel(3)] {
        let mut methods: Vec<Method> = Method::table_rows().to_vec();
        methods.push(
            PetlConfig::Prefix {
                n_prefix: 3,
                mlp_hidden: Some(4),
            }
            .into(),
        );
        for method in methods {
            let base = Backbone::<f32>::build(arch, 7).unwrap().with_use_layers(2).unwrap();
            let model = AdaptedModel::inject(base, method).unwrap();
            pretend_trained(&model);
            let x = input(5, 16, 1);
            let expected = bits(&model.forward_features(&x).unwrap());
            let path = dir.path().join(format!("{}.petl", method.label()));
            save_delta(&model, &path).unwrap();
            let loaded = load_delta(Backbone::<f32>::build(arch, 7).unwrap(), &path).unwrap();
            assert_eq!(loaded.method(), &method);
            assert_eq!(loaded.base().use_layers(), 2);
            assert_eq!(bits(&loaded.forward_features(&x).unwrap()), expected, "{method:?}");
        }
    }
}

#[test]
fn baked_prefix_round_trips() {
    let arch = ArchConfig::transformer(8, 2, 2);
    let base = Backbone::<f32>::build(arch, 3).unwrap();
    let mut model = AdaptedModel::inject(base, PetlConfig::Prefix { n_prefix: 2, mlp_hidden: None }.into()).unwrap();
    pretend_trained(&model);
    model.bake_prefix().unwrap();
    let x = input(3, 8, 2);
    let bytes = delta_bytes(&model).unwrap();
    assert!(decode(&bytes).unwrap().tag.baked);
    let loaded = load_delta_bytes(Backbone::<f32>::build(arch, 3).unwrap(), &bytes).unwrap();
    assert_eq!(bits(&loaded.forward_features(&x).unwrap()), bits(&model.forward_features(&x).unwrap()));
}

#[test]
fn delta_holds_no_frozen_weights() {
    let arch = ArchConfig::transformer(16, 2, 2);
    let model = AdaptedModel::inject(Backbone::<f32>::build(arch, 0).unwrap(), PetlConfig::lora().into()).unwrap();
    let ckpt = decode(&delta_bytes(&model).unwrap()).unwrap();
    assert!(ckpt.entries.iter().all(|e| e.name.contains(".lora_")));
    assert_eq!(ckpt.value_count(), model.trainable_numel());
    let probing = AdaptedModel::inject(Backbone::<f32>::build(arch, 0).unwrap(), Method::Probing).unwrap();
    assert!(decode(&delta_bytes(&probing).unwrap()).unwrap().entries.is_empty());
}

#[test]
fn other_seeds_are_accepted_other_shapes_are_not() {
    let arch = ArchConfig::transformer(8, 2, 2);
    let model = AdaptedModel::inject(Backbone::<f32>::build(arch, 1).unwrap(), PetlConfig::Ssf.into()).unwrap();
    let bytes = delta_bytes(&model).unwrap();
    assert!(load_delta_bytes(Backbone::<f32>::build(arch, 2).unwrap(), &bytes).is_ok());
    let wider = ArchConfig::transformer(16, 2, 2);
    match load_delta_bytes(Backbone::<f32>::build(wider, 1).unwrap(), &bytes) {
        Err(Error::Fingerprint { expected, found }) => {
            assert_eq!(expected, fingerprint(&wider));
            assert_eq!(found, fingerprint(&arch));
            let msg = Error::Fingerprint { expected, found }.to_string();
            assert!(msg.contains(&format!("{expected:016x}")) && msg.contains(&format!("{found:016x}")), "{msg}");
        }
        other => panic!("{:?}", other.map(|_| ())),
    }
    // dtype is part of every entry
    let wide = Backbone::<f64>::build(arch, 1).unwrap();
    assert!(matches!(load_delta_bytes(wide, &bytes), Err(Error::Integrity(_))));
}

#[test]
fn damaged_files_fail_closed() {
    let arch = ArchConfig::transformer(8, 1, 2);
    let model = AdaptedModel::inject(Backbone::<f32>::build(arch, 1).unwrap(), PetlConfig::adapter().into()).unwrap();
    let bytes = delta_bytes(&model).unwrap();
    let payload_byte = bytes.len() - 9;
    let mut flipped = bytes.clone();
    flipped[payload_byte] ^= 0x01;
    assert!(matches!(
        load_delta_bytes(Backbone::<f32>::build(arch, 1).unwrap(), &flipped),
        Err(Error::Integrity(_))
    ));
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        let r = load_delta_bytes(Backbone::<f32>::build(arch, 1).unwrap(), &bytes[..cut]);
        assert!(matches!(r, Err(Error::Integrity(_))), "cut at {cut}");
    }
    let mut newer = bytes.clone();
    newer[4..6].copy_from_slice(&(checkpoint::FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(decode(&newer), Err(Error::UnsupportedVersion { .. })));
}

#[test]
fn head_and_full_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchConfig::transformer(8, 2, 2);
    let head = Head::<f32>::new(HeadConfig::new(3, OutputKind::Multilabel), 8, 4).unwrap();
    let path = dir.path().join("head.petl");
    checkpoint::save_head(&head, &arch, &path).unwrap();
    let loaded: Head<f32> = checkpoint::load_head(&arch, &path).unwrap();
    assert_eq!(loaded.config(), head.config());
    for (a, b) in head.params().iter().zip(loaded.params().iter()) {
        assert_eq!(bits(&a.tensor), bits(&b.tensor));
    }
    assert!(load_delta(Backbone::<f32>::build(arch, 0).unwrap(), &path).is_err(), "a head is not a delta");

    let mut model = AdaptedModel::inject(Backbone::<f32>::build(arch, 5).unwrap(), PetlConfig::lora().into()).unwrap();
    pretend_trained(&model);
    model.merge_lora().unwrap();
    let full = dir.path().join("full.petl");
    checkpoint::save_full(&model, &full).unwrap();
    assert_eq!(checkpoint::read_file(&full).unwrap().tag.content, Content::Full);
    let restored = checkpoint::load_full(Backbone::<f32>::build(arch, 6).unwrap(), &full).unwrap();
    let x = input(4, 8, 3);
    assert_eq!(
        bits(&restored.forward_features(&x, &Plain).unwrap()),
        bits(&model.base().forward_features(&x, &Plain).unwrap())
    );
}

/// Six 768-wide layers: the size the parameter table refers to.
fn base_768() -> Backbone<f32> {
    Backbone::<f32>::build(ArchConfig::transformer(768, 6, 12), 0).unwrap()
}

#[test]
fn base_width_delta_sizes() {
    let lora = PetlConfig::Lora {
        rank: 2,
        scope: LoraScope::All,
    };
    let model = AdaptedModel::inject(base_768(), lora.into()).unwrap();
    let bytes = delta_bytes(&model).unwrap();
    let ckpt = decode(&bytes).unwrap();
    assert_eq!(ckpt.value_count(), 165_888);
    // header, tag, count, per-entry framing, 4-byte values, crc
    let tag_len = serde_json::to_vec(&ckpt.tag).unwrap().len();
    let framing: usize = ckpt.entries.iter().map(|e| 4 + e.name.len() + 1 + 1 + 8 * e.shape.len()).sum();
    assert_eq!(bytes.len(), 4 + 2 + 8 + 4 + tag_len + 4 + framing + 4 * 165_888 + 4);
    assert!(bytes.len() - 4 * 165_888 < 8 * 1024, "overhead stays small");

    let bitfit = AdaptedModel::inject(model.into_base(), PetlConfig::BitFit.into()).unwrap();
    let ckpt = decode(&delta_bytes(&bitfit).unwrap()).unwrap();
    assert_eq!(ckpt.value_count(), 50_688);
    assert!(ckpt.entries.iter().all(|e| e.name.ends_with(".bias")));
}
