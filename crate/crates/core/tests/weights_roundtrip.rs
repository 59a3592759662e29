use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repblocks::arch::{build_model, forward_model, fuse_model, ModelSpec, Variant, Version};
use repblocks::init::Init;
use repblocks::io::{collect_weights, export_weights, import_weights, read_weights, NamedTensor, WeightFile};
use repblocks::tensor::{Dims, Element, Tensor4};

fn round_trip<T: Element>(spec: &ModelSpec, fused: bool) {
    let dir = tempfile::tempdir().unwrap();
    let mut g = build_model::<T>(spec, Init::Random(11)).unwrap();
    if fused {
        g = fuse_model(&g).unwrap();
    }
    let path = dir.path().join("w.bin");
    export_weights(&g, &path).unwrap();
    let h = import_weights::<T>(&path, spec).unwrap();
    assert_eq!(h, g);

    let x = Tensor4::<T>::random(Dims::new(1, 3, 64, 64), &mut ChaCha8Rng::seed_from_u64(5));
    let (a, b) = (forward_model(&g, &x).unwrap(), forward_model(&h, &x).unwrap());
    assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1) && a.2.bit_eq(&b.2));

    let again = dir.path().join("again.bin");
    export_weights(&h, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    // only the two files, no stray temporaries
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn nano_v1_round_trips_bitwise() {
    let spec = ModelSpec::named(Version::V1, Variant::N).unwrap();
    round_trip::<f64>(&spec, false);
    round_trip::<f32>(&spec, false);
    round_trip::<f32>(&spec, true);
}

#[test]
fn bepc3_model_round_trips() {
    let spec = ModelSpec::named(Version::V2, Variant::M).unwrap();
    round_trip::<f32>(&spec, true);
}

#[test]
fn parameter_count_matches_file_contents() {
    for spec in ModelSpec::all_named() {
        let g = build_model::<f32>(&spec, Init::Zeros).unwrap();
        for g in [fuse_model(&g).unwrap(), g] {
            let stored: usize = collect_weights(&g)
                .tensors
                .iter()
                .filter(|t| !t.name.ends_with(".bn.eps"))
                .map(|t| t.data.len())
                .sum();
            assert_eq!(stored, g.param_count(), "{}", spec.name());
        }
    }
}

#[test]
fn import_against_wrong_spec_fails_with_names() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.bin");
    let n = ModelSpec::named(Version::V1, Variant::N).unwrap();
    export_weights(&build_model::<f32>(&n, Init::Zeros).unwrap(), &path).unwrap();
    let s = ModelSpec::named(Version::V1, Variant::S).unwrap();
    let err = import_weights::<f32>(&path, &s).unwrap_err().to_string();
    assert!(err.contains("stage1.block0.branch0.weight") && err.contains("[16, 3, 3, 3]") && err.contains("[32, 3, 3, 3]"), "{err}");
    let err = import_weights::<f64>(&path, &n).unwrap_err().to_string();
    assert!(err.contains("F32"), "{err}");
}

#[test]
fn every_truncation_is_rejected() {
    let spec = ModelSpec::named(Version::V1, Variant::N).unwrap();
    let bytes = collect_weights(&build_model::<f32>(&spec, Init::Random(1)).unwrap()).to_bytes();
    for cut in (0..bytes.len()).step_by(997).chain([bytes.len() - 1]) {
        assert!(WeightFile::<f32>::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(read_weights::<f32>(&path).unwrap_err().to_string().contains("truncated"));
}

fn tensors() -> impl Strategy<Value = Vec<NamedTensor<f64>>> {
    prop::collection::vec(
        (prop::collection::vec(1usize..4, 1..=4), any::<u64>()),
        0..6,
    )
    .prop_map(|ts| {
        ts.into_iter()
            .enumerate()
            .map(|(i, (shape, bits))| {
                let n: usize = shape.iter().product();
                // arbitrary bit patterns, NaN payloads included
                let data = (0..n as u64).map(|j| f64::from_bits(bits.rotate_left(j as u32) ^ j)).collect();
                NamedTensor { name: format!("t{i}.é"), shape, data }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn arbitrary_files_round_trip_bitwise(ts in tensors()) {
        let f = WeightFile { tensors: ts };
        let bytes = f.to_bytes();
        let back = WeightFile::<f64>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.tensors.len(), f.tensors.len());
        for (a, b) in f.tensors.iter().zip(&back.tensors) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.shape, &b.shape);
            let (ab, bb): (Vec<u64>, Vec<u64>) = (a.data.iter().map(|v| v.to_bits()).collect(), b.data.iter().map(|v| v.to_bits()).collect());
            prop_assert_eq!(ab, bb);
        }
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
