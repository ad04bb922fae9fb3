use std::path::Path;

use onellm::manifest::{load_manifest, write_manifest, Manifest, Split, MANIFEST_VERSION};
use onellm::Error;
use onellm_core::data::{build_examples, RenderConfig, Renderer};
use onellm_core::ModalityId;
use proptest::prelude::*;

fn renderer() -> Renderer {
    Renderer::new(RenderConfig::desk()).unwrap()
}

fn manifest(m: ModalityId, first: u64, n: usize) -> Manifest {
    Manifest::new(m, Split::Train, build_examples(&renderer(), m, first, n))
}

#[test]
fn ten_item_image_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("image.olmf");
    let m = manifest(ModalityId::Image, 0, 10);
    let hash = write_manifest(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"OLMF");
    assert_eq!(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()), hash);
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.version, MANIFEST_VERSION);
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn every_modality_round_trips_and_fits_its_layout() {
    let cfg = RenderConfig::desk();
    for m in ModalityId::ALL {
        let man = manifest(m, 5, 6);
        man.validate_layout(&cfg).unwrap();
        let back = Manifest::from_bytes(Path::new("m"), &man.to_bytes().unwrap()).unwrap();
        assert_eq!(back, man, "{m}");
    }
    let mut wrong = manifest(ModalityId::Image, 0, 2);
    wrong.modality = ModalityId::Depth;
    assert!(matches!(wrong.validate_layout(&cfg), Err(Error::Config(_))));
}

/// Byte offset of the payload of `item` in a manifest of equal-sized items.
fn payload_offset(bytes: &[u8], items: usize, item: usize) -> usize {
    let total = bytes.len() - 8;
    let per = RenderConfig::desk().payload_shape(ModalityId::Image).iter().product::<usize>() * 4;
    total - items * per + item * per
}

#[test]
fn corrupted_payload_names_the_item() {
    let m = manifest(ModalityId::Image, 0, 10);
    let bytes = m.to_bytes().unwrap();
    for item in [0, 3, 9] {
        let mut bad = bytes.clone();
        bad[payload_offset(&bytes, 10, item) + 17] ^= 1;
        match Manifest::from_bytes(Path::new("image.olmf"), &bad) {
            Err(e @ Error::HashMismatch { item: Some(i), .. }) => {
                assert_eq!(i, item);
                assert!(e.to_string().contains(&format!("item {item}")));
            }
            other => panic!("{other:?}"),
        }
    }
    // damage outside any payload is caught by the trailer
    let mut bad = bytes.clone();
    bad[20] ^= 1;
    assert!(matches!(
        Manifest::from_bytes(Path::new("x"), &bad),
        Err(Error::HashMismatch { .. } | Error::Format { .. } | Error::Truncated { .. })
    ));
}

#[test]
fn version_magic_and_truncation_are_distinct_errors() {
    let p = Path::new("x.olmf");
    let bytes = manifest(ModalityId::Audio, 0, 3).to_bytes().unwrap();
    let mut v99 = bytes.clone();
    v99[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(
        Manifest::from_bytes(p, &v99),
        Err(Error::UnsupportedVersion { found: 99, .. })
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Manifest::from_bytes(p, &magic), Err(Error::Format { .. })));
    for cut in [2, 20, bytes.len() / 2, bytes.len() - 3] {
        assert!(
            matches!(Manifest::from_bytes(p, &bytes[..cut]), Err(Error::Truncated { .. })),
            "cut {cut}"
        );
    }
}

#[test]
fn empty_manifest_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new(ModalityId::Imu, Split::Eval, Vec::new());
    assert!(matches!(write_manifest(&m, &dir.path().join("e.olmf")), Err(Error::Config(_))));
    assert!(!dir.path().join("e.olmf").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn round_trip_identity(m in 0usize..8, first in 0u64..1_000_000, n in 1usize..4, eval in any::<bool>()) {
        let modality = ModalityId::ALL[m];
        let split = if eval { Split::Eval } else { Split::Train };
        let man = Manifest::new(modality, split, build_examples(&renderer(), modality, first, n));
        let bytes = man.to_bytes().unwrap();
        let back = Manifest::from_bytes(Path::new("p"), &bytes).unwrap();
        prop_assert_eq!(&back, &man);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
