use std::path::Path;

use onellm::binio::{read_tensor, write_tensor, Reader, Writer};
use onellm::checkpoint::{checkpoint_path, load, read_checkpoint, save, Checkpoint};
use onellm::Error;
use onellm_core::data::{build_examples, Example, RenderConfig, Renderer};
use onellm_core::exec::Sequential;
use onellm_core::model::{ExpertInit, ModelConfig, OneLlm};
use onellm_core::optim::AdamWConfig;
use onellm_core::pipeline::{train_alignment_stage, Corpus, Phase, StageId, StagePlan, TrainOptions, TrainState};
use onellm_core::{Graph, ModalityId, Tensor};
use proptest::prelude::*;

fn image_set(n: usize) -> Vec<Example<f32>> {
    build_examples(&Renderer::new(RenderConfig::desk()).unwrap(), ModalityId::Image, 40, n)
}

fn stage_i_model() -> OneLlm<f32> {
    let mut c = ModelConfig::desk();
    c.upm.experts = 1;
    OneLlm::new(c, 3).unwrap()
}

/// Trains `steps` alignment steps (pausing at `stop`) and returns the
/// per-step losses.
fn align(model: &mut OneLlm<f32>, state: &mut TrainState, set: &[Example<f32>], steps: u64, stop: Option<u64>) -> Vec<f64> {
    let corpus: Corpus = [(ModalityId::Image, set)].into_iter().collect();
    let plan = StagePlan::standard(StageId::I, steps, 2, 1e-3, 10);
    let opts = TrainOptions {
        stop_at: stop,
        ..TrainOptions::default()
    };
    let mut losses = Vec::new();
    train_alignment_stage(model, state, &plan, &corpus, &opts, &Sequential, &mut |r| losses.push(r.loss)).unwrap();
    losses
}

fn trained() -> (OneLlm<f32>, TrainState) {
    let mut model = stage_i_model();
    let mut state = TrainState::new(Phase::Alignment, 9, model.store.len(), AdamWConfig::default());
    align(&mut model, &mut state, &image_set(8), 20, Some(3));
    (model, state)
}

fn forward(model: &OneLlm<f32>, ex: &Example<f32>) -> Tensor<f32> {
    let mut g = Graph::new(&model.store);
    let seq = model.caption_sequence(&mut g, &ex.signal, &ex.caption).unwrap();
    let logits = model.decoder.all_logits(&mut g, &seq).unwrap();
    g.value(logits).clone()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (model, state) = trained();
    let a = dir.path().join("a.olmc");
    let b = dir.path().join("b.olmc");
    save(&model, &state, 77, "I", &a).unwrap();
    let mut fresh = stage_i_model();
    let restored = load(&a, &mut fresh).unwrap();
    assert_eq!(restored, state);
    save(&fresh, &restored, 77, "I", &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ck = read_checkpoint(&a).unwrap();
    assert_eq!((ck.config_hash, ck.label.as_str(), ck.state.step), (77, "I", 3));
    assert_eq!(ck.entries.len(), model.store.len());
    // nothing left behind by the atomic write
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2);
}

#[test]
fn forward_is_bit_identical_after_reload() {
    let dir = tempfile::tempdir().unwrap();
    let (model, state) = trained();
    let path = dir.path().join("m.olmc");
    save(&model, &state, 0, "I", &path).unwrap();
    let (restored, _) = read_checkpoint(&path).unwrap().restore(&path).unwrap();
    let ex = &image_set(1)[0];
    let (x, y) = (forward(&model, ex), forward(&restored, ex));
    assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn frozen_flags_survive() {
    let dir = tempfile::tempdir().unwrap();
    let (model, state) = trained();
    let path = dir.path().join("m.olmc");
    save(&model, &state, 0, "I", &path).unwrap();
    let mut other = stage_i_model();
    for (_, p) in other.store.iter_mut() {
        p.frozen = !p.frozen;
    }
    load(&path, &mut other).unwrap();
    let flags = |m: &OneLlm<f32>| m.store.iter().map(|(_, p)| p.frozen).collect::<Vec<_>>();
    assert_eq!(flags(&model), flags(&other));
    assert!(flags(&model).iter().any(|f| *f) && flags(&model).iter().any(|f| !*f));
}

fn saved_bytes() -> Vec<u8> {
    let (model, state) = trained();
    Checkpoint::capture(&model, &state, 1, "I").to_bytes()
}

#[test]
fn damaged_files_are_rejected() {
    let p = Path::new("x.olmc");
    let bytes = saved_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(p, &bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. } | Error::HashMismatch { .. }), "cut {cut}: {err}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(p, &flipped), Err(Error::HashMismatch { item: None, .. })));
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"OLMF");
    assert!(matches!(Checkpoint::from_bytes(p, &magic), Err(Error::Format { .. })));
    let mut version = bytes;
    version[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(p, &version),
        Err(Error::UnsupportedVersion { found: 2, expected: 1, .. })
    ));
}

#[test]
fn mismatched_models_name_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let (model, state) = trained();
    let path = dir.path().join("m.olmc");
    save(&model, &state, 0, "I", &path).unwrap();

    let mut c = model.config;
    c.upm.tokens = 6;
    let mut wider = OneLlm::<f32>::new(c, 3).unwrap();
    match load(&path, &mut wider) {
        Err(Error::Parameter { name, detail, .. }) => {
            assert!(name.starts_with("upm.tokens."), "{name}");
            assert!(detail.contains("shape"), "{detail}");
        }
        other => panic!("{other:?}"),
    }

    let mut c = model.config;
    c.upm.experts = 3;
    let mut more = OneLlm::<f32>::new(c, 3).unwrap();
    match load(&path, &mut more) {
        Err(e @ Error::Parameter { .. }) => assert!(e.to_string().contains("upm.experts.1."), "{e}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load(&dir.path().join("missing.olmc"), &mut more), Err(Error::Io { .. })));
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_losses() {
    let dir = tempfile::tempdir().unwrap();
    let set = image_set(16);
    let mut model = stage_i_model();
    let mut state = TrainState::new(Phase::Alignment, 4, model.store.len(), AdamWConfig::default());
    let full = align(&mut model, &mut state, &set, 200, None);
    assert_eq!(full.len(), 200);

    let mut model = stage_i_model();
    let mut state = TrainState::new(Phase::Alignment, 4, model.store.len(), AdamWConfig::default());
    let head = align(&mut model, &mut state, &set, 200, Some(100));
    let path = checkpoint_path(dir.path(), 100);
    save(&model, &state, 0, "I", &path).unwrap();
    drop((model, state));
    let (mut model, mut state) = read_checkpoint(&path).unwrap().restore(&path).unwrap();
    let tail = align(&mut model, &mut state, &set, 200, None);
    let resumed: Vec<u64> = head.iter().chain(&tail).map(|l| l.to_bits()).collect();
    let expected: Vec<u64> = full.iter().map(|l| l.to_bits()).collect();
    assert_eq!(resumed, expected);
}

#[test]
fn stage_i_checkpoint_expands_into_stage_ii() {
    let dir = tempfile::tempdir().unwrap();
    let (model, state) = trained();
    let path = dir.path().join("ckpt_3.olmc");
    save(&model, &state, 0, "I", &path).unwrap();
    let (base, _) = read_checkpoint(&path).unwrap().restore(&path).unwrap();
    let grown = base.with_experts(3, ExpertInit::Image, 5).unwrap();
    assert_eq!(grown.config.upm.experts, 3);
    let ex = &image_set(2)[1];
    let project = |m: &OneLlm<f32>| {
        let mut g = Graph::new(&m.store);
        let q = m.project(&mut g, &ex.signal).unwrap();
        g.value(q.q_bar).clone()
    };
    assert!(project(&model).max_abs_diff(&project(&grown)) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensors_round_trip_bit_exactly(
        shape in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) {
        let n: usize = shape.iter().product();
        let mix = |i: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(i as u32 % 64) ^ i;
        let t32 = Tensor::new(&shape, (0..n as u64).map(|i| f32::from_bits(mix(i) as u32 & 0x7f7f_ffff)).collect()).unwrap();
        let t64 = Tensor::new(&shape, (0..n as u64).map(|i| f64::from_bits(mix(i) & 0x7fef_ffff_ffff_ffff)).collect()).unwrap();
        let mut w = Writer::default();
        write_tensor(&mut w, &t32);
        write_tensor(&mut w, &t64);
        let p = Path::new("t");
        let mut r = Reader::new(p, &w.buf);
        let back32 = read_tensor::<f32>(&mut r, "a").unwrap();
        let back64 = read_tensor::<f64>(&mut r, "b").unwrap();
        prop_assert_eq!(r.remaining(), 0);
        prop_assert!(back32.data().iter().zip(t32.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(back64.data().iter().zip(t64.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back32.shape(), t32.shape());
        // the wrong dtype is refused
        let mut r = Reader::new(p, &w.buf);
        prop_assert!(read_tensor::<f64>(&mut r, "a").is_err());
    }
}
