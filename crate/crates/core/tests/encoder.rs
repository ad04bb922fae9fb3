use onellm_core::encoder::{average_video_frames, Block, EncodedFeatures, Encoder, EncoderConfig};
use onellm_core::gradcheck::{gradcheck, GradcheckOptions};
use onellm_core::init::Initializer;
use onellm_core::optim::{AdamW, AdamWConfig};
use onellm_core::tokenizers::{RawSignal, TokenSequence, TokenizerConfig, Tokenizers};
use onellm_core::{Error, Graph, ModalityId, ParamStore, Tensor};
use proptest::prelude::*;

fn ramp(shape: &[usize], k: usize) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (((i + k) * 37 % 101) as f64 / 50.0) - 1.0).collect();
    Tensor::new(shape, data).unwrap()
}

fn zero(store: &mut ParamStore<f64>, ids: &[onellm_core::ParamId]) {
    for &id in ids {
        let shape = store.tensor(id).shape().to_vec();
        store.assign(id, &Tensor::zeros(&shape)).unwrap();
    }
}

#[test]
fn zeroed_block_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(1);
    let block = Block::new(&mut store, &mut init, "b", 16, 4, 2).unwrap();
    zero(&mut store, &block.output_projections());
    for l in [1, 5, 12] {
        let mut g = Graph::new(&store);
        let x = g.input(ramp(&[l, 16], l));
        let y = block.forward(&mut g, x, false).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}

#[test]
fn zeroed_encoder_is_norm_of_positioned_tokens() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(2);
    let cfg = EncoderConfig {
        depth: 2,
        width: 16,
        heads: 4,
        max_len: 8,
        frozen: true,
    };
    let enc = Encoder::new(cfg, &mut store, &mut init).unwrap();
    for b in enc.blocks() {
        zero(&mut store, &b.output_projections());
    }
    let x = ramp(&[5, 16], 3);
    let mut g = Graph::new(&store);
    let xv = g.input(x.clone());
    let out = enc
        .encode(&mut g, TokenSequence { modality: ModalityId::Audio, tokens: xv })
        .unwrap();
    assert_eq!(g.value(out.features).shape(), &[5, 16]);
    let pos = store.by_name("encoder.pos").unwrap().tensor.data();
    for r in 0..5 {
        let row: Vec<f64> = (0..16).map(|c| x.data()[r * 16 + c] + pos[r * 16 + c]).collect();
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        for (c, v) in row.iter().enumerate() {
            let expect = (v - mean) / (var + 1e-5).sqrt();
            let got = g.value(out.features).data()[r * 16 + c];
            assert!((got - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn encode_errors() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(3);
    let cfg = EncoderConfig {
        depth: 1,
        width: 8,
        heads: 2,
        max_len: 4,
        frozen: true,
    };
    let enc = Encoder::new(cfg, &mut store, &mut init).unwrap();
    let mut g = Graph::new(&store);
    let long = g.input(Tensor::zeros(&[5, 8]));
    let r = enc.encode(&mut g, TokenSequence { modality: ModalityId::Image, tokens: long });
    assert!(matches!(r, Err(Error::Length { len: 5, max: 4 })));
    let wide = g.input(Tensor::zeros(&[2, 6]));
    let r = enc.encode(&mut g, TokenSequence { modality: ModalityId::Image, tokens: wide });
    assert!(matches!(r, Err(Error::Config(_))));
}

struct Stack {
    store: ParamStore<f32>,
    tok: Tokenizers,
    enc: Encoder,
}

fn stack(frozen: bool) -> Stack {
    let mut store = ParamStore::<f32>::new();
    let mut init = Initializer::new(4);
    let tcfg = TokenizerConfig {
        width: 16,
        ..TokenizerConfig::desk()
    };
    let tok = Tokenizers::new(tcfg, &mut store, &mut init).unwrap();
    let ecfg = EncoderConfig {
        depth: 2,
        width: 16,
        heads: 4,
        max_len: 64,
        frozen,
    };
    let enc = Encoder::new(ecfg, &mut store, &mut init).unwrap();
    for (_, p) in store.iter_mut() {
        if p.name.starts_with("encoder.") {
            p.frozen = frozen;
        }
    }
    Stack { store, tok, enc }
}

fn step(s: &mut Stack) -> onellm_core::Grads<f32> {
    let signal = RawSignal::new(ModalityId::Image, ramp(&[3, 28, 28], 1).cast::<f32>());
    let grads = {
        let mut g = Graph::new(&s.store);
        let seq = s.tok.tokenize(&mut g, &signal).unwrap().remove(0);
        let f = s.enc.encode(&mut g, seq).unwrap();
        let sq = g.mul(f.features, f.features).unwrap();
        let w = g.input(ramp(&[16, 16], 2).cast::<f32>());
        let m = g.mul(sq, w).unwrap();
        let l = g.sum(m).unwrap();
        g.backward(l).unwrap()
    };
    let mut opt = AdamW::new(AdamWConfig::default(), s.store.len());
    opt.step(&mut s.store, &grads, 1e-2);
    grads
}

#[test]
fn frozen_encoder_passes_gradient_to_tokenizer_only() {
    let mut s = stack(true);
    let before = s.store.fingerprint(|n| n.starts_with("encoder."));
    let tok_before = s.store.fingerprint(|n| n.starts_with("tokenizer.image."));
    let grads = step(&mut s);
    for (id, _) in grads.iter() {
        assert!(!s.store.get(id).name.starts_with("encoder."));
    }
    assert!(grads.get(s.store.id("tokenizer.image.weight").unwrap()).is_some());
    assert_eq!(before, s.store.fingerprint(|n| n.starts_with("encoder.")));
    assert_ne!(tok_before, s.store.fingerprint(|n| n.starts_with("tokenizer.image.")));
}

#[test]
fn trainable_encoder_changes_after_a_step() {
    let mut s = stack(false);
    let before = s.store.fingerprint(|n| n.starts_with("encoder."));
    step(&mut s);
    assert_ne!(before, s.store.fingerprint(|n| n.starts_with("encoder.")));
}

#[test]
fn encode_is_deterministic() {
    let s = stack(true);
    let signal = RawSignal::new(ModalityId::Depth, ramp(&[3, 28, 28], 5).cast::<f32>());
    let run = || {
        let mut g = Graph::new(&s.store);
        let seq = s.tok.tokenize(&mut g, &signal).unwrap().remove(0);
        let f = s.enc.encode(&mut g, seq).unwrap();
        g.value(f.features).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn block_stack_gradcheck() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Initializer::new(6);
    let blocks: Vec<Block> = (0..2)
        .map(|i| Block::new(&mut store, &mut init, &format!("s.{i}"), 8, 2, 2).unwrap())
        .collect();
    let x = store.add("x", ramp(&[5, 8], 7), false).unwrap();
    let r = gradcheck(&store, GradcheckOptions::default(), |g| {
        let mut h = g.param(x);
        for b in &blocks {
            h = b.forward(g, h, false)?;
        }
        let w = g.input(ramp(&[5, 8], 11));
        let m = g.mul(h, w)?;
        g.sum(m)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

fn features(g: &mut Graph<'_, f32>, t: Tensor<f32>) -> EncodedFeatures {
    EncodedFeatures {
        modality: ModalityId::Video,
        features: g.input(t),
    }
}

#[test]
fn averaging_identical_and_pair() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let a = ramp(&[4, 8], 1).cast::<f32>();
    let b = ramp(&[4, 8], 9).cast::<f32>();
    let frames: Vec<_> = (0..3).map(|_| features(&mut g, a.clone())).collect();
    let m = average_video_frames(&mut g, &frames).unwrap();
    assert!(g.value(m.features).max_abs_diff(&a) < 1e-6);
    let pair = [features(&mut g, a.clone()), features(&mut g, b.clone())];
    let m = average_video_frames(&mut g, &pair).unwrap();
    for (i, v) in g.value(m.features).data().iter().enumerate() {
        assert_eq!(*v, (a.data()[i] + b.data()[i]) / 2.0);
    }
    assert!(matches!(average_video_frames(&mut g, &[]), Err(Error::EmptyInput(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn averaging_matches_brute_force_and_ignores_order(
        frames in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 12), 1..6),
        rot in 0usize..6,
    ) {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store);
        let t = frames.len();
        let vars: Vec<_> = frames.iter().map(|f| features(&mut g, Tensor::new(&[3, 4], f.clone()).unwrap())).collect();
        let mut rotated = vars.clone();
        rotated.rotate_left(rot % t);
        rotated.reverse();
        let m1 = average_video_frames(&mut g, &vars).unwrap();
        let m2 = average_video_frames(&mut g, &rotated).unwrap();
        for i in 0..12 {
            let brute = frames.iter().map(|f| f[i] as f64).sum::<f64>() / t as f64;
            let v1 = g.value(m1.features).data()[i];
            let v2 = g.value(m2.features).data()[i];
            prop_assert!((v1 as f64 - brute).abs() < 1e-5);
            prop_assert!((v1 - v2).abs() < 1e-6);
        }
    }
}
