use onellm_core::decoder::{
    assemble_alignment_sequence, assemble_instruction_sequence, instruction_text, Adapter, AssembledSequence, Decoder,
    DecoderConfig, TextVocab, BOS, EOS, PAD, VOCAB_SIZE,
};
use onellm_core::init::Initializer;
use onellm_core::optim::{AdamW, AdamWConfig};
use onellm_core::upm::UpmOutput;
use onellm_core::{Error, Graph, ModalityId, ParamStore, Tensor};
use proptest::prelude::*;

fn small() -> DecoderConfig {
    DecoderConfig {
        depth: 2,
        width: 32,
        heads: 4,
        max_seq: 48,
        vocab: VOCAB_SIZE,
    }
}

fn build<F: onellm_core::Scalar>(cfg: DecoderConfig, seed: u64) -> (ParamStore<F>, Decoder) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let dec = Decoder::new(cfg, &mut store, &mut init).unwrap();
    (store, dec)
}

fn text_seq(text: &str) -> AssembledSequence {
    let mut ids = vec![BOS];
    ids.extend(TextVocab::encode(text.as_bytes()));
    ids.push(EOS);
    let mut loss_mask = vec![true; ids.len()];
    loss_mask[0] = false;
    AssembledSequence {
        prefix: None,
        prefix_len: 0,
        modality_order: vec![],
        ids,
        loss_mask,
        truncated: false,
    }
}

#[test]
fn logits_are_causal() {
    let (store, dec) = build::<f64>(small(), 1);
    let a: Vec<usize> = TextVocab::encode(b"a red square");
    for j in 1..a.len() {
        let mut b = a.clone();
        b[j] = b'z' as usize;
        let mut g = Graph::new(&store);
        let la = dec.logits(&mut g, None, &a, a.len()).unwrap();
        let lb = dec.logits(&mut g, None, &b, b.len()).unwrap();
        let (va, vb) = (g.value(la), g.value(lb));
        for r in 0..j {
            assert_eq!(va.row(r), vb.row(r), "row {r} saw position {j}");
        }
        assert_ne!(va.row(j), vb.row(j));
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    let (store, dec) = build::<f32>(DecoderConfig::desk(), 2);
    let mut g = Graph::new(&store);
    let loss = dec.lm_loss(&mut g, &text_seq("two small blue triangles")).unwrap();
    let l = g.value(loss).data()[0] as f64;
    assert!((l - (VOCAB_SIZE as f64).ln()).abs() < 0.2, "{l}");
}

#[test]
fn padding_after_eos_is_ignored() {
    let (store, dec) = build::<f64>(small(), 3);
    let plain = text_seq("a large green circle");
    let mut padded = plain.clone();
    padded.ids.extend([PAD; 6]);
    padded.loss_mask.extend([false; 6]);
    let mut g = Graph::new(&store);
    let a = dec.lm_loss(&mut g, &plain).unwrap();
    let b = dec.lm_loss(&mut g, &padded).unwrap();
    assert_eq!(g.value(a).data()[0], g.value(b).data()[0]);
}

#[test]
fn overfits_one_caption() {
    let (mut store, dec) = build::<f32>(small(), 4);
    let seq = text_seq("three small red squares");
    let mut opt = AdamW::new(AdamWConfig::default(), store.len());
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        let grads = {
            let mut g = Graph::new(&store);
            let loss = dec.lm_loss(&mut g, &seq).unwrap();
            last = g.value(loss).data()[0] as f64;
            g.backward(loss).unwrap()
        };
        if last < 0.05 {
            break;
        }
        opt.step(&mut store, &grads, 3e-3);
    }
    assert!(last < 0.05, "{last}");
    let out = dec.generate_greedy(&store, None, &[BOS], 40).unwrap();
    assert_eq!(TextVocab::decode_lossy(&out), "three small red squares");
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let (store, dec) = build::<f32>(small(), 5);
    let a = dec.generate_greedy(&store, None, &[BOS], 12).unwrap();
    let b = dec.generate_greedy(&store, None, &[BOS], 12).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 12);
    assert!(a.iter().all(|&t| t != EOS));
    assert!(dec.generate_greedy(&store, None, &[BOS], 1).unwrap().len() <= 1);
    assert!(matches!(dec.generate_greedy(&store, None, &[BOS], 0), Err(Error::Argument(_))));
    // The context window caps generation.
    let long = dec.generate_greedy(&store, None, &[BOS], 500).unwrap();
    assert_eq!(long.len() + 1, small().max_seq);
}

fn fake_upm(g: &mut Graph<'_, f64>, m: ModalityId, n: usize, d: usize, k: usize) -> UpmOutput {
    let data = (0..n * d).map(|i| ((i * 7 + k) % 11) as f64 / 11.0).collect();
    UpmOutput {
        modality: m,
        q_bar: g.input(Tensor::new(&[n, d], data).unwrap()),
        routing_weights: g.input(Tensor::new(&[n, 1], vec![1.0; n]).unwrap()),
    }
}

#[test]
fn alignment_sequence_lengths() {
    let mut store = ParamStore::<f64>::new();
    let adapter = Adapter::new(&mut store, &mut Initializer::new(6), 16, 32).unwrap();
    let mut g = Graph::new(&store);
    let q = fake_upm(&mut g, ModalityId::Image, 4, 16, 0);
    let seq = assemble_alignment_sequence(&mut g, &adapter, &q, "hello", 48).unwrap();
    assert_eq!(seq.prefix_len, 4);
    assert_eq!(seq.ids.len(), 7);
    assert_eq!(seq.total_len(), 11);
    assert_eq!(g.shape(seq.prefix.unwrap()), &[4, 32]);
    assert_eq!(seq.loss_mask.iter().filter(|&&m| m).count(), 6);
    assert!(!seq.truncated);

    let cut = assemble_alignment_sequence(&mut g, &adapter, &q, "a very long caption indeed", 12).unwrap();
    assert!(cut.truncated);
    assert_eq!(cut.total_len(), 12);
    assert_eq!(*cut.ids.last().unwrap(), EOS);
    assert!(matches!(assemble_alignment_sequence(&mut g, &adapter, &q, "", 48), Err(Error::Argument(_))));
    assert!(matches!(assemble_alignment_sequence(&mut g, &adapter, &q, "x", 5), Err(Error::Length { .. })));
}

#[test]
fn two_modality_prefix_keeps_order() {
    let mut store = ParamStore::<f64>::new();
    let adapter = Adapter::new(&mut store, &mut Initializer::new(7), 16, 32).unwrap();
    let mut g = Graph::new(&store);
    let a = fake_upm(&mut g, ModalityId::Image, 4, 16, 1);
    let b = fake_upm(&mut g, ModalityId::Audio, 4, 16, 2);
    let turns = vec![("What color is it?".to_string(), "red".to_string())];
    let seq = assemble_instruction_sequence(&mut g, &adapter, &[a, b], "", &turns).unwrap();
    assert_eq!(seq.prefix_len, 8);
    assert_eq!(seq.modality_order, vec![ModalityId::Image, ModalityId::Audio]);
    let ab = g.value(seq.prefix.unwrap()).clone();
    let swapped = assemble_instruction_sequence(&mut g, &adapter, &[b, a], "", &turns).unwrap();
    let ba = g.value(swapped.prefix.unwrap());
    assert_eq!(ab.row(0), ba.row(4));
    assert_eq!(ab.row(4), ba.row(0));
    assert!(matches!(
        assemble_instruction_sequence(&mut g, &adapter, &[], "", &turns),
        Err(Error::Argument(_))
    ));
}

#[test]
fn prefix_width_and_length_are_checked() {
    let (store, dec) = build::<f64>(small(), 8);
    let mut g = Graph::new(&store);
    let wrong = g.input(Tensor::zeros(&[2, 16]));
    assert!(matches!(dec.logits(&mut g, Some(wrong), &[BOS], 1), Err(Error::Config(_))));
    let ids = vec![b'a' as usize; 49];
    assert!(matches!(dec.logits(&mut g, None, &ids, 1), Err(Error::Length { len: 49, max: 48 })));
    assert!(Decoder::new(DecoderConfig { vocab: 200, ..small() }, &mut ParamStore::<f64>::new(), &mut Initializer::new(0)).is_err());
}

#[test]
fn instruction_text_layout() {
    let turns = vec![("Q".to_string(), "A".to_string())];
    let (ids, mask) = instruction_text("", &turns).unwrap();
    assert_eq!(ids, vec![BOS, b'Q' as usize, b'\n' as usize, b'A' as usize, EOS]);
    assert_eq!(mask, vec![false, false, false, true, true]);
    let (ids, _) = instruction_text("S", &turns).unwrap();
    assert_eq!(TextVocab::decode(&ids), b"S\nQ\nA");
}

proptest! {
    #[test]
    fn byte_round_trip(text in "[ -~]{0,64}") {
        let ids = TextVocab::encode(text.as_bytes());
        prop_assert!(ids.iter().all(|&i| i < 256));
        prop_assert_eq!(TextVocab::decode_lossy(&ids), text.clone());
        let mut wrapped = vec![BOS];
        wrapped.extend(&ids);
        wrapped.extend([EOS, PAD, PAD]);
        prop_assert_eq!(TextVocab::decode_lossy(&wrapped), text);
    }
}
