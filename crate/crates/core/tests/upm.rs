use onellm_core::encoder::EncodedFeatures;
use onellm_core::gradcheck::{gradcheck, GradcheckOptions};
use onellm_core::init::Initializer;
use onellm_core::model::{ExpertInit, ModelConfig, OneLlm};
use onellm_core::upm::{combine_experts, RouterType, Upm, UpmConfig};
use onellm_core::{Error, Graph, ModalityId, ParamStore, Tensor};
use proptest::prelude::*;

fn ramp(shape: &[usize], k: usize) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (((i * 13 + k * 7) % 97) as f64 / 48.0) - 1.0).collect();
    Tensor::new(shape, data).unwrap()
}

fn cfg(experts: usize, router: RouterType) -> UpmConfig {
    UpmConfig {
        width: 8,
        tokens: 3,
        experts,
        expert_depth: 1,
        heads: 2,
        router,
    }
}

fn build(c: UpmConfig, seed: u64) -> (ParamStore<f64>, Upm) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let upm = Upm::new(c, &mut store, &mut init).unwrap();
    (store, upm)
}

fn set(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) {
    let id = store.id(name).unwrap_or_else(|| panic!("{name}"));
    store.assign(id, &t).unwrap();
}

fn feats(g: &mut Graph<'_, f64>, m: ModalityId, l: usize, k: usize) -> EncodedFeatures {
    EncodedFeatures {
        modality: m,
        features: g.input(ramp(&[l, 8], k)),
    }
}

#[test]
fn zero_router_is_uniform_and_bias_gives_softmax() {
    let (mut store, upm) = build(cfg(3, RouterType::Soft), 1);
    for name in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
        let n = format!("upm.routers.image.{name}");
        let shape = store.by_name(&n).unwrap().tensor.shape().to_vec();
        set(&mut store, &n, Tensor::zeros(&shape));
    }
    {
        let mut g = Graph::new(&store);
        let joint = g.input(ramp(&[7, 8], 2));
        let w = upm.route(&mut g, ModalityId::Image, joint).unwrap();
        assert_eq!(g.value(w).shape(), &[3, 3]);
        for v in g.value(w).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
    set(&mut store, "upm.routers.image.fc2.b", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let mut g = Graph::new(&store);
    let joint = g.input(ramp(&[7, 8], 2));
    let w = upm.route(&mut g, ModalityId::Image, joint).unwrap();
    for row in g.value(w).data().chunks(3) {
        for (v, e) in row.iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((v - e).abs() < 1e-4);
        }
    }
}

#[test]
fn combine_definitions() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let outs: Vec<_> = (0..3).map(|k| g.input(ramp(&[2, 4], k + 1))).collect();
    let vals: Vec<Tensor<f64>> = outs.iter().map(|o| g.value(*o).clone()).collect();
    // Constant, K=2.
    let (c, _) = combine_experts(&mut g, &outs[..2], None, RouterType::Constant).unwrap();
    for i in 0..8 {
        let e = (vals[0].data()[i] + vals[1].data()[i]) / 2.0;
        assert!((g.value(c).data()[i] - e).abs() < 1e-12);
    }
    // Sparse with row [0.2, 0.5, 0.3] picks expert 1 scaled by 0.5.
    let w = g.input(Tensor::new(&[2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.2, 0.2]).unwrap());
    let (s, eff) = combine_experts(&mut g, &outs, Some(w), RouterType::Sparse).unwrap();
    for j in 0..4 {
        assert_eq!(g.value(s).data()[j], 0.5 * vals[1].data()[j]);
        assert_eq!(g.value(s).data()[4 + j], 0.6 * vals[0].data()[4 + j]);
    }
    assert_eq!(g.value(eff).data(), &[0.0, 0.5, 0.0, 0.6, 0.0, 0.0]);
    // Soft with one-hot rows selects the expert.
    let oh = g.input(Tensor::new(&[2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
    let (so, _) = combine_experts(&mut g, &outs, Some(oh), RouterType::Soft).unwrap();
    for j in 0..4 {
        assert!((g.value(so).data()[j] - vals[2].data()[j]).abs() < 1e-12);
        assert!((g.value(so).data()[4 + j] - vals[0].data()[4 + j]).abs() < 1e-12);
    }
    // Ties go to the lower expert.
    let tie = g.input(Tensor::new(&[2, 3], vec![0.4, 0.4, 0.2, 0.1, 0.45, 0.45]).unwrap());
    let (_, eff) = combine_experts(&mut g, &outs, Some(tie), RouterType::Sparse).unwrap();
    assert_eq!(g.value(eff).data(), &[0.4, 0.0, 0.0, 0.0, 0.45, 0.0]);
}

#[test]
fn single_expert_is_the_first_n_rows() {
    let (store, upm) = build(cfg(1, RouterType::Soft), 2);
    let mut g = Graph::new(&store);
    let x = feats(&mut g, ModalityId::Audio, 5, 1);
    let out = upm.forward(&mut g, x, RouterType::Soft).unwrap();
    let q = g.param(upm.modality_tokens(ModalityId::Audio));
    let joint = g.concat_rows(&[q, x.features]).unwrap();
    let y = upm.experts()[0].forward(&mut g, joint).unwrap();
    let head = g.slice_rows(y, 0, 3).unwrap();
    assert_eq!(g.value(out.q_bar), g.value(head));
    assert!(g.value(out.routing_weights).data().iter().all(|&w| w == 1.0));
}

#[test]
fn fixed_length_output_for_every_modality() {
    for router in RouterType::ALL {
        let (store, upm) = build(cfg(3, router), 3);
        for m in ModalityId::ALL {
            for l in [1, 7, 64, 256] {
                let mut g = Graph::new(&store);
                let x = feats(&mut g, m, l, l);
                let out = upm.forward(&mut g, x, router).unwrap();
                assert_eq!(g.value(out.q_bar).shape(), &[3, 8]);
                assert_eq!(g.value(out.routing_weights).shape(), &[3, 3]);
            }
        }
    }
}

#[test]
fn width_mismatch_is_a_config_error() {
    let (store, upm) = build(cfg(2, RouterType::Soft), 4);
    let mut g = Graph::new(&store);
    let x = EncodedFeatures {
        modality: ModalityId::Image,
        features: g.input(Tensor::zeros(&[4, 6])),
    };
    assert!(matches!(upm.forward(&mut g, x, RouterType::Soft), Err(Error::Config(_))));
    assert!(matches!(Upm::new(cfg(0, RouterType::Soft), &mut ParamStore::<f64>::new(), &mut Initializer::new(0)), Err(Error::Argument(_))));
}

#[test]
fn identical_experts_make_soft_output_router_independent() {
    let (mut store, upm) = build(cfg(3, RouterType::Soft), 5);
    let names: Vec<(String, Tensor<f64>)> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with("upm.experts.0."))
        .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
        .collect();
    for k in 1..3 {
        for (n, t) in &names {
            set(&mut store, &n.replacen("experts.0.", &format!("experts.{k}."), 1), t.clone());
        }
    }
    let run = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store);
        let x = feats(&mut g, ModalityId::Point, 6, 3);
        let out = upm.forward(&mut g, x, RouterType::Soft).unwrap();
        g.value(out.q_bar).clone()
    };
    let a = run(&store);
    let r = store.id("upm.routers.point.fc2.b").unwrap();
    store.assign(r, &Tensor::new(&[3], vec![5.0, -3.0, 0.5]).unwrap()).unwrap();
    let b = run(&store);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn constant_router_ignores_router_weights() {
    let (mut store, upm) = build(cfg(3, RouterType::Constant), 6);
    let run = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store);
        let x = feats(&mut g, ModalityId::Imu, 9, 4);
        let out = upm.forward(&mut g, x, RouterType::Constant).unwrap();
        (g.value(out.q_bar).clone(), g.value(out.routing_weights).clone())
    };
    let (a, wa) = run(&store);
    for name in ["fc1.w", "fc2.w", "fc2.b"] {
        let n = format!("upm.routers.imu.{name}");
        let shape = store.by_name(&n).unwrap().tensor.shape().to_vec();
        set(&mut store, &n, ramp(&shape, 17));
    }
    let (b, _) = run(&store);
    assert_eq!(a, b);
    assert!(wa.data().iter().all(|&w| w == 1.0 / 3.0));
}

#[test]
fn sparse_and_soft_agree_on_one_hot_rows() {
    let (mut store, upm) = build(cfg(3, RouterType::Soft), 7);
    set(&mut store, "upm.routers.depth.fc2.w", Tensor::zeros(&[8, 3]));
    set(&mut store, "upm.routers.depth.fc2.b", Tensor::new(&[3], vec![0.0, 60.0, 0.0]).unwrap());
    let mut g = Graph::new(&store);
    let x = feats(&mut g, ModalityId::Depth, 5, 2);
    let soft = upm.forward(&mut g, x, RouterType::Soft).unwrap();
    let sparse = upm.forward(&mut g, x, RouterType::Sparse).unwrap();
    assert!(g.value(soft.q_bar).max_abs_diff(g.value(sparse.q_bar)) < 1e-6);
}

#[test]
fn upm_gradcheck_reaches_tokens_and_router() {
    for router in [RouterType::Soft, RouterType::Sparse] {
        let (mut store, upm) = build(cfg(2, router), 8);
        let x = store.add("x", ramp(&[4, 8], 5), false).unwrap();
        let tokens = upm.modality_tokens(ModalityId::Video);
        let router_w = upm.router_params(ModalityId::Video)[2];
        let mut g = Graph::new(&store);
        let loss = {
            let xv = g.param(x);
            let out = upm
                .forward(&mut g, EncodedFeatures { modality: ModalityId::Video, features: xv }, router)
                .unwrap();
            let w = g.input(ramp(&[3, 8], 9));
            let m = g.mul(out.q_bar, w).unwrap();
            g.sum(m).unwrap()
        };
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(tokens).is_some());
        assert!(grads.get(router_w).is_some());
        let r = gradcheck(&store, GradcheckOptions::default(), |g| {
            let xv = g.param(x);
            let out = upm.forward(g, EncodedFeatures { modality: ModalityId::Video, features: xv }, router)?;
            let w = g.input(ramp(&[3, 8], 9));
            let m = g.mul(out.q_bar, w)?;
            g.sum(m)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{router}: {r:?}");
    }
}

fn small_model(experts: usize) -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.upm.experts = experts;
    c
}

#[test]
fn expansion_copies_the_image_expert() {
    let base = OneLlm::<f32>::new(small_model(1), 11).unwrap();
    let grown = base.with_experts(3, ExpertInit::Image, 12).unwrap();
    let signal = onellm_core::tokenizers::RawSignal::new(ModalityId::Image, ramp(&[3, 28, 28], 1).cast::<f32>());
    let run = |m: &OneLlm<f32>| {
        let mut g = Graph::new(&m.store);
        let out = m.project(&mut g, &signal).unwrap();
        g.value(out.q_bar).clone()
    };
    assert!(run(&base).max_abs_diff(&run(&grown)) < 1e-6);
    // Every expert computes the same function.
    let mut g = Graph::new(&grown.store);
    let joint = g.input(ramp(&[9, 64], 3).cast::<f32>());
    let outs: Vec<Tensor<f32>> = grown
        .upm
        .experts()
        .iter()
        .map(|e| {
            let y = e.forward(&mut g, joint).unwrap();
            g.value(y).clone()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
    // Routers and other modality tokens are fresh.
    let name = "upm.tokens.audio";
    assert_ne!(base.store.by_name(name).unwrap().tensor, grown.store.by_name(name).unwrap().tensor);
    assert!(matches!(base.with_experts(0, ExpertInit::Image, 1), Err(Error::Argument(_))));

    let random = base.with_experts(3, ExpertInit::Random, 12).unwrap();
    let mut g = Graph::new(&random.store);
    let joint = g.input(ramp(&[9, 64], 3).cast::<f32>());
    let a = random.upm.experts()[0].forward(&mut g, joint).unwrap();
    let b = random.upm.experts()[1].forward(&mut g, joint).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn soft_rows_normalised_and_in_hull(seed in 0u64..10_000, l in 1usize..12, m in 0usize..8) {
        let (store, upm) = build(cfg(3, RouterType::Soft), seed);
        let modality = ModalityId::ALL[m];
        let mut g = Graph::new(&store);
        let x = feats(&mut g, modality, l, seed as usize);
        let out = upm.forward(&mut g, x, RouterType::Soft).unwrap();
        for row in g.value(out.routing_weights).data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
        let q = g.param(upm.modality_tokens(modality));
        let joint = g.concat_rows(&[q, x.features]).unwrap();
        let outs: Vec<Tensor<f64>> = upm.experts().iter().map(|e| {
            let y = e.forward(&mut g, joint).unwrap();
            let h = g.slice_rows(y, 0, 3).unwrap();
            g.value(h).clone()
        }).collect();
        for (i, v) in g.value(out.q_bar).data().iter().enumerate() {
            let lo = outs.iter().map(|o| o.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = outs.iter().map(|o| o.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
        }
    }
}
