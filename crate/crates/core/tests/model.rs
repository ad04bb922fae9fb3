use onellm_core::data::{generate_scene, RenderConfig, Renderer};
use onellm_core::gradcheck::{gradcheck, GradcheckOptions};
use onellm_core::model::{ExpertInit, ModelConfig, OneLlm};
use onellm_core::upm::RouterType;
use onellm_core::{Graph, ModalityId};

/// Freezes the per-modality parameters of every modality except `keep`,
/// since they cannot influence its loss.
fn only_modality(model: &mut OneLlm<f64>, keep: ModalityId) {
    for (_, p) in model.store.iter_mut() {
        for m in ModalityId::ALL {
            let own = [
                format!("tokenizer.{m}."),
                format!("upm.routers.{m}."),
                format!("upm.tokens.{m}"),
            ];
            if m != keep && own.iter().any(|o| p.name.starts_with(o.as_str())) {
                p.frozen = true;
            }
        }
    }
}

#[test]
fn composite_gradcheck_every_modality() {
    let mut cfg = ModelConfig::desk();
    cfg.upm.router = RouterType::Soft;
    let renderer = Renderer::new(RenderConfig::desk()).unwrap();
    let scene = generate_scene(3);
    for m in ModalityId::ALL {
        let mut model = OneLlm::<f64>::new(cfg, 21).unwrap();
        model.set_encoder_frozen(false);
        only_modality(&mut model, m);
        let signal = renderer.render::<f64>(&scene, m);
        let caption = "two small red squares";
        let opts = GradcheckOptions {
            max_per_param: Some(1),
            ..GradcheckOptions::default()
        };
        let r = gradcheck(&model.store, opts, |g| model.caption_loss(g, &signal, caption)).unwrap();
        assert!(r.max_rel_err < 1e-5, "{m}: {r:?}");
        // gradients reach the modality tokens and the router
        let mut g = Graph::new(&model.store);
        let loss = model.caption_loss(&mut g, &signal, caption).unwrap();
        let grads = g.backward(loss).unwrap();
        for name in [format!("upm.tokens.{m}"), format!("upm.routers.{m}.fc1.w"), "encoder.pos".into()] {
            let id = model.store.id(&name).unwrap();
            let gv = grads.get_or_zeros(id, model.store.tensor(id).numel());
            assert!(gv.iter().any(|v| *v != 0.0), "{m}: no gradient into {name}");
        }
    }
}

#[test]
fn f32_and_f64_models_agree() {
    let model = OneLlm::<f32>::new(ModelConfig::desk(), 5).unwrap();
    let wide: OneLlm<f64> = model.cast();
    let renderer = Renderer::new(RenderConfig::desk()).unwrap();
    let scene = generate_scene(11);
    for m in ModalityId::ALL {
        let s32 = renderer.render::<f32>(&scene, m);
        let s64 = renderer.render::<f64>(&scene, m);
        let mut g = Graph::new(&model.store);
        let a = model.caption_loss(&mut g, &s32, "a small red circle").unwrap();
        let a = g.value(a).data()[0] as f64;
        let mut g = Graph::new(&wide.store);
        let b = wide.caption_loss(&mut g, &s64, "a small red circle").unwrap();
        let b = g.value(b).data()[0];
        assert!((a - b).abs() < 1e-3 * b.abs(), "{m}: {a} vs {b}");
    }
}

#[test]
fn expansion_matches_single_expert() {
    let mut base_cfg = ModelConfig::desk();
    base_cfg.upm.experts = 1;
    let base = OneLlm::<f32>::new(base_cfg, 8).unwrap();
    let renderer = Renderer::new(RenderConfig::desk()).unwrap();
    for k in [3, 5, 7] {
        let grown = base.with_experts(k, ExpertInit::Image, 9).unwrap();
        for seed in 0..10 {
            let signal = renderer.render::<f32>(&generate_scene(seed), ModalityId::Image);
            let run = |m: &OneLlm<f32>| {
                let mut g = Graph::new(&m.store);
                let out = m.project(&mut g, &signal).unwrap();
                g.value(out.q_bar).clone()
            };
            let d = run(&base).max_abs_diff(&run(&grown));
            assert!(d < 1e-6, "K={k} seed {seed}: {d}");
        }
    }
}
