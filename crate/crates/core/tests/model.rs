use deaan::corpus::Domain;
use deaan::model::backbone::Sap;
use deaan::model::{grl, Architecture, Model, ModelConfig};
use deaan::nn::{Ctx, ParamStore};
use deaan::{Error, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        n_mels: 16,
        d_id: 12,
        d_dom: 10,
        num_speakers_source: 5,
        num_speakers_target: 3,
        crop_frames: 128,
        ..ModelConfig::default()
    }
}

fn model(cfg: &ModelConfig) -> (Model, ParamStore) {
    let m = Model::new(cfg, Architecture::Deaan).unwrap();
    let store = m.init(&mut ChaCha8Rng::seed_from_u64(1));
    (m, store)
}

fn frames(m: &Model, store: &ParamStore, x: &Tensor) -> deaan::Result<Tensor> {
    let mut cx = Ctx::new(store, false);
    let v = cx.g.constant(x.clone());
    let h = m.frame_features(&mut cx, v)?;
    Ok(cx.g.value(h).clone())
}

#[test]
fn backbone_output_length_follows_the_stride() {
    let cfg = ModelConfig::default();
    let (m, store) = model(&cfg);
    let x = randn(&mut ChaCha8Rng::seed_from_u64(2), &[1, 384, 64], 1.0);
    let h = frames(&m, &store, &x).unwrap();
    assert_eq!(m.backbone.total_stride(), 8);
    assert_eq!(h.shape(), &[1, 48, m.backbone.out_channels()]);
    for t in [8, 9, 15, 17, 100] {
        let x = randn(&mut ChaCha8Rng::seed_from_u64(t as u64), &[1, t, 64], 1.0);
        assert_eq!(frames(&m, &store, &x).unwrap().dim(1), t.div_ceil(8), "T = {t}");
    }
}

#[test]
fn backbone_eval_is_deterministic_and_rejects_short_input() {
    let (m, store) = model(&small_cfg());
    let x = randn(&mut ChaCha8Rng::seed_from_u64(3), &[2, 64, 16], 1.0);
    let a = frames(&m, &store, &x).unwrap();
    let b = frames(&m, &store, &x).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.is_finite());
    match frames(&m, &store, &Tensor::zeros(vec![1, 1, 16])) {
        Err(Error::Shape(msg)) => assert!(msg.contains("at least 8 frames"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn toy_scale_fits_the_desk_budget() {
    let (_, store) = model(&ModelConfig::default());
    assert!(store.num_params() < 2_000_000, "{} parameters", store.num_params());
    let base = Model::new(&ModelConfig::default(), Architecture::Baseline).unwrap();
    let s = base.init(&mut ChaCha8Rng::seed_from_u64(1));
    assert!(s.has_prefix("g.") && s.has_prefix("embed.") && s.has_prefix("cls."));
    assert!(!s.has_prefix("d_adv."));
}

fn sap_pool(sap: &Sap, store: &ParamStore, h: &Tensor) -> deaan::Result<Tensor> {
    let mut cx = Ctx::new(store, false);
    let v = cx.g.constant(h.clone());
    let p = sap.forward(&mut cx, v)?;
    Ok(cx.g.value(p).clone())
}

fn sap(dim: usize, seed: u64) -> (Sap, ParamStore) {
    let s = Sap::new("sap", dim, 8);
    let mut store = ParamStore::new();
    s.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (s, store)
}

#[test]
fn sap_constant_and_single_frame_inputs() {
    let (s, store) = sap(5, 4);
    let v = [0.3, -1.2, 2.0, 0.0, 5.5];
    let h = Tensor::new(vec![1, 7, 5], v.iter().cycle().take(35).copied().collect()).unwrap();
    let p = sap_pool(&s, &store, &h).unwrap();
    for (a, b) in p.data().iter().zip(v) {
        assert!((a - b).abs() < 1e-12);
    }
    let one = Tensor::new(vec![1, 1, 5], v.to_vec()).unwrap();
    let p = sap_pool(&s, &store, &one).unwrap();
    for (a, b) in p.data().iter().zip(v) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(sap_pool(&s, &store, &Tensor::zeros(vec![1, 0, 5])), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sap_is_permutation_invariant_and_convex(seed in 0u64..10_000, t in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, store) = sap(4, seed);
        let h = randn(&mut rng, &[1, t, 4], 3.0);
        let p = sap_pool(&s, &store, &h).unwrap();
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng);
        let permuted: Vec<f64> = order.iter().flat_map(|&i| h.row(0)[i * 4..i * 4 + 4].to_vec()).collect();
        let q = sap_pool(&s, &store, &Tensor::new(vec![1, t, 4], permuted).unwrap()).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for d in 0..4 {
            let col: Vec<f64> = (0..t).map(|i| h.data()[i * 4 + d]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p.data()[d] >= lo - 1e-12 && p.data()[d] <= hi + 1e-12);
        }
    }

    #[test]
    fn heads_stay_bounded(seed in 0u64..10_000, scale in 0.0f64..1e4) {
        let cfg = small_cfg();
        let (m, store) = model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cx = Ctx::new(&store, false);
        let f_id = cx.g.constant(randn(&mut rng, &[3, cfg.d_id], scale));
        let f_dom = cx.g.constant(randn(&mut rng, &[3, cfg.d_dom], scale));
        for (p, name) in [
            (m.d_adv().unwrap().prob(&mut cx, f_id).unwrap(), "d_adv"),
            (m.d_dom().unwrap().prob(&mut cx, f_dom).unwrap(), "d_dom"),
        ] {
            for &v in cx.g.value(p).data() {
                prop_assert!(v > 3e-7 && v < 1.0 - 3e-7, "{name}: {v}");
            }
        }
        for domain in [Domain::Source, Domain::Target] {
            let probs = m.classifier(domain).unwrap().probs(&mut cx, f_id).unwrap();
            let pt = cx.g.value(probs).clone();
            for i in 0..3 {
                prop_assert!((pt.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let t = m.t_theta().unwrap().forward(&mut cx, f_id, f_dom).unwrap();
        prop_assert_eq!(cx.g.value(t).shape(), &[3, 1]);
        prop_assert!(cx.g.value(t).is_finite());
    }
}

#[test]
fn encoders_have_configured_dims_and_disjoint_parameters() {
    let cfg = small_cfg();
    let (m, mut store) = model(&cfg);
    let h = randn(&mut ChaCha8Rng::seed_from_u64(5), &[2, 6, m.backbone.out_channels()], 1.0);
    let run = |store: &ParamStore| {
        let mut cx = Ctx::new(store, false);
        let v = cx.g.constant(h.clone());
        let id = m.embed_id(&mut cx, v).unwrap();
        let ds = m.embed_dom(&mut cx, v, Domain::Source).unwrap();
        let dt = m.embed_dom(&mut cx, v, Domain::Target).unwrap();
        [id, ds, dt].map(|x| cx.g.value(x).clone())
    };
    let [id, ds, dt] = run(&store);
    assert_eq!(id.shape(), &[2, cfg.d_id]);
    assert_eq!(ds.shape(), &[2, cfg.d_dom]);
    assert_eq!(dt.shape(), &[2, cfg.d_dom]);
    assert_eq!(run(&store)[0].data(), id.data());

    for (name, t) in store.params.iter_mut() {
        if name.starts_with("e_ds.") {
            *t = t.map(|v| v + 0.5);
        }
    }
    let [id2, ds2, dt2] = run(&store);
    assert_eq!(id2.data(), id.data());
    assert_eq!(dt2.data(), dt.data());
    assert_ne!(ds2.data(), ds.data());

    let mut cx = Ctx::new(&store, false);
    let wrong = cx.g.constant(Tensor::zeros(vec![1, 4, 3]));
    assert!(matches!(m.embed_id(&mut cx, wrong), Err(Error::Shape(_))));
}

#[test]
fn decoder_reconstructs_the_crop_and_depends_on_both_halves() {
    let cfg = small_cfg();
    let (m, store) = model(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = randn(&mut rng, &[2, cfg.d_id], 1.0);
    let b = randn(&mut rng, &[2, cfg.d_dom], 1.0);
    let target = randn(&mut rng, &[2, cfg.crop_frames, cfg.n_mels], 1.0);
    let run = || {
        let mut cx = Ctx::new(&store, false);
        let (fa, fb) = (cx.g.input(a.clone()), cx.g.input(b.clone()));
        let r = m.decode(&mut cx, fa, fb).unwrap();
        let x = cx.g.constant(target.clone());
        let d = cx.g.sub(r, x).unwrap();
        let sq = cx.g.mul(d, d).unwrap();
        let l = cx.g.mean(sq).unwrap();
        let grads = cx.g.backward(l).unwrap();
        let norm = |v: Var| grads.get(v).map_or(0.0, |t| t.norm_sq());
        (cx.g.value(r).clone(), norm(fa), norm(fb))
    };
    let (r, ga, gb) = run();
    assert_eq!(r.shape(), &[2, cfg.crop_frames, cfg.n_mels]);
    assert!(r.is_finite());
    assert_eq!(run().0.data(), r.data());
    assert!(ga > 0.0 && gb > 0.0, "{ga} {gb}");

    let mut cx = Ctx::new(&store, false);
    let short = cx.g.constant(Tensor::zeros(vec![2, cfg.d_id - 1]));
    let fb = cx.g.constant(b.clone());
    assert!(matches!(m.decode(&mut cx, short, fb), Err(Error::Shape(_))));
    assert!(Model::new(&ModelConfig { crop_frames: 200, ..small_cfg() }, Architecture::Deaan).is_err());
}

#[test]
fn grl_reverses_and_scales_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[3, 4], 1.0);
    let w = randn(&mut rng, &[3, 4], 1.0);
    for lambda in [0.0, 0.3, 1.0, 2.5] {
        let grad = |reverse: bool| {
            let mut g = deaan::Graph::new();
            let xv = g.input(x.clone());
            let y = if reverse { grl(&mut g, xv, lambda).unwrap() } else { xv };
            assert_eq!(g.value(y).data(), x.data());
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv).unwrap();
            let t = g.tanh(p);
            let l = g.sum(t);
            g.backward(l).unwrap().get(xv).unwrap().clone()
        };
        let (plain, rev) = (grad(false), grad(true));
        for (a, b) in plain.data().iter().zip(rev.data()) {
            let want = -lambda * a;
            assert!((b - want).abs() <= 1e-6 * want.abs().max(1e-12), "λ={lambda}: {b} vs {want}");
        }
    }
    let mut g = deaan::Graph::new();
    let xv = g.input(x);
    assert!(grl(&mut g, xv, -1.0).is_err());
}
