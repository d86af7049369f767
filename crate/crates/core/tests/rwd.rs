use gantts_core::blocks::{Binder, SnMode};
use gantts_core::rwd::*;
use gantts_tensor::{grad_check, Graph, ParamStore, Rng, Tensor, TensorError};

const TOY_CLIP: usize = 4800;
const F: usize = 8;

fn cfg(k: usize, conditional: bool) -> RwdConfig {
    RwdConfig {
        k,
        window: Window::Base(BASE_WINDOW),
        conditional,
        channels: ChannelSchedule::FULL,
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_parts(shape, rng.normals(shape.iter().product()))
}

#[test]
fn downsample_layouts_for_main_strides() {
    let rows: [(usize, &[usize], usize, usize, &[usize]); 5] = [
        (1, &[5, 3, 2, 2, 2], 8, 17, &[5, 3]),
        (2, &[5, 3, 2, 2], 7, 15, &[5, 3]),
        (4, &[5, 3, 2], 6, 13, &[5, 3]),
        (8, &[5, 3], 5, 11, &[5, 3]),
        (15, &[2, 2, 2], 6, 13, &[2, 2]),
    ];
    for (k, cf, cb, cd, uf) in rows {
        assert_eq!(downsample_plan(k, true).unwrap(), cf);
        assert_eq!(downsample_plan(k, false).unwrap(), uf);
        let c = discriminator_plan(&cfg(k, true), 48000, LAMBDA, 567).unwrap();
        let u = discriminator_plan(&cfg(k, false), 48000, LAMBDA, 567).unwrap();
        assert_eq!((c.factors.as_slice(), c.num_blocks(), c.depth()), (cf, cb, cd), "k={k}");
        assert_eq!((u.factors.as_slice(), u.num_blocks(), u.depth()), (uf, 5, 11), "k={k}");
        assert_eq!(c.depth(), 2 * c.num_blocks() + 1);
    }
}

#[test]
fn conditional_block_sits_at_conditioning_rate() {
    for k in MAIN_KS {
        let plan = discriminator_plan(&cfg(k, true), 48000, LAMBDA, 567).unwrap();
        assert_eq!(k * plan.factors.iter().product::<usize>(), LAMBDA);
        let at = plan.conditional_block().unwrap();
        let down: usize = plan.blocks[..=at].iter().map(|b| b.factor).product();
        assert_eq!(plan.span / k / down, plan.span / LAMBDA);
        assert_eq!(plan.blocks.iter().filter(|b| b.is_conditional()).count(), 1);
        let u = discriminator_plan(&cfg(k, false), 48000, LAMBDA, 567).unwrap();
        assert_eq!(u.conditional_block(), None);
    }
}

#[test]
fn full_clip_window_counts() {
    assert_eq!(window_support(48000, &cfg(15, true), LAMBDA).unwrap(), 371);
    assert_eq!(window_support(48000, &cfg(15, false), LAMBDA).unwrap(), 44401);
}

#[test]
fn window_equal_to_clip_is_fixed() {
    let c = RwdConfig {
        window: Window::Full,
        ..cfg(1, true)
    };
    let mut rng = Rng::new(0);
    for _ in 0..10 {
        assert_eq!(sample_window(TOY_CLIP, &c, LAMBDA, &mut rng).unwrap().offset, 0);
    }
    assert_eq!(window_support(TOY_CLIP, &c, LAMBDA).unwrap(), 1);
    assert!(sample_window(1000, &cfg(8, true), LAMBDA, &mut rng).is_err());
}

/// Upper 0.001 quantile of χ² with `df` degrees of freedom (Wilson–Hilferty).
fn chi2_critical(df: f64) -> f64 {
    let z = 3.090_232;
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn window_offsets_are_uniform() {
    for (n, c) in [(48000, cfg(15, true)), (4800, cfg(8, false))] {
        let support = window_support(n, &c, LAMBDA).unwrap();
        let stride = if c.conditional { LAMBDA } else { 1 };
        let mut counts = vec![0usize; support];
        let mut rng = Rng::new(42);
        let draws = 100_000;
        for _ in 0..draws {
            let w = sample_window(n, &c, LAMBDA, &mut rng).unwrap();
            assert_eq!(w.offset % stride, 0);
            assert_eq!(w.len, c.span(n));
            assert_eq!((w.cond_start, w.cond_end), (w.offset / LAMBDA, (w.offset + w.len) / LAMBDA));
            counts[w.offset / stride] += 1;
        }
        let expected = draws as f64 / support as f64;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < chi2_critical((support - 1) as f64), "χ² = {chi2} over {support} cells");
    }
}

#[test]
fn ablation_member_sets() {
    let ch = ChannelSchedule::TOY;
    let full = ablation_config("full_d", ch).unwrap();
    assert_eq!(full.members.len(), 1);
    assert_eq!((full.members[0].cfg.k, full.members[0].cfg.window), (1, Window::Full));
    assert!(full.members[0].cfg.conditional);
    let multi = ablation_config("crwd_multi", ch).unwrap();
    assert_eq!(multi.members.iter().map(|m| m.cfg.k).collect::<Vec<_>>(), MAIN_KS);
    assert!(multi.members.iter().all(|m| m.cfg.conditional));
    let main = ablation_config("rwd_star_240", ch).unwrap();
    assert_eq!(main.members.len(), 10);
    assert_eq!(main.members.iter().filter(|m| m.cfg.conditional).count(), 5);
    assert!(main.members.iter().all(|m| m.cfg.window == Window::Base(240)));
    let wide = ablation_config("rwd_star_480", ch).unwrap();
    assert!(wide.members.iter().all(|m| m.cfg.window == Window::Base(480)));
    let x5 = ablation_config("crwd1_urwd1_x5", ch).unwrap();
    assert_eq!(x5.members.len(), 10);
    assert!(x5.members.iter().all(|m| m.cfg.k == 1));
    let nods = ablation_config("rwd_nods_multiwindow", ch).unwrap();
    let spans: Vec<usize> = nods.members.iter().map(|m| m.cfg.span(48000)).collect();
    assert_eq!(spans, [240, 240, 480, 480, 960, 960, 1920, 1920, 3600, 3600]);
    assert!(nods.members.iter().all(|m| m.cfg.k == 1));
    for name in ABLATION_NAMES {
        ablation_config(name, ch).unwrap().validate().unwrap();
    }
}

fn toy_ensemble(name: &str, seed: u64) -> (EnsembleConfig, ParamStore, Vec<DiscriminatorPlan>) {
    let ens = ablation_config(name, ChannelSchedule::TOY).unwrap();
    let (store, plans) = build_ensemble(&ens, TOY_CLIP, LAMBDA, F, &mut Rng::new(seed)).unwrap();
    (ens, store, plans)
}

fn scores(store: &mut ParamStore, ens: &EnsembleConfig, plans: &[DiscriminatorPlan], x: &Tensor, c: &Tensor, rng: &Rng) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let cv = g.constant(c.clone());
    let mut b = Binder::new(store, false, SnMode::Frozen);
    let s = ensemble_forward(&mut g, &mut b, ens, plans, xv, Some(cv), LAMBDA, rng).unwrap();
    g.value(s).data().to_vec()
}

fn toy_batch(seed: u64) -> (Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    (random(&[2, TOY_CLIP, 1], &mut rng), random(&[2, TOY_CLIP / LAMBDA, F], &mut rng))
}

#[test]
fn ensemble_is_ordered_sum_of_member_streams() {
    let (ens, mut store, plans) = toy_ensemble("rwd_star_240", 1);
    let (x, c) = toy_batch(2);
    let rng = Rng::new(3);
    let total = scores(&mut store, &ens, &plans, &x, &c, &rng);
    // Members evaluated in reverse, then reduced in member order.
    let mut per_member = vec![Vec::new(); ens.members.len()];
    for i in (0..ens.members.len()).rev() {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let cv = g.constant(c.clone());
        let mut b = Binder::new(&mut store, false, SnMode::Frozen);
        let s = rwd_forward(&mut g, &mut b, &ens.members[i], &plans[i], xv, Some(cv), LAMBDA, &mut rng.split(i as u64)).unwrap();
        per_member[i] = g.value(s).data().to_vec();
    }
    for item in 0..2 {
        let mut acc = per_member[0][item];
        for m in &per_member[1..] {
            acc += m[item];
        }
        assert_eq!(acc, total[item]);
    }
    assert_eq!(total, scores(&mut store, &ens, &plans, &x, &c, &rng));
}

#[test]
fn single_member_ensemble_is_the_member() {
    let (ens, mut store, plans) = toy_ensemble("crwd1", 4);
    let (x, c) = toy_batch(5);
    let rng = Rng::new(6);
    let total = scores(&mut store, &ens, &plans, &x, &c, &rng);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let cv = g.constant(c);
    let mut b = Binder::new(&mut store, false, SnMode::Frozen);
    let s = rwd_forward(&mut g, &mut b, &ens.members[0], &plans[0], xv, Some(cv), LAMBDA, &mut rng.split(0)).unwrap();
    assert_eq!(g.value(s).data(), total.as_slice());
}

#[test]
fn zero_network_scores_its_output_bias() {
    let (ens, mut store, plans) = toy_ensemble("rwd_star_240", 7);
    for (path, p) in store.iter_mut() {
        let v = if path.ends_with(".out.bias") { 1.0 } else { 0.0 };
        p.value.data_mut().fill(v);
        p.sn_u = None;
    }
    let (x, c) = toy_batch(8);
    assert_eq!(scores(&mut store, &ens, &plans, &x, &c, &Rng::new(9)), vec![10.0, 10.0]);
}

#[test]
fn missing_member_is_an_error() {
    let (ens, _, plans) = toy_ensemble("crwd1_urwd1", 10);
    let (mut other, _) = build_ensemble(&ablation_config("crwd1", ChannelSchedule::TOY).unwrap(), TOY_CLIP, LAMBDA, F, &mut Rng::new(0)).unwrap();
    let (x, c) = toy_batch(11);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let cv = g.constant(c);
    let mut b = Binder::new(&mut other, false, SnMode::Frozen);
    assert!(ensemble_forward(&mut g, &mut b, &ens, &plans, xv, Some(cv), LAMBDA, &Rng::new(0)).is_err());
}

#[test]
fn full_discriminator_is_deterministic() {
    let (ens, mut store, plans) = toy_ensemble("full_d", 12);
    let (x, c) = toy_batch(13);
    let a = scores(&mut store, &ens, &plans, &x, &c, &Rng::new(1));
    let b = scores(&mut store, &ens, &plans, &x, &c, &Rng::new(2));
    assert_eq!(a, b);
}

#[test]
fn gradient_reaches_input_through_every_member() {
    let (ens, mut store, plans) = toy_ensemble("rwd_star_240", 14);
    let (x, c) = toy_batch(15);
    for (i, (m, plan)) in ens.members.iter().zip(&plans).enumerate() {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let cv = g.constant(c.clone());
        let mut b = Binder::new(&mut store, true, SnMode::Frozen);
        let s = rwd_forward(&mut g, &mut b, m, plan, xv, Some(cv), LAMBDA, &mut Rng::new(16).split(i as u64)).unwrap();
        let l = g.sum_all(s);
        let grads = g.backward(l).unwrap();
        let dx = grads.get(xv).unwrap();
        let nonzero = dx.data().iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero > 0, "{}", m.prefix);
        assert!(nonzero <= 2 * m.cfg.span(TOY_CLIP), "{}", m.prefix);
    }
}

#[test]
fn toy_discriminator_passes_gradient_check() {
    let c = RwdConfig {
        k: 8,
        window: Window::Base(BASE_WINDOW),
        conditional: true,
        channels: ChannelSchedule { start: 4, cap: 8 },
    };
    let plan = discriminator_plan(&c, 1920, LAMBDA, 3).unwrap();
    let mut store = ParamStore::new();
    init_discriminator(&mut store, "d", &plan, &mut Rng::new(17)).unwrap();
    let mut rng = Rng::new(18);
    let x = random(&[1, 1920, 1], &mut rng);
    let cond = random(&[1, 16, 3], &mut rng);
    let report = grad_check("discriminator", &[x, cond], 1e-5, 1e-4, |g, v| {
        let mut s = store.clone();
        let mut b = Binder::new(&mut s, false, SnMode::Off);
        let y = discriminator_forward(g, &mut b, "d", &plan, v[0], Some(v[1])).map_err(|e| TensorError::Invalid {
            op: "discriminator",
            reason: e.to_string(),
        })?;
        Ok(g.sum_all(y))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}
