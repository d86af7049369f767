use gantts_core::analysis::{generator_stages, receptive_field};
use gantts_core::blocks::{BnMode, GBlockConfig};
use gantts_core::generator::*;
use gantts_tensor::{Rng, Tensor};

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_parts(shape, rng.normals(shape.iter().product()))
}

/// Toy store with standing statistics from a few random conditioning tracks.
fn ready_store(plan: &GeneratorPlan, tc: usize, seed: u64) -> gantts_tensor::ParamStore {
    let mut rng = Rng::new(seed);
    let mut store = build_generator(plan, &mut rng).unwrap();
    let pool: Vec<Tensor> = (0..6).map(|_| random(&[tc, plan.feature_dim], &mut rng)).collect();
    accumulate_standing_stats(&mut store, plan, 3, 4, &pool, &mut rng).unwrap();
    store
}

#[test]
fn toy_output_is_lambda_times_conditioning() {
    let plan = GeneratorPlan::toy();
    let mut rng = Rng::new(1);
    let mut store = build_generator(&plan, &mut rng).unwrap();
    let cond = random(&[2, 10, plan.feature_dim], &mut rng);
    let z = sample_latents(&plan, 2, None, &mut rng);
    let y = generate(&mut store, &plan, &cond, &z, BnMode::Train, None).unwrap();
    assert_eq!(y.shape(), &[2, 1200, 1]);
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn factors_must_multiply_to_lambda() {
    let mut plan = GeneratorPlan::toy();
    plan.blocks[6].factor = 4;
    assert!(plan.validate().is_err());
    assert!(build_generator(&plan, &mut Rng::new(0)).is_err());
}

#[test]
fn zero_parameters_give_silence() {
    let plan = GeneratorPlan::toy();
    let mut store = build_generator(&plan, &mut Rng::new(2)).unwrap();
    for (_, p) in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let mut rng = Rng::new(3);
    let cond = random(&[2, 4, plan.feature_dim], &mut rng);
    let z = sample_latents(&plan, 2, None, &mut rng);
    let y = generate(&mut store, &plan, &cond, &z, BnMode::Train, None).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn inference_is_deterministic() {
    let plan = GeneratorPlan::toy();
    let mut store = ready_store(&plan, 5, 4);
    let mut rng = Rng::new(5);
    let cond = random(&[3, 5, plan.feature_dim], &mut rng);
    let z = sample_latents(&plan, 3, None, &mut rng);
    let a = generate(&mut store, &plan, &cond, &z, BnMode::Infer, None).unwrap();
    let b = generate(&mut store, &plan, &cond, &z, BnMode::Infer, None).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn full_length_masks_change_nothing() {
    let plan = GeneratorPlan::toy();
    let mut store = ready_store(&plan, 4, 6);
    let mut rng = Rng::new(7);
    let cond = random(&[2, 4, plan.feature_dim], &mut rng);
    let z = sample_latents(&plan, 2, None, &mut rng);
    let masks = make_masks(&[4, 4], 4, &plan).unwrap();
    for unit in plan.units() {
        assert!(masks.at(unit).unwrap().data().iter().all(|&v| v == 1.0));
    }
    let a = generate(&mut store, &plan, &cond, &z, BnMode::Infer, None).unwrap();
    let b = generate(&mut store, &plan, &cond, &z, BnMode::Infer, Some(&masks)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn mask_has_length_times_unit_ones() {
    let plan = GeneratorPlan::toy();
    let masks = make_masks(&[10, 6, 1], 10, &plan).unwrap();
    for unit in plan.units() {
        let m = masks.at(unit).unwrap();
        for (i, &l) in [10usize, 6, 1].iter().enumerate() {
            let row = &m.data()[i * 10 * unit..(i + 1) * 10 * unit];
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), l * unit);
        }
    }
    assert!(make_masks(&[11], 10, &plan).is_err());
}

#[test]
fn padded_item_matches_single_item_generation() {
    let plan = GeneratorPlan::toy();
    let mut store = ready_store(&plan, 10, 8);
    let mut rng = Rng::new(9);
    let f = plan.feature_dim;
    let long = random(&[1, 10, f], &mut rng);
    let short = random(&[1, 6, f], &mut rng);
    let mut padded = short.data().to_vec();
    padded.resize(10 * f, 0.0);
    let batch = Tensor::concat0(&[&long, &Tensor::from_parts(&[1, 10, f], padded)]).unwrap();
    let z = sample_latents(&plan, 2, None, &mut rng);
    let masks = make_masks(&[10, 6], 10, &plan).unwrap();
    let y = generate(&mut store, &plan, &batch, &z, BnMode::Infer, Some(&masks)).unwrap();
    let z2 = Tensor::from_parts(&[1, plan.cond_dim()], z.data()[plan.cond_dim()..].to_vec());
    let single = generate(&mut store, &plan, &short, &z2, BnMode::Infer, None).unwrap();
    let item = &y.data()[1200..1200 + 720];
    let diff = item.iter().zip(single.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "max |Δ| = {diff}");
    assert!(y.data()[1200 + 720..].iter().all(|&v| v == 0.0));
}

#[test]
fn standing_statistics_make_generation_batch_independent() {
    let plan = GeneratorPlan::toy();
    let mut store = ready_store(&plan, 5, 10);
    let mut rng = Rng::new(11);
    let cond = random(&[4, 5, plan.feature_dim], &mut rng);
    let z = sample_latents(&plan, 4, None, &mut rng);
    let batch = generate(&mut store, &plan, &cond, &z, BnMode::Infer, None).unwrap();
    let one = generate(
        &mut store,
        &plan,
        &cond.slice0(2, 1).unwrap(),
        &z.slice0(2, 1).unwrap(),
        BnMode::Infer,
        None,
    )
    .unwrap();
    let n = 5 * plan.lambda;
    let diff = one.max_abs_diff(&Tensor::from_parts(&[1, n, 1], batch.data()[2 * n..3 * n].to_vec()));
    assert!(diff < 1e-9, "{diff}");
}

#[test]
fn single_pass_accumulation_is_deterministic() {
    let plan = GeneratorPlan::toy();
    let mut rng = Rng::new(12);
    let store = build_generator(&plan, &mut rng).unwrap();
    let pool: Vec<Tensor> = (0..3).map(|_| random(&[4, plan.feature_dim], &mut rng)).collect();
    let run = || {
        let mut s = store.clone();
        accumulate_standing_stats(&mut s, &plan, 1, 2, &pool, &mut Rng::new(13)).unwrap();
        s.buffers().map(|(k, v)| (k.clone(), v.data().to_vec())).collect::<Vec<_>>()
    };
    let a = run();
    assert!(!a.is_empty());
    assert_eq!(a, run());
    assert_eq!(DEFAULT_STANDING_PASSES, 100);
}

#[test]
fn inference_without_statistics_fails() {
    let plan = GeneratorPlan::toy();
    let mut rng = Rng::new(14);
    let mut store = build_generator(&plan, &mut rng).unwrap();
    let cond = random(&[1, 3, plan.feature_dim], &mut rng);
    let z = sample_latents(&plan, 1, None, &mut rng);
    assert!(generate(&mut store, &plan, &cond, &z, BnMode::Infer, None).is_err());
}

/// A small plan whose receptive field fits a short track.
fn small_plan() -> GeneratorPlan {
    let blocks = vec![
        GBlockConfig {
            in_ch: 4,
            out_ch: 4,
            factor: 1,
        },
        GBlockConfig {
            in_ch: 4,
            out_ch: 2,
            factor: 2,
        },
        GBlockConfig {
            in_ch: 2,
            out_ch: 2,
            factor: 3,
        },
    ];
    GeneratorPlan {
        feature_dim: 3,
        latent_dim: 4,
        speakers: 0,
        base_channels: 4,
        blocks,
        lambda: 6,
    }
}

#[test]
fn empirical_receptive_field_matches_analyzer() {
    let plan = small_plan();
    let tc = 128;
    let mut store = ready_store(&plan, tc, 15);
    // Keeps every ReLU active so dependencies are structural, not data dependent.
    for (path, p) in store.iter_mut() {
        if path.ends_with(".beta.bias") {
            p.value.data_mut().fill(50.0);
        }
    }
    // Keeps the output tanh out of saturation.
    let out = store.get_mut("g.conv_out.weight").unwrap();
    out.sn_u = None;
    out.value = out.value.map(|v| v * 1e-4);
    let mut rng = Rng::new(16);
    let base = random(&[1, tc, plan.feature_dim], &mut rng);
    let z = sample_latents(&plan, 1, None, &mut rng);
    let y0 = generate(&mut store, &plan, &base, &z, BnMode::Infer, None).unwrap();
    let n = tc * plan.lambda;
    let mut hits = vec![0usize; n];
    for j in 0..tc {
        let mut c = base.clone();
        for v in &mut c.data_mut()[j * plan.feature_dim..(j + 1) * plan.feature_dim] {
            *v += 1.0;
        }
        let y = generate(&mut store, &plan, &c, &z, BnMode::Infer, None).unwrap();
        for (h, (a, b)) in hits.iter_mut().zip(y.data().iter().zip(y0.data())) {
            if a != b {
                *h += 1;
            }
        }
    }
    let symbolic = receptive_field(&generator_stages(&plan));
    assert!(symbolic < tc / 2);
    assert_eq!(*hits.iter().max().unwrap(), symbolic, "hits {:?}", &hits[n / 2 - 12..n / 2 + 12]);
}

#[test]
fn speaker_one_hot_is_appended() {
    let mut plan = GeneratorPlan::toy();
    plan.speakers = 3;
    let z = sample_latents(&plan, 2, Some(1), &mut Rng::new(17));
    assert_eq!(z.shape(), &[2, LATENT_DIM + 3]);
    assert_eq!(&z.data()[LATENT_DIM..LATENT_DIM + 3], &[0.0, 1.0, 0.0]);
}
