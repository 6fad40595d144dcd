//! End-to-end behavior of the shared-latent-space model: training descent,
//! determinism, the single-view reduction, latent inference, prediction
//! heads, forecasting, and model-file round-trips.

use glycast::data::{
    standardize_apply, standardize_fit, synth_generate, windowize, GlycemicLabel, MissingPolicy,
    SynthConfig, WindowedDataset,
};
use glycast::msgp::{ContextMode, LatentModel, TrainConfig};
use nalgebra::{DMatrix, DVector};

fn synth_windows(seed: u64, points: usize) -> WindowedDataset {
    let cfg = SynthConfig {
        n_users: 1,
        points_per_user: points,
        seed,
        ..SynthConfig::default()
    };
    let users = synth_generate(&cfg).unwrap();
    windowize(
        &users[0].series,
        Some(&users[0].side),
        6,
        6,
        MissingPolicy::Drop,
    )
    .unwrap()
}

fn quick_config(seed: u64, mode: ContextMode) -> TrainConfig {
    TrainConfig {
        latent_dim: 3,
        max_iters: 50,
        rel_tol: 1e-7,
        seed,
        context_mode: mode,
    }
}

fn train_on(data: &WindowedDataset, config: &TrainConfig) -> LatentModel {
    LatentModel::train(
        &data.v,
        if data.has_side() { Some(&data.s) } else { None },
        &data.y_value,
        &data.y_label,
        config,
    )
    .unwrap()
}

/// Single-view latent-model objective computed with explicit inverses and
/// determinants; shares nothing with the library's Cholesky path.
fn single_view_objective_oracle(
    q: &DMatrix<f64>,
    signal_var: f64,
    inv_lengthscale: f64,
    jitter: f64,
    v: &DMatrix<f64>,
) -> f64 {
    let n = q.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut d2 = 0.0;
            for m in 0..q.ncols() {
                let diff = q[(i, m)] - q[(j, m)];
                d2 += diff * diff;
            }
            k[(i, j)] = signal_var * (-0.5 * inv_lengthscale * d2).exp();
            if i == j {
                k[(i, j)] = signal_var + jitter;
            }
        }
    }
    let k_inv = k.clone().try_inverse().unwrap();
    let d_out = v.ncols() as f64;
    let logdet = k.determinant().ln();
    let trace = (&k_inv * v * v.transpose()).trace();
    let prior: f64 = 0.5 * q.iter().map(|x| x * x).sum::<f64>();
    0.5 * d_out * logdet + 0.5 * trace + prior
}

#[test]
fn training_descends_from_init_every_seed() {
    for seed in 0..10u64 {
        let data = synth_windows(seed, 120).thin(60);
        let model = train_on(&data, &quick_config(seed, ContextMode::SharedLatent));
        let trace = model.objective_trace();
        assert!(trace.len() >= 2, "seed {seed}: no accepted steps");
        assert!(
            model.final_objective() < trace[0],
            "seed {seed}: {} !< {}",
            model.final_objective(),
            trace[0]
        );
        for w in trace.windows(2) {
            assert!(w[1] <= w[0], "seed {seed}: trace increased");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = synth_windows(3, 100).thin(50);
    let cfg = quick_config(11, ContextMode::SharedLatent);
    let a = train_on(&data, &cfg);
    let b = train_on(&data, &cfg);
    assert_eq!(a.latent_matrix(), b.latent_matrix());
    assert_eq!(a.final_objective(), b.final_objective());
    let win: Vec<f64> = data.v.row(0).iter().copied().collect();
    let s_row: Vec<f64> = data.s.row(0).iter().copied().collect();
    let pa = a.predict_label(&win, Some(&s_row)).unwrap();
    let pb = b.predict_label(&win, Some(&s_row)).unwrap();
    assert_eq!(pa.probs, pb.probs);
}

#[test]
fn stored_objective_matches_recomputation() {
    let data = synth_windows(5, 100).thin(50);
    let model = train_on(&data, &quick_config(5, ContextMode::SharedLatent));
    let recomputed = model.recomputed_objective().unwrap();
    assert!(
        (model.final_objective() - recomputed).abs() <= 1e-9,
        "{} vs {recomputed}",
        model.final_objective()
    );
}

#[test]
fn context_mode_none_matches_single_view_oracle() {
    for seed in 0..5u64 {
        let data = synth_windows(seed + 20, 90).thin(40);
        let model = train_on(&data, &quick_config(seed, ContextMode::None));
        let oracle = single_view_objective_oracle(
            model.latent_matrix(),
            model.params_v().signal_var(),
            model.params_v().inv_lengthscale(),
            model.params_v().jitter,
            model.view_v(),
        );
        assert!(
            (model.final_objective() - oracle).abs() <= 1e-6,
            "seed {seed}: {} vs {oracle}",
            model.final_objective()
        );
    }
}

#[test]
fn inferring_a_training_window_recovers_its_latent() {
    let data = synth_windows(7, 100).thin(50);
    let model = train_on(&data, &quick_config(7, ContextMode::SharedLatent));
    for row in [0usize, 10, 25] {
        let win: Vec<f64> = data.v.row(row).iter().copied().collect();
        let s_row: Vec<f64> = data.s.row(row).iter().copied().collect();
        let inferred = model.infer_latent(&win, Some(&s_row)).unwrap();
        assert!(!inferred.fallback);
        let stored = model.latent_matrix().row(row);
        let dist: f64 = inferred
            .coords
            .iter()
            .zip(stored.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= 1e-4, "row {row}: distance {dist}");
    }
}

#[test]
fn missing_context_row_is_simply_omitted() {
    let data = synth_windows(9, 100).thin(50);
    let model = train_on(&data, &quick_config(9, ContextMode::SharedLatent));
    let win: Vec<f64> = data.v.row(3).iter().copied().collect();
    let s_row: Vec<f64> = data.s.row(3).iter().copied().collect();
    let without = model.infer_latent(&win, None).unwrap();
    let repeat = model.infer_latent(&win, None).unwrap();
    assert_eq!(without.coords, repeat.coords);
    // The context view carries signal, so including it moves the answer.
    let with = model.infer_latent(&win, Some(&s_row)).unwrap();
    assert_ne!(without.coords, with.coords);
}

#[test]
fn midpoint_latents_stay_between_their_endpoints() {
    // Smooth series so the blended window stays on the data manifold, and
    // the closest consecutive pair so "nearby" holds in latent space too.
    let mut hits = 0;
    for seed in 0..10u64 {
        let cfg = SynthConfig {
            n_users: 1,
            points_per_user: 100,
            noise_sd: 1.0,
            seed: seed + 40,
            ..SynthConfig::default()
        };
        let users = synth_generate(&cfg).unwrap();
        let data = windowize(
            &users[0].series,
            Some(&users[0].side),
            6,
            6,
            MissingPolicy::Drop,
        )
        .unwrap()
        .thin(70);
        let mut cfg_t = quick_config(seed, ContextMode::SharedLatent);
        cfg_t.latent_dim = 2;
        let model = train_on(&data, &cfg_t);

        let q = model.latent_matrix();
        let mut ra = 0usize;
        let mut best_d = f64::INFINITY;
        for r in 0..q.nrows() - 1 {
            let d: f64 = (0..2).map(|m| (q[(r, m)] - q[(r + 1, m)]).powi(2)).sum();
            if d < best_d && d > 1e-8 {
                best_d = d;
                ra = r;
            }
        }
        let rb = ra + 1;
        let mid_v: Vec<f64> = (0..data.v.ncols())
            .map(|c| 0.5 * (data.v[(ra, c)] + data.v[(rb, c)]))
            .collect();
        let mid_s: Vec<f64> = (0..data.s.ncols())
            .map(|c| 0.5 * (data.s[(ra, c)] + data.s[(rb, c)]))
            .collect();
        let inferred = model.infer_latent(&mid_v, Some(&mid_s)).unwrap();

        // Dense grid-search oracle over the latent plane.
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for r in 0..q.nrows() {
            for m in 0..2 {
                lo[m] = lo[m].min(q[(r, m)]);
                hi[m] = hi[m].max(q[(r, m)]);
            }
        }
        let steps = 60;
        let mut best = (f64::INFINITY, [0.0f64; 2]);
        for i in 0..=steps {
            for j in 0..=steps {
                let cand = [
                    lo[0] + (hi[0] - lo[0]) * i as f64 / steps as f64,
                    lo[1] + (hi[1] - lo[1]) * j as f64 / steps as f64,
                ];
                let score = model
                    .reconstruction_score(&cand, &mid_v, Some(&mid_s))
                    .unwrap();
                if score < best.0 {
                    best = (score, cand);
                }
            }
        }
        let our_score = model
            .reconstruction_score(inferred.coords.as_slice(), &mid_v, Some(&mid_s))
            .unwrap();
        let beats_grid = our_score <= best.0 + 1e-9;

        let qa = model.latent_matrix().row(ra).into_owned();
        let qb = model.latent_matrix().row(rb).into_owned();
        let in_box = (0..2).all(|m| {
            let (l, h) = (qa[m].min(qb[m]), qa[m].max(qb[m]));
            // absolute slack covers box sides that happen to be degenerate
            let pad = 0.1 * (h - l) + 0.02 * (hi[m] - lo[m]);
            (l - pad..=h + pad).contains(&inferred.coords[m])
        });
        if beats_grid && in_box {
            hits += 1;
        }
    }
    assert!(hits >= 9, "midpoint containment held in {hits}/10 seeds");
}

#[test]
fn forecast_base_case_and_lengths() {
    let data = synth_windows(13, 100).thin(50);
    let model = train_on(&data, &quick_config(13, ContextMode::SharedLatent));
    let win: Vec<f64> = data.v.row(4).iter().copied().collect();
    let s_row: Vec<f64> = data.s.row(4).iter().copied().collect();

    let single = model.predict_value(&win, Some(&s_row)).unwrap();
    let one = model.recursive_forecast(&win, Some(&s_row), 1).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].mean_mgdl, single.mean_mgdl);
    assert_eq!(one[0].var_mgdl2, single.var_mgdl2);

    for h in [1usize, 6, 12] {
        assert_eq!(
            model.recursive_forecast(&win, Some(&s_row), h).unwrap().len(),
            h
        );
    }
    assert!(model.recursive_forecast(&win, Some(&s_row), 0).is_err());
}

#[test]
fn constant_series_forecasts_the_constant() {
    // A constant series standardizes to zero everywhere; the heads see zero
    // targets and the forecast must come back to the constant.
    let c = 140.0;
    let n = 60;
    let v = DMatrix::from_element(n, 6, c);
    let y = DVector::from_element(n, c);
    let labels = vec![GlycemicLabel::Eu; n];
    let model = LatentModel::train(&v, None, &y, &labels, &quick_config(1, ContextMode::None))
        .unwrap();
    let window = vec![c; 6];
    for step in model.recursive_forecast(&window, None, 6).unwrap() {
        assert!(
            (step.mean_mgdl - c).abs() <= 0.05 * c,
            "forecast {} strayed from {c}",
            step.mean_mgdl
        );
    }
}

#[test]
fn separable_three_class_data_is_learned() {
    // Three well-separated glucose regimes, margins far beyond the noise.
    let mut rng = {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(99)
    };
    use rand::Rng;
    let levels = [50.0, 120.0, 260.0];
    let n_per = 30;
    let n = 3 * n_per;
    let noise = 3.0;
    let mut v = DMatrix::zeros(n, 6);
    let mut y = DVector::zeros(n);
    let mut labels = Vec::with_capacity(n);
    for (k, &level) in levels.iter().enumerate() {
        for i in 0..n_per {
            let r = k * n_per + i;
            for c in 0..6 {
                v[(r, c)] = level + rng.gen_range(-noise..noise);
            }
            y[r] = level + rng.gen_range(-noise..noise);
            labels.push(glycast::data::categorize(y[r]).unwrap());
        }
    }
    let cfg = TrainConfig {
        latent_dim: 2,
        max_iters: 60,
        rel_tol: 1e-7,
        seed: 4,
        context_mode: ContextMode::None,
    };
    let model = LatentModel::train(&v, None, &y, &labels, &cfg).unwrap();

    // Held-out points from the same regimes.
    let mut correct = 0;
    let mut total = 0;
    for (k, &level) in levels.iter().enumerate() {
        for _ in 0..20 {
            let window: Vec<f64> = (0..6).map(|_| level + rng.gen_range(-noise..noise)).collect();
            let pred = model.predict_label(&window, None).unwrap();
            let truth = match k {
                0 => GlycemicLabel::Hypo,
                1 => GlycemicLabel::Eu,
                _ => GlycemicLabel::Hyper,
            };
            if pred.label == truth {
                correct += 1;
            }
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}

#[test]
fn model_file_roundtrip_reproduces_predictions_bitwise() {
    let data = synth_windows(17, 90).thin(45);
    let model = train_on(&data, &quick_config(17, ContextMode::SharedLatent));

    let mut buf = Vec::new();
    model.save(&mut buf).unwrap();
    let loaded = LatentModel::load(buf.as_slice()).unwrap();

    let win: Vec<f64> = data.v.row(2).iter().copied().collect();
    let s_row: Vec<f64> = data.s.row(2).iter().copied().collect();
    let p1 = model.predict_label(&win, Some(&s_row)).unwrap();
    let p2 = loaded.predict_label(&win, Some(&s_row)).unwrap();
    assert_eq!(p1.probs, p2.probs);
    assert_eq!(p1.label, p2.label);
    let f1 = model.recursive_forecast(&win, Some(&s_row), 6).unwrap();
    let f2 = loaded.recursive_forecast(&win, Some(&s_row), 6).unwrap();
    for (a, b) in f1.iter().zip(&f2) {
        assert_eq!(a.mean_mgdl, b.mean_mgdl);
        assert_eq!(a.var_mgdl2, b.var_mgdl2);
    }

    // A second save of the loaded model is byte-identical.
    let mut buf2 = Vec::new();
    loaded.save(&mut buf2).unwrap();
    assert_eq!(buf, buf2);
}

#[test]
fn early_fusion_requires_context_at_prediction_time() {
    let data = synth_windows(21, 90).thin(45);
    let model = train_on(&data, &quick_config(21, ContextMode::EarlyFusion));
    let win: Vec<f64> = data.v.row(0).iter().copied().collect();
    let s_row: Vec<f64> = data.s.row(0).iter().copied().collect();
    assert!(model.predict_label(&win, Some(&s_row)).is_ok());
    assert!(model.predict_label(&win, None).is_err());
}

#[test]
fn bad_shapes_are_rejected() {
    let data = synth_windows(23, 90).thin(40);
    let cfg = TrainConfig {
        latent_dim: 40, // larger than min(D_v + D_s, n - 1)
        ..quick_config(0, ContextMode::SharedLatent)
    };
    assert!(LatentModel::train(&data.v, Some(&data.s), &data.y_value, &data.y_label, &cfg).is_err());

    let model = train_on(&data, &quick_config(0, ContextMode::SharedLatent));
    assert!(model.predict_label(&[1.0, 2.0], None).is_err());
}
