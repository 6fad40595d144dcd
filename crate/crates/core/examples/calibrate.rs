use glycast::data::{fraction_split, synth_generate, windowize_with, MissingPolicy, SynthConfig, Thresholds, WindowedDataset};
use glycast::eval::{compare_models, EvalSettings, ModelKind, SplitDataset};
use std::time::Instant;

fn build_split(seed: u64, n_users: usize, points: usize) -> SplitDataset {
    let noise_sd: f64 = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(12.0);
    let latent_freq: f64 = std::env::args().nth(6).map(|s| s.parse().unwrap()).unwrap_or(0.005);
    let cfg = SynthConfig { n_users, points_per_user: points, seed, noise_sd, latent_freq, ..SynthConfig::default() };
    let users = synth_generate(&cfg).unwrap();
    let mut trains = Vec::new();
    let mut tests = Vec::new();
    for u in &users {
        let thr = Thresholds::new(90.0, 150.0).unwrap();
        let w = windowize_with(&u.series, Some(&u.side), 6, 6, MissingPolicy::Drop, &thr).unwrap();
        let (tr, te) = fraction_split(&w, 0.25).unwrap();
        trains.push(tr);
        tests.push(te);
    }
    let train = WindowedDataset::concat(&trains.iter().collect::<Vec<_>>()).unwrap();
    let test = WindowedDataset::concat(&tests.iter().collect::<Vec<_>>()).unwrap();
    SplitDataset { train, test }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cap: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let seeds: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3);

    let q: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5);
    let settings = EvalSettings {
        latent_dim: q,
        max_iters: iters,
        max_train_windows: cap,
        ..EvalSettings::default()
    };
    let mut wins = 0;
    let mut improvements = Vec::new();
    let t0 = Instant::now();
    for seed in 0..seeds {
        let t = Instant::now();
        let split = build_split(seed, 5, 500);
        let reports = compare_models(&split, &[ModelKind::Gp, ModelKind::GpContext], &settings, seed).unwrap();
        let gp = reports[0].metrics.as_ref().unwrap().overall_precision;
        let ctx = reports[1].metrics.as_ref().unwrap().overall_precision;
        let gp_rmse = reports[0].rmse.unwrap();
        let ctx_rmse = reports[1].rmse.unwrap();
        if ctx > gp { wins += 1; }
        improvements.push(ctx - gp);
        println!("seed {seed}: gp={gp:.3} ctx={ctx:.3} diff={:+.3} | rmse gp={gp_rmse:.1} ctx={ctx_rmse:.1} | {:.1}s", ctx - gp, t.elapsed().as_secs_f64());
    }
    let mean: f64 = improvements.iter().sum::<f64>() / improvements.len() as f64;
    println!("wins {wins}/{seeds}, mean improvement {mean:.3}, total {:.1}s", t0.elapsed().as_secs_f64());
}
