//! Seeded synthetic two-view generator used by tests, benchmarks, and the
//! `synth` CLI command.
//!
//! Each user follows a one-dimensional latent trajectory
//! `z(t) = amplitude * sin(2 pi f t + phase) + noise`. Glucose reads the
//! latent through a saturating map, `120 + 60 tanh(z)` plus observation
//! noise; context features are smooth nonlinear maps of the same latent (or
//! pure noise when `context_informative` is off).

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GlucoseSeries, SideInfo, GLUCOSE_FLOOR};
use crate::error::Result;

/// Latent sinusoid amplitude. Large enough that the saturating glucose map
/// visits all three glycemic ranges once observation noise is added.
const LATENT_AMPLITUDE: f64 = 2.0;
/// Noise on the latent trajectory itself.
const LATENT_NOISE_SD: f64 = 0.15;
/// Noise on the informative context features.
const CONTEXT_NOISE_SD: f64 = 0.02;
/// Minutes between samples.
const STEP_MINUTES: i64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub points_per_user: usize,
    /// Cycles per sample of the latent sinusoid.
    pub latent_freq: f64,
    /// When true the context features are functions of the latent; when
    /// false they are independent noise.
    pub context_informative: bool,
    /// Observation noise on glucose, mg/dl.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 5,
            points_per_user: 500,
            latent_freq: 0.005,
            context_informative: true,
            noise_sd: 12.0,
            seed: 0,
        }
    }
}

/// One generated user: glucose series, context side information, and the
/// ground-truth latent trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUser {
    pub series: GlucoseSeries,
    pub side: SideInfo,
    pub latent: Vec<f64>,
}

/// Generate a deterministic synthetic cohort.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SynthUser>> {
    let mut rng = crate::seeded_rng(cfg.seed, 0x73796e74);
    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut latent = Vec::with_capacity(cfg.points_per_user);
        let mut values = Vec::with_capacity(cfg.points_per_user);
        let mut timestamps = Vec::with_capacity(cfg.points_per_user);
        let mut features = DMatrix::zeros(cfg.points_per_user, 6);

        for i in 0..cfg.points_per_user {
            let angle = std::f64::consts::TAU * cfg.latent_freq * i as f64 + phase;
            let eps_z: f64 = StandardNormal.sample(&mut rng);
            let z = LATENT_AMPLITUDE * angle.sin() + LATENT_NOISE_SD * eps_z;
            latent.push(z);

            let eps_g: f64 = StandardNormal.sample(&mut rng);
            let glucose = (120.0 + 60.0 * z.tanh() + cfg.noise_sd * eps_g).max(GLUCOSE_FLOOR);
            values.push(glucose);
            timestamps.push(i as i64 * STEP_MINUTES);

            if cfg.context_informative {
                let maps = [
                    (0.9 * z).tanh(),
                    z / (1.0 + z * z),
                    (-0.5 * z * z).exp(),
                    (0.4 * z).tanh(),
                    (0.8 * z).sin(),
                    z * (-0.25 * z * z).exp(),
                ];
                for (c, m) in maps.iter().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    features[(i, c)] = m + CONTEXT_NOISE_SD * e;
                }
            } else {
                for c in 0..6 {
                    features[(i, c)] = StandardNormal.sample(&mut rng);
                }
            }
        }

        let user_id = format!("synth{u:03}");
        let series = GlucoseSeries::new(user_id.clone(), timestamps.clone(), values)?;
        let side = SideInfo::new(
            user_id,
            timestamps,
            features,
            (1..=6).map(|k| format!("ctx{k}")).collect(),
        )?;
        users.push(SynthUser {
            series,
            side,
            latent,
        });
    }
    Ok(users)
}
