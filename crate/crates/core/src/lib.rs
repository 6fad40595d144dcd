//! Blood-glucose forecasting with contextual side information.
//!
//! The centerpiece is a two-view shared-latent-space Gaussian process: a
//! glucose-history view and a context view are generated from one low
//! dimensional latent trajectory, learned jointly with the kernel
//! hyperparameters by Scaled Conjugate Gradient. Prediction heads on the
//! latent space produce next-value forecasts and glycemic event classes
//! (hypo / eu / hyperglycemic).
//!
//! The crate also ships the comparison baselines (logistic regression,
//! kernel CCA, early feature fusion), the data pipeline (CSV ingestion,
//! windowing with an explicit missing-value sentinel, standardization,
//! unigram text features, sparsity filtering, holdout splitting, a seeded
//! synthetic generator), and an evaluation harness (per-class precision and
//! recall, RMSE, model comparison, forward step-wise signal importance).
//!
//! A narrative guide lives in `book/`; its code snippets compile as part of
//! this crate's doctest suite.

pub mod baselines;
#[cfg(doctest)]
mod book;
pub mod data;
pub mod error;
pub mod eval;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod msgp;
pub mod optim;

pub use error::{Error, Result};

/// Stream-separated deterministic RNG: one base seed, distinct salts per
/// consumer.
pub(crate) fn seeded_rng(seed: u64, salt: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    // splitmix-style mixing so nearby seeds do not share streams
    let mut z = seed.wrapping_add(salt).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    rand_chacha::ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}
