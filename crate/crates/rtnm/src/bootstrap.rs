//! Block bootstrap covariance for the group-time effect vector.
//!
//! Each replicate draws `n1` outermost-block indices with replacement and
//! averages the corresponding contribution rows, reproducing the estimate
//! exactly under the identity resample. The covariance of the replicates
//! (divisor `B - 1`) estimates the covariance of the effect vector.
//! Replicate `b` draws from its own counter-based substream, so results are
//! identical regardless of thread count or scheduling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{AttVector, GtIndex};
use crate::linalg::SymMat;
use crate::rng::{stream, StreamLabel, GENERATOR_ID};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub index: GtIndex,
    pub sigma: SymMat<f64>,
    pub b: usize,
    pub seed: u64,
    /// RNG identity, recorded for reproducibility.
    pub generator: String,
    /// True when negative eigenvalues had to be floored at zero.
    pub psd_repaired: bool,
    /// Replicate effect vectors, kept only on request.
    pub replicates: Option<Vec<Vec<f64>>>,
}

impl CovarianceEstimate {
    /// Marginal standard errors (square roots of the diagonal).
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.sigma.n())
            .map(|i| self.sigma.get(i, i).max(0.0).sqrt())
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("effect vector carries no block contributions (naive estimates cannot be bootstrapped)")]
    NoBlockContributions,
    #[error("need at least 2 bootstrap replicates, got {0}")]
    TooFewReplicates(usize),
}

/// Draws `b` resampled effect vectors from the block contributions, one
/// substream per replicate under the given stage label.
pub(crate) fn resample_means(
    att: &AttVector,
    b: usize,
    seed: u64,
    label: StreamLabel,
) -> Vec<Vec<f64>> {
    let n1 = att.n_blocks();
    let k = att.index.k();
    (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(seed, label, rep as u64);
            let mut mean = vec![0.0f64; k];
            for _ in 0..n1 {
                let m = rng.gen_range(0..n1);
                for (acc, v) in mean.iter_mut().zip(att.block_contributions[m].iter()) {
                    *acc += v;
                }
            }
            for v in mean.iter_mut() {
                *v /= n1 as f64;
            }
            mean
        })
        .collect()
}

/// Bootstrap covariance of the effect vector over `b` replicates.
pub fn bootstrap_covariance(
    att: &AttVector,
    b: usize,
    seed: u64,
    keep_replicates: bool,
) -> Result<CovarianceEstimate, BootstrapError> {
    if att.block_contributions.is_empty() {
        return Err(BootstrapError::NoBlockContributions);
    }
    if b < 2 {
        return Err(BootstrapError::TooFewReplicates(b));
    }
    let k = att.index.k();
    let replicates = resample_means(att, b, seed, StreamLabel::CovarianceBootstrap);
    let mut sigma = SymMat::covariance_of(&replicates, k);

    // Sample covariances are positive semidefinite up to rounding; floor any
    // negative eigenvalues and warn if they exceed tolerance.
    let (values, vectors) = sigma.jacobi_eigen();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut psd_repaired = false;
    if min < 0.0 {
        if min < -1e-8 * max.max(1.0) {
            psd_repaired = true;
            log::warn!(
                "bootstrap covariance had negative eigenvalue {min:.3e}; floored at zero"
            );
        }
        let floored: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
        sigma = SymMat::from_eigen(&floored, &vectors);
    }

    Ok(CovarianceEstimate {
        index: att.index.clone(),
        sigma,
        b,
        seed,
        generator: GENERATOR_ID.to_string(),
        psd_repaired,
        replicates: if keep_replicates { Some(replicates) } else { None },
    })
}
