//! Distributional objects for the final MLE under a fixed first stage.
//!
//! With the first-stage sample size held fixed and only the second stage
//! growing, the centered and scaled final estimator converges to the Gaussian
//! mixture `sigma * M(xi2*, theta_t)^{-1/2} Z`, where `xi2*` is the random
//! second-stage design chosen from the interim estimate and `Z` is an
//! independent standard normal vector. Its variance is
//! `sigma^2 * E[M(xi2*, theta_t)^{-1}]` — the expectation of the inverse, not
//! the inverse of the expected information, and the gap between the two is
//! positive semidefinite. The expectation over first-stage data has no closed
//! form, so it is estimated by Monte Carlo with reported standard errors.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::accum::CompensatedSum;
use crate::design::{
    apportion, d_optimal_emax, fisher_matrix, gradient_outer_sum, Design, ExactDesign,
    FisherMatrix,
};
use crate::error::{Error, Result};
use crate::estimation::{fit_mle, simulate_stage_means};
use crate::model::{DoseInterval, DoseResponseModel, Emax, ModelParams, Theta2Bounds};
use crate::rng::{derive_rng, tag};

/// Relative eigenvalue floor below which a matrix counts as singular.
const EIG_FLOOR: f64 = 1e-12;
/// A run fails when more than this fraction of draws was singular.
const MAX_SINGULAR_RATE: f64 = 1e-3;
const MAX_RESAMPLE_ATTEMPTS: u64 = 64;

/// Symmetric inverse square root via eigendecomposition: for
/// `M = Q L Q^T` returns `Q L^{-1/2} Q^T`, so that `R M R = I`.
pub fn sym_inverse_sqrt(m: &FisherMatrix) -> Result<Matrix3<f64>> {
    let eig = m.entries().symmetric_eigen();
    let floor = EIG_FLOOR * m.trace().abs().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.min() <= floor {
        return Err(Error::singular(format!(
            "matrix not positive definite (min eigenvalue {:e}, floor {floor:e})",
            eig.eigenvalues.min()
        )));
    }
    let inv_sqrt = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let r = eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    Ok((r + r.transpose()) * 0.5)
}

/// Realized per-subject information of a two-stage experiment:
/// `(1/(n sigma^2)) * [sum_m n1m g g^T + sum_m n2m g g^T]`, with the
/// second-stage counts obtained by apportioning `xi2` to `n2` subjects.
pub fn per_subject_information(
    stage1: &ExactDesign,
    xi2: &Design,
    n2: usize,
    theta: &ModelParams,
    sigma: f64,
    model: &impl DoseResponseModel,
) -> Result<FisherMatrix> {
    let n1 = stage1.total();
    let n = n1 + n2;
    if n == 0 {
        return Err(Error::invalid("per-subject information needs n > 0"));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let counts1: Vec<f64> = stage1.counts().iter().map(|&c| c as f64).collect();
    let s1 = gradient_outer_sum(stage1.points(), &counts1, theta, model)?;
    let stage2 = apportion(xi2, n2);
    let counts2: Vec<f64> = stage2.counts().iter().map(|&c| c as f64).collect();
    let s2 = gradient_outer_sum(stage2.points(), &counts2, theta, model)?;
    FisherMatrix::from_matrix((s1 + s2) / (n as f64 * sigma * sigma))
}

/// Sampler for the limit law of the final MLE: a fresh first stage is
/// simulated per draw, the interim estimate picks the second-stage D-optimal
/// design, and the draw is `sigma * M(xi2*, theta_true)^{-1/2} Z`.
#[derive(Debug, Clone)]
pub struct MixtureLawSampler {
    pub theta_true: ModelParams,
    pub sigma: f64,
    pub stage1_design: ExactDesign,
    pub dose_interval: DoseInterval,
    pub bounds: Theta2Bounds,
    /// First-stage noise level; defaults to `sigma`. Setting it near zero
    /// collapses the mixture onto the design at the true parameter.
    pub stage1_sigma: Option<f64>,
}

impl MixtureLawSampler {
    pub fn new(
        theta_true: ModelParams,
        sigma: f64,
        stage1_design: ExactDesign,
        dose_interval: DoseInterval,
    ) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        if stage1_design.total() == 0 {
            return Err(Error::invalid("first-stage design must allocate subjects"));
        }
        Ok(Self {
            theta_true,
            sigma,
            stage1_design,
            dose_interval,
            bounds: Theta2Bounds::default(),
            stage1_sigma: None,
        })
    }

    pub fn n1(&self) -> usize {
        self.stage1_design.total()
    }

    fn stage1_noise(&self) -> f64 {
        self.stage1_sigma.unwrap_or(self.sigma)
    }

    /// Simulates one first stage and returns the information matrix of the
    /// resulting second-stage design at the true parameter, resampling (and
    /// counting) draws whose information is numerically singular.
    fn draw_information(&self, master_seed: u64, draw: u64) -> Result<(FisherMatrix, u64, u64)> {
        let model = Emax;
        for attempt in 0..MAX_RESAMPLE_ATTEMPTS {
            let mut rng = derive_rng(master_seed, &[tag::LIMIT_LAW_STAGE1, draw, attempt]);
            let stage1 = simulate_stage_means(
                &self.stage1_design,
                &self.theta_true,
                self.stage1_noise(),
                &mut rng,
                &model,
            )?;
            let interim = fit_mle(&stage1.pooled(), &self.bounds, false)?;
            let xi2 = d_optimal_emax(interim.theta_hat.theta2, &self.dose_interval)?;
            let info = fisher_matrix(&xi2, &self.theta_true, &model)?;
            let floor = EIG_FLOOR * info.trace().abs().max(f64::MIN_POSITIVE);
            if info.min_eigenvalue() > floor {
                return Ok((info, attempt, attempt));
            }
        }
        Err(Error::singular(format!(
            "draw {draw}: information singular after {MAX_RESAMPLE_ATTEMPTS} resampling attempts"
        )))
    }
}

/// Draws from [`MixtureLawSampler`] plus the number of singular information
/// matrices that had to be resampled.
#[derive(Debug, Clone)]
pub struct LimitLawSample {
    pub draws: Vec<Vector3<f64>>,
    pub singular_draws: u64,
}

impl LimitLawSample {
    pub fn empirical_mean(&self) -> Vector3<f64> {
        let n = self.draws.len() as f64;
        let mut acc = [CompensatedSum::default(); 3];
        for d in &self.draws {
            for j in 0..3 {
                acc[j].add(d[j]);
            }
        }
        Vector3::new(acc[0].value() / n, acc[1].value() / n, acc[2].value() / n)
    }

    pub fn empirical_covariance(&self) -> Matrix3<f64> {
        let n = self.draws.len() as f64;
        let mean = self.empirical_mean();
        let mut acc = [[CompensatedSum::default(); 3]; 3];
        for d in &self.draws {
            let c = d - mean;
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j].add(c[i] * c[j]);
                }
            }
        }
        Matrix3::from_fn(|i, j| acc[i][j].value() / n)
    }
}

/// Independent draws `sigma * M(xi2*, theta_true)^{-1/2} Z` from the mixture
/// limit law. Deterministic for a given master seed regardless of thread
/// count.
pub fn sample_limit_law(
    sampler: &MixtureLawSampler,
    n_draws: usize,
    master_seed: u64,
) -> Result<LimitLawSample> {
    if n_draws == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    let per_draw: Vec<(Vector3<f64>, u64)> = (0..n_draws as u64)
        .into_par_iter()
        .map(|i| {
            let (info, attempt, singular) = sampler.draw_information(master_seed, i)?;
            let root = sym_inverse_sqrt(&info)?;
            let mut rng_z = derive_rng(master_seed, &[tag::LIMIT_LAW_NORMAL, i, attempt]);
            let z = Vector3::new(
                rng_z.sample::<f64, _>(StandardNormal),
                rng_z.sample::<f64, _>(StandardNormal),
                rng_z.sample::<f64, _>(StandardNormal),
            );
            Ok((root * z * sampler.sigma, singular))
        })
        .collect::<Result<_>>()?;
    let singular_draws: u64 = per_draw.iter().map(|(_, s)| s).sum();
    check_singular_rate(singular_draws, n_draws)?;
    Ok(LimitLawSample {
        draws: per_draw.into_iter().map(|(d, _)| d).collect(),
        singular_draws,
    })
}

/// Monte Carlo estimate of the limit-law variance and its plug-in companion.
#[derive(Debug, Clone)]
pub struct AsymptoticVariance {
    /// `sigma^2 * average of M^{-1}` over the sampled second-stage designs.
    pub mean_inverse: Matrix3<f64>,
    /// Per-entry Monte Carlo standard error of `mean_inverse`.
    pub standard_error: Matrix3<f64>,
    /// `sigma^2 * (average of M)^{-1}`, computed from the same draws.
    pub plugin_inverse: Matrix3<f64>,
    pub n_rep: usize,
    pub singular_draws: u64,
}

impl AsymptoticVariance {
    /// `mean_inverse - plugin_inverse`; positive semidefinite by convexity of
    /// the matrix inverse over the sampled draws.
    pub fn jensen_gap(&self) -> Matrix3<f64> {
        self.mean_inverse - self.plugin_inverse
    }
}

/// Averages `sigma^2 M(xi2*(theta_hat), theta_true)^{-1}` over `n_rep`
/// simulated first stages.
pub fn asymptotic_variance(
    sampler: &MixtureLawSampler,
    n_rep: usize,
    master_seed: u64,
) -> Result<AsymptoticVariance> {
    if n_rep == 0 {
        return Err(Error::invalid("need at least one replication"));
    }
    let draws: Vec<(Matrix3<f64>, Matrix3<f64>, u64)> = (0..n_rep as u64)
        .into_par_iter()
        .map(|i| {
            let (info, _, singular) = sampler.draw_information(master_seed, i)?;
            let inv = info.inverse()?;
            Ok((*info.entries(), inv, singular))
        })
        .collect::<Result<_>>()?;
    let singular_draws: u64 = draws.iter().map(|(_, _, s)| s).sum();
    check_singular_rate(singular_draws, n_rep)?;

    let n = n_rep as f64;
    let s2 = sampler.sigma * sampler.sigma;
    let mut sum_m = [[CompensatedSum::default(); 3]; 3];
    let mut sum_inv = [[CompensatedSum::default(); 3]; 3];
    let mut sum_inv_sq = [[CompensatedSum::default(); 3]; 3];
    for (m, inv, _) in &draws {
        for i in 0..3 {
            for j in 0..3 {
                sum_m[i][j].add(m[(i, j)]);
                sum_inv[i][j].add(inv[(i, j)]);
                sum_inv_sq[i][j].add(inv[(i, j)] * inv[(i, j)]);
            }
        }
    }
    let mean_m = Matrix3::from_fn(|i, j| sum_m[i][j].value() / n);
    let mean_inv = Matrix3::from_fn(|i, j| sum_inv[i][j].value() / n);
    let se = Matrix3::from_fn(|i, j| {
        let mean = sum_inv[i][j].value() / n;
        let var = (sum_inv_sq[i][j].value() / n - mean * mean).max(0.0);
        s2 * (var / n).sqrt()
    });
    let plugin = mean_m
        .try_inverse()
        .ok_or_else(|| Error::singular("average information matrix not invertible".to_string()))?;
    Ok(AsymptoticVariance {
        mean_inverse: mean_inv * s2,
        standard_error: se,
        plugin_inverse: plugin * s2,
        n_rep,
        singular_draws,
    })
}

fn check_singular_rate(singular: u64, draws: usize) -> Result<()> {
    if singular as f64 > MAX_SINGULAR_RATE * draws as f64 {
        return Err(Error::singular(format!(
            "{singular} of {draws} draws had singular information (limit {:.1}%)",
            MAX_SINGULAR_RATE * 100.0
        )));
    }
    Ok(())
}
