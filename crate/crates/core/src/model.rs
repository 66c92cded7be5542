//! Static estimation problem: sensing matrices, noise covariances, the true
//! parameter, and the centralized quantities the distributed estimator is
//! benchmarked against.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{psd_factor, spd_inverse, sym_eigenvalues};
use crate::scalar::Scalar;

/// Relative eigenvalue threshold below which the normalized Grammian is
/// treated as singular.
pub const OBSERVABILITY_RCOND: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model has no agents")]
    NoAgents,
    #[error("agent {agent}: {what}")]
    DimensionMismatch { agent: usize, what: String },
    #[error("agent {agent}: noise covariance is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { agent: usize, min_eigenvalue: f64 },
    #[error("model is not globally observable: smallest eigenvalue of the normalized Grammian is {min_eigenvalue:e} (largest {max_eigenvalue:e})")]
    NotGloballyObservable {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },
    #[error("agent index {0} out of range")]
    AgentOutOfRange(usize),
}

/// Distribution family of the observation noise. Both are scaled to have
/// exactly the configured covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    /// Independent unit-variance Laplace coordinates mixed by the covariance
    /// factor.
    Laplace,
}

/// Per-agent linear observation model `yₙ = Hₙ θ* + ζₙ`, `ζₙ ~ (0, Rₙ)`.
#[derive(Debug, Clone)]
pub struct ObservationModel<T: Scalar> {
    sensing: Vec<DMatrix<T>>,
    noise_cov: Vec<DMatrix<T>>,
    true_param: DVector<T>,
    noise: NoiseFamily,
    // Derived at construction.
    noise_factor: Vec<DMatrix<T>>,
    clean_obs: Vec<DVector<T>>,
}

impl<T: Scalar> ObservationModel<T> {
    /// Builds a model after checking dimensional consistency. Positive
    /// definiteness and observability are checked by [`Self::validate`].
    pub fn new(
        sensing: Vec<DMatrix<T>>,
        noise_cov: Vec<DMatrix<T>>,
        true_param: DVector<T>,
    ) -> Result<Self, ModelError> {
        if sensing.is_empty() {
            return Err(ModelError::NoAgents);
        }
        if sensing.len() != noise_cov.len() {
            return Err(ModelError::DimensionMismatch {
                agent: sensing.len().min(noise_cov.len()),
                what: format!(
                    "{} sensing matrices but {} noise covariances",
                    sensing.len(),
                    noise_cov.len()
                ),
            });
        }
        let m = true_param.len();
        for (n, (h, r)) in sensing.iter().zip(&noise_cov).enumerate() {
            if h.ncols() != m {
                return Err(ModelError::DimensionMismatch {
                    agent: n,
                    what: format!("sensing matrix has {} columns, parameter has {}", h.ncols(), m),
                });
            }
            if h.nrows() == 0 {
                return Err(ModelError::DimensionMismatch {
                    agent: n,
                    what: "sensing matrix has no rows".into(),
                });
            }
            if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
                return Err(ModelError::DimensionMismatch {
                    agent: n,
                    what: format!(
                        "noise covariance is {}x{}, expected {}x{}",
                        r.nrows(),
                        r.ncols(),
                        h.nrows(),
                        h.nrows()
                    ),
                });
            }
        }
        let noise_factor = noise_cov.iter().map(psd_factor).collect();
        let clean_obs = sensing.iter().map(|h| h * &true_param).collect();
        Ok(Self {
            sensing,
            noise_cov,
            true_param,
            noise: NoiseFamily::Gaussian,
            noise_factor,
            clean_obs,
        })
    }

    pub fn with_noise(mut self, noise: NoiseFamily) -> Self {
        self.noise = noise;
        self
    }

    /// Five agents on a ring, each observing the sum of its own and its two
    /// cyclic neighbours' parameter components with unit noise variance.
    pub fn example1(true_param: DVector<T>) -> Result<Self, ModelError> {
        let n = 5;
        let sensing = (0..n)
            .map(|a| {
                let mut h = DMatrix::zeros(1, n);
                for off in [n - 1, 0, 1] {
                    h[(0, (a + off) % n)] = T::one();
                }
                h
            })
            .collect();
        let noise_cov = (0..n).map(|_| DMatrix::identity(1, 1)).collect();
        Self::new(sensing, noise_cov, true_param)
    }

    pub fn num_agents(&self) -> usize {
        self.sensing.len()
    }

    pub fn param_dim(&self) -> usize {
        self.true_param.len()
    }

    pub fn obs_dim(&self, agent: usize) -> usize {
        self.sensing[agent].nrows()
    }

    pub fn sensing(&self) -> &[DMatrix<T>] {
        &self.sensing
    }

    pub fn noise_cov(&self) -> &[DMatrix<T>] {
        &self.noise_cov
    }

    pub fn true_param(&self) -> &DVector<T> {
        &self.true_param
    }

    pub fn noise_family(&self) -> NoiseFamily {
        self.noise
    }

    /// Checks positive definiteness of every `Rₙ` and global observability,
    /// returning the centralized summary.
    pub fn validate(&self) -> Result<CentralizedSummary<T>, ModelError> {
        let m = self.param_dim();
        let n_agents = T::lit(self.num_agents() as f64);
        let mut grammian_norm = DMatrix::zeros(m, m);
        let mut weighted_ht = Vec::with_capacity(self.num_agents());
        for (n, (h, r)) in self.sensing.iter().zip(&self.noise_cov).enumerate() {
            let eig = sym_eigenvalues(r);
            let min_eig = eig.first().copied().unwrap_or_else(T::zero);
            let r_inv = match spd_inverse(r) {
                Some(inv) if min_eig > T::zero() => inv,
                _ => {
                    return Err(ModelError::NotPositiveDefinite {
                        agent: n,
                        min_eigenvalue: min_eig.to_f64_lossy(),
                    })
                }
            };
            let ht_rinv = h.transpose() * r_inv;
            grammian_norm += &ht_rinv * h;
            weighted_ht.push(ht_rinv);
        }
        grammian_norm /= n_agents;
        let grammian_norm = (&grammian_norm + grammian_norm.transpose()) * T::lit(0.5);

        let eig = sym_eigenvalues(&grammian_norm);
        let (lo, hi) = (eig[0], eig[m - 1]);
        let singular = hi <= T::zero() || lo < T::lit(OBSERVABILITY_RCOND) * hi;
        let norm_inv = match (singular, spd_inverse(&grammian_norm)) {
            (false, Some(inv)) => inv,
            _ => {
                return Err(ModelError::NotGloballyObservable {
                    min_eigenvalue: lo.to_f64_lossy(),
                    max_eigenvalue: hi.to_f64_lossy(),
                })
            }
        };
        let optimal_gains = weighted_ht.iter().map(|w| &norm_inv * w).collect();
        let grammian = &grammian_norm * n_agents;
        let asymptotic_cov = &norm_inv / n_agents;
        Ok(CentralizedSummary {
            grammian_norm,
            grammian,
            asymptotic_cov,
            optimal_gains,
        })
    }

    /// Draws `yₙ(t) = Hₙθ* + ζₙ(t)`.
    pub fn sample_observation<R: Rng + ?Sized>(
        &self,
        agent: usize,
        rng: &mut R,
    ) -> Result<DVector<T>, ModelError> {
        if agent >= self.num_agents() {
            return Err(ModelError::AgentOutOfRange(agent));
        }
        let mut out = self.clean_obs[agent].clone();
        self.add_noise(agent, rng, &mut out);
        Ok(out)
    }

    /// Writes a fresh observation for `agent` into `out` without allocating
    /// when `out` already has the right length.
    pub(crate) fn sample_observation_into<R: Rng + ?Sized>(
        &self,
        agent: usize,
        rng: &mut R,
        out: &mut DVector<T>,
    ) {
        out.copy_from(&self.clean_obs[agent]);
        self.add_noise(agent, rng, out);
    }

    fn add_noise<R: Rng + ?Sized>(&self, agent: usize, rng: &mut R, out: &mut DVector<T>) {
        let factor = &self.noise_factor[agent];
        let dim = factor.nrows();
        let mut white = [0.0f64; 8];
        let mut heap;
        let w: &mut [f64] = if dim <= white.len() {
            &mut white[..dim]
        } else {
            heap = vec![0.0; dim];
            &mut heap
        };
        for v in w.iter_mut() {
            *v = match self.noise {
                NoiseFamily::Gaussian => StandardNormal.sample(rng),
                NoiseFamily::Laplace => sample_unit_laplace(rng),
            };
        }
        for i in 0..dim {
            let mut acc = T::zero();
            for (j, wj) in w.iter().enumerate() {
                acc += factor[(i, j)] * T::lit(*wj);
            }
            out[i] += acc;
        }
    }
}

/// Unit-variance Laplace draw (scale 1/√2) by inversion.
fn sample_unit_laplace<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

/// Centralized benchmark quantities derived from a validated model.
#[derive(Debug, Clone)]
pub struct CentralizedSummary<T: Scalar> {
    /// `Σ̄_c = (1/N) Σ Hₙᵀ Rₙ⁻¹ Hₙ`.
    pub grammian_norm: DMatrix<T>,
    /// `Σ_c = N Σ̄_c`.
    pub grammian: DMatrix<T>,
    /// `Σ_c⁻¹`, the asymptotic covariance of the centralized estimator.
    pub asymptotic_cov: DMatrix<T>,
    /// `Kₙ = Σ̄_c⁻¹ Hₙᵀ Rₙ⁻¹`.
    pub optimal_gains: Vec<DMatrix<T>>,
}

/// Running per-agent observation sums for the batch least-squares
/// (BLUE) centralized estimator.
#[derive(Debug, Clone)]
pub struct CentralizedAccumulator<T: Scalar> {
    sums: Vec<DVector<T>>,
    count: usize,
}

impl<T: Scalar> CentralizedAccumulator<T> {
    pub fn new(model: &ObservationModel<T>) -> Self {
        Self {
            sums: (0..model.num_agents())
                .map(|n| DVector::zeros(model.obs_dim(n)))
                .collect(),
            count: 0,
        }
    }

    /// Records one synchronous round of observations (one per agent).
    pub fn push(&mut self, observations: &[DVector<T>]) {
        for (s, y) in self.sums.iter_mut().zip(observations) {
            *s += y;
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `x_c = Σ_c⁻¹ Σₙ Hₙᵀ Rₙ⁻¹ ȳₙ`, or `None` before any observation.
    pub fn estimate(&self, summary: &CentralizedSummary<T>) -> Option<DVector<T>> {
        if self.count == 0 {
            return None;
        }
        let m = summary.grammian.nrows();
        let n_agents = T::lit(self.sums.len() as f64);
        let inv_count = T::one() / T::lit(self.count as f64);
        let mut acc = DVector::zeros(m);
        for (k, s) in summary.optimal_gains.iter().zip(&self.sums) {
            acc += k * s;
        }
        Some(acc * (inv_count / n_agents))
    }
}

/// Centralized estimate from a full observation history, `history[s][n]`
/// being agent `n`'s observation at time `s`.
pub fn centralized_estimate<T: Scalar>(
    model: &ObservationModel<T>,
    history: &[Vec<DVector<T>>],
) -> Result<Option<DVector<T>>, ModelError> {
    let summary = model.validate()?;
    let mut acc = CentralizedAccumulator::new(model);
    for round in history {
        acc.push(round);
    }
    Ok(acc.estimate(&summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(m: usize) -> DVector<f64> {
        DVector::from_element(m, 1.0)
    }

    #[test]
    fn example1_sensing_rows() {
        let model = ObservationModel::example1(ones(5)).unwrap();
        // Agent 3 in one-based numbering.
        assert_eq!(
            model.sensing()[2].row(0).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 1.0, 1.0, 1.0, 0.0]
        );
        assert_eq!(
            model.sensing()[0].row(0).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn example1_is_observable_with_circulant_spectrum() {
        let model = ObservationModel::example1(ones(5)).unwrap();
        let s = model.validate().unwrap();
        // Oracle: eigenvalues of (1/5) CᵀC for the circulant C of (1,1,1,0,0)
        // are |1 + ω^k + ω^{-k}|² / 5 = (1 + 2cos(2πk/5))² / 5.
        let mut expected: Vec<f64> = (0..5)
            .map(|k| {
                let c = 1.0 + 2.0 * (2.0 * std::f64::consts::PI * k as f64 / 5.0).cos();
                c * c / 5.0
            })
            .collect();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let got = sym_eigenvalues(&s.grammian_norm);
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
        assert!(got[0] > 0.07);
    }

    #[test]
    fn identity_model_summary() {
        let m = 3;
        let model = ObservationModel::new(
            vec![DMatrix::identity(m, m)],
            vec![DMatrix::identity(m, m)],
            ones(m),
        )
        .unwrap();
        let s = model.validate().unwrap();
        let eye = DMatrix::<f64>::identity(m, m);
        assert!((&s.grammian_norm - &eye).abs().max() < 1e-15);
        assert!((&s.asymptotic_cov - &eye).abs().max() < 1e-15);
        assert!((&s.optimal_gains[0] - &eye).abs().max() < 1e-15);
    }

    #[test]
    fn rank_deficient_model_rejected() {
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let r = DMatrix::identity(1, 1);
        let model =
            ObservationModel::new(vec![h.clone(), h], vec![r.clone(), r], ones(2)).unwrap();
        match model.validate() {
            Err(ModelError::NotGloballyObservable { min_eigenvalue, .. }) => {
                assert!(min_eigenvalue.abs() < 1e-12)
            }
            other => panic!("expected NotGloballyObservable, got {other:?}"),
        }
    }

    #[test]
    fn indefinite_noise_rejected() {
        let model = ObservationModel::new(
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            vec![
                DMatrix::identity(2, 2),
                DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            ],
            ones(2),
        )
        .unwrap();
        assert!(matches!(
            model.validate(),
            Err(ModelError::NotPositiveDefinite { agent: 1, .. })
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = ObservationModel::new(
            vec![DMatrix::<f64>::identity(2, 3)],
            vec![DMatrix::identity(3, 3)],
            ones(3),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { agent: 0, .. }));
    }

    #[test]
    fn optimal_gains_average_to_identity() {
        let model = ObservationModel::example1(ones(5)).unwrap();
        let s = model.validate().unwrap();
        let mut acc = DMatrix::<f64>::zeros(5, 5);
        for (k, h) in s.optimal_gains.iter().zip(model.sensing()) {
            acc += k * h;
        }
        acc /= 5.0;
        assert!((acc - DMatrix::identity(5, 5)).abs().max() < 1e-10);
        let prod = &s.asymptotic_cov * &s.grammian;
        assert!((prod - DMatrix::identity(5, 5)).abs().max() < 1e-10);
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let mut model = ObservationModel::example1(ones(5)).unwrap();
        model = ObservationModel::new(
            model.sensing().to_vec(),
            vec![DMatrix::zeros(1, 1); 5],
            ones(5),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = model.sample_observation(2, &mut rng).unwrap();
        assert_eq!(y[0], 3.0);
    }

    #[test]
    fn observation_mean_converges() {
        let model = ObservationModel::example1(ones(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| model.sample_observation(2, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 3.0).abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn laplace_noise_has_configured_variance() {
        let model = ObservationModel::new(
            vec![DMatrix::identity(2, 2)],
            vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])],
            DVector::zeros(2),
        )
        .unwrap()
        .with_noise(NoiseFamily::Laplace);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let y = model.sample_observation(0, &mut rng).unwrap();
            cov += &y * y.transpose();
        }
        cov /= n as f64;
        let target = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((cov - target).abs().max() < 0.05);
    }

    #[test]
    fn sampling_is_reproducible() {
        let model = ObservationModel::example1(ones(5)).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|i| model.sample_observation(i % 5, &mut rng).unwrap()[0].to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn out_of_range_agent() {
        let model = ObservationModel::example1(ones(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            model.sample_observation(5, &mut rng).unwrap_err(),
            ModelError::AgentOutOfRange(5)
        );
    }

    #[test]
    fn noiseless_centralized_estimate_is_exact() {
        let truth = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0, 3.0]);
        let base = ObservationModel::example1(truth.clone()).unwrap();
        let summary = base.validate().unwrap();
        let clean = ObservationModel::new(
            base.sensing().to_vec(),
            vec![DMatrix::zeros(1, 1); 5],
            truth.clone(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = CentralizedAccumulator::new(&clean);
        for _ in 0..4 {
            let round: Vec<_> = (0..5)
                .map(|n| clean.sample_observation(n, &mut rng).unwrap())
                .collect();
            acc.push(&round);
            let x = acc.estimate(&summary).unwrap();
            assert!((x - &truth).abs().max() < 1e-12);
        }
    }

    #[test]
    fn single_identity_agent_estimate_is_running_mean() {
        let model = ObservationModel::new(
            vec![DMatrix::identity(2, 2)],
            vec![DMatrix::identity(2, 2)],
            DVector::zeros(2),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let history: Vec<Vec<DVector<f64>>> = (0..50)
            .map(|_| vec![model.sample_observation(0, &mut rng).unwrap()])
            .collect();
        let mean = history.iter().fold(DVector::zeros(2), |a, r| a + &r[0]) / 50.0;
        let x = centralized_estimate(&model, &history).unwrap().unwrap();
        assert!((x - mean).abs().max() < 1e-14);
    }

    #[test]
    fn grammian_invariant_under_agent_permutation() {
        let base = ObservationModel::example1(ones(5)).unwrap();
        let s0 = base.validate().unwrap();
        let perm = [3, 0, 4, 1, 2];
        let model = ObservationModel::new(
            perm.iter().map(|&i| base.sensing()[i].clone()).collect(),
            perm.iter().map(|&i| base.noise_cov()[i].clone()).collect(),
            ones(5),
        )
        .unwrap();
        let s1 = model.validate().unwrap();
        assert!((s0.grammian_norm - s1.grammian_norm).abs().max() < 1e-12);
    }
}
