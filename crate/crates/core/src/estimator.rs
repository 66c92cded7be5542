//! Consensus+innovation estimator with online gain learning.
//!
//! Each agent `n` keeps an estimate `xₙ(t)`, a Grammian estimate `Gₙ(t)` and a
//! sample covariance `Qₙ(t)` of its own observations. At every step the
//! agents exchange `xₙ` and `Gₙ` over the currently active links and update
//!
//! ```text
//! Kₙ(t)   = (Gₙ(t) + γ_t I)⁻¹ Hₙᵀ (Qₙ(t) + γ_t I)⁻¹
//! Gₙ(t+1) = Gₙ(t) − β_t Σ_{l∈Ωₙ(t)} (Gₙ(t) − G_l(t)) + α_t (Hₙᵀ(Qₙ(t)+γ_t I)⁻¹Hₙ − Gₙ(t))
//! xₙ(t+1) = xₙ(t) − β_t Σ_{l∈Ωₙ(t)} (xₙ(t) − x_l(t)) + α_t Kₙ(t) (yₙ(t) − Hₙ xₙ(t))
//! ```
//!
//! All right-hand sides use time-`t` quantities: `Qₙ(t)` covers the
//! observations strictly before `t`, and the new observation `yₙ(t)` is
//! folded into the covariance only after the estimate update.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::linalg::{asymmetry, spectral_norm};
use crate::model::{CentralizedSummary, ObservationModel};
use crate::network::{Laplacian, TopologyModel};
use crate::schedule::WeightSchedule;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("agent {agent}: expected {expected} entries, got {got}")]
    DimensionMismatch {
        agent: usize,
        expected: usize,
        got: usize,
    },
    #[error("regularizer gamma must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("agent {agent}: regularized Grammian is singular at step {step}")]
    SingularGrammian { agent: usize, step: u64 },
    #[error("agent {agent}: non-finite state at step {step}")]
    NonFinite { agent: usize, step: u64 },
}

/// Local state of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState<T: Scalar> {
    pub estimate: DVector<T>,
    pub grammian_est: DMatrix<T>,
    pub sample_cov: DMatrix<T>,
    pub obs_sum: DVector<T>,
    pub obs_outer_sum: DMatrix<T>,
    pub samples_seen: u64,
}

impl<T: Scalar> AgentState<T> {
    /// Zero estimate, zero Grammian and zero covariance.
    pub fn zeros(param_dim: usize, obs_dim: usize) -> Self {
        Self {
            estimate: DVector::zeros(param_dim),
            grammian_est: DMatrix::zeros(param_dim, param_dim),
            sample_cov: DMatrix::zeros(obs_dim, obs_dim),
            obs_sum: DVector::zeros(obs_dim),
            obs_outer_sum: DMatrix::zeros(obs_dim, obs_dim),
            samples_seen: 0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_sum.len()
    }

    /// Folds one observation into the running moments and recomputes
    /// `Qₙ = (1/k) Σ y yᵀ − ȳ ȳᵀ` over the `k` samples seen so far.
    pub fn update_sample_covariance(
        &mut self,
        agent: usize,
        y: &DVector<T>,
    ) -> Result<(), EstimatorError> {
        if y.len() != self.obs_dim() {
            return Err(EstimatorError::DimensionMismatch {
                agent,
                expected: self.obs_dim(),
                got: y.len(),
            });
        }
        self.obs_sum += y;
        self.obs_outer_sum.ger(T::one(), y, y, T::one());
        self.samples_seen += 1;
        let inv_k = T::one() / T::lit(self.samples_seen as f64);
        self.sample_cov.copy_from(&self.obs_outer_sum);
        self.sample_cov *= inv_k;
        let mean = &self.obs_sum * inv_k;
        self.sample_cov.ger(-T::one(), &mean, &mean, T::one());
        Ok(())
    }
}

/// Whole-network state.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T: Scalar> {
    pub agents: Vec<AgentState<T>>,
    pub step: u64,
}

impl<T: Scalar> NetworkState<T> {
    pub fn zeros(model: &ObservationModel<T>) -> Self {
        Self {
            agents: (0..model.num_agents())
                .map(|n| AgentState::zeros(model.param_dim(), model.obs_dim(n)))
                .collect(),
            step: 0,
        }
    }

    /// `(1/N) Σ Gₙ`.
    pub fn grammian_average(&self) -> DMatrix<T> {
        let mut acc = self.agents[0].grammian_est.clone();
        for a in &self.agents[1..] {
            acc += &a.grammian_est;
        }
        acc / T::lit(self.agents.len() as f64)
    }

    /// `(1/N) Σ xₙ`.
    pub fn estimate_average(&self) -> DVector<T> {
        let mut acc = self.agents[0].estimate.clone();
        for a in &self.agents[1..] {
            acc += &a.estimate;
        }
        acc / T::lit(self.agents.len() as f64)
    }

    /// Largest `‖xₙ − x_l‖` over all agent pairs.
    pub fn max_disagreement(&self) -> T {
        let mut worst = T::zero();
        for (i, a) in self.agents.iter().enumerate() {
            for b in &self.agents[i + 1..] {
                let d = (&a.estimate - &b.estimate).norm();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    pub fn error_norms(&self, truth: &DVector<T>) -> Vec<T> {
        self.agents
            .iter()
            .map(|a| (&a.estimate - truth).norm())
            .collect()
    }
}

/// Innovation gains `Kₙ(t)` of all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet<T: Scalar> {
    pub gains: Vec<DMatrix<T>>,
}

impl<T: Scalar> GainSet<T> {
    /// `maxₙ ‖Kₙ(t) − Kₙ‖₂` against the optimal gains.
    pub fn max_distance(&self, optimal: &[DMatrix<T>]) -> T {
        self.gains
            .iter()
            .zip(optimal)
            .map(|(k, o)| spectral_norm(&(k - o)))
            .fold(T::zero(), |a, b| a.max(b))
    }
}

/// Solves `m X = rhs` for symmetric `m`, preferring Cholesky and falling back
/// to LU when `m` has lost definiteness.
fn solve_symmetric<T: Scalar>(m: DMatrix<T>, rhs: &DMatrix<T>) -> Option<DMatrix<T>> {
    match m.clone().cholesky() {
        Some(c) => Some(c.solve(rhs)),
        None => m.lu().solve(rhs),
    }
}

/// `Hᵀ (Q + γI)⁻¹`.
fn weighted_sensing_t<T: Scalar>(
    sample_cov: &DMatrix<T>,
    sensing: &DMatrix<T>,
    gamma: T,
) -> DMatrix<T> {
    let reg = sample_cov.map_diagonal_add(gamma);
    // Q is PSD, so Q + γI is SPD.
    let w = solve_symmetric(reg, &sensing.clone())
        .expect("regularized sample covariance is positive definite");
    w.transpose()
}

trait DiagAdd<T> {
    fn map_diagonal_add(&self, v: T) -> Self;
}

impl<T: Scalar> DiagAdd<T> for DMatrix<T> {
    fn map_diagonal_add(&self, v: T) -> Self {
        let mut m = self.clone();
        for i in 0..m.nrows().min(m.ncols()) {
            m[(i, i)] += v;
        }
        m
    }
}

/// `Kₙ(t) = (Gₙ + γI)⁻¹ Hₙᵀ (Qₙ + γI)⁻¹`.
pub fn compute_gain<T: Scalar>(
    grammian_est: &DMatrix<T>,
    sample_cov: &DMatrix<T>,
    sensing: &DMatrix<T>,
    gamma: T,
) -> Result<DMatrix<T>, EstimatorError> {
    if !(gamma > T::zero()) {
        return Err(EstimatorError::NonPositiveGamma(gamma.to_f64_lossy()));
    }
    let ht_w = weighted_sensing_t(sample_cov, sensing, gamma);
    solve_symmetric(grammian_est.map_diagonal_add(gamma), &ht_w).ok_or(
        EstimatorError::SingularGrammian { agent: 0, step: 0 },
    )
}

/// `Hₙᵀ (Qₙ + γI)⁻¹ Hₙ`, the local innovation target of the Grammian.
pub fn local_grammian_target<T: Scalar>(
    sample_cov: &DMatrix<T>,
    sensing: &DMatrix<T>,
    gamma: T,
) -> DMatrix<T> {
    let m = weighted_sensing_t(sample_cov, sensing, gamma) * sensing;
    (&m + m.transpose()) * T::lit(0.5)
}

/// Consensus residual `Σ_{l∈Ωₙ} (vₙ − v_l)` for every agent, for any vector
/// space element type.
fn laplacian_apply<V>(values: &[V], lap: &Laplacian, zero: impl Fn(&V) -> V) -> Vec<V>
where
    V: Clone + for<'a> std::ops::AddAssign<&'a V> + for<'a> std::ops::SubAssign<&'a V>,
    for<'a> &'a V: std::ops::Sub<&'a V, Output = V>,
{
    let mut out: Vec<V> = values.iter().map(&zero).collect();
    for &(a, b) in lap.active_edges() {
        let d = &values[a] - &values[b];
        out[a] += &d;
        out[b] -= &d;
    }
    out
}

/// Distributed Grammian update for all agents, returning `Gₙ(t+1)` and the
/// local targets `Dₙ(t)` used.
pub fn update_grammian<T: Scalar>(
    grammians: &[DMatrix<T>],
    targets: &[DMatrix<T>],
    lap: &Laplacian,
    alpha: T,
    beta: T,
) -> Vec<DMatrix<T>> {
    let residual = laplacian_apply(grammians, lap, |g| DMatrix::zeros(g.nrows(), g.ncols()));
    grammians
        .iter()
        .zip(targets)
        .zip(residual)
        .map(|((g, d), r)| {
            let mut next = g - r * beta;
            next += (d - g) * alpha;
            next
        })
        .collect()
}

/// Estimate update for all agents from the time-`t` snapshot.
pub fn update_estimates<T: Scalar>(
    estimates: &[DVector<T>],
    lap: &Laplacian,
    gains: &GainSet<T>,
    observations: &[DVector<T>],
    sensing: &[DMatrix<T>],
    alpha: T,
    beta: T,
) -> Vec<DVector<T>> {
    let residual = laplacian_apply(estimates, lap, |x| DVector::zeros(x.len()));
    estimates
        .iter()
        .enumerate()
        .zip(residual)
        .map(|((n, x), r)| {
            let innovation = &observations[n] - &sensing[n] * x;
            let mut next = x - r * beta;
            next += &gains.gains[n] * innovation * alpha;
            next
        })
        .collect()
}

/// Per-step bookkeeping returned by [`Simulator::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo<T> {
    pub t: u64,
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
    pub active_links: usize,
}

/// Diagnostics of the current state against the centralized benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics<T> {
    pub step: u64,
    pub max_disagreement: T,
    pub error_norms: Vec<T>,
    /// `maxₙ ‖Kₙ(t−1) − Kₙ‖₂` for the gains used in the last step.
    pub gain_gap: T,
    /// `‖G_avg(t) − Σ̄_c‖₂`.
    pub grammian_gap: T,
}

/// Owns a network state and advances it one synchronous round at a time.
#[derive(Debug, Clone)]
pub struct Simulator<'a, T: Scalar> {
    model: &'a ObservationModel<T>,
    topology: &'a TopologyModel,
    schedule: WeightSchedule<T>,
    state: NetworkState<T>,
    lap: Laplacian,
    observations: Vec<DVector<T>>,
    gains: GainSet<T>,
    targets: Vec<DMatrix<T>>,
    work: Workspace<T>,
}

/// Scratch buffers reused across steps.
#[derive(Debug, Clone)]
struct Workspace<T: Scalar> {
    reg_q: Vec<DMatrix<T>>,
    z: Vec<DMatrix<T>>,
    reg_g: DMatrix<T>,
    next_g: Vec<DMatrix<T>>,
    next_x: Vec<DVector<T>>,
    innov: Vec<DVector<T>>,
}

impl<T: Scalar> Workspace<T> {
    fn new(model: &ObservationModel<T>) -> Self {
        let m = model.param_dim();
        let n = model.num_agents();
        Self {
            reg_q: (0..n)
                .map(|a| DMatrix::zeros(model.obs_dim(a), model.obs_dim(a)))
                .collect(),
            z: (0..n).map(|a| DMatrix::zeros(model.obs_dim(a), m)).collect(),
            reg_g: DMatrix::zeros(m, m),
            next_g: (0..n).map(|_| DMatrix::zeros(m, m)).collect(),
            next_x: (0..n).map(|_| DVector::zeros(m)).collect(),
            innov: (0..n).map(|a| DVector::zeros(model.obs_dim(a))).collect(),
        }
    }
}

fn add_diagonal<T: Scalar>(m: &mut DMatrix<T>, v: T) {
    for i in 0..m.nrows().min(m.ncols()) {
        m[(i, i)] += v;
    }
}

/// Overwrites the lower triangle of `a` with its Cholesky factor. Returns
/// `false` when `a` is not numerically positive definite.
fn cholesky_in_place<T: Scalar>(a: &mut DMatrix<T>) -> bool {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if !(d > T::zero()) {
            return false;
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = s / d;
        }
    }
    true
}

/// Solves `L Lᵀ X = B` in place, with `L` the lower triangle of `l`.
fn cholesky_solve_in_place<T: Scalar>(l: &DMatrix<T>, b: &mut DMatrix<T>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = b[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
    }
}

impl<'a, T: Scalar> Simulator<'a, T> {
    pub fn new(
        model: &'a ObservationModel<T>,
        topology: &'a TopologyModel,
        schedule: WeightSchedule<T>,
    ) -> Self {
        Self::with_state(model, topology, schedule, NetworkState::zeros(model))
    }

    pub fn with_state(
        model: &'a ObservationModel<T>,
        topology: &'a TopologyModel,
        schedule: WeightSchedule<T>,
        state: NetworkState<T>,
    ) -> Self {
        let m = model.param_dim();
        let n = model.num_agents();
        Self {
            model,
            topology,
            schedule,
            state,
            lap: crate::network::laplacian_of(&crate::network::Graph::new(n, &[]).unwrap()),
            observations: (0..n).map(|a| DVector::zeros(model.obs_dim(a))).collect(),
            gains: GainSet {
                gains: (0..n).map(|a| DMatrix::zeros(m, model.obs_dim(a))).collect(),
            },
            targets: (0..n).map(|_| DMatrix::zeros(m, m)).collect(),
            work: Workspace::new(model),
        }
    }

    pub fn state(&self) -> &NetworkState<T> {
        &self.state
    }

    pub fn into_state(self) -> NetworkState<T> {
        self.state
    }

    pub fn schedule(&self) -> &WeightSchedule<T> {
        &self.schedule
    }

    /// Observations drawn in the last step.
    pub fn last_observations(&self) -> &[DVector<T>] {
        &self.observations
    }

    /// Laplacian sampled in the last step.
    pub fn last_laplacian(&self) -> &Laplacian {
        &self.lap
    }

    /// Gains `Kₙ(t)` applied in the last step.
    pub fn last_gains(&self) -> &GainSet<T> {
        &self.gains
    }

    /// Local Grammian targets `Dₙ(t)` used in the last step.
    pub fn last_targets(&self) -> &[DMatrix<T>] {
        &self.targets
    }

    /// One synchronous round: draw `L_t` and `yₙ(t)`, then apply the gain,
    /// Grammian and estimate updates and finally fold `yₙ(t)` into `Qₙ`.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<StepInfo<T>, EstimatorError> {
        let t = self.state.step;
        self.topology.sample_into(rng, &mut self.lap);
        for (n, y) in self.observations.iter_mut().enumerate() {
            self.model.sample_observation_into(n, rng, y);
        }
        self.advance(t)
    }

    /// Same as [`Self::step`] with externally supplied `L_t` and observations.
    pub fn step_with(
        &mut self,
        lap: &Laplacian,
        observations: &[DVector<T>],
    ) -> Result<StepInfo<T>, EstimatorError> {
        for (n, (dst, src)) in self.observations.iter_mut().zip(observations).enumerate() {
            if dst.len() != src.len() {
                return Err(EstimatorError::DimensionMismatch {
                    agent: n,
                    expected: dst.len(),
                    got: src.len(),
                });
            }
            dst.copy_from(src);
        }
        self.lap = lap.clone();
        self.advance(self.state.step)
    }

    fn advance(&mut self, t: u64) -> Result<StepInfo<T>, EstimatorError> {
        let alpha = self.schedule.alpha(t);
        let beta = self.schedule.beta(t);
        let gamma = self.schedule.gamma(t);
        let sensing = self.model.sensing();
        let ws = &mut self.work;

        for (n, agent) in self.state.agents.iter().enumerate() {
            let h = &sensing[n];
            // z = (Qₙ + γI)⁻¹ Hₙ
            let z = &mut ws.z[n];
            z.copy_from(h);
            let reg_q = &mut ws.reg_q[n];
            reg_q.copy_from(&agent.sample_cov);
            add_diagonal(reg_q, gamma);
            if cholesky_in_place(reg_q) {
                cholesky_solve_in_place(reg_q, z);
            } else {
                let mut fallback = agent.sample_cov.clone();
                add_diagonal(&mut fallback, gamma);
                *z = solve_symmetric(fallback, h)
                    .ok_or(EstimatorError::SingularGrammian { agent: n, step: t })?;
            }
            // Dₙ = Hₙᵀ z, symmetrized.
            let d = &mut self.targets[n];
            let m = d.nrows();
            for i in 0..m {
                for j in i..m {
                    let mut acc = T::zero();
                    for k in 0..z.nrows() {
                        acc += z[(k, i)] * h[(k, j)] + z[(k, j)] * h[(k, i)];
                    }
                    let v = acc * T::lit(0.5);
                    d[(i, j)] = v;
                    d[(j, i)] = v;
                }
            }
            // Kₙ = (Gₙ + γI)⁻¹ zᵀ
            let k = &mut self.gains.gains[n];
            z.transpose_to(k);
            ws.reg_g.copy_from(&agent.grammian_est);
            add_diagonal(&mut ws.reg_g, gamma);
            if cholesky_in_place(&mut ws.reg_g) {
                cholesky_solve_in_place(&ws.reg_g, k);
            } else {
                let mut fallback = agent.grammian_est.clone();
                add_diagonal(&mut fallback, gamma);
                *k = fallback
                    .lu()
                    .solve(&z.transpose())
                    .ok_or(EstimatorError::SingularGrammian { agent: n, step: t })?;
            }
        }

        let one_minus_alpha = T::one() - alpha;
        for (n, agent) in self.state.agents.iter().enumerate() {
            let g_next = &mut ws.next_g[n];
            g_next.copy_from(&agent.grammian_est);
            g_next.zip_apply(&self.targets[n], |g, d| *g = *g * one_minus_alpha + alpha * d);

            let h = &sensing[n];
            let innov = &mut ws.innov[n];
            innov.copy_from(&self.observations[n]);
            innov.gemv(-T::one(), h, &agent.estimate, T::one());
            let x_next = &mut ws.next_x[n];
            x_next.copy_from(&agent.estimate);
            x_next.gemv(alpha, &self.gains.gains[n], innov, T::one());
        }
        for &(a, b) in self.lap.active_edges() {
            let (ga, gb) = (&self.state.agents[a], &self.state.agents[b]);
            for idx in 0..ga.grammian_est.len() {
                let diff = beta * (ga.grammian_est[idx] - gb.grammian_est[idx]);
                ws.next_g[a][idx] -= diff;
                ws.next_g[b][idx] += diff;
            }
            for idx in 0..ga.estimate.len() {
                let diff = beta * (ga.estimate[idx] - gb.estimate[idx]);
                ws.next_x[a][idx] -= diff;
                ws.next_x[b][idx] += diff;
            }
        }

        for n in 0..self.state.agents.len() {
            let (x, g) = (&ws.next_x[n], &ws.next_g[n]);
            if x.iter().any(|v| !v.is_finite()) || g.iter().any(|v| !v.is_finite()) {
                return Err(EstimatorError::NonFinite { agent: n, step: t });
            }
        }
        for (n, agent) in self.state.agents.iter_mut().enumerate() {
            std::mem::swap(&mut agent.grammian_est, &mut ws.next_g[n]);
            std::mem::swap(&mut agent.estimate, &mut ws.next_x[n]);
            agent.update_sample_covariance(n, &self.observations[n])?;
        }
        self.state.step += 1;
        Ok(StepInfo {
            t,
            alpha,
            beta,
            gamma,
            active_links: self.lap.active_edges().len(),
        })
    }

    pub fn diagnostics(&self, summary: &CentralizedSummary<T>) -> Diagnostics<T> {
        Diagnostics {
            step: self.state.step,
            max_disagreement: self.state.max_disagreement(),
            error_norms: self.state.error_norms(self.model.true_param()),
            gain_gap: self.gains.max_distance(&summary.optimal_gains),
            grammian_gap: spectral_norm(&(self.state.grammian_average() - &summary.grammian_norm)),
        }
    }

    /// Largest symmetry defect across all `Gₙ` and `Qₙ`.
    pub fn max_asymmetry(&self) -> T {
        self.state
            .agents
            .iter()
            .map(|a| asymmetry(&a.grammian_est).max(asymmetry(&a.sample_cov)))
            .fold(T::zero(), |a, b| a.max(b))
    }
}
