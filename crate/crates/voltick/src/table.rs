//! Offline Monte-Carlo precomputation of the structure functions the filter
//! looks up at run time: `q_ji(t, z)`, the survival-weighted joint density of
//! the log increment and the end state given the start state, and its
//! z-marginal `qbar_ji(t)`, together with the exact transition probabilities
//! `p_ji(t)`.
//!
//! Storage layout: the increment scale shrinks like `sqrt(t) * v`, so a fixed
//! z grid cannot resolve small gaps. Tables therefore store the rescaled
//! density `sqrt(t) * q(t, u * sqrt(t))` on a uniform grid in `(t, u)` with
//! `u = z / sqrt(t)`; the `t = 0` row has an exact closed form. `z_min` and
//! `z_max` keep their plain meaning as the log-increment range at `t = t_max`.
//!
//! Evaluation interpolates the conditional ratio `q / p` and multiplies by
//! `exp(dt * Lambda)` computed at query time. With the product itself
//! interpolated, the two bracketing time nodes get reweighted by the decay of
//! the survival factor, which shifts the effective transition time by
//! O(grid step^2) and visibly biases the posterior; the ratio form keeps the
//! chain dynamics exact, and when all states share (r, v, n) the common ratio
//! factor cancels in normalization, making the filter exactly uninformative.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::model::{MarketModel, ObservationPolicy, VolatilityChain};
use crate::scalar::Scalar;
use crate::sim::{hold_and_next, rng_stream, STREAM_TAG_TABLE};

/// Paths per accumulation chunk. Fixed so that results do not depend on the
/// rayon thread count: chunks are mapped in parallel but folded in order.
const CHUNK_PATHS: usize = 4096;

/// Chunk accumulators held in flight at once, bounding peak memory.
const MAX_WAVE_BYTES: usize = 256 << 20;

/// Default allocation guard for `build`.
pub const DEFAULT_TABLE_CAP_BYTES: u64 = 1 << 30;

const FILE_MAGIC: &[u8; 4] = b"VTBL";
const FILE_VERSION: u32 = 1;

/// Monte-Carlo grid: time horizon for inter-arrival gaps, grid sizes, the
/// log-increment range at the horizon, sample count, and the build seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec<T> {
    pub t_max: T,
    pub n_t: usize,
    pub z_min: T,
    pub z_max: T,
    pub n_z: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl<T: Scalar> GridSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > T::zero() && self.t_max.is_finite()) {
            return Err(Error::InvalidModel(format!("t_max {} must be positive", self.t_max)));
        }
        if self.n_t < 2 {
            return Err(Error::InvalidModel(format!("n_t {} must be at least 2", self.n_t)));
        }
        if !(self.z_min < self.z_max) || !self.z_min.is_finite() || !self.z_max.is_finite() {
            return Err(Error::InvalidModel(format!(
                "z range [{}, {}] is empty or non-finite",
                self.z_min, self.z_max
            )));
        }
        if self.n_z < 2 {
            return Err(Error::InvalidModel(format!("n_z {} must be at least 2", self.n_z)));
        }
        if self.n_paths < 1 {
            return Err(Error::InvalidModel("n_paths must be at least 1".into()));
        }
        Ok(())
    }

    /// Worst-case increment range at the horizon: extreme drift plus/minus
    /// 8 worst-case standard deviations. Mass outside is below the reported
    /// tail budget by construction.
    pub fn default_z_range(model: &MarketModel<T>, t_max: T) -> (T, T) {
        let c_lo = (0..model.m()).map(|i| model.log_drift(i)).fold(T::infinity(), T::min);
        let c_hi = (0..model.m()).map(|i| model.log_drift(i)).fold(T::neg_infinity(), T::max);
        let v_max = model.vol().iter().fold(T::zero(), |a, &b| a.max(b));
        let spread = T::of(8.0) * v_max * t_max.sqrt();
        (c_lo * t_max - spread, c_hi * t_max + spread)
    }
}

fn policy_tag<T: Scalar>(policy: &ObservationPolicy<T>) -> u8 {
    match policy {
        ObservationPolicy::Cox { .. } => 0,
        ObservationPolicy::Poisson { .. } => 1,
        ObservationPolicy::FixedGrid { .. } => 2,
    }
}

/// Identity of the dynamics a table was built for. Deliberately excludes the
/// initial law (structure functions condition on the start state) and `x0`
/// (only increments matter), so a table stays valid across priors.
pub fn model_hash<T: Scalar>(
    chain: &VolatilityChain<T>,
    model: &MarketModel<T>,
    policy: &ObservationPolicy<T>,
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"voltick.model.v1");
    h.update((chain.m() as u64).to_le_bytes());
    for &s in chain.states() {
        h.update(s.as_f64().to_le_bytes());
    }
    for i in 0..chain.m() {
        for j in 0..chain.m() {
            h.update(chain.intensity().get(i, j).as_f64().to_le_bytes());
        }
    }
    for &r in model.drift() {
        h.update(r.as_f64().to_le_bytes());
    }
    for &v in model.vol() {
        h.update(v.as_f64().to_le_bytes());
    }
    h.update([policy_tag(policy)]);
    match policy {
        ObservationPolicy::Cox { intensity } => {
            for &n in intensity {
                h.update(n.as_f64().to_le_bytes());
            }
        }
        ObservationPolicy::Poisson { rate } => h.update(rate.as_f64().to_le_bytes()),
        ObservationPolicy::FixedGrid { step } => h.update(step.as_f64().to_le_bytes()),
    }
    h.finalize().into()
}

/// Per-chunk Monte-Carlo sums for one start state, kept in f64 so that the
/// accumulation error stays ~n_paths * 1e-16 regardless of the table scalar.
struct ChunkAccum {
    q_sum: Vec<f64>,
    q_sq: Vec<f64>,
    qb_sum: Vec<f64>,
    qb_sq: Vec<f64>,
    marg_sum: Vec<f64>,
    marg_sq: Vec<f64>,
    tail_sum: Vec<f64>,
}

impl ChunkAccum {
    fn new(m: usize, n_t: usize, n_z: usize) -> Self {
        Self {
            q_sum: vec![0.0; m * n_t * n_z],
            q_sq: vec![0.0; m * n_t * n_z],
            qb_sum: vec![0.0; m * n_t],
            qb_sq: vec![0.0; m * n_t],
            marg_sum: vec![0.0; m * n_t],
            marg_sq: vec![0.0; m * n_t],
            tail_sum: vec![0.0; m * n_t],
        }
    }

    fn bytes(m: usize, n_t: usize, n_z: usize) -> usize {
        (2 * m * n_t * n_z + 5 * m * n_t) * 8
    }

    fn fold_from(&mut self, other: &ChunkAccum) {
        for (a, b) in self.q_sum.iter_mut().zip(&other.q_sum) {
            *a += b;
        }
        for (a, b) in self.q_sq.iter_mut().zip(&other.q_sq) {
            *a += b;
        }
        for (a, b) in self.qb_sum.iter_mut().zip(&other.qb_sum) {
            *a += b;
        }
        for (a, b) in self.qb_sq.iter_mut().zip(&other.qb_sq) {
            *a += b;
        }
        for (a, b) in self.marg_sum.iter_mut().zip(&other.marg_sum) {
            *a += b;
        }
        for (a, b) in self.marg_sq.iter_mut().zip(&other.marg_sq) {
            *a += b;
        }
        for (a, b) in self.tail_sum.iter_mut().zip(&other.tail_sum) {
            *a += b;
        }
    }
}

/// Precomputed structure-function tables plus their standard errors, the
/// marginalization control sums, and the truncated-tail budget.
#[derive(Clone, Debug)]
pub struct StructureTable<T> {
    grid: GridSpec<T>,
    policy_tag: u8,
    hash: [u8; 32],
    m: usize,
    intensity: SquareMatrix<T>,
    /// `[j][i][k][l]`, value `sqrt(t_k) * q_ji(t_k, u_l * sqrt(t_k))`.
    q_s: Vec<T>,
    q_stderr: Vec<T>,
    /// `[j][i][k]`.
    qbar: Vec<T>,
    qbar_stderr: Vec<T>,
    p: Vec<T>,
    /// Mean and standard error of the per-path difference
    /// `w * (trapz of its density row - 1)`, per `[j][i][k]`: the honest
    /// combined error of `int q dz - qbar`.
    marg_diff: Vec<T>,
    marg_stderr: Vec<T>,
    /// Upper bound on the per-path Gaussian mass beyond the u range,
    /// `w * (e^{-x_r^2/2} + e^{-x_l^2/2}) / 2`, averaged; per `[j][i][k]`.
    tail_budget: Vec<T>,
}

impl<T: Scalar> StructureTable<T> {
    #[inline]
    fn iq(&self, j: usize, i: usize, k: usize, l: usize) -> usize {
        ((j * self.m + i) * self.grid.n_t + k) * self.grid.n_z + l
    }

    #[inline]
    fn ib(&self, j: usize, i: usize, k: usize) -> usize {
        (j * self.m + i) * self.grid.n_t + k
    }

    /// Spacing of the time grid; the stored surfaces are linear between
    /// multiples of this, so integrators should break steps there.
    #[inline]
    pub fn node_dt(&self) -> T {
        self.grid.t_max / T::from_usize(self.grid.n_t - 1).unwrap()
    }

    #[inline]
    pub fn node_time(&self, k: usize) -> T {
        self.node_dt() * T::from_usize(k).unwrap()
    }

    #[inline]
    fn u_min(&self) -> T {
        self.grid.z_min / self.grid.t_max.sqrt()
    }

    #[inline]
    fn u_max(&self) -> T {
        self.grid.z_max / self.grid.t_max.sqrt()
    }

    #[inline]
    fn du(&self) -> T {
        (self.u_max() - self.u_min()) / T::from_usize(self.grid.n_z - 1).unwrap()
    }

    #[inline]
    pub fn node_u(&self, l: usize) -> T {
        self.u_min() + self.du() * T::from_usize(l).unwrap()
    }

    pub fn grid(&self) -> &GridSpec<T> {
        &self.grid
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn policy_kind(&self) -> &'static str {
        match self.policy_tag {
            0 => "cox",
            1 => "poisson",
            _ => "fixed_grid",
        }
    }

    pub fn hash(&self) -> &[u8; 32] {
        &self.hash
    }

    /// Stored node value `sqrt(t_k) * q_ji(t_k, u_l sqrt(t_k))`.
    pub fn scaled_q_node(&self, j: usize, i: usize, k: usize, l: usize) -> T {
        self.q_s[self.iq(j, i, k, l)]
    }

    pub fn scaled_q_stderr(&self, j: usize, i: usize, k: usize, l: usize) -> T {
        self.q_stderr[self.iq(j, i, k, l)]
    }

    pub fn qbar_node(&self, j: usize, i: usize, k: usize) -> T {
        self.qbar[self.ib(j, i, k)]
    }

    pub fn qbar_stderr_node(&self, j: usize, i: usize, k: usize) -> T {
        self.qbar_stderr[self.ib(j, i, k)]
    }

    pub fn p_node(&self, j: usize, i: usize, k: usize) -> T {
        self.p[self.ib(j, i, k)]
    }

    /// Exact `P(dt) = exp(dt * Lambda)` for the chain the table was built for,
    /// rows clamped and renormalized onto the simplex.
    pub fn transition_at(&self, dt: T) -> SquareMatrix<T> {
        assert!(dt >= T::zero() && dt.is_finite());
        let mut p = self.intensity.scale(dt).expm();
        for i in 0..self.m {
            let mut sum = T::zero();
            for j in 0..self.m {
                let x = p.get(i, j);
                if x < T::zero() {
                    p.set(i, j, T::zero());
                } else {
                    sum += x;
                }
            }
            for j in 0..self.m {
                p.set(i, j, p.get(i, j) / sum);
            }
        }
        p
    }

    fn locate_t(&self, dt: T) -> Result<(usize, T)> {
        let t_max = self.grid.t_max;
        if dt > t_max * T::of(1.0 + 1e-9) {
            return Err(Error::HorizonExceeded { dt: dt.as_f64(), t_max: t_max.as_f64() });
        }
        let dtc = dt.min(t_max);
        let kf = dtc / self.node_dt();
        let k0 = kf.floor().as_f64() as usize;
        let k0 = k0.min(self.grid.n_t - 2);
        let frac = kf - T::from_usize(k0).unwrap();
        Ok((k0, frac))
    }

    /// Ratio node `q / p`. Where `p_ji(t_k) = 0` (the `t = 0` off-diagonals,
    /// or pairs unreachable outright) the 0/0 limit is resolved to the start
    /// state's diagonal ratio: the conditional density of a path that has had
    /// no time to move. For an unreachable pair the fallback is multiplied by
    /// `p_ji(dt) = 0` downstream, so only the `t = 0` column is affected, and
    /// there the fallback keeps the ratio surface continuous in `(j, i)`,
    /// which is what lets a state-independent table drop out of the posterior
    /// update entirely.
    #[inline]
    fn ratio_q(&self, j: usize, i: usize, k: usize, l: usize) -> T {
        let p = self.p[self.ib(j, i, k)];
        if p > T::zero() {
            self.q_s[self.iq(j, i, k, l)] / p
        } else {
            self.q_s[self.iq(j, j, k, l)] / self.p[self.ib(j, j, k)]
        }
    }

    #[inline]
    fn ratio_qbar(&self, j: usize, i: usize, k: usize) -> T {
        let p = self.p[self.ib(j, i, k)];
        if p > T::zero() {
            self.qbar[self.ib(j, i, k)] / p
        } else {
            self.qbar[self.ib(j, j, k)] / self.p[self.ib(j, j, k)]
        }
    }

    /// Interpolated `q_ji(dt, dz)`. `dt` must be positive and within the
    /// horizon; `|dz|` outside the representable range returns 0 (tail
    /// convention, mass covered by the reported budget).
    pub fn eval_q(&self, j: usize, i: usize, dt: T, dz: T) -> Result<T> {
        let pt = self.transition_at(dt.min(self.grid.t_max));
        self.eval_q_with(&pt, j, i, dt, dz)
    }

    /// Same as `eval_q` with the transition matrix `P(dt)` supplied, so a
    /// caller updating all (j, i) pairs at one tick pays for one exponential.
    pub fn eval_q_with(
        &self,
        pt: &SquareMatrix<T>,
        j: usize,
        i: usize,
        dt: T,
        dz: T,
    ) -> Result<T> {
        assert!(dt > T::zero(), "gap must be positive, got {dt}");
        let (k0, ft) = self.locate_t(dt)?;
        let sqrt_dt = dt.min(self.grid.t_max).sqrt();
        let u = dz / sqrt_dt;
        if u < self.u_min() || u > self.u_max() {
            return Ok(T::zero());
        }
        let lf = (u - self.u_min()) / self.du();
        let l0 = (lf.floor().as_f64() as usize).min(self.grid.n_z - 2);
        let fz = lf - T::from_usize(l0).unwrap();
        let one = T::one();
        let r = self.ratio_q(j, i, k0, l0) * (one - ft) * (one - fz)
            + self.ratio_q(j, i, k0 + 1, l0) * ft * (one - fz)
            + self.ratio_q(j, i, k0, l0 + 1) * (one - ft) * fz
            + self.ratio_q(j, i, k0 + 1, l0 + 1) * ft * fz;
        Ok(pt.get(j, i) * r / sqrt_dt)
    }

    /// Interpolated `qbar_ji(dt)`.
    pub fn eval_qbar(&self, j: usize, i: usize, dt: T) -> Result<T> {
        let pt = self.transition_at(dt.min(self.grid.t_max));
        self.eval_qbar_with(&pt, j, i, dt)
    }

    pub fn eval_qbar_with(&self, pt: &SquareMatrix<T>, j: usize, i: usize, dt: T) -> Result<T> {
        // dt = 0 is legal here: qbar(0) = delta_ji, and the ODE field reads it
        // at the very start of an inter-arrival interval
        assert!(dt >= T::zero(), "gap must be nonnegative, got {dt}");
        let (k0, ft) = self.locate_t(dt)?;
        let r = self.ratio_qbar(j, i, k0) * (T::one() - ft) + self.ratio_qbar(j, i, k0 + 1) * ft;
        Ok(pt.get(j, i) * r)
    }

    /// Survival mass of the next arrival beyond gap `dt`, given the posterior
    /// `pi` at the last tick: the quadrature of
    /// `g(s) = sum_{i,j} n_i qbar_ji(s) pi_j` over `[dt, t_max]` plus the
    /// exponential tail `g(t_max) / n_min` beyond the horizon.
    pub fn survival_mass(
        &self,
        policy: &ObservationPolicy<T>,
        pi: &[T],
        dt: T,
    ) -> Result<T> {
        let profile = self.survival_profile(policy, pi)?;
        if dt > self.grid.t_max * T::of(1.0 + 1e-9) {
            return Err(Error::HorizonExceeded {
                dt: dt.as_f64(),
                t_max: self.grid.t_max.as_f64(),
            });
        }
        Ok(profile.mass_beyond(dt.min(self.grid.t_max)))
    }

    /// Precomputed survival quadrature for one anchor posterior; the filter
    /// rebuilds it once per tick and reads it at every RK4 stage.
    pub(crate) fn survival_profile(
        &self,
        policy: &ObservationPolicy<T>,
        pi: &[T],
    ) -> Result<SurvivalProfile<T>> {
        let intensity = match policy {
            ObservationPolicy::Cox { intensity } => intensity,
            other => {
                return Err(Error::PolicyMismatch {
                    expected: "cox",
                    got: other.kind_name(),
                })
            }
        };
        assert_eq!(pi.len(), self.m);
        let n_t = self.grid.n_t;
        let mut g = vec![T::zero(); n_t];
        for k in 0..n_t {
            let mut acc = T::zero();
            for i in 0..self.m {
                let mut inner = T::zero();
                for j in 0..self.m {
                    inner += self.qbar[self.ib(j, i, k)] * pi[j];
                }
                acc += intensity[i] * inner;
            }
            g[k] = acc;
        }
        let n_min = intensity.iter().fold(T::infinity(), |a, &b| a.min(b));
        let mut suffix = vec![T::zero(); n_t];
        suffix[n_t - 1] = g[n_t - 1] / n_min;
        let half_dt = self.node_dt() * T::of(0.5);
        for k in (0..n_t - 1).rev() {
            suffix[k] = suffix[k + 1] + (g[k] + g[k + 1]) * half_dt;
        }
        if !suffix[0].is_finite() || suffix[0] <= T::zero() {
            return Err(Error::DegenerateSurvival {
                dt: 0.0,
                value: suffix[0].as_f64(),
            });
        }
        Ok(SurvivalProfile { g, suffix, node_dt: self.node_dt() })
    }

    /// `int q_ji(t_k, z) dz` (trapezoid over the stored row) minus
    /// `qbar_ji(t_k)`, and the tolerance it must stay within: three combined
    /// standard errors of that difference, the truncated-tail budget, and a
    /// rounding allowance of one epsilon per addition behind the stored sums
    /// (the standard errors vanish when every path contributes an identical
    /// row, but the accumulated values still carry that much rounding).
    pub fn marginalization_residual(&self, j: usize, i: usize, k: usize) -> (T, T) {
        let n_z = self.grid.n_z;
        let mut sum = T::zero();
        for l in 0..n_z {
            sum += self.q_s[self.iq(j, i, k, l)];
        }
        let ends = self.q_s[self.iq(j, i, k, 0)] + self.q_s[self.iq(j, i, k, n_z - 1)];
        let integral = (sum - ends * T::of(0.5)) * self.du();
        let residual = integral - self.qbar[self.ib(j, i, k)];
        let scale = integral.abs() + self.qbar[self.ib(j, i, k)].abs();
        let fp_floor = T::epsilon() * T::of((CHUNK_PATHS + n_z) as f64) * scale;
        let bound = T::of(3.0) * self.marg_stderr[self.ib(j, i, k)]
            + self.tail_budget[self.ib(j, i, k)]
            + fp_floor;
        (residual, bound)
    }

    pub fn tail_budget_node(&self, j: usize, i: usize, k: usize) -> T {
        self.tail_budget[self.ib(j, i, k)]
    }

    /// Monte-Carlo build with the default allocation cap.
    pub fn build(
        chain: &VolatilityChain<T>,
        model: &MarketModel<T>,
        policy: &ObservationPolicy<T>,
        grid: GridSpec<T>,
    ) -> Result<Self> {
        Self::build_with_cap(chain, model, policy, grid, DEFAULT_TABLE_CAP_BYTES)
    }

    pub fn build_with_cap(
        chain: &VolatilityChain<T>,
        model: &MarketModel<T>,
        policy: &ObservationPolicy<T>,
        grid: GridSpec<T>,
        cap_bytes: u64,
    ) -> Result<Self> {
        let mut table = Self::allocate(chain, model, policy, grid, cap_bytes)?;
        let m = table.m;
        let n_t = grid.n_t;
        let n_z = grid.n_z;

        // geometry in f64: path stats and density rows accumulate in f64
        // regardless of T, so narrow tables lose nothing to accumulation
        let node_dt = grid.t_max.as_f64() / (n_t - 1) as f64;
        let u_min = table.u_min().as_f64();
        let du = table.du().as_f64();
        let log_drift: Vec<f64> = (0..m).map(|i| model.log_drift(i).as_f64()).collect();
        let var: Vec<f64> = model.vol().iter().map(|&v| (v * v).as_f64()).collect();
        let arr_intensity: Vec<f64> = match policy {
            ObservationPolicy::Cox { intensity } => intensity.iter().map(|&n| n.as_f64()).collect(),
            _ => vec![0.0; m],
        };
        let survival = policy.weights_survival();

        let n_chunks = grid.n_paths.div_ceil(CHUNK_PATHS);
        let wave = (MAX_WAVE_BYTES / ChunkAccum::bytes(m, n_t, n_z)).max(1);

        for j in 0..m {
            let mut total = ChunkAccum::new(m, n_t, n_z);
            let mut chunk_start = 0usize;
            while chunk_start < n_chunks {
                let chunk_end = (chunk_start + wave).min(n_chunks);
                let partials: Vec<ChunkAccum> = (chunk_start..chunk_end)
                    .into_par_iter()
                    .map(|c| {
                        let lo = c * CHUNK_PATHS;
                        let hi = ((c + 1) * CHUNK_PATHS).min(grid.n_paths);
                        let mut acc = ChunkAccum::new(m, n_t, n_z);
                        for path_idx in lo..hi {
                            let stream =
                                STREAM_TAG_TABLE | ((j as u64) << 48) | path_idx as u64;
                            let mut rng = rng_stream(grid.seed, stream);
                            accumulate_path(
                                chain,
                                j,
                                &log_drift,
                                &var,
                                &arr_intensity,
                                survival,
                                node_dt,
                                n_t,
                                u_min,
                                du,
                                n_z,
                                &mut rng,
                                &mut acc,
                            );
                        }
                        acc
                    })
                    .collect();
                for partial in &partials {
                    total.fold_from(partial);
                }
                chunk_start = chunk_end;
            }
            table.finalize_start_state(j, &total);
        }

        table.fill_exact_rows(chain, model, policy);
        Ok(table)
    }

    /// Closed-form table for state-independent parameters: all `(r_i, v_i)`
    /// equal and, for Cox arrivals, all intensities equal. Then
    /// `qbar_ji(t) = w(t) p_ji(t)` and
    /// `q_ji(t, z) = w(t) p_ji(t) N(z; c t, v^2 t)` exactly, with `w` the
    /// constant-rate survival factor. Standard errors are zero.
    pub fn exact_uninformative(
        chain: &VolatilityChain<T>,
        model: &MarketModel<T>,
        policy: &ObservationPolicy<T>,
        grid: GridSpec<T>,
    ) -> Result<Self> {
        let all_equal = |xs: &[T]| xs.iter().all(|&x| x == xs[0]);
        if !all_equal(model.drift()) || !all_equal(model.vol()) {
            return Err(Error::InvalidModel(
                "exact table requires state-independent drift and vol".into(),
            ));
        }
        let n_rate = match policy {
            ObservationPolicy::Cox { intensity } => {
                if !all_equal(intensity) {
                    return Err(Error::InvalidPolicy(
                        "exact Cox table requires a state-independent intensity".into(),
                    ));
                }
                intensity[0].as_f64()
            }
            _ => 0.0,
        };
        let mut table = Self::allocate(chain, model, policy, grid, u64::MAX)?;
        let m = table.m;
        let c = model.log_drift(0).as_f64();
        let v2 = (model.vol()[0] * model.vol()[0]).as_f64();
        let sigma = v2.sqrt();
        let u_min = table.u_min().as_f64();
        let u_max = table.u_max().as_f64();
        let du = table.du().as_f64();
        let n_z = grid.n_z;

        for k in 0..grid.n_t {
            let t = table.node_time(k).as_f64();
            let w = (-n_rate * t).exp();
            let mean_u = c * t.sqrt();
            // trapezoid mass and Chernoff tail of the shared density row
            let mut row = vec![0.0f64; n_z];
            let mut mass = 0.0;
            for (l, slot) in row.iter_mut().enumerate() {
                let u = u_min + du * l as f64;
                let d = (u - mean_u) / sigma;
                *slot = (-0.5 * d * d).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                mass += *slot;
            }
            mass = (mass - 0.5 * (row[0] + row[n_z - 1])) * du;
            let xr = (u_max - mean_u) / sigma;
            let xl = (mean_u - u_min) / sigma;
            let tail = chernoff_tail(xr) + chernoff_tail(xl);
            for j in 0..m {
                for i in 0..m {
                    let p = table.p[table.ib(j, i, k)].as_f64();
                    let ib = table.ib(j, i, k);
                    table.qbar[ib] = T::of(w * p);
                    table.marg_diff[ib] = T::of(w * p * (mass - 1.0));
                    table.tail_budget[ib] = T::of(w * p * tail.min(1.0));
                    for l in 0..n_z {
                        let idx = table.iq(j, i, k, l);
                        table.q_s[idx] = T::of(w * p * row[l]);
                    }
                }
            }
        }
        Ok(table)
    }

    fn allocate(
        chain: &VolatilityChain<T>,
        model: &MarketModel<T>,
        policy: &ObservationPolicy<T>,
        grid: GridSpec<T>,
        cap_bytes: u64,
    ) -> Result<Self> {
        grid.validate()?;
        policy.validate(chain.m())?;
        if model.m() != chain.m() {
            return Err(Error::InvalidModel(format!(
                "market model has {} states, chain has {}",
                model.m(),
                chain.m()
            )));
        }
        let m = chain.m();
        let elem = std::mem::size_of::<T>() as u64;
        let big = (m * m * grid.n_t * grid.n_z) as u64;
        let small = (m * m * grid.n_t) as u64;
        let need = (2 * big + 6 * small) * elem
            + ChunkAccum::bytes(m, grid.n_t, grid.n_z) as u64;
        if need > cap_bytes {
            return Err(Error::TableTooLarge { need, cap: cap_bytes });
        }
        let mut table = Self {
            grid,
            policy_tag: policy_tag(policy),
            hash: model_hash(chain, model, policy),
            m,
            intensity: chain.intensity().clone(),
            q_s: vec![T::zero(); (m * m * grid.n_t * grid.n_z) as usize],
            q_stderr: vec![T::zero(); m * m * grid.n_t * grid.n_z],
            qbar: vec![T::zero(); m * m * grid.n_t],
            qbar_stderr: vec![T::zero(); m * m * grid.n_t],
            p: vec![T::zero(); m * m * grid.n_t],
            marg_diff: vec![T::zero(); m * m * grid.n_t],
            marg_stderr: vec![T::zero(); m * m * grid.n_t],
            tail_budget: vec![T::zero(); m * m * grid.n_t],
        };
        for k in 0..grid.n_t {
            let pk = crate::model::transition_matrix(chain, table.node_time(k));
            for j in 0..m {
                for i in 0..m {
                    let ib = table.ib(j, i, k);
                    table.p[ib] = pk.get(j, i);
                }
            }
        }
        Ok(table)
    }

    /// Converts one start state's accumulated sums into stored means and
    /// standard errors.
    fn finalize_start_state(&mut self, j: usize, acc: &ChunkAccum) {
        let n = self.grid.n_paths as f64;
        let n_t = self.grid.n_t;
        let n_z = self.grid.n_z;
        let mean_and_stderr = |sum: f64, sq: f64| -> (f64, f64) {
            let mean = sum / n;
            if n < 2.0 {
                return (mean, 0.0);
            }
            let var = ((sq - sum * sum / n) / (n - 1.0)).max(0.0);
            (mean, (var / n).sqrt())
        };
        for i in 0..self.m {
            for k in 1..n_t {
                let ia = (i * n_t + k) * n_z;
                for l in 0..n_z {
                    let (mean, se) = mean_and_stderr(acc.q_sum[ia + l], acc.q_sq[ia + l]);
                    let idx = self.iq(j, i, k, l);
                    self.q_s[idx] = T::of(mean);
                    self.q_stderr[idx] = T::of(se);
                }
                let ibs = i * n_t + k;
                let ib = self.ib(j, i, k);
                let (mean, se) = mean_and_stderr(acc.qb_sum[ibs], acc.qb_sq[ibs]);
                self.qbar[ib] = T::of(mean);
                self.qbar_stderr[ib] = T::of(se);
                let (mean, se) = mean_and_stderr(acc.marg_sum[ibs], acc.marg_sq[ibs]);
                self.marg_diff[ib] = T::of(mean);
                self.marg_stderr[ib] = T::of(se);
                self.tail_budget[ib] = T::of(acc.tail_sum[ibs] / n);
            }
        }
    }

    /// Writes the exact `t = 0` rows: no time to move or to generate an
    /// arrival, so the end state is the start state, the weight is 1, and the
    /// rescaled density is `N(u; 0, v_j^2)`.
    fn fill_exact_rows(
        &mut self,
        _chain: &VolatilityChain<T>,
        model: &MarketModel<T>,
        _policy: &ObservationPolicy<T>,
    ) {
        let n_z = self.grid.n_z;
        let u_min = self.u_min().as_f64();
        let u_max = self.u_max().as_f64();
        let du = self.du().as_f64();
        for j in 0..self.m {
            let sigma = model.vol()[j].as_f64();
            let mut mass = 0.0;
            for l in 0..n_z {
                let u = u_min + du * l as f64;
                let x = u / sigma;
                let f = (-0.5 * x * x).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                let idx = self.iq(j, j, 0, l);
                self.q_s[idx] = T::of(f);
                mass += f;
            }
            let ends = self.q_s[self.iq(j, j, 0, 0)].as_f64()
                + self.q_s[self.iq(j, j, 0, n_z - 1)].as_f64();
            mass = (mass - 0.5 * ends) * du;
            let ib = self.ib(j, j, 0);
            self.qbar[ib] = T::one();
            self.marg_diff[ib] = T::of(mass - 1.0);
            let tail = chernoff_tail(u_max / sigma) + chernoff_tail(-u_min / sigma);
            self.tail_budget[ib] = T::of(tail.min(1.0));
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
        w.write_all(FILE_MAGIC)?;
        w.write_all(&FILE_VERSION.to_le_bytes())?;
        w.write_all(&[std::mem::size_of::<T>() as u8, self.policy_tag])?;
        w.write_all(&(self.m as u16).to_le_bytes())?;
        for v in [self.grid.n_t as u64, self.grid.n_z as u64, self.grid.n_paths as u64, self.grid.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [self.grid.t_max, self.grid.z_min, self.grid.z_max] {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        w.write_all(&self.hash)?;
        for i in 0..self.m {
            for j in 0..self.m {
                w.write_all(&self.intensity.get(i, j).as_f64().to_le_bytes())?;
            }
        }
        for arr in [
            &self.q_s,
            &self.q_stderr,
            &self.qbar,
            &self.qbar_stderr,
            &self.p,
            &self.marg_diff,
            &self.marg_stderr,
            &self.tail_budget,
        ] {
            write_scalars(&mut w, arr)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a table and refuses it unless it was built for exactly the
    /// supplied dynamics and policy.
    pub fn load(
        path: &Path,
        chain: &VolatilityChain<T>,
        model: &MarketModel<T>,
        policy: &ObservationPolicy<T>,
    ) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FILE_MAGIC {
            return Err(Error::TableFormat("bad magic, not a table file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FILE_VERSION {
            return Err(Error::TableFormat(format!("unsupported version {version}")));
        }
        let mut two = [0u8; 2];
        r.read_exact(&mut two)?;
        let (width, tag) = (two[0], two[1]);
        if width as usize != std::mem::size_of::<T>() {
            return Err(Error::TableFormat(format!(
                "table stores {width}-byte scalars, this build uses {}-byte",
                std::mem::size_of::<T>()
            )));
        }
        if tag != policy_tag(policy) {
            return Err(Error::TableMismatch(format!(
                "table was built for a {} policy, config has {}",
                match tag {
                    0 => "cox",
                    1 => "poisson",
                    _ => "fixed_grid",
                },
                policy.kind_name()
            )));
        }
        let m = read_u16(&mut r)? as usize;
        if m != chain.m() {
            return Err(Error::TableMismatch(format!(
                "table has {m} states, chain has {}",
                chain.m()
            )));
        }
        let n_t = read_u64(&mut r)? as usize;
        let n_z = read_u64(&mut r)? as usize;
        let n_paths = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let t_max = T::of(read_f64(&mut r)?);
        let z_min = T::of(read_f64(&mut r)?);
        let z_max = T::of(read_f64(&mut r)?);
        let grid = GridSpec { t_max, n_t, z_min, z_max, n_z, n_paths, seed };
        grid.validate().map_err(|e| Error::TableFormat(e.to_string()))?;
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let expected = model_hash(chain, model, policy);
        if hash != expected {
            return Err(Error::TableMismatch(
                "model hash differs; the table was built for other parameters".into(),
            ));
        }
        let mut intensity = SquareMatrix::zeros(m);
        for i in 0..m {
            for j in 0..m {
                intensity.set(i, j, T::of(read_f64(&mut r)?));
            }
        }
        let big = m * m * n_t * n_z;
        let small = m * m * n_t;
        let q_s = read_scalars(&mut r, big)?;
        let q_stderr = read_scalars(&mut r, big)?;
        let qbar = read_scalars(&mut r, small)?;
        let qbar_stderr = read_scalars(&mut r, small)?;
        let p = read_scalars(&mut r, small)?;
        let marg_diff = read_scalars(&mut r, small)?;
        let marg_stderr = read_scalars(&mut r, small)?;
        let tail_budget = read_scalars(&mut r, small)?;
        Ok(Self {
            grid,
            policy_tag: tag,
            hash,
            m,
            intensity,
            q_s,
            q_stderr,
            qbar,
            qbar_stderr,
            p,
            marg_diff,
            marg_stderr,
            tail_budget,
        })
    }
}

/// `sum_{i,j} n_i qbar_ji(s) pi_j` sampled at the table's time nodes, with
/// suffix integrals so the survival mass beyond any gap is O(1) to read.
pub(crate) struct SurvivalProfile<T> {
    g: Vec<T>,
    suffix: Vec<T>,
    node_dt: T,
}

impl<T: Scalar> SurvivalProfile<T> {
    /// `Z(delta) = int_delta^inf g`, trapezoid plus the exponential tail.
    pub(crate) fn mass_beyond(&self, delta: T) -> T {
        let n = self.g.len();
        debug_assert!(delta >= T::zero());
        let kf = delta / self.node_dt;
        let k0 = (kf.floor().as_f64() as usize).min(n - 2);
        let frac = kf - T::from_usize(k0).unwrap();
        let g_d = self.g[k0] * (T::one() - frac) + self.g[k0 + 1] * frac;
        let t_next = self.node_dt * T::from_usize(k0 + 1).unwrap();
        (t_next - delta) * (g_d + self.g[k0 + 1]) * T::of(0.5) + self.suffix[k0 + 1]
    }
}

/// Upper bound `P(N(0,1) > x) <= exp(-x^2/2) / 2` for `x >= 0`, else 1.
#[inline]
fn chernoff_tail(x: f64) -> f64 {
    if x >= 0.0 {
        0.5 * (-0.5 * x * x).exp()
    } else {
        1.0
    }
}

/// Simulates one chain path from `start` over the node grid, accumulating the
/// survival-weighted density row, its square, the marginal weight, the
/// trapezoid-vs-weight control difference, and the tail bound at every node.
#[allow(clippy::too_many_arguments)]
fn accumulate_path<T: Scalar>(
    chain: &VolatilityChain<T>,
    start: usize,
    log_drift: &[f64],
    var: &[f64],
    arr_intensity: &[f64],
    survival: bool,
    node_dt: f64,
    n_t: usize,
    u_min: f64,
    du: f64,
    n_z: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    acc: &mut ChunkAccum,
) {
    let t_end = node_dt * (n_t - 1) as f64;
    let mut state = start;
    let mut t_cur = 0.0f64;
    let mut m_acc = 0.0f64;
    let mut s2_acc = 0.0f64;
    let mut n_acc = 0.0f64;
    let mut k_next = 1usize;

    loop {
        let seg_end = match hold_and_next(chain, state, rng) {
            Some((hold, next)) => (t_cur + hold.as_f64(), Some(next)),
            None => (t_end, None),
        };
        let (seg_end_t, next_state) = seg_end;
        while k_next < n_t && node_dt * k_next as f64 <= seg_end_t {
            let tk = node_dt * k_next as f64;
            let d = tk - t_cur;
            m_acc += log_drift[state] * d;
            s2_acc += var[state] * d;
            n_acc += arr_intensity[state] * d;
            t_cur = tk;
            record_node(
                state, k_next, tk, m_acc, s2_acc, n_acc, survival, u_min, du, n_z, n_t, acc,
            );
            k_next += 1;
        }
        if k_next >= n_t {
            break;
        }
        let d = seg_end_t - t_cur;
        m_acc += log_drift[state] * d;
        s2_acc += var[state] * d;
        n_acc += arr_intensity[state] * d;
        t_cur = seg_end_t;
        match next_state {
            Some(next) => state = next,
            None => {
                // absorbing: sweep the remaining nodes in this state
                while k_next < n_t {
                    let tk = node_dt * k_next as f64;
                    let d = tk - t_cur;
                    m_acc += log_drift[state] * d;
                    s2_acc += var[state] * d;
                    n_acc += arr_intensity[state] * d;
                    t_cur = tk;
                    record_node(
                        state, k_next, tk, m_acc, s2_acc, n_acc, survival, u_min, du, n_z, n_t,
                        acc,
                    );
                    k_next += 1;
                }
                break;
            }
        }
    }
}

/// Adds one path's contribution at one time node. The Gaussian row is built
/// by a multiplicative recurrence outward from the node nearest the mean
/// (ratios of a Gaussian at equispaced points form a geometric ladder), so a
/// row costs three exponentials instead of one per z node.
#[allow(clippy::too_many_arguments)]
fn record_node(
    state: usize,
    k: usize,
    tk: f64,
    m_acc: f64,
    s2_acc: f64,
    n_acc: f64,
    survival: bool,
    u_min: f64,
    du: f64,
    n_z: usize,
    n_t: usize,
    acc: &mut ChunkAccum,
) {
    const TINY: f64 = 1e-300;
    let w = if survival { (-n_acc).exp() } else { 1.0 };
    let sqrt_t = tk.sqrt();
    let mean = m_acc / sqrt_t;
    let s2 = s2_acc / tk;
    let sigma = s2.sqrt();
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());

    let base = (state * n_t + k) * n_z;
    let row_q = &mut acc.q_sum[base..base + n_z];
    let row_sq = &mut acc.q_sq[base..base + n_z];

    let l0 = (((mean - u_min) / du).round().max(0.0) as usize).min(n_z - 1);
    let d0 = u_min + du * l0 as f64 - mean;
    let f0 = norm * (-0.5 * d0 * d0 / s2).exp();
    let step = (-du * du / s2).exp();

    let mut row_sum = 0.0;
    let mut f_lo = f0;
    let mut f_hi = f0;
    let mut lo = l0;
    let mut hi = l0;
    if f0 > TINY {
        let wf = w * f0;
        row_q[l0] += wf;
        row_sq[l0] += wf * wf;
        row_sum += f0;
        // rightward ladder
        let mut ratio = (-du * (2.0 * d0 + du) / (2.0 * s2)).exp();
        let mut f = f0;
        let mut l = l0 + 1;
        while l < n_z {
            f *= ratio;
            ratio *= step;
            if f <= TINY {
                break;
            }
            let wf = w * f;
            row_q[l] += wf;
            row_sq[l] += wf * wf;
            row_sum += f;
            f_hi = f;
            hi = l;
            l += 1;
        }
        // leftward ladder
        let mut ratio = (du * (2.0 * d0 - du) / (2.0 * s2)).exp();
        let mut f = f0;
        let mut l = l0;
        while l > 0 {
            l -= 1;
            f *= ratio;
            ratio *= step;
            if f <= TINY {
                break;
            }
            let wf = w * f;
            row_q[l] += wf;
            row_sq[l] += wf * wf;
            row_sum += f;
            f_lo = f;
            lo = l;
        }
    }
    let mut ends = 0.0;
    if lo == 0 {
        ends += f_lo;
    }
    if hi == n_z - 1 {
        ends += f_hi;
    }
    let trapz = if row_sum > 0.0 { (row_sum - 0.5 * ends) * du } else { 0.0 };

    let ibs = state * n_t + k;
    acc.qb_sum[ibs] += w;
    acc.qb_sq[ibs] += w * w;
    let diff = w * (trapz - 1.0);
    acc.marg_sum[ibs] += diff;
    acc.marg_sq[ibs] += diff * diff;
    let u_max = u_min + du * (n_z - 1) as f64;
    let tail = chernoff_tail((u_max - mean) / sigma) + chernoff_tail((mean - u_min) / sigma);
    acc.tail_sum[ibs] += w * tail.min(1.0);
}

fn write_scalars<T: Scalar, W: Write>(w: &mut W, arr: &[T]) -> Result<()> {
    if std::mem::size_of::<T>() == 4 {
        for &x in arr {
            w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    } else {
        for &x in arr {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_scalars<T: Scalar, R: Read>(r: &mut R, n: usize) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(n);
    if std::mem::size_of::<T>() == 4 {
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            out.push(T::of(f32::from_le_bytes(buf) as f64));
        }
    } else {
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            out.push(T::of(f64::from_le_bytes(buf)));
        }
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
