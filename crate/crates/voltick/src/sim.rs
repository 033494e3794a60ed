//! Ground-truth simulation: exact chain paths, observation times under each
//! policy, and Gaussian log prices at those times. No time discretization
//! anywhere; holding times and increments are exact draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{MarketModel, ObservationPolicy, PathSegmentStats, Tick, VolatilityChain};
use crate::scalar::Scalar;

/// Independent substreams of one user seed. Simulation draws come from fixed
/// stream ids; the table builder and the particle oracle tag theirs with
/// distinct high bytes so no two subsystems ever share a stream.
pub(crate) const STREAM_SIM_PATH: u64 = 0;
pub(crate) const STREAM_SIM_ARRIVALS: u64 = 1;
pub(crate) const STREAM_SIM_TICKS: u64 = 2;
pub(crate) const STREAM_TAG_TABLE: u64 = 0x54 << 56;
pub(crate) const STREAM_TAG_ORACLE: u64 = 0x4F << 56;
pub(crate) const STREAM_TAG_ORACLE_INIT: u64 = 0x49 << 56;
pub(crate) const STREAM_TAG_RESAMPLE: u64 = 0x52 << 56;

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_index<T: Scalar, R: Rng + ?Sized>(law: &[T], rng: &mut R) -> usize {
    let u = T::sample_unit_open(rng);
    let mut acc = T::zero();
    for (i, &p) in law.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    law.len() - 1
}

/// Draws the holding time in `state` and the state jumped to. `None` for an
/// absorbing state (zero exit rate).
pub(crate) fn hold_and_next<T: Scalar, R: Rng + ?Sized>(
    chain: &VolatilityChain<T>,
    state: usize,
    rng: &mut R,
) -> Option<(T, usize)> {
    let rate = chain.exit_rate(state);
    if rate <= T::zero() {
        return None;
    }
    let hold = T::sample_exp1(rng) / rate;
    let u = T::sample_unit_open(rng) * rate;
    let mut acc = T::zero();
    let m = chain.m();
    let mut next = usize::MAX;
    for j in 0..m {
        if j == state {
            continue;
        }
        acc += chain.intensity().get(state, j);
        if u < acc {
            next = j;
            break;
        }
    }
    if next == usize::MAX {
        // u landed in the last rounding sliver; take the last admissible state
        next = (0..m).rev().find(|&j| j != state && chain.intensity().get(state, j) > T::zero())?;
    }
    Some((hold, next))
}

/// Piecewise-constant chain realization on `[0, horizon]`: `states[k]` holds
/// on `[jump_times[k-1], jump_times[k])` with the implicit boundaries 0 and
/// the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainPath<T> {
    jump_times: Vec<T>,
    states: Vec<usize>,
    horizon: T,
}

impl<T: Scalar> ChainPath<T> {
    pub fn new(jump_times: Vec<T>, states: Vec<usize>, horizon: T) -> Result<Self> {
        if states.len() != jump_times.len() + 1 {
            return Err(Error::InvalidPath(format!(
                "{} states for {} jumps",
                states.len(),
                jump_times.len()
            )));
        }
        if horizon <= T::zero() {
            return Err(Error::InvalidPath(format!("horizon {horizon} must be positive")));
        }
        for w in jump_times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidPath("jump times not strictly increasing".into()));
            }
        }
        if let (Some(&first), Some(&last)) = (jump_times.first(), jump_times.last()) {
            if first <= T::zero() || last >= horizon {
                return Err(Error::InvalidPath("jump times outside (0, horizon)".into()));
            }
        }
        if states.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidPath("consecutive states equal across a jump".into()));
        }
        Ok(Self { jump_times, states, horizon })
    }

    #[inline]
    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn jump_times(&self) -> &[T] {
        &self.jump_times
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    /// State at time `t` (right-continuous: at a jump time, the new state).
    pub fn state_at(&self, t: T) -> usize {
        let idx = self.jump_times.partition_point(|&jt| jt <= t);
        self.states[idx]
    }

    /// Time spent in each state over the whole path (diagnostic).
    pub fn occupation(&self) -> Vec<T> {
        let m = self.states.iter().max().unwrap() + 1;
        let mut occ = vec![T::zero(); m];
        let mut prev = T::zero();
        for (k, &jt) in self.jump_times.iter().enumerate() {
            occ[self.states[k]] += jt - prev;
            prev = jt;
        }
        occ[*self.states.last().unwrap()] += self.horizon - prev;
        occ
    }
}

/// Exact conditional stats of the log increment over `[s, t]` along `path`:
/// per-segment sums of `(r_i - v_i^2/2) len` and `v_i^2 len`, and the Cox
/// survival weight `exp(-sum n_i len)` (1 for Poisson and fixed-grid
/// policies, where the factor is state-free and cancels).
pub fn segment_stats<T: Scalar>(
    path: &ChainPath<T>,
    s: T,
    t: T,
    model: &MarketModel<T>,
    policy: &ObservationPolicy<T>,
) -> Result<PathSegmentStats<T>> {
    if s < T::zero() || t > path.horizon || s >= t {
        return Err(Error::InvalidPath(format!(
            "segment [{s}, {t}] outside path coverage [0, {}]",
            path.horizon
        )));
    }
    let mut m_acc = T::zero();
    let mut s2_acc = T::zero();
    let mut n_acc = T::zero();
    let mut seg_start = s;
    let mut idx = path.jump_times.partition_point(|&jt| jt <= s);
    loop {
        let seg_end = match path.jump_times.get(idx) {
            Some(&jt) if jt < t => jt,
            _ => t,
        };
        let len = seg_end - seg_start;
        let st = path.states[idx];
        m_acc += model.log_drift(st) * len;
        s2_acc += model.vol()[st] * model.vol()[st] * len;
        if let ObservationPolicy::Cox { intensity } = policy {
            n_acc += intensity[st] * len;
        }
        if seg_end >= t {
            break;
        }
        seg_start = seg_end;
        idx += 1;
    }
    PathSegmentStats::new(m_acc, s2_acc, (-n_acc).exp())
}

/// Exact continuous-time simulation of the chain.
pub fn simulate_chain<T: Scalar>(
    chain: &VolatilityChain<T>,
    horizon: T,
    seed: u64,
) -> ChainPath<T> {
    assert!(horizon > T::zero(), "horizon must be positive");
    let mut rng = rng_stream(seed, STREAM_SIM_PATH);
    let mut state = sample_index(chain.initial_law(), &mut rng);
    let mut t = T::zero();
    let mut jump_times = Vec::new();
    let mut states = vec![state];
    while let Some((hold, next)) = hold_and_next(chain, state, &mut rng) {
        t += hold;
        if t >= horizon {
            break;
        }
        jump_times.push(t);
        states.push(next);
        state = next;
    }
    ChainPath { jump_times, states, horizon }
}

/// Observation times in `(0, horizon]`. Cox arrivals by thinning against
/// `max_i n_i` (exact; the path is known), Poisson by exponential gaps, fixed
/// grid by integer multiples of the step.
pub fn simulate_arrivals<T: Scalar>(
    path: &ChainPath<T>,
    policy: &ObservationPolicy<T>,
    seed: u64,
) -> Vec<T> {
    let mut rng = rng_stream(seed, STREAM_SIM_ARRIVALS);
    let horizon = path.horizon;
    let mut out = Vec::new();
    match policy {
        ObservationPolicy::Cox { intensity } => {
            let n_max = intensity.iter().fold(T::zero(), |a, &b| a.max(b));
            let mut t = T::zero();
            loop {
                t += T::sample_exp1(&mut rng) / n_max;
                if t > horizon {
                    break;
                }
                let accept = intensity[path.state_at(t)] / n_max;
                if T::sample_unit_open(&mut rng) < accept {
                    out.push(t);
                }
            }
        }
        ObservationPolicy::Poisson { rate } => {
            let mut t = T::zero();
            loop {
                t += T::sample_exp1(&mut rng) / *rate;
                if t > horizon {
                    break;
                }
                out.push(t);
            }
        }
        ObservationPolicy::FixedGrid { step } => {
            // slack absorbs k*h landing a few ulps past the horizon
            let slack = *step * T::of(1e-9);
            let mut k = 1u64;
            loop {
                let t = T::from_u64(k).unwrap() * *step;
                if t > horizon + slack {
                    break;
                }
                out.push(t.min(horizon));
                k += 1;
            }
        }
    }
    out
}

/// Log prices at the arrival times: `x0` at time 0, then exact Gaussian
/// increments with the segment stats of the realized path.
pub fn simulate_ticks<T: Scalar>(
    path: &ChainPath<T>,
    model: &MarketModel<T>,
    policy: &ObservationPolicy<T>,
    arrivals: &[T],
    seed: u64,
) -> Vec<Tick<T>> {
    let mut rng = rng_stream(seed, STREAM_SIM_TICKS);
    let mut ticks = Vec::with_capacity(arrivals.len() + 1);
    let mut x = model.x0();
    let mut prev = T::zero();
    ticks.push(Tick { time: prev, log_price: x });
    for &t in arrivals {
        assert!(t > prev, "arrivals must be strictly increasing");
        let stats = segment_stats(path, prev, t, model, policy)
            .expect("arrivals lie inside the path horizon");
        x += stats.m + stats.s2.sqrt() * T::sample_standard_normal(&mut rng);
        ticks.push(Tick { time: t, log_price: x });
        prev = t;
    }
    ticks
}

/// A full simulated scenario: the hidden path, the observed ticks, and the
/// true state at each tick time for evaluation.
#[derive(Clone, Debug)]
pub struct SimOutput<T> {
    pub path: ChainPath<T>,
    pub ticks: Vec<Tick<T>>,
    pub true_states_at_ticks: Vec<usize>,
}

pub fn simulate<T: Scalar>(
    chain: &VolatilityChain<T>,
    model: &MarketModel<T>,
    policy: &ObservationPolicy<T>,
    horizon: T,
    seed: u64,
) -> SimOutput<T> {
    let path = simulate_chain(chain, horizon, seed);
    let arrivals = simulate_arrivals(&path, policy, seed);
    let ticks = simulate_ticks(&path, model, policy, &arrivals, seed);
    let true_states_at_ticks = ticks.iter().map(|tk| path.state_at(tk.time)).collect();
    SimOutput { path, ticks, true_states_at_ticks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::SquareMatrix;

    fn symmetric_chain(m_states: usize, rate: f64) -> VolatilityChain<f64> {
        let off = rate / (m_states - 1) as f64;
        let rows: Vec<Vec<f64>> = (0..m_states)
            .map(|i| {
                (0..m_states)
                    .map(|j| if i == j { -rate } else { off })
                    .collect()
            })
            .collect();
        VolatilityChain::new(
            (0..m_states).map(|i| 0.1 * (i + 1) as f64).collect(),
            SquareMatrix::from_rows(&rows).unwrap(),
            vec![1.0 / m_states as f64; m_states],
        )
        .unwrap()
    }

    #[test]
    fn frozen_chain_never_jumps() {
        let chain = VolatilityChain::new(
            vec![1.0, 2.0],
            SquareMatrix::zeros(2),
            vec![0.25, 0.75],
        )
        .unwrap();
        let path = simulate_chain(&chain, 10.0, 3);
        assert!(path.jump_times().is_empty());
        assert_eq!(path.states().len(), 1);
    }

    #[test]
    fn single_state_path_is_constant() {
        let chain = VolatilityChain::new(
            vec![0.2],
            SquareMatrix::zeros(1),
            vec![1.0],
        )
        .unwrap();
        let path = simulate_chain(&chain, 5.0, 9);
        assert_eq!(path.states(), &[0]);
        assert_eq!(path.state_at(3.3), 0);
    }

    #[test]
    fn symmetric_chain_spends_half_time_in_each_state() {
        // stationary law of the symmetric 2-state chain is (1/2, 1/2)
        let chain = symmetric_chain(2, 2.0);
        let path = simulate_chain(&chain, 1000.0, 42);
        let occ = path.occupation();
        let frac = occ[1] / 1000.0;
        assert!((frac - 0.5).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn fixed_grid_times_quarter_step() {
        let chain = symmetric_chain(2, 1.0);
        let path = simulate_chain(&chain, 1.0, 1);
        let arr = simulate_arrivals(&path, &ObservationPolicy::FixedGrid { step: 0.25 }, 1);
        assert_eq!(arr, vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn fixed_grid_handles_inexact_steps() {
        let chain = symmetric_chain(2, 1.0);
        let path = simulate_chain(&chain, 0.3, 1);
        let arr = simulate_arrivals(&path, &ObservationPolicy::FixedGrid { step: 0.1 }, 1);
        assert_eq!(arr.len(), 3, "{arr:?}");
    }

    #[test]
    fn poisson_rate_law_of_large_numbers() {
        let chain = symmetric_chain(2, 1.0);
        let path = simulate_chain(&chain, 1000.0, 5);
        let arr = simulate_arrivals(&path, &ObservationPolicy::Poisson { rate: 4.0 }, 5);
        let rate = arr.len() as f64 / 1000.0;
        assert!((rate - 4.0).abs() < 0.2, "rate {rate}");
    }

    #[test]
    fn cox_rate_matches_ergodic_average() {
        // fast symmetric chain spends half its time in each state, so the
        // long-run arrival rate is (1 + 9) / 2 = 5
        let chain = symmetric_chain(2, 20.0);
        let path = simulate_chain(&chain, 1000.0, 8);
        let policy = ObservationPolicy::Cox { intensity: vec![1.0, 9.0] };
        let arr = simulate_arrivals(&path, &policy, 8);
        let rate = arr.len() as f64 / 1000.0;
        assert!((rate - 5.0).abs() < 0.3, "rate {rate}");
    }

    #[test]
    fn cox_gaps_with_constant_intensity_pass_ks_against_exponential() {
        // thinning against a constant intensity must reproduce Poisson gaps;
        // one-sample Kolmogorov-Smirnov at N = 1e4
        let chain = symmetric_chain(2, 1.0);
        let path = simulate_chain(&chain, 2500.0, 13);
        let policy = ObservationPolicy::Cox { intensity: vec![4.0, 4.0] };
        let arr = simulate_arrivals(&path, &policy, 13);
        assert!(arr.len() > 10_000);
        let mut gaps: Vec<f64> = Vec::with_capacity(10_000);
        let mut prev = 0.0;
        for &t in arr.iter().take(10_000) {
            gaps.push(t - prev);
            prev = t;
        }
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = gaps.len() as f64;
        let mut d: f64 = 0.0;
        for (k, &g) in gaps.iter().enumerate() {
            let cdf = 1.0 - (-4.0 * g).exp();
            let lo = k as f64 / n;
            let hi = (k + 1) as f64 / n;
            d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        // asymptotic Kolmogorov tail: p = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2)
        let lambda = d * n.sqrt();
        let mut p = 0.0;
        for k in 1..100 {
            let term = 2.0 * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
            p += if k % 2 == 1 { term } else { -term };
        }
        assert!(p > 0.01, "KS d = {d}, p = {p}");
    }

    #[test]
    fn martingale_increments_have_zero_mean() {
        // r = v^2/2 makes the log price a martingale
        let v: f64 = 0.3;
        let chain = VolatilityChain::new(
            vec![v],
            SquareMatrix::zeros(1),
            vec![1.0],
        )
        .unwrap();
        let model = MarketModel::new(vec![v * v / 2.0], vec![v], 0.0).unwrap();
        let policy = ObservationPolicy::FixedGrid { step: 0.01 };
        let out = simulate(&chain, &model, &policy, 1000.0, 77);
        let n = out.ticks.len() - 1;
        assert_eq!(n, 100_000);
        let mean: f64 = out
            .ticks
            .windows(2)
            .map(|w| w[1].log_price - w[0].log_price)
            .sum::<f64>()
            / n as f64;
        let band = 3.0 * v * (0.01f64).sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < band, "mean {mean} vs band {band}");
    }

    #[test]
    fn increment_variance_matches_exact_value() {
        let v: f64 = 0.3;
        let chain =
            VolatilityChain::new(vec![v], SquareMatrix::zeros(1), vec![1.0]).unwrap();
        let model = MarketModel::new(vec![0.05], vec![v], 1.7).unwrap();
        let policy = ObservationPolicy::FixedGrid { step: 0.01 };
        let out = simulate(&chain, &model, &policy, 1000.0, 101);
        let incs: Vec<f64> =
            out.ticks.windows(2).map(|w| w[1].log_price - w[0].log_price).collect();
        let n = incs.len() as f64;
        let mean = incs.iter().sum::<f64>() / n;
        let var = incs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.0009).abs() < 0.02 * 0.0009, "variance {var}");
    }

    #[test]
    fn near_floor_vol_gives_deterministic_increments() {
        let v = 1e-6f64;
        let r = 0.25;
        let chain =
            VolatilityChain::new(vec![v], SquareMatrix::zeros(1), vec![1.0]).unwrap();
        let model = MarketModel::new(vec![r], vec![v], 0.0).unwrap();
        let policy = ObservationPolicy::FixedGrid { step: 0.5 };
        let out = simulate(&chain, &model, &policy, 2.0, 3);
        for w in out.ticks.windows(2) {
            let inc = w[1].log_price - w[0].log_price;
            assert!((inc - r * 0.5).abs() < 1e-5, "increment {inc}");
        }
    }

    #[test]
    fn segment_stats_match_riemann_oracle() {
        // independent fine Riemann sum over a two-segment path
        let path = ChainPath::new(vec![0.37], vec![0, 1], 1.0).unwrap();
        let model = MarketModel::new(vec![0.02, -0.01], vec![0.1, 0.4], 0.0).unwrap();
        let policy = ObservationPolicy::Cox { intensity: vec![2.0, 7.0] };
        let (s, t) = (0.1, 0.9);
        let stats = segment_stats(&path, s, t, &model, &policy).unwrap();

        let steps = 800_000;
        let h = (t - s) / steps as f64;
        let (mut m, mut s2, mut ni) = (0.0, 0.0, 0.0);
        for k in 0..steps {
            let mid = s + h * (k as f64 + 0.5);
            let st = if mid < 0.37 { 0 } else { 1 };
            let v = [0.1, 0.4][st];
            let r = [0.02, -0.01][st];
            m += (r - v * v / 2.0) * h;
            s2 += v * v * h;
            ni += [2.0, 7.0][st] * h;
        }
        assert!((stats.m - m).abs() < 1e-9);
        assert!((stats.s2 - s2).abs() < 1e-9);
        assert!((stats.w - (-ni as f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn segment_stats_single_state_closed_form() {
        let path = ChainPath::new(vec![], vec![1], 4.0f64).unwrap();
        let model = MarketModel::new(vec![0.02, 0.05], vec![0.1, 0.2], 0.0).unwrap();
        let policy = ObservationPolicy::Poisson { rate: 1.0 };
        let stats = segment_stats(&path, 0.0, 4.0, &model, &policy).unwrap();
        assert!((stats.m - (0.05 - 0.02) * 4.0).abs() < 1e-15);
        assert!((stats.s2 - 0.04 * 4.0).abs() < 1e-15);
        assert_eq!(stats.w, 1.0);
    }

    #[test]
    fn segment_outside_horizon_is_rejected() {
        let path = ChainPath::new(vec![], vec![0], 1.0).unwrap();
        let model = MarketModel::new(vec![0.0], vec![0.1], 0.0).unwrap();
        let policy = ObservationPolicy::Poisson { rate: 1.0 };
        assert!(segment_stats(&path, 0.5, 1.5, &model, &policy).is_err());
    }

    #[test]
    fn same_seed_reproduces_everything() {
        let chain = symmetric_chain(3, 1.5);
        let model =
            MarketModel::new(vec![0.0, 0.01, 0.02], vec![0.1, 0.2, 0.3], 0.0).unwrap();
        let policy = ObservationPolicy::Cox { intensity: vec![2.0, 5.0, 9.0] };
        let a = simulate(&chain, &model, &policy, 50.0, 12345);
        let b = simulate(&chain, &model, &policy, 50.0, 12345);
        assert_eq!(a.path, b.path);
        assert_eq!(a.ticks, b.ticks);
        let c = simulate(&chain, &model, &policy, 50.0, 12346);
        assert_ne!(a.ticks, c.ticks);
    }
}
