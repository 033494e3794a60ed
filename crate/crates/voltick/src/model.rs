//! Hidden-chain market model: a finite-state Markov volatility process, the
//! log-price dynamics it drives, and the policy generating observation times.

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::scalar::Scalar;

/// Volatilities below this floor are rejected at construction; the density
/// formulas divide by accumulated variance.
pub const V_FLOOR: f64 = 1e-6;

/// Intensity rows must sum to zero within this absolute tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Initial laws must sum to one within this absolute tolerance.
pub const PRIOR_TOL: f64 = 1e-12;

/// Finite-state Markov chain driving the volatility: state values `a_1..a_M`,
/// intensity matrix with rows summing to zero, and the time-0 law.
#[derive(Clone, Debug, PartialEq)]
pub struct VolatilityChain<T> {
    states: Vec<T>,
    intensity: SquareMatrix<T>,
    initial_law: Vec<T>,
}

impl<T: Scalar> VolatilityChain<T> {
    pub fn new(states: Vec<T>, intensity: SquareMatrix<T>, initial_law: Vec<T>) -> Result<Self> {
        let m = states.len();
        if m == 0 {
            return Err(Error::InvalidModel("chain needs at least one state".into()));
        }
        if intensity.n() != m {
            return Err(Error::InvalidModel(format!(
                "intensity is {}x{} but there are {} states",
                intensity.n(),
                intensity.n(),
                m
            )));
        }
        if initial_law.len() != m {
            return Err(Error::InvalidModel(format!(
                "initial law has {} entries for {} states",
                initial_law.len(),
                m
            )));
        }
        if states.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidModel("non-finite state value".into()));
        }
        for i in 0..m {
            let mut row_sum = T::zero();
            for j in 0..m {
                let x = intensity.get(i, j);
                if !x.is_finite() {
                    return Err(Error::InvalidModel(format!(
                        "non-finite intensity entry at ({},{})",
                        i + 1,
                        j + 1
                    )));
                }
                if i != j && x < T::zero() {
                    return Err(Error::InvalidModel(format!(
                        "negative off-diagonal intensity at ({},{})",
                        i + 1,
                        j + 1
                    )));
                }
                row_sum += x;
            }
            if row_sum.abs().as_f64() > ROW_SUM_TOL {
                return Err(Error::InvalidModel(format!(
                    "intensity row {} sums to {:e}, not 0",
                    i + 1,
                    row_sum
                )));
            }
        }
        let mut law_sum = T::zero();
        for (i, &p) in initial_law.iter().enumerate() {
            if !p.is_finite() || p < T::zero() {
                return Err(Error::InvalidModel(format!(
                    "initial law entry {} is {}",
                    i + 1,
                    p
                )));
            }
            law_sum += p;
        }
        if (law_sum - T::one()).abs().as_f64() > PRIOR_TOL {
            return Err(Error::InvalidModel(format!(
                "initial law sums to {law_sum}, not 1"
            )));
        }
        Ok(Self { states, intensity, initial_law })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[T] {
        &self.states
    }

    pub fn intensity(&self) -> &SquareMatrix<T> {
        &self.intensity
    }

    pub fn initial_law(&self) -> &[T] {
        &self.initial_law
    }

    /// Rate of leaving state `i`; zero for an absorbing state.
    #[inline]
    pub fn exit_rate(&self, i: usize) -> T {
        -self.intensity.get(i, i)
    }

    pub fn max_exit_rate(&self) -> T {
        (0..self.m()).map(|i| self.exit_rate(i)).fold(T::zero(), T::max)
    }
}

/// Per-state price dynamics: drift `r_i`, diffusion `v_i`, and the initial
/// log price.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketModel<T> {
    drift: Vec<T>,
    vol: Vec<T>,
    x0: T,
}

impl<T: Scalar> MarketModel<T> {
    pub fn new(drift: Vec<T>, vol: Vec<T>, x0: T) -> Result<Self> {
        if drift.len() != vol.len() {
            return Err(Error::InvalidModel(format!(
                "{} drift entries vs {} vol entries",
                drift.len(),
                vol.len()
            )));
        }
        if drift.is_empty() {
            return Err(Error::InvalidModel("model needs at least one state".into()));
        }
        if drift.iter().any(|r| !r.is_finite()) || !x0.is_finite() {
            return Err(Error::InvalidModel("non-finite drift or x0".into()));
        }
        for (i, &v) in vol.iter().enumerate() {
            if !v.is_finite() || v.as_f64() < V_FLOOR {
                return Err(Error::InvalidModel(format!(
                    "vol entry {} is {v}, below the floor {V_FLOOR:e}",
                    i + 1
                )));
            }
        }
        Ok(Self { drift, vol, x0 })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.drift.len()
    }

    pub fn drift(&self) -> &[T] {
        &self.drift
    }

    pub fn vol(&self) -> &[T] {
        &self.vol
    }

    #[inline]
    pub fn x0(&self) -> T {
        self.x0
    }

    /// Drift of the log price in state `i`: `r_i - v_i^2 / 2`.
    #[inline]
    pub fn log_drift(&self, i: usize) -> T {
        self.drift[i] - self.vol[i] * self.vol[i] * T::of(0.5)
    }
}

/// How observation times arise. Cox arrivals carry information about the
/// hidden state through the per-state intensity; Poisson and fixed-grid
/// arrivals do not.
#[derive(Clone, Debug, PartialEq)]
pub enum ObservationPolicy<T> {
    Cox { intensity: Vec<T> },
    Poisson { rate: T },
    FixedGrid { step: T },
}

impl<T: Scalar> ObservationPolicy<T> {
    /// `m` is the number of chain states a Cox intensity vector must match.
    pub fn validate(&self, m: usize) -> Result<()> {
        match self {
            ObservationPolicy::Cox { intensity } => {
                if intensity.len() != m {
                    return Err(Error::InvalidPolicy(format!(
                        "{} Cox intensities for {} states",
                        intensity.len(),
                        m
                    )));
                }
                for (i, &n) in intensity.iter().enumerate() {
                    if !n.is_finite() || n <= T::zero() {
                        return Err(Error::InvalidPolicy(format!(
                            "Cox intensity {} is {n}, must be positive",
                            i + 1
                        )));
                    }
                }
            }
            ObservationPolicy::Poisson { rate } => {
                if !rate.is_finite() || *rate <= T::zero() {
                    return Err(Error::InvalidPolicy(format!(
                        "Poisson rate is {rate}, must be positive"
                    )));
                }
            }
            ObservationPolicy::FixedGrid { step } => {
                if !step.is_finite() || *step <= T::zero() {
                    return Err(Error::InvalidPolicy(format!(
                        "grid step is {step}, must be positive"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ObservationPolicy::Cox { .. } => "cox",
            ObservationPolicy::Poisson { .. } => "poisson",
            ObservationPolicy::FixedGrid { .. } => "fixed_grid",
        }
    }

    /// Arrival intensity in state `i`, if the policy has one.
    #[inline]
    pub fn state_intensity(&self, i: usize) -> Option<T> {
        match self {
            ObservationPolicy::Cox { intensity } => Some(intensity[i]),
            ObservationPolicy::Poisson { rate } => Some(*rate),
            ObservationPolicy::FixedGrid { .. } => None,
        }
    }

    /// Whether precomputed weights carry the survival factor `exp(-int n)`.
    /// Only Cox tables do; for Poisson the factor is state-independent and
    /// cancels, and a fixed grid has no arrival intensity at all.
    #[inline]
    pub fn weights_survival(&self) -> bool {
        matches!(self, ObservationPolicy::Cox { .. })
    }
}

/// Conditional log-increment statistics along one piecewise-constant
/// volatility segment: mean `m`, variance `s2`, and the survival weight `w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathSegmentStats<T> {
    pub m: T,
    pub s2: T,
    pub w: T,
}

impl<T: Scalar> PathSegmentStats<T> {
    pub fn new(m: T, s2: T, w: T) -> Result<Self> {
        if !m.is_finite() || !s2.is_finite() || !w.is_finite() {
            return Err(Error::InvalidStats("non-finite segment stats".into()));
        }
        if s2 <= T::zero() {
            return Err(Error::InvalidStats(format!("variance {s2} must be positive")));
        }
        if w <= T::zero() || w > T::one() {
            return Err(Error::InvalidStats(format!("weight {w} outside (0, 1]")));
        }
        Ok(Self { m, s2, w })
    }

    /// Composition over adjacent segments: means and variances add, survival
    /// weights multiply. Exact, no tolerance involved.
    pub fn combine(self, later: Self) -> Self {
        Self { m: self.m + later.m, s2: self.s2 + later.s2, w: self.w * later.w }
    }
}

/// One observation: a time and the log price at that time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tick<T> {
    pub time: T,
    pub log_price: T,
}

/// Transition probabilities `P(t) = exp(t * Lambda)`, row `j` being the law of
/// the state time `t` after starting in `j`. Rounding can leave entries a hair
/// negative; those are clamped to zero and the row renormalized, so every row
/// is an exact probability vector.
pub fn transition_matrix<T: Scalar>(chain: &VolatilityChain<T>, t: T) -> SquareMatrix<T> {
    assert!(t >= T::zero() && t.is_finite(), "transition time {t} must be finite and >= 0");
    let mut p = chain.intensity().scale(t).expm();
    let m = p.n();
    for i in 0..m {
        let mut sum = T::zero();
        for j in 0..m {
            let x = p.get(i, j);
            if x < T::zero() {
                debug_assert!(x.as_f64() > -1e-12, "entry ({i},{j}) = {x} too negative");
                p.set(i, j, T::zero());
            } else {
                sum += x;
            }
        }
        for j in 0..m {
            p.set(i, j, p.get(i, j) / sum);
        }
    }
    p
}

/// Gaussian density of a log increment with the given segment stats:
/// `(2 pi s2)^(-1/2) exp(-(y - m)^2 / (2 s2))`.
#[inline]
pub fn log_increment_density<T: Scalar>(stats: &PathSegmentStats<T>, y: T) -> T {
    let d = y - stats.m;
    let two = T::of(2.0);
    (-(d * d) / (two * stats.s2)).exp() / (two * T::PI() * stats.s2).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state_chain(rate: f64) -> VolatilityChain<f64> {
        VolatilityChain::new(
            vec![0.1, 0.4],
            SquareMatrix::from_rows(&[vec![-rate, rate], vec![rate, -rate]]).unwrap(),
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn chain_rejects_bad_rows() {
        let bad = VolatilityChain::new(
            vec![1.0, 2.0],
            SquareMatrix::from_rows(&[vec![-1.0, 0.9], vec![1.0, -1.0]]).unwrap(),
            vec![0.5, 0.5],
        );
        let msg = bad.unwrap_err().to_string();
        assert!(msg.contains("row 1"), "{msg}");
    }

    #[test]
    fn chain_rejects_negative_offdiagonal() {
        let bad = VolatilityChain::new(
            vec![1.0, 2.0],
            SquareMatrix::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap(),
            vec![0.5, 0.5],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn model_enforces_vol_floor() {
        let bad = MarketModel::new(vec![0.0], vec![0.0], 0.0);
        assert!(bad.unwrap_err().to_string().contains("floor"));
        assert!(MarketModel::new(vec![0.0], vec![1e-6], 0.0).is_ok());
    }

    #[test]
    fn transition_at_zero_is_identity() {
        let p = transition_matrix(&two_state_chain(3.0), 0.0);
        assert_eq!(p, SquareMatrix::identity(2));
    }

    #[test]
    fn transition_of_frozen_chain_is_identity() {
        let chain = VolatilityChain::new(
            vec![1.0, 2.0],
            SquareMatrix::zeros(2),
            vec![0.3, 0.7],
        )
        .unwrap();
        assert_eq!(transition_matrix(&chain, 5.0), SquareMatrix::identity(2));
    }

    #[test]
    fn transition_symmetric_two_state_closed_form() {
        // p_11(t) = (1 + exp(-2 rate t)) / 2; rate 1, t 0.5
        let p = transition_matrix(&two_state_chain(1.0), 0.5);
        let expect = 0.5 * (1.0 + (-1.0f64).exp());
        assert!((p.get(0, 0) - expect).abs() < 1e-13, "{}", p.get(0, 0));
        assert!((expect - 0.68394).abs() < 5e-6);
    }

    #[test]
    fn transition_rows_stay_on_simplex() {
        let chain = two_state_chain(7.0);
        for k in 0..40 {
            let p = transition_matrix(&chain, 0.1 * k as f64);
            for i in 0..2 {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(p.row(i).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn density_standard_normal_mode() {
        let stats = PathSegmentStats::new(0.0f64, 1.0, 1.0).unwrap();
        let v = log_increment_density(&stats, 0.0);
        assert!((v - 0.3989422804014327).abs() < 1e-15);
    }

    #[test]
    fn density_is_symmetric_about_mean() {
        // dyadic mean and offsets so y - m is exact and symmetry holds bitwise
        let stats = PathSegmentStats::new(0.25, 0.7, 0.5).unwrap();
        for d in [0.125, 0.5, 2.0] {
            let a = log_increment_density(&stats, 0.25 + d);
            let b = log_increment_density(&stats, 0.25 - d);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn density_normalizes_under_quadrature() {
        // independent trapezoid oracle over m +- 10 sqrt(s2)
        let stats = PathSegmentStats::new(0.01, 0.04, 1.0).unwrap();
        let ked = 200_000;
        let lo = 0.01 - 10.0 * 0.2;
        let hi = 0.01 + 10.0 * 0.2;
        let h = (hi - lo) / ked as f64;
        let mut total = 0.0;
        for k in 0..=ked {
            let y = lo + h * k as f64;
            let w = if k == 0 || k == ked { 0.5 } else { 1.0 };
            total += w * log_increment_density(&stats, y);
        }
        total *= h;
        assert!((total - 1.0).abs() < 1e-8, "integral {total}");
    }

    #[test]
    fn stats_combine_is_exact() {
        let a = PathSegmentStats::new(0.1, 0.2, 0.9).unwrap();
        let b = PathSegmentStats::new(-0.05, 0.3, 0.5).unwrap();
        let c = a.combine(b);
        assert_eq!(c.m, 0.1 + -0.05);
        assert_eq!(c.s2, 0.2 + 0.3);
        assert_eq!(c.w, 0.9 * 0.5);
    }

    #[test]
    fn policy_validation() {
        assert!(ObservationPolicy::Cox { intensity: vec![1.0, 2.0] }.validate(2).is_ok());
        assert!(ObservationPolicy::Cox { intensity: vec![1.0] }.validate(2).is_err());
        assert!(ObservationPolicy::Cox { intensity: vec![1.0, 0.0] }.validate(2).is_err());
        assert!(ObservationPolicy::<f64>::Poisson { rate: 0.0 }.validate(1).is_err());
        assert!(ObservationPolicy::<f64>::FixedGrid { step: 0.25 }.validate(3).is_ok());
    }
}
