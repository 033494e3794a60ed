//! The posterior filter over the hidden volatility state: an exact Bayes
//! update at every tick, and between ticks either the plain forward equation
//! (policies whose arrival times carry no information) or the inter-arrival
//! ODE whose drain terms account for the absence of arrivals (Cox policy).
//!
//! The filter keeps two posteriors. The anchor is the posterior at the last
//! tick; it only changes in `tick_update`, which always starts from it. The
//! current posterior is the anchor propagated to some later time for probe
//! output. Tick updates therefore never depend on how, or whether, the
//! posterior was probed in between.

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::model::{
    transition_matrix, MarketModel, ObservationPolicy, Tick, VolatilityChain,
};
use crate::scalar::Scalar;
use crate::table::{model_hash, StructureTable, SurvivalProfile};

/// What a trajectory row is: the prior before any data, a posterior at a
/// tick, or a propagated posterior between ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointKind {
    Init,
    Tick,
    Probe,
}

impl PointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PointKind::Init => "init",
            PointKind::Tick => "tick",
            PointKind::Probe => "probe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "init" => Some(PointKind::Init),
            "tick" => Some(PointKind::Tick),
            "probe" => Some(PointKind::Probe),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint<T> {
    pub time: T,
    pub kind: PointKind,
    pub pi: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct FilterOptions<T> {
    /// RK4 step for the inter-arrival ODE; `None` picks a step that resolves
    /// the fastest rate in the model.
    pub rk4_step: Option<T>,
    /// When every state's tick likelihood underflows to zero, fall back to
    /// the no-update prediction and keep going instead of erroring.
    pub degenerate_fallback: bool,
}

impl<T> Default for FilterOptions<T> {
    fn default() -> Self {
        Self { rk4_step: None, degenerate_fallback: false }
    }
}

/// Run counters. The conservation residual is `|sum_i D_i + Dbar|` measured
/// at every RK4 stage; both terms are built from the same drain vector and
/// the same survival mass, so it can only be float reassociation noise.
#[derive(Clone, Copy, Debug)]
pub struct Diagnostics<T> {
    pub max_conservation_abs: T,
    pub max_conservation_rel: T,
    pub degenerate_ticks: usize,
    pub ticks: usize,
}

impl<T: Scalar> Default for Diagnostics<T> {
    fn default() -> Self {
        Self {
            max_conservation_abs: T::zero(),
            max_conservation_rel: T::zero(),
            degenerate_ticks: 0,
            ticks: 0,
        }
    }
}

pub struct Filter<'t, T: Scalar> {
    chain: VolatilityChain<T>,
    policy: ObservationPolicy<T>,
    table: &'t StructureTable<T>,
    rk4_step: T,
    fallback: bool,
    x_prev: T,
    anchor: Vec<T>,
    anchor_time: T,
    current: Vec<T>,
    current_time: T,
    /// `P(current_time - anchor_time)`, advanced incrementally inside RK4.
    pcur: SquareMatrix<T>,
    /// Survival quadrature for the anchor posterior; rebuilt after each tick.
    profile: Option<SurvivalProfile<T>>,
    diag: Diagnostics<T>,
    tick_index: usize,
}

impl<'t, T: Scalar> Filter<'t, T> {
    pub fn new(
        chain: &VolatilityChain<T>,
        model: &MarketModel<T>,
        policy: &ObservationPolicy<T>,
        table: &'t StructureTable<T>,
        options: FilterOptions<T>,
    ) -> Result<Self> {
        policy.validate(chain.m())?;
        if model.m() != chain.m() {
            return Err(Error::InvalidModel(format!(
                "market model has {} states, chain has {}",
                model.m(),
                chain.m()
            )));
        }
        if model_hash(chain, model, policy) != *table.hash() {
            return Err(Error::TableMismatch(
                "filter model differs from the one the table was built for".into(),
            ));
        }
        let step = match options.rk4_step {
            Some(h) => {
                if !(h > T::zero() && h.is_finite()) {
                    return Err(Error::InvalidModel(format!("rk4 step {h} must be positive")));
                }
                h
            }
            None => default_rk4_step(chain, policy, table.grid().t_max),
        };
        let m = chain.m();
        let anchor = chain.initial_law().to_vec();
        Ok(Self {
            chain: chain.clone(),
            policy: policy.clone(),
            table,
            rk4_step: step,
            fallback: options.degenerate_fallback,
            x_prev: model.x0(),
            anchor: anchor.clone(),
            anchor_time: T::zero(),
            current: anchor,
            current_time: T::zero(),
            pcur: SquareMatrix::identity(m),
            profile: None,
            diag: Diagnostics::default(),
            tick_index: 0,
        })
    }

    pub fn posterior(&self) -> &[T] {
        &self.current
    }

    pub fn time(&self) -> T {
        self.current_time
    }

    pub fn anchor(&self) -> (&[T], T) {
        (&self.anchor, self.anchor_time)
    }

    pub fn diagnostics(&self) -> Diagnostics<T> {
        self.diag
    }

    /// Bayes update at a tick. Starts from the anchor posterior regardless of
    /// any propagation done since the last tick.
    pub fn tick_update(&mut self, tick: Tick<T>) -> Result<()> {
        let dt = tick.time - self.anchor_time;
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::InvalidTicks(format!(
                "tick {} at t = {} does not advance past {}",
                self.tick_index + 1,
                tick.time,
                self.anchor_time
            )));
        }
        if !tick.log_price.is_finite() {
            return Err(Error::InvalidTicks(format!(
                "tick {} has log price {}",
                self.tick_index + 1,
                tick.log_price
            )));
        }
        let dz = tick.log_price - self.x_prev;
        let m = self.chain.m();
        let pt = self.table.transition_at(dt.min(self.table.grid().t_max));
        let mut post = vec![T::zero(); m];
        let mut total = T::zero();
        for i in 0..m {
            let mut acc = T::zero();
            for j in 0..m {
                acc += self.table.eval_q_with(&pt, j, i, dt, dz)? * self.anchor[j];
            }
            let weighted = match self.policy.state_intensity(i) {
                Some(n) => n * acc,
                None => acc,
            };
            post[i] = weighted;
            total += weighted;
        }
        if !(total > T::zero()) || !total.is_finite() {
            self.diag.degenerate_ticks += 1;
            if !self.fallback {
                return Err(Error::DegenerateLikelihood {
                    index: self.tick_index + 1,
                    time: tick.time.as_f64(),
                });
            }
            // no usable likelihood: keep the prediction
            let mut pred = vec![T::zero(); m];
            pt.transpose_apply(&self.anchor, &mut pred);
            let s: T = pred.iter().copied().sum();
            for x in &mut pred {
                *x /= s;
            }
            post = pred;
        } else {
            for x in &mut post {
                *x /= total;
            }
        }
        self.anchor = post;
        self.anchor_time = tick.time;
        self.current = self.anchor.clone();
        self.current_time = tick.time;
        self.pcur = SquareMatrix::identity(m);
        self.profile = None;
        self.x_prev = tick.log_price;
        self.tick_index += 1;
        self.diag.ticks += 1;
        Ok(())
    }

    /// Advances the current posterior to time `t` in the open interval since
    /// the last tick. Poisson and fixed-grid arrivals carry no information,
    /// so the posterior follows the forward equation exactly; Cox arrivals
    /// make silence informative and the full ODE is integrated with RK4.
    pub fn propagate(&mut self, t: T) -> Result<()> {
        if !t.is_finite() || t < self.current_time {
            return Err(Error::InvalidTicks(format!(
                "probe time {t} is behind the filter time {}",
                self.current_time
            )));
        }
        if t == self.current_time {
            return Ok(());
        }
        let delta_end = t - self.anchor_time;
        if !matches!(self.policy, ObservationPolicy::Cox { .. }) {
            let p = transition_matrix(&self.chain, delta_end);
            let mut next = vec![T::zero(); self.chain.m()];
            p.transpose_apply(&self.anchor, &mut next);
            let s: T = next.iter().copied().sum();
            for x in &mut next {
                *x /= s;
            }
            self.current = next;
            self.current_time = t;
            self.pcur = p;
            return Ok(());
        }

        let t_max = self.table.grid().t_max;
        if delta_end > t_max * T::of(1.0 + 1e-9) {
            return Err(Error::HorizonExceeded {
                dt: delta_end.as_f64(),
                t_max: t_max.as_f64(),
            });
        }
        if self.profile.is_none() {
            self.profile = Some(self.table.survival_profile(&self.policy, &self.anchor)?);
        }

        // The table is piecewise linear in t, so the field has derivative
        // kinks at node boundaries. Integrating each inter-node segment
        // separately keeps every Runge-Kutta step on a smooth field and
        // preserves fourth-order accuracy.
        let node_dt = self.table.node_dt();
        let half = T::of(0.5);
        let mut pa = self.pcur.clone();
        let mut y = self.current.clone();
        let m = self.chain.m();
        let mut k2 = vec![T::zero(); m];
        let mut k3 = vec![T::zero(); m];
        let mut k4 = vec![T::zero(); m];
        let mut stage = vec![T::zero(); m];
        let mut k1 = vec![T::zero(); m];
        let mut seg_time = self.current_time;
        while seg_time < t {
            let base_delta = seg_time - self.anchor_time;
            // next node strictly ahead; the nudge skips a boundary we are
            // already standing on to within rounding
            let idx = ((base_delta / node_dt).as_f64() + 1e-9).floor() + 1.0;
            let kink = self.anchor_time + node_dt * T::of(idx);
            let mut seg_end = if kink < t { kink } else { t };
            if seg_end <= seg_time {
                seg_end = t;
            }
            let span = seg_end - seg_time;
            let n_steps = (span / self.rk4_step).ceil().as_f64().max(1.0) as usize;
            let h = span / T::from_usize(n_steps).unwrap();
            let phalf = self.table.transition_at(h * half);
            for step in 0..n_steps {
                let pb = pa.matmul(&phalf);
                let pc = pb.matmul(&phalf);
                let d0 = base_delta + h * T::from_usize(step).unwrap();
                let d_half = d0 + h * half;
                let d1 = d0 + h;
                self.ode_field(&pa, d0.min(t_max), &y, &mut k1)?;
                for i in 0..m {
                    stage[i] = y[i] + k1[i] * h * half;
                }
                self.ode_field(&pb, d_half.min(t_max), &stage, &mut k2)?;
                for i in 0..m {
                    stage[i] = y[i] + k2[i] * h * half;
                }
                self.ode_field(&pb, d_half.min(t_max), &stage, &mut k3)?;
                for i in 0..m {
                    stage[i] = y[i] + k3[i] * h;
                }
                self.ode_field(&pc, d1.min(t_max), &stage, &mut k4)?;
                let w = h / T::of(6.0);
                let two = T::of(2.0);
                for i in 0..m {
                    y[i] += w * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
                }
                pa = pc;
            }
            seg_time = seg_end;
        }
        let mut s = T::zero();
        for x in &mut y {
            if *x < T::zero() {
                *x = T::zero();
            }
            s += *x;
        }
        if !(s > T::zero()) || !s.is_finite() {
            return Err(Error::DegenerateSurvival { dt: delta_end.as_f64(), value: s.as_f64() });
        }
        for x in &mut y {
            *x /= s;
        }
        self.current = y;
        self.current_time = t;
        self.pcur = pa;
        Ok(())
    }

    /// Right side of the inter-arrival ODE at gap `delta` since the anchor:
    /// forward generator term plus the drain terms. The drain vector
    /// `u_i = n_i sum_j qbar_ji(delta) anchor_j` is shared by `D_i = -u_i/Z`
    /// and `Dbar = (sum_i u_i)/Z`, making the conservation identity
    /// `sum_i D_i = -Dbar` structural rather than a numerical coincidence;
    /// the residual is still measured and tracked.
    fn ode_field(
        &mut self,
        pt: &SquareMatrix<T>,
        delta: T,
        y: &[T],
        out: &mut [T],
    ) -> Result<()> {
        let m = self.chain.m();
        let profile = self.profile.as_ref().expect("profile built before integrating");
        let z = profile.mass_beyond(delta);
        if !(z > T::zero()) || !z.is_finite() {
            return Err(Error::DegenerateSurvival { dt: delta.as_f64(), value: z.as_f64() });
        }
        let intensity = match &self.policy {
            ObservationPolicy::Cox { intensity } => intensity,
            _ => unreachable!("ode_field is only integrated under a Cox policy"),
        };
        self.chain.intensity().transpose_apply(y, out);
        let mut sum_u = T::zero();
        let mut sum_d = T::zero();
        let mut drains = vec![T::zero(); m];
        for i in 0..m {
            let mut acc = T::zero();
            for j in 0..m {
                acc += self.table.eval_qbar_with(pt, j, i, delta)? * self.anchor[j];
            }
            let u = intensity[i] * acc;
            drains[i] = u / z;
            sum_u += u;
            sum_d += drains[i];
        }
        let dbar = sum_u / z;
        let residual = (dbar - sum_d).abs();
        if residual > self.diag.max_conservation_abs {
            self.diag.max_conservation_abs = residual;
        }
        let tol = T::of(1e-14);
        if !(residual < tol && dbar.abs() < tol) {
            let rel = residual / dbar.abs();
            if rel > self.diag.max_conservation_rel {
                self.diag.max_conservation_rel = rel;
            }
        }
        for i in 0..m {
            out[i] += dbar * y[i] - drains[i];
        }
        Ok(())
    }

    /// Processes all ticks, emitting the posterior at each and at every probe
    /// time. Probes falling on a tick time report the post-update posterior.
    /// A leading tick at time 0 is the known starting price, not an update:
    /// it resets the reference price and produces no row beyond the init one.
    pub fn run(&mut self, ticks: &[Tick<T>], probe_times: &[T]) -> Result<Vec<TrajectoryPoint<T>>> {
        for w in probe_times.windows(2) {
            if !(w[0] <= w[1]) {
                return Err(Error::InvalidTicks("probe times must be nondecreasing".into()));
            }
        }
        if let Some(&first) = probe_times.first() {
            if !(first >= T::zero()) {
                return Err(Error::InvalidTicks(format!("probe time {first} is negative")));
            }
        }
        let mut ticks = ticks;
        if let Some(first) = ticks.first() {
            if first.time == T::zero() && self.tick_index == 0 {
                if !first.log_price.is_finite() {
                    return Err(Error::InvalidTicks(format!(
                        "starting log price is {}",
                        first.log_price
                    )));
                }
                self.x_prev = first.log_price;
                ticks = &ticks[1..];
            }
        }
        let mut out = Vec::with_capacity(ticks.len() + probe_times.len() + 1);
        out.push(TrajectoryPoint {
            time: self.anchor_time,
            kind: PointKind::Init,
            pi: self.anchor.clone(),
        });
        let mut p = 0;
        for tick in ticks {
            while p < probe_times.len() && probe_times[p] < tick.time {
                self.propagate(probe_times[p])?;
                out.push(TrajectoryPoint {
                    time: probe_times[p],
                    kind: PointKind::Probe,
                    pi: self.current.clone(),
                });
                p += 1;
            }
            self.tick_update(*tick)?;
            out.push(TrajectoryPoint {
                time: tick.time,
                kind: PointKind::Tick,
                pi: self.current.clone(),
            });
        }
        while p < probe_times.len() {
            self.propagate(probe_times[p])?;
            out.push(TrajectoryPoint {
                time: probe_times[p],
                kind: PointKind::Probe,
                pi: self.current.clone(),
            });
            p += 1;
        }
        Ok(out)
    }
}

/// Default ODE step: 1e-3 scaled down by the fastest rate in play, so one
/// step never spans a meaningful fraction of a transition or arrival.
pub fn default_rk4_step<T: Scalar>(
    chain: &VolatilityChain<T>,
    policy: &ObservationPolicy<T>,
    t_max: T,
) -> T {
    let mut rate = chain.max_exit_rate().max(t_max.recip());
    if let ObservationPolicy::Cox { intensity } = policy {
        for &n in intensity {
            rate = rate.max(n);
        }
    }
    T::of(1e-3) / rate.max(T::one())
}

/// Probe times `every, 2 every, ...` up to and including `horizon` (within a
/// relative slack for inexact steps).
pub fn probe_times_every<T: Scalar>(horizon: T, every: T) -> Vec<T> {
    assert!(every > T::zero() && horizon >= T::zero());
    let mut out = Vec::new();
    let slack = horizon * T::of(1e-12);
    let mut k = 1usize;
    loop {
        let t = every * T::from_usize(k).unwrap();
        if t > horizon + slack {
            break;
        }
        out.push(t.min(horizon));
        k += 1;
    }
    out
}
