//! Independent reference posterior: a bootstrap particle filter over exact
//! chain paths. Particles propose from the chain dynamics and are weighted by
//! the closed-form Gaussian increment density and, under Cox arrivals, the
//! exact survival factor and arrival intensity. None of the precomputed
//! tables, interpolation, or ODE machinery is involved, so agreement with the
//! deterministic filter checks the whole pipeline, not a shared code path.
//!
//! Determinism: each (interval, particle) pair owns an RNG stream keyed by
//! its indices, simulation runs in fixed-size parallel chunks over disjoint
//! scratch, and every weight reduction is a sequential pass in particle
//! order. The output is a pure function of the inputs and the seed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{PointKind, TrajectoryPoint};
use crate::model::{MarketModel, ObservationPolicy, Tick, VolatilityChain};
use crate::scalar::Scalar;
use crate::sim::{
    hold_and_next, rng_stream, STREAM_TAG_ORACLE, STREAM_TAG_ORACLE_INIT, STREAM_TAG_RESAMPLE,
};

const CHUNK_PARTICLES: usize = 4096;

#[derive(Clone, Copy, Debug)]
pub struct OracleOptions {
    pub particles: usize,
    pub seed: u64,
}

/// Per-particle record of one inter-arrival interval: the state and the
/// accumulated arrival integral at each probe time, then the full-interval
/// increment statistics for the tick weight.
struct IntervalScratch {
    probe_state: Vec<usize>,
    probe_surv: Vec<f64>,
    end_state: usize,
    mean: f64,
    var: f64,
    n_integral: f64,
}

/// Runs the particle filter over the tick series, reporting rows in the same
/// shape and order as the deterministic filter. A leading tick at time 0 is
/// the starting price, exactly as the filter treats it.
pub fn particle_oracle<T: Scalar>(
    chain: &VolatilityChain<T>,
    model: &MarketModel<T>,
    policy: &ObservationPolicy<T>,
    ticks: &[Tick<T>],
    probe_times: &[T],
    options: &OracleOptions,
) -> Result<Vec<TrajectoryPoint<T>>> {
    policy.validate(chain.m())?;
    if model.m() != chain.m() {
        return Err(Error::InvalidModel(format!(
            "market model has {} states, chain has {}",
            model.m(),
            chain.m()
        )));
    }
    if options.particles < 2 {
        return Err(Error::InvalidModel("oracle needs at least 2 particles".into()));
    }
    for w in probe_times.windows(2) {
        if !(w[0] <= w[1]) {
            return Err(Error::InvalidTicks("probe times must be nondecreasing".into()));
        }
    }
    let m = chain.m();
    let n = options.particles;
    let log_drift: Vec<f64> = (0..m).map(|i| model.log_drift(i).as_f64()).collect();
    let var: Vec<f64> = model.vol().iter().map(|&v| (v * v).as_f64()).collect();
    let arr_intensity: Vec<f64> = match policy {
        ObservationPolicy::Cox { intensity } => intensity.iter().map(|&x| x.as_f64()).collect(),
        _ => vec![0.0; m],
    };
    let cox = matches!(policy, ObservationPolicy::Cox { .. });

    let mut ticks = ticks;
    let mut x_prev = model.x0();
    if let Some(first) = ticks.first() {
        if first.time == T::zero() {
            if !first.log_price.is_finite() {
                return Err(Error::InvalidTicks(format!(
                    "starting log price is {}",
                    first.log_price
                )));
            }
            x_prev = first.log_price;
            ticks = &ticks[1..];
        }
    }

    // initial cloud, drawn sequentially from one stream
    let mut states = vec![0usize; n];
    {
        let mut rng = rng_stream(options.seed, STREAM_TAG_ORACLE_INIT);
        for s in &mut states {
            *s = crate::sim::sample_index(chain.initial_law(), &mut rng);
        }
    }
    let mut weights = vec![1.0f64; n];

    let mut out = Vec::with_capacity(ticks.len() + probe_times.len() + 1);
    out.push(TrajectoryPoint {
        time: T::zero(),
        kind: PointKind::Init,
        pi: chain.initial_law().to_vec(),
    });

    let mut probe_idx = 0;
    let mut t_prev = T::zero();
    let mut interval = 0u64;
    let mut tick_no = 0usize;

    let mut scratch: Vec<IntervalScratch> = (0..n)
        .map(|_| IntervalScratch {
            probe_state: Vec::new(),
            probe_surv: Vec::new(),
            end_state: 0,
            mean: 0.0,
            var: 0.0,
            n_integral: 0.0,
        })
        .collect();

    let mut boundary = 0usize;
    loop {
        let next_tick = ticks.get(boundary);
        let interval_end = match next_tick {
            Some(tk) => {
                if !(tk.time > t_prev) || !tk.time.is_finite() {
                    return Err(Error::InvalidTicks(format!(
                        "tick {} at t = {} does not advance past {}",
                        tick_no + 1,
                        tk.time,
                        t_prev
                    )));
                }
                if !tk.log_price.is_finite() {
                    return Err(Error::InvalidTicks(format!(
                        "tick {} has log price {}",
                        tick_no + 1,
                        tk.log_price
                    )));
                }
                tk.time
            }
            // no more ticks: one last stretch out to the final probe; any
            // remaining probe is >= t_prev because earlier intervals consumed
            // everything before their tick
            None => match probe_times[probe_idx..].last() {
                Some(&last) => last,
                None => break,
            },
        };
        let probe_lo = probe_idx;
        while probe_idx < probe_times.len() {
            let take = match next_tick {
                Some(tk) => probe_times[probe_idx] < tk.time,
                None => probe_times[probe_idx] <= interval_end,
            };
            if !take {
                break;
            }
            probe_idx += 1;
        }
        let probes = &probe_times[probe_lo..probe_idx];
        let targets: Vec<f64> = probes
            .iter()
            .map(|&t| (t - t_prev).as_f64())
            .chain(std::iter::once((interval_end - t_prev).as_f64()))
            .collect();

        let seed = options.seed;
        scratch
            .par_chunks_mut(CHUNK_PARTICLES)
            .zip(states.par_chunks(CHUNK_PARTICLES))
            .enumerate()
            .for_each(|(chunk_idx, (sc_chunk, st_chunk))| {
                let base = chunk_idx * CHUNK_PARTICLES;
                for (off, (sc, &start)) in sc_chunk.iter_mut().zip(st_chunk).enumerate() {
                    let stream =
                        STREAM_TAG_ORACLE | (interval << 32) | (base + off) as u64;
                    let mut rng = rng_stream(seed, stream);
                    advance_particle(
                        chain,
                        start,
                        &targets,
                        &log_drift,
                        &var,
                        &arr_intensity,
                        &mut rng,
                        sc,
                    );
                }
            });

        // probe rows: reweight by survival to the probe time without
        // touching the carried weights
        for (pi_idx, &probe_t) in probes.iter().enumerate() {
            let mut num = vec![0.0f64; m];
            let mut den = 0.0f64;
            for p in 0..n {
                let w = if cox { weights[p] * scratch[p].probe_surv[pi_idx] } else { weights[p] };
                num[scratch[p].probe_state[pi_idx]] += w;
                den += w;
            }
            if !(den > 0.0) || !den.is_finite() {
                return Err(Error::WeightCollapse {
                    index: tick_no,
                    time: probe_t.as_f64(),
                    ess: 0.0,
                });
            }
            out.push(TrajectoryPoint {
                time: probe_t,
                kind: PointKind::Probe,
                pi: num.iter().map(|&x| T::of(x / den)).collect(),
            });
        }

        let tk = match next_tick {
            Some(tk) => *tk,
            None => break,
        };

        // tick update: survival and arrival intensity (Cox), Gaussian density
        let dz = (tk.log_price - x_prev).as_f64();
        for p in 0..n {
            let sc = &scratch[p];
            let mut w = weights[p];
            if cox {
                w *= (-sc.n_integral).exp() * arr_intensity[sc.end_state];
            }
            let d = dz - sc.mean;
            w *= (-0.5 * d * d / sc.var).exp()
                / (sc.var * 2.0 * std::f64::consts::PI).sqrt();
            weights[p] = w;
            states[p] = sc.end_state;
        }
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut num = vec![0.0f64; m];
        for p in 0..n {
            sum += weights[p];
            sum_sq += weights[p] * weights[p];
            num[states[p]] += weights[p];
        }
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::WeightCollapse {
                index: tick_no + 1,
                time: tk.time.as_f64(),
                ess: 0.0,
            });
        }
        out.push(TrajectoryPoint {
            time: tk.time,
            kind: PointKind::Tick,
            pi: num.iter().map(|&x| T::of(x / sum)).collect(),
        });

        // normalize, then resample when the effective size halves
        for w in &mut weights {
            *w /= sum;
        }
        let ess = 1.0 / (sum_sq / (sum * sum));
        if ess < n as f64 * 0.5 {
            systematic_resample(&mut states, &mut weights, options.seed, interval);
        }

        x_prev = tk.log_price;
        t_prev = tk.time;
        tick_no += 1;
        boundary += 1;
        interval += 1;
    }

    Ok(out)
}

/// Walks one particle across the interval, stopping at each target offset
/// (probes, then the interval end) to record state and survival exposure.
#[allow(clippy::too_many_arguments)]
fn advance_particle<T: Scalar>(
    chain: &VolatilityChain<T>,
    start: usize,
    targets: &[f64],
    log_drift: &[f64],
    var: &[f64],
    arr_intensity: &[f64],
    rng: &mut rand_chacha::ChaCha8Rng,
    sc: &mut IntervalScratch,
) {
    let n_probes = targets.len() - 1;
    sc.probe_state.clear();
    sc.probe_surv.clear();
    let mut state = start;
    let mut t = 0.0f64;
    let mut mean = 0.0f64;
    let mut s2 = 0.0f64;
    let mut n_int = 0.0f64;
    let mut next_jump =
        hold_and_next(chain, state, rng).map(|(hold, next)| (hold.as_f64(), next));
    for (idx, &target) in targets.iter().enumerate() {
        // advance to this target, jumping as needed
        loop {
            match next_jump {
                Some((jump_t, next)) if jump_t <= target => {
                    let d = jump_t - t;
                    mean += log_drift[state] * d;
                    s2 += var[state] * d;
                    n_int += arr_intensity[state] * d;
                    t = jump_t;
                    state = next;
                    next_jump = hold_and_next(chain, state, rng)
                        .map(|(hold, nx)| (jump_t + hold.as_f64(), nx));
                }
                _ => break,
            }
        }
        let d = target - t;
        mean += log_drift[state] * d;
        s2 += var[state] * d;
        n_int += arr_intensity[state] * d;
        t = target;
        if idx < n_probes {
            sc.probe_state.push(state);
            sc.probe_surv.push((-n_int).exp());
        }
    }
    sc.end_state = state;
    sc.mean = mean;
    sc.var = s2.max(f64::MIN_POSITIVE);
    sc.n_integral = n_int;
}

/// Systematic resampling: one uniform offset, `n` equally spaced points
/// through the weight CDF. Weights reset to uniform.
fn systematic_resample(states: &mut Vec<usize>, weights: &mut [f64], seed: u64, interval: u64) {
    let n = states.len();
    let mut rng = rng_stream(seed, STREAM_TAG_RESAMPLE | (interval << 32));
    let u0: f64 = f64::sample_unit_open(&mut rng);
    let mut picked = Vec::with_capacity(n);
    let mut cdf = weights[0];
    let mut src = 0usize;
    for k in 0..n {
        let point = (k as f64 + u0) / n as f64;
        while point > cdf && src + 1 < n {
            src += 1;
            cdf += weights[src];
        }
        picked.push(states[src]);
    }
    *states = picked;
    for w in weights.iter_mut() {
        *w = 1.0 / n as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::SquareMatrix;
    use crate::model::transition_matrix;
    use crate::sim::simulate;

    fn two_state(
        v: (f64, f64),
        n_rates: (f64, f64),
    ) -> (VolatilityChain<f64>, MarketModel<f64>, ObservationPolicy<f64>) {
        let chain = VolatilityChain::new(
            vec![v.0, v.1],
            SquareMatrix::from_rows(&[vec![-0.5, 0.5], vec![0.5, -0.5]]).unwrap(),
            vec![0.5, 0.5],
        )
        .unwrap();
        let model = MarketModel::new(vec![0.0, 0.0], vec![v.0, v.1], 0.0).unwrap();
        let policy = ObservationPolicy::Cox { intensity: vec![n_rates.0, n_rates.1] };
        (chain, model, policy)
    }

    #[test]
    fn single_state_rows_are_all_one() {
        let chain =
            VolatilityChain::new(vec![0.3], SquareMatrix::zeros(1), vec![1.0]).unwrap();
        let model = MarketModel::new(vec![0.1], vec![0.3], 0.0).unwrap();
        let policy = ObservationPolicy::Cox { intensity: vec![4.0] };
        let sim = simulate(&chain, &model, &policy, 1.0, 5);
        let opts = OracleOptions { particles: 64, seed: 9 };
        let rows =
            particle_oracle(&chain, &model, &policy, &sim.ticks, &[0.3, 0.9], &opts).unwrap();
        for row in rows {
            assert_eq!(row.pi, vec![1.0]);
        }
    }

    #[test]
    fn uninformative_oracle_tracks_kolmogorov_within_mc_error() {
        // equal everything: the true posterior is the prior pushed through
        // exp(t Lambda); the particle estimate must sit within a few
        // binomial standard errors of it
        let (chain, model, policy) = two_state((0.2, 0.2), (6.0, 6.0));
        let sim = simulate(&chain, &model, &policy, 1.5, 31);
        let probes = [0.2, 0.65, 1.1, 1.45];
        let opts = OracleOptions { particles: 50_000, seed: 17 };
        let rows =
            particle_oracle(&chain, &model, &policy, &sim.ticks, &probes, &opts).unwrap();
        let tol = 4.0 * 0.5 / (50_000f64).sqrt();
        for row in &rows {
            let p = transition_matrix(&chain, row.time);
            let mut want = vec![0.0; 2];
            p.transpose_apply(chain.initial_law(), &mut want);
            for i in 0..2 {
                assert!(
                    (row.pi[i] - want[i]).abs() < tol,
                    "t={} kind={:?}: {:?} vs {:?}",
                    row.time,
                    row.kind,
                    row.pi,
                    want
                );
            }
        }
    }

    #[test]
    fn oracle_is_deterministic_across_thread_counts() {
        let (chain, model, policy) = two_state((0.1, 0.4), (5.0, 15.0));
        let sim = simulate(&chain, &model, &policy, 1.0, 3);
        let probes = [0.15, 0.4, 0.85];
        let opts = OracleOptions { particles: 6000, seed: 77 };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    particle_oracle(&chain, &model, &policy, &sim.ticks, &probes, &opts).unwrap()
                })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
    }

    #[test]
    fn estimates_converge_as_particles_grow() {
        let (chain, model, policy) = two_state((0.1, 0.4), (5.0, 15.0));
        let sim = simulate(&chain, &model, &policy, 2.0, 13);
        assert!(sim.ticks.len() > 10);
        let small = OracleOptions { particles: 1000, seed: 21 };
        let big = OracleOptions { particles: 100_000, seed: 22 };
        let rows_s =
            particle_oracle(&chain, &model, &policy, &sim.ticks, &[], &small).unwrap();
        let rows_b = particle_oracle(&chain, &model, &policy, &sim.ticks, &[], &big).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in rows_s.iter().zip(&rows_b) {
            let tv = 0.5 * (a.pi[0] - b.pi[0]).abs() + 0.5 * (a.pi[1] - b.pi[1]).abs();
            worst = worst.max(tv);
        }
        // dominated by the 1000-particle noise, a few times 1/sqrt(1000)
        assert!(worst < 0.12, "worst tick TV {worst}");
        assert!(worst > 1e-4, "suspiciously exact agreement: {worst}");
    }

    #[test]
    fn impossible_increment_collapses_weights() {
        let (chain, model, policy) = two_state((0.1, 0.4), (5.0, 15.0));
        let ticks = [
            Tick { time: 0.0, log_price: 0.0 },
            Tick { time: 0.1, log_price: 1000.0 },
        ];
        let opts = OracleOptions { particles: 500, seed: 4 };
        let err = particle_oracle(&chain, &model, &policy, &ticks, &[], &opts).unwrap_err();
        assert!(matches!(err, Error::WeightCollapse { index: 1, .. }), "{err}");
    }

    #[test]
    fn probe_rows_interleave_like_the_filter() {
        let (chain, model, policy) = two_state((0.1, 0.4), (5.0, 15.0));
        let ticks = [
            Tick { time: 0.0, log_price: 0.0 },
            Tick { time: 0.5, log_price: 0.02 },
            Tick { time: 1.0, log_price: 0.01 },
        ];
        let probes = [0.25, 0.5, 0.75, 1.25];
        let opts = OracleOptions { particles: 200, seed: 8 };
        let rows = particle_oracle(&chain, &model, &policy, &ticks, &probes, &opts).unwrap();
        let kinds: Vec<_> = rows.iter().map(|r| (r.time, r.kind)).collect();
        assert_eq!(
            kinds,
            vec![
                (0.0, PointKind::Init),
                (0.25, PointKind::Probe),
                (0.5, PointKind::Tick),
                (0.5, PointKind::Probe),
                (0.75, PointKind::Probe),
                (1.0, PointKind::Tick),
                (1.25, PointKind::Probe),
            ]
        );
    }
}
