//! Tracking a hidden, finite-state stochastic volatility from asset prices
//! observed at random times.
//!
//! The volatility follows a continuous-time Markov chain over a finite set of
//! levels. Prices arrive as ticks whose times may themselves be informative:
//! under a Cox observation policy the arrival intensity depends on the hidden
//! state, so both the price increments and the spacing of the ticks carry
//! information. The filter maintains the exact posterior over the hidden
//! state, updating it at every tick and evolving it between ticks, where the
//! very absence of arrivals is evidence.
//!
//! The tick update needs the joint density of (gap, increment, end state)
//! given the start state. That has no closed form for a general chain, so it
//! is precomputed offline by Monte Carlo into a [`table::StructureTable`] the
//! filter interpolates at run time. A particle-filter reference
//! ([`oracle::particle_oracle`]) estimates the same posterior from nothing
//! but exact simulation, as an independent cross-check.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); `*64`
//! aliases fix the common case.

pub mod config;
pub mod csvio;
mod error;
pub mod filter;
pub mod matrix;
pub mod model;
pub mod oracle;
mod scalar;
pub mod sim;
pub mod table;

pub use config::{Config, GridSettings, PathSettings};
pub use error::{Error, Result};
pub use filter::{
    default_rk4_step, probe_times_every, Diagnostics, Filter, FilterOptions, PointKind,
    TrajectoryPoint,
};
pub use matrix::SquareMatrix;
pub use model::{
    log_increment_density, transition_matrix, MarketModel, ObservationPolicy, PathSegmentStats,
    Tick, VolatilityChain,
};
pub use oracle::{particle_oracle, OracleOptions};
pub use scalar::Scalar;
pub use sim::{
    segment_stats, simulate, simulate_arrivals, simulate_chain, simulate_ticks, ChainPath,
    SimOutput,
};
pub use table::{model_hash, GridSpec, StructureTable, DEFAULT_TABLE_CAP_BYTES};

pub type VolatilityChain64 = VolatilityChain<f64>;
pub type MarketModel64 = MarketModel<f64>;
pub type ObservationPolicy64 = ObservationPolicy<f64>;
pub type Tick64 = Tick<f64>;
pub type SquareMatrix64 = SquareMatrix<f64>;
pub type GridSpec64 = GridSpec<f64>;
pub type StructureTable64 = StructureTable<f64>;
pub type Filter64<'t> = Filter<'t, f64>;
pub type FilterOptions64 = FilterOptions<f64>;
pub type TrajectoryPoint64 = TrajectoryPoint<f64>;
pub type ChainPath64 = ChainPath<f64>;
pub type SimOutput64 = SimOutput<f64>;

/// Total variation distance between two distributions on the same states.
pub fn total_variation<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "distributions live on different state counts");
    let sum: T = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum();
    sum * T::of(0.5)
}
