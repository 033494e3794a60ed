//! Flat `section.key = value` configuration for the command line tools.
//! Parsing is strict: unknown keys, duplicate keys, malformed numbers, and
//! missing required keys are all errors that name the offending line. `dump`
//! prints the canonical form, which parses back to the same configuration.
//!
//! This surface is deliberately `f64`: it describes models for the binaries,
//! not the generic core.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::model::{MarketModel, ObservationPolicy, VolatilityChain};
use crate::table::GridSpec;

/// Grid settings as written; the z range stays optional until a model is
/// available to derive the default from.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSettings {
    pub t_max: f64,
    pub n_t: usize,
    pub z_min: Option<f64>,
    pub z_max: Option<f64>,
    pub n_z: usize,
    pub n_paths: usize,
    pub max_table_mb: Option<u64>,
}

impl GridSettings {
    /// Concrete grid for a model: an unspecified z range widens to the
    /// worst-case drift span plus eight standard deviations at the horizon.
    pub fn to_spec(&self, model: &MarketModel<f64>, seed: u64) -> GridSpec<f64> {
        let (dlo, dhi) = GridSpec::default_z_range(model, self.t_max);
        GridSpec {
            t_max: self.t_max,
            n_t: self.n_t,
            z_min: self.z_min.unwrap_or(dlo),
            z_max: self.z_max.unwrap_or(dhi),
            n_z: self.n_z,
            n_paths: self.n_paths,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathSettings {
    pub table: Option<String>,
    pub ticks: Option<String>,
    pub output: Option<String>,
    pub truth: Option<String>,
    pub oracle: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Config {
    pub chain: VolatilityChain<f64>,
    pub model: MarketModel<f64>,
    pub policy: ObservationPolicy<f64>,
    pub grid: Option<GridSettings>,
    pub seed: u64,
    pub rk4_step: Option<f64>,
    pub probe_every: Option<f64>,
    pub fallback: bool,
    pub sim_horizon: Option<f64>,
    pub oracle_particles: Option<usize>,
    pub paths: PathSettings,
}

struct RawEntries {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawEntries {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::Config { line: line_no, msg: "empty key".into() });
            }
            if let Some((first_line, _)) = entries.get(&key) {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("duplicate key `{key}` (first set on line {first_line})"),
                });
            }
            entries.insert(key, (line_no, value));
        }
        Ok(Self { entries })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn take_required(&mut self, key: &str) -> Result<(usize, String)> {
        self.take(key).ok_or_else(|| Error::Config {
            line: 0,
            msg: format!("missing required key `{key}`"),
        })
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Config { line, msg: format!("unknown key `{key}`") });
        }
        Ok(())
    }
}

fn parse_f64(line: usize, key: &str, s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Config {
        line,
        msg: format!("`{key}` expects a number, got `{s}`"),
    })
}

fn parse_usize(line: usize, key: &str, s: &str) -> Result<usize> {
    s.parse::<usize>().map_err(|_| Error::Config {
        line,
        msg: format!("`{key}` expects a nonnegative integer, got `{s}`"),
    })
}

fn parse_u64(line: usize, key: &str, s: &str) -> Result<u64> {
    s.parse::<u64>().map_err(|_| Error::Config {
        line,
        msg: format!("`{key}` expects a nonnegative integer, got `{s}`"),
    })
}

fn parse_bool(line: usize, key: &str, s: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config {
            line,
            msg: format!("`{key}` expects true or false, got `{s}`"),
        }),
    }
}

fn parse_vec(line: usize, key: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|part| parse_f64(line, key, part.trim()))
        .collect()
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut raw = RawEntries::parse(text)?;

        let (line, s) = raw.take_required("model.vol")?;
        let vol = parse_vec(line, "model.vol", &s)?;
        let m = vol.len();
        let (line, s) = raw.take_required("model.drift")?;
        let drift = parse_vec(line, "model.drift", &s)?;
        let (line, s) = raw.take_required("model.prior")?;
        let prior = parse_vec(line, "model.prior", &s)?;
        let x0 = match raw.take("model.x0") {
            Some((line, s)) => parse_f64(line, "model.x0", &s)?,
            None => 0.0,
        };
        let mut rows = Vec::with_capacity(m);
        for i in 1..=m {
            let key = format!("model.intensity_{i}");
            let (line, s) = raw.take_required(&key)?;
            let row = parse_vec(line, &key, &s)?;
            if row.len() != m {
                return Err(Error::Config {
                    line,
                    msg: format!("`{key}` has {} entries, the model has {m} states", row.len()),
                });
            }
            rows.push(row);
        }
        let intensity = SquareMatrix::from_rows(&rows)?;
        let chain = VolatilityChain::new(vol.clone(), intensity, prior)?;
        let model = MarketModel::new(drift, vol, x0)?;

        let (line, s) = raw.take_required("policy.kind")?;
        let policy = match s.as_str() {
            "cox" => {
                let (line, s) = raw.take_required("policy.intensity")?;
                ObservationPolicy::Cox { intensity: parse_vec(line, "policy.intensity", &s)? }
            }
            "poisson" => {
                let (line, s) = raw.take_required("policy.rate")?;
                ObservationPolicy::Poisson { rate: parse_f64(line, "policy.rate", &s)? }
            }
            "fixed_grid" => {
                let (line, s) = raw.take_required("policy.step")?;
                ObservationPolicy::FixedGrid { step: parse_f64(line, "policy.step", &s)? }
            }
            other => {
                return Err(Error::Config {
                    line,
                    msg: format!(
                        "`policy.kind` must be cox, poisson, or fixed_grid, got `{other}`"
                    ),
                })
            }
        };
        policy.validate(m)?;

        let grid = match raw.take("grid.t_max") {
            Some((line, s)) => {
                let t_max = parse_f64(line, "grid.t_max", &s)?;
                let (line, s) = raw.take_required("grid.n_t")?;
                let n_t = parse_usize(line, "grid.n_t", &s)?;
                let (line, s) = raw.take_required("grid.n_z")?;
                let n_z = parse_usize(line, "grid.n_z", &s)?;
                let (line, s) = raw.take_required("grid.n_paths")?;
                let n_paths = parse_usize(line, "grid.n_paths", &s)?;
                let z_min = match raw.take("grid.z_min") {
                    Some((line, s)) => Some(parse_f64(line, "grid.z_min", &s)?),
                    None => None,
                };
                let z_max = match raw.take("grid.z_max") {
                    Some((line, s)) => Some(parse_f64(line, "grid.z_max", &s)?),
                    None => None,
                };
                let max_table_mb = match raw.take("grid.max_table_mb") {
                    Some((line, s)) => Some(parse_u64(line, "grid.max_table_mb", &s)?),
                    None => None,
                };
                Some(GridSettings { t_max, n_t, z_min, z_max, n_z, n_paths, max_table_mb })
            }
            None => None,
        };

        let seed = match raw.take("seed") {
            Some((line, s)) => parse_u64(line, "seed", &s)?,
            None => 0,
        };
        let rk4_step = match raw.take("filter.rk4_step") {
            Some((line, s)) => Some(parse_f64(line, "filter.rk4_step", &s)?),
            None => None,
        };
        let probe_every = match raw.take("filter.probe_every") {
            Some((line, s)) => Some(parse_f64(line, "filter.probe_every", &s)?),
            None => None,
        };
        let fallback = match raw.take("filter.fallback") {
            Some((line, s)) => parse_bool(line, "filter.fallback", &s)?,
            None => false,
        };
        let sim_horizon = match raw.take("sim.horizon") {
            Some((line, s)) => Some(parse_f64(line, "sim.horizon", &s)?),
            None => None,
        };
        let oracle_particles = match raw.take("oracle.particles") {
            Some((line, s)) => Some(parse_usize(line, "oracle.particles", &s)?),
            None => None,
        };
        let mut paths = PathSettings::default();
        for (slot, key) in [
            (&mut paths.table, "paths.table"),
            (&mut paths.ticks, "paths.ticks"),
            (&mut paths.output, "paths.output"),
            (&mut paths.truth, "paths.truth"),
            (&mut paths.oracle, "paths.oracle"),
        ] {
            if let Some((_, s)) = raw.take(key) {
                *slot = Some(s);
            }
        }

        raw.finish()?;
        Ok(Self {
            chain,
            model,
            policy,
            grid,
            seed,
            rk4_step,
            probe_every,
            fallback,
            sim_horizon,
            oracle_particles,
            paths,
        })
    }

    /// Canonical text form; `parse_str(dump(c))` reproduces `c`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let num = |x: f64| format!("{x:.16e}");
        let vec_line = |xs: &[f64]| {
            xs.iter().map(|&x| num(x)).collect::<Vec<_>>().join(", ")
        };
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "model.vol = {}", vec_line(self.model.vol()));
        let _ = writeln!(out, "model.drift = {}", vec_line(self.model.drift()));
        let _ = writeln!(out, "model.prior = {}", vec_line(self.chain.initial_law()));
        let _ = writeln!(out, "model.x0 = {}", num(self.model.x0()));
        let m = self.chain.m();
        for i in 0..m {
            let row: Vec<f64> = (0..m).map(|j| self.chain.intensity().get(i, j)).collect();
            let _ = writeln!(out, "model.intensity_{} = {}", i + 1, vec_line(&row));
        }
        let _ = writeln!(out, "policy.kind = {}", self.policy.kind_name());
        match &self.policy {
            ObservationPolicy::Cox { intensity } => {
                let _ = writeln!(out, "policy.intensity = {}", vec_line(intensity));
            }
            ObservationPolicy::Poisson { rate } => {
                let _ = writeln!(out, "policy.rate = {}", num(*rate));
            }
            ObservationPolicy::FixedGrid { step } => {
                let _ = writeln!(out, "policy.step = {}", num(*step));
            }
        }
        if let Some(g) = &self.grid {
            let _ = writeln!(out, "grid.t_max = {}", num(g.t_max));
            let _ = writeln!(out, "grid.n_t = {}", g.n_t);
            let _ = writeln!(out, "grid.n_z = {}", g.n_z);
            let _ = writeln!(out, "grid.n_paths = {}", g.n_paths);
            if let Some(z) = g.z_min {
                let _ = writeln!(out, "grid.z_min = {}", num(z));
            }
            if let Some(z) = g.z_max {
                let _ = writeln!(out, "grid.z_max = {}", num(z));
            }
            if let Some(mb) = g.max_table_mb {
                let _ = writeln!(out, "grid.max_table_mb = {mb}");
            }
        }
        if let Some(h) = self.rk4_step {
            let _ = writeln!(out, "filter.rk4_step = {}", num(h));
        }
        if let Some(p) = self.probe_every {
            let _ = writeln!(out, "filter.probe_every = {}", num(p));
        }
        let _ = writeln!(out, "filter.fallback = {}", self.fallback);
        if let Some(h) = self.sim_horizon {
            let _ = writeln!(out, "sim.horizon = {}", num(h));
        }
        if let Some(n) = self.oracle_particles {
            let _ = writeln!(out, "oracle.particles = {n}");
        }
        for (value, key) in [
            (&self.paths.table, "paths.table"),
            (&self.paths.ticks, "paths.ticks"),
            (&self.paths.output, "paths.output"),
            (&self.paths.truth, "paths.truth"),
            (&self.paths.oracle, "paths.oracle"),
        ] {
            if let Some(v) = value {
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "
# two-state demonstration model
seed = 42
model.vol = 0.1, 0.4
model.drift = 0.0, 0.0
model.prior = 0.5, 0.5
model.x0 = 0.0
model.intensity_1 = -0.5, 0.5
model.intensity_2 = 0.5, -0.5
policy.kind = cox
policy.intensity = 5.0, 15.0
grid.t_max = 3.0
grid.n_t = 128
grid.n_z = 256
grid.n_paths = 200000
filter.probe_every = 0.05
sim.horizon = 10.0
oracle.particles = 200000
paths.table = out/table.vtbl
paths.ticks = out/ticks.csv
";

    #[test]
    fn parses_the_example() {
        let cfg = Config::parse_str(EXAMPLE).unwrap();
        assert_eq!(cfg.chain.m(), 2);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.model.vol(), &[0.1, 0.4]);
        assert!(matches!(cfg.policy, ObservationPolicy::Cox { .. }));
        let g = cfg.grid.as_ref().unwrap();
        assert_eq!(g.n_t, 128);
        assert_eq!(g.z_min, None);
        assert_eq!(cfg.paths.table.as_deref(), Some("out/table.vtbl"));
        assert_eq!(cfg.probe_every, Some(0.05));
        assert!(!cfg.fallback);
    }

    #[test]
    fn dump_is_a_parse_fixpoint() {
        let cfg = Config::parse_str(EXAMPLE).unwrap();
        let once = cfg.dump();
        let twice = Config::parse_str(&once).unwrap().dump();
        assert_eq!(once, twice);
    }

    #[test]
    fn unknown_key_names_its_line() {
        let text = format!("{EXAMPLE}\nmodel.banana = 3\n");
        let err = Config::parse_str(&text).unwrap_err();
        match err {
            Error::Config { line, msg } => {
                assert!(msg.contains("model.banana"), "{msg}");
                assert!(line > 0);
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let text = format!("{EXAMPLE}\nseed = 43\n");
        let err = Config::parse_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn wrong_intensity_row_length_is_rejected() {
        let text = EXAMPLE.replace("model.intensity_2 = 0.5, -0.5", "model.intensity_2 = 0.5");
        let err = Config::parse_str(&text).unwrap_err();
        assert!(err.to_string().contains("2 states"), "{err}");
    }

    #[test]
    fn policy_params_of_another_kind_are_unknown_keys() {
        let text = format!("{EXAMPLE}\npolicy.rate = 4.0\n");
        let err = Config::parse_str(&text).unwrap_err();
        assert!(err.to_string().contains("policy.rate"), "{err}");
    }

    #[test]
    fn missing_required_key_is_reported() {
        let text = EXAMPLE.replace("model.prior = 0.5, 0.5", "");
        let err = Config::parse_str(&text).unwrap_err();
        assert!(err.to_string().contains("model.prior"), "{err}");
    }

    #[test]
    fn default_z_range_comes_from_the_model() {
        let cfg = Config::parse_str(EXAMPLE).unwrap();
        let spec = cfg.grid.as_ref().unwrap().to_spec(&cfg.model, cfg.seed);
        let (lo, hi) = GridSpec::default_z_range(&cfg.model, 3.0);
        assert_eq!(spec.z_min, lo);
        assert_eq!(spec.z_max, hi);
        assert_eq!(spec.seed, 42);
        spec.validate().unwrap();
    }

    #[test]
    fn semantic_model_errors_keep_their_own_type() {
        let text = EXAMPLE.replace("model.prior = 0.5, 0.5", "model.prior = 0.5, 0.6");
        let err = Config::parse_str(&text).unwrap_err();
        assert!(matches!(err, Error::InvalidModel(_)), "{err}");
    }

    #[test]
    fn malformed_number_names_line_and_key() {
        let text = EXAMPLE.replace("grid.t_max = 3.0", "grid.t_max = three");
        let err = Config::parse_str(&text).unwrap_err();
        assert!(err.to_string().contains("grid.t_max"), "{err}");
    }
}
