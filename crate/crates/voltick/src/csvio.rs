//! CSV input and output for the command line tools. Floats are written with
//! 17 significant digits so a written file reads back to the same bits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::filter::{PointKind, TrajectoryPoint};
use crate::model::Tick;

fn data_err(path: &Path, row: usize, msg: impl Into<String>) -> Error {
    Error::CsvData { path: path.display().to_string(), row, msg: msg.into() }
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Reads a tick series. The header must be `time,log_price` or `time,price`;
/// with plain prices every value must be positive and is log-transformed,
/// and the returned flag is true. Times must be strictly increasing and may
/// start at 0 (the starting price).
pub fn read_ticks(path: &Path) -> Result<(Vec<Tick<f64>>, bool)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::file(path, e))?;
    let headers = reader.headers().map_err(|e| data_err(path, 0, e.to_string()))?;
    if headers.len() != 2 || &headers[0] != "time" {
        return Err(data_err(path, 0, "header must be `time,log_price` or `time,price`"));
    }
    let logs = match &headers[1] {
        "log_price" => false,
        "price" => true,
        other => {
            return Err(data_err(
                path,
                0,
                format!("second column must be log_price or price, got `{other}`"),
            ))
        }
    };
    let mut ticks = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| data_err(path, row, e.to_string()))?;
        if record.len() != 2 {
            return Err(data_err(path, row, format!("expected 2 fields, got {}", record.len())));
        }
        let time: f64 = record[0]
            .parse()
            .map_err(|_| data_err(path, row, format!("bad time `{}`", &record[0])))?;
        let value: f64 = record[1]
            .parse()
            .map_err(|_| data_err(path, row, format!("bad value `{}`", &record[1])))?;
        if !time.is_finite() || !value.is_finite() {
            return Err(data_err(path, row, "non-finite entry"));
        }
        if time < 0.0 {
            return Err(data_err(path, row, format!("negative time {time}")));
        }
        if time <= prev {
            return Err(data_err(
                path,
                row,
                format!("time {time} does not increase past {prev}"),
            ));
        }
        prev = time;
        let log_price = if logs {
            if value <= 0.0 {
                return Err(data_err(path, row, format!("price {value} must be positive")));
            }
            value.ln()
        } else {
            value
        };
        ticks.push(Tick { time, log_price });
    }
    Ok((ticks, logs))
}

pub fn write_ticks(path: &Path, ticks: &[Tick<f64>]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    writer.write_record(["time", "log_price"])?;
    for tick in ticks {
        writer.write_record([fmt(tick.time), fmt(tick.log_price)])?;
    }
    writer.flush()?;
    Ok(())
}

/// Posterior trajectory: `time,kind,pi_1,...,pi_M`.
pub fn write_trajectory(path: &Path, points: &[TrajectoryPoint<f64>]) -> Result<()> {
    let m = points.first().map_or(0, |p| p.pi.len());
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    let mut header = vec!["time".to_string(), "kind".to_string()];
    for i in 1..=m {
        header.push(format!("pi_{i}"));
    }
    writer.write_record(&header)?;
    for p in points {
        let mut record = vec![fmt(p.time), p.kind.as_str().to_string()];
        record.extend(p.pi.iter().map(|&x| fmt(x)));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::file(path, e))?;
    let headers = reader.headers().map_err(|e| data_err(path, 0, e.to_string()))?;
    if headers.len() < 3 || &headers[0] != "time" || &headers[1] != "kind" {
        return Err(data_err(path, 0, "header must be `time,kind,pi_1,...`"));
    }
    let m = headers.len() - 2;
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| data_err(path, row, e.to_string()))?;
        if record.len() != m + 2 {
            return Err(data_err(
                path,
                row,
                format!("expected {} fields, got {}", m + 2, record.len()),
            ));
        }
        let time: f64 = record[0]
            .parse()
            .map_err(|_| data_err(path, row, format!("bad time `{}`", &record[0])))?;
        let kind = PointKind::parse(&record[1])
            .ok_or_else(|| data_err(path, row, format!("bad kind `{}`", &record[1])))?;
        let mut pi = Vec::with_capacity(m);
        for k in 0..m {
            let x: f64 = record[k + 2]
                .parse()
                .map_err(|_| data_err(path, row, format!("bad value `{}`", &record[k + 2])))?;
            pi.push(x);
        }
        out.push(TrajectoryPoint { time, kind, pi });
    }
    Ok(out)
}

/// True chain state at selected times: `time,state`, states 1-based to match
/// the `pi_i` column names.
pub fn write_truth(path: &Path, rows: &[(f64, usize)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    writer.write_record(["time", "state"])?;
    for &(time, state) in rows {
        writer.write_record([fmt(time), (state + 1).to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ticks.csv");
        let ticks = vec![
            Tick { time: 0.0, log_price: 0.123456789123456789 },
            Tick { time: 0.1 + 1e-17, log_price: -0.5 },
            Tick { time: 2.0 / 3.0, log_price: 1e-300 },
        ];
        write_ticks(&path, &ticks).unwrap();
        let (back, logged) = read_ticks(&path).unwrap();
        assert!(!logged);
        assert_eq!(ticks, back);
    }

    #[test]
    fn plain_prices_are_logged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ticks.csv");
        std::fs::write(&path, "time,price\n0.0,100.0\n0.5,101.3\n").unwrap();
        let (ticks, logged) = read_ticks(&path).unwrap();
        assert!(logged);
        assert_eq!(ticks[0].log_price, 100.0f64.ln());
        assert_eq!(ticks[1].log_price, 101.3f64.ln());
    }

    #[test]
    fn a_header_only_file_is_an_empty_tick_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ticks.csv");
        std::fs::write(&path, "time,log_price\n").unwrap();
        let (ticks, logged) = read_ticks(&path).unwrap();
        assert!(ticks.is_empty());
        assert!(!logged);
    }

    #[test]
    fn bad_rows_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ticks.csv");
        std::fs::write(&path, "time,log_price\n0.0,0.1\n0.0,0.2\n").unwrap();
        let err = read_ticks(&path).unwrap_err();
        assert!(matches!(err, Error::CsvData { row: 2, .. }), "{err}");

        std::fs::write(&path, "time,price\n0.5,-3.0\n").unwrap();
        let err = read_ticks(&path).unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");

        std::fs::write(&path, "time,log_price\n0.5,abc\n").unwrap();
        let err = read_ticks(&path).unwrap_err();
        assert!(err.to_string().contains("abc"), "{err}");

        std::fs::write(&path, "time,midprice\n0.5,3.0\n").unwrap();
        let err = read_ticks(&path).unwrap_err();
        assert!(err.to_string().contains("midprice"), "{err}");
    }

    #[test]
    fn trajectory_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let points = vec![
            TrajectoryPoint { time: 0.0, kind: PointKind::Init, pi: vec![0.5, 0.5] },
            TrajectoryPoint {
                time: 0.25,
                kind: PointKind::Probe,
                pi: vec![0.123456789012345678, 0.876543210987654322],
            },
            TrajectoryPoint { time: 0.5, kind: PointKind::Tick, pi: vec![1.0 / 3.0, 2.0 / 3.0] },
        ];
        write_trajectory(&path, &points).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(points, back);
    }

    #[test]
    fn truth_states_are_one_based() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        write_truth(&path, &[(0.0, 0), (0.5, 1)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("time,state"));
        assert!(lines.next().unwrap().ends_with(",1"));
        assert!(lines.next().unwrap().ends_with(",2"));
    }
}
