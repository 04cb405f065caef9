//! Matrix and trajectory CSV files.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every `f64` exactly.

use std::fs::File;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::numkernel::Mat;
use crate::plant::Trajectory;

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

fn parse_num(path: &Path, row: usize, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| csv_err(path, format!("row {row}: '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(csv_err(path, format!("row {row}: non-finite value")));
    }
    Ok(v)
}

/// Plain comma-separated rows, no header.
pub fn write_matrix_csv(path: &Path, m: &Mat) -> Result<()> {
    let mut w = open_writer(path)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Mat> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(f);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec.iter().map(|s| parse_num(path, i + 1, s)).collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(csv_err(path, format!("row {} has {} columns, expected {}", i + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    Ok(Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Header `k, x_meas_1..n, u_1..m, mode[, x_true_1..n]`. Each episode starts
/// at `k = 0`; its last row (state `x(T)`) has empty input and mode fields.
/// Modes are 1-based in the file.
pub fn write_trajectory_csv(path: &Path, episodes: &[Trajectory]) -> Result<()> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::invalid("no trajectory to write"))?;
    let (n, m) = (first.n(), first.m());
    let truth = episodes.iter().all(Trajectory::has_ground_truth);
    let mut w = open_writer(path)?;
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x_meas_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    header.push("mode".into());
    if truth {
        header.extend((1..=n).map(|i| format!("x_true_{i}")));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for ep in episodes {
        ep.validate(None)?;
        if ep.n() != n || ep.m() != m {
            return Err(Error::invalid("episodes differ in state or input dimension"));
        }
        for k in 0..=ep.len() {
            let mut rec = vec![k.to_string()];
            rec.extend(ep.states_measured[k].iter().map(|v| v.to_string()));
            if k < ep.len() {
                rec.extend(ep.inputs[k].iter().map(|v| v.to_string()));
                rec.push((ep.modes[k] + 1).to_string());
            } else {
                rec.extend(std::iter::repeat_n(String::new(), m + 1));
            }
            if truth {
                let xt = &ep.states_true.as_ref().expect("checked")[k];
                rec.extend(xt.iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<Trajectory>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let (n, m) = (count("x_meas_"), count("u_"));
    let n_true = count("x_true_");
    let mode_col = header.iter().position(|h| h == "mode");
    if header.get(0) != Some("k") || n == 0 || m == 0 || mode_col != Some(1 + n + m) || (n_true != 0 && n_true != n) {
        return Err(csv_err(
            path,
            "header must be k, x_meas_1..n, u_1..m, mode[, x_true_1..n]",
        ));
    }
    let truth = n_true == n;
    let mut episodes = Vec::new();
    let mut cur: Option<Trajectory> = None;
    let mut pending_end = false;
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let k: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| csv_err(path, format!("row {row}: bad step index")))?;
        let x = DVector::from_iterator(n, (1..=n).map(|j| parse_num(path, row, &rec[j])).collect::<Result<Vec<_>>>()?);
        let xt = if truth {
            let off = 2 + n + m;
            Some(DVector::from_iterator(
                n,
                (0..n).map(|j| parse_num(path, row, &rec[off + j])).collect::<Result<Vec<_>>>()?,
            ))
        } else {
            None
        };
        if k == 0 {
            if let Some(t) = cur.take() {
                if !pending_end {
                    return Err(csv_err(path, format!("row {row}: previous episode lacks its final state row")));
                }
                episodes.push(t);
            }
            cur = Some(Trajectory {
                states_true: truth.then(Vec::new),
                states_measured: Vec::new(),
                inputs: Vec::new(),
                modes: Vec::new(),
            });
        } else if pending_end {
            return Err(csv_err(path, format!("row {row}: rows after an episode's final state must restart at k = 0")));
        }
        let t = cur
            .as_mut()
            .ok_or_else(|| csv_err(path, "first data row must have k = 0"))?;
        if k != t.states_measured.len() {
            return Err(csv_err(path, format!("row {row}: step index {k} out of sequence")));
        }
        t.states_measured.push(x);
        if let (Some(v), Some(xt)) = (t.states_true.as_mut(), xt) {
            v.push(xt);
        }
        let mode_field = rec[1 + n + m].trim();
        if mode_field.is_empty() {
            pending_end = true;
            continue;
        }
        pending_end = false;
        let u = DVector::from_iterator(
            m,
            (0..m).map(|j| parse_num(path, row, &rec[1 + n + j])).collect::<Result<Vec<_>>>()?,
        );
        let mode: usize = mode_field
            .parse()
            .ok()
            .filter(|&s| s >= 1)
            .ok_or_else(|| csv_err(path, format!("row {row}: mode must be an integer >= 1")))?;
        t.inputs.push(u);
        t.modes.push(mode - 1);
    }
    match cur {
        Some(t) if pending_end => episodes.push(t),
        Some(_) => return Err(csv_err(path, "last episode lacks its final state row")),
        None => return Err(csv_err(path, "no data rows")),
    }
    for e in &episodes {
        e.validate(None)?;
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{add_measurement_noise, collect_episodes, random_ensemble, EpisodePlan};

    #[test]
    fn matrix_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = Mat::from_row_slice(2, 3, &[1.0 / 3.0, -2.5e-17, 7.0, 0.1, 1e300, -0.0]);
        write_matrix_csv(&p, &m).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
    }

    #[test]
    fn ragged_matrix_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(read_matrix_csv(&p).is_err());
        std::fs::write(&p, "1,x\n").unwrap();
        assert!(read_matrix_csv(&p).is_err());
    }

    #[test]
    fn trajectory_round_trip() {
        let model = random_ensemble(3, 2, 2, 11).unwrap();
        let plan = EpisodePlan {
            steps: 7,
            episode_length: 3,
            input_amplitude: 0.1,
            state_amplitude: 1.0,
        };
        let eps: Vec<_> = collect_episodes(&model, &plan, 5)
            .unwrap()
            .iter()
            .map(|e| add_measurement_noise(e, 0.01, 9).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trajectory_csv(&p, &eps).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("k,x_meas_1,x_meas_2,x_meas_3,u_1,u_2,mode,x_true_1"));
        assert_eq!(read_trajectory_csv(&p).unwrap(), eps);
    }

    #[test]
    fn measured_only_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "k,x_meas_1,u_1,mode\n0,1,1,1\n1,1.5,-1,1\n2,-0.25,,\n").unwrap();
        let eps = read_trajectory_csv(&p).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].len(), 2);
        assert!(!eps[0].has_ground_truth());
        std::fs::write(&p, "k,x_meas_1,u_1,mode\n0,1,1,0\n1,1.5,,\n").unwrap();
        assert!(read_trajectory_csv(&p).is_err());
        std::fs::write(&p, "k,x_meas_1,u_1,mode\n0,1,1,1\n1,1.5,1,1\n").unwrap();
        assert!(read_trajectory_csv(&p).is_err());
    }
}
