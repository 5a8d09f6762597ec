//! Trajectory CSV files.
//!
//! Columns: `t`, agent states `x[i][k]`, exosystem `xr[k]`, protocol states
//! `chi[i][k]`, observer states `xhat[i][k]` (partial-state kinds), controls
//! `u[i][k]` (pre-saturation), realized `eps[i]` (global kinds) and
//! `sync_error`. Indices are 0-based; numbers carry 17 significant digits so a
//! read reproduces every value exactly.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use satsync_core::protocols::StateLayout;
use satsync_core::sim::Trajectory;

pub fn header(layout: &StateLayout, with_epsilon: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for i in 0..layout.agents {
        for k in 0..layout.n {
            h.push(format!("x[{i}][{k}]"));
        }
    }
    for k in 0..layout.n {
        h.push(format!("xr[{k}]"));
    }
    for i in 0..layout.agents {
        for k in 0..layout.n {
            h.push(format!("chi[{i}][{k}]"));
        }
    }
    if layout.partial {
        for i in 0..layout.agents {
            for k in 0..layout.n {
                h.push(format!("xhat[{i}][{k}]"));
            }
        }
    }
    for i in 0..layout.agents {
        for k in 0..layout.m {
            h.push(format!("u[{i}][{k}]"));
        }
    }
    if with_epsilon {
        for i in 0..layout.agents {
            h.push(format!("eps[{i}]"));
        }
    }
    h.push("sync_error".to_string());
    h
}

fn number(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> io::Result<()> {
    let layout = traj
        .layout
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "trajectory carries no state layout"))?;
    let with_epsilon = traj.epsilons.first().is_some_and(|e| !e.is_empty());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(&layout, with_epsilon))?;
    for k in 0..traj.len() {
        let mut row: Vec<String> = Vec::with_capacity(layout.dim() + 2);
        row.push(number(traj.times[k]));
        row.extend(traj.states[k].iter().map(|v| number(*v)));
        row.extend(traj.controls[k].iter().map(|v| number(*v)));
        if with_epsilon {
            row.extend(traj.epsilons[k].iter().map(|v| number(*v)));
        }
        row.push(number(layout.sync_error(&traj.states[k])));
        w.write_record(&row)?;
    }
    w.flush()
}

pub fn write_trajectory_csv_file(traj: &Trajectory, path: impl AsRef<Path>) -> io::Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_trajectory_csv(traj, file)
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    Number { row: usize, column: String, value: String },
    #[error("missing column {0}")]
    MissingColumn(String),
}

/// A trajectory file read back as a numeric table.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column_index(&self, name: &str) -> Result<usize, CsvError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CsvError::MissingColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, CsvError> {
        let idx = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }

    /// `max_i ‖x_i − x_r‖₂` per row, recomputed from the state columns.
    pub fn sync_error_from_states(&self, agents: usize, n: usize) -> Result<Vec<f64>, CsvError> {
        let xr: Vec<usize> = (0..n)
            .map(|k| self.column_index(&format!("xr[{k}]")))
            .collect::<Result<_, _>>()?;
        let x: Vec<Vec<usize>> = (0..agents)
            .map(|i| {
                (0..n)
                    .map(|k| self.column_index(&format!("x[{i}][{k}]")))
                    .collect::<Result<_, _>>()
            })
            .collect::<Result<_, _>>()?;
        Ok(self
            .rows
            .iter()
            .map(|row| {
                x.iter()
                    .map(|cols| {
                        let sq: f64 = cols.iter().zip(&xr).map(|(&c, &r)| (row[c] - row[r]) * (row[c] - row[r])).sum();
                        sq.sqrt()
                    })
                    .fold(0.0, f64::max)
            })
            .collect())
    }
}

pub fn read_trajectory_csv<R: Read>(input: R) -> Result<CsvTable, CsvError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (idx, record) in r.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, v)| {
                v.parse::<f64>().map_err(|_| CsvError::Number {
                    row: idx,
                    column: header[c].clone(),
                    value: v.to_string(),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}

pub fn read_trajectory_csv_file(path: impl AsRef<Path>) -> Result<CsvTable, CsvError> {
    let file = File::open(path).map_err(csv::Error::from)?;
    read_trajectory_csv(io::BufReader::new(file))
}
