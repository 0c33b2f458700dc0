//! CSV and JSON emission.
//!
//! Floats are written in the shortest decimal form that parses back to the
//! same bits, rows end in `\n`, and every CSV starts with a header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bvsignal::{Atom, Grid, GridSignal};
use crate::error::{Error, Result};

/// Shortest round-trip representation of `x`.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // keep the sign of -0 out of golden files
        return "0".into();
    }
    let s = format!("{x:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// A CSV table built in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// `x, u_1..u_n` with `x` the cell centres.
pub fn signal_table(w: &GridSignal) -> Table {
    let n = w.channels();
    let mut t = Table::new(std::iter::once("x".to_string()).chain((1..=n).map(|c| format!("u_{c}"))));
    for i in 0..w.grid().cells {
        let mut row = vec![fmt_f64(w.grid().center(i))];
        row.extend(w.value(i).iter().map(|v| fmt_f64(*v)));
        t.push(row);
    }
    t
}

pub fn write_signal_csv(path: &Path, w: &GridSignal) -> Result<()> {
    signal_table(w).write(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomRecord {
    pub x: f64,
    pub jump: Vec<f64>,
}

pub fn atom_records(w: &GridSignal) -> Vec<AtomRecord> {
    w.atoms()
        .iter()
        .map(|a| AtomRecord {
            x: w.grid().edge_location(a.edge),
            jump: a.jump.clone(),
        })
        .collect()
}

pub fn write_atoms_json(path: &Path, w: &GridSignal) -> Result<()> {
    write_json(path, &atom_records(w))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&s)?)
}

/// Reads a signal CSV (and optionally its atoms JSON). The grid is recovered
/// from the cell centres, which must be uniform.
pub fn read_signal(csv_path: &Path, atoms_path: Option<&Path>) -> Result<GridSignal> {
    let mut rdr = csv::Reader::from_path(csv_path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("x") || header.len() < 2 {
        return Err(Error::Config(format!(
            "{}: header must be x, u_1..u_n",
            csv_path.display()
        )));
    }
    let n = header.len() - 1;
    let mut xs = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("{}: bad number in column {k}", csv_path.display())))
        };
        xs.push(parse(0)?);
        for c in 1..=n {
            values.push(parse(c)?);
        }
    }
    if xs.len() < 2 {
        return Err(Error::Config(format!("{}: need at least two rows", csv_path.display())));
    }
    let dx = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
    let grid = Grid::new(xs[0] - 0.5 * dx, xs[xs.len() - 1] + 0.5 * dx, xs.len())?;
    for (i, x) in xs.iter().enumerate() {
        if (x - grid.center(i)).abs() > 1e-9 * (1.0 + dx) {
            return Err(Error::Config(format!("{}: cell centres are not uniform", csv_path.display())));
        }
    }
    let atoms = match atoms_path {
        Some(p) => {
            let recs: Vec<AtomRecord> = read_json(p)?;
            recs.into_iter()
                .map(|r| {
                    let j = ((r.x - grid.a) / dx).round() as isize - 1;
                    if j < 0 || j as usize >= grid.edges() {
                        return Err(Error::Config(format!("atom at x = {} is not on an interior node", r.x)));
                    }
                    Ok(Atom {
                        edge: j as usize,
                        jump: r.jump,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    GridSignal::new(grid, n, values, atoms)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}
