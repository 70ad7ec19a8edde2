//! Node-sampled solution paths and CSV output.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::GridSpec;

/// Matrix-valued path sampled at the `K + 1` grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct NodePath {
    pub grid: GridSpec,
    pub values: Vec<Mat>,
}

impl NodePath {
    pub fn new(grid: GridSpec, values: Vec<Mat>) -> Result<Self> {
        if values.len() != grid.nodes() {
            return Err(Error::Precondition(format!(
                "path needs {} node samples, got {}",
                grid.nodes(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Path equal to `value` at every node.
    pub fn constant(grid: GridSpec, value: Mat) -> Self {
        Self {
            grid,
            values: vec![value; grid.nodes()],
        }
    }

    /// Sample at node `k`.
    pub fn at(&self, k: usize) -> &Mat {
        &self.values[k]
    }

    /// Sample governing time `t` under the right-continuous rule.
    pub fn value(&self, t: f64) -> Result<&Mat> {
        Ok(&self.values[self.grid.piece(t)?])
    }

    /// Largest entrywise difference over all nodes.
    pub fn max_abs_diff(&self, other: &NodePath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| linalg::max_abs_diff(a, b))
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry over all nodes.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(linalg::max_abs).fold(0.0, f64::max)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }
}

/// Formats a real with 15 significant digits, trimming trailing zeros, in
/// fixed notation for moderate exponents and scientific notation otherwise.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.14e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if (-5..15).contains(&exp) {
        let decimals = (14 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        trim_zeros(&s)
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Column names for the row-major entries of a matrix called `name`.
pub fn column_names(name: &str, rows: usize, cols: usize) -> Vec<String> {
    if rows == 1 && cols == 1 {
        vec![name.to_string()]
    } else if cols == 1 {
        (1..=rows).map(|i| format!("{name}_{i}")).collect()
    } else {
        let mut out = Vec::with_capacity(rows * cols);
        for i in 1..=rows {
            for j in 1..=cols {
                out.push(format!("{name}_{i}{j}"));
            }
        }
        out
    }
}

/// Writes a header row followed by numeric rows.
pub fn write_table(path: impl AsRef<Path>, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| fmt_num(*v)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes several node paths on a shared grid as one CSV: `t` followed by
/// the row-major entries of each path.
pub fn write_paths(path: impl AsRef<Path>, series: &[(&str, &NodePath)]) -> Result<()> {
    let Some((_, first)) = series.first() else {
        return Err(Error::Precondition("no series to write".into()));
    };
    let grid = first.grid;
    let mut header = vec!["t".to_string()];
    for (name, p) in series {
        if p.values.len() != grid.nodes() {
            return Err(Error::Precondition(format!("series `{name}` is on a different grid")));
        }
        let (r, c) = p.shape();
        header.extend(column_names(name, r, c));
    }
    let rows: Vec<Vec<f64>> = (0..grid.nodes())
        .map(|k| {
            let mut row = vec![grid.time(k)];
            for (_, p) in series {
                row.extend(linalg::row_major(p.at(k)));
            }
            row
        })
        .collect();
    write_table(path, &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(-0.5), "-0.5");
        assert_eq!(fmt_num(0.594268), "0.594268");
        assert_eq!(fmt_num(1e-7), "1e-7");
        assert_eq!(fmt_num(1.5e20), "1.5e20");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333333");
        let x: f64 = 123_456.789_012_345_68;
        assert_eq!(fmt_num(x).parse::<f64>().unwrap(), 123456.789012346);
    }

    #[test]
    fn column_naming() {
        assert_eq!(column_names("pi", 1, 1), vec!["pi"]);
        assert_eq!(column_names("rho", 2, 1), vec!["rho_1", "rho_2"]);
        assert_eq!(column_names("Pi", 2, 2), vec!["Pi_11", "Pi_12", "Pi_21", "Pi_22"]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(1.0, 2).unwrap();
        let p = NodePath::constant(grid, linalg::scalar(0.25));
        let file = dir.path().join("p.csv");
        write_paths(&file, &[("pi", &p)]).unwrap();
        let text = std::fs::read_to_string(&file).unwrap();
        assert_eq!(text, "t,pi\n0,0.25\n0.5,0.25\n1,0.25\n");
    }
}
