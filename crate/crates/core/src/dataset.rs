//! Uniform-rate trajectory records and their CSV form.
//!
//! Columns: `t,x,y,theta,alpha_1..alpha_{N-1},u_1..u_N,f_1..f_N`, values written
//! with 17 significant digits so files round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se2::Pose;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    /// Sample rate in Hz.
    pub rate: f64,
    pub t: Vec<f64>,
    pub poses: Vec<Pose>,
    pub shapes: Vec<Vec<f64>>,
    pub commands: Vec<Vec<f64>>,
    /// Rolling-axis actuator force per unit.
    pub forces: Vec<Vec<f64>>,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn n_units(&self) -> usize {
        self.commands.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.poses.len() != n || self.shapes.len() != n || self.commands.len() != n || self.forces.len() != n {
            return Err(Error::DimensionMismatch("dataset streams differ in length".into()));
        }
        if self.t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("timestamps must increase strictly".into()));
        }
        if !(self.rate > 0.0) {
            return Err(Error::InvalidArgument("rate must be positive".into()));
        }
        let nu = self.n_units();
        if self.commands.iter().chain(&self.forces).any(|v| v.len() != nu)
            || self.shapes.iter().any(|s| s.len() + 1 != nu)
        {
            return Err(Error::DimensionMismatch("inconsistent unit/joint counts across samples".into()));
        }
        Ok(())
    }

    pub fn header(n_units: usize) -> Vec<String> {
        let mut h: Vec<String> = ["t", "x", "y", "theta"].iter().map(|s| s.to_string()).collect();
        h.extend((1..n_units).map(|j| format!("alpha_{j}")));
        h.extend((1..=n_units).map(|i| format!("u_{i}")));
        h.extend((1..=n_units).map(|i| format!("f_{i}")));
        h
    }

    pub fn to_csv_string(&self) -> String {
        let n = self.n_units();
        let mut out = Self::header(n).join(",");
        out.push('\n');
        for k in 0..self.len() {
            let p = &self.poses[k];
            let row: Vec<f64> = [self.t[k], p.x, p.y, p.theta]
                .into_iter()
                .chain(self.shapes[k].iter().copied())
                .chain(self.commands[k].iter().copied())
                .chain(self.forces[k].iter().copied())
                .collect();
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses a CSV with the standard header. The rate is inferred from the
    /// mean sample spacing.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Parse(e.to_string()))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let n_units = header.iter().filter(|h| h.starts_with("u_")).count();
        if n_units < 2 {
            return Err(Error::Parse("need at least two command columns u_1, u_2".into()));
        }
        let expected = Self::header(n_units);
        for name in &expected {
            if !header.contains(name) {
                return Err(Error::Parse(format!("missing column '{name}'")));
            }
        }
        if header != expected {
            return Err(Error::Parse(format!("unexpected column layout; expected {}", expected.join(","))));
        }
        let nj = n_units - 1;
        let mut ds = Self { rate: 0.0, t: vec![], poses: vec![], shapes: vec![], commands: vec![], forces: vec![] };
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    s.trim().parse::<f64>().map_err(|_| {
                        Error::Parse(format!("row {}: column '{}' is not a number", line + 2, expected[c]))
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != expected.len() {
                return Err(Error::Parse(format!("row {} has {} fields", line + 2, vals.len())));
            }
            ds.t.push(vals[0]);
            ds.poses.push(Pose { x: vals[1], y: vals[2], theta: vals[3] });
            ds.shapes.push(vals[4..4 + nj].to_vec());
            ds.commands.push(vals[4 + nj..4 + nj + n_units].to_vec());
            ds.forces.push(vals[4 + nj + n_units..].to_vec());
        }
        if ds.len() < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: ds.len() });
        }
        ds.rate = (ds.len() - 1) as f64 / (ds.t[ds.len() - 1] - ds.t[0]);
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_csv_str(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Write through a temporary sibling file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
