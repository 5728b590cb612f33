//! Supervised samples `(r, sigma, t_go) -> u` and their CSV form.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::datagen::GenerationConfig;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 5] = ["traj_id", "r", "sigma", "t_go", "u"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub traj_id: usize,
    pub r: f64,
    pub sigma: f64,
    pub t_go: f64,
    pub u: f64,
}

impl Sample {
    /// Regression input `psi = (r, sigma, t_go)`.
    pub fn psi(&self) -> [f64; 3] {
        [self.r, self.sigma, self.t_go]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub provenance: Option<GenerationConfig>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Vec<[f64; 3]> {
        self.samples.iter().map(Sample::psi).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.u).collect()
    }

    /// Subset in the order given by `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn trajectory_count(&self) -> usize {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.traj_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for s in &self.samples {
            // `{}` on f64 prints the shortest string that round-trips exactly.
            out.write_record(&[
                s.traj_id.to_string(),
                s.r.to_string(),
                s.sigma.to_string(),
                s.t_go.to_string(),
                s.u.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(Error::InvalidConfig(format!(
                "unexpected dataset header {:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        let samples = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<Sample>, _>>()?;
        Ok(Dataset::new(samples))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
}

impl Standardizer {
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], scale: [1.0; 3] }
    }

    /// Fits mean and (population) standard deviation per dimension; constant
    /// dimensions keep unit scale.
    pub fn fit(points: &[[f64; 3]]) -> Self {
        let n = points.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for p in points {
            for d in 0..3 {
                mean[d] += p[d];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 3];
        for p in points {
            for d in 0..3 {
                var[d] += (p[d] - mean[d]).powi(2);
            }
        }
        let scale = var.map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 && s.is_finite() { s } else { 1.0 }
        });
        Self { mean, scale }
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.mean[0]) / self.scale[0],
            (p[1] - self.mean[1]) / self.scale[1],
            (p[2] - self.mean[2]) / self.scale[2],
        ]
    }

    pub fn apply_all(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points.iter().map(|p| self.apply(p)).collect()
    }
}
