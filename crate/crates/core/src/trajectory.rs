//! Uniformly sampled paths and their on-disk formats.
//!
//! Binary layout: one line of compact JSON header
//! `{model_id, d, dt, n_steps, seed, burn_in}` terminated by `\n`, followed by
//! the row-major little-endian `f64` position block (`(n_steps + 1) × d`) and
//! then the velocity block of the same shape.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub model_id: String,
    pub d: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub burn_in: f64,
}

/// A path sampled at `t_k = k dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub model_id: String,
    pub d: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub burn_in: f64,
    /// Positions, `(n_steps + 1) × d`, row-major.
    pub x: Vec<f64>,
    /// Velocities, same shape as `x`.
    pub y: Vec<f64>,
}

impl Trajectory {
    pub fn from_parts(header: TrajectoryHeader, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let rows = header.n_steps + 1;
        if x.len() != rows * header.d || y.len() != rows * header.d {
            return Err(Error::Format(format!(
                "expected {} values per block, got {} and {}",
                rows * header.d,
                x.len(),
                y.len()
            )));
        }
        if !(header.dt > 0.0) {
            return Err(invalid("dt", "time step must be positive"));
        }
        Ok(Self {
            model_id: header.model_id,
            d: header.d,
            dt: header.dt,
            n_steps: header.n_steps,
            seed: header.seed,
            burn_in: header.burn_in,
            x,
            y,
        })
    }

    pub fn header(&self) -> TrajectoryHeader {
        TrajectoryHeader {
            model_id: self.model_id.clone(),
            d: self.d,
            dt: self.dt,
            n_steps: self.n_steps,
            seed: self.seed,
            burn_in: self.burn_in,
        }
    }

    /// Recorded horizon `n_steps · dt`.
    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    #[inline]
    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.d..(k + 1) * self.d]
    }

    #[inline]
    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.d..(k + 1) * self.d]
    }

    /// Calls `f(x_k, y_k, y_{k+1} − y_k)` for `k = 0..n_steps`.
    pub fn for_each_increment<F: FnMut(&[f64], &[f64], &[f64])>(&self, mut f: F) {
        let d = self.d;
        let mut dy = vec![0.0; d];
        for k in 0..self.n_steps {
            let y0 = self.y_at(k);
            let y1 = self.y_at(k + 1);
            for i in 0..d {
                dy[i] = y1[i] - y0[i];
            }
            f(self.x_at(k), y0, &dy);
        }
    }

    /// Every `stride`-th sample; the horizon shrinks to a multiple of `stride · dt`.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(invalid("stride", "must be positive"));
        }
        let n = self.n_steps / stride;
        let d = self.d;
        let mut x = Vec::with_capacity((n + 1) * d);
        let mut y = Vec::with_capacity((n + 1) * d);
        for k in 0..=n {
            x.extend_from_slice(self.x_at(k * stride));
            y.extend_from_slice(self.y_at(k * stride));
        }
        Ok(Self {
            dt: self.dt * stride as f64,
            n_steps: n,
            x,
            y,
            ..self.clone()
        })
    }

    pub fn write_binary<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        serde_json::to_writer(&mut w, &self.header())?;
        w.write_all(b"\n")?;
        for block in [&self.x, &self.y] {
            for v in block.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(reader: R) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format("missing header terminator".into()));
        }
        let header: TrajectoryHeader = serde_json::from_slice(&line[..line.len() - 1])?;
        let count = (header.n_steps + 1) * header.d;
        let mut read_block = || -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; count * 8];
            r.read_exact(&mut bytes)
                .map_err(|e| Error::Format(format!("truncated data block: {e}")))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let x = read_block()?;
        let y = read_block()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after velocity block".into()));
        }
        Self::from_parts(header, x, y)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_binary(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_binary(std::fs::File::open(path)?)
    }

    /// CSV with columns `t, x1..xd, y1..yd`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=self.d).map(|i| format!("x{i}")));
        cols.extend((1..=self.d).map(|i| format!("y{i}")));
        writeln!(w, "{}", cols.join(","))?;
        for k in 0..=self.n_steps {
            write!(w, "{}", k as f64 * self.dt)?;
            for v in self.x_at(k).iter().chain(self.y_at(k)) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}
