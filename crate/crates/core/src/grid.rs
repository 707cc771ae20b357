//! Evaluation meshes on boxes of `ℝ^{2d}` and kernel scatter onto them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::{ConvolvedKernel, UnivariateKernel};

/// One uniformly spaced grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lower: f64,
    pub spacing: f64,
    pub count: usize,
}

impl Axis {
    fn new(lower: f64, upper: f64, mesh: f64) -> Self {
        let width = upper - lower;
        if width <= 0.0 {
            return Self {
                lower,
                spacing: 0.0,
                count: 1,
            };
        }
        let intervals = (width / mesh - 1e-9).ceil().max(1.0) as usize;
        Self {
            lower,
            spacing: width / intervals as f64,
            count: intervals + 1,
        }
    }

    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        self.lower + k as f64 * self.spacing
    }

    pub fn upper(&self) -> f64 {
        self.node(self.count - 1)
    }

    /// Inclusive index range of nodes within `reach` of `c`.
    #[inline]
    fn window(&self, c: f64, reach: f64) -> Option<(usize, usize)> {
        if self.spacing == 0.0 {
            return ((c - self.lower).abs() <= reach).then_some((0, 0));
        }
        let lo = ((c - reach - self.lower) / self.spacing).ceil();
        let hi = ((c + reach - self.lower) / self.spacing).floor();
        let last = (self.count - 1) as f64;
        if hi < 0.0 || lo > last || lo > hi {
            return None;
        }
        Some((lo.max(0.0) as usize, hi.min(last) as usize))
    }
}

/// A regular mesh on the box `D = Π [lower_i, upper_i]`, axes ordered
/// `x_1..x_d, y_1..y_d`; points are enumerated with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub d: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mesh: f64,
    pub axes: Vec<Axis>,
    /// `inf_{(x, y) ∈ D} ‖y‖`.
    pub eps_d: f64,
}

impl EvalGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, mesh: f64) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || lower.len() % 2 != 0 {
            return Err(invalid("domain", "corners must be 2d-vectors of equal length"));
        }
        if !(mesh > 0.0 && mesh.is_finite()) {
            return Err(invalid("mesh", "must be positive"));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite())
        {
            return Err(invalid("domain", "need finite lower <= upper on every axis"));
        }
        let d = lower.len() / 2;
        let axes = lower.iter().zip(&upper).map(|(&l, &u)| Axis::new(l, u, mesh)).collect();
        let eps_d = (d..2 * d)
            .map(|i| {
                let gap = if lower[i] > 0.0 {
                    lower[i]
                } else if upper[i] < 0.0 {
                    -upper[i]
                } else {
                    0.0
                };
                gap * gap
            })
            .sum::<f64>()
            .sqrt();
        Ok(Self {
            d,
            lower,
            upper,
            mesh,
            axes,
            eps_d,
        })
    }

    /// Box with the same `[a, b]` on every position axis and `[c, e]` on every velocity axis.
    pub fn isotropic(d: usize, x: (f64, f64), y: (f64, f64), mesh: f64) -> Result<Self> {
        let mut lower = vec![x.0; d];
        lower.extend(std::iter::repeat_n(y.0, d));
        let mut upper = vec![x.1; d];
        upper.extend(std::iter::repeat_n(y.1, d));
        Self::new(lower, upper, mesh)
    }

    /// Parses `"x:[a,b],y:[c,e]"` (shared by all axes of a block) or
    /// per-axis keys `x1:[..],..,y1:[..],..`.
    pub fn parse_domain(spec: &str, d: usize, mesh: f64) -> Result<Self> {
        let mut lower = vec![f64::NAN; 2 * d];
        let mut upper = vec![f64::NAN; 2 * d];
        let mut rest = spec.trim();
        while !rest.is_empty() {
            let colon = rest
                .find(':')
                .ok_or_else(|| Error::Format(format!("missing `:` in `{rest}`")))?;
            let key = rest[..colon].trim();
            let after = rest[colon + 1..].trim_start();
            let close = after
                .find(']')
                .ok_or_else(|| Error::Format(format!("missing `]` after `{key}`")))?;
            let body = after[..close]
                .trim()
                .strip_prefix('[')
                .ok_or_else(|| Error::Format(format!("missing `[` after `{key}`")))?;
            let (a, b) = body
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("interval for `{key}` needs two bounds")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad bound `{s}` for `{key}`: {e}")))
            };
            let (a, b) = (parse(a)?, parse(b)?);
            let (block, index) = key.split_at(1);
            let offset = match block {
                "x" => 0,
                "y" => d,
                _ => return Err(Error::Format(format!("unknown axis `{key}`"))),
            };
            let targets: Vec<usize> = if index.is_empty() {
                (0..d).collect()
            } else {
                let i: usize = index
                    .parse()
                    .map_err(|_| Error::Format(format!("bad axis index in `{key}`")))?;
                if i == 0 || i > d {
                    return Err(Error::Format(format!("axis `{key}` out of range for d = {d}")));
                }
                vec![i - 1]
            };
            for t in targets {
                lower[offset + t] = a;
                upper[offset + t] = b;
            }
            rest = after[close + 1..].trim_start().trim_start_matches(',').trim_start();
        }
        if lower.iter().any(|v| v.is_nan()) {
            return Err(Error::Format(format!("domain `{spec}` leaves some axis unset")));
        }
        Self::new(lower, upper, mesh)
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest realised spacing.
    pub fn max_spacing(&self) -> f64 {
        self.axes.iter().map(|a| a.spacing).fold(0.0, f64::max)
    }

    /// Volume of one mesh cell; degenerate axes count as 1.
    pub fn cell_volume(&self) -> f64 {
        self.axes
            .iter()
            .map(|a| if a.spacing > 0.0 { a.spacing } else { 1.0 })
            .product()
    }

    /// Writes the coordinates of point `index` into `out` (length `2d`).
    pub fn point_into(&self, mut index: usize, out: &mut [f64]) {
        for (a, axis) in self.axes.iter().enumerate().rev() {
            out[a] = axis.node(index % axis.count);
            index /= axis.count;
        }
    }

    pub fn point(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.d];
        self.point_into(index, &mut out);
        out
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    /// Errors unless the spacing is at most `fraction · h_min`.
    pub fn check_mesh(&self, h_min: f64, fraction: f64) -> Result<()> {
        let limit = fraction * h_min;
        if self.max_spacing() > limit * (1.0 + 1e-12) {
            return Err(invalid(
                "mesh",
                format!(
                    "spacing {} exceeds {fraction} × smallest bandwidth {h_min}",
                    self.max_spacing()
                ),
            ));
        }
        Ok(())
    }

    /// Pairs of point indices that are neighbours along some axis.
    pub fn for_each_edge<F: FnMut(usize, usize)>(&self, mut f: F) {
        let n = self.len();
        let mut stride = 1;
        for axis in self.axes.iter().rev() {
            if axis.count > 1 {
                for i in 0..n {
                    if (i / stride) % axis.count + 1 < axis.count {
                        f(i, i + stride);
                    }
                }
            }
            stride *= axis.count;
        }
    }
}

/// A one-dimensional kernel in original units with compact support.
pub trait AxisKernel {
    /// Support half-width.
    fn reach(&self) -> f64;
    fn value(&self, u: f64) -> f64;
}

/// `u ↦ K(u / h) / h`.
#[derive(Debug, Clone)]
pub struct Scaled<'a> {
    kernel: &'a UnivariateKernel,
    h: f64,
    inv_h: f64,
}

impl<'a> Scaled<'a> {
    pub fn new(kernel: &'a UnivariateKernel, h: f64) -> Self {
        Self {
            kernel,
            h,
            inv_h: 1.0 / h,
        }
    }
}

impl AxisKernel for Scaled<'_> {
    fn reach(&self) -> f64 {
        0.5 * self.h
    }

    #[inline]
    fn value(&self, u: f64) -> f64 {
        self.kernel.eval(u * self.inv_h) * self.inv_h
    }
}

impl AxisKernel for ConvolvedKernel {
    fn reach(&self) -> f64 {
        self.half_width()
    }

    #[inline]
    fn value(&self, u: f64) -> f64 {
        self.eval(u)
    }
}

#[inline]
fn fill<K: AxisKernel>(axis: &Axis, kernel: &K, c: f64, buf: &mut Vec<f64>) -> Option<(usize, usize)> {
    let (lo, hi) = axis.window(c, kernel.reach())?;
    buf.clear();
    buf.extend((lo..=hi).map(|k| kernel.value(axis.node(k) - c)));
    Some((lo, hi))
}

/// Accumulates `Σ_k w_{k,c} Π_a κ_a(node_a − z_{k,a})` on every grid node for
/// `channels` weight streams at once, touching only nodes inside the support.
pub struct Scatter<KX, KY> {
    axes: Vec<Axis>,
    d: usize,
    kx: KX,
    ky: KY,
    channels: usize,
    pub sums: Vec<f64>,
    ranges: Vec<(usize, usize)>,
    weights: Vec<Vec<f64>>,
    counter: Vec<usize>,
}

impl<KX: AxisKernel, KY: AxisKernel> Scatter<KX, KY> {
    pub fn new(grid: &EvalGrid, kx: KX, ky: KY, channels: usize) -> Self {
        let n = 2 * grid.d;
        Self {
            axes: grid.axes.clone(),
            d: grid.d,
            kx,
            ky,
            channels,
            sums: vec![0.0; grid.len() * channels],
            ranges: vec![(0, 0); n],
            weights: vec![Vec::new(); n],
            counter: vec![0; n],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Adds one sample at `(x, y)` with per-channel weights `w`.
    #[inline]
    pub fn push(&mut self, x: &[f64], y: &[f64], w: &[f64]) {
        let d = self.d;
        for a in 0..2 * d {
            let filled = if a < d {
                fill(&self.axes[a], &self.kx, x[a], &mut self.weights[a])
            } else {
                fill(&self.axes[a], &self.ky, y[a - d], &mut self.weights[a])
            };
            match filled {
                Some(r) => self.ranges[a] = r,
                None => return,
            }
        }
        let ch = self.channels;
        if d == 1 {
            let ny = self.axes[1].count;
            let (xlo, _) = self.ranges[0];
            let (ylo, _) = self.ranges[1];
            for (i, &wx) in self.weights[0].iter().enumerate() {
                if wx == 0.0 {
                    continue;
                }
                let row = (xlo + i) * ny + ylo;
                for (j, &wy) in self.weights[1].iter().enumerate() {
                    let base = (row + j) * ch;
                    let k = wx * wy;
                    for c in 0..ch {
                        self.sums[base + c] += k * w[c];
                    }
                }
            }
            return;
        }
        // odometer over the 2d windows
        let n = 2 * d;
        self.counter.iter_mut().for_each(|c| *c = 0);
        loop {
            let mut index = 0;
            let mut k = 1.0;
            for a in 0..n {
                index = index * self.axes[a].count + self.ranges[a].0 + self.counter[a];
                k *= self.weights[a][self.counter[a]];
            }
            if k != 0.0 {
                for c in 0..ch {
                    self.sums[index * ch + c] += k * w[c];
                }
            }
            let mut a = n;
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                self.counter[a] += 1;
                if self.counter[a] < self.weights[a].len() {
                    break;
                }
                self.counter[a] = 0;
            }
        }
    }

    /// Values of channel `c`, each sum multiplied by `scale`.
    pub fn channel(&self, c: usize, scale: f64) -> Vec<f64> {
        self.sums
            .iter()
            .skip(c)
            .step_by(self.channels)
            .map(|v| v * scale)
            .collect()
    }
}
