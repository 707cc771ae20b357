//! Binned occupation measures and separable kernel smoothing.
//!
//! Many estimators that differ only in their (product) kernel can be
//! evaluated from one pass over the path: sample weights are accumulated in
//! histogram cells, and each estimator is a separable discrete convolution of
//! the cell masses (placed at cell centres), one axis at a time. Passes along
//! the position axes can be shared between estimators with equal position
//! kernels.
//!
//! Cell edges sit on the lattice `lower + m·δ` of the evaluation box. When the
//! evaluation spacing and every half-bandwidth are multiples of `δ`, the edges
//! of box kernels coincide with cell edges and box-kernel estimates are exact.

use crate::error::{invalid, Result};
use crate::grid::{Axis, AxisKernel, EvalGrid};

/// Cell masses of `channels` weight streams on a mesh covering an evaluation
/// box enlarged by per-axis kernel reaches. `axes` hold the cell centres.
#[derive(Debug, Clone)]
pub struct OccupationBins {
    pub d: usize,
    pub axes: Vec<Axis>,
    pub channels: usize,
    data: Vec<f64>,
    strides: Vec<usize>,
    edges: Vec<f64>,
    pub samples: u64,
    pub dropped: u64,
}

impl OccupationBins {
    pub fn new(eval: &EvalGrid, reach: &[f64], bin_width: f64, channels: usize) -> Result<Self> {
        let n = 2 * eval.d;
        if reach.len() != n {
            return Err(invalid("reach", format!("expected {n} entries")));
        }
        if !(bin_width > 0.0) {
            return Err(invalid("bin_width", "must be positive"));
        }
        let mut edges = Vec::with_capacity(n);
        let axes: Vec<Axis> = (0..n)
            .map(|a| {
                let pad = ((reach[a] / bin_width).ceil() + 1.0) * bin_width;
                let edge = eval.lower[a] - pad;
                let count = ((eval.upper[a] + pad - edge) / bin_width).ceil() as usize;
                edges.push(edge);
                Axis {
                    lower: edge + 0.5 * bin_width,
                    spacing: bin_width,
                    count,
                }
            })
            .collect();
        let mut strides = vec![channels; n];
        for a in (0..n - 1).rev() {
            strides[a] = strides[a + 1] * axes[a + 1].count;
        }
        let total = axes.iter().map(|a| a.count).product::<usize>() * channels;
        Ok(Self {
            d: eval.d,
            axes,
            channels,
            data: vec![0.0; total],
            strides,
            edges,
            samples: 0,
            dropped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Adds one sample to the cell containing it; samples outside the
    /// covered box cannot reach the evaluation box and are only counted.
    #[inline]
    pub fn push(&mut self, x: &[f64], y: &[f64], w: &[f64]) {
        self.samples += 1;
        let d = self.d;
        let mut idx = 0usize;
        for a in 0..2 * d {
            let c = if a < d { x[a] } else { y[a - d] };
            let axis = &self.axes[a];
            let pos = (c - self.edges[a]) / axis.spacing;
            if !(pos >= 0.0) || pos >= axis.count as f64 {
                self.dropped += 1;
                return;
            }
            idx += pos as usize * self.strides[a];
        }
        for (slot, v) in self.data[idx..idx + self.channels].iter_mut().zip(w) {
            *slot += v;
        }
    }

    /// Cell masses of one channel as a dense tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        Tensor {
            dims: self.axes.iter().map(|a| a.count).collect(),
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }
}

/// Row-major dense tensor; the last axis is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Replaces axis `a` (sampled on `from`) by the nodes of `to`:
    /// `out[.., e, ..] = Σ_k κ(to_e − from_k) in[.., k, ..]`.
    pub fn smooth_axis<K: AxisKernel + ?Sized>(&self, a: usize, from: &Axis, to: &Axis, kernel: &K) -> Tensor {
        let pre: usize = self.dims[..a].iter().product();
        let post: usize = self.dims[a + 1..].iter().product();
        let n_in = self.dims[a];
        let m = to.count;
        let mut dims = self.dims.clone();
        dims[a] = m;
        let mut out = vec![0.0; pre * m * post];
        let reach = kernel.reach();
        let taps: Vec<(usize, Vec<f64>)> = (0..m)
            .map(|e| {
                let node = to.node(e);
                let lo = (((node - reach - from.lower) / from.spacing).ceil().max(0.0)) as usize;
                let hi = (((node + reach - from.lower) / from.spacing)
                    .floor()
                    .min((n_in - 1) as f64))
                .max(-1.0);
                if hi < lo as f64 {
                    return (0, Vec::new());
                }
                let hi = hi as usize;
                (lo, (lo..=hi).map(|k| kernel.value(node - from.node(k))).collect())
            })
            .collect();
        for p in 0..pre {
            let src = &self.data[p * n_in * post..(p + 1) * n_in * post];
            let dst = &mut out[p * m * post..(p + 1) * m * post];
            for (e, (lo, w)) in taps.iter().enumerate() {
                let row = &mut dst[e * post..(e + 1) * post];
                if post == 1 {
                    row[0] = w.iter().zip(&src[*lo..*lo + w.len()]).map(|(a, b)| a * b).sum();
                    continue;
                }
                for (i, &wk) in w.iter().enumerate() {
                    if wk == 0.0 {
                        continue;
                    }
                    let s = &src[(lo + i) * post..(lo + i + 1) * post];
                    for (r, v) in row.iter_mut().zip(s) {
                        *r += wk * v;
                    }
                }
            }
        }
        Tensor { dims, data: out }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }
}

/// Smooths the position axes of `bins` channel `c` onto `eval`; the result
/// can be finished by [`finish_velocity`] with any velocity kernel.
pub fn smooth_position<K: AxisKernel + ?Sized>(bins: &OccupationBins, c: usize, eval: &EvalGrid, kernel: &K) -> Tensor {
    let mut t = bins.channel(c);
    for a in 0..bins.d {
        t = t.smooth_axis(a, &bins.axes[a], &eval.axes[a], kernel);
    }
    t
}

/// Completes a position-smoothed tensor along the velocity axes; values are
/// in the grid's point order.
pub fn finish_velocity<K: AxisKernel + ?Sized>(
    partial: &Tensor,
    bins: &OccupationBins,
    eval: &EvalGrid,
    kernel: &K,
) -> Vec<f64> {
    let d = bins.d;
    let mut t = partial.smooth_axis(d, &bins.axes[d], &eval.axes[d], kernel);
    for a in d + 1..2 * d {
        t = t.smooth_axis(a, &bins.axes[a], &eval.axes[a], kernel);
    }
    t.data
}
