//! Compactly supported polynomial kernels, their rescalings and convolutions,
//! and the dyadic candidate bandwidth grids used by adaptive selection.
//!
//! A kernel of order `ℓ` lives on `[-1/2, 1/2]`, integrates to one and has
//! vanishing moments `1..=ℓ`. It is built as the reproducing kernel of
//! polynomials of degree `≤ ℓ` at the origin with respect to Lebesgue measure
//! on the support, written in the Legendre basis:
//!
//! ```text
//! K(u) = Σ_{k ≤ ℓ} (2k + 1) P_k(0) P_k(2u),   |u| ≤ 1/2.
//! ```
//!
//! `P_k(0)` vanishes for odd `k`, so every kernel is even and an order-`2m`
//! kernel is automatically of order `2m + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quad::{legendre_with_derivative, GaussLegendre};

/// Largest supported order; beyond this the monomial coefficients lose accuracy.
pub const MAX_ORDER: usize = 12;

const MOMENT_TOLERANCE: f64 = 1e-10;
const NORM_MESH: usize = 20_000;

/// A univariate kernel supported on `[-1/2, 1/2]`, stored as monomial
/// coefficients in `u` (lowest degree first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateKernel {
    pub order: usize,
    pub coefficients: Vec<f64>,
    pub lipschitz: f64,
    pub sup_norm: f64,
    pub l2_norm: f64,
}

impl UnivariateKernel {
    /// Symmetric polynomial kernel of order `ell`.
    pub fn of_order(ell: usize) -> Result<Self> {
        if ell > MAX_ORDER {
            return Err(invalid("ell", format!("order {ell} exceeds the cap {MAX_ORDER}")));
        }
        // Legendre coefficients in t = 2u, accumulated in the monomial basis.
        let mut coeffs_t = vec![0.0; ell + 1];
        for k in (0..=ell).step_by(2) {
            let (p0, _) = legendre_with_derivative(k, 0.0);
            let scale = (2 * k + 1) as f64 * p0;
            for (m, c) in legendre_monomials(k).into_iter().enumerate() {
                coeffs_t[m] += scale * c;
            }
        }
        let coefficients: Vec<f64> = coeffs_t
            .iter()
            .enumerate()
            .map(|(m, c)| c * 2f64.powi(m as i32))
            .collect();
        let kernel = Self::from_coefficients(ell, coefficients);
        let residual = kernel.moment_residual();
        if !(residual <= MOMENT_TOLERANCE) {
            return Err(Error::Conditioning { order: ell, residual });
        }
        Ok(kernel)
    }

    /// The box kernel `K ≡ 1` on `[-1/2, 1/2]`.
    pub fn uniform() -> Self {
        Self::from_coefficients(0, vec![1.0])
    }

    /// Builds a kernel from raw coefficients and computes its norms.
    pub fn from_coefficients(order: usize, coefficients: Vec<f64>) -> Self {
        let mut k = Self {
            order,
            coefficients,
            lipschitz: 0.0,
            sup_norm: 0.0,
            l2_norm: 0.0,
        };
        let (lip, sup, l2) = k.computed_norms();
        k.lipschitz = lip;
        k.sup_norm = sup;
        k.l2_norm = l2;
        k
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        if u.abs() > 0.5 {
            0.0
        } else {
            self.poly(u)
        }
    }

    /// Polynomial part, ignoring the support indicator.
    #[inline]
    pub fn poly(&self, u: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, &c| acc * u + c)
    }

    fn derivative(&self, u: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (m, &c)| acc * u + m as f64 * c)
    }

    fn second_derivative(&self, u: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .skip(2)
            .rev()
            .fold(0.0, |acc, (m, &c)| acc * u + (m * (m - 1)) as f64 * c)
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len().saturating_sub(1)
    }

    /// `∫ u^m K(u) du`, exact for polynomial kernels.
    pub fn moment(&self, m: usize) -> f64 {
        let rule = GaussLegendre::new((self.degree() + m) / 2 + 2);
        rule.integrate(-0.5, 0.5, |u| u.powi(m as i32) * self.poly(u))
    }

    /// `max_{0 ≤ m ≤ ℓ} |∫ u^m K − δ_{m0}|`.
    pub fn moment_residual(&self) -> f64 {
        (0..=self.order)
            .map(|m| (self.moment(m) - if m == 0 { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    pub fn l1_norm(&self) -> f64 {
        let rule = GaussLegendre::new(self.degree() / 2 + 2);
        rule.integrate_composite(-0.5, 0.5, 256, |u| self.poly(u).abs())
    }

    /// (Lipschitz constant, sup norm, L² norm) on the closed support.
    fn computed_norms(&self) -> (f64, f64, f64) {
        let step = 1.0 / NORM_MESH as f64;
        let mut lip: f64 = 0.0;
        let mut curv: f64 = 0.0;
        let mut sup: f64 = 0.0;
        for i in 0..=NORM_MESH {
            let u = -0.5 + i as f64 * step;
            lip = lip.max(self.derivative(u).abs());
            curv = curv.max(self.second_derivative(u).abs());
            sup = sup.max(self.poly(u).abs());
        }
        // mesh maxima are lower bounds; pad by the worst intra-cell growth
        let lip = lip + 0.5 * step * curv;
        let sup = sup + 0.5 * step * lip;
        let rule = GaussLegendre::new(self.degree() + 2);
        let l2 = rule.integrate(-0.5, 0.5, |u| self.poly(u).powi(2)).sqrt();
        (lip, sup, l2)
    }

    /// Validates a descriptor: moments, Lipschitz bound on a mesh and stored norms.
    pub fn check(&self) -> KernelCheck {
        let moment_residual = self.moment_residual();
        let mesh = 4000;
        let step = 1.0 / mesh as f64;
        let mut worst_ratio: f64 = 0.0;
        let mut prev = self.poly(-0.5);
        for i in 1..=mesh {
            let cur = self.poly(-0.5 + i as f64 * step);
            worst_ratio = worst_ratio.max((cur - prev).abs() / step);
            prev = cur;
        }
        let (lip, sup, l2) = self.computed_norms();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        KernelCheck {
            moment_residual,
            moments_ok: moment_residual <= MOMENT_TOLERANCE,
            observed_lipschitz: worst_ratio,
            lipschitz_ok: worst_ratio <= self.lipschitz * (1.0 + 1e-9),
            norms_ok: rel(self.sup_norm, sup) < 1e-6 && rel(self.l2_norm, l2) < 1e-9 && rel(self.lipschitz, lip) < 1e-6,
        }
    }
}

/// Outcome of [`UnivariateKernel::check`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelCheck {
    pub moment_residual: f64,
    pub moments_ok: bool,
    pub observed_lipschitz: f64,
    pub lipschitz_ok: bool,
    pub norms_ok: bool,
}

impl KernelCheck {
    pub fn passed(&self) -> bool {
        self.moments_ok && self.lipschitz_ok && self.norms_ok
    }
}

/// Monomial coefficients of `P_k`, lowest degree first.
fn legendre_monomials(k: usize) -> Vec<f64> {
    let mut p0 = vec![1.0];
    if k == 0 {
        return p0;
    }
    let mut p1 = vec![0.0, 1.0];
    for n in 1..k {
        let nf = n as f64;
        let mut next = vec![0.0; n + 2];
        for (m, &c) in p1.iter().enumerate() {
            next[m + 1] += (2.0 * nf + 1.0) * c / (nf + 1.0);
        }
        for (m, &c) in p0.iter().enumerate() {
            next[m] -= nf * c / (nf + 1.0);
        }
        p0 = p1;
        p1 = next;
    }
    p1
}

/// `K(x, y) = Π_i k1(x_i) · Π_i k2(y_i)` on `[-1/2, 1/2]^{2d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductKernel {
    pub k1: UnivariateKernel,
    pub k2: UnivariateKernel,
    pub d: usize,
}

impl ProductKernel {
    pub fn new(k1: UnivariateKernel, k2: UnivariateKernel, d: usize) -> Result<Self> {
        if d < 1 {
            return Err(invalid("d", "half dimension must be at least 1"));
        }
        Ok(Self { k1, k2, d })
    }

    /// Product of order-`l1` position and order-`l2` velocity factors.
    pub fn of_orders(l1: usize, l2: usize, d: usize) -> Result<Self> {
        Self::new(UnivariateKernel::of_order(l1)?, UnivariateKernel::of_order(l2)?, d)
    }

    pub fn sup_norm(&self) -> f64 {
        (self.k1.sup_norm * self.k2.sup_norm).powi(self.d as i32)
    }

    pub fn l2_norm(&self) -> f64 {
        (self.k1.l2_norm * self.k2.l2_norm).powi(self.d as i32)
    }

    pub fn is_symmetric(&self) -> bool {
        let odd_free = |k: &UnivariateKernel| {
            k.coefficients
                .iter()
                .skip(1)
                .step_by(2)
                .all(|&c| c.abs() <= 1e-14 * k.sup_norm)
        };
        odd_free(&self.k1) && odd_free(&self.k2)
    }

    /// Unscaled value `K(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut v = 1.0;
        for &xi in x {
            v *= self.k1.eval(xi);
        }
        for &yi in y {
            v *= self.k2.eval(yi);
        }
        v
    }

    /// `(h1 h2)^{-d} K(x / h1, y / h2)`.
    pub fn eval_scaled(&self, h1: f64, h2: f64, x: &[f64], y: &[f64]) -> f64 {
        let mut v = (h1 * h2).powi(-(self.d as i32));
        for &xi in x {
            v *= self.k1.eval(xi / h1);
            if v == 0.0 {
                return 0.0;
            }
        }
        for &yi in y {
            v *= self.k2.eval(yi / h2);
        }
        v
    }
}

/// Mesh settings for cached convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionConfig {
    /// Uniform mesh intervals inside each smooth piece of the convolution.
    pub intervals_per_piece: usize,
    /// Interpolation error allowed, relative to the peak value.
    pub tolerance: f64,
}

impl Default for ConvolutionConfig {
    fn default() -> Self {
        Self {
            intervals_per_piece: 1024,
            tolerance: 1e-4,
        }
    }
}

/// Cached `u ↦ (K_h ∗ K_η)(u) = ∫ K_h(v − u) K_η(v) dv` with linear interpolation.
///
/// The convolution of two polynomial box kernels is piecewise polynomial with
/// breakpoints at `±|h − η|/2` and `±(h + η)/2`; the cache places mesh nodes on
/// those breakpoints and is uniform inside each piece.
#[derive(Debug, Clone)]
pub struct ConvolvedKernel {
    pub h: f64,
    pub eta: f64,
    breaks: [f64; 4],
    pieces: [Piece; 3],
    peak: f64,
}

#[derive(Debug, Clone)]
struct Piece {
    start: f64,
    step: f64,
    values: Vec<f64>,
}

impl Piece {
    #[inline]
    fn eval(&self, u: f64) -> f64 {
        if self.step == 0.0 {
            return self.values[0];
        }
        let pos = (u - self.start) / self.step;
        let last = self.values.len() - 1;
        let i = (pos.floor().max(0.0) as usize).min(last - 1);
        let frac = (pos - i as f64).clamp(0.0, 1.0);
        self.values[i] + frac * (self.values[i + 1] - self.values[i])
    }
}

impl ConvolvedKernel {
    pub fn new(kernel: &UnivariateKernel, h: f64, eta: f64, config: ConvolutionConfig) -> Result<Self> {
        for (name, v) in [("h", h), ("eta", eta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid(name, format!("bandwidth must lie in (0, 1], got {v}")));
            }
        }
        if config.intervals_per_piece < 1 {
            return Err(invalid("intervals_per_piece", "need at least one interval"));
        }
        // Canonical order makes the cache bit-identical under h <-> η.
        let (a, b) = if h <= eta { (h, eta) } else { (eta, h) };
        let outer = 0.5 * (a + b);
        let inner = 0.5 * (b - a);
        let breaks = [-outer, -inner, inner, outer];
        let rule = GaussLegendre::new(kernel.degree() + 2);
        let exact = |u: f64| exact_convolution(kernel, a, b, u, &rule);
        let n = config.intervals_per_piece;
        let mut pieces: Vec<Piece> = Vec::with_capacity(3);
        for w in breaks.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let (step, values) = if hi > lo {
                let step = (hi - lo) / n as f64;
                (step, (0..=n).map(|i| exact(lo + i as f64 * step)).collect())
            } else {
                (0.0, vec![exact(lo)])
            };
            pieces.push(Piece {
                start: lo,
                step,
                values,
            });
        }
        let pieces: [Piece; 3] = pieces.try_into().expect("three pieces");
        let peak = pieces
            .iter()
            .flat_map(|p| p.values.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let conv = Self {
            h,
            eta,
            breaks,
            pieces,
            peak,
        };
        // interpolation error at cell midpoints
        let mut observed: f64 = 0.0;
        for p in &conv.pieces {
            if p.step == 0.0 {
                continue;
            }
            for i in 0..p.values.len() - 1 {
                let u = p.start + (i as f64 + 0.5) * p.step;
                observed = observed.max((p.eval(u) - exact(u)).abs());
            }
        }
        let scaled = observed / conv.peak.max(1e-300);
        if scaled > config.tolerance {
            return Err(Error::MeshTolerance {
                nodes: 3 * n + 1,
                tolerance: config.tolerance,
                observed: scaled,
            });
        }
        Ok(conv)
    }

    /// Support half-width `(h + η)/2`.
    pub fn half_width(&self) -> f64 {
        self.breaks[3]
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        if u < self.breaks[0] || u > self.breaks[3] {
            0.0
        } else if u < self.breaks[1] {
            self.pieces[0].eval(u)
        } else if u <= self.breaks[2] {
            self.pieces[1].eval(u)
        } else {
            self.pieces[2].eval(u)
        }
    }

    /// Total mass by composite Simpson on the cached nodes of each piece.
    pub fn mass(&self) -> f64 {
        self.pieces
            .iter()
            .filter(|p| p.step > 0.0)
            .map(|p| {
                let v = &p.values;
                let n = v.len() - 1;
                if n % 2 == 1 {
                    let inner: f64 = v.iter().sum();
                    return p.step * (inner - 0.5 * (v[0] + v[n]));
                }
                let odd: f64 = v.iter().skip(1).step_by(2).sum();
                let even: f64 = v.iter().skip(2).step_by(2).take(n / 2 - 1).sum();
                p.step / 3.0 * (v[0] + v[n] + 4.0 * odd + 2.0 * even)
            })
            .sum()
    }

    pub fn sup_norm(&self) -> f64 {
        self.peak
    }
}

/// `∫ K_a(v − u) K_b(v) dv` by Gauss quadrature on the support overlap.
fn exact_convolution(kernel: &UnivariateKernel, a: f64, b: f64, u: f64, rule: &GaussLegendre) -> f64 {
    let lo = (u - 0.5 * a).max(-0.5 * b);
    let hi = (u + 0.5 * a).min(0.5 * b);
    if hi <= lo {
        return 0.0;
    }
    rule.integrate(lo, hi, |v| kernel.poly((v - u) / a) * kernel.poly(v / b)) / (a * b)
}

/// Convolution `(K_{h1,h2} ★ K_{η1,η2})` factored per axis.
#[derive(Debug, Clone)]
pub struct ConvolvedProduct {
    pub position: ConvolvedKernel,
    pub velocity: ConvolvedKernel,
    pub d: usize,
}

impl ConvolvedProduct {
    pub fn new(kernel: &ProductKernel, h: (f64, f64), eta: (f64, f64), config: ConvolutionConfig) -> Result<Self> {
        Ok(Self {
            position: ConvolvedKernel::new(&kernel.k1, h.0, eta.0, config)?,
            velocity: ConvolvedKernel::new(&kernel.k2, h.1, eta.1, config)?,
            d: kernel.d,
        })
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut v = 1.0;
        for &xi in x {
            v *= self.position.eval(xi);
            if v == 0.0 {
                return 0.0;
            }
        }
        for &yi in y {
            v *= self.velocity.eval(yi);
        }
        v
    }
}

/// Candidate bandwidths `h_i = base^{-k_i}`, `k_i ∈ ℕ₀`, with
/// `base^{k1 + k2} ≤ t^{1/(2d)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthGrid {
    pub base: f64,
    pub t: f64,
    pub d: usize,
    /// Exponent pairs `(k1, k2)` sorted lexicographically.
    pub exponents: Vec<(u32, u32)>,
}

impl BandwidthGrid {
    pub fn candidate(t: f64, d: usize, base: f64) -> Result<Self> {
        if !(base > 1.0 && base.is_finite()) {
            return Err(invalid("base", format!("grid ratio must exceed 1, got {base}")));
        }
        if !(t > 1.0 && t.is_finite()) {
            return Err(invalid("t", format!("horizon must exceed 1, got {t}")));
        }
        if d < 1 {
            return Err(invalid("d", "half dimension must be at least 1"));
        }
        let cap = t.ln() / (2.0 * d as f64);
        let max_sum = (cap / base.ln() + 1e-12).floor() as u32;
        let mut exponents = Vec::new();
        for k1 in 0..=max_sum {
            for k2 in 0..=(max_sum - k1) {
                exponents.push((k1, k2));
            }
        }
        Ok(Self { base, t, d, exponents })
    }

    pub fn from_exponents(base: f64, t: f64, d: usize, mut exponents: Vec<(u32, u32)>) -> Result<Self> {
        if exponents.is_empty() {
            return Err(Error::EmptyCandidateGrid);
        }
        exponents.sort_unstable();
        exponents.dedup();
        Ok(Self { base, t, d, exponents })
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn bandwidth(&self, k: (u32, u32)) -> (f64, f64) {
        (self.base.powi(-(k.0 as i32)), self.base.powi(-(k.1 as i32)))
    }

    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.exponents.iter().map(|&k| self.bandwidth(k)).collect()
    }

    pub fn smallest_bandwidth(&self) -> f64 {
        self.pairs()
            .iter()
            .map(|&(a, b)| a.min(b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Restriction to pairs whose components pass the polynomial speed limits of
    /// `H(Q1, Q2)` at the horizon `t`.
    pub fn restricted(&self, q1: f64, q2: f64) -> Self {
        let t = self.t;
        let keep = |h: f64| h.recip() <= q1 * (1.0 + t).powf(q1) && h <= (q2 * t.powf(-q2)).min(1.0);
        Self {
            exponents: self
                .exponents
                .iter()
                .copied()
                .filter(|&k| {
                    let (a, b) = self.bandwidth(k);
                    keep(a) && keep(b)
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// Checks `h^{-1}(T) ≤ Q1 (1 + T)^{Q1}` and `h(T) ≤ Q2 T^{-Q2} ∧ 1` at every probe time.
pub fn in_h_class<F: Fn(f64) -> f64>(h: F, q1: f64, q2: f64, probes: &[f64]) -> bool {
    probes.iter().all(|&t| {
        let v = h(t);
        v > 0.0 && v.recip() <= q1 * (1.0 + t).powf(q1) && v <= (q2 * t.powf(-q2)).min(1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Adaptive Simpson, independent of the Gauss rules used by the kernels.
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
        fn rec<F: Fn(f64) -> f64>(
            f: &F,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let m = 0.5 * (a + b);
        let (fa, fm, fb) = (f(a), f(m), f(b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 40)
    }

    #[test]
    fn order_zero_is_uniform() {
        let k = UnivariateKernel::of_order(0).unwrap();
        assert_eq!(k.coefficients, vec![1.0]);
        assert_eq!(k, UnivariateKernel::uniform());
        assert_eq!(k.eval(0.3), 1.0);
        assert_eq!(k.eval(0.6), 0.0);
        assert!((k.l2_norm - 1.0).abs() < 1e-14);
        assert_eq!(k.lipschitz, 0.0);
    }

    #[test]
    fn order_one_first_moment_vanishes() {
        let k = UnivariateKernel::of_order(1).unwrap();
        let m1 = simpson(&|u| u * k.eval(u), -0.5, 0.5, 1e-14);
        assert!(m1.abs() < 1e-12);
    }

    #[test]
    fn order_three_moments() {
        let k = UnivariateKernel::of_order(3).unwrap();
        let moment = |m: i32| simpson(&|u: f64| u.powi(m) * k.poly(u), -0.5, 0.5, 1e-15);
        assert!((moment(0) - 1.0).abs() < 1e-10);
        for m in 1..=3 {
            assert!(moment(m).abs() < 1e-10, "moment {m} = {}", moment(m));
        }
        assert!(moment(4).abs() > 1e-4);
    }

    #[test]
    fn moments_vanish_up_to_twelve() {
        for ell in 0..=MAX_ORDER {
            let k = UnivariateKernel::of_order(ell).unwrap();
            assert!(k.moment_residual() < 1e-10, "ell = {ell}");
            assert!(k.check().passed(), "ell = {ell}: {:?}", k.check());
        }
        assert!(UnivariateKernel::of_order(MAX_ORDER + 1).is_err());
    }

    #[test]
    fn lipschitz_holds_on_fine_mesh() {
        for ell in [2, 4, 6] {
            let k = UnivariateKernel::of_order(ell).unwrap();
            let n = 10_000;
            for i in 0..n {
                let u = -0.5 + i as f64 / n as f64;
                let v = u + 1.0 / n as f64;
                assert!((k.eval(u) - k.eval(v)).abs() <= k.lipschitz * (v - u) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn descriptor_roundtrip_and_check() {
        let k = UnivariateKernel::of_order(4).unwrap();
        let json = serde_json::to_string(&k).unwrap();
        for key in ["order", "coefficients", "lipschitz", "sup_norm", "l2_norm"] {
            assert!(json.contains(key));
        }
        let back: UnivariateKernel = serde_json::from_str(&json).unwrap();
        assert!(back.check().passed());
        let mut broken = back.clone();
        broken.coefficients[0] += 0.1;
        assert!(!broken.check().moments_ok);
    }

    #[test]
    fn eval_scaled_support_and_origin() {
        let k = ProductKernel::of_orders(0, 0, 1).unwrap();
        assert_eq!(k.eval_scaled(1.0, 1.0, &[0.0], &[0.0]), 1.0);
        assert_eq!(k.eval_scaled(0.2, 0.5, &[0.11], &[0.0]), 0.0);
        assert!((k.eval_scaled(0.2, 0.5, &[0.09], &[0.2]) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn product_norms_are_factor_products() {
        let k = ProductKernel::of_orders(2, 4, 2).unwrap();
        let sup = (k.k1.sup_norm * k.k2.sup_norm).powi(2);
        assert!((k.sup_norm() - sup).abs() < 1e-14);
        let l2 = (k.k1.l2_norm * k.k2.l2_norm).powi(2);
        assert!((k.l2_norm() - l2).abs() < 1e-14);
        assert!(k.is_symmetric());
    }

    #[test]
    fn scaled_kernel_integrates_to_one() {
        let k = ProductKernel::of_orders(2, 2, 1).unwrap();
        let (h1, h2) = (0.3, 0.7);
        let rule = GaussLegendre::new(8);
        let v = rule.integrate(-h1 / 2.0, h1 / 2.0, |x| {
            rule.integrate(-h2 / 2.0, h2 / 2.0, |y| k.eval_scaled(h1, h2, &[x], &[y]))
        });
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_convolution_is_triangle() {
        let k = UnivariateKernel::uniform();
        let h = 0.25;
        let c = ConvolvedKernel::new(&k, h, h, ConvolutionConfig::default()).unwrap();
        assert!((c.eval(0.0) - 1.0 / h).abs() < 1e-12);
        for &u in &[-0.2f64, -0.1, 0.03, 0.17, 0.249] {
            let tri = (1.0 / h) * (1.0 - u.abs() / h).max(0.0);
            assert!((c.eval(u) - tri).abs() < 1e-10, "u = {u}");
        }
        assert_eq!(c.eval(0.26), 0.0);
        assert!((c.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn convolution_mass_and_symmetry() {
        for ell in [0, 2, 4] {
            let k = UnivariateKernel::of_order(ell).unwrap();
            for &(h, eta) in &[(0.5, 0.125), (1.0, 1.0), (0.03, 0.7)] {
                let c = ConvolvedKernel::new(&k, h, eta, ConvolutionConfig::default()).unwrap();
                assert!((c.mass() - 1.0).abs() < 1e-8, "ell {ell} ({h},{eta}) mass {}", c.mass());
                for i in 0..50 {
                    let u = c.half_width() * i as f64 / 50.0;
                    assert!((c.eval(u) - c.eval(-u)).abs() < 1e-12 * c.sup_norm());
                }
                let swapped = ConvolvedKernel::new(&k, eta, h, ConvolutionConfig::default()).unwrap();
                for i in 0..50 {
                    let u = c.half_width() * (i as f64 / 25.0 - 1.0);
                    assert_eq!(c.eval(u), swapped.eval(u));
                }
            }
        }
    }

    #[test]
    fn convolution_norm_bound() {
        for ell in [0, 2] {
            let k = UnivariateKernel::of_order(ell).unwrap();
            for &(h, eta) in &[(0.5, 0.5), (0.2, 0.1), (1.0, 0.25)] {
                let c = ConvolvedKernel::new(&k, h, eta, ConvolutionConfig::default()).unwrap();
                let bound = k.sup_norm / f64::min(h, eta) * k.l1_norm();
                assert!(c.sup_norm() <= bound * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn coarse_mesh_misses_tolerance() {
        let k = UnivariateKernel::of_order(6).unwrap();
        let cfg = ConvolutionConfig {
            intervals_per_piece: 2,
            tolerance: 1e-9,
        };
        assert!(matches!(
            ConvolvedKernel::new(&k, 0.5, 0.3, cfg),
            Err(Error::MeshTolerance { .. })
        ));
    }

    #[test]
    fn bias_scales_with_order() {
        // g(x) = |x|^β has Hölder smoothness β at 0 (β = 1.5 here);
        // order-2 kernels give |(g ∗ K_h)(0) − g(0)| ≤ C h^β with C stable.
        let beta = 1.5;
        let k = UnivariateKernel::of_order(2).unwrap();
        let ratios: Vec<f64> = (3..=8)
            .map(|e| {
                let h = 2f64.powi(-e);
                let v = simpson(&|u: f64| k.eval(u) * (h * u).abs().powf(beta), -0.5, 0.5, 1e-14);
                v.abs() / h.powf(beta)
            })
            .collect();
        for r in &ratios {
            assert!((r / ratios[0] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn candidate_grid_t16() {
        let g = BandwidthGrid::candidate(16.0, 1, 2.0).unwrap();
        let mut expected = vec![(0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (0, 2)];
        expected.sort_unstable();
        assert_eq!(g.exponents, expected);
        for (h1, h2) in g.pairs() {
            assert!(h1 * h2 >= 16f64.powf(-0.5) - 1e-15);
        }
        let tiny = BandwidthGrid::candidate(1.0001, 1, 2.0).unwrap();
        assert_eq!(tiny.pairs(), vec![(1.0, 1.0)]);
        assert!(BandwidthGrid::candidate(16.0, 1, 1.0).is_err());
        assert!(BandwidthGrid::candidate(0.5, 1, 2.0).is_err());
    }

    #[test]
    fn h_class_examples() {
        let probes = [10.0, 100.0, 1000.0];
        assert!(in_h_class(|t: f64| 0.1 * t.powf(-0.1), 10.0, 0.1, &probes));
        // Q2 is both factor and exponent, so T^{-1/4} sits above Q2 T^{-Q2} here.
        assert!(!in_h_class(|t: f64| t.powf(-0.25), 0.25, 0.25, &probes));
        let ladder: Vec<f64> = (1..=100).map(|k| (k as f64).exp()).collect();
        for q2 in [1e-3, 0.01, 0.1, 0.5, 1.0, 2.0] {
            assert!(!in_h_class(|t: f64| 1.0 / t.ln(), 10.0, q2, &ladder));
        }
        assert!(!in_h_class(|t: f64| (-t).exp(), 5.0, 0.1, &[1.0, 10.0, 100.0]));
    }

    proptest! {
        #[test]
        fn scaling_identity(h1 in 0.01f64..1.0, h2 in 0.01f64..1.0, x in -0.6f64..0.6, y in -0.6f64..0.6) {
            let k = ProductKernel::of_orders(2, 0, 1).unwrap();
            let lhs = k.eval_scaled(h1, h2, &[x], &[y]);
            let rhs = (h1 * h2).recip() * k.eval_scaled(1.0, 1.0, &[x / h1], &[y / h2]);
            prop_assert!((lhs - rhs).abs() <= 1e-14 * lhs.abs().max(1.0));
        }

        #[test]
        fn grid_monotone_in_t(t1 in 1.01f64..1e6, factor in 1.0f64..100.0, d in 1usize..3, base in 1.5f64..4.0) {
            let g1 = BandwidthGrid::candidate(t1, d, base).unwrap();
            let g2 = BandwidthGrid::candidate(t1 * factor, d, base).unwrap();
            for k in &g1.exponents {
                prop_assert!(g2.exponents.contains(k));
            }
            for &(a, b) in &g1.exponents {
                prop_assert!(base.powi((a + b) as i32) <= t1.powf(1.0 / (2.0 * d as f64)) * (1.0 + 1e-9));
            }
        }
    }
}
