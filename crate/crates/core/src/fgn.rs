//! Exact fractional Gaussian noise by circulant embedding.
//!
//! A [`SpectralEmbedding`] of grid size `m` turns `2m` standard normals into
//! `m` unit-lag fGN values. Blocks covering one unit time interval at level
//! `l` use `m = 2^l`; whole paths over `[0, T]` use `m = T 2^l`. Increments
//! at mesh `Δ` are unit-lag fGN scaled by `Δ^H`.
//!
//! Normal packing for a grid of size `m` (`n = 2m` circulant length, `λ` the
//! clipped eigenvalues):
//!
//! * `z[0]` drives frequency `0` with weight `sqrt(λ_0 / n)`,
//! * `z[1]` drives frequency `m` with weight `sqrt(λ_m / n)`,
//! * `z[2k] + i z[2k+1]` drives frequency `k` for `1 <= k < m` with weight
//!   `sqrt(λ_k / 2n)`; frequency `n - k` gets the complex conjugate.
//!
//! The forward transform of that Hermitian vector is real; its first `m`
//! entries are the fGN sample.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::cost::CostLedger;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FgnError {
    #[error("Hurst parameter {0} outside (0, 1)")]
    InvalidHurst(f64),
    #[error("grid size must be positive")]
    EmptyGrid,
    #[error("circulant embedding has eigenvalue {value} below tolerance -{tol}")]
    NegativeSpectrum { value: f64, tol: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cannot coarsen a path of odd length {0}")]
    OddLength(usize),
    #[error("cannot coarsen below level 0")]
    NoCoarserLevel,
}

/// Hurst exponent `H` in `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct HurstParam(f64);

impl HurstParam {
    pub fn new(h: f64) -> Result<Self, FgnError> {
        if h > 0.0 && h < 1.0 {
            Ok(Self(h))
        } else {
            Err(FgnError::InvalidHurst(h))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_brownian(self) -> bool {
        self.0 == 0.5
    }
}

/// Discretization level `l`, mesh `Δ_l = 2^{-l}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Level(u32);

impl Level {
    pub const fn new(l: u32) -> Self {
        Self(l)
    }

    pub fn index(self) -> u32 {
        self.0
    }

    /// `Δ_l^{-1}`, the number of Euler steps per unit time.
    pub fn steps_per_unit(self) -> usize {
        1usize << self.0
    }

    pub fn mesh(self) -> f64 {
        (-(self.0 as f64)).exp2()
    }

    /// Normals consumed per unit interval, `2 Δ_l^{-1}`.
    pub fn block_len(self) -> usize {
        2 * self.steps_per_unit()
    }

    pub fn coarser(self) -> Option<Level> {
        self.0.checked_sub(1).map(Level)
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Autocovariance of unit-variance fGN at integer lag `k`.
pub fn fgn_autocov(h: HurstParam, k: usize) -> f64 {
    let two_h = 2.0 * h.value();
    let k = k as f64;
    0.5 * ((k + 1.0).powf(two_h) - 2.0 * k.powf(two_h) + (k - 1.0).abs().powf(two_h))
}

/// Circulant spectrum and transform plan for one `(H, m)` pair.
pub struct SpectralEmbedding {
    hurst: HurstParam,
    grid: usize,
    eigenvalues: Vec<f64>,
    weights: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    direct_brownian: bool,
}

impl std::fmt::Debug for SpectralEmbedding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralEmbedding")
            .field("hurst", &self.hurst)
            .field("grid", &self.grid)
            .field("direct_brownian", &self.direct_brownian)
            .finish()
    }
}

/// Relative size of negative eigenvalues treated as rounding noise.
pub const EIGEN_CLIP_REL_TOL: f64 = 1e-12;

/// Builds the embedding for `m` fGN values at Hurst index `h`.
///
/// At `H = 1/2` sampling bypasses the spectral map and emits the first `m`
/// normals directly; see [`SpectralEmbedding::with_direct_brownian`].
pub fn build_embedding(h: HurstParam, m: usize) -> Result<SpectralEmbedding, FgnError> {
    if m == 0 {
        return Err(FgnError::EmptyGrid);
    }
    let n = 2 * m;
    let mut row: Vec<Complex64> = Vec::with_capacity(n);
    for j in 0..=m {
        row.push(Complex64::new(fgn_autocov(h, j), 0.0));
    }
    for j in (1..m).rev() {
        row.push(Complex64::new(fgn_autocov(h, j), 0.0));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    fft.process(&mut row);

    let max = row.iter().map(|c| c.re).fold(f64::MIN, f64::max);
    let tol = EIGEN_CLIP_REL_TOL * max.abs();
    let mut eigenvalues = Vec::with_capacity(n);
    for c in &row {
        if c.re < -tol {
            return Err(FgnError::NegativeSpectrum { value: c.re, tol });
        }
        eigenvalues.push(c.re.max(0.0));
    }
    let nf = n as f64;
    let weights = (0..=m)
        .map(|k| {
            let denom = if k == 0 || k == m { nf } else { 2.0 * nf };
            (eigenvalues[k] / denom).sqrt()
        })
        .collect();
    Ok(SpectralEmbedding { hurst: h, grid: m, eigenvalues, weights, fft, direct_brownian: h.is_brownian() })
}

/// Reusable buffers for spectral sampling.
#[derive(Default)]
pub struct FftWorkspace {
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl SpectralEmbedding {
    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    /// Number of fGN values per sample.
    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Clipped circulant eigenvalues, length `2m`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn direct_brownian(&self) -> bool {
        self.direct_brownian
    }

    /// Toggles the `H = 1/2` bypass. Ignored for other `H`.
    pub fn with_direct_brownian(mut self, enabled: bool) -> Self {
        self.direct_brownian = enabled && self.hurst.is_brownian();
        self
    }

    /// Writes `scale * A z` into `out` (length `m`).
    pub fn map_into(
        &self,
        z: &[f64],
        scale: f64,
        out: &mut [f64],
        ws: &mut FftWorkspace,
        ledger: &mut CostLedger,
    ) -> Result<(), FgnError> {
        let m = self.grid;
        if z.len() != 2 * m {
            return Err(FgnError::DimensionMismatch { expected: 2 * m, actual: z.len() });
        }
        if out.len() != m {
            return Err(FgnError::DimensionMismatch { expected: m, actual: out.len() });
        }
        if self.direct_brownian {
            for (o, &v) in out.iter_mut().zip(z) {
                *o = scale * v;
            }
            return Ok(());
        }
        let n = 2 * m;
        ws.buf.resize(n, Complex64::new(0.0, 0.0));
        let buf = &mut ws.buf;
        buf[0] = Complex64::new(self.weights[0] * z[0], 0.0);
        buf[m] = Complex64::new(self.weights[m] * z[1], 0.0);
        for k in 1..m {
            let w = self.weights[k];
            let c = Complex64::new(w * z[2 * k], w * z[2 * k + 1]);
            buf[k] = c;
            buf[n - k] = c.conj();
        }
        let scratch_len = self.fft.get_inplace_scratch_len();
        if ws.scratch.len() < scratch_len {
            ws.scratch.resize(scratch_len, Complex64::new(0.0, 0.0));
        }
        self.fft.process_with_scratch(buf, &mut ws.scratch[..scratch_len]);
        ledger.record_fft(n);
        for (o, c) in out.iter_mut().zip(buf.iter()) {
            *o = scale * c.re;
        }
        Ok(())
    }
}

/// fBM increments on a regular grid at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementPath {
    pub level: Level,
    pub span: usize,
    pub values: Vec<f64>,
}

impl IncrementPath {
    /// Increments over unit interval `t` (1-based).
    pub fn unit(&self, t: usize) -> &[f64] {
        let m = self.level.steps_per_unit();
        &self.values[(t - 1) * m..t * m]
    }
}

fn increment_scale(emb: &SpectralEmbedding, level: Level) -> f64 {
    level.mesh().powf(emb.hurst.value())
}

/// Exact fBM increments over one unit interval from one noise block.
pub fn sample_block(emb: &SpectralEmbedding, level: Level, z: &[f64]) -> Result<IncrementPath, FgnError> {
    check_grid(emb, level.steps_per_unit())?;
    let mut values = vec![0.0; emb.grid];
    emb.map_into(z, increment_scale(emb, level), &mut values, &mut FftWorkspace::default(), &mut CostLedger::default())?;
    Ok(IncrementPath { level, span: 1, values })
}

fn check_grid(emb: &SpectralEmbedding, expected: usize) -> Result<(), FgnError> {
    if emb.grid != expected {
        return Err(FgnError::DimensionMismatch { expected, actual: emb.grid });
    }
    Ok(())
}

fn span_of(noise: &[f64], level: Level) -> Result<usize, FgnError> {
    let b = level.block_len();
    if noise.is_empty() || !noise.len().is_multiple_of(b) {
        return Err(FgnError::DimensionMismatch { expected: b * (noise.len() / b).max(1), actual: noise.len() });
    }
    Ok(noise.len() / b)
}

/// True fBM skeleton over `[0, T]` from `T` blocks concatenated in time
/// order, via one embedding of grid size `T Δ_l^{-1}`.
pub fn full_path(emb_t: &SpectralEmbedding, level: Level, noise: &[f64]) -> Result<IncrementPath, FgnError> {
    full_path_with(emb_t, level, noise, &mut FftWorkspace::default(), &mut CostLedger::default())
}

pub fn full_path_with(
    emb_t: &SpectralEmbedding,
    level: Level,
    noise: &[f64],
    ws: &mut FftWorkspace,
    ledger: &mut CostLedger,
) -> Result<IncrementPath, FgnError> {
    let span = span_of(noise, level)?;
    let m = level.steps_per_unit();
    check_grid(emb_t, span * m)?;
    let mut values = vec![0.0; span * m];
    if emb_t.direct_brownian {
        // First m normals of each block, in order.
        let scale = increment_scale(emb_t, level);
        for (t, block) in noise.chunks_exact(2 * m).enumerate() {
            for (o, &v) in values[t * m..(t + 1) * m].iter_mut().zip(block) {
                *o = scale * v;
            }
        }
    } else {
        emb_t.map_into(noise, increment_scale(emb_t, level), &mut values, ws, ledger)?;
    }
    Ok(IncrementPath { level, span, values })
}

/// Pseudo increments: each block mapped independently through the unit map.
pub fn pseudo_path(emb: &SpectralEmbedding, level: Level, noise: &[f64]) -> Result<IncrementPath, FgnError> {
    pseudo_path_with(emb, level, noise, &mut FftWorkspace::default(), &mut CostLedger::default())
}

pub fn pseudo_path_with(
    emb: &SpectralEmbedding,
    level: Level,
    noise: &[f64],
    ws: &mut FftWorkspace,
    ledger: &mut CostLedger,
) -> Result<IncrementPath, FgnError> {
    let span = span_of(noise, level)?;
    let m = level.steps_per_unit();
    check_grid(emb, m)?;
    let scale = increment_scale(emb, level);
    let mut values = vec![0.0; span * m];
    for (block, out) in noise.chunks_exact(2 * m).zip(values.chunks_exact_mut(m)) {
        emb.map_into(block, scale, out, ws, ledger)?;
    }
    Ok(IncrementPath { level, span, values })
}

/// Pairwise sums of increments: level `l` to level `l - 1`.
pub fn coarsen(fine: &IncrementPath) -> Result<IncrementPath, FgnError> {
    let level = fine.level.coarser().ok_or(FgnError::NoCoarserLevel)?;
    if !fine.values.len().is_multiple_of(2) {
        return Err(FgnError::OddLength(fine.values.len()));
    }
    let values = fine.values.chunks_exact(2).map(|p| p[0] + p[1]).collect();
    Ok(IncrementPath { level, span: fine.span, values })
}

/// Exact causal map from pseudo blocks to a true fBM path.
///
/// Each pseudo block is whitened into innovations with the within-block
/// one-step predictors, and the innovations drive the Durbin-Levinson
/// recursion over the whole grid. The first unit block is returned
/// unchanged; later blocks differ from their pseudo counterparts only
/// through the dependence on earlier blocks.
pub struct CausalPathMap {
    hurst: HurstParam,
    block: usize,
    len: usize,
    // Row k holds phi_{k,k..=1} (reversed), packed; row k starts at k(k-1)/2.
    phi: Vec<f64>,
    innovation_sd: Vec<f64>,
    direct_brownian: bool,
}

impl std::fmt::Debug for CausalPathMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CausalPathMap").field("hurst", &self.hurst).field("block", &self.block).field("len", &self.len).finish()
    }
}

impl CausalPathMap {
    /// Predictor coefficients for `span` blocks of `block` values each.
    pub fn new(h: HurstParam, block: usize, span: usize) -> Result<Self, FgnError> {
        if block == 0 || span == 0 {
            return Err(FgnError::EmptyGrid);
        }
        let len = block * span;
        let gamma: Vec<f64> = (0..len).map(|k| fgn_autocov(h, k)).collect();
        let mut phi = vec![0.0; len * len.saturating_sub(1) / 2];
        let mut variance = vec![0.0; len];
        variance[0] = gamma[0];
        let row = |k: usize| k * (k - 1) / 2;
        for k in 1..len {
            let prev = if k > 1 { row(k - 1) } else { 0 };
            let mut acc = gamma[k];
            for j in 1..k {
                acc -= phi[prev + j - 1] * gamma[k - j];
            }
            let reflection = acc / variance[k - 1];
            let cur = row(k);
            for j in 1..k {
                phi[cur + j - 1] = phi[prev + j - 1] - reflection * phi[prev + k - j - 1];
            }
            phi[cur + k - 1] = reflection;
            variance[k] = variance[k - 1] * (1.0 - reflection * reflection);
            if !(variance[k] > 0.0) {
                return Err(FgnError::NegativeSpectrum { value: variance[k], tol: 0.0 });
            }
        }
        for k in 1..len {
            phi[row(k)..row(k) + k].reverse();
        }
        let innovation_sd = variance.iter().map(|v| v.sqrt()).collect();
        Ok(Self { hurst: h, block, len, phi, innovation_sd, direct_brownian: h.is_brownian() })
    }

    pub fn with_direct_brownian(mut self, enabled: bool) -> Self {
        self.direct_brownian = enabled && self.hurst.is_brownian();
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Multiply-adds per call of [`CausalPathMap::apply`].
    pub fn ops(&self) -> u64 {
        let n = self.len as u64;
        let m = self.block as u64;
        n * (n + 1) / 2 + (n / m) * m * (m + 1) / 2
    }

    #[inline]
    fn row(&self, k: usize) -> &[f64] {
        let start = k * (k - 1) / 2;
        &self.phi[start..start + k]
    }

    /// Maps a pseudo path at `level` (span `T`) to a true path.
    pub fn apply(&self, pseudo: &IncrementPath, ledger: &mut CostLedger) -> Result<IncrementPath, FgnError> {
        if pseudo.values.len() != self.len {
            return Err(FgnError::DimensionMismatch { expected: self.len, actual: pseudo.values.len() });
        }
        if pseudo.level.steps_per_unit() != self.block {
            return Err(FgnError::DimensionMismatch { expected: self.block, actual: pseudo.level.steps_per_unit() });
        }
        if self.direct_brownian {
            return Ok(pseudo.clone());
        }
        let scale = pseudo.level.mesh().powf(self.hurst.value());
        let m = self.block;
        let mut innovations = vec![0.0; self.len];
        for (src, dst) in pseudo.values.chunks_exact(m).zip(innovations.chunks_exact_mut(m)) {
            for k in 0..m {
                let pred = if k > 0 { dot(self.row(k), &src[..k]) } else { 0.0 };
                dst[k] = (src[k] - pred) / (scale * self.innovation_sd[k]);
            }
        }
        let mut out = vec![0.0; self.len];
        for k in 0..self.len {
            let pred = if k > 0 { dot(self.row(k), &out[..k]) } else { 0.0 };
            out[k] = pred + self.innovation_sd[k] * innovations[k];
        }
        for v in out.iter_mut() {
            *v *= scale;
        }
        ledger.record_dense(self.ops());
        Ok(IncrementPath { level: pseudo.level, span: pseudo.span, values: out })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn h(v: f64) -> HurstParam {
        HurstParam::new(v).unwrap()
    }

    #[test]
    fn autocov_closed_form() {
        for v in [0.1, 0.4, 0.5, 0.9] {
            assert_eq!(fgn_autocov(h(v), 0), 1.0);
        }
        assert_relative_eq!(fgn_autocov(h(0.5), 1), 0.0, epsilon = 1e-15);
        assert_relative_eq!(fgn_autocov(h(0.4), 1), -0.129449436703876, epsilon = 1e-12);
    }

    #[test]
    fn hurst_domain() {
        assert!(HurstParam::new(0.0).is_err());
        assert!(HurstParam::new(1.0).is_err());
        assert!(HurstParam::new(f64::NAN).is_err());
    }

    #[test]
    fn brownian_spectrum_is_flat() {
        let emb = build_embedding(h(0.5), 4).unwrap();
        assert_eq!(emb.eigenvalues().len(), 8);
        for &e in emb.eigenvalues() {
            assert_relative_eq!(e, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn spectra_nonnegative_over_grid() {
        for hv in 1..=9 {
            for p in 4..=12 {
                let emb = build_embedding(h(hv as f64 / 10.0), 1 << p).unwrap();
                assert!(emb.eigenvalues().iter().all(|&e| e >= 0.0));
            }
        }
    }

    #[test]
    fn zero_noise_gives_zero_increments() {
        let emb = build_embedding(h(0.4), 8).unwrap();
        let p = sample_block(&emb, Level::new(3), &[0.0; 16]).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_length_checked() {
        let emb = build_embedding(h(0.4), 8).unwrap();
        assert_eq!(
            sample_block(&emb, Level::new(3), &[0.0; 15]),
            Err(FgnError::DimensionMismatch { expected: 16, actual: 15 })
        );
        assert!(matches!(sample_block(&emb, Level::new(2), &[0.0; 8]), Err(FgnError::DimensionMismatch { .. })));
    }

    #[test]
    fn packing_regression() {
        // Unit normal on each packed slot in turn; frozen from the documented layout.
        let emb = build_embedding(h(0.3), 2).unwrap();
        let lam = emb.eigenvalues().to_vec();
        let n = 4.0;
        let mut z = [0.0; 4];
        z[0] = 1.0;
        let a = sample_block(&emb, Level::new(1), &z).unwrap().values;
        let s = 0.5f64.powf(0.3);
        assert_relative_eq!(a[0], s * (lam[0] / n).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(a[1], s * (lam[0] / n).sqrt(), epsilon = 1e-14);
        z = [0.0, 1.0, 0.0, 0.0];
        let b = sample_block(&emb, Level::new(1), &z).unwrap().values;
        assert_relative_eq!(b[0], s * (lam[2] / n).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(b[1], -s * (lam[2] / n).sqrt(), epsilon = 1e-14);
        // Frequency 1: real part contributes 2 w cos(0), 2 w cos(pi/2).
        z = [0.0, 0.0, 1.0, 0.0];
        let c = sample_block(&emb, Level::new(1), &z).unwrap().values;
        assert_relative_eq!(c[0], s * 2.0 * (lam[1] / (2.0 * n)).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(c[1], 0.0, epsilon = 1e-14);
        z = [0.0, 0.0, 0.0, 1.0];
        let d = sample_block(&emb, Level::new(1), &z).unwrap().values;
        assert_relative_eq!(d[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(d[1], s * 2.0 * (lam[1] / (2.0 * n)).sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn coarsen_pairwise() {
        let p = IncrementPath { level: Level::new(2), span: 1, values: vec![1.0, 2.0, 3.0, 4.0] };
        let c = coarsen(&p).unwrap();
        assert_eq!(c.values, vec![3.0, 7.0]);
        assert_eq!(c.level, Level::new(1));
        let cc = coarsen(&c).unwrap();
        assert_eq!(cc.values, vec![10.0]);
        let odd = IncrementPath { level: Level::new(2), span: 1, values: vec![1.0, 2.0, 3.0] };
        assert_eq!(coarsen(&odd), Err(FgnError::OddLength(3)));
        let bottom = IncrementPath { level: Level::new(0), span: 1, values: vec![1.0] };
        assert_eq!(coarsen(&bottom), Err(FgnError::NoCoarserLevel));
    }

    #[test]
    fn single_block_full_equals_pseudo() {
        let emb = build_embedding(h(0.4), 16).unwrap();
        let z: Vec<f64> = (0..32).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect();
        let level = Level::new(4);
        let a = sample_block(&emb, level, &z).unwrap();
        let b = full_path(&emb, level, &z).unwrap();
        let c = pseudo_path(&emb, level, &z).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.values, c.values);
    }

    #[test]
    fn brownian_bypass_makes_pseudo_and_full_identical() {
        let level = Level::new(3);
        let t = 5;
        let emb = build_embedding(h(0.5), 8).unwrap();
        let emb_t = build_embedding(h(0.5), 8 * t).unwrap();
        let z: Vec<f64> = (0..16 * t).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = pseudo_path(&emb, level, &z).unwrap();
        let f = full_path(&emb_t, level, &z).unwrap();
        assert_eq!(p.values, f.values);
        assert_relative_eq!(p.values[0], (0.125f64).sqrt() * z[0], epsilon = 1e-15);
        let causal = CausalPathMap::new(h(0.5), 8, t).unwrap();
        assert_eq!(causal.apply(&p, &mut CostLedger::default()).unwrap().values, p.values);
    }

    #[test]
    fn causal_map_keeps_first_block() {
        let level = Level::new(3);
        let emb = build_embedding(h(0.4), 8).unwrap();
        let z: Vec<f64> = (0..16 * 4).map(|i| (i as f64 * 1.3).cos()).collect();
        let p = pseudo_path(&emb, level, &z).unwrap();
        let map = CausalPathMap::new(h(0.4), 8, 4).unwrap();
        let mut ledger = CostLedger::default();
        let f = map.apply(&p, &mut ledger).unwrap();
        for k in 0..8 {
            assert_relative_eq!(f.values[k], p.values[k], epsilon = 1e-12);
        }
        assert!(f.values[8..].iter().zip(&p.values[8..]).any(|(a, b)| (a - b).abs() > 1e-6));
        assert_eq!(ledger.dense_ops, map.ops());
    }

    #[test]
    fn durbin_levinson_matches_autocovariance() {
        // With unit innovations on one slot, the output is column k of the
        // Cholesky factor; its Gram matrix reproduces the Toeplitz entries.
        let hp = h(0.3);
        let n = 12;
        let map = CausalPathMap::new(hp, n, 1).unwrap();
        let mut cols = Vec::new();
        for k in 0..n {
            let mut eps = vec![0.0; n];
            eps[k] = 1.0;
            let mut out = vec![0.0; n];
            for i in 0..n {
                let pred = if i > 0 { map.row(i).iter().zip(&out[..i]).map(|(c, x)| c * x).sum() } else { 0.0 };
                out[i] = pred + map.innovation_sd[i] * eps[i];
            }
            cols.push(out);
        }
        for i in 0..n {
            for j in 0..n {
                let c: f64 = (0..n).map(|k| cols[k][i] * cols[k][j]).sum();
                assert_relative_eq!(c, fgn_autocov(hp, i.abs_diff(j)), epsilon = 1e-10);
            }
        }
    }
}
