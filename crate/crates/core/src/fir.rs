//! Time-domain realization of correction gains as a Type I (odd length,
//! symmetric) linear-phase FIR filter, designed by least squares on the
//! STFT bin-centre grid.
//!
//! With `L = 2M + 1` taps the amplitude response is
//! `A(ω) = a₀ + Σ_{k=1..M} a_k cos(kω)` where `a₀ = h[M]` and
//! `a_k = 2 h[M - k]`. The design minimises `Σ_j (A(ω_j) - target_j)²`
//! over the bin centres `ω_j = π j / (F - 1)` with uniform weights.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::correction::{to_db, CorrectionCoefficients};
use crate::dsp::{convolve, Waveform};
use crate::error::{Error, Result};

/// Default gain clamp applied to targets before design, in dB.
pub const DEFAULT_CLAMP_DB: f64 = 40.0;
/// Tap count used when none is given.
pub const DEFAULT_NUM_TAPS: usize = 1025;

const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FirFilter {
    taps: Vec<f64>,
    sample_rate: u32,
    target_bins: usize,
}

impl FirFilter {
    pub fn new(taps: Vec<f64>, sample_rate: u32, target_bins: usize) -> Result<Self> {
        if taps.len().is_multiple_of(2) {
            return Err(Error::invalid("taps", format!("taps must be odd, got {}", taps.len())));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("filter taps"));
        }
        let scale = taps.iter().fold(0.0f64, |m, t| m.max(t.abs())).max(1.0);
        let asymmetric = taps
            .iter()
            .zip(taps.iter().rev())
            .any(|(a, b)| (a - b).abs() > SYMMETRY_TOLERANCE * scale);
        if asymmetric {
            return Err(Error::invalid("taps", "filter is not symmetric"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample_rate", "must be positive"));
        }
        Ok(Self {
            taps,
            sample_rate,
            target_bins,
        })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Number of STFT bins the filter was designed against.
    pub fn target_bins(&self) -> usize {
        self.target_bins
    }

    /// `(L - 1) / 2` samples.
    pub fn group_delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    /// Real amplitude response `A(ω)` (may be negative) at the
    /// `target_bins` grid points.
    pub fn amplitude_on_grid(&self) -> Vec<f64> {
        let m = self.group_delay();
        let n = self.target_bins.saturating_sub(1).max(1);
        let cos = CosTable::new(n);
        (0..self.target_bins)
            .map(|j| {
                self.taps[m]
                    + (1..=m)
                        .map(|k| 2.0 * self.taps[m - k] * cos.get(k * j))
                        .sum::<f64>()
            })
            .collect()
    }
}

/// `cos(π m / n)` for any integer `m`, read from a table of one period.
struct CosTable {
    values: Vec<f64>,
}

impl CosTable {
    fn new(n: usize) -> Self {
        let period = 2 * n;
        Self {
            values: (0..period)
                .map(|m| (std::f64::consts::PI * m as f64 / n as f64).cos())
                .collect(),
        }
    }

    fn get(&self, m: usize) -> f64 {
        self.values[m % self.values.len()]
    }
}

/// Targets clamped to `±clamp_db`.
pub fn clamped_targets(gains: &[f64], clamp_db: f64) -> Vec<f64> {
    let hi = 10f64.powf(clamp_db / 20.0);
    let lo = 1.0 / hi;
    gains.iter().map(|g| g.clamp(lo, hi)).collect()
}

/// Least-squares design with the default ±40 dB clamp.
pub fn design_ls(c: &CorrectionCoefficients, num_taps: usize) -> Result<FirFilter> {
    design_ls_clamped(c, num_taps, DEFAULT_CLAMP_DB)
}

pub fn design_ls_clamped(
    c: &CorrectionCoefficients,
    num_taps: usize,
    clamp_db: f64,
) -> Result<FirFilter> {
    if !(clamp_db > 0.0) {
        return Err(Error::invalid("clamp_db", "must be positive"));
    }
    if c.gains().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("target gains"));
    }
    let targets = clamped_targets(c.gains(), clamp_db);
    design_ls_targets(&targets, num_taps, c.sample_rate())
}

/// Least-squares design against raw linear targets on the bin-centre grid
/// `ω_j = π j / (len - 1)`.
pub fn design_ls_targets(targets: &[f64], num_taps: usize, sample_rate: u32) -> Result<FirFilter> {
    if num_taps.is_multiple_of(2) {
        return Err(Error::invalid("taps", "taps must be odd"));
    }
    if num_taps < 3 {
        return Err(Error::invalid("taps", "need at least 3 taps"));
    }
    if targets.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("target gains"));
    }
    let num_bins = targets.len();
    if num_bins < 2 {
        return Err(Error::invalid("targets", "need at least 2 grid points"));
    }
    let n = num_bins - 1;
    let order = (num_taps - 1) / 2;
    if order > n {
        return Err(Error::invalid(
            "taps",
            format!("at most {} taps can be fitted to {num_bins} bins", 2 * n + 1),
        ));
    }
    let cos = CosTable::new(n);

    // Σ_j cos(π m j / n) for m = 0..=2·order.
    let sums: Vec<f64> = (0..=2 * order)
        .map(|m| (0..=n).map(|j| cos.get(m * j)).sum())
        .collect();
    let gram = DMatrix::from_fn(order + 1, order + 1, |k, l| {
        0.5 * (sums[k.abs_diff(l)] + sums[k + l])
    });
    let rhs = DVector::from_fn(order + 1, |k, _| {
        targets
            .iter()
            .enumerate()
            .map(|(j, t)| t * cos.get(k * j))
            .sum()
    });
    let coeffs = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("taps", "least-squares system is singular"))?
        .solve(&rhs);

    let mut taps = vec![0.0; num_taps];
    taps[order] = coeffs[0];
    for k in 1..=order {
        let half = 0.5 * coeffs[k];
        taps[order - k] = half;
        taps[order + k] = half;
    }
    FirFilter::new(taps, sample_rate, num_bins)
}

/// Sum of squared differences between the filter's amplitude response and
/// `targets` on the design grid.
pub fn grid_ls_error(fir: &FirFilter, targets: &[f64]) -> f64 {
    fir.amplitude_on_grid()
        .iter()
        .zip(targets)
        .map(|(a, t)| (a - t) * (a - t))
        .sum()
}

/// `|Σ taps[n] e^{-i 2π f n / sr}|` at each frequency.
pub fn frequency_response(fir: &FirFilter, grid_hz: &[f64]) -> Result<Vec<f64>> {
    let nyquist = fir.sample_rate as f64 / 2.0;
    if let Some(&bad) = grid_hz.iter().find(|&&f| !(0.0..=nyquist).contains(&f)) {
        return Err(Error::invalid(
            "frequency",
            format!("{bad} Hz is outside [0, {nyquist}]"),
        ));
    }
    Ok(grid_hz
        .iter()
        .map(|&f| {
            let omega = 2.0 * std::f64::consts::PI * f / fir.sample_rate as f64;
            let z: Complex64 = fir
                .taps
                .iter()
                .enumerate()
                .map(|(n, &h)| Complex64::from_polar(h, -omega * n as f64))
                .sum();
            z.norm()
        })
        .collect())
}

/// Largest absolute dB deviation between `response` and `targets` over
/// `bins`.
pub fn max_db_error(response: &[f64], targets: &[f64], bins: &[usize]) -> f64 {
    bins.iter()
        .map(|&k| (to_db(response[k]) - to_db(targets[k])).abs())
        .fold(0.0, f64::max)
}

/// Filters `w`; with `compensate_delay` the output is advanced by the group
/// delay and cut to `w.len()` so it lines up with the input.
pub fn apply_filter(fir: &FirFilter, w: &Waveform, compensate_delay: bool) -> Result<Waveform> {
    if fir.sample_rate != w.sample_rate() {
        return Err(Error::mismatch("sample_rate", fir.sample_rate, w.sample_rate()));
    }
    let out = convolve(w, &fir.taps)?;
    if !compensate_delay {
        return Ok(out);
    }
    let delay = fir.group_delay();
    let samples = out.samples()[delay..delay + w.len()].to_vec();
    Waveform::new(samples, w.sample_rate())
}
