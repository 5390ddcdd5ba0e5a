//! Spectrum correction: per-bin gains that map one device's amplitude
//! spectra onto another's.
//!
//! Under a linear, magnitude-only device model `A = R(d) · M`, the gains
//! from source `d` to reference `r` are `R(r) / R(d)`. They are estimated
//! as geometric means of amplitude ratios, pooled over every frame of every
//! recording. Because the geometric mean of ratios equals the ratio of
//! geometric means, the two device means can also be computed separately
//! ([`accumulate_stats`] + [`estimate_unaligned`]), which removes the need
//! for recordings of the same signal.
//!
//! All averaging happens on `ln(max(A, DEFAULT_FLOOR))` with pairwise
//! summation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dsp::{
    bins_in_band, pairwise_sum, AmplitudeSpectrogram, ComplexSpectrogram,
};
use crate::error::{Error, Result};

/// Reference-device name used by reference-free (simplified) coefficients.
pub const NO_REFERENCE: &str = "none";

/// Lower edge of the band used for tolerance checks.
pub const MID_BAND_LOW_HZ: f64 = 100.0;
/// Upper edge of the band used for tolerance checks.
pub const MID_BAND_HIGH_HZ: f64 = 16_000.0;

/// Bins between [`MID_BAND_LOW_HZ`] and [`MID_BAND_HIGH_HZ`].
pub fn mid_band_bins(n_fft: usize, sample_rate: u32) -> Vec<usize> {
    bins_in_band(n_fft, sample_rate, MID_BAND_LOW_HZ, MID_BAND_HIGH_HZ)
}

/// Converts a linear amplitude ratio to decibels.
pub fn to_db(gain: f64) -> f64 {
    20.0 * gain.log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Estimator {
    Aligned,
    Unaligned,
    Simplified,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Aligned => "aligned",
            Estimator::Unaligned => "unaligned",
            Estimator::Simplified => "simplified",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(Estimator::Aligned),
            "unaligned" => Ok(Estimator::Unaligned),
            "simplified" => Ok(Estimator::Simplified),
            other => Err(Error::invalid("estimator", format!("unknown estimator '{other}'"))),
        }
    }
}

/// Positive per-bin gains taking `source_device` spectra to
/// `reference_device` spectra.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionCoefficients {
    gains: Vec<f64>,
    n_fft: usize,
    sample_rate: u32,
    source_device: String,
    reference_device: String,
    num_recordings: usize,
    estimator: Estimator,
}

impl CorrectionCoefficients {
    pub fn new(
        gains: Vec<f64>,
        n_fft: usize,
        sample_rate: u32,
        source_device: impl Into<String>,
        reference_device: impl Into<String>,
        num_recordings: usize,
        estimator: Estimator,
    ) -> Result<Self> {
        if gains.len() != n_fft / 2 + 1 {
            return Err(Error::BinMismatch {
                expected: n_fft / 2 + 1,
                actual: gains.len(),
            });
        }
        if gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("correction gains"));
        }
        if gains.iter().any(|&g| g <= 0.0) {
            return Err(Error::invalid("gains", "must be strictly positive"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample_rate", "must be positive"));
        }
        Ok(Self {
            gains,
            n_fft,
            sample_rate,
            source_device: source_device.into(),
            reference_device: reference_device.into(),
            num_recordings,
            estimator,
        })
    }

    /// All-ones gains for `device` onto itself.
    pub fn identity(n_fft: usize, sample_rate: u32, device: &str) -> Result<Self> {
        Self::new(
            vec![1.0; n_fft / 2 + 1],
            n_fft,
            sample_rate,
            device,
            device,
            0,
            Estimator::Aligned,
        )
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn gains_db(&self) -> Vec<f64> {
        self.gains.iter().map(|&g| to_db(g)).collect()
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn num_bins(&self) -> usize {
        self.gains.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_device(&self) -> &str {
        &self.source_device
    }

    pub fn reference_device(&self) -> &str {
        &self.reference_device
    }

    pub fn num_recordings(&self) -> usize {
        self.num_recordings
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator
    }

    /// Gains for the opposite direction.
    pub fn inverse(&self) -> Self {
        Self {
            gains: self.gains.iter().map(|g| 1.0 / g).collect(),
            source_device: self.reference_device.clone(),
            reference_device: self.source_device.clone(),
            ..self.clone()
        }
    }

    /// Chains `self` (d → r) with `next` (r → r') into d → r'.
    pub fn then(&self, next: &CorrectionCoefficients) -> Result<Self> {
        self.check_same_grid(next.n_fft, next.sample_rate)?;
        if self.reference_device != next.source_device {
            return Err(Error::mismatch(
                "device chain",
                &self.reference_device,
                &next.source_device,
            ));
        }
        Ok(Self {
            gains: self.gains.iter().zip(&next.gains).map(|(a, b)| a * b).collect(),
            reference_device: next.reference_device.clone(),
            num_recordings: self.num_recordings.min(next.num_recordings),
            ..self.clone()
        })
    }

    fn check_same_grid(&self, n_fft: usize, sample_rate: u32) -> Result<()> {
        if self.n_fft != n_fft {
            return Err(Error::BinMismatch {
                expected: self.gains.len(),
                actual: n_fft / 2 + 1,
            });
        }
        if self.sample_rate != sample_rate {
            return Err(Error::mismatch("sample_rate", self.sample_rate, sample_rate));
        }
        Ok(())
    }
}

/// Per-bin mean log amplitude of one device, pooled over every frame of
/// every recording seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceSpectrumStats {
    log_mean: Vec<f64>,
    total_frames: usize,
    num_recordings: usize,
    device: String,
    n_fft: usize,
    sample_rate: u32,
}

impl DeviceSpectrumStats {
    /// Statistics of a single recording.
    pub fn from_recording(spec: &AmplitudeSpectrogram, device: &str) -> Result<Self> {
        let frames = spec.num_frames();
        if frames == 0 {
            return Err(Error::Empty("recording without frames"));
        }
        let logs = spec.log_mags();
        let mut column = Vec::with_capacity(frames);
        let log_mean = logs
            .axis_iter(Axis(1))
            .map(|col| {
                column.clear();
                column.extend(col.iter().copied());
                pairwise_sum(&column) / frames as f64
            })
            .collect();
        Ok(Self {
            log_mean,
            total_frames: frames,
            num_recordings: 1,
            device: device.to_string(),
            n_fft: spec.n_fft(),
            sample_rate: spec.sample_rate(),
        })
    }

    /// Rebuilds statistics from stored values.
    pub fn from_parts(
        log_mean: Vec<f64>,
        total_frames: usize,
        num_recordings: usize,
        device: impl Into<String>,
        n_fft: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        if log_mean.len() != n_fft / 2 + 1 {
            return Err(Error::BinMismatch {
                expected: n_fft / 2 + 1,
                actual: log_mean.len(),
            });
        }
        if num_recordings == 0 || total_frames < num_recordings {
            return Err(Error::invalid(
                "stats counts",
                format!("need total_frames >= num_recordings >= 1, got {total_frames} and {num_recordings}"),
            ));
        }
        if log_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log mean"));
        }
        Ok(Self {
            log_mean,
            total_frames,
            num_recordings,
            device: device.into(),
            n_fft,
            sample_rate,
        })
    }

    pub fn log_mean(&self) -> &[f64] {
        &self.log_mean
    }

    /// Per-bin geometric mean amplitude.
    pub fn geometric_mean(&self) -> Vec<f64> {
        self.log_mean.iter().map(|v| v.exp()).collect()
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn num_recordings(&self) -> usize {
        self.num_recordings
    }

    pub fn device(&self) -> &str {
        &self.device
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Frame-weighted combination of two partial statistics of the same
    /// device.
    pub fn merge(&self, other: &DeviceSpectrumStats) -> Result<Self> {
        self.check_config(other)?;
        if self.device != other.device {
            return Err(Error::mismatch("device", &self.device, &other.device));
        }
        let total = self.total_frames + other.total_frames;
        let (wa, wb) = (
            self.total_frames as f64 / total as f64,
            other.total_frames as f64 / total as f64,
        );
        Ok(Self {
            log_mean: self
                .log_mean
                .iter()
                .zip(&other.log_mean)
                .map(|(a, b)| wa * a + wb * b)
                .collect(),
            total_frames: total,
            num_recordings: self.num_recordings + other.num_recordings,
            device: self.device.clone(),
            n_fft: self.n_fft,
            sample_rate: self.sample_rate,
        })
    }

    fn check_config(&self, other: &DeviceSpectrumStats) -> Result<()> {
        if self.n_fft != other.n_fft {
            return Err(Error::mismatch("n_fft", self.n_fft, other.n_fft));
        }
        if self.sample_rate != other.sample_rate {
            return Err(Error::mismatch("sample_rate", self.sample_rate, other.sample_rate));
        }
        Ok(())
    }
}

/// Pools the log amplitudes of all `specs` into device statistics.
///
/// Longer recordings weigh more: every frame counts once.
pub fn accumulate_stats(specs: &[AmplitudeSpectrogram], device: &str) -> Result<DeviceSpectrumStats> {
    let (first, rest) = specs
        .split_first()
        .ok_or(Error::Empty("no recordings to accumulate"))?;
    for spec in rest {
        first.check_compatible(spec)?;
    }
    let mut stats = DeviceSpectrumStats::from_recording(first, device)?;
    for spec in rest {
        stats = stats.merge(&DeviceSpectrumStats::from_recording(spec, device)?)?;
    }
    Ok(stats)
}

/// Gains from paired recordings of the same signal: per-bin geometric mean
/// of `reference / source` over all frames of all pairs.
pub fn estimate_aligned(
    pairs: &[(&AmplitudeSpectrogram, &AmplitudeSpectrogram)],
    source_device: &str,
    reference_device: &str,
) -> Result<CorrectionCoefficients> {
    let (first_ref, _) = pairs.first().ok_or(Error::Empty("no aligned pairs"))?;
    for (index, (reference, source)) in pairs.iter().enumerate() {
        first_ref.check_compatible(reference)?;
        first_ref.check_compatible(source)?;
        if reference.shape() != source.shape() {
            return Err(Error::UnalignedPair {
                index,
                reference_shape: reference.shape(),
                source_shape: source.shape(),
            });
        }
    }
    let log_ratios: Vec<Array2<f64>> = pairs
        .iter()
        .map(|(reference, source)| reference.log_mags() - source.log_mags())
        .collect();
    let total_frames: usize = log_ratios.iter().map(|r| r.nrows()).sum();
    if total_frames == 0 {
        return Err(Error::Empty("aligned pairs without frames"));
    }
    let mut pooled = Vec::with_capacity(total_frames);
    let gains = (0..first_ref.num_bins())
        .map(|f| {
            pooled.clear();
            for ratio in &log_ratios {
                pooled.extend(ratio.column(f).iter().copied());
            }
            (pairwise_sum(&pooled) / total_frames as f64).exp()
        })
        .collect();
    CorrectionCoefficients::new(
        gains,
        first_ref.n_fft(),
        first_ref.sample_rate(),
        source_device,
        reference_device,
        pairs.len(),
        Estimator::Aligned,
    )
}

/// Gains as the ratio of independently computed geometric means.
pub fn estimate_unaligned(
    reference: &DeviceSpectrumStats,
    source: &DeviceSpectrumStats,
) -> Result<CorrectionCoefficients> {
    reference.check_config(source)?;
    let gains = reference
        .log_mean
        .iter()
        .zip(&source.log_mean)
        .map(|(r, s)| (r - s).exp())
        .collect();
    CorrectionCoefficients::new(
        gains,
        source.n_fft,
        source.sample_rate,
        &source.device,
        &reference.device,
        source.num_recordings,
        Estimator::Unaligned,
    )
}

/// Reference-free gains `1 / geometric_mean`. The corrected spectra share
/// a common characteristic across devices that matches none of them.
pub fn simplified_coefficients(stats: &DeviceSpectrumStats) -> CorrectionCoefficients {
    CorrectionCoefficients {
        gains: stats.log_mean.iter().map(|v| (-v).exp()).collect(),
        n_fft: stats.n_fft,
        sample_rate: stats.sample_rate,
        source_device: stats.device.clone(),
        reference_device: NO_REFERENCE.to_string(),
        num_recordings: stats.num_recordings,
        estimator: Estimator::Simplified,
    }
}

fn check_applicable(c: &CorrectionCoefficients, num_bins: usize, sample_rate: u32) -> Result<()> {
    if num_bins != c.gains.len() {
        return Err(Error::BinMismatch {
            expected: c.gains.len(),
            actual: num_bins,
        });
    }
    if sample_rate != c.sample_rate {
        return Err(Error::mismatch("sample_rate", c.sample_rate, sample_rate));
    }
    Ok(())
}

/// `out[t, f] = gains[f] · a[t, f]`.
pub fn apply_to_amplitudes(
    c: &CorrectionCoefficients,
    a: &AmplitudeSpectrogram,
) -> Result<AmplitudeSpectrogram> {
    check_applicable(c, a.num_bins(), a.sample_rate())?;
    let mut mags = a.mags().clone();
    for mut row in mags.axis_iter_mut(Axis(0)) {
        for (m, g) in row.iter_mut().zip(&c.gains) {
            *m *= g;
        }
    }
    AmplitudeSpectrogram::new(mags, *a.config(), a.sample_rate())
}

/// Scales every complex bin by its real gain; phases pass through.
pub fn apply_to_complex(
    c: &CorrectionCoefficients,
    spec: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram> {
    check_applicable(c, spec.num_bins(), spec.sample_rate())?;
    let mut bins = spec.bins().clone();
    for mut row in bins.axis_iter_mut(Axis(0)) {
        for (z, &g) in row.iter_mut().zip(&c.gains) {
            *z *= g;
        }
    }
    ComplexSpectrogram::new(bins, *spec.config(), spec.sample_rate())
}

/// One labelled recording.
#[derive(Clone, Debug)]
pub struct Recording {
    pub id: String,
    pub device: String,
    pub spec: AmplitudeSpectrogram,
}

/// Recordings with device labels and, optionally, alignment groups
/// (recordings in one group captured the same signal).
#[derive(Clone, Debug, Default)]
pub struct RecordingSet {
    items: Vec<Recording>,
    alignment_groups: Option<BTreeMap<String, String>>,
}

impl RecordingSet {
    pub fn new(
        items: Vec<Recording>,
        alignment_groups: Option<BTreeMap<String, String>>,
    ) -> Result<Self> {
        if let Some(first) = items.first() {
            for item in &items[1..] {
                first.spec.check_compatible(&item.spec)?;
                if item.spec.config().hop() != first.spec.config().hop() {
                    return Err(Error::mismatch(
                        "hop",
                        first.spec.config().hop(),
                        item.spec.config().hop(),
                    ));
                }
            }
        }
        if items.iter().any(|r| r.device.is_empty()) {
            return Err(Error::invalid("device", "every recording needs a device label"));
        }
        if let Some(groups) = &alignment_groups {
            let mut frames: BTreeMap<&str, usize> = BTreeMap::new();
            for item in &items {
                let Some(group) = groups.get(&item.id) else {
                    continue;
                };
                let t = item.spec.num_frames();
                if let Some(&expected) = frames.get(group.as_str()) {
                    if expected != t {
                        return Err(Error::mismatch(
                            "frames in alignment group",
                            expected,
                            format!("{t} ({})", item.id),
                        ));
                    }
                } else {
                    frames.insert(group, t);
                }
            }
        }
        Ok(Self {
            items,
            alignment_groups,
        })
    }

    pub fn items(&self) -> &[Recording] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn alignment_groups(&self) -> Option<&BTreeMap<String, String>> {
        self.alignment_groups.as_ref()
    }

    /// Device labels in order of first appearance.
    pub fn devices(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for item in &self.items {
            if !seen.contains(&item.device.as_str()) {
                seen.push(item.device.as_str());
            }
        }
        seen
    }

    pub fn by_device<'a>(&'a self, device: &'a str) -> impl Iterator<Item = &'a Recording> + 'a {
        self.items.iter().filter(move |r| r.device == device)
    }

    /// Statistics of one device's recordings, merged in set order.
    pub fn device_stats(&self, device: &str) -> Result<DeviceSpectrumStats> {
        let specs: Vec<AmplitudeSpectrogram> =
            self.by_device(device).map(|r| r.spec.clone()).collect();
        if specs.is_empty() {
            return Err(Error::invalid("device", format!("no recordings for device '{device}'")));
        }
        accumulate_stats(&specs, device)
    }

    /// `(reference, source)` pairs from alignment groups holding both
    /// devices, in group order.
    pub fn aligned_pairs(
        &self,
        source_device: &str,
        reference_device: &str,
    ) -> Result<Vec<(&AmplitudeSpectrogram, &AmplitudeSpectrogram)>> {
        let groups = self
            .alignment_groups
            .as_ref()
            .ok_or_else(|| Error::invalid("alignment_groups", "recording set has no alignment groups"))?;
        let mut by_group: BTreeMap<&str, (Option<&AmplitudeSpectrogram>, Option<&AmplitudeSpectrogram>)> =
            BTreeMap::new();
        for item in &self.items {
            let Some(group) = groups.get(&item.id) else {
                continue;
            };
            let slot = by_group.entry(group.as_str()).or_default();
            if item.device == reference_device {
                slot.0 = Some(&item.spec);
            }
            if item.device == source_device {
                slot.1 = Some(&item.spec);
            }
        }
        let pairs: Vec<_> = by_group
            .into_values()
            .filter_map(|(r, s)| Some((r?, s?)))
            .collect();
        if pairs.is_empty() {
            return Err(Error::invalid(
                "alignment_groups",
                format!("no group holds both '{source_device}' and '{reference_device}'"),
            ));
        }
        Ok(pairs)
    }
}

/// Subtracts each device's pooled per-bin log mean from its recordings'
/// log spectra. This is the mean term of per-device, per-frequency
/// standardization, and equals `ln(apply_to_amplitudes(simplified_coefficients(stats), A))`
/// for amplitudes above the floor.
///
/// Output is in set order.
pub fn log_mean_subtract_per_device(set: &RecordingSet) -> Result<Vec<Array2<f64>>> {
    if set.is_empty() {
        return Err(Error::Empty("recording set"));
    }
    let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for device in set.devices() {
        means.insert(device, set.device_stats(device)?.log_mean);
    }
    Ok(set
        .items
        .iter()
        .map(|item| subtract_row(item.spec.log_mags(), &means[item.device.as_str()]))
        .collect())
}

/// Same as [`log_mean_subtract_per_device`] but with one mean over all
/// devices. This does not remove device responses.
pub fn log_mean_subtract_pooled(set: &RecordingSet) -> Result<Vec<Array2<f64>>> {
    let specs: Vec<AmplitudeSpectrogram> = set.items.iter().map(|r| r.spec.clone()).collect();
    let stats = accumulate_stats(&specs, "pooled")?;
    Ok(set
        .items
        .iter()
        .map(|item| subtract_row(item.spec.log_mags(), &stats.log_mean))
        .collect())
}

fn subtract_row(mut m: Array2<f64>, row: &[f64]) -> Array2<f64> {
    for mut r in m.axis_iter_mut(Axis(0)) {
        for (v, mean) in r.iter_mut().zip(row) {
            *v -= mean;
        }
    }
    m
}

fn column_means(m: &Array2<f64>) -> Vec<f64> {
    let mut column = Vec::with_capacity(m.nrows());
    m.axis_iter(Axis(1))
        .map(|col| {
            column.clear();
            column.extend(col.iter().copied());
            pairwise_sum(&column) / m.nrows() as f64
        })
        .collect()
}

/// Per-recording mean subtraction over time (classical CMS carried out in
/// the log-spectral domain). Removes the environment response along with
/// the device response.
pub fn cms_per_recording(log_spec: &Array2<f64>) -> Array2<f64> {
    if log_spec.nrows() == 0 {
        return log_spec.clone();
    }
    let means = column_means(log_spec);
    subtract_row(log_spec.clone(), &means)
}

/// Per-bin mean over every frame of every matrix.
pub fn pooled_column_means(mats: &[Array2<f64>]) -> Result<Vec<f64>> {
    let first = mats.first().ok_or(Error::Empty("no matrices"))?;
    let cols = first.ncols();
    if let Some(bad) = mats.iter().find(|m| m.ncols() != cols) {
        return Err(Error::BinMismatch {
            expected: cols,
            actual: bad.ncols(),
        });
    }
    let total: usize = mats.iter().map(|m| m.nrows()).sum();
    if total == 0 {
        return Err(Error::Empty("matrices without rows"));
    }
    let mut pooled = Vec::with_capacity(total);
    Ok((0..cols)
        .map(|f| {
            pooled.clear();
            for m in mats {
                pooled.extend(m.column(f).iter().copied());
            }
            pairwise_sum(&pooled) / total as f64
        })
        .collect())
}

/// Real cepstrum of one log-amplitude frame of `F` one-sided bins.
///
/// The frame is extended evenly to a full period of `N = 2(F - 1)` points
/// and inverse-DFT'd:
/// `c[n] = (1/N) · Σ_{k<N} x[k] · e^{i2πkn/N}` with `x[N-k] = x[k]`.
/// The result is real and even in `n`, so only `c[0..F]` is kept.
#[derive(Clone)]
pub struct CepstrumTransform {
    num_bins: usize,
    period: usize,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for CepstrumTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CepstrumTransform")
            .field("num_bins", &self.num_bins)
            .field("period", &self.period)
            .finish()
    }
}

impl CepstrumTransform {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins < 2 {
            return Err(Error::invalid("num_bins", "cepstrum needs at least 2 bins"));
        }
        let period = 2 * (num_bins - 1);
        Ok(Self {
            num_bins,
            period,
            ifft: FftPlanner::new().plan_fft_inverse(period),
        })
    }

    /// Length of the even extension.
    pub fn period(&self) -> usize {
        self.period
    }

    /// Factor applied after the unnormalized inverse DFT.
    pub fn scale(&self) -> f64 {
        1.0 / self.period as f64
    }

    pub fn describe(&self) -> String {
        format!(
            "inverse DFT of even extension, period {}, scale 1/{}",
            self.period, self.period
        )
    }

    pub fn apply(&self, log_frame: &[f64]) -> Result<Vec<f64>> {
        if log_frame.len() != self.num_bins {
            return Err(Error::BinMismatch {
                expected: self.num_bins,
                actual: log_frame.len(),
            });
        }
        if log_frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log spectrum frame"));
        }
        let n = self.period;
        let mut buffer: Vec<Complex64> = (0..n)
            .map(|k| {
                let src = if k < self.num_bins { k } else { n - k };
                Complex64::new(log_frame[src], 0.0)
            })
            .collect();
        self.ifft.process(&mut buffer);
        let scale = self.scale();
        Ok(buffer[..self.num_bins].iter().map(|z| z.re * scale).collect())
    }

    /// Cepstrum of every row.
    pub fn apply_rows(&self, log_spec: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((log_spec.nrows(), self.num_bins));
        let mut frame = Vec::with_capacity(self.num_bins);
        for (src, mut dst) in log_spec.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            frame.clear();
            frame.extend(src.iter().copied());
            for (d, v) in dst.iter_mut().zip(self.apply(&frame)?) {
                *d = v;
            }
        }
        Ok(out)
    }
}

/// Cepstrum of a single log-amplitude frame; see [`CepstrumTransform`].
pub fn real_cepstrum(log_frame: &[f64]) -> Result<Vec<f64>> {
    CepstrumTransform::new(log_frame.len())?.apply(log_frame)
}

/// Cepstral mean subtraction with the mean taken over the whole dataset
/// (every frame of every recording) instead of per recording.
pub fn cms_dataset(log_specs: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    let first = log_specs.first().ok_or(Error::Empty("no recordings"))?;
    let transform = CepstrumTransform::new(first.ncols())?;
    let cepstra = log_specs
        .iter()
        .map(|m| transform.apply_rows(m))
        .collect::<Result<Vec<_>>>()?;
    let mean = pooled_column_means(&cepstra)?;
    Ok(cepstra.into_iter().map(|c| subtract_row(c, &mean)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{StftConfig, Window};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const N_FFT: usize = 16;
    const SR: u32 = 8_000;

    fn config() -> StftConfig {
        StftConfig::new(N_FFT, 4, Window::Hann).unwrap()
    }

    fn spec(m: Array2<f64>) -> AmplitudeSpectrogram {
        AmplitudeSpectrogram::new(m, config(), SR).unwrap()
    }

    fn random_spec(frames: usize, rng: &mut ChaCha8Rng) -> AmplitudeSpectrogram {
        spec(Array2::from_shape_fn((frames, N_FFT / 2 + 1), |_| {
            rng.random_range(1e-3..10.0)
        }))
    }

    fn constant(frames: usize, value: f64) -> AmplitudeSpectrogram {
        spec(Array2::from_elem((frames, N_FFT / 2 + 1), value))
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs())
    }

    #[test]
    fn stats_of_constant_recording() {
        let stats = accumulate_stats(&[constant(7, 0.25)], "a").unwrap();
        assert!(stats.log_mean().iter().all(|v| (v - 0.25f64.ln()).abs() < 1e-15));
        assert_eq!(stats.total_frames(), 7);
        assert_eq!(stats.num_recordings(), 1);
    }

    #[test]
    fn stats_of_two_constants_average_logs() {
        let (a, b) = (0.5f64, 3.0f64);
        let stats = accumulate_stats(&[constant(5, a), constant(5, b)], "a").unwrap();
        for v in stats.log_mean() {
            assert!((v - (a.ln() + b.ln()) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn stats_weight_recordings_by_frames() {
        let stats = accumulate_stats(&[constant(1, 1.0), constant(3, 2.0f64.exp())], "a").unwrap();
        assert!(stats.log_mean().iter().all(|v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn accumulate_rejects_mixed_configs_and_empty() {
        let other = AmplitudeSpectrogram::new(
            Array2::ones((3, N_FFT / 2 + 1)),
            config(),
            SR * 2,
        )
        .unwrap();
        assert!(matches!(
            accumulate_stats(&[constant(3, 1.0), other], "a"),
            Err(Error::ConfigMismatch { field: "sample_rate", .. })
        ));
        assert!(accumulate_stats(&[], "a").is_err());
    }

    #[test]
    fn aligned_identity_and_scaled_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_spec(10, &mut rng);
        let c = estimate_aligned(&[(&r, &r)], "d", "r").unwrap();
        assert!(c.gains().iter().all(|&g| g == 1.0));

        let g: Vec<f64> = (0..N_FFT / 2 + 1).map(|k| 0.5 + k as f64 * 0.3).collect();
        let mut scaled = r.mags().clone();
        for mut row in scaled.rows_mut() {
            for (v, gk) in row.iter_mut().zip(&g) {
                *v *= gk;
            }
        }
        let src = spec(scaled);
        let c = estimate_aligned(&[(&r, &src)], "d", "r").unwrap();
        for (got, gk) in c.gains().iter().zip(&g) {
            assert!(rel_close(*got, 1.0 / gk, 1e-12));
        }
        assert_eq!(c.estimator(), Estimator::Aligned);
        assert_eq!(c.source_device(), "d");
        assert_eq!(c.reference_device(), "r");
    }

    #[test]
    fn aligned_rejects_shape_mismatch() {
        let a = constant(4, 1.0);
        let b = constant(5, 1.0);
        assert!(matches!(
            estimate_aligned(&[(&a, &a), (&a, &b)], "d", "r"),
            Err(Error::UnalignedPair { index: 1, .. })
        ));
    }

    #[test]
    fn unaligned_of_equal_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = accumulate_stats(&[random_spec(9, &mut rng)], "a").unwrap();
        let c = estimate_unaligned(&s, &s).unwrap();
        assert!(c.gains().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn unaligned_rejects_config_mismatch() {
        let a = DeviceSpectrumStats::from_parts(vec![0.0; 9], 1, 1, "a", 16, SR).unwrap();
        let b = DeviceSpectrumStats::from_parts(vec![0.0; 9], 1, 1, "b", 16, SR + 1).unwrap();
        assert!(estimate_unaligned(&a, &b).is_err());
        assert!(DeviceSpectrumStats::from_parts(vec![0.0; 9], 1, 2, "a", 16, SR).is_err());
    }

    #[test]
    fn apply_identity_and_reciprocal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spec(6, &mut rng);
        let id = CorrectionCoefficients::identity(N_FFT, SR, "a").unwrap();
        assert_eq!(apply_to_amplitudes(&id, &a).unwrap(), a);

        let sr = accumulate_stats(&[random_spec(5, &mut rng)], "r").unwrap();
        let sd = accumulate_stats(&[random_spec(5, &mut rng)], "d").unwrap();
        let forward = estimate_unaligned(&sr, &sd).unwrap();
        let back = estimate_unaligned(&sd, &sr).unwrap();
        let round = apply_to_amplitudes(&back, &apply_to_amplitudes(&forward, &a).unwrap()).unwrap();
        for (x, y) in a.mags().iter().zip(round.mags()) {
            assert!(rel_close(*x, *y, 1e-9));
        }
    }

    #[test]
    fn apply_rejects_bin_mismatch() {
        let c = CorrectionCoefficients::identity(32, SR, "a").unwrap();
        assert!(matches!(
            apply_to_amplitudes(&c, &constant(2, 1.0)),
            Err(Error::BinMismatch { expected: 17, actual: 9 })
        ));
    }

    #[test]
    fn complex_application_keeps_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bins = Array2::from_shape_fn((5, N_FFT / 2 + 1), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let cs = ComplexSpectrogram::new(bins, config(), SR).unwrap();
        let id = CorrectionCoefficients::identity(N_FFT, SR, "a").unwrap();
        assert_eq!(apply_to_complex(&id, &cs).unwrap(), cs);

        let gains: Vec<f64> = (0..N_FFT / 2 + 1).map(|k| 0.1 + k as f64).collect();
        let c = CorrectionCoefficients::new(gains, N_FFT, SR, "d", "r", 1, Estimator::Aligned).unwrap();
        let out = apply_to_complex(&c, &cs).unwrap();
        let via_amp = apply_to_amplitudes(&c, &crate::dsp::amplitude(&cs)).unwrap();
        for ((z, w), m) in cs.bins().iter().zip(out.bins()).zip(via_amp.mags()) {
            assert!((w.norm() - m).abs() <= 1e-12 * m.max(1.0));
            if z.norm() > 1e-12 {
                assert!((w.arg() - z.arg()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simplified_from_zero_log_mean_is_identity() {
        let stats = DeviceSpectrumStats::from_parts(vec![0.0; 9], 3, 1, "a", 16, SR).unwrap();
        let c = simplified_coefficients(&stats);
        assert!(c.gains().iter().all(|&g| g == 1.0));
        assert_eq!(c.reference_device(), NO_REFERENCE);
        assert_eq!(c.estimator(), Estimator::Simplified);
    }

    #[test]
    fn simplified_ratio_is_unaligned_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sr = accumulate_stats(&[random_spec(8, &mut rng)], "r").unwrap();
        let sd = accumulate_stats(&[random_spec(8, &mut rng)], "d").unwrap();
        let gr = simplified_coefficients(&sr);
        let gd = simplified_coefficients(&sd);
        let c = estimate_unaligned(&sr, &sd).unwrap();
        for ((a, b), g) in gd.gains().iter().zip(gr.gains()).zip(c.gains()) {
            assert!(rel_close(a / b, *g, 1e-12));
        }
    }

    #[test]
    fn coefficients_validate_gains() {
        assert!(CorrectionCoefficients::new(vec![1.0; 9], 16, SR, "a", "b", 1, Estimator::Aligned).is_ok());
        assert!(CorrectionCoefficients::new(vec![1.0; 8], 16, SR, "a", "b", 1, Estimator::Aligned).is_err());
        let mut g = vec![1.0; 9];
        g[3] = 0.0;
        assert!(CorrectionCoefficients::new(g.clone(), 16, SR, "a", "b", 1, Estimator::Aligned).is_err());
        g[3] = f64::INFINITY;
        assert!(CorrectionCoefficients::new(g, 16, SR, "a", "b", 1, Estimator::Aligned).is_err());
    }

    fn labelled(items: Vec<(&str, AmplitudeSpectrogram)>) -> RecordingSet {
        RecordingSet::new(
            items
                .into_iter()
                .enumerate()
                .map(|(i, (device, spec))| Recording {
                    id: format!("rec{i}"),
                    device: device.to_string(),
                    spec,
                })
                .collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn mean_subtraction_of_constant_is_zero() {
        let set = labelled(vec![("a", constant(4, 3.5))]);
        let out = log_mean_subtract_per_device(&set).unwrap();
        assert!(out[0].iter().all(|v| v.abs() < 1e-15));
        assert!(log_mean_subtract_per_device(&RecordingSet::default()).is_err());
    }

    #[test]
    fn recording_set_checks_groups_and_labels() {
        let items = vec![
            Recording { id: "x".into(), device: "a".into(), spec: constant(4, 1.0) },
            Recording { id: "y".into(), device: "b".into(), spec: constant(5, 1.0) },
        ];
        let groups: BTreeMap<String, String> =
            [("x".into(), "g".into()), ("y".into(), "g".into())].into();
        assert!(RecordingSet::new(items.clone(), Some(groups)).is_err());
        let mut unlabeled = items;
        unlabeled[0].device.clear();
        assert!(RecordingSet::new(unlabeled, None).is_err());
    }

    #[test]
    fn aligned_pairs_follow_groups() {
        let items = vec![
            Recording { id: "x1".into(), device: "a".into(), spec: constant(4, 1.0) },
            Recording { id: "y1".into(), device: "b".into(), spec: constant(4, 2.0) },
            Recording { id: "x2".into(), device: "a".into(), spec: constant(6, 1.0) },
            Recording { id: "y2".into(), device: "b".into(), spec: constant(6, 2.0) },
        ];
        let groups: BTreeMap<String, String> = [
            ("x1".into(), "g1".into()),
            ("y1".into(), "g1".into()),
            ("x2".into(), "g2".into()),
            ("y2".into(), "g2".into()),
        ]
        .into();
        let set = RecordingSet::new(items, Some(groups)).unwrap();
        let pairs = set.aligned_pairs("b", "a").unwrap();
        assert_eq!(pairs.len(), 2);
        let c = estimate_aligned(&pairs, "b", "a").unwrap();
        assert!(c.gains().iter().all(|g| (g - 0.5).abs() < 1e-15));
        assert!(set.aligned_pairs("b", "zz").is_err());
    }

    #[test]
    fn cms_per_recording_of_stationary_is_zero() {
        let m = Array2::from_shape_fn((6, 5), |(_, f)| f as f64 * 0.7 - 1.0);
        assert!(cms_per_recording(&m).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn cms_per_recording_ignores_per_bin_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_spec(12, &mut rng);
        let scale: Vec<f64> = (0..N_FFT / 2 + 1).map(|k| 0.2 + k as f64).collect();
        let c = CorrectionCoefficients::new(scale, N_FFT, SR, "d", "r", 1, Estimator::Aligned).unwrap();
        let b = apply_to_amplitudes(&c, &a).unwrap();
        let x = cms_per_recording(&a.log_mags());
        let y = cms_per_recording(&b.log_mags());
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn cepstrum_of_constant_is_impulse() {
        let c = real_cepstrum(&[2.5; 9]).unwrap();
        assert!((c[0] - 2.5).abs() < 1e-14);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-14));
        assert!(real_cepstrum(&[1.0]).is_err());
        assert!(real_cepstrum(&[1.0, f64::NAN]).is_err());
    }

    /// Direct evaluation of the even-extension inverse DFT.
    fn cepstrum_oracle(x: &[f64]) -> Vec<f64> {
        let f = x.len();
        let n = 2 * (f - 1);
        (0..f)
            .map(|q| {
                (0..n)
                    .map(|k| {
                        let v = if k < f { x[k] } else { x[n - k] };
                        v * (2.0 * std::f64::consts::PI * (k * q) as f64 / n as f64).cos()
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .collect()
    }

    #[test]
    fn cepstrum_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..33).map(|_| rng.random_range(-5.0..5.0)).collect();
        let t = CepstrumTransform::new(33).unwrap();
        assert_eq!(t.period(), 64);
        for (a, b) in t.apply(&x).unwrap().iter().zip(cepstrum_oracle(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn cepstrum_is_linear(
            a in prop::collection::vec(-20.0f64..20.0, 17),
            b in prop::collection::vec(-20.0f64..20.0, 17),
        ) {
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let ca = real_cepstrum(&a).unwrap();
            let cb = real_cepstrum(&b).unwrap();
            let cs = real_cepstrum(&sum).unwrap();
            for i in 0..17 {
                prop_assert!((cs[i] - ca[i] - cb[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn merge_is_commutative_and_associative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<_> = (0..3)
                .map(|_| {
                    let frames = rng.random_range(1..20);
                    DeviceSpectrumStats::from_recording(&random_spec(frames, &mut rng), "a").unwrap()
                })
                .collect();
            let ab = parts[0].merge(&parts[1]).unwrap();
            let ba = parts[1].merge(&parts[0]).unwrap();
            let left = ab.merge(&parts[2]).unwrap();
            let right = parts[0].merge(&parts[1].merge(&parts[2]).unwrap()).unwrap();
            for i in 0..ab.log_mean().len() {
                prop_assert!((ab.log_mean()[i] - ba.log_mean()[i]).abs() < 1e-12);
                prop_assert!((left.log_mean()[i] - right.log_mean()[i]).abs() < 1e-12);
            }
            prop_assert_eq!(left.total_frames(), right.total_frames());
        }

        #[test]
        fn accumulation_is_order_independent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let specs: Vec<_> = (0..5).map(|_| {
                let frames = rng.random_range(1..12);
                random_spec(frames, &mut rng)
            }).collect();
            let mut shuffled = specs.clone();
            shuffled.reverse();
            shuffled.swap(0, 2);
            let a = accumulate_stats(&specs, "a").unwrap();
            let b = accumulate_stats(&shuffled, "a").unwrap();
            for (x, y) in a.log_mean().iter().zip(b.log_mean()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn reciprocity_and_transitivity(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stats: Vec<_> = ["d", "r", "q"]
                .iter()
                .map(|dev| accumulate_stats(&[random_spec(7, &mut rng)], dev).unwrap())
                .collect();
            let d_r = estimate_unaligned(&stats[1], &stats[0]).unwrap();
            let r_d = estimate_unaligned(&stats[0], &stats[1]).unwrap();
            let r_q = estimate_unaligned(&stats[2], &stats[1]).unwrap();
            let d_q = estimate_unaligned(&stats[2], &stats[0]).unwrap();
            let chained = d_r.then(&r_q).unwrap();
            for f in 0..d_r.num_bins() {
                prop_assert!((d_r.gains()[f] * r_d.gains()[f] - 1.0).abs() < 1e-12);
                prop_assert!(rel_close(chained.gains()[f], d_q.gains()[f], 1e-12));
            }
            prop_assert_eq!(chained.reference_device(), "q");
        }

        #[test]
        fn gains_scale_inversely_with_source(seed in 0u64..500, k in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_spec(6, &mut rng);
            let s = random_spec(6, &mut rng);
            let ks = spec(s.mags().mapv(|v| v * k));
            let base = estimate_aligned(&[(&r, &s)], "d", "r").unwrap();
            let scaled = estimate_aligned(&[(&r, &ks)], "d", "r").unwrap();
            let sr = accumulate_stats(std::slice::from_ref(&r), "r").unwrap();
            let ub = estimate_unaligned(&sr, &accumulate_stats(&[s], "d").unwrap()).unwrap();
            let us = estimate_unaligned(&sr, &accumulate_stats(&[ks], "d").unwrap()).unwrap();
            for f in 0..base.num_bins() {
                prop_assert!(rel_close(scaled.gains()[f], base.gains()[f] / k, 1e-12));
                prop_assert!(rel_close(us.gains()[f], ub.gains()[f] / k, 1e-12));
            }
        }
    }
}
