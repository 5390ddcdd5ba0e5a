//! Log-mel features: optional spectrum correction on STFT amplitudes, mel
//! projection of amplitudes, natural log, then per-bin standardization over
//! the whole dataset or separately per device.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};

use crate::correction::{apply_to_amplitudes, CorrectionCoefficients};
use crate::dsp::{bin_frequency, AmplitudeSpectrogram, DEFAULT_FLOOR};
use crate::error::{Error, Result};

/// Mel bands used when none are given.
pub const DEFAULT_N_MELS: usize = 256;
/// Floor on the standard deviation used for standardization.
pub const STD_FLOOR: f64 = 1e-8;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Row scaling of the triangular filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MelNorm {
    /// Peak weight 1.
    #[default]
    None,
    /// Each triangle scaled by `2 / bandwidth_hz` (equal area).
    Slaney,
}

impl MelNorm {
    pub fn name(self) -> &'static str {
        match self {
            MelNorm::None => "none",
            MelNorm::Slaney => "slaney",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    centers_hz: Vec<f64>,
    f_min: f64,
    f_max: f64,
    n_fft: usize,
    sample_rate: u32,
    norm: MelNorm,
}

impl MelFilterbank {
    /// `n_mels × F` weights.
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.weights.ncols()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn norm(&self) -> MelNorm {
        self.norm
    }

    /// Self-describing summary of the filterbank construction.
    pub fn describe(&self) -> String {
        format!(
            "htk mel, {} bands, {}-{} Hz, norm {}, n_fft {}, sr {}",
            self.n_mels(),
            self.f_min,
            self.f_max,
            self.norm.name(),
            self.n_fft,
            self.sample_rate
        )
    }
}

pub fn mel_filterbank(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank> {
    mel_filterbank_with_norm(sample_rate, n_fft, n_mels, f_min, f_max, MelNorm::None)
}

/// Triangular filters between `n_mels + 2` mel-spaced edge frequencies.
///
/// A filter too narrow to contain any bin centre (low bands of a fine mel
/// grid on a coarse STFT) gets weight 1 at the bin nearest its centre, so
/// no band is empty.
pub fn mel_filterbank_with_norm(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
    norm: MelNorm,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(Error::invalid(
            "mel band",
            format!("need 0 <= f_min < f_max <= {nyquist}, got {f_min}..{f_max}"),
        ));
    }
    if n_mels == 0 {
        return Err(Error::invalid("n_mels", "must be at least 1"));
    }
    if n_fft < 2 {
        return Err(Error::invalid("n_fft", "must be at least 2"));
    }
    let num_bins = n_fft / 2 + 1;
    let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let mut edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    edges[0] = f_min;
    edges[n_mels + 1] = f_max;
    let freqs: Vec<f64> = (0..num_bins).map(|k| bin_frequency(k, n_fft, sample_rate)).collect();

    let mut weights = Array2::zeros((n_mels, num_bins));
    for (m, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
        let (lower, center, upper) = (edges[m], edges[m + 1], edges[m + 2]);
        for (w, &f) in row.iter_mut().zip(&freqs) {
            *w = if f > lower && f <= center {
                (f - lower) / (center - lower)
            } else if f > center && f < upper {
                (upper - f) / (upper - center)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w == 0.0) {
            let nearest = ((center * n_fft as f64 / sample_rate as f64).round() as usize).min(num_bins - 1);
            row[nearest] = 1.0;
        }
        if norm == MelNorm::Slaney {
            let scale = 2.0 / (upper - lower);
            row.mapv_inplace(|w| w * scale);
        }
    }
    Ok(MelFilterbank {
        weights,
        centers_hz: edges[1..=n_mels].to_vec(),
        f_min,
        f_max,
        n_fft,
        sample_rate,
        norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    Global,
    PerDevice,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Raw => "raw",
            Normalization::Global => "global",
            Normalization::PerDevice => "per-device",
        }
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Normalization::Raw),
            "global" => Ok(Normalization::Global),
            "per-device" | "per_device" => Ok(Normalization::PerDevice),
            other => Err(Error::invalid("normalization", format!("unknown mode '{other}'"))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where in the pipeline correction gains were applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrectionStage {
    None,
    /// On STFT amplitudes, before the mel projection.
    PreMel,
    /// On mel bands, after the projection.
    PostMel,
}

impl CorrectionStage {
    pub fn name(self) -> &'static str {
        match self {
            CorrectionStage::None => "none",
            CorrectionStage::PreMel => "pre-mel",
            CorrectionStage::PostMel => "post-mel",
        }
    }
}

impl FromStr for CorrectionStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CorrectionStage::None),
            "pre-mel" => Ok(CorrectionStage::PreMel),
            "post-mel" => Ok(CorrectionStage::PostMel),
            other => Err(Error::invalid("correction stage", format!("unknown stage '{other}'"))),
        }
    }
}

/// Frames × mel bands.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub values: Array2<f64>,
    pub normalization: Normalization,
    pub stats_id: String,
    pub correction: CorrectionStage,
}

impl FeatureTensor {
    pub fn new(
        values: Array2<f64>,
        normalization: Normalization,
        stats_id: impl Into<String>,
        correction: CorrectionStage,
    ) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature values"));
        }
        Ok(Self {
            values,
            normalization,
            stats_id: stats_id.into(),
            correction,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }
}

fn check_filterbank(a: &AmplitudeSpectrogram, fb: &MelFilterbank) -> Result<()> {
    if a.num_bins() != fb.num_bins() {
        return Err(Error::BinMismatch {
            expected: fb.num_bins(),
            actual: a.num_bins(),
        });
    }
    if a.sample_rate() != fb.sample_rate {
        return Err(Error::mismatch("sample_rate", fb.sample_rate, a.sample_rate()));
    }
    Ok(())
}

/// Linear mel projection of amplitudes (frames × mel bands), no log.
pub fn mel_project(a: &AmplitudeSpectrogram, fb: &MelFilterbank) -> Result<Array2<f64>> {
    check_filterbank(a, fb)?;
    Ok(a.mags().dot(&fb.weights.t()))
}

/// Correct (if gains are given), project to mel, take the log.
pub fn extract(
    a: &AmplitudeSpectrogram,
    fb: &MelFilterbank,
    c: Option<&CorrectionCoefficients>,
) -> Result<FeatureTensor> {
    check_filterbank(a, fb)?;
    let (mel, stage) = match c {
        Some(c) => (
            mel_project(&apply_to_amplitudes(c, a)?, fb)?,
            CorrectionStage::PreMel,
        ),
        None => (mel_project(a, fb)?, CorrectionStage::None),
    };
    FeatureTensor::new(log_floor(mel), Normalization::Raw, "raw", stage)
}

/// Applies the gains after the mel projection instead, using each band's
/// weighted geometric mean gain. Only equivalent to [`extract`] when the
/// gains are constant within every band.
pub fn extract_post_mel(
    a: &AmplitudeSpectrogram,
    fb: &MelFilterbank,
    c: &CorrectionCoefficients,
) -> Result<FeatureTensor> {
    check_filterbank(a, fb)?;
    if c.num_bins() != fb.num_bins() {
        return Err(Error::BinMismatch {
            expected: fb.num_bins(),
            actual: c.num_bins(),
        });
    }
    let band_log_gain: Vec<f64> = fb
        .weights
        .axis_iter(Axis(0))
        .map(|row| {
            let total: f64 = row.sum();
            row.iter().zip(c.gains()).map(|(w, g)| w * g.ln()).sum::<f64>() / total
        })
        .collect();
    let mut values = log_floor(mel_project(a, fb)?);
    for mut row in values.axis_iter_mut(Axis(0)) {
        for (v, g) in row.iter_mut().zip(&band_log_gain) {
            *v += g;
        }
    }
    FeatureTensor::new(values, Normalization::Raw, "raw", CorrectionStage::PostMel)
}

fn log_floor(m: Array2<f64>) -> Array2<f64> {
    m.mapv_into(|v| v.max(DEFAULT_FLOOR).ln())
}

/// Count, mean and sum of squared deviations per column; mergeable.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl MomentStats {
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let count = m.nrows();
        let mean: Vec<f64> = m
            .axis_iter(Axis(1))
            .map(|c| if count == 0 { 0.0 } else { c.sum() / count as f64 })
            .collect();
        let m2 = m
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(c, mu)| c.iter().map(|v| (v - mu) * (v - mu)).sum())
            .collect();
        Self { count, mean, m2 }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&self, other: &MomentStats) -> MomentStats {
        if self.count == 0 {
            return other.clone();
        }
        if other.count == 0 {
            return self.clone();
        }
        let n = (self.count + other.count) as f64;
        let (na, nb) = (self.count as f64, other.count as f64);
        let mut mean = Vec::with_capacity(self.mean.len());
        let mut m2 = Vec::with_capacity(self.mean.len());
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            mean.push(self.mean[i] + delta * nb / n);
            m2.push(self.m2[i] + other.m2[i] + delta * delta * na * nb / n);
        }
        MomentStats {
            count: self.count + other.count,
            mean,
            m2,
        }
    }

    /// Population standard deviation, floored at [`STD_FLOOR`].
    pub fn std(&self) -> Vec<f64> {
        self.m2
            .iter()
            .map(|m2| (m2 / self.count.max(1) as f64).sqrt().max(STD_FLOOR))
            .collect()
    }
}

/// Per-mel-bin statistics of one standardization group.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationStats {
    pub id: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub frames: usize,
}

impl StandardizationStats {
    fn from_moments(id: String, moments: &MomentStats) -> Self {
        Self {
            id,
            mean: moments.mean.clone(),
            std: moments.std(),
            frames: moments.count,
        }
    }

    pub fn apply(&self, f: &FeatureTensor, normalization: Normalization) -> Result<FeatureTensor> {
        if f.n_mels() != self.mean.len() {
            return Err(Error::BinMismatch {
                expected: self.mean.len(),
                actual: f.n_mels(),
            });
        }
        let mut values = f.values.clone();
        for mut row in values.axis_iter_mut(Axis(0)) {
            for ((v, mu), sigma) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sigma;
            }
        }
        FeatureTensor::new(values, normalization, self.id.clone(), f.correction)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    Global,
    PerDevice,
}

/// Standardizes every mel bin to zero mean and unit variance using the
/// frames of its group: all features, or those sharing a device label.
/// Returns outputs in input order and the statistics of each group.
pub fn standardize(
    features: &[FeatureTensor],
    grouping: Grouping,
    device_labels: Option<&[String]>,
) -> Result<(Vec<FeatureTensor>, Vec<StandardizationStats>)> {
    let first = features.first().ok_or(Error::Empty("no features to standardize"))?;
    if let Some(bad) = features.iter().find(|f| f.n_mels() != first.n_mels()) {
        return Err(Error::BinMismatch {
            expected: first.n_mels(),
            actual: bad.n_mels(),
        });
    }
    let groups: Vec<String> = match grouping {
        Grouping::Global => vec!["global".to_string(); features.len()],
        Grouping::PerDevice => {
            let labels = device_labels.ok_or_else(|| {
                Error::invalid("device_labels", "per-device standardization needs device labels")
            })?;
            if labels.len() != features.len() {
                return Err(Error::invalid(
                    "device_labels",
                    format!("{} labels for {} feature tensors", labels.len(), features.len()),
                ));
            }
            labels.iter().map(|l| format!("device:{l}")).collect()
        }
    };
    let normalization = match grouping {
        Grouping::Global => Normalization::Global,
        Grouping::PerDevice => Normalization::PerDevice,
    };

    let mut moments: BTreeMap<&str, MomentStats> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (f, g) in features.iter().zip(&groups) {
        let m = MomentStats::from_matrix(&f.values);
        match moments.get_mut(g.as_str()) {
            Some(acc) => *acc = acc.merge(&m),
            None => {
                order.push(g);
                moments.insert(g, m);
            }
        }
    }
    let stats: BTreeMap<&str, StandardizationStats> = moments
        .iter()
        .map(|(g, m)| (*g, StandardizationStats::from_moments(g.to_string(), m)))
        .collect();
    let out = features
        .iter()
        .zip(&groups)
        .map(|(f, g)| stats[g.as_str()].apply(f, normalization))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, order.iter().map(|g| stats[g].clone()).collect()))
}
