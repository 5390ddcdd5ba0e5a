//! Signal primitives: waveforms, windowed STFT and its weighted overlap-add
//! inverse, magnitude extraction, log-domain geometric means and linear
//! convolution.
//!
//! Frames are never center-padded: frame `t` covers samples
//! `[t * hop, t * hop + n_fft)` of the input, so every frame lies fully
//! inside the signal.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Floor applied to linear amplitudes before taking logarithms.
pub const DEFAULT_FLOOR: f64 = 1e-10;

const MIN_N_FFT: usize = 16;
const COLA_TOLERANCE: f64 = 1e-10;

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample_rate", "must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let squares: Vec<f64> = self.samples.iter().map(|s| s * s).collect();
        (pairwise_sum(&squares) / self.samples.len() as f64).sqrt()
    }
}

/// Analysis window. All windows are periodic (DFT-even), which is what
/// makes the overlap-add sums exactly constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Window {
    #[default]
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    pub fn name(self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Hamming => "hamming",
            Window::Rectangular => "rectangular",
        }
    }

    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / n;
                match self {
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hann" | "hanning" => Ok(Window::Hann),
            "hamming" => Ok(Window::Hamming),
            "rect" | "rectangular" | "boxcar" => Ok(Window::Rectangular),
            _ => Err(Error::UnknownWindow(s.to_string())),
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Frame size, hop and window of an STFT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StftConfig {
    n_fft: usize,
    hop: usize,
    window: Window,
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize, window: Window) -> Result<Self> {
        if n_fft < MIN_N_FFT || !n_fft.is_multiple_of(2) {
            return Err(Error::invalid(
                "n_fft",
                format!("must be even and at least {MIN_N_FFT}, got {n_fft}"),
            ));
        }
        if hop == 0 {
            return Err(Error::invalid("hop", "must be at least 1"));
        }
        Ok(Self { n_fft, hop, window })
    }

    /// Like [`StftConfig::new`] with the window given by name.
    pub fn with_window_name(n_fft: usize, hop: usize, window: &str) -> Result<Self> {
        Self::new(n_fft, hop, window.parse()?)
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn num_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.n_fft {
            0
        } else {
            (num_samples - self.n_fft) / self.hop + 1
        }
    }

    /// Sum of the squared window over all frames overlapping one sample,
    /// if it is the same for every sample position; `None` otherwise.
    pub fn overlap_add_gain(&self) -> Option<f64> {
        let window = self.window.coefficients(self.n_fft);
        let sums: Vec<f64> = (0..self.hop.min(self.n_fft))
            .map(|offset| {
                window[offset..]
                    .iter()
                    .step_by(self.hop)
                    .map(|w| w * w)
                    .sum::<f64>()
            })
            .collect();
        if self.hop > self.n_fft {
            // Samples between frames are never covered.
            return None;
        }
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        (max > 0.0 && max - min <= COLA_TOLERANCE * max).then_some(max)
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 2048,
            hop: 512,
            window: Window::Hann,
        }
    }
}

/// Centre frequency of STFT bin `k`.
pub fn bin_frequency(k: usize, n_fft: usize, sample_rate: u32) -> f64 {
    k as f64 * sample_rate as f64 / n_fft as f64
}

/// Indices of the bins whose centre frequency lies in `[low_hz, high_hz]`.
pub fn bins_in_band(n_fft: usize, sample_rate: u32, low_hz: f64, high_hz: f64) -> Vec<usize> {
    (0..=n_fft / 2)
        .filter(|&k| {
            let f = bin_frequency(k, n_fft, sample_rate);
            f >= low_hz && f <= high_hz
        })
        .collect()
}

/// One-sided complex STFT, frames × bins.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    bins: Array2<Complex64>,
    config: StftConfig,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(bins: Array2<Complex64>, config: StftConfig, sample_rate: u32) -> Result<Self> {
        if bins.ncols() != config.num_bins() {
            return Err(Error::BinMismatch {
                expected: config.num_bins(),
                actual: bins.ncols(),
            });
        }
        Ok(Self {
            bins,
            config,
            sample_rate,
        })
    }

    pub fn bins(&self) -> &Array2<Complex64> {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.bins
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_frames(&self) -> usize {
        self.bins.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.ncols()
    }
}

/// Non-negative magnitude matrix, frames × bins.
#[derive(Clone, Debug, PartialEq)]
pub struct AmplitudeSpectrogram {
    mags: Array2<f64>,
    config: StftConfig,
    sample_rate: u32,
}

impl AmplitudeSpectrogram {
    pub fn new(mags: Array2<f64>, config: StftConfig, sample_rate: u32) -> Result<Self> {
        if mags.ncols() != config.num_bins() {
            return Err(Error::BinMismatch {
                expected: config.num_bins(),
                actual: mags.ncols(),
            });
        }
        if mags.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("amplitude spectrogram"));
        }
        if mags.iter().any(|&m| m < 0.0) {
            return Err(Error::invalid("amplitudes", "must be non-negative"));
        }
        Ok(Self {
            mags,
            config,
            sample_rate,
        })
    }

    pub fn mags(&self) -> &Array2<f64> {
        &self.mags
    }

    pub fn into_mags(self) -> Array2<f64> {
        self.mags
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_fft(&self) -> usize {
        self.config.n_fft
    }

    pub fn num_frames(&self) -> usize {
        self.mags.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.mags.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_frames(), self.num_bins())
    }

    /// Same values under different metadata is a mistake the estimators
    /// must catch, so comparisons go through this.
    pub(crate) fn check_compatible(&self, other: &AmplitudeSpectrogram) -> Result<()> {
        if self.config.n_fft != other.config.n_fft {
            return Err(Error::mismatch("n_fft", self.config.n_fft, other.config.n_fft));
        }
        if self.sample_rate != other.sample_rate {
            return Err(Error::mismatch(
                "sample_rate",
                self.sample_rate,
                other.sample_rate,
            ));
        }
        Ok(())
    }

    /// Per-bin natural log with amplitudes floored at [`DEFAULT_FLOOR`].
    pub fn log_mags(&self) -> Array2<f64> {
        self.mags.mapv(|m| m.max(DEFAULT_FLOOR).ln())
    }
}

/// Short-time Fourier transform without centre padding.
pub fn stft(w: &Waveform, config: &StftConfig) -> Result<ComplexSpectrogram> {
    let n_fft = config.n_fft;
    if w.len() < n_fft {
        return Err(Error::InputTooShort { len: w.len(), n_fft });
    }
    let num_frames = config.num_frames(w.len());
    let num_bins = config.num_bins();
    let window = config.window.coefficients(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let mut buffer = vec![Complex64::default(); n_fft];
    let mut bins = Array2::zeros((num_frames, num_bins));

    for (t, mut row) in bins.axis_iter_mut(Axis(0)).enumerate() {
        let start = t * config.hop;
        for ((b, &s), &win) in buffer
            .iter_mut()
            .zip(&w.samples[start..start + n_fft])
            .zip(&window)
        {
            *b = Complex64::new(s * win, 0.0);
        }
        fft.process_with_scratch(&mut buffer, &mut scratch);
        for (dst, src) in row.iter_mut().zip(&buffer[..num_bins]) {
            *dst = *src;
        }
    }
    ComplexSpectrogram::new(bins, *config, w.sample_rate)
}

/// Weighted overlap-add inverse of [`stft`], using the analysis window as
/// synthesis window.
///
/// Output length is `(T - 1) * hop + n_fft`. Samples covered by every
/// overlapping frame position (all but the first and last `n_fft - hop`)
/// reconstruct the analysed signal; the ends are tapered by the partial
/// window sum.
pub fn istft(c: &ComplexSpectrogram) -> Result<Waveform> {
    let config = c.config;
    let gain = config
        .overlap_add_gain()
        .ok_or_else(|| Error::ReconstructionCondition {
            window: config.window.name().to_string(),
            n_fft: config.n_fft,
            hop: config.hop,
        })?;
    let n_fft = config.n_fft;
    let num_frames = c.num_frames();
    let len = if num_frames == 0 {
        0
    } else {
        (num_frames - 1) * config.hop + n_fft
    };
    let window = config.window.coefficients(n_fft);
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);
    let mut scratch = vec![Complex64::default(); ifft.get_inplace_scratch_len()];
    let mut buffer = vec![Complex64::default(); n_fft];
    let mut out = vec![0.0; len];
    let scale = 1.0 / (n_fft as f64 * gain);

    for (t, row) in c.bins.axis_iter(Axis(0)).enumerate() {
        fill_hermitian(&mut buffer, row.as_slice().expect("row-major spectrogram"));
        ifft.process_with_scratch(&mut buffer, &mut scratch);
        let start = t * config.hop;
        for ((o, b), &win) in out[start..start + n_fft].iter_mut().zip(&buffer).zip(&window) {
            *o += b.re * win * scale;
        }
    }
    Waveform::new(out, c.sample_rate)
}

fn fill_hermitian(buffer: &mut [Complex64], one_sided: &[Complex64]) {
    let n = buffer.len();
    buffer[..one_sided.len()].copy_from_slice(one_sided);
    for k in one_sided.len()..n {
        buffer[k] = one_sided[n - k].conj();
    }
}

/// Entry-wise modulus.
pub fn amplitude(c: &ComplexSpectrogram) -> AmplitudeSpectrogram {
    AmplitudeSpectrogram {
        mags: c.bins.mapv(|z| z.norm_sqr().sqrt()),
        config: c.config,
        sample_rate: c.sample_rate,
    }
}

/// Runs `w` through STFT, `modify`, and the inverse STFT, returning a
/// waveform of the same length as `w`.
///
/// The signal is zero-padded on both sides so every original sample is
/// covered by a full set of frames; the left pad is a whole number of hops,
/// so the frame grid coincides with that of an unpadded [`stft`] of `w`.
pub fn resynthesize<F>(w: &Waveform, config: &StftConfig, modify: F) -> Result<Waveform>
where
    F: FnOnce(ComplexSpectrogram) -> Result<ComplexSpectrogram>,
{
    let hop = config.hop;
    let left = config.n_fft.div_ceil(hop) * hop;
    let right = config.n_fft + hop;
    let mut padded = vec![0.0; left + w.len() + right];
    padded[left..left + w.len()].copy_from_slice(&w.samples);
    let padded = Waveform {
        samples: padded,
        sample_rate: w.sample_rate,
    };
    let spec = modify(stft(&padded, config)?)?;
    let mut out = istft(&spec)?.into_samples();
    out.truncate(left + w.len());
    out.drain(..left);
    Waveform::new(out, w.sample_rate)
}

/// Sum with pairwise (cascade) reduction: error grows with `log n`
/// rather than `n`, and the result depends only on the input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Mean of `ln(max(v, floor))`.
pub fn log_mean(values: &[f64], floor: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("geometric mean of no values"));
    }
    if !(floor > 0.0) {
        return Err(Error::invalid("floor", "must be positive"));
    }
    let logs: Vec<f64> = values.iter().map(|v| v.max(floor).ln()).collect();
    Ok(pairwise_sum(&logs) / logs.len() as f64)
}

/// `exp(mean(ln(max(v, floor))))`.
pub fn geometric_mean(values: &[f64], floor: f64) -> Result<f64> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(
            "values",
            "geometric mean needs finite non-negative inputs",
        ));
    }
    log_mean(values, floor).map(f64::exp)
}

const DIRECT_CONVOLUTION_LIMIT: usize = 64;

/// Full linear convolution; output length `len(w) + len(taps) - 1`.
pub fn convolve(w: &Waveform, taps: &[f64]) -> Result<Waveform> {
    if taps.is_empty() {
        return Err(Error::Empty("convolution taps"));
    }
    if taps.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("convolution taps"));
    }
    if w.is_empty() {
        return Err(Error::Empty("waveform"));
    }
    let out = if w.len().min(taps.len()) <= DIRECT_CONVOLUTION_LIMIT {
        convolve_direct(&w.samples, taps)
    } else {
        convolve_fft(&w.samples, taps)
    };
    Waveform::new(out, w.sample_rate)
}

/// O(n·m) convolution.
pub fn convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (o, &y) in out[i..].iter_mut().zip(b) {
            *o += x * y;
        }
    }
    out
}

/// Overlap-add FFT convolution. The shorter sequence is the kernel.
pub fn convolve_fft(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let (signal, kernel) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let out_len = signal.len() + kernel.len() - 1;
    let fft_len = (2 * kernel.len()).next_power_of_two().max(64);
    let block = fft_len - kernel.len() + 1;

    let mut planner = FftPlanner::new();
    let forward: Arc<dyn Fft<f64>> = planner.plan_fft_forward(fft_len);
    let inverse: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(fft_len);
    let mut scratch =
        vec![Complex64::default(); forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len())];

    let mut kernel_spec = vec![Complex64::default(); fft_len];
    for (k, &v) in kernel_spec.iter_mut().zip(kernel) {
        *k = Complex64::new(v, 0.0);
    }
    forward.process_with_scratch(&mut kernel_spec, &mut scratch);

    let scale = 1.0 / fft_len as f64;
    let mut out = vec![0.0; out_len];
    let mut buffer = vec![Complex64::default(); fft_len];
    for start in (0..signal.len()).step_by(block) {
        let chunk = &signal[start..(start + block).min(signal.len())];
        buffer.fill(Complex64::default());
        for (b, &v) in buffer.iter_mut().zip(chunk) {
            *b = Complex64::new(v, 0.0);
        }
        forward.process_with_scratch(&mut buffer, &mut scratch);
        for (b, k) in buffer.iter_mut().zip(&kernel_spec) {
            *b *= k;
        }
        inverse.process_with_scratch(&mut buffer, &mut scratch);
        let valid = (chunk.len() + kernel.len() - 1).min(out_len - start);
        for (o, b) in out[start..start + valid].iter_mut().zip(&buffer) {
            *o += b.re * scale;
        }
    }
    out
}
