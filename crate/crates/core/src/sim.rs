//! Synthetic recording devices with known frequency responses.
//!
//! A recording of clean source `M` in environment `s` by device `d` has
//! amplitude spectrum `R(d) · R(s) · M`. Both responses are applied as
//! zero-phase gains on the STFT of the source, so the true gains are known
//! exactly at every bin centre and estimators can be scored against them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::correction::{to_db, Recording, RecordingSet};
use crate::dsp::{amplitude, resynthesize, stft, StftConfig, Waveform, Window};
use crate::error::{Error, Result};

/// Largest response magnitude, in dB, a simulated device may have.
pub const RESPONSE_LIMIT_DB: f64 = 40.0;
/// Peak magnitude of generated responses unless configured otherwise.
pub const DEFAULT_MAX_DB: f64 = 20.0;
/// Largest natural-log gain step allowed between adjacent bins.
pub const SMOOTHNESS_LIMIT: f64 = 0.1;
const MAX_COSINE_TERMS: usize = 8;
const SOURCE_RMS: f64 = 0.01;

/// Per-bin linear gains on an STFT grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseCurve {
    gains: Vec<f64>,
    n_fft: usize,
    sample_rate: u32,
}

impl ResponseCurve {
    pub fn new(gains: Vec<f64>, n_fft: usize, sample_rate: u32) -> Result<Self> {
        if gains.len() != n_fft / 2 + 1 {
            return Err(Error::BinMismatch {
                expected: n_fft / 2 + 1,
                actual: gains.len(),
            });
        }
        let limit = 10f64.powf(RESPONSE_LIMIT_DB / 20.0) * (1.0 + 1e-12);
        if gains.iter().any(|g| !g.is_finite() || *g < 1.0 / limit || *g > limit) {
            return Err(Error::invalid(
                "response gains",
                format!("must lie within ±{RESPONSE_LIMIT_DB} dB"),
            ));
        }
        Ok(Self {
            gains,
            n_fft,
            sample_rate,
        })
    }

    pub fn flat(n_fft: usize, sample_rate: u32) -> Self {
        Self {
            gains: vec![1.0; n_fft / 2 + 1],
            n_fft,
            sample_rate,
        }
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

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Largest `|ln g[k+1] - ln g[k]|`.
    pub fn max_log_step(&self) -> f64 {
        self.gains
            .windows(2)
            .map(|w| (w[1].ln() - w[0].ln()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_smooth(&self) -> bool {
        self.max_log_step() < SMOOTHNESS_LIMIT
    }

    /// Element-wise product of two responses on the same grid.
    pub fn cascade(&self, other: &ResponseCurve) -> Result<ResponseCurve> {
        self.check_grid(other.n_fft, other.sample_rate)?;
        ResponseCurve::new(
            self.gains.iter().zip(&other.gains).map(|(a, b)| a * b).collect(),
            self.n_fft,
            self.sample_rate,
        )
    }

    fn check_grid(&self, n_fft: usize, sample_rate: u32) -> Result<()> {
        if self.n_fft != n_fft {
            return Err(Error::mismatch("n_fft", self.n_fft, n_fft));
        }
        if self.sample_rate != sample_rate {
            return Err(Error::mismatch("sample_rate", self.sample_rate, sample_rate));
        }
        Ok(())
    }
}

/// Frequency response of a recording device.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceResponse {
    pub device_id: String,
    pub curve: ResponseCurve,
}

impl DeviceResponse {
    pub fn new(device_id: impl Into<String>, curve: ResponseCurve) -> Self {
        Self {
            device_id: device_id.into(),
            curve,
        }
    }

    pub fn identity(device_id: impl Into<String>, n_fft: usize, sample_rate: u32) -> Self {
        Self::new(device_id, ResponseCurve::flat(n_fft, sample_rate))
    }

    pub fn gains(&self) -> &[f64] {
        self.curve.gains()
    }
}

/// Frequency response of a recording environment (room, scene).
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentResponse {
    pub scene_id: String,
    pub curve: ResponseCurve,
}

impl EnvironmentResponse {
    pub fn new(scene_id: impl Into<String>, curve: ResponseCurve) -> Self {
        Self {
            scene_id: scene_id.into(),
            curve,
        }
    }

    pub fn identity(scene_id: impl Into<String>, n_fft: usize, sample_rate: u32) -> Self {
        Self::new(scene_id, ResponseCurve::flat(n_fft, sample_rate))
    }

    pub fn gains(&self) -> &[f64] {
        self.curve.gains()
    }
}

/// Random smooth log-gain curve peaking at exactly `max_db`.
///
/// The curve is a sum of up to eight even cosines `a_k cos(kθ)` over
/// `θ ∈ [0, π]` (DC to Nyquist). Even cosines keep the maximum over the
/// half period equal to the maximum over the full period, so Bernstein's
/// inequality bounds the per-bin step by `k_max · max_ln · π / (F - 1)`;
/// `k_max` is picked to keep that under [`SMOOTHNESS_LIMIT`] whenever the
/// grid is fine enough.
pub fn smooth_curve(seed: u64, max_db: f64, n_fft: usize, sample_rate: u32) -> Result<ResponseCurve> {
    if !(max_db > 0.0 && max_db <= RESPONSE_LIMIT_DB) {
        return Err(Error::invalid(
            "max_db",
            format!("must be in (0, {RESPONSE_LIMIT_DB}], got {max_db}"),
        ));
    }
    if n_fft < 4 {
        return Err(Error::invalid("n_fft", "too small for a response curve"));
    }
    let num_bins = n_fft / 2 + 1;
    let intervals = (num_bins - 1) as f64;
    let max_ln = max_db * std::f64::consts::LN_10 / 20.0;
    let k_max = ((0.99 * SMOOTHNESS_LIMIT * intervals / (std::f64::consts::PI * max_ln)).floor()
        as usize)
        .clamp(1, MAX_COSINE_TERMS);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let num_terms = rng.random_range(1..=MAX_COSINE_TERMS);
    let mut terms: Vec<(usize, f64)> = (0..num_terms)
        .map(|_| (rng.random_range(0..=k_max), normal.sample(&mut rng)))
        .collect();
    // At least one non-constant term, so the curve has a shape.
    if terms.iter().all(|&(k, _)| k == 0) {
        terms.push((1, normal.sample(&mut rng).abs() + 0.5));
    }

    let raw: Vec<f64> = (0..num_bins)
        .map(|j| {
            let theta = std::f64::consts::PI * j as f64 / intervals;
            terms.iter().map(|&(k, a)| a * (k as f64 * theta).cos()).sum()
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { max_ln / peak } else { 0.0 };
    let gains = raw.iter().map(|v| (v * scale).exp()).collect();
    ResponseCurve::new(gains, n_fft, sample_rate)
}

/// A device with a random smooth response (see [`smooth_curve`]).
pub fn make_smooth_response(
    seed: u64,
    max_db: f64,
    n_fft: usize,
    sample_rate: u32,
) -> Result<DeviceResponse> {
    Ok(DeviceResponse::new(
        format!("sim-{seed}"),
        smooth_curve(seed, max_db, n_fft, sample_rate)?,
    ))
}

/// Records `clean` in environment `env` with device `dev`: both responses
/// multiply the STFT magnitudes, phases are kept, and the result is
/// resynthesised to the input length.
pub fn record(clean: &Waveform, env: &EnvironmentResponse, dev: &DeviceResponse) -> Result<Waveform> {
    dev.curve.check_grid(env.curve.n_fft, env.curve.sample_rate)?;
    if clean.sample_rate() != dev.curve.sample_rate {
        return Err(Error::mismatch(
            "sample_rate",
            dev.curve.sample_rate,
            clean.sample_rate(),
        ));
    }
    let total = env.curve.cascade(&dev.curve)?;
    let n_fft = total.n_fft;
    let config = StftConfig::new(n_fft, n_fft / 4, Window::Hann)?;
    resynthesize(clean, &config, |mut spec| {
        for mut row in spec.bins_mut().rows_mut() {
            for (z, &g) in row.iter_mut().zip(&total.gains) {
                *z *= g;
            }
        }
        Ok(spec)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SourceKind {
    #[default]
    White,
    Pink,
    /// White noise under a slow random amplitude envelope.
    Speechlike,
}

impl SourceKind {
    pub fn name(self) -> &'static str {
        match self {
            SourceKind::White => "white",
            SourceKind::Pink => "pink",
            SourceKind::Speechlike => "speechlike",
        }
    }

    /// Deterministic source signal of `len` samples.
    pub fn generate(self, len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let white: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
        let shaped = match self {
            SourceKind::White => white,
            SourceKind::Pink => pink_filter(&white),
            SourceKind::Speechlike => {
                let rates: Vec<(f64, f64)> = (0..3)
                    .map(|_| {
                        (
                            rng.random_range(2.0..6.0),
                            rng.random_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect();
                white
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let t = i as f64 / sample_rate as f64;
                        let env: f64 = rates
                            .iter()
                            .map(|(hz, phase)| (std::f64::consts::TAU * hz * t + phase).sin())
                            .sum::<f64>()
                            / 3.0;
                        let env = 0.55 + 0.45 * env;
                        v * env * env
                    })
                    .collect()
            }
        };
        let rms = (shaped.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
        let scale = if rms > 0.0 { SOURCE_RMS / rms } else { 0.0 };
        shaped.into_iter().map(|v| v * scale).collect()
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(SourceKind::White),
            "pink" => Ok(SourceKind::Pink),
            "speechlike" | "speechlike-modulated" => Ok(SourceKind::Speechlike),
            other => Err(Error::invalid("source", format!("unknown source kind '{other}'"))),
        }
    }
}

/// Kellet's refined pink-noise filter (−3 dB/octave to within 0.05 dB
/// above 9 Hz at 44.1 kHz).
fn pink_filter(white: &[f64]) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    white
        .iter()
        .map(|&x| {
            b[0] = 0.99886 * b[0] + x * 0.0555179;
            b[1] = 0.99332 * b[1] + x * 0.0750759;
            b[2] = 0.96900 * b[2] + x * 0.1538520;
            b[3] = 0.86650 * b[3] + x * 0.3104856;
            b[4] = 0.55000 * b[4] + x * 0.5329522;
            b[5] = -0.7616 * b[5] - x * 0.0168980;
            let out = b[..6].iter().sum::<f64>() + b[6] + x * 0.5362;
            b[6] = x * 0.115926;
            out
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    /// Recordings per device.
    pub num_recordings: usize,
    pub duration_secs: f64,
    pub source: SourceKind,
    pub aligned: bool,
    pub devices: Vec<DeviceResponse>,
    /// Recordings cycle through these; empty means a flat environment.
    pub environments: Vec<EnvironmentResponse>,
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
}

impl SimConfig {
    pub fn num_samples(&self) -> usize {
        (self.duration_secs * self.sample_rate as f64).round() as usize
    }

    pub fn stft_config(&self) -> Result<StftConfig> {
        StftConfig::new(self.n_fft, self.hop, Window::Hann)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft_config()?;
        if self.num_recordings == 0 {
            return Err(Error::invalid("num_recordings", "must be at least 1"));
        }
        if self.devices.is_empty() {
            return Err(Error::invalid("devices", "need at least one device"));
        }
        if !(self.duration_secs > 0.0) || self.num_samples() < self.n_fft {
            return Err(Error::invalid(
                "duration",
                format!("{} s is shorter than one frame", self.duration_secs),
            ));
        }
        for d in &self.devices {
            d.curve.check_grid(self.n_fft, self.sample_rate)?;
        }
        for e in &self.environments {
            e.curve.check_grid(self.n_fft, self.sample_rate)?;
        }
        let mut ids: Vec<&str> = self.devices.iter().map(|d| d.device_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("devices", "device ids must be unique"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SimRecording {
    pub id: String,
    pub device: String,
    pub scene: String,
    /// Alignment group; recordings sharing it captured the same source.
    pub group: Option<String>,
    pub waveform: Waveform,
}

/// Simulated recordings plus the ground-truth responses behind them.
#[derive(Clone, Debug)]
pub struct SimDataset {
    pub recordings: Vec<SimRecording>,
    pub devices: Vec<DeviceResponse>,
    pub environments: Vec<EnvironmentResponse>,
    pub config: SimConfig,
}

impl SimDataset {
    pub fn device(&self, id: &str) -> Option<&DeviceResponse> {
        self.devices.iter().find(|d| d.device_id == id)
    }

    /// True gains `R(reference) / R(source)`.
    pub fn true_correction(&self, source: &str, reference: &str) -> Result<Vec<f64>> {
        let missing = |id: &str| Error::invalid("device", format!("unknown device '{id}'"));
        let s = self.device(source).ok_or_else(|| missing(source))?;
        let r = self.device(reference).ok_or_else(|| missing(reference))?;
        Ok(r.gains().iter().zip(s.gains()).map(|(a, b)| a / b).collect())
    }

    /// Amplitude spectrograms of every recording, with alignment groups.
    pub fn recording_set(&self) -> Result<RecordingSet> {
        let config = self.config.stft_config()?;
        let items = self
            .recordings
            .iter()
            .map(|r| {
                Ok(Recording {
                    id: r.id.clone(),
                    device: r.device.clone(),
                    spec: amplitude(&stft(&r.waveform, &config)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let groups = self.config.aligned.then(|| {
            self.recordings
                .iter()
                .filter_map(|r| Some((r.id.clone(), r.group.clone()?)))
                .collect()
        });
        RecordingSet::new(items, groups)
    }
}

/// Sub-seed for one source signal (SplitMix64 finaliser over the inputs).
pub fn source_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds a dataset. In aligned mode every source is recorded by every
/// device in the same environment and the recordings share a group. In
/// unaligned mode each device records its own fresh sources drawn from the
/// same generator.
pub fn generate_dataset(cfg: &SimConfig) -> Result<SimDataset> {
    cfg.validate()?;
    let len = cfg.num_samples();
    let flat_env = [EnvironmentResponse::identity("flat", cfg.n_fft, cfg.sample_rate)];
    let envs: &[EnvironmentResponse] = if cfg.environments.is_empty() {
        &flat_env
    } else {
        &cfg.environments
    };
    let make_source = |stream: u64, index: usize| {
        let samples = cfg
            .source
            .generate(len, cfg.sample_rate, source_seed(cfg.seed, stream, index as u64));
        Waveform::new(samples, cfg.sample_rate)
    };

    let mut recordings = Vec::with_capacity(cfg.num_recordings * cfg.devices.len());
    for i in 0..cfg.num_recordings {
        let env = &envs[i % envs.len()];
        let shared = if cfg.aligned { Some(make_source(0, i)?) } else { None };
        for (j, dev) in cfg.devices.iter().enumerate() {
            let clean = match &shared {
                Some(w) => w.clone(),
                None => make_source(j as u64 + 1, i)?,
            };
            recordings.push(SimRecording {
                id: format!("{}_{i:04}", dev.device_id),
                device: dev.device_id.clone(),
                scene: env.scene_id.clone(),
                group: cfg.aligned.then(|| format!("g{i:04}")),
                waveform: record(&clean, env, dev)?,
            });
        }
    }
    Ok(SimDataset {
        recordings,
        devices: cfg.devices.clone(),
        environments: envs.to_vec(),
        config: cfg.clone(),
    })
}
