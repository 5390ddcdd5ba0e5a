//! Device spectrum correction.
//!
//! Estimates per-frequency gains that make recordings from one device look
//! as if they came from another, and applies them to STFT magnitudes,
//! resynthesised audio, or through a linear-phase FIR filter. A synthetic
//! device simulator with known responses backs the tests.

pub mod correction;
pub mod dsp;
pub mod error;
pub mod features;
pub mod fir;
pub mod io;
pub mod sim;

pub use correction::{
    accumulate_stats, apply_to_amplitudes, apply_to_complex, estimate_aligned, estimate_unaligned,
    simplified_coefficients, CorrectionCoefficients, DeviceSpectrumStats, Estimator, Recording,
    RecordingSet,
};
pub use dsp::{
    amplitude, istft, stft, AmplitudeSpectrogram, ComplexSpectrogram, StftConfig, Waveform, Window,
};
pub use error::{Error, Result};
pub use features::{
    extract, extract_post_mel, mel_filterbank, standardize, CorrectionStage, FeatureTensor,
    Grouping, MelFilterbank, Normalization, StandardizationStats,
};
pub use fir::{apply_filter, design_ls, design_ls_targets, frequency_response, FirFilter};
pub use io::{Manifest, ManifestRow, SimConfigFile, WavEncoding};
pub use sim::{
    generate_dataset, record, smooth_curve, DeviceResponse, EnvironmentResponse, ResponseCurve,
    SimConfig, SimDataset, SourceKind,
};
