use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use speccor_core::correction::{mid_band_bins, to_db, NO_REFERENCE};
use speccor_core::dsp::resynthesize;
use speccor_core::features::{mel_filterbank, Grouping};
use speccor_core::fir::design_ls_clamped;
use speccor_core::io::{
    self, coefficients_file_name, read_coefficients, read_filter, read_response, read_wav,
    write_coefficients, write_feature, write_filter, write_response, write_wav, ResponseKind,
    ResponseRecord,
};
use speccor_core::{
    amplitude, apply_filter, apply_to_complex, estimate_aligned, estimate_unaligned, extract,
    generate_dataset, simplified_coefficients, standardize, stft, CorrectionCoefficients,
    Error, FeatureTensor, Manifest, ManifestRow, Recording, RecordingSet, SimConfigFile,
    StftConfig, Window,
};

use crate::{
    ApplyArgs, DesignFirArgs, EstimateArgs, FeaturesArgs, FilterArgs, SimulateArgs, Standardize,
    StftArgs, VerifyArgs,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or inputs that fail validation.
    Usage(String),
    Core(Error),
    Io { path: PathBuf, source: std::io::Error },
    /// `verify` ran but some coefficients were out of tolerance.
    Tolerance(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_io() => 2,
            CliError::Io { .. } => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Tolerance(msg) => f.write_str(msg),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Files in `dir` with the given extension, sorted by name.
fn list_files(dir: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == extension) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stft_config(a: &StftArgs) -> Result<StftConfig> {
    Ok(StftConfig::with_window_name(a.n_fft, a.hop, &a.window)?)
}

/// Amplitude spectrograms of every manifest row, computed in parallel and
/// returned in manifest order.
fn analyse(manifest: &Manifest, config: &StftConfig) -> Result<Vec<Recording>> {
    manifest
        .rows
        .par_iter()
        .map(|row| {
            let w = read_wav(&manifest.resolve(row))?;
            Ok(Recording {
                id: row_key(row),
                device: row.device.clone(),
                spec: amplitude(&stft(&w, config)?),
            })
        })
        .collect()
}

fn row_key(row: &ManifestRow) -> String {
    row.path.to_string_lossy().into_owned()
}

pub fn estimate(a: &EstimateArgs) -> Result<()> {
    let config = stft_config(&a.stft)?;
    let manifest = Manifest::read(&a.manifest)?;
    let devices: Vec<String> = manifest.devices().into_iter().map(String::from).collect();
    if devices.is_empty() {
        return Err(CliError::Usage("manifest: no recordings".into()));
    }
    let reference = a.reference_device.as_str();
    let simplified = reference == NO_REFERENCE;
    if simplified && a.aligned {
        return Err(CliError::Usage(format!(
            "conflicting flags: --aligned needs a reference device, got --reference-device {NO_REFERENCE}"
        )));
    }
    if !simplified && !devices.iter().any(|d| d == reference) {
        return Err(CliError::Usage(format!(
            "reference-device: '{reference}' does not appear in the manifest device column"
        )));
    }
    let groups = if a.aligned {
        let groups: BTreeMap<String, String> = manifest
            .rows
            .iter()
            .filter_map(|r| Some((row_key(r), r.group.clone()?)))
            .collect();
        if groups.is_empty() {
            return Err(CliError::Usage(
                "aligned: --aligned needs group ids in the manifest group column".into(),
            ));
        }
        Some(groups)
    } else {
        None
    };
    let set = RecordingSet::new(analyse(&manifest, &config)?, groups)?;

    let coefficients: Vec<CorrectionCoefficients> = if simplified {
        devices
            .iter()
            .map(|d| Ok(simplified_coefficients(&set.device_stats(d)?)))
            .collect::<Result<_>>()?
    } else if a.aligned {
        devices
            .iter()
            .filter(|d| *d != reference)
            .map(|d| Ok(estimate_aligned(&set.aligned_pairs(d, reference)?, d, reference)?))
            .collect::<Result<_>>()?
    } else {
        let reference_stats = set.device_stats(reference)?;
        devices
            .iter()
            .filter(|d| *d != reference)
            .map(|d| Ok(estimate_unaligned(&reference_stats, &set.device_stats(d)?)?))
            .collect::<Result<_>>()?
    };

    create_dir(&a.out)?;
    for c in &coefficients {
        let path = a.out.join(coefficients_file_name(c));
        write_coefficients(&path, c)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn apply(a: &ApplyArgs) -> Result<()> {
    let c = read_coefficients(&a.coeffs)?;
    let w = read_wav(&a.input)?;
    if w.sample_rate() != c.sample_rate() {
        return Err(CliError::Usage(format!(
            "sample_rate: input is {} Hz but coefficients are for {} Hz",
            w.sample_rate(),
            c.sample_rate()
        )));
    }
    let config = StftConfig::new(c.n_fft(), a.hop.unwrap_or(c.n_fft() / 4), Window::Hann)?;
    let out = resynthesize(&w, &config, |spec| apply_to_complex(&c, &spec))?;
    write_wav(&a.out, &out, a.encoding.into())?;
    Ok(())
}

pub fn design_fir(a: &DesignFirArgs) -> Result<()> {
    if a.taps.is_multiple_of(2) {
        return Err(CliError::Usage(format!("taps must be odd, got {}", a.taps)));
    }
    let c = read_coefficients(&a.coeffs)?;
    if c.reference_device() == NO_REFERENCE {
        eprintln!(
            "speccor: warning: reference-free coefficients carry an arbitrary overall level; \
             the filter may change loudness substantially"
        );
    }
    let fir = design_ls_clamped(&c, a.taps, a.clamp_db)?;
    write_filter(&a.out, &fir)?;
    Ok(())
}

pub fn filter(a: &FilterArgs) -> Result<()> {
    let fir = read_filter(&a.filter)?;
    let w = read_wav(&a.input)?;
    if w.sample_rate() != fir.sample_rate() {
        return Err(CliError::Usage(format!(
            "sample_rate: input is {} Hz but the filter is for {} Hz",
            w.sample_rate(),
            fir.sample_rate()
        )));
    }
    let out = apply_filter(&fir, &w, !a.no_delay_compensation)?;
    write_wav(&a.out, &out, a.encoding.into())?;
    Ok(())
}

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const TRUTH_DIR: &str = "truth";
const AUDIO_DIR: &str = "audio";

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let file = SimConfigFile::read(&a.config)?;
    let cfg = file.to_sim_config()?;
    let dataset = generate_dataset(&cfg)?;

    let audio = a.out.join(AUDIO_DIR);
    let truth = a.out.join(TRUTH_DIR);
    create_dir(&audio)?;
    create_dir(&truth)?;

    dataset
        .recordings
        .par_iter()
        .map(|r| write_wav(&audio.join(format!("{}.wav", r.id)), &r.waveform, io::WavEncoding::Float32))
        .collect::<std::result::Result<Vec<()>, Error>>()?;

    let rows = dataset
        .recordings
        .iter()
        .map(|r| ManifestRow {
            path: Path::new(AUDIO_DIR).join(format!("{}.wav", r.id)),
            device: r.device.clone(),
            group: r.group.clone(),
        })
        .collect();
    Manifest::new(rows, &a.out)?.write(&a.out.join(MANIFEST_NAME))?;

    for d in &dataset.devices {
        let record = ResponseRecord {
            kind: ResponseKind::Device,
            id: d.device_id.clone(),
            curve: d.curve.clone(),
        };
        write_response(&truth.join(format!("device_{}.resp", d.device_id)), &record)?;
    }
    for e in &dataset.environments {
        let record = ResponseRecord {
            kind: ResponseKind::Environment,
            id: e.scene_id.clone(),
            curve: e.curve.clone(),
        };
        write_response(&truth.join(format!("environment_{}.resp", e.scene_id)), &record)?;
    }
    let toml = file.to_toml()?;
    let config_copy = a.out.join("sim.toml");
    fs::write(&config_copy, toml).map_err(io_err(&config_copy))?;
    println!(
        "{} recordings from {} devices in {}",
        dataset.recordings.len(),
        dataset.devices.len(),
        a.out.display()
    );
    Ok(())
}

/// Coefficients per source device from a directory. Devices that only
/// appear as a reference map to themselves and get no correction.
fn coefficients_by_device(dir: &Path) -> Result<BTreeMap<String, CorrectionCoefficients>> {
    let mut out = BTreeMap::new();
    for path in list_files(dir, "coef")? {
        let c = read_coefficients(&path)?;
        if let Some(previous) = out.insert(c.source_device().to_string(), c) {
            return Err(CliError::Usage(format!(
                "coeffs-dir: more than one coefficients file for device '{}'",
                previous.source_device()
            )));
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!(
            "coeffs-dir: no .coef files in {}",
            dir.display()
        )));
    }
    Ok(out)
}

pub fn features(a: &FeaturesArgs) -> Result<()> {
    let config = stft_config(&a.stft)?;
    let manifest = Manifest::read(&a.manifest)?;
    if manifest.rows.is_empty() {
        return Err(CliError::Usage("manifest: no recordings".into()));
    }
    let coefficients = a.coeffs_dir.as_deref().map(coefficients_by_device).transpose()?;
    let references: Vec<String> = coefficients
        .iter()
        .flat_map(|m| m.values().map(|c| c.reference_device().to_string()))
        .collect();
    if let Some(map) = &coefficients {
        for device in manifest.devices() {
            if !map.contains_key(device) && !references.iter().any(|r| r == device) {
                return Err(CliError::Usage(format!(
                    "device: no coefficients for '{device}' in the coeffs-dir"
                )));
            }
        }
    }

    let recordings = analyse(&manifest, &config)?;
    let sample_rate = recordings[0].spec.sample_rate();
    let f_max = a.f_max.unwrap_or(sample_rate as f64 / 2.0);
    let fb = mel_filterbank(sample_rate, config.n_fft(), a.n_mels, a.f_min, f_max)?;
    let raw: Vec<FeatureTensor> = recordings
        .par_iter()
        .map(|r| {
            let c = coefficients.as_ref().and_then(|m| m.get(&r.device));
            extract(&r.spec, &fb, c)
        })
        .collect::<std::result::Result<_, Error>>()?;

    let labels: Vec<String> = recordings.iter().map(|r| r.device.clone()).collect();
    let feats = match a.standardize {
        None => raw,
        Some(Standardize::Global) => standardize(&raw, Grouping::Global, None)?.0,
        Some(Standardize::PerDevice) => standardize(&raw, Grouping::PerDevice, Some(&labels))?.0,
    };

    create_dir(&a.out)?;
    let mut names = std::collections::HashSet::new();
    for (row, f) in manifest.rows.iter().zip(&feats) {
        let name = format!("{}.feat", manifest.row_id(row));
        if !names.insert(name.clone()) {
            return Err(CliError::Usage(format!(
                "path: two manifest rows share the file name stem of {}",
                row.path.display()
            )));
        }
        write_feature(&a.out.join(name), f)?;
    }
    Ok(())
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let mut truth = BTreeMap::new();
    for path in list_files(&a.sim_dir.join(TRUTH_DIR), "resp")? {
        let r = read_response(&path)?;
        if r.kind == ResponseKind::Device {
            truth.insert(r.id.clone(), r.curve);
        }
    }
    let files = list_files(&a.coeffs_dir, "coef")?;
    if files.is_empty() {
        return Err(CliError::Usage(format!(
            "coeffs-dir: no .coef files in {}",
            a.coeffs_dir.display()
        )));
    }
    let coefficients = files
        .iter()
        .map(|p| Ok((p.clone(), read_coefficients(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let gains_of = |device: &str| {
        truth.get(device).map(|c| c.gains()).ok_or_else(|| {
            CliError::Usage(format!("device: '{device}' has no ground-truth response"))
        })
    };
    // Reference-free gains are only defined up to a shared level, so they
    // are scored relative to the first simplified file.
    let pivot = coefficients
        .iter()
        .find(|(_, c)| c.reference_device() == NO_REFERENCE)
        .map(|(_, c)| c.clone());

    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for (path, c) in &coefficients {
        let bins = mid_band_bins(c.n_fft(), c.sample_rate());
        let (estimated, expected): (Vec<f64>, Vec<f64>) = if c.reference_device() == NO_REFERENCE {
            let pivot = pivot.as_ref().expect("pivot exists when a simplified file exists");
            let (rp, rd) = (gains_of(pivot.source_device())?, gains_of(c.source_device())?);
            (
                c.gains().iter().zip(pivot.gains()).map(|(g, p)| g / p).collect(),
                rp.iter().zip(rd).map(|(p, d)| p / d).collect(),
            )
        } else {
            let (rr, rs) = (gains_of(c.reference_device())?, gains_of(c.source_device())?);
            (c.gains().to_vec(), rr.iter().zip(rs).map(|(r, s)| r / s).collect())
        };
        if expected.len() != estimated.len() {
            return Err(CliError::Usage(format!(
                "n_fft: {} has {} bins but the ground truth has {}",
                path.display(),
                estimated.len(),
                expected.len()
            )));
        }
        let error = bins
            .iter()
            .map(|&k| (to_db(estimated[k]) - to_db(expected[k])).abs())
            .fold(0.0, f64::max);
        worst = worst.max(error);
        let ok = error <= a.tolerance_db;
        println!(
            "{}: max mid-band error {:.3} dB ({})",
            path.file_name().unwrap_or_default().to_string_lossy(),
            error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(path.display().to_string());
        }
    }
    if failures.is_empty() {
        println!("all {} within {} dB (worst {:.3} dB)", coefficients.len(), a.tolerance_db, worst);
        Ok(())
    } else {
        Err(CliError::Tolerance(format!(
            "{} of {} coefficient files exceed {} dB: {}",
            failures.len(),
            coefficients.len(),
            a.tolerance_db,
            failures.join(", ")
        )))
    }
}
