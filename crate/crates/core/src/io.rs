//! On-disk formats: WAV audio, recording manifests, coefficient, filter,
//! response and feature files, and simulator configs.
//!
//! Coefficient, filter and response files are line-based text: a comment
//! line, `key = value` header lines, then `<array> = N` followed by `N`
//! numbers one per line, written with 17 significant digits so every `f64`
//! survives a round trip exactly.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::correction::{CorrectionCoefficients, Estimator};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::features::{CorrectionStage, FeatureTensor, Normalization};
use crate::fir::FirFilter;
use crate::sim::{
    smooth_curve, source_seed, DeviceResponse, EnvironmentResponse, ResponseCurve, SimConfig,
    SourceKind, DEFAULT_MAX_DB,
};

pub const FORMAT_VERSION: u32 = 1;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// WAV

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

fn map_hound(e: hound::Error, path: &Path) -> Error {
    match e {
        // hound reports short reads as `Other` with this message.
        hound::Error::IoError(io)
            if io.kind() == std::io::ErrorKind::UnexpectedEof
                || io.to_string().contains("Failed to read enough bytes") =>
        {
            Error::MalformedWav(format!("{}: truncated file", path.display()))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => {
            Error::MalformedWav(format!("{}: {msg}", path.display()))
        }
        hound::Error::TooWide => Error::UnsupportedWav {
            chunk: "fmt ",
            detail: "sample width too large".into(),
        },
        hound::Error::Unsupported => Error::UnsupportedWav {
            chunk: "fmt ",
            detail: "unsupported format tag or layout".into(),
        },
        other => Error::MalformedWav(format!("{}: {other}", path.display())),
    }
}

/// Reads PCM16 or float32 audio, mono or stereo; stereo is averaged to
/// mono. PCM16 values are divided by 32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(e, path))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedWav {
            chunk: "fmt ",
            detail: format!("{} channels (only mono and stereo)", spec.channels),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(e, path))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(e, path))?,
        (format, bits) => {
            return Err(Error::UnsupportedWav {
                chunk: "fmt ",
                detail: format!("{bits}-bit {format:?} samples (only 16-bit PCM and 32-bit float)"),
            })
        }
    };
    let channels = spec.channels as usize;
    if !interleaved.len().is_multiple_of(channels) {
        return Err(Error::MalformedWav(format!(
            "{}: truncated file (partial frame)",
            path.display()
        )));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect()
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(e, path))?;
    for &s in w.samples() {
        let result = match encoding {
            WavEncoding::Pcm16 => writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            WavEncoding::Float32 => writer.write_sample(s as f32),
        };
        result.map_err(|e| map_hound(e, path))?;
    }
    writer.finalize().map_err(|e| map_hound(e, path))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub device: String,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub group: Option<String>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.trim().is_empty()))
}

/// Recording list with device labels and optional alignment groups.
/// Relative paths are resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            rows,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let rows = reader
            .deserialize()
            .enumerate()
            .map(|(i, row)| {
                row.map_err(|e| Error::Format {
                    path: path.display().to_string(),
                    line: i + 2,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<ManifestRow>>>()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(rows, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["path", "device", "group"])
            .and_then(|_| {
                self.rows.iter().try_for_each(|r| {
                    writer.write_record([
                        r.path.to_string_lossy().as_ref(),
                        r.device.as_str(),
                        r.group.as_deref().unwrap_or(""),
                    ])
                })
            })
            .map_err(|e| Error::invalid("manifest", e.to_string()))?;
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::invalid("manifest", e.to_string()))?;
        write_bytes(path, &bytes)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if row.device.is_empty() {
                return Err(Error::invalid(
                    "device",
                    format!("missing device for {}", row.path.display()),
                ));
            }
            if !seen.insert(&row.path) {
                return Err(Error::invalid(
                    "path",
                    format!("duplicate path {}", row.path.display()),
                ));
            }
        }
        let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for row in &self.rows {
            if let Some(g) = &row.group {
                groups.entry(g).or_default().push(&row.device);
            }
        }
        for (g, devices) in groups {
            let distinct: HashSet<&&str> = devices.iter().collect();
            if devices.len() < 2 || distinct.len() != devices.len() {
                return Err(Error::invalid(
                    "group",
                    format!("group '{g}' must hold at least two rows of different devices"),
                ));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    /// Device labels in order of first appearance.
    pub fn devices(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.device.as_str()) {
                out.push(&r.device);
            }
        }
        out
    }

    /// Identifier used for a row in recording sets and output file names.
    pub fn row_id(&self, row: &ManifestRow) -> String {
        row.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| row.path.to_string_lossy().into_owned())
    }
}

// ---------------------------------------------------------------------------
// Key/value text documents

struct TextDoc {
    fields: BTreeMap<String, String>,
    array_name: String,
    array: Vec<f64>,
    path: String,
}

fn format_number(v: f64) -> String {
    format!("{v:.16e}")
}

fn render_doc(title: &str, fields: &[(&str, String)], array_name: &str, values: &[f64]) -> String {
    let mut out = format!("# {title}\n");
    for (k, v) in fields {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out.push_str(&format!("{array_name} = {}\n", values.len()));
    for v in values {
        out.push_str(&format_number(*v));
        out.push('\n');
    }
    out
}

impl TextDoc {
    fn parse(text: &str, path: &Path, array_name: &str) -> Result<Self> {
        let display = path.display().to_string();
        let err = |line: usize, message: String| Error::Format {
            path: display.clone(),
            line,
            message,
        };
        let mut fields = BTreeMap::new();
        let mut lines = text.lines().enumerate();
        let mut array = None;
        for (i, line) in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected 'key = value', got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == array_name {
                let n: usize = value
                    .parse()
                    .map_err(|_| err(i + 1, format!("bad {array_name} count '{value}'")))?;
                array = Some(n);
                break;
            }
            fields.insert(key.to_string(), value.to_string());
        }
        let n = array.ok_or_else(|| err(0, format!("missing '{array_name}' section")))?;
        let mut values = Vec::with_capacity(n);
        for (i, line) in lines.by_ref() {
            if values.len() == n {
                if !line.trim().is_empty() {
                    return Err(err(i + 1, "trailing data after array".into()));
                }
                continue;
            }
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|_| err(i + 1, format!("bad number '{}'", line.trim())))?;
            values.push(v);
        }
        if values.len() != n {
            return Err(err(0, format!("expected {n} values, found {}", values.len())));
        }
        Ok(Self {
            fields,
            array_name: array_name.to_string(),
            array: values,
            path: display,
        })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format {
                path: self.path.clone(),
                line: 0,
                message: format!("missing field '{key}'"),
            })
    }

    fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Format {
            path: self.path.clone(),
            line: 0,
            message: format!("bad value '{raw}' for '{key}'"),
        })
    }

    fn check_version(&self) -> Result<()> {
        let v: u32 = self.parse_field("format_version")?;
        if v != FORMAT_VERSION {
            return Err(Error::Format {
                path: self.path.clone(),
                line: 0,
                message: format!("unsupported format_version {v}"),
            });
        }
        Ok(())
    }

    fn check_count(&self, key: &str) -> Result<()> {
        let declared: usize = self.parse_field(key)?;
        if declared != self.array.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                line: 0,
                message: format!("{key} = {declared} but {} has {} values", self.array_name, self.array.len()),
            });
        }
        Ok(())
    }
}

fn check_identifier(name: &'static str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains(['\n', '\r']) || value.trim() != value {
        return Err(Error::invalid(name, format!("'{value}' is not a valid identifier")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Coefficients

pub fn coefficients_to_string(c: &CorrectionCoefficients) -> Result<String> {
    check_identifier("source_device", c.source_device())?;
    check_identifier("reference_device", c.reference_device())?;
    Ok(render_doc(
        "speccor correction coefficients",
        &[
            ("format_version", FORMAT_VERSION.to_string()),
            ("estimator", c.estimator().to_string()),
            ("source_device", c.source_device().to_string()),
            ("reference_device", c.reference_device().to_string()),
            ("sample_rate", c.sample_rate().to_string()),
            ("n_fft", c.n_fft().to_string()),
            ("num_recordings", c.num_recordings().to_string()),
        ],
        "gains",
        c.gains(),
    ))
}

pub fn parse_coefficients(text: &str, path: &Path) -> Result<CorrectionCoefficients> {
    let doc = TextDoc::parse(text, path, "gains")?;
    doc.check_version()?;
    let estimator: Estimator = doc.get("estimator")?.parse()?;
    CorrectionCoefficients::new(
        doc.array.clone(),
        doc.parse_field("n_fft")?,
        doc.parse_field("sample_rate")?,
        doc.get("source_device")?,
        doc.get("reference_device")?,
        doc.parse_field("num_recordings")?,
        estimator,
    )
}

pub fn write_coefficients(path: &Path, c: &CorrectionCoefficients) -> Result<()> {
    write_bytes(path, coefficients_to_string(c)?.as_bytes())
}

pub fn read_coefficients(path: &Path) -> Result<CorrectionCoefficients> {
    parse_coefficients(&read_text(path)?, path)
}

/// File name used for coefficients in an output directory.
pub fn coefficients_file_name(c: &CorrectionCoefficients) -> String {
    format!("{}_to_{}.coef", c.source_device(), c.reference_device())
}

// ---------------------------------------------------------------------------
// Filters

pub fn filter_to_string(f: &FirFilter) -> String {
    render_doc(
        "speccor FIR filter",
        &[
            ("format_version", FORMAT_VERSION.to_string()),
            ("sample_rate", f.sample_rate().to_string()),
            ("num_taps", f.num_taps().to_string()),
            ("group_delay", f.group_delay().to_string()),
            ("target_bins", f.target_bins().to_string()),
        ],
        "taps",
        f.taps(),
    )
}

pub fn parse_filter(text: &str, path: &Path) -> Result<FirFilter> {
    let doc = TextDoc::parse(text, path, "taps")?;
    doc.check_version()?;
    doc.check_count("num_taps")?;
    let filter = FirFilter::new(
        doc.array.clone(),
        doc.parse_field("sample_rate")?,
        doc.parse_field("target_bins")?,
    )?;
    let delay: usize = doc.parse_field("group_delay")?;
    if delay != filter.group_delay() {
        return Err(Error::Format {
            path: doc.path,
            line: 0,
            message: format!("group_delay {delay} does not match {} taps", filter.num_taps()),
        });
    }
    Ok(filter)
}

pub fn write_filter(path: &Path, f: &FirFilter) -> Result<()> {
    write_bytes(path, filter_to_string(f).as_bytes())
}

pub fn read_filter(path: &Path) -> Result<FirFilter> {
    parse_filter(&read_text(path)?, path)
}

// ---------------------------------------------------------------------------
// Ground-truth responses

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResponseKind {
    Device,
    Environment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseRecord {
    pub kind: ResponseKind,
    pub id: String,
    pub curve: ResponseCurve,
}

pub fn response_to_string(r: &ResponseRecord) -> Result<String> {
    check_identifier("id", &r.id)?;
    let kind = match r.kind {
        ResponseKind::Device => "device",
        ResponseKind::Environment => "environment",
    };
    Ok(render_doc(
        "speccor simulated response",
        &[
            ("format_version", FORMAT_VERSION.to_string()),
            ("kind", kind.to_string()),
            ("id", r.id.clone()),
            ("sample_rate", r.curve.sample_rate().to_string()),
            ("n_fft", r.curve.n_fft().to_string()),
        ],
        "gains",
        r.curve.gains(),
    ))
}

pub fn parse_response(text: &str, path: &Path) -> Result<ResponseRecord> {
    let doc = TextDoc::parse(text, path, "gains")?;
    doc.check_version()?;
    let kind = match doc.get("kind")? {
        "device" => ResponseKind::Device,
        "environment" => ResponseKind::Environment,
        other => {
            return Err(Error::Format {
                path: doc.path.clone(),
                line: 0,
                message: format!("unknown response kind '{other}'"),
            })
        }
    };
    Ok(ResponseRecord {
        kind,
        id: doc.get("id")?.to_string(),
        curve: ResponseCurve::new(
            doc.array.clone(),
            doc.parse_field("n_fft")?,
            doc.parse_field("sample_rate")?,
        )?,
    })
}

pub fn write_response(path: &Path, r: &ResponseRecord) -> Result<()> {
    write_bytes(path, response_to_string(r)?.as_bytes())
}

pub fn read_response(path: &Path) -> Result<ResponseRecord> {
    parse_response(&read_text(path)?, path)
}

// ---------------------------------------------------------------------------
// Feature matrices

const FEATURE_MAGIC: &str = "speccor-features 1";

/// Text header (dims, normalization, stats id, correction stage) ended by
/// a line `end`, then `rows × cols` little-endian f64 values, row-major.
pub fn feature_to_bytes(f: &FeatureTensor) -> Result<Vec<u8>> {
    check_identifier("stats_id", &f.stats_id)?;
    let header = format!(
        "{FEATURE_MAGIC}\nrows = {}\ncols = {}\ndtype = f64le\nnormalization = {}\nstats_id = {}\ncorrection = {}\nend\n",
        f.num_frames(),
        f.n_mels(),
        f.normalization.name(),
        f.stats_id,
        f.correction.name(),
    );
    let mut out = header.into_bytes();
    out.reserve(8 * f.values.len());
    for v in f.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn feature_from_bytes(bytes: &[u8], path: &Path) -> Result<FeatureTensor> {
    let display = path.display().to_string();
    let err = |message: String| Error::Format {
        path: display.clone(),
        line: 0,
        message,
    };
    let marker = b"\nend\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| err("missing header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| err("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(FEATURE_MAGIC) {
        return Err(err("not a feature file".into()));
    }
    let fields: BTreeMap<&str, &str> = lines
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim(), v.trim())))
        .collect();
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(format!("missing field '{k}'")));
    let rows: usize = get("rows")?.parse().map_err(|_| err("bad rows".into()))?;
    let cols: usize = get("cols")?.parse().map_err(|_| err("bad cols".into()))?;
    if get("dtype")? != "f64le" {
        return Err(err("unsupported dtype".into()));
    }
    let data = &bytes[end + marker.len()..];
    if data.len() != rows * cols * 8 {
        return Err(err(format!("expected {} data bytes, found {}", rows * cols * 8, data.len())));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    FeatureTensor::new(
        Array2::from_shape_vec((rows, cols), values).map_err(|e| err(e.to_string()))?,
        get("normalization")?.parse::<Normalization>()?,
        get("stats_id")?,
        get("correction")?.parse::<CorrectionStage>()?,
    )
}

pub fn write_feature(path: &Path, f: &FeatureTensor) -> Result<()> {
    let bytes = feature_to_bytes(f)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_feature(path: &Path) -> Result<FeatureTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    feature_from_bytes(&bytes, path)
}

// ---------------------------------------------------------------------------
// Simulator configuration (TOML)

/// One simulated device or environment: a flat response, or a random
/// smooth one from `seed` peaking at `max_db`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseSpec {
    pub id: String,
    #[serde(default)]
    pub flat: bool,
    #[serde(default)]
    pub max_db: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_sample_rate() -> u32 {
    44_100
}
fn default_n_fft() -> usize {
    2048
}
fn default_hop() -> usize {
    512
}
fn default_source() -> String {
    "white".into()
}
fn default_duration() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfigFile {
    pub seed: u64,
    pub num_recordings: usize,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default)]
    pub aligned: bool,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default = "default_n_fft")]
    pub n_fft: usize,
    #[serde(default = "default_hop")]
    pub hop: usize,
    pub devices: Vec<ResponseSpec>,
    #[serde(default)]
    pub environments: Vec<ResponseSpec>,
}

impl SimConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid("sim config", e.to_string()))
    }

    fn curve(&self, spec: &ResponseSpec, stream: u64, index: usize) -> Result<ResponseCurve> {
        if spec.flat {
            return Ok(ResponseCurve::flat(self.n_fft, self.sample_rate));
        }
        let seed = spec
            .seed
            .unwrap_or_else(|| source_seed(self.seed, stream, index as u64));
        smooth_curve(seed, spec.max_db.unwrap_or(DEFAULT_MAX_DB), self.n_fft, self.sample_rate)
    }

    pub fn to_sim_config(&self) -> Result<SimConfig> {
        for spec in self.devices.iter().chain(&self.environments) {
            check_identifier("id", &spec.id)?;
        }
        // Streams 1000+ keep response seeds apart from source seeds.
        let devices = self
            .devices
            .iter()
            .enumerate()
            .map(|(i, s)| Ok(DeviceResponse::new(&s.id, self.curve(s, 1000, i)?)))
            .collect::<Result<Vec<_>>>()?;
        let environments = self
            .environments
            .iter()
            .enumerate()
            .map(|(i, s)| Ok(EnvironmentResponse::new(&s.id, self.curve(s, 2000, i)?)))
            .collect::<Result<Vec<_>>>()?;
        let cfg = SimConfig {
            seed: self.seed,
            num_recordings: self.num_recordings,
            duration_secs: self.duration,
            source: self.source.parse::<SourceKind>()?,
            aligned: self.aligned,
            devices,
            environments,
            sample_rate: self.sample_rate,
            n_fft: self.n_fft,
            hop: self.hop,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fir::design_ls_targets;
    use tempfile::tempdir;

    fn sample_coeffs() -> CorrectionCoefficients {
        let gains: Vec<f64> = (0..9).map(|k| 0.1 + (k as f64).sqrt() / 3.0).collect();
        CorrectionCoefficients::new(gains, 16, 44_100, "b", "a", 16, Estimator::Unaligned).unwrap()
    }

    #[test]
    fn coefficients_round_trip_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.coef");
        let c = sample_coeffs();
        write_coefficients(&path, &c).unwrap();
        let back = read_coefficients(&path).unwrap();
        assert_eq!(back, c);
        let first = fs::read(&path).unwrap();
        write_coefficients(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert_eq!(coefficients_file_name(&c), "b_to_a.coef");
    }

    #[test]
    fn coefficients_reject_bad_content() {
        let text = coefficients_to_string(&sample_coeffs()).unwrap();
        let p = Path::new("x.coef");
        assert!(parse_coefficients(&text.replace("gains = 9", "gains = 10"), p).is_err());
        assert!(parse_coefficients(&text.replace("format_version = 1", "format_version = 7"), p).is_err());
        assert!(parse_coefficients(&text.replace("estimator = unaligned", "estimator = magic"), p).is_err());
        let negative = text.replacen("\n1.", "\n-1.", 1);
        assert!(parse_coefficients(&negative, p).is_err());
        assert!(parse_coefficients("format_version = 1\n", p).is_err());
    }

    #[test]
    fn filter_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.filt");
        let targets: Vec<f64> = (0..33).map(|k| 1.0 + 0.1 * (k as f64 / 5.0).sin()).collect();
        let f = design_ls_targets(&targets, 17, 16_000).unwrap();
        write_filter(&path, &f).unwrap();
        let first = fs::read(&path).unwrap();
        let back = read_filter(&path).unwrap();
        assert_eq!(back, f);
        write_filter(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);

        let text = filter_to_string(&f);
        assert!(parse_filter(&text.replace("group_delay = 8", "group_delay = 9"), &path).is_err());
        assert!(parse_filter(&text.replace("num_taps = 17", "num_taps = 16"), &path).is_err());
    }

    #[test]
    fn response_round_trip() {
        let r = ResponseRecord {
            kind: ResponseKind::Environment,
            id: "street".into(),
            curve: smooth_curve(3, 6.0, 64, 16_000).unwrap(),
        };
        let text = response_to_string(&r).unwrap();
        assert_eq!(parse_response(&text, Path::new("r")).unwrap(), r);
    }

    #[test]
    fn float_wav_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..1000).map(|i| (((i as f32) * 0.013).sin() * 0.7) as f64).collect();
        let w = Waveform::new(samples.clone(), 44_100).unwrap();
        write_wav(&path, &w, WavEncoding::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples(), &samples[..]);
        assert_eq!(back.sample_rate(), 44_100);
        let first = fs::read(&path).unwrap();
        write_wav(&path, &back, WavEncoding::Float32).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn pcm16_normalization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for v in [32767i16, -32768, 0, 16384] {
            wr.write_sample(v).unwrap();
        }
        wr.finalize().unwrap();
        let w = read_wav(&path).unwrap();
        assert!((w.samples()[0] - 32767.0 / 32768.0).abs() < 1e-9);
        assert_eq!(w.samples()[1], -1.0);
        assert_eq!(w.samples()[3], 0.5);

        let w2 = Waveform::new(w.samples().to_vec(), 8000).unwrap();
        write_wav(&path, &w2, WavEncoding::Pcm16).unwrap();
        assert_eq!(read_wav(&path).unwrap().samples(), w.samples());
    }

    #[test]
    fn stereo_is_downmixed() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0.5f32, -0.5, 1.0, 0.0] {
            wr.write_sample(v).unwrap();
        }
        wr.finalize().unwrap();
        assert_eq!(read_wav(&path).unwrap().samples(), &[0.0, 0.5]);
    }

    #[test]
    fn unsupported_and_truncated_wavs_fail() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("u.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        wr.write_sample(5i32).unwrap();
        wr.finalize().unwrap();
        match read_wav(&path) {
            Err(Error::UnsupportedWav { chunk, .. }) => assert_eq!(chunk, "fmt "),
            other => panic!("{other:?}"),
        }

        let good = dir.path().join("t.wav");
        write_wav(&good, &Waveform::new(vec![0.25; 100], 8000).unwrap(), WavEncoding::Float32).unwrap();
        let bytes = fs::read(&good).unwrap();
        fs::write(&good, &bytes[..bytes.len() - 50]).unwrap();
        let r = read_wav(&good);
        assert!(matches!(r, Err(Error::MalformedWav(_))), "{r:?}");

        assert!(read_wav(&dir.path().join("missing.wav")).unwrap_err().is_io());
    }

    #[test]
    fn ten_seconds_at_cd_rate() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ten.wav");
        write_wav(&path, &Waveform::new(vec![0.0; 441_000], 44_100).unwrap(), WavEncoding::Pcm16).unwrap();
        assert_eq!(read_wav(&path).unwrap().len(), 441_000);
    }

    #[test]
    fn manifest_round_trip_and_checks() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "path,device,group\na1.wav,a,g1\nb1.wav,b,g1\nb2.wav,b,\n").unwrap();
        let m = Manifest::read(&path).unwrap();
        assert_eq!(m.rows.len(), 3);
        assert_eq!(m.rows[2].group, None);
        assert_eq!(m.devices(), vec!["a", "b"]);
        assert_eq!(m.resolve(&m.rows[0]), dir.path().join("a1.wav"));
        let out = dir.path().join("m2.csv");
        m.write(&out).unwrap();
        assert_eq!(Manifest::read(&out).unwrap().rows, m.rows);

        fs::write(&path, "path,device,group\na1.wav,a,\na1.wav,b,\n").unwrap();
        assert!(Manifest::read(&path).is_err());
        fs::write(&path, "path,device,group\na1.wav,a,g\nb1.wav,a,g\n").unwrap();
        assert!(Manifest::read(&path).is_err());
        fs::write(&path, "path,device,group\na1.wav,a,g\n").unwrap();
        assert!(Manifest::read(&path).is_err());
        fs::write(&path, "path,device,group\na1.wav,,\n").unwrap();
        assert!(Manifest::read(&path).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let v = Array2::from_shape_fn((3, 4), |(t, m)| t as f64 - 0.5 * m as f64);
        let f = FeatureTensor::new(v, Normalization::PerDevice, "device:b", CorrectionStage::PreMel).unwrap();
        let bytes = feature_to_bytes(&f).unwrap();
        assert_eq!(feature_from_bytes(&bytes, Path::new("f")).unwrap(), f);
        assert!(feature_from_bytes(&bytes[..bytes.len() - 1], Path::new("f")).is_err());
    }

    #[test]
    fn sim_config_file_builds_config() {
        let text = r#"
seed = 5
num_recordings = 2
duration = 0.5
source = "pink"
aligned = true
sample_rate = 16000
n_fft = 256
hop = 64

[[devices]]
id = "a"
flat = true

[[devices]]
id = "b"
max_db = 12.0
seed = 77

[[environments]]
id = "park"
max_db = 6.0
"#;
        let file = SimConfigFile::parse(text, Path::new("sim.toml")).unwrap();
        let cfg = file.to_sim_config().unwrap();
        assert_eq!(cfg.devices.len(), 2);
        assert!(cfg.devices[0].gains().iter().all(|&g| g == 1.0));
        assert_eq!(cfg.devices[1].curve, smooth_curve(77, 12.0, 256, 16_000).unwrap());
        assert_eq!(cfg.source, SourceKind::Pink);
        let again = SimConfigFile::parse(&file.to_toml().unwrap(), Path::new("x")).unwrap();
        assert_eq!(again, file);

        assert!(SimConfigFile::parse("seed = \"x\"", Path::new("bad.toml")).is_err());
    }
}
