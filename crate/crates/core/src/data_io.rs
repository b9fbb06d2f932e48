//! Monthly CSV ingestion, synthetic data generation and report files.
//!
//! The CSV format is long-form, one observed cell per row:
//!
//! ```text
//! home_id,appliance,month,kwh
//! 26,hvac,2015-01,412.5
//! ```
//!
//! Cells absent from the file are unavailable. The aggregate slice is always
//! rebuilt as the per-(home, month) sum of the listed appliances, so any
//! `aggregate` rows in the input are ignored.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexSet;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simulator::SimReport;
use crate::tensor::{
    triple_unchecked, EnergyTensor, FactorMatrix, LatentFactors, AGGREGATE_LABEL,
};

pub const CSV_HEADER: [&str; 4] = ["home_id", "appliance", "month", "kwh"];

const APPLIANCE_NAMES: [&str; 6] = ["hvac", "fridge", "washer", "furnace", "microwave", "dishwasher"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Csv,
    Synthetic,
}

/// Summary of a loaded or generated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: DataSource,
    pub appliances: Vec<String>,
    pub home_count: usize,
    pub first_month: String,
    pub last_month: String,
    /// SHA-256 of the tensor contents, see [`tensor_checksum`].
    pub checksum: String,
}

impl DatasetManifest {
    pub fn describe(tensor: &EnergyTensor, source: DataSource) -> Self {
        let months = tensor.months();
        Self {
            source,
            appliances: tensor.appliance_names().to_vec(),
            home_count: tensor.num_homes(),
            first_month: months.first().cloned().unwrap_or_default(),
            last_month: months.last().cloned().unwrap_or_default(),
            checksum: tensor_checksum(tensor),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self, false)
    }
}

/// Hex SHA-256 over the shape, labels, mask and readings.
pub fn tensor_checksum(tensor: &EnergyTensor) -> String {
    let mut h = Sha256::new();
    let (m, n, t) = tensor.readings().dim();
    for d in [m, n, t, tensor.aggregate_index()] {
        h.update((d as u64).to_le_bytes());
    }
    for label in tensor
        .appliance_names()
        .iter()
        .chain(tensor.home_ids())
        .chain(tensor.months())
    {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    for (&ok, &v) in tensor.mask().iter().zip(tensor.readings().iter()) {
        h.update([u8::from(ok)]);
        h.update(if ok { v } else { 0.0 }.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeasonShape {
    Sinusoidal,
    Flat,
    /// One line per month, `true_rank` comma-separated nonnegative values.
    FromFile(PathBuf),
}

impl std::str::FromStr for SeasonShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" => Ok(Self::Sinusoidal),
            "flat" => Ok(Self::Flat),
            other => match other.strip_prefix("file:") {
                Some(path) => Ok(Self::FromFile(PathBuf::from(path))),
                None => Err(Error::invalid(format!(
                    "unknown season shape {other:?} (expected sinusoidal, flat or file:<path>)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_homes: usize,
    /// Breakdown appliances, aggregate excluded.
    pub num_appliances: usize,
    pub num_months: usize,
    pub true_rank: usize,
    /// Noise standard deviation as a fraction of the mean appliance reading.
    pub noise_sigma: f64,
    pub season_shape: SeasonShape,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_homes: 30,
            num_appliances: 6,
            num_months: 12,
            true_rank: 2,
            noise_sigma: 0.05,
            season_shape: SeasonShape::Sinusoidal,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_homes", self.num_homes),
            ("num_appliances", self.num_appliances),
            ("num_months", self.num_months),
            ("true_rank", self.true_rank),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Mean appliance reading of generated data, in kWh.
pub const SYNTHETIC_MEAN_KWH: f64 = 100.0;

fn appliance_name(j: usize) -> String {
    APPLIANCE_NAMES
        .get(j)
        .map_or_else(|| format!("appliance_{}", j + 1), |s| s.to_string())
}

fn month_label(k: usize) -> String {
    format!("{:04}-{:02}", 2015 + k / 12, k % 12 + 1)
}

fn season_rows(cfg: &SyntheticConfig) -> Result<Vec<Vec<f64>>> {
    let (t, r) = (cfg.num_months, cfg.true_rank);
    match &cfg.season_shape {
        SeasonShape::Flat => Ok(vec![vec![1.0; r]; t]),
        SeasonShape::Sinusoidal => Ok((0..t)
            .map(|k| {
                (0..r)
                    .map(|d| {
                        let phase = 12.0 * d as f64 / r as f64;
                        0.5 + 0.5 * (std::f64::consts::TAU * (k as f64 + phase) / 12.0).sin()
                    })
                    .collect()
            })
            .collect()),
        SeasonShape::FromFile(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let rows: Vec<Vec<f64>> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(n, line)| {
                    let row = line
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<f64>, _>>()
                        .map_err(|e| Error::Parse {
                            line: n as u64 + 1,
                            message: e.to_string(),
                        })?;
                    if row.len() != r || row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return Err(Error::Validation {
                            line: n as u64 + 1,
                            message: format!("expected {r} nonnegative values"),
                        });
                    }
                    Ok(row)
                })
                .collect::<Result<_>>()?;
            if rows.len() != t {
                return Err(Error::invalid(format!(
                    "season file {} has {} rows, expected {t}",
                    path.display(),
                    rows.len()
                )));
            }
            Ok(rows)
        }
    }
}

/// Samples a rank-`true_rank` tensor with seasonal structure. The returned
/// factors reproduce the noiseless readings exactly; their aggregate row is
/// the sum of the appliance rows.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(EnergyTensor, LatentFactors)> {
    cfg.validate()?;
    let (m, n, t, r) = (cfg.num_homes, cfg.num_appliances, cfg.num_months, cfg.true_rank);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut uniform_rows = |rows: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..r).map(|_| 1.0 - rng.random::<f64>()).collect())
            .collect()
    };
    let mut homes = uniform_rows(m);
    let mut apps = uniform_rows(n);
    let mut seasons = season_rows(cfg)?;

    let mut clean = Array3::<f64>::zeros((m, n, t));
    for ((i, j, k), v) in clean.indexed_iter_mut() {
        *v = triple_unchecked(&homes[i], &apps[j], &seasons[k]);
    }
    let mean = clean.mean().unwrap_or(0.0);
    if mean <= 0.0 {
        return Err(Error::invalid("season shape produces an all-zero tensor"));
    }
    let scale = SYNTHETIC_MEAN_KWH / mean;
    let factor = scale.cbrt();
    for row in homes.iter_mut().chain(&mut apps).chain(&mut seasons) {
        row.iter_mut().for_each(|v| *v *= factor);
    }

    let mut readings = Array3::<f64>::zeros((m, n, t));
    let noise = Normal::new(0.0, cfg.noise_sigma * SYNTHETIC_MEAN_KWH)
        .map_err(|e| Error::invalid(e.to_string()))?;
    for ((i, j, k), v) in readings.indexed_iter_mut() {
        let e = triple_unchecked(&homes[i], &apps[j], &seasons[k]);
        *v = if cfg.noise_sigma > 0.0 {
            (e + noise.sample(&mut rng)).max(0.0)
        } else {
            e
        };
    }

    let names = (0..n).map(appliance_name).collect();
    let tensor = EnergyTensor::from_appliances(readings, Array3::from_elem((m, n, t), true), names)?
        .with_labels(
            (0..m).map(|i| format!("H{:03}", i + 1)).collect(),
            (0..t).map(month_label).collect(),
        )?;

    let mut aggregate = vec![0.0; r];
    for a in &apps {
        aggregate.iter_mut().zip(a).for_each(|(s, v)| *s += v);
    }
    let mut app_rows = Vec::with_capacity(n + 1);
    app_rows.push(aggregate);
    app_rows.extend(apps);
    let factors = LatentFactors::new(
        FactorMatrix::from_rows(&homes)?,
        FactorMatrix::from_rows(&app_rows)?,
        FactorMatrix::from_rows(&seasons)?,
    )?;
    Ok((tensor, factors))
}

/// Options for [`load_csv`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Appliances observed in less than this fraction of home-months are dropped.
    pub min_coverage: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { min_coverage: 0.8 }
    }
}

fn valid_month(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 7
        && b[4] == b'-'
        && b[..4].iter().chain(&b[5..]).all(u8::is_ascii_digit)
        && matches!(s[5..].parse::<u8>(), Ok(1..=12))
}

/// Reads a long-format monthly CSV into a tensor with a rebuilt aggregate slice.
pub fn load_csv(path: &Path, opts: &LoadOptions) -> Result<(EnergyTensor, DatasetManifest)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    load_csv_from(file, opts).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// [`load_csv`] over any reader.
pub fn load_csv_from(reader: impl io::Read, opts: &LoadOptions) -> Result<(EnergyTensor, DatasetManifest)> {
    if !(0.0..=1.0).contains(&opts.min_coverage) {
        return Err(Error::invalid(format!(
            "min_coverage must be in [0, 1], got {}",
            opts.min_coverage
        )));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let parse_err = |line: u64, e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io("<input>", source),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    };

    match records.next() {
        None => return Err(Error::invalid("empty file")),
        Some(Err(e)) => return Err(parse_err(1, e)),
        Some(Ok(header)) => {
            if header.iter().ne(CSV_HEADER) {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header {:?}", CSV_HEADER.join(",")),
                });
            }
        }
    }

    let mut homes: IndexSet<String> = IndexSet::new();
    let mut appliances: IndexSet<String> = IndexSet::new();
    let mut cells: HashMap<(usize, usize, String), f64> = HashMap::new();
    let mut line_no = 1u64;
    for record in records {
        line_no += 1;
        let record = record.map_err(|e| parse_err(line_no, e))?;
        let line = record.position().map_or(line_no, |p| p.line());
        line_no = line;
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let (home, appliance, month, kwh) = (&record[0], &record[1], &record[2], &record[3]);
        if home.is_empty() || appliance.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty home_id or appliance".into(),
            });
        }
        if !valid_month(month) {
            return Err(Error::Parse {
                line,
                message: format!("month {month:?} is not YYYY-MM"),
            });
        }
        let kwh: f64 = kwh.trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("kwh {kwh:?} is not a number"),
        })?;
        if !kwh.is_finite() || kwh < 0.0 {
            return Err(Error::Validation {
                line,
                message: format!("kwh must be finite and nonnegative, got {kwh}"),
            });
        }
        let (i, _) = homes.insert_full(home.to_string());
        if appliance == AGGREGATE_LABEL {
            continue;
        }
        let (j, _) = appliances.insert_full(appliance.to_string());
        if cells.insert((i, j, month.to_string()), kwh).is_some() {
            return Err(Error::Conflict {
                line,
                message: format!("duplicate reading for ({home}, {appliance}, {month})"),
            });
        }
    }
    if cells.is_empty() {
        return Err(Error::invalid("no appliance readings after the header"));
    }

    let mut months: Vec<String> = cells.keys().map(|(_, _, k)| k.clone()).collect();
    months.sort();
    months.dedup();
    let month_index: HashMap<&str, usize> =
        months.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();

    let (m, n, t) = (homes.len(), appliances.len(), months.len());
    let mut readings = Array3::<f64>::zeros((m, n, t));
    let mut mask = Array3::<bool>::from_elem((m, n, t), false);
    for ((i, j, month), v) in &cells {
        let k = month_index[month.as_str()];
        readings[[*i, *j, k]] = *v;
        mask[[*i, *j, k]] = true;
    }

    let keep: Vec<usize> = (0..n)
        .filter(|&j| {
            let seen = mask.index_axis(ndarray::Axis(1), j).iter().filter(|&&b| b).count();
            let coverage = seen as f64 / (m * t) as f64;
            if coverage < opts.min_coverage {
                log::warn!(
                    "dropping appliance {:?}: coverage {:.3} below {}",
                    appliances[j],
                    coverage,
                    opts.min_coverage
                );
                false
            } else {
                true
            }
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid("every appliance fell below the coverage threshold"));
    }
    let readings = readings.select(ndarray::Axis(1), &keep);
    let mask = mask.select(ndarray::Axis(1), &keep);
    let names = keep.iter().map(|&j| appliances[j].clone()).collect();

    let tensor = EnergyTensor::from_appliances(readings, mask, names)?
        .with_labels(homes.into_iter().collect(), months)?;
    let manifest = DatasetManifest::describe(&tensor, DataSource::Csv);
    Ok((tensor, manifest))
}

/// Writes every available breakdown cell in the long format, home-major.
pub fn save_csv(tensor: &EnergyTensor, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{}", CSV_HEADER.join(",")).map_err(io_err)?;
    for i in 0..tensor.num_homes() {
        for j in tensor.breakdown_appliances() {
            for k in 0..tensor.num_months() {
                if tensor.mask()[[i, j, k]] {
                    writeln!(
                        w,
                        "{},{},{},{}",
                        tensor.home_ids()[i],
                        tensor.appliance_names()[j],
                        tensor.months()[k],
                        tensor.readings()[[i, j, k]]
                    )
                    .map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Compact JSON with every float printed to 17 significant digits.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

fn to_json_bytes<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser)?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T, full_precision: bool) -> Result<()> {
    let mut bytes = if full_precision {
        to_json_bytes(value)
    } else {
        serde_json::to_vec_pretty(value)
    }
    .map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_report(report: &SimReport, path: &Path) -> Result<()> {
    write_json(path, report, true)
}

pub fn read_report(path: &Path) -> Result<SimReport> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Hex SHA-256 of the report's serialized form.
pub fn report_checksum(report: &SimReport) -> String {
    let bytes = to_json_bytes(report).expect("reports always serialize");
    hex::encode(Sha256::digest(bytes))
}

/// Reads one line per month of comma-separated values, e.g. a learned season prior.
pub fn read_factor_matrix(path: &Path) -> Result<FactorMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            line.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Parse {
                    line: n as u64 + 1,
                    message: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    FactorMatrix::from_rows(&rows)
}

pub fn write_factor_matrix(matrix: &FactorMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in matrix.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
