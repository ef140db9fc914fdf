//! SurvSet-style CSV ingestion, feature encoding and stratified splitting.
//!
//! Input files carry `time` and `event` columns, categorical covariates
//! prefixed `fac_` and numeric covariates prefixed `num_`. An optional `pid`
//! (or `id`) column is kept as the row identifier; anything else is ignored.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Minimum number of retained rows for a split.
pub const MIN_ROWS: usize = 10;

/// Label of the one-hot column that absorbs missing categorical values.
pub const MISSING_LEVEL: &str = "(missing)";

const MISSING_TOKENS: [&str; 5] = ["", "NA", "nan", "NaN", "null"];

/// Unencoded rows as read from disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawDataset {
    pub name: String,
    pub ids: Vec<String>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub fac_names: Vec<String>,
    /// Row-major categorical values, `None` when missing.
    pub fac: Vec<Vec<Option<String>>>,
    pub num_names: Vec<String>,
    /// Row-major numeric values, `None` when missing.
    pub num: Vec<Vec<Option<f64>>>,
    /// Rows discarded because `time <= 0`.
    pub dropped_nonpositive_time: usize,
}

impl RawDataset {
    /// A dataset of purely numeric, fully observed covariates.
    pub fn from_numeric(name: &str, x: &[Vec<f64>], time: &[f64], event: &[bool]) -> Result<Self> {
        if x.len() != time.len() || x.len() != event.len() {
            return Err(Error::Shape {
                expected: x.len(),
                got: time.len().min(event.len()),
            });
        }
        let d = x.first().map_or(0, Vec::len);
        if let Some(bad) = x.iter().find(|r| r.len() != d) {
            return Err(Error::Shape {
                expected: d,
                got: bad.len(),
            });
        }
        if let Some(t) = time.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(Error::Domain(format!("times must be positive and finite, got {t}")));
        }
        Ok(Self {
            name: name.to_string(),
            ids: (0..x.len()).map(|i| i.to_string()).collect(),
            time: time.to_vec(),
            event: event.to_vec(),
            fac_names: Vec::new(),
            fac: vec![Vec::new(); x.len()],
            num_names: (0..d).map(|j| format!("num_x{j}")).collect(),
            num: x.iter().map(|r| r.iter().map(|v| Some(*v)).collect()).collect(),
            dropped_nonpositive_time: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.event.iter().filter(|e| **e).count()
    }

    /// The rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            time: indices.iter().map(|&i| self.time[i]).collect(),
            event: indices.iter().map(|&i| self.event[i]).collect(),
            fac_names: self.fac_names.clone(),
            fac: indices.iter().map(|&i| self.fac[i].clone()).collect(),
            num_names: self.num_names.clone(),
            num: indices.iter().map(|&i| self.num[i].clone()).collect(),
            dropped_nonpositive_time: 0,
        }
    }
}

fn is_missing(s: &str) -> bool {
    MISSING_TOKENS.contains(&s.trim())
}

fn parse_event(s: &str, line: usize) -> Result<bool> {
    match s.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(false),
        Ok(v) if v == 1.0 => Ok(true),
        _ => Err(Error::format(Some(line), format!("event must be 0 or 1, got {s:?}"))),
    }
}

fn parse_number(s: &str, column: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::format(Some(line), format!("cannot parse {s:?} in column {column} as a number")))
}

/// Reads a headered, comma-separated file in SurvSet column convention.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, &name)
}

/// [`load_csv`] over any reader.
pub fn read_csv(reader: impl std::io::Read, name: &str) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(Some(1), e.to_string()))?
        .clone();
    let find = |key: &str| headers.iter().position(|h| h.trim() == key);
    let time_col = find("time").ok_or_else(|| Error::format(Some(1), "missing `time` column"))?;
    let event_col = find("event").ok_or_else(|| Error::format(Some(1), "missing `event` column"))?;
    let id_col = find("pid").or_else(|| find("id"));

    let mut fac_cols = Vec::new();
    let mut num_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        let h = h.trim();
        if h.starts_with("fac_") {
            fac_cols.push(i);
        } else if h.starts_with("num_") {
            num_cols.push(i);
        } else if i != time_col && i != event_col && Some(i) != id_col {
            warn!("{name}: ignoring column {h:?}");
        }
    }

    let mut data = RawDataset {
        name: name.to_string(),
        fac_names: fac_cols.iter().map(|&i| headers[i].trim().to_string()).collect(),
        num_names: num_cols.iter().map(|&i| headers[i].trim().to_string()).collect(),
        ..Default::default()
    };
    for (k, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let rec = rec.map_err(|e| Error::format(Some(line), e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let time = parse_number(field(time_col), "time", line)?;
        let event = parse_event(field(event_col), line)?;
        let num = num_cols
            .iter()
            .map(|&i| {
                let s = field(i);
                if is_missing(s) {
                    Ok(None)
                } else {
                    parse_number(s, &headers[i], line).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if !time.is_finite() {
            return Err(Error::format(Some(line), format!("time must be finite, got {time}")));
        }
        if time <= 0.0 {
            data.dropped_nonpositive_time += 1;
            continue;
        }
        let fac = fac_cols
            .iter()
            .map(|&i| {
                let s = field(i);
                (!is_missing(s)).then(|| s.trim().to_string())
            })
            .collect();
        data.ids
            .push(id_col.map_or_else(|| (line - 2).to_string(), |i| field(i).trim().to_string()));
        data.time.push(time);
        data.event.push(event);
        data.fac.push(fac);
        data.num.push(num);
    }
    if data.dropped_nonpositive_time > 0 {
        warn!("{name}: dropped {} rows with time <= 0", data.dropped_nonpositive_time);
    }
    Ok(data)
}

/// Encoded covariates with survival targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    pub x: Matrix,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
}

impl SurvivalDataset {
    pub fn new(x: Matrix, time: Vec<f64>, event: Vec<bool>) -> Result<Self> {
        if x.rows() != time.len() || x.rows() != event.len() {
            return Err(Error::Shape {
                expected: x.rows(),
                got: time.len().min(event.len()),
            });
        }
        if let Some(t) = time.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(Error::Domain(format!("times must be positive and finite, got {t}")));
        }
        Ok(Self { x, time, event })
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn max_time(&self) -> f64 {
        self.time.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
        }
        Self {
            x: Matrix::from_row_major(indices.len(), d, data).expect("consistent shape"),
            time: indices.iter().map(|&i| self.time[i]).collect(),
            event: indices.iter().map(|&i| self.event[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalMap {
    pub name: String,
    /// Sorted observed levels; one output column each.
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub name: String,
    /// Imputation value for missing entries.
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

/// Train-split encoding statistics. Output columns are the one-hot blocks in
/// `categorical` order followed by the numeric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCodec {
    pub categorical: Vec<CategoricalMap>,
    pub numeric: Vec<NumericStats>,
    /// When set, one-hot columns are standardized as well.
    pub normalize_all: bool,
    /// Mean and std of every one-hot column; empty unless `normalize_all`.
    pub onehot_stats: Vec<(f64, f64)>,
    /// Columns removed as constant on the training rows.
    pub dropped: Vec<String>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl FeatureCodec {
    /// Fits encoding statistics on `train` only.
    pub fn fit(train: &RawDataset, normalize_all: bool) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Codec("cannot fit a codec on zero rows".into()));
        }
        let mut dropped = Vec::new();
        let mut categorical = Vec::new();
        for (j, name) in train.fac_names.iter().enumerate() {
            let mut levels = BTreeSet::new();
            let mut any_missing = false;
            for row in &train.fac {
                match &row[j] {
                    Some(v) => {
                        levels.insert(v.clone());
                    }
                    None => any_missing = true,
                }
            }
            let mut levels: Vec<String> = levels.into_iter().collect();
            if any_missing {
                levels.push(MISSING_LEVEL.to_string());
            }
            if levels.len() < 2 {
                warn!("dropping constant categorical column {name}");
                dropped.push(name.clone());
                continue;
            }
            categorical.push(CategoricalMap {
                name: name.clone(),
                levels,
            });
        }

        let mut numeric = Vec::new();
        for (j, name) in train.num_names.iter().enumerate() {
            let mut observed: Vec<f64> = train.num.iter().filter_map(|r| r[j]).collect();
            if observed.is_empty() {
                warn!("dropping numeric column {name}: no observed values");
                dropped.push(name.clone());
                continue;
            }
            let med = median(&mut observed);
            let filled: Vec<f64> = train.num.iter().map(|r| r[j].unwrap_or(med)).collect();
            let (mean, std) = mean_std(&filled);
            if !(std > 0.0) {
                warn!("dropping constant numeric column {name}");
                dropped.push(name.clone());
                continue;
            }
            numeric.push(NumericStats {
                name: name.clone(),
                median: med,
                mean,
                std,
            });
        }

        let mut codec = Self {
            categorical,
            numeric,
            normalize_all,
            onehot_stats: Vec::new(),
            dropped,
        };
        if codec.dim() == 0 {
            return Err(Error::Codec("every covariate is constant on the training rows".into()));
        }
        if normalize_all {
            let onehot = codec.onehot_block(train)?;
            let width = codec.onehot_width();
            codec.onehot_stats = (0..width)
                .map(|c| {
                    let col: Vec<f64> = (0..train.len()).map(|r| onehot[r * width + c]).collect();
                    mean_std(&col)
                })
                .collect();
            // a level present in every row cannot be standardized
            if let Some(c) = codec.onehot_stats.iter().position(|&(_, s)| !(s > 0.0)) {
                return Err(Error::Codec(format!("one-hot column {c} is constant")));
            }
        }
        Ok(codec)
    }

    fn onehot_width(&self) -> usize {
        self.categorical.iter().map(|c| c.levels.len()).sum()
    }

    pub fn dim(&self) -> usize {
        self.onehot_width() + self.numeric.len()
    }

    /// Output column names in encoding order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .categorical
            .iter()
            .flat_map(|c| c.levels.iter().map(move |l| format!("{}={l}", c.name)))
            .collect();
        names.extend(self.numeric.iter().map(|n| n.name.clone()));
        names
    }

    fn column_lookup(names: &[String], wanted: &str) -> Result<usize> {
        names
            .iter()
            .position(|n| n == wanted)
            .ok_or_else(|| Error::Codec(format!("column {wanted} missing from dataset")))
    }

    /// Unscaled one-hot block, row-major.
    fn onehot_block(&self, rows: &RawDataset) -> Result<Vec<f64>> {
        let width = self.onehot_width();
        let mut out = vec![0.0; rows.len() * width];
        let mut offset = 0;
        for map in &self.categorical {
            let j = Self::column_lookup(&rows.fac_names, &map.name)?;
            let index: HashMap<&str, usize> = map.levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
            for (r, row) in rows.fac.iter().enumerate() {
                let key = row[j].as_deref().unwrap_or(MISSING_LEVEL);
                // unseen levels leave the block at zero
                if let Some(&k) = index.get(key) {
                    out[r * width + offset + k] = 1.0;
                }
            }
            offset += map.levels.len();
        }
        Ok(out)
    }

    /// Encodes `rows` with the fitted statistics; never mutates the codec.
    pub fn apply(&self, rows: &RawDataset) -> Result<SurvivalDataset> {
        let n = rows.len();
        let d = self.dim();
        let width = self.onehot_width();
        let onehot = self.onehot_block(rows)?;
        let num_idx = self
            .numeric
            .iter()
            .map(|s| Self::column_lookup(&rows.num_names, &s.name))
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..width {
                let v = onehot[r * width + c];
                data.push(match self.onehot_stats.get(c) {
                    Some(&(m, s)) if self.normalize_all => (v - m) / s,
                    _ => v,
                });
            }
            for (s, &j) in self.numeric.iter().zip(&num_idx) {
                let v = rows.num[r][j].unwrap_or(s.median);
                data.push((v - s.mean) / s.std);
            }
        }
        if data.len() != n * d {
            return Err(Error::Codec(format!("encoded {} values, expected {}", data.len(), n * d)));
        }
        let x = Matrix::from_row_major(n, d, data)?;
        SurvivalDataset::new(x, rows.time.clone(), rows.event.clone())
    }
}

pub fn fit_codec(train: &RawDataset, normalize_all: bool) -> Result<FeatureCodec> {
    FeatureCodec::fit(train, normalize_all)
}

pub fn apply_codec(codec: &FeatureCodec, rows: &RawDataset) -> Result<SurvivalDataset> {
    codec.apply(rows)
}

/// Train/validation/test partition with the codec fitted on train.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub name: String,
    pub train: SurvivalDataset,
    pub validation: SurvivalDataset,
    pub test: SurvivalDataset,
    pub codec: FeatureCodec,
    pub seed: u64,
    /// Row indices into the loaded dataset, ascending.
    pub train_idx: Vec<usize>,
    pub validation_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Sizes of the (train, validation) parts of `n` rows; test gets the rest.
fn part_sizes(n: usize) -> (usize, usize) {
    let train = (0.6 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).min(n - train);
    (train, val)
}

/// Event-stratified 60/20/20 split, deterministic in `seed`.
pub fn stratified_split(raw: &RawDataset, seed: u64, normalize_all: bool) -> Result<SplitDataset> {
    if raw.len() < MIN_ROWS {
        return Err(Error::Input(format!(
            "{}: need at least {MIN_ROWS} rows, got {}",
            raw.name,
            raw.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events: Vec<usize> = (0..raw.len()).filter(|&i| raw.event[i]).collect();
    let censored: Vec<usize> = (0..raw.len()).filter(|&i| !raw.event[i]).collect();
    let strata = if events.is_empty() || censored.is_empty() {
        warn!("{}: single event class, falling back to an unstratified split", raw.name);
        vec![(0..raw.len()).collect::<Vec<_>>()]
    } else {
        vec![events, censored]
    };
    let (mut train_idx, mut validation_idx, mut test_idx) = (Vec::new(), Vec::new(), Vec::new());
    for mut stratum in strata {
        stratum.shuffle(&mut rng);
        let (a, b) = part_sizes(stratum.len());
        train_idx.extend_from_slice(&stratum[..a]);
        validation_idx.extend_from_slice(&stratum[a..a + b]);
        test_idx.extend_from_slice(&stratum[a + b..]);
    }
    train_idx.sort_unstable();
    validation_idx.sort_unstable();
    test_idx.sort_unstable();

    let train_raw = raw.subset(&train_idx);
    let codec = FeatureCodec::fit(&train_raw, normalize_all)?;
    Ok(SplitDataset {
        name: raw.name.clone(),
        train: codec.apply(&train_raw)?,
        validation: codec.apply(&raw.subset(&validation_idx))?,
        test: codec.apply(&raw.subset(&test_idx))?,
        codec,
        seed,
        train_idx,
        validation_idx,
        test_idx,
    })
}
