//! Raw series, instance sets and per-timestamp standard scaling.

use std::collections::HashSet;
use std::fs::{self, File};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Floor applied to per-timestamp standard deviations before dividing.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub values: Vec<f64>,
}

/// A single long multichannel recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    channels: Vec<Channel>,
    timestamps: Option<Vec<String>>,
}

impl RawSeries {
    pub fn new(channels: Vec<Channel>, timestamps: Option<Vec<String>>) -> Result<Self> {
        if channels.is_empty() {
            return invalid("a series needs at least one channel");
        }
        let len = channels[0].values.len();
        if len < 2 {
            return invalid(format!("series length must be at least 2, got {len}"));
        }
        let mut seen = HashSet::new();
        for ch in &channels {
            if ch.values.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "channel '{}' has {} samples, expected {len}",
                    ch.name,
                    ch.values.len()
                )));
            }
            if !seen.insert(ch.name.as_str()) {
                return invalid(format!("duplicate channel name '{}'", ch.name));
            }
            if ch.values.iter().any(|v| !v.is_finite()) {
                return invalid(format!("channel '{}' contains non-finite values", ch.name));
            }
        }
        if let Some(ts) = &timestamps {
            if ts.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "{} timestamps for {len} samples",
                    ts.len()
                )));
            }
        }
        Ok(Self {
            channels,
            timestamps,
        })
    }

    /// Convenience constructor for a single unnamed-ish channel.
    pub fn univariate(name: &str, values: Vec<f64>) -> Result<Self> {
        Self::new(
            vec![Channel {
                name: name.to_string(),
                values,
            }],
            None,
        )
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn len(&self) -> usize {
        self.channels[0].values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    pub fn select(&self, names: &[String]) -> Result<Self> {
        let mut out = Vec::with_capacity(names.len());
        for n in names {
            let ch = self
                .channels
                .iter()
                .find(|c| &c.name == n)
                .ok_or_else(|| Error::InvalidInput(format!("unknown channel '{n}'")))?;
            out.push(ch.clone());
        }
        Self::new(out, self.timestamps.clone())
    }
}

/// Which columns of a wide CSV become channels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnSelection {
    #[default]
    All,
    Named(Vec<String>),
}

/// Reads a wide CSV: header row, optional leading `timestamp` column, one
/// numeric column per channel.
pub fn load_dataset(path: impl AsRef<Path>, schema: &ColumnSelection) -> Result<RawSeries> {
    let file = File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = match reader.headers() {
        Ok(h) => h.iter().map(str::to_string).collect(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(e.into()),
        Err(_) => return Err(Error::NoData),
    };
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::NoData);
    }
    let has_ts = headers[0].eq_ignore_ascii_case("timestamp");
    let first_value_col = usize::from(has_ts);

    let selected: Vec<usize> = match schema {
        ColumnSelection::All => (first_value_col..headers.len()).collect(),
        ColumnSelection::Named(names) => names
            .iter()
            .map(|n| {
                headers
                    .iter()
                    .position(|h| h == n)
                    .filter(|&p| p >= first_value_col)
                    .ok_or_else(|| Error::InvalidInput(format!("column '{n}' not found")))
            })
            .collect::<Result<_>>()?,
    };
    if selected.is_empty() {
        return invalid("no value columns selected");
    }

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); selected.len()];
    let mut timestamps = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        if has_ts {
            timestamps.push(record[0].to_string());
        }
        for (slot, &col) in selected.iter().enumerate() {
            let cell = &record[col];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[col].clone(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[col].clone(),
                    message: "non-finite value".into(),
                });
            }
            values[slot].push(v);
        }
    }
    if values[0].is_empty() {
        return Err(Error::NoData);
    }
    let channels = selected
        .iter()
        .zip(values)
        .map(|(&col, values)| Channel {
            name: headers[col].clone(),
            values,
        })
        .collect();
    RawSeries::new(channels, has_ts.then_some(timestamps))
}

/// `I` instances of a `C`-channel series, each of length `L`, stored
/// instance-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSet {
    data: Vec<f64>,
    n_instances: usize,
    channel_names: Vec<String>,
    len: usize,
    origin_offsets: Option<Vec<usize>>,
}

impl InstanceSet {
    pub fn new(
        data: Vec<f64>,
        n_instances: usize,
        channel_names: Vec<String>,
        len: usize,
    ) -> Result<Self> {
        let c = channel_names.len();
        if n_instances < 1 || c < 1 || len < 2 {
            return invalid(format!(
                "instance set needs I >= 1, C >= 1, L >= 2 (got I={n_instances}, C={c}, L={len})"
            ));
        }
        if data.len() != n_instances * c * len {
            return Err(Error::ShapeMismatch(format!(
                "{} values for I={n_instances}, C={c}, L={len}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("instance set contains non-finite values");
        }
        Ok(Self {
            data,
            n_instances,
            channel_names,
            len,
            origin_offsets: None,
        })
    }

    /// Builds a set from nested `[instance][channel][t]` vectors.
    pub fn from_nested(nested: Vec<Vec<Vec<f64>>>, channel_names: Vec<String>) -> Result<Self> {
        let n = nested.len();
        let len = nested
            .first()
            .and_then(|i| i.first())
            .map(Vec::len)
            .unwrap_or(0);
        let mut data = Vec::with_capacity(n * channel_names.len() * len);
        for inst in nested {
            if inst.len() != channel_names.len() {
                return Err(Error::ShapeMismatch(format!(
                    "instance has {} channels, expected {}",
                    inst.len(),
                    channel_names.len()
                )));
            }
            for s in inst {
                if s.len() != len {
                    return Err(Error::ShapeMismatch(format!(
                        "series of length {}, expected {len}",
                        s.len()
                    )));
                }
                data.extend(s);
            }
        }
        Self::new(data, n, channel_names, len)
    }

    /// One channel given as `[instance][t]`.
    pub fn univariate(name: &str, rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_nested(
            rows.into_iter().map(|r| vec![r]).collect(),
            vec![name.to_string()],
        )
    }

    pub fn with_offsets(mut self, offsets: Vec<usize>) -> Result<Self> {
        if offsets.len() != self.n_instances {
            return Err(Error::ShapeMismatch(format!(
                "{} offsets for {} instances",
                offsets.len(),
                self.n_instances
            )));
        }
        self.origin_offsets = Some(offsets);
        Ok(self)
    }

    pub fn n_instances(&self) -> usize {
        self.n_instances
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn origin_offsets(&self) -> Option<&[usize]> {
        self.origin_offsets.as_deref()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn index(&self, instance: usize, channel: usize) -> usize {
        (instance * self.n_channels() + channel) * self.len
    }

    pub fn series(&self, instance: usize, channel: usize) -> &[f64] {
        let start = self.index(instance, channel);
        &self.data[start..start + self.len]
    }

    pub fn series_mut(&mut self, instance: usize, channel: usize) -> &mut [f64] {
        let start = self.index(instance, channel);
        let len = self.len;
        &mut self.data[start..start + len]
    }

    /// All instances of one channel.
    pub fn channel_series(&self, channel: usize) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n_instances).map(move |i| self.series(i, channel))
    }

    /// `I x L` matrix of one channel.
    pub fn channel_matrix(&self, channel: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_instances, self.len, |i, t| {
            self.series(i, channel)[t]
        })
    }

    /// Pools every channel's instances into one channel named `name`;
    /// instance order is channel-major.
    pub fn pool_channels(&self, name: &str) -> Result<Self> {
        let rows = (0..self.n_channels())
            .flat_map(|c| self.channel_series(c).map(<[f64]>::to_vec))
            .collect();
        Self::univariate(name, rows)
    }

    /// Keeps a single channel.
    pub fn channel_subset(&self, channel: usize) -> Result<Self> {
        let rows = self.channel_series(channel).map(<[f64]>::to_vec).collect();
        let out = Self::univariate(&self.channel_names[channel], rows)?;
        match &self.origin_offsets {
            Some(o) => out.with_offsets(o.clone()),
            None => Ok(out),
        }
    }

    /// Stacks channels given as separate univariate sets with equal I and L.
    pub fn stack_channels(parts: &[InstanceSet]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?;
        let (n, len) = (first.n_instances, first.len);
        let mut names = Vec::new();
        for p in parts {
            if p.n_instances != n || p.len != len {
                return Err(Error::ShapeMismatch(
                    "stacked channel sets must share I and L".into(),
                ));
            }
            names.extend(p.channel_names.iter().cloned());
        }
        let mut data = Vec::with_capacity(n * names.len() * len);
        for i in 0..n {
            for p in parts {
                for c in 0..p.n_channels() {
                    data.extend_from_slice(p.series(i, c));
                }
            }
        }
        Self::new(data, n, names, len)
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return invalid("instance set contains non-finite values");
        }
        Ok(())
    }

    /// Writes one CSV per channel (`<channel>.csv`, rows are instances,
    /// header `t0..t{L-1}`) plus `instances.json` recording channel order.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (c, name) in self.channel_names.iter().enumerate() {
            let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
            w.write_record((0..self.len).map(|t| format!("t{t}")))?;
            for s in self.channel_series(c) {
                w.write_record(s.iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
        }
        let meta = InstanceDirMeta {
            channels: self.channel_names.clone(),
            n_instances: self.n_instances,
            len: self.len,
            origin_offsets: self.origin_offsets.clone(),
        };
        fs::write(
            dir.join("instances.json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    /// Reads one channel CSV: a header row, then one instance per row.
    pub fn read_channel_csv(path: impl AsRef<Path>, name: &str) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let mut rows = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(t, cell)| {
                    cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                        row: idx + 1,
                        column: headers.get(t).unwrap_or("?").to_string(),
                        message: format!("'{cell}' is not a number in {}", path.display()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::NoData);
        }
        Self::univariate(name, rows)
    }

    /// Stacks channel CSVs given as separate files, each channel named after
    /// its file stem.
    pub fn read_channel_files(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let parts = paths
            .iter()
            .map(|p| {
                let p = p.as_ref();
                let name = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::InvalidInput(format!("bad file name {}", p.display())))?;
                Self::read_channel_csv(p, name)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::stack_channels(&parts)
    }

    /// Reads a directory written by [`InstanceSet::write_dir`]. Without
    /// `instances.json`, every `*.csv` file becomes a channel in name order.
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("instances.json");
        let (channels, offsets) = if meta_path.exists() {
            let meta: InstanceDirMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
            (meta.channels, meta.origin_offsets)
        } else {
            let mut names: Vec<String> = fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let p = e.path();
                    (p.extension().and_then(|x| x.to_str()) == Some("csv"))
                        .then(|| p.file_stem()?.to_str().map(str::to_string))
                        .flatten()
                })
                .collect();
            names.sort();
            (names, None)
        };
        if channels.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no channel CSV files in {}",
                dir.display()
            )));
        }
        let parts = channels
            .iter()
            .map(|name| Self::read_channel_csv(dir.join(format!("{name}.csv")), name))
            .collect::<Result<Vec<_>>>()?;
        let set = Self::stack_channels(&parts)?;
        match offsets {
            Some(o) => set.with_offsets(o),
            None => Ok(set),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceDirMeta {
    channels: Vec<String>,
    n_instances: usize,
    len: usize,
    #[serde(default)]
    origin_offsets: Option<Vec<usize>>,
}

/// Per-channel, per-timestamp mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl ScalerState {
    /// `(channel, t)` pairs whose standard deviation is exactly zero.
    pub fn zero_std(&self) -> Vec<(usize, usize)> {
        self.std
            .iter()
            .enumerate()
            .flat_map(|(c, s)| {
                s.iter()
                    .enumerate()
                    .filter(|(_, v)| **v == 0.0)
                    .map(move |(t, _)| (c, t))
            })
            .collect()
    }

    fn check_shape(&self, x: &InstanceSet) -> Result<()> {
        if self.mean.len() != x.n_channels() || self.mean.iter().any(|m| m.len() != x.len()) {
            return Err(Error::ShapeMismatch(format!(
                "scaler fitted on C={} L={}, data has C={} L={}",
                self.mean.len(),
                self.mean.first().map_or(0, Vec::len),
                x.n_channels(),
                x.len()
            )));
        }
        Ok(())
    }
}

pub fn fit_scaler(x: &InstanceSet) -> Result<ScalerState> {
    let n = x.n_instances();
    if n < 2 {
        return invalid("scaler needs at least 2 instances");
    }
    let mut mean = Vec::with_capacity(x.n_channels());
    let mut std = Vec::with_capacity(x.n_channels());
    for c in 0..x.n_channels() {
        let mut m = vec![0.0; x.len()];
        for s in x.channel_series(c) {
            for (acc, v) in m.iter_mut().zip(s) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; x.len()];
        for s in x.channel_series(c) {
            for ((acc, v), mu) in var.iter_mut().zip(s).zip(&m) {
                *acc += (v - mu).powi(2);
            }
        }
        std.push(var.iter().map(|v| (v / (n - 1) as f64).sqrt()).collect());
        mean.push(m);
    }
    Ok(ScalerState { mean, std })
}

pub fn apply_scaler(x: &InstanceSet, s: &ScalerState) -> Result<InstanceSet> {
    s.check_shape(x)?;
    let mut out = x.clone();
    for i in 0..x.n_instances() {
        for c in 0..x.n_channels() {
            for ((v, mu), sd) in out
                .series_mut(i, c)
                .iter_mut()
                .zip(&s.mean[c])
                .zip(&s.std[c])
            {
                *v = (*v - mu) / sd.max(STD_FLOOR);
            }
        }
    }
    out.check_finite()?;
    Ok(out)
}

pub fn invert_scaler(x: &InstanceSet, s: &ScalerState) -> Result<InstanceSet> {
    s.check_shape(x)?;
    let mut out = x.clone();
    for i in 0..x.n_instances() {
        for c in 0..x.n_channels() {
            for ((v, mu), sd) in out
                .series_mut(i, c)
                .iter_mut()
                .zip(&s.mean[c])
                .zip(&s.std[c])
            {
                *v = *v * sd.max(STD_FLOOR) + mu;
            }
        }
    }
    out.check_finite()?;
    Ok(out)
}
