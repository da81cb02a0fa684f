//! File formats: the `.mrgl` tensor container, result CSVs and PGM/PPM grids.
//!
//! # `.mrgl` layout (all integers little-endian)
//!
//! ```text
//! magic        4 bytes  "MRGL"
//! version      u32      1
//! entry count  u64
//! entry*       name_len u32 | name (UTF-8) | ndim u32 | dims u64 × ndim
//!              | dtype u8 (0 = f32) | payload f32 × product(dims)
//! footer       u64      CRC-64/XZ of every preceding byte
//! ```
//!
//! Models are stored as `layer.{i}.weight` / `layer.{i}.bias` entries plus
//! zero-length `key=value` entries carrying metadata and activations.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::bounds::BoundReport;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Activation, Layer, Model, ModelMeta};
use crate::synth::LabeledSet;
use crate::tensor::Tensor;
use crate::train::TrainLog;

pub const MAGIC: [u8; 4] = *b"MRGL";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// A named `f32` tensor as stored on disk. `dims` may contain zeros
/// (metadata entries have shape `[0]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f32>,
}

impl Entry {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            values: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    fn marker(name: String) -> Self {
        Self {
            name,
            dims: vec![0],
            values: Vec::new(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            self.dims.iter().map(|&d| d as usize).collect(),
            self.values.iter().map(|&v| v as f64).collect(),
        )
    }
}

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

pub fn encode_entries(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(CheckpointError::Malformed(format!("duplicate entry name {:?}", e.name)).into());
        }
        let count: u64 = e.dims.iter().product();
        if count != e.values.len() as u64 {
            return Err(CheckpointError::Malformed(format!(
                "entry {:?}: dims {:?} need {count} values, got {}",
                e.name,
                e.dims,
                e.values.len()
            ))
            .into());
        }
        if let Some(v) = e.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("entry {:?} holds non-finite value {v} after f32 rounding", e.name)));
        }
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc64(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated {
            offset: 0,
            needed: 4,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < 4 + 4 + 8 + 8 {
        return Err(CheckpointError::Truncated {
            offset: 4,
            needed: 20,
            available: bytes.len() - 4,
        });
    }
    let (body, footer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(footer.try_into().expect("8 bytes"));
    let computed = crc64(body);
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let count = r.u64()?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Malformed(format!("duplicate entry name {name:?}")));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Malformed(format!("entry {name:?} has unknown dtype {dtype}")));
        }
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|c| usize::try_from(c).ok())
            .and_then(|c| c.checked_mul(4).map(|b| (c, b)))
            .ok_or_else(|| CheckpointError::Malformed(format!("entry {name:?} dims {dims:?} overflow")))?;
        let payload = r.take(count.1)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(Entry { name, dims, values });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes before the checksum",
            body.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn write_entries(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode_entries(entries)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_entries(&bytes)?)
}

pub fn model_to_entries(model: &Model) -> Result<Vec<Entry>> {
    if model.depth() == 0 {
        return Err(Error::domain("cannot write a model without layers"));
    }
    let meta = &model.meta;
    let constituents = meta
        .constituents
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let mut entries = vec![
        Entry::marker(format!("meta.seed={}", meta.seed)),
        Entry::marker(format!("meta.stream={}", meta.stream)),
        Entry::marker(format!("meta.arch={}", meta.arch)),
        Entry::marker(format!("meta.config_hash={}", meta.config_hash)),
        Entry::marker(format!("meta.constituents={constituents}")),
    ];
    for (i, layer) in model.layers().iter().enumerate() {
        entries.push(Entry::marker(format!("layer.{i}.activation={}", layer.activation)));
        entries.push(Entry::from_tensor(format!("layer.{i}.weight"), &layer.weight));
        entries.push(Entry::from_tensor(format!("layer.{i}.bias"), &layer.bias));
    }
    Ok(entries)
}

pub fn model_from_entries(entries: &[Entry]) -> Result<Model> {
    let malformed = |msg: String| Error::from(CheckpointError::Malformed(msg));
    let mut meta = ModelMeta::default();
    let mut activations: Vec<Option<Activation>> = Vec::new();
    let mut weights: Vec<Option<Tensor>> = Vec::new();
    let mut biases: Vec<Option<Tensor>> = Vec::new();
    fn slot<T>(v: &mut Vec<Option<T>>, i: usize) -> &mut Option<T> {
        if v.len() <= i {
            v.resize_with(i + 1, || None);
        }
        &mut v[i]
    }
    for e in entries {
        if let Some((key, value)) = e.name.split_once('=') {
            let parse_u64 = |v: &str| v.parse::<u64>().map_err(|_| malformed(format!("bad number in {:?}", e.name)));
            match key {
                "meta.seed" => meta.seed = parse_u64(value)?,
                "meta.stream" => meta.stream = parse_u64(value)?,
                "meta.arch" => meta.arch = value.to_owned(),
                "meta.config_hash" => meta.config_hash = parse_u64(value)?,
                "meta.constituents" => {
                    meta.constituents = value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(parse_u64)
                        .collect::<Result<_>>()?
                }
                _ => {
                    let i = layer_index(key, "activation").ok_or_else(|| malformed(format!("unknown entry {:?}", e.name)))?;
                    *slot(&mut activations, i) = Some(value.parse()?);
                }
            }
        } else if let Some(i) = layer_index(&e.name, "weight") {
            *slot(&mut weights, i) = Some(e.to_tensor()?);
        } else if let Some(i) = layer_index(&e.name, "bias") {
            *slot(&mut biases, i) = Some(e.to_tensor()?);
        } else {
            return Err(malformed(format!("unknown entry {:?}", e.name)));
        }
    }
    let depth = weights.len();
    if depth == 0 {
        return Err(malformed("no layers".into()));
    }
    if biases.len() != depth || activations.len() != depth {
        return Err(malformed("layer entries are incomplete".into()));
    }
    let mut layers = Vec::with_capacity(depth);
    for i in 0..depth {
        match (weights[i].take(), biases[i].take(), activations[i]) {
            (Some(w), Some(b), Some(a)) => layers.push(Layer::new(w, b, a)?),
            _ => return Err(malformed(format!("layer {i} is incomplete"))),
        }
    }
    Model::new(layers, meta)
}

fn layer_index(name: &str, field: &str) -> Option<usize> {
    let rest = name.strip_prefix("layer.")?;
    let (idx, f) = rest.split_once('.')?;
    (f == field).then(|| idx.parse().ok()).flatten()
}

/// Writes `model` with every parameter rounded to the nearest `f32`.
pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_entries(path, &model_to_entries(model)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    model_from_entries(&read_entries(path)?)
}

/// Caches a labelled set as `images [n × dim]` and `labels [n]` entries.
pub fn write_dataset(set: &LabeledSet, path: &Path) -> Result<()> {
    let entries = vec![
        Entry::marker(format!("meta.n_classes={}", set.n_classes())),
        Entry {
            name: "images".into(),
            dims: vec![set.len() as u64, set.dim() as u64],
            values: set.pixels().iter().map(|&v| v as f32).collect(),
        },
        Entry {
            name: "labels".into(),
            dims: vec![set.len() as u64],
            values: set.labels().iter().map(|&l| l as f32).collect(),
        },
    ];
    write_entries(path, &entries)
}

pub fn read_dataset(path: &Path) -> Result<LabeledSet> {
    let entries = read_entries(path)?;
    let find = |name: &str| {
        entries
            .iter()
            .find(|e| e.name == name || e.name.starts_with(&format!("{name}=")))
            .ok_or_else(|| Error::from(CheckpointError::Malformed(format!("missing entry {name}"))))
    };
    let n_classes = find("meta.n_classes")?
        .name
        .split_once('=')
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::from(CheckpointError::Malformed("bad n_classes".into())))?;
    let images = find("images")?;
    let labels = find("labels")?;
    let dim = *images.dims.get(1).unwrap_or(&0) as usize;
    LabeledSet::new(
        dim,
        n_classes,
        images.values.iter().map(|&v| v as f64).collect(),
        labels.values.iter().map(|&v| v as usize).collect(),
    )
}

// ---------------------------------------------------------------------------
// Portable graymap / pixmap grids

/// Tiles `templates` (one per row) into a binary PGM (`channels == 1`) or
/// PPM (`channels == 3`) image, `cols` tiles per row, separated by 1-pixel
/// lines of value 0. Each template is min-max normalised to `[0, 255]`
/// independently; a constant template maps to 0.
pub fn encode_image_grid(templates: &Tensor, height: usize, width: usize, channels: usize, cols: usize) -> Result<Vec<u8>> {
    if channels != 1 && channels != 3 {
        return Err(Error::domain(format!("grids support 1 or 3 channels, got {channels}")));
    }
    if cols == 0 || height == 0 || width == 0 {
        return Err(Error::domain("grid needs positive cols, height and width"));
    }
    let dim = templates.cols();
    if dim != height * width * channels {
        return Err(Error::shape(
            "encode_image_grid",
            format!("template dim {dim} != {height}x{width}x{channels}"),
        ));
    }
    let k = templates.rows();
    let grid_rows = k.div_ceil(cols);
    let img_w = cols * width + (cols - 1);
    let img_h = grid_rows * height + grid_rows.saturating_sub(1);
    let mut pixels = vec![0u8; img_w * img_h * channels];
    for t in 0..k {
        let row = templates.row(t);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let (gy, gx) = (t / cols, t % cols);
        let (oy, ox) = (gy * (height + 1), gx * (width + 1));
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = row[(y * width + x) * channels + c];
                    let level = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
                    pixels[((oy + y) * img_w + ox + x) * channels + c] = level as u8;
                }
            }
        }
    }
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{img_w} {img_h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Grayscale grid; `templates` must have `height · width` columns.
pub fn write_pgm_grid(templates: &Tensor, height: usize, width: usize, cols: usize, path: &Path) -> Result<()> {
    let bytes = encode_image_grid(templates, height, width, 1, cols)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// RGB grid; `templates` must have `height · width · 3` columns.
pub fn write_ppm_grid(templates: &Tensor, height: usize, width: usize, cols: usize, path: &Path) -> Result<()> {
    let bytes = encode_image_grid(templates, height, width, 3, cols)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// CSV

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Loss,
    Gap,
    Bound,
    Empirical,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Loss => "loss",
            Metric::Gap => "gap",
            Metric::Bound => "bound",
            Metric::Empirical => "empirical",
        }
    }
}

/// One line of a results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    /// A merge-method tag or one of the baseline tags (`perf_ave`, `individual`, ...).
    pub method: String,
    pub n_models: usize,
    pub factor: f64,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
}

pub const RESULT_HEADER: &str = "experiment,method,n_models,factor,seed,metric,value";

impl ResultRow {
    pub fn to_csv_line(&self) -> Result<String> {
        if !self.value.is_finite() || !self.factor.is_finite() {
            return Err(Error::domain(format!("non-finite value in result row {self:?}")));
        }
        for field in [&self.experiment, &self.method] {
            if field.contains([',', '\n', '"']) {
                return Err(Error::domain(format!("CSV field {field:?} contains a separator")));
            }
        }
        Ok(format!(
            "{},{},{},{},{},{},{}",
            self.experiment,
            self.method,
            self.n_models,
            format_sig6(self.factor),
            self.seed,
            self.metric.as_str(),
            format_sig6(self.value)
        ))
    }
}

/// `printf("%g")`: six significant digits, trailing zeros trimmed,
/// scientific notation when the exponent is below -4 or at least 6.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("LowerExp output has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_owned()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn append_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut buf = String::new();
    if empty {
        buf.push_str(header);
        buf.push('\n');
    }
    for line in lines {
        buf.push_str(line);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Appends rows, writing the header first if the file is new or empty.
pub fn append_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let lines = rows.iter().map(ResultRow::to_csv_line).collect::<Result<Vec<_>>>()?;
    append_lines(path, RESULT_HEADER, &lines)
}

pub const BOUND_HEADER: &str = "check,params,bound,empirical,violation_rate,guaranteed_prob,holds,exact";

pub fn bound_csv_line(r: &BoundReport) -> Result<String> {
    if r.params.contains(',') || r.check.contains(',') {
        return Err(Error::domain(format!("bound report label contains a comma: {r:?}")));
    }
    Ok(format!(
        "{},{},{},{},{},{},{},{}",
        r.check,
        r.params,
        format_sig6(r.bound_value),
        format_sig6(r.empirical),
        format_sig6(r.violation_rate),
        format_sig6(r.guaranteed_prob),
        r.holds,
        r.exact
    ))
}

pub fn append_bound_csv(reports: &[BoundReport], path: &Path) -> Result<()> {
    let lines = reports.iter().map(bound_csv_line).collect::<Result<Vec<_>>>()?;
    append_lines(path, BOUND_HEADER, &lines)
}

pub const TRAIN_LOG_HEADER: &str = "model,epoch,train_loss,val_accuracy";

/// One row per `(model, epoch)`, models in the order given.
pub fn append_train_logs(logs: &[(usize, &TrainLog)], path: &Path) -> Result<()> {
    let mut lines = Vec::new();
    for (model, log) in logs {
        for (epoch, (loss, acc)) in log.train_loss.iter().zip(&log.val_accuracy).enumerate() {
            let mut line = String::new();
            write!(line, "{model},{epoch},{},{}", format_sig6(*loss), format_sig6(*acc)).expect("string write");
            lines.push(line);
        }
    }
    append_lines(path, TRAIN_LOG_HEADER, &lines)
}
