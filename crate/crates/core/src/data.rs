//! Schema-driven CSV ingestion, normalization to `[0, 1]`, masks and splits.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnKind {
    Continuous,
    /// Labels in lexicographic order; a cell's value is its label index.
    Categorical { labels: Vec<String> },
    /// Continuous variable recorded on a grid of raw values (sorted).
    DiscreteContinuous { grid: Vec<f64> },
    /// Ordered levels; a cell's value is its level index.
    Ordinal { levels: Vec<String> },
}

impl ColumnKind {
    pub fn name(&self) -> &'static str {
        match self {
            ColumnKind::Continuous => "continuous",
            ColumnKind::Categorical { .. } => "categorical",
            ColumnKind::DiscreteContinuous { .. } => "discrete_continuous",
            ColumnKind::Ordinal { .. } => "ordinal",
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ColumnKind::Categorical { .. } | ColumnKind::Ordinal { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub min: f64,
    pub max: f64,
    pub is_target: bool,
}

impl ColumnSpec {
    pub fn continuous(name: &str, min: f64, max: f64) -> Self {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Continuous,
            min,
            max,
            is_target: false,
        }
    }

    pub fn categorical(name: &str, labels: &[&str]) -> Self {
        let mut labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        labels.sort();
        labels.dedup();
        ColumnSpec {
            name: name.into(),
            max: (labels.len().max(1) - 1) as f64,
            kind: ColumnKind::Categorical { labels },
            min: 0.0,
            is_target: false,
        }
    }

    pub fn ordinal(name: &str, levels: &[&str]) -> Self {
        let levels: Vec<String> = levels.iter().map(|s| s.to_string()).collect();
        ColumnSpec {
            name: name.into(),
            max: (levels.len().max(1) - 1) as f64,
            kind: ColumnKind::Ordinal { levels },
            min: 0.0,
            is_target: false,
        }
    }

    pub fn discrete_continuous(name: &str, grid: &[f64]) -> Self {
        let mut grid = grid.to_vec();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        ColumnSpec {
            name: name.into(),
            min: grid.first().copied().unwrap_or(0.0),
            max: grid.last().copied().unwrap_or(1.0),
            kind: ColumnKind::DiscreteContinuous { grid },
            is_target: false,
        }
    }

    pub fn target(mut self) -> Self {
        self.is_target = true;
        self
    }

    /// Number of classes for categorical and ordinal columns, 1 otherwise.
    pub fn cardinality(&self) -> usize {
        match &self.kind {
            ColumnKind::Categorical { labels } => labels.len(),
            ColumnKind::Ordinal { levels } => levels.len(),
            _ => 1,
        }
    }

    /// Width of the one-hot input representation.
    pub fn input_width(&self) -> usize {
        self.cardinality()
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Schema(format!("column '{}': {m}", self.name)));
        match &self.kind {
            ColumnKind::Continuous | ColumnKind::DiscreteContinuous { .. } => {
                if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
                    return err(format!("needs min < max, got [{}, {}]", self.min, self.max));
                }
                if let ColumnKind::DiscreteContinuous { grid } = &self.kind {
                    if grid.is_empty() || grid.iter().any(|g| !g.is_finite()) {
                        return err("grid must be non-empty and finite".into());
                    }
                    if grid.windows(2).any(|w| w[0] >= w[1]) {
                        return err("grid must be strictly increasing".into());
                    }
                }
            }
            ColumnKind::Categorical { labels } => {
                if labels.len() < 2 {
                    return err("needs at least 2 classes".into());
                }
                if labels.windows(2).any(|w| w[0] >= w[1]) {
                    return err("labels must be distinct".into());
                }
            }
            ColumnKind::Ordinal { levels } => {
                if levels.len() < 2 {
                    return err("needs at least 2 levels".into());
                }
                let distinct: BTreeSet<_> = levels.iter().collect();
                if distinct.len() != levels.len() {
                    return err("levels must be distinct".into());
                }
            }
        }
        Ok(())
    }

    /// Normalized value for a raw cell string.
    pub fn normalize_str(&self, raw: &str) -> std::result::Result<f64, String> {
        match &self.kind {
            ColumnKind::Continuous | ColumnKind::DiscreteContinuous { .. } => {
                let x: f64 = raw
                    .trim()
                    .parse()
                    .map_err(|_| format!("cannot parse '{raw}' as a number"))?;
                self.normalize(x)
            }
            ColumnKind::Categorical { labels } => labels
                .binary_search_by(|l| l.as_str().cmp(raw))
                .map(|i| i as f64)
                .map_err(|_| format!("unknown category label '{raw}'")),
            ColumnKind::Ordinal { levels } => levels
                .iter()
                .position(|l| l == raw)
                .map(|i| i as f64)
                .ok_or_else(|| format!("unknown ordinal level '{raw}'")),
        }
    }

    /// Normalized value for a raw number (class index for discrete kinds).
    pub fn normalize(&self, x: f64) -> std::result::Result<f64, String> {
        if !x.is_finite() {
            return Err(format!("non-finite value {x}"));
        }
        match &self.kind {
            ColumnKind::Continuous | ColumnKind::DiscreteContinuous { .. } => {
                if x < self.min || x > self.max {
                    return Err(format!("{x} outside [{}, {}]", self.min, self.max));
                }
                Ok((x - self.min) / (self.max - self.min))
            }
            _ => {
                let k = self.cardinality();
                if x.fract() != 0.0 || x < 0.0 || x >= k as f64 {
                    return Err(format!("class index {x} not in 0..{k}"));
                }
                Ok(x)
            }
        }
    }

    /// Raw-unit value for a normalized one. Out-of-range values are clamped;
    /// discrete-continuous values snap to the nearest grid point.
    pub fn denormalize(&self, v: f64) -> f64 {
        match &self.kind {
            ColumnKind::Continuous | ColumnKind::DiscreteContinuous { .. } => {
                let c = if (0.0..=1.0).contains(&v) {
                    v
                } else {
                    log::warn!("column '{}': normalized value {v} clamped to [0, 1]", self.name);
                    v.clamp(0.0, 1.0)
                };
                let raw = self.min + c * (self.max - self.min);
                match &self.kind {
                    ColumnKind::DiscreteContinuous { grid } => nearest(grid, raw),
                    _ => raw,
                }
            }
            _ => v.round().clamp(0.0, (self.cardinality() - 1) as f64),
        }
    }

    /// Snaps a normalized discrete-continuous value to the nearest grid point;
    /// other kinds pass through.
    pub fn snap(&self, v: f64) -> f64 {
        match &self.kind {
            ColumnKind::DiscreteContinuous { grid } => {
                let raw = nearest(grid, self.min + v * (self.max - self.min));
                (raw - self.min) / (self.max - self.min)
            }
            _ => v,
        }
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        match &self.kind {
            ColumnKind::Categorical { labels } => labels.get(index).map(String::as_str),
            ColumnKind::Ordinal { levels } => levels.get(index).map(String::as_str),
            _ => None,
        }
    }

    /// Raw CSV text for a normalized cell that re-normalizes to exactly `v`.
    pub fn format_raw(&self, v: f64) -> String {
        match &self.kind {
            ColumnKind::Categorical { .. } | ColumnKind::Ordinal { .. } => {
                self.label(self.denormalize(v) as usize).unwrap_or_default().to_string()
            }
            _ => {
                let w = self.max - self.min;
                let guess = self.min + v * w;
                let mut cands = vec![guess];
                let (mut up, mut down) = (guess, guess);
                for _ in 0..16 {
                    up = next_up(up);
                    down = next_down(down);
                    cands.push(up);
                    cands.push(down);
                }
                let hit = cands
                    .into_iter()
                    .find(|&x| x >= self.min && x <= self.max && (x - self.min) / w == v);
                format!("{}", hit.unwrap_or(guess))
            }
        }
    }
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let b = x.to_bits();
    f64::from_bits(if x > 0.0 { b + 1 } else { b - 1 })
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

fn nearest(grid: &[f64], x: f64) -> f64 {
    grid.iter()
        .copied()
        .min_by(|a, b| (a - x).abs().total_cmp(&(b - x).abs()))
        .unwrap_or(x)
}

/// One entry of the schema file. Unspecified bounds, labels, levels and grids
/// are inferred from the data on load.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnDecl {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default)]
    pub is_target: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaDoc {
    pub schema_version: u32,
    #[serde(default)]
    pub high_noise: bool,
    pub columns: Vec<ColumnDecl>,
}

impl SchemaDoc {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SchemaDoc = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        Ok(doc)
    }

    /// Resolves the declaration, inferring whatever is missing from `cells`
    /// (row-major raw strings, `None` = missing).
    pub fn resolve(&self, cells: &[Vec<Option<String>>]) -> Result<Schema> {
        let mut columns = Vec::with_capacity(self.columns.len());
        for (d, decl) in self.columns.iter().enumerate() {
            let values: Vec<&str> = cells.iter().filter_map(|r| r.get(d)?.as_deref()).collect();
            columns.push(resolve_column(decl, &values)?);
        }
        Schema::new(columns, self.high_noise)
    }
}

fn str_list(params: &Value, key: &str, name: &str) -> Result<Option<Vec<String>>> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                _ => Err(Error::Schema(format!("column '{name}': bad entry in '{key}'"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Some(_) => Err(Error::Schema(format!("column '{name}': '{key}' must be a list"))),
    }
}

fn parse_numbers(values: &[&str], name: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.trim().parse::<f64>().map_err(|_| Error::Cell {
                row: i,
                column: name.into(),
                reason: format!("cannot parse '{s}' as a number"),
            })
        })
        .collect()
}

fn resolve_column(decl: &ColumnDecl, values: &[&str]) -> Result<ColumnSpec> {
    let name = decl.name.as_str();
    let distinct = || -> Vec<String> {
        let set: BTreeSet<&str> = values.iter().copied().collect();
        set.into_iter().map(str::to_string).collect()
    };
    let bounds = |nums: &[f64]| -> Result<(f64, f64)> {
        let lo = decl.min.or_else(|| nums.iter().copied().reduce(f64::min));
        let hi = decl.max.or_else(|| nums.iter().copied().reduce(f64::max));
        match (lo, hi) {
            (Some(lo), Some(hi)) => Ok((lo, hi)),
            _ => Err(Error::NoObservedCells(name.into())),
        }
    };
    let spec = match decl.kind.as_str() {
        "continuous" => {
            let nums = parse_numbers(values, name)?;
            let (min, max) = bounds(&nums)?;
            ColumnSpec {
                name: name.into(),
                kind: ColumnKind::Continuous,
                min,
                max,
                is_target: decl.is_target,
            }
        }
        "discrete_continuous" => {
            let grid = match decl.params.get("grid") {
                Some(Value::Array(items)) => items
                    .iter()
                    .map(|v| {
                        v.as_f64()
                            .ok_or_else(|| Error::Schema(format!("column '{name}': grid must be numeric")))
                    })
                    .collect::<Result<Vec<_>>>()?,
                _ => parse_numbers(values, name)?,
            };
            let mut grid = grid;
            grid.sort_by(f64::total_cmp);
            grid.dedup();
            let (min, max) = bounds(&grid)?;
            ColumnSpec {
                name: name.into(),
                kind: ColumnKind::DiscreteContinuous { grid },
                min,
                max,
                is_target: decl.is_target,
            }
        }
        "categorical" => {
            let mut labels = str_list(&decl.params, "labels", name)?.unwrap_or_else(distinct);
            labels.sort();
            labels.dedup();
            ColumnSpec {
                name: name.into(),
                min: 0.0,
                max: (labels.len().max(1) - 1) as f64,
                kind: ColumnKind::Categorical { labels },
                is_target: decl.is_target,
            }
        }
        "ordinal" => {
            let levels = match str_list(&decl.params, "levels", name)? {
                Some(l) => l,
                None => {
                    let mut l = distinct();
                    if l.iter().all(|s| s.trim().parse::<f64>().is_ok()) {
                        l.sort_by(|a, b| {
                            let (x, y): (f64, f64) = (a.trim().parse().unwrap(), b.trim().parse().unwrap());
                            x.total_cmp(&y)
                        });
                    }
                    l
                }
            };
            ColumnSpec {
                name: name.into(),
                min: 0.0,
                max: (levels.len().max(1) - 1) as f64,
                kind: ColumnKind::Ordinal { levels },
                is_target: decl.is_target,
            }
        }
        other => {
            return Err(Error::Schema(format!("column '{name}': unknown kind '{other}'")));
        }
    };
    Ok(spec)
}

/// Validated column list with exactly one target.
#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    /// Selects the wide Gaussian observation noise.
    pub high_noise: bool,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>, high_noise: bool) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Schema("no columns".into()));
        }
        let mut names = BTreeSet::new();
        for c in &columns {
            c.validate()?;
            if !names.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column '{}'", c.name)));
            }
        }
        let targets = columns.iter().filter(|c| c.is_target).count();
        if targets != 1 {
            return Err(Error::Schema(format!("expected exactly one target column, found {targets}")));
        }
        Ok(Schema { columns, high_noise })
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn target(&self) -> usize {
        self.columns.iter().position(|c| c.is_target).expect("validated schema has a target")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Fully specified declaration; resolving it needs no data.
    pub fn to_doc(&self) -> SchemaDoc {
        let columns = self
            .columns
            .iter()
            .map(|c| {
                let (params, bounds) = match &c.kind {
                    ColumnKind::Continuous => (Value::Null, true),
                    ColumnKind::DiscreteContinuous { grid } => (serde_json::json!({ "grid": grid }), true),
                    ColumnKind::Categorical { labels } => (serde_json::json!({ "labels": labels }), false),
                    ColumnKind::Ordinal { levels } => (serde_json::json!({ "levels": levels }), false),
                };
                ColumnDecl {
                    name: c.name.clone(),
                    kind: c.kind.name().into(),
                    params,
                    min: bounds.then_some(c.min),
                    max: bounds.then_some(c.max),
                    is_target: c.is_target,
                }
            })
            .collect();
        SchemaDoc {
            schema_version: SCHEMA_VERSION,
            high_noise: self.high_noise,
            columns,
        }
    }

    pub fn from_doc(doc: &SchemaDoc) -> Result<Self> {
        doc.resolve(&[])
    }
}

impl Serialize for Schema {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = SchemaDoc::deserialize(d)?;
        Schema::from_doc(&doc).map_err(serde::de::Error::custom)
    }
}

/// Normalized cells with an observation mask, both `N×D` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    rows: usize,
    cells: Vec<f64>,
    mask: Vec<bool>,
}

impl Dataset {
    pub fn new(schema: Schema, rows: usize, cells: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let d = schema.width();
        if cells.len() != rows * d || mask.len() != rows * d {
            return Err(Error::InvalidArgument(format!(
                "dataset of {rows}x{d} needs {} cells and mask entries, got {} and {}",
                rows * d,
                cells.len(),
                mask.len()
            )));
        }
        for r in 0..rows {
            for (c, spec) in schema.columns.iter().enumerate() {
                let i = r * d + c;
                if !mask[i] {
                    continue;
                }
                let v = cells[i];
                let ok = match spec.kind {
                    ColumnKind::Continuous | ColumnKind::DiscreteContinuous { .. } => (0.0..=1.0).contains(&v),
                    _ => v.fract() == 0.0 && v >= 0.0 && v < spec.cardinality() as f64,
                };
                if !ok {
                    return Err(Error::Cell {
                        row: r,
                        column: spec.name.clone(),
                        reason: format!("normalized value {v} out of range"),
                    });
                }
            }
        }
        Ok(Dataset { schema, rows, cells, mask })
    }

    /// Parses raw rows against a declaration, inferring missing schema details.
    pub fn from_raw(doc: &SchemaDoc, header: &[String], raw: Vec<Vec<Option<String>>>) -> Result<Self> {
        let names: Vec<&str> = doc.columns.iter().map(|c| c.name.as_str()).collect();
        if header.len() != names.len() || header.iter().zip(&names).any(|(h, n)| h.trim() != *n) {
            return Err(Error::Schema(format!(
                "CSV header {header:?} does not match schema columns {names:?}"
            )));
        }
        let schema = doc.resolve(&raw)?;
        let d = schema.width();
        let mut cells = vec![0.0; raw.len() * d];
        let mut mask = vec![false; raw.len() * d];
        for (r, row) in raw.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Cell {
                    row: r,
                    column: String::new(),
                    reason: format!("expected {d} fields, got {}", row.len()),
                });
            }
            for (c, cell) in row.iter().enumerate() {
                if let Some(s) = cell {
                    let spec = &schema.columns[c];
                    cells[r * d + c] = spec.normalize_str(s).map_err(|reason| Error::Cell {
                        row: r,
                        column: spec.name.clone(),
                        reason,
                    })?;
                    mask[r * d + c] = true;
                }
            }
        }
        Dataset::new(schema, raw.len(), cells, mask)
    }

    pub fn load_csv(path: &Path, doc: &SchemaDoc) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, doc)
    }

    pub fn read_csv<R: std::io::Read>(reader: R, doc: &SchemaDoc) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut raw = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            raw.push(
                rec.iter()
                    .map(|s| if s.trim().is_empty() { None } else { Some(s.to_string()) })
                    .collect(),
            );
        }
        Self::from_raw(doc, &header, raw)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.schema.columns.iter().map(|c| c.name.as_str()))?;
        for r in 0..self.rows {
            let rec: Vec<String> = (0..self.width())
                .map(|c| {
                    if self.observed(r, c) {
                        self.schema.columns[c].format_raw(self.get(r, c))
                    } else {
                        String::new()
                    }
                })
                .collect();
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.schema.width()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.cells[r * self.width() + c]
    }

    pub fn observed(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.width() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.width();
        &self.cells[r * d..(r + 1) * d]
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        let d = self.width();
        &self.mask[r * d..(r + 1) * d]
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::InvalidArgument("mask shape differs from dataset".into()));
        }
        Ok(Dataset {
            schema: self.schema.clone(),
            rows: self.rows,
            cells: self.cells.clone(),
            mask,
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let d = self.width();
        let mut cells = Vec::with_capacity(rows.len() * d);
        let mut mask = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            cells.extend_from_slice(self.row(r));
            mask.extend_from_slice(self.row_mask(r));
        }
        Dataset {
            schema: self.schema.clone(),
            rows: rows.len(),
            cells,
            mask,
        }
    }

    /// Observed normalized values of one column.
    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows).filter(|&r| self.observed(r, c)).map(|r| self.get(r, c)).collect()
    }

    /// Disjoint train/test partition with `round(fraction * N)` training rows.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if self.rows < 10 {
            return Err(Error::InvalidArgument(format!("split needs at least 10 rows, got {}", self.rows)));
        }
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::InvalidArgument(format!("train fraction {train_fraction} not in [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..self.rows).collect();
        idx.shuffle(&mut rng::stream(seed, &[0x5917]));
        let n_train = (train_fraction * self.rows as f64).round() as usize;
        let mut train = idx[..n_train].to_vec();
        let mut test = idx[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.select_rows(&train), self.select_rows(&test)))
    }
}

/// Hides exactly `floor(n_observed / 2)` of the observed cells, chosen uniformly.
pub fn drop_half(mask: &[bool], seed: u64) -> Vec<bool> {
    let mut observed: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    observed.shuffle(&mut rng::stream(seed, &[0xd20f]));
    let mut out = mask.to_vec();
    for &i in &observed[..observed.len() / 2] {
        out[i] = false;
    }
    out
}

pub fn one_hot(value: usize, count: usize) -> Result<Vec<f64>> {
    if value >= count {
        return Err(Error::InvalidArgument(format!("class index {value} not in 0..{count}")));
    }
    let mut v = vec![0.0; count];
    v[value] = 1.0;
    Ok(v)
}

/// Per-epoch artificial missingness: the drop rate is drawn from
/// `U(0, MAX_DROP_RATE)` once per epoch, then each observed cell is hidden
/// with that probability.
pub const MAX_DROP_RATE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct MissingnessSampler {
    pub seed: u64,
    /// Forces the drop rate, bypassing the uniform draw.
    pub rate_override: Option<f64>,
}

impl MissingnessSampler {
    pub fn new(seed: u64) -> Self {
        MissingnessSampler { seed, rate_override: None }
    }

    pub fn with_rate(seed: u64, rate: f64) -> Self {
        MissingnessSampler {
            seed,
            rate_override: Some(rate),
        }
    }

    pub fn sample_epoch_mask(&self, base: &[bool], epoch: u64) -> Vec<bool> {
        let mut rng = rng::stream(self.seed, &[0x3a5c, epoch]);
        let drawn = rng.random::<f64>() * MAX_DROP_RATE;
        let rate = self.rate_override.unwrap_or(drawn);
        base.iter().map(|&b| b && rng.random::<f64>() >= rate).collect()
    }
}
