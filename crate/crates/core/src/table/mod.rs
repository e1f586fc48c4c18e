//! Tabular input: one row per granular cell or aggregate.
//!
//! Each row names a value for every dimension. A dimension set to its
//! sentinel means "summed over this dimension". The weight column decides the
//! role of a row: `0` marks a missing cell, `inf` a hard constraint, and any
//! other positive weight an observation.

mod build;

use std::collections::{HashMap, HashSet};
use std::io;

use thiserror::Error;

pub use build::{build_problem, Bounds, LossConfig};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row {row}: cell {cell:?} appears more than once (first at row {first})")]
    DuplicateCell { row: usize, first: usize, cell: Vec<String> },
    #[error("row {row}: bad weight `{raw}`")]
    BadWeight { row: usize, raw: String },
    #[error("row {row}: bad value `{raw}` in column `{column}`")]
    BadValue { row: usize, column: String, raw: String },
    #[error("row {row}: constraint has no value")]
    ConstraintWithoutValue { row: usize },
    #[error("row {row}: aggregate observation has no value")]
    AggregateWithoutValue { row: usize },
    #[error("row {row}: aggregate rows cannot have weight 0")]
    ZeroWeightAggregate { row: usize },
    #[error("row {row}: observation has a positive weight but no value")]
    ObservationWithoutValue { row: usize },
    #[error("row {row}: expected {expected} fields, got {got}")]
    RaggedRow { row: usize, expected: usize, got: usize },
    #[error("dimension `{dim}`: {reason}")]
    BadDimension { dim: String, reason: String },
    #[error("row {row}: level `{level}` is not declared for dimension `{dim}`")]
    UnknownLevel { row: usize, dim: String, level: String },
    #[error("cell {0:?} has no row; every combination of levels must be observed or marked missing")]
    UncoveredCell(Vec<String>),
    #[error("no granular cells")]
    EmptyProblem,
    #[error("invalid bounds: {0}")]
    BoundsInvalid(String),
    #[error(transparent)]
    Problem(#[from] crate::problem::ProblemError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Declaration of one dimension before parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimDecl {
    pub name: String,
    pub sentinel: String,
    /// Explicit level order; inferred from the data when `None`.
    pub levels: Option<Vec<String>>,
}

impl DimDecl {
    pub fn new(name: impl Into<String>) -> Self {
        DimDecl { name: name.into(), sentinel: "0".into(), levels: None }
    }

    pub fn sentinel(mut self, sentinel: impl Into<String>) -> Self {
        self.sentinel = sentinel.into();
        self
    }

    pub fn levels<S: Into<String>>(mut self, levels: impl IntoIterator<Item = S>) -> Self {
        self.levels = Some(levels.into_iter().map(Into::into).collect());
        self
    }
}

/// A parsed dimension with its ordered levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimSpec {
    pub name: String,
    pub aggregate_sentinel: String,
    pub levels: Vec<String>,
}

impl DimSpec {
    pub fn level_index(&self, v: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == v)
    }
}

/// Column names used when reading and writing a table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub dims: Vec<DimDecl>,
    pub value_col: String,
    pub weight_col: String,
    pub lower_col: Option<String>,
    pub upper_col: Option<String>,
}

impl Schema {
    pub fn new(dims: Vec<DimDecl>) -> Self {
        Schema { dims, value_col: "value".into(), weight_col: "weights".into(), lower_col: None, upper_col: None }
    }

    pub fn value_col(mut self, c: impl Into<String>) -> Self {
        self.value_col = c.into();
        self
    }

    pub fn weight_col(mut self, c: impl Into<String>) -> Self {
        self.weight_col = c.into();
        self
    }

    pub fn bound_cols(mut self, lower: impl Into<String>, upper: impl Into<String>) -> Self {
        self.lower_col = Some(lower.into());
        self.upper_col = Some(upper.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowKind {
    Observed,
    Missing,
    Constraint,
    AggregateObservation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RakingRow {
    pub dim_values: Vec<String>,
    pub value: Option<f64>,
    pub weight: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RakingData {
    pub dims: Vec<DimSpec>,
    pub rows: Vec<RakingRow>,
    pub value_col: String,
    pub weight_col: String,
    pub lower_col: Option<String>,
    pub upper_col: Option<String>,
    /// Non-fatal remarks produced while parsing.
    pub warnings: Vec<String>,
}

impl RakingData {
    pub fn is_aggregate(&self, row: &RakingRow) -> bool {
        row.dim_values.iter().zip(&self.dims).any(|(v, d)| *v == d.aggregate_sentinel)
    }

    pub fn kind(&self, row: &RakingRow) -> RowKind {
        if self.is_aggregate(row) {
            if row.weight.is_infinite() {
                RowKind::Constraint
            } else {
                RowKind::AggregateObservation
            }
        } else if row.weight == 0.0 {
            RowKind::Missing
        } else {
            RowKind::Observed
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.levels.len()).collect()
    }

    pub fn n_cells(&self) -> usize {
        self.dims.iter().map(|d| d.levels.len()).product()
    }

    /// Position of a granular row in the cell numbering (last dimension
    /// fastest). `None` for aggregate rows.
    pub fn cell_index(&self, row: &RakingRow) -> Option<usize> {
        let mut idx = 0;
        for (v, d) in row.dim_values.iter().zip(&self.dims) {
            idx = idx * d.levels.len() + d.level_index(v)?;
        }
        Some(idx)
    }

    /// Cells summed by an aggregate row, in increasing order.
    pub fn members(&self, row: &RakingRow) -> Vec<usize> {
        let mut out = vec![0usize];
        for (v, d) in row.dim_values.iter().zip(&self.dims) {
            let m = d.levels.len();
            let choices: Vec<usize> = match d.level_index(v) {
                Some(l) => vec![l],
                None => (0..m).collect(),
            };
            out = out.iter().flat_map(|&base| choices.iter().map(move |&c| base * m + c)).collect();
        }
        out
    }

    /// Labels of a cell index, inverse of [`RakingData::cell_index`].
    pub fn cell_labels(&self, mut idx: usize) -> Vec<String> {
        let mut out = vec![String::new(); self.dims.len()];
        for (k, d) in self.dims.iter().enumerate().rev() {
            let m = d.levels.len();
            out[k] = d.levels[idx % m].clone();
            idx /= m;
        }
        out
    }

    /// Header and rows in the input format, suitable for re-parsing.
    pub fn to_records(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header: Vec<String> = self.dims.iter().map(|d| d.name.clone()).collect();
        header.push(self.value_col.clone());
        header.push(self.weight_col.clone());
        let bounds = self.lower_col.is_some() && self.upper_col.is_some();
        if bounds {
            header.push(self.lower_col.clone().unwrap_or_default());
            header.push(self.upper_col.clone().unwrap_or_default());
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut rec = r.dim_values.clone();
                rec.push(fmt_opt(r.value));
                rec.push(fmt_num(r.weight));
                if bounds {
                    rec.push(fmt_opt(r.lower));
                    rec.push(fmt_opt(r.upper));
                }
                rec
            })
            .collect();
        (header, rows)
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), TableError> {
        let (header, rows) = self.to_records();
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&header)?;
        for r in rows {
            wr.write_record(&r)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// The schema that reproduces this table when re-parsed.
    pub fn schema(&self) -> Schema {
        Schema {
            dims: self
                .dims
                .iter()
                .map(|d| DimDecl {
                    name: d.name.clone(),
                    sentinel: d.aggregate_sentinel.clone(),
                    levels: Some(d.levels.clone()),
                })
                .collect(),
            value_col: self.value_col.clone(),
            weight_col: self.weight_col.clone(),
            lower_col: self.lower_col.clone(),
            upper_col: self.upper_col.clone(),
        }
    }
}

/// Shortest string that parses back to the same number.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_else(|| "NaN".into())
}

fn parse_value(raw: &str) -> Result<Option<f64>, ()> {
    let t = raw.trim();
    if t.is_empty() {
        return Ok(None);
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_nan() => Ok(None),
        Ok(v) => Ok(Some(v)),
        Err(_) => Err(()),
    }
}

/// Parse header plus records.
pub fn parse_table(header: &[String], records: &[Vec<String>], schema: &Schema) -> Result<RakingData, TableError> {
    let col = |name: &str| {
        header.iter().position(|h| h.trim() == name).ok_or_else(|| TableError::UnknownColumn(name.to_string()))
    };
    let dim_cols: Vec<usize> = schema.dims.iter().map(|d| col(&d.name)).collect::<Result<_, _>>()?;
    let value_col = col(&schema.value_col)?;
    let weight_col = col(&schema.weight_col)?;
    let lower_col = schema.lower_col.as_deref().map(col).transpose()?;
    let upper_col = schema.upper_col.as_deref().map(col).transpose()?;

    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(records.len());
    let mut seen: HashMap<Vec<String>, usize> = HashMap::new();
    for (r, rec) in records.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(TableError::RaggedRow { row: r, expected: header.len(), got: rec.len() });
        }
        let dim_values: Vec<String> = dim_cols.iter().map(|&c| rec[c].trim().to_string()).collect();
        if let Some(&first) = seen.get(&dim_values) {
            return Err(TableError::DuplicateCell { row: r, first, cell: dim_values });
        }
        seen.insert(dim_values.clone(), r);
        let raw_w = rec[weight_col].trim();
        let weight = match raw_w.parse::<f64>() {
            Ok(w) if w >= 0.0 && !w.is_nan() => w,
            _ => return Err(TableError::BadWeight { row: r, raw: raw_w.to_string() }),
        };
        let num = |c: usize, name: &str| {
            parse_value(&rec[c]).map_err(|_| TableError::BadValue {
                row: r,
                column: name.to_string(),
                raw: rec[c].clone(),
            })
        };
        let mut value = num(value_col, &schema.value_col)?;
        let lower = lower_col.map(|c| num(c, schema.lower_col.as_deref().unwrap_or(""))).transpose()?.flatten();
        let upper = upper_col.map(|c| num(c, schema.upper_col.as_deref().unwrap_or(""))).transpose()?.flatten();
        let aggregate = dim_values.iter().zip(&schema.dims).any(|(v, d)| *v == d.sentinel);
        if aggregate {
            if weight == 0.0 {
                return Err(TableError::ZeroWeightAggregate { row: r });
            }
            if value.is_none() {
                return Err(if weight.is_infinite() {
                    TableError::ConstraintWithoutValue { row: r }
                } else {
                    TableError::AggregateWithoutValue { row: r }
                });
            }
        } else if weight == 0.0 {
            if value.is_some() {
                warnings.push(format!("row {r}: weight 0 marks a missing cell; value ignored"));
                value = None;
            }
        } else if value.is_none() {
            return Err(if weight.is_infinite() {
                TableError::ConstraintWithoutValue { row: r }
            } else {
                TableError::ObservationWithoutValue { row: r }
            });
        }
        rows.push(RakingRow { dim_values, value, weight, lower, upper });
    }

    let mut dims = Vec::with_capacity(schema.dims.len());
    for (k, decl) in schema.dims.iter().enumerate() {
        let levels = match &decl.levels {
            Some(l) => {
                let mut set = HashSet::new();
                for v in l {
                    if *v == decl.sentinel {
                        return Err(bad_dim(decl, "the sentinel cannot be a level"));
                    }
                    if !set.insert(v) {
                        return Err(bad_dim(decl, &format!("duplicate level `{v}`")));
                    }
                }
                l.clone()
            }
            None => infer_levels(rows.iter().map(|r| r.dim_values[k].as_str()), &decl.sentinel),
        };
        if levels.is_empty() {
            return Err(bad_dim(decl, "no levels"));
        }
        for (r, row) in rows.iter().enumerate() {
            let v = &row.dim_values[k];
            if *v != decl.sentinel && !levels.contains(v) {
                return Err(TableError::UnknownLevel { row: r, dim: decl.name.clone(), level: v.clone() });
            }
        }
        dims.push(DimSpec { name: decl.name.clone(), aggregate_sentinel: decl.sentinel.clone(), levels });
    }

    let data = RakingData {
        dims,
        rows,
        value_col: schema.value_col.clone(),
        weight_col: schema.weight_col.clone(),
        lower_col: schema.lower_col.clone(),
        upper_col: schema.upper_col.clone(),
        warnings,
    };
    let mut covered = vec![false; data.n_cells()];
    for row in &data.rows {
        if let Some(i) = data.cell_index(row) {
            covered[i] = true;
        }
    }
    if covered.is_empty() {
        return Err(TableError::EmptyProblem);
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(TableError::UncoveredCell(data.cell_labels(i)));
    }
    Ok(data)
}

fn bad_dim(decl: &DimDecl, reason: &str) -> TableError {
    TableError::BadDimension { dim: decl.name.clone(), reason: reason.to_string() }
}

/// Distinct non-sentinel values, numerically ordered when they are all
/// numbers and lexicographically otherwise.
fn infer_levels<'a>(values: impl Iterator<Item = &'a str>, sentinel: &str) -> Vec<String> {
    let mut set: Vec<String> = values.filter(|v| *v != sentinel).map(str::to_string).collect();
    set.sort();
    set.dedup();
    let nums: Option<Vec<f64>> = set.iter().map(|v| v.parse::<f64>().ok()).collect();
    if let Some(nums) = nums {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(set).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        return pairs.into_iter().map(|(_, s)| s).collect();
    }
    set
}

/// Read a CSV with a header row.
pub fn read_csv<R: io::Read>(reader: R, schema: &Schema) -> Result<RakingData, TableError> {
    let (header, records) = read_records(reader)?;
    parse_table(&header, &records, schema)
}

/// Raw header and records of a CSV file.
pub fn read_records<R: io::Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<String>>), TableError> {
    let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let mut records = Vec::new();
    for rec in rd.records() {
        records.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, records))
}
