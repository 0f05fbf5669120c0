//! Columnar observations with sampling weights, and design assembly for
//! strata and shift terms.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("row {row}: negative weight {value}")]
    NegativeWeight { row: usize, value: f64 },
    #[error("row {row}, column '{column}': level '{value}' is not among the declared levels")]
    UndeclaredLevel { row: usize, column: String, value: String },
    #[error("all weights are zero")]
    ZeroWeights,
    #[error("column '{column}' has length {len}, expected {expected}")]
    Length { column: String, len: usize, expected: usize },
    #[error("column '{0}' is numeric where a categorical variable is required")]
    ExpectedCategorical(String),
    #[error("column '{0}' is categorical where a numeric variable is required")]
    ExpectedNumeric(String),
    #[error("variable '{0}' is missing from the covariate profile")]
    MissingCovariate(String),
    #[error("variable '{column}': level '{level}' was not seen in training")]
    UnseenLevel { column: String, level: String },
    #[error("no rows left after dropping missing values")]
    Empty,
    #[error("duplicate column '{0}'")]
    Duplicate(String),
}

/// Categorical column: dense codes into an ordered level list. The first
/// level is the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    levels: Vec<String>,
    codes: Vec<u32>,
}

impl CategoricalColumn {
    pub fn new(levels: Vec<String>, codes: Vec<u32>) -> Self {
        assert!(codes.iter().all(|c| (*c as usize) < levels.len()), "code out of range");
        Self { levels, codes }
    }

    /// Levels in first-appearance order.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut levels: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let codes = labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                *index.entry(l.to_string()).or_insert_with(|| {
                    levels.push(l.to_string());
                    (levels.len() - 1) as u32
                })
            })
            .collect();
        Self { levels, codes }
    }

    pub fn with_levels<S: AsRef<str>>(levels: Vec<String>, labels: &[S]) -> Result<Self, String> {
        let index: HashMap<&str, u32> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i as u32)).collect();
        let codes = labels
            .iter()
            .map(|l| index.get(l.as_ref()).copied().ok_or_else(|| l.as_ref().to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { levels, codes })
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn reference(&self) -> &str {
        &self.levels[0]
    }

    pub fn label(&self, row: usize) -> &str {
        &self.levels[self.codes[row] as usize]
    }

    pub fn code_of(&self, level: &str) -> Option<u32> {
        self.levels.iter().position(|l| l == level).map(|i| i as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(CategoricalColumn),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(c) => c.codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, row: usize) -> Value {
        match self {
            Column::Numeric(v) => Value::Num(v[row]),
            Column::Categorical(c) => Value::Level(c.label(row).to_string()),
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
            Column::Categorical(c) => Column::Categorical(CategoricalColumn {
                levels: c.levels.clone(),
                codes: rows.iter().map(|&i| c.codes[i]).collect(),
            }),
        }
    }
}

/// Single covariate value in a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Level(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) => write!(f, "{v}"),
            Value::Level(l) => f.write_str(l),
        }
    }
}

/// Named covariate values describing one individual.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    values: BTreeMap<String, Value>,
}

impl Profile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: Value) -> Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn num(self, name: impl Into<String>, v: f64) -> Self {
        self.with(name, Value::Num(v))
    }

    pub fn level(self, name: impl Into<String>, l: impl Into<String>) -> Self {
        self.with(name, Value::Level(l.into()))
    }

    pub fn set(&mut self, name: impl Into<String>, value: Value) {
        self.values.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.values.get(name)
    }

    pub fn numeric(&self, name: &str) -> Result<f64, DataError> {
        match self.values.get(name) {
            Some(Value::Num(v)) => Ok(*v),
            Some(Value::Level(l)) => l.parse().map_err(|_| DataError::ExpectedNumeric(name.to_string())),
            None => Err(DataError::MissingCovariate(name.to_string())),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<String, DataError> {
        match self.values.get(name) {
            Some(v) => Ok(v.to_string()),
            None => Err(DataError::MissingCovariate(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.values.iter()
    }
}

/// One numeric response, named covariates and non-negative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    response_name: String,
    response: Vec<f64>,
    names: Vec<String>,
    columns: Vec<Column>,
    weights: Vec<f64>,
    weight_name: Option<String>,
}

impl Dataset {
    /// Dataset with unit weights and no covariates.
    pub fn new(response_name: impl Into<String>, response: Vec<f64>) -> Self {
        let n = response.len();
        Self {
            response_name: response_name.into(),
            response,
            names: Vec::new(),
            columns: Vec::new(),
            weights: vec![1.0; n],
            weight_name: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, DataError> {
        self.set_weights(weights)?;
        Ok(self)
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<(), DataError> {
        check_len("weights", weights.len(), self.n())?;
        if let Some((row, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
            return Err(DataError::NegativeWeight { row, value });
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(DataError::ZeroWeights);
        }
        self.weights = weights;
        Ok(())
    }

    pub fn with_weight_name(mut self, name: impl Into<String>) -> Self {
        self.weight_name = Some(name.into());
        self
    }

    pub fn with_column(mut self, name: impl Into<String>, column: Column) -> Result<Self, DataError> {
        let name = name.into();
        check_len(&name, column.len(), self.n())?;
        if self.names.contains(&name) || name == self.response_name {
            return Err(DataError::Duplicate(name));
        }
        self.names.push(name);
        self.columns.push(column);
        Ok(self)
    }

    pub fn with_numeric(self, name: impl Into<String>, values: Vec<f64>) -> Result<Self, DataError> {
        self.with_column(name, Column::Numeric(values))
    }

    pub fn with_categorical<S: AsRef<str>>(self, name: impl Into<String>, labels: &[S]) -> Result<Self, DataError> {
        self.with_column(name, Column::Categorical(CategoricalColumn::from_labels(labels)))
    }

    pub fn with_categorical_levels<S: AsRef<str>>(
        self,
        name: impl Into<String>,
        levels: &[&str],
        labels: &[S],
    ) -> Result<Self, DataError> {
        let name = name.into();
        let levels = levels.iter().map(|s| s.to_string()).collect();
        let col = CategoricalColumn::with_levels(levels, labels).map_err(|value| DataError::UndeclaredLevel {
            row: 0,
            column: name.clone(),
            value,
        })?;
        self.with_column(name, Column::Categorical(col))
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_name(&self) -> Option<&str> {
        self.weight_name.as_deref()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&Column, DataError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64], DataError> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Categorical(_) => Err(DataError::ExpectedNumeric(name.to_string())),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<&CategoricalColumn, DataError> {
        match self.column(name)? {
            Column::Categorical(c) => Ok(c),
            Column::Numeric(_) => Err(DataError::ExpectedCategorical(name.to_string())),
        }
    }

    /// Covariate values of one row.
    pub fn profile(&self, row: usize) -> Profile {
        let mut p = Profile::new();
        for (name, col) in self.names.iter().zip(&self.columns) {
            p.set(name.clone(), col.value(row));
        }
        p
    }

    /// Rows `rows` in the given order; level lists are kept.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            response_name: self.response_name.clone(),
            response: rows.iter().map(|&i| self.response[i]).collect(),
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            weights: rows.iter().map(|&i| self.weights[i]).collect(),
            weight_name: self.weight_name.clone(),
        }
    }

    /// Copy with column `name` reordered by `perm` (`new[i] = old[perm[i]]`).
    pub fn with_permuted_column(&self, name: &str, perm: &[usize]) -> Result<Dataset, DataError> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))?;
        let mut out = self.clone();
        out.columns[idx] = self.columns[idx].select(perm);
        Ok(out)
    }

    /// Drops, within each group of `by` (or overall), rows whose response
    /// lies below the `lower` or above the `upper` empirical quantile.
    pub fn trim_by_quantile(&self, lower: f64, upper: f64, by: Option<&str>) -> Result<Dataset, DataError> {
        let groups: Vec<u32> = match by {
            Some(v) => self.categorical(v)?.codes().to_vec(),
            None => vec![0; self.n()],
        };
        let mut keep = vec![true; self.n()];
        let n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
        for g in 0..n_groups {
            let mut ys: Vec<f64> = (0..self.n()).filter(|&i| groups[i] == g).map(|i| self.response[i]).collect();
            if ys.is_empty() {
                continue;
            }
            ys.sort_by(f64::total_cmp);
            let q = |p: f64| {
                let pos = p * (ys.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                ys[lo] + (pos - lo as f64) * (ys[hi] - ys[lo])
            };
            let (ql, qu) = (q(lower), q(upper));
            for i in 0..self.n() {
                if groups[i] == g && (self.response[i] < ql || self.response[i] > qu) {
                    keep[i] = false;
                }
            }
        }
        let rows: Vec<usize> = (0..self.n()).filter(|&i| keep[i]).collect();
        Ok(self.subset(&rows))
    }
}

fn check_len(name: &str, len: usize, expected: usize) -> Result<(), DataError> {
    if len != expected {
        return Err(DataError::Length {
            column: name.to_string(),
            len,
            expected,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// How to read a CSV file into a [`Dataset`].
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub response: String,
    pub weight: Option<String>,
    /// Type hints; unlisted columns are numeric when every entry parses.
    pub kinds: BTreeMap<String, ColumnKind>,
    /// Pinned level orders for categorical columns.
    pub levels: BTreeMap<String, Vec<String>>,
    /// Restrict to these covariates; all other columns are ignored.
    pub columns: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn new(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            ..Default::default()
        }
    }
}

fn is_missing(s: &str) -> bool {
    matches!(s, "" | "NA" | "na" | "NaN" | "nan" | ".")
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    };
    let response_idx = find(&schema.response)?;
    let weight_idx = schema.weight.as_deref().map(find).transpose()?;
    for name in schema.kinds.keys().chain(schema.levels.keys()) {
        find(name)?;
    }
    let covariates: Vec<(String, usize)> = match &schema.columns {
        Some(cols) => cols.iter().map(|c| Ok((c.clone(), find(c)?))).collect::<Result<_, DataError>>()?,
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != response_idx && Some(*i) != weight_idx)
            .map(|(i, h)| (h.clone(), i))
            .collect(),
    };

    let mut raw: Vec<csv::StringRecord> = Vec::new();
    for rec in rdr.records() {
        raw.push(rec?);
    }
    // Row numbers in errors are 1-based data rows (header excluded).
    let mut dropped = 0usize;
    let mut rows: Vec<usize> = Vec::with_capacity(raw.len());
    for (i, rec) in raw.iter().enumerate() {
        let used = std::iter::once(response_idx)
            .chain(weight_idx)
            .chain(covariates.iter().map(|(_, c)| *c));
        if used.into_iter().any(|c| is_missing(rec.get(c).unwrap_or(""))) {
            dropped += 1;
        } else {
            rows.push(i);
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing values");
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }

    let parse_num = |row: usize, col: usize, name: &str| -> Result<f64, DataError> {
        let s = raw[row].get(col).unwrap_or("");
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| DataError::NotNumeric {
                row: row + 1,
                column: name.to_string(),
                value: s.to_string(),
            })
    };

    let response = rows
        .iter()
        .map(|&r| parse_num(r, response_idx, &schema.response))
        .collect::<Result<Vec<_>, _>>()?;
    let mut data = Dataset::new(schema.response.clone(), response);
    if let (Some(widx), Some(wname)) = (weight_idx, schema.weight.as_deref()) {
        let w = rows.iter().map(|&r| parse_num(r, widx, wname)).collect::<Result<Vec<_>, _>>()?;
        if let Some((pos, &value)) = w.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(DataError::NegativeWeight { row: rows[pos] + 1, value });
        }
        data = data.with_weights(w)?.with_weight_name(wname);
    }

    for (name, idx) in &covariates {
        let kind = match schema.kinds.get(name) {
            Some(k) => *k,
            None if schema.levels.contains_key(name) => ColumnKind::Categorical,
            None => {
                let numeric = rows.iter().all(|&r| raw[r].get(*idx).unwrap_or("").parse::<f64>().is_ok());
                if numeric {
                    ColumnKind::Numeric
                } else {
                    ColumnKind::Categorical
                }
            }
        };
        let column = match kind {
            ColumnKind::Numeric => Column::Numeric(
                rows.iter().map(|&r| parse_num(r, *idx, name)).collect::<Result<Vec<_>, _>>()?,
            ),
            ColumnKind::Categorical => {
                let labels: Vec<&str> = rows.iter().map(|&r| raw[r].get(*idx).unwrap_or("")).collect();
                match schema.levels.get(name) {
                    Some(levels) => {
                        let col = CategoricalColumn::with_levels(levels.clone(), &labels).map_err(|value| {
                            let pos = labels.iter().position(|l| *l == value).unwrap_or(0);
                            DataError::UndeclaredLevel {
                                row: rows[pos] + 1,
                                column: name.clone(),
                                value,
                            }
                        })?;
                        Column::Categorical(col)
                    }
                    None => Column::Categorical(CategoricalColumn::from_labels(&labels)),
                }
            }
        };
        data = data.with_column(name.clone(), column)?;
    }
    Ok(data)
}

pub fn write_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    write_csv_to(d, file)
}

/// Writes the response, covariates and (when named) the weight column.
/// Numbers use the shortest representation that parses back exactly.
pub fn write_csv_to<W: Write>(d: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![d.response_name.clone()];
    header.extend(d.names.iter().cloned());
    if let Some(wn) = &d.weight_name {
        header.push(wn.clone());
    }
    w.write_record(&header)?;
    for i in 0..d.n() {
        let mut rec = vec![format!("{}", d.response[i])];
        for c in &d.columns {
            rec.push(c.value(i).to_string());
        }
        if d.weight_name.is_some() {
            rec.push(format!("{}", d.weights[i]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Assignment of rows to the occupied cells of a categorical cross-classification.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumIndex {
    vars: Vec<String>,
    cells: Vec<Vec<String>>,
    cell_of_row: Vec<usize>,
}

impl StratumIndex {
    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    /// Level labels of each cell, in `vars` order.
    pub fn cells(&self) -> &[Vec<String>] {
        &self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_of_row(&self) -> &[usize] {
        &self.cell_of_row
    }
}

/// Occupied cells, ordered lexicographically by declared level order.
pub fn stratify(d: &Dataset, vars: &[String]) -> Result<StratumIndex, DataError> {
    let cols = vars.iter().map(|v| d.categorical(v)).collect::<Result<Vec<_>, _>>()?;
    let keys: Vec<Vec<u32>> = (0..d.n()).map(|i| cols.iter().map(|c| c.codes[i]).collect()).collect();
    let mut occupied: Vec<Vec<u32>> = keys.clone();
    occupied.sort();
    occupied.dedup();
    let id: HashMap<&Vec<u32>, usize> = occupied.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let cell_of_row = keys.iter().map(|k| id[k]).collect();
    let cells = occupied
        .iter()
        .map(|k| k.iter().zip(&cols).map(|(c, col)| col.levels[*c as usize].clone()).collect())
        .collect();
    Ok(StratumIndex {
        vars: vars.to_vec(),
        cells,
        cell_of_row,
    })
}

/// A term of the shift (linear predictor) clause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftTerm {
    /// `v`
    Main(String),
    /// `a:b`: cell effects of the first categorical variable crossed with
    /// contrasts of the others (numeric variables multiply every cell).
    Interaction(Vec<String>),
    /// `a*b`: main effects plus the treatment-contrast interaction.
    Crossed(Vec<String>),
}

impl ShiftTerm {
    pub fn vars(&self) -> &[String] {
        match self {
            ShiftTerm::Main(v) => std::slice::from_ref(v),
            ShiftTerm::Interaction(v) | ShiftTerm::Crossed(v) => v,
        }
    }
}

/// One column of the shift design: product of numeric variables and level
/// indicators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftColumn {
    pub numeric: Vec<String>,
    pub levels: Vec<(String, String)>,
}

impl ShiftColumn {
    pub fn name(&self) -> String {
        let mut parts: Vec<String> = self.levels.iter().map(|(v, l)| format!("{v}={l}")).collect();
        parts.extend(self.numeric.iter().cloned());
        parts.join(":")
    }

    pub fn eval_profile(&self, p: &Profile) -> Result<f64, DataError> {
        for (var, level) in &self.levels {
            if p.categorical(var)? != *level {
                return Ok(0.0);
            }
        }
        let mut v = 1.0;
        for var in &self.numeric {
            v *= p.numeric(var)?;
        }
        Ok(v)
    }

    pub fn eval_dataset(&self, d: &Dataset) -> Result<Vec<f64>, DataError> {
        let mut out = vec![1.0; d.n()];
        for (var, level) in &self.levels {
            let col = d.categorical(var)?;
            match col.code_of(level) {
                Some(code) => {
                    for (o, c) in out.iter_mut().zip(&col.codes) {
                        if *c != code {
                            *o = 0.0;
                        }
                    }
                }
                None => out.iter_mut().for_each(|o| *o = 0.0),
            }
        }
        for var in &self.numeric {
            let x = d.numeric(var)?;
            for (o, v) in out.iter_mut().zip(x) {
                *o *= v;
            }
        }
        Ok(out)
    }
}

/// Shift design matrix (row-major `n × q`) and its column definitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftDesign {
    columns: Vec<ShiftColumn>,
    matrix: Vec<f64>,
    n: usize,
}

impl ShiftDesign {
    pub fn columns(&self) -> &[ShiftColumn] {
        &self.columns
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(ShiftColumn::name).collect()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let q = self.columns.len();
        &self.matrix[i * q..(i + 1) * q]
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }
}

enum VarKind<'a> {
    Num,
    Cat(&'a CategoricalColumn),
}

fn combos(lists: &[Vec<(String, String)>]) -> Vec<Vec<(String, String)>> {
    let mut out: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for list in lists {
        let mut next = Vec::with_capacity(out.len() * list.len());
        for prefix in &out {
            for item in list {
                let mut c = prefix.clone();
                c.push(item.clone());
                next.push(c);
            }
        }
        out = next;
    }
    out
}

fn expand_product(d: &Dataset, vars: &[String], all_levels_first: bool) -> Result<Vec<ShiftColumn>, DataError> {
    let mut kinds = Vec::with_capacity(vars.len());
    for v in vars {
        kinds.push(match d.column(v)? {
            Column::Numeric(_) => VarKind::Num,
            Column::Categorical(c) => VarKind::Cat(c),
        });
    }
    let numeric: Vec<String> = vars
        .iter()
        .zip(&kinds)
        .filter(|(_, k)| matches!(k, VarKind::Num))
        .map(|(v, _)| v.clone())
        .collect();
    let has_numeric = !numeric.is_empty();
    let mut level_lists = Vec::new();
    let mut first = true;
    for (v, k) in vars.iter().zip(&kinds) {
        if let VarKind::Cat(c) = k {
            let all = all_levels_first && (first || has_numeric);
            let skip = if all { 0 } else { 1 };
            level_lists.push(c.levels.iter().skip(skip).map(|l| (v.clone(), l.clone())).collect());
            first = false;
        }
    }
    Ok(combos(&level_lists)
        .into_iter()
        .map(|levels| ShiftColumn {
            numeric: numeric.clone(),
            levels,
        })
        .collect())
}

fn subsets(vars: &[String]) -> Vec<Vec<String>> {
    let k = vars.len();
    let mut out: Vec<Vec<String>> = (1u32..(1 << k))
        .map(|mask| (0..k).filter(|i| mask & (1 << i) != 0).map(|i| vars[i].clone()).collect())
        .collect();
    out.sort_by_key(|s: &Vec<String>| s.len());
    out
}

/// Column definitions for a list of shift terms. Columns that are zero for
/// every row of `d` (unoccupied cells) are dropped.
pub fn shift_columns(d: &Dataset, terms: &[ShiftTerm]) -> Result<Vec<ShiftColumn>, DataError> {
    let mut cols: Vec<ShiftColumn> = Vec::new();
    for term in terms {
        let expanded = match term {
            ShiftTerm::Main(v) => expand_product(d, std::slice::from_ref(v), false)?,
            ShiftTerm::Interaction(vs) => expand_product(d, vs, true)?,
            ShiftTerm::Crossed(vs) => {
                let mut all = Vec::new();
                for s in subsets(vs) {
                    all.extend(expand_product(d, &s, false)?);
                }
                all
            }
        };
        for c in expanded {
            if cols.contains(&c) {
                continue;
            }
            let values = c.eval_dataset(d)?;
            if values.iter().all(|v| *v == 0.0) {
                log::info!("dropping empty shift column {}", c.name());
                continue;
            }
            cols.push(c);
        }
    }
    Ok(cols)
}

/// Evaluates column definitions on every row of `d`.
pub fn shift_matrix(d: &Dataset, columns: &[ShiftColumn]) -> Result<ShiftDesign, DataError> {
    let q = columns.len();
    let n = d.n();
    let mut matrix = vec![0.0; n * q];
    for (j, c) in columns.iter().enumerate() {
        for (i, v) in c.eval_dataset(d)?.into_iter().enumerate() {
            matrix[i * q + j] = v;
        }
    }
    Ok(ShiftDesign {
        columns: columns.to_vec(),
        matrix,
        n,
    })
}

/// Treatment-contrast design for `terms` on `d`.
pub fn shift_design(d: &Dataset, terms: &[ShiftTerm]) -> Result<ShiftDesign, DataError> {
    let cols = shift_columns(d, terms)?;
    shift_matrix(d, &cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKING: [&str; 5] = ["never", "former", "light", "medium", "heavy"];

    fn sex_smoking() -> Dataset {
        let mut sex = Vec::new();
        let mut smk = Vec::new();
        for s in ["female", "male"] {
            for k in SMOKING {
                sex.push(s);
                smk.push(k);
            }
        }
        let n = sex.len();
        Dataset::new("bmi", (0..n).map(|i| 20.0 + i as f64).collect())
            .with_categorical("sex", &sex)
            .unwrap()
            .with_categorical("smoking", &smk)
            .unwrap()
            .with_numeric("alcohol", (0..n).map(|i| i as f64 * 0.5).collect())
            .unwrap()
    }

    #[test]
    fn default_weights_are_one() {
        let csv = "y,g\n1.5,a\n2,b\n3,a\n";
        let d = read_csv(csv.as_bytes(), &CsvSchema::new("y")).unwrap();
        assert_eq!(d.weights(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let csv = "y,w\n1,1\n2,-1\n";
        let mut s = CsvSchema::new("y");
        s.weight = Some("w".into());
        match read_csv(csv.as_bytes(), &s) {
            Err(DataError::NegativeWeight { row: 2, value }) => assert_eq!(value, -1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn levels_in_first_appearance_order() {
        let csv = "y,sex\n1,F\n2,M\n3,F\n";
        let d = read_csv(csv.as_bytes(), &CsvSchema::new("y")).unwrap();
        let c = d.categorical("sex").unwrap();
        assert_eq!(c.levels(), &["F".to_string(), "M".to_string()]);
        assert_eq!(c.reference(), "F");
    }

    #[test]
    fn bad_response_names_row_and_column() {
        let csv = "y,x\n1,2\nabc,3\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::new("y")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("'y'"), "{msg}");
        assert!(matches!(
            read_csv(csv.as_bytes(), &CsvSchema::new("nope")),
            Err(DataError::UnknownColumn(_))
        ));
    }

    #[test]
    fn missing_rows_are_dropped() {
        let csv = "y,x\n1,2\nNA,3\n4,\n5,6\n";
        let d = read_csv(csv.as_bytes(), &CsvSchema::new("y")).unwrap();
        assert_eq!(d.response(), &[1.0, 5.0]);
    }

    #[test]
    fn pinned_levels_override_appearance() {
        let csv = "y,s\n1,b\n2,a\n";
        let mut schema = CsvSchema::new("y");
        schema.levels.insert("s".into(), vec!["a".into(), "b".into()]);
        let d = read_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(d.categorical("s").unwrap().reference(), "a");
    }

    #[test]
    fn stratify_counts_occupied_cells() {
        let d = sex_smoking();
        let idx = stratify(&d, &["sex".into(), "smoking".into()]).unwrap();
        assert_eq!(idx.n_cells(), 10);
        assert_eq!(idx.cells()[0], vec!["female".to_string(), "never".to_string()]);
        assert_eq!(idx.cells()[9], vec!["male".to_string(), "heavy".to_string()]);

        let one = Dataset::new("y", vec![1.0, 2.0]).with_categorical("g", &["a", "a"]).unwrap();
        assert_eq!(stratify(&one, &["g".into()]).unwrap().n_cells(), 1);

        let holes = Dataset::new("y", vec![1.0, 2.0, 3.0])
            .with_categorical("a", &["x", "x", "y"])
            .unwrap()
            .with_categorical_levels("b", &["u", "v"], &["u", "v", "u"])
            .unwrap();
        assert_eq!(stratify(&holes, &["a".into(), "b".into()]).unwrap().n_cells(), 3);

        assert!(matches!(
            stratify(&d, &["alcohol".into()]),
            Err(DataError::ExpectedCategorical(_))
        ));
    }

    #[test]
    fn treatment_contrasts_for_main_effect() {
        let d = sex_smoking();
        let s = shift_design(&d, &[ShiftTerm::Main("smoking".into())]).unwrap();
        assert_eq!(s.n_cols(), 4);
        assert!(s.row(0).iter().all(|v| *v == 0.0));
        assert_eq!(s.row(1), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sex_smoking_interaction_has_eight_columns() {
        // Oracle: enumerate the 2×5 table and keep cells whose smoking level
        // is not the within-sex reference.
        let mut expected = Vec::new();
        for sex in ["female", "male"] {
            for smk in SMOKING.iter().skip(1) {
                expected.push(format!("sex={sex}:smoking={smk}"));
            }
        }
        let d = sex_smoking();
        let s = shift_design(&d, &[ShiftTerm::Interaction(vec!["sex".into(), "smoking".into()])]).unwrap();
        assert_eq!(s.names(), expected);
        for i in 0..d.n() {
            let sum: f64 = s.row(i).iter().sum();
            let never = d.categorical("smoking").unwrap().label(i) == "never";
            assert_eq!(sum, if never { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn numeric_term_is_raw_column() {
        let d = sex_smoking();
        let s = shift_design(&d, &[ShiftTerm::Main("alcohol".into())]).unwrap();
        assert_eq!(s.n_cols(), 1);
        assert_eq!(s.row(3), &[1.5]);
    }

    #[test]
    fn crossed_term_expands_to_main_and_interaction() {
        let d = sex_smoking();
        let s = shift_design(&d, &[ShiftTerm::Crossed(vec!["sex".into(), "smoking".into()])]).unwrap();
        assert_eq!(s.n_cols(), 1 + 4 + 4);
        let age = shift_design(&d, &[ShiftTerm::Interaction(vec!["sex".into(), "alcohol".into()])]).unwrap();
        assert_eq!(age.names(), vec!["sex=female:alcohol", "sex=male:alcohol"]);
    }

    #[test]
    fn reference_profile_has_zero_shift() {
        let d = sex_smoking();
        let terms = vec![
            ShiftTerm::Interaction(vec!["sex".into(), "smoking".into()]),
            ShiftTerm::Crossed(vec!["sex".into(), "smoking".into()]),
            ShiftTerm::Main("alcohol".into()),
        ];
        let cols = shift_columns(&d, &terms).unwrap();
        let reference = Profile::new().level("sex", "female").level("smoking", "never").num("alcohol", 0.0);
        for c in &cols {
            assert_eq!(c.eval_profile(&reference).unwrap(), 0.0);
        }
    }

    #[test]
    fn csv_round_trip() {
        let csv = "y,g,x,w\n1.25,a,0.1,2\n-3.5,b,1e-7,0.5\n";
        let mut schema = CsvSchema::new("y");
        schema.weight = Some("w".into());
        let d = read_csv(csv.as_bytes(), &schema).unwrap();
        let mut out = Vec::new();
        write_csv_to(&d, &mut out).unwrap();
        let back = read_csv(out.as_slice(), &schema).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn trim_drops_extremes_per_group() {
        let y: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let g: Vec<&str> = (0..100).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
        let d = Dataset::new("y", y).with_categorical("g", &g).unwrap();
        let t = d.trim_by_quantile(0.01, 0.99, Some("g")).unwrap();
        assert_eq!(t.n(), 96);
    }
}
