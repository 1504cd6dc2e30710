//! Tabular data with a typed schema: continuous and discrete columns, row
//! groups identified by key columns, deterministic jitter and group-atomic
//! holdout splits.

mod io;

pub use io::{load_csv, load_schema, save_csv, save_schema, CsvLoad};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Most distinct labels a discrete column may carry; a higher count almost
/// always means a continuous column was mis-declared.
pub const MAX_DISCRETE_LEVELS: usize = 10_000;

/// Storage type of a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Discrete,
}

/// What part a column plays in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    /// The single response variable.
    Target,
    /// Intermediate continuous variables modelled with random effects.
    Phenological,
    /// Exogenous continuous variables modelled with fixed effects only.
    Weather,
    /// Together with the other key columns, identifies a row's group.
    GroupKey,
    /// The synthesized (or precomputed) cluster label column.
    Cluster,
}

/// Declaration of one column: name, storage type, modelling role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

/// Validated, ordered set of column declarations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    specs: Vec<ColumnSpec>,
}

impl Schema {
    /// Builds a schema, checking the structural rules: unique names, exactly
    /// one continuous target, at most one cluster column (discrete), and no
    /// discrete columns outside the group-key/cluster roles.
    pub fn new(specs: Vec<ColumnSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Schema("schema has no columns".into()));
        }
        let mut seen = BTreeSet::new();
        for spec in &specs {
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name {}", spec.name)));
            }
        }
        let targets: Vec<&ColumnSpec> = specs
            .iter()
            .filter(|s| s.role == ColumnRole::Target)
            .collect();
        match targets.as_slice() {
            [t] if t.kind == ColumnKind::Continuous => {}
            [t] => {
                return Err(Error::Schema(format!(
                    "target column {} must be continuous",
                    t.name
                )))
            }
            [] => return Err(Error::Schema("no target column".into())),
            _ => return Err(Error::Schema("more than one target column".into())),
        }
        let clusters: Vec<&ColumnSpec> = specs
            .iter()
            .filter(|s| s.role == ColumnRole::Cluster)
            .collect();
        match clusters.as_slice() {
            [] => {}
            [c] if c.kind == ColumnKind::Discrete => {}
            [c] => {
                return Err(Error::Schema(format!(
                    "cluster column {} must be discrete",
                    c.name
                )))
            }
            _ => return Err(Error::Schema("more than one cluster column".into())),
        }
        for spec in &specs {
            let discrete_ok = matches!(spec.role, ColumnRole::GroupKey | ColumnRole::Cluster);
            if spec.kind == ColumnKind::Discrete && !discrete_ok {
                return Err(Error::Schema(format!(
                    "column {} is discrete but has role {:?}; only group keys and the cluster column may be discrete",
                    spec.name, spec.role
                )));
            }
            if spec.kind == ColumnKind::Continuous && spec.role == ColumnRole::Cluster {
                return Err(Error::Schema(format!(
                    "cluster column {} must be discrete",
                    spec.name
                )));
            }
        }
        Ok(Schema { specs })
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn spec(&self, name: &str) -> Result<&ColumnSpec> {
        Ok(&self.specs[self.index_of(name)?])
    }

    pub fn target(&self) -> &ColumnSpec {
        self.specs
            .iter()
            .find(|s| s.role == ColumnRole::Target)
            .expect("schema invariant: exactly one target")
    }

    pub fn cluster(&self) -> Option<&ColumnSpec> {
        self.specs.iter().find(|s| s.role == ColumnRole::Cluster)
    }

    pub fn group_keys(&self) -> Vec<&ColumnSpec> {
        self.specs
            .iter()
            .filter(|s| s.role == ColumnRole::GroupKey)
            .collect()
    }

    /// Columns that become network nodes: everything except group keys.
    pub fn node_columns(&self) -> Vec<&ColumnSpec> {
        self.specs
            .iter()
            .filter(|s| s.role != ColumnRole::GroupKey)
            .collect()
    }

    /// Schema with `name` removed. Errors if the column does not exist or the
    /// removal would break a structural rule (e.g. dropping the target).
    pub fn without(&self, name: &str) -> Result<Schema> {
        let idx = self.index_of(name)?;
        let mut specs = self.specs.clone();
        specs.remove(idx);
        Schema::new(specs)
    }

    /// Schema with `spec` appended at the end.
    pub fn with_column(&self, spec: ColumnSpec) -> Result<Schema> {
        let mut specs = self.specs.clone();
        specs.push(spec);
        Schema::new(specs)
    }
}

/// One column of values; discrete columns store codes into a level table.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Continuous(Vec<f64>),
    Discrete { levels: Vec<String>, codes: Vec<u32> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Continuous(v) => v.len(),
            Column::Discrete { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Identifies a row group: the values of the group-key columns, in schema
/// order. Ordered and hashable so groups enumerate deterministically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey(pub Vec<String>);

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join("/"))
    }
}

/// A complete, missing-free table: a schema plus one column per declaration,
/// all of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    columns: Vec<Column>,
    n: usize,
}

impl Dataset {
    pub fn new(schema: Schema, columns: Vec<Column>) -> Result<Self> {
        if columns.len() != schema.len() {
            return Err(Error::LengthMismatch {
                expected: schema.len(),
                got: columns.len(),
            });
        }
        let n = columns.first().map_or(0, Column::len);
        for (spec, col) in schema.columns().iter().zip(&columns) {
            if col.len() != n {
                return Err(Error::Invalid(format!(
                    "column {} has {} rows, expected {n}",
                    spec.name,
                    col.len()
                )));
            }
            match (spec.kind, col) {
                (ColumnKind::Continuous, Column::Continuous(values)) => {
                    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("column {} row {i}", spec.name)));
                    }
                }
                (ColumnKind::Discrete, Column::Discrete { levels, codes }) => {
                    if let Some(i) = codes.iter().position(|&c| c as usize >= levels.len()) {
                        return Err(Error::Invalid(format!(
                            "column {} row {i}: code out of range",
                            spec.name
                        )));
                    }
                }
                _ => {
                    return Err(Error::Invalid(format!(
                        "column {} storage does not match its declared kind",
                        spec.name
                    )))
                }
            }
        }
        Ok(Dataset { schema, columns, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        Ok(&self.columns[self.schema.index_of(name)?])
    }

    /// The values of a continuous column.
    pub fn continuous(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Continuous(v) => Ok(v),
            Column::Discrete { .. } => Err(Error::NotContinuous(name.to_string())),
        }
    }

    /// The level table and per-row codes of a discrete column.
    pub fn discrete(&self, name: &str) -> Result<(&[String], &[u32])> {
        match self.column(name)? {
            Column::Discrete { levels, codes } => Ok((levels, codes)),
            Column::Continuous(_) => Err(Error::NotDiscrete(name.to_string())),
        }
    }

    /// The label of a discrete column at `row`.
    pub fn label(&self, name: &str, row: usize) -> Result<&str> {
        let (levels, codes) = self.discrete(name)?;
        Ok(&levels[codes[row] as usize])
    }

    /// The group key of `row`, built from the group-key columns in schema
    /// order. Errors if the schema declares no group keys.
    pub fn group_of(&self, row: usize) -> Result<GroupKey> {
        let keys = self.schema.group_keys();
        if keys.is_empty() {
            return Err(Error::Schema("no group-key columns".into()));
        }
        let mut parts = Vec::with_capacity(keys.len());
        for key in keys {
            let part = match self.column(&key.name)? {
                Column::Discrete { levels, codes } => levels[codes[row] as usize].clone(),
                Column::Continuous(values) => format_value(values[row]),
            };
            parts.push(part);
        }
        Ok(GroupKey(parts))
    }

    /// Rows of each group, keyed and ordered by group key.
    pub fn group_rows(&self) -> Result<BTreeMap<GroupKey, Vec<usize>>> {
        let mut map: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
        for row in 0..self.n {
            map.entry(self.group_of(row)?).or_default().push(row);
        }
        Ok(map)
    }

    /// A new dataset containing `rows` (in the given order), sharing this
    /// schema. Discrete columns keep their full level tables so codes stay
    /// comparable across subsets.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n) {
            return Err(Error::Invalid(format!("row {bad} out of range")));
        }
        let columns = self
            .columns
            .iter()
            .map(|col| match col {
                Column::Continuous(v) => Column::Continuous(rows.iter().map(|&r| v[r]).collect()),
                Column::Discrete { levels, codes } => Column::Discrete {
                    levels: levels.clone(),
                    codes: rows.iter().map(|&r| codes[r]).collect(),
                },
            })
            .collect();
        Dataset::new(self.schema.clone(), columns)
    }

    /// Dataset with `name` dropped.
    pub fn without_column(&self, name: &str) -> Result<Dataset> {
        let idx = self.schema.index_of(name)?;
        let schema = self.schema.without(name)?;
        let mut columns = self.columns.clone();
        columns.remove(idx);
        Dataset::new(schema, columns)
    }

    /// Dataset with a new column appended.
    pub fn with_column(&self, spec: ColumnSpec, column: Column) -> Result<Dataset> {
        let schema = self.schema.with_column(spec)?;
        let mut columns = self.columns.clone();
        columns.push(column);
        Dataset::new(schema, columns)
    }
}

pub(crate) fn format_value(v: f64) -> String {
    // Shortest representation that round-trips through f64.
    format!("{v}")
}

/// Adds independent `N(0, sd^2)` noise to the named continuous columns.
/// Deterministic for a given seed; `sd = 0` returns the data unchanged.
pub fn jitter(ds: &Dataset, columns: &[String], sd: f64, seed: u64) -> Result<Dataset> {
    if !(sd >= 0.0) {
        return Err(Error::invalid("jitter sd must be >= 0"));
    }
    for name in columns {
        ds.continuous(name)?;
    }
    if sd == 0.0 || columns.is_empty() {
        return Ok(ds.clone());
    }
    let mut out = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sd).expect("valid sd");
    for name in columns {
        let idx = out.schema.index_of(name)?;
        if let Column::Continuous(values) = &mut out.columns[idx] {
            for v in values.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

/// Group-atomic holdout split: every group lands wholly in train or test.
/// The test side gets `round(fraction * G)` groups (half away from zero),
/// chosen uniformly by the seeded generator. Row order is preserved within
/// each side.
pub fn holdout_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("holdout fraction must be in [0, 1]"));
    }
    let groups = ds.group_rows()?;
    let g = groups.len();
    if g < 2 {
        return Err(Error::TooFewGroups(g));
    }
    let n_test = (fraction * g as f64 + 0.5).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, g, n_test.min(g));
    let test_groups: BTreeSet<usize> = chosen.iter().collect();

    let mut in_test = vec![false; ds.n()];
    for (gi, rows) in groups.values().enumerate() {
        if test_groups.contains(&gi) {
            for &r in rows {
                in_test[r] = true;
            }
        }
    }
    let train_rows: Vec<usize> = (0..ds.n()).filter(|&r| !in_test[r]).collect();
    let test_rows: Vec<usize> = (0..ds.n()).filter(|&r| in_test[r]).collect();
    Ok((ds.select_rows(&train_rows)?, ds.select_rows(&test_rows)?))
}
