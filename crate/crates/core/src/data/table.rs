use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interned categorical column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorColumn {
    pub codes: Vec<u32>,
    pub levels: Vec<String>,
}

impl FactorColumn {
    /// Interns `values` in order of first appearance.
    pub fn from_values<S: AsRef<str>>(values: &[S]) -> Self {
        let mut lookup: HashMap<String, u32> = HashMap::new();
        let mut levels = Vec::new();
        let codes = values
            .iter()
            .map(|v| {
                let v = v.as_ref();
                *lookup.entry(v.to_string()).or_insert_with(|| {
                    levels.push(v.to_string());
                    (levels.len() - 1) as u32
                })
            })
            .collect();
        FactorColumn { codes, levels }
    }

    /// Interns against a closed level set; unknown values are reported by position.
    pub fn with_levels<S: AsRef<str>>(values: &[S], levels: &[String]) -> std::result::Result<Self, usize> {
        let lookup: HashMap<&str, u32> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i as u32)).collect();
        let mut codes = Vec::with_capacity(values.len());
        for (row, v) in values.iter().enumerate() {
            match lookup.get(v.as_ref()) {
                Some(&c) => codes.push(c),
                None => return Err(row),
            }
        }
        Ok(FactorColumn { codes, levels: levels.to_vec() })
    }

    pub fn label(&self, row: usize) -> &str {
        &self.levels[self.codes[row] as usize]
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Factor(FactorColumn),
    Numeric(Vec<f64>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Factor(f) => f.codes.len(),
            Column::Numeric(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// String rendering of one cell, used for joins on key columns.
    pub fn key(&self, row: usize) -> String {
        match self {
            Column::Factor(f) => f.label(row).to_string(),
            Column::Numeric(v) => format!("{}", v[row]),
        }
    }

    /// New column whose row `k` is this column's row `index[k]`.
    pub fn gather(&self, index: &[usize]) -> Column {
        match self {
            Column::Factor(f) => Column::Factor(FactorColumn {
                codes: index.iter().map(|&i| f.codes[i]).collect(),
                levels: f.levels.clone(),
            }),
            Column::Numeric(v) => Column::Numeric(index.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Column-oriented table with named, typed columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
}

impl Table {
    pub fn new(n_rows: usize) -> Self {
        Table { names: Vec::new(), columns: Vec::new(), n_rows }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &Column)> {
        self.names.iter().map(String::as_str).zip(self.columns.iter())
    }

    /// Adds or replaces a column.
    pub fn insert(&mut self, name: impl Into<String>, column: Column) -> Result<()> {
        let name = name.into();
        if column.len() != self.n_rows {
            return Err(Error::Data(format!(
                "column `{name}` has {} rows, table has {}",
                column.len(),
                self.n_rows
            )));
        }
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.columns[i] = column,
            None => {
                self.names.push(name);
                self.columns.push(column);
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Column> {
        self.names.iter().position(|n| n == name).map(|i| &self.columns[i])
    }

    pub fn has(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.get(name).ok_or_else(|| Error::Data(format!("missing column `{name}`")))
    }

    pub fn factor(&self, name: &str) -> Result<&FactorColumn> {
        match self.column(name)? {
            Column::Factor(f) => Ok(f),
            Column::Numeric(_) => Err(Error::Data(format!("column `{name}` is numeric, expected a factor"))),
        }
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Factor(_) => Err(Error::Data(format!("column `{name}` is a factor, expected numeric"))),
        }
    }

    /// Rows selected (and possibly repeated) by `index`.
    pub fn gather(&self, index: &[usize]) -> Table {
        Table {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.gather(index)).collect(),
            n_rows: index.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    /// Categorical; `Some(levels)` declares a closed level set in that order.
    Factor(Option<Vec<String>>),
    Numeric,
    /// Numeric when every non-missing value parses as a number, factor otherwise.
    Auto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<(String, ColumnKind)>,
    /// Unique row identifier column, kept as strings.
    pub id_column: Option<String>,
    /// Optional nonnegative weight column.
    pub weight_column: Option<String>,
    pub delimiter: u8,
    /// Cell values treated as missing.
    pub missing: Vec<String>,
}

impl Default for TableSchema {
    fn default() -> Self {
        TableSchema {
            columns: Vec::new(),
            id_column: None,
            weight_column: None,
            delimiter: b',',
            missing: vec![String::new(), "NA".into()],
        }
    }
}

impl TableSchema {
    pub fn column(mut self, name: impl Into<String>, kind: ColumnKind) -> Self {
        let name = name.into();
        self.columns.retain(|(n, _)| *n != name);
        self.columns.push((name, kind));
        self
    }

    pub fn id(mut self, name: impl Into<String>) -> Self {
        self.id_column = Some(name.into());
        self
    }

    pub fn weight(mut self, name: impl Into<String>) -> Self {
        self.weight_column = Some(name.into());
        self
    }
}

/// A loaded delimited file: typed columns plus id and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTable {
    pub table: Table,
    pub ids: Vec<String>,
    pub weights: Option<Vec<f64>>,
    /// Rows removed because a modeled column was missing.
    pub dropped_rows: usize,
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a delimited text file with a header row and types its columns per `schema`.
///
/// Rows with a missing value in any schema column (or the weight column) are dropped
/// and counted; a missing id is an error.
pub fn load_table(path: &Path, schema: &TableSchema) -> Result<LoadedTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().delimiter(schema.delimiter).has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?.clone();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))
    };

    let mut wanted: Vec<(String, usize)> = Vec::new();
    for (name, _) in &schema.columns {
        wanted.push((name.clone(), position(name)?));
    }
    let id_pos = schema.id_column.as_deref().map(position).transpose()?;
    let weight_pos = schema.weight_column.as_deref().map(position).transpose()?;

    let is_missing = |s: &str| schema.missing.iter().any(|m| m == s.trim());
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); wanted.len()];
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    let mut source_rows = Vec::new();
    let mut dropped = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
        let row_no = line + 1;
        let cell = |i: usize| record.get(i).unwrap_or("").trim();
        if wanted.iter().any(|(_, p)| is_missing(cell(*p))) || weight_pos.is_some_and(|p| is_missing(cell(p))) {
            dropped += 1;
            continue;
        }
        if let Some(p) = id_pos {
            let id = cell(p);
            if is_missing(id) {
                return Err(Error::Data(format!("{}: row {row_no}: missing id", path.display())));
            }
            ids.push(id.to_string());
        } else {
            ids.push(row_no.to_string());
        }
        if let Some(p) = weight_pos {
            let w = parse_number(cell(p)).filter(|w| *w >= 0.0).ok_or_else(|| {
                Error::Data(format!(
                    "{}: row {row_no}, column `{}`: weight `{}` is not a nonnegative number",
                    path.display(),
                    schema.weight_column.as_deref().unwrap_or(""),
                    cell(p)
                ))
            })?;
            weights.push(w);
        }
        for (k, (_, p)) in wanted.iter().enumerate() {
            raw[k].push(cell(*p).to_string());
        }
        source_rows.push(row_no);
    }

    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (k, id) in ids.iter().enumerate() {
        if let Some(prev) = seen.insert(id.as_str(), k) {
            return Err(Error::Data(format!(
                "{}: duplicate id `{id}` on rows {} and {}",
                path.display(),
                source_rows[prev],
                source_rows[k]
            )));
        }
    }

    let mut table = Table::new(ids.len());
    for ((name, kind), values) in schema.columns.iter().zip(raw) {
        let column = match kind {
            ColumnKind::Numeric => {
                let mut out = Vec::with_capacity(values.len());
                for (k, v) in values.iter().enumerate() {
                    out.push(parse_number(v).ok_or_else(|| {
                        Error::Data(format!(
                            "{}: row {}, column `{name}`: cannot parse `{v}` as a number",
                            path.display(),
                            source_rows[k]
                        ))
                    })?);
                }
                Column::Numeric(out)
            }
            ColumnKind::Factor(None) => Column::Factor(FactorColumn::from_values(&values)),
            ColumnKind::Factor(Some(levels)) => {
                Column::Factor(FactorColumn::with_levels(&values, levels).map_err(|k| {
                    Error::Data(format!(
                        "{}: row {}, column `{name}`: value `{}` is not a declared level (expected one of {:?})",
                        path.display(),
                        source_rows[k],
                        values[k],
                        levels
                    ))
                })?)
            }
            ColumnKind::Auto => {
                let parsed: Option<Vec<f64>> = values.iter().map(|v| parse_number(v)).collect();
                match parsed {
                    Some(v) => Column::Numeric(v),
                    None => Column::Factor(FactorColumn::from_values(&values)),
                }
            }
        };
        table.insert(name.clone(), column)?;
    }
    if dropped > 0 {
        log::info!("{}: dropped {dropped} rows with missing modeled values", path.display());
    }
    Ok(LoadedTable { table, ids, weights: weight_pos.map(|_| weights), dropped_rows: dropped })
}

/// Writes rows of string cells with a header; helper for tidy outputs.
pub fn write_delimited(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
    w.write_record(header).map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn smallest_ingest() {
        let f = write("case_id,party,policy\n1,D,yes\n2,R,no\n");
        let schema = TableSchema::default()
            .id("case_id")
            .column("party", ColumnKind::Factor(None))
            .column("policy", ColumnKind::Factor(None));
        let t = load_table(f.path(), &schema).unwrap();
        assert_eq!(t.table.n_rows(), 2);
        assert_eq!(t.ids, vec!["1", "2"]);
        assert_eq!(t.table.factor("party").unwrap().levels, vec!["D", "R"]);
    }

    #[test]
    fn undeclared_level_names_row_and_column() {
        let f = write("case_id,policy\n1,yes\n2,DK\n");
        let schema = TableSchema::default()
            .id("case_id")
            .column("policy", ColumnKind::Factor(Some(vec!["yes".into(), "no".into()])));
        let err = load_table(f.path(), &schema).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("`policy`"), "{err}");
        assert!(err.contains("DK"), "{err}");
    }

    #[test]
    fn unparseable_numeric_and_missing_column() {
        let f = write("id,x\n1,0.5\n2,abc\n");
        let schema = TableSchema::default().id("id").column("x", ColumnKind::Numeric);
        let err = load_table(f.path(), &schema).unwrap_err().to_string();
        assert!(err.contains("abc"), "{err}");
        let schema = TableSchema::default().id("id").column("z", ColumnKind::Numeric);
        let err = load_table(f.path(), &schema).unwrap_err().to_string();
        assert!(err.contains("missing column `z`"), "{err}");
    }

    #[test]
    fn listwise_deletion_counts_rows() {
        let f = write("id,x,g\n1,0.5,a\n2,,b\n3,1.5,NA\n4,2,c\n");
        let schema = TableSchema::default().id("id").column("x", ColumnKind::Numeric).column("g", ColumnKind::Auto);
        let t = load_table(f.path(), &schema).unwrap();
        assert_eq!(t.dropped_rows, 2);
        assert_eq!(t.ids, vec!["1", "4"]);
        assert!(matches!(t.table.get("g"), Some(Column::Factor(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write("id,x\n1,1\n1,2\n");
        let schema = TableSchema::default().id("id").column("x", ColumnKind::Numeric);
        assert!(load_table(f.path(), &schema).is_err());
    }

    #[test]
    fn interning_is_stable_across_loads() {
        let f = write("id,g\n1,b\n2,a\n3,b\n4,c\n");
        let schema = TableSchema::default().id("id").column("g", ColumnKind::Factor(None));
        let a = load_table(f.path(), &schema).unwrap();
        let b = load_table(f.path(), &schema).unwrap();
        assert_eq!(a.table.factor("g").unwrap(), b.table.factor("g").unwrap());
    }

    #[test]
    fn missing_file_is_io_error() {
        let schema = TableSchema::default();
        let err = load_table(Path::new("/nonexistent/survey.csv"), &schema).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err:?}");
        assert!(err.to_string().contains("/nonexistent/survey.csv"));
    }
}
