//! Simulated client population: one schema-conformant record per client.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::predicate::{FieldValue, Predicate};
use crate::schema::{FeatureSpec, Schema};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("failed to read client data: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot use `{value}`: {reason}")]
    Coercion {
        row: usize,
        column: String,
        value: String,
        reason: String,
    },
    #[error("client pool is empty")]
    Empty,
}

/// One client's record, aligned with the pool's feature order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    values: Vec<FieldValue>,
}

#[derive(Debug, Clone)]
pub struct ClientPool {
    schema: Arc<Schema>,
    index: HashMap<String, usize>,
    records: Vec<ClientRecord>,
}

impl ClientPool {
    /// Build a pool from per-client feature maps; every record must conform.
    pub fn new(schema: Arc<Schema>, rows: Vec<HashMap<String, FieldValue>>) -> Result<Self, ClientError> {
        let names: Vec<String> = schema.names().map(str::to_string).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let mut records = Vec::with_capacity(rows.len());
        for (r, mut row) in rows.into_iter().enumerate() {
            let mut values = Vec::with_capacity(names.len());
            for name in &names {
                let v = row
                    .remove(name)
                    .ok_or_else(|| ClientError::MissingColumn(name.clone()))?;
                let text = match &v {
                    FieldValue::Num(x) => x.to_string(),
                    FieldValue::Cat(s) => s.clone(),
                };
                values.push(coerce(&schema, name, &text, r + 1)?);
            }
            records.push(ClientRecord { values });
        }
        if records.is_empty() {
            return Err(ClientError::Empty);
        }
        Ok(Self { schema, index, records })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn schema_arc(&self) -> Arc<Schema> {
        self.schema.clone()
    }

    /// Population size N.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ClientRecord] {
        &self.records
    }

    pub fn value<'a>(&self, record: &'a ClientRecord, feature: &str) -> Option<&'a FieldValue> {
        self.index.get(feature).map(|&i| &record.values[i])
    }

    pub fn matches(&self, record: &ClientRecord, predicate: &Predicate) -> bool {
        predicate.eval(|f| self.value(record, f).cloned())
    }

    /// Numeric value of `feature` for a client.
    pub fn number(&self, record: &ClientRecord, feature: &str) -> Option<f64> {
        match self.value(record, feature)? {
            FieldValue::Num(x) => Some(*x),
            FieldValue::Cat(_) => None,
        }
    }

    /// Serialize as CSV with the schema's feature order as header.
    pub fn to_csv(&self) -> Result<String, ClientError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.schema.names())?;
        for rec in &self.records {
            w.write_record(rec.values.iter().map(|v| match v {
                FieldValue::Num(x) => x.to_string(),
                FieldValue::Cat(s) => s.clone(),
            }))?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn coerce(schema: &Schema, column: &str, text: &str, row: usize) -> Result<FieldValue, ClientError> {
    let fail = |reason: String| ClientError::Coercion {
        row,
        column: column.to_string(),
        value: text.to_string(),
        reason,
    };
    match schema.get(column).map_err(|e| fail(e.to_string()))? {
        FeatureSpec::Categorical { values } => {
            if values.iter().any(|v| v == text) {
                Ok(FieldValue::Cat(text.to_string()))
            } else {
                Err(fail("not in the declared domain".into()))
            }
        }
        FeatureSpec::Numeric { bounds: [lo, hi], .. } => {
            let x: f64 = text.trim().parse().map_err(|_| fail("not a number".into()))?;
            if !x.is_finite() || x < *lo || x > *hi {
                return Err(fail(format!("outside bounds [{lo}, {hi}]")));
            }
            Ok(FieldValue::Num(x))
        }
    }
}

/// Read clients from CSV. The header must name every schema feature; other
/// columns are ignored. Row numbers in errors count data rows from 1.
pub fn load_clients(path: impl AsRef<Path>, schema: Arc<Schema>) -> Result<ClientPool, ClientError> {
    let file = std::fs::File::open(path)?;
    read_clients(file, schema)
}

pub fn read_clients(reader: impl Read, schema: Arc<Schema>) -> Result<ClientPool, ClientError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut columns = Vec::new();
    for name in schema.names() {
        let pos = header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| ClientError::MissingColumn(name.to_string()))?;
        columns.push((name.to_string(), pos));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let mut values = Vec::with_capacity(columns.len());
        for (name, pos) in &columns {
            let text = row.get(*pos).unwrap_or("");
            values.push(coerce(&schema, name, text, i + 1)?);
        }
        records.push(ClientRecord { values });
    }
    if records.is_empty() {
        return Err(ClientError::Empty);
    }
    let index = columns.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
    Ok(ClientPool { schema, index, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{role, schema};

    const FIXTURE: &str = "role,salary,bonus,hours\nprofessor,120,5,50\nphd,30.5,0,45\nstaff,60,-3,38\n";

    #[test]
    fn three_rows() {
        let pool = read_clients(FIXTURE.as_bytes(), schema()).unwrap();
        assert_eq!(pool.len(), 3);
        let phd = &pool.records()[1];
        assert_eq!(pool.number(phd, "salary"), Some(30.5));
        assert!(pool.matches(phd, &role("phd")));
        assert!(!pool.matches(phd, &role("staff")));
    }

    #[test]
    fn column_order_and_extras_are_free() {
        let text = "id,hours,salary,role,bonus\n7,40,10,masters,1\n";
        let pool = read_clients(text.as_bytes(), schema()).unwrap();
        assert_eq!(pool.number(&pool.records()[0], "hours"), Some(40.0));
    }

    #[test]
    fn bad_salary_names_its_row() {
        let text = "role,salary,bonus,hours\nphd,10,0,1\nphd,lots,0,1\n";
        match read_clients(text.as_bytes(), schema()) {
            Err(ClientError::Coercion { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "salary");
            }
            other => panic!("expected a coercion error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_unknown_category() {
        let text = "role,salary,bonus\nphd,1,1\n";
        assert!(matches!(
            read_clients(text.as_bytes(), schema()),
            Err(ClientError::MissingColumn(c)) if c == "hours"
        ));
        let text = "role,salary,bonus,hours\npostdoc,1,1,1\n";
        assert!(matches!(
            read_clients(text.as_bytes(), schema()),
            Err(ClientError::Coercion { row: 1, .. })
        ));
        let text = "role,salary,bonus,hours\n";
        assert!(matches!(
            read_clients(text.as_bytes(), schema()),
            Err(ClientError::Empty)
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let pool = read_clients(FIXTURE.as_bytes(), schema()).unwrap();
        let back = read_clients(pool.to_csv().unwrap().as_bytes(), schema()).unwrap();
        assert_eq!(back.records(), pool.records());
    }
}
