use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::ir::{DataType, Schema};
use crate::ops::Input;
use crate::store::{Checksum, Digester};

use super::RuntimeError;

/// A field of a request record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Text(String),
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Value {
    fn type_name(&self) -> &'static str {
        match self {
            Value::Text(_) => "text",
            Value::Scalar(_) => "scalar",
            Value::Vector(_) => "vector",
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Scalar(x)
    }
}

impl From<Vec<f64>> for Value {
    fn from(v: Vec<f64>) -> Self {
        Value::Vector(v)
    }
}

/// Named input fields. Serialized as a JSON object.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, Value>", into = "BTreeMap<String, Value>")]
pub struct Record {
    fields: Vec<(String, Value)>,
}

impl From<BTreeMap<String, Value>> for Record {
    fn from(m: BTreeMap<String, Value>) -> Self {
        Record {
            fields: m.into_iter().collect(),
        }
    }
}

impl From<Record> for BTreeMap<String, Value> {
    fn from(r: Record) -> Self {
        r.fields.into_iter().collect()
    }
}

/// Columns bound to a schema, in schema order.
pub type Bound<'a> = SmallVec<[Input<'a>; 8]>;

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    /// Single text column, the common case for text pipelines.
    pub fn text(column: &str, text: impl Into<String>) -> Self {
        Record::new().with(column, Value::Text(text.into()))
    }

    pub fn with(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.set(name, value);
        self
    }

    pub fn set(&mut self, name: &str, value: impl Into<Value>) {
        let value = value.into();
        match self.fields.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = value,
            None => self.fields.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn fields(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.fields.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Views of the record's columns in schema order. Fields not in the schema are ignored.
    pub fn bind<'a>(&'a self, schema: &Schema) -> Result<Bound<'a>, RuntimeError> {
        let mut out = Bound::new();
        for col in schema.columns() {
            let v = self.get(&col.name).ok_or_else(|| RuntimeError::Schema {
                column: col.name.clone(),
                reason: "missing".into(),
            })?;
            let input = match (&col.dtype, v) {
                (DataType::Text, Value::Text(t)) => Input::Text(t),
                (DataType::Scalar, Value::Scalar(x)) => Input::Scalar(*x),
                (DataType::Vector { len, .. }, Value::Vector(xs)) if xs.len() == *len => Input::Dense(xs),
                (DataType::Vector { len, .. }, Value::Vector(xs)) => {
                    return Err(RuntimeError::Schema {
                        column: col.name.clone(),
                        reason: format!("expected {len} values, got {}", xs.len()),
                    })
                }
                (dt, v) => {
                    return Err(RuntimeError::Schema {
                        column: col.name.clone(),
                        reason: format!("expected {dt}, got {}", v.type_name()),
                    })
                }
            };
            out.push(input);
        }
        Ok(out)
    }
}

/// Digest of bound columns; identical inputs give identical digests. Does not allocate.
pub fn digest_inputs(inputs: &[Input<'_>]) -> Checksum {
    let mut d = Digester::default();
    for x in inputs {
        match x {
            Input::Text(t) => {
                d.update(&[1]);
                d.update(&(t.len() as u64).to_le_bytes());
                d.update(t.as_bytes());
            }
            Input::Scalar(v) => {
                d.update(&[2]);
                d.update(&v.to_bits().to_le_bytes());
            }
            Input::Dense(xs) => {
                d.update(&[3]);
                d.update(&(xs.len() as u64).to_le_bytes());
                for v in xs.iter() {
                    d.update(&v.to_bits().to_le_bytes());
                }
            }
            _ => d.update(&[0]),
        }
    }
    d.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Column, Density};

    #[test]
    fn missing_column_is_named() {
        let schema = Schema::single("Text", DataType::Text);
        let err = Record::new().with("Other", "x").bind(&schema).unwrap_err();
        assert!(err.to_string().contains("Text"), "{err}");
    }

    #[test]
    fn binds_in_schema_order() {
        let schema = Schema::new(vec![
            Column::new("b", DataType::Scalar),
            Column::new("a", DataType::vector(Density::Dense, 2).unwrap()),
        ])
        .unwrap();
        let r = Record::new().with("a", vec![1.0, 2.0]).with("b", 3.0);
        let bound = r.bind(&schema).unwrap();
        assert!(matches!(bound[0], Input::Scalar(x) if x == 3.0));
        assert!(matches!(bound[1], Input::Dense(xs) if xs == [1.0, 2.0]));
    }

    #[test]
    fn json_roundtrip() {
        let r = Record::new().with("Text", "hi").with("x", 1.5).with("v", vec![1.0]);
        let s = serde_json::to_string(&r).unwrap();
        let back: Record = serde_json::from_str(&s).unwrap();
        assert_eq!(back.get("Text"), r.get("Text"));
        assert_eq!(back.get("v"), r.get("v"));
    }

    #[test]
    fn digest_separates_fields() {
        let a = digest_inputs(&[Input::Text("ab"), Input::Text("c")]);
        let b = digest_inputs(&[Input::Text("a"), Input::Text("bc")]);
        assert_ne!(a, b);
    }
}
