//! Filter predicates: conjunctions of atomic comparisons over features.

use std::cmp::Ordering;
use std::fmt;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::schema::{FeatureSpec, Schema, SchemaError};

/// A single field of a client record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Num(f64),
    Cat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "in")]
    In,
    #[serde(rename = "not_in")]
    NotIn,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "=",
            Comparator::Ne => "!=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::In => "in",
            Comparator::NotIn => "not_in",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Comparator::Eq => "eq",
            Comparator::Ne => "ne",
            Comparator::Lt => "lt",
            Comparator::Le => "le",
            Comparator::Gt => "gt",
            Comparator::Ge => "ge",
            Comparator::In => "in",
            Comparator::NotIn => "notin",
        }
    }

    pub fn is_set(self) -> bool {
        matches!(self, Comparator::In | Comparator::NotIn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Num(f64),
    Str(String),
}

impl Literal {
    fn cmp_total(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Literal::Num(a), Literal::Num(b)) => a.total_cmp(b),
            (Literal::Num(_), Literal::Str(_)) => Ordering::Less,
            (Literal::Str(_), Literal::Num(_)) => Ordering::Greater,
            (Literal::Str(a), Literal::Str(b)) => a.cmp(b),
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Literal::Str(s) => Some(s),
            Literal::Num(_) => None,
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Num(x) => write!(f, "{x}"),
            Literal::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Set(Vec<Literal>),
    One(Literal),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub feature: String,
    pub op: Comparator,
    pub value: Operand,
}

impl Atom {
    pub fn new(feature: impl Into<String>, op: Comparator, value: Literal) -> Self {
        Self {
            feature: feature.into(),
            op,
            value: Operand::One(value),
        }
    }

    pub fn eq(feature: impl Into<String>, value: impl Into<String>) -> Self {
        Self::new(feature, Comparator::Eq, Literal::Str(value.into()))
    }

    pub fn set(feature: impl Into<String>, op: Comparator, values: Vec<Literal>) -> Self {
        debug_assert!(op.is_set());
        Self {
            feature: feature.into(),
            op,
            value: Operand::Set(values),
        }
    }

    fn normalized(&self) -> Atom {
        let value = match &self.value {
            Operand::Set(vals) => {
                let mut vals = vals.clone();
                vals.sort_by(Literal::cmp_total);
                vals.dedup();
                Operand::Set(vals)
            }
            Operand::One(v) => Operand::One(v.clone()),
        };
        Atom {
            feature: self.feature.clone(),
            op: self.op,
            value,
        }
    }

    fn canonical(&self) -> String {
        serde_json::to_string(&self.normalized()).expect("atom serializes")
    }

    pub fn values(&self) -> &[Literal] {
        match &self.value {
            Operand::Set(v) => v,
            Operand::One(v) => std::slice::from_ref(v),
        }
    }

    pub fn eval(&self, value: &FieldValue) -> bool {
        match (self.op, &self.value, value) {
            (Comparator::In, Operand::Set(set), v) => set.iter().any(|l| lit_eq(l, v)),
            (Comparator::NotIn, Operand::Set(set), v) => !set.iter().any(|l| lit_eq(l, v)),
            (op, Operand::One(lit), v) => match op {
                Comparator::Eq | Comparator::In => lit_eq(lit, v),
                Comparator::Ne | Comparator::NotIn => !lit_eq(lit, v),
                _ => match (lit, v) {
                    (Literal::Num(l), FieldValue::Num(x)) => match op {
                        Comparator::Lt => x < l,
                        Comparator::Le => x <= l,
                        Comparator::Gt => x > l,
                        Comparator::Ge => x >= l,
                        _ => unreachable!(),
                    },
                    _ => false,
                },
            },
            (_, Operand::Set(_), _) => false,
        }
    }

    fn slug(&self) -> String {
        let vals: Vec<String> = self
            .normalized()
            .values()
            .iter()
            .map(|l| match l {
                Literal::Num(x) => format!("{x}").replace('-', "m").replace('.', "p"),
                Literal::Str(s) => s.clone(),
            })
            .collect();
        sanitize(&format!("{}_{}_{}", self.feature, self.op.slug(), vals.join("_")))
    }

    fn check(&self, schema: &Schema) -> Result<(), SchemaError> {
        let spec = schema.get(&self.feature)?;
        let mismatch = |message: &str| SchemaError::TypeMismatch {
            feature: self.feature.clone(),
            message: message.to_string(),
        };
        if self.op.is_set() != matches!(self.value, Operand::Set(_)) {
            return Err(mismatch("`in`/`not_in` take a list, other comparators a scalar"));
        }
        match spec {
            FeatureSpec::Categorical { values } => {
                if !matches!(self.op, Comparator::Eq | Comparator::Ne) && !self.op.is_set() {
                    return Err(mismatch("ordering comparators need a numeric feature"));
                }
                for lit in self.values() {
                    match lit {
                        Literal::Str(s) if values.contains(s) => {}
                        Literal::Str(s) => return Err(mismatch(&format!("`{s}` is not a declared value"))),
                        Literal::Num(_) => return Err(mismatch("expected a string literal")),
                    }
                }
            }
            FeatureSpec::Numeric { .. } => {
                if self.values().iter().any(|l| !matches!(l, Literal::Num(_))) {
                    return Err(mismatch("expected a numeric literal"));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.value {
            Operand::One(v) => write!(f, "{} {} {}", self.feature, self.op.symbol(), v),
            Operand::Set(vals) => {
                let vals: Vec<String> = vals.iter().map(ToString::to_string).collect();
                write!(f, "{} {} {{{}}}", self.feature, self.op.symbol(), vals.join(", "))
            }
        }
    }
}

fn lit_eq(lit: &Literal, value: &FieldValue) -> bool {
    match (lit, value) {
        (Literal::Num(a), FieldValue::Num(b)) => a == b,
        (Literal::Str(a), FieldValue::Cat(b)) => a == b,
        _ => false,
    }
}

pub(crate) fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Conjunction of atoms. The empty conjunction is the trivially-true filter
/// and serializes as JSON `true`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predicate {
    atoms: Vec<Atom>,
}

impl Predicate {
    pub fn always() -> Self {
        Self::default()
    }

    pub fn from_atoms(atoms: Vec<Atom>) -> Self {
        Self { atoms }
    }

    pub fn atom(atom: Atom) -> Self {
        Self { atoms: vec![atom] }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn is_true(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn and(&self, other: &Predicate) -> Predicate {
        let mut atoms = self.atoms.clone();
        atoms.extend(other.atoms.iter().cloned());
        Predicate { atoms }.normalized()
    }

    /// Atoms sorted by their canonical rendering, duplicates removed, set
    /// literals sorted.
    pub fn normalized(&self) -> Predicate {
        let mut keyed: Vec<(String, Atom)> = self
            .atoms
            .iter()
            .map(|a| {
                let n = a.normalized();
                (n.canonical(), n)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0));
        keyed.dedup_by(|a, b| a.0 == b.0);
        Predicate {
            atoms: keyed.into_iter().map(|(_, a)| a).collect(),
        }
    }

    pub fn canonical(&self) -> String {
        serde_json::to_string(&self.normalized()).expect("predicate serializes")
    }

    /// Identifier-safe tag, used to derive deterministic node ids.
    pub fn slug(&self) -> String {
        if self.atoms.is_empty() {
            return "all".into();
        }
        self.normalized()
            .atoms
            .iter()
            .map(Atom::slug)
            .collect::<Vec<_>>()
            .join("_and_")
    }

    pub fn eval(&self, lookup: impl Fn(&str) -> Option<FieldValue>) -> bool {
        self.atoms
            .iter()
            .all(|a| lookup(&a.feature).is_some_and(|v| a.eval(&v)))
    }

    pub fn check(&self, schema: &Schema) -> Result<(), SchemaError> {
        self.atoms.iter().try_for_each(|a| a.check(schema))
    }

    pub fn features(&self) -> impl Iterator<Item = &str> {
        self.atoms.iter().map(|a| a.feature.as_str())
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.atoms.is_empty() {
            return f.write_str("all");
        }
        let parts: Vec<String> = self.atoms.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" and "))
    }
}

impl Serialize for Predicate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.atoms.is_empty() {
            serializer.serialize_bool(true)
        } else {
            self.atoms.serialize(serializer)
        }
    }
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Bool(bool),
            Atoms(Vec<Atom>),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Bool(true) => Ok(Predicate::always()),
            Repr::Bool(false) => Err(de::Error::custom(
                "predicate `false` is not supported; use `true` or a list of atoms",
            )),
            Repr::Atoms(atoms) => Ok(Predicate { atoms }),
        }
    }
}
