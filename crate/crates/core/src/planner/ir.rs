//! Structured query IR: a query decomposed into single-intent sub-queries
//! plus implied combination steps.
//!
//! ```json
//! {"text": "average salary and the professor/PhD gap",
//!  "subqueries": [
//!    {"intent": "Mean", "feature": "salary", "filter": true},
//!    {"intent": "Mean", "feature": "salary",
//!     "filter": [{"feature": "role", "op": "=", "value": "professor"}]},
//!    {"intent": "Mean", "feature": "salary",
//!     "filter": [{"feature": "role", "op": "=", "value": "phd"}]}],
//!  "final_combine": [{"op": "diff", "left": 2, "right": 3}]}
//! ```
//!
//! Sub-query references in `final_combine` are 1-based.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predicate::{Atom, Comparator, Literal, Predicate};
use crate::schema::{FeatureSpec, Schema, SchemaError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown intent `{0}`")]
    UnknownIntent(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("sub-query {index}: {message}")]
    Arity { index: usize, message: String },
    #[error("sub-query {index}: {message}")]
    Invalid { index: usize, message: String },
    #[error("final_combine[{index}]: {message}")]
    UnresolvedReference { index: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Intent {
    Count,
    Sum,
    Mean,
    Percentage,
    Ratio,
    Comparison,
    GroupBy,
}

impl Intent {
    pub const ALL: [Intent; 7] = [
        Intent::Count,
        Intent::Sum,
        Intent::Mean,
        Intent::Percentage,
        Intent::Ratio,
        Intent::Comparison,
        Intent::GroupBy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Intent::Count => "Count",
            Intent::Sum => "Sum",
            Intent::Mean => "Mean",
            Intent::Percentage => "Percentage",
            Intent::Ratio => "Ratio",
            Intent::Comparison => "Comparison",
            Intent::GroupBy => "GroupBy",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.name() == s)
    }

    /// Intents answered by a single chain template.
    pub fn is_basic(self) -> bool {
        !matches!(self, Intent::Comparison | Intent::GroupBy)
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One subgroup of a GroupBy sub-query.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub label: String,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQuery {
    #[serde(serialize_with = "ser_intent", deserialize_with = "de_intent")]
    pub intent: Intent,
    /// Target feature (Sum, Mean, Ratio numerator, and their grouped forms).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<String>,
    /// Ratio denominator feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denominator: Option<String>,
    /// Percentage: the condition whose share is measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Predicate>,
    #[serde(default)]
    pub filter: Predicate,
    /// Comparison and GroupBy: the basic intent evaluated per side or group.
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "ser_opt_intent",
        deserialize_with = "de_opt_intent"
    )]
    pub measure: Option<Intent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_by: Option<String>,
    /// Bucket edges for grouping by a numeric feature: `[e0, e1, ..., ek]`
    /// yields the k half-open ranges `[e(i), e(i+1))`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<Vec<Predicate>>,
    #[serde(skip)]
    pub groups: Vec<Group>,
}

fn ser_intent<S: serde::Serializer>(i: &Intent, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(i.name())
}

fn de_intent<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Intent, D::Error> {
    let s = String::deserialize(d)?;
    Intent::from_name(&s).ok_or_else(|| serde::de::Error::custom(UnknownIntentMarker(s)))
}

fn ser_opt_intent<S: serde::Serializer>(i: &Option<Intent>, s: S) -> Result<S::Ok, S::Error> {
    match i {
        Some(i) => s.serialize_str(i.name()),
        None => s.serialize_none(),
    }
}

fn de_opt_intent<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Intent>, D::Error> {
    de_intent(d).map(Some)
}

struct UnknownIntentMarker(String);

impl fmt::Display for UnknownIntentMarker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown intent `{}`", self.0)
    }
}

impl SubQuery {
    pub fn new(intent: Intent) -> Self {
        Self {
            intent,
            feature: None,
            denominator: None,
            condition: None,
            filter: Predicate::always(),
            measure: None,
            group_by: None,
            buckets: None,
            compare: None,
            groups: Vec::new(),
        }
    }

    pub fn mean(feature: &str, filter: Predicate) -> Self {
        Self {
            feature: Some(feature.into()),
            filter,
            ..Self::new(Intent::Mean)
        }
    }

    pub fn count(filter: Predicate) -> Self {
        Self {
            filter,
            ..Self::new(Intent::Count)
        }
    }

    /// The basic intent whose template answers this sub-query.
    pub fn basic_intent(&self) -> Intent {
        if self.intent.is_basic() {
            self.intent
        } else {
            self.measure.unwrap_or(Intent::Mean)
        }
    }

    fn validate(&mut self, index: usize, schema: &Schema) -> Result<(), IrError> {
        let arity = |message: &str| IrError::Arity {
            index,
            message: message.to_string(),
        };
        let invalid = |message: String| IrError::Invalid { index, message };
        let schema_err = |e: SchemaError| match e {
            SchemaError::UnknownFeature(f) => IrError::UnknownFeature(f),
            other => invalid(other.to_string()),
        };

        match (self.intent, &self.compare) {
            (Intent::Comparison, Some(c)) if c.len() == 2 => {}
            (Intent::Comparison, _) => return Err(arity("Comparison needs exactly two compare predicates")),
            (_, Some(_)) => return Err(arity("only Comparison takes compare predicates")),
            _ => {}
        }
        match (self.intent.is_basic(), self.measure) {
            (true, Some(_)) => return Err(invalid("measure is only used by Comparison and GroupBy".into())),
            (false, None) => return Err(invalid(format!("{} requires a measure intent", self.intent))),
            (false, Some(m)) if !m.is_basic() => return Err(invalid(format!("measure `{m}` must be a basic intent"))),
            _ => {}
        }
        if self.intent != Intent::GroupBy && (self.group_by.is_some() || self.buckets.is_some()) {
            return Err(invalid("group_by is only used by GroupBy".into()));
        }

        let numeric = |f: &str| -> Result<(), IrError> {
            match schema.get(f).map_err(schema_err)? {
                FeatureSpec::Numeric { .. } => Ok(()),
                FeatureSpec::Categorical { .. } => Err(invalid(format!("feature `{f}` must be numeric"))),
            }
        };
        let basic = self.basic_intent();
        match basic {
            Intent::Sum | Intent::Mean => {
                numeric(
                    self.feature
                        .as_deref()
                        .ok_or_else(|| invalid(format!("{basic} needs a target feature")))?,
                )?;
            }
            Intent::Ratio => {
                numeric(
                    self.feature
                        .as_deref()
                        .ok_or_else(|| invalid("Ratio needs a numerator feature".into()))?,
                )?;
                numeric(
                    self.denominator
                        .as_deref()
                        .ok_or_else(|| invalid("Ratio needs a denominator feature".into()))?,
                )?;
                if self.feature == self.denominator {
                    return Err(invalid("Ratio numerator and denominator must differ".into()));
                }
            }
            Intent::Count => {
                if let Some(f) = &self.feature {
                    schema.get(f).map_err(schema_err)?;
                }
            }
            Intent::Percentage => {
                if self.condition.is_none() {
                    return Err(invalid("Percentage needs a condition".into()));
                }
            }
            Intent::Comparison | Intent::GroupBy => unreachable!(),
        }
        if basic != Intent::Ratio && self.denominator.is_some() {
            return Err(invalid("denominator is only used by Ratio".into()));
        }
        if basic != Intent::Percentage && self.condition.is_some() {
            return Err(invalid("condition is only used by Percentage".into()));
        }

        self.filter.check(schema).map_err(schema_err)?;
        if let Some(c) = &self.condition {
            c.check(schema).map_err(schema_err)?;
        }
        for p in self.compare.iter().flatten() {
            p.check(schema).map_err(schema_err)?;
        }

        self.groups.clear();
        if self.intent == Intent::GroupBy {
            let g = self
                .group_by
                .clone()
                .ok_or_else(|| invalid("GroupBy needs a group_by feature".into()))?;
            match schema.get(&g).map_err(schema_err)? {
                FeatureSpec::Categorical { values } => {
                    if self.buckets.is_some() {
                        return Err(invalid("buckets apply to numeric features only".into()));
                    }
                    self.groups = values
                        .iter()
                        .map(|v| Group {
                            label: format!("{g} = {v}"),
                            predicate: Predicate::atom(Atom::eq(&g, v)),
                        })
                        .collect();
                }
                FeatureSpec::Numeric { .. } => {
                    let edges = self
                        .buckets
                        .as_ref()
                        .ok_or_else(|| invalid(format!("grouping by numeric `{g}` needs explicit buckets")))?;
                    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
                        return Err(invalid("bucket edges must be strictly increasing, at least two".into()));
                    }
                    self.groups = edges
                        .windows(2)
                        .map(|w| Group {
                            label: format!("{} <= {g} < {}", w[0], w[1]),
                            predicate: Predicate::from_atoms(vec![
                                Atom::new(&g, Comparator::Ge, Literal::Num(w[0])),
                                Atom::new(&g, Comparator::Lt, Literal::Num(w[1])),
                            ]),
                        })
                        .collect();
                }
            }
        }
        Ok(())
    }

    /// Human-readable description used by the answerer.
    pub fn describe(&self) -> String {
        let scope = if self.filter.is_true() {
            String::new()
        } else {
            format!(" where {}", self.filter)
        };
        describe_basic(self.basic_intent(), self) + &scope
    }
}

pub fn describe_basic(intent: Intent, sub: &SubQuery) -> String {
    let f = sub.feature.as_deref().unwrap_or("?");
    match intent {
        Intent::Count => "the number of clients".into(),
        Intent::Sum => format!("the total {f}"),
        Intent::Mean => format!("the average {f}"),
        Intent::Percentage => format!(
            "the share of clients with {}",
            sub.condition.as_ref().map(ToString::to_string).unwrap_or_default()
        ),
        Intent::Ratio => format!(
            "the ratio of total {f} to total {}",
            sub.denominator.as_deref().unwrap_or("?")
        ),
        Intent::Comparison | Intent::GroupBy => intent.name().to_lowercase(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineOp {
    Diff,
    Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combine {
    pub op: CombineOp,
    /// 1-based sub-query index.
    pub left: usize,
    /// 1-based sub-query index.
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryIR {
    #[serde(default)]
    pub text: String,
    pub subqueries: Vec<SubQuery>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub final_combine: Vec<Combine>,
    #[serde(skip, default = "empty_schema")]
    schema: Arc<Schema>,
}

fn empty_schema() -> Arc<Schema> {
    Arc::new(Schema::placeholder())
}

/// Identifies one value the query must report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnswerKey {
    /// Answer of a basic sub-query, or the difference of a Comparison.
    Query(usize),
    /// One side (0 or 1) of a Comparison.
    Side(usize, usize),
    /// One group of a GroupBy.
    Group(usize, usize),
    Combine(usize),
}

impl fmt::Display for AnswerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerKey::Query(i) => write!(f, "q{}", i + 1),
            AnswerKey::Side(i, s) => write!(f, "q{}.{}", i + 1, if *s == 0 { 'a' } else { 'b' }),
            AnswerKey::Group(i, g) => write!(f, "q{}.g{}", i + 1, g + 1),
            AnswerKey::Combine(k) => write!(f, "c{}", k + 1),
        }
    }
}

impl QueryIR {
    pub fn new(
        text: impl Into<String>,
        subqueries: Vec<SubQuery>,
        final_combine: Vec<Combine>,
        schema: Arc<Schema>,
    ) -> Result<Self, IrError> {
        let mut ir = Self {
            text: text.into(),
            subqueries,
            final_combine,
            schema,
        };
        ir.validate()?;
        Ok(ir)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn schema_arc(&self) -> &Arc<Schema> {
        &self.schema
    }

    fn validate(&mut self) -> Result<(), IrError> {
        if self.subqueries.is_empty() {
            return Err(IrError::Invalid {
                index: 0,
                message: "query has no sub-queries".into(),
            });
        }
        let schema = self.schema.clone();
        for (i, sub) in self.subqueries.iter_mut().enumerate() {
            sub.validate(i + 1, &schema)?;
        }
        for (k, c) in self.final_combine.iter().enumerate() {
            for r in [c.left, c.right] {
                let target = r.checked_sub(1).and_then(|i| self.subqueries.get(i)).ok_or_else(|| {
                    IrError::UnresolvedReference {
                        index: k,
                        message: format!("no sub-query {r}"),
                    }
                })?;
                if target.intent == Intent::GroupBy {
                    return Err(IrError::UnresolvedReference {
                        index: k,
                        message: format!("sub-query {r} has no single answer"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Every value the answer must contain, in report order.
    pub fn answer_keys(&self) -> Vec<AnswerKey> {
        let mut keys = Vec::new();
        for (i, sub) in self.subqueries.iter().enumerate() {
            match sub.intent {
                Intent::Comparison => {
                    keys.push(AnswerKey::Side(i, 0));
                    keys.push(AnswerKey::Side(i, 1));
                    keys.push(AnswerKey::Query(i));
                }
                Intent::GroupBy => {
                    keys.extend((0..sub.groups.len()).map(|g| AnswerKey::Group(i, g)));
                }
                _ => keys.push(AnswerKey::Query(i)),
            }
        }
        keys.extend((0..self.final_combine.len()).map(AnswerKey::Combine));
        keys
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ir serializes")
    }
}

/// Parse the structured-IR JSON and validate it against a schema.
pub fn parse_ir(text: &str, schema: Arc<Schema>) -> Result<QueryIR, IrError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| IrError::Parse(e.to_string()))?;
    parse_ir_value(value, schema)
}

pub(crate) fn parse_ir_value(value: serde_json::Value, schema: Arc<Schema>) -> Result<QueryIR, IrError> {
    let mut ir: QueryIR = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        match msg.strip_prefix("unknown intent `") {
            Some(rest) => IrError::UnknownIntent(rest.split('`').next().unwrap_or("").to_string()),
            None => IrError::Parse(msg),
        }
    })?;
    ir.schema = schema;
    ir.validate()?;
    Ok(ir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Arc<Schema> {
        Arc::new(
            Schema::from_json(
                r#"{"role": {"type": "categorical", "values": ["professor", "phd", "staff"]},
                    "salary": {"type": "numeric", "bounds": [0, 300]},
                    "hours": {"type": "numeric", "bounds": [0, 99]}}"#,
            )
            .unwrap(),
        )
    }

    #[test]
    fn single_mean() {
        let ir = parse_ir(
            r#"{"subqueries":[{"intent":"Mean","feature":"salary","filter":true}]}"#,
            schema(),
        )
        .unwrap();
        assert_eq!(ir.subqueries.len(), 1);
        assert_eq!(ir.subqueries[0].intent, Intent::Mean);
        assert!(ir.subqueries[0].filter.is_true());
        assert_eq!(ir.answer_keys(), vec![AnswerKey::Query(0)]);
    }

    #[test]
    fn unknown_intent() {
        let err = parse_ir(r#"{"subqueries":[{"intent":"Median","feature":"salary"}]}"#, schema()).unwrap_err();
        assert_eq!(err, IrError::UnknownIntent("Median".into()));
    }

    #[test]
    fn comparison_arity() {
        let err = parse_ir(
            r#"{"subqueries":[{"intent":"Comparison","measure":"Mean","feature":"salary",
                "compare":[[{"feature":"role","op":"=","value":"phd"}]]}]}"#,
            schema(),
        )
        .unwrap_err();
        assert!(matches!(err, IrError::Arity { index: 1, .. }));
        let err = parse_ir(
            r#"{"subqueries":[{"intent":"Mean","feature":"salary","compare":[true,true]}]}"#,
            schema(),
        )
        .unwrap_err();
        assert!(matches!(err, IrError::Arity { .. }));
    }

    #[test]
    fn unknown_feature() {
        let err = parse_ir(r#"{"subqueries":[{"intent":"Mean","feature":"height"}]}"#, schema()).unwrap_err();
        assert_eq!(err, IrError::UnknownFeature("height".into()));
    }

    #[test]
    fn group_by_expands_schema_values() {
        let ir = parse_ir(
            r#"{"subqueries":[{"intent":"GroupBy","measure":"Mean","feature":"salary","group_by":"role"}]}"#,
            schema(),
        )
        .unwrap();
        assert_eq!(ir.subqueries[0].groups.len(), 3);
        assert_eq!(ir.answer_keys().len(), 3);
    }

    #[test]
    fn numeric_group_by_needs_buckets() {
        let base = r#"{"subqueries":[{"intent":"GroupBy","measure":"Count","group_by":"hours"}]}"#;
        assert!(parse_ir(base, schema()).is_err());
        let ir = parse_ir(
            r#"{"subqueries":[{"intent":"GroupBy","measure":"Count","group_by":"hours","buckets":[0,20,40,100]}]}"#,
            schema(),
        )
        .unwrap();
        assert_eq!(ir.subqueries[0].groups.len(), 3);
    }

    #[test]
    fn combine_references_are_checked() {
        let ok = r#"{"subqueries":[{"intent":"Count"},{"intent":"Count"}],
                     "final_combine":[{"op":"ratio","left":1,"right":2}]}"#;
        assert!(parse_ir(ok, schema()).is_ok());
        let bad = r#"{"subqueries":[{"intent":"Count"}],
                      "final_combine":[{"op":"diff","left":1,"right":3}]}"#;
        assert!(matches!(
            parse_ir(bad, schema()),
            Err(IrError::UnresolvedReference { .. })
        ));
    }

    #[test]
    fn json_roundtrip() {
        let text = r#"{"text":"q","subqueries":[{"intent":"Percentage","condition":[{"feature":"hours","op":">","value":40}],"filter":true}]}"#;
        let ir = parse_ir(text, schema()).unwrap();
        let again = parse_ir(&ir.to_json(), schema()).unwrap();
        assert_eq!(ir, again);
    }
}
