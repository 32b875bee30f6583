//! Client-record schema: feature names, types, categorical domains and
//! numeric bounds used for sensitivity calibration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{feature}`: {message}")]
    TypeMismatch { feature: String, message: String },
    #[error("invalid schema: {0}")]
    Invalid(String),
    #[error("failed to read schema: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse schema: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FeatureSpec {
    Categorical {
        values: Vec<String>,
    },
    Numeric {
        bounds: [f64; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sensitivity: Option<f64>,
    },
}

impl FeatureSpec {
    pub fn is_categorical(&self) -> bool {
        matches!(self, FeatureSpec::Categorical { .. })
    }
}

/// Feature name to its declared type. One record per client follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    features: BTreeMap<String, FeatureSpec>,
}

impl Schema {
    pub fn new(features: BTreeMap<String, FeatureSpec>) -> Result<Self, SchemaError> {
        if features.is_empty() {
            return Err(SchemaError::Invalid("schema has no features".into()));
        }
        for (name, spec) in &features {
            match spec {
                FeatureSpec::Categorical { values } => {
                    if values.is_empty() {
                        return Err(SchemaError::Invalid(format!(
                            "categorical feature `{name}` has no values"
                        )));
                    }
                    let mut seen = std::collections::BTreeSet::new();
                    if !values.iter().all(|v| seen.insert(v)) {
                        return Err(SchemaError::Invalid(format!(
                            "categorical feature `{name}` lists a value twice"
                        )));
                    }
                }
                FeatureSpec::Numeric {
                    bounds: [lo, hi],
                    sensitivity,
                } => {
                    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                        return Err(SchemaError::Invalid(format!(
                            "numeric feature `{name}` has invalid bounds"
                        )));
                    }
                    if let Some(s) = sensitivity {
                        if !(s.is_finite() && *s > 0.0) {
                            return Err(SchemaError::Invalid(format!(
                                "numeric feature `{name}` has nonpositive sensitivity"
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self { features })
    }

    /// Featureless stand-in used before an IR is bound to its schema.
    pub(crate) fn placeholder() -> Self {
        Self {
            features: BTreeMap::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let features: BTreeMap<String, FeatureSpec> = serde_json::from_str(text)?;
        Self::new(features)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SchemaError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.features).expect("schema serializes")
    }

    pub fn get(&self, feature: &str) -> Result<&FeatureSpec, SchemaError> {
        self.features
            .get(feature)
            .ok_or_else(|| SchemaError::UnknownFeature(feature.to_string()))
    }

    pub fn contains(&self, feature: &str) -> bool {
        self.features.contains_key(feature)
    }

    pub fn features(&self) -> impl Iterator<Item = (&str, &FeatureSpec)> {
        self.features.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Enumerated domain of a categorical feature.
    pub fn domain(&self, feature: &str) -> Result<&[String], SchemaError> {
        match self.get(feature)? {
            FeatureSpec::Categorical { values } => Ok(values),
            FeatureSpec::Numeric { .. } => Err(SchemaError::TypeMismatch {
                feature: feature.to_string(),
                message: "expected a categorical feature".into(),
            }),
        }
    }

    /// L1 sensitivity of a per-client value chain over `feature`: the declared
    /// sensitivity, or the largest absolute bound.
    pub fn value_sensitivity(&self, feature: &str) -> Result<f64, SchemaError> {
        match self.get(feature)? {
            FeatureSpec::Numeric {
                sensitivity: Some(s), ..
            } => Ok(*s),
            FeatureSpec::Numeric {
                bounds: [lo, hi],
                sensitivity: None,
            } => {
                let bound = lo.abs().max(hi.abs());
                if bound > 0.0 {
                    Ok(bound)
                } else {
                    Ok(1.0)
                }
            }
            FeatureSpec::Categorical { .. } => Err(SchemaError::TypeMismatch {
                feature: feature.to_string(),
                message: "value aggregation needs a numeric feature".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixed_schema() {
        let schema = Schema::from_json(
            r#"{"role": {"type": "categorical", "values": ["professor", "phd"]},
                "salary": {"type": "numeric", "bounds": [0, 500], "sensitivity": 250}}"#,
        )
        .unwrap();
        assert_eq!(schema.len(), 2);
        assert_eq!(schema.domain("role").unwrap().len(), 2);
        assert_eq!(schema.value_sensitivity("salary").unwrap(), 250.0);
        assert!(schema.domain("salary").is_err());
    }

    #[test]
    fn sensitivity_falls_back_to_bounds() {
        let schema = Schema::from_json(r#"{"x": {"type": "numeric", "bounds": [-80, 40]}}"#).unwrap();
        assert_eq!(schema.value_sensitivity("x").unwrap(), 80.0);
    }

    #[test]
    fn rejects_empty_domain() {
        assert!(Schema::from_json(r#"{"x": {"type": "categorical", "values": []}}"#).is_err());
    }
}
