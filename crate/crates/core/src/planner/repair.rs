//! Recovering structured artifacts from free-form model output.

use std::sync::Arc;

use serde_json::Value;
use thiserror::Error;

use super::ir::{parse_ir_value, QueryIR};
use super::llm::{ChatModel, LlmError};
use crate::dag::{decode_dag, encode_dag, FaDag};
use crate::schema::Schema;
use crate::validator::check_structure;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepairError {
    #[error("no JSON object found")]
    NoJson,
    #[error("output rejected: {0}")]
    Invalid(String),
    #[error("unrepairable after {attempts} attempts: {last}")]
    Unrepairable { attempts: usize, last: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone)]
pub enum Expected {
    QueryIr(Arc<Schema>),
    Dag,
}

#[derive(Debug, Clone)]
pub enum LlmArtifact {
    Ir(QueryIR),
    Dag(FaDag),
}

/// The first balanced JSON object in `text`, ignoring code fences and prose.
pub fn extract_json(text: &str) -> Result<Value, RepairError> {
    let stripped: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n");
    let bytes = stripped.as_bytes();
    let mut start = 0;
    while let Some(off) = stripped[start..].find('{') {
        let open = start + off;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        if let Ok(v) = serde_json::from_str(&stripped[open..=i]) {
                            return Ok(v);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        start = open + 1;
    }
    Err(RepairError::NoJson)
}

/// Extract and validate one artifact, without re-prompting.
pub fn parse_llm_output(text: &str, expected: &Expected) -> Result<LlmArtifact, RepairError> {
    let value = extract_json(text)?;
    match expected {
        Expected::QueryIr(schema) => parse_ir_value(value, schema.clone())
            .map(LlmArtifact::Ir)
            .map_err(|e| RepairError::Invalid(e.to_string())),
        Expected::Dag => {
            let dag = decode_dag(&value.to_string()).map_err(|e| RepairError::Invalid(e.to_string()))?;
            let violations = check_structure(&dag);
            if violations.is_empty() {
                Ok(LlmArtifact::Dag(dag))
            } else {
                let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
                Err(RepairError::Invalid(msgs.join("; ")))
            }
        }
    }
}

/// Ask the model, re-prompting with the rejection reason up to `max_retries` times.
pub fn repair_llm_output(
    model: &dyn ChatModel,
    prompt: &str,
    expected: &Expected,
    max_retries: usize,
) -> Result<LlmArtifact, RepairError> {
    let mut current = prompt.to_string();
    let mut last = String::new();
    for _ in 0..=max_retries {
        let text = model.complete(&current)?;
        match parse_llm_output(&text, expected) {
            Ok(a) => return Ok(a),
            Err(e) => {
                last = e.to_string();
                current =
                    format!("{prompt}\n\nYour previous reply was rejected: {last}\nReply with corrected JSON only.");
            }
        }
    }
    Err(RepairError::Unrepairable {
        attempts: max_retries + 1,
        last,
    })
}

impl LlmArtifact {
    pub fn to_json(&self) -> String {
        match self {
            LlmArtifact::Ir(ir) => ir.to_json(),
            LlmArtifact::Dag(d) => encode_dag(d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<String>>,
        prompts: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Self {
            Self {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                prompts: Mutex::new(Vec::new()),
            }
        }
    }

    impl ChatModel for Scripted {
        fn complete(&self, prompt: &str) -> Result<String, LlmError> {
            self.prompts.lock().unwrap().push(prompt.to_string());
            self.replies
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| LlmError::Network("script exhausted".into()))
        }
    }

    #[test]
    fn fenced_json() {
        let v = extract_json("```json\n{\"a\": 1}\n```").unwrap();
        assert_eq!(v["a"], 1);
    }

    #[test]
    fn prose_then_json() {
        let v = extract_json("Here is the plan: {\"a\": {\"b\": \"}\"}} hope it helps").unwrap();
        assert_eq!(v["a"]["b"], "}");
        assert_eq!(extract_json("no json here"), Err(RepairError::NoJson));
    }

    #[test]
    fn unknown_kind_reprompts_once_then_gives_up() {
        let bad = r#"{"answer_nodes":[],"edges":[],"nodes":{"x":{"kind":"Compress"}}}"#;
        let model = Scripted::new(&[bad, bad, bad]);
        let err = repair_llm_output(&model, "plan it", &Expected::Dag, 1).unwrap_err();
        assert!(matches!(err, RepairError::Unrepairable { attempts: 2, .. }));
        let prompts = model.prompts.lock().unwrap();
        assert_eq!(prompts.len(), 2);
        assert!(prompts[1].contains("Compress"));
    }

    #[test]
    fn second_attempt_can_succeed() {
        let good = r#"{"subqueries":[{"intent":"Count"}]}"#;
        let model = Scripted::new(&["I think {\"subqueries\": []}", good]);
        let schema = Arc::new(Schema::from_json(r#"{"x": {"type": "numeric", "bounds": [0, 1]}}"#).unwrap());
        let out = repair_llm_output(&model, "decompose", &Expected::QueryIr(schema), 2).unwrap();
        assert!(matches!(out, LlmArtifact::Ir(ir) if ir.subqueries.len() == 1));
    }
}
