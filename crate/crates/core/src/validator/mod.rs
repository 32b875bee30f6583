//! Structural and completeness checks on FA DAGs, and the completion ratio.

pub mod semantics;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::dag::{decode_dag, DecodeError, FaDag, OpKind, SchemaIssue, Slot};
use crate::planner::ir::{AnswerKey, QueryIR};

pub use semantics::answer_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ViolationCode {
    UnknownKind,
    MissingParam,
    OrderViolation,
    MissingStage,
    DanglingOutput,
    IncompleteAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub nodes: Vec<String>,
    pub message: String,
}

impl Violation {
    fn new(code: ViolationCode, nodes: &[&str], message: impl Into<String>) -> Self {
        Self {
            code,
            nodes: nodes.iter().map(|s| s.to_string()).collect(),
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("violation serializes")
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.code)?;
        if !self.nodes.is_empty() {
            write!(f, " [{}]", self.nodes.join(", "))?;
        }
        write!(f, ": {}", self.message)
    }
}

/// One violation per JSON line.
pub fn violations_to_jsonl(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_json() + "\n").collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidatorError {
    #[error("completion ratio of an empty outcome list")]
    EmptyInput,
}

/// Kinds a node may consume from.
fn allowed_inputs(kind: OpKind) -> &'static [OpKind] {
    match kind {
        OpKind::Access => &[],
        OpKind::Encrypt => &[OpKind::Access],
        OpKind::Aggregate => &[OpKind::Encrypt],
        OpKind::NoiseAdd => &[OpKind::Aggregate, OpKind::NoiseAdd],
        OpKind::Decrypt => &[OpKind::NoiseAdd],
        OpKind::Calculate => &[OpKind::Decrypt, OpKind::Calculate],
    }
}

/// Check node validity and pipeline ordering. Empty iff the DAG is sound.
pub fn check_structure(dag: &FaDag) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();

    for (u, v) in dag.edges() {
        let (ku, kv) = (dag.node(u).unwrap().kind, dag.node(v).unwrap().kind);
        if ku.stage() > kv.stage() {
            out.push(Violation::new(
                OrderViolation,
                &[u, v],
                format!("{ku} `{u}` feeds earlier-stage {kv} `{v}`"),
            ));
        }
    }

    for node in dag.nodes() {
        let id = node.id.as_str();
        let kind = node.kind;
        let allowed = allowed_inputs(kind);
        let preds: Vec<&str> = dag.predecessors(id).collect();
        let mut good = Vec::new();
        for p in &preds {
            let pk = dag.node(p).unwrap().kind;
            if allowed.contains(&pk) {
                good.push(*p);
            } else if pk.stage() > kind.stage() {
                // reported by the edge-order pass
            } else if kind == OpKind::Access || allowed.iter().all(|a| pk.stage() > a.stage()) {
                out.push(Violation::new(
                    OrderViolation,
                    &[p, id],
                    format!("{kind} `{id}` cannot consume {pk} `{p}`"),
                ));
            } else {
                out.push(Violation::new(
                    MissingStage,
                    &[p, id],
                    format!("{pk} `{p}` feeds {kind} `{id}` with a stage skipped"),
                ));
            }
        }
        let single = matches!(kind, OpKind::Encrypt | OpKind::NoiseAdd | OpKind::Decrypt);
        if kind != OpKind::Access && preds.is_empty() {
            let wanted: Vec<&str> = allowed.iter().map(|k| k.name()).collect();
            out.push(Violation::new(
                MissingStage,
                &[id],
                format!("{kind} `{id}` has no {} input", wanted.join(" or ")),
            ));
        }
        if single && good.len() > 1 {
            out.push(Violation::new(
                OrderViolation,
                &[id],
                format!("{kind} `{id}` must consume exactly one input, has {}", good.len()),
            ));
        }

        match kind {
            OpKind::Access => {
                let consumed: BTreeSet<String> = dag
                    .successors(id)
                    .filter_map(|s| dag.node(s))
                    .filter(|s| s.kind == OpKind::Encrypt)
                    .filter_map(|s| s.encrypted_slot().map(Slot::canonical))
                    .collect();
                for slot in &node.outputs {
                    if !consumed.contains(&slot.canonical()) {
                        out.push(Violation::new(
                            DanglingOutput,
                            &[id],
                            format!("output `{slot}` of `{id}` is never encrypted"),
                        ));
                    }
                }
            }
            OpKind::Encrypt => {
                let slot = node.encrypted_slot().map(Slot::canonical).unwrap_or_default();
                for a in &good {
                    let emitted = dag.node(a).unwrap().outputs.iter().any(|s| s.canonical() == slot);
                    if !emitted {
                        out.push(Violation::new(
                            MissingParam,
                            &[a, id],
                            format!("`{id}` encrypts `{slot}`, which `{a}` does not emit"),
                        ));
                    }
                }
            }
            OpKind::Calculate => {
                let vars = node.calc_expr.as_ref().map(|e| e.vars()).unwrap_or_default();
                for v in &vars {
                    if !good.contains(&v.as_str()) {
                        out.push(Violation::new(
                            MissingParam,
                            &[id],
                            format!("`{id}` references `{v}`, which is not a Decrypt or Calculate input"),
                        ));
                    }
                }
                for p in &good {
                    if !vars.contains(*p) {
                        out.push(Violation::new(
                            DanglingOutput,
                            &[p, id],
                            format!("`{id}` consumes `{p}` without using it"),
                        ));
                    }
                }
            }
            _ => {}
        }

        let is_answer = dag.answer_nodes().iter().any(|a| a == id);
        if dag.successors(id).next().is_none() && !is_answer {
            out.push(Violation::new(
                DanglingOutput,
                &[id],
                format!("{kind} `{id}` is a sink but not an answer"),
            ));
        }
    }

    if dag.answer_nodes().is_empty() {
        out.push(Violation::new(IncompleteAnswer, &[], "plan has no answer nodes"));
    }
    for a in dag.answer_nodes() {
        let k = dag.node(a).unwrap().kind;
        if !matches!(k, OpKind::Calculate | OpKind::Decrypt) {
            out.push(Violation::new(
                IncompleteAnswer,
                &[a],
                format!("answer `{a}` is a {k}, not a Calculate or Decrypt"),
            ));
        }
    }
    out
}

/// One IncompleteAnswer per sub-query or combine step that no answer node computes.
pub fn check_completeness(dag: &FaDag, ir: &QueryIR) -> Vec<Violation> {
    let map = match answer_map(dag, ir) {
        Ok(m) => m,
        Err(e) => {
            return vec![Violation::new(
                ViolationCode::IncompleteAnswer,
                &[],
                format!("query cannot be interpreted: {e}"),
            )]
        }
    };
    let mut missing: BTreeMap<(u8, usize), Vec<AnswerKey>> = BTreeMap::new();
    for (key, hit) in map {
        if hit.is_none() {
            let owner = match key {
                AnswerKey::Query(i) | AnswerKey::Side(i, _) | AnswerKey::Group(i, _) => (0, i),
                AnswerKey::Combine(k) => (1, k),
            };
            missing.entry(owner).or_default().push(key);
        }
    }
    missing
        .into_iter()
        .map(|((kind, i), keys)| {
            let keys: Vec<String> = keys.iter().map(ToString::to_string).collect();
            let what = if kind == 0 {
                format!("sub-query {} ({})", i + 1, ir.subqueries[i].describe())
            } else {
                let c = &ir.final_combine[i];
                format!("combine {} ({:?} of {} and {})", i + 1, c.op, c.left, c.right)
            };
            Violation::new(
                ViolationCode::IncompleteAnswer,
                &[],
                format!("no answer node computes {what}; missing {}", keys.join(", ")),
            )
        })
        .collect()
}

/// Structure and completeness together.
pub fn validate(dag: &FaDag, ir: &QueryIR) -> Vec<Violation> {
    let mut v = check_structure(dag);
    v.extend(check_completeness(dag, ir));
    v
}

/// Decode then check structure, reporting decode failures as violations.
pub fn validate_encoded(text: &str) -> Result<FaDag, Vec<Violation>> {
    match decode_dag(text) {
        Ok(dag) => {
            let v = check_structure(&dag);
            if v.is_empty() {
                Ok(dag)
            } else {
                Err(v)
            }
        }
        Err(e) => Err(vec![decode_violation(&e)]),
    }
}

fn decode_violation(e: &DecodeError) -> Violation {
    let (code, node) = match e {
        DecodeError::Parse { .. } => (ViolationCode::MissingParam, None),
        DecodeError::Schema { issue, node, .. } => (
            match issue {
                SchemaIssue::UnknownKind => ViolationCode::UnknownKind,
                SchemaIssue::Cycle => ViolationCode::OrderViolation,
                SchemaIssue::MissingParam | SchemaIssue::UnknownNode | SchemaIssue::Other => {
                    ViolationCode::MissingParam
                }
            },
            node.clone(),
        ),
    };
    Violation {
        code,
        nodes: node.into_iter().collect(),
        message: e.to_string(),
    }
}

pub fn completion_ratio(outcomes: &[bool]) -> Result<f64, ValidatorError> {
    if outcomes.is_empty() {
        return Err(ValidatorError::EmptyInput);
    }
    Ok(outcomes.iter().filter(|b| **b).count() as f64 / outcomes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calc::CalcExpr;
    use crate::dag::Node;
    use crate::predicate::Predicate;

    fn chain(with_noise: bool) -> FaDag {
        let mut d = FaDag::new();
        d.add_node(Node::access(
            "a",
            Predicate::always(),
            vec![Slot::Value("salary".into()), Slot::Indicator],
        ))
        .unwrap();
        for (s, slot) in [("s", Slot::Value("salary".into())), ("n", Slot::Indicator)] {
            d.add_node(Node::encrypt(format!("e{s}"), slot)).unwrap();
            d.add_node(Node::aggregate(format!("g{s}"))).unwrap();
            d.add_node(Node::decrypt(format!("d{s}"))).unwrap();
            d.add_edge("a", &format!("e{s}")).unwrap();
            d.add_edge(&format!("e{s}"), &format!("g{s}")).unwrap();
            if with_noise {
                d.add_node(Node::noise(format!("n{s}"), 1.0, 1.0)).unwrap();
                d.add_edge(&format!("g{s}"), &format!("n{s}")).unwrap();
                d.add_edge(&format!("n{s}"), &format!("d{s}")).unwrap();
            } else {
                d.add_edge(&format!("g{s}"), &format!("d{s}")).unwrap();
            }
        }
        d.add_node(Node::calculate("c", CalcExpr::parse("ds / dn").unwrap()))
            .unwrap();
        d.add_edge("ds", "c").unwrap();
        d.add_edge("dn", "c").unwrap();
        d.add_answer("c").unwrap();
        d
    }

    fn codes(v: &[Violation]) -> Vec<ViolationCode> {
        v.iter().map(|x| x.code).collect()
    }

    #[test]
    fn full_pipeline_is_clean() {
        assert_eq!(check_structure(&chain(true)), vec![]);
    }

    #[test]
    fn missing_noise_is_a_missing_stage() {
        let v = check_structure(&chain(false));
        assert!(codes(&v).contains(&ViolationCode::MissingStage));
    }

    #[test]
    fn encrypt_feeding_access_is_out_of_order() {
        let mut d = FaDag::new();
        d.add_node(Node::encrypt("e", Slot::Indicator)).unwrap();
        d.add_node(Node::access("a", Predicate::always(), vec![Slot::Indicator]))
            .unwrap();
        d.add_edge("e", "a").unwrap();
        assert!(codes(&check_structure(&d)).contains(&ViolationCode::OrderViolation));
    }

    #[test]
    fn answers_must_be_decrypt_or_calculate() {
        let mut d = chain(true);
        d.set_answers(vec!["gs".into()]).unwrap();
        assert!(codes(&check_structure(&d)).contains(&ViolationCode::IncompleteAnswer));
    }

    #[test]
    fn unknown_kind_text_is_reported() {
        let text = r#"{"answer_nodes":[],"edges":[],"nodes":{"x":{"kind":"Compress"}}}"#;
        let v = validate_encoded(text).unwrap_err();
        assert_eq!(codes(&v), vec![ViolationCode::UnknownKind]);
    }

    #[test]
    fn violations_are_json_lines() {
        let v = check_structure(&chain(false));
        let text = violations_to_jsonl(&v);
        assert_eq!(text.lines().count(), v.len());
        for line in text.lines() {
            let parsed: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(parsed["code"].is_string());
        }
    }

    #[test]
    fn ratio_examples() {
        let mut xs = vec![true; 19];
        xs.push(false);
        assert_eq!(completion_ratio(&xs).unwrap(), 0.95);
        assert_eq!(completion_ratio(&[true; 20]).unwrap(), 1.0);
        assert_eq!(completion_ratio(&[false; 20]).unwrap(), 0.0);
        assert_eq!(completion_ratio(&[]), Err(ValidatorError::EmptyInput));
    }
}
