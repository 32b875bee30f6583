//! JSON wire format for [`FaDag`].
//!
//! ```text
//! {"answer_nodes": [id, ...],
//!  "edges": [[from, to], ...],
//!  "nodes": {id: {"agg_fn", "calc_expr", "dp_params": {"epsilon", "sensitivity"},
//!                 "feature", "kind", "outputs", "predicate"}}}
//! ```
//!
//! Absent optional fields are omitted, never null. Keys are emitted sorted.

use serde_json::{Map, Value};
use thiserror::Error;

use super::{DagError, DpParams, FaDag, Node, OpKind, Slot};
use crate::calc::CalcExpr;
use crate::predicate::Predicate;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaIssue {
    UnknownKind,
    MissingParam,
    UnknownNode,
    Cycle,
    Other,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation at `{field}`: {message}")]
    Schema {
        field: String,
        message: String,
        issue: SchemaIssue,
        /// Node the violation concerns, when there is one.
        node: Option<String>,
    },
}

impl DecodeError {
    fn schema(field: impl Into<String>, message: impl Into<String>, issue: SchemaIssue) -> Self {
        DecodeError::Schema {
            field: field.into(),
            message: message.into(),
            issue,
            node: None,
        }
    }

    fn at_node(mut self, id: &str) -> Self {
        if let DecodeError::Schema { node, .. } = &mut self {
            *node = Some(id.to_string());
        }
        self
    }
}

fn insert_sorted(pairs: Vec<(&str, Value)>) -> Value {
    let mut pairs = pairs;
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    let mut map = Map::new();
    for (k, v) in pairs {
        map.insert(k.to_string(), v);
    }
    Value::Object(map)
}

fn node_value(node: &Node) -> Value {
    let mut fields: Vec<(&str, Value)> = vec![("kind", Value::String(node.kind.name().into()))];
    if let Some(f) = &node.feature {
        fields.push(("feature", Value::String(f.clone())));
    }
    if let Some(p) = &node.predicate {
        fields.push(("predicate", sorted(serde_json::to_value(p).unwrap())));
    }
    if !node.outputs.is_empty() {
        fields.push(("outputs", sorted(serde_json::to_value(&node.outputs).unwrap())));
    }
    if let Some(a) = &node.agg_fn {
        fields.push(("agg_fn", serde_json::to_value(a).unwrap()));
    }
    if let Some(dp) = &node.dp_params {
        fields.push((
            "dp_params",
            insert_sorted(vec![
                ("epsilon", serde_json::to_value(dp.epsilon).unwrap()),
                ("sensitivity", serde_json::to_value(dp.sensitivity).unwrap()),
            ]),
        ));
    }
    if let Some(c) = &node.calc_expr {
        fields.push(("calc_expr", Value::String(c.to_string())));
    }
    insert_sorted(fields)
}

/// Recursively re-key objects so the output is sorted whatever map backing
/// serde_json was built with.
fn sorted(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut pairs: Vec<(String, Value)> = m.into_iter().collect();
            pairs.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = Map::new();
            for (k, v) in pairs {
                out.insert(k, sorted(v));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sorted).collect()),
        other => other,
    }
}

pub(crate) fn dag_value(dag: &FaDag) -> Value {
    let mut nodes = Map::new();
    for n in dag.nodes() {
        nodes.insert(n.id.clone(), node_value(n));
    }
    let edges: Vec<Value> = dag
        .edges()
        .map(|(f, t)| Value::Array(vec![f.into(), t.into()]))
        .collect();
    let answers: Vec<Value> = dag.answer_nodes().iter().map(|a| a.as_str().into()).collect();
    insert_sorted(vec![
        ("answer_nodes", Value::Array(answers)),
        ("edges", Value::Array(edges)),
        ("nodes", Value::Object(nodes)),
    ])
}

/// Compact, deterministic encoding.
pub fn encode_dag(dag: &FaDag) -> String {
    dag_value(dag).to_string()
}

pub fn encode_dag_pretty(dag: &FaDag) -> String {
    let mut s = serde_json::to_string_pretty(&dag_value(dag)).unwrap();
    s.push('\n');
    s
}

pub fn decode_dag(text: &str) -> Result<FaDag, DecodeError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DecodeError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    decode_value(&value)
}

pub(crate) fn decode_value(value: &Value) -> Result<FaDag, DecodeError> {
    use SchemaIssue::*;
    let top = value
        .as_object()
        .ok_or_else(|| DecodeError::schema("$", "expected an object", Other))?;
    for key in top.keys() {
        if !matches!(key.as_str(), "nodes" | "edges" | "answer_nodes") {
            return Err(DecodeError::schema(key, "unknown top-level field", Other));
        }
    }
    let nodes = top
        .get("nodes")
        .ok_or_else(|| DecodeError::schema("nodes", "missing field", Other))?
        .as_object()
        .ok_or_else(|| DecodeError::schema("nodes", "expected an object", Other))?;

    let mut dag = FaDag::new();
    for (id, raw) in nodes {
        let node = decode_node(id, raw).map_err(|e| e.at_node(id))?;
        dag.add_node(node).map_err(|e| match e {
            DagError::MalformedParams { reason, .. } => {
                DecodeError::schema(format!("nodes.{id}"), reason, MissingParam).at_node(id)
            }
            other => DecodeError::schema(format!("nodes.{id}"), other.to_string(), Other),
        })?;
    }

    let edges = match top.get("edges") {
        None => &[][..],
        Some(e) => e
            .as_array()
            .ok_or_else(|| DecodeError::schema("edges", "expected an array", Other))?,
    };
    for (i, e) in edges.iter().enumerate() {
        let field = format!("edges[{i}]");
        let pair = e
            .as_array()
            .filter(|p| p.len() == 2)
            .ok_or_else(|| DecodeError::schema(&field, "expected a [from, to] pair", Other))?;
        let (Some(from), Some(to)) = (pair[0].as_str(), pair[1].as_str()) else {
            return Err(DecodeError::schema(&field, "node ids must be strings", Other));
        };
        dag.add_edge(from, to).map_err(|err| match err {
            DagError::UnknownId(id) => DecodeError::schema(&field, format!("unknown node `{id}`"), UnknownNode),
            DagError::WouldCreateCycle { .. } => DecodeError::schema(&field, "edge closes a cycle", Cycle).at_node(to),
            other => DecodeError::schema(&field, other.to_string(), Other),
        })?;
    }

    if let Some(a) = top.get("answer_nodes") {
        let arr = a
            .as_array()
            .ok_or_else(|| DecodeError::schema("answer_nodes", "expected an array", Other))?;
        for (i, v) in arr.iter().enumerate() {
            let field = format!("answer_nodes[{i}]");
            let id = v
                .as_str()
                .ok_or_else(|| DecodeError::schema(&field, "expected a node id", Other))?;
            dag.add_answer(id)
                .map_err(|_| DecodeError::schema(&field, format!("unknown node `{id}`"), UnknownNode))?;
        }
    }
    Ok(dag)
}

fn decode_node(id: &str, raw: &Value) -> Result<Node, DecodeError> {
    use SchemaIssue::*;
    let path = |f: &str| format!("nodes.{id}.{f}");
    let obj = raw
        .as_object()
        .ok_or_else(|| DecodeError::schema(format!("nodes.{id}"), "expected an object", Other))?;
    for key in obj.keys() {
        if !matches!(
            key.as_str(),
            "kind" | "feature" | "predicate" | "outputs" | "agg_fn" | "dp_params" | "calc_expr"
        ) {
            return Err(DecodeError::schema(path(key), "unknown field", Other));
        }
    }
    let kind_name = obj
        .get("kind")
        .ok_or_else(|| DecodeError::schema(path("kind"), "missing field", UnknownKind))?
        .as_str()
        .ok_or_else(|| DecodeError::schema(path("kind"), "expected a string", UnknownKind))?;
    let kind = OpKind::from_name(kind_name)
        .ok_or_else(|| DecodeError::schema(path("kind"), format!("unknown kind \"{kind_name}\""), UnknownKind))?;

    let parse = |field: &str| -> Option<Result<&Value, DecodeError>> {
        match obj.get(field) {
            None => None,
            Some(Value::Null) => Some(Err(DecodeError::schema(
                path(field),
                "null is not allowed; omit the field",
                Other,
            ))),
            Some(v) => Some(Ok(v)),
        }
    };
    let typed = |field: &str, msg: String| DecodeError::schema(path(field), msg, MissingParam);

    let mut node = Node {
        id: id.to_string(),
        kind,
        feature: None,
        predicate: None,
        outputs: Vec::new(),
        agg_fn: None,
        dp_params: None,
        calc_expr: None,
    };
    if let Some(v) = parse("feature") {
        node.feature = Some(
            v?.as_str()
                .ok_or_else(|| typed("feature", "expected a string".into()))?
                .to_string(),
        );
    }
    if let Some(v) = parse("predicate") {
        node.predicate =
            Some(serde_json::from_value::<Predicate>(v?.clone()).map_err(|e| typed("predicate", e.to_string()))?);
    }
    if let Some(v) = parse("outputs") {
        node.outputs = serde_json::from_value::<Vec<Slot>>(v?.clone()).map_err(|e| typed("outputs", e.to_string()))?;
    }
    if let Some(v) = parse("agg_fn") {
        node.agg_fn = Some(serde_json::from_value(v?.clone()).map_err(|e| typed("agg_fn", e.to_string()))?);
    }
    if let Some(v) = parse("dp_params") {
        node.dp_params =
            Some(serde_json::from_value::<DpParams>(v?.clone()).map_err(|e| typed("dp_params", e.to_string()))?);
    }
    if let Some(v) = parse("calc_expr") {
        let text = v?
            .as_str()
            .ok_or_else(|| typed("calc_expr", "expected a string".into()))?;
        node.calc_expr = Some(CalcExpr::parse(text).map_err(|e| typed("calc_expr", e.to_string()))?);
    }
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predicate::Atom;

    #[test]
    fn empty_dag_encoding() {
        let text = encode_dag(&FaDag::new());
        assert_eq!(text, r#"{"answer_nodes":[],"edges":[],"nodes":{}}"#);
        assert_eq!(decode_dag(&text).unwrap(), FaDag::new());
        let unsorted = r#"{"nodes":{},"edges":[],"answer_nodes":[]}"#;
        assert_eq!(decode_dag(unsorted).unwrap(), FaDag::new());
    }

    #[test]
    fn unknown_kind_is_a_schema_violation() {
        let text = r#"{"nodes":{"x":{"kind":"Compress"}},"edges":[],"answer_nodes":[]}"#;
        match decode_dag(text) {
            Err(DecodeError::Schema { field, issue, node, .. }) => {
                assert_eq!(field, "nodes.x.kind");
                assert_eq!(issue, SchemaIssue::UnknownKind);
                assert_eq!(node.as_deref(), Some("x"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_has_location() {
        match decode_dag("{\n  \"nodes\": {,}\n}") {
            Err(DecodeError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_param_names_field() {
        let text = r#"{"nodes":{"n":{"kind":"NoiseAdd"}},"edges":[],"answer_nodes":[]}"#;
        match decode_dag(text) {
            Err(DecodeError::Schema { issue, field, .. }) => {
                assert_eq!(issue, SchemaIssue::MissingParam);
                assert_eq!(field, "nodes.n");
            }
            other => panic!("{other:?}"),
        }
        let null = r#"{"nodes":{"a":{"kind":"Decrypt","feature":null}},"edges":[]}"#;
        assert!(decode_dag(null).is_err());
    }

    #[test]
    fn edges_to_unknown_nodes_rejected() {
        let text = r#"{"nodes":{"d":{"kind":"Decrypt"}},"edges":[["d","zz"]],"answer_nodes":[]}"#;
        assert!(matches!(
            decode_dag(text),
            Err(DecodeError::Schema {
                issue: SchemaIssue::UnknownNode,
                ..
            })
        ));
    }

    #[test]
    fn full_node_roundtrip() {
        let mut dag = FaDag::new();
        let pred = Predicate::from_atoms(vec![Atom::eq("role", "phd")]);
        dag.add_node(Node::access(
            "a",
            pred.clone(),
            vec![Slot::Value("salary".into()), Slot::Flag(pred), Slot::Indicator],
        ))
        .unwrap();
        dag.add_node(Node::encrypt("e", Slot::Indicator)).unwrap();
        dag.add_node(Node::aggregate("g")).unwrap();
        dag.add_node(Node::noise("n", 0.5, 1.0)).unwrap();
        dag.add_node(Node::decrypt("d").with_feature("salary")).unwrap();
        dag.add_node(Node::calculate("c", CalcExpr::parse("d / 2").unwrap()))
            .unwrap();
        for (f, t) in [("a", "e"), ("e", "g"), ("g", "n"), ("n", "d"), ("d", "c")] {
            dag.add_edge(f, t).unwrap();
        }
        dag.add_answer("c").unwrap();
        let text = encode_dag(&dag);
        let back = decode_dag(&text).unwrap();
        assert_eq!(back, dag);
        assert_eq!(encode_dag(&back), text);
        assert!(text.contains(r#""dp_params":{"epsilon":0.5,"sensitivity":1.0}"#));
        assert!(!text.contains("null"));
    }
}
