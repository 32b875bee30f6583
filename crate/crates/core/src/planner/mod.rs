//! Coarse decomposition of queries into single-intent sub-queries and fine
//! instantiation of each sub-query into a preliminary DAG from templates.

pub mod ir;
pub mod llm;
pub mod prompts;
pub mod repair;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::calc::{BinOp, CalcExpr};
use crate::dag::{DagError, FaDag, Node, Slot};
use crate::predicate::Predicate;
use crate::schema::Schema;

pub use ir::{parse_ir, AnswerKey, Combine, CombineOp, Intent, IrError, QueryIR, SubQuery};
pub use llm::{llm_complete, ChatModel, HttpChat, LlmConfig, LlmError};
pub use repair::{extract_json, parse_llm_output, repair_llm_output, Expected, LlmArtifact};

pub const DEFAULT_EPSILON: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no template for intent {0}")]
    NoTemplate(Intent),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("undecomposable: {0}")]
    Undecomposable(String),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Dag(#[from] DagError),
}

/// A scalar a template reads per client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRole {
    Feature,
    Denominator,
    Condition,
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerShape {
    /// The first chain's Decrypt is the answer.
    Direct,
    /// A Calculate divides the first chain by the second.
    Quotient,
    /// Two instantiations of the measure template and their difference.
    Difference,
    /// One instantiation of the measure template per group.
    PerGroup,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DagTemplate {
    pub intent: Intent,
    /// Per-client scalars the Access node emits; empty for composite templates.
    pub slots: Vec<SlotRole>,
    pub answer: AnswerShape,
}

impl DagTemplate {
    pub fn arity(&self) -> usize {
        self.slots.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TemplateRepo {
    templates: BTreeMap<Intent, DagTemplate>,
}

impl TemplateRepo {
    /// No templates at all: every plan fails.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn standard() -> Self {
        use AnswerShape::*;
        use SlotRole::*;
        let t = |intent, slots: &[SlotRole], answer| DagTemplate {
            intent,
            slots: slots.to_vec(),
            answer,
        };
        let mut repo = Self::empty();
        for tpl in [
            t(Intent::Count, &[Indicator], Direct),
            t(Intent::Sum, &[Feature], Direct),
            t(Intent::Mean, &[Feature, Indicator], Quotient),
            t(Intent::Percentage, &[Condition, Indicator], Quotient),
            t(Intent::Ratio, &[Feature, Denominator], Quotient),
            t(Intent::Comparison, &[], Difference),
            t(Intent::GroupBy, &[], PerGroup),
        ] {
            repo.insert(tpl);
        }
        repo
    }

    pub fn insert(&mut self, template: DagTemplate) {
        self.templates.insert(template.intent, template);
    }

    pub fn get(&self, intent: Intent) -> Result<&DagTemplate, PlanError> {
        self.templates.get(&intent).ok_or(PlanError::NoTemplate(intent))
    }

    pub fn iter(&self) -> impl Iterator<Item = &DagTemplate> {
        self.templates.values()
    }

    /// Plain-text listing for prompts.
    pub fn describe(&self) -> String {
        self.iter()
            .map(|t| format!("- {}: slots {:?}, answer {:?}\n", t.intent, t.slots, t.answer))
            .collect()
    }
}

/// Deterministic fine-grained planner.
#[derive(Debug, Clone)]
pub struct Planner {
    pub templates: TemplateRepo,
    pub epsilon: f64,
}

impl Default for Planner {
    fn default() -> Self {
        Self {
            templates: TemplateRepo::standard(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl Planner {
    pub fn new(templates: TemplateRepo, epsilon: f64) -> Self {
        Self { templates, epsilon }
    }

    pub fn fine_plan(&self, sub: &SubQuery, schema: &Schema) -> Result<FaDag, PlanError> {
        let template = self.templates.get(sub.intent)?;
        let mut b = Builder {
            dag: FaDag::new(),
            schema,
            epsilon: self.epsilon,
        };
        match template.answer {
            AnswerShape::Direct | AnswerShape::Quotient => {
                let id = b.measure(template, sub, &sub.filter)?;
                b.dag.add_answer(&id)?;
            }
            AnswerShape::Difference => {
                let measure = self.templates.get(sub.basic_intent())?;
                let sides = sub
                    .compare
                    .as_ref()
                    .filter(|c| c.len() == 2)
                    .ok_or_else(|| PlanError::SchemaMismatch("Comparison needs two sides".into()))?;
                let a = b.measure(measure, sub, &sub.filter.and(&sides[0]))?;
                let c = b.measure(measure, sub, &sub.filter.and(&sides[1]))?;
                let id = format!("diff.{a}.vs.{c}");
                let expr = CalcExpr::bin(BinOp::Sub, CalcExpr::var(&a), CalcExpr::var(&c));
                b.calculate(&id, expr, &[&a, &c], sub.feature.as_deref())?;
                for x in [&a, &c, &id] {
                    b.dag.add_answer(x)?;
                }
            }
            AnswerShape::PerGroup => {
                let measure = self.templates.get(sub.basic_intent())?;
                if sub.groups.is_empty() {
                    return Err(PlanError::SchemaMismatch(
                        "GroupBy has no groups; bind the sub-query to a schema first".into(),
                    ));
                }
                for g in &sub.groups {
                    let id = b.measure(measure, sub, &sub.filter.and(&g.predicate))?;
                    b.dag.add_answer(&id)?;
                }
            }
        }
        Ok(b.dag)
    }

    /// One preliminary DAG per sub-query.
    pub fn plan(&self, ir: &QueryIR) -> Result<Vec<FaDag>, PlanError> {
        ir.subqueries.iter().map(|s| self.fine_plan(s, ir.schema())).collect()
    }
}

/// [`Planner::fine_plan`] with the default ε.
pub fn fine_plan(sub: &SubQuery, templates: &TemplateRepo, schema: &Schema) -> Result<FaDag, PlanError> {
    Planner::new(templates.clone(), DEFAULT_EPSILON).fine_plan(sub, schema)
}

struct Builder<'a> {
    dag: FaDag,
    schema: &'a Schema,
    epsilon: f64,
}

impl Builder<'_> {
    fn slot(&self, role: SlotRole, sub: &SubQuery) -> Result<Slot, PlanError> {
        let missing = |what: &str| PlanError::SchemaMismatch(format!("{} needs {what}", sub.intent));
        Ok(match role {
            SlotRole::Feature => Slot::Value(sub.feature.clone().ok_or_else(|| missing("a feature"))?),
            SlotRole::Denominator => Slot::Value(sub.denominator.clone().ok_or_else(|| missing("a denominator"))?),
            SlotRole::Condition => Slot::Flag(sub.condition.clone().ok_or_else(|| missing("a condition"))?),
            SlotRole::Indicator => Slot::Indicator,
        })
    }

    fn sensitivity(&self, slot: &Slot) -> Result<f64, PlanError> {
        match slot {
            Slot::Value(f) => self
                .schema
                .value_sensitivity(f)
                .map_err(|e| PlanError::SchemaMismatch(e.to_string())),
            Slot::Indicator | Slot::Flag(_) => Ok(1.0),
        }
    }

    /// Instantiate a basic template over one scope; returns the answer id.
    fn measure(&mut self, t: &DagTemplate, sub: &SubQuery, scope: &Predicate) -> Result<String, PlanError> {
        if t.slots.is_empty() {
            return Err(PlanError::SchemaMismatch(format!(
                "{} is not a measure template",
                t.intent
            )));
        }
        scope
            .check(self.schema)
            .map_err(|e| PlanError::SchemaMismatch(e.to_string()))?;
        let scope = scope.normalized();
        let tag = scope.slug();
        let slots = t
            .slots
            .iter()
            .map(|r| self.slot(*r, sub))
            .collect::<Result<Vec<_>, _>>()?;
        let decs = self.chains(&scope, &slots)?;
        match t.answer {
            AnswerShape::Direct => Ok(decs[0].clone()),
            AnswerShape::Quotient => {
                let stem = match t.intent {
                    Intent::Mean => format!("mean.{}", slots[0].slug()),
                    Intent::Percentage => format!("pct.{}", slots[0].slug()),
                    Intent::Ratio => format!("ratio.{}.{}", slots[0].slug(), slots[1].slug()),
                    other => format!("{}.{}", other.name().to_lowercase(), slots[0].slug()),
                };
                let id = format!("{stem}.{tag}");
                if self.dag.contains(&id) {
                    return Ok(id);
                }
                let expr = CalcExpr::bin(BinOp::Div, CalcExpr::var(&decs[0]), CalcExpr::var(&decs[1]));
                self.calculate(&id, expr, &[&decs[0], &decs[1]], sub.feature.as_deref())?;
                Ok(id)
            }
            _ => unreachable!("composite shapes have no slots"),
        }
    }

    fn calculate(&mut self, id: &str, expr: CalcExpr, inputs: &[&str], feature: Option<&str>) -> Result<(), PlanError> {
        let mut node = Node::calculate(id, expr);
        node.feature = feature.map(str::to_string);
        self.dag.add_node(node)?;
        for i in inputs {
            self.dag.add_edge(i, id)?;
        }
        Ok(())
    }

    /// Access plus one Encrypt→Aggregate→NoiseAdd→Decrypt chain per slot.
    fn chains(&mut self, scope: &Predicate, slots: &[Slot]) -> Result<Vec<String>, PlanError> {
        let tag = scope.slug();
        let access = format!("access.{tag}");
        if self.dag.contains(&access) {
            return Ok(slots.iter().map(|s| format!("dec.{}.{tag}", s.slug())).collect());
        }
        self.dag
            .add_node(Node::access(&access, scope.clone(), slots.to_vec()))?;
        let mut decs = Vec::new();
        for slot in slots {
            let s = slot.slug();
            let feature = match slot {
                Slot::Value(f) => Some(f.clone()),
                _ => None,
            };
            let with = |n: Node| match &feature {
                Some(f) => n.with_feature(f),
                None => n,
            };
            let ids = [
                format!("enc.{s}.{tag}"),
                format!("agg.{s}.{tag}"),
                format!("noise.{s}.{tag}"),
                format!("dec.{s}.{tag}"),
            ];
            self.dag.add_node(with(Node::encrypt(&ids[0], slot.clone())))?;
            self.dag.add_node(with(Node::aggregate(&ids[1])))?;
            self.dag
                .add_node(with(Node::noise(&ids[2], self.epsilon, self.sensitivity(slot)?)))?;
            self.dag.add_node(with(Node::decrypt(&ids[3])))?;
            self.dag.add_edge(&access, &ids[0])?;
            for w in ids.windows(2) {
                self.dag.add_edge(&w[0], &w[1])?;
            }
            decs.push(ids[3].clone());
        }
        Ok(decs)
    }
}

/// How sub-queries are obtained from query text.
pub enum Backend<'a> {
    /// The text is already structured-IR JSON.
    Ir,
    /// A chat model decomposes natural language into IR JSON.
    Llm {
        model: &'a dyn ChatModel,
        max_retries: usize,
        prompts: &'a prompts::PromptSet,
    },
}

/// Split a query into single-intent sub-queries, normalized to a QueryIR.
pub fn coarse_decompose(query: &str, backend: &Backend<'_>, schema: Arc<Schema>) -> Result<QueryIR, PlanError> {
    match backend {
        Backend::Ir => {
            if serde_json::from_str::<serde_json::Value>(query).is_err() {
                return Err(PlanError::BackendUnavailable(
                    "the structured-IR backend needs IR JSON; configure an LLM backend for natural language".into(),
                ));
            }
            Ok(parse_ir(query, schema)?)
        }
        Backend::Llm {
            model,
            max_retries,
            prompts,
        } => {
            let prompt = prompts.coarse(query, &schema, &TemplateRepo::standard());
            let expected = Expected::QueryIr(schema);
            match repair_llm_output(*model, &prompt, &expected, *max_retries) {
                Ok(LlmArtifact::Ir(mut ir)) => {
                    if ir.text.is_empty() {
                        ir.text = query.to_string();
                    }
                    Ok(ir)
                }
                Ok(LlmArtifact::Dag(_)) => unreachable!("expected an IR"),
                Err(repair::RepairError::Llm(e)) => Err(PlanError::BackendUnavailable(e.to_string())),
                Err(e) => Err(PlanError::Undecomposable(e.to_string())),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{encode_dag, OpKind};
    use crate::predicate::Atom;
    use crate::testkit::arb_sub;
    use crate::validator::{check_completeness, check_structure};
    use proptest::prelude::*;

    fn schema() -> Arc<Schema> {
        crate::testkit::schema()
    }

    fn single(sub: SubQuery) -> QueryIR {
        QueryIR::new("", vec![sub], vec![], schema()).unwrap()
    }

    fn role(v: &str) -> Predicate {
        Predicate::atom(Atom::eq("role", v))
    }

    #[test]
    fn mean_template_shape() {
        let ir = single(SubQuery::mean("salary", Predicate::always()));
        let dag = Planner::default().fine_plan(&ir.subqueries[0], ir.schema()).unwrap();
        let counts: Vec<usize> = OpKind::ALL.iter().map(|k| dag.count_of(*k)).collect();
        assert_eq!(counts, vec![1, 2, 2, 2, 2, 1]);
        assert_eq!(dag.answer_nodes(), ["mean.salary.all"]);
        assert!(check_structure(&dag).is_empty());
        assert!(check_completeness(&dag, &ir).is_empty());
    }

    #[test]
    fn count_is_a_single_chain() {
        let ir = single(SubQuery::count(role("phd")));
        let dag = Planner::default().fine_plan(&ir.subqueries[0], ir.schema()).unwrap();
        let counts: Vec<usize> = OpKind::ALL.iter().map(|k| dag.count_of(*k)).collect();
        assert_eq!(counts, vec![1, 1, 1, 1, 1, 0]);
        assert_eq!(dag.answer_nodes(), ["dec.count.role_eq_phd"]);
        assert!(check_completeness(&dag, &ir).is_empty());
    }

    #[test]
    fn group_by_is_one_chain_set_per_value() {
        let mut sub = SubQuery::new(Intent::GroupBy);
        sub.measure = Some(Intent::Mean);
        sub.feature = Some("salary".into());
        sub.group_by = Some("role".into());
        let ir = single(sub);
        let dag = Planner::default().fine_plan(&ir.subqueries[0], ir.schema()).unwrap();
        let one = Planner::default()
            .fine_plan(&SubQuery::mean("salary", role("phd")), ir.schema())
            .unwrap();
        assert_eq!(dag.len(), 4 * one.len());
        assert_eq!(dag.answer_nodes().len(), 4);
        assert!(check_structure(&dag).is_empty());
        assert!(check_completeness(&dag, &ir).is_empty());
    }

    #[test]
    fn comparison_answers_both_sides_and_the_gap() {
        let mut sub = SubQuery::new(Intent::Comparison);
        sub.measure = Some(Intent::Mean);
        sub.feature = Some("salary".into());
        sub.compare = Some(vec![role("professor"), role("phd")]);
        let ir = single(sub);
        let dag = Planner::default().fine_plan(&ir.subqueries[0], ir.schema()).unwrap();
        assert_eq!(dag.answer_nodes().len(), 3);
        assert!(check_structure(&dag).is_empty());
        assert!(check_completeness(&dag, &ir).is_empty());
    }

    #[test]
    fn value_chains_use_the_feature_bound() {
        let ir = single(SubQuery::mean("bonus", Predicate::always()));
        let dag = Planner::default().fine_plan(&ir.subqueries[0], ir.schema()).unwrap();
        let dp = |id: &str| dag.node(id).unwrap().dp_params.unwrap().sensitivity;
        assert_eq!(dp("noise.bonus.all"), 50.0);
        assert_eq!(dp("noise.count.all"), 1.0);
    }

    #[test]
    fn empty_repository_has_no_templates() {
        let ir = single(SubQuery::count(Predicate::always()));
        let err = fine_plan(&ir.subqueries[0], &TemplateRepo::empty(), ir.schema()).unwrap_err();
        assert!(matches!(err, PlanError::NoTemplate(Intent::Count)));
    }

    #[test]
    fn decrypt_without_division_is_incomplete() {
        let ir = single(SubQuery::mean("salary", Predicate::always()));
        let mut dag = Planner::default().fine_plan(&ir.subqueries[0], ir.schema()).unwrap();
        dag.remove_node("mean.salary.all");
        dag.set_answers(vec!["dec.salary.all".into(), "dec.count.all".into()])
            .unwrap();
        assert_eq!(check_completeness(&dag, &ir).len(), 1);
    }

    #[test]
    fn one_of_two_intents_covered() {
        let ir = QueryIR::new(
            "",
            vec![
                SubQuery::mean("salary", Predicate::always()),
                SubQuery::count(role("phd")),
            ],
            vec![],
            schema(),
        )
        .unwrap();
        let dag = Planner::default().fine_plan(&ir.subqueries[0], ir.schema()).unwrap();
        assert_eq!(check_completeness(&dag, &ir).len(), 1);
    }

    #[test]
    fn ir_backend_rejects_prose() {
        let err = coarse_decompose("average age of all individuals", &Backend::Ir, schema()).unwrap_err();
        assert!(matches!(err, PlanError::BackendUnavailable(_)));
        let ir = coarse_decompose(
            r#"{"text":"average salary","subqueries":[{"intent":"Mean","feature":"salary"}]}"#,
            &Backend::Ir,
            schema(),
        )
        .unwrap();
        assert_eq!(ir.subqueries.len(), 1);
        assert!(ir.final_combine.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn planned_dags_are_sound_and_deterministic(sub in arb_sub()) {
            let ir = match QueryIR::new("", vec![sub], vec![], schema()) {
                Ok(ir) => ir,
                Err(_) => return Ok(()),
            };
            let planner = Planner::default();
            let dag = match planner.fine_plan(&ir.subqueries[0], ir.schema()) {
                Ok(d) => d,
                Err(e) => panic!("{e}"),
            };
            prop_assert_eq!(check_structure(&dag), vec![]);
            prop_assert_eq!(check_completeness(&dag, &ir), vec![]);
            let again = planner.fine_plan(&ir.subqueries[0], ir.schema()).unwrap();
            prop_assert_eq!(encode_dag(&dag), encode_dag(&again));
        }
    }
}
