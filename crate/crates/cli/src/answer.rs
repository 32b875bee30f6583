//! The answerer: turns executed answers into a short prose response.

use fa_forge_core::engine::ExecutionResult;
use fa_forge_core::planner::ir::describe_basic;
use fa_forge_core::planner::prompts::PromptSet;
use fa_forge_core::planner::{AnswerKey, ChatModel, CombineOp, Intent, QueryIR, SubQuery};
use fa_forge_core::predicate::Predicate;

/// One reported value: a phrase naming it and the number itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Reported {
    pub key: AnswerKey,
    pub phrase: String,
    pub value: f64,
}

fn scoped(sub: &SubQuery, extra: Option<&Predicate>) -> String {
    let base = describe_basic(sub.basic_intent(), sub);
    let scope = match extra {
        Some(p) => sub.filter.and(p),
        None => sub.filter.clone(),
    };
    if scope.is_true() {
        base
    } else {
        format!("{base} where {scope}")
    }
}

fn phrase(ir: &QueryIR, key: AnswerKey) -> String {
    match key {
        AnswerKey::Query(i) => {
            let sub = &ir.subqueries[i];
            match (sub.intent, &sub.compare) {
                (Intent::Comparison, Some(sides)) => format!(
                    "the difference between {} and {}",
                    scoped(sub, Some(&sides[0])),
                    scoped(sub, Some(&sides[1]))
                ),
                _ => scoped(sub, None),
            }
        }
        AnswerKey::Side(i, s) => {
            let sub = &ir.subqueries[i];
            scoped(sub, sub.compare.as_ref().map(|c| &c[s]))
        }
        AnswerKey::Group(i, g) => {
            let sub = &ir.subqueries[i];
            scoped(sub, Some(&sub.groups[g].predicate))
        }
        AnswerKey::Combine(k) => {
            let c = &ir.final_combine[k];
            let (l, r) = (
                phrase(ir, AnswerKey::Query(c.left - 1)),
                phrase(ir, AnswerKey::Query(c.right - 1)),
            );
            match c.op {
                CombineOp::Diff => format!("the difference between {l} and {r}"),
                CombineOp::Ratio => format!("the ratio of {l} to {r}"),
            }
        }
    }
}

/// Pair each answer key with its executed value, in report order.
pub fn reported(ir: &QueryIR, mapping: &[(AnswerKey, Option<String>)], result: &ExecutionResult) -> Vec<Reported> {
    mapping
        .iter()
        .filter_map(|(key, node)| {
            let a = result.get(node.as_deref()?)?;
            Some(Reported {
                key: *key,
                phrase: phrase(ir, *key),
                value: a.value,
            })
        })
        .collect()
}

/// Template prose: "The average salary is 56.075; the difference ... is 78.375."
pub fn prose(values: &[Reported]) -> String {
    let clauses: Vec<String> = values.iter().map(|r| format!("{} is {}", r.phrase, r.value)).collect();
    let mut text = clauses.join("; ");
    if let Some(first) = text.get(..1) {
        text = first.to_uppercase() + &text[1..];
    }
    text + "."
}

/// Let a model phrase the answer; the exact values always follow verbatim.
pub fn llm_prose(
    model: &dyn ChatModel,
    prompts: &PromptSet,
    query: &str,
    values: &[Reported],
) -> Result<String, fa_forge_core::planner::LlmError> {
    let listing: String = values
        .iter()
        .map(|r| format!("- {}: {}\n", r.phrase, r.value))
        .collect();
    let text = model.complete(&prompts.answerer(query, &listing))?;
    Ok(format!("{}\n\n{listing}", text.trim()))
}
