//! Rewrites preliminary DAGs into one optimized DAG: common-operation
//! merging, predicate partitioning and implied-operation augmentation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calc::{BinOp, CalcExpr};
use crate::dag::{encode_dag, normalize_slots, DagError, FaDag, Node, OpKind, Slot};
use crate::planner::ir::{AnswerKey, CombineOp, QueryIR};
use crate::planner::prompts::PromptSet;
use crate::planner::repair::{repair_llm_output, Expected, LlmArtifact};
use crate::planner::ChatModel;
use crate::predicate::{Atom, Comparator, Literal, Predicate};
use crate::validator::semantics::{Region, Semantics};
use crate::validator::{answer_map, check_completeness, check_structure, Violation};

#[derive(Debug, Error)]
pub enum OptError {
    #[error("input DAG {index} is invalid: {}", first(.violations))]
    InvalidInput { index: usize, violations: Vec<Violation> },
    #[error("final_combine[{index}]: {message}")]
    UnresolvedReference { index: usize, message: String },
    #[error(transparent)]
    Dag(#[from] DagError),
}

fn first(v: &[Violation]) -> String {
    v.first().map(ToString::to_string).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    MergeCommon,
    PartitionPredicates,
    AugmentImplied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub rule: Rule,
    /// Node ids present before the rule and gone after it.
    pub before: Vec<String>,
    /// Node ids introduced by the rule.
    pub after: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteTrace {
    pub steps: Vec<TraceStep>,
}

impl RewriteTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn diff_step(rule: Rule, before: &BTreeSet<String>, after: &FaDag) -> Option<TraceStep> {
    let after_ids: BTreeSet<String> = after.ids().map(str::to_string).collect();
    let gone: Vec<String> = before.difference(&after_ids).cloned().collect();
    let new: Vec<String> = after_ids.difference(before).cloned().collect();
    (!gone.is_empty() || !new.is_empty()).then_some(TraceStep {
        rule,
        before: gone,
        after: new,
    })
}

fn ids_of(dag: &FaDag) -> BTreeSet<String> {
    dag.ids().map(str::to_string).collect()
}

fn check_inputs(dags: &[FaDag]) -> Result<(), OptError> {
    for (index, d) in dags.iter().enumerate() {
        let violations = check_structure(d);
        if !violations.is_empty() {
            return Err(OptError::InvalidInput { index, violations });
        }
    }
    Ok(())
}

fn unique_id(dag: &FaDag, taken: &BTreeSet<String>, base: &str) -> String {
    let free = |id: &str| !dag.contains(id) && !taken.contains(id);
    if free(base) {
        return base.to_string();
    }
    (2..).map(|k| format!("{base}_{k}")).find(|id| free(id)).unwrap()
}

/// Disjoint union with every id prefixed by `q{i}.`; no sharing at all.
pub fn naive_union(dags: &[FaDag]) -> Result<FaDag, OptError> {
    let mut out = FaDag::new();
    let ns = |i: usize, id: &str| format!("q{}.{id}", i + 1);
    for (i, d) in dags.iter().enumerate() {
        let rename: BTreeMap<String, String> = d.ids().map(|id| (id.to_string(), ns(i, id))).collect();
        for n in d.nodes() {
            let mut n = n.clone();
            n.id = ns(i, &n.id);
            n.calc_expr = n.calc_expr.map(|e| e.rename(&rename));
            out.add_node(n)?;
        }
        for (u, v) in d.edges() {
            out.add_edge(&ns(i, u), &ns(i, v))?;
        }
        for a in d.answer_nodes() {
            out.add_answer(&ns(i, a))?;
        }
    }
    Ok(out)
}

/// The unoptimized baseline plan: naive union plus implied combinations.
pub fn naive_plan(dags: &[FaDag], ir: &QueryIR) -> Result<FaDag, OptError> {
    check_inputs(dags)?;
    augment_implied(&naive_union(dags)?, ir)
}

struct MergeGroup {
    members: Vec<(usize, String)>,
    preds: BTreeSet<usize>,
    outputs: Vec<Slot>,
}

/// Union the DAGs, unifying nodes whose content and inputs coincide.
///
/// Access nodes with the same normalized predicate are fused and emit the
/// union of their outputs; every other node is keyed by its canonical key
/// together with the groups of its inputs, so a node merges only when its
/// whole lineage does.
pub fn merge_common(dags: &[FaDag]) -> Result<FaDag, OptError> {
    merge_traced(dags).map(|(d, _)| d)
}

/// Merge, also reporting each unified group as (member ids, surviving id).
fn merge_traced(dags: &[FaDag]) -> Result<(FaDag, Vec<(Vec<String>, String)>), OptError> {
    check_inputs(dags)?;
    let mut group_of: HashMap<(usize, String), usize> = HashMap::new();
    let mut groups: Vec<MergeGroup> = Vec::new();
    let mut by_key: HashMap<String, usize> = HashMap::new();

    for (i, d) in dags.iter().enumerate() {
        for id in d.topo_order() {
            let node = d.node(&id).unwrap();
            let preds: BTreeSet<usize> = d.predecessors(&id).map(|p| group_of[&(i, p.to_string())]).collect();
            let key = if node.kind == OpKind::Access {
                format!("A|{}", node.predicate.as_ref().unwrap().canonical())
            } else {
                let mut n = node.clone();
                n.id = String::new();
                if let Some(e) = &n.calc_expr {
                    let map: BTreeMap<String, String> = e
                        .vars()
                        .into_iter()
                        .filter_map(|v| group_of.get(&(i, v.clone())).map(|g| (v, format!("#{g}"))))
                        .collect();
                    n.calc_expr = Some(e.rename(&map));
                }
                format!("{}|{:?}", n.canonical_key(), preds)
            };
            let g = *by_key.entry(key).or_insert_with(|| {
                groups.push(MergeGroup {
                    members: Vec::new(),
                    preds: preds.clone(),
                    outputs: Vec::new(),
                });
                groups.len() - 1
            });
            groups[g].members.push((i, id.clone()));
            groups[g].outputs.extend(node.outputs.iter().cloned());
            group_of.insert((i, id), g);
        }
    }

    let mut names: Vec<String> = Vec::with_capacity(groups.len());
    let mut taken = BTreeSet::new();
    let empty = FaDag::new();
    for g in &groups {
        let base = g.members.iter().map(|(_, id)| id.as_str()).min().unwrap();
        let name = unique_id(&empty, &taken, base);
        taken.insert(name.clone());
        names.push(name);
    }

    let mut out = FaDag::new();
    for (gi, g) in groups.iter().enumerate() {
        let (di, rep) = &g.members[0];
        let mut node = dags[*di].node(rep).unwrap().clone();
        node.id = names[gi].clone();
        if node.kind == OpKind::Access {
            node.outputs = normalize_slots(&g.outputs);
        }
        if let Some(e) = &node.calc_expr {
            let map: BTreeMap<String, String> = e
                .vars()
                .into_iter()
                .filter_map(|v| group_of.get(&(*di, v.clone())).map(|t| (v, names[*t].clone())))
                .collect();
            node.calc_expr = Some(e.rename(&map));
        }
        out.add_node(node)?;
    }
    for (gi, g) in groups.iter().enumerate() {
        for p in &g.preds {
            out.add_edge(&names[*p], &names[gi])?;
        }
    }
    for (i, d) in dags.iter().enumerate() {
        for a in d.answer_nodes() {
            out.add_answer(&names[group_of[&(i, a.clone())]])?;
        }
    }
    let unified = groups
        .iter()
        .zip(&names)
        .filter(|(g, _)| g.members.len() > 1)
        .map(|(g, name)| {
            let members = g.members.iter().map(|(i, id)| format!("q{}.{id}", i + 1)).collect();
            (members, name.clone())
        })
        .collect();
    Ok((out, unified))
}

/// Per output slot of an Access node: its Encrypt, Aggregate, NoiseAdd and
/// Decrypt, when each stage is a single unshared link.
fn simple_chain(dag: &FaDag, access: &str) -> Option<Vec<(Slot, [String; 4])>> {
    let node = dag.node(access)?;
    let only = |id: &str, succ: bool, kind: OpKind| -> Option<String> {
        let mut it: Box<dyn Iterator<Item = &str>> = if succ {
            Box::new(dag.successors(id))
        } else {
            Box::new(dag.predecessors(id))
        };
        let x = it.next()?;
        (it.next().is_none() && dag.node(x)?.kind == kind).then(|| x.to_string())
    };
    let encs: Vec<&str> = dag.successors(access).collect();
    if encs.len() != node.outputs.len() {
        return None;
    }
    let mut out = Vec::new();
    for slot in &node.outputs {
        let mut matching = encs
            .iter()
            .filter(|e| dag.node(e).and_then(|n| n.encrypted_slot()).map(Slot::canonical) == Some(slot.canonical()));
        let e = matching.next()?.to_string();
        if matching.next().is_some() || only(&e, false, OpKind::Access).as_deref() != Some(access) {
            return None;
        }
        let g = only(&e, true, OpKind::Aggregate)?;
        let n = only(&g, true, OpKind::NoiseAdd)?;
        let d = only(&n, true, OpKind::Decrypt)?;
        if only(&g, false, OpKind::Encrypt)? != e
            || only(&n, false, OpKind::Aggregate)? != g
            || only(&d, false, OpKind::NoiseAdd)? != n
        {
            return None;
        }
        out.push((slot.clone(), [e, g, n, d]));
    }
    Some(out)
}

/// Attach a fresh chain for `slot` below `access`, copying stage content
/// from a template chain. Returns the new Decrypt id.
fn add_chain(
    dag: &mut FaDag,
    access: &str,
    tag: &str,
    slot: &Slot,
    template: &[String; 4],
) -> Result<String, OptError> {
    let s = slot.slug();
    let bases = [
        format!("enc.{s}.{tag}"),
        format!("agg.{s}.{tag}"),
        format!("noise.{s}.{tag}"),
        format!("dec.{s}.{tag}"),
    ];
    let mut ids = Vec::new();
    for (base, src) in bases.iter().zip(template) {
        let id = unique_id(dag, &BTreeSet::new(), base);
        let mut node = dag.node(src).unwrap().clone();
        node.id = id.clone();
        dag.add_node(node)?;
        ids.push(id);
    }
    dag.add_edge(access, &ids[0])?;
    for w in ids.windows(2) {
        dag.add_edge(&w[0], &w[1])?;
    }
    Ok(ids.pop().unwrap())
}

fn partition_once(dag: &FaDag, sem: &Semantics) -> Result<Option<FaDag>, OptError> {
    let access: Vec<(String, Region)> = dag
        .nodes_of(OpKind::Access)
        .filter_map(|n| Some((n.id.clone(), sem.region(n.predicate.as_ref()?).ok()?)))
        .collect();

    let mut parents: Vec<(usize, &String, &Region)> = Vec::new();
    for (pid, pr) in &access {
        let widths: Vec<usize> = access
            .iter()
            .filter(|(cid, _)| cid != pid)
            .filter_map(|(_, cr)| sem.narrowing(pr, cr).map(|(_, ps, _)| ps.len()))
            .collect();
        if let Some(w) = widths.into_iter().min() {
            parents.push((w, pid, pr));
        }
    }
    parents.sort();

    'parent: for (_, pid, pr) in parents {
        let Some(pchain) = simple_chain(dag, pid) else {
            continue;
        };
        let mut cands: Vec<(String, BTreeSet<String>, &String)> = access
            .iter()
            .filter(|(cid, _)| cid != pid)
            .filter_map(|(cid, cr)| sem.narrowing(pr, cr).map(|(f, _, cs)| (f, cs, cid)))
            .collect();
        let feature = cands.iter().map(|c| c.0.clone()).min().unwrap();
        cands.retain(|c| c.0 == feature);
        cands.sort_by(|a, b| a.2.cmp(b.2));
        let mut children: Vec<(BTreeSet<String>, &String)> = Vec::new();
        for (_, cs, cid) in &cands {
            let dominated = cands
                .iter()
                .any(|(_, other, oid)| oid != cid && cs.is_subset(other) && (cs != other || oid < cid));
            if !dominated {
                children.push((cs.clone(), cid));
            }
        }
        for (i, (a, _)) in children.iter().enumerate() {
            if children[i + 1..].iter().any(|(b, _)| !a.is_disjoint(b)) {
                continue 'parent;
            }
        }
        let mut child_chains = Vec::new();
        for (_, cid) in &children {
            match simple_chain(dag, cid) {
                Some(c) => child_chains.push(c),
                None => continue 'parent,
            }
        }

        let mut out = dag.clone();
        let mut parts: Vec<Vec<String>> = vec![Vec::new(); pchain.len()];
        for ((_, cid), chain) in children.iter().zip(&child_chains) {
            let cnode = out.node(cid).unwrap().clone();
            let ctag = cnode.predicate.as_ref().unwrap().slug();
            let mut extra = Vec::new();
            for (k, (slot, tpl)) in pchain.iter().enumerate() {
                let dec = match chain.iter().find(|(s, _)| s.canonical() == slot.canonical()) {
                    Some((_, ids)) => ids[3].clone(),
                    None => {
                        extra.push(slot.clone());
                        add_chain(&mut out, cid, &ctag, slot, tpl)?
                    }
                };
                parts[k].push(dec);
            }
            if !extra.is_empty() {
                let mut widened = cnode.clone();
                widened.outputs.extend(extra);
                widened.outputs = normalize_slots(&widened.outputs);
                out.replace_node(widened)?;
            }
        }

        let pnode = dag.node(pid).unwrap();
        let ppred = pnode.predicate.clone().unwrap();
        let covered: BTreeSet<&String> = children.iter().flat_map(|(s, _)| s.iter()).collect();
        let rest = ppred.and(&Predicate::atom(Atom::set(
            &feature,
            Comparator::NotIn,
            covered.into_iter().map(|v| Literal::Str(v.clone())).collect(),
        )));
        let rest_region = sem.region(&rest).expect("parent predicate resolves");
        if !rest_region.is_empty() {
            let rest = rest.normalized();
            let rtag = rest.slug();
            let rid = unique_id(&out, &BTreeSet::new(), &format!("access.{rtag}"));
            out.add_node(Node::access(&rid, rest, pnode.outputs.clone()))?;
            for (k, (slot, tpl)) in pchain.iter().enumerate() {
                parts[k].push(add_chain(&mut out, &rid, &rtag, slot, tpl)?);
            }
        }

        let ptag = ppred.slug();
        let mut rename = BTreeMap::new();
        for (k, (slot, ids)) in pchain.iter().enumerate() {
            let old_dec = &ids[3];
            let cid = unique_id(&out, &BTreeSet::new(), &format!("part.{}.{ptag}", slot.slug()));
            let mut calc = Node::calculate(&cid, CalcExpr::sum_of(&parts[k]));
            calc.feature = dag.node(old_dec).unwrap().feature.clone();
            out.add_node(calc)?;
            for p in &parts[k] {
                out.add_edge(p, &cid)?;
            }
            rename.insert(old_dec.clone(), cid);
        }
        for (old, new) in &rename {
            let consumers: Vec<String> = out.successors(old).map(str::to_string).collect();
            for c in consumers {
                let mut node = out.node(&c).unwrap().clone();
                node.calc_expr = node.calc_expr.map(|e| e.rename(&rename));
                out.replace_node(node)?;
                out.add_edge(new, &c)?;
            }
        }
        let answers: Vec<String> = out
            .answer_nodes()
            .iter()
            .map(|a| rename.get(a).unwrap_or(a).clone())
            .collect();
        out.remove_node(pid);
        for (_, ids) in &pchain {
            for id in ids {
                out.remove_node(id);
            }
        }
        out.set_answers(answers)?;
        return Ok(Some(out));
    }
    Ok(None)
}

/// Replace broad Access chains by disjoint partitions over one categorical
/// feature, reconstituting the broad aggregates with Calculate sums.
pub fn partition_predicates(dag: &FaDag, ir: &QueryIR) -> Result<FaDag, OptError> {
    let sem = Semantics::new(ir.schema());
    let mut cur = dag.clone();
    while let Some(next) = partition_once(&cur, &sem)? {
        cur = next;
    }
    Ok(cur)
}

/// Add one Calculate per final_combine step over the referenced answers.
pub fn augment_implied(dag: &FaDag, ir: &QueryIR) -> Result<FaDag, OptError> {
    if ir.final_combine.is_empty() {
        return Ok(dag.clone());
    }
    let map: BTreeMap<AnswerKey, String> = answer_map(dag, ir)
        .map_err(|message| OptError::UnresolvedReference { index: 0, message })?
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect();
    let mut out = dag.clone();
    for (index, c) in ir.final_combine.iter().enumerate() {
        let lookup = |r: usize| {
            map.get(&AnswerKey::Query(r - 1))
                .cloned()
                .ok_or_else(|| OptError::UnresolvedReference {
                    index,
                    message: format!("sub-query {r} has no answer node"),
                })
        };
        let (a, b) = (lookup(c.left)?, lookup(c.right)?);
        let (op, name) = match c.op {
            CombineOp::Diff => (BinOp::Sub, "diff"),
            CombineOp::Ratio => (BinOp::Div, "ratio"),
        };
        let id = format!("combine.{name}.{a}.{b}");
        if !out.contains(&id) {
            out.add_node(Node::calculate(
                &id,
                CalcExpr::bin(op, CalcExpr::var(&a), CalcExpr::var(&b)),
            ))?;
            out.add_edge(&a, &id)?;
            out.add_edge(&b, &id)?;
        }
        out.add_answer(&id)?;
    }
    Ok(out)
}

fn apply(rule: Rule, dag: &FaDag, ir: &QueryIR) -> Result<FaDag, OptError> {
    match rule {
        Rule::MergeCommon => merge_common(std::slice::from_ref(dag)),
        Rule::PartitionPredicates => partition_predicates(dag, ir),
        Rule::AugmentImplied => augment_implied(dag, ir),
    }
}

/// merge, then partition, then augment. The trace lists the rules that
/// changed something.
pub fn optimize(dags: &[FaDag], ir: &QueryIR) -> Result<(FaDag, RewriteTrace), OptError> {
    let mut trace = RewriteTrace::default();
    let (mut cur, unified) = merge_traced(dags)?;
    if !unified.is_empty() {
        let mut before: Vec<String> = unified.iter().flat_map(|(m, _)| m.iter().cloned()).collect();
        let mut after: Vec<String> = unified.into_iter().map(|(_, n)| n).collect();
        before.sort();
        after.sort();
        trace.steps.push(TraceStep {
            rule: Rule::MergeCommon,
            before,
            after,
        });
    }
    for rule in [Rule::PartitionPredicates, Rule::AugmentImplied] {
        let next = apply(rule, &cur, ir)?;
        if encode_dag(&next) != encode_dag(&cur) {
            if let Some(step) = diff_step(rule, &ids_of(&cur), &next) {
                trace.steps.push(step);
            }
        }
        cur = next;
    }
    Ok((cur, trace))
}

/// Re-apply a trace to the original inputs. The union of the inputs is
/// always formed first; recorded merges happen as part of it.
pub fn replay(trace: &RewriteTrace, dags: &[FaDag], ir: &QueryIR) -> Result<FaDag, OptError> {
    let mut cur = merge_common(dags)?;
    for step in &trace.steps {
        if step.rule != Rule::MergeCommon {
            cur = apply(step.rule, &cur, ir)?;
        }
    }
    Ok(cur)
}

fn heavy_nodes(dag: &FaDag) -> usize {
    [OpKind::Access, OpKind::Encrypt, OpKind::Aggregate]
        .iter()
        .map(|k| dag.count_of(*k))
        .sum()
}

/// Outcome of asking a model for an alternative optimized plan.
#[derive(Debug, Clone)]
pub struct Suggestion {
    pub dag: FaDag,
    pub accepted: bool,
    pub reason: String,
}

/// Optimize deterministically, then let a model propose a replacement. The
/// proposal is kept only if it validates, covers the query, and has no more
/// Access, Encrypt and Aggregate nodes.
pub fn optimize_with_suggestion(
    dags: &[FaDag],
    ir: &QueryIR,
    model: &dyn ChatModel,
    prompts: &PromptSet,
    max_retries: usize,
) -> Result<(FaDag, RewriteTrace, Suggestion), OptError> {
    let (dag, trace) = optimize(dags, ir)?;
    let listing: String = dags.iter().map(|d| encode_dag(d) + "\n").collect();
    let prompt = prompts.optimizer(&ir.text, ir.schema(), &listing);
    let reject = |reason: String| Suggestion {
        dag: dag.clone(),
        accepted: false,
        reason,
    };
    let suggestion = match repair_llm_output(model, &prompt, &Expected::Dag, max_retries) {
        Ok(LlmArtifact::Dag(s)) => {
            let missing = check_completeness(&s, ir);
            if !missing.is_empty() {
                reject(format!("incomplete: {}", first(&missing)))
            } else if heavy_nodes(&s) > heavy_nodes(&dag) {
                reject("costs more than the deterministic plan".into())
            } else {
                Suggestion {
                    dag: s,
                    accepted: true,
                    reason: "validated".into(),
                }
            }
        }
        Ok(LlmArtifact::Ir(_)) => reject("model returned an IR".into()),
        Err(e) => reject(e.to_string()),
    };
    let chosen = if suggestion.accepted {
        suggestion.dag.clone()
    } else {
        dag
    };
    Ok((chosen, trace, suggestion))
}
