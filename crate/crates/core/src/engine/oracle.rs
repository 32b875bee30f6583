//! Direct plaintext evaluation of a query, used as ground truth.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use thiserror::Error;

use super::{ClientPool, ExecutionResult};
use crate::crypto::FixedPoint;
use crate::dag::FaDag;
use crate::planner::ir::{AnswerKey, CombineOp, Intent, QueryIR, SubQuery};
use crate::predicate::Predicate;
use crate::validator::answer_map;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{0}: no client matches the filter")]
    EmptyGroup(String),
    #[error("{0}: division by zero")]
    DivisionByZero(String),
    #[error("{0}")]
    Invalid(String),
}

struct Eval<'a> {
    pool: &'a ClientPool,
    fixed: FixedPoint,
}

impl Eval<'_> {
    /// Sum over matching clients of `f`, each value rounded to the fixed-point grid.
    fn sum(&self, scope: &Predicate, f: impl Fn(&super::ClientRecord) -> BigInt) -> BigRational {
        let total: BigInt = self
            .pool
            .records()
            .iter()
            .filter(|r| self.pool.matches(r, scope))
            .map(f)
            .sum();
        BigRational::new(total, BigInt::from(self.fixed.scale))
    }

    fn value_sum(&self, feature: &str, scope: &Predicate, key: &str) -> Result<BigRational, OracleError> {
        let missing = || OracleError::Invalid(format!("{key}: `{feature}` is not numeric"));
        for r in self.pool.records() {
            self.pool.number(r, feature).ok_or_else(missing)?;
        }
        Ok(self.sum(scope, |r| {
            let x = self.pool.number(r, feature).expect("checked");
            self.fixed.scaled(x).expect("bounded feature")
        }))
    }

    fn count(&self, scope: &Predicate) -> BigRational {
        self.sum(scope, |_| BigInt::from(self.fixed.scale))
    }

    fn measure(
        &self,
        intent: Intent,
        sub: &SubQuery,
        scope: &Predicate,
        key: &str,
    ) -> Result<BigRational, OracleError> {
        let feature = || {
            sub.feature
                .as_deref()
                .ok_or_else(|| OracleError::Invalid(format!("{key}: {intent} without a feature")))
        };
        let nonempty = |n: BigRational| {
            if n.is_zero() {
                Err(OracleError::EmptyGroup(key.to_string()))
            } else {
                Ok(n)
            }
        };
        Ok(match intent {
            Intent::Count => self.count(scope),
            Intent::Sum => self.value_sum(feature()?, scope, key)?,
            Intent::Mean => {
                let n = nonempty(self.count(scope))?;
                self.value_sum(feature()?, scope, key)? / n
            }
            Intent::Percentage => {
                let n = nonempty(self.count(scope))?;
                let cond = sub
                    .condition
                    .as_ref()
                    .ok_or_else(|| OracleError::Invalid(format!("{key}: Percentage without a condition")))?;
                self.count(&scope.and(cond)) / n
            }
            Intent::Ratio => {
                let den = sub
                    .denominator
                    .as_deref()
                    .ok_or_else(|| OracleError::Invalid(format!("{key}: Ratio without a denominator")))?;
                let d = self.value_sum(den, scope, key)?;
                if d.is_zero() {
                    return Err(OracleError::DivisionByZero(key.to_string()));
                }
                self.value_sum(feature()?, scope, key)? / d
            }
            Intent::Comparison | Intent::GroupBy => {
                return Err(OracleError::Invalid(format!("{key}: {intent} is not a basic measure")))
            }
        })
    }
}

/// Exact answers for every answer key of `ir`, computed on raw records.
/// Client values are rounded to the fixed-point grid of `scale`, as the
/// encrypted pipeline does; everything after that is exact.
pub fn plaintext_oracle(
    ir: &QueryIR,
    pool: &ClientPool,
    scale: u32,
) -> Result<Vec<(AnswerKey, BigRational)>, OracleError> {
    let ev = Eval {
        pool,
        fixed: FixedPoint::new(scale),
    };
    let mut out = Vec::new();
    let mut per_query = std::collections::BTreeMap::new();
    for (i, sub) in ir.subqueries.iter().enumerate() {
        match sub.intent {
            Intent::Comparison => {
                let sides = sub
                    .compare
                    .as_ref()
                    .ok_or_else(|| OracleError::Invalid("Comparison without sides".into()))?;
                let m = sub.basic_intent();
                let (ka, kb) = (AnswerKey::Side(i, 0), AnswerKey::Side(i, 1));
                let a = ev.measure(m, sub, &sub.filter.and(&sides[0]), &ka.to_string())?;
                let b = ev.measure(m, sub, &sub.filter.and(&sides[1]), &kb.to_string())?;
                let diff = &a - &b;
                out.push((ka, a));
                out.push((kb, b));
                out.push((AnswerKey::Query(i), diff.clone()));
                per_query.insert(i, diff);
            }
            Intent::GroupBy => {
                let m = sub.basic_intent();
                for (g, group) in sub.groups.iter().enumerate() {
                    let key = AnswerKey::Group(i, g);
                    let v = ev.measure(m, sub, &sub.filter.and(&group.predicate), &key.to_string())?;
                    out.push((key, v));
                }
            }
            basic => {
                let key = AnswerKey::Query(i);
                let v = ev.measure(basic, sub, &sub.filter, &key.to_string())?;
                per_query.insert(i, v.clone());
                out.push((key, v));
            }
        }
    }
    for (k, c) in ir.final_combine.iter().enumerate() {
        let key = AnswerKey::Combine(k);
        let get = |r: usize| {
            per_query
                .get(&(r - 1))
                .cloned()
                .ok_or_else(|| OracleError::Invalid(format!("{key}: sub-query {r} has no single answer")))
        };
        let (l, r) = (get(c.left)?, get(c.right)?);
        let v = match c.op {
            CombineOp::Diff => l - r,
            CombineOp::Ratio => {
                if r.is_zero() {
                    return Err(OracleError::DivisionByZero(key.to_string()));
                }
                l / r
            }
        };
        out.push((key, v));
    }
    Ok(out)
}

/// Every disagreement between an execution and the oracle, keyed by answer.
/// Empty means the DAG reproduced every answer exactly.
pub fn compare_with_oracle(
    dag: &FaDag,
    ir: &QueryIR,
    result: &ExecutionResult,
    oracle: &[(AnswerKey, BigRational)],
) -> Vec<String> {
    let map = match answer_map(dag, ir) {
        Ok(m) => m,
        Err(e) => return vec![e],
    };
    let mut out = Vec::new();
    for (key, want) in oracle {
        let node = map.iter().find(|(k, _)| k == key).and_then(|(_, n)| n.as_deref());
        match node.and_then(|n| result.get(n)) {
            None => out.push(format!("{key}: no answer node")),
            Some(a) if &a.exact != want => out.push(format!(
                "{key}: `{}` gave {} but the oracle says {}",
                a.node, a.exact, want
            )),
            Some(_) => {}
        }
    }
    out
}
