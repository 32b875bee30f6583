//! Shared fixtures and strategies for unit tests.

use std::sync::Arc;

use proptest::prelude::*;

use crate::planner::ir::{Intent, SubQuery};
use crate::predicate::{Atom, Comparator, Literal, Predicate};
use crate::schema::Schema;

pub fn schema() -> Arc<Schema> {
    Arc::new(
        Schema::from_json(
            r#"{"role": {"type": "categorical", "values": ["professor", "phd", "masters", "staff"]},
                "salary": {"type": "numeric", "bounds": [0, 300]},
                "bonus": {"type": "numeric", "bounds": [-20, 50]},
                "hours": {"type": "numeric", "bounds": [0, 99]}}"#,
        )
        .unwrap(),
    )
}

pub fn role(v: &str) -> Predicate {
    Predicate::atom(Atom::eq("role", v))
}

pub fn arb_pred() -> impl Strategy<Value = Predicate> {
    let role_atom =
        prop::sample::subsequence(vec!["professor", "phd", "masters", "staff"], 1..=3).prop_flat_map(|vs| {
            (Just(vs), prop::bool::ANY).prop_map(|(vs, neg)| {
                let lits = vs.iter().map(|v| Literal::Str(v.to_string())).collect();
                Atom::set("role", if neg { Comparator::NotIn } else { Comparator::In }, lits)
            })
        });
    let hours_atom = (0u8..6, 0i32..99).prop_map(|(op, v)| {
        let op = [
            Comparator::Lt,
            Comparator::Le,
            Comparator::Gt,
            Comparator::Ge,
            Comparator::Eq,
            Comparator::Ne,
        ][op as usize];
        Atom::new("hours", op, Literal::Num(v as f64))
    });
    (prop::option::of(role_atom), prop::option::of(hours_atom))
        .prop_map(|(a, b)| Predicate::from_atoms(a.into_iter().chain(b).collect()))
}

pub fn arb_sub() -> impl Strategy<Value = SubQuery> {
    let basic = prop::sample::select(vec![
        Intent::Count,
        Intent::Sum,
        Intent::Mean,
        Intent::Percentage,
        Intent::Ratio,
    ]);
    let feature = prop::sample::select(vec!["salary", "bonus", "hours"]);
    (
        basic,
        prop::sample::select(vec![0u8, 1, 2]),
        feature.clone(),
        feature,
        arb_pred(),
        arb_pred(),
        arb_pred(),
        arb_pred(),
    )
        .prop_map(|(m, shape, f, g, filter, cond, p1, p2)| {
            let mut sub = SubQuery::new(m);
            sub.filter = filter;
            if m != Intent::Count {
                sub.feature = Some(f.to_string());
            }
            if m == Intent::Percentage {
                sub.feature = None;
                sub.condition = Some(cond);
            }
            if m == Intent::Ratio {
                sub.denominator = Some(g.to_string());
            }
            match shape {
                1 => {
                    sub.intent = Intent::Comparison;
                    sub.measure = Some(m);
                    sub.compare = Some(vec![p1, p2]);
                }
                2 => {
                    sub.intent = Intent::GroupBy;
                    sub.measure = Some(m);
                    sub.group_by = Some("role".into());
                }
                _ => {}
            }
            sub
        })
}
