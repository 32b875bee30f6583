use std::sync::Arc;

use num_rational::BigRational;
use proptest::prelude::*;
use rand::SeedableRng;

use super::*;
use crate::crypto::{keygen, MockScheme};
use crate::optimizer::optimize;
use crate::planner::ir::{parse_ir, AnswerKey, QueryIR, SubQuery};
use crate::planner::Planner;
use crate::predicate::{Atom, Comparator, Literal, Predicate};
use crate::schema::Schema;
use crate::testkit::{arb_sub, role};

fn university() -> ClientPool {
    let schema = Arc::new(Schema::from_json(include_str!("../../data/university_schema.json")).unwrap());
    read_clients(include_str!("../../data/university.csv").as_bytes(), schema).unwrap()
}

fn salary_gap(pool: &ClientPool) -> QueryIR {
    parse_ir(include_str!("../../data/salary_gap.json"), pool.schema_arc()).unwrap()
}

fn single(pool: &ClientPool, sub: SubQuery) -> (FaDag, QueryIR) {
    let ir = QueryIR::new("", vec![sub], vec![], pool.schema_arc()).unwrap();
    let dag = Planner::default().plan(&ir).unwrap().remove(0);
    (dag, ir)
}

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(n.into(), d.into())
}

#[test]
fn laplace_is_seeded() {
    let draw = |seed| sample_laplace(1.0, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
    assert!(matches!(
        sample_laplace(0.0, &mut ChaCha20Rng::seed_from_u64(0)),
        Err(EngineError::NonPositiveScale(_))
    ));
    assert!(sample_laplace(-1.0, &mut ChaCha20Rng::seed_from_u64(0)).is_err());
}

#[test]
fn laplace_moments() {
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let n = 1_000_000;
    let xs: Vec<f64> = (0..n).map(|_| sample_laplace(1.0, &mut rng).unwrap()).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 2.0).abs() < 0.02, "variance {var}");
}

#[test]
fn count_of_phds() {
    let pool = university();
    let (dag, _) = single(&pool, SubQuery::count(role("phd")));
    let r = execute(&dag, &pool, &MockScheme::new(), &ExecConfig::noiseless(1)).unwrap();
    assert_eq!(r.answers.len(), 1);
    assert_eq!(r.answers[0].value, 2.0);
}

#[test]
fn mean_of_three_salaries() {
    let schema = Arc::new(Schema::from_json(r#"{"salary": {"type": "numeric", "bounds": [0, 100]}}"#).unwrap());
    let pool = read_clients("salary\n10\n20\n30\n".as_bytes(), schema).unwrap();
    let (dag, _) = single(&pool, SubQuery::mean("salary", Predicate::always()));
    let r = execute(&dag, &pool, &MockScheme::new(), &ExecConfig::noiseless(1)).unwrap();
    assert_eq!(r.answers[0].value, 20.0);
}

#[test]
fn salary_gap_matches_oracle_under_paillier() {
    let pool = university();
    let ir = salary_gap(&pool);
    let (dag, _) = optimize(&Planner::default().plan(&ir).unwrap(), &ir).unwrap();
    let keys = keygen(128, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
    let r = execute(&dag, &pool, &keys, &ExecConfig::noiseless(3)).unwrap();
    let oracle = plaintext_oracle(&ir, &pool, DEFAULT_SCALE).unwrap();
    assert_eq!(compare_with_oracle(&dag, &ir, &r, &oracle), Vec::<String>::new());
    let get = |k: AnswerKey| oracle.iter().find(|(key, _)| *key == k).unwrap().1.clone();
    assert_eq!(get(AnswerKey::Query(0)), ratio(56075, 1000));
    assert_eq!(get(AnswerKey::Combine(0)), ratio(78375, 1000));
}

#[test]
fn audit_log_holds_sizes_only() {
    let pool = university();
    let ir = salary_gap(&pool);
    let (dag, _) = optimize(&Planner::default().plan(&ir).unwrap(), &ir).unwrap();
    let r = execute(&dag, &pool, &MockScheme::new(), &ExecConfig::noiseless(0)).unwrap();
    assert_eq!(r.audit.len(), dag.len());
    let json = serde_json::to_value(&r.audit).unwrap();
    for entry in json.as_array().unwrap() {
        let keys: Vec<&str> = entry.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["bytes", "items", "kind", "node"]);
    }
    let access: usize = r
        .audit
        .iter()
        .filter(|e| e.kind == OpKind::Access)
        .map(|e| e.items)
        .sum();
    assert_eq!(access, pool.len());
}

#[test]
fn empty_fold_decrypts_to_zero() {
    let pool = university();
    let nobody = Predicate::from_atoms(vec![Atom::eq("role", "phd"), Atom::eq("role", "staff")]);
    let (dag, _) = single(&pool, SubQuery::count(nobody.clone()));
    let r = execute(&dag, &pool, &MockScheme::new(), &ExecConfig::noiseless(0)).unwrap();
    assert_eq!(r.answers[0].value, 0.0);

    let (dag, ir) = single(&pool, SubQuery::mean("salary", nobody));
    assert!(matches!(
        execute(&dag, &pool, &MockScheme::new(), &ExecConfig::noiseless(0)),
        Err(EngineError::DivisionByZero { noisy: false, .. })
    ));
    assert!(matches!(
        plaintext_oracle(&ir, &pool, DEFAULT_SCALE),
        Err(OracleError::EmptyGroup(_))
    ));
}

#[test]
fn percentage_by_direct_count() {
    let pool = university();
    let mut sub = SubQuery::new(crate::planner::ir::Intent::Percentage);
    sub.condition = Some(Predicate::atom(Atom::new("hours", Comparator::Gt, Literal::Num(45.0))));
    let (dag, ir) = single(&pool, sub);
    let oracle = plaintext_oracle(&ir, &pool, DEFAULT_SCALE).unwrap();
    assert_eq!(oracle[0].1, ratio(2, 5));
    let r = execute(&dag, &pool, &MockScheme::new(), &ExecConfig::noiseless(0)).unwrap();
    assert_eq!(r.answers[0].value, 0.4);
}

#[test]
fn noise_is_seeded_and_calibrated() {
    let pool = university();
    let (dag, _) = single(&pool, SubQuery::count(Predicate::always()));
    let scheme = MockScheme::new();
    let run = |seed| {
        execute(
            &dag,
            &pool,
            &scheme,
            &ExecConfig {
                seed,
                ..ExecConfig::default()
            },
        )
        .unwrap()
    };
    assert_eq!(run(4), run(4));
    assert_eq!(run(4).to_json(), run(4).to_json());
    let errs: Vec<f64> = (0..400).map(|s| run(s).answers[0].value - 10.0).collect();
    assert!(errs.iter().any(|e| *e != 0.0));
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(mean.abs() < 0.3, "mean noise {mean}");
}

#[test]
fn invalid_dags_are_refused() {
    let pool = university();
    let (mut dag, _) = single(&pool, SubQuery::count(role("phd")));
    dag.remove_node("noise.count.role_eq_phd");
    assert!(matches!(
        execute(&dag, &pool, &MockScheme::new(), &ExecConfig::noiseless(0)),
        Err(EngineError::Invalid(_))
    ));
}

fn arb_pool() -> impl Strategy<Value = ClientPool> {
    let rec = (0usize..4, 0u32..30000, 0u32..9900, -2000i32..5000);
    prop::collection::vec(rec, 1..25).prop_map(|rows| {
        let roles = ["professor", "phd", "masters", "staff"];
        let mut text = String::from("role,salary,hours,bonus\n");
        for (r, s, h, b) in rows {
            text += &format!(
                "{},{},{},{}\n",
                roles[r],
                s as f64 / 100.0,
                h as f64 / 100.0,
                b as f64 / 100.0
            );
        }
        read_clients(text.as_bytes(), crate::testkit::schema()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn optimized_plans_preserve_answers(subs in prop::collection::vec(arb_sub(), 1..4), pool in arb_pool()) {
        let Ok(ir) = QueryIR::new("", subs, vec![], pool.schema_arc()) else { return Ok(()); };
        let Ok(oracle) = plaintext_oracle(&ir, &pool, DEFAULT_SCALE) else { return Ok(()); };
        let dags = Planner::default().plan(&ir).unwrap();
        let (dag, _) = optimize(&dags, &ir).unwrap();
        let r = execute(&dag, &pool, &MockScheme::new(), &ExecConfig::noiseless(0)).unwrap();
        prop_assert_eq!(compare_with_oracle(&dag, &ir, &r, &oracle), Vec::<String>::new());
    }
}
