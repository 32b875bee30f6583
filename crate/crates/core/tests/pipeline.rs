use num_rational::BigRational;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use fa_forge_core::crypto::{keygen, DEFAULT_SCALE};
use fa_forge_core::dag::{decode_dag, encode_dag};
use fa_forge_core::data;
use fa_forge_core::engine::{compare_with_oracle, execute, load_clients, plaintext_oracle, ExecConfig};
use fa_forge_core::optimizer::optimize;
use fa_forge_core::planner::{coarse_decompose, AnswerKey, Backend, Planner};
use fa_forge_core::validator::validate;

#[test]
fn csv_to_answers_under_paillier() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("staff.csv");
    std::fs::write(&path, data::UNIVERSITY_CSV).unwrap();
    let pool = load_clients(&path, data::university_schema()).unwrap();

    let ir = coarse_decompose(data::SALARY_GAP_IR, &Backend::Ir, pool.schema_arc()).unwrap();
    let (dag, _) = optimize(&Planner::default().plan(&ir).unwrap(), &ir).unwrap();
    let dag = decode_dag(&encode_dag(&dag)).unwrap();
    assert!(validate(&dag, &ir).is_empty());

    let keys = keygen(128, &mut ChaCha20Rng::seed_from_u64(21)).unwrap();
    let result = execute(&dag, &pool, &keys, &ExecConfig::noiseless(21)).unwrap();
    let oracle = plaintext_oracle(&ir, &pool, DEFAULT_SCALE).unwrap();
    assert!(compare_with_oracle(&dag, &ir, &result, &oracle).is_empty());

    let gap = oracle.iter().find(|(k, _)| *k == AnswerKey::Combine(0)).unwrap();
    assert_eq!(gap.1, BigRational::new(627.into(), 8.into()));
}

#[test]
fn noisy_runs_differ_only_by_seed() {
    let pool = data::university_pool();
    let ir = data::salary_gap_ir();
    let (dag, _) = optimize(&Planner::default().plan(&ir).unwrap(), &ir).unwrap();
    let keys = keygen(128, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
    let run = |seed| {
        execute(
            &dag,
            &pool,
            &keys,
            &ExecConfig {
                seed,
                ..ExecConfig::default()
            },
        )
        .unwrap()
        .to_json()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}
