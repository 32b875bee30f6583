//! Bundled datasets: the university fixture, an Adult-census-style schema
//! with a seeded synthetic population, and the 20-query benchmark corpus.

use std::collections::HashMap;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::engine::{read_clients, ClientPool};
use crate::planner::ir::{parse_ir, QueryIR};
use crate::predicate::FieldValue;
use crate::schema::Schema;

pub const UNIVERSITY_SCHEMA: &str = include_str!("../data/university_schema.json");
pub const UNIVERSITY_CSV: &str = include_str!("../data/university.csv");
pub const SALARY_GAP_IR: &str = include_str!("../data/salary_gap.json");
pub const ADULT_SCHEMA: &str = include_str!("../data/adult_schema.json");
pub const ADULT_CORPUS: &str = include_str!("../data/corpus.json");

/// Record count of the census-derived dataset the synthetic one imitates.
pub const ADULT_ROWS: usize = 32_563;

pub fn university_schema() -> Arc<Schema> {
    Arc::new(Schema::from_json(UNIVERSITY_SCHEMA).expect("bundled schema parses"))
}

/// Ten staff: 3 professors, 2 PhD students, 5 others.
pub fn university_pool() -> ClientPool {
    read_clients(UNIVERSITY_CSV.as_bytes(), university_schema()).expect("bundled fixture loads")
}

/// Average salary of everyone, plus the professor and PhD averages and
/// their difference.
pub fn salary_gap_ir() -> QueryIR {
    parse_ir(SALARY_GAP_IR, university_schema()).expect("bundled query parses")
}

pub fn adult_schema() -> Arc<Schema> {
    Arc::new(Schema::from_json(ADULT_SCHEMA).expect("bundled schema parses"))
}

fn pick<'a>(rng: &mut ChaCha20Rng, items: &[(&'a str, u32)]) -> &'a str {
    let dist = WeightedIndex::new(items.iter().map(|(_, w)| *w)).expect("positive weights");
    items[dist.sample(rng)].0
}

/// A seeded synthetic population following the Adult-style schema.
pub fn synth_adult(n: usize, seed: u64) -> ClientPool {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let age = 17.0 + (rng.gen::<f64>().powf(1.4) * 73.0).round();
        let sex = pick(&mut rng, &[("Male", 67), ("Female", 33)]);
        let workclass = pick(
            &mut rng,
            &[
                ("Private", 70),
                ("Self-emp", 11),
                ("Government", 15),
                ("Without-pay", 4),
            ],
        );
        let education = pick(
            &mut rng,
            &[
                ("HS-grad", 32),
                ("Some-college", 22),
                ("Bachelors", 17),
                ("Masters", 6),
                ("Doctorate", 3),
                ("Other", 20),
            ],
        );
        let education_num = match education {
            "HS-grad" => 9.0,
            "Some-college" => 10.0,
            "Bachelors" => 13.0,
            "Masters" => 14.0,
            "Doctorate" => 16.0,
            _ => f64::from(rng.gen_range(1..=8)),
        };
        let marital = if age < 22.0 {
            pick(&mut rng, &[("Never-married", 90), ("Married", 10)])
        } else {
            pick(
                &mut rng,
                &[
                    ("Married", 48),
                    ("Never-married", 30),
                    ("Divorced", 13),
                    ("Separated", 4),
                    ("Widowed", 5),
                ],
            )
        };
        let relationship = match (marital, sex) {
            ("Married", "Male") => "Husband",
            ("Married", _) => "Wife",
            _ => pick(&mut rng, &[("Own-child", 30), ("Not-in-family", 50), ("Unmarried", 20)]),
        };
        let occupation = pick(
            &mut rng,
            &[
                ("Prof-specialty", 14),
                ("Exec-managerial", 13),
                ("Sales", 12),
                ("Craft-repair", 13),
                ("Adm-clerical", 12),
                ("Tech-support", 5),
                ("Other-service", 31),
            ],
        );
        let race = pick(
            &mut rng,
            &[
                ("White", 80),
                ("Black", 11),
                ("Asian-Pac-Islander", 5),
                ("Amer-Indian-Eskimo", 2),
                ("Other", 2),
            ],
        );
        let base_hours: f64 = match occupation {
            "Exec-managerial" | "Prof-specialty" => 45.0,
            "Other-service" => 34.0,
            _ => 40.0,
        };
        let hours = (base_hours + rng.gen_range(-12.0..12.0f64)).round().clamp(1.0, 99.0);
        let capital_gain = match rng.gen_range(0..1000) {
            0..=4 => 99999.0,
            5..=84 => f64::from(rng.gen_range(100..20000)),
            _ => 0.0,
        };
        let capital_loss = if rng.gen_bool(0.05) {
            f64::from(rng.gen_range(200..=4356))
        } else {
            0.0
        };
        let mut p_rich = 0.08 + 0.025 * (education_num - 9.0).max(0.0);
        if sex == "Male" {
            p_rich += 0.08;
        }
        if (35.0..60.0).contains(&age) {
            p_rich += 0.1;
        }
        let income = if rng.gen_bool(p_rich.clamp(0.01, 0.95)) {
            ">50K"
        } else {
            "<=50K"
        };
        let fnlwgt = f64::from(rng.gen_range(10_000..1_500_000));

        let mut row = HashMap::new();
        let mut num = |k: &str, v: f64| row.insert(k.to_string(), FieldValue::Num(v));
        num("age", age);
        num("fnlwgt", fnlwgt);
        num("education_num", education_num);
        num("capital_gain", capital_gain);
        num("capital_loss", capital_loss);
        num("hours_per_week", hours);
        for (k, v) in [
            ("workclass", workclass),
            ("education", education),
            ("marital_status", marital),
            ("occupation", occupation),
            ("relationship", relationship),
            ("race", race),
            ("sex", sex),
            ("income", income),
        ] {
            row.insert(k.to_string(), FieldValue::Cat(v.to_string()));
        }
        rows.push(row);
    }
    ClientPool::new(adult_schema(), rows).expect("generated rows conform")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::load_clients;

    #[test]
    fn university_fixture_shape() {
        let pool = university_pool();
        assert_eq!(pool.len(), 10);
        let count = |r: &str| {
            pool.records()
                .iter()
                .filter(|rec| pool.value(rec, "role") == Some(&FieldValue::Cat(r.into())))
                .count()
        };
        assert_eq!((count("professor"), count("phd")), (3, 2));
        assert_eq!(salary_gap_ir().subqueries.len(), 3);
    }

    #[test]
    fn synth_is_seeded() {
        assert_eq!(synth_adult(50, 1).records(), synth_adult(50, 1).records());
        assert_ne!(synth_adult(50, 1).records(), synth_adult(50, 2).records());
        assert_eq!(adult_schema().len(), 14);
    }

    #[test]
    fn full_size_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adult.csv");
        std::fs::write(&path, synth_adult(ADULT_ROWS, 7).to_csv().unwrap()).unwrap();
        let pool = load_clients(&path, adult_schema()).unwrap();
        assert_eq!(pool.len(), 32_563);
    }
}
