//! Executes a validated DAG over a simulated client population: local
//! filtering, per-client encryption, homomorphic aggregation, Laplace noise,
//! decryption and final calculation.

mod clients;
mod oracle;

use std::collections::HashMap;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::calc::{rational_to_f64, CalcError};
use crate::crypto::{AheScheme, Ciphertext, CryptoError, FixedPoint, DEFAULT_SCALE};
use crate::dag::{FaDag, OpKind, Slot};
use crate::validator::{check_structure, Violation};

pub use clients::{load_clients, read_clients, ClientError, ClientPool, ClientRecord};
pub use oracle::{compare_with_oracle, plaintext_oracle, OracleError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("DAG is not executable: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("feature `{feature}` used by `{node}` is missing or not numeric")]
    Feature { node: String, feature: String },
    #[error("Laplace scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("division by zero in `{node}`{}", if *.noisy { " (a noisy aggregate can be zero)" } else { "" })]
    DivisionByZero { node: String, noisy: bool },
    #[error("`{node}`: {source}")]
    Calc { node: String, source: CalcError },
    #[error("`{node}`: {source}")]
    Crypto { node: String, source: CryptoError },
}

/// Draw from Laplace(0, b) by inverse CDF.
pub fn sample_laplace(b: f64, rng: &mut dyn RngCore) -> Result<f64, EngineError> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(EngineError::NonPositiveScale(b));
    }
    let u = loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        if u > -0.5 {
            break u;
        }
    };
    Ok(-b * u.signum() * (1.0 - 2.0 * u.abs()).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecConfig {
    pub seed: u64,
    pub noise: bool,
    pub scale: u32,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            noise: true,
            scale: DEFAULT_SCALE,
        }
    }
}

impl ExecConfig {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            seed,
            noise: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Answer {
    pub node: String,
    pub value: f64,
    #[serde(serialize_with = "ser_rational")]
    pub exact: BigRational,
}

fn ser_rational<S: Serializer>(r: &BigRational, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&r.to_string())
}

/// Sizes only: no record carries a client value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    pub node: String,
    pub kind: OpKind,
    /// Contributing clients (Access, Encrypt) or ciphertexts folded (Aggregate).
    pub items: usize,
    /// Ciphertext bytes produced by the node.
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionResult {
    pub seed: u64,
    pub noise: bool,
    pub scale: u32,
    pub answers: Vec<Answer>,
    pub audit: Vec<AuditEntry>,
}

impl ExecutionResult {
    pub fn get(&self, node: &str) -> Option<&Answer> {
        self.answers.iter().find(|a| a.node == node)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

enum Value {
    /// Per matching client (by index), the scaled integer of each output slot.
    Rows(Vec<(usize, Vec<BigInt>)>),
    Ciphers(Vec<Ciphertext>),
    Cipher(Ciphertext),
    Plain(BigRational),
}

fn slot_value(
    pool: &ClientPool,
    rec: &ClientRecord,
    slot: &Slot,
    fixed: &FixedPoint,
    node: &str,
) -> Result<BigInt, EngineError> {
    let one = BigInt::from(fixed.scale);
    match slot {
        Slot::Indicator => Ok(one),
        Slot::Flag(p) => Ok(if pool.matches(rec, p) { one } else { BigInt::from(0) }),
        Slot::Value(f) => {
            let x = pool.number(rec, f).ok_or_else(|| EngineError::Feature {
                node: node.to_string(),
                feature: f.clone(),
            })?;
            fixed.scaled(x).map_err(|source| EngineError::Crypto {
                node: node.to_string(),
                source,
            })
        }
    }
}

/// Run every node in topological order and report the answer nodes.
pub fn execute(
    dag: &FaDag,
    pool: &ClientPool,
    scheme: &dyn AheScheme,
    config: &ExecConfig,
) -> Result<ExecutionResult, EngineError> {
    let violations = check_structure(dag);
    if !violations.is_empty() {
        return Err(EngineError::Invalid(violations));
    }
    let fixed = FixedPoint::new(config.scale);
    let n: &BigUint = scheme.modulus();
    let mut noise_rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut enc_rng = ChaCha20Rng::seed_from_u64(config.seed);
    enc_rng.set_stream(1);

    let mut values: HashMap<String, Value> = HashMap::new();
    let mut audit = Vec::new();
    for id in dag.topo_order() {
        let node = dag.node(&id).expect("topo order lists nodes");
        let crypto = |source: CryptoError| EngineError::Crypto {
            node: id.clone(),
            source,
        };
        let preds: Vec<&str> = dag.predecessors(&id).collect();
        let (value, items, bytes) = match node.kind {
            OpKind::Access => {
                let pred = node.predicate.clone().unwrap_or_default();
                let mut rows = Vec::new();
                for (i, rec) in pool.records().iter().enumerate() {
                    if pool.matches(rec, &pred) {
                        let vals = node
                            .outputs
                            .iter()
                            .map(|s| slot_value(pool, rec, s, &fixed, &id))
                            .collect::<Result<Vec<_>, _>>()?;
                        rows.push((i, vals));
                    }
                }
                let items = rows.len();
                (Value::Rows(rows), items, 0)
            }
            OpKind::Encrypt => {
                let src = preds[0];
                let slot = node.encrypted_slot().expect("validated").canonical();
                let pos = dag
                    .node(src)
                    .and_then(|a| a.outputs.iter().position(|s| s.canonical() == slot))
                    .expect("validated");
                let Some(Value::Rows(rows)) = values.get(src) else {
                    unreachable!("Encrypt follows Access")
                };
                let mut out = Vec::with_capacity(rows.len());
                for (_, vals) in rows {
                    let m = fixed.encode_int(&vals[pos], n).map_err(crypto)?;
                    out.push(scheme.encrypt(&m, &mut enc_rng).map_err(crypto)?);
                }
                let bytes = out.iter().map(Ciphertext::byte_len).sum();
                let items = out.len();
                (Value::Ciphers(out), items, bytes)
            }
            OpKind::Aggregate => {
                let mut acc: Option<Ciphertext> = None;
                let mut items = 0;
                for p in &preds {
                    let Some(Value::Ciphers(cs)) = values.get(*p) else {
                        unreachable!("Aggregate follows Encrypt")
                    };
                    for c in cs {
                        items += 1;
                        acc = Some(match acc {
                            None => c.clone(),
                            Some(a) => scheme.add(&a, c).map_err(crypto)?,
                        });
                    }
                }
                let total = match acc {
                    Some(c) => c,
                    None => scheme.encrypt(&BigUint::from(0u8), &mut enc_rng).map_err(crypto)?,
                };
                let bytes = total.byte_len();
                (Value::Cipher(total), items, bytes)
            }
            OpKind::NoiseAdd => {
                let Some(Value::Cipher(c)) = values.get(preds[0]) else {
                    unreachable!("NoiseAdd follows Aggregate or NoiseAdd")
                };
                let m = if config.noise {
                    let b = node.dp_params.expect("validated").laplace_scale();
                    let eta = sample_laplace(b, &mut noise_rng)?;
                    fixed.encode(eta, n).map_err(crypto)?
                } else {
                    BigUint::from(0u8)
                };
                let noise = scheme.encrypt(&m, &mut enc_rng).map_err(crypto)?;
                let out = scheme.add(c, &noise).map_err(crypto)?;
                let bytes = out.byte_len();
                (Value::Cipher(out), 1, bytes)
            }
            OpKind::Decrypt => {
                let Some(Value::Cipher(c)) = values.get(preds[0]) else {
                    unreachable!("Decrypt follows NoiseAdd")
                };
                let m = scheme.decrypt(c).map_err(crypto)?;
                (Value::Plain(fixed.decode_exact(&m, n)), 1, 0)
            }
            OpKind::Calculate => {
                let expr = node.calc_expr.as_ref().expect("validated");
                let lookup = |name: &str| match values.get(name) {
                    Some(Value::Plain(v)) => Some(v.clone()),
                    _ => None,
                };
                let v = expr.eval(&lookup).map_err(|source| match source {
                    CalcError::DivisionByZero => EngineError::DivisionByZero {
                        node: id.clone(),
                        noisy: config.noise,
                    },
                    source => EngineError::Calc {
                        node: id.clone(),
                        source,
                    },
                })?;
                (Value::Plain(v), 1, 0)
            }
        };
        audit.push(AuditEntry {
            node: id.clone(),
            kind: node.kind,
            items,
            bytes,
        });
        values.insert(id, value);
    }

    let answers = dag
        .answer_nodes()
        .iter()
        .map(|a| {
            let Some(Value::Plain(v)) = values.get(a) else {
                unreachable!("answers are Decrypt or Calculate nodes")
            };
            Answer {
                node: a.clone(),
                value: rational_to_f64(v),
                exact: v.clone(),
            }
        })
        .collect();
    Ok(ExecutionResult {
        seed: config.seed,
        noise: config.noise,
        scale: config.scale,
        answers,
        audit,
    })
}

#[cfg(test)]
mod tests;
