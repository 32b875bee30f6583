pub mod calc;
pub mod crypto;
pub mod dag;
pub mod data;
pub mod engine;
pub mod metrics;
pub mod optimizer;
pub mod planner;
pub mod predicate;
pub mod schema;
pub mod validator;

#[cfg(test)]
pub(crate) mod testkit;
