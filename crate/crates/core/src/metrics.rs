//! Cost metrics for DAGs and the corpus benchmark harness.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::AheScheme;
use crate::dag::{encode_dag, FaDag, OpKind};
use crate::engine::{compare_with_oracle, execute, plaintext_oracle, ClientPool, ExecConfig};
use crate::optimizer::{naive_plan, optimize};
use crate::planner::ir::{parse_ir_value, QueryIR};
use crate::planner::prompts::PromptSet;
use crate::planner::{coarse_decompose, repair_llm_output, Backend, ChatModel, Expected, LlmArtifact, Planner};
use crate::schema::Schema;
use crate::validator::validate;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("client pool is empty")]
    EmptyPool,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("malformed corpus: {0}")]
    Corpus(#[from] serde_json::Error),
    #[error("unknown report format `{0}` (expected markdown or csv)")]
    UnknownFormat(String),
    #[error("malformed report: {0}")]
    Report(String),
}

/// Per-client averages for the client-side stages, node counts for the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub acce: f64,
    pub enc: f64,
    pub aggr: f64,
    pub dp: usize,
    pub dec: usize,
    pub cal: usize,
}

pub fn count_ops(dag: &FaDag, pool: &ClientPool) -> Result<OpCounts, MetricsError> {
    if pool.is_empty() {
        return Err(MetricsError::EmptyPool);
    }
    let n = pool.len() as f64;
    let matched = |id: &str| -> usize {
        let pred = dag.node(id).and_then(|a| a.predicate.clone()).unwrap_or_default();
        pool.records().iter().filter(|r| pool.matches(r, &pred)).count()
    };
    let (mut acce, mut enc) = (0usize, 0usize);
    for a in dag.nodes_of(OpKind::Access) {
        let m = matched(&a.id);
        acce += m;
        enc += m * a.outputs.len();
    }
    let mut aggr = 0usize;
    for g in dag.nodes_of(OpKind::Aggregate) {
        for e in dag.predecessors(&g.id) {
            aggr += dag.predecessors(e).map(matched).sum::<usize>();
        }
    }
    Ok(OpCounts {
        acce: acce as f64 / n,
        enc: enc as f64 / n,
        aggr: aggr as f64 / n,
        dp: dag.count_of(OpKind::NoiseAdd),
        dec: dag.count_of(OpKind::Decrypt),
        cal: dag.count_of(OpKind::Calculate),
    })
}

/// Means of [`OpCounts`] over a set of DAGs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpMeans {
    pub acce: f64,
    pub enc: f64,
    pub aggr: f64,
    pub dp: f64,
    pub dec: f64,
    pub cal: f64,
}

impl OpMeans {
    pub fn of(counts: &[OpCounts]) -> Option<Self> {
        if counts.is_empty() {
            return None;
        }
        let k = counts.len() as f64;
        let mean = |f: &dyn Fn(&OpCounts) -> f64| counts.iter().map(f).sum::<f64>() / k;
        Some(Self {
            acce: mean(&|c| c.acce),
            enc: mean(&|c| c.enc),
            aggr: mean(&|c| c.aggr),
            dp: mean(&|c| c.dp as f64),
            dec: mean(&|c| c.dec as f64),
            cal: mean(&|c| c.cal as f64),
        })
    }

    fn columns(&self) -> [f64; 6] {
        [self.acce, self.enc, self.aggr, self.dp, self.dec, self.cal]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub text: String,
    pub ir: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<serde_json::Value>,
}

pub fn load_corpus(text: &str) -> Result<Vec<CorpusEntry>, MetricsError> {
    let entries: Vec<CorpusEntry> = serde_json::from_str(text)?;
    if entries.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(entries)
}

/// How a method turns a corpus entry into one DAG.
pub enum Pipeline<'a> {
    /// Decompose, plan per sub-query from templates, then optimize or take the
    /// naive union.
    Hierarchical {
        backend: Backend<'a>,
        planner: Planner,
        optimize: bool,
    },
    /// Ask a model for the whole DAG at once, optionally with one worked example.
    Direct {
        model: &'a dyn ChatModel,
        prompts: &'a PromptSet,
        max_retries: usize,
        example: Option<String>,
    },
}

pub struct Method<'a> {
    pub name: String,
    pub pipeline: Pipeline<'a>,
}

impl Method<'_> {
    /// Structured-IR backend with the standard templates.
    pub fn deterministic(name: &str, optimize: bool) -> Method<'static> {
        Method {
            name: name.to_string(),
            pipeline: Pipeline::Hierarchical {
                backend: Backend::Ir,
                planner: Planner::default(),
                optimize,
            },
        }
    }

    fn produce(&self, entry: &CorpusEntry, gold: &QueryIR, schema: &Schema) -> Result<FaDag, String> {
        match &self.pipeline {
            Pipeline::Hierarchical {
                backend,
                planner,
                optimize: opt,
            } => {
                let text = match backend {
                    Backend::Ir => entry.ir.to_string(),
                    Backend::Llm { .. } => entry.text.clone(),
                };
                let ir = coarse_decompose(&text, backend, gold.schema_arc().clone()).map_err(|e| e.to_string())?;
                let dags = planner.plan(&ir).map_err(|e| e.to_string())?;
                if *opt {
                    optimize(&dags, &ir).map(|(d, _)| d).map_err(|e| e.to_string())
                } else {
                    naive_plan(&dags, &ir).map_err(|e| e.to_string())
                }
            }
            Pipeline::Direct {
                model,
                prompts,
                max_retries,
                example,
            } => {
                let prompt = match example {
                    Some(ex) => prompts.one_shot(&entry.text, schema, ex),
                    None => prompts.zero_shot(&entry.text, schema),
                };
                match repair_llm_output(*model, &prompt, &Expected::Dag, *max_retries) {
                    Ok(LlmArtifact::Dag(d)) => Ok(d),
                    Ok(LlmArtifact::Ir(_)) => Err("expected a DAG".into()),
                    Err(e) => Err(e.to_string()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub id: String,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ops: Option<OpCounts>,
    /// Whether the noiseless execution reproduced the oracle exactly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dag: Option<String>,
}

/// One method over one corpus: per-query outcomes and the summary row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRun {
    pub row: ReportRow,
    pub outcomes: Vec<QueryOutcome>,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub seed: u64,
    pub scale: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: crate::crypto::DEFAULT_SCALE,
        }
    }
}

/// Plan, validate, cost and execute every entry with one method. Per-query
/// failures are recorded, never fatal.
pub fn run_corpus(
    corpus: &[CorpusEntry],
    method: &Method<'_>,
    pool: &ClientPool,
    scheme: &dyn AheScheme,
    config: &BenchConfig,
) -> Result<MethodRun, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if pool.is_empty() {
        return Err(MetricsError::EmptyPool);
    }
    let mut outcomes = Vec::with_capacity(corpus.len());
    for entry in corpus {
        outcomes.push(run_entry(entry, method, pool, scheme, config));
    }
    let completed: Vec<OpCounts> = outcomes.iter().filter(|o| o.completed).filter_map(|o| o.ops).collect();
    let ratio = outcomes.iter().filter(|o| o.completed).count() as f64 / outcomes.len() as f64;
    Ok(MethodRun {
        row: ReportRow::new(&method.name, ratio, OpMeans::of(&completed)),
        outcomes,
    })
}

fn run_entry(
    entry: &CorpusEntry,
    method: &Method<'_>,
    pool: &ClientPool,
    scheme: &dyn AheScheme,
    config: &BenchConfig,
) -> QueryOutcome {
    let mut out = QueryOutcome {
        id: entry.id.clone(),
        completed: false,
        error: None,
        ops: None,
        exact: None,
        dag: None,
    };
    let gold = match parse_ir_value(entry.ir.clone(), pool.schema_arc()) {
        Ok(ir) => ir,
        Err(e) => {
            out.error = Some(format!("corpus IR: {e}"));
            return out;
        }
    };
    let dag = match method.produce(entry, &gold, pool.schema()) {
        Ok(d) => d,
        Err(e) => {
            out.error = Some(e);
            return out;
        }
    };
    out.dag = Some(encode_dag(&dag));
    let violations = validate(&dag, &gold);
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
        out.error = Some(msgs.join("; "));
        return out;
    }
    out.completed = true;
    out.ops = count_ops(&dag, pool).ok();
    let exec = ExecConfig {
        seed: config.seed,
        noise: false,
        scale: config.scale,
    };
    match (
        execute(&dag, pool, scheme, &exec),
        plaintext_oracle(&gold, pool, config.scale),
    ) {
        (Ok(result), Ok(oracle)) => {
            let diffs = compare_with_oracle(&dag, &gold, &result, &oracle);
            out.exact = Some(diffs.is_empty());
            if !diffs.is_empty() {
                out.error = Some(diffs.join("; "));
            }
        }
        (Err(e), _) => out.error = Some(format!("execution: {e}")),
        (_, Err(e)) => out.error = Some(format!("oracle: {e}")),
    }
    out
}

/// One table row. Methods completing under half the queries report no
/// operation means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub ratio: f64,
    pub ops: Option<OpMeans>,
}

impl ReportRow {
    pub fn new(method: &str, ratio: f64, ops: Option<OpMeans>) -> Self {
        Self {
            method: method.to_string(),
            ratio,
            ops: if ratio < 0.5 { None } else { ops },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusReport {
    pub dataset: String,
    pub queries: usize,
    pub rows: Vec<ReportRow>,
}

impl CorpusReport {
    pub fn new(dataset: &str, queries: usize, runs: &[MethodRun]) -> Self {
        Self {
            dataset: dataset.to_string(),
            queries,
            rows: runs.iter().map(|r| r.row.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            _ => Err(MetricsError::UnknownFormat(s.to_string())),
        }
    }
}

const COLUMNS: [&str; 7] = ["Ratio", "Acce", "Enc", "Aggr", "DP", "Dec", "Cal"];

pub fn render_report(report: &CorpusReport, format: &str) -> Result<String, MetricsError> {
    Ok(render(report, format.parse()?))
}

pub fn render(report: &CorpusReport, format: ReportFormat) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(s, "{} ({} queries)\n", report.dataset, report.queries);
            let _ = writeln!(s, "| Method | {} |", COLUMNS.join(" | "));
            let _ = writeln!(s, "|---{}|", "|---:".repeat(COLUMNS.len()));
            for row in &report.rows {
                let ops: Vec<String> = match &row.ops {
                    Some(m) => m.columns().iter().map(|v| format!("{v:.2}")).collect(),
                    None => vec!["-".into(); 6],
                };
                let _ = writeln!(s, "| {} | {:.2} | {} |", row.method, row.ratio, ops.join(" | "));
            }
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["dataset", "queries", "method"];
            header.extend(COLUMNS);
            w.write_record(&header).expect("in-memory write");
            for row in &report.rows {
                let mut rec = vec![
                    report.dataset.clone(),
                    report.queries.to_string(),
                    row.method.clone(),
                    row.ratio.to_string(),
                ];
                match &row.ops {
                    Some(m) => rec.extend(m.columns().iter().map(f64::to_string)),
                    None => rec.extend(std::iter::repeat_n("-".to_string(), 6)),
                }
                w.write_record(&rec).expect("in-memory write");
            }
            s = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
        }
    }
    s
}

/// Parse the CSV rendering back into a report.
pub fn parse_report_csv(text: &str) -> Result<CorpusReport, MetricsError> {
    let bad = |m: String| MetricsError::Report(m);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut report = CorpusReport {
        dataset: String::new(),
        queries: 0,
        rows: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 10 {
            return Err(bad(format!("row {}: expected 10 fields, found {}", i + 1, rec.len())));
        }
        let num = |j: usize| {
            rec[j]
                .parse::<f64>()
                .map_err(|_| bad(format!("row {}: `{}` is not a number", i + 1, &rec[j])))
        };
        report.dataset = rec[0].to_string();
        report.queries = rec[1]
            .parse()
            .map_err(|_| bad(format!("row {}: bad query count", i + 1)))?;
        let ops = if &rec[4] == "-" {
            None
        } else {
            Some(OpMeans {
                acce: num(4)?,
                enc: num(5)?,
                aggr: num(6)?,
                dp: num(7)?,
                dec: num(8)?,
                cal: num(9)?,
            })
        };
        report.rows.push(ReportRow {
            method: rec[2].to_string(),
            ratio: num(3)?,
            ops,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MockScheme;
    use crate::data::{adult_schema, salary_gap_ir, synth_adult, university_pool, ADULT_CORPUS};
    use crate::optimizer::naive_union;
    use crate::planner::ir::SubQuery;
    use crate::planner::TemplateRepo;
    use crate::predicate::Predicate;

    fn salary_gap_dags() -> (Vec<FaDag>, QueryIR) {
        let ir = salary_gap_ir();
        (Planner::default().plan(&ir).unwrap(), ir)
    }

    #[test]
    fn salary_gap_naive_counts() {
        let (dags, _) = salary_gap_dags();
        let c = count_ops(&naive_union(&dags).unwrap(), &university_pool()).unwrap();
        assert_eq!(
            c,
            OpCounts {
                acce: 1.5,
                enc: 3.0,
                aggr: 3.0,
                dp: 6,
                dec: 6,
                cal: 3
            }
        );
    }

    #[test]
    fn salary_gap_optimized_counts() {
        let (dags, ir) = salary_gap_dags();
        let c = count_ops(&optimize(&dags, &ir).unwrap().0, &university_pool()).unwrap();
        assert_eq!(
            c,
            OpCounts {
                acce: 1.0,
                enc: 2.0,
                aggr: 2.0,
                dp: 6,
                dec: 6,
                cal: 6
            }
        );
    }

    #[test]
    fn unit_chain_and_pool_invariance() {
        let ir = QueryIR::new("", vec![SubQuery::count(Predicate::always())], vec![], adult_schema()).unwrap();
        let dag = Planner::default().plan(&ir).unwrap().remove(0);
        let unit = OpCounts {
            acce: 1.0,
            enc: 1.0,
            aggr: 1.0,
            dp: 1,
            dec: 1,
            cal: 0,
        };
        for n in [1, 7, 300] {
            assert_eq!(count_ops(&dag, &synth_adult(n, 3)).unwrap(), unit);
        }
    }

    fn corpus() -> Vec<CorpusEntry> {
        load_corpus(ADULT_CORPUS).unwrap()
    }

    #[test]
    fn corpus_completes_and_matches_oracle() {
        let pool = synth_adult(400, 11);
        let run = run_corpus(
            &corpus(),
            &Method::deterministic("on", true),
            &pool,
            &MockScheme::new(),
            &BenchConfig::default(),
        )
        .unwrap();
        for o in &run.outcomes {
            assert!(o.completed && o.exact == Some(true), "{}: {:?}", o.id, o.error);
        }
        assert_eq!(run.row.ratio, 1.0);
    }

    #[test]
    fn optimizer_trend_on_corpus() {
        let pool = synth_adult(300, 5);
        let run = |on| {
            let r = run_corpus(
                &corpus(),
                &Method::deterministic("m", on),
                &pool,
                &MockScheme::new(),
                &BenchConfig::default(),
            )
            .unwrap();
            (r.row.ops.unwrap(), r.outcomes)
        };
        let ((off, off_q), (on, on_q)) = (run(false), run(true));
        assert!(on.acce < off.acce && on.enc < off.enc && on.aggr < off.aggr);
        assert!(on.cal > off.cal);
        for (a, b) in on_q.iter().zip(&off_q) {
            let (a, b) = (a.ops.unwrap(), b.ops.unwrap());
            assert!(a.acce <= b.acce && a.enc <= b.enc && a.aggr <= b.aggr, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn empty_templates_complete_nothing() {
        let pool = synth_adult(50, 11);
        let method = Method {
            name: "no templates".into(),
            pipeline: Pipeline::Hierarchical {
                backend: Backend::Ir,
                planner: Planner::new(TemplateRepo::empty(), 1.0),
                optimize: true,
            },
        };
        let run = run_corpus(&corpus(), &method, &pool, &MockScheme::new(), &BenchConfig::default()).unwrap();
        assert_eq!(run.row.ratio, 0.0);
        assert_eq!(run.row.ops, None);
        assert!(run.outcomes[0].error.as_deref().unwrap().contains("no template"));
    }

    #[test]
    fn empty_inputs_are_errors() {
        let pool = synth_adult(5, 1);
        assert!(matches!(load_corpus("[]"), Err(MetricsError::EmptyCorpus)));
        assert!(matches!(
            run_corpus(
                &[],
                &Method::deterministic("x", true),
                &pool,
                &MockScheme::new(),
                &BenchConfig::default()
            ),
            Err(MetricsError::EmptyCorpus)
        ));
    }

    fn sample_report() -> CorpusReport {
        let ops = OpMeans {
            acce: 1.25,
            enc: 2.5,
            aggr: 2.0,
            dp: 3.65,
            dec: 3.65,
            cal: 5.5,
        };
        CorpusReport {
            dataset: "adult".into(),
            queries: 20,
            rows: vec![
                ReportRow::new("hierarchical", 1.0, Some(ops)),
                ReportRow::new("zero-shot", 0.1, Some(ops)),
                ReportRow::new("no templates", 0.0, None),
            ],
        }
    }

    #[test]
    fn low_completion_renders_dashes() {
        let md = render_report(&sample_report(), "markdown").unwrap();
        let zero_shot = md.lines().find(|l| l.contains("zero-shot")).unwrap();
        assert_eq!(zero_shot, "| zero-shot | 0.10 | - | - | - | - | - | - |");
        assert_eq!(
            md.lines()
                .filter(|l| l.starts_with("| ") && !l.starts_with("| Method"))
                .count(),
            3
        );
        assert!(md.contains("| Method | Ratio | Acce | Enc | Aggr | DP | Dec | Cal |"));
    }

    #[test]
    fn csv_roundtrip() {
        let r = sample_report();
        assert_eq!(parse_report_csv(&render_report(&r, "csv").unwrap()).unwrap(), r);
        assert!(matches!(render_report(&r, "xml"), Err(MetricsError::UnknownFormat(_))));
    }
}
