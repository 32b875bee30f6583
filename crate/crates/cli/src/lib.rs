//! The `fa-forge` command line: plan, optimize, validate, run, bench,
//! gen-keys and gen-data.
//!
//! Exit codes: 0 success, 1 usage or other failure, 2 validation failure,
//! 3 planner backend failure.

pub mod answer;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use fa_forge_core::crypto::{keygen, AheScheme, KeyPair, MockScheme, DEFAULT_SCALE};
use fa_forge_core::dag::{encode_dag, encode_dag_pretty, FaDag};
use fa_forge_core::data;
use fa_forge_core::engine::{execute, load_clients, ClientPool, ExecConfig};
use fa_forge_core::metrics::{
    load_corpus, render_report, run_corpus, BenchConfig, CorpusReport, Method, MethodRun, Pipeline,
};
use fa_forge_core::optimizer::{naive_plan, optimize, optimize_with_suggestion, OptError, RewriteTrace};
use fa_forge_core::planner::prompts::PromptSet;
use fa_forge_core::planner::{
    coarse_decompose, Backend, ChatModel, HttpChat, LlmConfig, PlanError, Planner, QueryIR, SubQuery,
};
use fa_forge_core::predicate::Predicate;
use fa_forge_core::schema::{FeatureSpec, Schema};
use fa_forge_core::validator::{answer_map, check_completeness, validate_encoded, violations_to_jsonl, Violation};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("validation failed:\n{0}")]
    Validation(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Usage(_) | CliError::Io { .. } | CliError::Failed(_) => 1,
        }
    }

    fn violations(v: &[Violation]) -> Self {
        CliError::Validation(violations_to_jsonl(v).trim_end().to_string())
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::BackendUnavailable(_) | PlanError::Undecomposable(_) => CliError::Backend(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<OptError> for CliError {
    fn from(e: OptError) -> Self {
        match e {
            OptError::InvalidInput { violations, .. } => CliError::violations(&violations),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "fa-forge",
    version,
    about = "Compile analytical queries into private federated-analytics workflows and simulate them"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose a query and emit one preliminary DAG per sub-query.
    Plan(PlanArgs),
    /// Plan, then merge and rewrite into a single optimized DAG.
    Optimize(OptimizeArgs),
    /// Check a DAG file for structural (and, with --ir, completeness) violations.
    Validate(ValidateArgs),
    /// Plan, optimize and execute a query over the client pool.
    Run(RunArgs),
    /// Run a query corpus and report completion ratio and operation counts.
    Bench(BenchArgs),
    /// Generate a Paillier key pair.
    GenKeys(GenKeysArgs),
    /// Write a client dataset as CSV.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dataset {
    Adult,
    University,
}

impl Dataset {
    fn name(self) -> &'static str {
        match self {
            Dataset::Adult => "adult",
            Dataset::University => "university",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchBackend {
    Ir,
    LlmZeroShot,
    LlmOneShot,
    LlmHierarchical,
}

#[derive(Debug, Clone, Args)]
pub struct SchemaArgs {
    /// Bundled dataset supplying the schema, and the clients when --data is absent.
    #[arg(long, value_enum, default_value = "adult")]
    pub dataset: Dataset,
    /// Schema JSON file; overrides the dataset's schema.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct QueryArgs {
    /// Structured query IR as a JSON file.
    #[arg(long, conflicts_with = "nl")]
    pub ir: Option<PathBuf>,
    /// Natural-language query; needs an LLM endpoint and FA_FORGE_LLM_KEY.
    #[arg(long)]
    pub nl: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct LlmArgs {
    /// Chat-completions endpoint. The API key is read from FA_FORGE_LLM_KEY.
    #[arg(long, env = "FA_FORGE_LLM_ENDPOINT")]
    pub llm_endpoint: Option<String>,
    #[arg(long, default_value = "gpt-4")]
    pub llm_model: String,
    /// Re-prompts after a rejected reply.
    #[arg(long, default_value_t = 2)]
    pub llm_retries: usize,
    /// Directory of prompt template overrides.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[command(flatten)]
    pub llm: LlmArgs,
    /// Privacy budget of each NoiseAdd node.
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    /// Directory for ir.json and dag_<k>.json; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Emit the naive union instead of the optimized DAG.
    #[arg(long)]
    pub no_optimizer: bool,
    /// Print the rewrite trace.
    #[arg(long)]
    pub explain: bool,
    /// Also ask the LLM for a cheaper DAG, kept only if it validates.
    #[arg(long)]
    pub suggest: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    /// Encoded DAG JSON file.
    #[arg(long)]
    pub dag: PathBuf,
    /// Query IR to check answer completeness against.
    #[arg(long)]
    pub ir: Option<PathBuf>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Client CSV; defaults to the dataset's bundled or synthetic clients.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic population size for the adult dataset.
    #[arg(long, default_value_t = 1000)]
    pub clients: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct CryptoArgs {
    /// Key pair JSON from gen-keys; otherwise keys are derived from --seed.
    #[arg(long)]
    pub keys: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub key_bits: u64,
    /// Identity encryption mod 2^64 instead of Paillier (no secrecy, fast).
    #[arg(long)]
    pub mock_crypto: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Execute this DAG file instead of planning one.
    #[arg(long, conflicts_with = "nl")]
    pub dag: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub crypto: CryptoArgs,
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    pub scale: u32,
    #[arg(long, value_enum, default_value = "on")]
    pub noise: Toggle,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_optimizer: bool,
    /// Print the rewrite trace after the answer.
    #[arg(long)]
    pub explain: bool,
    /// Phrase the answer with the LLM.
    #[arg(long)]
    pub llm_answer: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Corpus JSON: [{id, text, ir}]; defaults to the bundled 20-query corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub crypto: CryptoArgs,
    #[command(flatten)]
    pub llm: LlmArgs,
    #[arg(long, value_enum, default_value = "ir")]
    pub backend: BenchBackend,
    #[arg(long)]
    pub no_optimizer: bool,
    /// Add a row planned without any DAG templates.
    #[arg(long)]
    pub ablation: bool,
    #[arg(long, default_value = "markdown")]
    pub format: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-query outcomes as JSON.
    #[arg(long)]
    pub details: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenKeysArgs {
    #[arg(long, default_value_t = 2048)]
    pub bits: u64,
    /// Derive the key from a seed (reproducible, for tests only).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "adult")]
    pub dataset: Dataset,
    /// Rows to generate for the adult dataset.
    #[arg(long, default_value_t = 1000)]
    pub rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the schema JSON here.
    #[arg(long)]
    pub schema_out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_schema(args: &SchemaArgs) -> Result<Arc<Schema>, CliError> {
    match &args.schema {
        Some(p) => Ok(Arc::new(
            Schema::from_json(&read(p)?).map_err(|e| CliError::Validation(e.to_string()))?,
        )),
        None => Ok(match args.dataset {
            Dataset::Adult => data::adult_schema(),
            Dataset::University => data::university_schema(),
        }),
    }
}

fn load_pool(schema: &SchemaArgs, data: &DataArgs) -> Result<ClientPool, CliError> {
    let s = load_schema(schema)?;
    match &data.data {
        Some(p) => load_clients(p, s).map_err(failed),
        None if schema.schema.is_some() => Err(CliError::Usage("--schema needs --data".into())),
        None => Ok(match schema.dataset {
            Dataset::Adult => data::synth_adult(data.clients, data.data_seed),
            Dataset::University => data::university_pool(),
        }),
    }
}

fn prompts(llm: &LlmArgs) -> Result<PromptSet, CliError> {
    match &llm.prompts {
        Some(dir) => PromptSet::load_dir(dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        }),
        None => Ok(PromptSet::default()),
    }
}

fn chat(llm: &LlmArgs) -> Result<HttpChat, CliError> {
    let endpoint = llm
        .llm_endpoint
        .clone()
        .ok_or_else(|| CliError::Backend("no LLM endpoint configured (--llm-endpoint)".into()))?;
    let mut config = LlmConfig::from_env(endpoint, &llm.llm_model).map_err(|e| CliError::Backend(e.to_string()))?;
    config.max_retries = llm.llm_retries;
    Ok(HttpChat::new(config))
}

fn obtain_ir(args: &PlanArgs, schema: Arc<Schema>) -> Result<QueryIR, CliError> {
    match (&args.query.ir, &args.query.nl) {
        (Some(path), _) => Ok(coarse_decompose(&read(path)?, &Backend::Ir, schema)?),
        (None, Some(text)) => {
            let model = chat(&args.llm)?;
            let prompts = prompts(&args.llm)?;
            let backend = Backend::Llm {
                model: &model,
                max_retries: args.llm.llm_retries,
                prompts: &prompts,
            };
            Ok(coarse_decompose(text, &backend, schema)?)
        }
        (None, None) => Err(CliError::Usage("give a query with --ir or --nl".into())),
    }
}

fn planner(epsilon: f64) -> Result<Planner, CliError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(CliError::Usage(format!("--epsilon must be positive, got {epsilon}")));
    }
    Ok(Planner {
        epsilon,
        ..Planner::default()
    })
}

/// Decompose and plan; returns the IR and one preliminary DAG per sub-query.
pub fn cmd_plan(args: &PlanArgs) -> Result<String, CliError> {
    let schema = load_schema(&args.schema)?;
    let ir = obtain_ir(args, schema)?;
    let dags = planner(args.epsilon)?.plan(&ir)?;
    match &args.out {
        Some(dir) => {
            let mut lines = Vec::new();
            let ir_path = dir.join("ir.json");
            write(&ir_path, &(ir.to_json() + "\n"))?;
            lines.push(format!("wrote {}", ir_path.display()));
            for (k, d) in dags.iter().enumerate() {
                let p = dir.join(format!("dag_{}.json", k + 1));
                write(&p, &(encode_dag_pretty(d) + "\n"))?;
                lines.push(format!("wrote {}", p.display()));
            }
            Ok(lines.join("\n"))
        }
        None => {
            let dags: Vec<serde_json::Value> = dags
                .iter()
                .map(|d| serde_json::from_str(&encode_dag(d)).expect("encoded DAG is JSON"))
                .collect();
            let ir: serde_json::Value = serde_json::from_str(&ir.to_json()).expect("IR is JSON");
            Ok(serde_json::to_string_pretty(&serde_json::json!({"ir": ir, "dags": dags})).expect("serializes"))
        }
    }
}

fn build(
    args: &PlanArgs,
    ir: &QueryIR,
    no_optimizer: bool,
    suggest: bool,
) -> Result<(FaDag, RewriteTrace, Option<String>), CliError> {
    let dags = planner(args.epsilon)?.plan(ir)?;
    if no_optimizer {
        return Ok((naive_plan(&dags, ir)?, RewriteTrace::default(), None));
    }
    if suggest {
        let model = chat(&args.llm)?;
        let prompts = prompts(&args.llm)?;
        let (dag, trace, s) = optimize_with_suggestion(&dags, ir, &model, &prompts, args.llm.llm_retries)?;
        let note = format!(
            "LLM suggestion {}: {}",
            if s.accepted { "accepted" } else { "rejected" },
            s.reason
        );
        return Ok((dag, trace, Some(note)));
    }
    let (dag, trace) = optimize(&dags, ir)?;
    Ok((dag, trace, None))
}

pub fn cmd_optimize(args: &OptimizeArgs) -> Result<String, CliError> {
    let schema = load_schema(&args.plan.schema)?;
    let ir = obtain_ir(&args.plan, schema)?;
    let (dag, trace, note) = build(&args.plan, &ir, args.no_optimizer, args.suggest)?;
    let mut lines: Vec<String> = note.into_iter().collect();
    match &args.plan.out {
        Some(dir) => {
            let p = dir.join("dag.json");
            write(&p, &(encode_dag_pretty(&dag) + "\n"))?;
            lines.push(format!("wrote {}", p.display()));
            let t = dir.join("trace.json");
            write(&t, &(trace.to_json() + "\n"))?;
            lines.push(format!("wrote {}", t.display()));
        }
        None => lines.push(encode_dag_pretty(&dag)),
    }
    if args.explain {
        lines.push(trace.to_json());
    }
    Ok(lines.join("\n"))
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<String, CliError> {
    let dag = validate_encoded(&read(&args.dag)?).map_err(|v| CliError::violations(&v))?;
    if let Some(p) = &args.ir {
        let schema = load_schema(&args.schema)?;
        let ir = coarse_decompose(&read(p)?, &Backend::Ir, schema)?;
        let missing = check_completeness(&dag, &ir);
        if !missing.is_empty() {
            return Err(CliError::violations(&missing));
        }
    }
    Ok(format!("valid: {} nodes, {} edges", dag.len(), dag.edge_count()))
}

fn scheme(args: &CryptoArgs, seed: u64) -> Result<Box<dyn AheScheme>, CliError> {
    if args.mock_crypto {
        return Ok(Box::new(MockScheme::new()));
    }
    let keys = match &args.keys {
        Some(p) => KeyPair::from_json(&read(p)?).map_err(failed)?,
        None => keygen(args.key_bits, &mut ChaCha20Rng::seed_from_u64(seed)).map_err(failed)?,
    };
    Ok(Box::new(keys))
}

pub fn cmd_run(args: &RunArgs) -> Result<String, CliError> {
    let pool = load_pool(&args.plan.schema, &args.data)?;
    let schema = pool.schema_arc();
    let (dag, ir, trace) = match &args.dag {
        Some(path) => {
            let dag = validate_encoded(&read(path)?).map_err(|v| CliError::violations(&v))?;
            let ir = match &args.plan.query.ir {
                Some(p) => Some(coarse_decompose(&read(p)?, &Backend::Ir, schema)?),
                None => None,
            };
            (dag, ir, None)
        }
        None => {
            let ir = obtain_ir(&args.plan, schema)?;
            let (dag, trace, _) = build(&args.plan, &ir, args.no_optimizer, false)?;
            (dag, Some(ir), Some(trace))
        }
    };
    if args.scale == 0 {
        return Err(CliError::Usage("--scale must be positive".into()));
    }
    let scheme = scheme(&args.crypto, args.seed)?;
    let config = ExecConfig {
        seed: args.seed,
        noise: args.noise == Toggle::On,
        scale: args.scale,
    };
    let result = execute(&dag, &pool, scheme.as_ref(), &config).map_err(failed)?;

    let mut text = match &ir {
        Some(ir) => {
            let mapping = answer_map(&dag, ir).map_err(CliError::Validation)?;
            let values = answer::reported(ir, &mapping, &result);
            if args.llm_answer {
                let model = chat(&args.plan.llm)?;
                answer::llm_prose(&model, &prompts(&args.plan.llm)?, &ir.text, &values)
                    .map_err(|e| CliError::Backend(e.to_string()))?
            } else {
                answer::prose(&values)
            }
        }
        None => result
            .answers
            .iter()
            .map(|a| format!("{} = {}", a.node, a.value))
            .collect::<Vec<_>>()
            .join("\n"),
    };
    match &args.plan.out {
        Some(p) => {
            write(p, &(result.to_json() + "\n"))?;
            text += &format!("\nwrote {}", p.display());
        }
        None => text += &format!("\n\n{}", result.to_json()),
    }
    if args.explain {
        let trace = trace.unwrap_or_default();
        text += &format!("\n\nRewrite trace:\n{}", trace.to_json());
    }
    Ok(text)
}

fn one_shot_example(schema: &Schema) -> Option<String> {
    let feature = schema.features().find_map(|(name, spec)| match spec {
        FeatureSpec::Numeric { .. } => Some(name.to_string()),
        FeatureSpec::Categorical { .. } => None,
    })?;
    let sub = SubQuery::mean(&feature, Predicate::always());
    Planner::default().fine_plan(&sub, schema).ok().map(|d| encode_dag(&d))
}

pub fn cmd_bench(args: &BenchArgs) -> Result<String, CliError> {
    let corpus_text = match &args.corpus {
        Some(p) => read(p)?,
        None => data::ADULT_CORPUS.to_string(),
    };
    let corpus = load_corpus(&corpus_text).map_err(|e| CliError::Usage(e.to_string()))?;
    let pool = load_pool(&args.schema, &args.data)?;
    let scheme = scheme(&args.crypto, args.seed)?;
    let config = BenchConfig {
        seed: args.seed,
        scale: DEFAULT_SCALE,
    };
    let base = planner(args.epsilon)?;
    let suffix = if args.no_optimizer { ", no optimizer" } else { "" };

    let needs_llm = args.backend != BenchBackend::Ir;
    let model: Option<HttpChat> = if needs_llm { Some(chat(&args.llm)?) } else { None };
    let prompt_set = prompts(&args.llm)?;
    let retries = args.llm.llm_retries;
    let example = one_shot_example(pool.schema());

    let mut methods: Vec<Method<'_>> = Vec::new();
    let model_ref: Option<&dyn ChatModel> = model.as_ref().map(|m| m as &dyn ChatModel);
    methods.push(match (args.backend, model_ref) {
        (BenchBackend::Ir, _) => Method {
            name: format!("hierarchical (ir){suffix}"),
            pipeline: Pipeline::Hierarchical {
                backend: Backend::Ir,
                planner: base.clone(),
                optimize: !args.no_optimizer,
            },
        },
        (BenchBackend::LlmHierarchical, Some(m)) => Method {
            name: format!("hierarchical (llm){suffix}"),
            pipeline: Pipeline::Hierarchical {
                backend: Backend::Llm {
                    model: m,
                    max_retries: retries,
                    prompts: &prompt_set,
                },
                planner: base.clone(),
                optimize: !args.no_optimizer,
            },
        },
        (BenchBackend::LlmZeroShot, Some(m)) => Method {
            name: "zero-shot".into(),
            pipeline: Pipeline::Direct {
                model: m,
                prompts: &prompt_set,
                max_retries: retries,
                example: None,
            },
        },
        (BenchBackend::LlmOneShot, Some(m)) => Method {
            name: "one-shot".into(),
            pipeline: Pipeline::Direct {
                model: m,
                prompts: &prompt_set,
                max_retries: retries,
                example: example.clone(),
            },
        },
        (_, None) => unreachable!("LLM backends build a model above"),
    });
    if args.ablation {
        methods.push(Method {
            name: "without templates".into(),
            pipeline: Pipeline::Hierarchical {
                backend: Backend::Ir,
                planner: Planner::new(Default::default(), args.epsilon),
                optimize: !args.no_optimizer,
            },
        });
    }

    let runs: Vec<MethodRun> = methods
        .iter()
        .map(|m| run_corpus(&corpus, m, &pool, scheme.as_ref(), &config).map_err(failed))
        .collect::<Result<_, _>>()?;
    let dataset = match &args.schema.schema {
        Some(p) => p.display().to_string(),
        None => args.schema.dataset.name().to_string(),
    };
    let report = CorpusReport::new(&dataset, corpus.len(), &runs);
    let rendered = render_report(&report, &args.format).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(p) = &args.details {
        write(p, &(serde_json::to_string_pretty(&runs).expect("serializes") + "\n"))?;
    }
    match &args.out {
        Some(p) => {
            write(p, &rendered)?;
            Ok(format!("wrote {}", p.display()))
        }
        None => Ok(rendered.trim_end().to_string()),
    }
}

pub fn cmd_gen_keys(args: &GenKeysArgs) -> Result<String, CliError> {
    let keys = match args.seed {
        Some(s) => keygen(args.bits, &mut ChaCha20Rng::seed_from_u64(s)),
        None => keygen(args.bits, &mut ChaCha20Rng::from_entropy()),
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    write(&args.out, &(keys.to_json() + "\n"))?;
    restrict_permissions(&args.out)?;
    Ok(format!(
        "wrote {}-bit key pair to {} (public key {:016x})",
        keys.bits(),
        args.out.display(),
        keys.public().fingerprint()
    ))
}

#[cfg(unix)]
fn restrict_permissions(path: &Path) -> Result<(), CliError> {
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600)).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(not(unix))]
fn restrict_permissions(_: &Path) -> Result<(), CliError> {
    Ok(())
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<String, CliError> {
    let (pool, schema_text) = match args.dataset {
        Dataset::Adult => {
            if args.rows == 0 {
                return Err(CliError::Usage("--rows must be positive".into()));
            }
            (data::synth_adult(args.rows, args.seed), data::ADULT_SCHEMA)
        }
        Dataset::University => (data::university_pool(), data::UNIVERSITY_SCHEMA),
    };
    write(&args.out, &pool.to_csv().map_err(failed)?)?;
    let mut msg = format!("wrote {} clients to {}", pool.len(), args.out.display());
    if let Some(p) = &args.schema_out {
        write(p, schema_text)?;
        msg += &format!("\nwrote {}", p.display());
    }
    Ok(msg)
}

pub fn dispatch(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::GenKeys(a) => cmd_gen_keys(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    1
                }
            };
        }
    };
    match dispatch(&cli) {
        Ok(text) => {
            let _ = writeln!(stdout, "{text}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
