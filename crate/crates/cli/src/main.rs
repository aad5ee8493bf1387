use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use dxgraph::bench::{cases_to_json, generate_synthetic_corpus, render_table, run_benchmark, synthetic_kg, BenchReport};
use dxgraph::inference::InferenceConfig;
use dxgraph::{AlignConfig, EntityKind, KnowledgeGraph, Noise, QuestionPolicy, SessionConfig};
use dxgraph_cli::inputs::{build_engine, parse_seeds, read_cases, KgPaths};
use dxgraph_cli::service::{AnswerRequest, CreateRequest, PolarityChoice, ProfileRequest, Service, Status};
use dxgraph_cli::{router, CliError};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dxgraph", version, about = "Knowledge-graph-guided diagnostic dialogue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a knowledge graph, then print its size.
    LoadKg(KgArgs),
    /// Run the accuracy/rounds benchmark over a case file.
    Bench(BenchArgs),
    /// Interactive consultation in the terminal.
    Consult(ConsultArgs),
    /// Serve the /v1/ session API.
    Serve(ServeArgs),
    /// Sample a synthetic case corpus from a knowledge graph.
    GenCases(GenCasesArgs),
    /// Write a random knowledge graph with unique disease signatures.
    GenKg(GenKgArgs),
}

#[derive(Args, Clone)]
struct KgArgs {
    /// Node and edge tables, comma separated. Defaults to
    /// DXGRAPH_KG_NODES and DXGRAPH_KG_EDGES.
    #[arg(long, value_name = "NODES,EDGES")]
    kg: Option<String>,
    /// Optional embedding table (`name<TAB>v1 v2 ...`).
    #[arg(long, env = "DXGRAPH_VECTORS")]
    vectors: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SessionArgs {
    #[arg(long, default_value_t = 20)]
    t_max: u32,
    #[arg(long, default_value_t = 3)]
    stagnation_n: u32,
    #[arg(long, default_value_t = 5)]
    n_candidates: usize,
    #[arg(long, default_value_t = 1.0)]
    k_ratio: f64,
    #[arg(long, default_value_t = 1e-9)]
    epsilon: f64,
    #[arg(long, default_value_t = 3)]
    max_edit_distance: usize,
    #[arg(long, default_value_t = 0.85)]
    tau: f64,
}

impl SessionArgs {
    fn align(&self) -> AlignConfig {
        AlignConfig {
            max_edit_distance: self.max_edit_distance,
            tau: self.tau,
            ..Default::default()
        }
    }

    fn config(&self, policy: QuestionPolicy, seed: u64) -> Result<SessionConfig, CliError> {
        let cfg = SessionConfig {
            t_max: self.t_max,
            stagnation_n: self.stagnation_n,
            inference: InferenceConfig {
                n_candidates: self.n_candidates,
                k_ratio: self.k_ratio,
                epsilon: self.epsilon,
            },
            align: self.align(),
            seed,
            policy,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    kg: KgArgs,
    #[arg(long)]
    cases: PathBuf,
    /// info-gain, random, degree-based, or all. Repeatable or comma separated.
    #[arg(long, value_delimiter = ',', default_value = "info-gain")]
    policy: Vec<String>,
    #[arg(long, default_value_t = 0, conflicts_with = "seeds")]
    seed: u64,
    /// Seed list such as `1..10` (inclusive) or `1,4,9`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    #[command(flatten)]
    session: SessionArgs,
}

#[derive(Args)]
struct ConsultArgs {
    #[command(flatten)]
    kg: KgArgs,
    /// Case file; with --case-ref the case supplies the profile and exam
    /// results.
    #[arg(long)]
    cases: Option<PathBuf>,
    #[arg(long, requires = "cases")]
    case_ref: Option<String>,
    #[arg(long, default_value = "")]
    age: String,
    #[arg(long, default_value = "")]
    gender: String,
    #[arg(long)]
    complaint: Option<String>,
    #[arg(long, default_value = "info-gain")]
    policy: QuestionPolicy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the final trace as JSON lines.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[command(flatten)]
    session: SessionArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    kg: KgArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Cases addressable by `case_ref`.
    #[arg(long)]
    cases: Option<PathBuf>,
    /// Append-only JSON-lines journal; replayed on start if present.
    #[arg(long)]
    journal: Option<PathBuf>,
    #[arg(long, default_value = "info-gain")]
    policy: QuestionPolicy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    session: SessionArgs,
}

#[derive(Args)]
struct GenCasesArgs {
    #[command(flatten)]
    kg: KgArgs,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 0.1)]
    distractor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenKgArgs {
    #[arg(long, default_value_t = 30)]
    diseases: usize,
    #[arg(long, default_value_t = 60)]
    symptoms: usize,
    #[arg(long, default_value_t = 3)]
    min_degree: usize,
    #[arg(long, default_value_t = 8)]
    max_degree: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving nodes.tsv and edges.tsv.
    #[arg(long)]
    out_dir: PathBuf,
}

fn load_engine(args: &KgArgs, align: AlignConfig) -> Result<Arc<dxgraph::DiagnosisEngine>, CliError> {
    let kg = KgPaths::resolve(args.kg.as_deref())?.load()?;
    build_engine(kg, args.vectors.as_deref(), align)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Path(format!("cannot write {}: {e}", path.display())))
}

fn load_kg(args: KgArgs) -> Result<(), CliError> {
    let kg = KgPaths::resolve(args.kg.as_deref())?.load()?;
    if let Some(v) = &args.vectors {
        dxgraph_cli::inputs::load_vectors(v)?;
    }
    println!(
        "entities {} (diseases {}, symptoms {}), edges {}",
        kg.entity_count(),
        kg.disease_count(),
        kg.count_kind(EntityKind::Symptom),
        kg.edge_count()
    );
    Ok(())
}

fn parse_policies(raw: &[String]) -> Result<Vec<QuestionPolicy>, CliError> {
    let mut out = Vec::new();
    for p in raw {
        if p.trim().eq_ignore_ascii_case("all") {
            out.extend([QuestionPolicy::InfoGain, QuestionPolicy::Random, QuestionPolicy::DegreeBased]);
        } else {
            out.push(p.parse().map_err(CliError::Usage)?);
        }
    }
    out.dedup();
    Ok(out)
}

#[derive(Serialize)]
struct Aggregate {
    policy: QuestionPolicy,
    seeds: Vec<u64>,
    mean_accuracy: f64,
    mean_rounds: f64,
    failures: usize,
}

fn bench(args: BenchArgs) -> Result<(), CliError> {
    let policies = parse_policies(&args.policy)?;
    let seeds = match &args.seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![args.seed],
    };
    let engine = load_engine(&args.kg, args.session.align())?;
    let cases = read_cases(&args.cases)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Path(format!("cannot create {}: {e}", args.out.display())))?;

    let mut reports: Vec<BenchReport> = Vec::new();
    for &policy in &policies {
        for &seed in &seeds {
            let report = run_benchmark(&cases, &engine, policy, args.session.config(policy, seed)?);
            let file = args.out.join(format!("report-{}-seed{seed}.json", policy.label()));
            write_file(&file, &report.to_json())?;
            for w in &report.warnings {
                log::warn!("{} seed {seed}: {w}", policy.label());
            }
            reports.push(report);
        }
    }
    let table = render_table(&reports);
    write_file(&args.out.join("table.txt"), &table)?;
    print!("{table}");

    if seeds.len() > 1 {
        let aggregates: Vec<Aggregate> = policies
            .iter()
            .map(|&policy| {
                let rs: Vec<&BenchReport> = reports.iter().filter(|r| r.policy == policy).collect();
                let n = rs.len() as f64;
                Aggregate {
                    policy,
                    seeds: seeds.clone(),
                    mean_accuracy: rs.iter().map(|r| r.accuracy).sum::<f64>() / n,
                    mean_rounds: rs.iter().map(|r| r.mean_rounds).sum::<f64>() / n,
                    failures: rs.iter().map(|r| r.failures).sum(),
                }
            })
            .collect();
        let json = serde_json::to_string_pretty(&aggregates).map_err(|e| CliError::Other(e.to_string()))?;
        write_file(&args.out.join("aggregate.json"), &json)?;
        println!();
        for a in &aggregates {
            println!(
                "{:<12} mean accuracy {:.4}  mean rounds {:.3}  over {} seeds",
                a.policy.label(),
                a.mean_accuracy,
                a.mean_rounds,
                a.seeds.len()
            );
        }
    }
    Ok(())
}

fn print_state(h: &dxgraph_cli::SessionHandle, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "differential:")?;
    for d in &h.differential {
        writeln!(out, "  {:>6.1}%  {} ({})", 100.0 * d.probability, d.name, d.disease)?;
    }
    Ok(())
}

fn consult(args: ConsultArgs) -> Result<(), CliError> {
    let engine = load_engine(&args.kg, args.session.align())?;
    let cases = match &args.cases {
        Some(p) => read_cases(p)?,
        None => Vec::new(),
    };
    let cfg = args.session.config(args.policy, args.seed)?;
    let svc = Service::new(Some(engine), cases, cfg);
    let request = match (&args.case_ref, &args.complaint) {
        (Some(r), _) => CreateRequest {
            case_ref: Some(r.clone()),
            mode: Some(dxgraph_cli::service::Mode::Interactive),
            ..Default::default()
        },
        (None, Some(c)) => CreateRequest {
            profile: Some(ProfileRequest {
                age: args.age.clone(),
                gender: args.gender.clone(),
                chief: c.clone(),
                primary_symptom: None,
            }),
            ..Default::default()
        },
        (None, None) => return Err(CliError::Usage("pass --complaint or --case-ref".into())),
    };
    let api = |e: dxgraph_cli::ApiError| CliError::Other(e.to_string());
    let mut handle = svc.create(request).map_err(api)?;
    let id = handle.id.clone();
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut out = std::io::stdout();
    let io = |e: std::io::Error| CliError::Other(e.to_string());
    if handle.degraded_start {
        writeln!(out, "warning: the complaint did not match any symptom; starting from a uniform prior").map_err(io)?;
    }
    while handle.status == Status::AwaitingAnswer {
        let q = handle.question.as_ref().expect("awaiting sessions have a question");
        write!(
            out,
            "Q{} [{:.3} bits] {}? (y/n/u, exam <name>, plan, quit) > ",
            handle.rounds + 1,
            q.ig,
            q.name
        )
        .map_err(io)?;
        out.flush().map_err(io)?;
        let Some(line) = lines.next() else { break };
        let line = line.map_err(io)?;
        let input = line.trim();
        let request = match input.to_lowercase().as_str() {
            "y" | "yes" => AnswerRequest::Polarity {
                polarity: PolarityChoice::Present,
            },
            "n" | "no" => AnswerRequest::Polarity {
                polarity: PolarityChoice::Absent,
            },
            "u" | "unknown" | "?" => AnswerRequest::Polarity {
                polarity: PolarityChoice::Unknown,
            },
            "plan" => {
                for p in &handle.plan.ranked {
                    writeln!(out, "  {:.4}  {}", p.ig, p.name).map_err(io)?;
                }
                continue;
            }
            "quit" | "q" => break,
            lower if lower.starts_with("exam ") => AnswerRequest::Exam {
                exam: input[5..].trim().to_owned(),
            },
            _ => {
                writeln!(out, "unrecognized input {input:?}").map_err(io)?;
                continue;
            }
        };
        handle = svc.answer(&id, request).map_err(api)?;
        if let Some(t) = handle.trace.last() {
            if let Some(r) = &t.exam_result {
                writeln!(out, "  result: {r}").map_err(io)?;
            }
        }
        print_state(&handle, &mut out).map_err(io)?;
    }
    match &handle.outcome {
        Some(o) => writeln!(
            out,
            "final diagnosis: {} ({}) after {} questions [{:?}]",
            o.final_name, o.final_diagnosis, handle.rounds, o.reason
        ),
        None => writeln!(out, "stopped after {} questions; leading: {}", handle.rounds, handle.differential[0].name),
    }
    .map_err(io)?;
    if let Some(p) = &args.trace_out {
        write_file(p, &dxgraph::session::trace_jsonl(&handle.trace))?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let cfg = args.session.config(args.policy, args.seed)?;
    let engine = match KgPaths::resolve(args.kg.kg.as_deref()) {
        Ok(paths) => Some(build_engine(paths.load()?, args.kg.vectors.as_deref(), args.session.align())?),
        Err(CliError::Usage(msg)) => {
            log::warn!("{msg}; session creation will fail with kg-not-loaded");
            None
        }
        Err(e) => return Err(e),
    };
    let cases = match &args.cases {
        Some(p) => read_cases(p)?,
        None => Vec::new(),
    };
    let mut svc = Service::new(engine, cases, cfg);
    if let Some(j) = &args.journal {
        svc = svc.with_journal(j).map_err(|e| CliError::Other(e.to_string()))?;
    }
    let app = router(Arc::new(svc));
    let addr = format!("{}:{}", args.host, args.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Other(format!("cannot bind {addr}: {e}")))?;
        log::info!("listening on http://{addr}/v1/");
        eprintln!("listening on http://{addr}/v1/");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Other(e.to_string()))
    })
}

fn gen_cases(args: GenCasesArgs) -> Result<(), CliError> {
    let kg = KgPaths::resolve(args.kg.kg.as_deref())?.load()?;
    let noise = Noise {
        dropout: args.dropout,
        distractor: args.distractor,
    };
    let cases = generate_synthetic_corpus(&kg, args.n, noise, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let json = cases_to_json(&cases);
    match &args.out {
        Some(p) => write_file(p, &json),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn gen_kg(args: GenKgArgs) -> Result<(), CliError> {
    let kg: KnowledgeGraph = synthetic_kg(args.diseases, args.symptoms, args.min_degree..=args.max_degree, args.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Path(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    kg.write_nodes(&mut nodes).and_then(|_| kg.write_edges(&mut edges)).map_err(|e| CliError::Other(e.to_string()))?;
    write_file(&args.out_dir.join("nodes.tsv"), &String::from_utf8_lossy(&nodes))?;
    write_file(&args.out_dir.join("edges.tsv"), &String::from_utf8_lossy(&edges))?;
    println!("wrote {} diseases, {} edges to {}", kg.disease_count(), kg.edge_count(), args.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::LoadKg(a) => load_kg(a),
        Command::Bench(a) => bench(a),
        Command::Consult(a) => consult(a),
        Command::Serve(a) => serve(a),
        Command::GenCases(a) => gen_cases(a),
        Command::GenKg(a) => gen_kg(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
