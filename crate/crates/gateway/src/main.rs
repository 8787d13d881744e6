use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use conductor_core::config::load_config;
use conductor_core::model::Scalar;
use conductor_gateway::bench::{load_fixtures, run_bench, Scenario};
use conductor_gateway::http::router;
use conductor_gateway::platform::{ErrorBody, ErrorDocument, Platform, QueryReply, QueryRequest};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "conductor", version, about = "Prompt orchestration over knowledge graphs and AI services")]
struct Cli {
    /// Platform configuration file.
    #[arg(long, env = "CONDUCTOR_CONFIG", global = true, default_value = "platform.toml")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Answer one prompt.
    Query {
        #[arg(long)]
        user: String,
        #[arg(long)]
        role: String,
        /// Context attribute as key=value; repeatable.
        #[arg(long = "attr", value_parser = parse_attr)]
        attrs: Vec<(String, Scalar)>,
        /// Print parts and the execution trace as JSON.
        #[arg(long)]
        verbose: bool,
        prompt: String,
    },
    /// Run a benchmark scenario over a fixture list.
    Bench {
        #[arg(long, default_value = "cache_and_rules")]
        scenario: String,
        #[arg(long, default_value_t = 2)]
        repetitions: usize,
        #[arg(long)]
        fixtures: PathBuf,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Check the configuration and report every problem found.
    ValidateConfig,
}

fn parse_attr(raw: &str) -> Result<(String, Scalar), String> {
    let (k, v) = raw.split_once('=').ok_or_else(|| format!("expected key=value, got `{raw}`"))?;
    if k.trim().is_empty() {
        return Err(format!("empty key in `{raw}`"));
    }
    Ok((k.trim().to_string(), Scalar::parse_loose(v)))
}

fn print_error(body: ErrorBody) -> ExitCode {
    let doc = ErrorDocument { error: body };
    eprintln!("{}", serde_json::to_string_pretty(&doc).expect("error document serializes"));
    ExitCode::FAILURE
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();

    match cli.command {
        Command::ValidateConfig => match load_config(&cli.config).and_then(|cfg| cfg.build_orchestrator().map(|o| (cfg, o))) {
            Ok((cfg, orch)) => {
                println!(
                    "ok: version {}, {} KGs, {} services, {} intents, {} rules",
                    cfg.version,
                    orch.graphs().ids().len(),
                    cfg.services.len(),
                    cfg.catalog.intents().len(),
                    cfg.rules.rules().len()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{} ({})", e.code(), cli.config.display());
                for v in e.violations() {
                    eprintln!("  - {v}");
                }
                ExitCode::FAILURE
            }
        },
        Command::Serve { addr } => {
            let platform = match Platform::load(&cli.config) {
                Ok(p) => Arc::new(p),
                Err(e) => return print_error(e.into()),
            };
            let listener = match tokio::net::TcpListener::bind(addr).await {
                Ok(l) => l,
                Err(e) => return print_error(ErrorBody::new("serve", "bind-failed", e.to_string())),
            };
            tracing::info!(%addr, "listening");
            eprintln!("listening on http://{}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
            match axum::serve(listener, router(platform)).await {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => print_error(ErrorBody::new("serve", "server-error", e.to_string())),
            }
        }
        Command::Query {
            user,
            role,
            attrs,
            verbose,
            prompt,
        } => {
            let platform = match Platform::load(&cli.config) {
                Ok(p) => p,
                Err(e) => return print_error(e.into()),
            };
            let request = QueryRequest {
                user_id: user,
                role,
                attributes: attrs.into_iter().collect::<BTreeMap<_, _>>(),
                prompt,
                verbose,
            };
            match platform.handle_query(&request).await {
                Ok(response) if verbose => {
                    let reply = QueryReply::new(response, true);
                    println!("{}", serde_json::to_string_pretty(&reply).expect("reply serializes"));
                    ExitCode::SUCCESS
                }
                Ok(response) => {
                    println!("{}", response.final_text);
                    ExitCode::SUCCESS
                }
                Err(e) => print_error(e),
            }
        }
        Command::Bench {
            scenario,
            repetitions,
            fixtures,
            json,
        } => {
            let scenario: Scenario = match scenario.parse() {
                Ok(s) => s,
                Err(e) => return print_error(ErrorBody::new("bench", e.code(), e.to_string())),
            };
            let queries = match load_fixtures(&fixtures) {
                Ok(q) => q,
                Err(e) => return print_error(ErrorBody::new("bench", e.code(), e.to_string())),
            };
            let platform = match Platform::load(&cli.config) {
                Ok(p) => p,
                Err(e) => return print_error(e.into()),
            };
            let snapshot = platform.snapshot();
            match run_bench(&snapshot.orchestrator, scenario, &queries, repetitions, snapshot.config.cache_policy).await {
                Ok(report) if json => {
                    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                    ExitCode::SUCCESS
                }
                Ok(report) => {
                    println!("{report}");
                    ExitCode::SUCCESS
                }
                Err(e) => print_error(ErrorBody::new("bench", e.code(), e.to_string())),
            }
        }
    }
}
