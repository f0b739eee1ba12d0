//! Command-line front door: compile source programs to net documents, run
//! them locally or across nodes, serve one node of a distributed run, check
//! recorded traces against an arena, and enumerate a net's traces.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use gamnet::combinators::{gamnet_from_json, gamnet_to_json, GamNet};
use gamnet::explore::{denotation_upto, CappedInputs, ExploreBudget};
use gamnet::game::{arena_from_json, check_legal, format_trace, parse_trace, Condition};
use gamnet::hram::{Data, Message};
use gamnet::ica::{compile, parse, CompilationUnit};
use gamnet::net::validate_net;
use gamnet::nominal::{NameMinter, ENV_NODE_TAG};
use gamnet::runtime::{
    node_config_from_json, run_distributed, run_local, serve_node, DistOptions, RunBudget,
    RunOutcome, SchedulerPolicy,
};

#[derive(Parser)]
#[command(name = "gamnet", version, about = "Compile and run programs as networks of machines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a source file to a net document.
    Compile {
        /// Source program.
        src: PathBuf,
        /// Where to write the compiled document; defaults to the source
        /// path with extension `.gamnet.json`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Node hosting every engine without a placement annotation.
        #[arg(long, default_value = "0")]
        root: String,
    },
    /// Run a program to its answer.
    Run {
        /// Compiled document or source program.
        program: PathBuf,
        /// Scheduler seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Node configuration file; runs distributed when given.
        #[arg(long)]
        nodes: Option<PathBuf>,
        /// Write the observable trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Print the heap audit after the run.
        #[arg(long)]
        audit: bool,
        /// Fuse co-located engines so their sparks jump locally.
        #[arg(long)]
        jump: bool,
    },
    /// Serve one node of a distributed run until the root shuts it down.
    Serve {
        /// Name of the node to host.
        #[arg(long)]
        node: String,
        /// Node configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a recorded trace against an arena's legality conditions.
    CheckTrace {
        /// Trace file, one event per line.
        trace: PathBuf,
        /// Arena document describing the interface played on.
        #[arg(long)]
        arena: PathBuf,
        /// Comma-separated condition names; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        conditions: Vec<String>,
    },
    /// Enumerate the observable traces of a program up to a depth.
    Explore {
        /// Compiled document or source program.
        program: PathBuf,
        /// Largest trace length to enumerate.
        #[arg(long, default_value_t = 4)]
        depth: usize,
        /// Cap on explored configurations.
        #[arg(long)]
        states: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("GAMNET_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(4)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Compile { src, out, root } => cmd_compile(&src, out, &root),
        Command::Run {
            program,
            seed,
            nodes,
            trace,
            audit,
            jump,
        } => cmd_run(&program, seed, nodes, trace, audit, jump),
        Command::Serve { node, config } => cmd_serve(&node, &config),
        Command::CheckTrace {
            trace,
            arena,
            conditions,
        } => cmd_check_trace(&trace, &arena, &conditions),
        Command::Explore {
            program,
            depth,
            states,
        } => cmd_explore(&program, depth, states),
    }
}

fn compile_source(src: &Path, root: &str) -> Result<GamNet> {
    let text = fs::read_to_string(src).with_context(|| format!("reading {}", src.display()))?;
    let term = parse(&text).with_context(|| format!("parsing {}", src.display()))?;
    let unit = CompilationUnit {
        term,
        ctx: Vec::new(),
        root: root.to_string(),
    };
    let minter = NameMinter::new(1);
    let g = compile(&unit, &minter).with_context(|| format!("compiling {}", src.display()))?;
    log::info!(
        "compiled {} into {} engines",
        src.display(),
        g.net.engines.len()
    );
    Ok(g)
}

/// Loads a compiled document, or compiles on the fly when given source.
fn load_program(path: &Path, root: &str) -> Result<GamNet> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        let g = gamnet_from_json(&v).with_context(|| format!("loading {}", path.display()))?;
        validate_net(&g.net).map_err(|errs| anyhow!("{} is not a valid net: {:?}", path.display(), errs))?;
        Ok(g)
    } else {
        compile_source(path, root)
    }
}

fn cmd_compile(src: &Path, out: Option<PathBuf>, root: &str) -> Result<u8> {
    let g = compile_source(src, root)?;
    let out = out.unwrap_or_else(|| src.with_extension("gamnet.json"));
    let doc = serde_json::to_string_pretty(&gamnet_to_json(&g)).expect("documents serialize");
    fs::write(&out, doc + "\n").with_context(|| format!("writing {}", out.display()))?;
    Ok(0)
}

fn initial_question(g: &GamNet, env: &NameMinter) -> Message {
    Message {
        port: g.target.order[0],
        payload: [
            Data::Ptr(env.fresh_pointer()),
            Data::Ptr(env.fresh_pointer()),
            Data::Empty,
        ],
    }
}

fn render_answer(value: Data) -> String {
    match value {
        Data::Int(n) => n.to_string(),
        Data::Empty => "done".to_string(),
        Data::Ptr(p) => p.to_string(),
    }
}

fn conclude(
    outcome: &RunOutcome,
    trace_out: Option<PathBuf>,
    audit: bool,
) -> Result<u8> {
    if let Some(path) = trace_out {
        fs::write(&path, format_trace(&outcome.trace))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    match outcome.answer {
        Some(m) => {
            println!("answer: {}", render_answer(m.payload[2]));
            if audit {
                println!("{}", outcome.audit);
            }
            Ok(0)
        }
        None if outcome.faults > 0 => {
            eprintln!("run faulted: {} faulted threads, no answer", outcome.faults);
            Ok(3)
        }
        None => {
            if outcome.exhausted {
                eprintln!("budget exhausted before an answer");
            } else {
                eprintln!("the net went quiescent without answering");
            }
            Ok(2)
        }
    }
}

fn cmd_run(
    program: &Path,
    seed: u64,
    nodes: Option<PathBuf>,
    trace: Option<PathBuf>,
    audit: bool,
    jump: bool,
) -> Result<u8> {
    let env = NameMinter::new(ENV_NODE_TAG);
    match nodes {
        None => {
            let g = load_program(program, "0")?;
            let question = initial_question(&g, &env);
            let outcome = run_local(
                &g.net,
                question,
                SchedulerPolicy::Seeded(seed),
                RunBudget::default(),
                &env,
            )?;
            conclude(&outcome, trace, audit)
        }
        Some(cfg_path) => {
            let cfg_text = fs::read_to_string(&cfg_path)
                .with_context(|| format!("reading {}", cfg_path.display()))?;
            let cfg_doc: serde_json::Value = serde_json::from_str(&cfg_text)
                .with_context(|| format!("parsing {}", cfg_path.display()))?;
            let cfg = node_config_from_json(&cfg_doc)
                .with_context(|| format!("loading {}", cfg_path.display()))?;
            let g = load_program(program, &cfg.root)?;
            let question = initial_question(&g, &env);
            let opts = DistOptions {
                seed,
                budget: RunBudget::default(),
                jump,
            };
            let outcome = run_distributed(&g.net, question, &cfg, &opts)?;
            conclude(&outcome, trace, audit)
        }
    }
}

fn cmd_serve(node: &str, config: &Path) -> Result<u8> {
    let text =
        fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let cfg = node_config_from_json(&doc)
        .with_context(|| format!("loading {}", config.display()))?;
    log::info!("serving node {node}");
    serve_node(node, &cfg)?;
    Ok(0)
}

fn condition_named(name: &str) -> Option<Condition> {
    Some(match name {
        "unique-pointers" => Condition::UniquePointers,
        "correctly-labelled" => Condition::CorrectlyLabelled,
        "justified" => Condition::Justified,
        "well-opened" => Condition::WellOpened,
        "strictly-scoped" => Condition::StrictlyScoped,
        "strictly-nested" => Condition::StrictlyNested,
        "alternating" => Condition::Alternating,
        _ => return None,
    })
}

fn condition_name(c: Condition) -> &'static str {
    match c {
        Condition::UniquePointers => "unique-pointers",
        Condition::CorrectlyLabelled => "correctly-labelled",
        Condition::Justified => "justified",
        Condition::WellOpened => "well-opened",
        Condition::StrictlyScoped => "strictly-scoped",
        Condition::StrictlyNested => "strictly-nested",
        Condition::Alternating => "alternating",
    }
}

fn cmd_check_trace(trace_path: &Path, arena_path: &Path, conditions: &[String]) -> Result<u8> {
    let requested: Vec<Condition> = if conditions.is_empty() {
        gamnet::game::CONDITIONS.to_vec()
    } else {
        conditions
            .iter()
            .map(|name| {
                condition_named(name).ok_or_else(|| anyhow!("unknown condition {name}"))
            })
            .collect::<Result<_>>()?
    };
    let trace_text = fs::read_to_string(trace_path)
        .with_context(|| format!("reading {}", trace_path.display()))?;
    let trace = parse_trace(&trace_text)
        .with_context(|| format!("parsing {}", trace_path.display()))?;
    let arena_text = fs::read_to_string(arena_path)
        .with_context(|| format!("reading {}", arena_path.display()))?;
    let arena_doc: serde_json::Value = serde_json::from_str(&arena_text)
        .with_context(|| format!("parsing {}", arena_path.display()))?;
    let arena = arena_from_json(&arena_doc)
        .with_context(|| format!("loading {}", arena_path.display()))?;
    let report = check_legal(&arena, &trace);
    if let Some(i) = report.unknown_port {
        println!("arena: fail (message {i} is outside the arena)");
        return Ok(1);
    }
    let mut all_pass = true;
    for c in requested {
        match report.failures.get(&c) {
            None => println!("{}: pass", condition_name(c)),
            Some(i) => {
                println!("{}: fail (message {i})", condition_name(c));
                all_pass = false;
            }
        }
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_explore(program: &Path, depth: usize, states: Option<usize>) -> Result<u8> {
    let g = load_program(program, "0")?;
    let minter = NameMinter::new(ENV_NODE_TAG);
    let mut budget = ExploreBudget::default();
    if let Some(cap) = states {
        budget.max_states = cap;
    }
    let env = CappedInputs::default();
    let exploration = denotation_upto(&g.net, depth, &env, &minter, &budget);
    for trace in &exploration.traces {
        if trace.is_empty() {
            println!("ε");
        } else {
            let line: Vec<String> = trace.iter().map(|ev| ev.to_string()).collect();
            println!("{}", line.join(" :: "));
        }
    }
    if !exploration.complete {
        eprintln!("exploration truncated by the state budget");
        return Ok(2);
    }
    Ok(0)
}
