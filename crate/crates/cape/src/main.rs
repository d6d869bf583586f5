use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cape::harness::{run_batch, run_episode, run_eval, ExperimentConfig, HarnessError};
use cape::metrics::{render_csv, render_markdown};
use cape::planner::render_plan_text;
use cape::world::load_domain_file;

#[derive(Parser)]
#[command(name = "cape", about = "Closed-loop LLM task planning experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single planning episode and print the plan.
    Plan(PlanArgs),
    /// Run every (task, method) pair and write results + reports.
    Batch(BatchArgs),
    /// Recompute metrics from a results file and print the report.
    Eval(EvalArgs),
    /// Domain-file utilities.
    Domains {
        #[command(subcommand)]
        command: DomainsCommand,
    },
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    method: String,
    #[arg(long)]
    config: PathBuf,
    /// Override the scripted-backend rule file from the config.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    results: PathBuf,
    /// CSV of binary ratings with plan ids "<method>/<task>".
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DomainsCommand {
    /// Parse and validate a domain file.
    Validate {
        #[arg(long)]
        domain: PathBuf,
    },
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn cmd_plan(args: PlanArgs) -> Result<(), HarnessError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(script) = args.script {
        if !script.exists() {
            return Err(HarnessError::Validation(format!(
                "referenced file does not exist: {}",
                script.display()
            )));
        }
        cfg.backend.script = Some(script);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out = out;
    }
    let loaded = cape::harness::load_inputs(&cfg)?;
    let record = run_episode(&cfg, &loaded, &args.task, &args.method)?;
    print!("{}", render_plan_text(&record.trace));

    let dir = cfg.out.join(sanitize(&args.method));
    std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let path = dir.join(format!("{}.json", sanitize(&args.task)));
    let body = serde_json::to_string_pretty(&record).expect("record serializes");
    std::fs::write(&path, body).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_batch(args: BatchArgs) -> Result<(), HarnessError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out = out;
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    let output = run_batch(&cfg)?;
    print!("{}", render_markdown(&output.rows));
    eprintln!(
        "wrote {} ({} episodes), {}, {}",
        output.results_path.display(),
        output.records.len(),
        output.report_csv_path.display(),
        output.report_md_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), HarnessError> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let rows = run_eval(&cfg, &args.results, args.annotations.as_deref())?;
    print!("{}", render_markdown(&rows));
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out).map_err(|source| HarnessError::Io {
            path: out.display().to_string(),
            source,
        })?;
        let path = out.join("eval.csv");
        std::fs::write(&path, render_csv(&rows)).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_domains_validate(domain: PathBuf) -> Result<(), HarnessError> {
    let (skills, scene) = load_domain_file(&domain)?;
    println!(
        "ok: {} skills, {} objects, {} rooms",
        skills.len(),
        scene.objects.len(),
        scene.rooms.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(args) => cmd_plan(args),
        Command::Batch(args) => cmd_batch(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Domains { command } => match command {
            DomainsCommand::Validate { domain } => cmd_domains_validate(domain),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
