//! `cirkd` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cirkd::data::{export_scene, generate_scene_with};
use cirkd::gradcheck::{run_suite, DEFAULT_INSTANCES};
use cirkd::trainer::{
    ablation_grid, evaluate, load_student, run_ablation, to_json, train_loop, validation_split, TrainConfig,
    CHECKPOINT_FILE, SUMMARY_FILE,
};
use cirkd::CirkdError;

#[derive(Debug, Parser)]
#[command(name = "cirkd", version, about = "Cross-image relational distillation on synthetic scenes")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a student and write trace.csv, summary.json and student.ckpt.
    Train,
    /// Score a checkpoint on the validation split.
    Eval {
        /// Defaults to student.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every row of the loss-term grid and write a comparison table.
    Ablate {
        /// Number of consecutive seeds starting at the master seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Finite-difference check of every gradient-bearing operation.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
    },
    /// Write sample scenes as PPM images plus raw label bytes.
    GenData {
        #[arg(long, default_value_t = 8)]
        count: u64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<CirkdError> for Failure {
    fn from(e: CirkdError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn train(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let summary = train_loop(&cfg, &cli.out_dir)?;
    println!(
        "trained {} iterations in {:.1} s, final mIoU {:.4}",
        summary.iterations, summary.wall_clock_seconds, summary.final_miou
    );
    println!("outputs in {}", cli.out_dir.display());
    Ok(())
}

fn eval(cli: &Cli, checkpoint: Option<&Path>) -> Result<(), Failure> {
    // the config a run was trained with sits next to its checkpoint
    let summary_path = cli.out_dir.join(SUMMARY_FILE);
    let mut cfg = if cli.config.is_none() && summary_path.exists() {
        cirkd::trainer::read_summary(&summary_path)?.config
    } else {
        load_config(cli)?
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ckpt = checkpoint.map_or_else(|| cli.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    let mut net = load_student(&cfg, &ckpt)?;
    let cm = evaluate(&mut net, &validation_split(&cfg)?, cfg.num_classes)?;
    println!("mIoU {:.4}", cm.miou()?);
    for (c, iou) in cm.per_class_iou().iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: {v:.4}"),
            None => println!("class {c}: absent"),
        }
    }
    Ok(())
}

fn ablate(cli: &Cli, n_seeds: u64) -> Result<(), Failure> {
    if n_seeds == 0 {
        return Err(Failure::Config("config error: --seeds must be at least 1".into()));
    }
    let cfg = load_config(cli)?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + n_seeds).collect();
    let table = run_ablation(&cfg, &seeds, &ablation_grid(), |seed, row, miou| {
        eprintln!("seed {seed} {row}: {miou:.4}");
    })?;
    ensure_dir(&cli.out_dir)?;
    let md = table.to_markdown();
    write(&cli.out_dir.join("ablation.md"), &md)?;
    write(&cli.out_dir.join("ablation.json"), &to_json(&table)?)?;
    print!("{md}");
    println!("wall clock {:.1} s", table.wall_clock_seconds);
    Ok(())
}

fn gradcheck(cli: &Cli, instances: usize) -> Result<(), Failure> {
    let reports = run_suite(cli.seed.unwrap_or(0), instances)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{verdict:4} {:28} max rel err {:.3e}", r.name, r.max_rel_err);
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    println!("all {} checks passed over {instances} instances", reports.len());
    Ok(())
}

fn gen_data(cli: &Cli, count: u64) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    ensure_dir(&cli.out_dir)?;
    for i in 0..count {
        let scene = generate_scene_with(cfg.seed + i, cfg.height, cfg.width, cfg.num_classes, &cfg.scene)?;
        let stem = cli.out_dir.join(format!("scene_{i:04}"));
        export_scene(&scene, &stem.with_extension("ppm"), &stem.with_extension("labels"))?;
    }
    println!("wrote {count} scenes to {}", cli.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train => train(&cli),
        Command::Eval { checkpoint } => eval(&cli, checkpoint.as_deref()),
        Command::Ablate { seeds } => ablate(&cli, *seeds),
        Command::Gradcheck { instances } => gradcheck(&cli, *instances),
        Command::GenData { count } => gen_data(&cli, *count),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
