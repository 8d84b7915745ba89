use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adjflow_core::checkpoint::plan_offline;
use adjflow_core::gradients::AdjointNorm;
use adjflow_core::{
    CheckpointPolicy, ControlKind, Model, ModelConfig, ModelKind, SolveMode, TaylorMode,
};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "adjflow", version, about = "Adjoint gradients of small transient finite element models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a model, compute the gradient of its functional and write the results.
    Run {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Taylor remainder test of the adjoint gradient.
    Taylor {
        #[command(flatten)]
        model: ModelArgs,
        /// Central differences (expected corrected order 3) instead of one-sided (2).
        #[arg(long)]
        central: bool,
        /// Number of step sizes, each half the previous one [default: 6, or 5 with --central].
        #[arg(long, value_parser = clap::value_parser!(u64).range(3..))]
        levels: Option<u64>,
        /// Largest perturbation size.
        #[arg(long, default_value_t = 1e-2)]
        h0: f64,
    },
    /// Replay the tape and compare with the recorded values; also checks that
    /// an injected out-of-band mutation is detected.
    ReplayCheck {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Print the optimal offline checkpoint schedule.
    Schedule {
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        snaps: usize,
    },
    /// Write the annotated tape and the functional's time attribution as JSON.
    DumpTape {
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// burgers-linearised, burgers-implicit, heat or reaction-diffusion
    #[arg(value_parser = parse_model)]
    model: ModelKind,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    nu: Option<f64>,
    /// Offline checkpointing with this many snapshots.
    #[arg(long, conflicts_with = "store_all")]
    snaps: Option<usize>,
    /// Keep every forward value during the adjoint sweep.
    #[arg(long)]
    store_all: bool,
    /// Conjugate gradients on operator actions instead of LU factorisations.
    #[arg(long)]
    matfree: bool,
    /// Seed for random Taylor and duality directions.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Control to differentiate with respect to: ic or scalar.
    #[arg(long, default_value = "ic", value_parser = parse_control)]
    control: ControlKind,
    /// Output directory.
    #[arg(long, env = "ADJOINT_OUT", default_value = "adjflow-out")]
    out: PathBuf,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: adjflow_core::Error| e.to_string())
}

fn parse_control(s: &str) -> Result<ControlKind, String> {
    s.parse().map_err(|e: adjflow_core::Error| e.to_string())
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.model);
        if let Some(n) = self.cells {
            cfg.n_cells = n;
        }
        if let Some(dt) = self.dt {
            cfg.dt = dt;
        }
        if let Some(n) = self.steps {
            cfg.n_steps = n;
        }
        if let Some(nu) = self.nu {
            cfg.nu = nu;
        }
        if let Some(s) = self.snaps {
            cfg.policy = CheckpointPolicy::Offline { snapshots: s };
        }
        if self.store_all {
            cfg.policy = CheckpointPolicy::StoreAll;
        }
        if self.matfree {
            cfg.mode = SolveMode::MatrixFree;
        }
        cfg.seed = self.seed;
        cfg
    }

    fn build(&self) -> Result<Model> {
        let model = Model::new(self.config())?;
        for w in model.warnings() {
            eprintln!("warning: {w}");
        }
        Ok(model)
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn norms_csv(norms: &[AdjointNorm]) -> String {
    let mut out = String::from("variable,time,norm\n");
    for n in norms {
        let _ = writeln!(out, "{},{:.16e},{:.16e}", n.variable, n.time, n.norm);
    }
    out
}

fn run(args: &ModelArgs) -> Result<bool> {
    let model = args.build()?;
    let mut outcome = model.run(args.control)?;
    let mesh = model.mesh();
    let dir = &args.out;
    let mut outputs = vec![
        write(dir, "solution.csv", &outcome.final_state.to_csv(mesh))?,
        write(dir, "gradient.csv", &outcome.gradient.value.to_csv(mesh))?,
        write(dir, "adjoint_norms.csv", &norms_csv(&outcome.gradient.norms))?,
    ];
    outputs.push(dir.join("counters.json"));
    outcome.report.outputs = outputs;
    write(dir, "counters.json", &serde_json::to_string_pretty(&outcome.report)?)?;

    let r = &outcome.report;
    println!("model            {}", r.model);
    println!("functional       {:.16e}", r.functional);
    println!("control          {}", r.control);
    println!("gradient norm    {:.16e} (euclidean, coefficient vector)", r.gradient_norm);
    println!("gradient norm    {:.16e} (L2, mass-weighted)", r.gradient_mass_norm);
    println!("tape equations   {}", r.tape_equations);
    println!(
        "forward solves   {} linear, {} newton iterations",
        r.forward.forward_linear_solves, r.forward.newton_iterations
    );
    println!(
        "adjoint solves   {} ({} linear)",
        r.total.adjoint_solves, r.total.adjoint_linear_solves
    );
    println!(
        "recomputed steps {} (planned {})",
        r.checkpoint.recomputed_steps, r.predicted_recomputation
    );
    for p in &r.outputs {
        println!("wrote {}", p.display());
    }
    Ok(r.total.adjoint_solves == r.tape_equations
        && r.checkpoint.recomputed_steps == r.predicted_recomputation)
}

fn taylor(args: &ModelArgs, central: bool, levels: Option<u64>, h0: f64) -> Result<bool> {
    let model = args.build()?;
    let mode = if central { TaylorMode::Central } else { TaylorMode::OneSided };
    let levels = levels.map_or(if central { 5 } else { 6 }, |l| l as usize);
    let report = model.taylor(args.control, mode, h0, levels, args.seed)?;
    let path = write(&args.out, "taylor.csv", &report.to_csv())?;
    print!("{}", report.to_csv());
    let (o0, o1) = report.finest_orders();
    let expected = report.expected_order();
    let (lo, hi) = match mode {
        TaylorMode::OneSided => (1.9, 2.1),
        TaylorMode::Central => (2.7, 3.4),
    };
    let ok0 = o0.is_some_and(|o| (0.9..=1.1).contains(&o));
    let ok1 = o1.is_some_and(|o| (lo..=hi).contains(&o));
    println!(
        "finest orders: {} (expected 1), {} (expected {expected}, accepted [{lo}, {hi}])",
        o0.map_or("n/a".into(), |o| format!("{o:.4}")),
        o1.map_or("n/a".into(), |o| format!("{o:.4}")),
    );
    println!("wrote {}", path.display());
    Ok(ok0 && ok1)
}

fn replay_check(args: &ModelArgs) -> Result<bool> {
    let model = args.build()?;
    let controls = model.default_controls();
    let tape = model.forward(&controls, true)?;
    let clean = tape.replay(true)?;

    let mut mutated = model.forward(&controls, true)?;
    let victim = mutated.equations()[mutated.equations().len() / 2].target.clone();
    let mut value = mutated.value(&victim).cloned().expect("recorded value");
    let node = value.len() / 2;
    value.values[node] += 1e-6;
    mutated.overwrite_value(&victim, value)?;
    let dirty = mutated.replay(true)?;
    let detected = dirty.first_mismatch.as_ref() == Some(&victim);

    let summary = json!({
        "equations": clean.entries.len(),
        "max_deviation": clean.max_deviation(),
        "first_mismatch": clean.first_mismatch.as_ref().map(|v| v.to_string()),
        "mutation": {
            "variable": victim.to_string(),
            "flagged": dirty.first_mismatch.as_ref().map(|v| v.to_string()),
            "detected": detected,
        },
    });
    let path = write(&args.out, "replay.json", &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "replayed {} equations, max deviation {:e}",
        clean.entries.len(),
        clean.max_deviation()
    );
    match &clean.first_mismatch {
        Some(v) => println!("first mismatch at {v}"),
        None => println!("replay consistent"),
    }
    println!(
        "injected mutation of {victim}: {}",
        if detected { "detected" } else { "NOT detected" }
    );
    println!("wrote {}", path.display());
    Ok(clean.is_consistent() && detected)
}

fn schedule(steps: usize, snaps: usize) -> Result<bool> {
    let plan = plan_offline(steps, snaps)?;
    let stats = plan.validate()?;
    print!("{}", plan.dump());
    let counters = json!({
        "steps": steps,
        "snapshots": snaps,
        "advanced_steps": stats.advanced_steps,
        "recomputed_steps": stats.recomputed_steps(steps),
        "snapshot_writes": stats.snapshot_writes,
        "snapshot_reads": stats.snapshot_reads,
        "max_live_snapshots": stats.max_live_snapshots,
    });
    println!("{}", serde_json::to_string_pretty(&counters)?);
    Ok(stats.max_live_snapshots <= snaps)
}

fn dump_tape(args: &ModelArgs) -> Result<bool> {
    let model = args.build()?;
    let tape = model.forward(&model.default_controls(), true)?;
    let mut doc = tape.to_json();
    doc["functional"] = model.functional().attribution_json(&tape)?;
    let path = write(&args.out, "tape.json", &serde_json::to_string_pretty(&doc)?)?;
    println!("{} equations in {} units", tape.equations().len(), tape.units().len());
    println!("wrote {}", path.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { model } => run(model),
        Command::Taylor {
            model,
            central,
            levels,
            h0,
        } => taylor(model, *central, *levels, *h0),
        Command::ReplayCheck { model } => replay_check(model),
        Command::Schedule { steps, snaps } => schedule(*steps, *snaps),
        Command::DumpTape { model } => dump_tape(model),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
