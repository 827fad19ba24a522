use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use tubefly::config::Config;
use tubefly::harness::cascade::{collect_demonstration, run_closed_loop, ControllerStack, PolicyController, RunOptions};
use tubefly::harness::compare::{compare, ControllerKind};
use tubefly::harness::{OuterController, TrajectoryTask};
use tubefly::imitation::{augment, AugmentedDataset, Demonstration};
use tubefly::mlp::{train, MlpPolicy};
use tubefly::rtmpc::tube::tube_to_text;
use tubefly::{Error, Result};

#[derive(Parser)]
#[command(name = "tubefly", about = "Tube MPC and policy distillation for a flapping-wing MAV, in simulation")]
struct Cli {
    /// Parameter file (`key = value` lines); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a parameter, e.g. `--set N=30`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fly one task and write the trajectory log.
    Simulate {
        #[arg(long, default_value = "t1")]
        task: String,
        #[arg(long, default_value = "rtmpc")]
        controller: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "run.csv")]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Compute the tube and write `name lo hi` lines.
    Tube {
        #[arg(long, default_value = "tube.txt")]
        out: PathBuf,
    },
    /// Record an RTMPC demonstration.
    Collect {
        #[arg(long, default_value = "t1")]
        task: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "demo.csv")]
        out: PathBuf,
    },
    /// Tube-sample a demonstration into a training set.
    Augment {
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "dataset.csv")]
        out: PathBuf,
    },
    /// Train the policy network.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value = "weights.txt")]
        out: PathBuf,
    },
    /// Fly a task with a trained policy.
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "t1")]
        task: String,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seed sweep over tasks and controllers.
    Compare {
        #[arg(long, default_value = "t1,t2,t3")]
        tasks: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value = "rtmpc")]
        controllers: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_csv(rows: &[(String, u64, tubefly::harness::RunMetrics)]) -> String {
    let mut s = String::from(
        "task,seed,rmse_x,rmse_y,rmse_z,mae_x,mae_y,mae_z,t0,window,samples,infeasible_steps,saturation_count,clamp_count\n",
    );
    for (task, seed, m) in rows {
        s.push_str(&format!(
            "{task},{seed},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.rmse[0],
            m.rmse[1],
            m.rmse[2],
            m.mae[0],
            m.mae[1],
            m.mae[2],
            m.t0,
            m.window,
            m.samples,
            m.infeasible_steps,
            m.saturation_count,
            m.clamp_count
        ));
    }
    s
}

fn print_metrics(label: &str, m: &tubefly::harness::RunMetrics) {
    println!(
        "{label}: RMSE [cm] x={:.3} y={:.3} z={:.3}  MAE [cm] x={:.3} y={:.3} z={:.3}  window={:.2}s infeasible={} saturated={} clamped={}",
        m.rmse[0] * 100.0,
        m.rmse[1] * 100.0,
        m.rmse[2] * 100.0,
        m.mae[0] * 100.0,
        m.mae[1] * 100.0,
        m.mae[2] * 100.0,
        m.window,
        m.infeasible_steps,
        m.saturation_count,
        m.clamp_count
    );
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::Simulate { task, controller, weights, seed, out, metrics } => {
            let stack = ControllerStack::build(&cfg)?;
            let task = TrajectoryTask::from_name(&task)?;
            let mut ctrl: Box<dyn OuterController> = match controller.parse::<ControllerKind>()? {
                ControllerKind::Rtmpc => Box::new(stack.rtmpc()),
                ControllerKind::Policy => {
                    let path = weights.ok_or_else(|| Error::Config("--weights is required for the policy".into()))?;
                    Box::new(PolicyController::new(MlpPolicy::read(&path)?, stack.input_box().clone()))
                }
            };
            let opts = RunOptions { log: true, ..RunOptions::new(cfg.observer, task.disturbance(&cfg, seed)) };
            let res = run_closed_loop(&stack, ctrl.as_mut(), &task, &opts)?;
            res.log.expect("logging was requested").write(&out)?;
            print_metrics(task.name(), &res.metrics);
            if let Some(p) = metrics {
                std::fs::write(p, metrics_csv(&[(task.name().to_string(), seed, res.metrics)]))?;
            }
            Ok(true)
        }
        Cmd::Tube { out } => {
            let stack = ControllerStack::build(&cfg)?;
            std::fs::write(&out, tube_to_text(&stack.tube.z))?;
            println!("tube written to {}", out.display());
            Ok(true)
        }
        Cmd::Collect { task, steps, out } => {
            let stack = ControllerStack::build(&cfg)?;
            let task = TrajectoryTask::from_name(&task)?;
            let demo = collect_demonstration(&stack, &task, steps.unwrap_or(cfg.demo_steps))?;
            demo.write(&out)?;
            println!("{} tuples written to {}", demo.len(), out.display());
            Ok(true)
        }
        Cmd::Augment { demo, n, seed, out } => {
            let stack = ControllerStack::build(&cfg)?;
            let demo = Demonstration::read(&demo)?;
            let ds = augment(&demo, &stack.tube.z, &stack.tube.k, n.unwrap_or(cfg.n_extra), seed.unwrap_or(cfg.aug_seed))?;
            ds.write(&out)?;
            println!("{} rows written to {} (checksum {:016x})", ds.rows.len(), out.display(), ds.checksum());
            Ok(true)
        }
        Cmd::Train { dataset, epochs, lr, out } => {
            let ds = AugmentedDataset::read(&dataset)?;
            let mut tc = cfg.train_config();
            tc.lr = lr.unwrap_or(tc.lr);
            tc.epochs = epochs.unwrap_or(tc.epochs);
            let sizes = [ds.input_len(), cfg.hidden, cfg.hidden, 3];
            let start = Instant::now();
            let (net, rep) = train(&ds, &sizes, &tc)?;
            net.write(&out)?;
            println!(
                "trained on {} rows in {:.1}s: loss {:.3e} -> {:.3e}; weights written to {}",
                ds.rows.len(),
                start.elapsed().as_secs_f64(),
                rep.initial_loss,
                rep.final_loss,
                out.display()
            );
            Ok(true)
        }
        Cmd::Evaluate { weights, task, seeds, out } => {
            let stack = ControllerStack::build(&cfg)?;
            let net = MlpPolicy::read(&weights)?;
            let task = TrajectoryTask::from_name(&task)?;
            let mut rows = Vec::new();
            let mut ok = true;
            for seed in cfg.seed..cfg.seed + seeds as u64 {
                let mut ctrl = PolicyController::new(net.clone(), stack.input_box().clone());
                let opts = RunOptions::new(cfg.observer, task.disturbance(&cfg, seed));
                match run_closed_loop(&stack, &mut ctrl, &task, &opts) {
                    Ok(res) => {
                        print_metrics(&format!("{} seed {seed}", task.name()), &res.metrics);
                        rows.push((task.name().to_string(), seed, res.metrics));
                    }
                    Err(e) => {
                        eprintln!("{} seed {seed}: {e}", task.name());
                        ok = false;
                    }
                }
            }
            if let Some(p) = out {
                std::fs::write(p, metrics_csv(&rows))?;
            }
            Ok(ok)
        }
        Cmd::Compare { tasks, seeds, controllers, weights, out } => {
            let stack = ControllerStack::build(&cfg)?;
            let tasks: Vec<TrajectoryTask> = tasks.split(',').map(|t| TrajectoryTask::from_name(t.trim())).collect::<Result<_>>()?;
            let kinds: Vec<ControllerKind> = controllers.split(',').map(|c| c.trim().parse()).collect::<Result<_>>()?;
            let net = weights.map(|p| MlpPolicy::read(&p)).transpose()?;
            let table = compare(&stack, net.as_ref(), &tasks, &kinds, seeds, cfg.seed);
            print!("{}", table.to_console());
            std::fs::write(&out, table.to_csv())?;
            Ok(!table.any_failed())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
