use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rddc_core::bounds::NoiseRatios;
use rddc_core::io::{read_trajectory_csv, write_matrix_csv, write_trajectory_csv};
use rddc_core::synth::Lyapunov;
use rddc_core::Mat;
use rddc_harness::pipeline::{self, Dataset, Ratios};
use rddc_harness::report::{fmt_num, trajectory_csv};
use rddc_harness::{emit_report, model_from_json, model_to_json, run_batch, ExperimentConfig, HarnessError, PreconditionMode};

#[derive(Parser)]
#[command(name = "rddc", version, about = "Robust data-driven identification and control experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    m: Option<usize>,
    #[arg(long, global = true)]
    gamma: Option<usize>,
    /// Number of transitions T.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    episode_length: Option<usize>,
    #[arg(long, global = true)]
    noise_pct: Option<f64>,
    #[arg(long, global = true)]
    k_bar: Option<f64>,
    #[arg(long, global = true, value_enum)]
    precondition: Option<PreconditionMode>,
    /// Use a common Lyapunov matrix instead of P = I.
    #[arg(long, global = true)]
    common_lyapunov: bool,
    /// Keep only this many data columns.
    #[arg(long, global = true)]
    column_subset: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// Trajectory CSV (`k, x_meas_*, u_*, mode[, x_true_*]`).
    #[arg(long)]
    data: PathBuf,
    /// Declared noise ratio for X1 (needed without ground-truth columns).
    #[arg(long)]
    r_x1: Option<f64>,
    /// Declared noise ratio for [U0; X0].
    #[arg(long)]
    r_ux0: Option<f64>,
    /// Ground-truth model JSON, for actual errors.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the random ensemble and write noisy data plus the true model.
    Generate(Common),
    /// Identify per-mode models from a trajectory CSV.
    Identify {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Error bounds per mode.
    Bound {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Build and report preconditioners.
    Precondition {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Robust gain synthesis.
    Synthesize {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Closed-loop check of synthesized gains against a model.
    Verify {
        #[arg(long)]
        model: PathBuf,
        /// `synthesis.json` written by `synthesize`.
        #[arg(long)]
        synthesis: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// The full pipeline with report, tables and trajectory.
    Experiment(Common),
    /// The full pipeline over consecutive seeds.
    Batch {
        #[arg(long, default_value_t = 20)]
        count: u64,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = c.$flag { cfg.$field = v; })* };
    }
    set!(seed => seed, n => n, m => m, gamma => gamma, steps => steps, episode_length => episode_length,
         noise_pct => noise_pct, k_bar => k_bar, precondition => precondition);
    if c.common_lyapunov {
        cfg.lyapunov = Lyapunov::Common;
    }
    if c.column_subset.is_some() {
        cfg.allow_column_subset = c.column_subset;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    let d = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&d).map_err(|e| HarnessError::io(&d, e))?;
    Ok(d)
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), HarnessError> {
    let s = serde_json::to_string_pretty(v).expect("json serializes") + "\n";
    std::fs::write(path, s).map_err(|e| HarnessError::io(path, e))
}

fn read_json(path: &Path) -> Result<serde_json::Value, HarnessError> {
    let s = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| HarnessError::Core(e.into()))
}

struct Style {
    color: bool,
}

impl Style {
    fn new() -> Self {
        Style {
            color: std::env::var_os("NO_COLOR").is_none() && std::io::stdout().is_terminal(),
        }
    }

    fn paint(&self, code: &str, s: &str) -> String {
        if self.color {
            format!("\x1b[{code}m{s}\x1b[0m")
        } else {
            s.to_string()
        }
    }

    fn ok(&self, s: &str) -> String {
        self.paint("32", s)
    }

    fn bad(&self, s: &str) -> String {
        self.paint("31", s)
    }
}

fn load_dataset(d: &DataArgs, cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let episodes = read_trajectory_csv(&d.data)?;
    let model = d.model.as_deref().map(|p| read_json(p).and_then(|v| Ok(model_from_json(&v)?))).transpose()?;
    Ok(Dataset {
        model,
        episodes,
        gamma: cfg.gamma,
    })
}

fn ratios(d: &DataArgs, p: &pipeline::Prepared) -> Result<Ratios, HarnessError> {
    match (d.r_x1, d.r_ux0) {
        (Some(a), Some(b)) => Ok(Ratios::Declared(NoiseRatios::declared(a, b)?)),
        (None, None) if p.truth.is_some() => Ok(Ratios::Oracle),
        (None, None) => Err(HarnessError::Usage(
            "the data has no ground-truth columns; pass --r-x1 and --r-ux0".into(),
        )),
        _ => Err(HarnessError::Usage("pass both --r-x1 and --r-ux0".into())),
    }
}

/// Prepared data, preconditioners and the per-mode table.
struct Analysis {
    prepared: pipeline::Prepared,
    pcs: Option<Vec<rddc_core::precond::Preconditioner>>,
    rows: Vec<pipeline::ModeRow>,
}

fn analyse(d: &DataArgs, cfg: &ExperimentConfig) -> Result<Analysis, HarnessError> {
    let ds = load_dataset(d, cfg)?;
    let prepared = pipeline::prepare(&ds, cfg)?;
    let raw = pipeline::identify_raw(&prepared)?;
    let pcs = pipeline::build_preconditioners(&prepared, cfg)?;
    let pre = pcs.as_deref().map(|p| pipeline::identify_preconditioned(&prepared, p)).transpose()?;
    let r = ratios(d, &prepared)?;
    let rows = pipeline::mode_rows(&prepared, &raw, pre.as_ref().zip(pcs.as_deref()), r, ds.model.as_ref(), cfg.k_bar)?;
    Ok(Analysis { prepared, pcs, rows })
}

fn print_rows(rows: &[pipeline::ModeRow]) {
    let o = |v: Option<f64>| v.map(fmt_num).unwrap_or_else(|| "-".into());
    println!(
        "{:>4} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "mode", "kappa_raw", "kappa_pre", "bound_raw", "bound_pre", "err_raw", "err_pre"
    );
    for r in rows {
        println!(
            "{:>4} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
            r.mode,
            fmt_num(r.kappa_raw),
            o(r.kappa_pre),
            fmt_num(r.bound_raw),
            o(r.bound_pre),
            o(r.actual_err_raw),
            o(r.actual_err_pre)
        );
    }
}

fn gains_from_json(v: &serde_json::Value) -> Result<Vec<Mat>, HarnessError> {
    let bad = || HarnessError::Usage("synthesis file has no gain for every mode".into());
    let modes = v["modes"].as_array().ok_or_else(bad)?;
    modes
        .iter()
        .map(|m| {
            let shape = m["gain_shape"].as_array().ok_or_else(bad)?;
            let (r, c) = (
                shape[0].as_u64().ok_or_else(bad)? as usize,
                shape[1].as_u64().ok_or_else(bad)? as usize,
            );
            let vals: Vec<f64> = m["gain"]
                .as_array()
                .ok_or_else(bad)?
                .iter()
                .map(|x| x.as_f64().ok_or_else(bad))
                .collect::<Result<_, _>>()?;
            if vals.len() != r * c {
                return Err(bad());
            }
            Ok(Mat::from_row_slice(r, c, &vals))
        })
        .collect()
}

fn run(cli: Cli) -> Result<i32, HarnessError> {
    let st = Style::new();
    match cli.cmd {
        Cmd::Generate(c) => {
            let cfg = load_config(&c)?;
            let dir = out_dir(&cfg)?;
            let clean = pipeline::generate(&cfg)?;
            let noisy = pipeline::corrupt(&clean, cfg.noise_pct, cfg.seed)?;
            write_trajectory_csv(&dir.join("data.csv"), &noisy.episodes)?;
            write_json(&dir.join("model.json"), &model_to_json(clean.model.as_ref().expect("generated")))?;
            println!("wrote {} episodes to {}", noisy.episodes.len(), dir.join("data.csv").display());
            Ok(0)
        }
        Cmd::Identify { data, common } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let ds = load_dataset(&data, &cfg)?;
            let p = pipeline::prepare(&ds, &cfg)?;
            let raw = pipeline::identify_raw(&p)?;
            write_json(&dir.join("model_raw.json"), &raw.to_json())?;
            if let Some(pcs) = pipeline::build_preconditioners(&p, &cfg)? {
                let pre = pipeline::identify_preconditioned(&p, &pcs)?;
                write_json(&dir.join("model_pre.json"), &pre.to_json())?;
            }
            println!("identified {} mode(s) into {}", raw.mode_count(), dir.display());
            Ok(0)
        }
        Cmd::Bound { data, common } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let a = analyse(&data, &cfg)?;
            write_json(&dir.join("bounds.json"), &serde_json::to_value(&a.rows).expect("rows serialize"))?;
            print_rows(&a.rows);
            let missing: Vec<usize> = a
                .rows
                .iter()
                .filter(|r| r.budget_pre.as_ref().unwrap_or(&r.budget_raw).absolute_bound.is_none())
                .map(|r| r.mode)
                .collect();
            if missing.is_empty() {
                Ok(0)
            } else {
                eprintln!("{} absolute bound unavailable for mode(s) {missing:?} (c_bar >= 1)", st.bad("warning:"));
                Ok(2)
            }
        }
        Cmd::Precondition { data, common } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let ds = load_dataset(&data, &cfg)?;
            let p = pipeline::prepare(&ds, &cfg)?;
            let pcs = pipeline::build_preconditioners(&p, &cfg)?
                .ok_or_else(|| HarnessError::Usage("choose a --precondition mode other than none".into()))?;
            write_json(&dir.join("preconditioners.json"), &serde_json::to_value(&pcs).expect("serializes"))?;
            for (i, pc) in pcs.iter().enumerate() {
                println!("mode {}: kappa {} -> {}", i + 1, fmt_num(pc.kappa_before), fmt_num(pc.kappa_after));
            }
            Ok(0)
        }
        Cmd::Synthesize { data, common } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let a = analyse(&data, &cfg)?;
            let syn = pipeline::synthesize(&a.prepared, a.pcs.as_deref(), &a.rows, &cfg)?;
            write_json(&dir.join("synthesis.json"), &syn.to_json())?;
            for (i, m) in syn.modes.iter().enumerate() {
                if let Some(k) = &m.gain {
                    write_matrix_csv(&dir.join(format!("gain_mode_{}.csv", i + 1)), k)?;
                }
            }
            let status = serde_json::to_value(syn.status).expect("serializes");
            let label = status.as_str().unwrap_or("");
            if syn.status == rddc_core::synth::SynthStatus::Feasible {
                println!("synthesis {}", st.ok(label));
                Ok(0)
            } else {
                println!("synthesis {} (failing modes {:?})", st.bad(label), syn.failing_modes());
                Ok(3)
            }
        }
        Cmd::Verify {
            model,
            synthesis,
            common,
        } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let model = model_from_json(&read_json(&model)?)?;
            let gains = gains_from_json(&read_json(&synthesis)?)?;
            let cl = pipeline::closed_loop(&model, &gains, cfg.closed_loop_steps, cfg.seed)?;
            let p = dir.join("trajectory.csv");
            std::fs::write(&p, trajectory_csv(&cl.states, model.n())).map_err(|e| HarnessError::io(&p, e))?;
            let summary = serde_json::json!({
                "spectral_radii": cl.spectral_radii,
                "spectral_norms": cl.spectral_norms,
                "converged": cl.converged,
                "settling_step": cl.settling_step,
                "diverged": cl.diverged,
            });
            write_json(&dir.join("closed_loop.json"), &summary)?;
            let stable = cl.converged && cl.spectral_norms.iter().all(|&v| v <= 1.0);
            println!("closed loop {}", if stable { st.ok("stable") } else { st.bad("not certified stable") });
            Ok(if stable { 0 } else { 3 })
        }
        Cmd::Experiment(c) => {
            let cfg = load_config(&c)?;
            let dir = out_dir(&cfg)?;
            let r = rddc_harness::run_experiment(&cfg);
            emit_report(&r, &dir)?;
            print_rows(&r.modes);
            if let Some(f) = &r.failed_at {
                eprintln!("{} stage {}: {}\n  hint: {}", st.bad("failed at"), f.stage.name(), f.message, f.hint);
            } else if let Some(s) = r.synthesis_status() {
                let label = serde_json::to_value(s).expect("serializes");
                println!("synthesis: {}", label.as_str().unwrap_or(""));
            }
            println!("report written to {}", dir.display());
            Ok(r.exit_code())
        }
        Cmd::Batch { count, common } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let seeds: Vec<u64> = (cfg.seed..cfg.seed + count).collect();
            let rows = run_batch(&cfg, &seeds, Some(&dir))?;
            for r in &rows {
                let tag = if r.exit_code == 0 { st.ok("ok") } else { st.bad(&format!("exit {}", r.exit_code)) };
                println!("seed {:>6}: {tag}", r.seed);
            }
            Ok(rows.iter().map(|r| r.exit_code).max().unwrap_or(0))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            if let HarnessError::Core(core) = &e {
                eprintln!("  hint: {}", pipeline::remediation(core));
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
