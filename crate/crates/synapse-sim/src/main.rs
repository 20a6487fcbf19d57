use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use synapse_sim::config::SimConfig;
use synapse_sim::scenario::{entry_keys, run_scenario, DeadlockError, Scenario};
use synapse_sim::{experiments, formats, report};

#[derive(Parser)]
#[command(name = "synapse-sim", version, about = "Deterministic match-table pipeline simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Single simulation; writes metrics.json plus window, latency and
    /// per-table CSVs.
    Run(CommonArgs),
    /// Hit rate and latency across block size x table capacity.
    Sweep(CommonArgs),
    /// Delivered throughput across offered rate x block count.
    Stress(CommonArgs),
    /// Static full allocation vs managed allocation over one load profile.
    Adaptive(CommonArgs),
    /// Fit capacity-model terms to <out>/stress.csv.
    FitUsl(CommonArgs),
    /// Generate a ruleset file from the [rules] section.
    GenRules(CommonArgs),
    /// Generate a packet trace from the [traffic] section.
    GenTrace(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML). Relative paths inside it resolve against
    /// its own directory.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonArgs {
    fn load(&self) -> anyhow::Result<(SimConfig, PathBuf)> {
        let mut cfg = SimConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let base = self.config.parent().unwrap_or(Path::new(".")).to_path_buf();
        report::write_file(&self.out, "config.resolved", &cfg.resolved_toml())?;
        Ok((cfg, base))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = match &cli.cmd {
        Cmd::Run(a) | Cmd::Sweep(a) | Cmd::Stress(a) | Cmd::Adaptive(a) | Cmd::FitUsl(a)
        | Cmd::GenRules(a) | Cmd::GenTrace(a) => a,
    };
    match dispatch(&cli.cmd, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<DeadlockError>().is_some() {
                eprintln!("{e:#}");
                ExitCode::from(3)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        }
    }
}

fn dispatch(cmd: &Cmd, args: &CommonArgs) -> anyhow::Result<()> {
    let (cfg, base) = args.load()?;
    let out = &args.out;
    match cmd {
        Cmd::Run(_) => {
            let sc = Scenario::build(&cfg, &base)?;
            let m = run_scenario(sc)?;
            report::write_run_outputs(out, &m)?;
            println!(
                "{} cycles, {} injected, {} emitted, {} dropped, hit rate {:.4}, {:.3} Mpps",
                m.cycles,
                m.injected,
                m.emitted,
                m.dropped,
                m.hit_rate,
                m.throughput_pps / 1e6
            );
        }
        Cmd::Sweep(_) => {
            let rows = experiments::sweep(&cfg, &base)?;
            report::write_file(out, "sweep.csv", &experiments::sweep_csv(&rows))?;
            println!("sweep: {} cells -> {}", rows.len(), out.join("sweep.csv").display());
        }
        Cmd::Stress(_) => {
            let rows = experiments::stress(&cfg, &base)?;
            report::write_file(out, "stress.csv", &experiments::stress_csv(&rows))?;
            println!("stress: {} cells -> {}", rows.len(), out.join("stress.csv").display());
        }
        Cmd::Adaptive(_) => {
            let outcome = experiments::adaptive(&cfg, &base)?;
            report::write_file(out, "adaptive.csv", &experiments::adaptive_csv(&outcome))?;
            report::write_file(out, "metrics_static.json", &report::metrics_json(&outcome.static_metrics))?;
            report::write_file(out, "metrics_adaptive.json", &report::metrics_json(&outcome.adaptive_metrics))?;
            let s = &outcome.static_metrics;
            let a = &outcome.adaptive_metrics;
            println!(
                "adaptive: {:.3} Mpps with {} solves / {} moves vs static {:.3} Mpps",
                a.throughput_pps / 1e6,
                a.solves,
                a.moves,
                s.throughput_pps / 1e6
            );
        }
        Cmd::FitUsl(_) => {
            let path = out.join("stress.csv");
            let text = std::fs::read_to_string(&path).map_err(|e| {
                anyhow::anyhow!("cannot read {} (run `stress` first or drop a samples CSV there): {e}", path.display())
            })?;
            let samples = experiments::fit_samples_from_csv(&text)?;
            let params = experiments::fit(&samples)?;
            report::write_file(out, "usl.json", &experiments::fit_json(&params))?;
            println!(
                "fit over {} samples: node 0 usl {} {} {} {}",
                samples.len(),
                params.alpha0,
                params.alpha1,
                params.beta0,
                params.beta1
            );
        }
        Cmd::GenRules(_) => {
            let rulesets = synapse_sim::scenario::build_rulesets(&cfg, &base)?;
            report::write_file(out, "rules.txt", &formats::write_ruleset(&rulesets[0]))?;
            println!("{} rules -> {}", rulesets[0].len(), out.join("rules.txt").display());
        }
        Cmd::GenTrace(_) => {
            let sc = Scenario::build(&cfg, &base)?;
            let text = formats::write_trace(&sc.packets, &entry_keys(&sc.flows));
            report::write_file(out, "trace.csv", &text)?;
            println!("{} packets -> {}", sc.packets.len(), out.join("trace.csv").display());
        }
    }
    Ok(())
}
