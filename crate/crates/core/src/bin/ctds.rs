use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use ctds::run::{self, Profile, RunConfig};
use ctds::verify::{self, SuiteOptions};
use ctds::CtdsError;

/// Continuously tempered diffusion samplers.
///
/// Environment: CTDS_OUT_DIR overrides the output root, CTDS_THREADS the
/// worker thread count.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a sampler from a preset or a TOML config.
    Train {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// full, reduced or smoke (applied on top of a preset).
        #[arg(long, default_value = "full")]
        profile: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: <out root>/<name>-<profile>-s<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the resolved config as TOML and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a checkpoint: W2, ELBO and EUBO over trials.
    Eval {
        /// Run directory containing checkpoint.json.
        #[arg(long, required_unless_present = "checkpoint")]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config the checkpoint must have been trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle checks and print one line per property.
    Verify {
        #[arg(long, default_value_t = 100_000)]
        particles: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Render scatter and histogram CSVs of a run directory as SVG.
    Plot {
        dir: PathBuf,
        /// Only check the CSVs; write no images.
        #[arg(long)]
        no_svg: bool,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os("CTDS_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn set_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CTDS_THREADS") {
        let n: usize = v.parse().with_context(|| format!("CTDS_THREADS={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn profile_name(p: Profile) -> &'static str {
    match p {
        Profile::Full => "full",
        Profile::Reduced => "reduced",
        Profile::Smoke => "smoke",
    }
}

fn train(preset: Option<String>, config: Option<PathBuf>, profile: &str, seed: Option<u64>, out: Option<PathBuf>, print_config: bool) -> anyhow::Result<()> {
    let profile: Profile = profile.parse()?;
    let mut cfg = match (preset, config) {
        (Some(p), None) => RunConfig::preset(&p)?.with_profile(profile),
        (None, Some(path)) => {
            let c = RunConfig::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if profile != Profile::Full {
                c.with_profile(profile)
            } else {
                c
            }
        }
        _ => bail!(CtdsError::InvalidConfig("give exactly one of --preset or --config".into())),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let dir = out.unwrap_or_else(|| out_root().join(format!("{}-{}-s{}", cfg.name, profile_name(cfg.profile), cfg.seed)));
    eprintln!("training {} into {}", cfg.name, dir.display());
    let total = cfg.curriculum.total_iterations;
    let outcome = run::train_run(&cfg, &dir, &mut |r| {
        eprintln!(
            "epoch {:>5} iter {:>6}/{total} T {:.1} loss {:.4e} ess {:.1} lr {:.2e} {:.0}s",
            r.epoch, r.iter, r.horizon, r.loss, r.ess, r.lr, r.wall_time_s
        );
    })?;
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn eval(run_dir: Option<PathBuf>, checkpoint: Option<PathBuf>, config: Option<PathBuf>, n: Option<usize>, trials: Option<usize>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let ckpt = match (checkpoint, &run_dir) {
        (Some(c), _) => c,
        (None, Some(d)) => d.join(run::CHECKPOINT_FILE),
        (None, None) => bail!(CtdsError::InvalidConfig("give --run or --checkpoint".into())),
    };
    let cfg = config.map(|p| RunConfig::load(&p)).transpose()?;
    let dir = out
        .or(run_dir)
        .unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")));
    let report = run::eval_run(&ckpt, cfg.as_ref(), n, trials, &dir)?;
    println!("{}", report.csv_header());
    println!("{}", report.csv_row());
    if !report.bounds_ordered {
        eprintln!("warning: ELBO exceeds EUBO beyond two standard errors in some trial");
    }
    Ok(())
}

fn verify_cmd(particles: usize, seed: u64, json: bool) -> anyhow::Result<bool> {
    let checks = verify::run_suite(&SuiteOptions {
        jarzynski_particles: particles,
        seed,
    })?;
    if json {
        println!("{}", serde_json::to_string_pretty(&checks)?);
    } else {
        for c in &checks {
            println!("{}", c.line());
        }
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<CtdsError>())
        .map(|c| c.exit_code() as u8)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = set_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let result = match cli.cmd {
        Cmd::Train {
            preset,
            config,
            profile,
            seed,
            out,
            print_config,
        } => train(preset, config, &profile, seed, out, print_config).map(|_| true),
        Cmd::Eval {
            run,
            checkpoint,
            config,
            n,
            trials,
            out,
        } => eval(run, checkpoint, config, n, trials, out).map(|_| true),
        Cmd::Verify { particles, seed, json } => verify_cmd(particles, seed, json),
        Cmd::Plot { dir, no_svg } => ctds::plot::render_dir(&dir, !no_svg).map(|written| {
            for p in written {
                println!("{}", p.display());
            }
            true
        }).map_err(Into::into),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
