//! Train, evaluate and plot one preset end to end on the smoke profile,
//! the same path the `ctds` binary takes.
//!
//!     cargo run --release --example gmm40_pipeline [preset] [out-dir]

use std::path::PathBuf;

use ctds::plot::render_dir;
use ctds::run::{eval_run, train_run, Profile, RunConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "gmm40-ctds-jar".into());
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join(format!("{preset}-smoke")));
    let cfg = RunConfig::preset(&preset)?.with_profile(Profile::Smoke);
    let out = train_run(&cfg, &dir, &mut |r| println!("epoch {} iter {} T {:.1} loss {:.3e}", r.epoch, r.iter, r.horizon, r.loss))?;
    let report = eval_run(&out.checkpoint, Some(&cfg), None, None, &dir)?;
    println!("{}\n{}", report.csv_header(), report.csv_row());
    for p in render_dir(&dir, true)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
