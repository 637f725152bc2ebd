//! Where a freshly initialized CTDS proposal leaves the temperature
//! coordinate at `t = 1` on the 40-mode mixture, and what the histogram CSV
//! looks like. Uses the smoke-profile network so it runs in seconds.
//!
//!     cargo run --release --example ctds_histogram [particles]

use ctds::plot::histogram_csv;
use ctds::run::{final_temperature_histogram, manifest_hash, Profile, RunConfig};

fn main() -> anyhow::Result<()> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let cfg = RunConfig::preset("gmm40-ctds")?.with_profile(Profile::Smoke).resolved();
    let models = cfg.network.build(&cfg.path_spec()?, cfg.seed)?;
    let h = final_temperature_histogram(&cfg, &models, n, 0)?;
    print!("{}", histogram_csv(&h, &manifest_hash(&cfg)?));
    println!("share in the extreme bins: {:.3}", h.extreme_fraction());
    Ok(())
}
