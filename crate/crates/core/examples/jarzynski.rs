//! Jarzynski reweighting of uncontrolled proposals on the Gaussian path.
//! The self-normalized weights estimate `Z_1 / Z_0 = 4`; flipping the sign
//! of the work breaks the estimate.
//!
//!     cargo run --release --example jarzynski [particles]

use ctds::energy::GaussianOracle;
use ctds::verify::{jarzynski_ratio, JarzynskiSetup};

fn main() -> anyhow::Result<()> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(20_000);
    let exact = GaussianOracle::new(1.0, 2.0, 2).partition_ratio();
    println!("exact Z1/Z0 = {exact}");
    for seed in 1..=3 {
        let od = jarzynski_ratio(&JarzynskiSetup::overdamped(n, seed))?;
        let ct = jarzynski_ratio(&JarzynskiSetup::frozen_ctds(n, seed))?;
        println!("seed {seed}: overdamped {od:.4}  ctds (frozen xi) {ct:.4}");
    }
    let mut flipped = JarzynskiSetup::overdamped(n, 1);
    flipped.work_sign = -1.0;
    println!("flipped work sign: {:.4}", jarzynski_ratio(&flipped)?);
    Ok(())
}
