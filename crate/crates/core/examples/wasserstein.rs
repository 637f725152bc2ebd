//! Exact 2-Wasserstein distance between empirical measures, checked
//! against the closed form for two shifted Gaussians.
//!
//!     cargo run --release --example wasserstein [n]

use ctds::energy::GaussianSource;
use ctds::eval::wasserstein2;
use ndarray::Axis;

fn main() -> anyhow::Result<()> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let src = GaussianSource { dim: 2, variance: 1.0 };
    for shift in [0.0, 1.0, 3.0] {
        let a = src.sample(n, 1);
        let mut b = src.sample(n, 2);
        b.column_mut(0).mapv_inplace(|v| v + shift);
        let w = wasserstein2(a.view(), b.view())?;
        println!("shift {shift}: empirical W2 {w:.4}, population W2 {shift:.4}");
    }
    let a = src.sample(n, 3);
    let same = a.select(Axis(0), &(0..n).rev().collect::<Vec<_>>());
    println!("permuted copy: W2 {:.2e}", wasserstein2(a.view(), same.view())?);
    Ok(())
}
