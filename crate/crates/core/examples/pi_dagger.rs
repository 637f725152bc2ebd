//! Sampling the extended initial density of continuous tempering: the
//! temperature coordinate follows `exp(-psi_conf)`, positions and momenta
//! are widened by `1 / beta`.
//!
//!     cargo run --release --example pi_dagger

use ctds::energy::{GaussianSource, PathKind, PathSpec, Target};
use ctds::eval::{temperature_histogram, HISTOGRAM_BINS};
use ctds::tempering::{sample_pi_dagger, Tempering, TemperatureSchedule};

fn main() -> anyhow::Result<()> {
    let temp = Tempering::default();
    let path = PathSpec::new(
        PathKind::LinearContinuum,
        GaussianSource::gmm_default(),
        Target::Gaussian { dim: 2, variance: 1.0 },
        Some(TemperatureSchedule::default()),
    )?;
    let ens = sample_pi_dagger(&path, &temp, 20_000, 0)?;
    let xi = ens.xi.as_ref().expect("continuum ensemble has xi");
    let sched = temp.schedule;
    let betas: Vec<f64> = xi.iter().map(|&z| sched.beta(z).0).collect();

    let walls = temp.confining.delta_tilde;
    let inside = xi.iter().filter(|z| z.abs() <= walls).count();
    println!("share of xi between the confining walls: {:.3}", inside as f64 / xi.len() as f64);
    let h = temperature_histogram(&betas, sched.beta_min, HISTOGRAM_BINS)?;
    for (c, n) in h.centers().iter().zip(&h.counts) {
        println!("beta {c:.2}  {}", "#".repeat(n * 200 / h.total()));
    }

    // x | xi ~ N(0, sigma0^2 / beta): beta * |x|^2 / sigma0^2 averages d.
    let m: f64 = ens
        .x
        .rows()
        .into_iter()
        .zip(&betas)
        .map(|(r, b)| b * r.dot(&r) / path.source.variance)
        .sum::<f64>()
        / betas.len() as f64;
    println!("mean beta |x|^2 / sigma0^2 = {m:.4} (expected 2)");
    Ok(())
}
