//! Fitting the free-energy and control networks to the Gaussian path with
//! the PINN objective, and comparing the learned free energy with the
//! closed form.
//!
//!     cargo run --release --example oracle_training [iterations]

use ctds::dynamics::IntegratorConfig;
use ctds::energy::{GaussianOracle, PathKind};
use ctds::nn::FourierSpec;
use ctds::tempering::Tempering;
use ctds::training::{AdamConfig, ArchConfig, Curriculum, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let iterations: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(600);
    let o = GaussianOracle::new(1.0, 2.0, 2);
    let path = o.path(PathKind::Linear, None)?;
    let arch = ArchConfig {
        hidden_width: 64,
        depth: 3,
        x_features: Some(FourierSpec { num_features: 16, frequency_scale: 0.3 }),
        time_features: Some(FourierSpec { num_features: 8, frequency_scale: 2.0 }),
        temperature_features: None,
    };
    let cfg = TrainConfig {
        path: path.clone(),
        tempering: Tempering::default(),
        integrator: IntegratorConfig::overdamped(1.0, 0.01, 1.0),
        particles: 256,
        iterations_per_epoch: 20,
        batch_size: 512,
        curriculum: Curriculum::constant(iterations),
        optimizer: AdamConfig::default(),
        reweight: false,
        time_bins: 10,
        seed: 3,
    };
    let mut tr = Trainer::new(cfg, arch.build(&path, 11)?)?;
    while !tr.finished() {
        let r = tr.run_epoch()?;
        if r.epoch % 5 == 0 {
            println!("iter {:>5}  loss {:.3e}  ess {:.1}", r.iter, r.loss, r.ess);
        }
    }
    println!("t     learned F   exact F");
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (f, _) = tr.models.free_energy.eval_point(None, t, None)?;
        println!("{t:.2}  {f:>9.5}  {:>9.5}", o.free_energy(t, 1.0));
    }
    Ok(())
}
