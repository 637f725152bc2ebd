//! The Gaussian path with its closed-form control and free energy: the
//! PINN residual vanishes, and the probability-flow pushforward reproduces
//! the target density.
//!
//!     cargo run --release --example gaussian_oracle

use ctds::energy::{GaussianOracle, PathKind};
use ctds::eval::{elbo, eubo, generate, wasserstein2, EVAL_DT};
use ctds::models::Models;
use ctds::verify::oracle_residual_checks;

fn main() -> anyhow::Result<()> {
    let o = GaussianOracle::new(1.0, 2.0, 2);
    for c in oracle_residual_checks(2000, 0)? {
        println!("{}", c.line());
    }

    println!("t     F_t(beta=1)  F_t(beta=0.5)");
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        println!("{t:.2}  {:>11.6}  {:>13.6}", o.free_energy(t, 1.0), o.free_energy(t, 0.5));
    }

    let path = o.path(PathKind::Linear, None)?;
    let models = Models::oracle(o);
    let s = generate(&models, &path.source, 4000, EVAL_DT, 1)?;
    let n = s.len() as f64;
    let var = s.x.iter().map(|v| v * v).sum::<f64>() / (2.0 * n);
    println!("pushforward variance {var:.4} (exact {})", o.sigma1 * o.sigma1);

    let reference = path.target.sample(s.len(), 2);
    println!("W2 to exact target samples {:.4}", wasserstein2(s.x.view(), reference.view())?);
    // With the exact control both bounds are tight; what remains is the
    // O(dt) bias of the Euler flow, which can put ELBO above EUBO.
    println!("log Z1 {:.4}", -o.free_energy(1.0, 1.0));
    for dt in [EVAL_DT, EVAL_DT / 4.0] {
        let s = generate(&models, &path.source, 4000, dt, 1)?;
        let lo = elbo(&s, &path.target)?;
        let (hi, _) = eubo(&models, &path.source, &path.target, 4000, dt, 3)?;
        println!("dt {dt}: ELBO {:.4} +- {:.4}, EUBO {:.4} +- {:.4}", lo.mean, lo.std_err, hi.mean, hi.std_err);
    }
    Ok(())
}
