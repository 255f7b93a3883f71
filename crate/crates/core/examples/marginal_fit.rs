//! Fit one marginal VAE per column of a mixed dataset and compare each
//! training ELBO with an importance-sampled log-likelihood.
//!
//!     cargo run --example marginal_fit

use vaem::likelihood::LikelihoodHead;
use vaem::marginal::{MarginalConfig, MarginalVae};
use vaem::{rng, synthetic};

fn main() -> vaem::Result<()> {
    let data = synthetic::mixed(500, 1)?;
    let variance = LikelihoodHead::noise_variance(data.schema.high_noise);
    let config = MarginalConfig::default();
    for (c, spec) in data.schema.columns.iter().enumerate() {
        let values = data.column_values(c);
        let head = LikelihoodHead::for_column(spec, variance);
        let fit = MarginalVae::train(head, &values, &config, &mut rng::stream(1, &[c as u64]))?;
        let (elbo, ll) = fit.vae.elbo_and_is_ll(&values, 1000, &mut rng::stream(2, &[c as u64]))?;
        println!(
            "{:<8} {:<20} epochs {:>4}  elbo {elbo:>7.3}  log-lik {ll:>7.3}",
            spec.name,
            spec.kind.name(),
            fit.history.len()
        );
    }
    Ok(())
}
