//! Two-stage training on a mixed dataset: marginal VAEs, then the dependency
//! network from its zero-initialized state. Saves a checkpoint.
//!
//!     cargo run --example train_vaem -- [out.json]

use vaem::checkpoint::{AnyModel, Checkpoint};
use vaem::config::RunConfig;
use vaem::model::{is_nll, VaemConfig, VaemModel};
use vaem::synthetic;

fn main() -> vaem::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "vaem-mixed.json".into());
    let data = synthetic::mixed(600, 1)?;
    let (train, test) = data.split(0.9, 1)?;
    let mut config = VaemConfig::compact();
    config.marginal.epochs = 300;
    config.dependency.epochs = 300;
    let model = VaemModel::train_two_stage(&train, &config, 7)?;
    println!(
        "combined ELBO: zero-init {:.3}, trained {:.3}",
        model.meta.combined_elbo_zero_init, model.meta.combined_elbo_trained
    );
    println!("test NLL per observed cell: {:.3}", is_nll(&model, &test, 200, 1)?);
    Checkpoint::new(AnyModel::Vaem(model), RunConfig::default(), 7)?.save(out.as_ref())?;
    println!("checkpoint written to {out}");
    Ok(())
}
