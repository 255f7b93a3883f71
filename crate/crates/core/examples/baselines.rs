//! Train the flat VAE variants next to VAEM on one split and compare
//! generation and conditional NLL.
//!
//!     cargo run --example baselines

use vaem::baselines::{FlatConfig, FlatVae, FlatVariant};
use vaem::data::drop_half;
use vaem::model::{conditional_nll, is_nll, TabularModel, VaemConfig, VaemModel};
use vaem::synthetic;

fn report(name: &str, model: &dyn TabularModel, test: &vaem::data::Dataset) -> vaem::Result<()> {
    let observed = drop_half(test.mask(), 3);
    println!(
        "{name:<14} generation {:>8.3}  conditional {:>8.3}",
        is_nll(model, test, 200, 1)?,
        conditional_nll(model, test, &observed, 200, 1)?
    );
    Ok(())
}

fn main() -> vaem::Result<()> {
    let (train, test) = synthetic::mixed(600, 2)?.split(0.9, 2)?;
    let flat = FlatConfig {
        epochs: 300,
        ..FlatConfig::default()
    };
    for variant in [FlatVariant::Plain, FlatVariant::Extended, FlatVariant::Balanced] {
        let model = FlatVae::train(&train, variant, &flat, 5)?;
        if let Some(b) = &model.meta.balance {
            println!("balance weights {:?} over {:?}", b.weights.betas, b.types);
        }
        report(&format!("{variant:?}"), &model, &test)?;
    }
    let mut config = VaemConfig::compact();
    config.marginal.epochs = 300;
    config.dependency.epochs = 300;
    report("VAEM", &VaemModel::train_two_stage(&train, &config, 5)?, &test)
}
