//! Acquisition on a dataset where one feature determines the target: rank
//! candidates for one row, find the global order and compare information
//! curves with a random order.
//!
//!     cargo run --example saia_curve

use vaem::model::{VaemConfig, VaemModel};
use vaem::saia::{auic, estimate_rewards, information_curve, random_ordering, sing_ordering, SaiaConfig};
use vaem::synthetic;

fn main() -> vaem::Result<()> {
    let (train, test) = synthetic::deterministic(1000, 1)?.split(0.9, 2)?;
    let mut config = VaemConfig::compact();
    config.dependency.epochs = 500;
    let model = VaemModel::train_two_stage(&train, &config, 2)?;
    let saia = SaiaConfig::default();

    let names: Vec<&str> = test.schema.columns.iter().map(|c| c.name.as_str()).collect();
    for e in estimate_rewards(&model, test.row(0), &[false; 3], &[0, 1], &saia, 1)? {
        println!("reward for {:<7} {:.4}", names[e.candidate], e.reward);
    }
    let order = sing_ordering(&model, &test, &saia, 1)?;
    let random = random_ordering(&model, 1);
    for (label, order) in [("SING", order), ("random", random)] {
        let curve = information_curve(&model, &test, &order, 50, 1)?;
        let acquired: Vec<&str> = order.iter().map(|&c| names[c]).collect();
        println!("{label:<6} {acquired:?} rmse {:.3?} auic {:.4}", curve.rmse, auic(&curve)?);
    }
    Ok(())
}
