//! Hide half of the test cells, impute them from the observed half and score
//! the imputations.
//!
//!     cargo run --example conditional_inference

use vaem::data::drop_half;
use vaem::eval::{impute_hidden, imputation_rmse};
use vaem::model::{conditional_nll, predict_target, VaemConfig, VaemModel};
use vaem::{rng, synthetic};

fn main() -> vaem::Result<()> {
    let (train, test) = synthetic::mixed(600, 3)?.split(0.9, 3)?;
    let mut config = VaemConfig::compact();
    config.marginal.epochs = 300;
    config.dependency.epochs = 300;
    let model = VaemModel::train_two_stage(&train, &config, 3)?;

    let observed = drop_half(test.mask(), 4);
    let predictions = impute_hidden(&model, &test, &observed)?;
    println!("imputation RMSE {:.4}", imputation_rmse(&test, &predictions, &observed)?);
    println!("conditional NLL {:.3}", conditional_nll(&model, &test, &observed, 200, 4)?);

    let t = test.schema.target();
    let mut mask = test.row_mask(0).to_vec();
    mask[t] = false;
    let p = predict_target(&model, test.row(0), &mask, 200, &mut rng::seeded(5))?;
    println!(
        "row 0 target: truth {:.3}, predicted {:.3} +/- {:.3}",
        test.get(0, t),
        p.mean,
        p.variance.sqrt()
    );
    Ok(())
}
