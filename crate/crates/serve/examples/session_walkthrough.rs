//! An acquisition session driven directly, without HTTP: ask for a ranking,
//! observe the top feature, repeat until every candidate is observed.
//!
//!     cargo run -p vaem-serve --example session_walkthrough

use std::collections::BTreeMap;

use serde_json::json;

use vaem::checkpoint::AnyModel;
use vaem::model::{TabularModel, VaemConfig, VaemModel};
use vaem::saia::SaiaConfig;
use vaem::synthetic;
use vaem_serve::session::{AcquisitionSession, Status};

fn main() -> anyhow::Result<()> {
    let data = synthetic::mixed(600, 1)?;
    let mut config = VaemConfig::compact();
    config.marginal.epochs = 300;
    config.dependency.epochs = 300;
    let model = AnyModel::Vaem(VaemModel::train_two_stage(&data, &config, 1)?);

    let initial = BTreeMap::from([("colour".to_string(), json!("green"))]);
    let mut session = AcquisitionSession::create("demo".into(), "mixed".into(), &model, &initial, 9, SaiaConfig::default())?;
    let truth = data.row(0);
    while session.status() == Status::Active {
        let rec = session.recommend(&model)?;
        let top = rec.ranking[0].clone();
        let spec = &model.schema().columns[top.index];
        let value = json!(spec.denormalize(truth[top.index]));
        let entry = session.observe(&model, &top.feature, &value, Some(rec))?;
        println!(
            "step {}: observed {:<8} = {value:<6}  target {:.3} +/- {:.3}",
            entry.step, entry.feature, entry.prediction.mean, entry.prediction.std
        );
    }
    println!("{}", serde_json::to_string_pretty(&session.curve())?);
    Ok(())
}
