//! Plot-ready marginal histograms and pairwise samples for real and
//! generated data, written as JSON.
//!
//!     cargo run --example pairplot -- [out.json]

use serde_json::json;

use vaem::eval::{pairplot_data, pairplot_export};
use vaem::model::{VaemConfig, VaemModel};
use vaem::synthetic;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "pairplot.json".into());
    let data = synthetic::mixed(600, 6)?;
    let mut config = VaemConfig::compact();
    config.marginal.epochs = 300;
    config.dependency.epochs = 300;
    let model = VaemModel::train_two_stage(&data, &config, 6)?;
    let dims = [0, 3, 7];
    let generated = pairplot_export(&model, 600, &dims, 6)?;
    let real = pairplot_data(&data, &dims)?;
    for (h, r) in generated.histograms.iter().zip(&real.histograms) {
        println!("{:<8} generated {:?}", h.column, &h.counts[..h.counts.len().min(10)]);
        println!("{:<8} real      {:?}", r.column, &r.counts[..r.counts.len().min(10)]);
    }
    let doc = json!({ "model": generated, "data": real });
    std::fs::write(&out, serde_json::to_string_pretty(&doc)?)?;
    println!("written to {out}");
    Ok(())
}
