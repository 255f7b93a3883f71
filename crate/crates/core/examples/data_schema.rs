//! Load Boston through its schema, inspect normalization and hide half of
//! the cells.
//!
//!     cargo run --example data_schema

use std::path::Path;

use vaem::data::{drop_half, Dataset, SchemaDoc};

fn main() -> vaem::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let doc = SchemaDoc::load(&root.join("boston.schema.json"))?;
    let data = Dataset::load_csv(&root.join("boston.csv"), &doc)?;
    println!("{} rows, {} columns, target {}", data.rows(), data.width(), data.schema.columns[data.schema.target()].name);
    for spec in &data.schema.columns {
        println!(
            "  {:<8} {:<12} [{}, {}] -> {:.3}",
            spec.name,
            spec.kind.name(),
            spec.min,
            spec.max,
            spec.normalize(spec.min + 0.25 * (spec.max - spec.min)).unwrap_or(f64::NAN)
        );
    }
    let observed = drop_half(data.mask(), 1);
    let hidden = observed.iter().filter(|&&m| !m).count();
    println!("drop_half hides {hidden} of {} cells", observed.len());
    let (train, test) = data.split(0.9, 1)?;
    println!("split: {} train, {} test", train.rows(), test.rows());
    Ok(())
}
