use std::path::PathBuf;

use vaem::data::{Dataset, SchemaDoc};
use vaem::error::Error;

fn boston_paths() -> (PathBuf, PathBuf) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    (root.join("boston.csv"), root.join("boston.schema.json"))
}

#[test]
fn boston_loads_with_expected_shape() {
    let (csv, schema) = boston_paths();
    let data = Dataset::load_csv(&csv, &SchemaDoc::load(&schema).unwrap()).unwrap();
    assert_eq!((data.rows(), data.width()), (506, 14));
    assert_eq!(data.schema.columns[data.schema.target()].name, "medv");
    assert!(data.mask().iter().all(|&m| m));
}

#[test]
fn write_then_reload_is_identity() {
    let (csv, schema) = boston_paths();
    let doc = SchemaDoc::load(&schema).unwrap();
    let data = Dataset::load_csv(&csv, &doc).unwrap();
    let mut buf = Vec::new();
    data.write_csv_to(&mut buf).unwrap();
    let back = Dataset::read_csv(buf.as_slice(), &doc).unwrap();
    assert_eq!(back, data);

    let partial = data.with_mask(vaem::data::drop_half(data.mask(), 1)).unwrap();
    let mut buf = Vec::new();
    partial.write_csv_to(&mut buf).unwrap();
    let back = Dataset::read_csv(buf.as_slice(), &doc).unwrap();
    assert_eq!(back.mask(), partial.mask());
}

#[test]
fn bad_cells_name_their_column() {
    let doc = SchemaDoc::from_json(
        r#"{"schema_version":1,"columns":[
            {"name":"x","kind":"continuous","min":0,"max":1},
            {"name":"k","kind":"categorical","params":{"labels":["a","b"]},"is_target":true}]}"#,
    )
    .unwrap();
    assert!(SchemaDoc::from_json(r#"{"schema_version":1,"columns":[{"name":"x","kind":"continuous","labels":[]}]}"#).is_err());
    let err = Dataset::read_csv("x,k\n0.5,c\n".as_bytes(), &doc).unwrap_err();
    assert!(matches!(&err, Error::Cell { column, .. } if column == "k"), "{err}");
    let err = Dataset::read_csv("x,k\n1.5,a\n".as_bytes(), &doc).unwrap_err();
    assert!(matches!(&err, Error::Cell { column, .. } if column == "x"), "{err}");
}

#[test]
fn energy_schema_reads_the_uci_layout() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let doc = SchemaDoc::load(&root.join("energy.schema.json")).unwrap();
    let csv = "relative_compactness,surface_area,wall_area,roof_area,overall_height,orientation,glazing_area,glazing_area_distribution,heating_load
0.98,514.5,294,110.25,7,2,0,0,15.55
0.9,563.5,318.5,122.5,7,3,0.1,1,20.84
0.62,808.5,367.5,220.5,3.5,4,0.25,2,12.5
0.64,784,343,220.5,3.5,5,0.4,5,16.1
";
    let data = Dataset::read_csv(csv.as_bytes(), &doc).unwrap();
    assert_eq!((data.rows(), data.width()), (4, 9));
    assert_eq!(data.schema.columns[data.schema.target()].name, "heating_load");
    let discrete = data.schema.columns.iter().filter(|c| c.kind.is_discrete()).count();
    assert_eq!(discrete, 3);
}
