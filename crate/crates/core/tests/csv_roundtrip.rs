use mialab::attack::write_scores_csv;
use mialab::data::{load_csv, synth_purchase_like, write_csv, CsvSchema};
use mialab::MiaError;

fn schema(k: usize) -> CsvSchema {
    CsvSchema {
        label_column: "label".into(),
        num_classes: k,
    }
}

#[test]
fn dataset_survives_a_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut ds = synth_purchase_like(50, 7, 3, 0.4, 2).unwrap();
    // non-binary values exercise the float formatting
    ds.features.data_mut()[3] = 0.1 + 0.2;
    ds.features.data_mut()[5] = -1.0e-300;
    write_csv(&ds, &path).unwrap();
    let back = load_csv(&path, &schema(3)).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.num_classes, 3);
}

#[test]
fn label_column_may_be_anywhere() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "a,y,b\n1.5,1,2\n0,0,-3\n").unwrap();
    let ds = load_csv(&path, &CsvSchema { label_column: "y".into(), num_classes: 2 }).unwrap();
    assert_eq!(ds.labels, vec![1, 0]);
    assert_eq!(ds.features.data(), &[1.5, 2.0, 0.0, -3.0]);
}

#[test]
fn malformed_rows_report_their_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    for (body, row) in [
        ("f0,label\n1,0\nx,1\n", 2),
        ("f0,label\n1,0\n2,0\n3,7\n", 3),
        ("f0,label\n1,0\nNaN,1\n", 2),
        ("f0,label\n1,0,4\n", 1),
    ] {
        std::fs::write(&path, body).unwrap();
        match load_csv(&path, &schema(2)) {
            Err(MiaError::Format { row: r, .. }) => assert_eq!(r, row, "{body:?}"),
            other => panic!("{body:?}: {other:?}"),
        }
    }
    std::fs::write(&path, "f0,class\n1,0\n").unwrap();
    assert!(matches!(load_csv(&path, &schema(2)), Err(MiaError::Format { row: 0, .. })));
}

#[test]
fn scores_csv_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let rows = vec![(4, 0.1 + 0.2, Some(true)), (9, 1e-17, Some(false)), (2, 0.5, None)];
    write_scores_csv(&path, &rows).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["example", "score", "member"]);
    let back: Vec<(usize, f64, Option<u8>)> = reader.deserialize().map(|r| r.unwrap()).collect();
    let expected: Vec<_> = rows.iter().map(|&(i, s, m)| (i, s, m.map(u8::from))).collect();
    assert_eq!(back, expected);
}
