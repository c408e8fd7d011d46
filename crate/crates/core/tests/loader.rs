use std::fs;
use std::path::Path;

use tempfile::TempDir;
use weakgraph::io::{EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLIT_FILE};
use weakgraph::*;

fn write_valid(dir: &Path) {
    DenseMatrix::<f32>::from_fn(4, 3, |i, j| (i * 3 + j) as f32)
        .save(dir.join(FEATURES_FILE))
        .unwrap();
    fs::write(dir.join(EDGES_FILE), "0\t1\n1\t2\n").unwrap();
    fs::write(dir.join(LABELS_FILE), "0\t0\n1\t1\n2\t0\n3\t1\n").unwrap();
    fs::write(
        dir.join(SPLIT_FILE),
        "0\ttrain\n1\ttrain\n2\tval\n3\ttest\n",
    )
    .unwrap();
}

/// A valid dataset with one file replaced.
fn fixture(file: &str, contents: &[u8]) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_valid(dir.path());
    fs::write(dir.path().join(file), contents).unwrap();
    dir
}

fn load_err(dir: &TempDir) -> Error {
    load_dataset::<f64>(dir.path(), LoadOptions::default()).unwrap_err()
}

#[test]
fn valid_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    write_valid(dir.path());
    let d = load_dataset::<f64>(dir.path(), LoadOptions::default()).unwrap();
    assert_eq!(d.graph.num_nodes(), 4);
    assert_eq!(d.graph.num_edges(), 2);
    assert_eq!(d.graph.degree(3), 0);
    assert_eq!(d.num_classes, 2);
    let split = d.split.unwrap();
    assert_eq!(
        (split.train, split.val, split.test),
        (vec![0, 1], vec![2], vec![3])
    );
}

#[test]
fn cora_shaped_dataset_is_accepted() {
    let (n, c, d) = (2708, 7, 1433);
    let dir = tempfile::tempdir().unwrap();
    let features =
        DenseMatrix::<f32>::from_fn(n, d, |i, j| ((i * 31 + j * 7) % 97 == 0) as u8 as f32);
    features.save(dir.path().join(FEATURES_FILE)).unwrap();
    let edges: String = (0..n)
        .map(|v| format!("{v}\t{}\n", (v * 13 + 1) % n))
        .collect();
    fs::write(dir.path().join(EDGES_FILE), edges).unwrap();
    let labels: String = (0..n).map(|v| format!("{v}\t{}\n", v % c)).collect();
    fs::write(dir.path().join(LABELS_FILE), labels).unwrap();
    let split: String = (0..n)
        .map(|v| {
            let role = match v {
                0..140 => "train",
                140..640 => "val",
                _ => "test",
            };
            format!("{v}\t{role}\n")
        })
        .collect();
    fs::write(dir.path().join(SPLIT_FILE), split).unwrap();

    let data = load_dataset::<f32>(dir.path(), LoadOptions::default()).unwrap();
    assert_eq!(data.features.shape(), (n, d));
    assert_eq!(data.num_classes, c);
    assert_eq!(data.features, features);
    let split = data.split.unwrap();
    assert_eq!(
        (split.train.len(), split.val.len(), split.test.len()),
        (140, 500, 2068)
    );
}

#[test]
fn malformed_features_are_rejected() {
    assert!(matches!(
        load_err(&fixture(FEATURES_FILE, b"NOPE")),
        Error::Dataset(_)
    ));
    let mut truncated = Vec::new();
    DenseMatrix::<f32>::zeros(4, 3)
        .write_to(&mut truncated)
        .unwrap();
    truncated.truncate(truncated.len() - 2);
    let err = load_err(&fixture(FEATURES_FILE, &truncated));
    assert!(matches!(err, Error::Dataset(_)), "{err}");

    let mut nan = Vec::new();
    DenseMatrix::<f32>::from_fn(4, 3, |i, _| if i == 2 { f32::NAN } else { 1.0 })
        .write_to(&mut nan)
        .unwrap();
    assert!(matches!(
        load_err(&fixture(FEATURES_FILE, &nan)),
        Error::NonFinite(_)
    ));
}

#[test]
fn malformed_edges_report_the_line() {
    for (text, line) in [("0\t1\n1\t2\t3\n", 2), ("0\t1\n\nx\t2\n", 3), ("0 1\n", 1)] {
        match load_err(&fixture(EDGES_FILE, text.as_bytes())) {
            Error::Parse { line: l, path, .. } => {
                assert_eq!(l, line, "{text:?}");
                assert!(path.ends_with(EDGES_FILE));
            }
            other => panic!("{text:?}: {other}"),
        }
    }
    assert!(matches!(
        load_err(&fixture(EDGES_FILE, b"0\t9\n")),
        Error::Dataset(_)
    ));
}

#[test]
fn malformed_labels_are_rejected() {
    let cases: [(&str, &str); 4] = [
        ("0\t0\n1\t1\n2\t0\n", "no label"),
        ("0\t0\n1\t1\n2\t0\n3\t1\n3\t0\n", "labeled twice"),
        ("0\t0\n1\tdog\n2\t0\n3\t1\n", "bad class"),
        ("0\t0\n1\t5\n2\t0\n3\t5\n", "not dense"),
    ];
    for (text, needle) in cases {
        let err = load_err(&fixture(LABELS_FILE, text.as_bytes()));
        assert!(err.to_string().contains(needle), "{needle}: {err}");
    }
}

#[test]
fn sparse_class_ids_load_with_remapping() {
    let dir = fixture(LABELS_FILE, b"0\t3\n1\t8\n2\t3\n3\t8\n");
    let d = load_dataset::<f64>(
        dir.path(),
        LoadOptions {
            remap_classes: true,
        },
    )
    .unwrap();
    assert_eq!(d.classes, vec![0, 1, 0, 1]);
    assert_eq!(d.num_classes, 2);
}

#[test]
fn malformed_splits_are_rejected() {
    for (text, needle) in [
        ("0\ttrain\n0\tval\n", "listed twice"),
        ("0\ttrain\n1\tholdout\n", "unknown split role"),
        ("7\ttest\n", "out of range"),
    ] {
        let err = load_err(&fixture(SPLIT_FILE, text.as_bytes()));
        assert_eq!(err.kind(), "parse");
        assert!(err.to_string().contains(needle), "{needle}: {err}");
    }
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_valid(dir.path());
    fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
    assert_eq!(load_err(&dir).kind(), "io");
    fs::remove_file(dir.path().join(SPLIT_FILE)).unwrap();
    fs::write(dir.path().join(LABELS_FILE), "0\t0\n1\t1\n2\t0\n3\t1\n").unwrap();
    assert!(load_dataset::<f64>(dir.path(), LoadOptions::default())
        .unwrap()
        .split
        .is_none());
}

#[test]
fn save_then_load_is_identity() {
    let data = planted_partition::<f32>(50, 2, 0.2, 0.02, 5, 1.0, 3).unwrap();
    let bundle = DatasetBundle {
        graph: data.graph,
        features: data.features,
        classes: data.classes,
        num_classes: 2,
        split: None,
        provenance: Some("generator = planted\n".into()),
    };
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &bundle).unwrap();
    assert_eq!(
        load_dataset::<f32>(dir.path(), LoadOptions::default()).unwrap(),
        bundle
    );
}
