use std::io::Write;

use dconv::{parse_layer_file, resnet50, DconvError};

#[test]
fn file_rows_keep_their_order() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "ID, c, k, h, w, r, s, Stride").unwrap();
    writeln!(file, "13,256,256,14,14,3,3,1").unwrap();
    writeln!(file, "4,64,64,56,56,3,3,1").unwrap();
    let layers = parse_layer_file(file.path()).unwrap();
    assert_eq!(layers.iter().map(|l| l.id).collect::<Vec<_>>(), vec![13, 4]);
    let builtin = resnet50();
    assert_eq!(layers[1].spec, builtin[3].spec);
    assert_eq!(layers[0].spec, builtin[12].spec);
}

#[test]
fn malformed_rows_report_their_line() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "id,C,K,H,W,R,S,stride,pad_h,pad_w").unwrap();
    writeln!(file, "1,3,64,224,224,7,7,2,3,3").unwrap();
    writeln!(file, "2,64,256,56,56,1,1,1,0").unwrap();
    match parse_layer_file(file.path()) {
        Err(DconvError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn empty_and_missing_files_fail() {
    let file = tempfile::NamedTempFile::new().unwrap();
    assert!(matches!(parse_layer_file(file.path()), Err(DconvError::Parse { .. })));
    assert!(matches!(parse_layer_file("/nonexistent/layers.csv".as_ref()), Err(DconvError::Io(_))));
}
