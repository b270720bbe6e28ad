use std::io::Write;

use nalgebra::{DMatrix, DVector};
use synthsel::io::*;
use synthsel::qp::EstimatorKind;
use synthsel::selection::SelectionMethod;
use synthsel::Error;

fn spec(treated: &str, period: &str) -> PanelSpec {
    PanelSpec {
        treated: treated.into(),
        treatment_period: period.into(),
        donors: None,
    }
}

const SMALL: &str = "time,a,b,c\n2013-10,1,2,3\n2013-11,4,5,6\n2013-12,7,8,9\n";

#[test]
fn loads_small_panel() {
    let p = parse_panel(SMALL.as_bytes(), &spec("b", "2013-12")).unwrap();
    assert_eq!(p.n(), 2);
    assert_eq!(p.p(), 2);
    assert_eq!(p.y, DVector::from_vec(vec![2.0, 5.0]));
    assert_eq!(p.x, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 4.0, 6.0]));
    assert_eq!(p.post_y.unwrap(), DVector::from_vec(vec![8.0]));
    let l = p.labels.unwrap();
    assert_eq!(l.donors, vec!["a", "c"]);
    assert_eq!(l.pre_times, vec!["2013-10", "2013-11"]);
    assert_eq!(l.post_times, vec!["2013-12"]);
}

#[test]
fn donor_subset_is_respected() {
    let s = PanelSpec {
        donors: Some(vec!["c".into()]),
        ..spec("a", "2013-12")
    };
    let p = parse_panel(SMALL.as_bytes(), &s).unwrap();
    assert_eq!(p.p(), 1);
    assert_eq!(p.x[(1, 0)], 6.0);
}

#[test]
fn missing_treatment_period_names_label() {
    let err = parse_panel(SMALL.as_bytes(), &spec("b", "2099-01")).unwrap_err();
    assert!(err.to_string().contains("2099-01"), "{err}");
}

#[test]
fn crlf_and_quoted_headers_match_plain_file() {
    let quoted = "\"time\",\"a\",\"b\",\"c\"\r\n2013-10,1,2,3\r\n\"2013-11\",4,5,6\r\n2013-12,7,8,9\r\n";
    let a = parse_panel(SMALL.as_bytes(), &spec("a", "2013-12")).unwrap();
    let b = parse_panel(quoted.as_bytes(), &spec("a", "2013-12")).unwrap();
    assert_eq!(a, b);
}

fn parse_err(text: &str, treated: &str) -> (usize, usize, String) {
    match parse_panel(text.as_bytes(), &spec(treated, "3")) {
        Err(Error::Parse { row, column, message }) => (row, column, message),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn parse_errors_carry_location() {
    let (row, col, _) = parse_err("time,a,b\n1,1,2\n2,3\n3,5,6\n", "a");
    assert_eq!((row, col), (3, 3));
    let (row, col, msg) = parse_err("time,a,b\n1,1,2\n2,3,x\n3,5,6\n", "a");
    assert_eq!((row, col), (3, 3));
    assert!(msg.contains('x'));
    let (row, _, msg) = parse_err("time,a,b\n1,1,2\n2,3,4\n3,5,6\n", "zzz");
    assert_eq!(row, 1);
    assert!(msg.contains("zzz"));
    let (row, col, _) = parse_err("period,a,b\n1,1,2\n", "a");
    assert_eq!((row, col), (1, 1));
}

#[test]
fn csv_round_trip_preserves_panel_and_covariates() {
    let text = "time,u,v,w,x\n1,0.1,1e-3,3.25,-7\n2,1.5,2.5,3.5,4.5\n3,0.3333333333333333,2,1,0\n4,9,8,7,6\n";
    let p = parse_panel(text.as_bytes(), &spec("v", "4")).unwrap();
    let cov = "covariate,u,v,w,x\nincome,1,2,3,4\nsize,0.5,0.25,0.125,1\n";
    let p = parse_covariates(cov.as_bytes(), p).unwrap();
    let mut buf = Vec::new();
    write_panel_csv(&p, &mut buf).unwrap();
    let again = parse_panel(buf.as_slice(), &spec("v", "4")).unwrap();
    let mut cbuf = Vec::new();
    write_covariates_csv(&p, &mut cbuf).unwrap();
    let again = parse_covariates(cbuf.as_slice(), again).unwrap();
    assert_eq!(p, again);
    let c = again.covariates.unwrap();
    assert_eq!(c.z, DVector::from_vec(vec![2.0, 0.25]));
    assert_eq!(c.d.ncols(), 3);
}

#[test]
fn covariates_missing_unit_is_parse_error() {
    let p = parse_panel(SMALL.as_bytes(), &spec("a", "2013-12")).unwrap();
    let err = parse_covariates("covariate,a,b\nk,1,2\n".as_bytes(), p).unwrap_err();
    assert_eq!(err.kind(), "parse");
}

#[test]
fn preprocess_identity_and_constant() {
    let p = parse_panel(SMALL.as_bytes(), &spec("a", "2013-12")).unwrap();
    assert_eq!(preprocess(&p, 1, false).unwrap(), p);
    let c = parse_panel("time,a,b\n1,5,2\n2,5,2\n3,5,2\n".as_bytes(), &spec("a", "3")).unwrap();
    let d = preprocess(&c, 1, true).unwrap();
    assert!(d.y.iter().chain(d.x.iter()).all(|&v| v == 0.0));
    assert!(d.post_y.unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn preprocess_trailing_moving_average() {
    let p = parse_panel("time,a,b\n1,1,0\n2,2,0\n3,3,0\n4,4,0\n".as_bytes(), &spec("a", "4")).unwrap();
    let f = preprocess(&p, 2, false).unwrap();
    assert_eq!(f.y, DVector::from_vec(vec![1.5, 2.5]));
    assert_eq!(f.post_y.clone().unwrap(), DVector::from_vec(vec![3.5]));
    assert_eq!(f.labels.as_ref().unwrap().pre_times, vec!["2", "3"]);
    // demeaning uses pre-treatment means only
    let d = preprocess(&p, 2, true).unwrap();
    assert_eq!(d.y, DVector::from_vec(vec![-0.5, 0.5]));
    assert_eq!(d.post_y.unwrap(), DVector::from_vec(vec![1.5]));
}

#[test]
fn preprocess_rejects_long_windows() {
    let p = parse_panel(SMALL.as_bytes(), &spec("a", "2013-12")).unwrap();
    assert_eq!(preprocess(&p, 3, false).unwrap_err().kind(), "config");
    assert_eq!(preprocess(&p, 2, false).unwrap_err().kind(), "config");
    assert_eq!(preprocess(&p, 0, false).unwrap_err().kind(), "config");
}

#[test]
fn grid_strings() {
    assert_eq!(parse_grid("0:1:5").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(parse_grid("0:1:21").unwrap().len(), 21);
    assert_eq!(parse_grid("0.3").unwrap(), vec![0.3]);
    assert_eq!(parse_grid("0, 0.5,2").unwrap(), vec![0.0, 0.5, 2.0]);
    assert!(parse_grid("0:1").is_err());
    assert!(parse_grid("0:1:0").is_err());
    assert!(parse_grid("a,b").is_err());
}

#[test]
fn run_config_from_json_loads_panel() {
    let dir = tempfile::tempdir().unwrap();
    let panel_path = dir.path().join("panel.csv");
    std::fs::write(&panel_path, "time,a,b,c\n1,1,2,3\n2,2,3,5\n3,3,4,4\n4,4,6,5\n5,5,5,7\n").unwrap();
    let cfg = RunConfig {
        input: panel_path,
        panel: spec("a", "5"),
        covariates: None,
        estimator: EstimatorKind::Penalized,
        lambda_grid: Some("0:1:3".into()),
        m_grid: None,
        v_grid: None,
        selection: SelectionMethod::Sure,
        preprocessing: Preprocessing {
            ma_window: 2,
            demean: true,
        },
        seed: 1,
        output: None,
        format: OutputFormat::Json,
    };
    let cfg_path = dir.path().join("run.json");
    let mut f = std::fs::File::create(&cfg_path).unwrap();
    f.write_all(serde_json::to_string(&cfg).unwrap().as_bytes()).unwrap();
    let back = RunConfig::from_json_file(&cfg_path).unwrap();
    assert_eq!(back, cfg);
    let panel = back.load().unwrap();
    assert_eq!(panel.n(), 3);
    assert!(panel.y.sum().abs() < 1e-12);
    let bad = RunConfig {
        preprocessing: Preprocessing {
            ma_window: 0,
            demean: false,
        },
        ..cfg
    };
    assert!(bad.validate().is_err());
}

#[test]
fn reports_are_versioned() {
    let s = report_json("fit", &vec![1, 2]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["command"], "fit");
    assert_eq!(v["result"][1], 2);
}
