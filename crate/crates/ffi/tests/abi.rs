use std::ffi::{CStr, CString};
use std::ptr;

use influence_ffi::*;

fn last_error() -> String {
    let p = infl_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn iris_split() -> (*mut InflDataset, *mut InflDataset) {
    let mut iris = ptr::null_mut();
    assert_eq!(infl_dataset_load_iris(&mut iris), InflStatus::Ok);
    let (mut train, mut test) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(infl_dataset_split(iris, 0.2, 0, true, true, &mut train, &mut test), InflStatus::Ok);
    infl_dataset_free(iris);
    (train, test)
}

#[test]
fn train_rank_and_read_back() {
    unsafe {
        let (train, test) = iris_split();
        let mut n = 0;
        assert_eq!(infl_dataset_len(train, &mut n), InflStatus::Ok);
        assert_eq!(n, 120);

        let mut model = ptr::null_mut();
        let st = infl_model_train(train, 0, 0, INFL_ACTIVATION_TANH, 1.0, 3000, 0.01, 0, &mut model);
        assert_eq!(st, InflStatus::Ok);
        let mut p = 0;
        assert_eq!(infl_model_num_params(model, &mut p), InflStatus::Ok);
        assert_eq!(p, 4 * 3 + 3);
        let mut theta = vec![0.0; p];
        assert_eq!(infl_model_params(model, theta.as_mut_ptr(), p), InflStatus::Ok);
        assert!(theta.iter().all(|v| v.is_finite()) && theta.iter().any(|&v| v != 0.0));

        let mut report = ptr::null_mut();
        assert_eq!(infl_rank(model, train, test, 3, INFL_SOLVER_EXACT, 0.0, &mut report), InflStatus::Ok);
        let mut len = 0;
        assert_eq!(infl_report_len(report, &mut len), InflStatus::Ok);
        assert_eq!(len, 120);

        let (mut first, mut first_inf) = (0, 0.0);
        assert_eq!(infl_report_ranked(report, 0, &mut first, &mut first_inf), InflStatus::Ok);
        let (mut last, mut last_inf) = (0, 0.0);
        assert_eq!(infl_report_ranked(report, len - 1, &mut last, &mut last_inf), InflStatus::Ok);
        assert!(first_inf >= last_inf);

        let (mut inf, mut delta) = (0.0, 0.0);
        assert_eq!(infl_report_score(report, first, &mut inf, &mut delta), InflStatus::Ok);
        assert_eq!(inf, first_inf);
        assert!((delta + inf / 120.0).abs() <= 1e-15 * inf.abs().max(1.0));

        let mut json = ptr::null_mut();
        assert_eq!(infl_report_to_json(report, &mut json), InflStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        infl_string_free(json);
        assert!(text.contains("\"ranking\""));

        infl_report_free(report);
        infl_model_free(model);
        infl_dataset_free(train);
        infl_dataset_free(test);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        assert_eq!(infl_dataset_load_iris(ptr::null_mut()), InflStatus::NullPointer);
        assert!(last_error().contains("out_dataset"));

        let (train, test) = iris_split();
        let mut model = ptr::null_mut();
        assert_eq!(
            infl_model_train(train, 1, 3, 7, 0.1, 10, 0.0, 0, &mut model),
            InflStatus::InvalidInput
        );
        assert!(last_error().contains("activation"));
        assert!(model.is_null());

        assert_eq!(
            infl_model_train(train, 1, 3, INFL_ACTIVATION_TANH, 0.1, 10, 0.0, 0, &mut model),
            InflStatus::Ok
        );
        let mut loss = 0.0;
        assert_eq!(infl_model_example_loss(model, test, 1000, &mut loss), InflStatus::OutOfRange);
        let mut report = ptr::null_mut();
        assert_eq!(
            infl_rank(model, train, test, 0, 99, 0.0, &mut report),
            InflStatus::InvalidInput
        );
        let mut small = [0.0; 2];
        assert_eq!(infl_model_params(model, small.as_mut_ptr(), 2), InflStatus::OutOfRange);

        infl_model_free(model);
        infl_dataset_free(train);
        infl_dataset_free(test);
        infl_model_free(ptr::null_mut());
        infl_report_free(ptr::null_mut());
    }
}

#[test]
fn datasets_from_arrays_are_validated() {
    unsafe {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [0u32, 1];
        let mut ds = ptr::null_mut();
        assert_eq!(infl_dataset_from_arrays(x.as_ptr(), y.as_ptr(), 2, 2, 2, &mut ds), InflStatus::Ok);
        infl_dataset_free(ds);
        let bad = [0u32, 5];
        assert_eq!(
            infl_dataset_from_arrays(x.as_ptr(), bad.as_ptr(), 2, 2, 2, &mut ds),
            InflStatus::InvalidInput
        );
    }
}

#[test]
fn run_experiment_reports_invalid_config() {
    let dir = std::env::temp_dir().join(format!("infl-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bad.json");
    std::fs::write(&path, r#"{"format_version": 1}"#).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let st = unsafe { infl_run_experiment(c.as_ptr(), ptr::null(), 1, ptr::null_mut()) };
    assert_eq!(st, InflStatus::InvalidConfig);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn header_is_generated_and_compiles() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/influence_ffi.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["InflStatus", "infl_rank", "infl_model_train", "infl_last_error_message", "INFL_SOLVER_LISSA"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .status()
    else {
        eprintln!("no C compiler available; skipping syntax check");
        return;
    };
    assert!(status.success());
}
