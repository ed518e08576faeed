use std::ffi::{CStr, CString};
use std::ptr;

use proxmmr_ffi::*;

fn last_error() -> String {
    let p = proxmmr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn sample(n: usize, seed: u64) -> *mut ProxmmrDataset {
    let mut data = ptr::null_mut();
    assert_eq!(
        unsafe { proxmmr_demand_sample(n, seed, 1.0, 1.0, &mut data) },
        ProxmmrStatus::Ok
    );
    data
}

fn fit(
    data: *const ProxmmrDataset,
    method: &str,
    overrides: Option<&str>,
) -> Result<*mut ProxmmrEstimator, ProxmmrStatus> {
    let m = CString::new(method).unwrap();
    let e = CString::new("demand").unwrap();
    let o = overrides.map(|s| CString::new(s).unwrap());
    let mut est = ptr::null_mut();
    let s = unsafe {
        proxmmr_fit(
            data,
            m.as_ptr(),
            e.as_ptr(),
            o.as_ref().map_or(ptr::null(), |c| c.as_ptr()),
            5,
            &mut est,
        )
    };
    if s == ProxmmrStatus::Ok {
        Ok(est)
    } else {
        Err(s)
    }
}

#[test]
fn linear_fit_recovers_known_coefficients() {
    // y = 1 + 2a − 3w exactly; LS bridge must reproduce it.
    let n = 50;
    let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.37).collect();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64).collect();
    let z: Vec<f64> = (0..2 * n).map(|i| ((i * 5) % 13) as f64).collect();
    let y: Vec<f64> = a
        .iter()
        .zip(&w)
        .map(|(a, w)| 1.0 + 2.0 * a - 3.0 * w)
        .collect();
    let mut data = ptr::null_mut();
    let s = unsafe {
        proxmmr_dataset_from_arrays(
            n,
            a.as_ptr(),
            1,
            w.as_ptr(),
            1,
            z.as_ptr(),
            2,
            y.as_ptr(),
            &mut data,
        )
    };
    assert_eq!(s, ProxmmrStatus::Ok);
    assert_eq!(unsafe { proxmmr_dataset_len(data) }, n);
    let est = fit(data, "ls", None).unwrap();
    let (qa, qw) = ([4.0, -1.0], [2.0, 0.5]);
    let mut out = [0.0; 2];
    let s =
        unsafe { proxmmr_estimator_predict(est, qa.as_ptr(), qw.as_ptr(), 2, out.as_mut_ptr(), 2) };
    assert_eq!(s, ProxmmrStatus::Ok);
    assert!(
        (out[0] - 3.0).abs() < 1e-8 && (out[1] - (-2.5)).abs() < 1e-8,
        "{out:?}"
    );
    let (mut ad, mut wd) = (0, 0);
    assert_eq!(
        unsafe { proxmmr_estimator_dims(est, &mut ad, &mut wd) },
        ProxmmrStatus::Ok
    );
    assert_eq!((ad, wd), (1, 1));
    unsafe {
        proxmmr_estimator_free(est);
        proxmmr_dataset_free(data);
    }
}

#[test]
fn json_round_trip_preserves_predictions() {
    let data = sample(200, 3);
    let est = fit(data, "nmmr-v", Some(r#"{"epochs": 5, "batch_size": 50}"#)).unwrap();
    let mut json = ptr::null_mut();
    assert_eq!(
        unsafe { proxmmr_estimator_to_json(est, &mut json) },
        ProxmmrStatus::Ok
    );
    let mut copy = ptr::null_mut();
    assert_eq!(
        unsafe { proxmmr_estimator_from_json(json, &mut copy) },
        ProxmmrStatus::Ok
    );
    let grid: Vec<f64> = (0..10).map(|i| 10.0 + 20.0 * i as f64 / 9.0).collect();
    let w: Vec<f64> = (0..30).map(|i| 40.0 + i as f64).collect();
    let (mut c1, mut c2) = ([0.0; 10], [0.0; 10]);
    unsafe {
        assert_eq!(
            proxmmr_estimator_predict_curve(
                est,
                grid.as_ptr(),
                10,
                w.as_ptr(),
                30,
                c1.as_mut_ptr(),
                10
            ),
            ProxmmrStatus::Ok
        );
        assert_eq!(
            proxmmr_estimator_predict_curve(
                copy,
                grid.as_ptr(),
                10,
                w.as_ptr(),
                30,
                c2.as_mut_ptr(),
                10
            ),
            ProxmmrStatus::Ok
        );
    }
    assert_eq!(c1, c2);
    unsafe {
        proxmmr_string_free(json);
        proxmmr_estimator_free(copy);
        proxmmr_estimator_free(est);
        proxmmr_dataset_free(data);
    }
}

#[test]
fn failures_map_to_status_codes() {
    let data = sample(100, 1);
    assert_eq!(fit(data, "bogus", None).unwrap_err(), ProxmmrStatus::Config);
    assert!(last_error().contains("bogus"));
    assert_eq!(
        fit(data, "ls", Some(r#"{"learning_rate": 1}"#)).unwrap_err(),
        ProxmmrStatus::Config
    );
    assert_eq!(
        fit(data, "nmmr-u", Some(r#"{"epochs": 0}"#)).unwrap_err(),
        ProxmmrStatus::Config
    );
    assert_eq!(
        fit(ptr::null(), "ls", None).unwrap_err(),
        ProxmmrStatus::NullPointer
    );

    let est = fit(data, "ls", None).unwrap();
    let a = [20.0; 3];
    let mut small = [0.0; 2];
    let s =
        unsafe { proxmmr_estimator_predict(est, a.as_ptr(), a.as_ptr(), 3, small.as_mut_ptr(), 2) };
    assert_eq!(s, ProxmmrStatus::Dimension);

    let (p, t) = ([1.0, 2.0], [1.0, 4.0]);
    let mut v = 0.0;
    assert_eq!(
        unsafe { proxmmr_c_mse(p.as_ptr(), t.as_ptr(), 2, &mut v) },
        ProxmmrStatus::Ok
    );
    assert_eq!(v, 2.0);
    unsafe {
        proxmmr_estimator_free(est);
        proxmmr_dataset_free(data);
    }
}

#[test]
fn truth_matches_core_library() {
    let grid = [15.0, 25.0];
    let mut out = [0.0; 2];
    let s = unsafe { proxmmr_demand_truth(grid.as_ptr(), 2, 500, 11, 1.0, out.as_mut_ptr(), 2) };
    assert_eq!(s, ProxmmrStatus::Ok);
    let g = proxmmr::tensor::Tensor::column(grid.to_vec());
    let expect = proxmmr::scm::demand_ground_truth(&g, 500, 11, 1.0).unwrap();
    assert_eq!(out.to_vec(), expect.values.data().to_vec());
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(proxmmr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
