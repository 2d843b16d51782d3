use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyModule>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "irra_py").unwrap();
        irra_py::register(&m).unwrap();
        f(py, &m);
    });
}

#[test]
fn sdm_loss_of_one_pair_is_near_zero() {
    with_module(|_, m| {
        let v: f64 = m
            .getattr("sdm_loss")
            .unwrap()
            .call1((vec![vec![1.0, 2.0]], vec![vec![0.5, -1.0]], vec![0usize]))
            .unwrap()
            .extract()
            .unwrap();
        assert!(v.abs() < 1e-7, "{v}");
    });
}

#[test]
fn similarity_evaluation_returns_a_report_dict() {
    with_module(|_, m| {
        let sim = vec![vec![0.9, 0.8, 0.7, 0.6]];
        let report = m
            .getattr("evaluate_similarity")
            .unwrap()
            .call1((sim, vec![1usize], vec![0usize, 1, 0, 1]))
            .unwrap();
        let report = report.cast::<PyDict>().unwrap();
        let map: f64 = report.get_item("mAP").unwrap().unwrap().extract().unwrap();
        assert_eq!(map, 0.5);
    });
}

#[test]
fn bad_inputs_raise_python_errors() {
    with_module(|py, m| {
        let ragged = m
            .getattr("sdm_loss")
            .unwrap()
            .call1((vec![vec![1.0, 2.0], vec![1.0]], vec![vec![0.5, -1.0]], vec![0usize]))
            .unwrap_err();
        assert!(ragged.is_instance_of::<pyo3::exceptions::PyValueError>(py));
        let missing = m.getattr("Dataset").unwrap().call_method1("load", ("/nonexistent/dataset",)).unwrap_err();
        assert!(missing.is_instance_of::<pyo3::exceptions::PyIOError>(py));
        let config = m.getattr("TrainConfig").unwrap().call0().unwrap();
        let bad = config.call_method1("with_overrides", (vec!["fusion.depth=3"],)).unwrap_err();
        assert!(bad.is_instance_of::<pyo3::exceptions::PyValueError>(py));
    });
}

#[test]
fn synthetic_dataset_round_trips_through_python() {
    with_module(|_, m| {
        let ds = m.getattr("generate_synthetic").unwrap().call1((4usize, 2usize, 2usize, 9u64)).unwrap();
        assert_eq!(ds.len().unwrap(), 8);
        let val: usize = ds.call_method1("count", ("val",)).unwrap().extract().unwrap();
        assert_eq!(val, 4);
        let dir = tempfile::tempdir().unwrap();
        ds.call_method1("save", (dir.path(),)).unwrap();
        let back = m.getattr("Dataset").unwrap().call_method1("load", (dir.path(),)).unwrap();
        let a: Vec<(usize, String)> = ds.call_method1("captions", ("train",)).unwrap().extract().unwrap();
        let b: Vec<(usize, String)> = back.call_method1("captions", ("train",)).unwrap().extract().unwrap();
        assert_eq!(a, b);
    });
}
