use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<R>(f: impl for<'py> FnOnce(Python<'py>, &Bound<'py, PyDict>) -> PyResult<R>) -> R {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(itcfn_py::itcfn_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("m", m)?;
        f(py, &globals)
    })
    .unwrap()
}

fn eval<'py>(py: Python<'py>, globals: &Bound<'py, PyDict>, expr: &str) -> PyResult<Bound<'py, PyAny>> {
    py.eval(&std::ffi::CString::new(expr).unwrap(), Some(globals), None)
}

#[test]
fn metrics_and_losses_through_python() {
    with_module(|py, g| {
        assert_eq!(eval(py, g, "m.auc([0.1, 0.9, 0.2, 0.8], [0, 1, 0, 1])")?.extract::<f64>()?, 1.0);
        let acc: f64 = eval(py, g, "m.confusion_metrics([0.9, 0.1, 0.4], [1, 0, 1])['acc']")?.extract()?;
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        let focal: f64 = eval(py, g, "m.focal_loss([0.3, 0.8], [0, 1], gamma=0.0)")?.extract()?;
        assert!((focal + ((0.7f64).ln() + (0.8f64).ln()) / 2.0).abs() < 1e-9);
        assert_eq!(eval(py, g, "m.triple_loss(1.0, 3.0, 5.0, 0.0)")?.extract::<f64>()?, 5.0);
        let (_, idx): (Vec<Vec<f32>>, Vec<usize>) =
            eval(py, g, "m.quantize([[0.0, 0.0], [1.0, 1.0]], [[0.9, 0.8], [0.1, -0.2]])")?.extract()?;
        assert_eq!(idx, [1, 0]);
        Ok(())
    });
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(|py, g| {
        let err = eval(py, g, "m.auc([0.1, 0.2], [1, 1])").unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py), "{err}");
        let err = eval(py, g, "m.RunConfig('[cohort]\\nmissing_pet_rate = 1.5\\n')").unwrap_err();
        assert!(err.to_string().contains("missing_pet_rate"), "{err}");
        let err = eval(py, g, "m.Cohort.load('/nonexistent/cohort')").unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyOSError>(py), "{err}");
        Ok(())
    });
}

#[test]
fn config_setters_validate() {
    with_module(|py, g| {
        let cfg = eval(py, g, "m.RunConfig()")?;
        let hash: String = cfg.call_method0("hash")?.extract()?;
        assert!(cfg.setattr("missing_pet_rate", 2.0).is_err());
        assert_eq!(cfg.call_method0("hash")?.extract::<String>()?, hash);
        cfg.setattr("missing_pet_rate", 0.5)?;
        assert_ne!(cfg.call_method0("hash")?.extract::<String>()?, hash);
        Ok(())
    });
}
