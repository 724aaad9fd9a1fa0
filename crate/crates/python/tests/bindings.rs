use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyunifiedface::pyunifiedface;

static INIT: std::sync::Once = std::sync::Once::new();

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyModule>)>(f: F) {
    INIT.call_once(|| {
        pyo3::append_to_inittab!(pyunifiedface);
        pyo3::prepare_freethreaded_python();
    });
    Python::with_gil(|py| {
        let m = py.import("pyunifiedface").unwrap();
        f(py, &m)
    });
}

const TOY: &str = "[model]\nimage_height = 32\nimage_width = 32\nencoder_channels = [8, 8, 16, 16]\nd_t = 16\nnum_heads = 2\nffn_mult = 2\n[model.head]\nemb_dim = 8\nnum_identities = 4\nheatmap_side = 4\n";

#[test]
fn module_round_trip() {
    with_module(|py, m| {
        let flops = m.getattr("count_flops").unwrap().call1((TOY, 2)).unwrap();
        let flops = flops.downcast::<PyDict>().unwrap();
        let part = |k: &str| {
            flops
                .get_item(k)
                .unwrap()
                .unwrap()
                .extract::<u64>()
                .unwrap()
        };
        assert_eq!(
            part("backbone") + part("decoder") + part("heads"),
            part("total")
        );

        let err = m
            .getattr("normalize_config")
            .unwrap()
            .call1(("[model]\nwidth = 3",))
            .unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
        assert!(err.to_string().contains("width"));

        let model = m.getattr("Model").unwrap().call1((TOY, 3)).unwrap();
        let n = 2 * 3 * 32 * 32;
        let out = model.call_method1("forward", (vec![0.5f32; n], 2)).unwrap();
        let out = out.downcast::<PyDict>().unwrap();
        let (shape, values): (Vec<usize>, Vec<f32>) = out
            .get_item("headpose")
            .unwrap()
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(shape, [2, 3, 3]);
        assert_eq!(values.len(), 18);
        assert!(model.call_method1("forward", (vec![0.5f32; 7], 1)).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fxf");
        model.call_method1("save", (path.clone(),)).unwrap();
        let meta = m
            .getattr("inspect_checkpoint")
            .unwrap()
            .call1((path.clone(),))
            .unwrap();
        let digest: String = meta.get_item("digest").unwrap().extract().unwrap();
        assert_eq!(
            digest,
            model
                .getattr("digest")
                .unwrap()
                .extract::<String>()
                .unwrap()
        );
        let kw = PyDict::new(py);
        kw.set_item("checkpoint", path).unwrap();
        let again = m.getattr("Model").unwrap().call((TOY,), Some(&kw)).unwrap();
        let out2 = again.call_method1("forward", (vec![0.5f32; n], 2)).unwrap();
        assert!(out2.eq(out).unwrap());
    });
}
