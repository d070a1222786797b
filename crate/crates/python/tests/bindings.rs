use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(nexp::nexp)(py);
        let globals = PyDict::new(py);
        globals.set_item("nexp", m).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        py.run(&code, Some(&globals), None)
            .unwrap_or_else(|e| panic!("python error: {e}"));
    });
}

#[test]
fn classical_merton_from_python() {
    run("frac, rho = nexp.classical_merton(0.08, 0.02, 0.2, 0.5)\nassert abs(frac - 3.0) < 1e-12, frac");
}

#[test]
fn hjb_policy_is_cautious_from_python() {
    run(concat!(
        "w, v, pi = nexp.solve_hjb(0.08, 0.02, 0.2, 0.5, 0.5, intervals=60)\n",
        "assert len(w) == len(v) == len(pi) == 61\n",
        "assert all(p < 3.0 for p in pi[1:-1])\n",
        "assert all(a < b for a, b in zip(w, w[1:]))\n",
    ));
}

#[test]
fn entropic_values_from_python() {
    run(concat!(
        "y0, oracle = nexp.entropic_y0(1.0, paths=20000, steps=10, seed=3)\n",
        "assert abs(y0 + 0.5) < 0.02 and abs(oracle + 0.5) < 0.03, (y0, oracle)\n",
        "assert abs(nexp.entropic_oracle([0.0, 0.0], 2.0)) < 1e-15\n",
        "assert abs(nexp.wasserstein2([0.0, 1.0], [1.0, 2.0]) - 1.0) < 1e-12\n",
    ));
}

#[test]
fn invalid_input_raises_value_error() {
    run(concat!(
        "try:\n",
        "    nexp.classical_merton(0.08, 0.02, -0.2, 0.5)\n",
        "    raise AssertionError('expected ValueError')\n",
        "except ValueError:\n",
        "    pass\n",
    ));
}
