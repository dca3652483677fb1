//! Python bindings for the parameter-free network workbench.

use pyo3::prelude::*;

#[pymodule]
#[pyo3(name = "pfnet")]
fn pfnet_module(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
