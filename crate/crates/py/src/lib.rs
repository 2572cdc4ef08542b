use pyo3::prelude::*;

#[pymodule]
fn promptdial_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
