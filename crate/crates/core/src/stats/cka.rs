use ndarray::{ArrayView2, Axis};

use crate::error::{Error, Result};

/// Linear CKA of two representations of the same `n` items:
/// `‖XᵀY‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F)` after column centering.
pub fn linear_cka(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Insufficient("CKA needs at least 2 rows".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CKA input".into()));
    }
    let xc = &x - &x.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
    let yc = &y - &y.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
    let fro2 = |m: &ndarray::Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let xx = fro2(&xc.t().dot(&xc)).sqrt();
    let yy = fro2(&yc.t().dot(&yc)).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::DegenerateFeature(
            "CKA input has zero variance".into(),
        ));
    }
    let xy = fro2(&xc.t().dot(&yc));
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}
