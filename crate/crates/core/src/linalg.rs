//! Row-wise helpers shared by the loss, metrics and search modules.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Tolerance on `‖row‖ - 1` for inputs that must be unit-norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

/// Plain left-to-right dot product. Every similarity in the crate goes through
/// this so that independently computed scores compare bit-exactly.
#[inline]
pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

pub fn check_unit_rows(m: ArrayView2<f64>) -> Result<()> {
    for (row, r) in m.rows().into_iter().enumerate() {
        let norm = norm(r);
        if norm.is_nan() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Unnormalized { row, norm });
        }
    }
    Ok(())
}

/// Rows whose norm is within this of one are treated as already unit and left
/// bit-identical, which makes normalization idempotent.
const ALREADY_UNIT: f64 = 1e-12;

/// Scales every row to unit length. Rows with a non-finite entry or zero norm
/// are reported by index.
pub fn normalize_rows(mut m: Array2<f64>) -> std::result::Result<Array2<f64>, usize> {
    for (i, mut r) in m.rows_mut().into_iter().enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(i);
        }
        let n = norm(r.view());
        if n == 0.0 || !n.is_finite() {
            return Err(i);
        }
        if (n - 1.0).abs() > ALREADY_UNIT {
            r.mapv_inplace(|v| v / n);
        }
    }
    Ok(m)
}

pub fn to_f32(m: &Array2<f64>) -> Array2<f32> {
    m.mapv(|v| v as f32)
}

pub fn to_f64(m: &Array2<f32>) -> Array2<f64> {
    m.mapv(f64::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalizes_and_flags_bad_rows() {
        let m = normalize_rows(array![[3.0, 4.0], [0.0, 2.0]]).unwrap();
        assert_eq!(m, array![[0.6, 0.8], [0.0, 1.0]]);
        assert_eq!(normalize_rows(array![[1.0, 0.0], [0.0, 0.0]]), Err(1));
        assert_eq!(normalize_rows(array![[f64::NAN, 0.0]]), Err(0));
    }

    #[test]
    fn unit_rows_are_left_untouched() {
        let m = array![[1.0, 0.0], [0.0, -1.0]];
        assert_eq!(normalize_rows(m.clone()).unwrap(), m);
        assert!(check_unit_rows(m.view()).is_ok());
        assert!(matches!(
            check_unit_rows(array![[1.0, 0.0], [0.0, 1.1]].view()),
            Err(Error::Unnormalized { row: 1, .. })
        ));
    }
}
