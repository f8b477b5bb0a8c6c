//! Linear-interpolation quantile with its derivative in `q`.

use crate::error::{MasonError, Result};

/// Quantile value together with its derivative with respect to `q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantileValue {
    pub value: f64,
    /// `d value / d q`, treating the data as constants.
    pub grad: f64,
}

/// Quantile of `values` at level `q`, interpolating linearly between the
/// order statistics around rank `(n - 1) * q`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    quantile_with_grad(values, q).map(|v| v.value)
}

pub fn quantile_with_grad(values: &[f64], q: f64) -> Result<QuantileValue> {
    check_level(q)?;
    if values.is_empty() {
        return Err(MasonError::EmptyInput(
            "quantile of an empty sequence".into(),
        ));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(MasonError::OutOfRange(format!(
            "quantile input contains non-finite value {bad}"
        )));
    }
    let mut buf = values.to_vec();
    Ok(quantile_in_place(&mut buf, q))
}

pub(crate) fn check_level(q: f64) -> Result<()> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(MasonError::OutOfRange(format!(
            "quantile level {q} outside [0, 1]"
        )))
    }
}

/// Selection-based quantile; reorders `buf`. Caller guarantees a non-empty,
/// finite buffer and `q` in `[0, 1]`.
pub(crate) fn quantile_in_place(buf: &mut [f64], q: f64) -> QuantileValue {
    let n = buf.len();
    debug_assert!(n > 0);
    let rank = (n - 1) as f64 * q;
    let lo = (rank.floor() as usize).min(n - 1);
    let frac = rank - lo as f64;
    let (_, lo_val, upper) = buf.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_val = *lo_val;
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    if !hi_val.is_finite() {
        // lo is the last order statistic
        return QuantileValue {
            value: lo_val,
            grad: 0.0,
        };
    }
    let gap = hi_val - lo_val;
    QuantileValue {
        value: lo_val + frac * gap,
        grad: (n - 1) as f64 * gap,
    }
}
