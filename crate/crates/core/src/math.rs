//! Small numeric kernels shared by scoring and training.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function, evaluated without overflow for large |z|.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(z) = -ln(1 + e^{-z})`.
#[inline]
pub fn ln_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Normalizes `logits` into a probability vector in place, subtracting the
/// maximum first.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in logits.iter_mut() {
        *x /= total;
    }
}

/// `ln sum exp(x)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Formats `v` with `digits` significant digits, switching to exponent
/// notation for very small or large magnitudes.
pub fn format_sig(v: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if exp < -4 || exp >= digits as i32 {
        format!("{:.*e}", digits - 1, v)
    } else {
        format!("{:.*}", (digits as i32 - 1 - exp) as usize, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig(0.17, 6), "0.170000");
        assert_eq!(format_sig(123.456789, 6), "123.457");
        assert_eq!(format_sig(-2.5e-7, 6), "-2.50000e-7");
        assert_eq!(format_sig(1234567.0, 6), "1.23457e6");
        assert_eq!(format_sig(0.0, 6), "0");
    }

    #[test]
    fn sigmoid_branches_agree() {
        for z in [-40.0, -3.0, -1e-9, 0.0, 1e-9, 2.5, 40.0] {
            let naive = 1.0 / (1.0 + (-z as f64).exp());
            assert!((sigmoid(z) - naive).abs() < 1e-15);
            assert!((ln_sigmoid(z) - naive.ln()).abs() < 1e-12);
        }
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!(ln_sigmoid(-1000.0).is_finite());
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut v = [1000.0, 1000.0, 999.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((v[0] - v[1]).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
