//! Small dense-vector helpers. Storage is `f32`, accumulation is `f64`.

/// Dot product with 64-bit accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Rows whose norm is already within this distance of 1 are left untouched,
/// which makes normalization idempotent bit-for-bit.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Scales `v` to unit L2 norm. Returns `false` if `v` has zero norm.
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    if (n - 1.0).abs() <= UNIT_TOLERANCE {
        return true;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
    true
}

pub fn normalize_f64(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_is_idempotent() {
        let mut v = vec![3.0f32, 4.0, 12.0];
        assert!(normalize_in_place(&mut v));
        let once = v.clone();
        assert!(normalize_in_place(&mut v));
        assert_eq!(once, v);
        assert!((norm(&v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert!(!normalize_in_place(&mut [0.0f32; 4]));
    }
}
