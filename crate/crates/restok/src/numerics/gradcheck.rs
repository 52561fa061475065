use super::{Scalar, Tensor};

/// Central-difference gradient of a scalar-valued function, coordinate by
/// coordinate. This is the independent oracle the autodiff engine is
/// validated against; it never touches the tape.
pub fn finite_difference_gradient<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let e = T::from_f64(eps);
    let inv = T::from_f64(1.0 / (2.0 * eps));
    let mut probe = x.clone();
    let mut grad = vec![T::ZERO; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + e;
        let up = f(&probe);
        probe.data_mut()[i] = orig - e;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) * inv;
    }
    Tensor::new(x.shape().to_vec(), grad).expect("shape preserved")
}

/// `max_i |a_i - b_i| / (max_i |b_i| + tiny)`: deviation relative to the
/// reference gradient's scale.
pub fn max_relative_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut max_diff = 0.0f64;
    let mut max_ref = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        max_diff = max_diff.max((x.to_f64() - y.to_f64()).abs());
        max_ref = max_ref.max(y.to_f64().abs());
    }
    max_diff / (max_ref + 1e-12)
}
