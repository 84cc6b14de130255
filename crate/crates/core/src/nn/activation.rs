use super::{Scalar, Tensor4};

/// Elementwise `max(0, x)`.
pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Passes `dy` where the forward input was positive; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::ZERO {
            *d = T::ZERO;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-2.0f64, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn all_negative_input_blocks_gradient() {
        let x = Tensor4::from_vec([1, 2, 2, 2], vec![-1.0f64; 8]).unwrap();
        let dy = Tensor4::from_vec([1, 2, 2, 2], vec![1.0; 8]).unwrap();
        assert!(relu(&x).data().iter().all(|v| *v == 0.0));
        assert!(relu_backward(&x, &dy).data().iter().all(|v| *v == 0.0));
    }
}
