use super::tensor::Tensor5;
use crate::error::Result;

pub fn relu(input: &Tensor5) -> Tensor5 {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor5, grad_out: &Tensor5) -> Result<Tensor5> {
    grad_out.expect_shape(input.shape(), "relu backward")?;
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tensor::Shape5;

    #[test]
    fn clamps_negatives_and_zero_gradient() {
        let x = Tensor5::from_vec(Shape5::new(1, 1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor5::full(x.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_negative_is_dead() {
        let x = Tensor5::full(Shape5::new(1, 2, 2, 2, 2), -0.25);
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
        let g = relu_backward(&x, &Tensor5::full(x.shape(), 3.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
