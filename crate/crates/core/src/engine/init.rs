use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Shape5, Tensor5};

/// Convolution-style parameters: kernel plus one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor5,
    pub bias: Vec<f64>,
}

/// Glorot-uniform bound sqrt(6 / (fan_in + fan_out)) for a kernel laid out
/// (out, in, kd, kh, kw).
pub fn xavier_bound(shape: Shape5) -> f64 {
    let [o, i, kd, kh, kw] = shape.0;
    let receptive = (kd * kh * kw) as f64;
    let fan_in = i as f64 * receptive;
    let fan_out = o as f64 * receptive;
    (6.0 / (fan_in + fan_out)).sqrt()
}

/// Uniform Glorot initialization, zero bias, deterministic in `seed`.
pub fn xavier_init(shape: Shape5, seed: u64) -> ConvParams {
    let bound = xavier_bound(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-bound, bound);
    let data: Vec<f64> = (0..shape.numel()).map(|_| dist.sample(&mut rng)).collect();
    ConvParams {
        weight: Tensor5::from_vec(shape, data).expect("length matches shape"),
        bias: vec![0.0; shape.0[0]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits() {
        let s = Shape5::new(8, 4, 3, 3, 3);
        let a = xavier_init(s, 42);
        let b = xavier_init(s, 42);
        assert_eq!(a, b);
        assert_ne!(a, xavier_init(s, 43));
        assert!(a.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn samples_stay_in_bound() {
        let s = Shape5::new(5, 7, 3, 3, 3);
        let bound = xavier_bound(s);
        assert!(xavier_init(s, 1).weight.data().iter().all(|v| v.abs() <= bound));
    }
}
