use super::Elem;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

/// Fan-in-scaled uniform init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
/// Elements are drawn in row-major order so initialization is reproducible
/// for a given RNG stream.
pub fn fan_in_uniform<E: Elem, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<E> {
    let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data length")
}

pub fn zeros<E: Elem>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::zeros(IxDyn(shape))
}
