use rand::Rng;

use super::tensor::Tensor;

/// Glorot-uniform weight matrix of shape `[fan_in, fan_out]`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    scaled_uniform(rng, fan_in, fan_out, limit)
}

/// Uniform matrix in `[-limit, limit]`.
pub fn scaled_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("uniform shape")
}
