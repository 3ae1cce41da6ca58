use rand::Rng;

use crate::array::Array;
use crate::error::{NumError, Result};

/// Glorot/Xavier uniform init: `U(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))`
/// with `fan_in = rows`, `fan_out = cols`.
pub fn xavier_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Array> {
    if rows == 0 || cols == 0 {
        return Err(NumError::InvalidArgument(format!(
            "xavier_init needs non-zero fans, got ({rows}, {cols})"
        )));
    }
    let limit = xavier_limit(rows, cols);
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Array::from_vec(rows, cols, data)
}

pub fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
