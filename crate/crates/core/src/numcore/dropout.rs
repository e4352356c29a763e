use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::rng::stream;
use crate::numcore::tensor::Tensor;

/// Inverted-dropout keep mask: each entry is `1/(1-rate)` with probability
/// `1-rate` and `0` otherwise. Fully determined by `seed`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::validation(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(Tensor::filled(rows, cols, 1.0));
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut rng = stream(seed, &[0x6472_6f70]);
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect();
    Ok(Tensor::matrix(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let m = dropout_mask(3, 4, 0.0, 9).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rate_one_is_rejected() {
        assert!(dropout_mask(2, 2, 1.0, 0).is_err());
        assert!(dropout_mask(2, 2, -0.1, 0).is_err());
    }

    #[test]
    fn seeds_control_the_draw() {
        let a = dropout_mask(8, 8, 0.5, 1).unwrap();
        let b = dropout_mask(8, 8, 0.5, 1).unwrap();
        let c = dropout_mask(8, 8, 0.5, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn keep_fraction_matches_rate() {
        // Monte-Carlo: 1e5 Bernoulli draws, sd of the mean is ~0.0016.
        for &rate in &[0.1, 0.5, 0.8] {
            let m = dropout_mask(1000, 100, rate, 42).unwrap();
            let kept = m.data().iter().filter(|&&v| v > 0.0).count() as f64 / 1e5;
            assert!((kept - (1.0 - rate)).abs() < 0.01, "rate {rate}: kept {kept}");
            let scaled = m.data().iter().find(|&&v| v > 0.0).copied().unwrap();
            assert!((scaled - 1.0 / (1.0 - rate)).abs() < 1e-12);
        }
    }
}
