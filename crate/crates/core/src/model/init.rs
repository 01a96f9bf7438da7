use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Normal(0, std) samples, redrawn until they fall within two standard deviations.
pub fn truncated_normal(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn stddev_of_256_square_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = truncated_normal(256 * 256, 0.02, &mut rng);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((0.015..=0.025).contains(&sd), "sd = {sd}");
        assert!(v.iter().all(|x| x.abs() <= 0.04));
    }
}
