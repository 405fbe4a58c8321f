//! Closed-form risk constants the experiments are compared against.

/// Exact minimax risk `sigma^2 d (d-1) / (2 n p)` for O(d) and SO(d).
pub fn minimax_risk(n: usize, d: usize, p: f64, sigma: f64) -> f64 {
    sigma * sigma * (d * (d - 1)) as f64 / (2.0 * n as f64 * p)
}

/// The cruder `sigma^2 d^2 / (n p)` obtained by bounding the whole noise
/// matrix rather than its skew-symmetric part.
pub fn naive_risk(n: usize, d: usize, p: f64, sigma: f64) -> f64 {
    sigma * sigma * (d * d) as f64 / (n as f64 * p)
}

/// `Tr(F B2^{-1} F^T) = sigma^2 d (d-1) / ((n-2) p)`.
pub fn information_identity(n: usize, d: usize, p: f64, sigma: f64) -> f64 {
    sigma * sigma * (d * (d - 1)) as f64 / ((n as f64 - 2.0) * p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert!((minimax_risk(1000, 3, 1.0, 1.0) - 0.003).abs() < 1e-15);
        assert!((minimax_risk(2000, 3, 1.0, 1.0) - 0.0015).abs() < 1e-15);
        assert!((naive_risk(2000, 3, 1.0, 1.0) - 0.0045).abs() < 1e-15);
        assert!((information_identity(100, 3, 0.5, 1.0) - 6.0 / 49.0).abs() < 1e-15);
        // naive / optimal = 2d / (d - 1)
        let r = naive_risk(500, 3, 0.4, 0.7) / minimax_risk(500, 3, 0.4, 0.7);
        assert!((r - 3.0).abs() < 1e-12);
    }
}
