//! Flop-count models for one IEKF update with `n` state dimensions and `m`
//! observation rows. Used to pick the per-pass point budget.

/// Covariance (Kalman gain) form, counting each O(k³) inverse as k³.
pub fn kalman_form_cost(n: f64, m: f64) -> f64 {
    6.0 * n * n * m + 2.0 * n * m * m + n * n - 4.0 * m * n + m.powi(3) + n.powi(3)
}

/// Information form, which never inverts an m×m matrix.
pub fn information_form_cost(n: f64, m: f64) -> f64 {
    2.0 * n.powi(3) + 2.0 * n * n * m - n * n
}

/// Smallest row count above which the information form is cheaper.
pub fn crossover_rows(n: usize) -> usize {
    let nf = n as f64;
    (1..).find(|&m| information_form_cost(nf, m as f64) < kalman_form_cost(nf, m as f64)).unwrap_or(0)
}
