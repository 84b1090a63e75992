//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

/// Monotone least squares by exhaustive search over contiguous partitions of
/// points sorted by value: every block takes its mean, partitions whose means
/// decrease are discarded, the smallest squared error wins.
pub fn brute_force_isotonic(ys: &[f64]) -> Vec<f64> {
    let n = ys.len();
    let mut best = (f64::INFINITY, Vec::new());
    for cuts in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut ok = true;
        for i in 0..n {
            if i == n - 1 || cuts & (1 << i) != 0 {
                let block = &ys[start..=i];
                let mean = block.iter().sum::<f64>() / block.len() as f64;
                if mean < prev - 1e-15 {
                    ok = false;
                    break;
                }
                prev = mean;
                fit.extend(std::iter::repeat_n(mean, block.len()));
                start = i + 1;
            }
        }
        if ok {
            let sse: f64 = fit.iter().zip(ys).map(|(f, y)| (f - y).powi(2)).sum();
            if sse < best.0 - 1e-15 {
                best = (sse, fit);
            }
        }
    }
    best.1
}

/// Composite Simpson integral of `f` over [a, b] with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}
