//! Quadrature rules: Gauss–Legendre nodes for space, composite Newton–Cotes
//! weights for uniform time grids.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[a, b]` with `n` points.
///
/// Nodes come from Newton iteration on the three-term Legendre recurrence,
/// started from the Chebyshev-like asymptotic guess.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_legendre needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = (b - a) / 2.0;
    let mid = (b + a) / 2.0;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = mid - half * z;
        nodes[n - 1 - i] = mid + half * z;
        weights[i] = half * w;
        weights[n - 1 - i] = half * w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Weights for integrating over `intervals` uniform steps of width `dt`.
///
/// Even counts use composite Simpson; odd counts ≥ 3 use Simpson on the
/// leading part and the 3/8 rule on the last three intervals; a single
/// interval falls back to the trapezoid rule.
pub fn simpson_weights(intervals: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![0.0; intervals + 1];
    match intervals {
        0 => {}
        1 => {
            w[0] = dt / 2.0;
            w[1] = dt / 2.0;
        }
        n if n % 2 == 0 => add_simpson(&mut w, 0, n, dt),
        n => {
            add_simpson(&mut w, 0, n - 3, dt);
            let c = 3.0 * dt / 8.0;
            w[n - 3] += c;
            w[n - 2] += 3.0 * c;
            w[n - 1] += 3.0 * c;
            w[n] += c;
        }
    }
    w
}

fn add_simpson(w: &mut [f64], start: usize, intervals: usize, dt: f64) {
    if intervals == 0 {
        return;
    }
    let c = dt / 3.0;
    for k in 0..intervals / 2 {
        let i = start + 2 * k;
        w[i] += c;
        w[i + 1] += 4.0 * c;
        w[i + 2] += c;
    }
}

/// Composite Simpson integral of `f` over `[a, b]` with `intervals` (rounded up to even) steps.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let dt = (b - a) / n as f64;
    simpson_weights(n, dt)
        .iter()
        .enumerate()
        .map(|(i, w)| w * f(a + i as f64 * dt))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(5, 0.0, 2.0);
        // degree 9 is the exactness limit for 5 points
        let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(9)).sum();
        assert!((approx - 2f64.powi(10) / 10.0).abs() < 1e-11);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_legendre_nodes_are_sorted_and_symmetric() {
        let (x, _) = gauss_legendre(8, -1.0, 1.0);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
        for i in 0..4 {
            assert!((x[i] + x[7 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn simpson_weights_cover_all_parities() {
        for n in 1..9 {
            let dt = 0.25;
            let w = simpson_weights(n, dt);
            let total: f64 = w.iter().sum();
            assert!((total - n as f64 * dt).abs() < 1e-14, "n = {n}");
            // cubic exactness for n >= 2
            if n >= 2 {
                let cubic: f64 = w
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * (i as f64 * dt).powi(3))
                    .sum();
                let exact = (n as f64 * dt).powi(4) / 4.0;
                assert!((cubic - exact).abs() < 1e-13, "n = {n}");
            }
        }
        assert_eq!(simpson_weights(0, 1.0), vec![0.0]);
    }

    #[test]
    fn simpson_integrates_cosine() {
        let v = simpson(f64::cos, 0.0, PI / 2.0, 200);
        assert!((v - 1.0).abs() < 1e-10);
    }
}
