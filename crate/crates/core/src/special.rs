use std::f64::consts::PI;

/// `Gamma(k / 2)` for a positive integer `k`, from `Gamma(1) = 1`,
/// `Gamma(1/2) = sqrt(pi)` and `Gamma(x + 1) = x Gamma(x)`.
pub fn gamma_half(k: usize) -> f64 {
    assert!(k >= 1, "gamma_half needs k >= 1");
    let (mut x, mut g) = if k % 2 == 0 { (1.0, 1.0) } else { (0.5, PI.sqrt()) };
    while 2.0 * x < k as f64 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Surface area of the unit sphere in `R^d`, `2 pi^{d/2} / Gamma(d/2)`.
pub fn unit_sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma_half(d)
}

#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `P(sup_{t <= T} |W_t| < a)` for a standard Brownian motion, by the
/// reflection (eigenfunction) series truncated after `terms` terms.
pub fn brownian_two_sided_stay(a: f64, t: f64, terms: usize) -> f64 {
    (0..terms)
        .map(|k| {
            let m = (2 * k + 1) as f64;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign / m * (-m * m * PI * PI * t / (8.0 * a * a)).exp()
        })
        .sum::<f64>()
        * 4.0
        / PI
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_areas() {
        assert!((unit_sphere_area(2) - 2.0 * PI).abs() < 1e-14);
        assert!((unit_sphere_area(3) - 4.0 * PI).abs() < 1e-14);
        assert!((unit_sphere_area(4) - 2.0 * PI * PI).abs() < 1e-13);
        assert!((unit_sphere_area(5) - 8.0 * PI * PI / 3.0).abs() < 1e-13);
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_half(2), 1.0);
        assert_eq!(gamma_half(6), 2.0);
        assert!((gamma_half(3) - PI.sqrt() / 2.0).abs() < 1e-15);
        assert!((gamma_half(5) - 0.75 * PI.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn exit_series_converges() {
        let p6 = brownian_two_sided_stay(1.0, 1.0, 6);
        let p20 = brownian_two_sided_stay(1.0, 1.0, 20);
        assert!((p6 - p20).abs() < 1e-15);
        assert!((p6 - 0.370777).abs() < 1e-5);
        // short horizon: almost surely inside
        assert!(brownian_two_sided_stay(1.0, 0.01, 50) > 0.9999);
    }
}
