//! Closed-form real roots of polynomials up to degree three.
//!
//! Coefficients are in ascending order: `c[0] + c[1] t + c[2] t² + c[3] t³`.

/// Real roots of `c[0] + c[1] t + ... ` for degree ≤ 3, sorted ascending.
/// Leading coefficients that are exactly zero lower the degree.
pub fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let mut c = coeffs.to_vec();
    while c.len() > 1 && *c.last().unwrap() == 0.0 {
        c.pop();
    }
    let mut roots = match c.len() {
        0 | 1 => Vec::new(),
        2 => vec![-c[0] / c[1]],
        3 => quadratic(c[0], c[1], c[2]),
        4 => cubic(c[0], c[1], c[2], c[3]),
        n => panic!("real_roots supports degree <= 3, got degree {}", n - 1),
    };
    for r in roots.iter_mut() {
        *r = polish(&c, *r);
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots
}

/// Evaluate by Horner's rule.
pub fn eval(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

/// Coefficients of the derivative.
pub fn derivative(coeffs: &[f64]) -> Vec<f64> {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, &c)| i as f64 * c)
        .collect()
}

fn quadratic(c0: f64, c1: f64, c2: f64) -> Vec<f64> {
    let disc = c1 * c1 - 4.0 * c2 * c0;
    if disc < 0.0 {
        return Vec::new();
    }
    if disc == 0.0 {
        return vec![-c1 / (2.0 * c2)];
    }
    // avoid cancellation between −c1 and √disc
    let q = -0.5 * (c1 + c1.signum_or_one() * disc.sqrt());
    let mut out = vec![q / c2];
    if q != 0.0 {
        out.push(c0 / q);
    } else {
        out.push(0.0);
    }
    out
}

fn cubic(c0: f64, c1: f64, c2: f64, c3: f64) -> Vec<f64> {
    use std::f64::consts::PI;
    let a = c2 / c3;
    let b = c1 / c3;
    let c = c0 / c3;
    // t = y − a/3 gives y³ + p y + q = 0
    let shift = a / 3.0;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    let scale = 1.0 + a.abs().max(b.abs()).max(c.abs());
    // relative to the two terms that cancel in the discriminant
    let magnitude = (q / 2.0).powi(2) + (p / 3.0).abs().powi(3);
    if disc.abs() <= 1e-12 * magnitude {
        // repeated root
        if p.abs() <= 1e-14 * scale {
            return vec![-shift];
        }
        let y1 = 3.0 * q / p;
        let y2 = -1.5 * q / p;
        return vec![y1 - shift, y2 - shift];
    }
    if disc > 0.0 {
        let sq = disc.sqrt();
        let u = (-q / 2.0 + sq).cbrt();
        let v = (-q / 2.0 - sq).cbrt();
        vec![u + v - shift]
    } else {
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (theta - 2.0 * PI * k as f64 / 3.0).cos() - shift)
            .collect()
    }
}

/// A few Newton steps; keeps the original root if they do not help.
fn polish(coeffs: &[f64], root: f64) -> f64 {
    let d = derivative(coeffs);
    let mut best = root;
    let mut best_res = eval(coeffs, root).abs();
    let mut t = root;
    for _ in 0..4 {
        let slope = eval(&d, t);
        if slope == 0.0 {
            break;
        }
        t -= eval(coeffs, t) / slope;
        let res = eval(coeffs, t).abs();
        if res < best_res {
            best = t;
            best_res = res;
        }
    }
    best
}

trait SignumOrOne {
    fn signum_or_one(self) -> f64;
}

impl SignumOrOne for f64 {
    fn signum_or_one(self) -> f64 {
        if self < 0.0 {
            -1.0
        } else {
            1.0
        }
    }
}
