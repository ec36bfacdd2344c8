//! Shapiro–Wilk W test, Royston's AS R94 approximation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample the approximation is calibrated for.
pub const SHAPIRO_MAX_N: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapiroResult {
    pub w: f64,
    pub p: f64,
    /// Observations actually tested.
    pub n: usize,
    /// True when the input exceeded [`SHAPIRO_MAX_N`] and was subsampled.
    pub subsampled: bool,
}

/// c[0] + c[1]·x + … + c[k−1]·x^{k−1}.
fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
const G: [f64; 2] = [-2.273, 0.459];

/// Half of the antisymmetric coefficient vector, a_1 ≥ a_2 ≥ … (largest first).
fn coefficients(n: usize) -> Vec<f64> {
    let nn2 = n / 2;
    if n == 3 {
        return vec![std::f64::consts::FRAC_1_SQRT_2];
    }
    let std = Normal::standard();
    let an = n as f64;
    let m: Vec<f64> = (1..=nn2)
        .map(|i| std.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
        .collect();
    let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
    let ssumm2 = summ2.sqrt();
    let rsn = 1.0 / an.sqrt();
    let a1 = poly(&C1, rsn) - m[0] / ssumm2;

    let mut a: Vec<f64> = m.clone();
    let (first, fac) = if n > 5 {
        let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
        let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
        a[1] = a2;
        (2, fac)
    } else {
        let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
        (1, fac)
    };
    a[0] = a1;
    for v in &mut a[first..] {
        *v /= -fac;
    }
    a
}

/// W statistic and p-value. Samples above 5000 are reduced to a seeded
/// uniform subsample of 5000 first.
pub fn shapiro_wilk(x: &[f64], seed: u64) -> Result<ShapiroResult> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Insufficient("Shapiro–Wilk input contains non-finite values".into()));
    }
    let (mut v, subsampled) = if x.len() > SHAPIRO_MAX_N {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, x.len(), SHAPIRO_MAX_N).into_vec();
        idx.sort_unstable();
        (idx.into_iter().map(|i| x[i]).collect::<Vec<_>>(), true)
    } else {
        (x.to_vec(), false)
    };
    let n = v.len();
    if n < 3 {
        return Err(Error::Insufficient(format!("Shapiro–Wilk needs n ≥ 3, got {n}")));
    }
    v.sort_by(f64::total_cmp);
    let range = v[n - 1] - v[0];
    if !(range > 0.0) {
        return Err(Error::Insufficient("Shapiro–Wilk input has zero variance".into()));
    }

    let half = coefficients(n);
    // Full antisymmetric coefficient vector in sample order.
    let coef = |i: usize| -> f64 {
        let j = n - 1 - i;
        match i.cmp(&j) {
            std::cmp::Ordering::Less => -half[i],
            std::cmp::Ordering::Greater => half[j],
            std::cmp::Ordering::Equal => 0.0,
        }
    };
    let xs: Vec<f64> = v.iter().map(|x| x / range).collect();
    let sx = xs.iter().sum::<f64>() / n as f64;
    let sa = (0..n).map(coef).sum::<f64>() / n as f64;
    let (mut ssa, mut ssx, mut sax) = (0.0, 0.0, 0.0);
    for (i, x) in xs.iter().enumerate() {
        let asa = coef(i) - sa;
        let xsx = x - sx;
        ssa += asa * asa;
        ssx += xsx * xsx;
        sax += asa * xsx;
    }
    // 1 − W computed directly to keep precision when W is close to 1.
    let ssassx = (ssa * ssx).sqrt();
    let w1 = (ssassx - sax) * (ssassx + sax) / (ssa * ssx);
    let w = 1.0 - w1;

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::FRAC_PI_3;
        (pi6 * (w.sqrt().asin() - stqr)).max(0.0)
    } else {
        let an = n as f64;
        let mut y = w1.ln();
        let (m, s) = if n <= 11 {
            let gamma = poly(&G, an);
            if y >= gamma {
                return Ok(ShapiroResult { w, p: 1e-99, n, subsampled });
            }
            y = -(gamma - y).ln();
            (poly(&C3, an), poly(&C4, an).exp())
        } else {
            let ln = an.ln();
            (poly(&C5, ln), poly(&C6, ln).exp())
        };
        Normal::new(m, s).expect("positive scale").sf(y)
    };
    Ok(ShapiroResult { w, p: p.clamp(0.0, 1.0), n, subsampled })
}
