//! Adaptive Gauss–Kronrod (7/15) quadrature.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Kronrod estimate and error estimate on `[a, b]`.
fn gk15(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for k in 0..7 {
        let dx = h * XGK[k];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[k] * s;
        if k % 2 == 1 {
            gauss += WG[k / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// `∫_a^b f` to absolute tolerance `tol` by bisection of the worst interval.
pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut parts = vec![(a, b, gk15(&mut f, a, b))];
    for _ in 0..2000 {
        let (total, err) = parts.iter().fold((0.0, 0.0), |(s, e), p| (s + p.2 .0, e + p.2 .1));
        if !total.is_finite() {
            return Err(Error::domain("integrand is not finite"));
        }
        if err <= tol {
            return Ok(total);
        }
        let worst = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .map(|(i, _)| i)
            .expect("nonempty");
        let (lo, hi, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(total);
        }
        parts.push((lo, mid, gk15(&mut f, lo, mid)));
        parts.push((mid, hi, gk15(&mut f, mid, hi)));
    }
    let err = parts.iter().map(|p| p.2 .1).sum::<f64>();
    Err(Error::NotConverged { iterations: 2000, residual: err, context: "adaptive quadrature".into() })
}

/// `∫_0^∞ f` via `t = s / (1 - s)`.
pub fn integrate_half_line(mut f: impl FnMut(f64) -> f64, tol: f64) -> Result<f64> {
    integrate(
        |s| {
            if s >= 1.0 {
                return 0.0;
            }
            let t = s / (1.0 - s);
            let v = f(t);
            if v == 0.0 {
                0.0
            } else {
                v / ((1.0 - s) * (1.0 - s))
            }
        },
        0.0,
        1.0,
        tol,
    )
}
