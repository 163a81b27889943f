//! Weighted descriptive statistics and Gaussian helpers.
//!
//! All accumulations run in input order so results are reproducible
//! bit-for-bit across runs and thread counts.

use crate::num::Scalar;

pub fn mean<T: Scalar>(xs: &[T]) -> T {
    let mut s = T::zero();
    for &x in xs {
        s += x;
    }
    s / T::of(xs.len() as f64)
}

/// Weighted mean sum(w x) / sum(w).
pub fn weighted_mean<T: Scalar>(xs: &[T], w: &[T]) -> T {
    debug_assert_eq!(xs.len(), w.len());
    let mut num = T::zero();
    let mut den = T::zero();
    for (&x, &wi) in xs.iter().zip(w) {
        num += wi * x;
        den += wi;
    }
    num / den
}

/// Weighted maximum-likelihood variance sum(w (x-m)^2) / sum(w).
pub fn weighted_var<T: Scalar>(xs: &[T], w: &[T]) -> T {
    let m = weighted_mean(xs, w);
    let mut num = T::zero();
    let mut den = T::zero();
    for (&x, &wi) in xs.iter().zip(w) {
        let d = x - m;
        num += wi * d * d;
        den += wi;
    }
    num / den
}

pub fn weighted_sd<T: Scalar>(xs: &[T], w: &[T]) -> T {
    weighted_var(xs, w).sqrt()
}

/// Weighted Pearson correlation; `None` when either column has zero
/// weighted variance.
pub fn weighted_pearson<T: Scalar>(xs: &[T], ys: &[T], w: &[T]) -> Option<T> {
    let mx = weighted_mean(xs, w);
    let my = weighted_mean(ys, w);
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for ((&x, &y), &wi) in xs.iter().zip(ys).zip(w) {
        let dx = x - mx;
        let dy = y - my;
        sxy += wi * dx * dy;
        sxx += wi * dx * dx;
        syy += wi * dy * dy;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Kish effective sample size (sum w)^2 / sum(w^2).
pub fn effective_sample_size<T: Scalar>(w: &[T]) -> T {
    let mut s = T::zero();
    let mut s2 = T::zero();
    for &wi in w {
        s += wi;
        s2 += wi * wi;
    }
    s * s / s2
}

/// Weighted quantile with midpoint interpolation between adjacent order
/// statistics; reduces to the usual sample quantile under uniform weights.
pub fn weighted_quantile<T: Scalar>(xs: &[T], w: &[T], q: f64) -> T {
    debug_assert!(!xs.is_empty());
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite values"));

    let total: T = {
        let mut s = T::zero();
        for &wi in w {
            s += wi;
        }
        s
    };
    let target = T::of(q.clamp(0.0, 1.0)) * total;

    // Cumulative midpoints (c_i - w_i/2) define the interpolation knots.
    let mut cum = T::zero();
    let mut prev_knot = T::zero();
    let mut prev_val = xs[order[0]];
    let half = T::of(0.5);
    for (rank, &i) in order.iter().enumerate() {
        let knot = cum + half * w[i];
        if target <= knot || rank == order.len() - 1 {
            if rank == 0 || knot == prev_knot {
                return xs[i];
            }
            let t = (target - prev_knot) / (knot - prev_knot);
            let t = t.max(T::zero()).min(T::one());
            return prev_val + t * (xs[i] - prev_val);
        }
        cum += w[i];
        prev_knot = knot;
        prev_val = xs[i];
    }
    xs[order[order.len() - 1]]
}

pub fn normal_pdf<T: Scalar>(x: T, mean: T, sd: T) -> T {
    let z = (x - mean) / sd;
    let inv_sqrt_2pi = T::of(0.398_942_280_401_432_7);
    inv_sqrt_2pi / sd * (-z * z / T::of(2.0)).exp()
}

pub fn ln_normal_pdf<T: Scalar>(x: T, mean: T, sd: T) -> T {
    let z = (x - mean) / sd;
    T::of(-0.918_938_533_204_672_74) - sd.ln() - z * z / T::of(2.0)
}

/// Inverse standard normal CDF (Wichura's PPND16, |error| < 1e-15).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A_PPND, r) / poly(&B_PPND, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C_PPND, r) / poly(&D_PPND, r)
    } else {
        let r = r - 5.0;
        poly(&E_PPND, r) / poly(&F_PPND, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn poly(coefs: &[f64], x: f64) -> f64 {
    coefs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

const A_PPND: [f64; 8] = [
    3.387_132_872_796_366_5e0,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const B_PPND: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_415_576e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545_6e3,
];
const C_PPND: [f64; 8] = [
    1.423_437_110_749_683_5e0,
    4.630_337_846_156_546e0,
    5.769_497_221_460_691e0,
    3.647_848_324_763_204_5e0,
    1.270_458_252_452_368_4e0,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const D_PPND: [f64; 8] = [
    1.0,
    2.053_191_626_637_759e0,
    1.676_384_830_183_803_8e0,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const E_PPND: [f64; 8] = [
    6.657_904_643_501_103e0,
    5.463_784_911_164_114e0,
    1.784_826_539_917_291_3e0,
    2.965_605_718_285_048_7e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const F_PPND: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.488_753_012_577_138_3e-2,
    7.868_691_311_456_132e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_weights_reduce_to_plain_statistics() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let w = [1.0; 4];
        assert_eq!(weighted_mean(&xs, &w), mean(&xs));
        assert_abs_diff_eq!(weighted_var(&xs, &w), 7.1875, epsilon = 1e-12);
        assert_eq!(effective_sample_size(&w), 4.0);
    }

    #[test]
    fn ess_extremes() {
        assert_abs_diff_eq!(effective_sample_size(&[5.0, 0.0, 0.0]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(effective_sample_size(&[2.0, 2.0]), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn pearson_sign_and_degeneracy() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.0, 6.0, 8.0];
        let w = [1.0; 4];
        assert_abs_diff_eq!(weighted_pearson(&x, &y, &w).unwrap(), 1.0, epsilon = 1e-12);
        assert!(weighted_pearson(&x, &[3.0; 4], &w).is_none());
    }

    #[test]
    fn quantile_uniform_weights() {
        let xs = [10.0, 20.0, 30.0, 40.0];
        let w = [1.0; 4];
        assert_abs_diff_eq!(weighted_quantile(&xs, &w, 0.5), 25.0, epsilon = 1e-12);
        assert_eq!(weighted_quantile(&xs, &w, 0.0), 10.0);
        assert_eq!(weighted_quantile(&xs, &w, 1.0), 40.0);
    }

    #[test]
    fn normal_quantile_reference_values() {
        assert_abs_diff_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_quantile(0.95), 1.644_853_626_951_472_2, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959_963_984_540_054, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_quantile(0.01), -2.326_347_874_040_841, epsilon = 1e-12);
    }

    #[test]
    fn normal_pdf_reference() {
        assert_abs_diff_eq!(normal_pdf(0.0, 0.0, 1.0), 0.398_942_280_401_432_7, epsilon = 1e-15);
        assert_abs_diff_eq!(
            normal_pdf(1.0, 0.0, 2.0),
            0.176_032_663_382_149_97,
            epsilon = 1e-15
        );
    }
}
