use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFlag {
    Regular,
    /// Every difference equals the same nonzero value: `t = ±inf`, `p = 0`.
    ZeroVariance,
    /// Every difference is zero: `t = 0`, `p = 1` by convention.
    AllZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub mean_diff: f64,
    #[serde(with = "extended_f64")]
    pub t_statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n_pairs: usize,
    pub flag: TestFlag,
}

/// JSON has no infinities: non-finite values travel as `"inf"`, `"-inf"`, `"nan"`.
mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => s.serialize_f64(v),
            v if v.is_nan() => s.serialize_str("nan"),
            v if v > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("not a number: {other:?}"))),
            },
        }
    }
}

/// Two-sided paired t-test of `a - b` with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("paired samples must be finite".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (t, p, flag) = if diffs.iter().all(|&d| d == 0.0) {
        (0.0, 1.0, TestFlag::AllZero)
    } else if diffs.iter().all(|&d| d == diffs[0]) {
        (f64::INFINITY.copysign(mean), 0.0, TestFlag::ZeroVariance)
    } else {
        let t = mean / (var.sqrt() / (n as f64).sqrt());
        let nu = (n - 1) as f64;
        let p = regularized_incomplete_beta(nu / (nu + t * t), nu / 2.0, 0.5)?;
        (t, p.clamp(0.0, 1.0), TestFlag::Regular)
    };
    Ok(PairedTestResult {
        mean_diff: mean,
        t_statistic: t,
        p_value: p,
        n_pairs: n,
        flag,
    })
}

/// CDF of Student's t distribution with `nu` degrees of freedom.
pub fn student_t_cdf(t: f64, nu: f64) -> Result<f64> {
    if !(nu > 0.0) || t.is_nan() {
        return Err(Error::InvalidArgument(format!("t CDF needs nu > 0 and a number, got t={t}, nu={nu}")));
    }
    if t.is_infinite() {
        return Ok(if t > 0.0 { 1.0 } else { 0.0 });
    }
    let tail = 0.5 * regularized_incomplete_beta(nu / (nu + t * t), nu / 2.0, 0.5)?;
    Ok(if t > 0.0 { 1.0 - tail } else { tail })
}

/// Lanczos approximation (g = 7, 9 terms), accurate to ~1e-15 for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` by Lentz's continued fraction, using the symmetry
/// `I_x(a, b) = 1 - I_{1-x}(b, a)` where the fraction converges faster.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!("incomplete beta needs a, b > 0 and x in [0, 1]; got x={x}, a={a}, b={b}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(ln_front.exp() * beta_fraction(x, a, b)? / a)
    } else {
        Ok(1.0 - ln_front.exp() * beta_fraction(1.0 - x, b, a)? / b)
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 10_000;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(Error::InvalidState(format!("incomplete beta did not converge for x={x}, a={a}, b={b}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};
    use statrs::function::beta::beta_reg;
    use statrs::function::gamma::ln_gamma as statrs_ln_gamma;

    #[test]
    fn infinite_t_survives_json() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.t_statistic, f64::INFINITY);
        let back: PairedTestResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        let r = paired_t_test(&[0.1, 0.7, 0.3], &[0.2, 0.3, 0.0]).unwrap();
        let back: PairedTestResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back.t_statistic.to_bits(), r.t_statistic.to_bits());
    }

    #[test]
    fn equal_samples_are_degenerate() {
        let r = paired_t_test(&[0.2, 0.4, 0.6], &[0.2, 0.4, 0.6]).unwrap();
        assert_eq!(r.flag, TestFlag::AllZero);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn constant_shift_is_infinite_t() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.5, 1.5, 2.5]).unwrap();
        assert_eq!(r.flag, TestFlag::ZeroVariance);
        assert_eq!(r.t_statistic, f64::INFINITY);
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn hand_computed_five_pairs() {
        // differences {1,1,1,1,2}: mean 1.2, sd sqrt(0.2), t = 1.2 / (sqrt(0.2)/sqrt(5)) = 6
        let r = paired_t_test(&[1.0, 1.0, 1.0, 1.0, 2.0], &[0.0; 5]).unwrap();
        assert_relative_eq!(r.t_statistic, 6.0, max_relative = 1e-12);
        // two-sided tail with 4 dof: 2 * (1 - F(6)), closed form for even dof
        let (t, nu) = (6.0_f64, 4.0_f64);
        let x = t / (nu + t * t).sqrt();
        let cdf = 0.5 + 0.5 * x * (1.0 + 0.5 * (1.0 - x * x));
        assert_relative_eq!(r.p_value, 2.0 * (1.0 - cdf), max_relative = 1e-10);
        assert!((r.p_value - 0.0039).abs() < 5e-5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, f64::NAN], &[2.0, 1.0]).is_err());
        assert!(regularized_incomplete_beta(1.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0_f64;
        for n in 1..30 {
            assert_relative_eq!(ln_gamma(n as f64), fact.ln(), max_relative = 1e-13, epsilon = 1e-14);
            fact *= n as f64;
        }
        assert_relative_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn swapping_negates_t_and_keeps_p(a in prop::collection::vec(-1.0..1.0f64, 2..12), seed in any::<u64>()) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.5 + ((seed >> (i % 60)) & 7) as f64 * 0.01).collect();
            let ab = paired_t_test(&a, &b).unwrap();
            let ba = paired_t_test(&b, &a).unwrap();
            prop_assert_eq!(ab.t_statistic, -ba.t_statistic);
            prop_assert_eq!(ab.p_value, ba.p_value);
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }

        #[test]
        fn beta_matches_statrs(x in 0.0..1.0f64, a in 0.05..40.0f64, b in 0.05..40.0f64) {
            let ours = regularized_incomplete_beta(x, a, b).unwrap();
            prop_assert!((ours - beta_reg(a, b, x)).abs() < 1e-10, "{} vs {}", ours, beta_reg(a, b, x));
        }

        #[test]
        fn t_cdf_matches_statrs(t in -50.0..50.0f64, nu in 1usize..60) {
            let want = StudentsT::new(0.0, 1.0, nu as f64).unwrap().cdf(t);
            let ours = student_t_cdf(t, nu as f64).unwrap();
            prop_assert!((ours - want).abs() < 1e-10);
        }

        #[test]
        fn ln_gamma_matches_statrs(x in 0.01..200.0f64) {
            prop_assert!((ln_gamma(x) - statrs_ln_gamma(x)).abs() <= 1e-12 * statrs_ln_gamma(x).abs().max(1.0));
        }
    }
}
