//! Oracles shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

/// Non-negative fraction; only the final conversion to `f64` rounds.
#[derive(Clone, Copy, Debug)]
pub struct Frac {
    pub num: u128,
    pub den: u128,
}

impl Frac {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Harmonic mean of precision and recall evaluated in integer arithmetic:
/// with `P = a/b` and `R = c/d`, `2PR/(P+R) = 2ac/(ad+bc)`. A zero
/// denominator anywhere gives zero.
pub fn f1_exact(tp: u64, fp: u64, fn_: u64) -> f64 {
    let (a, b) = (tp as u128, (tp + fp) as u128);
    let (c, d) = (tp as u128, (tp + fn_) as u128);
    if b == 0 || d == 0 {
        return 0.0;
    }
    let den = a * d + b * c;
    if den == 0 {
        return 0.0;
    }
    Frac { num: 2 * a * c, den }.value()
}

pub fn ratio_exact(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        Frac {
            num: num as u128,
            den: den as u128,
        }
        .value()
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn binom_pmf(n: u64, k: u64, p: f64) -> f64 {
    let ln_choose = ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0);
    let lp = if k == 0 { 0.0 } else { k as f64 * p.ln() };
    let lq = if n == k { 0.0 } else { (n - k) as f64 * (1.0 - p).ln() };
    (ln_choose + lp + lq).exp()
}

/// Lanczos approximation, accurate to ~1e-14 for positive arguments.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
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
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Central interval holding at least `level` of Binomial(n, p) mass, found by
/// summing the probability mass function.
pub fn binomial_interval(n: u64, p: f64, level: f64) -> (u64, u64) {
    let tail = (1.0 - level) / 2.0;
    let pmf: Vec<f64> = (0..=n).map(|k| binom_pmf(n, k, p)).collect();
    let mut lo = 0;
    let mut acc = 0.0;
    while acc + pmf[lo as usize] <= tail {
        acc += pmf[lo as usize];
        lo += 1;
    }
    let mut hi = n;
    let mut acc = 0.0;
    while acc + pmf[hi as usize] <= tail {
        acc += pmf[hi as usize];
        hi -= 1;
    }
    (lo, hi)
}

/// Expected positive-class F1 of a classifier that ignores its input and
/// predicts positive with probability `q`, on a set of `n` samples of which
/// `k` are positive. Brute force over the joint distribution of true and
/// false positives.
pub fn chance_f1(n: u64, k: u64, q: f64) -> f64 {
    let tp_pmf: Vec<f64> = (0..=k).map(|t| binom_pmf(k, t, q)).collect();
    let fp_pmf: Vec<f64> = (0..=n - k).map(|f| binom_pmf(n - k, f, q)).collect();
    let mut e = 0.0;
    for (tp, pt) in tp_pmf.iter().enumerate() {
        for (fp, pf) in fp_pmf.iter().enumerate() {
            e += pt * pf * f1_exact(tp as u64, fp as u64, k - tp as u64);
        }
    }
    e
}
