//! Rational upper evaluation of the degree-bound formulas
//! `c·K·e^{(A/f)^c}` for each theorem, with `e` over-approximated.

use num_bigint::BigInt;
use num_traits::{One, Pow, Signed, ToPrimitive, Zero};
use serde_json::{json, Value};
use thiserror::Error;

use crate::poly::{rat_to_string, Rational};

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("invalid bound input: {0}")]
    Invalid(String),
    #[error("bound exceeds representable size (log10 ≈ {log10:.1})")]
    TooLarge { log10: f64 },
    #[error("unknown theorem {0:?}")]
    UnknownTheorem(String),
}

/// `2718281829 / 10^9 > e`.
pub fn e_upper() -> Rational {
    Rational::new(BigInt::from(2_718_281_829u64), BigInt::from(1_000_000_000u64))
}

/// Largest exponent of `e` evaluated exactly.
const MAX_EXPONENT: u64 = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Theorem {
    /// Compact case, `c e^{(‖f‖ d² nᵈ / f*)^c}`.
    T1_1,
    T1_2,
    T1_3,
    T1_4,
    T1_5,
    /// Simplex case, `c e^{(‖f‖• d² / f•)^c}`.
    P2_3,
}

impl Theorem {
    pub fn from_name(s: &str) -> Result<Self, BoundError> {
        Ok(match s {
            "1.1" => Theorem::T1_1,
            "1.2" => Theorem::T1_2,
            "1.3" => Theorem::T1_3,
            "1.4" => Theorem::T1_4,
            "1.5" => Theorem::T1_5,
            "2.3" => Theorem::P2_3,
            other => return Err(BoundError::UnknownTheorem(other.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Theorem::T1_1 => "1.1",
            Theorem::T1_2 => "1.2",
            Theorem::T1_3 => "1.3",
            Theorem::T1_4 => "1.4",
            Theorem::T1_5 => "1.5",
            Theorem::P2_3 => "2.3",
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            Theorem::T1_1 => "c*exp((norm*d^2*n^d/fstar)^c)",
            Theorem::T1_2 => "c*(m+1)*2^(m/2)*exp((norm*(m+1)*d^2*(3n)^d/fstar)^c)",
            Theorem::T1_3 => "c*exp((norm*d^2*(3n)^d/fstar)^c)",
            Theorem::T1_4 => "c*r^2*exp((norm*r^2*d^2*(3n)^d/fstar)^c)",
            Theorem::T1_5 => "c*(m+1)*2^(m/2)*r^2*exp((norm*(m+1)*r^2*d^2*(3n)^d/fstar)^c)",
            Theorem::P2_3 => "c*exp((norm*d^2/fstar)^c)",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs {
    pub c: Rational,
    pub d: u32,
    pub m: u32,
    pub r: u32,
    pub n: u32,
    pub f_norm: Rational,
    pub fstar: Rational,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundValue {
    pub theorem: Theorem,
    /// Rational upper bound of the exponent `(A/f)^c`.
    pub exponent: Rational,
    pub value: Rational,
}

impl BoundValue {
    pub fn to_json(&self) -> Value {
        json!({
            "theorem": self.theorem.name(),
            "formula": self.theorem.formula(),
            "exponent_upper": rat_to_string(&self.exponent),
            "value_upper": rat_to_string(&self.value),
            "value_approx": self.value.to_f64(),
        })
    }
}

fn int(v: u64) -> Rational {
    Rational::from_integer(BigInt::from(v))
}

/// Smallest `u = j / 2^40` with `u^q ≥ x^p`, for `x ≥ 0`.
fn rational_power_upper(x: &Rational, c: &Rational) -> Rational {
    if c.is_integer() {
        let e = c.to_integer().to_u32().expect("small exponent");
        return Pow::pow(x, e);
    }
    let p = c.numer().to_u32().expect("small exponent numerator");
    let q = c.denom().to_u32().expect("small exponent denominator");
    let target: Rational = Pow::pow(x, p);
    let den = BigInt::one() << 40usize;
    let guess = x.to_f64().unwrap_or(f64::MAX).powf(f64::from(p) / f64::from(q));
    let mut j = BigInt::from(((guess * (1u64 << 40) as f64) as u128).saturating_sub(1));
    if j.is_negative() {
        j = BigInt::zero();
    }
    // integer root of the scaled target as a fallback start when the float overflows
    if !guess.is_finite() {
        j = (target.ceil().to_integer() << (40 * q as usize)).nth_root(q);
    }
    loop {
        let u = Rational::new(j.clone(), den.clone());
        if Pow::pow(&u, q) >= target {
            return u;
        }
        j += 1;
    }
}

/// Evaluates the selected formula as a rational upper bound.
pub fn theorem_bound(theorem: Theorem, inp: &BoundInputs) -> Result<BoundValue, BoundError> {
    if !inp.c.is_positive() || !inp.fstar.is_positive() || !inp.f_norm.is_positive() {
        return Err(BoundError::Invalid("c, norm and fstar must be positive".into()));
    }
    if inp.c.numer().bits() > 16 || inp.c.denom().bits() > 16 {
        return Err(BoundError::Invalid("c must have small numerator and denominator".into()));
    }
    if matches!(theorem, Theorem::T1_2 | Theorem::T1_5) && inp.m % 2 == 1 {
        return Err(BoundError::Invalid("m must be even".into()));
    }
    let (d, m, r, n) = (u64::from(inp.d), u64::from(inp.m), u64::from(inp.r), u64::from(inp.n));
    let d2 = int(d * d);
    let pow_u = |b: u64, e: u64| -> Rational { Rational::from_integer(Pow::pow(BigInt::from(b), e)) };
    let three_n_d = pow_u(3 * n, d);
    let (prefactor, a) = match theorem {
        Theorem::T1_1 => (Rational::one(), &inp.f_norm * d2 * pow_u(n, d)),
        Theorem::T1_2 => (int(m + 1) * pow_u(2, m / 2), &inp.f_norm * int(m + 1) * d2 * three_n_d),
        Theorem::T1_3 => (Rational::one(), &inp.f_norm * d2 * three_n_d),
        Theorem::T1_4 => (int(r * r), &inp.f_norm * int(r * r) * d2 * three_n_d),
        Theorem::T1_5 => (int(m + 1) * pow_u(2, m / 2) * int(r * r), &inp.f_norm * int(m + 1) * int(r * r) * d2 * three_n_d),
        Theorem::P2_3 => (Rational::one(), &inp.f_norm * d2),
    };
    let exponent = rational_power_upper(&(a / &inp.fstar), &inp.c);
    let ceil = exponent.ceil().to_integer();
    let steps = ceil.to_u64().unwrap_or(u64::MAX);
    if steps > MAX_EXPONENT {
        let log10 = exponent.to_f64().unwrap_or(f64::INFINITY) * std::f64::consts::LOG10_E;
        return Err(BoundError::TooLarge { log10 });
    }
    // exact power for integral exponents, else e^E ≤ e_up^⌈E⌉
    let e_pow: Rational = Pow::pow(&e_upper(), steps);
    Ok(BoundValue { theorem, exponent, value: &inp.c * prefactor * e_pow })
}
