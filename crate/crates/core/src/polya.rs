//! Pólya saturation: homogenize `h` in the bounded block with `X0` and
//! multiply by `(X0 + X1 + ... + Xn)^N` until every coefficient form `b_α`
//! is certifiably positive on the sphere(s).

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_traits::Signed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::certified::{self, CertifiedMin, EvalError, Goal, Resolution, SamplePoint};
use crate::poly::{simplex_sum, Block, BlockShape, BlockedPoly, Exponent, Homogenizer, PolyError, Rational};

#[derive(Debug, Error)]
pub enum PolyaError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("coefficient form at {alpha:?} is not certifiably positive at N = {n} (cap {cap})")]
    CapExceeded { alpha: Vec<u32>, n: u32, cap: u64, witness: Option<Box<SamplePoint>> },
    #[error("coefficient form at {alpha:?}: {source}")]
    Eval { alpha: Vec<u32>, source: EvalError },
    #[error("expansion would exceed {limit} terms at N = {n}")]
    TermLimit { n: u32, limit: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug)]
pub struct PolyaResult {
    pub n: u32,
    pub ell: u32,
    /// `H`, bihomogeneous, before multiplication by the simplex sum.
    pub h_hom: BlockedPoly,
    /// Keyed by the exponent of `(X0, X1, ..., Xn)`; forms live in the
    /// unbounded part of the shape.
    pub coefficient_forms: BTreeMap<Exponent, BlockedPoly>,
    pub evidence: BTreeMap<Exponent, CertifiedMin>,
}

impl PolyaResult {
    /// Recombines `Σ b_α X0^{α0} X^ᾱ`.
    pub fn expand(&self) -> Result<BlockedPoly, PolyError> {
        let shape = self.h_hom.shape();
        let mut out = BlockedPoly::zero(shape);
        for (alpha, b) in &self.coefficient_forms {
            for (e, c) in b.embed(shape)?.terms() {
                let mut ne = e.clone();
                for (i, &a) in alpha.iter().enumerate() {
                    ne[i] = a;
                }
                out.add_term(ne, c.clone());
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Value {
        let min_lb = self.evidence.values().map(|e| &e.lower_bound).min().cloned();
        json!({
            "N": self.n,
            "ell": self.ell,
            "coefficient_count": self.coefficient_forms.len(),
            "min_coefficient_lower_bound": min_lb.as_ref().map(crate::poly::rat_to_string),
            "cells": self.evidence.values().map(|e| e.cells).sum::<usize>(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct PolyaConfig {
    pub resolution: Resolution,
    /// Abort when the expansion holds more terms than this.
    pub max_terms: usize,
    /// Random directions per sphere group in the floating prescreen.
    pub prescreen_samples: usize,
}

impl Default for PolyaConfig {
    fn default() -> Self {
        PolyaConfig { resolution: Resolution::default(), max_terms: 4_000_000, prescreen_samples: 64 }
    }
}

/// `H = Σ_j h_j · (X0 + X1 + ... + Xn)^{ℓ−j}` where `h_j` collects the terms
/// of degree `j` in the bounded block and `ℓ = deg_X h`.
pub fn homogenize_with_x0(h: &BlockedPoly) -> Result<BlockedPoly, PolyError> {
    let shape = h.shape();
    let target = shape.with(Homogenizer::X0)?;
    let ell = h.block_degree(Block::X);
    let xidx: Vec<usize> = shape.block_indices(Block::X).collect();
    let mut parts: Vec<BlockedPoly> = vec![BlockedPoly::zero(shape); ell as usize + 1];
    for (e, c) in h.terms() {
        let j: u32 = xidx.iter().map(|&i| e[i]).sum();
        parts[j as usize].add_term(e.clone(), c.clone());
    }
    let sum = simplex_sum(target);
    let mut out = BlockedPoly::zero(target);
    let mut power = BlockedPoly::one(target);
    for j in (0..=ell as usize).rev() {
        if !parts[j].is_zero() {
            out = out.add(&parts[j].embed(target)?.multiply(&power)?)?;
        }
        if j > 0 {
            power = power.multiply(&sum)?;
        }
    }
    Ok(out)
}

/// `⌊15(ℓ+1)ℓ(ℓ−1)‖h‖•/f• − ℓ⌋ + 1`, clamped at zero.
pub fn polya_exponent_cap(ell: u32, h_norm: &Rational, fstar: &Rational) -> Result<u64, PolyaError> {
    if !fstar.is_positive() {
        return Err(PolyaError::Invalid("the minimum must be positive".into()));
    }
    let l = BigInt::from(ell);
    let prod = BigInt::from(15) * (&l + 1) * &l * (&l - 1);
    let q = Rational::from_integer(prod) * h_norm / fstar - Rational::from_integer(l);
    let n: BigInt = q.floor().to_integer() + 1;
    if n.is_negative() {
        return Ok(0);
    }
    u64::try_from(n).map_err(|_| PolyaError::Invalid("exponent cap does not fit in 64 bits".into()))
}

/// Splits a polynomial with active `X0` into its coefficient forms.
pub fn coefficient_forms(hh: &BlockedPoly) -> Result<BTreeMap<Exponent, BlockedPoly>, PolyaError> {
    let shape = hh.shape();
    if !shape.has(Homogenizer::X0) {
        return Err(PolyaError::Invalid("X0 is not active".into()));
    }
    let unb = shape.unbounded_part();
    let nb = shape.bounded_indices().len();
    let mut out: BTreeMap<Exponent, BlockedPoly> = BTreeMap::new();
    for (e, c) in hh.terms() {
        let alpha = e[..nb].to_vec();
        out.entry(alpha).or_insert_with(|| BlockedPoly::zero(unb)).add_term(e[nb..].to_vec(), c.clone());
    }
    out.retain(|_, b| !b.is_zero());
    Ok(out)
}

/// One multiplication by `X0 + ... + Xn` on the coefficient-form map.
fn step(forms: &BTreeMap<Exponent, BlockedPoly>, nb: usize) -> Result<BTreeMap<Exponent, BlockedPoly>, PolyError> {
    let mut out: BTreeMap<Exponent, BlockedPoly> = BTreeMap::new();
    for (alpha, b) in forms {
        for i in 0..nb {
            let mut a = alpha.clone();
            a[i] += 1;
            match out.get_mut(&a) {
                Some(acc) => *acc = acc.add(b)?,
                None => {
                    out.insert(a, b.clone());
                }
            }
        }
    }
    Ok(out)
}

/// All exponents of `nb` variables with total degree `deg`.
fn all_alphas(nb: usize, deg: u32) -> Vec<Exponent> {
    fn rec(k: usize, left: u32, cur: &mut Exponent, out: &mut Vec<Exponent>) {
        if k + 1 == cur.len() {
            cur[k] = left;
            out.push(cur.clone());
            return;
        }
        for e in (0..=left).rev() {
            cur[k] = e;
            rec(k + 1, left - e, cur, out);
        }
    }
    let mut out = Vec::new();
    rec(0, deg, &mut vec![0; nb], &mut out);
    out
}

/// Deterministic sample directions for the floating prescreen: coordinate
/// axes plus seeded Gaussian directions, per sphere group.
fn prescreen_points(shape: BlockShape, groups: &[certified::SphereGroup], samples: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let nv = shape.nvars();
    let mut points = Vec::new();
    let axes = groups.iter().map(|g| g.vars.len()).max().unwrap_or(0);
    for a in 0..axes {
        let mut p = vec![0.0; nv];
        for g in groups {
            p[g.vars[a % g.vars.len()]] = 1.0;
        }
        points.push(p);
    }
    for _ in 0..samples {
        let mut p = vec![0.0; nv];
        for g in groups {
            for &v in &g.vars {
                let (u1, u2): (f64, f64) = (rng.random::<f64>().max(1e-300), rng.random());
                p[v] = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        }
        points.push(p);
    }
    points
}

enum Status {
    Positive(CertifiedMin),
    Fails(Option<Box<SamplePoint>>),
}

fn check_form(b: &BlockedPoly, points: &[Vec<f64>], res: &Resolution) -> Result<Status, EvalError> {
    if b.is_zero() {
        return Ok(Status::Fails(None));
    }
    if points.iter().any(|p| b.eval_f64(p) <= 0.0) {
        return Ok(Status::Fails(None));
    }
    let groups = certified::infer_groups(b)?;
    match certified::certified_min(b, &groups, None, &Goal::Positive, res) {
        Ok(cm) => Ok(Status::Positive(cm)),
        Err(EvalError::NonpositiveWitness(w)) => Ok(Status::Fails(Some(w))),
        Err(EvalError::ResolutionExhausted { witness, .. }) => Ok(Status::Fails(witness)),
        Err(e) => Err(e),
    }
}

/// Finds the least `N ≤ cap` such that every coefficient form of
/// `H·(X0 + ... + Xn)^N` is certified positive on the sphere(s).
pub fn polya_saturate(hh: &BlockedPoly, cap: u64, cfg: &PolyaConfig) -> Result<PolyaResult, PolyaError> {
    let shape = hh.shape();
    let xidx: Vec<usize> = shape.bounded_indices().collect();
    let ell = hh.degree_in(&xidx);
    if !hh.is_homogeneous_in(&xidx, ell) {
        return Err(PolyaError::Invalid("H is not homogeneous in the bounded block".into()));
    }
    let nb = xidx.len();
    let unb = shape.unbounded_part();
    let mut forms = coefficient_forms(hh)?;
    let groups = if forms.is_empty() {
        Vec::new()
    } else {
        certified::infer_groups(forms.values().next().unwrap()).map_err(|source| PolyaError::Eval { alpha: Vec::new(), source })?
    };
    let points = prescreen_points(unb, &groups, cfg.prescreen_samples);
    let zero = BlockedPoly::zero(unb);
    let mut n: u32 = 0;
    loop {
        let alphas = all_alphas(nb, ell + n);
        // cheap screen first, sequentially, in index order
        let mut failed: Option<(Exponent, Option<Box<SamplePoint>>)> = None;
        for a in &alphas {
            let b = forms.get(a).unwrap_or(&zero);
            if b.is_zero() || points.iter().any(|p| b.eval_f64(p) <= 0.0) {
                failed = Some((a.clone(), None));
                break;
            }
        }
        if failed.is_none() {
            let results: Vec<(Exponent, Result<Status, EvalError>)> = alphas
                .par_iter()
                .map(|a| (a.clone(), check_form(forms.get(a).unwrap_or(&zero), &points, &cfg.resolution)))
                .collect();
            let mut evidence = BTreeMap::new();
            for (a, r) in results {
                match r.map_err(|source| PolyaError::Eval { alpha: a.clone(), source })? {
                    Status::Positive(cm) => {
                        evidence.insert(a, cm);
                    }
                    Status::Fails(w) => {
                        failed = Some((a, w));
                        break;
                    }
                }
            }
            if failed.is_none() {
                return Ok(PolyaResult { n, ell, h_hom: hh.clone(), coefficient_forms: forms, evidence });
            }
        }
        let (alpha, witness) = failed.unwrap();
        if u64::from(n) >= cap {
            return Err(PolyaError::CapExceeded { alpha, n, cap, witness });
        }
        let terms: usize = forms.values().map(BlockedPoly::len).sum();
        if terms.saturating_mul(nb) > cfg.max_terms {
            return Err(PolyaError::TermLimit { n: n + 1, limit: cfg.max_terms });
        }
        forms = step(&forms, nb)?;
        n += 1;
    }
}

/// Number of coefficient indices `binom(N + ℓ + n, n)`.
pub fn coefficient_index_count(n_exp: u32, ell: u32, n: usize) -> BigInt {
    let top = u64::from(n_exp) + u64::from(ell) + n as u64;
    BigInt::from(crate::poly::binomial(top, n as u64))
}

/// `Z → 1` and `X0 → 1 − ΣX` on a polynomial with `X0` active, as used when
/// pulling the expansion back to the affine chart.
pub fn dehomogenize_x0(p: &BlockedPoly) -> Result<BlockedPoly, PolyError> {
    let shape = p.shape().without(Homogenizer::X0);
    p.substitute(&[(crate::poly::Var::H(Homogenizer::X0), crate::poly::one_minus_sum(shape))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{rat, Var};

    fn shape1() -> BlockShape {
        BlockShape::new(1, 1, 0).with(Homogenizer::Z).unwrap()
    }

    fn p(shape: BlockShape, terms: &[(&[u32], i64)]) -> BlockedPoly {
        BlockedPoly::from_terms(shape, terms.iter().map(|(e, c)| (e.to_vec(), rat(*c, 1))))
    }

    #[test]
    fn homogenization_examples() {
        let s = BlockShape::new(1, 0, 0);
        let x0 = s.with(Homogenizer::X0).unwrap();
        let h = p(s, &[(&[1], 1)]);
        assert_eq!(homogenize_with_x0(&h).unwrap(), p(x0, &[(&[0, 1], 1)]));
        let h = p(s, &[(&[0], 1), (&[1], 1)]);
        assert_eq!(homogenize_with_x0(&h).unwrap(), p(x0, &[(&[1, 0], 1), (&[0, 1], 2)]));
    }

    #[test]
    fn homogenization_restricts_back() {
        // h = 3 - X1 Y^2 + X1^2 Z^2 (shape X1 | Y | Z)
        let s = shape1();
        let h = p(s, &[(&[0, 2, 0], 3), (&[0, 0, 2], 3), (&[1, 2, 0], -1), (&[2, 0, 2], 1)]);
        let hh = homogenize_with_x0(&h).unwrap();
        let xi: Vec<usize> = hh.shape().bounded_indices().collect();
        assert!(hh.is_homogeneous_in(&xi, 2));
        assert_eq!(dehomogenize_x0(&hh).unwrap(), h);
    }

    #[test]
    fn exponent_cap_examples() {
        assert_eq!(polya_exponent_cap(3, &rat(1, 1), &rat(1, 1)).unwrap(), 358);
        assert_eq!(polya_exponent_cap(0, &rat(1, 1), &rat(1, 1)).unwrap(), 1);
        assert_eq!(polya_exponent_cap(1, &rat(5, 1), &rat(1, 1)).unwrap(), 0);
        let mut prev = 0;
        for k in 0..10 {
            let c = polya_exponent_cap(4, &rat(1 << k, 3), &rat(1, 7)).unwrap();
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn already_positive_forms() {
        // (Y^2 + Z^2)(X0 + X1)
        let s = shape1().with(Homogenizer::X0).unwrap();
        let hh = p(s, &[(&[1, 0, 2, 0], 1), (&[1, 0, 0, 2], 1), (&[0, 1, 2, 0], 1), (&[0, 1, 0, 2], 1)]);
        let r = polya_saturate(&hh, 10, &PolyaConfig::default()).unwrap();
        assert_eq!(r.n, 0);
        assert_eq!(r.coefficient_forms.len(), 2);
        for (a, b) in &r.coefficient_forms {
            assert_eq!(b, &p(s.unbounded_part(), &[(&[2, 0], 1), (&[0, 2], 1)]), "{a:?}");
            assert!(r.evidence[a].lower_bound.is_positive());
            assert!(r.evidence[a].lower_bound <= rat(1, 1));
        }
    }

    #[test]
    fn one_step_fills_the_middle_coefficient() {
        // (X0^2 + X1^2)(Y^2 + Z^2): b_(1,1) = 0 at N = 0
        let s = shape1().with(Homogenizer::X0).unwrap();
        let hh = p(s, &[(&[2, 0, 2, 0], 1), (&[2, 0, 0, 2], 1), (&[0, 2, 2, 0], 1), (&[0, 2, 0, 2], 1)]);
        assert!(matches!(polya_saturate(&hh, 0, &PolyaConfig::default()), Err(PolyaError::CapExceeded { n: 0, .. })));
        let r = polya_saturate(&hh, 5, &PolyaConfig::default()).unwrap();
        assert_eq!(r.n, 1);
        // hand expansion (x0^2 + x1^2)(x0 + x1) = x0^3 + x0^2 x1 + x0 x1^2 + x1^3
        let unit = p(s.unbounded_part(), &[(&[2, 0], 1), (&[0, 2], 1)]);
        let keys: Vec<Exponent> = r.coefficient_forms.keys().cloned().collect();
        assert_eq!(keys, vec![vec![0, 3], vec![1, 2], vec![2, 1], vec![3, 0]]);
        assert!(r.coefficient_forms.values().all(|b| *b == unit));
        let lhs = r.expand().unwrap();
        assert_eq!(lhs, hh.multiply(&simplex_sum(s)).unwrap());
    }

    #[test]
    fn classical_polya_needs_several_steps() {
        // (X0 - X1)^2 + X0 X1 / 10 times (Y^2 + Z^2): positive on the simplex
        // with a small middle coefficient; the identity must hold exactly.
        let s = shape1().with(Homogenizer::X0).unwrap();
        let base = p(s, &[(&[2, 0, 0, 0], 10), (&[1, 1, 0, 0], -19), (&[0, 2, 0, 0], 10)]);
        let sphere = crate::poly::sum_of_squares(s, &[Var::Y1(0), Var::H(Homogenizer::Z)]).unwrap();
        let hh = base.multiply(&sphere).unwrap();
        let r = polya_saturate(&hh, 1000, &PolyaConfig::default()).unwrap();
        assert!(r.n > 1);
        let mut rhs = hh.clone();
        for _ in 0..r.n {
            rhs = rhs.multiply(&simplex_sum(s)).unwrap();
        }
        assert_eq!(r.expand().unwrap(), rhs);
        assert_eq!(BigInt::from(r.coefficient_forms.len()), coefficient_index_count(r.n, r.ell, 1));
        // independent check: the Bernstein-style coefficients of (x0-x1)^2+x0x1/10
        // times (x0+x1)^N are positive exactly from this N on
        let positive_at = |n: u32| {
            (0..=n + 2).all(|j| {
                let c = |i: i64| -> i64 {
                    // coefficient of x0^{n+2-j} x1^j in base * (x0+x1)^n
                    let binom = |a: i64, b: i64| -> i64 {
                        if b < 0 || b > a {
                            0
                        } else {
                            (0..b).fold(1i64, |acc, t| acc * (a - t) / (t + 1))
                        }
                    };
                    binom(n as i64, i)
                };
                let j = j as i64;
                10 * c(j) - 19 * c(j - 1) + 10 * c(j - 2) > 0
            })
        };
        assert!(positive_at(r.n));
        assert!(!positive_at(r.n - 1));
    }

    proptest::proptest! {
        #[test]
        fn homogenization_is_homogeneous_and_restricts_back(
            terms in proptest::collection::vec((0u32..4, 0u32..3, 0u32..3, -9i64..10), 1..8)
        ) {
            // shape X1 X2 | Y
            let s = BlockShape::new(2, 1, 0);
            let h = BlockedPoly::from_terms(s, terms.iter().map(|&(a, b, y, c)| (vec![a, b, y], rat(c, 1))));
            let hh = homogenize_with_x0(&h).unwrap();
            let xi: Vec<usize> = hh.shape().bounded_indices().collect();
            proptest::prop_assert!(hh.is_homogeneous_in(&xi, h.block_degree(Block::X)));
            proptest::prop_assert_eq!(dehomogenize_x0(&hh).unwrap(), h);
        }
    }
}
