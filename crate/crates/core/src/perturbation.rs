//! The perturbation `h = f̄ − λ·P·Σ gᵢ(gᵢ−1)^{2k}`, with `P` the power of
//! the sphere norm(s) matching the variant, and the search for `(λ, k)` with
//! `h ≥ ½·f•` on `Δ̃_n` times the sphere(s).

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde_json::{json, Value};
use thiserror::Error;

use crate::certified::{self, CertifiedMin, EvalError, Goal, Resolution, SamplePoint};
use crate::poly::{rat_to_string, Block, BlockShape, BlockedPoly, Homogenizer, PolyError, Rational, Var};
use crate::problem::{CylinderProblem, Frame};

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no (lambda, k) found up to lambda = {}, k = {k}: {reason}", rat_to_string(lambda))]
    SearchExhausted { lambda: Rational, k: u32, reason: String, witness: Option<Box<SamplePoint>> },
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Optional seeds for the search, standing in for the exponent and constant
/// of a distance inequality to `S`. Either both are set or neither.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LojasiewiczSeed {
    pub c1: Option<Rational>,
    pub c2: Option<Rational>,
}

#[derive(Clone, Debug)]
pub struct SearchConfig {
    /// First `λ`; defaults to `f•/(4s)`, the value at which `k = 0` is still allowed.
    pub lambda_start: Option<Rational>,
    pub lambda_cap: Rational,
    pub k_cap: u32,
    pub resolution: Resolution,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda_start: None,
            lambda_cap: Rational::from_integer(BigInt::one() << 64usize),
            k_cap: 16,
            resolution: Resolution::default(),
        }
    }
}

/// Positive scalars `Mᵢ` with `|gᵢ/Mᵢ| ≤ 1` on `Δ̃_n`, certified.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub scalars: Vec<Rational>,
}

impl Normalization {
    pub fn to_json(&self) -> Value {
        json!(self.scalars.iter().map(rat_to_string).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug)]
pub struct PerturbationParams {
    pub lambda: Rational,
    pub k: u32,
    pub h: BlockedPoly,
    pub evidence: CertifiedMin,
    pub threshold: Rational,
    pub fstar_lb: Rational,
    pub ell: u32,
    pub normalization: Normalization,
    /// The normalized problem the perturbation was built from.
    pub normalized: CylinderProblem,
    pub h_norm: Rational,
    pub h_norm_bound: Rational,
    /// Candidates rejected before the returned one.
    pub attempts: Vec<(Rational, u32)>,
}

impl PerturbationParams {
    pub fn to_json(&self) -> Value {
        json!({
            "lambda": rat_to_string(&self.lambda),
            "k": self.k,
            "ell": self.ell,
            "threshold": rat_to_string(&self.threshold),
            "h_norm": rat_to_string(&self.h_norm),
            "h_norm_bound": rat_to_string(&self.h_norm_bound),
            "normalization": self.normalization.to_json(),
            "evidence": self.evidence.to_json(),
        })
    }
}

/// Rounds `x` up to a positive multiple of `2^-10`.
fn dyadic_ceil(x: &Rational) -> Rational {
    let scale = Rational::from_integer(BigInt::from(1024));
    let k = (x * &scale).ceil().to_integer();
    let k = if k.is_positive() { k } else { BigInt::one() };
    Rational::new(k, BigInt::from(1024))
}

/// The largest dyadic rational `j/2^b` below `x` that loses at most a
/// thousandth of it, keeping denominators of derived quantities short.
pub fn dyadic_floor(x: &Rational) -> Rational {
    let keep = x * Rational::new(999.into(), 1000.into());
    for bits in 0..256usize {
        let den = BigInt::one() << bits;
        let j = (x * Rational::from_integer(den.clone())).floor().to_integer();
        let v = Rational::new(j, den);
        if v >= keep && v.is_positive() {
            return v;
        }
    }
    x.clone()
}

/// Certified upper bound of `|g|` over `Δ̃_n`, rounded up to a multiple of `2^-10`.
pub fn certified_sup_abs(g: &BlockedPoly, res: &Resolution) -> Result<Rational, EvalError> {
    let goal = Goal::Minimize { rel_slack: Rational::new(1.into(), 1000.into()) };
    let lo = certified::certified_min(g, &[], None, &goal, res)?.lower_bound;
    let hi = -certified::certified_min(&g.neg(), &[], None, &goal, res)?.lower_bound;
    let m = if -&lo > hi { -lo } else { hi };
    Ok(dyadic_ceil(&m))
}

/// Rescales each constraint so that `|gᵢ| ≤ 1` on `Δ̃_n`; `S` and the
/// quadratic module are unchanged.
pub fn normalize_constraints(p: &CylinderProblem, res: &Resolution) -> Result<(CylinderProblem, Normalization), PerturbError> {
    if p.frame != Frame::Simplex {
        return Err(PerturbError::Invalid("normalization needs the simplex frame".into()));
    }
    let mut scalars = Vec::new();
    let mut g = Vec::new();
    for gi in &p.g {
        let m = certified_sup_abs(gi, res)?;
        g.push(gi.scale(&m.recip()));
        scalars.push(m);
    }
    let mut q = p.clone();
    q.g = g;
    Ok((q, Normalization { scalars }))
}

/// `P`: `(ΣY² + Z²)^{m/2}`, or `(Y1² + Z1²)^{m/2}(ΣY2² + Z2²)` in the split case.
pub fn sphere_power(p: &CylinderProblem, shape: BlockShape) -> Result<BlockedPoly, PolyError> {
    if p.variant.is_split() {
        let a = crate::poly::sum_of_squares(shape, &[Var::Y1(0), Var::H(Homogenizer::Z1)])?;
        let mut bv: Vec<Var> = (0..p.r).map(Var::Y2).collect();
        bv.push(Var::H(Homogenizer::Z2));
        let b = crate::poly::sum_of_squares(shape, &bv)?;
        a.pow(p.m / 2).multiply(&b)
    } else {
        let mut v: Vec<Var> = (0..shape.r1).map(Var::Y1).collect();
        v.push(Var::H(Homogenizer::Z));
        Ok(crate::poly::sum_of_squares(shape, &v)?.pow(p.m / 2))
    }
}

/// `Σ gᵢ (gᵢ − 1)^{2k}` in the bounded variables.
pub fn damped_sum(g: &[BlockedPoly], k: u32) -> Result<BlockedPoly, PolyError> {
    let shape = g[0].shape();
    let mut out = BlockedPoly::zero(shape);
    for gi in g {
        let gm1 = gi.sub(&BlockedPoly::one(shape))?;
        out = out.add(&gi.multiply(&gm1.pow(2 * k))?)?;
    }
    Ok(out)
}

/// `h = f̄ − λ·P·Σ gᵢ(gᵢ−1)^{2k}` with the constraints of `p` as given.
pub fn build_h(p: &CylinderProblem, lambda: &Rational, k: u32) -> Result<BlockedPoly, PerturbError> {
    if p.frame != Frame::Simplex {
        return Err(PerturbError::Invalid("the perturbation is built in the simplex frame".into()));
    }
    if !lambda.is_positive() {
        return Err(PerturbError::Invalid("lambda must be positive".into()));
    }
    let fbar = p.f_bar();
    let shape = fbar.shape();
    let pw = sphere_power(p, shape)?;
    let damp = damped_sum(&p.g, k)?.embed(shape)?;
    Ok(fbar.sub(&pw.multiply(&damp)?.scale(lambda))?)
}

/// Smallest `k ≥ 0` with `2k + 1 ≥ 4λs/f`.
pub fn k_for_lambda(lambda: &Rational, s: usize, fstar: &Rational) -> u32 {
    let q = Rational::from_integer(BigInt::from(4 * s)) * lambda / fstar;
    let need = (q - Rational::one()) / Rational::from_integer(BigInt::from(2));
    let k = need.ceil().to_integer();
    if k.is_positive() { u32::try_from(k).unwrap_or(u32::MAX) } else { 0 }
}

/// Classical coefficient norm of an X-only polynomial.
fn classical_norm(g: &BlockedPoly) -> Rational {
    g.norm_bullet()
}

/// `‖f‖• + λ·s·maxcoef(P)·max((deg gᵢ + 1)(‖gᵢ‖ + 1))^{2k+1}`.
pub fn h_norm_bound(p: &CylinderProblem, lambda: &Rational, k: u32) -> Result<Rational, PolyError> {
    let pw = sphere_power(p, p.homogenized_shape())?;
    let base = p
        .g
        .iter()
        .map(|g| Rational::from_integer(BigInt::from(g.total_degree() + 1)) * (classical_norm(g) + Rational::one()))
        .fold(Rational::zero(), |a, b| if b > a { b } else { a });
    let mut pow = Rational::one();
    for _ in 0..2 * k + 1 {
        pow *= &base;
    }
    Ok(p.f.norm_bullet() + lambda * Rational::from_integer(BigInt::from(p.s())) * pw.max_abs_coeff() * pow)
}

/// Seeded first `λ` from the distance-inequality constants, rounded up to a
/// dyadic rational.
fn seeded_lambda(p: &CylinderProblem, fstar: &Rational, c1: &Rational, c2: &Rational) -> Rational {
    let f = crate::poly::rat_to_f64(fstar);
    let norm = crate::poly::rat_to_f64(&p.f.norm_bullet());
    let d = f64::from(p.d().max(1));
    let sn = (p.n as f64).sqrt();
    let delta = (1.0 / crate::poly::rat_to_f64(c2)) * (f / (30.0 * sn * norm * d * (d + 1.0))).powf(crate::poly::rat_to_f64(c1));
    let lam = 15.0 * sn * norm * d * (d + 1.0) / (std::f64::consts::SQRT_2 * delta);
    if !lam.is_finite() || lam <= 0.0 {
        return Rational::one();
    }
    dyadic_ceil(&Rational::from_float(lam).unwrap_or_else(Rational::one))
}

/// Doubles `λ` from its start, with `k` determined by `λ`, until `h ≥ ½·f•_lb`
/// is certified on `Δ̃_n` times the sphere(s).
pub fn search_lambda_k(
    p: &CylinderProblem,
    fstar: &CertifiedMin,
    seed: &LojasiewiczSeed,
    cfg: &SearchConfig,
) -> Result<PerturbationParams, PerturbError> {
    let f = fstar.lower_bound.clone();
    if !f.is_positive() {
        return Err(PerturbError::Invalid("f• lower bound must be positive".into()));
    }
    if seed.c1.is_some() != seed.c2.is_some() {
        return Err(PerturbError::Invalid("seed constants must be given together".into()));
    }
    let f = dyadic_floor(&f);
    let (q, normalization) = normalize_constraints(p, &cfg.resolution)?;
    let s = q.s();
    let threshold = &f / Rational::from_integer(BigInt::from(2));
    let mut lambda = match (&seed.c1, &seed.c2, &cfg.lambda_start) {
        (Some(c1), Some(c2), _) => seeded_lambda(&q, &f, c1, c2),
        (_, _, Some(l)) => l.clone(),
        _ => &f / Rational::from_integer(BigInt::from(4 * s)),
    };
    let mut attempts = Vec::new();
    let mut last_witness: Option<Box<SamplePoint>> = None;
    let mut last_reason = String::from("no candidate tried");
    loop {
        let k = k_for_lambda(&lambda, s, &f);
        if lambda > cfg.lambda_cap || k > cfg.k_cap {
            return Err(PerturbError::SearchExhausted { lambda, k, reason: last_reason, witness: last_witness });
        }
        let h = build_h(&q, &lambda, k)?;
        match certified::certified_excess_check(&h, &threshold, &cfg.resolution) {
            Ok(cm) if cm.lower_bound >= threshold => {
                let ell = h.block_degree(Block::X);
                let h_norm = h.norm_bullet();
                let h_norm_bound = h_norm_bound(&q, &lambda, k)?;
                return Ok(PerturbationParams {
                    lambda,
                    k,
                    h,
                    evidence: cm,
                    threshold,
                    fstar_lb: f,
                    ell,
                    normalization,
                    normalized: q,
                    h_norm,
                    h_norm_bound,
                    attempts,
                });
            }
            Ok(cm) => {
                last_reason = format!("lower bound {} below threshold", rat_to_string(&cm.lower_bound));
                last_witness = cm.best_sample.map(Box::new);
            }
            Err(EvalError::BelowThreshold { witness, .. }) => {
                last_reason = format!("h takes value {}", rat_to_string(&witness.value));
                last_witness = Some(witness);
            }
            Err(EvalError::ResolutionExhausted { lower_bound, witness, .. }) => {
                last_reason = format!("resolution exhausted at lower bound {}", rat_to_string(&lower_bound));
                last_witness = witness;
            }
            Err(e) => return Err(e.into()),
        }
        attempts.push((lambda.clone(), k));
        lambda *= Rational::from_integer(BigInt::from(2));
    }
}

/// `deg_X` bound on `h`: `max(d, (2k+1)·max deg gᵢ)`.
pub fn ell_bound(p: &CylinderProblem, k: u32) -> u32 {
    let gd = p.g.iter().map(BlockedPoly::total_degree).max().unwrap_or(0);
    p.d().max((2 * k + 1) * gd)
}

/// Whether `2k + 1 ≥ 4λs/f` holds exactly.
pub fn k_condition_holds(lambda: &Rational, k: u32, s: usize, fstar: &Rational) -> bool {
    Rational::from_integer(BigInt::from(2 * k + 1)) * fstar >= Rational::from_integer(BigInt::from(4 * s)) * lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certified::certified_cylinder_min;
    use crate::poly::rat;
    use crate::problem::Variant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(shape: BlockShape, terms: &[(&[u32], Rational)]) -> BlockedPoly {
        BlockedPoly::from_terms(shape, terms.iter().map(|(e, c)| (e.to_vec(), c.clone())))
    }

    fn interval_g() -> BlockedPoly {
        // (X - 1/4)(1/2 - X)
        p(BlockShape::new(1, 0, 0), &[(&[2], rat(-1, 1)), (&[1], rat(3, 4)), (&[0], rat(-1, 8))])
    }

    fn r1_problem(f: BlockedPoly) -> CylinderProblem {
        CylinderProblem::new(Variant::R1AnyM, 1, 1, 2, Frame::Simplex, f, vec![interval_g()], true).unwrap()
    }

    #[test]
    fn quartic_instance_matches_independent_expansion() {
        let s = BlockShape::new(1, 2, 0);
        // f = (1 + X)(Y1^4 + Y2^4) + 1
        let f = p(s, &[(&[0, 4, 0], rat(1, 1)), (&[1, 4, 0], rat(1, 1)), (&[0, 0, 4], rat(1, 1)), (&[1, 0, 4], rat(1, 1)), (&[0, 0, 0], rat(1, 1))]);
        let g = interval_g();
        let q = CylinderProblem::new(Variant::QuarticR2, 1, 2, 4, Frame::Simplex, f, vec![g.clone()], true).unwrap();
        // independent: (Y1^2+Y2^2+Z^2)^2 written out, and g (k = 0) or g(g-1)^2 (k = 1)
        let hs = q.homogenized_shape();
        let mut sq = BlockedPoly::zero(hs);
        for (e, c) in [([0, 4, 0, 0], 1), ([0, 0, 4, 0], 1), ([0, 0, 0, 4], 1), ([0, 2, 2, 0], 2), ([0, 2, 0, 2], 2), ([0, 0, 2, 2], 2)] {
            sq.add_term(e.to_vec(), rat(c, 1));
        }
        let g1 = g.embed(hs).unwrap();
        let gm1 = g1.sub(&BlockedPoly::one(hs)).unwrap();
        assert_eq!(build_h(&q, &rat(1, 1), 0).unwrap(), q.f_bar().sub(&sq.multiply(&g1).unwrap()).unwrap());
        let damp = g1.multiply(&gm1).unwrap().multiply(&gm1).unwrap();
        let expected = q.f_bar().sub(&sq.multiply(&damp).unwrap().scale(&rat(1, 3))).unwrap();
        assert_eq!(build_h(&q, &rat(1, 3), 1).unwrap(), expected);
    }

    #[test]
    fn small_lambda_is_a_small_change() {
        let s = BlockShape::new(1, 1, 0);
        let f = p(s, &[(&[1, 2], rat(1, 1)), (&[1, 0], rat(1, 1)), (&[0, 0], rat(1, 1))]);
        let q = r1_problem(f);
        let lam = rat(1, 1_000_000);
        let h = build_h(&q, &lam, 0).unwrap();
        let diff = h.sub(&q.f_bar()).unwrap().norm_bullet();
        // maxcoef(P) = 2, ‖g(g−1)‖• ≤ 2 for this g
        assert!(diff <= lam * rat(4, 1), "{diff}");
    }

    #[test]
    fn split_bidegrees() {
        let s = BlockShape::new(1, 1, 1);
        // f = (1 + X) Y1^2 Y2^2 + Y1^2 + Y2^2 + 1
        let f = p(s, &[(&[0, 2, 2], rat(1, 1)), (&[1, 2, 2], rat(1, 1)), (&[0, 2, 0], rat(1, 1)), (&[0, 0, 2], rat(1, 1)), (&[0, 0, 0], rat(1, 1))]);
        let q = CylinderProblem::new(Variant::SplitMBy2, 1, 1, 2, Frame::Simplex, f, vec![interval_g()], true).unwrap();
        let h = build_h(&q, &rat(1, 2), 1).unwrap();
        let hs = h.shape();
        let z1 = hs.index(Var::H(Homogenizer::Z1)).unwrap();
        let z2 = hs.index(Var::H(Homogenizer::Z2)).unwrap();
        let y1 = hs.index(Var::Y1(0)).unwrap();
        let y2 = hs.index(Var::Y2(0)).unwrap();
        assert!(h.is_homogeneous_in(&[y1, z1], 2));
        assert!(h.is_homogeneous_in(&[y2, z2], 2));
        assert_eq!(h.block_degree(Block::X), 6);
    }

    #[test]
    fn k_rule() {
        assert_eq!(k_for_lambda(&rat(1, 4), 1, &rat(1, 1)), 0);
        assert_eq!(k_for_lambda(&rat(1, 1), 1, &rat(1, 1)), 2);
        assert_eq!(k_for_lambda(&rat(1, 1), 1, &rat(1, 4)), 8);
        for (l, f) in [(rat(3, 7), rat(1, 9)), (rat(5, 1), rat(2, 3))] {
            let k = k_for_lambda(&l, 3, &f);
            assert!(k_condition_holds(&l, k, 3, &f));
            assert!(k == 0 || !k_condition_holds(&l, k - 1, 3, &f));
        }
    }

    fn check_params(q: &CylinderProblem, pp: &PerturbationParams) {
        assert!(k_condition_holds(&pp.lambda, pp.k, q.s(), &pp.fstar_lb));
        assert!(pp.evidence.lower_bound >= pp.threshold);
        assert!(pp.h_norm <= pp.h_norm_bound);
        assert_eq!(pp.ell, pp.h.block_degree(Block::X));
        assert!(pp.ell <= ell_bound(&pp.normalized, pp.k));
        // sampled: h ≥ ½ f• on S × C, and h ≤ f̄ where 0 ≤ g̃ ≤ 1
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fbar = q.f_bar();
        let g = &pp.normalized.g[0];
        for _ in 0..2_000 {
            let x = rat(1, 4) + Rational::new(BigInt::from(rng.random_range(0..=1024)), BigInt::from(4096));
            let t = Rational::new(BigInt::from(rng.random_range(-4096..=4096)), BigInt::from(512));
            let u = certified::rational_sphere_point(&[t]);
            let pt = vec![x.clone(), u[0].clone(), u[1].clone()];
            let hv = pp.h.eval(&pt);
            assert!(hv >= pp.threshold);
            let gv = g.eval(&[x]);
            if !gv.is_negative() && gv <= Rational::one() {
                assert!(hv <= fbar.eval(&pt));
            }
        }
    }

    #[test]
    fn already_positive_instance_needs_no_large_lambda() {
        let s = BlockShape::new(1, 1, 0);
        // X(1 + Y^2) + 1
        let f = p(s, &[(&[1, 2], rat(1, 1)), (&[1, 0], rat(1, 1)), (&[0, 0], rat(1, 1))]);
        let q = r1_problem(f);
        let fm = certified_cylinder_min(&q, &q.f_bar(), &Resolution::default()).unwrap();
        let pp = search_lambda_k(&q, &fm, &LojasiewiczSeed::default(), &SearchConfig::default()).unwrap();
        // f̄ vanishes at x = 0, Z = 0, so a positive λ is needed even here
        eprintln!("lambda {} k {} attempts {:?}", pp.lambda, pp.k, pp.attempts);
        assert!(pp.lambda <= rat(1, 1));
        check_params(&q, &pp);
    }

    #[test]
    fn negative_outside_s_forces_a_perturbation() {
        let s = BlockShape::new(1, 1, 0);
        // (X - 1/8)(1 + Y^2)
        let f = p(s, &[(&[1, 2], rat(1, 1)), (&[1, 0], rat(1, 1)), (&[0, 2], rat(-1, 8)), (&[0, 0], rat(-1, 8))]);
        let q = r1_problem(f);
        assert!(q.f_bar().eval(&[rat(0, 1), rat(0, 1), rat(1, 1)]).is_negative());
        let fm = certified_cylinder_min(&q, &q.f_bar(), &Resolution::default()).unwrap();
        let pp = search_lambda_k(&q, &fm, &LojasiewiczSeed::default(), &SearchConfig::default()).unwrap();
        assert!(pp.lambda.is_positive());
        check_params(&q, &pp);
    }

    #[test]
    fn cap_is_reported() {
        let s = BlockShape::new(1, 1, 0);
        let f = p(s, &[(&[1, 2], rat(1, 1)), (&[1, 0], rat(1, 1)), (&[0, 2], rat(-1, 8)), (&[0, 0], rat(-1, 8))]);
        let q = r1_problem(f);
        let fm = certified_cylinder_min(&q, &q.f_bar(), &Resolution::default()).unwrap();
        let cfg = SearchConfig { k_cap: 0, lambda_start: Some(rat(1, 1_000_000)), ..Default::default() };
        match search_lambda_k(&q, &fm, &LojasiewiczSeed::default(), &cfg) {
            Err(PerturbError::SearchExhausted { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn k_rule_is_the_smallest_admissible(ln in 1i64..5000, ld in 1i64..64, s in 1usize..6, fnum in 1i64..100, fden in 1i64..100) {
            let (lambda, f) = (rat(ln, ld), rat(fnum, fden));
            let k = k_for_lambda(&lambda, s, &f);
            proptest::prop_assert!(k_condition_holds(&lambda, k, s, &f));
            if k > 0 {
                proptest::prop_assert!(!k_condition_holds(&lambda, k - 1, s, &f));
            }
        }
    }
}
