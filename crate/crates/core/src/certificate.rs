//! Assembly of `f = σ_0 + Σ σ_i g_i` from the perturbation, the Pólya
//! expansion, the coefficient-form decompositions and the base
//! certificates; JSON encoding and independent verification.

use std::collections::BTreeMap;

use num_traits::{One, Signed, Zero};
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::base::{parity_monomial, parity_vector, BaseCertificate};
use crate::perturbation::PerturbationParams;
use crate::poly::{parse_rational, rat_to_string, sum_of_squares, BlockShape, BlockedPoly, Exponent, Homogenizer, PolyError, Rational, Var};
use crate::polya::PolyaResult;
use crate::problem::{CylinderProblem, Rescale, Variant};
use crate::sos::{self, SosDecomposition, SosError, SosOptions, Tier};

#[derive(Debug, Error)]
pub enum CertError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error("assembled identity differs from f (largest coefficient gap {})", rat_to_string(.0))]
    IdentityMismatch(Rational),
    #[error("identity check failed: largest coefficient of f - σ0 - Σσi·gi is {}", rat_to_string(.0))]
    IdentityFail(Rational),
    #[error("square {square} of sigma {sigma} has nonpositive weight")]
    NegativeWeight { sigma: usize, square: usize },
    #[error("degree of sigma {sigma} times g: recorded {recorded}, recomputed {actual}")]
    DegreeMetadataMismatch { sigma: usize, recorded: u32, actual: u32 },
    #[error("certificate tier {found} does not meet the demanded tier {demanded}")]
    TierInsufficient { found: String, demanded: String },
    #[error("certificate was issued for problem {found}, not {expected}")]
    ProblemMismatch { expected: String, found: String },
    #[error("degree accounting violated: {0}")]
    DegreeBound(String),
    #[error("malformed certificate: {0}")]
    Schema(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metadata {
    pub lambda: Rational,
    pub k: u32,
    pub ell: u32,
    pub polya_n: u32,
    pub polya_cap: u64,
    pub c9: u32,
    pub fstar_lb: Rational,
    pub normalization: Vec<Rational>,
    pub rescale: Option<Rescale>,
    pub archimedean_attested: bool,
    pub variant_degree: u32,
    /// `deg σ_i g_i` for `i = 0..=s` with `g_0 = 1`; zero when `σ_i = 0`.
    pub degrees: Vec<u32>,
    /// `deg` of the first summand of `σ_i g_i`, `i = 1..=s`.
    pub term_one_degrees: Vec<u32>,
    /// Largest degree among the second-summand pieces of `σ_i g_i`, `i = 0..=s`.
    pub term_two_degrees: Vec<u32>,
}

impl Metadata {
    fn to_json(&self) -> Value {
        json!({
            "lambda": rat_to_string(&self.lambda),
            "k": self.k,
            "ell": self.ell,
            "N": self.polya_n,
            "N_cap": self.polya_cap,
            "c9": self.c9,
            "fstar_lb": rat_to_string(&self.fstar_lb),
            "normalization": self.normalization.iter().map(rat_to_string).collect::<Vec<_>>(),
            "rescale": self.rescale.map(|r| r.to_json()),
            "archimedean_attested": self.archimedean_attested,
            "variant_degree": self.variant_degree,
            "degrees": self.degrees,
            "term_one_degrees": self.term_one_degrees,
            "term_two_degrees": self.term_two_degrees,
        })
    }

    fn from_json(v: &Value) -> Result<Self, CertError> {
        let bad = |k: &str| CertError::Schema(format!("metadata field {k:?}"));
        let rat = |k: &str| -> Result<Rational, CertError> {
            parse_rational(v.get(k).and_then(Value::as_str).ok_or_else(|| bad(k))?).map_err(|_| bad(k))
        };
        let int = |k: &str| -> Result<u64, CertError> { v.get(k).and_then(Value::as_u64).ok_or_else(|| bad(k)) };
        let ints = |k: &str| -> Result<Vec<u32>, CertError> {
            v.get(k)
                .and_then(Value::as_array)
                .ok_or_else(|| bad(k))?
                .iter()
                .map(|x| x.as_u64().map(|x| x as u32).ok_or_else(|| bad(k)))
                .collect()
        };
        let normalization = v
            .get("normalization")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("normalization"))?
            .iter()
            .map(|x| x.as_str().and_then(|s| parse_rational(s).ok()).ok_or_else(|| bad("normalization")))
            .collect::<Result<Vec<_>, _>>()?;
        let rescale = match v.get("rescale") {
            None | Some(Value::Null) => None,
            Some(r) => Some(Rescale { n: r.get("n").and_then(Value::as_u64).ok_or_else(|| bad("rescale"))? as usize }),
        };
        Ok(Metadata {
            lambda: rat("lambda")?,
            k: int("k")? as u32,
            ell: int("ell")? as u32,
            polya_n: int("N")? as u32,
            polya_cap: int("N_cap")?,
            c9: int("c9")? as u32,
            fstar_lb: rat("fstar_lb")?,
            normalization,
            rescale,
            archimedean_attested: v.get("archimedean_attested").and_then(Value::as_bool).ok_or_else(|| bad("archimedean_attested"))?,
            variant_degree: int("variant_degree")? as u32,
            degrees: ints("degrees")?,
            term_one_degrees: ints("term_one_degrees")?,
            term_two_degrees: ints("term_two_degrees")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PutinarCertificate {
    pub problem_hash: String,
    pub sigmas: Vec<SosDecomposition>,
    pub tier: Tier,
    pub metadata: Metadata,
}

impl PutinarCertificate {
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "problem_hash": self.problem_hash,
            "tier": self.tier.name(),
            "sigmas": self.sigmas.iter().map(SosDecomposition::to_json).collect::<Vec<_>>(),
            "metadata": self.metadata.to_json(),
        });
        if let Tier::Numeric(r) = &self.tier {
            v["residual"] = json!(rat_to_string(r));
        }
        v
    }

    pub fn from_json(v: &Value, shape: BlockShape) -> Result<Self, CertError> {
        let hash = v.get("problem_hash").and_then(Value::as_str).ok_or_else(|| CertError::Schema("missing problem_hash".into()))?;
        let tier = match v.get("tier").and_then(Value::as_str) {
            Some("exact") => Tier::Exact,
            Some("numeric") => {
                let r = v.get("residual").and_then(Value::as_str).ok_or_else(|| CertError::Schema("numeric tier without residual".into()))?;
                Tier::Numeric(parse_rational(r).map_err(|e| CertError::Schema(e.to_string()))?)
            }
            _ => return Err(CertError::Schema("missing or unknown tier".into())),
        };
        let sigmas = v
            .get("sigmas")
            .and_then(Value::as_array)
            .ok_or_else(|| CertError::Schema("missing sigmas".into()))?
            .iter()
            .map(|s| SosDecomposition::from_json(s, shape).map_err(|e| CertError::Schema(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let metadata = Metadata::from_json(v.get("metadata").ok_or_else(|| CertError::Schema("missing metadata".into()))?)?;
        Ok(PutinarCertificate { problem_hash: hash.to_string(), sigmas, tier, metadata })
    }
}

/// Sets every active sphere homogenizer (`Z`, `Z1`, `Z2`) to one.
pub fn dehomogenize_unbounded(p: &BlockedPoly) -> Result<BlockedPoly, PolyError> {
    let mut residual = p.shape();
    let homs: Vec<Homogenizer> = p.shape().homogenizers().filter(|h| *h != Homogenizer::X0).collect();
    for h in &homs {
        residual = residual.without(*h);
    }
    let one = BlockedPoly::one(residual);
    let assign: Vec<(Var, BlockedPoly)> = homs.iter().map(|h| (Var::H(*h), one.clone())).collect();
    if assign.is_empty() {
        return Ok(p.clone());
    }
    p.substitute(&assign)
}

/// Decomposes a polynomial in the unbounded variables only (shape
/// `(0, r1, r2)`) with the routine matching the variant.
pub fn sos_unbounded(variant: Variant, b: &BlockedPoly, opts: &SosOptions) -> Result<SosDecomposition, SosError> {
    let s = b.shape();
    if b.is_zero() {
        return Ok(SosDecomposition::zero(s));
    }
    match variant {
        Variant::R1AnyM => sos::sos_univariate(b, 0, opts),
        Variant::QuarticR2 => sos::sos_bivariate_quartic(b, [0, 1], opts),
        Variant::QuadraticRR => sos::sos_quadratic_form(b, &(0..s.r1).collect::<Vec<_>>()),
        Variant::SplitMBy2 => sos::sos_split(b, 0, &(1..1 + s.r2).collect::<Vec<_>>(), opts),
    }
}

/// `(Σ v² + 1)^e` as explicit squares.
fn sphere_sos(shape: BlockShape, vars: &[Var], e: u32) -> Result<SosDecomposition, PolyError> {
    let base = sum_of_squares(shape, vars)?.add(&BlockedPoly::one(shape))?;
    let half = base.pow(e / 2);
    if e % 2 == 0 {
        return Ok(SosDecomposition::single(Rational::one(), half));
    }
    let mut out = SosDecomposition::zero(shape);
    for v in vars {
        out.push(Rational::one(), BlockedPoly::var(shape, *v)?.multiply(&half)?);
    }
    out.push(Rational::one(), half);
    Ok(out)
}

/// `P(Y, 1)` as explicit squares, in the problem shape.
pub fn sphere_power_sos(p: &CylinderProblem) -> Result<SosDecomposition, PolyError> {
    let shape = p.shape();
    if p.variant.is_split() {
        let a = sphere_sos(shape, &[Var::Y1(0)], p.m / 2)?;
        let b = sphere_sos(shape, &(0..p.r).map(Var::Y2).collect::<Vec<_>>(), 1)?;
        a.product(&b)
    } else {
        sphere_sos(shape, &(0..shape.r1).map(Var::Y1).collect::<Vec<_>>(), p.m / 2)
    }
}

/// Decompositions of `b_α(Y, 1)` for every coefficient form, in the
/// problem shape. Identical forms share one decomposition.
pub fn coefficient_sos(
    p: &CylinderProblem,
    polya: &PolyaResult,
    opts: &SosOptions,
) -> Result<BTreeMap<Exponent, SosDecomposition>, SosError> {
    let shape = p.shape();
    let mut distinct: BTreeMap<String, BlockedPoly> = BTreeMap::new();
    let mut keys: Vec<(Exponent, String)> = Vec::new();
    for (alpha, b) in &polya.coefficient_forms {
        let affine = dehomogenize_unbounded(b)?;
        let key = affine.to_json().to_string();
        distinct.entry(key.clone()).or_insert(affine);
        keys.push((alpha.clone(), key));
    }
    let solved: Vec<(String, Result<SosDecomposition, SosError>)> =
        distinct.par_iter().map(|(k, b)| (k.clone(), sos_unbounded(p.variant, b, opts))).collect();
    let mut table: BTreeMap<String, SosDecomposition> = BTreeMap::new();
    for (k, r) in solved {
        table.insert(k, r?.embed(shape)?);
    }
    Ok(keys.into_iter().map(|(a, k)| (a, table[&k].clone())).collect())
}

/// `σ_0 + Σ σ_i g_i`.
pub fn combine(sigmas: &[SosDecomposition], g: &[BlockedPoly]) -> Result<BlockedPoly, PolyError> {
    let shape = sigmas[0].shape;
    let parts: Vec<Result<BlockedPoly, PolyError>> = sigmas
        .par_iter()
        .enumerate()
        .map(|(i, s)| if i == 0 { Ok(s.expand()) } else { s.expand().multiply(&g[i - 1].embed(shape)?) })
        .collect();
    let mut total = BlockedPoly::zero(shape);
    for part in parts {
        total = total.add(&part?)?;
    }
    Ok(total)
}

fn sigma_degrees(sigmas: &[SosDecomposition], g: &[BlockedPoly]) -> Vec<u32> {
    sigmas
        .iter()
        .enumerate()
        .map(|(i, s)| match (s.is_zero(), i) {
            (true, _) => 0,
            (false, 0) => s.degree(),
            (false, _) => s.degree() + g[i - 1].total_degree(),
        })
        .collect()
}

fn pull_back_sos(s: &SosDecomposition, rec: &Rescale) -> SosDecomposition {
    let mut out = SosDecomposition::zero(s.shape);
    out.tier = s.tier.clone();
    for sq in &s.squares {
        out.push(sq.w.clone(), rec.pull_back(&sq.p));
    }
    out
}

/// Final tier of an assembled certificate: exact when the identity holds
/// term by term, otherwise numeric with the measured residual.
fn settle_tier(f: &BlockedPoly, sigmas: &mut [SosDecomposition], g: &[BlockedPoly]) -> Result<Tier, CertError> {
    let declared = sigmas.iter().fold(Tier::Exact, |t, s| t.combine(&s.tier));
    let resid = f.sub(&combine(sigmas, g)?)?.max_abs_coeff();
    match declared {
        Tier::Exact if resid.is_zero() => Ok(Tier::Exact),
        Tier::Exact => Err(CertError::IdentityMismatch(resid)),
        Tier::Numeric(_) => Ok(Tier::Numeric(resid)),
    }
}

/// Inputs gathered by the pipeline for one problem in the simplex frame.
pub struct AssemblyInputs<'a> {
    /// The problem as given (box or simplex frame).
    pub original: &'a CylinderProblem,
    /// The simplex-frame problem the pieces were computed for.
    pub simplex: &'a CylinderProblem,
    pub rescale: Option<Rescale>,
    pub params: &'a PerturbationParams,
    pub polya: &'a PolyaResult,
    pub polya_cap: u64,
    pub coefficient_sos: &'a BTreeMap<Exponent, SosDecomposition>,
    pub base: &'a BTreeMap<Vec<u32>, BaseCertificate>,
}

/// Writes `f = λ P(Y,1) Σ g̃_i (g̃_i − 1)^{2k} + Σ_α b_α(Y,1)(1 − ΣX)^{α_0} X^ᾱ`
/// as an element of the quadratic module, checks the degree accounting and
/// the identity, and pulls the result back to the input frame.
pub fn assemble(inp: &AssemblyInputs) -> Result<PutinarCertificate, CertError> {
    let p = inp.simplex;
    let shape = p.shape();
    let s = p.s();
    let params = inp.params;
    let vd = p.variant_degree();
    let mut sigmas: Vec<SosDecomposition> = (0..=s).map(|_| SosDecomposition::zero(shape)).collect();

    // first summand: (λ/M_i) · P(Y,1) · ((g̃_i − 1)^k)² multiplies g_i
    let sphere = sphere_power_sos(p)?;
    let mut term_one_degrees = Vec::with_capacity(s);
    for i in 0..s {
        let gt = params.normalized.g[i].embed(shape)?;
        let q = gt.sub(&BlockedPoly::one(shape))?.pow(params.k);
        let coeff = &params.lambda / &params.normalization.scalars[i];
        let piece = sphere.scale(&coeff).times_square(&q)?;
        let deg = piece.degree() + p.g[i].total_degree();
        let expected = vd + (2 * params.k + 1) * p.g[i].total_degree();
        if deg != expected {
            return Err(CertError::DegreeBound(format!("first summand for g{}: degree {deg}, expected {expected}", i + 1)));
        }
        term_one_degrees.push(deg);
        sigmas[i + 1].extend(piece);
    }

    // second summand, one coefficient form at a time
    let xshape = p.x_shape();
    let c9 = inp.base.values().map(|b| b.degree).max().unwrap_or(0);
    let bound = vd + inp.polya.n + inp.polya.ell + c9;
    let mut term_two_degrees = vec![0u32; s + 1];
    for (alpha, sos_b) in inp.coefficient_sos {
        let v = parity_vector(alpha);
        let half: Vec<u32> = alpha.iter().zip(&v).map(|(a, b)| (a - b) / 2).collect();
        let sq = parity_monomial(xshape, &half).embed(shape)?;
        let base = inp.base.get(&v).ok_or_else(|| CertError::Schema(format!("no base certificate for parity {v:?}")))?;
        let lifted = sos_b.times_square(&sq)?;
        for (i, sig) in base.sigmas.iter().enumerate() {
            if sig.is_zero() {
                continue;
            }
            let piece = lifted.product(&sig.embed(shape)?)?;
            let deg = piece.degree() + if i == 0 { 0 } else { p.g[i - 1].total_degree() };
            if deg > bound {
                return Err(CertError::DegreeBound(format!("second summand at {alpha:?}, sigma {i}: degree {deg} above {bound}")));
            }
            term_two_degrees[i] = term_two_degrees[i].max(deg);
            sigmas[i].extend(piece);
        }
    }

    let tier = settle_tier(&p.f, &mut sigmas, &p.g)?;
    let (sigmas, tier) = match inp.rescale {
        Some(rec) => {
            let mut back: Vec<SosDecomposition> = sigmas.iter().map(|s| pull_back_sos(s, &rec)).collect();
            let t = settle_tier(&inp.original.f, &mut back, &inp.original.g)?;
            (back, if tier.is_exact() { t } else { t.combine(&Tier::Exact) })
        }
        None => (sigmas, tier),
    };
    let degrees = sigma_degrees(&sigmas, &inp.original.g);
    Ok(PutinarCertificate {
        problem_hash: inp.original.hash(),
        tier: tier.clone(),
        sigmas: sigmas.into_iter().map(|mut s| {
            s.tier = tier.clone();
            s
        }).collect(),
        metadata: Metadata {
            lambda: params.lambda.clone(),
            k: params.k,
            ell: inp.polya.ell,
            polya_n: inp.polya.n,
            polya_cap: inp.polya_cap,
            c9,
            fstar_lb: params.fstar_lb.clone(),
            normalization: params.normalization.scalars.clone(),
            rescale: inp.rescale,
            archimedean_attested: inp.original.archimedean_attested,
            variant_degree: vd,
            degrees,
            term_one_degrees,
            term_two_degrees,
        },
    })
}

/// Certificate for `f` free of the bounded variables: `σ_0` decomposes `f`
/// directly and every other `σ_i` vanishes.
pub fn assemble_unbounded_only(original: &CylinderProblem, fstar_lb: &Rational, opts: &SosOptions) -> Result<PutinarCertificate, CertError> {
    let shape = original.shape();
    let unb = BlockShape::new(0, shape.r1, shape.r2);
    let f = original.f.embed(unb)?;
    let sigma0 = sos_unbounded(original.variant, &f, opts)?.embed(shape)?;
    let mut sigmas = vec![sigma0];
    sigmas.extend(original.g.iter().map(|_| SosDecomposition::zero(shape)));
    let tier = settle_tier(&original.f, &mut sigmas, &original.g)?;
    let degrees = sigma_degrees(&sigmas, &original.g);
    Ok(PutinarCertificate {
        problem_hash: original.hash(),
        tier,
        sigmas,
        metadata: Metadata {
            lambda: Rational::zero(),
            k: 0,
            ell: 0,
            polya_n: 0,
            polya_cap: 0,
            c9: 0,
            fstar_lb: fstar_lb.clone(),
            normalization: Vec::new(),
            rescale: None,
            archimedean_attested: original.archimedean_attested,
            variant_degree: original.variant_degree(),
            degrees,
            term_one_degrees: Vec::new(),
            term_two_degrees: vec![0; original.s() + 1],
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DemandedTier {
    Exact,
    Numeric,
}

impl DemandedTier {
    pub fn name(self) -> &'static str {
        match self {
            DemandedTier::Exact => "exact",
            DemandedTier::Numeric => "numeric",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub tier: Tier,
    pub residual: Rational,
    pub degrees: Vec<u32>,
    pub squares: usize,
}

impl VerifyReport {
    pub fn to_json(&self) -> Value {
        json!({
            "status": "pass",
            "tier": self.tier.name(),
            "residual": rat_to_string(&self.residual),
            "degrees": self.degrees,
            "squares": self.squares,
        })
    }
}

/// Checks a certificate against a problem using only polynomial expansion.
pub fn verify(p: &CylinderProblem, cert: &PutinarCertificate, demanded: DemandedTier) -> Result<VerifyReport, CertError> {
    let expected = p.hash();
    if cert.problem_hash != expected {
        return Err(CertError::ProblemMismatch { expected, found: cert.problem_hash.clone() });
    }
    if cert.sigmas.len() != p.s() + 1 {
        return Err(CertError::Schema(format!("{} sigmas for {} constraints", cert.sigmas.len(), p.s())));
    }
    if demanded == DemandedTier::Exact && !cert.tier.is_exact() {
        return Err(CertError::TierInsufficient { found: cert.tier.name().into(), demanded: demanded.name().into() });
    }
    for (i, s) in cert.sigmas.iter().enumerate() {
        if let Some(j) = s.squares.iter().position(|sq| !sq.w.is_positive()) {
            return Err(CertError::NegativeWeight { sigma: i, square: j });
        }
    }
    let resid = p.f.sub(&combine(&cert.sigmas, &p.g)?)?.max_abs_coeff();
    let ok = match cert.tier {
        Tier::Exact => resid.is_zero(),
        Tier::Numeric(_) => resid <= sos::numeric_tolerance(&p.f),
    };
    if !ok {
        return Err(CertError::IdentityFail(resid));
    }
    let degrees = sigma_degrees(&cert.sigmas, &p.g);
    for (i, (&rec, &act)) in cert.metadata.degrees.iter().zip(&degrees).enumerate() {
        if rec != act {
            return Err(CertError::DegreeMetadataMismatch { sigma: i, recorded: rec, actual: act });
        }
    }
    if cert.metadata.degrees.len() != degrees.len() {
        return Err(CertError::Schema("degree list length".into()));
    }
    Ok(VerifyReport {
        tier: cert.tier.clone(),
        residual: resid,
        squares: cert.sigmas.iter().map(|s| s.squares.len()).sum(),
        degrees,
    })
}
