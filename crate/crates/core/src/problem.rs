//! Cylinder positivity problems: variants, frames, rescaling into the
//! simplex, side conditions on the leading forms and feasibility checks.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::certified::{self, CertifiedMin, EvalError, Goal, Resolution, SamplePoint, SphereGroup};
use crate::poly::{rat_to_string, Block, BlockShape, BlockedPoly, Homogenizer, PolyError, Rational, Var};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("problem is already in the simplex frame")]
    AlreadySimplex,
    #[error("no feasible point of S found ({samples} samples, seed {seed})")]
    NoFeasibleSample { samples: usize, seed: u64 },
    #[error("leading form condition fails ({item}): value {} at {:?}", rat_to_string(&witness.value), witness.x)]
    Indefinite { item: String, witness: SamplePoint, note: Option<String> },
    #[error("leading form condition ({item}) not certified: {source}")]
    ConditionUnresolved { item: String, source: EvalError },
    #[error("malformed problem file: {0}")]
    Schema(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// One unbounded variable, any even degree.
    R1AnyM,
    /// Two unbounded variables, degree 4.
    QuarticR2,
    /// `r` unbounded variables, degree 2.
    QuadraticRR,
    /// One variable of even degree `m` times a block of `r` variables of degree 2.
    SplitMBy2,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::R1AnyM => "r1_any_m",
            Variant::QuarticR2 => "quartic_r2",
            Variant::QuadraticRR => "quadratic_rr",
            Variant::SplitMBy2 => "split_m_by_2",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Variant::R1AnyM, Variant::QuarticR2, Variant::QuadraticRR, Variant::SplitMBy2]
            .into_iter()
            .find(|v| v.name() == s)
    }

    pub fn is_split(self) -> bool {
        self == Variant::SplitMBy2
    }

    /// Shape of the polynomial ring before homogenization.
    pub fn shape(self, n: usize, r: usize) -> BlockShape {
        match self {
            Variant::R1AnyM => BlockShape::new(n, 1, 0),
            Variant::QuarticR2 => BlockShape::new(n, 2, 0),
            Variant::QuadraticRR => BlockShape::new(n, r, 0),
            Variant::SplitMBy2 => BlockShape::new(n, 1, r),
        }
    }

    fn check(self, m: u32, r: usize) -> Result<(), ProblemError> {
        let ok = match self {
            Variant::R1AnyM => r == 1 && m >= 2 && m % 2 == 0,
            Variant::QuarticR2 => r == 2 && m == 4,
            Variant::QuadraticRR => r >= 1 && m == 2,
            Variant::SplitMBy2 => r >= 1 && m >= 2 && m % 2 == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(ProblemError::Invalid(format!("variant {} does not allow m={m}, r={r}", self.name())))
        }
    }

    /// Number of monomials `Y^β` the unbounded part can carry: `binom(m+r, r)`,
    /// or `(m+1)(r+1)(r+2)/2` in the split case.
    pub fn coefficient_count(self, m: u32, r: usize) -> Rational {
        let v = match self {
            Variant::R1AnyM => crate::poly::binomial(u64::from(m) + 1, 1),
            Variant::QuarticR2 | Variant::QuadraticRR => crate::poly::binomial(u64::from(m) + r as u64, r as u64),
            Variant::SplitMBy2 => {
                return Rational::new(BigInt::from((m as u64 + 1) * (r as u64 + 1) * (r as u64 + 2)), BigInt::from(2));
            }
        };
        Rational::from_integer(BigInt::from(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    /// `S ⊂ (-1, 1)^n`, before rescaling.
    Box,
    /// `S` inside the interior of the standard simplex.
    Simplex,
}

impl Frame {
    pub fn name(self) -> &'static str {
        match self {
            Frame::Box => "box",
            Frame::Simplex => "simplex",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CylinderProblem {
    pub variant: Variant,
    pub n: usize,
    pub r: usize,
    pub m: u32,
    pub frame: Frame,
    pub f: BlockedPoly,
    pub g: Vec<BlockedPoly>,
    pub archimedean_attested: bool,
}

impl CylinderProblem {
    /// Validates the shape data and drops constant constraints. A negative
    /// constant constraint makes `S` empty and is rejected.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        variant: Variant,
        n: usize,
        r: usize,
        m: u32,
        frame: Frame,
        f: BlockedPoly,
        g: Vec<BlockedPoly>,
        archimedean_attested: bool,
    ) -> Result<Self, ProblemError> {
        variant.check(m, r)?;
        let shape = variant.shape(n, r);
        if f.shape() != shape {
            return Err(ProblemError::Invalid(format!("f has shape {}, expected {shape}", f.shape())));
        }
        if f.is_zero() {
            return Err(ProblemError::Invalid("f is the zero polynomial".into()));
        }
        if f.block_degree(Block::Y1) != m {
            return Err(ProblemError::Invalid(format!(
                "degree of f in the unbounded block is {}, variant requires {m}",
                f.block_degree(Block::Y1)
            )));
        }
        if variant.is_split() && f.block_degree(Block::Y2) != 2 {
            return Err(ProblemError::Invalid(format!(
                "degree of f in the second unbounded block is {}, split variant requires 2",
                f.block_degree(Block::Y2)
            )));
        }
        let xshape = BlockShape::new(n, 0, 0);
        let mut kept = Vec::new();
        for (i, gi) in g.into_iter().enumerate() {
            let gi = if gi.shape() == xshape { gi } else { restrict_to_x(&gi, xshape, i)? };
            if gi.total_degree() == 0 {
                if gi.constant_term().is_negative() {
                    return Err(ProblemError::Invalid(format!("constraint g{} is a negative constant", i + 1)));
                }
                continue;
            }
            kept.push(gi);
        }
        if kept.is_empty() {
            return Err(ProblemError::Invalid("at least one nonconstant constraint is required".into()));
        }
        Ok(CylinderProblem { variant, n, r, m, frame, f, g: kept, archimedean_attested })
    }

    pub fn shape(&self) -> BlockShape {
        self.variant.shape(self.n, self.r)
    }

    pub fn x_shape(&self) -> BlockShape {
        BlockShape::new(self.n, 0, 0)
    }

    pub fn s(&self) -> usize {
        self.g.len()
    }

    /// `deg_X f`.
    pub fn d(&self) -> u32 {
        self.f.block_degree(Block::X)
    }

    /// Degree of the homogenized polynomial in all unbounded variables: `m`,
    /// or `m + 2` in the split case.
    pub fn variant_degree(&self) -> u32 {
        if self.variant.is_split() { self.m + 2 } else { self.m }
    }

    pub fn homogenized_shape(&self) -> BlockShape {
        let s = self.shape();
        if self.variant.is_split() {
            s.with(Homogenizer::Z1).and_then(|s| s.with(Homogenizer::Z2)).expect("fresh shape")
        } else {
            s.with(Homogenizer::Z).expect("fresh shape")
        }
    }

    /// Homogenizes a polynomial of the problem ring in the unbounded
    /// block(s): `f̄` with `Z`, or `f̄̄` with `Z1`, `Z2`.
    pub fn homogenize(&self, p: &BlockedPoly) -> Result<BlockedPoly, ProblemError> {
        if self.variant.is_split() {
            Ok(p.homogenize_block(Block::Y1, self.m, Homogenizer::Z1)?.homogenize_block(Block::Y2, 2, Homogenizer::Z2)?)
        } else {
            Ok(p.homogenize_block(Block::Y1, self.m, Homogenizer::Z)?)
        }
    }

    pub fn f_bar(&self) -> BlockedPoly {
        self.homogenize(&self.f).expect("degree checked at construction")
    }

    /// Sphere factors of the homogenized ring together with the degree of
    /// the homogenized polynomials in each.
    pub fn sphere_groups(&self, shape: BlockShape) -> Vec<SphereGroup> {
        let idx = |v: Var| shape.index(v).expect("variable present");
        if self.variant.is_split() {
            vec![
                SphereGroup { vars: vec![idx(Var::Y1(0)), idx(Var::H(Homogenizer::Z1))], degree: self.m },
                SphereGroup {
                    vars: (0..self.r).map(|j| idx(Var::Y2(j))).chain([idx(Var::H(Homogenizer::Z2))]).collect(),
                    degree: 2,
                },
            ]
        } else {
            let r1 = self.shape().r1;
            vec![SphereGroup {
                vars: (0..r1).map(|j| idx(Var::Y1(j))).chain([idx(Var::H(Homogenizer::Z))]).collect(),
                degree: self.m,
            }]
        }
    }

    /// Constraints embedded into another shape that contains the X block.
    pub fn g_in(&self, shape: BlockShape) -> Vec<BlockedPoly> {
        self.g.iter().map(|g| g.embed(shape).expect("x-only polynomial embeds")).collect()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "n": self.n,
            "variant": self.variant.name(),
            "m": self.m,
            "r": self.r,
            "frame": self.frame.name(),
            "f": self.f.to_json(),
            "g": self.g.iter().map(|g| g.to_json()).collect::<Vec<_>>(),
            "archimedean_attested": self.archimedean_attested,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self, ProblemError> {
        let get_u = |k: &str| -> Result<u64, ProblemError> {
            v.get(k).and_then(Value::as_u64).ok_or_else(|| ProblemError::Schema(format!("missing integer field {k:?}")))
        };
        let n = get_u("n")? as usize;
        let r = get_u("r")? as usize;
        let m = get_u("m")? as u32;
        let variant = v
            .get("variant")
            .and_then(Value::as_str)
            .and_then(Variant::from_name)
            .ok_or_else(|| ProblemError::Schema("missing or unknown variant".into()))?;
        let frame = match v.get("frame").and_then(Value::as_str) {
            Some("box") => Frame::Box,
            Some("simplex") => Frame::Simplex,
            _ => return Err(ProblemError::Schema("frame must be \"box\" or \"simplex\"".into())),
        };
        let shape = variant.shape(n, r);
        let f = BlockedPoly::from_json(v.get("f").ok_or_else(|| ProblemError::Schema("missing f".into()))?, shape)
            .map_err(|e| ProblemError::Schema(e.to_string()))?;
        let garr = v.get("g").and_then(Value::as_array).ok_or_else(|| ProblemError::Schema("missing g list".into()))?;
        let xshape = BlockShape::new(n, 0, 0);
        let g = garr
            .iter()
            .map(|gv| BlockedPoly::from_json(gv, xshape).map_err(|e| ProblemError::Schema(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let att = v.get("archimedean_attested").and_then(Value::as_bool).unwrap_or(false);
        CylinderProblem::new(variant, n, r, m, frame, f, g, att)
    }

    /// SHA-256 of the canonical JSON encoding (object keys sorted).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().to_string().as_bytes()))
    }

    /// Hash of the constraint list alone, used to key base certificates.
    pub fn g_hash(&self) -> String {
        let v: Vec<Value> = self.g.iter().map(|g| g.to_json()).collect();
        hex::encode(Sha256::digest(json!({"n": self.n, "g": v}).to_string().as_bytes()))
    }
}

fn restrict_to_x(g: &BlockedPoly, xshape: BlockShape, i: usize) -> Result<BlockedPoly, ProblemError> {
    g.embed(xshape)
        .map_err(|_| ProblemError::Invalid(format!("constraint g{} depends on unbounded variables", i + 1)))
}

/// The affine change of variables `x ↦ (x + 1)/(2n)` mapping `(-1,1)^n`
/// into the interior of the simplex.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rescale {
    pub n: usize,
}

impl Rescale {
    fn image(&self, shape: BlockShape, forward: bool) -> Vec<(Var, BlockedPoly)> {
        let two_n = Rational::from_integer(BigInt::from(2 * self.n));
        (0..self.n)
            .map(|i| {
                let x = BlockedPoly::var(shape, Var::X(i)).expect("x variable");
                let one = BlockedPoly::one(shape);
                let p = if forward {
                    // inverse map x ↦ 2n x - 1, used to move polynomials into the simplex frame
                    x.scale(&two_n).sub(&one).expect("same shape")
                } else {
                    x.add(&one).expect("same shape").scale(&two_n.recip())
                };
                (Var::X(i), p)
            })
            .collect()
    }

    /// `p(2n X - 1)`: moves a box-frame polynomial into the simplex frame.
    pub fn to_simplex(&self, p: &BlockedPoly) -> BlockedPoly {
        if self.n == 0 {
            return p.clone();
        }
        p.substitute(&self.image(p.shape(), true)).expect("x substitution")
    }

    /// `p((X + 1)/(2n))`: pulls a simplex-frame polynomial back to the box frame.
    pub fn pull_back(&self, p: &BlockedPoly) -> BlockedPoly {
        if self.n == 0 {
            return p.clone();
        }
        p.substitute(&self.image(p.shape(), false)).expect("x substitution")
    }

    pub fn to_json(&self) -> Value {
        json!({"map": "x -> (x+1)/(2n)", "n": self.n})
    }
}

/// Moves a box-framed problem into the simplex frame.
pub fn rescale_to_simplex(p: &CylinderProblem) -> Result<(CylinderProblem, Rescale), ProblemError> {
    if p.frame == Frame::Simplex {
        return Err(ProblemError::AlreadySimplex);
    }
    let rec = Rescale { n: p.n };
    let out = CylinderProblem {
        f: rec.to_simplex(&p.f),
        g: p.g.iter().map(|g| rec.to_simplex(g)).collect(),
        frame: Frame::Simplex,
        ..p.clone()
    };
    Ok((out, rec))
}

/// Outcome of the leading-form side condition check, one entry per item.
#[derive(Clone, Debug)]
pub struct ConditionReport {
    pub items: Vec<(String, CertifiedMin)>,
}

/// The polynomial whose positivity on `S × sphere` expresses each item of
/// the side condition, together with its sphere groups.
pub fn leading_form_targets(p: &CylinderProblem) -> Vec<(String, BlockedPoly, Vec<SphereGroup>)> {
    let shape = p.shape();
    let y1 = shape.block_indices(Block::Y1);
    let y2 = shape.block_indices(Block::Y2);
    let keep = |pred: &dyn Fn(&[u32]) -> bool| -> BlockedPoly {
        BlockedPoly::from_terms(shape, p.f.terms().iter().filter(|(e, _)| pred(e)).map(|(e, c)| (e.clone(), c.clone())))
    };
    let deg = |e: &[u32], r: &std::ops::Range<usize>| -> u32 { e[r.clone()].iter().sum() };
    match p.variant {
        Variant::R1AnyM | Variant::QuarticR2 | Variant::QuadraticRR => {
            let form = keep(&|e| deg(e, &y1) == p.m);
            let groups = vec![SphereGroup { vars: y1.clone().collect(), degree: p.m }];
            vec![("leading form".to_string(), form, groups)]
        }
        Variant::SplitMBy2 => {
            // coefficient of Y1^m, with the Y1 power divided out
            let strip = |q: BlockedPoly| -> BlockedPoly {
                BlockedPoly::from_terms(
                    shape,
                    q.terms().iter().map(|(e, c)| {
                        let mut e = e.clone();
                        for i in y1.clone() {
                            e[i] = 0;
                        }
                        (e, c.clone())
                    }),
                )
            };
            // i + ii: that coefficient homogenized in the second block
            let top = strip(keep(&|e| deg(e, &y1) == p.m));
            let top_h = top.homogenize_block(Block::Y2, 2, Homogenizer::Z2).expect("fresh homogenizer");
            let hs = top_h.shape();
            let g12 = vec![SphereGroup {
                vars: hs.block_indices(Block::Y2).chain([hs.index(Var::H(Homogenizer::Z2)).unwrap()]).collect(),
                degree: 2,
            }];
            // ii: leading quadratic form of that coefficient
            let top_q = strip(keep(&|e| deg(e, &y1) == p.m && deg(e, &y2) == 2));
            let g2 = vec![SphereGroup { vars: y2.clone().collect(), degree: 2 }];
            // iii: quadratic part in the second block, homogenized in Y1
            let quad = keep(&|e| deg(e, &y2) == 2);
            let quad_h = quad.homogenize_block(Block::Y1, p.m, Homogenizer::Z1).expect("fresh homogenizer");
            let qs = quad_h.shape();
            let g3 = vec![
                SphereGroup {
                    vars: vec![qs.index(Var::Y1(0)).unwrap(), qs.index(Var::H(Homogenizer::Z1)).unwrap()],
                    degree: p.m,
                },
                SphereGroup { vars: qs.block_indices(Block::Y2).collect(), degree: 2 },
            ];
            vec![
                ("i+ii: top coefficient positive".to_string(), top_h, g12),
                ("ii: top quadratic form definite".to_string(), top_q, g2),
                ("iii: quadratic part definite for every y1".to_string(), quad_h, g3),
            ]
        }
    }
}

/// Certifies the leading-form condition(s) over `S × sphere`.
pub fn check_leading_form_condition(p: &CylinderProblem, res: &Resolution) -> Result<ConditionReport, ProblemError> {
    if p.frame != Frame::Simplex {
        return Err(ProblemError::Invalid("condition check expects the simplex frame".into()));
    }
    let mut items = Vec::new();
    for (name, target, groups) in leading_form_targets(p) {
        let g = p.g_in(BlockShape::new(p.n, 0, 0));
        let goal = Goal::Minimize { rel_slack: Rational::new(1.into(), 1000.into()) };
        let outcome = certified::certified_min(&target, &groups, Some(&g), &goal, res).and_then(|cm| {
            match &cm.best_sample {
                Some(b) if !b.value.is_positive() => Err(EvalError::NonpositiveWitness(Box::new(b.clone()))),
                _ if !cm.lower_bound.is_positive() => Err(EvalError::ResolutionExhausted {
                    lower_bound: cm.lower_bound.clone(),
                    depth: cm.grid_depth,
                    cells: cm.cells,
                    witness: cm.best_sample.clone().map(Box::new),
                }),
                _ => Ok(cm),
            }
        });
        match outcome {
            Ok(cm) => items.push((name, cm)),
            Err(EvalError::NonpositiveWitness(w)) => {
                let note = (p.variant == Variant::R1AnyM).then(|| {
                    "a leading coefficient that is negative on S (fully m-ic of the other sign) is not supported".to_string()
                });
                return Err(ProblemError::Indefinite { item: name, witness: *w, note });
            }
            Err(e) => return Err(ProblemError::ConditionUnresolved { item: name, source: e }),
        }
    }
    Ok(ConditionReport { items })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub feasible_point: Vec<Rational>,
    pub feasible_count: usize,
    pub containment_violations: Vec<Vec<Rational>>,
    pub samples: usize,
    pub seed: u64,
    pub archimedean_attested: bool,
}

impl ValidationReport {
    pub fn to_json(&self) -> Value {
        let pt = |v: &Vec<Rational>| v.iter().map(rat_to_string).collect::<Vec<_>>();
        json!({
            "feasible_point": pt(&self.feasible_point),
            "feasible_count": self.feasible_count,
            "containment_violations": self.containment_violations.iter().map(pt).collect::<Vec<_>>(),
            "samples": self.samples,
            "seed": self.seed,
            "archimedean_attested": self.archimedean_attested,
        })
    }
}

fn in_frame(frame: Frame, x: &[Rational]) -> bool {
    match frame {
        Frame::Box => x.iter().all(|v| v.abs() < Rational::one()),
        Frame::Simplex => {
            x.iter().all(|v| v.is_positive()) && x.iter().fold(Rational::zero(), |a, b| a + b) < Rational::one()
        }
    }
}

/// Looks for points of `S` on a deterministic grid over a window around the
/// frame, then on `samples` seeded random points. Reports the most interior
/// feasible point (largest `min g_i`) and feasible points outside the frame.
pub fn validate_problem(p: &CylinderProblem, samples: usize, seed: u64) -> Result<ValidationReport, ProblemError> {
    let (lo, hi) = match p.frame {
        Frame::Box => (Rational::from_integer((-2).into()), Rational::from_integer(2.into())),
        Frame::Simplex => (Rational::new((-1).into(), 2.into()), Rational::new(3.into(), 2.into())),
    };
    let n = p.n;
    let mut points: Vec<Vec<Rational>> = Vec::new();
    if n == 0 {
        points.push(Vec::new());
    } else {
        // total grid points kept below ~2^16
        let max_depth = (16 / n as u32).clamp(1, 6);
        for depth in 1..=max_depth {
            let steps = 1u64 << depth;
            let mut idx = vec![0u64; n];
            loop {
                points.push(
                    idx.iter()
                        .map(|&j| &lo + (&hi - &lo) * Rational::new(BigInt::from(j), BigInt::from(steps)))
                        .collect(),
                );
                let mut k = 0;
                while k < n {
                    idx[k] += 1;
                    if idx[k] <= steps {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == n {
                    break;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let den = BigInt::from(1u64 << 20);
        for _ in 0..samples {
            points.push(
                (0..n)
                    .map(|_| {
                        let u: u64 = rng.random_range(0..=(1u64 << 20));
                        &lo + (&hi - &lo) * Rational::new(BigInt::from(u), den.clone())
                    })
                    .collect(),
            );
        }
    }
    let total = points.len();
    let mut best: Option<(Rational, Vec<Rational>)> = None;
    let mut feasible = 0usize;
    let mut violations = Vec::new();
    for x in points {
        let vals: Vec<Rational> = p.g.iter().map(|g| g.eval(&x)).collect();
        let margin = vals.iter().min().cloned().unwrap_or_else(Rational::zero);
        if margin.is_negative() {
            continue;
        }
        feasible += 1;
        if !in_frame(p.frame, &x) && violations.len() < 16 {
            violations.push(x.clone());
        }
        if best.as_ref().is_none_or(|(b, _)| margin > *b) {
            best = Some((margin, x));
        }
    }
    match best {
        None => Err(ProblemError::NoFeasibleSample { samples: total, seed }),
        Some((_, x)) => Ok(ValidationReport {
            feasible_point: x,
            feasible_count: feasible,
            containment_violations: violations,
            samples: total,
            seed,
            archimedean_attested: p.archimedean_attested,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::rat;
    use num_traits::Signed;
    use proptest::prelude::*;

    fn p(shape: BlockShape, terms: &[(&[u32], Rational)]) -> BlockedPoly {
        BlockedPoly::from_terms(shape, terms.iter().map(|(e, c)| (e.to_vec(), c.clone())))
    }

    fn interval_g() -> BlockedPoly {
        p(BlockShape::new(1, 0, 0), &[(&[2], rat(-1, 1)), (&[1], rat(3, 4)), (&[0], rat(-1, 8))])
    }

    #[test]
    fn rescale_examples() {
        let xs = BlockShape::new(1, 0, 0);
        let g = p(xs, &[(&[0], rat(1, 1)), (&[2], rat(-1, 1))]);
        let f = p(BlockShape::new(1, 1, 0), &[(&[0, 2], rat(1, 1)), (&[0, 0], rat(1, 1))]);
        let prob = CylinderProblem::new(Variant::R1AnyM, 1, 1, 2, Frame::Box, f.clone(), vec![g.clone()], true).unwrap();
        let (sp, rec) = rescale_to_simplex(&prob).unwrap();
        // 1 - (2X - 1)^2 = 4X - 4X^2
        assert_eq!(sp.g[0], p(xs, &[(&[1], rat(4, 1)), (&[2], rat(-4, 1))]));
        assert_eq!(sp.f, f, "f without X is unchanged");
        assert_eq!(rec.pull_back(&sp.g[0]), g);
        assert!(matches!(rescale_to_simplex(&sp), Err(ProblemError::AlreadySimplex)));
    }

    proptest! {
        #[test]
        fn rescale_norm_growth(coeffs in proptest::collection::vec(-20i64..20, 18)) {
            // f over n = 2, d = 2, quadratic in one unbounded variable
            let s = BlockShape::new(2, 1, 0);
            let mut terms = Vec::new();
            let mut k = 0;
            for a in 0..=2u32 {
                for b in 0..=(2 - a) {
                    for y in [0u32, 1, 2] {
                        terms.push((vec![a, b, y], rat(coeffs[k], 3)));
                        k += 1;
                    }
                }
            }
            let f = BlockedPoly::from_terms(s, terms);
            let rec = Rescale { n: 2 };
            let ft = rec.to_simplex(&f);
            prop_assert!(ft.norm_bullet() <= f.norm_bullet() * rat(36, 1));
            prop_assert_eq!(rec.pull_back(&ft), f);
        }
    }

    #[test]
    fn leading_form_examples() {
        let xs = BlockShape::new(1, 0, 0);
        let s = BlockShape::new(1, 2, 0);
        let res = crate::certified::Resolution::default();
        // Y1^4 + Y2^4 + 1
        let f = p(s, &[(&[0, 4, 0], rat(1, 1)), (&[0, 0, 4], rat(1, 1)), (&[0, 0, 0], rat(1, 1))]);
        let prob = CylinderProblem::new(Variant::QuarticR2, 1, 2, 4, Frame::Simplex, f, vec![interval_g()], true).unwrap();
        let rep = check_leading_form_condition(&prob, &res).unwrap();
        let lb = &rep.items[0].1.lower_bound;
        assert!(*lb <= rat(1, 2) && *lb >= rat(1, 2) - rat(1, 1000));

        // (Y1 Y2)^2 vanishes on the axes
        let f = p(s, &[(&[0, 2, 2], rat(1, 1)), (&[0, 0, 0], rat(1, 1))]);
        let prob = CylinderProblem::new(Variant::QuarticR2, 1, 2, 4, Frame::Simplex, f, vec![interval_g()], true).unwrap();
        match check_leading_form_condition(&prob, &res) {
            Err(ProblemError::Indefinite { witness, .. }) => {
                assert!(witness.value.is_zero());
                let d = &witness.directions[0];
                assert!(d[0].is_zero() || d[1].is_zero());
            }
            other => panic!("expected indefinite, got {other:?}"),
        }

        // X1 (Y1^2 + Y2^2)^2 + 1 with min_S X1 = 1/4
        let f = p(
            s,
            &[(&[1, 4, 0], rat(1, 1)), (&[1, 2, 2], rat(2, 1)), (&[1, 0, 4], rat(1, 1)), (&[0, 0, 0], rat(1, 1))],
        );
        let prob = CylinderProblem::new(Variant::QuarticR2, 1, 2, 4, Frame::Simplex, f, vec![interval_g()], true).unwrap();
        let rep = check_leading_form_condition(&prob, &res).unwrap();
        let lb = &rep.items[0].1.lower_bound;
        assert!(*lb <= rat(1, 4) && *lb >= rat(1, 4) - rat(1, 1000));
        let _ = xs;
    }

    #[test]
    fn split_condition_items() {
        // f = (1 + X)(Y1^2 + 1)(Y2^2 + 1) + X Y1 Y2, m = 2, r = 1
        let s = BlockShape::new(1, 1, 1);
        let base = p(s, &[(&[0, 2, 0], rat(1, 1)), (&[0, 0, 0], rat(1, 1))])
            .multiply(&p(s, &[(&[0, 0, 2], rat(1, 1)), (&[0, 0, 0], rat(1, 1))]))
            .unwrap()
            .multiply(&p(s, &[(&[1, 0, 0], rat(1, 1)), (&[0, 0, 0], rat(1, 1))]))
            .unwrap();
        let f = base.add(&p(s, &[(&[1, 1, 1], rat(1, 1))])).unwrap();
        let prob = CylinderProblem::new(Variant::SplitMBy2, 1, 1, 2, Frame::Simplex, f, vec![interval_g()], true).unwrap();
        let rep = check_leading_form_condition(&prob, &crate::certified::Resolution::default()).unwrap();
        assert_eq!(rep.items.len(), 3);
        assert!(rep.items.iter().all(|(_, cm)| cm.lower_bound.is_positive()));
    }

    #[test]
    fn validation_examples() {
        let f = p(BlockShape::new(1, 1, 0), &[(&[0, 2], rat(1, 1)), (&[0, 0], rat(1, 1))]);
        let mk = |g: BlockedPoly, frame| CylinderProblem::new(Variant::R1AnyM, 1, 1, 2, frame, f.clone(), vec![g], true).unwrap();
        let xs = BlockShape::new(1, 0, 0);
        let rep = validate_problem(&mk(interval_g(), Frame::Simplex), 100, 7).unwrap();
        let x = &rep.feasible_point[0];
        assert!(*x >= rat(1, 4) && *x <= rat(1, 2));
        assert!(rep.containment_violations.is_empty());
        assert_eq!(rep, validate_problem(&mk(interval_g(), Frame::Simplex), 100, 7).unwrap());

        let empty = p(xs, &[(&[0], rat(-1, 1)), (&[2], rat(-1, 1))]);
        assert!(matches!(validate_problem(&mk(empty, Frame::Simplex), 100, 7), Err(ProblemError::NoFeasibleSample { .. })));

        let outside = p(xs, &[(&[1], rat(1, 1)), (&[0], rat(-2, 1))]);
        let rep = validate_problem(&mk(outside, Frame::Box), 100, 7).unwrap();
        assert!(!rep.containment_violations.is_empty());
    }

    #[test]
    fn constants_and_json() {
        let f = p(BlockShape::new(1, 1, 0), &[(&[0, 2], rat(1, 1)), (&[1, 0], rat(1, 1))]);
        let xs = BlockShape::new(1, 0, 0);
        let prob = CylinderProblem::new(
            Variant::R1AnyM,
            1,
            1,
            2,
            Frame::Simplex,
            f.clone(),
            vec![BlockedPoly::constant(xs, rat(3, 1)), interval_g()],
            true,
        )
        .unwrap();
        assert_eq!(prob.s(), 1);
        assert!(CylinderProblem::new(Variant::R1AnyM, 1, 1, 2, Frame::Simplex, f.clone(), vec![BlockedPoly::constant(xs, rat(-1, 1))], true).is_err());
        assert!(CylinderProblem::new(Variant::QuarticR2, 1, 1, 2, Frame::Simplex, f, vec![interval_g()], true).is_err());
        let back = CylinderProblem::from_json(&prob.to_json()).unwrap();
        assert_eq!(back, prob);
        assert_eq!(back.hash(), prob.hash());
        assert!(prob.f_bar().terms().keys().all(|e| e[1] + e[2] == 2));
        assert!(prob.g[0].eval(&[rat(3, 8)]).is_positive());
    }
}
