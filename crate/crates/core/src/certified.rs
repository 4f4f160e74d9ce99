//! Rigorous lower bounds for forms over `Δ̃_n × spheres` or `S × spheres`.
//!
//! The sphere factors are covered by cube-face charts: on the chart of
//! coordinate `c` the point is `v` with `v_c = 1` and the remaining
//! coordinates in `[-1, 1]`; the value on the sphere is `F(x, v) / |v|^deg`.
//! Even degrees make the antipodal faces redundant.
//!
//! Cells are boxes in `x` and chart coordinates. Each cell is bounded by an
//! exact Taylor expansion around its dyadic center in integer arithmetic,
//! with monotonicity reduction in `x` and ratio bounds that are exact when the
//! numerator is proportional to the sphere norm. Cells are refined best-first.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::poly::{rat_to_string, Block, BlockShape, BlockedPoly, Homogenizer, Rational};
use crate::problem::{CylinderProblem, Variant};

#[derive(Debug, Error, Clone)]
pub enum EvalError {
    #[error("nonpositive value {} found at x = {:?}", rat_to_string(&.0.value), .0.x_strings())]
    NonpositiveWitness(Box<SamplePoint>),
    #[error("value {} below threshold {} at x = {:?}", rat_to_string(&witness.value), rat_to_string(threshold), witness.x_strings())]
    BelowThreshold { threshold: Rational, witness: Box<SamplePoint> },
    #[error("resolution exhausted after {cells} cells (depth {depth}), lower bound {}", rat_to_string(lower_bound))]
    ResolutionExhausted { lower_bound: Rational, depth: u32, cells: usize, witness: Option<Box<SamplePoint>> },
    #[error("domain is empty at the explored resolution")]
    EmptyDomain,
    #[error("target is not a form of even degree on the declared sphere groups: {0}")]
    NotHomogeneous(String),
}

/// A set of variables restricted to the unit sphere, with the degree of the
/// target in those variables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SphereGroup {
    pub vars: Vec<usize>,
    pub degree: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    SimplexTimesSphere,
    STimesSphere,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::SimplexTimesSphere => "simplex_times_sphere",
            Domain::STimesSphere => "s_times_sphere",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Goal {
    /// Stop once the lower bound is within `rel_slack · |best sample|` of the best sample.
    Minimize { rel_slack: Rational },
    /// Certify `min >= threshold`, or return a sample below it.
    AtLeast(Rational),
    /// Certify `min > 0`, or return a sample `<= 0`.
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolution {
    /// Maximum number of bisections per coordinate.
    pub max_depth: u32,
    pub max_cells: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution { max_depth: 24, max_cells: 400_000 }
    }
}

/// A point of the domain: `x` and one unnormalized direction per sphere
/// group. `value` is the exact value on the sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePoint {
    pub x: Vec<Rational>,
    pub directions: Vec<Vec<Rational>>,
    pub value: Rational,
}

impl SamplePoint {
    fn x_strings(&self) -> Vec<String> {
        self.x.iter().map(rat_to_string).collect()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "x": self.x_strings(),
            "directions": self.directions.iter().map(|d| d.iter().map(rat_to_string).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "value": rat_to_string(&self.value),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzData {
    pub l_x: Rational,
    pub l_sphere: Rational,
    pub sup_bound: Rational,
    /// Rational upper bound for `√n` used in `l_x`.
    pub sqrt_n: Rational,
}

impl LipschitzData {
    pub fn to_json(&self) -> Value {
        json!({
            "L_x": rat_to_string(&self.l_x),
            "L_sphere": rat_to_string(&self.l_sphere),
            "sup_bound": rat_to_string(&self.sup_bound),
            "sqrt_n_upper": rat_to_string(&self.sqrt_n),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertifiedMin {
    pub lower_bound: Rational,
    pub best_sample: Option<SamplePoint>,
    pub grid_depth: u32,
    pub cells: usize,
    pub lipschitz: Option<LipschitzData>,
    pub domain: Domain,
}

impl CertifiedMin {
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "lower_bound": rat_to_string(&self.lower_bound),
            "depth": self.grid_depth,
            "cells": self.cells,
            "domain": self.domain.name(),
            "witness": self.best_sample.as_ref().map(SamplePoint::to_json),
        });
        if let Some(l) = &self.lipschitz {
            v["lipschitz"] = l.to_json();
        }
        v
    }
}

/// Smallest `k / 2^20` with `(k / 2^20)^2 >= n`.
pub fn sqrt_upper(n: u64) -> Rational {
    let scaled: BigInt = BigInt::from(n) << 40usize;
    let mut s = scaled.sqrt();
    if &s * &s < scaled {
        s += 1;
    }
    Rational::new(s, BigInt::one() << 20)
}

/// Uniform bound on `|f̄|` over `Δ̃_n × C^r`:
/// `‖f‖• · binom(m+r, r) · (d+1)`, or `½‖f‖•(m+1)(r+1)(r+2)(d+1)` in the split case.
pub fn sup_bound(f: &BlockedPoly, d: u32, m: u32, r: usize, variant: Variant) -> Rational {
    f.norm_bullet() * variant.coefficient_count(m, r) * Rational::from_integer(BigInt::from(d + 1))
}

/// Lipschitz data for `f̄`: `L_x = ½√n‖f‖• C d(d+1)` with `C` the coefficient
/// count of the variant, `L_sphere` = total sphere degree times the sup bound.
pub fn lipschitz_constants(f: &BlockedPoly, n: usize, d: u32, m: u32, r: usize, variant: Variant) -> LipschitzData {
    let sqrt_n = sqrt_upper(n as u64);
    let c = variant.coefficient_count(m, r);
    let dd = Rational::from_integer(BigInt::from(u64::from(d) * u64::from(d + 1)));
    let l_x = f.norm_bullet() * &c * dd * &sqrt_n / Rational::from_integer(BigInt::from(2));
    let sup = sup_bound(f, d, m, r, variant);
    let total = if variant.is_split() { m + 2 } else { m };
    let l_sphere = &sup * Rational::from_integer(BigInt::from(total));
    LipschitzData { l_x, l_sphere, sup_bound: sup, sqrt_n }
}

/// Exact rational point on the unit sphere in `R^{k+1}` by inverse
/// stereographic projection of `t ∈ Q^k`.
pub fn rational_sphere_point(t: &[Rational]) -> Vec<Rational> {
    let s2: Rational = t.iter().map(|v| v * v).fold(Rational::zero(), |a, b| a + b);
    let den = Rational::one() + &s2;
    let mut out: Vec<Rational> = t.iter().map(|v| Rational::from_integer(2.into()) * v / &den).collect();
    out.push((Rational::one() - s2) / den);
    out
}

/// Sphere groups implied by the active homogenizers of a shape: `Y1 ∪ Y2 ∪ {Z}`
/// when `Z` is active, `Y1 ∪ {Z1}` and `Y2 ∪ {Z2}` when the split pair is.
pub fn infer_groups(p: &BlockedPoly) -> Result<Vec<SphereGroup>, EvalError> {
    let s = p.shape();
    let mut groups = Vec::new();
    if s.has(Homogenizer::Z) {
        let vars: Vec<usize> = s
            .block_indices(Block::Y1)
            .chain(s.block_indices(Block::Y2))
            .chain([s.index(crate::poly::Var::H(Homogenizer::Z)).unwrap()])
            .collect();
        groups.push(vars);
    } else if s.has(Homogenizer::Z1) && s.has(Homogenizer::Z2) {
        groups.push(s.block_indices(Block::Y1).chain([s.index(crate::poly::Var::H(Homogenizer::Z1)).unwrap()]).collect());
        groups.push(s.block_indices(Block::Y2).chain([s.index(crate::poly::Var::H(Homogenizer::Z2)).unwrap()]).collect());
    } else {
        return Err(EvalError::NotHomogeneous(format!("shape {s} has no sphere homogenizer")));
    }
    groups
        .into_iter()
        .map(|vars| {
            let degree = p.degree_in(&vars);
            if !p.is_homogeneous_in(&vars, degree) {
                return Err(EvalError::NotHomogeneous(format!("not homogeneous in variables {vars:?}")));
            }
            Ok(SphereGroup { vars, degree })
        })
        .collect()
}

/// Dense row-major coefficient layout over `dims` coordinates.
#[derive(Clone, Debug)]
struct Layout {
    degs: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
    /// Per flat index: whether every exponent is even, and the mask of
    /// coordinates with a positive exponent.
    info: Vec<(bool, u32)>,
}

impl Layout {
    fn new(degs: Vec<usize>) -> Self {
        let dims = degs.len();
        let mut strides = vec![1usize; dims];
        for i in (0..dims.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * (degs[i + 1] + 1);
        }
        let len = degs.iter().map(|d| d + 1).product::<usize>();
        let info = (0..len)
            .map(|flat| {
                let mut even = true;
                let mut mask = 0u32;
                for i in 0..dims {
                    let b = (flat / strides[i]) % (degs[i] + 1);
                    if b > 0 {
                        mask |= 1 << i;
                        even &= b % 2 == 0;
                    }
                }
                (even, mask)
            })
            .collect();
        Layout { degs, strides, len, info }
    }

    fn flat(&self, exp: &[usize]) -> usize {
        exp.iter().zip(&self.strides).map(|(e, s)| e * s).sum()
    }

    /// Coefficients of `p(x)` with `x_i = (c_i + t_i) / 2^{e_i}`, scaled by
    /// `2^{Σ e_i deg_i}` so that they stay integral.
    fn shift(&self, coeffs: &[BigInt], c: &[BigInt], e: &[u32]) -> Vec<BigInt> {
        let mut a = coeffs.to_vec();
        for i in 0..self.degs.len() {
            let deg = self.degs[i];
            if deg == 0 {
                continue;
            }
            let stride = self.strides[i];
            let block = stride * (deg + 1);
            for outer in (0..self.len).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    if (0..=deg).all(|j| a[base + j * stride].is_zero()) {
                        continue;
                    }
                    for j in 0..deg {
                        let sh = e[i] as usize * (deg - j);
                        if sh > 0 {
                            a[base + j * stride] <<= sh;
                        }
                    }
                    if !c[i].is_zero() {
                        for k in 0..deg {
                            for j in (k..deg).rev() {
                                let t = &c[i] * &a[base + (j + 1) * stride];
                                a[base + j * stride] += t;
                            }
                        }
                    }
                }
            }
        }
        a
    }

    fn scale_bits(&self, e: &[u32]) -> usize {
        self.degs.iter().zip(e).map(|(d, e)| d * *e as usize).sum()
    }

    /// Lower bound of `Σ q_β t^β` over `t ∈ [-1,1]^dims`, ignoring
    /// coordinates in `fixed` (those have `t = 0`).
    fn lower(&self, q: &[BigInt], fixed: u32) -> BigInt {
        let mut acc = q[0].clone();
        for (k, qk) in q.iter().enumerate().skip(1) {
            let (even, mask) = self.info[k];
            if mask & fixed != 0 || qk.is_zero() {
                continue;
            }
            if even {
                if qk.is_negative() {
                    acc += qk;
                }
            } else {
                acc -= qk.abs();
            }
        }
        acc
    }

    fn upper(&self, q: &[BigInt], fixed: u32) -> BigInt {
        let mut acc = q[0].clone();
        for (k, qk) in q.iter().enumerate().skip(1) {
            let (even, mask) = self.info[k];
            if mask & fixed != 0 || qk.is_zero() {
                continue;
            }
            if even {
                if qk.is_positive() {
                    acc += qk;
                }
            } else {
                acc += qk.abs();
            }
        }
        acc
    }
}

fn approx(v: &BigInt, drop: usize) -> f64 {
    (v >> drop).to_f64().unwrap_or(f64::MAX)
}

/// Integer numerators over a common denominator.
fn integer_coeffs(terms: impl Iterator<Item = (Vec<usize>, Rational)>, lay: &Layout) -> (Vec<BigInt>, BigInt) {
    let terms: Vec<(Vec<usize>, Rational)> = terms.collect();
    let den = terms.iter().fold(BigInt::one(), |acc, (_, c)| num_integer::Integer::lcm(&acc, c.denom()));
    let mut out = vec![BigInt::zero(); lay.len];
    for (e, c) in terms {
        out[lay.flat(&e)] += c.numer() * (&den / c.denom());
    }
    (out, den)
}

struct Chart {
    /// Fixed coordinate within each group.
    fixed: Vec<usize>,
    f: Vec<BigInt>,
    f_den: BigInt,
    d: Vec<BigInt>,
    /// `∂F/∂x_i` for each x coordinate (numerators over `f_den`).
    df: Vec<Vec<BigInt>>,
}

struct Engine {
    n: usize,
    groups: Vec<SphereGroup>,
    layout: Layout,
    charts: Vec<Chart>,
    /// Chart coordinate offset of each group.
    group_offset: Vec<usize>,
    g_layout: Layout,
    g: Vec<(Vec<BigInt>, BigInt)>,
    g_polys: Vec<BlockedPoly>,
    domain: Domain,
}

#[derive(Clone, Debug)]
struct Cell {
    chart: usize,
    level: Vec<u8>,
    index: Vec<u32>,
}

struct Evaluated {
    lb: Rational,
    sample: Option<SamplePoint>,
    penalty: Vec<f64>,
}

struct Item {
    lb: Rational,
    seq: u64,
    cell: Cell,
    penalty: Vec<f64>,
}

impl PartialEq for Item {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Item {}
impl PartialOrd for Item {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Item {
    // reversed so that BinaryHeap pops the smallest lower bound first
    fn cmp(&self, o: &Self) -> Ordering {
        o.lb.cmp(&self.lb).then_with(|| o.seq.cmp(&self.seq))
    }
}

impl Engine {
    fn new(
        target: &BlockedPoly,
        groups: &[SphereGroup],
        constraints: Option<&[BlockedPoly]>,
    ) -> Result<Engine, EvalError> {
        let shape = target.shape();
        let xs: Vec<usize> = shape.block_indices(Block::X).collect();
        let n = xs.len();
        let mut owner = vec![None; shape.nvars()];
        for (k, &i) in xs.iter().enumerate() {
            owner[i] = Some((usize::MAX, k));
        }
        for (gi, g) in groups.iter().enumerate() {
            if g.degree % 2 == 1 {
                return Err(EvalError::NotHomogeneous(format!("odd degree {} on a sphere group", g.degree)));
            }
            if !target.is_homogeneous_in(&g.vars, g.degree) {
                return Err(EvalError::NotHomogeneous(format!("target is not of degree {} in {:?}", g.degree, g.vars)));
            }
            for (p, &v) in g.vars.iter().enumerate() {
                owner[v] = Some((gi, p));
            }
        }
        for e in target.terms().keys() {
            for (i, &ei) in e.iter().enumerate() {
                if ei > 0 && owner[i].is_none() {
                    return Err(EvalError::NotHomogeneous(format!("variable index {i} is neither bounded nor on a sphere")));
                }
            }
        }
        let mut group_offset = Vec::new();
        let mut cd = 0;
        for g in groups {
            group_offset.push(cd);
            cd += g.vars.len() - 1;
        }
        let dims = n + cd;
        assert!(dims <= 31, "too many coordinates");
        // layout degrees: x degrees of the target, full group degree for chart coordinates
        let mut degs = vec![0usize; dims];
        for (k, &i) in xs.iter().enumerate() {
            degs[k] = target.degree_in(&[i]) as usize;
        }
        for (gi, g) in groups.iter().enumerate() {
            for k in 0..g.vars.len() - 1 {
                degs[n + group_offset[gi] + k] = g.degree as usize;
            }
        }
        let layout = Layout::new(degs);

        // chart choices: product of the fixed coordinate per group
        let mut choices: Vec<Vec<usize>> = vec![vec![]];
        for g in groups {
            choices = choices
                .into_iter()
                .flat_map(|c| {
                    (0..g.vars.len()).map(move |p| {
                        let mut c = c.clone();
                        c.push(p);
                        c
                    })
                })
                .collect();
        }
        let chart_dim = |gi: usize, p: usize, fixed: usize| -> Option<usize> {
            match p.cmp(&fixed) {
                Ordering::Equal => None,
                Ordering::Less => Some(n + group_offset[gi] + p),
                Ordering::Greater => Some(n + group_offset[gi] + p - 1),
            }
        };
        let mut charts = Vec::new();
        for fixed in choices {
            let map_exp = |e: &[u32]| -> Vec<usize> {
                let mut out = vec![0usize; dims];
                for (i, &ei) in e.iter().enumerate() {
                    if ei == 0 {
                        continue;
                    }
                    match owner[i] {
                        Some((usize::MAX, k)) => out[k] += ei as usize,
                        Some((gi, p)) => {
                            if let Some(dim) = chart_dim(gi, p, fixed[gi]) {
                                out[dim] += ei as usize;
                            }
                        }
                        None => unreachable!(),
                    }
                }
                out
            };
            let (f, f_den) = integer_coeffs(target.terms().iter().map(|(e, c)| (map_exp(e), c.clone())), &layout);
            // sphere norm: Π_g (1 + Σ s_k^2)^{deg_g/2}
            let mut dn = vec![BigInt::zero(); layout.len];
            dn[0] = BigInt::one();
            for (gi, g) in groups.iter().enumerate() {
                let mut base = vec![BigInt::zero(); layout.len];
                base[0] = BigInt::one();
                for k in 0..g.vars.len() - 1 {
                    let mut e = vec![0usize; dims];
                    e[n + group_offset[gi] + k] = 2;
                    base[layout.flat(&e)] += 1;
                }
                for _ in 0..g.degree / 2 {
                    dn = dense_mul(&layout, &dn, &base);
                }
            }
            let mut df = Vec::with_capacity(n);
            for k in 0..n {
                let mut out = vec![BigInt::zero(); layout.len];
                for (flat, c) in f.iter().enumerate() {
                    let b = (flat / layout.strides[k]) % (layout.degs[k] + 1);
                    if b > 0 && !c.is_zero() {
                        out[flat - layout.strides[k]] += c * b;
                    }
                }
                df.push(out);
            }
            charts.push(Chart { fixed, f, f_den, d: dn, df });
        }

        let g_polys: Vec<BlockedPoly> = constraints.map(|c| c.to_vec()).unwrap_or_default();
        let mut gdegs = vec![0usize; n];
        for g in &g_polys {
            let gx: Vec<usize> = g.shape().block_indices(Block::X).collect();
            if gx.len() != n {
                return Err(EvalError::NotHomogeneous("constraint has a different number of x variables".into()));
            }
            for (k, &i) in gx.iter().enumerate() {
                gdegs[k] = gdegs[k].max(g.degree_in(&[i]) as usize);
            }
        }
        let g_layout = Layout::new(gdegs);
        let g = g_polys
            .iter()
            .map(|gp| {
                let gx: Vec<usize> = gp.shape().block_indices(Block::X).collect();
                integer_coeffs(gp.terms().iter().map(|(e, c)| (gx.iter().map(|&i| e[i] as usize).collect(), c.clone())), &g_layout)
            })
            .collect();
        let domain = if constraints.is_some() { Domain::STimesSphere } else { Domain::SimplexTimesSphere };
        Ok(Engine { n, groups: groups.to_vec(), layout, charts, group_offset, g_layout, g, g_polys, domain })
    }

    fn dims(&self) -> usize {
        self.layout.degs.len()
    }

    fn param(&self, k: usize, level: u8, index: u32) -> (BigInt, u32) {
        let a = BigInt::from(index);
        if k < self.n {
            (a * 2 + 1, u32::from(level) + 1)
        } else {
            (a * 2 + 1 - (BigInt::one() << level as usize), u32::from(level))
        }
    }

    fn evaluate(&self, cell: &Cell, threshold: Option<&Rational>) -> Option<Evaluated> {
        let dims = self.dims();
        let n = self.n;
        let mut c = Vec::with_capacity(dims);
        let mut e = Vec::with_capacity(dims);
        for k in 0..dims {
            let (ck, ek) = self.param(k, cell.level[k], cell.index[k]);
            c.push(ck);
            e.push(ek);
        }
        // x part must meet the simplex
        if n > 0 {
            let lo_sum: Rational = (0..n).map(|k| Rational::new(&c[k] - 1, BigInt::one() << e[k] as usize)).sum();
            if lo_sum > Rational::one() {
                return None;
            }
        }
        // cells cut by the boundary of S are refined in x first
        let mut straddles = false;
        for (gc, _) in &self.g {
            let q = self.g_layout.shift(gc, &c[..n], &e[..n]);
            if self.g_layout.upper(&q, 0).is_negative() {
                return None;
            }
            straddles |= self.g_layout.lower(&q, 0).is_negative();
        }
        let chart = &self.charts[cell.chart];
        // monotonicity in x: move to the face where the minimum must lie
        let mut fixed = 0u32;
        let mut cc = c.clone();
        for k in 0..n {
            let q = self.layout.shift(&chart.df[k], &c, &e);
            if !self.layout.lower(&q, 0).is_negative() {
                fixed |= 1 << k;
                cc[k] = &c[k] - 1;
            } else if !self.layout.upper(&q, 0).is_positive() {
                fixed |= 1 << k;
                cc[k] = &c[k] + 1;
            }
        }
        let qf = self.layout.shift(&chart.f, &cc, &e);
        let qd = self.layout.shift(&chart.d, &cc, &e);
        let qd0 = qd[0].clone();
        let t0 = Rational::new(qf[0].clone(), &chart.f_den * &qd0);
        let g: Vec<BigInt> = qf.iter().zip(&qd).map(|(a, b)| a * &qd0 - &qf[0] * b).collect();
        let glb = self.layout.lower(&g, fixed);
        let mut lb = t0.clone();
        if glb.is_negative() {
            let scale = (&chart.f_den * &qd0) << self.layout.scale_bits(&e);
            lb += Rational::new(glb, scale) / self.sphere_norm_lower(cell, &c, &e);
        }
        if let Some(t) = threshold {
            if lb < *t {
                let tn = t.numer();
                let td = t.denom();
                let fd = &chart.f_den * tn;
                let gt: Vec<BigInt> = qf.iter().zip(&qd).map(|(a, b)| a * td - &fd * b).collect();
                if !self.layout.lower(&gt, fixed).is_negative() {
                    lb = t.clone();
                }
            }
        }
        let drop = self.layout.scale_bits(&e).saturating_sub(600) + (qd0.bits() as usize).saturating_sub(200);
        let mut penalty = vec![0.0f64; dims];
        for (k, gk) in g.iter().enumerate().skip(1) {
            let (even, mask) = self.layout.info[k];
            if mask & fixed != 0 || gk.is_zero() || (even && gk.is_positive()) {
                continue;
            }
            let a = approx(&gk.abs(), drop);
            for (d, p) in penalty.iter_mut().enumerate() {
                if mask & (1 << d) != 0 {
                    *p += a;
                }
            }
        }
        if straddles {
            for (k, p) in penalty.iter_mut().enumerate().take(n) {
                *p = f64::MAX / f64::from(1u32 << cell.level[k].min(30));
            }
        }
        // the expansion point, kept as a sample if it lies in the domain
        let point = |k: usize| Rational::new(cc[k].clone(), BigInt::one() << e[k] as usize);
        let x: Vec<Rational> = (0..n).map(point).collect();
        let in_domain = x.iter().all(|v| !v.is_negative())
            && x.iter().fold(Rational::zero(), |a, b| a + b) <= Rational::one()
            && self.g_polys.iter().all(|g| !g.eval(&x).is_negative());
        let sample = in_domain.then(|| {
            let directions = self
                .groups
                .iter()
                .enumerate()
                .map(|(gi, g)| {
                    (0..g.vars.len())
                        .map(|p| match p.cmp(&chart.fixed[gi]) {
                            Ordering::Equal => Rational::one(),
                            Ordering::Less => point(n + self.group_offset[gi] + p),
                            Ordering::Greater => point(n + self.group_offset[gi] + p - 1),
                        })
                        .collect()
                })
                .collect();
            SamplePoint { x: x.clone(), directions, value: t0.clone() }
        });
        Some(Evaluated { lb, sample, penalty })
    }

    /// Lower bound of `Π_g (1 + Σ s_k^2)^{deg_g/2}` on the cell.
    fn sphere_norm_lower(&self, _cell: &Cell, c: &[BigInt], e: &[u32]) -> Rational {
        let mut acc = Rational::one();
        for (gi, g) in self.groups.iter().enumerate() {
            let mut s = Rational::one();
            for k in 0..g.vars.len() - 1 {
                let d = self.n + self.group_offset[gi] + k;
                let den = BigInt::one() << e[d] as usize;
                let lo = Rational::new(&c[d] - 1, den.clone());
                let hi = Rational::new(&c[d] + 1, den);
                if lo.is_negative() && hi.is_positive() {
                    continue;
                }
                let m = if lo.abs() < hi.abs() { lo } else { hi };
                s += &m * &m;
            }
            acc *= num_traits::pow(s, (g.degree / 2) as usize);
        }
        acc
    }
}

fn dense_mul(lay: &Layout, a: &[BigInt], b: &[BigInt]) -> Vec<BigInt> {
    let dims = lay.degs.len();
    let unflat = |f: usize| -> Vec<usize> { (0..dims).map(|i| (f / lay.strides[i]) % (lay.degs[i] + 1)).collect() };
    let mut out = vec![BigInt::zero(); lay.len];
    for (i, x) in a.iter().enumerate() {
        if x.is_zero() {
            continue;
        }
        let ei = unflat(i);
        for (j, y) in b.iter().enumerate() {
            if y.is_zero() {
                continue;
            }
            let ej = unflat(j);
            let e: Vec<usize> = ei.iter().zip(&ej).map(|(p, q)| p + q).collect();
            assert!(e.iter().zip(&lay.degs).all(|(p, d)| p <= d), "product exceeds layout");
            out[lay.flat(&e)] += x * y;
        }
    }
    out
}

/// Certified minimum of a form over `Δ̃_n × Π spheres`, or over
/// `S × Π spheres` when `constraints` (polynomials in the X block) are given.
pub fn certified_min(
    target: &BlockedPoly,
    groups: &[SphereGroup],
    constraints: Option<&[BlockedPoly]>,
    goal: &Goal,
    res: &Resolution,
) -> Result<CertifiedMin, EvalError> {
    let engine = Engine::new(target, groups, constraints)?;
    let dims = engine.dims();
    let threshold = match goal {
        Goal::AtLeast(t) => Some(t.clone()),
        Goal::Positive => Some(Rational::zero()),
        Goal::Minimize { .. } => None,
    };
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut cells = 0usize;
    let mut depth = 0u32;
    let mut best: Option<SamplePoint> = None;

    let mut admit = |ev: Evaluated, parent_lb: Option<&Rational>, cell: Cell, heap: &mut BinaryHeap<Item>, best: &mut Option<SamplePoint>| -> Result<(), EvalError> {
        if let Some(s) = ev.sample {
            match goal {
                Goal::Positive if !s.value.is_positive() => return Err(EvalError::NonpositiveWitness(Box::new(s))),
                Goal::AtLeast(t) if s.value < *t => {
                    return Err(EvalError::BelowThreshold { threshold: t.clone(), witness: Box::new(s) })
                }
                _ => {}
            }
            if best.as_ref().is_none_or(|b| s.value < b.value) {
                *best = Some(s);
            }
        }
        let lb = match parent_lb {
            Some(p) if *p > ev.lb => p.clone(),
            _ => ev.lb,
        };
        seq += 1;
        heap.push(Item { lb, seq, cell, penalty: ev.penalty });
        Ok(())
    };

    for chart in 0..engine.charts.len() {
        let cell = Cell { chart, level: vec![0; dims], index: vec![0; dims] };
        cells += 1;
        if let Some(ev) = engine.evaluate(&cell, threshold.as_ref()) {
            admit(ev, None, cell, &mut heap, &mut best)?;
        }
    }

    let finish = |lb: Rational, best: Option<SamplePoint>, depth: u32, cells: usize| CertifiedMin {
        lower_bound: lb,
        best_sample: best,
        grid_depth: depth,
        cells,
        lipschitz: None,
        domain: engine.domain,
    };

    loop {
        // every cell discarded: the domain is empty
        let Some(top) = heap.peek() else {
            return Err(EvalError::EmptyDomain);
        };
        let top_lb = top.lb.clone();
        let done = match goal {
            Goal::Positive => top_lb.is_positive(),
            Goal::AtLeast(t) => top_lb >= *t,
            Goal::Minimize { rel_slack } => {
                best.as_ref().is_some_and(|b| top_lb >= &b.value - rel_slack * b.value.abs())
            }
        };
        if done {
            return Ok(finish(top_lb, best, depth, cells));
        }
        if cells >= res.max_cells {
            return exhausted(goal, top_lb, best, depth, cells, &finish);
        }
        let item = heap.pop().expect("peeked");
        let Some(dim) = choose_dim(&item.cell, &item.penalty, engine.n, res.max_depth) else {
            heap.push(item);
            return exhausted(goal, top_lb, best, depth, cells, &finish);
        };
        let mut children = Vec::with_capacity(2);
        for half in 0..2u32 {
            let mut c = item.cell.clone();
            c.level[dim] += 1;
            c.index[dim] = c.index[dim] * 2 + half;
            children.push(c);
        }
        depth = depth.max(u32::from(item.cell.level[dim]) + 1);
        let evals: Vec<Option<Evaluated>> =
            children.par_iter().map(|c| engine.evaluate(c, threshold.as_ref())).collect();
        for (c, ev) in children.into_iter().zip(evals) {
            cells += 1;
            if let Some(ev) = ev {
                admit(ev, Some(&item.lb), c, &mut heap, &mut best)?;
            }
        }
    }
}

fn exhausted(
    goal: &Goal,
    lb: Rational,
    best: Option<SamplePoint>,
    depth: u32,
    cells: usize,
    finish: &dyn Fn(Rational, Option<SamplePoint>, u32, usize) -> CertifiedMin,
) -> Result<CertifiedMin, EvalError> {
    match goal {
        Goal::Minimize { .. } if best.is_some() => Ok(finish(lb, best, depth, cells)),
        _ => Err(EvalError::ResolutionExhausted { lower_bound: lb, depth, cells, witness: best.map(Box::new) }),
    }
}

fn choose_dim(cell: &Cell, penalty: &[f64], n: usize, max_depth: u32) -> Option<usize> {
    let open = |k: usize| u32::from(cell.level[k]) < max_depth;
    let mut best: Option<(usize, f64)> = None;
    for (k, &p) in penalty.iter().enumerate() {
        if open(k) && p > 0.0 && best.is_none_or(|(_, bp)| p > bp) {
            best = Some((k, p));
        }
    }
    if let Some((k, _)) = best {
        return Some(k);
    }
    // no expansion term is responsible: refine the coarsest coordinate, x first
    let dims = cell.level.len();
    (0..n).chain(n..dims).filter(|&k| open(k)).min_by_key(|&k| (cell.level[k], k >= n, k))
}

/// Certified `f•`-style minimum of a homogenized target over `S × spheres`.
/// Fails with a witness if a sampled value is `<= 0`.
pub fn certified_cylinder_min(p: &CylinderProblem, target: &BlockedPoly, res: &Resolution) -> Result<CertifiedMin, EvalError> {
    let groups = infer_groups(target)?;
    let g = p.g_in(BlockShape::new(p.n, 0, 0));
    let goal = Goal::Minimize { rel_slack: Rational::new(1.into(), 1000.into()) };
    let mut cm = certified_min(target, &groups, Some(&g), &goal, res)?;
    if let Some(b) = &cm.best_sample {
        if !b.value.is_positive() {
            return Err(EvalError::NonpositiveWitness(Box::new(b.clone())));
        }
    }
    if !cm.lower_bound.is_positive() {
        return Err(EvalError::ResolutionExhausted {
            lower_bound: cm.lower_bound,
            depth: cm.grid_depth,
            cells: cm.cells,
            witness: cm.best_sample.map(Box::new),
        });
    }
    cm.lipschitz = Some(lipschitz_constants(target, p.n, p.d(), p.m, p.r, p.variant));
    Ok(cm)
}

/// Certifies `h >= threshold` on the whole of `Δ̃_n × spheres`.
pub fn certified_excess_check(h: &BlockedPoly, threshold: &Rational, res: &Resolution) -> Result<CertifiedMin, EvalError> {
    let groups = infer_groups(h)?;
    certified_min(h, &groups, None, &Goal::AtLeast(threshold.clone()), res)
}
