//! Exact sparse polynomials over blocked variables.
//!
//! Variables are split into a bounded block `X1..Xn`, one or two unbounded
//! blocks (`Y1_*`, `Y2_*`) and up to four homogenizing variables
//! (`X0`, `Z`, `Z1`, `Z2`). Exponent vectors are laid out as
//!
//! ```text
//! [X0?] [X1..Xn] [Y1_1..Y1_r1] [Y2_1..Y2_r2] [Z?] [Z1?] [Z2?]
//! ```
//!
//! where `?` marks homogenizers that are only present when active in the
//! shape. Terms live in a `BTreeMap`, so iteration order and serialization
//! are canonical.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rational = BigRational;

/// Exponent vector, laid out according to a [`BlockShape`].
pub type Exponent = Vec<u32>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolyError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(BlockShape, BlockShape),
    #[error("unknown variable {0} for shape {1}")]
    UnknownVariable(Var, BlockShape),
    #[error("target degree {target} below block degree {actual}")]
    DegreeTooLow { target: u32, actual: u32 },
    #[error("homogenizer {0:?} already active")]
    HomogenizerActive(Homogenizer),
    #[error("malformed polynomial encoding: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Homogenizer {
    X0,
    Z,
    Z1,
    Z2,
}

impl Homogenizer {
    pub const ALL: [Homogenizer; 4] = [Homogenizer::X0, Homogenizer::Z, Homogenizer::Z1, Homogenizer::Z2];

    fn bit(self) -> u8 {
        match self {
            Homogenizer::X0 => 1,
            Homogenizer::Z => 2,
            Homogenizer::Z1 => 4,
            Homogenizer::Z2 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Homogenizer::X0 => "X0",
            Homogenizer::Z => "Z",
            Homogenizer::Z1 => "Z1",
            Homogenizer::Z2 => "Z2",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Homogenizer::ALL.into_iter().find(|h| h.name() == s)
    }
}

/// The named variable blocks (homogenizers are addressed separately).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    X,
    Y1,
    Y2,
}

/// A single variable; block indices are zero based (`X(0)` is `X1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    X(usize),
    Y1(usize),
    Y2(usize),
    H(Homogenizer),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(i) => write!(f, "X{}", i + 1),
            Var::Y1(i) => write!(f, "Y1_{}", i + 1),
            Var::Y2(i) => write!(f, "Y2_{}", i + 1),
            Var::H(h) => f.write_str(h.name()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockShape {
    pub n: usize,
    pub r1: usize,
    pub r2: usize,
    homs: u8,
}

impl fmt::Display for BlockShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(n={}, r1={}, r2={}", self.n, self.r1, self.r2)?;
        for h in self.homogenizers() {
            write!(f, ", {}", h.name())?;
        }
        f.write_str(")")
    }
}

impl BlockShape {
    pub fn new(n: usize, r1: usize, r2: usize) -> Self {
        BlockShape { n, r1, r2, homs: 0 }
    }

    pub fn has(&self, h: Homogenizer) -> bool {
        self.homs & h.bit() != 0
    }

    pub fn homogenizers(&self) -> impl Iterator<Item = Homogenizer> + '_ {
        Homogenizer::ALL.into_iter().filter(|h| self.has(*h))
    }

    pub fn with(&self, h: Homogenizer) -> Result<Self, PolyError> {
        if self.has(h) {
            return Err(PolyError::HomogenizerActive(h));
        }
        Ok(BlockShape { homs: self.homs | h.bit(), ..*self })
    }

    pub fn without(&self, h: Homogenizer) -> Self {
        BlockShape { homs: self.homs & !h.bit(), ..*self }
    }

    /// Shape with the same blocks minus the bounded block.
    pub fn unbounded_part(&self) -> Self {
        BlockShape { n: 0, r1: self.r1, r2: self.r2, homs: self.homs & !Homogenizer::X0.bit() }
    }

    pub fn nvars(&self) -> usize {
        self.n + self.r1 + self.r2 + self.homs.count_ones() as usize
    }

    fn x0_offset(&self) -> usize {
        usize::from(self.has(Homogenizer::X0))
    }

    pub fn index(&self, v: Var) -> Option<usize> {
        let base = self.x0_offset();
        match v {
            Var::X(i) if i < self.n => Some(base + i),
            Var::Y1(i) if i < self.r1 => Some(base + self.n + i),
            Var::Y2(i) if i < self.r2 => Some(base + self.n + self.r1 + i),
            Var::H(Homogenizer::X0) if self.has(Homogenizer::X0) => Some(0),
            Var::H(h) if self.has(h) => {
                let mut idx = base + self.n + self.r1 + self.r2;
                for other in [Homogenizer::Z, Homogenizer::Z1, Homogenizer::Z2] {
                    if other == h {
                        return Some(idx);
                    }
                    if self.has(other) {
                        idx += 1;
                    }
                }
                None
            }
            _ => None,
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.nvars());
        if self.has(Homogenizer::X0) {
            out.push(Var::H(Homogenizer::X0));
        }
        out.extend((0..self.n).map(Var::X));
        out.extend((0..self.r1).map(Var::Y1));
        out.extend((0..self.r2).map(Var::Y2));
        for h in [Homogenizer::Z, Homogenizer::Z1, Homogenizer::Z2] {
            if self.has(h) {
                out.push(Var::H(h));
            }
        }
        out
    }

    pub fn block_vars(&self, block: Block) -> Vec<Var> {
        match block {
            Block::X => (0..self.n).map(Var::X).collect(),
            Block::Y1 => (0..self.r1).map(Var::Y1).collect(),
            Block::Y2 => (0..self.r2).map(Var::Y2).collect(),
        }
    }

    pub fn block_indices(&self, block: Block) -> std::ops::Range<usize> {
        let base = self.x0_offset();
        match block {
            Block::X => base..base + self.n,
            Block::Y1 => base + self.n..base + self.n + self.r1,
            Block::Y2 => base + self.n + self.r1..base + self.n + self.r1 + self.r2,
        }
    }

    /// Indices of `X0` (if active) and `X1..Xn`.
    pub fn bounded_indices(&self) -> std::ops::Range<usize> {
        0..self.x0_offset() + self.n
    }
}

thread_local! {
    static MULTINOMIAL_CACHE: RefCell<HashMap<Vec<u32>, BigUint>> = RefCell::new(HashMap::new());
}

/// `|a|! / (a_1! ... a_k!)`, cached per exponent.
pub fn multinomial(a: &[u32]) -> BigUint {
    let mut key: Vec<u32> = a.iter().copied().filter(|&e| e > 0).collect();
    key.sort_unstable();
    if key.len() <= 1 {
        return BigUint::one();
    }
    if let Some(v) = MULTINOMIAL_CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return v;
    }
    let mut acc = BigUint::one();
    let mut total = 0u64;
    for &e in &key {
        for j in 1..=e as u64 {
            total += 1;
            acc = acc * BigUint::from(total) / BigUint::from(j);
        }
    }
    MULTINOMIAL_CACHE.with(|c| c.borrow_mut().insert(key, acc.clone()));
    acc
}

pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for j in 0..k {
        acc = acc * BigUint::from(n - j) / BigUint::from(j + 1);
    }
    acc
}

pub fn rat(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

pub fn rat_int(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

pub fn rat_to_string(r: &Rational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Parses `"p/q"`, `"p"`, or a finite decimal such as `"-0.125"`.
pub fn parse_rational(s: &str) -> Result<Rational, PolyError> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let num: BigInt = a.trim().parse().map_err(|_| PolyError::Parse(format!("bad numerator in {s:?}")))?;
        let den: BigInt = b.trim().parse().map_err(|_| PolyError::Parse(format!("bad denominator in {s:?}")))?;
        if den.is_zero() {
            return Err(PolyError::Parse(format!("zero denominator in {s:?}")));
        }
        return Ok(Rational::new(num, den));
    }
    if let Some((ip, fp)) = s.split_once('.') {
        let neg = ip.starts_with('-');
        let digits = format!("{}{}", ip.trim_start_matches(['-', '+']), fp);
        let num: BigInt = digits.parse().map_err(|_| PolyError::Parse(format!("bad decimal {s:?}")))?;
        let den = num_traits::pow(BigInt::from(10), fp.len());
        let r = Rational::new(num, den);
        return Ok(if neg { -r } else { r });
    }
    let num: BigInt = s.parse().map_err(|_| PolyError::Parse(format!("bad rational {s:?}")))?;
    Ok(Rational::from_integer(num))
}

pub fn rat_to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or_else(|| {
        // huge numerators or denominators: fall back to a scaled quotient
        let nb = r.numer().bits() as i64;
        let db = r.denom().bits() as i64;
        let shift = nb - db;
        if shift > 1100 {
            if r.is_negative() { f64::NEG_INFINITY } else { f64::INFINITY }
        } else if shift < -1100 {
            0.0
        } else {
            let a = (r.numer() >> (nb - 60).max(0) as usize).to_f64().unwrap_or(0.0);
            let b = (r.denom() >> (db - 60).max(0) as usize).to_f64().unwrap_or(1.0);
            a / b * 2f64.powi(((nb - 60).max(0) - (db - 60).max(0)) as i32)
        }
    })
}

/// Exact sparse polynomial with rational coefficients over a [`BlockShape`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockedPoly {
    shape: BlockShape,
    terms: BTreeMap<Exponent, Rational>,
}

impl BlockedPoly {
    pub fn zero(shape: BlockShape) -> Self {
        BlockedPoly { shape, terms: BTreeMap::new() }
    }

    pub fn constant(shape: BlockShape, c: Rational) -> Self {
        let mut p = Self::zero(shape);
        if !c.is_zero() {
            p.terms.insert(vec![0; shape.nvars()], c);
        }
        p
    }

    pub fn one(shape: BlockShape) -> Self {
        Self::constant(shape, Rational::one())
    }

    pub fn var(shape: BlockShape, v: Var) -> Result<Self, PolyError> {
        let idx = shape.index(v).ok_or(PolyError::UnknownVariable(v, shape))?;
        let mut e = vec![0; shape.nvars()];
        e[idx] = 1;
        Ok(Self::monomial(shape, e, Rational::one()))
    }

    pub fn monomial(shape: BlockShape, exp: Exponent, c: Rational) -> Self {
        assert_eq!(exp.len(), shape.nvars(), "exponent length does not match shape");
        let mut p = Self::zero(shape);
        if !c.is_zero() {
            p.terms.insert(exp, c);
        }
        p
    }

    /// Builds a polynomial from `(exponent, coefficient)` pairs, summing duplicates.
    pub fn from_terms<I>(shape: BlockShape, terms: I) -> Self
    where
        I: IntoIterator<Item = (Exponent, Rational)>,
    {
        let mut p = Self::zero(shape);
        for (e, c) in terms {
            p.add_term(e, c);
        }
        p
    }

    pub fn add_term(&mut self, exp: Exponent, c: Rational) {
        debug_assert_eq!(exp.len(), self.shape.nvars());
        if c.is_zero() {
            return;
        }
        match self.terms.entry(exp) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if o.get().is_zero() {
                    o.remove();
                }
            }
        }
    }

    pub fn shape(&self) -> BlockShape {
        self.shape
    }

    pub fn terms(&self) -> &BTreeMap<Exponent, Rational> {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, exp: &[u32]) -> Rational {
        self.terms.get(exp).cloned().unwrap_or_else(Rational::zero)
    }

    pub fn constant_term(&self) -> Rational {
        self.coeff(&vec![0; self.shape.nvars()])
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    pub fn degree_in(&self, idx: &[usize]) -> u32 {
        self.terms.keys().map(|e| idx.iter().map(|&i| e[i]).sum()).max().unwrap_or(0)
    }

    /// Maximum total exponent inside a block; 0 for the zero polynomial.
    pub fn block_degree(&self, block: Block) -> u32 {
        let r: Vec<usize> = self.shape.block_indices(block).collect();
        self.degree_in(&r)
    }

    pub fn var_degree(&self, v: Var) -> u32 {
        match self.shape.index(v) {
            Some(i) => self.degree_in(&[i]),
            None => 0,
        }
    }

    fn check_shape(&self, other: &Self) -> Result<(), PolyError> {
        if self.shape != other.shape {
            return Err(PolyError::ShapeMismatch(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, PolyError> {
        self.check_shape(other)?;
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), c.clone());
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, PolyError> {
        self.check_shape(other)?;
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), -c.clone());
        }
        Ok(out)
    }

    pub fn neg(&self) -> Self {
        BlockedPoly { shape: self.shape, terms: self.terms.iter().map(|(e, c)| (e.clone(), -c.clone())).collect() }
    }

    pub fn scale(&self, s: &Rational) -> Self {
        if s.is_zero() {
            return Self::zero(self.shape);
        }
        BlockedPoly { shape: self.shape, terms: self.terms.iter().map(|(e, c)| (e.clone(), c * s)).collect() }
    }

    /// Common denominator `D` and integer numerators such that `self = P / D`.
    fn integer_form(&self) -> (BigInt, Vec<(&Exponent, BigInt)>) {
        let den = self.terms.values().fold(BigInt::one(), |acc, c| acc.lcm(c.denom()));
        let ints = self.terms.iter().map(|(e, c)| (e, c.numer() * (&den / c.denom()))).collect();
        (den, ints)
    }

    /// Exact product. Works over integer numerators with one common
    /// denominator per factor to avoid a gcd per coefficient operation.
    pub fn multiply(&self, other: &Self) -> Result<Self, PolyError> {
        self.check_shape(other)?;
        if self.is_zero() || other.is_zero() {
            return Ok(Self::zero(self.shape));
        }
        let (da, ia) = self.integer_form();
        let (db, ib) = other.integer_form();
        let mut acc: HashMap<Exponent, BigInt> = HashMap::with_capacity(ia.len() * ib.len() / 2 + 1);
        for (ea, ca) in &ia {
            for (eb, cb) in &ib {
                let e: Exponent = ea.iter().zip(eb.iter()).map(|(x, y)| x + y).collect();
                let prod = ca * cb;
                match acc.get_mut(&e) {
                    Some(v) => *v += prod,
                    None => {
                        acc.insert(e, prod);
                    }
                }
            }
        }
        let den = da * db;
        let terms = acc
            .into_iter()
            .filter(|(_, c)| !c.is_zero())
            .map(|(e, c)| (e, Rational::new(c, den.clone())))
            .collect();
        Ok(BlockedPoly { shape: self.shape, terms })
    }

    pub fn square(&self) -> Self {
        self.multiply(self).expect("same shape")
    }

    pub fn pow(&self, k: u32) -> Self {
        let mut result = Self::one(self.shape);
        let mut base = self.clone();
        let mut k = k;
        while k > 0 {
            if k & 1 == 1 {
                result = result.multiply(&base).expect("same shape");
            }
            k >>= 1;
            if k > 0 {
                base = base.square();
            }
        }
        result
    }

    /// Re-expresses the polynomial in a different shape, mapping variables by
    /// identity. Fails if a variable with nonzero exponent does not exist there.
    pub fn embed(&self, target: BlockShape) -> Result<Self, PolyError> {
        if target == self.shape {
            return Ok(self.clone());
        }
        let vars = self.shape.vars();
        let mut map = Vec::with_capacity(vars.len());
        for v in &vars {
            map.push(target.index(*v));
        }
        let mut out = Self::zero(target);
        for (e, c) in &self.terms {
            let mut ne = vec![0; target.nvars()];
            for (i, &ei) in e.iter().enumerate() {
                if ei == 0 {
                    continue;
                }
                match map[i] {
                    Some(j) => ne[j] = ei,
                    None => return Err(PolyError::UnknownVariable(vars[i], target)),
                }
            }
            out.add_term(ne, c.clone());
        }
        Ok(out)
    }

    /// Replaces variables by polynomials. Assigned homogenizers leave the
    /// shape; assigned block variables stay. Replacements must live in the
    /// residual shape.
    pub fn substitute(&self, assignments: &[(Var, BlockedPoly)]) -> Result<Self, PolyError> {
        let mut residual = self.shape;
        let mut slots: Vec<Option<&BlockedPoly>> = vec![None; self.shape.nvars()];
        for (v, _) in assignments {
            if self.shape.index(*v).is_none() {
                return Err(PolyError::UnknownVariable(*v, self.shape));
            }
            if let Var::H(h) = v {
                residual = residual.without(*h);
            }
        }
        for (v, p) in assignments {
            if p.shape != residual {
                return Err(PolyError::ShapeMismatch(p.shape, residual));
            }
            slots[self.shape.index(*v).unwrap()] = Some(p);
        }
        let vars = self.shape.vars();
        let target_idx: Vec<Option<usize>> = vars.iter().map(|v| residual.index(*v)).collect();
        let mut powers: HashMap<(usize, u32), BlockedPoly> = HashMap::new();
        let mut out = Self::zero(residual);
        for (e, c) in &self.terms {
            let mut mono = vec![0; residual.nvars()];
            let mut factor: Option<BlockedPoly> = None;
            for (i, &ei) in e.iter().enumerate() {
                if ei == 0 {
                    continue;
                }
                match slots[i] {
                    Some(rep) => {
                        let pw = powers.entry((i, ei)).or_insert_with(|| rep.pow(ei)).clone();
                        factor = Some(match factor {
                            None => pw,
                            Some(f) => f.multiply(&pw)?,
                        });
                    }
                    None => mono[target_idx[i].expect("unassigned variable stays")] = ei,
                }
            }
            let m = BlockedPoly::monomial(residual, mono, c.clone());
            let term = match factor {
                None => m,
                Some(f) => f.multiply(&m)?,
            };
            for (te, tc) in term.terms {
                out.add_term(te, tc);
            }
        }
        Ok(out)
    }

    /// Pads every term with powers of `homogenizer` so that the result is
    /// homogeneous of `target_degree` in `block ∪ {homogenizer}`.
    pub fn homogenize_block(&self, block: Block, target_degree: u32, homogenizer: Homogenizer) -> Result<Self, PolyError> {
        let actual = self.block_degree(block);
        if target_degree < actual {
            return Err(PolyError::DegreeTooLow { target: target_degree, actual });
        }
        let shape = self.shape.with(homogenizer)?;
        let idx: Vec<usize> = shape.block_indices(block).collect();
        let lifted = self.embed(shape)?;
        let hidx = shape.index(Var::H(homogenizer)).unwrap();
        let mut out = Self::zero(shape);
        for (e, c) in lifted.terms {
            let deg: u32 = idx.iter().map(|&i| e[i]).sum();
            let mut ne = e;
            ne[hidx] = target_degree - deg;
            out.add_term(ne, c);
        }
        Ok(out)
    }

    /// Weighted coefficient norm: the largest `|c| / multinomial(α)` where
    /// `α` is the exponent in the bounded block (`X0` included when active).
    /// With the unbounded blocks empty this is the classical norm.
    pub fn norm_bullet(&self) -> Rational {
        let bidx = self.shape.bounded_indices();
        self.terms
            .iter()
            .map(|(e, c)| c.abs() / Rational::from_integer(BigInt::from(multinomial(&e[bidx.clone()]))))
            .max()
            .unwrap_or_else(Rational::zero)
    }

    pub fn eval(&self, point: &[Rational]) -> Rational {
        assert_eq!(point.len(), self.shape.nvars());
        let mut cache: HashMap<(usize, u32), Rational> = HashMap::new();
        let mut acc = Rational::zero();
        for (e, c) in &self.terms {
            let mut t = c.clone();
            for (i, &ei) in e.iter().enumerate() {
                if ei == 0 {
                    continue;
                }
                let p = cache.entry((i, ei)).or_insert_with(|| num_traits::pow(point[i].clone(), ei as usize));
                t *= &*p;
            }
            acc += t;
        }
        acc
    }

    pub fn eval_f64(&self, point: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                let mut t = rat_to_f64(c);
                for (i, &ei) in e.iter().enumerate() {
                    if ei > 0 {
                        t *= point[i].powi(ei as i32);
                    }
                }
                t
            })
            .sum()
    }

    /// `max |coefficient|`, used for scale normalization.
    pub fn max_abs_coeff(&self) -> Rational {
        self.terms.values().map(|c| c.abs()).max().unwrap_or_else(Rational::zero)
    }

    /// True if every term has the same total degree over `idx`.
    pub fn is_homogeneous_in(&self, idx: &[usize], degree: u32) -> bool {
        self.terms.keys().all(|e| idx.iter().map(|&i| e[i]).sum::<u32>() == degree)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let terms: Vec<TermJson> = self
            .terms
            .iter()
            .map(|(e, c)| {
                let s = self.shape;
                let part = |b: Block| -> Option<Vec<u32>> {
                    let r = s.block_indices(b);
                    if r.is_empty() { None } else { Some(e[r].to_vec()) }
                };
                let mut h = BTreeMap::new();
                for hv in s.homogenizers() {
                    h.insert(hv.name().to_string(), e[s.index(Var::H(hv)).unwrap()]);
                }
                TermJson {
                    x: part(Block::X),
                    y1: part(Block::Y1),
                    y2: part(Block::Y2),
                    h: if h.is_empty() { None } else { Some(h) },
                    c: rat_to_string(c),
                }
            })
            .collect();
        serde_json::to_value(terms).expect("serializable")
    }

    /// Decodes the canonical term list. Blocks missing from a term are read
    /// as zero exponents.
    pub fn from_json(value: &serde_json::Value, shape: BlockShape) -> Result<Self, PolyError> {
        let terms: Vec<TermJson> =
            serde_json::from_value(value.clone()).map_err(|e| PolyError::Parse(e.to_string()))?;
        let mut out = Self::zero(shape);
        for t in terms {
            let mut e = vec![0; shape.nvars()];
            for (block, part) in [(Block::X, &t.x), (Block::Y1, &t.y1), (Block::Y2, &t.y2)] {
                let r = shape.block_indices(block);
                if let Some(v) = part {
                    if v.len() != r.len() {
                        if v.iter().all(|&x| x == 0) {
                            continue;
                        }
                        return Err(PolyError::Parse(format!(
                            "block {block:?} has {} exponents, shape expects {}",
                            v.len(),
                            r.len()
                        )));
                    }
                    e[r].copy_from_slice(v);
                }
            }
            if let Some(h) = &t.h {
                for (name, &ex) in h {
                    let hv = Homogenizer::from_name(name)
                        .ok_or_else(|| PolyError::Parse(format!("unknown homogenizer {name}")))?;
                    match shape.index(Var::H(hv)) {
                        Some(i) => e[i] = ex,
                        None if ex == 0 => {}
                        None => return Err(PolyError::Parse(format!("homogenizer {name} not active in {shape}"))),
                    }
                }
            }
            out.add_term(e, parse_rational(&t.c)?);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct TermJson {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    x: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    y1: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    y2: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    h: Option<BTreeMap<String, u32>>,
    c: String,
}

impl fmt::Display for BlockedPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        let vars = self.shape.vars();
        for (k, (e, c)) in self.terms.iter().rev().enumerate() {
            let neg = c.is_negative();
            if k > 0 {
                f.write_str(if neg { " - " } else { " + " })?;
            } else if neg {
                f.write_str("-")?;
            }
            let a = c.abs();
            let is_const = e.iter().all(|&x| x == 0);
            if !a.is_one() || is_const {
                write!(f, "{}", rat_to_string(&a))?;
                if !is_const {
                    f.write_str("*")?;
                }
            }
            let mut first = true;
            for (i, &ei) in e.iter().enumerate() {
                if ei == 0 {
                    continue;
                }
                if !first {
                    f.write_str("*")?;
                }
                first = false;
                write!(f, "{}", vars[i])?;
                if ei > 1 {
                    write!(f, "^{ei}")?;
                }
            }
        }
        Ok(())
    }
}

/// `(X_0 + X_1 + ... + X_n)` in a shape where `X0` is active.
pub fn simplex_sum(shape: BlockShape) -> BlockedPoly {
    let mut p = BlockedPoly::zero(shape);
    for i in shape.bounded_indices() {
        let mut e = vec![0; shape.nvars()];
        e[i] = 1;
        p.add_term(e, Rational::one());
    }
    p
}

/// `1 - X_1 - ... - X_n`.
pub fn one_minus_sum(shape: BlockShape) -> BlockedPoly {
    let mut p = BlockedPoly::one(shape);
    for i in shape.block_indices(Block::X) {
        let mut e = vec![0; shape.nvars()];
        e[i] = 1;
        p.add_term(e, -Rational::one());
    }
    p
}

/// Sum of squares of the given variables.
pub fn sum_of_squares(shape: BlockShape, vars: &[Var]) -> Result<BlockedPoly, PolyError> {
    let mut p = BlockedPoly::zero(shape);
    for v in vars {
        let i = shape.index(*v).ok_or(PolyError::UnknownVariable(*v, shape))?;
        let mut e = vec![0; shape.nvars()];
        e[i] = 2;
        p.add_term(e, Rational::one());
    }
    Ok(p)
}
