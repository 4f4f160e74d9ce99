//! Sums of squares: exact factorization of quadratic forms, Gram-matrix
//! feasibility by alternating projections with exact rationalization, and
//! univariate decompositions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_bigint::BigInt;
use num_complex::Complex64;
use num_traits::{One, Signed, Zero};
use serde_json::{json, Value};
use thiserror::Error;

use crate::linalg::{self, Ldl};
use crate::poly::{parse_rational, rat_to_f64, rat_to_string, BlockShape, BlockedPoly, Exponent, PolyError, Rational};

#[derive(Debug, Error)]
pub enum SosError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("quadratic form is indefinite, witness {witness:?}")]
    Indefinite { witness: Vec<String> },
    #[error("polynomial takes a negative value{}", .witness.as_ref().map(|w| format!(" at {w:?}")).unwrap_or_default())]
    NotNonnegative { witness: Option<Vec<String>> },
    #[error("Gram feasibility stalled: {0}")]
    Stalled(String),
    #[error("rationalization failed and a numeric certificate was not allowed")]
    RoundingFailedNumericForbidden,
    #[error("Gram basis of size {size} exceeds the cap {cap}")]
    BasisTooLarge { size: usize, cap: usize },
    #[error("coefficient constraints are inconsistent: {0}")]
    Inconsistent(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("schema error: {0}")]
    Schema(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tier {
    Exact,
    /// Numerical decomposition whose coefficient-wise residual is at most the bound.
    Numeric(Rational),
}

impl Tier {
    pub fn name(&self) -> &'static str {
        match self {
            Tier::Exact => "exact",
            Tier::Numeric(_) => "numeric",
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Tier::Exact)
    }

    /// The weaker of two tiers; numeric residuals add.
    pub fn combine(&self, other: &Tier) -> Tier {
        match (self, other) {
            (Tier::Exact, Tier::Exact) => Tier::Exact,
            (Tier::Numeric(a), Tier::Exact) | (Tier::Exact, Tier::Numeric(a)) => Tier::Numeric(a.clone()),
            (Tier::Numeric(a), Tier::Numeric(b)) => Tier::Numeric(a + b),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Square {
    pub w: Rational,
    pub p: BlockedPoly,
}

/// `Σ w_i p_i²` with positive weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SosDecomposition {
    pub shape: BlockShape,
    pub squares: Vec<Square>,
    pub tier: Tier,
}

impl SosDecomposition {
    pub fn zero(shape: BlockShape) -> Self {
        SosDecomposition { shape, squares: Vec::new(), tier: Tier::Exact }
    }

    pub fn one(shape: BlockShape) -> Self {
        Self::single(Rational::one(), BlockedPoly::one(shape))
    }

    pub fn single(w: Rational, p: BlockedPoly) -> Self {
        let shape = p.shape();
        let mut s = Self::zero(shape);
        s.push(w, p);
        s
    }

    /// Adds `w p²`, dropping trivial squares.
    pub fn push(&mut self, w: Rational, p: BlockedPoly) {
        if !w.is_zero() && !p.is_zero() {
            self.squares.push(Square { w, p });
        }
    }

    pub fn is_zero(&self) -> bool {
        self.squares.is_empty()
    }

    pub fn expand(&self) -> BlockedPoly {
        let mut out = BlockedPoly::zero(self.shape);
        for sq in &self.squares {
            for (e, c) in sq.p.square().scale(&sq.w).terms() {
                out.add_term(e.clone(), c.clone());
            }
        }
        out
    }

    /// Largest absolute coefficient of `target - expand()`.
    pub fn residual(&self, target: &BlockedPoly) -> Result<Rational, PolyError> {
        Ok(target.sub(&self.expand())?.max_abs_coeff())
    }

    /// Total degree of the expansion, `2·max deg p_i`.
    pub fn degree(&self) -> u32 {
        2 * self.squares.iter().map(|s| s.p.total_degree()).max().unwrap_or(0)
    }

    pub fn weights_positive(&self) -> bool {
        self.squares.iter().all(|s| s.w.is_positive())
    }

    pub fn scale(&self, c: &Rational) -> Self {
        assert!(!c.is_negative(), "SOS scaled by a negative number");
        let mut out = Self::zero(self.shape);
        out.tier = self.tier.clone();
        for sq in &self.squares {
            out.push(&sq.w * c, sq.p.clone());
        }
        out
    }

    /// `self · q²` as explicit squares.
    pub fn times_square(&self, q: &BlockedPoly) -> Result<Self, PolyError> {
        let mut out = Self::zero(self.shape);
        out.tier = self.tier.clone();
        for sq in &self.squares {
            out.push(sq.w.clone(), sq.p.multiply(q)?);
        }
        Ok(out)
    }

    /// Product of two sums of squares, `Σ_{i,j} w_i v_j (p_i q_j)²`.
    pub fn product(&self, other: &Self) -> Result<Self, PolyError> {
        let mut out = Self::zero(self.shape);
        out.tier = self.tier.combine(&other.tier);
        for a in &self.squares {
            for b in &other.squares {
                out.push(&a.w * &b.w, a.p.multiply(&b.p)?);
            }
        }
        Ok(out)
    }

    pub fn extend(&mut self, other: Self) {
        self.tier = self.tier.combine(&other.tier);
        self.squares.extend(other.squares);
    }

    pub fn embed(&self, shape: BlockShape) -> Result<Self, PolyError> {
        let mut out = Self::zero(shape);
        out.tier = self.tier.clone();
        for sq in &self.squares {
            out.push(sq.w.clone(), sq.p.embed(shape)?);
        }
        Ok(out)
    }

    /// Applies a substitution to every square base.
    pub fn substitute(&self, assignments: &[(crate::poly::Var, BlockedPoly)]) -> Result<Self, PolyError> {
        let mut out: Option<Self> = None;
        for sq in &self.squares {
            let p = sq.p.substitute(assignments)?;
            out.get_or_insert_with(|| {
                let mut z = Self::zero(p.shape());
                z.tier = self.tier.clone();
                z
            })
            .push(sq.w.clone(), p);
        }
        Ok(out.unwrap_or_else(|| {
            let shape = assignments.first().map(|(_, p)| p.shape()).unwrap_or(self.shape);
            let mut z = Self::zero(shape);
            z.tier = self.tier.clone();
            z
        }))
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "tier": self.tier.name(),
            "squares": self.squares.iter().map(|s| json!({"w": rat_to_string(&s.w), "p": s.p.to_json()})).collect::<Vec<_>>(),
        });
        if let Tier::Numeric(r) = &self.tier {
            v["residual"] = json!(rat_to_string(r));
        }
        v
    }

    pub fn from_json(v: &Value, shape: BlockShape) -> Result<Self, SosError> {
        let tier = match v.get("tier").and_then(Value::as_str) {
            Some("exact") => Tier::Exact,
            Some("numeric") => {
                let r = v.get("residual").and_then(Value::as_str).ok_or_else(|| SosError::Schema("numeric tier without residual".into()))?;
                Tier::Numeric(parse_rational(r)?)
            }
            _ => return Err(SosError::Schema("missing or unknown tier".into())),
        };
        let arr = v.get("squares").and_then(Value::as_array).ok_or_else(|| SosError::Schema("missing squares".into()))?;
        let mut squares = Vec::with_capacity(arr.len());
        for s in arr {
            let w = s.get("w").and_then(Value::as_str).ok_or_else(|| SosError::Schema("square without weight".into()))?;
            let p = s.get("p").ok_or_else(|| SosError::Schema("square without polynomial".into()))?;
            // weights are kept verbatim so a verifier can see their sign
            squares.push(Square { w: parse_rational(w)?, p: BlockedPoly::from_json(p, shape)? });
        }
        Ok(SosDecomposition { shape, squares, tier })
    }
}

#[derive(Clone, Debug)]
pub struct SosOptions {
    pub allow_numeric: bool,
    pub basis_cap: usize,
    pub max_iters: usize,
}

impl Default for SosOptions {
    fn default() -> Self {
        SosOptions { allow_numeric: true, basis_cap: 16, max_iters: 100_000 }
    }
}

/// `σ · multiplier` with `σ = mᵀ G m` over `basis`.
#[derive(Clone, Debug)]
pub struct GramBlock {
    pub multiplier: BlockedPoly,
    pub basis: Vec<Exponent>,
}

/// Find PSD `G_b` with `target = Σ_b multiplier_b · m_bᵀ G_b m_b`.
#[derive(Clone, Debug)]
pub struct GramProblem {
    pub target: BlockedPoly,
    pub blocks: Vec<GramBlock>,
}

impl GramProblem {
    pub fn single(target: BlockedPoly, basis: Vec<Exponent>) -> Self {
        let one = BlockedPoly::one(target.shape());
        GramProblem { target, blocks: vec![GramBlock { multiplier: one, basis }] }
    }
}

/// Floating Gram matrices in the units of the target.
#[derive(Clone, Debug)]
pub struct GramSolution {
    pub mats: Vec<DMatrix<f64>>,
    pub min_eigenvalue: f64,
}

fn tri(n: usize, i: usize, j: usize) -> usize {
    i * n - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Linear system of a Gram problem over upper-triangular entries.
struct Compiled {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    nv: usize,
    rows: Vec<Vec<(usize, Rational)>>,
    rhs: Vec<Rational>,
    scale: Rational,
}

impl Compiled {
    fn new(gp: &GramProblem) -> Result<Self, SosError> {
        let mut sizes = Vec::new();
        let mut offsets = Vec::new();
        let mut nv = 0;
        for b in &gp.blocks {
            let n = b.basis.len();
            sizes.push(n);
            offsets.push(nv);
            nv += n * (n + 1) / 2;
        }
        let mut index: BTreeMap<Exponent, usize> = BTreeMap::new();
        let mut rows: Vec<Vec<(usize, Rational)>> = Vec::new();
        let two = Rational::from_integer(2.into());
        for (bi, b) in gp.blocks.iter().enumerate() {
            let n = b.basis.len();
            for i in 0..n {
                for j in i..n {
                    let v = offsets[bi] + tri(n, i, j);
                    let base: Exponent = b.basis[i].iter().zip(&b.basis[j]).map(|(x, y)| x + y).collect();
                    for (e, c) in b.multiplier.terms() {
                        let mono: Exponent = base.iter().zip(e).map(|(x, y)| x + y).collect();
                        let r = *index.entry(mono).or_insert_with(|| {
                            rows.push(Vec::new());
                            rows.len() - 1
                        });
                        let coef = if i == j { c.clone() } else { c * &two };
                        rows[r].push((v, coef));
                    }
                }
            }
        }
        let mut rhs = vec![Rational::zero(); rows.len()];
        for (e, c) in gp.target.terms() {
            match index.get(e) {
                Some(&r) => rhs[r] = c.clone(),
                None => {
                    return Err(SosError::Inconsistent(format!("target monomial {e:?} is not reachable from the Gram basis")));
                }
            }
        }
        let scale = gp.target.max_abs_coeff();
        let scale = if scale.is_zero() { Rational::one() } else { scale };
        for r in rhs.iter_mut() {
            *r /= &scale;
        }
        Ok(Compiled { sizes, offsets, nv, rows, rhs, scale })
    }

    fn is_diag(&self, v: usize) -> bool {
        let (b, i, j) = self.locate(v);
        let _ = b;
        i == j
    }

    fn locate(&self, v: usize) -> (usize, usize, usize) {
        let b = self.offsets.iter().rposition(|&o| o <= v).unwrap();
        let n = self.sizes[b];
        let mut k = v - self.offsets[b];
        for i in 0..n {
            let len = n - i;
            if k < len {
                return (b, i, i + k);
            }
            k -= len;
        }
        unreachable!("variable index out of range")
    }

    /// Adds the rows `G_b k = 0` for each `(b, k)`.
    fn with_kernels(&self, kernels: &[(usize, Vec<Rational>)]) -> Compiled {
        let mut rows = self.rows.clone();
        let mut rhs = self.rhs.clone();
        for (b, k) in kernels {
            let n = self.sizes[*b];
            for i in 0..n {
                let row: Vec<(usize, Rational)> = (0..n)
                    .filter(|&j| !k[j].is_zero())
                    .map(|j| (self.offsets[*b] + tri(n, i.min(j), i.max(j)), k[j].clone()))
                    .collect();
                if !row.is_empty() {
                    rows.push(row);
                    rhs.push(Rational::zero());
                }
            }
        }
        Compiled { sizes: self.sizes.clone(), offsets: self.offsets.clone(), nv: self.nv, rows, rhs, scale: self.scale.clone() }
    }

    /// Substitutes `G_b = W_bᵀ H_b W_b`, leaving the `H_b` as unknowns.
    fn restrict(&self, faces: &[Vec<Vec<Rational>>]) -> Compiled {
        let sizes: Vec<usize> = faces.iter().map(Vec::len).collect();
        let mut offsets = Vec::new();
        let mut nv = 0;
        for &j in &sizes {
            offsets.push(nv);
            nv += j * (j + 1) / 2;
        }
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut acc: BTreeMap<usize, Rational> = BTreeMap::new();
                for (v, c) in row {
                    let (b, i, k) = self.locate(*v);
                    let w = &faces[b];
                    for a in 0..w.len() {
                        for e in a..w.len() {
                            let t = if a == e { &w[a][i] * &w[a][k] } else { &w[a][i] * &w[e][k] + &w[e][i] * &w[a][k] };
                            if !t.is_zero() {
                                *acc.entry(offsets[b] + tri(w.len(), a, e)).or_insert_with(Rational::zero) += c * t;
                            }
                        }
                    }
                }
                acc.into_iter().filter(|(_, c)| !c.is_zero()).collect()
            })
            .collect();
        Compiled { sizes, offsets, nv, rows, rhs: self.rhs.clone(), scale: self.scale.clone() }
    }

    /// Whether the coefficient equations have any (not necessarily PSD) solution.
    fn consistent(&self) -> bool {
        let mut dense = vec![vec![Rational::zero(); self.nv]; self.rows.len()];
        for (r, row) in self.rows.iter().enumerate() {
            for (v, c) in row {
                dense[r][*v] += c;
            }
        }
        linalg::solve(&dense, &self.rhs).is_some()
    }

    fn matrices_f64(&self, g: &[f64]) -> Vec<DMatrix<f64>> {
        let mut mats: Vec<DMatrix<f64>> = self.sizes.iter().map(|&n| DMatrix::zeros(n, n)).collect();
        for (v, &x) in g.iter().enumerate() {
            let (b, i, j) = self.locate(v);
            mats[b][(i, j)] = x;
            mats[b][(j, i)] = x;
        }
        mats
    }

    fn matrices_exact(&self, g: &[Rational]) -> Vec<Vec<Vec<Rational>>> {
        let mut mats: Vec<Vec<Vec<Rational>>> = self.sizes.iter().map(|&n| vec![vec![Rational::zero(); n]; n]).collect();
        for (v, x) in g.iter().enumerate() {
            let (b, i, j) = self.locate(v);
            mats[b][i][j] = x.clone();
            mats[b][j][i] = x.clone();
        }
        mats
    }
}

/// Alternating projections between the coefficient-matching affine space and
/// the cone `{G ⪰ t I}`, for a decreasing schedule of margins `t` relative
/// to the largest target coefficient.
pub fn psd_feasibility(gp: &GramProblem, opts: &SosOptions) -> Result<GramSolution, SosError> {
    for b in &gp.blocks {
        if b.basis.len() > opts.basis_cap {
            return Err(SosError::BasisTooLarge { size: b.basis.len(), cap: opts.basis_cap });
        }
    }
    let comp = Compiled::new(gp)?;
    let (g, lmin) = ap_solve(&comp, opts)?;
    let s = rat_to_f64(&comp.scale);
    let mats = comp.matrices_f64(&g).into_iter().map(|m| m * s).collect();
    Ok(GramSolution { mats, min_eigenvalue: lmin * s })
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Returns Gram entries (scaled units, upper-triangular coordinates) and the
/// smallest eigenvalue reached.
fn ap_solve(comp: &Compiled, opts: &SosOptions) -> Result<(Vec<f64>, f64), SosError> {
    let nr = comp.rows.len();
    let nv = comp.nv;
    if nv == 0 {
        return if comp.rhs.iter().all(Zero::is_zero) {
            Ok((Vec::new(), f64::INFINITY))
        } else {
            Err(SosError::Inconsistent("empty basis for a nonzero target".into()))
        };
    }
    let xscale: Vec<f64> = (0..nv).map(|v| if comp.is_diag(v) { 1.0 } else { SQRT2 }).collect();
    let mut a = DMatrix::<f64>::zeros(nr, nv);
    for (r, row) in comp.rows.iter().enumerate() {
        for (v, c) in row {
            a[(r, *v)] += rat_to_f64(c) / xscale[*v];
        }
    }
    let b = DVector::from_iterator(nr, comp.rhs.iter().map(rat_to_f64));
    let pinv = a.clone().pseudo_inverse(1e-10).map_err(|e| SosError::Stalled(e.to_string()))?;
    let mut x = &pinv * &b;
    if (&a * &x - &b).amax() > 1e-8 {
        return Err(SosError::Inconsistent("no Gram matrix matches the target coefficients".into()));
    }
    let margins = [1e-2, 1e-4, 1e-6, 1e-9];
    let per_margin = (opts.max_iters / margins.len()).max(1);
    let mut last_report = String::new();
    let unscale = |x: &DVector<f64>| -> Vec<f64> { x.iter().zip(&xscale).map(|(v, s)| v / s).collect() };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for &t in &margins {
        let mut history: Vec<f64> = Vec::new();
        for it in 0..per_margin {
            let (y, dist, lmin) = project_psd(comp, &x, &xscale, t);
            if lmin >= 0.5 * t {
                return Ok((unscale(&x), lmin));
            }
            if best.as_ref().is_none_or(|(_, l)| lmin > *l) {
                best = Some((unscale(&x), lmin));
            }
            history.push(dist);
            if it >= 1000 && dist > 0.99 * history[it - 1000] {
                last_report = format!("margin {t:e}: distance {dist:.3e} after {it} iterations");
                break;
            }
            let resid = &a * &y - &b;
            x = &y - &pinv * resid;
            if it + 1 == per_margin {
                last_report = format!("margin {t:e}: iteration cap with distance {dist:.3e}");
            }
        }
    }
    // A target on the boundary of the SOS cone has no interior Gram matrix;
    // a nearly PSD point is still worth handing to exact rationalization.
    let x0 = &pinv * &b;
    match barrier_solve(comp, &a, &pinv, &x0, &xscale) {
        Ok(r) => Ok(r),
        Err(SosError::Stalled(m)) => match best {
            Some((g, lmin)) if lmin > -BOUNDARY_SLACK => Ok((g, lmin)),
            _ => Err(SosError::Stalled(format!("{last_report}; {m}"))),
        },
        Err(e) => Err(e),
    }
}

/// Maximizes the smallest eigenvalue over the affine slice `x0 + N t` by
/// following the central path of `-w s - log det(G(x0 + N t) - s I)`.
/// Slower per step than projection, but does not stall on thin slices.
fn barrier_solve(
    comp: &Compiled,
    a: &DMatrix<f64>,
    pinv: &DMatrix<f64>,
    x0: &DVector<f64>,
    xscale: &[f64],
) -> Result<(Vec<f64>, f64), SosError> {
    let nv = comp.nv;
    let unscale = |x: &DVector<f64>| -> Vec<f64> { x.iter().zip(xscale).map(|(v, s)| v / s).collect() };
    let svec = |mats: &[DMatrix<f64>]| -> DVector<f64> {
        let mut out = DVector::zeros(nv);
        for (bi, m) in mats.iter().enumerate() {
            let n = comp.sizes[bi];
            for i in 0..n {
                for j in i..n {
                    let v = comp.offsets[bi] + tri(n, i, j);
                    out[v] = m[(i, j)] * xscale[v];
                }
            }
        }
        out
    };
    let lmin_of = |x: &DVector<f64>| -> f64 {
        comp.matrices_f64(&unscale(x))
            .into_iter()
            .filter(|m| m.nrows() > 0)
            .map(|m| SymmetricEigen::new(m).eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    };
    // log det and inverses of the shifted blocks, `None` outside the cone
    let terms = |x: &DVector<f64>, s: f64| -> Option<(f64, Vec<DMatrix<f64>>)> {
        let mut logdet = 0.0;
        let mut invs = Vec::new();
        for m in comp.matrices_f64(&unscale(x)) {
            let n = m.nrows();
            let chol = (m - DMatrix::identity(n, n) * s).cholesky()?;
            logdet += 2.0 * chol.l_dirty().diagonal().iter().take(n).map(|d| d.ln()).sum::<f64>();
            invs.push(chol.inverse());
        }
        Some((logdet, invs))
    };

    let proj = DMatrix::<f64>::identity(nv, nv) - pinv * a;
    let eig = SymmetricEigen::new(proj);
    let cols: Vec<DVector<f64>> =
        (0..nv).filter(|&i| eig.eigenvalues[i] > 0.5).map(|i| eig.eigenvectors.column(i).into_owned()).collect();
    let p = cols.len();
    let nmat = if p == 0 { DMatrix::zeros(nv, 0) } else { DMatrix::from_columns(&cols) };
    let dirs: Vec<Vec<DMatrix<f64>>> = cols.iter().map(|c| comp.matrices_f64(&unscale(c))).collect();
    let ntot: usize = comp.sizes.iter().sum();

    let mut t = DVector::<f64>::zeros(p);
    let mut s = lmin_of(x0) - 1.0;
    let mut w = 1.0;
    let mut x = x0.clone();
    for _ in 0..80 {
        for _ in 0..100 {
            x = x0 + &nmat * &t;
            let Some((logdet, winv)) = terms(&x, s) else { break };
            let w2: Vec<DMatrix<f64>> = winv.iter().map(|m| m * m).collect();
            let mut grad = DVector::<f64>::zeros(p + 1);
            grad.rows_mut(0, p).copy_from(&(-(nmat.transpose() * svec(&winv))));
            grad[p] = -w + winv.iter().map(|m| m.trace()).sum::<f64>();
            let mut h = DMatrix::<f64>::zeros(p + 1, p + 1);
            for (i, d) in dirs.iter().enumerate() {
                let c: Vec<DMatrix<f64>> = winv.iter().zip(d).map(|(wm, bm)| wm * bm * wm).collect();
                let col = nmat.transpose() * svec(&c);
                h.view_mut((0, i), (p, 1)).copy_from(&col);
            }
            let hts = -(nmat.transpose() * svec(&w2));
            for i in 0..p {
                h[(i, p)] = hts[i];
                h[(p, i)] = hts[i];
            }
            h[(p, p)] = w2.iter().map(|m| m.trace()).sum();
            let step = match h.clone().cholesky() {
                Some(c) => c.solve(&(-&grad)),
                None => match h.lu().solve(&(-&grad)) {
                    Some(v) => v,
                    None => break,
                },
            };
            let dec = -grad.dot(&step);
            if !(dec > 1e-10) {
                break;
            }
            let f0 = -w * s - logdet;
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-12 {
                let t1 = &t + step.rows(0, p) * alpha;
                let s1 = s + step[p] * alpha;
                let x1 = x0 + &nmat * &t1;
                if let Some((ld1, _)) = terms(&x1, s1) {
                    if -w * s1 - ld1 <= f0 - 0.25 * alpha * dec {
                        t = t1;
                        s = s1;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }
        x = x0 + &nmat * &t;
        let l = lmin_of(&x);
        let gap = 2.0 * ntot as f64 / w;
        if l >= 1e-2 || (l > 0.0 && gap < 0.1 * l) {
            return Ok((unscale(&x), l));
        }
        if s + gap < -BOUNDARY_SLACK {
            return Err(SosError::Stalled(format!("smallest eigenvalue bounded by {:.3e}", s + gap)));
        }
        if gap < 1e-13 {
            break;
        }
        w *= 8.0;
    }
    let l = lmin_of(&x);
    if l > -BOUNDARY_SLACK {
        Ok((unscale(&x), l))
    } else {
        Err(SosError::Stalled(format!("barrier path ended at smallest eigenvalue {l:.3e}")))
    }
}

/// Smallest eigenvalue (relative to the largest target coefficient) still
/// accepted as a boundary candidate.
const BOUNDARY_SLACK: f64 = 1e-7;

/// Projects onto `{G_b ⪰ t I}` block by block; returns the projection, the
/// distance moved and the smallest eigenvalue of the input.
fn project_psd(comp: &Compiled, x: &DVector<f64>, xscale: &[f64], t: f64) -> (DVector<f64>, f64, f64) {
    let g: Vec<f64> = x.iter().zip(xscale).map(|(v, s)| v / s).collect();
    let mats = comp.matrices_f64(&g);
    let mut out = x.clone();
    let mut dist2 = 0.0;
    let mut lmin = f64::INFINITY;
    for (bi, m) in mats.into_iter().enumerate() {
        let n = comp.sizes[bi];
        if n == 0 {
            continue;
        }
        let eig = SymmetricEigen::new(m);
        let mut vals = eig.eigenvalues.clone();
        for l in vals.iter_mut() {
            lmin = lmin.min(*l);
            if *l < t {
                dist2 += (t - *l) * (t - *l);
                *l = t;
            }
        }
        let q = &eig.eigenvectors;
        let p = q * DMatrix::from_diagonal(&vals) * q.transpose();
        for i in 0..n {
            for j in i..n {
                let v = comp.offsets[bi] + tri(n, i, j);
                out[v] = p[(i, j)] * xscale[v];
            }
        }
    }
    (out, dist2.sqrt(), lmin)
}

/// Best rational approximation of `x` with denominator at most `max_den`.
pub fn round_rational(x: f64, max_den: u64) -> Rational {
    if !x.is_finite() {
        return Rational::zero();
    }
    let exact = Rational::from_float(x).unwrap_or_else(Rational::zero);
    let cap = BigInt::from(max_den);
    // continued fraction convergents h/k
    let (mut h0, mut h1) = (BigInt::zero(), BigInt::one());
    let (mut k0, mut k1) = (BigInt::one(), BigInt::zero());
    let mut r = exact.clone();
    loop {
        let a = r.floor().to_integer();
        let h2 = &a * &h1 + &h0;
        let k2 = &a * &k1 + &k0;
        if k2 > cap {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = &r - Rational::from_integer(a);
        if frac.is_zero() {
            break;
        }
        r = frac.recip();
    }
    if k1.is_zero() {
        return exact.round();
    }
    Rational::new(h1, k1)
}

/// Exact projection onto the affine space in the Frobenius metric (weight 1
/// on diagonal entries, 2 on off-diagonal ones).
struct ExactProjector {
    /// `A W⁻¹ Aᵀ`
    gram: Vec<Vec<Rational>>,
    /// Per variable: `(row, coefficient)`.
    cols: Vec<Vec<(usize, Rational)>>,
}

impl ExactProjector {
    fn new(comp: &Compiled) -> Self {
        let nr = comp.rows.len();
        let mut cols: Vec<Vec<(usize, Rational)>> = vec![Vec::new(); comp.nv];
        for (r, row) in comp.rows.iter().enumerate() {
            for (v, c) in row {
                cols[*v].push((r, c.clone()));
            }
        }
        let half = Rational::new(1.into(), 2.into());
        let mut gram = vec![vec![Rational::zero(); nr]; nr];
        for (v, col) in cols.iter().enumerate() {
            let winv = if comp.is_diag(v) { Rational::one() } else { half.clone() };
            for (r1, c1) in col {
                for (r2, c2) in col {
                    gram[*r1][*r2] += c1 * c2 * &winv;
                }
            }
        }
        ExactProjector { gram, cols }
    }

    fn project(&self, comp: &Compiled, g: &mut [Rational]) -> bool {
        let mut resid = comp.rhs.clone();
        for (r, row) in comp.rows.iter().enumerate() {
            for (v, c) in row {
                resid[r] -= c * &g[*v];
            }
        }
        if resid.iter().all(Zero::is_zero) {
            return true;
        }
        let Some(y) = linalg::solve(&self.gram, &resid) else { return false };
        let half = Rational::new(1.into(), 2.into());
        for (v, col) in self.cols.iter().enumerate() {
            let mut d = Rational::zero();
            for (r, c) in col {
                d += c * &y[*r];
            }
            if !comp.is_diag(v) {
                d *= &half;
            }
            g[v] += d;
        }
        true
    }
}

fn squares_from_ldl(pivots: &[linalg::Pivot], basis: &[Exponent], shape: BlockShape, scale: &Rational) -> SosDecomposition {
    squares_on_face(pivots, None, basis, shape, scale)
}

/// Squares of `ℓᵀ W m` (or `ℓᵀ m` without a face).
fn squares_on_face(pivots: &[linalg::Pivot], face: Option<&[Vec<Rational>]>, basis: &[Exponent], shape: BlockShape, scale: &Rational) -> SosDecomposition {
    let mut out = SosDecomposition::zero(shape);
    for p in pivots {
        let coeffs: Vec<Rational> = match face {
            None => p.row.clone(),
            Some(w) => (0..basis.len()).map(|i| p.row.iter().zip(w).map(|(l, r)| l * &r[i]).sum()).collect(),
        };
        let poly = BlockedPoly::from_terms(shape, coeffs.iter().zip(basis).filter(|(c, _)| !c.is_zero()).map(|(c, e)| (e.clone(), c.clone())));
        out.push(&p.d * scale, poly);
    }
    out
}

/// Turns a floating Gram solution into decompositions, one per block: exact
/// when rounding, re-projection and rational elimination succeed, otherwise
/// numeric (if allowed) with an exact residual bound.
pub fn sos_from_gram(gp: &GramProblem, sol: &GramSolution, opts: &SosOptions) -> Result<Vec<SosDecomposition>, SosError> {
    let comp = Compiled::new(gp)?;
    let s = rat_to_f64(&comp.scale);
    let mut g_f: Vec<f64> = vec![0.0; comp.nv];
    for v in 0..comp.nv {
        let (b, i, j) = comp.locate(v);
        g_f[v] = sol.mats[b][(i, j)] / s;
    }
    if let Some(out) = round_and_factor(gp, &comp, &g_f, None) {
        return Ok(out);
    }
    // On the boundary of the cone every Gram matrix shares a kernel; pinning
    // a rational guess of it keeps the projection on the right face.
    for den in [1u64 << 8, 1 << 16] {
        let kernels: Vec<(usize, Vec<Rational>)> = sol
            .mats
            .iter()
            .enumerate()
            .flat_map(|(b, m)| numeric_kernel(m, den).into_iter().map(move |k| (b, k)))
            .collect();
        if kernels.is_empty() {
            break;
        }
        if let Some(out) = round_and_factor(gp, &comp.with_kernels(&kernels), &g_f, None) {
            return Ok(out);
        }
    }
    // An irrational zero of the target forces all its conjugates into the
    // kernel of every rational Gram matrix, a face the floating solution
    // does not see. Integer relations among the kernel entries recover it;
    // the Gram problem is then re-solved inside that face.
    for bits in [32u32, 40, 48] {
        let Some(faces) = rational_faces(&comp, &sol.mats, bits) else { break };
        let red = comp.restrict(&faces);
        let Ok((h, _)) = ap_solve(&red, opts) else { continue };
        if let Some(out) = round_and_factor(gp, &red, &h, Some(&faces)) {
            return Ok(out);
        }
    }
    if !opts.allow_numeric {
        return Err(SosError::RoundingFailedNumericForbidden);
    }
    numeric_decomposition(gp, sol)
}

fn round_and_factor(gp: &GramProblem, comp: &Compiled, g_f: &[f64], faces: Option<&[Vec<Vec<Rational>>]>) -> Option<Vec<SosDecomposition>> {
    let shape = gp.target.shape();
    let proj = ExactProjector::new(comp);
    for bits in [16u32, 24, 32] {
        let den = 1u64 << bits;
        let mut g: Vec<Rational> = g_f.iter().map(|&x| round_rational(x, den)).collect();
        if !proj.project(comp, &mut g) {
            continue;
        }
        let mut out = Vec::new();
        for (bi, m) in comp.matrices_exact(&g).iter().enumerate() {
            match linalg::ldl(m) {
                Ldl::Psd(p) => out.push(squares_on_face(&p, faces.map(|f| f[bi].as_slice()), &gp.blocks[bi].basis, shape, &comp.scale)),
                Ldl::Indefinite(_) => break,
            }
        }
        if out.len() == gp.blocks.len() {
            debug_assert!(identity_holds(gp, &out));
            return Some(out);
        }
    }
    None
}

/// Per block, rational rows spanning the orthogonal complement of the
/// smallest rational subspace containing the numeric kernel. Candidates are
/// the shortest vectors `w` of the lattice `(e_i | 2^bits K_i)`; the longest
/// prefix of them keeping the coefficient equations solvable is taken.
/// Blocks without a kernel keep the identity. `None` when no block is reduced.
fn rational_faces(comp: &Compiled, mats: &[DMatrix<f64>], bits: u32) -> Option<Vec<Vec<Vec<Rational>>>> {
    let scale = f64::from(bits).exp2();
    let identity = |n: usize| -> Vec<Vec<Rational>> {
        (0..n).map(|i| (0..n).map(|j| if i == j { Rational::one() } else { Rational::zero() }).collect()).collect()
    };
    let mut faces: Vec<Vec<Vec<Rational>>> = comp.sizes.iter().map(|&n| identity(n)).collect();
    let mut reduced = false;
    for (b, m) in mats.iter().enumerate() {
        let n = comp.sizes[b];
        if n < 2 {
            continue;
        }
        let eig = SymmetricEigen::new(m.clone());
        let top = eig.eigenvalues.max().max(1.0);
        let cols: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] < BOUNDARY_SLACK * top).collect();
        if cols.is_empty() || cols.len() == n {
            continue;
        }
        let lattice: Vec<Vec<BigInt>> = (0..n)
            .map(|i| {
                let mut row: Vec<BigInt> = (0..n).map(|j| BigInt::from(u8::from(i == j))).collect();
                row.extend(cols.iter().map(|&k| BigInt::from((eig.eigenvectors[(i, k)] * scale).round() as i64)));
                row
            })
            .collect();
        let short: Vec<Vec<Rational>> =
            linalg::lll(lattice).into_iter().map(|v| v[..n].iter().map(|x| Rational::from_integer(x.clone())).collect()).collect();
        for j in (1..=n - cols.len()).rev() {
            let (rows, _) = linalg::rref(&short[..j]);
            if rows.len() < j {
                continue;
            }
            let mut trial = faces.clone();
            trial[b] = rows;
            if comp.restrict(&trial).consistent() {
                faces = trial;
                reduced = true;
                break;
            }
        }
    }
    reduced.then_some(faces)
}

/// Rational basis (reduced row echelon form, entries rounded with
/// denominators up to `den`) of the eigenspace of numerically zero
/// eigenvalues.
fn numeric_kernel(m: &DMatrix<f64>, den: u64) -> Vec<Vec<Rational>> {
    let n = m.nrows();
    if n == 0 {
        return Vec::new();
    }
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.max().max(1.0);
    let cols: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] < BOUNDARY_SLACK * top).collect();
    if cols.is_empty() || cols.len() == n {
        return Vec::new();
    }
    let mut rows: Vec<Vec<f64>> = cols.iter().map(|&k| eig.eigenvectors.column(k).iter().copied().collect()).collect();
    // complete pivoting, so entries stay bounded by one
    let mut used = vec![false; n];
    for r in 0..rows.len() {
        let (p, c) = (r..rows.len())
            .flat_map(|i| (0..n).filter(|&j| !used[j]).map(move |j| (i, j)))
            .max_by(|&(a, x), &(b, y)| rows[a][x].abs().total_cmp(&rows[b][y].abs()))
            .unwrap();
        used[c] = true;
        rows.swap(r, p);
        let piv = rows[r][c];
        rows[r].iter_mut().for_each(|x| *x /= piv);
        for i in 0..rows.len() {
            if i != r {
                let f = rows[i][c];
                let src = rows[r].clone();
                rows[i].iter_mut().zip(&src).for_each(|(x, s)| *x -= f * s);
            }
        }
    }
    rows.iter().map(|row| row.iter().map(|&x| round_rational(x, den)).collect()).collect()
}

fn combination(gp: &GramProblem, decs: &[SosDecomposition]) -> Result<BlockedPoly, PolyError> {
    let mut total = BlockedPoly::zero(gp.target.shape());
    for (b, d) in gp.blocks.iter().zip(decs) {
        total = total.add(&d.expand().multiply(&b.multiplier)?)?;
    }
    Ok(total)
}

fn identity_holds(gp: &GramProblem, decs: &[SosDecomposition]) -> bool {
    combination(gp, decs).map(|t| t == gp.target).unwrap_or(false)
}

/// Residual tolerance for numeric decompositions.
pub fn numeric_tolerance(target: &BlockedPoly) -> Rational {
    let one = Rational::one();
    let norm = target.norm_bullet();
    let base = if norm > one { norm } else { one };
    base / Rational::from_integer(BigInt::from(100_000_000u64))
}

fn numeric_decomposition(gp: &GramProblem, sol: &GramSolution) -> Result<Vec<SosDecomposition>, SosError> {
    let shape = gp.target.shape();
    let den = 1u64 << 40;
    let mut out = Vec::new();
    for (bi, m) in sol.mats.iter().enumerate() {
        let basis = &gp.blocks[bi].basis;
        let mut dec = SosDecomposition::zero(shape);
        if !basis.is_empty() {
            let eig = SymmetricEigen::new(m.clone());
            for (k, &l) in eig.eigenvalues.iter().enumerate() {
                if l <= 0.0 {
                    continue;
                }
                let col = eig.eigenvectors.column(k);
                let poly = BlockedPoly::from_terms(shape, basis.iter().enumerate().map(|(j, e)| (e.clone(), round_rational(col[j], den))));
                dec.push(round_rational(l, den), poly);
            }
        }
        out.push(dec);
    }
    let total = combination(gp, &out)?;
    let resid = gp.target.sub(&total)?.max_abs_coeff();
    if resid > numeric_tolerance(&gp.target) {
        return Err(SosError::Stalled(format!("numeric residual {} above tolerance", rat_to_f64(&resid))));
    }
    for d in out.iter_mut() {
        d.tier = Tier::Numeric(resid.clone());
    }
    Ok(out)
}

/// Full Gram route: feasibility then rationalization.
pub fn solve_gram(gp: &GramProblem, opts: &SosOptions) -> Result<Vec<SosDecomposition>, SosError> {
    if gp.target.is_zero() {
        return Ok(gp.blocks.iter().map(|_| SosDecomposition::zero(gp.target.shape())).collect());
    }
    let sol = psd_feasibility(gp, opts)?;
    sos_from_gram(gp, &sol, opts)
}

/// All monomials in `vars` of total degree at most `max_deg`.
pub fn monomial_basis(shape: BlockShape, vars: &[usize], max_deg: u32) -> Vec<Exponent> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; shape.nvars()];
    fn rec(vars: &[usize], k: usize, left: u32, cur: &mut Exponent, out: &mut Vec<Exponent>) {
        if k == vars.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[vars[k]] = e;
            rec(vars, k + 1, left - e, cur, out);
        }
        cur[vars[k]] = 0;
    }
    rec(vars, 0, max_deg, &mut cur, &mut out);
    out.sort_by_key(|e| (e.iter().sum::<u32>(), std::cmp::Reverse(e.clone())));
    out
}

/// Removes basis monomials `m` whose square `m²` is absent from the target and
/// cannot be produced by any other pair of basis monomials; such rows of a
/// PSD Gram matrix vanish.
pub fn prune_basis(target: &BlockedPoly, mut basis: Vec<Exponent>) -> Vec<Exponent> {
    loop {
        let before = basis.len();
        let snapshot = basis.clone();
        basis.retain(|m| {
            let two_m: Exponent = m.iter().map(|e| 2 * e).collect();
            if !target.coeff(&two_m).is_zero() {
                return true;
            }
            snapshot.iter().any(|a| {
                a != m && a.iter().zip(&two_m).all(|(x, y)| x <= y) && {
                    let b: Exponent = two_m.iter().zip(a).map(|(y, x)| y - x).collect();
                    snapshot.contains(&b)
                }
            })
        });
        if basis.len() == before {
            return basis;
        }
    }
}

fn sample_nonnegative(b: &BlockedPoly, vars: &[usize]) -> Result<(), SosError> {
    let nv = b.shape().nvars();
    let steps: Vec<Rational> = (-16..=16).map(|k| Rational::new(BigInt::from(k), BigInt::from(4))).collect();
    let mut idx = vec![0usize; vars.len()];
    loop {
        let mut pt = vec![Rational::zero(); nv];
        for (k, &v) in vars.iter().enumerate() {
            pt[v] = steps[idx[k]].clone();
        }
        let fp: Vec<f64> = pt.iter().map(rat_to_f64).collect();
        if b.eval_f64(&fp) < 1e-9 {
            let val = b.eval(&pt);
            if val.is_negative() {
                return Err(SosError::NotNonnegative { witness: Some(vars.iter().map(|&v| rat_to_string(&pt[v])).collect()) });
            }
        }
        let mut k = 0;
        loop {
            if k == vars.len() {
                return Ok(());
            }
            idx[k] += 1;
            if idx[k] < steps.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn check_support(b: &BlockedPoly, vars: &[usize]) -> Result<(), SosError> {
    for e in b.terms().keys() {
        if e.iter().enumerate().any(|(i, &x)| x > 0 && !vars.contains(&i)) {
            return Err(SosError::Invalid(format!("term {e:?} uses variables outside {vars:?}")));
        }
    }
    Ok(())
}

/// Exact decomposition of a polynomial of degree at most 2 in `vars` by
/// symmetric elimination; non-homogeneous inputs get a dummy coordinate for
/// the constant monomial. At most `vars.len() + 1` squares.
pub fn sos_quadratic_form(q: &BlockedPoly, vars: &[usize]) -> Result<SosDecomposition, SosError> {
    check_support(q, vars)?;
    let shape = q.shape();
    let r = vars.len();
    if q.degree_in(vars) > 2 {
        return Err(SosError::Invalid("degree above 2".into()));
    }
    let homogeneous = q.is_homogeneous_in(vars, 2);
    let dim = if homogeneous { r } else { r + 1 };
    let mut a = vec![vec![Rational::zero(); dim]; dim];
    let half = Rational::new(1.into(), 2.into());
    for (e, c) in q.terms() {
        let idx: Vec<usize> = vars.iter().enumerate().flat_map(|(k, &v)| std::iter::repeat_n(k, e[v] as usize)).collect();
        match idx.as_slice() {
            [i, j] if i == j => a[*i][*i] += c,
            [i, j] => {
                a[*i][*j] += c * &half;
                a[*j][*i] += c * &half;
            }
            [i] => {
                a[*i][r] += c * &half;
                a[r][*i] += c * &half;
            }
            [] => a[r][r] += c,
            _ => unreachable!(),
        }
    }
    let mut basis: Vec<Exponent> = vars
        .iter()
        .map(|&v| {
            let mut e = vec![0; shape.nvars()];
            e[v] = 1;
            e
        })
        .collect();
    if !homogeneous {
        basis.push(vec![0; shape.nvars()]);
    }
    match linalg::ldl(&a) {
        Ldl::Psd(p) => Ok(squares_from_ldl(&p, &basis, shape, &Rational::one())),
        Ldl::Indefinite(w) => Err(SosError::Indefinite { witness: w.iter().map(rat_to_string).collect() }),
    }
}

/// Gram route with the half-degree monomial basis in `vars`, after a sampled
/// nonnegativity check.
pub fn sos_gram_in(b: &BlockedPoly, vars: &[usize], opts: &SosOptions) -> Result<SosDecomposition, SosError> {
    check_support(b, vars)?;
    if b.is_zero() {
        return Ok(SosDecomposition::zero(b.shape()));
    }
    let deg = b.degree_in(vars);
    if deg % 2 == 1 {
        return Err(SosError::NotNonnegative { witness: None });
    }
    sample_nonnegative(b, vars)?;
    let basis = prune_basis(b, monomial_basis(b.shape(), vars, deg / 2));
    let gp = GramProblem::single(b.clone(), basis);
    Ok(solve_gram(&gp, opts)?.remove(0))
}

/// Decomposition of a bivariate polynomial of degree at most 4; every
/// square has degree at most 4.
pub fn sos_bivariate_quartic(b: &BlockedPoly, vars: [usize; 2], opts: &SosOptions) -> Result<SosDecomposition, SosError> {
    if b.degree_in(&vars) > 4 {
        return Err(SosError::Invalid("degree above 4".into()));
    }
    sos_gram_in(b, &vars, opts)
}

/// Decomposition of a polynomial of degree `m` in `Y1` and 2 in the `Y2`
/// block over the basis `Y1^i · {1, Y2_j}`, `i <= m/2`.
pub fn sos_split(b: &BlockedPoly, y1: usize, y2: &[usize], opts: &SosOptions) -> Result<SosDecomposition, SosError> {
    let mut vars = vec![y1];
    vars.extend_from_slice(y2);
    check_support(b, &vars)?;
    if b.is_zero() {
        return Ok(SosDecomposition::zero(b.shape()));
    }
    let m = b.degree_in(&[y1]);
    if m % 2 == 1 {
        return Err(SosError::NotNonnegative { witness: None });
    }
    sample_nonnegative(b, &vars)?;
    let nv = b.shape().nvars();
    let mut basis = Vec::new();
    for i in 0..=m / 2 {
        let mut e = vec![0; nv];
        e[y1] = i;
        basis.push(e.clone());
        for &j in y2 {
            let mut f = e.clone();
            f[j] = 1;
            basis.push(f);
        }
    }
    let basis = prune_basis(b, basis);
    let gp = GramProblem::single(b.clone(), basis);
    Ok(solve_gram(&gp, opts)?.remove(0))
}

/// Dense univariate polynomials over the rationals, low degree first.
mod upoly {
    use super::*;

    pub type U = Vec<Rational>;

    pub fn trim(mut p: U) -> U {
        while p.last().is_some_and(Zero::is_zero) {
            p.pop();
        }
        p
    }

    pub fn deriv(p: &U) -> U {
        trim(p.iter().enumerate().skip(1).map(|(i, c)| c * Rational::from_integer(BigInt::from(i))).collect())
    }

    pub fn sub(a: &U, b: &U) -> U {
        let n = a.len().max(b.len());
        trim((0..n).map(|i| a.get(i).cloned().unwrap_or_default() - b.get(i).cloned().unwrap_or_default()).collect())
    }

    pub fn divrem(a: &U, b: &U) -> (U, U) {
        let mut r = trim(a.clone());
        let b = trim(b.clone());
        let lb = b.last().expect("division by zero polynomial").clone();
        if r.len() < b.len() {
            return (Vec::new(), r);
        }
        let mut q = vec![Rational::zero(); r.len() - b.len() + 1];
        while r.len() >= b.len() && !r.is_empty() {
            let shift = r.len() - b.len();
            let c = r.last().unwrap() / &lb;
            for (i, bc) in b.iter().enumerate() {
                r[shift + i] -= &c * bc;
            }
            q[shift] = c;
            r.pop();
            r = trim(r);
        }
        (trim(q), r)
    }

    pub fn monic(p: U) -> U {
        let p = trim(p);
        match p.last().cloned() {
            Some(l) => p.into_iter().map(|c| c / &l).collect(),
            None => p,
        }
    }

    pub fn gcd(a: &U, b: &U) -> U {
        let (mut x, mut y) = (trim(a.clone()), trim(b.clone()));
        while !y.is_empty() {
            let (_, r) = divrem(&x, &y);
            x = y;
            y = r;
        }
        monic(x)
    }

    pub fn eval(p: &U, x: &Rational) -> Rational {
        p.iter().rev().fold(Rational::zero(), |acc, c| acc * x + c)
    }

    /// Product of the squarefree factors of odd multiplicity (Yun).
    pub fn odd_part(f: &U) -> U {
        split_square(f).0
    }

    /// Writes monic `f` as `odd · half²` with `odd` the product of the
    /// squarefree factors of odd multiplicity.
    pub fn split_square(f: &U) -> (U, U) {
        let f = monic(f.clone());
        if f.len() <= 1 {
            return (vec![Rational::one()], vec![Rational::one()]);
        }
        let df = deriv(&f);
        let a0 = gcd(&f, &df);
        let mut b = divrem(&f, &a0).0;
        let c = divrem(&df, &a0).0;
        let mut d = sub(&c, &deriv(&b));
        let mut odd = vec![Rational::one()];
        let mut half = vec![Rational::one()];
        let mut i = 1;
        while b.len() > 1 {
            let a = gcd(&b, &d);
            if i % 2 == 1 {
                odd = mul(&odd, &a);
            }
            for _ in 0..i / 2 {
                half = mul(&half, &a);
            }
            let nb = divrem(&b, &a).0;
            let nc = divrem(&d, &a).0;
            d = sub(&nc, &deriv(&nb));
            b = nb;
            i += 1;
        }
        (odd, half)
    }

    pub fn mul(a: &U, b: &U) -> U {
        if a.is_empty() || b.is_empty() {
            return Vec::new();
        }
        let mut out = vec![Rational::zero(); a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        trim(out)
    }

    /// Number of distinct real roots by Sturm's theorem.
    pub fn real_root_count(p: &U) -> usize {
        let p = trim(p.clone());
        if p.len() <= 1 {
            return 0;
        }
        let mut seq = vec![p.clone(), deriv(&p)];
        loop {
            let n = seq.len();
            let (_, r) = divrem(&seq[n - 2], &seq[n - 1]);
            if r.is_empty() {
                break;
            }
            seq.push(r.into_iter().map(|c| -c).collect());
        }
        let changes = |signs: Vec<i32>| signs.windows(2).filter(|w| w[0] * w[1] < 0).count();
        let at_pos: Vec<i32> = seq.iter().map(|q| if q.last().unwrap().is_positive() { 1 } else { -1 }).collect();
        let at_neg: Vec<i32> = seq
            .iter()
            .map(|q| {
                let s = if q.last().unwrap().is_positive() { 1 } else { -1 };
                if (q.len() - 1) % 2 == 1 { -s } else { s }
            })
            .collect();
        changes(at_neg) - changes(at_pos)
    }
}

fn to_upoly(b: &BlockedPoly, var: usize) -> upoly::U {
    let deg = b.degree_in(&[var]) as usize;
    let mut c = vec![Rational::zero(); deg + 1];
    for (e, v) in b.terms() {
        c[e[var] as usize] += v;
    }
    upoly::trim(c)
}

fn from_upoly(shape: BlockShape, var: usize, c: &[Rational]) -> BlockedPoly {
    BlockedPoly::from_terms(
        shape,
        c.iter().enumerate().map(|(i, v)| {
            let mut e = vec![0; shape.nvars()];
            e[var] = i as u32;
            (e, v.clone())
        }),
    )
}

/// Sign-change detection: odd-multiplicity real roots are counted exactly.
pub fn univariate_nonnegative(b: &BlockedPoly, var: usize) -> Result<(), SosError> {
    let c = to_upoly(b, var);
    if c.is_empty() {
        return Ok(());
    }
    let deg = c.len() - 1;
    let negative_lead = c.last().unwrap().is_negative();
    if deg % 2 == 1 || negative_lead || upoly::real_root_count(&upoly::odd_part(&c)) > 0 {
        return Err(SosError::NotNonnegative { witness: univariate_witness(&c).map(|w| vec![rat_to_string(&w)]) });
    }
    Ok(())
}

fn univariate_witness(c: &upoly::U) -> Option<Rational> {
    // Cauchy bound on the roots
    let lead = c.last()?.abs();
    let bound = c.iter().map(|x| x.abs() / &lead).fold(Rational::zero(), |a, b| if b > a { b } else { a }) + Rational::one();
    let steps = 4000;
    for k in 0..=steps {
        let x = -bound.clone() + &bound * Rational::new(BigInt::from(2 * k), BigInt::from(steps));
        if upoly::eval(c, &x).is_negative() {
            return Some(x);
        }
    }
    None
}

/// Roots of a real polynomial by Aberth iteration.
fn aberth_roots(c: &[f64]) -> Vec<Complex64> {
    let n = c.len() - 1;
    let lead = c[n];
    let coef: Vec<f64> = c.iter().map(|x| x / lead).collect();
    let radius = 1.0 + coef[..n].iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut z: Vec<Complex64> = (0..n).map(|k| Complex64::from_polar(radius * 0.5, 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / n as f64)).collect();
    let eval = |x: Complex64| -> (Complex64, Complex64) {
        let mut p = Complex64::new(0.0, 0.0);
        let mut dp = Complex64::new(0.0, 0.0);
        for &a in coef.iter().rev() {
            dp = dp * x + p;
            p = p * x + a;
        }
        (p, dp)
    };
    for _ in 0..2000 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let (p, dp) = eval(z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let s: Complex64 = (0..n).filter(|&j| j != i).map(|j| Complex64::new(1.0, 0.0) / (z[i] - z[j])).sum();
            let w = ratio / (Complex64::new(1.0, 0.0) - ratio * s);
            z[i] -= w;
            moved = moved.max(w.norm());
        }
        if moved < 1e-15 * radius {
            break;
        }
    }
    z
}

/// Numeric two-square decomposition `lc·(A² + B²)` from `q = Π (y − z)` over
/// one root of each conjugate pair.
fn root_pairing(b: &BlockedPoly, var: usize) -> Result<SosDecomposition, SosError> {
    let c = to_upoly(b, var);
    let shape = b.shape();
    let lead = c.last().unwrap().clone();
    let cf: Vec<f64> = c.iter().map(rat_to_f64).collect();
    let mut roots = aberth_roots(&cf);
    let half = (c.len() - 1) / 2;
    roots.sort_by(|a, b| b.im.partial_cmp(&a.im).unwrap_or(std::cmp::Ordering::Equal));
    let scale_tol = 1e-6;
    let mut chosen: Vec<Complex64> = roots.iter().copied().filter(|r| r.im > scale_tol).collect();
    let mut real: Vec<Complex64> = roots.iter().copied().filter(|r| r.im.abs() <= scale_tol).collect();
    real.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap_or(std::cmp::Ordering::Equal));
    chosen.extend(real.iter().step_by(2).map(|r| Complex64::new(r.re, 0.0)));
    if chosen.len() != half {
        chosen = roots[..half].to_vec();
    }
    let mut q = vec![Complex64::new(1.0, 0.0)];
    for r in &chosen {
        let mut nq = vec![Complex64::new(0.0, 0.0); q.len() + 1];
        for (i, &a) in q.iter().enumerate() {
            nq[i + 1] += a;
            nq[i] -= a * r;
        }
        q = nq;
    }
    let den = 1u64 << 40;
    let a: Vec<Rational> = q.iter().map(|z| round_rational(z.re, den)).collect();
    let bb: Vec<Rational> = q.iter().map(|z| round_rational(z.im, den)).collect();
    let mut dec = SosDecomposition::zero(shape);
    dec.push(lead.clone(), from_upoly(shape, var, &a));
    dec.push(lead, from_upoly(shape, var, &bb));
    let resid = dec.residual(b)?;
    if resid > numeric_tolerance(b) {
        return Err(SosError::Stalled(format!("root pairing residual {} above tolerance", rat_to_f64(&resid))));
    }
    dec.tier = Tier::Numeric(resid);
    Ok(dec)
}

/// Decomposition of a univariate polynomial nonnegative on the line: Gram
/// route (exact) up to degree 8, root pairing (numeric) above it or when the
/// Gram route fails and numeric output is allowed.
pub fn sos_univariate(b: &BlockedPoly, var: usize, opts: &SosOptions) -> Result<SosDecomposition, SosError> {
    check_support(b, &[var])?;
    univariate_nonnegative(b, var)?;
    if b.is_zero() {
        return Ok(SosDecomposition::zero(b.shape()));
    }
    let deg = b.degree_in(&[var]);
    if deg == 0 {
        return Ok(SosDecomposition::single(b.constant_term(), BlockedPoly::one(b.shape())));
    }
    if deg <= 8 {
        // b = lc · odd · half², with odd free of real roots
        let c = to_upoly(b, var);
        let (odd, half) = upoly::split_square(&c);
        let lead = c.last().unwrap().clone();
        let shape = b.shape();
        let core = from_upoly(shape, var, &odd).scale(&lead);
        let core_dec = if core.degree_in(&[var]) == 0 {
            Ok(vec![SosDecomposition::single(core.constant_term(), BlockedPoly::one(shape))])
        } else {
            let basis = prune_basis(&core, monomial_basis(shape, &[var], core.degree_in(&[var]) / 2));
            solve_gram(&GramProblem::single(core, basis), opts)
        };
        match core_dec {
            Ok(mut v) => return Ok(v.remove(0).times_square(&from_upoly(shape, var, &half))?),
            Err(e) if !opts.allow_numeric => return Err(e),
            Err(_) => {}
        }
    } else if !opts.allow_numeric {
        return Err(SosError::RoundingFailedNumericForbidden);
    }
    root_pairing(b, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{rat, Var};
    use proptest::prelude::*;

    fn y2() -> BlockShape {
        BlockShape::new(0, 2, 0)
    }

    fn p(shape: BlockShape, terms: &[(&[u32], i64, i64)]) -> BlockedPoly {
        BlockedPoly::from_terms(shape, terms.iter().map(|(e, n, d)| (e.to_vec(), rat(*n, *d))))
    }

    fn exact_and_matches(d: &SosDecomposition, target: &BlockedPoly) {
        assert!(d.tier.is_exact(), "tier {:?}", d.tier);
        assert!(d.weights_positive());
        assert_eq!(&d.expand(), target);
    }

    #[test]
    fn triangular_indexing() {
        let n = 5;
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                assert_eq!(tri(n, i, j), k);
                k += 1;
            }
        }
    }

    #[test]
    fn quadratic_form_examples() {
        let q = p(y2(), &[(&[2, 0], 2, 1), (&[1, 1], 2, 1), (&[0, 2], 1, 1)]);
        let d = sos_quadratic_form(&q, &[0, 1]).unwrap();
        exact_and_matches(&d, &q);
        assert_eq!(d.squares[0].w, rat(2, 1));
        assert_eq!(d.squares[0].p, p(y2(), &[(&[1, 0], 1, 1), (&[0, 1], 1, 2)]));
        assert_eq!(d.squares[1].w, rat(1, 2));
        assert_eq!(d.squares[1].p, p(y2(), &[(&[0, 1], 1, 1)]));

        let q = p(y2(), &[(&[1, 1], 1, 1)]);
        match sos_quadratic_form(&q, &[0, 1]) {
            Err(SosError::Indefinite { witness }) => assert_eq!(witness, vec!["1", "-1"]),
            other => panic!("{other:?}"),
        }

        let q = p(y2(), &[(&[2, 0], 1, 1), (&[0, 2], 1, 1)]);
        let d = sos_quadratic_form(&q, &[0, 1]).unwrap();
        exact_and_matches(&d, &q);
        assert_eq!(d.squares.len(), 2);

        // affine case: Y1^2 - 2 Y1 + 2 = (Y1 - 1)^2 + 1
        let q = p(y2(), &[(&[2, 0], 1, 1), (&[1, 0], -2, 1), (&[0, 0], 2, 1)]);
        let d = sos_quadratic_form(&q, &[0, 1]).unwrap();
        exact_and_matches(&d, &q);
        assert!(d.squares.len() <= 3);
    }

    #[test]
    fn gram_identity_example() {
        let t = p(y2(), &[(&[4, 0], 1, 1), (&[0, 4], 1, 1)]);
        let basis = vec![vec![2, 0], vec![1, 1], vec![0, 2]];
        let gp = GramProblem::single(t.clone(), basis.clone());
        let sol = psd_feasibility(&gp, &SosOptions::default()).unwrap();
        assert!(sol.min_eigenvalue > 0.0);
        let d = sos_from_gram(&gp, &sol, &SosOptions::default()).unwrap().remove(0);
        exact_and_matches(&d, &t);
        // the boundary matrix diag(1,0,1) also rationalizes exactly
        let sol = GramSolution { mats: vec![DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 1.0]))], min_eigenvalue: 0.0 };
        let d = sos_from_gram(&gp, &sol, &SosOptions { allow_numeric: false, ..Default::default() }).unwrap().remove(0);
        exact_and_matches(&d, &t);
        assert_eq!(d.squares.len(), 2);
    }

    #[test]
    fn gram_feasible_for_explicit_squares() {
        // (Y1^2 + Y2^2 - 1)^2 + Y1^2
        let s = y2();
        let a = p(s, &[(&[2, 0], 1, 1), (&[0, 2], 1, 1), (&[0, 0], -1, 1)]);
        let t = a.square().add(&p(s, &[(&[2, 0], 1, 1)])).unwrap();
        // real zeros at (0, ±1) put the target on the boundary of the cone
        let basis = prune_basis(&t, monomial_basis(s, &[0, 1], 2));
        let sol = psd_feasibility(&GramProblem::single(t.clone(), basis), &SosOptions::default()).unwrap();
        assert!(sol.min_eigenvalue > -1e-6);
        let d = sos_bivariate_quartic(&t, [0, 1], &SosOptions::default()).unwrap();
        assert!(d.weights_positive());
        assert!(d.residual(&t).unwrap() <= numeric_tolerance(&t));
    }

    #[test]
    fn perturbed_gram_rounds_exactly() {
        // (Y1^2 + Y1 Y2 + Y2^2)-based target with a known interior Gram matrix
        let s = y2();
        let basis = vec![vec![2, 0], vec![1, 1], vec![0, 2]];
        let g0 = [[2.0, 0.5, 0.3], [0.5, 1.5, 0.2], [0.3, 0.2, 1.0]];
        let mut t = BlockedPoly::zero(s);
        for i in 0..3 {
            for j in 0..3 {
                let e: Exponent = basis[i].iter().zip(&basis[j]).map(|(a, b)| a + b).collect();
                t.add_term(e, Rational::from_float(g0[i][j]).unwrap());
            }
        }
        let gp = GramProblem::single(t.clone(), basis);
        let mut m = DMatrix::from_fn(3, 3, |i, j| g0[i][j]);
        m[(0, 1)] += 1e-6;
        m[(1, 0)] += 1e-6;
        m[(2, 2)] -= 3e-7;
        let sol = GramSolution { mats: vec![m], min_eigenvalue: 0.5 };
        let d = sos_from_gram(&gp, &sol, &SosOptions { allow_numeric: false, ..Default::default() }).unwrap().remove(0);
        exact_and_matches(&d, &t);
    }

    #[test]
    fn quadratic_route_agrees_with_gram_route() {
        let s = y2();
        let q = p(s, &[(&[2, 0], 3, 1), (&[1, 1], -2, 1), (&[0, 2], 2, 1), (&[1, 0], 1, 1), (&[0, 0], 5, 1)]);
        let a = sos_quadratic_form(&q, &[0, 1]).unwrap();
        let b = sos_gram_in(&q, &[0, 1], &SosOptions::default()).unwrap();
        exact_and_matches(&a, &q);
        exact_and_matches(&b, &q);
        assert_eq!(a.expand(), b.expand());
    }

    #[test]
    fn bivariate_examples() {
        let s = y2();
        let t = p(s, &[(&[0, 0], 1, 1), (&[4, 0], 1, 1), (&[0, 4], 1, 1)]);
        let d = sos_bivariate_quartic(&t, [0, 1], &SosOptions::default()).unwrap();
        exact_and_matches(&d, &t);

        let a = p(s, &[(&[1, 1], 1, 1), (&[0, 0], -1, 1)]);
        let t = a.square().add(&p(s, &[(&[2, 0], 1, 1)])).unwrap();
        exact_and_matches(&sos_bivariate_quartic(&t, [0, 1], &SosOptions::default()).unwrap(), &t);

        let t = p(s, &[(&[4, 0], 1, 1), (&[0, 0], -1, 1)]);
        match sos_bivariate_quartic(&t, [0, 1], &SosOptions::default()) {
            Err(SosError::NotNonnegative { witness: Some(w) }) => {
                let pt: Vec<Rational> = w.iter().map(|x| parse_rational(x).unwrap()).collect();
                assert!(t.eval(&pt).is_negative());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn motzkin_is_never_decomposed() {
        let s = y2();
        let t = p(s, &[(&[4, 2], 1, 1), (&[2, 4], 1, 1), (&[2, 2], -3, 1), (&[0, 0], 1, 1)]);
        let opts = SosOptions { max_iters: 20_000, ..Default::default() };
        match sos_gram_in(&t, &[0, 1], &opts) {
            Err(SosError::Stalled(_)) | Err(SosError::Inconsistent(_)) => {}
            other => panic!("Motzkin must not decompose: {other:?}"),
        }
    }

    #[test]
    fn univariate_examples() {
        let s = BlockShape::new(0, 1, 0);
        let opts = SosOptions::default();
        let t = p(s, &[(&[2], 1, 1), (&[0], 1, 1)]);
        let d = sos_univariate(&t, 0, &opts).unwrap();
        exact_and_matches(&d, &t);
        assert_eq!(d.squares.len(), 2);

        let t = p(s, &[(&[4], 1, 1)]);
        let d = sos_univariate(&t, 0, &opts).unwrap();
        exact_and_matches(&d, &t);
        assert_eq!(d.squares, vec![Square { w: rat(1, 1), p: p(s, &[(&[2], 1, 1)]) }]);

        let t = p(s, &[(&[4], 1, 1), (&[0], 1, 1)]);
        exact_and_matches(&sos_univariate(&t, 0, &opts).unwrap(), &t);
        let d = root_pairing(&t, 0).unwrap();
        assert_eq!(d.squares.len(), 2);
        match &d.tier {
            Tier::Numeric(r) => assert!(*r <= numeric_tolerance(&t)),
            Tier::Exact => panic!("root pairing is numeric"),
        }

        // (Y - 1)^2 (Y^2 + 1) is nonnegative with a double real root
        let t = p(s, &[(&[4], 1, 1), (&[3], -2, 1), (&[2], 2, 1), (&[1], -2, 1), (&[0], 1, 1)]);
        exact_and_matches(&sos_univariate(&t, 0, &opts).unwrap(), &t);

        // (Y - 1)(Y + 2)(Y^2 + 1) changes sign
        let q = p(s, &[(&[1], 1, 1), (&[0], -1, 1)]).multiply(&p(s, &[(&[1], 1, 1), (&[0], 2, 1)])).unwrap();
        let t = q.multiply(&p(s, &[(&[2], 1, 1), (&[0], 1, 1)])).unwrap();
        assert!(matches!(sos_univariate(&t, 0, &opts), Err(SosError::NotNonnegative { witness: Some(_) })));
    }

    #[test]
    fn univariate_high_degree_uses_root_pairing() {
        let s = BlockShape::new(0, 1, 0);
        // Π_{k=1..5} (Y^2 + k)
        let mut t = BlockedPoly::one(s);
        for k in 1..=5 {
            t = t.multiply(&p(s, &[(&[2], 1, 1), (&[0], k, 1)])).unwrap();
        }
        let d = sos_univariate(&t, 0, &SosOptions::default()).unwrap();
        assert!(matches!(d.tier, Tier::Numeric(_)));
        assert!(d.residual(&t).unwrap() <= numeric_tolerance(&t));
    }

    #[test]
    fn split_basis_decomposes() {
        // shape with Y1 and a two-variable Y2 block
        let s = BlockShape::new(0, 1, 2);
        let y1 = s.index(Var::Y1(0)).unwrap();
        let y2: Vec<usize> = s.block_indices(crate::poly::Block::Y2).collect();
        // (Y1^2+1)(Y21^2 + Y22^2 + 1) + (Y1 Y21 - 1)^2
        let a = p(s, &[(&[2, 0, 0], 1, 1), (&[0, 0, 0], 1, 1)]);
        let b = p(s, &[(&[0, 2, 0], 1, 1), (&[0, 0, 2], 1, 1), (&[0, 0, 0], 1, 1)]);
        let c = p(s, &[(&[1, 1, 0], 1, 1), (&[0, 0, 0], -1, 1)]);
        let t = a.multiply(&b).unwrap().add(&c.square()).unwrap();
        let d = sos_split(&t, y1, &y2, &SosOptions::default()).unwrap();
        exact_and_matches(&d, &t);
    }

    #[test]
    fn json_round_trip() {
        let s = y2();
        let t = p(s, &[(&[2, 0], 2, 1), (&[1, 1], 2, 1), (&[0, 2], 1, 1)]);
        let d = sos_quadratic_form(&t, &[0, 1]).unwrap();
        let back = SosDecomposition::from_json(&d.to_json(), s).unwrap();
        assert_eq!(back, d);
    }

    fn small_poly() -> impl Strategy<Value = Vec<i64>> {
        proptest::collection::vec(prop_oneof![-4i64..=-1, 1i64..=4], 6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn random_sums_of_squares_round_trip(
            qs in proptest::collection::vec(small_poly(), 3..=6),
            ws in proptest::collection::vec(1i64..=5, 6),
        ) {
            let s = y2();
            let basis = monomial_basis(s, &[0, 1], 2);
            let mut t = BlockedPoly::zero(s);
            for (q, w) in qs.iter().zip(&ws) {
                let qp = BlockedPoly::from_terms(s, basis.iter().zip(q).map(|(e, c)| (e.clone(), rat(*c, 1))));
                t = t.add(&qp.square().scale(&rat(*w, 1))).unwrap();
            }
            prop_assume!(!t.is_zero());
            let d = sos_bivariate_quartic(&t, [0, 1], &SosOptions { allow_numeric: false, ..Default::default() });
            let d = d.unwrap();
            prop_assert!(d.tier.is_exact());
            prop_assert!(d.weights_positive());
            prop_assert_eq!(d.expand(), t);
        }
    }

    #[test]
    fn dependent_leading_forms_share_a_kernel() {
        // the three quadratic parts are linearly dependent, so every Gram
        // matrix is singular
        let s = y2();
        let basis = monomial_basis(s, &[0, 1], 2);
        let qs = [[-2i64, 1, -1, 2, -1, -3], [2, 2, 1, 1, 3, 2], [-2, -4, 1, -1, 1, 2]];
        let mut t = BlockedPoly::zero(s);
        for q in &qs {
            let qp = BlockedPoly::from_terms(s, basis.iter().zip(q).map(|(e, c)| (e.clone(), rat(*c, 1))));
            t = t.add(&qp.square()).unwrap();
        }
        let sol = psd_feasibility(&GramProblem::single(t.clone(), basis.clone()), &SosOptions::default()).unwrap();
        assert!(sol.min_eigenvalue.abs() < 1e-7);
        let d = sos_bivariate_quartic(&t, [0, 1], &SosOptions { allow_numeric: false, ..Default::default() }).unwrap();
        assert!(d.tier.is_exact());
        assert_eq!(d.expand(), t);
    }

    #[test]
    fn boundary_target_is_rounded_inside_its_rational_face() {
        // one real zero; the floating Gram matrix alone does not round
        let s = y2();
        let t = p(
            s,
            &[
                (&[0, 0], 18, 1),
                (&[0, 1], 42, 1),
                (&[0, 2], 92, 1),
                (&[1, 0], -30, 1),
                (&[1, 1], -65, 1),
                (&[1, 2], 40, 1),
                (&[2, 0], 395, 4),
                (&[2, 1], 235, 1),
                (&[2, 2], 5, 1),
                (&[3, 0], -120, 1),
                (&[3, 1], 60, 1),
                (&[4, 0], 2955, 16),
            ],
        );
        let d = sos_bivariate_quartic(&t, [0, 1], &SosOptions { allow_numeric: false, ..Default::default() }).unwrap();
        exact_and_matches(&d, &t);
    }
}
