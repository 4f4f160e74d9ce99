//! Putinar representations of the parity monomials
//! `(1 − X1 − ... − Xn)^{v0} X^v̄`, `v ∈ {0,1}^{n+1}`, over the constraints,
//! found by multi-block Gram feasibility and cached per constraint list.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::poly::{one_minus_sum, BlockShape, BlockedPoly, PolyError, Var};
use crate::problem::{CylinderProblem, Frame};
use crate::sos::{self, GramBlock, GramProblem, SosDecomposition, SosError, SosOptions, Tier};

#[derive(Debug, Error)]
pub enum BaseError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("no representation of the parity monomial {v:?} up to degree {budget}: {last}")]
    BudgetExhausted { v: Vec<u32>, budget: u32, last: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("cache file {path}: {msg}")]
    Cache { path: String, msg: String },
}

pub const BUDGET_CAP: u32 = 16;
/// Largest `n` for which all `2^{n+1}` certificates are built eagerly.
pub const EAGER_LIMIT: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct BaseCertificate {
    pub v: Vec<u32>,
    /// `σ_0, σ_1, ..., σ_s` in the X ring.
    pub sigmas: Vec<SosDecomposition>,
    /// `max deg σ_i g_i` with `g_0 = 1`.
    pub degree: u32,
}

impl BaseCertificate {
    pub fn tier(&self) -> Tier {
        self.sigmas.iter().fold(Tier::Exact, |t, s| t.combine(&s.tier))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "v": self.v,
            "degree": self.degree,
            "sigmas": self.sigmas.iter().map(SosDecomposition::to_json).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value, shape: BlockShape) -> Result<Self, SosError> {
        let pv = v
            .get("v")
            .and_then(Value::as_array)
            .ok_or_else(|| SosError::Schema("missing parity vector".into()))?
            .iter()
            .map(|x| x.as_u64().map(|x| x as u32).ok_or_else(|| SosError::Schema("bad parity entry".into())))
            .collect::<Result<Vec<_>, _>>()?;
        let degree = v.get("degree").and_then(Value::as_u64).ok_or_else(|| SosError::Schema("missing degree".into()))? as u32;
        let sigmas = v
            .get("sigmas")
            .and_then(Value::as_array)
            .ok_or_else(|| SosError::Schema("missing sigmas".into()))?
            .iter()
            .map(|s| SosDecomposition::from_json(s, shape))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BaseCertificate { v: pv, sigmas, degree })
    }

    /// `σ_0 + Σ σ_i g_i − target`, exactly.
    pub fn defect(&self, g: &[BlockedPoly]) -> Result<BlockedPoly, PolyError> {
        let target = parity_monomial(g[0].shape(), &self.v);
        let mut total = self.sigmas[0].expand();
        for (s, gi) in self.sigmas[1..].iter().zip(g) {
            total = total.add(&s.expand().multiply(gi)?)?;
        }
        total.sub(&target)
    }
}

/// Componentwise parity of `α`.
pub fn parity_vector(alpha: &[u32]) -> Vec<u32> {
    alpha.iter().map(|a| a % 2).collect()
}

/// `(1 − ΣX)^{e0} X^ē` in an X-only shape.
pub fn parity_monomial(shape: BlockShape, e: &[u32]) -> BlockedPoly {
    let mut mono = vec![0; shape.nvars()];
    for (i, &ei) in e[1..].iter().enumerate() {
        mono[shape.index(Var::X(i)).expect("x variable")] = ei;
    }
    let m = BlockedPoly::monomial(shape, mono, crate::poly::rat_int(1));
    m.multiply(&one_minus_sum(shape).pow(e[0])).expect("same shape")
}

fn half_basis(shape: BlockShape, budget: u32, multiplier_degree: u32) -> Vec<Vec<u32>> {
    if multiplier_degree > budget {
        return Vec::new();
    }
    let vars: Vec<usize> = shape.bounded_indices().collect();
    sos::monomial_basis(shape, &vars, (budget - multiplier_degree) / 2)
}

/// Searches `target = σ_0 + Σ σ_i g_i` with `deg σ_i g_i ≤ budget`, doubling
/// the budget from `max(2, 2·max deg g_i)` up to [`BUDGET_CAP`].
pub fn base_certificate(p: &CylinderProblem, v: &[u32], opts: &SosOptions) -> Result<BaseCertificate, BaseError> {
    if p.frame != Frame::Simplex {
        return Err(BaseError::Invalid("base certificates need the simplex frame".into()));
    }
    if v.len() != p.n + 1 || v.iter().any(|&x| x > 1) {
        return Err(BaseError::Invalid(format!("parity vector {v:?} for n = {}", p.n)));
    }
    let shape = p.x_shape();
    if v.iter().all(|&x| x == 0) {
        let mut sigmas = vec![SosDecomposition::one(shape)];
        sigmas.extend(p.g.iter().map(|_| SosDecomposition::zero(shape)));
        return Ok(BaseCertificate { v: v.to_vec(), sigmas, degree: 0 });
    }
    let target = parity_monomial(shape, v);
    let gdeg = p.g.iter().map(BlockedPoly::total_degree).max().unwrap_or(0);
    let mut budget = (2 * gdeg).max(2).max(target.total_degree().next_multiple_of(2));
    loop {
        let mut blocks = vec![GramBlock { multiplier: BlockedPoly::one(shape), basis: half_basis(shape, budget, 0) }];
        for gi in &p.g {
            blocks.push(GramBlock { multiplier: gi.clone(), basis: half_basis(shape, budget, gi.total_degree()) });
        }
        let gp = GramProblem { target: target.clone(), blocks };
        match sos::solve_gram(&gp, opts) {
            Ok(sigmas) => {
                let mut degree = sigmas[0].degree();
                for (s, gi) in sigmas[1..].iter().zip(&p.g) {
                    if !s.is_zero() {
                        degree = degree.max(s.degree() + gi.total_degree());
                    }
                }
                return Ok(BaseCertificate { v: v.to_vec(), sigmas, degree });
            }
            Err(e) if budget >= BUDGET_CAP => {
                return Err(BaseError::BudgetExhausted { v: v.to_vec(), budget, last: e.to_string() })
            }
            Err(_) => {}
        }
        budget = (budget * 2).min(BUDGET_CAP);
    }
}

/// All parity vectors of length `n + 1`, lexicographic.
pub fn parity_vectors(n: usize) -> Vec<Vec<u32>> {
    (0..1u32 << (n + 1)).map(|bits| (0..=n).rev().map(|i| (bits >> i) & 1).collect()).collect()
}

/// Write-once map `(g-hash, v) → certificate`, optionally mirrored to a
/// sidecar JSON file.
#[derive(Debug, Default)]
pub struct BaseCache {
    entries: Mutex<BTreeMap<(String, Vec<u32>), BaseCertificate>>,
    path: Option<PathBuf>,
}

impl BaseCache {
    pub fn in_memory() -> Self {
        BaseCache::default()
    }

    /// Opens (or prepares) a sidecar file holding the certificates of one
    /// problem.
    pub fn with_file(path: &Path, shape: BlockShape) -> Result<Self, BaseError> {
        let cache = BaseCache { entries: Mutex::new(BTreeMap::new()), path: Some(path.to_path_buf()) };
        if path.exists() {
            let err = |msg: String| BaseError::Cache { path: path.display().to_string(), msg };
            let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
            let arr = v.get("entries").and_then(Value::as_array).ok_or_else(|| err("missing entries".into()))?;
            let mut map = cache.entries.lock().unwrap();
            for e in arr {
                let key = e.get("g_hash").and_then(Value::as_str).ok_or_else(|| err("entry without g_hash".into()))?;
                let cert = BaseCertificate::from_json(e, shape).map_err(|e| err(e.to_string()))?;
                map.insert((key.to_string(), cert.v.clone()), cert);
            }
        }
        Ok(cache)
    }

    pub fn get(&self, g_hash: &str, v: &[u32]) -> Option<BaseCertificate> {
        self.entries.lock().unwrap().get(&(g_hash.to_string(), v.to_vec())).cloned()
    }

    /// Inserts unless present; returns the stored value.
    pub fn insert(&self, g_hash: &str, cert: BaseCertificate) -> BaseCertificate {
        self.entries.lock().unwrap().entry((g_hash.to_string(), cert.v.clone())).or_insert(cert).clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> Value {
        let map = self.entries.lock().unwrap();
        let entries: Vec<Value> = map
            .iter()
            .map(|((h, _), c)| {
                let mut v = c.to_json();
                v["g_hash"] = json!(h);
                v
            })
            .collect();
        json!({ "entries": entries })
    }

    /// Writes the sidecar atomically (temporary file, then rename).
    pub fn persist(&self) -> Result<(), BaseError> {
        let Some(path) = &self.path else { return Ok(()) };
        let err = |msg: String| BaseError::Cache { path: path.display().to_string(), msg };
        let text = serde_json::to_string_pretty(&self.to_json()).map_err(|e| err(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| err(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
    }

    /// Fetches or builds the certificate for `v`. Cached entries are
    /// re-verified against the constraints before use.
    pub fn certificate(&self, p: &CylinderProblem, v: &[u32], opts: &SosOptions) -> Result<BaseCertificate, BaseError> {
        let key = p.g_hash();
        if let Some(c) = self.get(&key, v) {
            let ok = c.sigmas.len() == p.s() + 1
                && c.sigmas.iter().all(SosDecomposition::weights_positive)
                && (!c.tier().is_exact() || c.defect(&p.g).is_ok_and(|d| d.is_zero()));
            if ok {
                return Ok(c);
            }
        }
        let cert = base_certificate(p, v, opts)?;
        Ok(self.insert(&key, cert))
    }

    /// Builds every parity certificate in parallel (for `n ≤` [`EAGER_LIMIT`]).
    pub fn build_all(&self, p: &CylinderProblem, opts: &SosOptions) -> Result<BTreeMap<Vec<u32>, BaseCertificate>, BaseError> {
        if p.n > EAGER_LIMIT {
            return Err(BaseError::Invalid(format!("n = {} exceeds the eager limit {EAGER_LIMIT}", p.n)));
        }
        let vs = parity_vectors(p.n);
        let built: Vec<Result<BaseCertificate, BaseError>> = vs.par_iter().map(|v| self.certificate(p, v, opts)).collect();
        let mut out = BTreeMap::new();
        for c in built {
            let c = c?;
            out.insert(c.v.clone(), c);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::rat;
    use crate::problem::Variant;

    fn interval_problem() -> CylinderProblem {
        // S = [1/4, 1/2] via g = (X - 1/4)(1/2 - X) = -X^2 + 3/4 X - 1/8
        let xs = BlockShape::new(1, 0, 0);
        let g = BlockedPoly::from_terms(xs, [(vec![2], rat(-1, 1)), (vec![1], rat(3, 4)), (vec![0], rat(-1, 8))]);
        let shape = Variant::R1AnyM.shape(1, 1);
        let f = BlockedPoly::from_terms(shape, [(vec![0, 0], rat(1, 1)), (vec![1, 0], rat(1, 1)), (vec![1, 2], rat(1, 1))]);
        CylinderProblem::new(Variant::R1AnyM, 1, 1, 2, Frame::Simplex, f, vec![g], true).unwrap()
    }

    #[test]
    fn parity_examples() {
        assert_eq!(parity_vector(&[3, 2, 0]), vec![1, 0, 0]);
        assert_eq!(parity_vector(&[0, 0, 0]), vec![0, 0, 0]);
        assert_eq!(parity_vector(&[5, 1]), vec![1, 1]);
        assert_eq!(parity_vectors(1), vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn even_part_is_a_square() {
        let xs = BlockShape::new(2, 0, 0);
        let alpha = [3u32, 2, 5];
        let v = parity_vector(&alpha);
        let half: Vec<u32> = alpha.iter().zip(&v).map(|(a, b)| (a - b) / 2).collect();
        let lhs = parity_monomial(xs, &alpha);
        let rhs = parity_monomial(xs, &half).square().multiply(&parity_monomial(xs, &v)).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn zero_vector_is_trivial() {
        let p = interval_problem();
        let c = base_certificate(&p, &[0, 0], &SosOptions::default()).unwrap();
        assert_eq!(c.degree, 0);
        assert_eq!(c.sigmas[0], SosDecomposition::one(p.x_shape()));
        assert!(c.sigmas[1].is_zero());
    }

    #[test]
    fn interval_certificates_verify_exactly() {
        let p = interval_problem();
        let opts = SosOptions { allow_numeric: false, ..Default::default() };
        for v in parity_vectors(1) {
            let c = base_certificate(&p, &v, &opts).unwrap();
            assert!(c.tier().is_exact());
            assert!(c.sigmas.iter().all(SosDecomposition::weights_positive));
            // expansion oracle: σ0 + σ1 g − target is the zero polynomial
            assert!(c.defect(&p.g).unwrap().is_zero(), "{v:?}");
            assert!(c.degree <= BUDGET_CAP);
        }
    }

    #[test]
    fn cache_is_write_once_and_persists() {
        let p = interval_problem();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.json");
        let opts = SosOptions::default();
        let cache = BaseCache::with_file(&path, p.x_shape()).unwrap();
        let all = cache.build_all(&p, &opts).unwrap();
        assert_eq!(all.len(), 4);
        cache.persist().unwrap();
        let again = BaseCache::with_file(&path, p.x_shape()).unwrap();
        assert_eq!(again.len(), 4);
        for (v, c) in &all {
            let back = again.certificate(&p, v, &opts).unwrap();
            assert_eq!(back.to_json(), c.to_json());
        }
        // a different certificate for a cached key is ignored
        let mut other = all[&vec![0, 1]].clone();
        other.degree += 100;
        let kept = cache.insert(&p.g_hash(), other);
        assert_eq!(kept, all[&vec![0, 1]]);
    }
}
