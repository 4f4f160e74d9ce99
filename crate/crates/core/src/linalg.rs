//! Exact rational linear algebra: symmetric LDLᵀ with witnesses of
//! indefiniteness, linear systems, nullspaces and LLL lattice reduction.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};

use crate::poly::Rational;

/// One elimination step: pivot index, pivot value `d` and the row `ℓ` with
/// `ℓ[pivot] = 1`, so that `A = Σ d ℓ ℓᵀ` when elimination completes.
#[derive(Clone, Debug, PartialEq)]
pub struct Pivot {
    pub index: usize,
    pub d: Rational,
    pub row: Vec<Rational>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ldl {
    Psd(Vec<Pivot>),
    /// `witnessᵀ A witness < 0`.
    Indefinite(Vec<Rational>),
}

/// Symmetric elimination taking the first nonzero diagonal entry as pivot.
/// Zero pivots are skipped; a negative pivot or a zero diagonal with a
/// nonzero off-diagonal entry yields an indefiniteness witness.
pub fn ldl(a: &[Vec<Rational>]) -> Ldl {
    let n = a.len();
    let mut s: Vec<Vec<Rational>> = a.to_vec();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut pivots: Vec<Pivot> = Vec::new();
    loop {
        let Some(pos) = remaining.iter().position(|&i| !s[i][i].is_zero()) else {
            // all remaining diagonal entries vanish
            for (k, &i) in remaining.iter().enumerate() {
                for &j in &remaining[k + 1..] {
                    if !s[i][j].is_zero() {
                        let mut w = vec![Rational::zero(); n];
                        w[i] = Rational::from_integer(1.into());
                        w[j] = Rational::from_integer(if s[i][j].is_positive() { (-1).into() } else { 1.into() });
                        return Ldl::Indefinite(back_substitute(&pivots, w));
                    }
                }
            }
            return Ldl::Psd(pivots);
        };
        let i = remaining.remove(pos);
        let d = s[i][i].clone();
        if d.is_negative() {
            let mut w = vec![Rational::zero(); n];
            w[i] = Rational::from_integer(1.into());
            return Ldl::Indefinite(back_substitute(&pivots, w));
        }
        let mut row = vec![Rational::zero(); n];
        row[i] = Rational::from_integer(1.into());
        for &j in &remaining {
            row[j] = &s[j][i] / &d;
        }
        for &j in &remaining {
            if row[j].is_zero() {
                continue;
            }
            for &k in &remaining {
                if row[k].is_zero() {
                    continue;
                }
                let t = &d * &row[j] * &row[k];
                s[j][k] -= t;
            }
        }
        pivots.push(Pivot { index: i, d, row });
    }
}

/// Extends a witness of the current Schur complement to the full matrix by
/// making every eliminated combination `ℓ·v` vanish.
fn back_substitute(pivots: &[Pivot], mut v: Vec<Rational>) -> Vec<Rational> {
    for p in pivots.iter().rev() {
        let mut acc = Rational::zero();
        for (j, l) in p.row.iter().enumerate() {
            if j != p.index && !l.is_zero() {
                acc += l * &v[j];
            }
        }
        v[p.index] = -acc;
    }
    v
}

pub fn quadratic_value(a: &[Vec<Rational>], v: &[Rational]) -> Rational {
    let mut acc = Rational::zero();
    for (i, row) in a.iter().enumerate() {
        for (j, aij) in row.iter().enumerate() {
            if !aij.is_zero() {
                acc += aij * &v[i] * &v[j];
            }
        }
    }
    acc
}

/// Solves `m y = r` by Gauss-Jordan elimination, setting free variables to
/// zero. Returns `None` when the system is inconsistent.
pub fn solve(m: &[Vec<Rational>], r: &[Rational]) -> Option<Vec<Rational>> {
    let rows = m.len();
    let cols = if rows == 0 { 0 } else { m[0].len() };
    let mut a: Vec<Vec<Rational>> = m.iter().zip(r).map(|(row, b)| row.iter().cloned().chain([b.clone()]).collect()).collect();
    let mut pivot_cols = Vec::new();
    let mut prow = 0;
    for c in 0..cols {
        let Some(p) = (prow..rows).find(|&i| !a[i][c].is_zero()) else { continue };
        a.swap(prow, p);
        let inv = a[prow][c].recip();
        for v in a[prow].iter_mut() {
            *v *= &inv;
        }
        for i in 0..rows {
            if i == prow || a[i][c].is_zero() {
                continue;
            }
            let f = a[i][c].clone();
            let (src, dst) = if i < prow {
                let (x, y) = a.split_at_mut(prow);
                (&y[0], &mut x[i])
            } else {
                let (x, y) = a.split_at_mut(i);
                (&x[prow], &mut y[0])
            };
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                if !s.is_zero() {
                    *d -= &f * s;
                }
            }
        }
        pivot_cols.push(c);
        prow += 1;
        if prow == rows {
            break;
        }
    }
    if a[prow..].iter().any(|row| !row[cols].is_zero()) {
        return None;
    }
    let mut y = vec![Rational::zero(); cols];
    for (k, &c) in pivot_cols.iter().enumerate() {
        y[c] = a[k][cols].clone();
    }
    Some(y)
}

/// Reduced row echelon form; returns the nonzero rows and their pivot columns.
pub fn rref(m: &[Vec<Rational>]) -> (Vec<Vec<Rational>>, Vec<usize>) {
    let mut a: Vec<Vec<Rational>> = m.to_vec();
    let cols = a.first().map_or(0, Vec::len);
    let mut pivots = Vec::new();
    let mut prow = 0;
    for c in 0..cols {
        if prow == a.len() {
            break;
        }
        let Some(p) = (prow..a.len()).find(|&i| !a[i][c].is_zero()) else { continue };
        a.swap(prow, p);
        let inv = a[prow][c].recip();
        a[prow].iter_mut().for_each(|v| *v *= &inv);
        let src = a[prow].clone();
        for (i, row) in a.iter_mut().enumerate() {
            if i == prow || row[c].is_zero() {
                continue;
            }
            let f = row[c].clone();
            for (d, s) in row.iter_mut().zip(&src) {
                if !s.is_zero() {
                    *d -= &f * s;
                }
            }
        }
        pivots.push(c);
        prow += 1;
    }
    a.truncate(prow);
    (a, pivots)
}

/// Basis of `{x : m x = 0}` for a matrix with `cols` columns.
pub fn nullspace(m: &[Vec<Rational>], cols: usize) -> Vec<Vec<Rational>> {
    let (r, pivots) = rref(m);
    let mut out = Vec::new();
    for free in (0..cols).filter(|c| !pivots.contains(c)) {
        let mut x = vec![Rational::zero(); cols];
        x[free] = Rational::one();
        for (row, &p) in r.iter().zip(&pivots) {
            x[p] = -row[free].clone();
        }
        out.push(x);
    }
    out
}

/// LLL reduction (`δ = 3/4`) of linearly independent integer rows.
pub fn lll(mut b: Vec<Vec<BigInt>>) -> Vec<Vec<BigInt>> {
    let n = b.len();
    if n < 2 {
        return b;
    }
    let dot = |x: &[Rational], y: &[Rational]| -> Rational { x.iter().zip(y).map(|(a, c)| a * c).sum() };
    let to_q = |v: &[BigInt]| -> Vec<Rational> { v.iter().map(|x| Rational::from_integer(x.clone())).collect() };
    let gram_schmidt = |b: &[Vec<BigInt>]| -> (Vec<Vec<Rational>>, Vec<Rational>, Vec<Vec<Rational>>) {
        let mut star: Vec<Vec<Rational>> = Vec::with_capacity(n);
        let mut norms: Vec<Rational> = Vec::with_capacity(n);
        let mut mu = vec![vec![Rational::zero(); n]; n];
        for i in 0..n {
            let bi = to_q(&b[i]);
            let mut v = bi.clone();
            for j in 0..i {
                mu[i][j] = dot(&bi, &star[j]) / &norms[j];
                for (x, s) in v.iter_mut().zip(&star[j]) {
                    *x -= &mu[i][j] * s;
                }
            }
            norms.push(dot(&v, &v));
            star.push(v);
        }
        (star, norms, mu)
    };
    let delta = Rational::new(BigInt::from(3), BigInt::from(4));
    let (_, mut norms, mut mu) = gram_schmidt(&b);
    let mut k = 1;
    while k < n {
        for j in (0..k).rev() {
            let q = mu[k][j].round().to_integer();
            if q.is_zero() {
                continue;
            }
            let bj = b[j].clone();
            for (x, y) in b[k].iter_mut().zip(&bj) {
                *x -= &q * y;
            }
            let qq = Rational::from_integer(q);
            for l in 0..=j {
                let m = if l == j { Rational::one() } else { mu[j][l].clone() };
                mu[k][l] -= &qq * m;
            }
        }
        let lhs = &norms[k] + &mu[k][k - 1] * &mu[k][k - 1] * &norms[k - 1];
        if lhs >= &delta * &norms[k - 1] {
            k += 1;
        } else {
            b.swap(k, k - 1);
            (_, norms, mu) = gram_schmidt(&b);
            k = (k - 1).max(1);
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::rat;

    fn m(rows: &[&[i64]]) -> Vec<Vec<Rational>> {
        rows.iter().map(|r| r.iter().map(|&v| rat(v, 1)).collect()).collect()
    }

    #[test]
    fn ldl_examples() {
        match ldl(&m(&[&[2, 1], &[1, 1]])) {
            Ldl::Psd(p) => {
                assert_eq!(p[0].d, rat(2, 1));
                assert_eq!(p[0].row, vec![rat(1, 1), rat(1, 2)]);
                assert_eq!(p[1].d, rat(1, 2));
            }
            other => panic!("{other:?}"),
        }
        let a = vec![vec![rat(0, 1), rat(1, 2)], vec![rat(1, 2), rat(0, 1)]];
        match ldl(&a) {
            Ldl::Indefinite(w) => {
                assert_eq!(w, vec![rat(1, 1), rat(-1, 1)]);
                assert!(quadratic_value(&a, &w) < rat(0, 1));
            }
            other => panic!("{other:?}"),
        }
        let a = m(&[&[1, 2, 0], &[2, 1, 0], &[0, 0, 3]]);
        match ldl(&a) {
            Ldl::Indefinite(w) => assert!(quadratic_value(&a, &w) < rat(0, 1)),
            other => panic!("{other:?}"),
        }
        // rank deficient PSD
        assert!(matches!(ldl(&m(&[&[1, 1], &[1, 1]])), Ldl::Psd(_)));
    }

    #[test]
    fn solve_examples() {
        let a = m(&[&[1, 1, 0], &[0, 1, 1], &[1, 2, 1]]);
        let y = solve(&a, &[rat(1, 1), rat(2, 1), rat(3, 1)]).unwrap();
        assert_eq!(&y[0] + &y[1], rat(1, 1));
        assert_eq!(&y[1] + &y[2], rat(2, 1));
        assert!(solve(&a, &[rat(1, 1), rat(2, 1), rat(4, 1)]).is_none());
    }

    #[test]
    fn nullspace_examples() {
        let a = m(&[&[1, 2, 3], &[2, 4, 6]]);
        let k = nullspace(&a, 3);
        assert_eq!(k.len(), 2);
        for x in &k {
            assert!(a.iter().all(|row| row.iter().zip(x).map(|(p, q)| p * q).sum::<Rational>().is_zero()));
        }
        assert_eq!(nullspace(&m(&[&[1, 0], &[0, 1]]), 2).len(), 0);
    }

    #[test]
    fn lll_finds_a_short_relation() {
        // 3·a − 2·b + c = 0 hidden in a lattice with a large scaled column
        let (a, b, c) = (1.2345678_f64, 2.5123457_f64, 2.0 * 2.5123457 - 3.0 * 1.2345678);
        let s = 1e9;
        let rows: Vec<Vec<BigInt>> = [a, b, c]
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut r = vec![BigInt::zero(); 3];
                r[i] = BigInt::one();
                r.push(BigInt::from((x * s).round() as i64));
                r
            })
            .collect();
        let red = lll(rows);
        let w = &red[0];
        assert!(w[3].abs() <= BigInt::from(2));
        let w: Vec<i64> = w[..3].iter().map(|x| i64::try_from(x.clone()).unwrap()).collect();
        assert!(w == [3, -2, 1] || w == [-3, 2, -1], "{w:?}");
    }

    proptest::proptest! {
        #[test]
        fn nullspace_is_annihilated(rows in proptest::collection::vec(proptest::collection::vec(-4i64..5, 5), 1..5)) {
            let a: Vec<Vec<Rational>> = rows.iter().map(|r| r.iter().map(|&v| rat(v, 1)).collect()).collect();
            let k = nullspace(&a, 5);
            let (r, _) = rref(&a);
            proptest::prop_assert_eq!(k.len() + r.len(), 5);
            for x in &k {
                for row in &a {
                    proptest::prop_assert!(row.iter().zip(x).map(|(p, q)| p * q).sum::<Rational>().is_zero());
                }
            }
        }

        #[test]
        fn lll_first_vector_is_short(rows in proptest::collection::vec(proptest::collection::vec(-50i64..51, 4), 4)) {
            let b: Vec<Vec<BigInt>> = rows.iter().map(|r| r.iter().map(|&v| BigInt::from(v)).collect()).collect();
            let q: Vec<Vec<Rational>> = rows.iter().map(|r| r.iter().map(|&v| rat(v, 1)).collect()).collect();
            proptest::prop_assume!(rref(&q).0.len() == 4);
            let red = lll(b.clone());
            let norm = |v: &[BigInt]| -> BigInt { v.iter().map(|x| x * x).sum() };
            // reduced rows stay in the lattice: each solves b^T y = row with integer y
            let bt: Vec<Vec<Rational>> = (0..4).map(|j| q.iter().map(|r| r[j].clone()).collect()).collect();
            for v in &red {
                let rhs: Vec<Rational> = v.iter().map(|x| Rational::from_integer(x.clone())).collect();
                let y = solve(&bt, &rhs).unwrap();
                proptest::prop_assert!(y.iter().all(|c| c.is_integer()));
            }
            let shortest_input = b.iter().map(|v| norm(v)).min().unwrap();
            proptest::prop_assert!(norm(&red[0]) <= shortest_input * BigInt::from(8));
        }
    }
}
