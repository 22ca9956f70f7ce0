//! Polynomial bases, Gram-form polynomials and exact monomial expansion.
//!
//! A basis is a list of monomials. The default element-wise power basis of
//! degree `d` over `n` coordinates is ordered constant-first, then every
//! coordinate at power 1, then every coordinate at power 2, and so on:
//! `[1, x1, .., xn, x1², .., xn², .., x1^d, .., xn^d]`. Gram indices used
//! everywhere else in the crate refer to this ordering.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::sym::{multiplicity, packed_pairs, SymMatrix};

/// Coefficients with absolute value below this are dropped.
pub const ZERO_THRESHOLD: f64 = 1e-14;

/// Exponent vector of a monomial.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Monomial(pub Vec<u16>);

impl Monomial {
    pub fn one(n: usize) -> Self {
        Monomial(vec![0; n])
    }

    /// `x_i^power`.
    pub fn var_pow(n: usize, i: usize, power: u16) -> Self {
        let mut e = vec![0; n];
        e[i] = power;
        Monomial(e)
    }

    pub fn from_exponents(e: &[u16]) -> Self {
        Monomial(e.to_vec())
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&e| e as u32).sum()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (i, &e) in self.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                f.write_str("*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        if first {
            f.write_str("1")?;
        }
        Ok(())
    }
}

/// Sparse polynomial in monomial form.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialPoly {
    n: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl MonomialPoly {
    pub fn zero(n: usize) -> Self {
        Self { n, terms: BTreeMap::new() }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        let mut p = Self::zero(n);
        p.add_term(Monomial::one(n), c);
        p
    }

    pub fn from_terms(n: usize, terms: impl IntoIterator<Item = (Monomial, f64)>) -> Result<Self> {
        let mut p = Self::zero(n);
        for (m, c) in terms {
            check_dim(n, m.n())?;
            p.add_term(m, c);
        }
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn terms(&self) -> &BTreeMap<Monomial, f64> {
        &self.terms
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        debug_assert_eq!(m.n(), self.n);
        match self.terms.entry(m) {
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if o.get().abs() < ZERO_THRESHOLD {
                    o.remove();
                }
            }
            Entry::Vacant(v) => {
                if c.abs() >= ZERO_THRESHOLD {
                    v.insert(c);
                }
            }
        }
    }

    pub fn add(&self, other: &MonomialPoly) -> Result<MonomialPoly> {
        check_dim(self.n, other.n)?;
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            out.add_term(m.clone(), c);
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> MonomialPoly {
        let mut out = Self::zero(self.n);
        for (m, &c) in &self.terms {
            out.add_term(m.clone(), c * s);
        }
        out
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.n, x.len())?;
        Ok(self.terms.iter().map(|(m, c)| c * m.eval(x)).sum())
    }

    /// Exact product; coefficients below [`ZERO_THRESHOLD`] are dropped.
    pub fn multiply(&self, other: &MonomialPoly) -> Result<MonomialPoly> {
        check_dim(self.n, other.n)?;
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                *acc.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        acc.retain(|_, c| c.abs() >= ZERO_THRESHOLD);
        Ok(MonomialPoly { n: self.n, terms: acc })
    }

    /// Partial derivative with respect to coordinate `j` (zero-based).
    pub fn differentiate(&self, j: usize) -> Result<MonomialPoly> {
        if j >= self.n {
            return Err(Error::Input(format!("coordinate index {j} out of range for n = {}", self.n)));
        }
        let mut out = Self::zero(self.n);
        for (m, &c) in &self.terms {
            let e = m.0[j];
            if e == 0 {
                continue;
            }
            let mut d = m.clone();
            d.0[j] -= 1;
            out.add_term(d, c * e as f64);
        }
        Ok(out)
    }
}

/// `p · q`.
pub fn multiply(p: &MonomialPoly, q: &MonomialPoly) -> Result<MonomialPoly> {
    p.multiply(q)
}

/// `∂p/∂x_j` with a zero-based coordinate index.
pub fn differentiate(p: &MonomialPoly, j: usize) -> Result<MonomialPoly> {
    p.differentiate(j)
}

/// Which monomials make up a basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    /// Pure coordinate powers `x_i^p`.
    #[default]
    Elementwise,
    /// Every multivariate monomial up to the degree.
    Full,
}

impl std::str::FromStr for BasisMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elementwise" => Ok(BasisMode::Elementwise),
            "full" => Ok(BasisMode::Full),
            other => Err(Error::Input(format!("unknown basis mode '{other}'"))),
        }
    }
}

impl fmt::Display for BasisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisMode::Elementwise => "elementwise",
            BasisMode::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisSpec {
    pub n: usize,
    pub degree: usize,
    pub include_constant: bool,
    #[serde(default)]
    pub mode: BasisMode,
}

impl BasisSpec {
    pub fn new(n: usize, degree: usize, include_constant: bool) -> Self {
        Self { n, degree, include_constant, mode: BasisMode::Elementwise }
    }

    pub fn with_mode(mut self, mode: BasisMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn len(&self) -> usize {
        match self.mode {
            BasisMode::Elementwise => self.degree * self.n + self.include_constant as usize,
            BasisMode::Full => self.monomials().len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Basis entries as monomials, in Gram index order.
    pub fn monomials(&self) -> Vec<Monomial> {
        let n = self.n;
        let mut out = Vec::new();
        if self.include_constant {
            out.push(Monomial::one(n));
        }
        match self.mode {
            BasisMode::Elementwise => {
                for p in 1..=self.degree {
                    for i in 0..n {
                        out.push(Monomial::var_pow(n, i, p as u16));
                    }
                }
            }
            BasisMode::Full => {
                for d in 1..=self.degree {
                    let mut level = Vec::new();
                    compositions(n, d as u16, &mut vec![0; n], 0, &mut level);
                    out.extend(level);
                }
            }
        }
        out
    }
}

// Exponent vectors of total degree `remaining`, in descending lexicographic order.
fn compositions(n: usize, remaining: u16, cur: &mut Vec<u16>, pos: usize, out: &mut Vec<Monomial>) {
    if pos == n - 1 {
        cur[pos] = remaining;
        out.push(Monomial(cur.clone()));
        cur[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        cur[pos] = e;
        compositions(n, remaining - e, cur, pos + 1, out);
    }
    cur[pos] = 0;
}

/// Evaluates the basis at `x`.
pub fn basis_vector(x: &[f64], spec: &BasisSpec) -> Result<Vec<f64>> {
    check_dim(spec.n, x.len())?;
    let mut out = Vec::with_capacity(spec.len());
    if spec.include_constant {
        out.push(1.0);
    }
    match spec.mode {
        BasisMode::Elementwise => {
            let mut pow = x.to_vec();
            for p in 1..=spec.degree {
                out.extend_from_slice(&pow);
                if p < spec.degree {
                    for (v, &xi) in pow.iter_mut().zip(x) {
                        *v *= xi;
                    }
                }
            }
        }
        BasisMode::Full => {
            let skip = spec.include_constant as usize;
            out.extend(spec.monomials().iter().skip(skip).map(|m| m.eval(x)));
        }
    }
    Ok(out)
}

/// One scalar polynomial `b(x)ᵀ B b(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramPolynomial {
    pub spec: BasisSpec,
    pub matrix: SymMatrix,
}

impl GramPolynomial {
    pub fn new(spec: BasisSpec, matrix: SymMatrix) -> Result<Self> {
        check_dim(spec.len(), matrix.dim())?;
        Ok(Self { spec, matrix })
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        eval_gram(self, x)
    }

    pub fn expand(&self) -> MonomialPoly {
        expand_gram(self)
    }
}

pub fn eval_gram(p: &GramPolynomial, x: &[f64]) -> Result<f64> {
    let b = basis_vector(x, &p.spec)?;
    Ok(p.matrix.quad_form(&b))
}

pub fn expand_gram(p: &GramPolynomial) -> MonomialPoly {
    let mons = p.spec.monomials();
    let mut out = MonomialPoly::zero(p.spec.n);
    for (k, l) in packed_pairs(mons.len()) {
        let c = p.matrix.get(k, l);
        if c != 0.0 {
            out.add_term(mons[k].mul(&mons[l]), multiplicity(k, l) * c);
        }
    }
    out
}

/// For every monomial reachable as a product of two basis entries, the list of
/// index pairs `(k, l)`, `k <= l`, producing it.
pub fn gram_support(spec: &BasisSpec) -> BTreeMap<Monomial, Vec<(usize, usize)>> {
    let mons = spec.monomials();
    let mut out: BTreeMap<Monomial, Vec<(usize, usize)>> = BTreeMap::new();
    for (k, l) in packed_pairs(mons.len()) {
        out.entry(mons[k].mul(&mons[l])).or_default().push((k, l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mono(e: &[u16]) -> Monomial {
        Monomial::from_exponents(e)
    }

    #[test]
    fn basis_examples() {
        let s = BasisSpec::new(2, 1, true);
        assert_eq!(basis_vector(&[0.0, 0.0], &s).unwrap(), vec![1.0, 0.0, 0.0]);
        let s = BasisSpec::new(1, 1, true);
        assert_eq!(basis_vector(&[3.5], &s).unwrap(), vec![1.0, 3.5]);
        let s = BasisSpec::new(2, 3, true);
        assert_eq!(basis_vector(&[2.0, -1.0], &s).unwrap(), vec![1.0, 2.0, -1.0, 4.0, 1.0, 8.0, -1.0]);
        assert!(matches!(basis_vector(&[1.0], &s), Err(Error::Dimension { .. })));
    }

    #[test]
    fn basis_length_and_ordering() {
        for n in 1..4 {
            for d in 1..4 {
                let s = BasisSpec::new(n, d, true);
                assert_eq!(s.len(), d * n + 1);
                let mons = s.monomials();
                for (k, m) in mons.iter().enumerate().skip(1) {
                    let i = (k - 1) % n;
                    let p = k.div_ceil(n);
                    assert_eq!(*m, Monomial::var_pow(n, i, p as u16));
                }
                assert_eq!(BasisSpec::new(n, d, false).len(), d * n);
            }
        }
    }

    #[test]
    fn full_basis_counts() {
        // monomials of degree 1..=2 in 3 variables: 3 + 6
        let s = BasisSpec::new(3, 2, false).with_mode(BasisMode::Full);
        assert_eq!(s.len(), 9);
        let x = [0.5, -2.0, 3.0];
        let b = basis_vector(&x, &s).unwrap();
        let direct: Vec<f64> = s.monomials().iter().map(|m| m.eval(&x)).collect();
        assert_eq!(b, direct);
    }

    #[test]
    fn eval_gram_examples() {
        let spec = BasisSpec::new(1, 1, true);
        let p = GramPolynomial::new(spec, SymMatrix::from_rows(&[vec![0.0, -0.5], vec![-0.5, 0.0]])).unwrap();
        assert_eq!(eval_gram(&p, &[3.0]).unwrap(), -3.0);

        let red = BasisSpec::new(2, 2, false);
        let q = GramPolynomial::new(red, SymMatrix::identity(4)).unwrap();
        assert_eq!(eval_gram(&q, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn symbolic_expansion_of_one_dimensional_gram() {
        // b = [1, x], B = [[p00, p01], [p01, p11]] expands to p00 + 2 p01 x + p11 x².
        let (p00, p01, p11) = (0.7, -1.3, 2.1);
        let spec = BasisSpec::new(1, 1, true);
        let g = GramPolynomial::new(spec, SymMatrix::from_rows(&[vec![p00, p01], vec![p01, p11]])).unwrap();
        let e = expand_gram(&g);
        assert_eq!(e.coeff(&mono(&[0])), p00);
        assert_eq!(e.coeff(&mono(&[1])), 2.0 * p01);
        assert_eq!(e.coeff(&mono(&[2])), p11);
        assert_eq!(e.terms().len(), 3);
    }

    #[test]
    fn expand_examples() {
        let spec = BasisSpec::new(1, 1, true);
        let e = expand_gram(&GramPolynomial::new(spec, SymMatrix::identity(2)).unwrap());
        let expect = MonomialPoly::from_terms(1, [(mono(&[0]), 1.0), (mono(&[2]), 1.0)]).unwrap();
        assert_eq!(e, expect);

        let e = expand_gram(
            &GramPolynomial::new(spec, SymMatrix::from_rows(&[vec![0.0, -0.5], vec![-0.5, 0.0]])).unwrap(),
        );
        assert_eq!(e, MonomialPoly::from_terms(1, [(mono(&[1]), -1.0)]).unwrap());

        // brute-force pairwise products of [x1, x2]
        let red = BasisSpec::new(2, 1, false);
        let e = expand_gram(
            &GramPolynomial::new(red, SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 2.0]])).unwrap(),
        );
        let expect =
            MonomialPoly::from_terms(2, [(mono(&[2, 0]), 1.0), (mono(&[1, 1]), 1.0), (mono(&[0, 2]), 2.0)])
                .unwrap();
        assert_eq!(e, expect);
    }

    #[test]
    fn differentiate_examples() {
        let p = MonomialPoly::from_terms(2, [(mono(&[2, 0]), 1.0)]).unwrap();
        assert_eq!(p.differentiate(0).unwrap(), MonomialPoly::from_terms(2, [(mono(&[1, 0]), 2.0)]).unwrap());
        let p = MonomialPoly::from_terms(2, [(mono(&[0, 3]), 4.0)]).unwrap();
        assert!(p.differentiate(0).unwrap().is_zero());
        let p = MonomialPoly::from_terms(2, [(mono(&[2, 1]), 3.0)]).unwrap();
        assert_eq!(p.differentiate(1).unwrap(), MonomialPoly::from_terms(2, [(mono(&[2, 0]), 3.0)]).unwrap());
        assert!(matches!(p.differentiate(2), Err(Error::Input(_))));
    }

    #[test]
    fn multiply_examples() {
        let p = MonomialPoly::from_terms(1, [(mono(&[1]), 2.0)]).unwrap();
        assert_eq!(p.multiply(&p).unwrap(), MonomialPoly::from_terms(1, [(mono(&[2]), 4.0)]).unwrap());
        assert_eq!(p.multiply(&MonomialPoly::constant(1, 1.0)).unwrap(), p);

        let a = MonomialPoly::from_terms(2, [(mono(&[1, 0]), 1.0), (mono(&[0, 1]), 1.0)]).unwrap();
        let b = MonomialPoly::from_terms(2, [(mono(&[1, 0]), 1.0), (mono(&[0, 1]), -1.0)]).unwrap();
        let expect = MonomialPoly::from_terms(2, [(mono(&[2, 0]), 1.0), (mono(&[0, 2]), -1.0)]).unwrap();
        assert_eq!(a.multiply(&b).unwrap(), expect);

        let c = MonomialPoly::zero(3);
        assert!(matches!(a.multiply(&c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cancellation_keeps_canonical_form() {
        let mut p = MonomialPoly::zero(1);
        p.add_term(mono(&[2]), 1.0);
        p.add_term(mono(&[2]), -1.0);
        assert!(p.is_zero());
    }

    #[test]
    fn gram_support_examples() {
        let s = gram_support(&BasisSpec::new(1, 1, true));
        assert_eq!(s.len(), 3);
        assert_eq!(s[&mono(&[0])], vec![(0, 0)]);
        assert_eq!(s[&mono(&[1])], vec![(0, 1)]);
        assert_eq!(s[&mono(&[2])], vec![(1, 1)]);

        let s = gram_support(&BasisSpec::new(1, 2, false));
        assert_eq!(s[&mono(&[2])], vec![(0, 0)]);
        assert_eq!(s[&mono(&[3])], vec![(0, 1)]);
        assert_eq!(s[&mono(&[4])], vec![(1, 1)]);

        let s = gram_support(&BasisSpec::new(2, 1, true));
        assert_eq!(s[&mono(&[1, 1])], vec![(1, 2)]);
    }
}
