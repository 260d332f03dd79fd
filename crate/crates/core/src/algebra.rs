//! Sparse Grassmann algebra over at most 64 ordered generators.
//!
//! Monomials are bitmasks with generator `j` at bit `j`; the canonical
//! monomial lists generators in ascending order.

use std::collections::HashMap;
use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_complex::{Complex, Complex64};
use num_rational::BigRational;
use num_traits::{Num, One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{usage, validation, Error, Result};

pub const MAX_GENERATORS: usize = 64;
pub const DEFAULT_PRUNE: f64 = 1e-14;
pub const EXACT_MAX_GENERATORS: usize = 12;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Coefficient ring of an element.
pub trait Coeff:
    Clone + Debug + PartialEq + Send + Sync + Num + Neg<Output = Self> + 'static
{
    const EXACT: bool;
    fn magnitude(&self) -> f64;
    fn to_c64(&self) -> Complex64;
    fn from_i64(v: i64) -> Self;
    fn exp_body(&self) -> Result<Self>;
    fn ln_body(&self) -> Result<Self>;
}

impl Coeff for Complex64 {
    const EXACT: bool = false;
    fn magnitude(&self) -> f64 {
        self.norm()
    }
    fn to_c64(&self) -> Complex64 {
        *self
    }
    fn from_i64(v: i64) -> Self {
        Complex64::new(v as f64, 0.0)
    }
    fn exp_body(&self) -> Result<Self> {
        Ok(self.exp())
    }
    fn ln_body(&self) -> Result<Self> {
        if self.norm() == 0.0 {
            return Err(Error::Singularity(
                "log of an element with zero body".into(),
            ));
        }
        Ok(self.ln())
    }
}

pub type Rational = BigRational;
pub type ExactCoeff = Complex<BigRational>;

pub fn rational(num: i64, den: i64) -> ExactCoeff {
    Complex::new(
        BigRational::new(BigInt::from(num), BigInt::from(den)),
        BigRational::zero(),
    )
}

impl Coeff for ExactCoeff {
    const EXACT: bool = true;
    fn magnitude(&self) -> f64 {
        self.to_c64().norm()
    }
    fn to_c64(&self) -> Complex64 {
        Complex64::new(
            self.re.to_f64().unwrap_or(f64::NAN),
            self.im.to_f64().unwrap_or(f64::NAN),
        )
    }
    fn from_i64(v: i64) -> Self {
        Complex::new(
            BigRational::from_integer(BigInt::from(v)),
            BigRational::zero(),
        )
    }
    fn exp_body(&self) -> Result<Self> {
        if self.is_zero() {
            Ok(Self::one())
        } else {
            validation("exact exp requires a vanishing body")
        }
    }
    fn ln_body(&self) -> Result<Self> {
        if self.is_one() {
            Ok(Self::zero())
        } else if self.is_zero() {
            Err(Error::Singularity(
                "log of an element with zero body".into(),
            ))
        } else {
            validation("exact log requires unit body")
        }
    }
}

/// Handle for one ordered generator set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Algebra {
    id: u64,
    n: usize,
    prune_rel: f64,
}

impl Algebra {
    pub fn new(n: usize) -> Result<Self> {
        Self::with_prune(n, DEFAULT_PRUNE)
    }

    pub fn with_prune(n: usize, prune_rel: f64) -> Result<Self> {
        if n > MAX_GENERATORS {
            return Err(Error::Capacity(format!(
                "{n} generators exceed the bitmask width {MAX_GENERATORS}"
            )));
        }
        Ok(Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            n,
            prune_rel,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn prune_rel(&self) -> f64 {
        self.prune_rel
    }

    pub fn full_mask(&self) -> u64 {
        if self.n == 64 {
            u64::MAX
        } else {
            (1u64 << self.n) - 1
        }
    }

    pub fn generator<T: Coeff>(&self, j: usize) -> Grassmann<T> {
        Grassmann::generator(*self, j)
    }

    pub fn constant<T: Coeff>(&self, c: T) -> Grassmann<T> {
        Grassmann::constant(*self, c)
    }

    pub fn zero<T: Coeff>(&self) -> Grassmann<T> {
        Grassmann::zero(*self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
    Mixed,
}

/// Sign of the product of canonical monomials `a` and `b`.
#[inline]
pub fn merge_sign(a: u64, b: u64) -> bool {
    let mut swaps = 0u32;
    let mut rest = b;
    while rest != 0 {
        let j = rest.trailing_zeros();
        swaps += ((a >> j) >> 1).count_ones();
        rest &= rest - 1;
    }
    swaps & 1 == 1
}

#[inline]
fn below(mask: u64, j: usize) -> u32 {
    (mask & ((1u64 << j) - 1)).count_ones()
}

/// Element of the exterior algebra with coefficients in `T`.
#[derive(Clone, Debug)]
pub struct Grassmann<T: Coeff = Complex64> {
    alg: Algebra,
    terms: Vec<(u64, T)>,
}

pub type Element = Grassmann<Complex64>;
pub type ExactElement = Grassmann<ExactCoeff>;

impl<T: Coeff> Grassmann<T> {
    pub fn zero(alg: Algebra) -> Self {
        Self {
            alg,
            terms: Vec::new(),
        }
    }

    pub fn constant(alg: Algebra, c: T) -> Self {
        Self::from_terms(alg, vec![(0, c)])
    }

    pub fn one(alg: Algebra) -> Self {
        Self::constant(alg, T::one())
    }

    pub fn generator(alg: Algebra, j: usize) -> Self {
        assert!(
            j < alg.n,
            "generator {j} outside algebra of dimension {}",
            alg.n
        );
        Self {
            alg,
            terms: vec![(1u64 << j, T::one())],
        }
    }

    /// Monomial `v_{i1} ... v_{ik}` in the given order.
    pub fn monomial(alg: Algebra, gens: &[usize]) -> Self {
        let mut out = Self::one(alg);
        for &g in gens {
            out = &out * &Self::generator(alg, g);
        }
        out
    }

    /// Builds an element from arbitrary (mask, coefficient) pairs, merging duplicates.
    pub fn from_terms(alg: Algebra, mut terms: Vec<(u64, T)>) -> Self {
        let full = alg.full_mask();
        debug_assert!(terms.iter().all(|(m, _)| m & !full == 0));
        terms.sort_unstable_by_key(|t| t.0);
        let mut merged: Vec<(u64, T)> = Vec::with_capacity(terms.len());
        for (m, c) in terms {
            match merged.last_mut() {
                Some(last) if last.0 == m => last.1 = last.1.clone() + c,
                _ => merged.push((m, c)),
            }
        }
        let mut out = Self { alg, terms: merged };
        out.prune();
        out
    }

    fn from_map(alg: Algebra, map: HashMap<u64, T>) -> Self {
        Self::from_terms(alg, map.into_iter().collect())
    }

    fn prune(&mut self) {
        if T::EXACT {
            self.terms.retain(|(_, c)| !c.is_zero());
            return;
        }
        let max = self
            .terms
            .iter()
            .map(|(_, c)| c.magnitude())
            .fold(0.0, f64::max);
        let cut = max * self.alg.prune_rel;
        self.terms
            .retain(|(_, c)| !c.is_zero() && c.magnitude() > cut);
    }

    pub fn algebra(&self) -> Algebra {
        self.alg
    }

    pub fn terms(&self) -> &[(u64, T)] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, mask: u64) -> T {
        match self.terms.binary_search_by_key(&mask, |t| t.0) {
            Ok(i) => self.terms[i].1.clone(),
            Err(_) => T::zero(),
        }
    }

    /// Degree-zero coefficient.
    pub fn body(&self) -> T {
        self.coeff(0)
    }

    pub fn soul(&self) -> Self {
        Self {
            alg: self.alg,
            terms: self.terms.iter().filter(|t| t.0 != 0).cloned().collect(),
        }
    }

    pub fn max_degree(&self) -> usize {
        self.terms
            .iter()
            .map(|t| t.0.count_ones() as usize)
            .max()
            .unwrap_or(0)
    }

    pub fn min_soul_degree(&self) -> usize {
        self.terms
            .iter()
            .filter(|t| t.0 != 0)
            .map(|t| t.0.count_ones() as usize)
            .min()
            .unwrap_or(0)
    }

    /// Union of all generators appearing in any monomial.
    pub fn support(&self) -> u64 {
        self.terms.iter().fold(0, |acc, t| acc | t.0)
    }

    pub fn parity(&self) -> Parity {
        let mut even = false;
        let mut odd = false;
        for (m, _) in &self.terms {
            if m.count_ones() % 2 == 0 {
                even = true;
            } else {
                odd = true;
            }
        }
        match (even, odd) {
            (true, true) => Parity::Mixed,
            (false, true) => Parity::Odd,
            _ => Parity::Even,
        }
    }

    pub fn is_odd(&self) -> bool {
        self.terms.iter().all(|(m, _)| m.count_ones() % 2 == 1)
    }

    pub fn is_even(&self) -> bool {
        self.terms.iter().all(|(m, _)| m.count_ones() % 2 == 0)
    }

    pub fn homogeneous_part(&self, degree: usize) -> Self {
        Self {
            alg: self.alg,
            terms: self
                .terms
                .iter()
                .filter(|t| t.0.count_ones() as usize == degree)
                .cloned()
                .collect(),
        }
    }

    pub fn scale(&self, c: &T) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|(m, v)| (*m, v.clone() * c.clone()))
            .collect();
        let mut out = Self {
            alg: self.alg,
            terms,
        };
        out.prune();
        out
    }

    pub fn same_algebra(&self, other: &Self) -> Result<()> {
        if self.alg.id != other.alg.id {
            return usage(format!(
                "elements belong to different algebras ({} vs {})",
                self.alg.id, other.alg.id
            ));
        }
        Ok(())
    }

    pub fn try_mul(&self, other: &Self) -> Result<Self> {
        self.same_algebra(other)?;
        Ok(self.mul_unchecked(other))
    }

    fn mul_unchecked(&self, other: &Self) -> Self {
        if self.is_zero() || other.is_zero() {
            return Self::zero(self.alg);
        }
        let mut out = Vec::with_capacity(self.terms.len() * other.terms.len());
        for (a, ca) in &self.terms {
            for (b, cb) in &other.terms {
                if a & b != 0 {
                    continue;
                }
                let c = ca.clone() * cb.clone();
                out.push((a | b, if merge_sign(*a, *b) { -c } else { c }));
            }
        }
        Self::from_terms(self.alg, out)
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.same_algebra(other)?;
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(Self::from_terms(self.alg, terms))
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.same_algebra(other)?;
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().map(|(m, c)| (*m, -c.clone())));
        Ok(Self::from_terms(self.alg, terms))
    }

    /// Left derivative with respect to generator `j`.
    pub fn derivative(&self, j: usize) -> Self {
        let bit = 1u64 << j;
        let terms = self
            .terms
            .iter()
            .filter(|(m, _)| m & bit != 0)
            .map(|(m, c)| {
                let c = if below(*m, j) % 2 == 1 {
                    -c.clone()
                } else {
                    c.clone()
                };
                (m & !bit, c)
            })
            .collect();
        Self::from_terms(self.alg, terms)
    }

    /// `D²_M F = Σ_{ij} M_ij ∂_j ∂_i F` for an antisymmetric pairing matrix `M`.
    pub fn laplacian<P: PairingMatrix<T>>(&self, m: &P) -> Result<Self> {
        check_pairing(m, self.alg.n)?;
        Ok(self.laplacian_unchecked(m))
    }

    fn laplacian_unchecked<P: PairingMatrix<T>>(&self, m: &P) -> Self {
        let two = T::from_i64(2);
        let mut acc: HashMap<u64, T> = HashMap::new();
        for (mask, c) in &self.terms {
            let gens = bits(*mask);
            for (a, &i) in gens.iter().enumerate() {
                for &j in &gens[a + 1..] {
                    let mij = m.at(i, j);
                    if mij.is_zero() {
                        continue;
                    }
                    // ∂_i first, then ∂_j on the remainder (j > i, so one fewer generator precedes j)
                    let flips = below(*mask, i) + below(*mask, j) - 1;
                    let mut v = two.clone() * mij * c.clone();
                    if flips % 2 == 1 {
                        v = -v;
                    }
                    let key = mask & !(1u64 << i) & !(1u64 << j);
                    let e = acc.entry(key).or_insert_with(T::zero);
                    *e = e.clone() + v;
                }
            }
        }
        Self::from_map(self.alg, acc)
    }

    /// `exp(½ D²_M) F`, a finite sum by nilpotency.
    pub fn heat<P: PairingMatrix<T>>(&self, m: &P) -> Result<Self> {
        check_pairing(m, self.alg.n)?;
        let two = T::from_i64(2);
        let mut acc = self.clone();
        let mut term = self.clone();
        let mut k = 1i64;
        loop {
            term = term.laplacian_unchecked(m);
            if term.is_zero() {
                break;
            }
            let denom = two.clone() * T::from_i64(k);
            term = Self::from_terms(
                self.alg,
                term.terms
                    .into_iter()
                    .map(|(mm, c)| (mm, c / denom.clone()))
                    .collect(),
            );
            acc = &acc + &term;
            k += 1;
        }
        Ok(acc)
    }

    /// `⟨F, DU⟩ = Σ_j F_j ∂_j U` with each `F_j` odd.
    pub fn pairing(force: &[Self], u: &Self) -> Result<Self> {
        if force.len() != u.alg.n {
            return usage(format!(
                "force has {} components, algebra has {} generators",
                force.len(),
                u.alg.n
            ));
        }
        let mut acc = Self::zero(u.alg);
        for (j, fj) in force.iter().enumerate() {
            fj.same_algebra(u)?;
            if !fj.is_odd() {
                return validation(format!("force component {j} is not odd"));
            }
            if fj.is_zero() || u.support() & (1u64 << j) == 0 {
                continue;
            }
            acc = &acc + &(fj * &u.derivative(j));
        }
        Ok(acc)
    }

    /// Berezin integral with the top monomial ordered as `Π ψ⁺ψ⁻` over `modes`.
    pub fn berezin(&self, modes: &[(usize, usize)]) -> Result<T> {
        let mut seen = 0u64;
        for &(p, q) in modes {
            for g in [p, q] {
                if g >= self.alg.n || seen & (1u64 << g) != 0 {
                    return usage(format!(
                        "generator {g} repeated or out of range in mode order"
                    ));
                }
                seen |= 1u64 << g;
            }
        }
        if seen != self.alg.full_mask() {
            return usage("mode order does not cover every generator");
        }
        let order: Vec<usize> = modes.iter().flat_map(|&(p, q)| [p, q]).collect();
        let top = Self::monomial(self.alg, &order);
        let sign = top.coeff(seen);
        Ok(self.coeff(seen) * sign)
    }

    /// `f(F)` by the nilpotent power series about the body.
    pub fn analytic_lift(&self, f: Analytic) -> Result<Self> {
        let body = self.body();
        let nil = self.soul();
        match f {
            Analytic::Exp => {
                let eb = body.exp_body()?;
                let mut acc = Self::one(self.alg);
                let mut pow = Self::one(self.alg);
                let mut k = 1i64;
                loop {
                    pow = &pow * &nil;
                    if pow.is_zero() {
                        break;
                    }
                    pow = pow.div_int(k);
                    acc = &acc + &pow;
                    k += 1;
                }
                Ok(acc.scale(&eb))
            }
            Analytic::Log => {
                let lb = body.ln_body()?;
                let x = nil.div_coeff(&body);
                let mut acc = Self::constant(self.alg, lb);
                let mut pow = Self::one(self.alg);
                let mut k = 1i64;
                loop {
                    pow = &pow * &x;
                    if pow.is_zero() {
                        break;
                    }
                    let t = pow.div_int(k);
                    acc = if k % 2 == 1 { &acc + &t } else { &acc - &t };
                    k += 1;
                }
                Ok(acc)
            }
        }
    }

    pub fn exp(&self) -> Result<Self> {
        self.analytic_lift(Analytic::Exp)
    }

    pub fn ln(&self) -> Result<Self> {
        self.analytic_lift(Analytic::Log)
    }

    pub fn div_int(&self, k: i64) -> Self {
        self.div_coeff(&T::from_i64(k))
    }

    pub fn div_coeff(&self, d: &T) -> Self {
        Self::from_terms(
            self.alg,
            self.terms
                .iter()
                .map(|(m, c)| (*m, c.clone() / d.clone()))
                .collect(),
        )
    }

    /// Substitutes `images[j]` for generator `j`; images must pairwise anticommute.
    pub fn compose(&self, images: &[Self]) -> Result<Self> {
        if images.len() != self.alg.n {
            return usage(format!(
                "{} images for {} generators",
                images.len(),
                self.alg.n
            ));
        }
        let target = match images.first() {
            Some(g) => g.alg,
            None => return Ok(Self::from_terms(self.alg, self.terms.clone())),
        };
        for g in images {
            if g.alg.id != target.id {
                return usage("images live in different algebras");
            }
        }
        let mut cache: HashMap<u64, Self> = HashMap::new();
        cache.insert(0, Self::one(target));
        let mut acc = Self::zero(target);
        for (mask, c) in &self.terms {
            let prod = product_cached(*mask, images, &mut cache);
            acc = &acc + &prod.scale(c);
        }
        Ok(acc)
    }

    /// Relabels generator `j` as generator `map[j]` of `target`.
    pub fn embed(&self, target: Algebra, map: &[usize]) -> Result<Self> {
        let images: Vec<Self> = map.iter().map(|&j| Self::generator(target, j)).collect();
        self.compose(&images)
    }

    pub fn max_abs(&self) -> f64 {
        self.terms
            .iter()
            .map(|(_, c)| c.magnitude())
            .fold(0.0, f64::max)
    }

    pub fn map_coeffs(&self, f: impl Fn(&T) -> T) -> Self {
        Self::from_terms(
            self.alg,
            self.terms.iter().map(|(m, c)| (*m, f(c))).collect(),
        )
    }

    /// Keeps only monomials whose generators lie inside `mask`.
    pub fn restrict_to(&self, mask: u64) -> Self {
        Self {
            alg: self.alg,
            terms: self
                .terms
                .iter()
                .filter(|t| t.0 & !mask == 0)
                .cloned()
                .collect(),
        }
    }
}

impl Element {
    pub fn to_json_terms(&self) -> Vec<JsonTerm> {
        self.terms
            .iter()
            .map(|(m, c)| JsonTerm {
                mask: *m,
                re: c.re,
                im: c.im,
            })
            .collect()
    }

    pub fn from_json_terms(alg: Algebra, terms: &[JsonTerm]) -> Result<Self> {
        for t in terms {
            if t.mask & !alg.full_mask() != 0 {
                return validation(format!(
                    "mask {} outside algebra of dimension {}",
                    t.mask, alg.n
                ));
            }
        }
        Ok(Self::from_terms(
            alg,
            terms
                .iter()
                .map(|t| (t.mask, Complex64::new(t.re, t.im)))
                .collect(),
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_json_terms())?)
    }

    pub fn from_json(alg: Algebra, s: &str) -> Result<Self> {
        let terms: Vec<JsonTerm> = serde_json::from_str(s)?;
        Self::from_json_terms(alg, &terms)
    }

    pub fn dist(&self, other: &Self) -> f64 {
        (self - other).max_abs()
    }

    pub fn from_exact(e: &ExactElement, alg: Algebra) -> Self {
        Self::from_terms(alg, e.terms.iter().map(|(m, c)| (*m, c.to_c64())).collect())
    }
}

fn product_cached<T: Coeff>(
    mask: u64,
    images: &[Grassmann<T>],
    cache: &mut HashMap<u64, Grassmann<T>>,
) -> Grassmann<T> {
    if let Some(p) = cache.get(&mask) {
        return p.clone();
    }
    let hi = 63 - mask.leading_zeros() as usize;
    let rest = mask & !(1u64 << hi);
    let prefix = product_cached(rest, images, cache);
    let p = &prefix * &images[hi];
    cache.insert(mask, p.clone());
    p
}

pub fn bits(mask: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(mask.count_ones() as usize);
    let mut rest = mask;
    while rest != 0 {
        out.push(rest.trailing_zeros() as usize);
        rest &= rest - 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analytic {
    Exp,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonTerm {
    pub mask: u64,
    pub re: f64,
    pub im: f64,
}

/// Square coefficient matrix `M_ij` used by Laplacians and Pfaffians.
pub trait PairingMatrix<T: Coeff> {
    fn size(&self) -> usize;
    fn at(&self, i: usize, j: usize) -> T;
}

impl PairingMatrix<Complex64> for DMatrix<Complex64> {
    fn size(&self) -> usize {
        self.nrows()
    }
    fn at(&self, i: usize, j: usize) -> Complex64 {
        self[(i, j)]
    }
}

impl<T: Coeff> PairingMatrix<T> for Vec<Vec<T>> {
    fn size(&self) -> usize {
        self.len()
    }
    fn at(&self, i: usize, j: usize) -> T {
        self[i][j].clone()
    }
}

pub const ANTISYMMETRY_TOL: f64 = 1e-12;

fn check_pairing<T: Coeff, P: PairingMatrix<T>>(m: &P, n: usize) -> Result<()> {
    if m.size() != n {
        return usage(format!(
            "pairing matrix of size {} for {} generators",
            m.size(),
            n
        ));
    }
    antisymmetry_defect(m).map(|_| ())
}

/// Returns `max |M_ij + M_ji|` or a validation error if it exceeds tolerance.
pub fn antisymmetry_defect<T: Coeff, P: PairingMatrix<T>>(m: &P) -> Result<f64> {
    let n = m.size();
    let mut scale = 0.0f64;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let a = m.at(i, j);
            scale = scale.max(a.magnitude());
            if j >= i {
                worst = worst.max((a + m.at(j, i)).magnitude());
            }
        }
    }
    let allowed = if T::EXACT {
        0.0
    } else {
        ANTISYMMETRY_TOL * scale.max(1.0)
    };
    if worst > allowed {
        return validation(format!(
            "matrix not antisymmetric: max |M + Mᵀ| = {worst:e}"
        ));
    }
    Ok(worst)
}

impl<'a, T: Coeff> Mul<&'a Grassmann<T>> for &'a Grassmann<T> {
    type Output = Grassmann<T>;
    fn mul(self, rhs: &'a Grassmann<T>) -> Grassmann<T> {
        self.try_mul(rhs)
            .expect("product of elements from different algebras")
    }
}

impl<'a, T: Coeff> Add<&'a Grassmann<T>> for &'a Grassmann<T> {
    type Output = Grassmann<T>;
    fn add(self, rhs: &'a Grassmann<T>) -> Grassmann<T> {
        self.try_add(rhs)
            .expect("sum of elements from different algebras")
    }
}

impl<'a, T: Coeff> Sub<&'a Grassmann<T>> for &'a Grassmann<T> {
    type Output = Grassmann<T>;
    fn sub(self, rhs: &'a Grassmann<T>) -> Grassmann<T> {
        self.try_sub(rhs)
            .expect("difference of elements from different algebras")
    }
}

impl<T: Coeff> Neg for &Grassmann<T> {
    type Output = Grassmann<T>;
    fn neg(self) -> Grassmann<T> {
        Grassmann {
            alg: self.alg,
            terms: self.terms.iter().map(|(m, c)| (*m, -c.clone())).collect(),
        }
    }
}

impl<T: Coeff> PartialEq for Grassmann<T> {
    fn eq(&self, other: &Self) -> bool {
        self.alg.id == other.alg.id && self.terms == other.terms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn nilpotent_and_anticommuting() {
        let a = Algebra::new(3).unwrap();
        let v1: Element = a.generator(0);
        let v2: Element = a.generator(1);
        assert!((&v1 * &v1).is_zero());
        assert!((&(&v1 * &v2) + &(&v2 * &v1)).is_zero());
    }

    #[test]
    fn square_of_one_plus_pair() {
        let a = Algebra::new(2).unwrap();
        let x = &Element::one(a) + &Element::monomial(a, &[0, 1]);
        let sq = &x * &x;
        assert_eq!(sq.coeff(0), c(1.0));
        assert_eq!(sq.coeff(0b11), c(2.0));
        assert_eq!(sq.len(), 2);
    }

    #[test]
    fn mismatched_algebras_rejected() {
        let a = Algebra::new(2).unwrap();
        let b = Algebra::new(2).unwrap();
        let x: Element = a.generator(0);
        let y: Element = b.generator(0);
        assert!(matches!(x.try_mul(&y), Err(Error::Usage(_))));
    }

    #[test]
    fn derivative_examples() {
        let a = Algebra::new(2).unwrap();
        let one = Element::one(a);
        assert!(one.derivative(0).is_zero());
        let v1: Element = a.generator(0);
        assert_eq!(v1.derivative(0), one);
        let v2v1 = Element::monomial(a, &[1, 0]);
        let expect = -&a.generator::<Complex64>(1);
        assert_eq!(v2v1.derivative(0), expect);
    }

    #[test]
    fn derivative_defining_relation() {
        // ∂_j(v_i F) + v_i ∂_j F = δ_ij F on a handful of elements
        let a = Algebra::new(4).unwrap();
        let f = &Element::monomial(a, &[1, 3]) + &Element::monomial(a, &[0, 2, 3]).scale(&c(-0.5));
        for j in 0..4 {
            for i in 0..4 {
                let vi: Element = a.generator(i);
                let lhs = &(&vi * &f).derivative(j) + &(&vi * &f.derivative(j));
                let rhs = if i == j { f.clone() } else { Element::zero(a) };
                assert!(lhs.dist(&rhs) < 1e-15, "i={i} j={j}");
            }
        }
    }

    fn antisym(n: usize, vals: &[f64]) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                m[(i, j)] = c(vals[k]);
                m[(j, i)] = c(-vals[k]);
                k += 1;
            }
        }
        m
    }

    #[test]
    fn laplacian_examples() {
        let a = Algebra::new(4).unwrap();
        let m = antisym(4, &[0.3, -1.1, 0.7, 2.0, 0.25, -0.4]);
        assert!(Element::constant(a, c(5.0))
            .laplacian(&m)
            .unwrap()
            .is_zero());
        let v12 = Element::monomial(a, &[0, 1]);
        let d = v12.laplacian(&m).unwrap();
        assert_eq!(d.coeff(0), c(2.0 * 0.3));
        let top = Element::monomial(a, &[0, 1, 2, 3]);
        let d = top.laplacian(&m).unwrap();
        assert_eq!(d.max_degree(), 2);
        assert!(d.terms().iter().all(|t| t.0.count_ones() == 2));
    }

    #[test]
    fn laplacian_rejects_symmetric() {
        let a = Algebra::new(2).unwrap();
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = c(1.0);
        m[(1, 0)] = c(1.0);
        let e: Element = a.generator(0);
        assert!(matches!(e.laplacian(&m), Err(Error::Validation(_))));
    }

    #[test]
    fn laplacian_matches_double_derivative_sum() {
        let a = Algebra::new(4).unwrap();
        let m = antisym(4, &[0.3, -1.1, 0.7, 2.0, 0.25, -0.4]);
        let f =
            &Element::monomial(a, &[0, 1, 2, 3]) + &Element::monomial(a, &[1, 3]).scale(&c(0.7));
        let mut brute = Element::zero(a);
        for i in 0..4 {
            for j in 0..4 {
                brute = &brute + &f.derivative(i).derivative(j).scale(&m[(i, j)]);
            }
        }
        assert!(f.laplacian(&m).unwrap().dist(&brute) < 1e-14);
    }

    #[test]
    fn pairing_examples() {
        let a = Algebra::new(2).unwrap();
        let u = Element::monomial(a, &[0, 1]);
        let zero = vec![Element::zero(a); 2];
        assert!(Element::pairing(&zero, &u).unwrap().is_zero());
        let ident: Vec<Element> = (0..2).map(|j| a.generator(j)).collect();
        let p = Element::pairing(&ident, &u).unwrap();
        assert_eq!(p.coeff(0b11), c(2.0));
        assert!(Element::pairing(&ident, &Element::constant(a, c(3.0)))
            .unwrap()
            .is_zero());
        let even = vec![Element::one(a), Element::zero(a)];
        assert!(matches!(
            Element::pairing(&even, &u),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn analytic_examples() {
        let a = Algebra::new(2).unwrap();
        assert_eq!(Element::zero(a).exp().unwrap(), Element::one(a));
        let p = Element::monomial(a, &[0, 1]).scale(&c(0.8));
        let e = p.exp().unwrap();
        assert_eq!(e, &Element::one(a) + &p);
        let l = (&Element::one(a) + &p).ln().unwrap();
        assert!(l.dist(&p) < 1e-16);
        assert!(matches!(p.ln(), Err(Error::Singularity(_))));
    }

    #[test]
    fn berezin_examples() {
        let a = Algebra::new(4).unwrap();
        let modes = [(0, 1), (2, 3)];
        let top = Element::monomial(a, &[0, 1, 2, 3]);
        assert_eq!(top.berezin(&modes).unwrap(), c(1.0));
        let swapped = [(1, 0), (2, 3)];
        assert_eq!(top.berezin(&swapped).unwrap(), c(-1.0));
        assert_eq!(Element::one(a).berezin(&modes).unwrap(), c(0.0));
        assert!(matches!(top.berezin(&[(0, 1)]), Err(Error::Usage(_))));
        let b = Algebra::new(2).unwrap();
        let e = Element::monomial(b, &[0, 1]).scale(&c(1.75)).exp().unwrap();
        assert_eq!(e.berezin(&[(0, 1)]).unwrap(), c(1.75));
    }

    #[test]
    fn exact_mode_arithmetic() {
        let a = Algebra::new(3).unwrap();
        let x = &ExactElement::one(a) + &ExactElement::monomial(a, &[0, 2]).scale(&rational(2, 3));
        let y = x.ln().unwrap();
        assert_eq!(y.coeff(0b101), rational(2, 3));
        assert_eq!(y.exp().unwrap(), x);
        let z = ExactElement::constant(a, rational(1, 2));
        assert!(z.exp().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let a = Algebra::new(5).unwrap();
        let e = &Element::monomial(a, &[4, 1]).scale(&Complex64::new(0.1, -2.0)) + &Element::one(a);
        let s = e.to_json().unwrap();
        assert_eq!(Element::from_json(a, &s).unwrap(), e);
        assert!(Element::from_json(Algebra::new(2).unwrap(), &s).is_err());
    }

    #[test]
    fn compose_is_homomorphism() {
        let a = Algebra::new(3).unwrap();
        let b = Algebra::new(4).unwrap();
        let imgs: Vec<Element> = vec![
            &b.generator::<Complex64>(0) + &Element::monomial(b, &[1, 2, 3]),
            b.generator(2),
            &b.generator::<Complex64>(3).scale(&c(2.0)) + &b.generator(1),
        ];
        let f = &Element::monomial(a, &[0, 1]) + &a.generator(2);
        let g = &Element::monomial(a, &[2]) + &Element::monomial(a, &[0, 1, 2]).scale(&c(-0.3));
        let lhs = (&f * &g).compose(&imgs).unwrap();
        let rhs = &f.compose(&imgs).unwrap() * &g.compose(&imgs).unwrap();
        assert!(lhs.dist(&rhs) < 1e-14);
    }

    fn arb_element(n: usize, max_terms: usize) -> impl Strategy<Value = Vec<(u64, f64, f64)>> {
        prop::collection::vec(
            (0u64..(1u64 << n), -2.0f64..2.0, -2.0f64..2.0),
            0..max_terms,
        )
    }

    fn build(a: Algebra, raw: &[(u64, f64, f64)]) -> Element {
        Element::from_terms(
            a,
            raw.iter()
                .map(|&(m, re, im)| (m, Complex64::new(re, im)))
                .collect(),
        )
    }

    fn homogeneous(e: &Element) -> Element {
        let d = e
            .terms()
            .first()
            .map(|t| t.0.count_ones() as usize)
            .unwrap_or(0);
        e.homogeneous_part(d)
    }

    proptest! {
        #[test]
        fn associativity(x in arb_element(6, 8), y in arb_element(6, 8), z in arb_element(6, 8)) {
            let a = Algebra::new(6).unwrap();
            let (x, y, z) = (build(a, &x), build(a, &y), build(a, &z));
            let l = &(&x * &y) * &z;
            let r = &x * &(&y * &z);
            prop_assert!(l.dist(&r) < 1e-12);
        }

        #[test]
        fn anticommutation(i in 0usize..8, j in 0usize..8) {
            let a = Algebra::new(8).unwrap();
            let (vi, vj): (Element, Element) = (a.generator(i), a.generator(j));
            let s = &(&vi * &vj) + &(&vj * &vi);
            prop_assert!(s.is_zero());
        }

        #[test]
        fn derivatives_anticommute(x in arb_element(6, 12), i in 0usize..6, j in 0usize..6) {
            let a = Algebra::new(6).unwrap();
            let x = build(a, &x);
            let s = &x.derivative(j).derivative(i) + &x.derivative(i).derivative(j);
            prop_assert!(s.max_abs() < 1e-12);
        }

        #[test]
        fn graded_leibniz(x in arb_element(6, 6), y in arb_element(6, 6), j in 0usize..6) {
            let a = Algebra::new(6).unwrap();
            let f = homogeneous(&build(a, &x));
            let g = build(a, &y);
            let deg = f.terms().first().map(|t| t.0.count_ones()).unwrap_or(0);
            let lhs = (&f * &g).derivative(j);
            let second = &f * &g.derivative(j);
            let second = if deg % 2 == 1 { -&second } else { second };
            let rhs = &(&f.derivative(j) * &g) + &second;
            prop_assert!(lhs.dist(&rhs) < 1e-12);
        }

        #[test]
        fn exp_log_roundtrip(x in arb_element(6, 10)) {
            let a = Algebra::new(6).unwrap();
            let f = build(a, &x).soul();
            let one_plus = &Element::one(a) + &f;
            let back = one_plus.ln().unwrap().exp().unwrap();
            prop_assert!(back.dist(&one_plus) < 1e-10 * (1.0 + one_plus.max_abs()).powi(6));
        }

        #[test]
        fn parity_algebra(x in arb_element(6, 6), y in arb_element(6, 6)) {
            let a = Algebra::new(6).unwrap();
            let f = homogeneous(&build(a, &x));
            let g = homogeneous(&build(a, &y));
            let fg = &f * &g;
            if fg.is_zero() {
                return Ok(());
            }
            let pf = f.terms()[0].0.count_ones() % 2;
            let pg = g.terms()[0].0.count_ones() % 2;
            let expect = if (pf + pg) % 2 == 0 { Parity::Even } else { Parity::Odd };
            prop_assert_eq!(fg.parity(), expect);
        }
    }
}
