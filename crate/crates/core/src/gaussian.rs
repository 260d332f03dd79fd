//! Gaussian Grassmann states: Pfaffians, moments, cumulants, Wick products
//! and Gibbs-perturbed expectations.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::algebra::{
    antisymmetry_defect, bits, Algebra, Coeff, Element, Grassmann, PairingMatrix,
};
use crate::error::{usage, validation, Error, Result};

/// Antilinear involution acting on basis vectors as a permutation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Theta {
    perm: Vec<usize>,
}

impl Theta {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        for (i, &p) in perm.iter().enumerate() {
            if p >= perm.len() || perm[p] != i {
                return validation(format!("theta is not an involution at index {i}"));
            }
        }
        Ok(Self { perm })
    }

    pub fn image(&self, i: usize) -> usize {
        self.perm[i]
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Gram matrix `⟨Θe_i, A e_j⟩ = A[θ(i), j]`.
    pub fn gram(&self, a: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(self.perm[i], j)])
    }

    /// Applies Θ to a coefficient vector.
    pub fn apply(&self, f: &[Complex64]) -> Vec<Complex64> {
        (0..f.len()).map(|i| f[self.perm[i]].conj()).collect()
    }
}

/// Antisymmetric Gram matrix `M_ij = ⟨Θe_i, G e_j⟩ = ω(ψ_i ψ_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariance {
    gram: DMatrix<Complex64>,
}

#[derive(Serialize, Deserialize)]
struct DenseJson {
    n: usize,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

impl Covariance {
    pub fn new(gram: DMatrix<Complex64>) -> Result<Self> {
        if gram.nrows() != gram.ncols() {
            return usage("covariance must be square");
        }
        antisymmetry_defect(&gram)?;
        Ok(Self { gram })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            gram: DMatrix::zeros(n, n),
        }
    }

    pub fn from_operator(theta: &Theta, g: &DMatrix<Complex64>) -> Result<Self> {
        Self::new(theta.gram(g))
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn gram(&self) -> &DMatrix<Complex64> {
        &self.gram
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.gram[(i, j)]
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Self::new(&self.gram - &other.gram)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::new(&self.gram + &other.gram)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            gram: self.gram.scale(s),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let n = self.dim();
        let rows = |f: fn(&Complex64) -> f64| {
            (0..n)
                .map(|i| (0..n).map(|j| f(&self.gram[(i, j)])).collect())
                .collect()
        };
        Ok(serde_json::to_string(&DenseJson {
            n,
            re: rows(|z| z.re),
            im: rows(|z| z.im),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: DenseJson = serde_json::from_str(s)?;
        if d.re.len() != d.n
            || d.im.len() != d.n
            || d.re.iter().chain(d.im.iter()).any(|r| r.len() != d.n)
        {
            return validation("dense matrix rows do not match the declared size");
        }
        Self::new(DMatrix::from_fn(d.n, d.n, |i, j| {
            Complex64::new(d.re[i][j], d.im[i][j])
        }))
    }
}

impl PairingMatrix<Complex64> for Covariance {
    fn size(&self) -> usize {
        self.dim()
    }
    fn at(&self, i: usize, j: usize) -> Complex64 {
        self.gram[(i, j)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfaffianValue<T> {
    pub value: T,
    /// Set when the matrix had odd dimension and the value is 0 by convention.
    pub odd_dimension: bool,
}

fn to_rows<T: Coeff, P: PairingMatrix<T>>(m: &P) -> Vec<Vec<T>> {
    let n = m.size();
    (0..n)
        .map(|i| (0..n).map(|j| m.at(i, j)).collect())
        .collect()
}

/// Pfaffian by skew-symmetric tridiagonalisation with partial pivoting.
pub fn pfaffian<T: Coeff, P: PairingMatrix<T>>(m: &P) -> Result<PfaffianValue<T>> {
    antisymmetry_defect(m)?;
    let n = m.size();
    if n % 2 == 1 {
        return Ok(PfaffianValue {
            value: T::zero(),
            odd_dimension: true,
        });
    }
    Ok(PfaffianValue {
        value: parlett_reid(to_rows(m)),
        odd_dimension: false,
    })
}

pub fn pf<T: Coeff, P: PairingMatrix<T>>(m: &P) -> Result<T> {
    Ok(pfaffian(m)?.value)
}

fn parlett_reid<T: Coeff>(mut a: Vec<Vec<T>>) -> T {
    let n = a.len();
    let mut value = T::one();
    let mut k = 0;
    while k + 1 < n {
        let mut kp = k + 1;
        let mut best = a[k + 1][k].magnitude();
        for (i, row) in a.iter().enumerate().skip(k + 2) {
            let v = row[k].magnitude();
            if v > best {
                best = v;
                kp = i;
            }
        }
        if kp != k + 1 {
            a.swap(k + 1, kp);
            for row in a.iter_mut() {
                row.swap(k + 1, kp);
            }
            value = -value;
        }
        if a[k + 1][k].is_zero() {
            return T::zero();
        }
        let piv = a[k][k + 1].clone();
        value = value * piv.clone();
        if k + 2 < n {
            let tau: Vec<T> = (k + 2..n).map(|j| a[k][j].clone() / piv.clone()).collect();
            let col: Vec<T> = (k + 2..n).map(|i| a[i][k + 1].clone()).collect();
            for (ii, i) in (k + 2..n).enumerate() {
                for (jj, j) in (k + 2..n).enumerate() {
                    let upd = tau[ii].clone() * col[jj].clone() - col[ii].clone() * tau[jj].clone();
                    a[i][j] = a[i][j].clone() + upd;
                }
            }
        }
        k += 2;
    }
    value
}

/// Pfaffian by first-row expansion; exponential cost, kept as an oracle.
pub fn pfaffian_expansion<T: Coeff, P: PairingMatrix<T>>(m: &P) -> T {
    let idx: Vec<usize> = (0..m.size()).collect();
    expand(&to_rows(m), &idx)
}

fn expand<T: Coeff>(a: &[Vec<T>], idx: &[usize]) -> T {
    if idx.is_empty() {
        return T::one();
    }
    if idx.len() % 2 == 1 {
        return T::zero();
    }
    let first = idx[0];
    let mut acc = T::zero();
    for j in 1..idx.len() {
        let entry = a[first][idx[j]].clone();
        if entry.is_zero() {
            continue;
        }
        let rest: Vec<usize> = idx[1..]
            .iter()
            .enumerate()
            .filter(|&(p, _)| p + 1 != j)
            .map(|(_, &v)| v)
            .collect();
        let term = entry * expand(a, &rest);
        acc = if j % 2 == 1 { acc + term } else { acc - term };
    }
    acc
}

fn submatrix<T: Coeff, P: PairingMatrix<T>>(m: &P, idx: &[usize]) -> Vec<Vec<T>> {
    idx.iter()
        .map(|&i| idx.iter().map(|&j| m.at(i, j)).collect())
        .collect()
}

/// `ω(ψ_{i1} ... ψ_{ik})`; repeated indices give 0.
pub fn gaussian_moment<T: Coeff, P: PairingMatrix<T>>(m: &P, indices: &[usize]) -> T {
    if indices.len() % 2 == 1 {
        return T::zero();
    }
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return T::zero();
        }
    }
    parlett_reid(submatrix(m, indices))
}

/// `ω(F)` summed monomial by monomial through Pfaffians of Gram minors.
pub fn gaussian_expectation<T: Coeff, P: PairingMatrix<T>>(m: &P, f: &Grassmann<T>) -> Result<T> {
    if m.size() != f.algebra().dim() {
        return usage(format!(
            "covariance of size {} for an algebra of {} generators",
            m.size(),
            f.algebra().dim()
        ));
    }
    let mut acc = T::zero();
    for (mask, c) in f.terms() {
        if mask.count_ones() % 2 == 1 {
            continue;
        }
        let idx = bits(*mask);
        acc = acc + c.clone() * parlett_reid(submatrix(m, &idx));
    }
    Ok(acc)
}

/// `ω(F)` as the body of `exp(½D²_M) F`.
pub fn gaussian_expectation_heat<T: Coeff, P: PairingMatrix<T>>(
    m: &P,
    f: &Grassmann<T>,
) -> Result<T> {
    Ok(f.heat(m)?.body())
}

/// Enumerates set partitions of `0..n` as block lists, blocks ordered by minimum.
pub fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    fn rec(i: usize, n: usize, cur: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for b in 0..cur.len() {
            cur[b].push(i);
            rec(i + 1, n, cur, out);
            cur[b].pop();
        }
        cur.push(vec![i]);
        rec(i + 1, n, cur, out);
        cur.pop();
    }
    let mut out = Vec::new();
    rec(0, n, &mut Vec::new(), &mut out);
    out
}

/// Parity of the permutation listing the blocks one after another.
pub fn partition_sign(blocks: &[Vec<usize>]) -> bool {
    let seq: Vec<usize> = blocks.iter().flatten().copied().collect();
    let mut inv = 0usize;
    for i in 0..seq.len() {
        for j in i + 1..seq.len() {
            if seq[i] > seq[j] {
                inv += 1;
            }
        }
    }
    inv % 2 == 1
}

/// Cumulant `𝒦_n(f_1..f_n)` solved recursively from a moment oracle.
pub fn cumulant_with<T: Coeff>(n: usize, moment: &dyn Fn(&[usize]) -> T) -> Result<T> {
    if n == 0 {
        return usage("cumulants start at order 1");
    }
    if n > 16 {
        return Err(Error::Capacity(format!("cumulant of order {n}")));
    }
    let mut memo: std::collections::HashMap<u32, T> = std::collections::HashMap::new();
    Ok(cumulant_subset((1u32 << n) - 1, moment, &mut memo))
}

fn cumulant_subset<T: Coeff>(
    set: u32,
    moment: &dyn Fn(&[usize]) -> T,
    memo: &mut std::collections::HashMap<u32, T>,
) -> T {
    if let Some(v) = memo.get(&set) {
        return v.clone();
    }
    let pos: Vec<usize> = (0..32).filter(|b| set & (1 << b) != 0).collect();
    let mut value = moment(&pos);
    for blocks in set_partitions(pos.len()) {
        if blocks.len() == 1 {
            continue;
        }
        let mut term = T::one();
        for b in &blocks {
            let sub = b.iter().fold(0u32, |acc, &p| acc | (1 << pos[p]));
            term = term * cumulant_subset(sub, moment, memo);
            if term.is_zero() {
                break;
            }
        }
        value = if partition_sign(&blocks) {
            value + term
        } else {
            value - term
        };
    }
    memo.insert(set, value.clone());
    value
}

/// Cumulant of a centred Gaussian state.
pub fn cumulant<T: Coeff, P: PairingMatrix<T>>(m: &P, indices: &[usize]) -> Result<T> {
    let moment = |pos: &[usize]| {
        let idx: Vec<usize> = pos.iter().map(|&p| indices[p]).collect();
        gaussian_moment(m, &idx)
    };
    cumulant_with(indices.len(), &moment)
}

/// Wick-ordered product `⟦ψ_{i1} ... ψ_{ik}⟧` with contractions from `m`.
pub fn wick_product<T: Coeff, P: PairingMatrix<T>>(
    m: &P,
    alg: Algebra,
    indices: &[usize],
) -> Grassmann<T> {
    if indices.is_empty() {
        return Grassmann::one(alg);
    }
    let head = Grassmann::generator(alg, indices[0]);
    let rest = &indices[1..];
    let mut acc = &head * &wick_product(m, alg, rest);
    for (p, &j) in rest.iter().enumerate() {
        let w = m.at(indices[0], j);
        if w.is_zero() {
            continue;
        }
        let others: Vec<usize> = rest
            .iter()
            .enumerate()
            .filter(|&(q, _)| q != p)
            .map(|(_, &v)| v)
            .collect();
        let term = wick_product(m, alg, &others).scale(&w);
        // moving ψ_j to the front of the remaining fields takes p transpositions
        acc = if p % 2 == 0 {
            &acc - &term
        } else {
            &acc + &term
        };
    }
    acc
}

pub const NORMALISATION_FLOOR: f64 = 1e-12;

/// Gaussian state perturbed by `e^V`, with the normalisation computed once.
pub struct GibbsState<T: Coeff, P: PairingMatrix<T>> {
    m: P,
    weight: Grassmann<T>,
    norm: OnceLock<T>,
}

impl<T: Coeff, P: PairingMatrix<T>> GibbsState<T, P> {
    pub fn new(m: P, v: &Grassmann<T>) -> Result<Self> {
        if !v.is_even() {
            return validation("Gibbs potential must be even");
        }
        if m.size() != v.algebra().dim() {
            return usage("covariance and potential dimensions differ");
        }
        let weight = v.exp()?;
        Ok(Self {
            m,
            weight,
            norm: OnceLock::new(),
        })
    }

    pub fn weight(&self) -> &Grassmann<T> {
        &self.weight
    }

    pub fn normalisation(&self) -> Result<T> {
        if let Some(z) = self.norm.get() {
            return Ok(z.clone());
        }
        let z = gaussian_expectation(&self.m, &self.weight)?;
        if z.magnitude() < NORMALISATION_FLOOR {
            return Err(Error::DegenerateNormalisation(z.magnitude()));
        }
        Ok(self.norm.get_or_init(|| z).clone())
    }

    /// `ω(A e^V) / ω(e^V)`.
    pub fn expectation(&self, a: &Grassmann<T>) -> Result<T> {
        let z = self.normalisation()?;
        let num = gaussian_expectation(&self.m, &(a * &self.weight))?;
        Ok(num / z)
    }
}

pub fn gibbs_expectation<T: Coeff, P: PairingMatrix<T> + Clone>(
    m: &P,
    v: &Grassmann<T>,
    a: &Grassmann<T>,
) -> Result<T> {
    GibbsState::new(m.clone(), v)?.expectation(a)
}

pub fn expectation(cov: &Covariance, f: &Element) -> Result<Complex64> {
    gaussian_expectation(cov, f)
}
