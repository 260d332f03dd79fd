//! Fermionic Fock space: Jordan–Wigner CAR matrices, the Grassmann Brownian
//! martingale as operators, and conditional expectations as partial vacua.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::algebra::{bits, Algebra, Element};
use crate::error::{usage, validation, Error, Result};
use crate::gaussian::{gaussian_moment, wick_product};
use crate::lattice::{FieldIndex, COMPONENTS};
use crate::scale::CovarianceSchedule;

pub type SparseOp = CsMat<Complex64>;

pub const MAX_MODES: usize = 14;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Antisymmetric Fock space over `n_modes` one-particle modes.
#[derive(Clone, Debug)]
pub struct FockRep {
    n_modes: usize,
    annihilators: Vec<SparseOp>,
}

impl FockRep {
    pub fn build(n_modes: usize) -> Result<Self> {
        if n_modes > MAX_MODES {
            return Err(Error::Capacity(format!(
                "{n_modes} modes exceeds the Fock limit of {MAX_MODES}"
            )));
        }
        let dim = 1usize << n_modes;
        let annihilators = (0..n_modes)
            .map(|m| {
                let mut tri = TriMat::new((dim, dim));
                for b in (0..dim).filter(|b| b >> m & 1 == 1) {
                    let below = (b & ((1 << m) - 1)).count_ones();
                    let sign = if below % 2 == 0 { 1.0 } else { -1.0 };
                    tri.add_triplet(b ^ (1 << m), b, Complex64::new(sign, 0.0));
                }
                tri.to_csc()
            })
            .collect();
        Ok(Self {
            n_modes,
            annihilators,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn dim(&self) -> usize {
        1 << self.n_modes
    }

    pub fn annihilator(&self, m: usize) -> &SparseOp {
        &self.annihilators[m]
    }

    pub fn creator(&self, m: usize) -> SparseOp {
        dagger(&self.annihilators[m])
    }

    /// `a(f) = Σ_m f̄_m a(e_m)`.
    pub fn annihilation(&self, f: &[Complex64]) -> SparseOp {
        let mut out = self.zero();
        for (m, c) in f.iter().enumerate().filter(|(_, c)| c.norm() != 0.0) {
            out = &out + &scale(&self.annihilators[m], c.conj());
        }
        out
    }

    /// `a*(f) = Σ_m f_m a*(e_m)`.
    pub fn creation(&self, f: &[Complex64]) -> SparseOp {
        let mut out = self.zero();
        for (m, c) in f.iter().enumerate().filter(|(_, c)| c.norm() != 0.0) {
            out = &out + &scale(&self.creator(m), *c);
        }
        out
    }

    /// `Ξ = (−1)^N`.
    pub fn parity(&self) -> SparseOp {
        let mut tri = TriMat::new((self.dim(), self.dim()));
        for b in 0..self.dim() {
            let s = if b.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            tri.add_triplet(b, b, Complex64::new(s, 0.0));
        }
        tri.to_csc()
    }

    pub fn identity(&self) -> SparseOp {
        CsMat::eye_csc(self.dim())
    }

    pub fn zero(&self) -> SparseOp {
        CsMat::zero((self.dim(), self.dim())).to_csc()
    }

    pub fn vacuum(&self) -> DVector<Complex64> {
        let mut v = DVector::zeros(self.dim());
        v[0] = ONE;
        v
    }
}

pub fn scale(a: &SparseOp, c: Complex64) -> SparseOp {
    a.map(|v| v * c)
}

pub fn dagger(a: &SparseOp) -> SparseOp {
    a.transpose_view().to_owned().map(|v| v.conj()).to_csc()
}

pub fn anticommutator(a: &SparseOp, b: &SparseOp) -> SparseOp {
    &(a * b) + &(b * a)
}

pub fn max_abs(a: &SparseOp) -> f64 {
    a.iter().map(|(v, _)| v.norm()).fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &SparseOp, b: &SparseOp) -> f64 {
    max_abs(&(a - b))
}

pub fn apply(a: &SparseOp, v: &DVector<Complex64>) -> DVector<Complex64> {
    let mut out = DVector::zeros(a.rows());
    for (val, (r, c)) in a.iter() {
        out[r] += val * v[c];
    }
    out
}

pub fn to_dense(a: &SparseOp) -> DMatrix<Complex64> {
    let mut m = DMatrix::zeros(a.rows(), a.cols());
    for (val, (r, c)) in a.iter() {
        m[(r, c)] += *val;
    }
    m
}

/// Operator norm through a dense SVD; only for small spaces.
pub fn op_norm(a: &SparseOp) -> f64 {
    to_dense(a)
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// `(1 ⊗ ⟨Ω|) M (1 ⊗ |Ω⟩) ⊗ 1` for the split after the first `n_early` modes.
pub fn partial_vacuum(rep: &FockRep, n_early: usize, m: &SparseOp) -> SparseOp {
    let late = rep.n_modes() - n_early;
    let mut tri = TriMat::new((rep.dim(), rep.dim()));
    for (val, (r, c)) in m.iter() {
        if r >> n_early != 0 || c >> n_early != 0 {
            continue;
        }
        for l in 0..(1usize << late) {
            tri.add_triplet(r | l << n_early, c | l << n_early, *val);
        }
    }
    tri.to_csc()
}

/// Operator realisation of a GBM on a time grid: one mode per (step, field index),
/// ordered by step, then site, spin and species.
#[derive(Clone, Debug)]
pub struct FockGbm {
    rep: FockRep,
    grid: Vec<f64>,
    n_fields: usize,
    creation_parts: Vec<Vec<SparseOp>>,
    annihilation_parts: Vec<Vec<SparseOp>>,
    increment_grams: Vec<DMatrix<Complex64>>,
}

const NODE_TOL: f64 = 1e-12;

impl FockGbm {
    pub fn new(sched: &dyn CovarianceSchedule, grid: &[f64]) -> Result<Self> {
        if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
            return usage("time grid must have at least two strictly increasing nodes");
        }
        let n_fields = sched.dim();
        if n_fields % COMPONENTS != 0 {
            return validation(format!(
                "{n_fields} field indices is not a whole number of sites"
            ));
        }
        let steps = grid.len() - 1;
        let rep = FockRep::build(steps * n_fields)?;
        let n_sites = n_fields / COMPONENTS;
        let mut creation_parts = Vec::with_capacity(steps);
        let mut annihilation_parts = Vec::with_capacity(steps);
        let mut increment_grams = Vec::with_capacity(steps);
        for k in 0..steps {
            let gram = sched.increment(grid[k], grid[k + 1])?.gram().clone();
            let c = site_square_root(&gram, n_sites)?;
            let mode = |f: FieldIndex| k * n_fields + f.flat();
            let mut cre = Vec::with_capacity(n_fields);
            let mut ann = Vec::with_capacity(n_fields);
            for i in 0..n_fields {
                let fi = FieldIndex::from_flat(i);
                let mut vc = vec![ZERO; rep.n_modes()];
                let mut va = vec![ZERO; rep.n_modes()];
                for y in 0..n_sites {
                    let w = c[(y, fi.site)];
                    let plus = mode(FieldIndex {
                        site: y,
                        spin: fi.spin,
                        species: 0,
                    });
                    let minus = mode(FieldIndex {
                        site: y,
                        spin: fi.spin,
                        species: 1,
                    });
                    if fi.species == 0 {
                        vc[plus] = Complex64::new(w, 0.0);
                        va[minus] = Complex64::new(w, 0.0);
                    } else {
                        vc[minus] = Complex64::new(-w, 0.0);
                        va[plus] = Complex64::new(w, 0.0);
                    }
                }
                cre.push(rep.creation(&vc));
                ann.push(rep.annihilation(&va));
            }
            creation_parts.push(cre);
            annihilation_parts.push(ann);
            increment_grams.push(gram);
        }
        Ok(Self {
            rep,
            grid: grid.to_vec(),
            n_fields,
            creation_parts,
            annihilation_parts,
            increment_grams,
        })
    }

    pub fn rep(&self) -> &FockRep {
        &self.rep
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    /// Number of increment generators, `steps · n_fields`.
    pub fn n_generators(&self) -> usize {
        self.steps() * self.n_fields
    }

    pub fn node(&self, t: f64) -> Result<usize> {
        self.grid
            .iter()
            .position(|&g| (g - t).abs() <= NODE_TOL)
            .ok_or_else(|| Error::Usage(format!("time {t} is not a grid node")))
    }

    /// Operator of the increment `X_{t_{k+1}}(e_i) − X_{t_k}(e_i)`.
    pub fn increment(&self, k: usize, i: usize) -> SparseOp {
        &self.creation_parts[k][i] + &self.annihilation_parts[k][i]
    }

    /// `X_t(f)` at a grid node.
    pub fn gbm_operator(&self, t: f64, f: &[Complex64]) -> Result<SparseOp> {
        if f.len() != self.n_fields {
            return usage(format!(
                "test vector has {} entries, expected {}",
                f.len(),
                self.n_fields
            ));
        }
        let j = self.node(t)?;
        let mut out = self.rep.zero();
        for k in 0..j {
            for (i, c) in f.iter().enumerate().filter(|(_, c)| c.norm() != 0.0) {
                out = &out + &scale(&self.increment(k, i), *c);
            }
        }
        Ok(out)
    }

    /// Annihilation part of `X_t(f)`.
    pub fn annihilation_part(&self, t: f64, f: &[Complex64]) -> Result<SparseOp> {
        let j = self.node(t)?;
        let mut out = self.rep.zero();
        for k in 0..j {
            for (i, c) in f.iter().enumerate().filter(|(_, c)| c.norm() != 0.0) {
                out = &out + &scale(&self.annihilation_parts[k][i], *c);
            }
        }
        Ok(out)
    }

    /// Partial vacuum over all modes of steps starting at or after `t`.
    pub fn conditional_expectation(&self, t: f64, m: &SparseOp) -> Result<SparseOp> {
        let j = self.node(t)?;
        Ok(partial_vacuum(&self.rep, j * self.n_fields, m))
    }

    /// Block-diagonal Gram of all increment generators.
    pub fn increment_gram(&self) -> DMatrix<Complex64> {
        let n = self.n_generators();
        let mut m = DMatrix::zeros(n, n);
        for (k, g) in self.increment_grams.iter().enumerate() {
            m.view_mut(
                (k * self.n_fields, k * self.n_fields),
                (self.n_fields, self.n_fields),
            )
            .copy_from(g);
        }
        m
    }

    /// Increment Gram with the blocks of steps before node `j` removed.
    pub fn late_gram(&self, j: usize) -> DMatrix<Complex64> {
        let mut m = self.increment_gram();
        let cut = j * self.n_fields;
        m.view_mut((0, 0), (cut, m.ncols())).fill(ZERO);
        m.view_mut((0, 0), (m.nrows(), cut)).fill(ZERO);
        m
    }

    /// Heat operator over the increments of steps `≥ j`, then those generators set to zero.
    pub fn symbolic_conditional(&self, j: usize, p: &Element) -> Result<Element> {
        let early = (1u64 << (j * self.n_fields)) - 1;
        Ok(p.heat(&self.late_gram(j))?.restrict_to(early))
    }

    pub fn algebra(&self) -> Result<Algebra> {
        Algebra::new(self.n_generators())
    }

    /// Symbolic `X_{t_j}(e_i)` as a sum of increment generators.
    pub fn symbolic_field(&self, alg: Algebra, j: usize, i: usize) -> Element {
        let mut out = Element::zero(alg);
        for k in 0..j {
            out = &out + &alg.generator(k * self.n_fields + i);
        }
        out
    }

    /// Operator of a polynomial in the increment generators.
    pub fn operator_of(&self, p: &Element) -> Result<SparseOp> {
        if p.algebra().dim() != self.n_generators() {
            return usage(format!(
                "polynomial over {} generators, expected {}",
                p.algebra().dim(),
                self.n_generators()
            ));
        }
        let mut out = self.rep.zero();
        for (mask, c) in p.terms() {
            let mut prod = self.rep.identity();
            for g in bits(*mask) {
                prod = &prod * &self.increment(g / self.n_fields, g % self.n_fields);
            }
            out = &out + &scale(&prod, *c);
        }
        Ok(out)
    }

    /// Normal-ordered product `:Y_{g_1} ⋯ Y_{g_k}:` of increment operators.
    pub fn normal_ordered(&self, gens: &[usize]) -> SparseOp {
        let k = gens.len();
        let mut out = self.rep.zero();
        for s in 0u32..(1 << k) {
            let mut inversions = 0;
            for i in 0..k {
                if s >> i & 1 == 1 {
                    inversions += (0..i).filter(|&j| s >> j & 1 == 0).count();
                }
            }
            let mut prod = self.rep.identity();
            for (i, &g) in gens.iter().enumerate() {
                if s >> i & 1 == 1 {
                    prod = &prod * &self.creation_parts[g / self.n_fields][g % self.n_fields];
                }
            }
            for (i, &g) in gens.iter().enumerate() {
                if s >> i & 1 == 0 {
                    prod = &prod * &self.annihilation_parts[g / self.n_fields][g % self.n_fields];
                }
            }
            let sign = if inversions % 2 == 0 { ONE } else { -ONE };
            out = &out + &scale(&prod, sign);
        }
        out
    }
}

/// Symmetric square root of the site kernel carried by a Gram matrix
/// `M[(x,σ,−),(y,σ,+)] = K(x,y) = −M[(x,σ,+),(y,σ,−)]`.
fn site_square_root(gram: &DMatrix<Complex64>, n_sites: usize) -> Result<DMatrix<f64>> {
    let idx = |site, spin, species| {
        FieldIndex {
            site,
            spin,
            species,
        }
        .flat()
    };
    let k = DMatrix::from_fn(n_sites, n_sites, |x, y| {
        gram[(idx(x, 0, 1), idx(y, 0, 0))].re
    });
    let scale = k.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let (a, b) = (FieldIndex::from_flat(i), FieldIndex::from_flat(j));
            let expect = if a.spin != b.spin || a.species == b.species {
                0.0
            } else if a.species == 1 {
                k[(a.site, b.site)]
            } else {
                -k[(a.site, b.site)]
            };
            if (gram[(i, j)] - Complex64::new(expect, 0.0)).norm() > 1e-12 * scale {
                return validation("increment Gram lacks the spin/species block structure");
            }
        }
    }
    if (&k - k.transpose()).amax() > 1e-12 * scale {
        return validation("increment site kernel is not symmetric");
    }
    let eig = SymmetricEigen::new(k);
    if let Some(l) = eig.eigenvalues.iter().find(|&&l| l < -1e-12 * scale) {
        return validation(format!(
            "increment site kernel has negative eigenvalue {l:e}"
        ));
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt) * eig.eigenvectors.transpose())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckReport {
    pub checks: Vec<CheckLine>,
}

impl CrosscheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn max_deviation(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_abs_err)
            .fold(0.0, f64::max)
    }
}

pub const CROSSCHECK_TOL: f64 = 1e-9;

fn random_polynomial(
    rng: &mut ChaCha8Rng,
    alg: Algebra,
    terms: usize,
    max_degree: usize,
    even: bool,
) -> Element {
    let n = alg.dim();
    let mut out = Vec::with_capacity(terms);
    while out.len() < terms {
        let deg = rng.random_range(0..=max_degree);
        if even && deg % 2 == 1 {
            continue;
        }
        let mut mask = 0u64;
        while (mask.count_ones() as usize) < deg.min(n) {
            mask |= 1 << rng.random_range(0..n);
        }
        out.push((
            mask,
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        ));
    }
    Element::from_terms(alg, out)
}

/// Compares the operator realisation against the symbolic Gaussian calculus:
/// moments up to `max_degree`, random conditional expectations and Wick products.
pub fn crosscheck_state(
    gbm: &FockGbm,
    sched: &dyn CovarianceSchedule,
    max_degree: usize,
    samples: usize,
    seed: u64,
) -> Result<CrosscheckReport> {
    let mut checks = Vec::new();
    let line = |name: &str, err: f64| CheckLine {
        name: name.into(),
        max_abs_err: err,
        pass: err < CROSSCHECK_TOL,
    };

    // moments of X_{t_j}(e_i) against Pfaffians of G_{t∧s}
    let rep = gbm.rep();
    let nf = gbm.n_fields();
    let vars: Vec<(usize, usize)> = (1..=gbm.steps())
        .flat_map(|j| (0..nf).map(move |i| (j, i)))
        .collect();
    let ops: Vec<SparseOp> = vars
        .iter()
        .map(|&(j, i)| {
            let mut f = vec![ZERO; nf];
            f[i] = ONE;
            gbm.gbm_operator(gbm.grid()[j], &f)
        })
        .collect::<Result<_>>()?;
    let grams: Vec<DMatrix<Complex64>> = gbm
        .grid()
        .iter()
        .map(|&t| sched.increment(gbm.grid()[0], t).map(|c| c.gram().clone()))
        .collect::<Result<_>>()?;
    let pairing = |a: usize, b: usize| {
        let (ja, ia) = vars[a];
        let (jb, ib) = vars[b];
        grams[ja.min(jb)][(ia, ib)]
    };
    let vac = rep.vacuum();
    let mut worst: f64 = 0.0;
    // depth-first over increasing index sequences, built from the right
    let mut stack: Vec<(Vec<usize>, DVector<Complex64>)> = vec![(Vec::new(), vac.clone())];
    while let Some((seq, v)) = stack.pop() {
        if !seq.is_empty() {
            let k = seq.len();
            let m: Vec<Vec<Complex64>> = (0..k)
                .map(|a| {
                    (0..k)
                        .map(|b| {
                            if a < b {
                                pairing(seq[a], seq[b])
                            } else if a > b {
                                -pairing(seq[b], seq[a])
                            } else {
                                ZERO
                            }
                        })
                        .collect()
                })
                .collect();
            let idx: Vec<usize> = (0..k).collect();
            let symbolic = gaussian_moment(&m, &idx);
            worst = worst.max((v[0] - symbolic).norm());
        }
        if seq.len() < max_degree {
            let first = seq.first().copied().unwrap_or(vars.len());
            for i in 0..first {
                let mut s = vec![i];
                s.extend_from_slice(&seq);
                stack.push((s, apply(&ops[i], &v)));
            }
        }
    }
    checks.push(line("moments", worst));

    // conditional expectations: heat operator over later increments vs partial vacuum
    let alg = gbm.algebra()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_any, mut worst_even) = (0.0f64, 0.0f64);
    for s in 0..samples {
        let even = s % 2 == 0;
        let p = random_polynomial(&mut rng, alg, 6, 4, even);
        let j = rng.random_range(0..gbm.steps());
        let symbolic = gbm.symbolic_conditional(j, &p)?;
        let lhs = gbm.conditional_expectation(gbm.grid()[j], &gbm.operator_of(&p)?)?;
        let err = max_abs_diff(&lhs, &gbm.operator_of(&symbolic)?);
        if even {
            worst_even = worst_even.max(err);
        } else {
            worst_any = worst_any.max(err);
        }
    }
    checks.push(line("conditional_expectation_even", worst_even));
    checks.push(line("conditional_expectation_mixed", worst_any));

    // Wick products against normal ordering
    let gram = gbm.increment_gram();
    let n = gbm.n_generators();
    let mut worst: f64 = 0.0;
    for mask in 1u64..(1 << n) {
        if mask.count_ones() > 4 {
            continue;
        }
        let idx = bits(mask);
        let w = wick_product(&gram, alg, &idx);
        worst = worst.max(max_abs_diff(
            &gbm.operator_of(&w)?,
            &gbm.normal_ordered(&idx),
        ));
    }
    checks.push(line("wick_products", worst));
    Ok(CrosscheckReport { checks })
}
