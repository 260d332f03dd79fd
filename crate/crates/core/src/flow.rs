//! Graded truncated flow for the lattice force.
//!
//! Every level `F^{[ℓ]}` is kept as one polynomial per output field index
//! over the field algebra of the lattice. On a finite torus this is the
//! same data as an antisymmetric kernel; the word-2 form of the degree-1
//! remainder part is recovered on demand by dividing by the lattice
//! Laplacian in Fourier space.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::algebra::{bits, Algebra, Element};
use crate::error::{usage, Error, Result};
use crate::lattice::{
    interaction_potential, FieldIndex, Geometry, LatticeSchedule, COMPONENTS, SPECIES, SPINS,
};
use crate::numerics::{line_fit, LineFit};
use crate::scale::{contraction, gradient, CovarianceSchedule};

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

// ---------------------------------------------------------------- constraints

/// Admissible exponents for a subcritical `γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintRegion {
    pub gamma: f64,
    pub d: usize,
    /// Open interval of admissible `β`.
    pub beta: (f64, f64),
}

impl ConstraintRegion {
    /// Half-open `[3β, d/2 − γ + min{2β, β+1})`, or `None` for `β` outside the open β-interval.
    pub fn alpha_interval(&self, beta: f64) -> Option<(f64, f64)> {
        if !(beta > self.beta.0 && beta < self.beta.1) {
            return None;
        }
        let d = self.d as f64;
        Some((
            3.0 * beta,
            (d / 2.0 - self.gamma) + (2.0 * beta).min(beta + 1.0),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Feasibility {
    Feasible(ConstraintRegion),
    /// `γ ≥ min{d/4, 1}`.
    Infeasible {
        gamma: f64,
        bound: f64,
    },
}

pub fn constraint_region(gamma: f64, d: usize) -> Feasibility {
    let df = d as f64;
    let bound = (df / 4.0).min(1.0);
    if !(gamma >= 0.0 && gamma < bound) {
        return Feasibility::Infeasible { gamma, bound };
    }
    let hi = (df / 2.0 - gamma).min(df / 4.0 + 0.5 - gamma / 2.0);
    Feasibility::Feasible(ConstraintRegion {
        gamma,
        d,
        beta: (gamma, hi),
    })
}

/// Margins `[α−3β, 5β−α−2γ−κ, d+4β−2α−2γ−κ, 3β+2−α−2γ−κ, d+2β+2−2α−2γ−κ]`.
pub fn constraint_margins(gamma: f64, d: usize, alpha: f64, beta: f64, kappa: f64) -> [f64; 5] {
    let d = d as f64;
    [
        alpha - 3.0 * beta,
        5.0 * beta - alpha - 2.0 * gamma - kappa,
        d + 4.0 * beta - 2.0 * alpha - 2.0 * gamma - kappa,
        3.0 * beta + 2.0 - alpha - 2.0 * gamma - kappa,
        d + 2.0 * beta + 2.0 - 2.0 * alpha - 2.0 * gamma - kappa,
    ]
}

pub fn admissible(gamma: f64, d: usize, alpha: f64, beta: f64, kappa: f64) -> bool {
    let m = constraint_margins(gamma, d, alpha, beta, kappa);
    kappa > 0.0 && m[0] >= 0.0 && m[1..].iter().all(|&v| v > 0.0)
}

/// Ansatz constants for the level bounds `‖F^{[ℓ](k)}_s‖ ≲ C^k 2^{(α−βk−κℓ)s}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormParams {
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub delta: f64,
    pub c_bar: f64,
}

impl NormParams {
    /// Midpoint `β`, `α = 3β`, and `κ` at half the tightest remaining margin.
    pub fn default_for(gamma: f64, d: usize) -> Result<Self> {
        let region = match constraint_region(gamma, d) {
            Feasibility::Feasible(r) => r,
            Feasibility::Infeasible { bound, .. } => {
                return Err(Error::Configuration(format!(
                    "gamma = {gamma} is not below {bound}"
                )))
            }
        };
        let beta = 0.5 * (region.beta.0 + region.beta.1);
        let alpha = 3.0 * beta;
        let m = constraint_margins(gamma, d, alpha, beta, 0.0);
        let kappa = 0.5 * m[1..].iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            c: 1.0,
            alpha,
            beta,
            kappa,
            delta: 0.5,
            c_bar: 1.0,
        })
    }

    pub fn validate(&self, gamma: f64, d: usize) -> Result<()> {
        if admissible(gamma, d, self.alpha, self.beta, self.kappa) {
            Ok(())
        } else {
            let m = constraint_margins(gamma, d, self.alpha, self.beta, self.kappa);
            Err(Error::Configuration(format!(
                "(alpha, beta, kappa) = ({}, {}, {}) violates the constraints, margins {m:?}",
                self.alpha, self.beta, self.kappa
            )))
        }
    }

    /// `n = ⌊α/κ⌋ + 1`.
    pub fn truncation(&self) -> usize {
        (self.alpha / self.kappa).floor() as usize + 1
    }

    /// `c_ℓ = (1 − ℓ/n) c̄/2`.
    pub fn c_ell(&self, ell: usize, n: usize) -> f64 {
        (1.0 - ell as f64 / n as f64) * self.c_bar / 2.0
    }
}

// ---------------------------------------------------------------- kernel operators

fn check_degree_one(k: &[Element]) -> Result<()> {
    for (a, p) in k.iter().enumerate() {
        if p.terms().iter().any(|(m, _)| m.count_ones() != 1) {
            return usage(format!("component {a} is not homogeneous of degree 1"));
        }
    }
    Ok(())
}

/// Moves every input of a degree-1 kernel onto the output site.
pub fn localise(k: &[Element]) -> Result<Vec<Element>> {
    check_degree_one(k)?;
    Ok(k.iter()
        .enumerate()
        .map(|(a, p)| {
            let site = FieldIndex::from_flat(a).site;
            let terms = p
                .terms()
                .iter()
                .map(|(m, v)| {
                    let input = FieldIndex::from_flat(m.trailing_zeros() as usize);
                    let moved = FieldIndex { site, ..input }.flat();
                    (1u64 << moved, *v)
                })
                .collect();
            Element::from_terms(p.algebra(), terms)
        })
        .collect())
}

/// `K − Loc K` for a degree-1 kernel.
pub fn renormalise(k: &[Element]) -> Result<Vec<Element>> {
    let loc = localise(k)?;
    Ok(k.iter().zip(&loc).map(|(a, b)| a - b).collect())
}

/// `𝔻²_A K` componentwise.
pub fn kernel_laplacian(rate: &DMatrix<Complex64>, k: &[Element]) -> Result<Vec<Element>> {
    k.iter().map(|p| p.laplacian(rate)).collect()
}

/// `ℂ_A(K, K'') = ⟨A K'', DK⟩`.
pub fn kernel_contraction(
    rate: &DMatrix<Complex64>,
    k: &[Element],
    k2: &[Element],
) -> Result<Vec<Element>> {
    contraction(rate, k, k2)
}

/// `K(ψ)` for a field given as one element per field index.
pub fn evaluate_kernel(k: &[Element], field: &[Element]) -> Result<Vec<Element>> {
    k.iter().map(|p| p.compose(field)).collect()
}

/// Largest `|F_{π(a)} − π·F_a|` under a site relabelling `π`.
pub fn site_permutation_defect(
    geom: &Geometry,
    k: &[Element],
    perm: &dyn Fn(usize) -> usize,
) -> Result<f64> {
    let alg = k[0].algebra();
    let map: Vec<usize> = (0..geom.n_fields())
        .map(|i| {
            let f = FieldIndex::from_flat(i);
            FieldIndex {
                site: perm(f.site),
                ..f
            }
            .flat()
        })
        .collect();
    let mut worst = 0.0f64;
    for (a, p) in k.iter().enumerate() {
        let moved = p.embed(alg, &map)?;
        worst = worst.max(moved.dist(&k[map[a]]));
    }
    Ok(worst)
}

/// Symbol of the nearest-neighbour Laplacian `ε⁻²Σ_i (ψ(x+εe_i) − 2ψ(x) + ψ(x−εe_i))`.
pub fn laplacian_symbol(geom: &Geometry, k: &[f64]) -> f64 {
    let e = geom.eps;
    -k.iter().map(|ki| 2.0 - 2.0 * (ki * e).cos()).sum::<f64>() / (e * e)
}

/// Matrix of the lattice Laplacian on field indices.
pub fn lattice_laplacian(geom: &Geometry) -> DMatrix<Complex64> {
    let n = geom.n_fields();
    let mut m = DMatrix::zeros(n, n);
    let inv = 1.0 / (geom.eps * geom.eps);
    for x in 0..geom.n_sites() {
        for axis in 0..geom.d {
            for step in [-1i64, 1] {
                let mut by = vec![0i64; geom.d];
                by[axis] = step;
                let y = geom.shift(x, &by);
                for comp in 0..COMPONENTS {
                    m[(x * COMPONENTS + comp, y * COMPONENTS + comp)] += c(inv);
                }
            }
            for comp in 0..COMPONENTS {
                m[(x * COMPONENTS + comp, x * COMPONENTS + comp)] -= c(2.0 * inv);
            }
        }
    }
    m
}

fn phase(geom: &Geometry, k: &[f64], site: usize) -> f64 {
    geom.coords(site)
        .iter()
        .zip(k)
        .map(|(&x, ki)| x as f64 * geom.eps * ki)
        .sum()
}

/// `f̂(k) = Σ_x f(x) e^{−ik·x}` over displacement sites.
fn forward(geom: &Geometry, f: &[Complex64]) -> Vec<Complex64> {
    geom.momenta()
        .iter()
        .map(|k| {
            (0..f.len())
                .map(|x| f[x] * Complex64::from_polar(1.0, -phase(geom, k, x)))
                .sum()
        })
        .collect()
}

/// `f(x) = N⁻¹ Σ_k f̂(k) e^{ik·x}`.
fn backward(geom: &Geometry, fh: &[Complex64]) -> Vec<Complex64> {
    let n = geom.n_sites() as f64;
    (0..geom.n_sites())
        .map(|x| {
            geom.momenta()
                .iter()
                .zip(fh)
                .map(|(k, v)| v * Complex64::from_polar(1.0, phase(geom, k, x)))
                .sum::<Complex64>()
                / n
        })
        .collect()
}

/// `q` with `q ∗ Δ = r` for a profile `r` of zero sum. The zero mode, which `Δ` cannot see,
/// is set to `Σ_z r(z)|z|²/(2d)`, the small-momentum limit of `r̂/Δ̂`.
fn divide_by_laplacian(geom: &Geometry, r: &[Complex64], symbols: &[f64]) -> Vec<Complex64> {
    let rh = forward(geom, r);
    let second: Complex64 = r
        .iter()
        .enumerate()
        .map(|(z, v)| {
            v * geom
                .wrapped(z)
                .iter()
                .map(|&w| (w as f64 * geom.eps).powi(2))
                .sum::<f64>()
        })
        .sum::<Complex64>()
        / (2.0 * geom.d as f64);
    let qh: Vec<Complex64> = rh
        .iter()
        .zip(symbols)
        .map(|(v, s)| if s.abs() < 1e-300 { second } else { v / s })
        .collect();
    backward(geom, &qh)
}

/// Word-2 kernel `Q` with `(Ren K)(ψ) = Q(Δψ)`: `q[z][μ][μ']` is the weight of `(Δψ)(y+z, μ')` in output `(y, μ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WordTwoKernel {
    pub q: Vec<[[Complex64; COMPONENTS]; COMPONENTS]>,
}

/// Rows of a translation-invariant degree-1 kernel read off at the origin: `a[z][μ][μ']`.
fn origin_profile(geom: &Geometry, k: &[Element]) -> Vec<[[Complex64; COMPONENTS]; COMPONENTS]> {
    let mut a = vec![[[Complex64::new(0.0, 0.0); COMPONENTS]; COMPONENTS]; geom.n_sites()];
    for mu in 0..COMPONENTS {
        for (m, v) in k[mu].terms() {
            let input = FieldIndex::from_flat(m.trailing_zeros() as usize);
            a[input.site][mu][input.component()] += *v;
        }
    }
    a
}

/// Solves `Q ∗ Δ = (1 − Loc)K` by Fourier division.
pub fn ren_word_two(geom: &Geometry, k: &[Element]) -> Result<WordTwoKernel> {
    check_degree_one(k)?;
    let a = origin_profile(geom, k);
    let symbols: Vec<f64> = geom
        .momenta()
        .iter()
        .map(|kk| laplacian_symbol(geom, kk))
        .collect();
    let mut q = vec![[[Complex64::new(0.0, 0.0); COMPONENTS]; COMPONENTS]; geom.n_sites()];
    for mu in 0..COMPONENTS {
        for nu in 0..COMPONENTS {
            let mut r: Vec<Complex64> = a.iter().map(|blk| blk[mu][nu]).collect();
            let total: Complex64 = r.iter().sum();
            r[0] -= total;
            for (z, v) in divide_by_laplacian(geom, &r, &symbols)
                .into_iter()
                .enumerate()
            {
                q[z][mu][nu] = v;
            }
        }
    }
    Ok(WordTwoKernel { q })
}

impl WordTwoKernel {
    /// `Q(Δψ)` on a numeric field vector.
    pub fn apply(&self, geom: &Geometry, lap_psi: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); geom.n_fields()];
        for y in 0..geom.n_sites() {
            for z in 0..geom.n_sites() {
                let x = geom.shift(y, geom.coords(z));
                for mu in 0..COMPONENTS {
                    for nu in 0..COMPONENTS {
                        out[y * COMPONENTS + mu] +=
                            self.q[z][mu][nu] * lap_psi[x * COMPONENTS + nu];
                    }
                }
            }
        }
        out
    }

    /// `2^{2s} max_μ Σ_{z,μ'} |q| w_s(0; z)`: the word-2 part of the degree-1 norm with fields at scale `t`, including `2^{2(s−t)}`.
    pub fn norm(&self, geom: &Geometry, s: f64, c_w: f64, delta: f64) -> f64 {
        let mut best = 0.0f64;
        for mu in 0..COMPONENTS {
            let mut acc = 0.0;
            for (z, blk) in self.q.iter().enumerate() {
                let w = weight(geom.norm(z), s, c_w, delta);
                acc += blk[mu].iter().map(|v| v.norm()).sum::<f64>() * w;
            }
            best = best.max(acc);
        }
        4f64.powf(s) * best
    }
}

/// Length of a minimum spanning tree over torus distances, an upper bound for the Steiner diameter.
pub fn steiner_length(geom: &Geometry, sites: &[usize]) -> f64 {
    let mut pts: Vec<usize> = sites.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 2 {
        return 0.0;
    }
    let mut in_tree = vec![false; pts.len()];
    let mut best = vec![f64::INFINITY; pts.len()];
    best[0] = 0.0;
    let mut total = 0.0;
    for _ in 0..pts.len() {
        let (i, _) = best
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_tree[*i])
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        in_tree[i] = true;
        total += best[i];
        for j in 0..pts.len() {
            if !in_tree[j] {
                best[j] = best[j].min(geom.dist(pts[i], pts[j]));
            }
        }
    }
    total
}

/// `e^{c (2^s r)^δ}`.
pub fn weight(r: f64, s: f64, c_w: f64, delta: f64) -> f64 {
    (c_w * (2f64.powf(s) * r).powf(delta)).exp()
}

/// Word-0 kernel norm: `max_a Σ_terms |coef| · w_s(St(site(a) ∪ input sites))`.
pub fn weighted_norm(geom: &Geometry, k: &[Element], s: f64, c_w: f64, delta: f64) -> f64 {
    let mut best = 0.0f64;
    for (a, p) in k.iter().enumerate() {
        let y = FieldIndex::from_flat(a).site;
        let mut acc = 0.0;
        for (m, v) in p.terms() {
            let mut sites: Vec<usize> = bits(*m)
                .into_iter()
                .map(|g| FieldIndex::from_flat(g).site)
                .collect();
            sites.push(y);
            acc += v.norm() * weight(steiner_length(geom, &sites), s, c_w, delta);
        }
        best = best.max(acc);
    }
    best
}

/// Gain of the word-2 remainder of `ℂ_{ġ_s}(K, K)` for a unit local mass kernel `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenGain {
    /// `(s − t, ‖(Ren ℂ)_2‖ / ‖ġ_s‖_{L¹_{s,c}})`.
    pub ratios: Vec<(f64, f64)>,
    /// Fit of `ln ratio` against `s − t`.
    pub fit: LineFit,
}

/// Kernel-scale gain profile at fixed field scale `t` and varying kernel scale `s`.
pub fn ren_gain_profile(
    sched: &LatticeSchedule,
    t: f64,
    scales: &[f64],
    c_w: f64,
    c_prime: f64,
    delta: f64,
) -> Result<RenGain> {
    let geom = sched.geometry();
    if scales.len() < 2 {
        return usage("gain profile needs at least two scales");
    }
    let symbols: Vec<f64> = geom
        .momenta()
        .iter()
        .map(|kk| laplacian_symbol(geom, kk))
        .collect();
    let mut ratios = Vec::new();
    for &s in scales {
        let g = sched.rate_kernel(s);
        let mut r: Vec<Complex64> = g.iter().map(|&v| c(v)).collect();
        let total: Complex64 = r.iter().sum();
        r[0] -= total;
        let q = divide_by_laplacian(geom, &r, &symbols);
        let qn: f64 = q
            .iter()
            .enumerate()
            .map(|(z, v)| v.norm() * weight(geom.norm(z), s, c_prime, delta))
            .sum();
        let gn: f64 = g
            .iter()
            .enumerate()
            .map(|(z, v)| v.abs() * weight(geom.norm(z), s, c_w, delta))
            .sum();
        if gn == 0.0 {
            return Err(Error::Singularity(format!(
                "rate kernel vanishes at s = {s}"
            )));
        }
        ratios.push((s - t, 4f64.powf(t) * qn / gn));
    }
    let xs: Vec<f64> = ratios.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = ratios.iter().map(|p| p.1.ln()).collect();
    Ok(RenGain {
        fit: line_fit(&xs, &ys),
        ratios,
    })
}

/// Same gain with the kernel frozen at scale `s` and the field scale `t` varied.
pub fn ren_gain_fixed_kernel(
    sched: &LatticeSchedule,
    s: f64,
    field_scales: &[f64],
    c_w: f64,
    c_prime: f64,
    delta: f64,
) -> Result<RenGain> {
    let base = ren_gain_profile(sched, 0.0, &[s, s], c_w, c_prime, delta)?.ratios[0].1;
    let ratios: Vec<(f64, f64)> = field_scales
        .iter()
        .map(|&t| (s - t, 4f64.powf(t) * base))
        .collect();
    let xs: Vec<f64> = ratios.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = ratios.iter().map(|p| p.1.ln()).collect();
    Ok(RenGain {
        fit: line_fit(&xs, &ys),
        ratios,
    })
}

// ---------------------------------------------------------------- integration

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Degree ≥ 3 and Ren parts vanish at `t_max`, Loc part vanishes at 0.
    Polchinski,
    /// Laplacian-only flow, everything pinned at `t_max`: Wick ordering.
    Wick,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    pub lambda: f64,
    pub truncation: usize,
    pub step: f64,
    pub boundary: Boundary,
}

impl FlowConfig {
    pub fn new(lambda: f64, truncation: usize) -> Self {
        Self {
            lambda,
            truncation,
            step: 1.0 / 64.0,
            boundary: Boundary::Polchinski,
        }
    }
}

/// One level at one node, split by boundary condition.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelParts {
    /// Degree ≥ 3 part.
    pub high: Vec<Element>,
    /// Local degree-1 part.
    pub loc: Vec<Element>,
    /// Degree-1 part with zero local sum.
    pub ren: Vec<Element>,
}

impl LevelParts {
    fn zero(alg: Algebra, n: usize) -> Self {
        let z = vec![Element::zero(alg); n];
        Self {
            high: z.clone(),
            loc: z.clone(),
            ren: z,
        }
    }

    pub fn total(&self) -> Vec<Element> {
        self.high
            .iter()
            .zip(&self.loc)
            .zip(&self.ren)
            .map(|((h, l), r)| &(h + l) + r)
            .collect()
    }

    pub fn degree_one(&self) -> Vec<Element> {
        self.loc.iter().zip(&self.ren).map(|(l, r)| l + r).collect()
    }
}

fn combine(terms: &[(f64, &Vec<Element>)]) -> Vec<Element> {
    let n = terms[0].1.len();
    (0..n)
        .map(|j| {
            let mut acc = Element::zero(terms[0].1[j].algebra());
            for (w, v) in terms {
                if *w != 0.0 && !v[j].is_zero() {
                    acc = &acc + &v[j].scale(&c(*w));
                }
            }
            acc
        })
        .collect()
}

/// `∫_{t_0}^{t_i} f` at every node of an equispaced run, fourth order.
fn cumulative(vals: &[Vec<Element>], h: f64) -> Vec<Vec<Element>> {
    let m = vals.len() - 1;
    let w = h / 24.0;
    let mut out = Vec::with_capacity(m + 1);
    out.push(combine(&[(0.0, &vals[0])]));
    out.push(combine(&[
        (9.0 * w, &vals[0]),
        (19.0 * w, &vals[1]),
        (-5.0 * w, &vals[2]),
        (w, &vals[3]),
    ]));
    for j in 1..m - 1 {
        let step = combine(&[
            (-w, &vals[j - 1]),
            (13.0 * w, &vals[j]),
            (13.0 * w, &vals[j + 1]),
            (-w, &vals[j + 2]),
        ]);
        let next = combine(&[(1.0, &out[j]), (1.0, &step)]);
        out.push(next);
    }
    if m >= 2 {
        let step = combine(&[
            (w, &vals[m - 3]),
            (-5.0 * w, &vals[m - 2]),
            (19.0 * w, &vals[m - 1]),
            (9.0 * w, &vals[m]),
        ]);
        let last = combine(&[(1.0, &out[m - 1]), (1.0, &step)]);
        out.push(last);
    }
    out
}

fn split_degree(s: &[Element]) -> Result<(Vec<Element>, Vec<Element>, Vec<Element>)> {
    let high: Vec<Element> = s
        .iter()
        .map(|p| {
            Element::from_terms(
                p.algebra(),
                p.terms()
                    .iter()
                    .filter(|(m, _)| m.count_ones() >= 3)
                    .cloned()
                    .collect(),
            )
        })
        .collect();
    let one: Vec<Element> = s.iter().map(|p| p.homogeneous_part(1)).collect();
    let loc = localise(&one)?;
    let ren = one.iter().zip(&loc).map(|(a, b)| a - b).collect();
    Ok((high, loc, ren))
}

#[derive(Clone, Debug)]
struct Segment {
    start: usize,
    steps: usize,
    h: f64,
}

/// Integrated levels `F^{[0]}, …, F^{[n]}` on a scale grid.
#[derive(Clone, Debug)]
pub struct KernelFamily {
    geom: Geometry,
    alg: Algebra,
    cfg: FlowConfig,
    grid: Vec<f64>,
    segments: Vec<Segment>,
    levels: Vec<Vec<LevelParts>>,
}

fn segment_plan(sched: &LatticeSchedule, step: f64) -> Vec<(f64, f64, usize)> {
    let t_max = sched.t_max();
    let mut cuts = vec![0.0];
    cuts.extend(
        sched
            .breakpoints()
            .into_iter()
            .filter(|&b| b > 0.0 && b < t_max),
    );
    cuts.push(t_max);
    cuts.windows(2)
        .map(|w| (w[0], w[1], (((w[1] - w[0]) / step).ceil() as usize).max(3)))
        .collect()
}

/// Integrates the truncated flow with the configured step.
pub fn integrate_flow(sched: &LatticeSchedule, cfg: &FlowConfig) -> Result<KernelFamily> {
    if !(cfg.step > 0.0) {
        return usage("flow step must be positive");
    }
    let alg = Algebra::new(sched.geometry().n_fields())?;
    integrate_on(sched, cfg, &segment_plan(sched, cfg.step), alg)
}

/// Integrates at `h` and `h/2`; the residual is the largest coefficient change at shared nodes.
pub fn integrate_certified(
    sched: &LatticeSchedule,
    cfg: &FlowConfig,
    tol: f64,
) -> Result<(KernelFamily, f64)> {
    let plan = segment_plan(sched, cfg.step);
    let alg = Algebra::new(sched.geometry().n_fields())?;
    let coarse = integrate_on(sched, cfg, &plan, alg)?;
    let fine_plan: Vec<(f64, f64, usize)> = plan.iter().map(|&(a, b, m)| (a, b, 2 * m)).collect();
    let fine = integrate_on(sched, cfg, &fine_plan, alg)?;
    let mut residual = 0.0f64;
    for (sc, sf) in coarse.segments.iter().zip(&fine.segments) {
        for i in 0..=sc.steps {
            let (ic, jf) = (sc.start + i, sf.start + 2 * i);
            for ell in 0..coarse.levels.len() {
                let a = coarse.levels[ell][ic].total();
                let b = fine.levels[ell][jf].total();
                for (x, y) in a.iter().zip(&b) {
                    residual = residual.max(x.dist(y));
                }
            }
        }
    }
    if residual > tol {
        return Err(Error::Convergence(format!(
            "flow residual {residual:e} above {tol:e} after one step halving"
        )));
    }
    Ok((fine, residual))
}

fn integrate_on(
    sched: &LatticeSchedule,
    cfg: &FlowConfig,
    plan: &[(f64, f64, usize)],
    alg: Algebra,
) -> Result<KernelFamily> {
    let geom = sched.geometry().clone();
    let n_f = geom.n_fields();
    let fields: Vec<Element> = (0..n_f).map(|j| Element::generator(alg, j)).collect();
    let v0 = interaction_potential(&geom, cfg.lambda, 0.0, &fields)?;
    let f0 = gradient(&v0);

    let mut grid = Vec::new();
    let mut segments = Vec::new();
    for &(a, b, m) in plan {
        let start = if grid.is_empty() { 0 } else { grid.len() - 1 };
        let h = (b - a) / m as f64;
        for i in 0..=m {
            let t = if i == m { b } else { a + i as f64 * h };
            if i == 0 && !grid.is_empty() {
                continue;
            }
            grid.push(t);
        }
        segments.push(Segment { start, steps: m, h });
    }
    let nodes = grid.len();
    // rate at each node of each segment, left limit at segment ends
    let rates: Vec<Vec<DMatrix<Complex64>>> = segments
        .iter()
        .map(|sg| {
            (0..=sg.steps)
                .map(|i| {
                    let t = grid[sg.start + i];
                    sched.rate_gram(if i == sg.steps { t - 1e-13 } else { t })
                })
                .collect()
        })
        .collect();

    let mut levels = vec![vec![
        LevelParts {
            high: f0.clone(),
            loc: vec![Element::zero(alg); n_f],
            ren: vec![Element::zero(alg); n_f]
        };
        nodes
    ]];
    let mut totals: Vec<Vec<Vec<Element>>> = vec![vec![f0.clone(); nodes]];
    for ell in 0..cfg.truncation {
        let mut next = vec![LevelParts::zero(alg, n_f); nodes];
        let mut seg_cum = Vec::new();
        for (sg, rate) in segments.iter().zip(&rates) {
            let mut hs = Vec::new();
            let mut ls = Vec::new();
            let mut rs = Vec::new();
            for i in 0..=sg.steps {
                let node = sg.start + i;
                let a = &rate[i];
                let mut src: Vec<Element> = kernel_laplacian(a, &totals[ell][node])?
                    .into_iter()
                    .map(|p| p.scale(&c(0.5)))
                    .collect();
                if cfg.boundary == Boundary::Polchinski {
                    for lp in 0..=ell {
                        let q = kernel_contraction(a, &totals[lp][node], &totals[ell - lp][node])?;
                        src = src.iter().zip(&q).map(|(x, y)| x + y).collect();
                    }
                }
                let (h, l, r) = split_degree(&src)?;
                hs.push(h);
                ls.push(l);
                rs.push(r);
            }
            seg_cum.push((
                cumulative(&hs, sg.h),
                cumulative(&ls, sg.h),
                cumulative(&rs, sg.h),
            ));
        }
        // ∂F^{[ℓ+1]} = −S^{[ℓ]}: backward parts are ∫_t^{T} S, forward parts −∫_0^t S
        let seg_total = |k: usize, part: usize| -> Vec<Element> {
            let cum = &seg_cum[k];
            let v = match part {
                0 => &cum.0,
                1 => &cum.1,
                _ => &cum.2,
            };
            v[v.len() - 1].clone()
        };
        let loc_backward = cfg.boundary == Boundary::Wick;
        for part in 0..3 {
            let backward = part != 1 || loc_backward;
            for (k, sg) in segments.iter().enumerate() {
                let cum = match part {
                    0 => &seg_cum[k].0,
                    1 => &seg_cum[k].1,
                    _ => &seg_cum[k].2,
                };
                let mut offset = vec![Element::zero(alg); n_f];
                if backward {
                    for j in k + 1..segments.len() {
                        offset = combine(&[(1.0, &offset), (1.0, &seg_total(j, part))]);
                    }
                } else {
                    for j in 0..k {
                        offset = combine(&[(1.0, &offset), (1.0, &seg_total(j, part))]);
                    }
                }
                let whole = seg_total(k, part);
                for i in 0..=sg.steps {
                    let node = sg.start + i;
                    let val = if backward {
                        combine(&[(1.0, &offset), (1.0, &whole), (-1.0, &cum[i])])
                    } else {
                        combine(&[(-1.0, &offset), (-1.0, &cum[i])])
                    };
                    match part {
                        0 => next[node].high = val,
                        1 => next[node].loc = val,
                        _ => next[node].ren = val,
                    }
                }
            }
        }
        totals.push(next.iter().map(|p| p.total()).collect());
        levels.push(next);
    }
    Ok(KernelFamily {
        geom,
        alg,
        cfg: *cfg,
        grid,
        segments,
        levels,
    })
}

/// One row of a flow report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowRow {
    pub t: f64,
    pub ell: usize,
    pub k: usize,
    pub weighted_norm: f64,
    pub mu_t: f64,
}

impl KernelFamily {
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn algebra(&self) -> Algebra {
        self.alg
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn truncation(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn t_max(&self) -> f64 {
        *self.grid.last().expect("nonempty grid")
    }

    pub fn parts(&self, ell: usize, node: usize) -> &LevelParts {
        &self.levels[ell][node]
    }

    pub fn level(&self, ell: usize, node: usize) -> Vec<Element> {
        self.levels[ell][node].total()
    }

    /// `Σ_ℓ F^{[ℓ]}` at a node.
    pub fn force(&self, node: usize) -> Vec<Element> {
        let mut acc = self.level(0, node);
        for ell in 1..self.levels.len() {
            acc = acc
                .iter()
                .zip(&self.level(ell, node))
                .map(|(a, b)| a + b)
                .collect();
        }
        acc
    }

    pub fn node_of(&self, t: f64) -> Option<usize> {
        self.grid.iter().position(|&g| (g - t).abs() < 1e-12)
    }

    /// Cubic Lagrange interpolation of a level inside the segment holding `t`.
    pub fn level_at(&self, ell: usize, t: f64) -> Result<Vec<Element>> {
        if let Some(node) = self.node_of(t) {
            return Ok(self.level(ell, node));
        }
        let t_max = self.t_max();
        if !(0.0..=t_max).contains(&t) {
            return usage(format!("scale {t} outside [0, {t_max}]"));
        }
        let sg = self
            .segments
            .iter()
            .find(|sg| t < self.grid[sg.start + sg.steps])
            .unwrap_or_else(|| self.segments.last().expect("segments"));
        let a = self.grid[sg.start];
        let i0 = (((t - a) / sg.h).floor() as isize - 1).clamp(0, sg.steps as isize - 3) as usize;
        let idx: Vec<usize> = (0..4).map(|j| sg.start + i0 + j).collect();
        let ts: Vec<f64> = idx.iter().map(|&i| self.grid[i]).collect();
        let vals: Vec<Vec<Element>> = idx.iter().map(|&i| self.level(ell, i)).collect();
        let weights: Vec<f64> = (0..4)
            .map(|j| {
                (0..4)
                    .filter(|&m| m != j)
                    .map(|m| (t - ts[m]) / (ts[j] - ts[m]))
                    .product()
            })
            .collect();
        let terms: Vec<(f64, &Vec<Element>)> = weights.iter().copied().zip(vals.iter()).collect();
        Ok(combine(&terms))
    }

    pub fn levels_at(&self, t: f64) -> Result<Vec<Vec<Element>>> {
        (0..self.levels.len())
            .map(|ell| self.level_at(ell, t))
            .collect()
    }

    pub fn force_at(&self, t: f64) -> Result<Vec<Element>> {
        let lv = self.levels_at(t)?;
        let mut acc = lv[0].clone();
        for l in &lv[1..] {
            acc = acc.iter().zip(l).map(|(a, b)| a + b).collect();
        }
        Ok(acc)
    }

    /// `μ_t = Σ_ℓ Σ_{ab} J_{ab} L^{[ℓ]}_{ab} / (4ε^d)` from the on-site blocks of the local parts.
    pub fn chemical_potential(&self, node: usize) -> f64 {
        let mut acc = 0.0;
        for lv in &self.levels {
            acc += mass_of_block(&self.geom, &lv[node].loc);
        }
        acc
    }

    /// `μ^ε`, the chemical potential at `t_max`.
    pub fn renormalised_chemical_potential(&self) -> f64 {
        self.chemical_potential(self.grid.len() - 1)
    }

    /// `H_{>n}`: the part of `½D²F + ⟨ĠF, DF⟩` the truncated levels do not absorb.
    pub fn remainder_source(
        &self,
        rate: &DMatrix<Complex64>,
        levels: &[Vec<Element>],
    ) -> Result<Vec<Element>> {
        let n = levels.len() - 1;
        let mut acc: Vec<Element> = kernel_laplacian(rate, &levels[n])?
            .into_iter()
            .map(|p| p.scale(&c(0.5)))
            .collect();
        if self.cfg.boundary == Boundary::Wick {
            for a in 0..=n {
                for b in 0..=n {
                    let q = kernel_contraction(rate, &levels[a], &levels[b])?;
                    acc = acc.iter().zip(&q).map(|(x, y)| x + y).collect();
                }
            }
            return Ok(acc);
        }
        for a in 0..=n {
            for b in n.saturating_sub(a)..=n {
                let q = kernel_contraction(rate, &levels[a], &levels[b])?;
                acc = acc.iter().zip(&q).map(|(x, y)| x + y).collect();
            }
        }
        Ok(acc)
    }

    /// `H_{>n}` at scale `t`, with the rate taken from `sched`.
    pub fn remainder_source_at(
        &self,
        sched: &dyn CovarianceSchedule,
        t: f64,
    ) -> Result<Vec<Element>> {
        self.remainder_source(&sched.rate_gram(t), &self.levels_at(t)?)
    }

    /// Terminal potential whose gradient is the family at `t_max`: quartic plus the local quadratic block.
    pub fn terminal_potential(&self) -> Result<Element> {
        let node = self.grid.len() - 1;
        let fields: Vec<Element> = (0..self.geom.n_fields())
            .map(|j| Element::generator(self.alg, j))
            .collect();
        let mut v = interaction_potential(&self.geom, self.cfg.lambda, 0.0, &fields)?;
        let force = self.force(node);
        let lin: Vec<Element> = force.iter().map(|p| p.homogeneous_part(1)).collect();
        // V = ½ Σ ψ_a B_ab ψ_b with B antisymmetric gives DV = Bψ
        for (a, p) in lin.iter().enumerate() {
            for (m, v_ab) in p.terms() {
                let b = m.trailing_zeros() as usize;
                let pair = &fields[a] * &fields[b];
                v = &v + &pair.scale(&(v_ab * 0.5));
            }
        }
        let check = gradient(&v);
        let worst = check
            .iter()
            .zip(&force)
            .map(|(x, y)| x.dist(y))
            .fold(0.0, f64::max);
        if worst > 1e-9 * (1.0 + force.iter().map(|p| p.max_abs()).fold(0.0, f64::max)) {
            return Err(Error::Validation(format!(
                "terminal force is not a gradient (defect {worst:e})"
            )));
        }
        Ok(v)
    }

    /// Kernel norm of `F^{[ℓ](k)}` at a node with fields and monomial both at scale `s`.
    pub fn component_norm(
        &self,
        ell: usize,
        k: usize,
        node: usize,
        c_w: f64,
        delta: f64,
    ) -> Result<f64> {
        let s = self.grid[node];
        let parts = &self.levels[ell][node];
        if k == 1 {
            let loc = weighted_norm(&self.geom, &parts.loc, s, c_w, delta);
            let ren = ren_word_two(&self.geom, &parts.ren)?.norm(&self.geom, s, c_w, delta);
            return Ok(loc.max(ren));
        }
        let hom: Vec<Element> = parts
            .total()
            .iter()
            .map(|p| p.homogeneous_part(k))
            .collect();
        Ok(weighted_norm(&self.geom, &hom, s, c_w, delta))
    }

    /// `C_eff(ℓ, k) = max_s 2^{−(α−βk−κℓ)s} ‖F_s^{[ℓ](k)}‖` over the grid, odd `k` only.
    pub fn ansatz_constants(&self, params: &NormParams) -> Result<Vec<((usize, usize), f64)>> {
        let n = self.truncation().max(1);
        let mut out = Vec::new();
        for ell in 0..self.levels.len() {
            let c_w = params.c_ell(ell.min(n), n);
            for k in (1..=self.geom.n_fields()).step_by(2) {
                let mut best = 0.0f64;
                for node in 0..self.grid.len() {
                    let s = self.grid[node];
                    let expo = params.alpha - params.beta * k as f64 - params.kappa * ell as f64;
                    best = best.max(
                        2f64.powf(-expo * s)
                            * self.component_norm(ell, k, node, c_w, params.delta)?,
                    );
                }
                if best > 0.0 {
                    out.push(((ell, k), best));
                }
            }
        }
        Ok(out)
    }

    /// Rows `(t, ℓ, k, norm, μ_t)` for every node, level and odd degree present.
    pub fn report(&self, c_w: f64, delta: f64) -> Result<Vec<FlowRow>> {
        let mut rows = Vec::new();
        for node in 0..self.grid.len() {
            let mu = self.chemical_potential(node);
            for ell in 0..self.levels.len() {
                for k in (1..=self.geom.n_fields()).step_by(2) {
                    let norm = self.component_norm(ell, k, node, c_w, delta)?;
                    if norm > 0.0 {
                        rows.push(FlowRow {
                            t: self.grid[node],
                            ell,
                            k,
                            weighted_norm: norm,
                            mu_t: mu,
                        });
                    }
                }
            }
        }
        Ok(rows)
    }
}

/// `Σ J_{ab} L_{ab} / (4ε^d)` for the on-site block at site 0, `J` the mass structure.
fn mass_of_block(geom: &Geometry, loc: &[Element]) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for spin in 0..SPINS {
        let p = spin * SPECIES;
        let m = spin * SPECIES + 1;
        acc += loc[p].coeff(1u64 << m) - loc[m].coeff(1u64 << p);
    }
    acc.re / (4.0 * geom.cell())
}

/// Tadpole kernel of `½D²_A F` read off coefficientwise: the linear coefficient of `ψ_x` in output `a`.
pub fn tadpole_matrix(rate: &DMatrix<Complex64>, k: &[Element]) -> Result<DMatrix<Complex64>> {
    let n = k.len();
    let mut m = DMatrix::zeros(n, n);
    for (a, p) in k.iter().enumerate() {
        let lin = p.laplacian(rate)?.homogeneous_part(1);
        for (mask, v) in lin.terms() {
            m[(a, mask.trailing_zeros() as usize)] = v * 0.5;
        }
    }
    Ok(m)
}
