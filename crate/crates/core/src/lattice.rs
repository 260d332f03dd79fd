//! Toroidal lattices, smooth cutoffs, the scale-interpolated covariance and
//! its rate, periodised propagators, masked rates and the quartic potential.

use std::collections::HashMap;
use std::f64::consts::{LN_2, PI};
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use num_complex::Complex64;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_ur};

use crate::algebra::Element;
use crate::error::{usage, Error, Result};
use crate::numerics::{gauss_composite, gauss_legendre, line_fit, LineFit};
use crate::scale::CovarianceSchedule;

/// Gevrey-type transition profiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub delta: f64,
    pub chi_margin: f64,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self {
            delta: 0.5,
            chi_margin: 0.1,
        }
    }
}

impl Cutoffs {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Configuration(format!(
                "Gevrey parameter delta = {delta} outside (0, 1)"
            )));
        }
        Ok(Self {
            delta,
            ..Self::default()
        })
    }

    fn nodes(&self) -> &'static [(f64, f64)] {
        static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
        NODES.get_or_init(|| gauss_legendre(24))
    }

    fn flat(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            (-x.powf(-self.delta / (1.0 - self.delta))).exp()
        }
    }

    /// Smooth decreasing transition: 1 for `r ≤ 0`, 0 for `r ≥ 1`, with `p(r) + p(1−r) = 1`.
    pub fn step_down(&self, r: f64) -> f64 {
        if r <= 0.0 {
            1.0
        } else if r >= 1.0 {
            0.0
        } else {
            let a = self.flat(1.0 - r);
            a / (a + self.flat(r))
        }
    }

    /// `φ_δ`: 1 on `[0, π−1]`, 0 on `[π, ∞)`.
    pub fn phi(&self, x: f64) -> f64 {
        self.step_down(x - (PI - 1.0))
    }

    /// Smooth indicator of `[a, b]` falling to 0 over `[b, b + margin]`.
    pub fn chi(&self, a: f64, b: f64, t: f64) -> f64 {
        if t < a {
            0.0
        } else if t <= b {
            1.0
        } else {
            self.step_down((t - b) / self.chi_margin)
        }
    }

    /// Smooth indicator of `[0, ε⁻¹]` with unit-width transition.
    pub fn sigma(&self, eps: f64, u: f64) -> f64 {
        self.step_down(u - 1.0 / eps)
    }

    /// `min_ε(a) = ∫_0^a σ`, a smoothing of `a ∧ ε⁻¹` that saturates at `ε⁻¹ + ½`.
    pub fn min_eps(&self, eps: f64, a: f64) -> f64 {
        let inv = 1.0 / eps;
        if a <= inv {
            return a;
        }
        let r = a - inv;
        if r >= 1.0 {
            return inv + 0.5;
        }
        inv + gauss_composite(&|u| self.step_down(u), 0.0, r, self.nodes(), 8)
    }
}

/// The torus `(εℤ / Lℤ)^d` with its half-open momentum grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub d: usize,
    pub l: usize,
    pub eps: f64,
    side: usize,
    sites: Vec<Vec<i64>>,
    momenta: Vec<Vec<f64>>,
}

pub const SPINS: usize = 2;
pub const SPECIES: usize = 2;
pub const COMPONENTS: usize = SPINS * SPECIES;

/// Field component `(spin, species)` with species 0 = `+`, 1 = `−`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FieldIndex {
    pub site: usize,
    pub spin: usize,
    pub species: usize,
}

impl FieldIndex {
    pub fn flat(&self) -> usize {
        self.site * COMPONENTS + self.spin * SPECIES + self.species
    }

    pub fn from_flat(i: usize) -> Self {
        Self {
            site: i / COMPONENTS,
            spin: (i % COMPONENTS) / SPECIES,
            species: i % SPECIES,
        }
    }

    pub fn component(&self) -> usize {
        self.spin * SPECIES + self.species
    }
}

impl Geometry {
    pub fn build(d: usize, l: usize, eps: f64) -> Result<Self> {
        if d == 0 || d > 3 {
            return Err(Error::Configuration(format!("dimension {d} outside 1..=3")));
        }
        if l == 0 {
            return Err(Error::Configuration("torus size must be positive".into()));
        }
        let log = -eps.log2();
        if !(eps > 0.0 && eps <= 1.0) || (log - log.round()).abs() > 1e-12 {
            return Err(Error::Configuration(format!(
                "lattice spacing {eps} is not of the form 2^-N"
            )));
        }
        let side = (l as f64 / eps).round() as usize;
        let total = side
            .checked_pow(d as u32)
            .ok_or_else(|| Error::Capacity("site count overflow".into()))?;
        let lo = -((side / 2) as i64);
        let mut sites = Vec::with_capacity(total);
        let mut momenta = Vec::with_capacity(total);
        for idx in 0..total {
            let mut rest = idx;
            let mut coords = vec![0i64; d];
            for c in coords.iter_mut().rev() {
                *c = (rest % side) as i64;
                rest /= side;
            }
            momenta.push(
                coords
                    .iter()
                    .map(|&c| 2.0 * PI * (lo + c) as f64 / l as f64)
                    .collect(),
            );
            sites.push(coords);
        }
        Ok(Self {
            d,
            l,
            eps,
            side,
            sites,
            momenta,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_fields(&self) -> usize {
        COMPONENTS * self.n_sites()
    }

    pub fn coords(&self, i: usize) -> &[i64] {
        &self.sites[i]
    }

    pub fn momenta(&self) -> &[Vec<f64>] {
        &self.momenta
    }

    /// Site volume `ε^d`.
    pub fn cell(&self) -> f64 {
        self.eps.powi(self.d as i32)
    }

    pub fn site_index(&self, coords: &[i64]) -> usize {
        let s = self.side as i64;
        coords
            .iter()
            .fold(0usize, |acc, &c| acc * self.side + c.rem_euclid(s) as usize)
    }

    /// Site at `x_i − x_j`.
    pub fn difference(&self, i: usize, j: usize) -> usize {
        let c: Vec<i64> = self.sites[i]
            .iter()
            .zip(&self.sites[j])
            .map(|(a, b)| a - b)
            .collect();
        self.site_index(&c)
    }

    pub fn shift(&self, i: usize, by: &[i64]) -> usize {
        let c: Vec<i64> = self.sites[i].iter().zip(by).map(|(a, b)| a + b).collect();
        self.site_index(&c)
    }

    /// Site at `−x_i`.
    pub fn reflect(&self, i: usize) -> usize {
        let c: Vec<i64> = self.sites[i].iter().map(|a| -a).collect();
        self.site_index(&c)
    }

    /// Minimal-image displacement of a site from the origin, in lattice units.
    pub fn wrapped(&self, i: usize) -> Vec<i64> {
        let s = self.side as i64;
        self.sites[i]
            .iter()
            .map(|&c| if 2 * c > s { c - s } else { c })
            .collect()
    }

    /// Torus distance between sites.
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.norm(self.difference(i, j))
    }

    pub fn norm(&self, i: usize) -> f64 {
        let s = self.side as i64;
        self.sites[i]
            .iter()
            .map(|&c| {
                let m = c.rem_euclid(s).min(s - c.rem_euclid(s)) as f64 * self.eps;
                m * m
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `L^{-d} Σ_k e^{ik·x} ŝ(k)` at every site, for a real even symbol.
    pub fn inverse_transform(&self, symbol: &[f64]) -> Vec<f64> {
        let norm = (self.l as f64).powi(-(self.d as i32));
        (0..self.n_sites())
            .map(|i| {
                let x: Vec<f64> = self.sites[i].iter().map(|&c| c as f64 * self.eps).collect();
                let mut acc = 0.0;
                for (k, s) in self.momenta.iter().zip(symbol) {
                    if *s == 0.0 {
                        continue;
                    }
                    let phase: f64 = k.iter().zip(&x).map(|(a, b)| a * b).sum();
                    acc += phase.cos() * s;
                }
                acc * norm
            })
            .collect()
    }

    /// Gram matrix from a symmetric site kernel `R(x, y)`: `M[(x,σ,−),(y,σ,+)] = R`, `M[(x,σ,+),(y,σ,−)] = −R`.
    pub fn gram_from_sites(&self, r: &dyn Fn(usize, usize) -> f64) -> DMatrix<Complex64> {
        let n = self.n_fields();
        let mut m = DMatrix::zeros(n, n);
        for x in 0..self.n_sites() {
            for y in 0..self.n_sites() {
                let v = r(x, y);
                if v == 0.0 {
                    continue;
                }
                for spin in 0..SPINS {
                    let xm = FieldIndex {
                        site: x,
                        spin,
                        species: 1,
                    }
                    .flat();
                    let yp = FieldIndex {
                        site: y,
                        spin,
                        species: 0,
                    }
                    .flat();
                    let xp = FieldIndex {
                        site: x,
                        spin,
                        species: 0,
                    }
                    .flat();
                    let ym = FieldIndex {
                        site: y,
                        spin,
                        species: 1,
                    }
                    .flat();
                    m[(xm, yp)] = Complex64::new(v, 0.0);
                    m[(xp, ym)] = Complex64::new(-v, 0.0);
                }
            }
        }
        m
    }

    /// Gram matrix of a translation-invariant kernel given on displacements.
    pub fn gram_from_kernel(&self, kernel: &[f64]) -> DMatrix<Complex64> {
        self.gram_from_sites(&|x, y| kernel[self.difference(x, y)])
    }
}

/// 4×4 block `(Θ K)_{μμ'}` of a scalar kernel value: nonzero only between opposite species of equal spin.
pub fn theta_block(v: f64) -> [[f64; COMPONENTS]; COMPONENTS] {
    let mut b = [[0.0; COMPONENTS]; COMPONENTS];
    for spin in 0..SPINS {
        b[spin * SPECIES + 1][spin * SPECIES] = v;
        b[spin * SPECIES][spin * SPECIES + 1] = -v;
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Cached {
    Kernel,
    Rate,
    SqrtRate,
}

/// Scale-interpolated covariance `G_t` of the lattice model.
pub struct LatticeSchedule {
    geom: Geometry,
    cut: Cutoffs,
    gamma: f64,
    a: f64,
    t_max: f64,
    cache: RwLock<HashMap<(u64, Cached), Arc<Vec<f64>>>>,
}

impl std::fmt::Debug for LatticeSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatticeSchedule")
            .field("geom", &self.geom)
            .field("gamma", &self.gamma)
            .field("t_max", &self.t_max)
            .finish()
    }
}

pub fn default_t_max(eps: f64) -> f64 {
    -eps.log2() + 1.0
}

impl LatticeSchedule {
    pub fn new(geom: Geometry, cut: Cutoffs, gamma: f64) -> Result<Self> {
        let t_max = default_t_max(geom.eps);
        Self::with_t_max(geom, cut, gamma, t_max)
    }

    pub fn with_t_max(geom: Geometry, cut: Cutoffs, gamma: f64, t_max: f64) -> Result<Self> {
        let a = geom.d as f64 / 2.0 - gamma;
        if a <= 0.0 {
            return Err(Error::Configuration(format!(
                "gamma = {gamma} must stay below d/2 = {}",
                geom.d as f64 / 2.0
            )));
        }
        if gamma < 0.0 {
            return Err(Error::Configuration(format!(
                "gamma = {gamma} must be nonnegative"
            )));
        }
        let last_active = (1.0 / geom.eps + 1.0).log2().max(1.0);
        if t_max + 1e-12 < last_active {
            return Err(Error::Configuration(format!(
                "t_max = {t_max} below the end of the rate support {last_active}"
            )));
        }
        Ok(Self {
            geom,
            cut,
            gamma,
            a,
            t_max,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn cutoffs(&self) -> &Cutoffs {
        &self.cut
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Lower limit `1 / min_ε(2^t)²` of the heat-kernel integral.
    pub fn tau(&self, t: f64) -> f64 {
        let m = self.cut.min_eps(self.geom.eps, 2f64.powf(t));
        1.0 / (m * m)
    }

    pub fn tau_prime(&self, t: f64) -> f64 {
        let x = 2f64.powf(t);
        let m = self.cut.min_eps(self.geom.eps, x);
        -2.0 / (m * m * m) * self.cut.sigma(self.geom.eps, x) * x * LN_2
    }

    /// Scalar symbol `ĝ_t(k)` at `|k|² = k2`; the species sign is applied separately.
    pub fn symbol(&self, t: f64, k2: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let m = k2 + 1.0;
        let cut = self.cut.phi(self.geom.eps * k2.sqrt());
        if cut == 0.0 {
            return 0.0;
        }
        let tau = self.tau(t.max(1.0));
        let base = cut * m.powf(-self.a) * gamma_ur(self.a, tau * m);
        if t < 1.0 {
            t * base
        } else {
            base
        }
    }

    /// Scalar symbol of `Ġ_t`.
    pub fn rate_symbol(&self, t: f64, k2: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        if t < 1.0 {
            return self.symbol(1.0, k2);
        }
        let tp = self.tau_prime(t);
        if tp == 0.0 {
            return 0.0;
        }
        let m = k2 + 1.0;
        let tau = self.tau(t);
        let cut = self.cut.phi(self.geom.eps * k2.sqrt());
        -cut * tp * tau.powf(self.a - 1.0) * (-tau * m).exp() / gamma(self.a)
    }

    pub fn symbols(&self, t: f64) -> Vec<f64> {
        self.geom
            .momenta
            .iter()
            .map(|k| self.symbol(t, k.iter().map(|x| x * x).sum()))
            .collect()
    }

    pub fn rate_symbols(&self, t: f64) -> Vec<f64> {
        self.geom
            .momenta
            .iter()
            .map(|k| self.rate_symbol(t, k.iter().map(|x| x * x).sum()))
            .collect()
    }

    pub fn sqrt_rate_symbols(&self, t: f64) -> Result<Vec<f64>> {
        self.rate_symbols(t)
            .into_iter()
            .map(|r| {
                if r < -1e-12 {
                    Err(Error::Internal(format!(
                        "negative rate symbol {r:e} at t = {t}"
                    )))
                } else {
                    Ok(r.max(0.0).sqrt())
                }
            })
            .collect()
    }

    fn cached(
        &self,
        t: f64,
        what: Cached,
        build: impl FnOnce() -> Result<Vec<f64>>,
    ) -> Result<Arc<Vec<f64>>> {
        let key = (t.to_bits(), what);
        if let Some(v) = self.cache.read().get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(build()?);
        self.cache.write().entry(key).or_insert_with(|| v.clone());
        Ok(v)
    }

    /// Position kernel `G_t(x; 0)` indexed by site.
    pub fn kernel(&self, t: f64) -> Arc<Vec<f64>> {
        self.cached(t, Cached::Kernel, || {
            Ok(self.geom.inverse_transform(&self.symbols(t)))
        })
        .expect("kernel build is infallible")
    }

    /// Position kernel of `Ġ_t`.
    pub fn rate_kernel(&self, t: f64) -> Arc<Vec<f64>> {
        self.cached(t, Cached::Rate, || {
            Ok(self.geom.inverse_transform(&self.rate_symbols(t)))
        })
        .expect("kernel build is infallible")
    }

    /// Position kernel of `𝔠_t`.
    pub fn sqrt_rate_kernel(&self, t: f64) -> Result<Arc<Vec<f64>>> {
        self.cached(t, Cached::SqrtRate, || {
            Ok(self.geom.inverse_transform(&self.sqrt_rate_symbols(t)?))
        })
    }

    /// `𝔤_t(x; 0)` as a 4×4 block per site.
    pub fn periodised_propagator(&self, t: f64) -> Vec<[[f64; COMPONENTS]; COMPONENTS]> {
        self.kernel(t).iter().map(|&v| theta_block(v)).collect()
    }

    pub fn periodised_rate(&self, t: f64) -> Vec<[[f64; COMPONENTS]; COMPONENTS]> {
        self.rate_kernel(t)
            .iter()
            .map(|&v| theta_block(v))
            .collect()
    }

    /// Gram of `𝔠_t 1_{D_i} 1_{D_j} 𝔠_t U`.
    pub fn masked_rate(
        &self,
        t: f64,
        mask_i: &[bool],
        mask_j: &[bool],
    ) -> Result<DMatrix<Complex64>> {
        let n = self.geom.n_sites();
        if mask_i.len() != n || mask_j.len() != n {
            return usage(format!("masks must have one entry per site ({n})"));
        }
        let c = self.sqrt_rate_kernel(t)?;
        let cell = self.geom.cell();
        let both: Vec<usize> = (0..n).filter(|&z| mask_i[z] && mask_j[z]).collect();
        let r = |x: usize, y: usize| {
            both.iter()
                .map(|&z| c[self.geom.difference(x, z)] * c[self.geom.difference(z, y)])
                .sum::<f64>()
                * cell
        };
        Ok(self.geom.gram_from_sites(&r))
    }
}

impl CovarianceSchedule for LatticeSchedule {
    fn dim(&self) -> usize {
        self.geom.n_fields()
    }
    fn t_max(&self) -> f64 {
        self.t_max
    }
    fn gram(&self, t: f64) -> DMatrix<Complex64> {
        self.geom.gram_from_kernel(&self.kernel(t))
    }
    fn rate_gram(&self, t: f64) -> DMatrix<Complex64> {
        self.geom.gram_from_kernel(&self.rate_kernel(t))
    }
    fn breakpoints(&self) -> Vec<f64> {
        vec![1.0]
    }
}

/// `V = ε^d Σ_x [λ/4 ((ψ_x)²)² + μ (ψ_x)²]` with `(ψ_x)² = Σ_σ ψ⁺_{x,σ} ψ⁻_{x,σ}`.
pub fn interaction_potential(
    geom: &Geometry,
    lambda: f64,
    mu: f64,
    fields: &[Element],
) -> Result<Element> {
    if fields.len() != geom.n_fields() {
        return usage(format!(
            "{} fields for {} field indices",
            fields.len(),
            geom.n_fields()
        ));
    }
    let alg = fields[0].algebra();
    let mut v = Element::zero(alg);
    for x in 0..geom.n_sites() {
        let sq = site_square(fields, x);
        let quartic = &sq * &sq;
        let local = &quartic.scale(&Complex64::new(lambda / 4.0, 0.0))
            + &sq.scale(&Complex64::new(mu, 0.0));
        v = &v + &local;
    }
    Ok(v.scale(&Complex64::new(geom.cell(), 0.0)))
}

/// `(ψ_x)² = Σ_σ ψ⁺_{x,σ} ψ⁻_{x,σ}`.
pub fn site_square(fields: &[Element], x: usize) -> Element {
    let mut sq = Element::zero(fields[0].algebra());
    for spin in 0..SPINS {
        let p = &fields[FieldIndex {
            site: x,
            spin,
            species: 0,
        }
        .flat()];
        let m = &fields[FieldIndex {
            site: x,
            spin,
            species: 1,
        }
        .flat()];
        sq = &sq + &(p * m);
    }
    sq
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayFit {
    /// Slope of `log ‖𝔤_s‖_∞` against `s·ln 2`.
    pub scaling_slope: f64,
    pub scaling_fit: LineFit,
    pub stretched_decay_ok: bool,
    /// Per-scale slope of `log|𝔤_s(x)|` against `(2^s|x|)^δ` beyond the core.
    pub stretched_slopes: Vec<f64>,
}

/// Values below this fraction of the sup are treated as roundoff in the decay check.
pub const DECAY_NOISE_FLOOR: f64 = 1e-11;

/// Scaling and spatial-decay diagnostics from `(s, [(|x|, |𝔤_s(x)|)])` samples.
pub fn decay_exponent_fit(
    samples: &[(f64, Vec<(f64, f64)>)],
    delta: f64,
    core: f64,
) -> Result<DecayFit> {
    if samples.len() < 3 || samples.iter().any(|(_, pts)| pts.len() < 4) {
        return usage("decay fit needs at least 3 scales with 4 separations each");
    }
    let xs: Vec<f64> = samples.iter().map(|(s, _)| s * LN_2).collect();
    let ys: Vec<f64> = samples
        .iter()
        .map(|(_, pts)| pts.iter().map(|p| p.1.abs()).fold(0.0, f64::max).ln())
        .collect();
    let scaling_fit = line_fit(&xs, &ys);
    let mut ok = true;
    let mut slopes = Vec::new();
    for (s, pts) in samples {
        let sup = pts.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        let mut tail: Vec<(f64, f64)> = pts
            .iter()
            .filter(|p| 2f64.powf(*s) * p.0 >= core && p.1.abs() > DECAY_NOISE_FLOOR * sup)
            .copied()
            .collect();
        tail.sort_by(|a, b| a.0.total_cmp(&b.0));
        if tail.len() < 2 {
            continue;
        }
        ok &= tail.windows(2).all(|w| w[1].1.abs() <= w[0].1.abs());
        let u: Vec<f64> = tail
            .iter()
            .map(|p| (2f64.powf(*s) * p.0).powf(delta))
            .collect();
        let v: Vec<f64> = tail.iter().map(|p| p.1.abs().ln()).collect();
        let fit = line_fit(&u, &v);
        ok &= fit.slope < 0.0;
        slopes.push(fit.slope);
    }
    Ok(DecayFit {
        scaling_slope: scaling_fit.slope,
        scaling_fit,
        stretched_decay_ok: ok,
        stretched_slopes: slopes,
    })
}

/// Weighted `L^p` norm `(ε^d Σ_x |K(x)|^p e^{p c (2^s|x|)^δ})^{1/p}`; `p = ∞` gives the weighted sup.
pub fn weighted_lp_norm(
    geom: &Geometry,
    kernel: &[f64],
    s: f64,
    delta: f64,
    c: f64,
    p: f64,
) -> f64 {
    let w = |i: usize| (c * (2f64.powf(s) * geom.norm(i)).powf(delta)).exp();
    if p.is_infinite() {
        return (0..kernel.len())
            .map(|i| kernel[i].abs() * w(i))
            .fold(0.0, f64::max);
    }
    let sum: f64 = (0..kernel.len())
        .map(|i| (kernel[i].abs() * w(i)).powf(p))
        .sum();
    (geom.cell() * sum).powf(1.0 / p)
}

/// Largest `|ġ^ε_s(x) − ġ^{ε/2}_s(x)|` over the coarse sites, with the fitted power of `ε` per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsDifference {
    /// `(ε, s, difference)`.
    pub samples: Vec<(f64, f64, f64)>,
    /// Slope of `ln difference` against `ln ε` per scale, over samples above the roundoff floor.
    pub exponents: Vec<(f64, f64)>,
    /// Mean of the per-scale exponents; NaN when no scale has two usable samples.
    pub exponent: f64,
}

/// Differences below this are indistinguishable from roundoff in the kernel transform.
pub const EPS_DIFFERENCE_FLOOR: f64 = 1e-10;

pub fn eps_difference_fit(
    d: usize,
    l: usize,
    gamma: f64,
    eps: &[f64],
    scales: &[f64],
) -> Result<EpsDifference> {
    if eps.len() < 2 || scales.is_empty() {
        return usage("ε-difference fit needs at least two ε values and one scale");
    }
    let mut samples = Vec::new();
    let mut exponents = Vec::new();
    for &s in scales {
        let mut pts = Vec::new();
        for &e in eps {
            let coarse =
                LatticeSchedule::new(Geometry::build(d, l, e)?, Cutoffs::default(), gamma)?;
            let fine =
                LatticeSchedule::new(Geometry::build(d, l, e / 2.0)?, Cutoffs::default(), gamma)?;
            let (kc, kf) = (coarse.rate_kernel(s), fine.rate_kernel(s));
            let gc = coarse.geometry();
            let gf = fine.geometry();
            let diff = (0..gc.n_sites())
                .map(|i| {
                    let twice: Vec<i64> = gc.coords(i).iter().map(|c| 2 * c).collect();
                    (kc[i] - kf[gf.site_index(&twice)]).abs()
                })
                .fold(0.0, f64::max);
            samples.push((e, s, diff));
            if diff > EPS_DIFFERENCE_FLOOR {
                pts.push((e.ln(), diff.ln()));
            }
        }
        if pts.len() >= 2 {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            exponents.push((s, line_fit(&x, &y).slope));
        }
    }
    let exponent = if exponents.is_empty() {
        f64::NAN
    } else {
        exponents.iter().map(|e| e.1).sum::<f64>() / exponents.len() as f64
    };
    Ok(EpsDifference {
        samples,
        exponents,
        exponent,
    })
}

/// Scaling and decay diagnostics of the rate kernel over a range of scales.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelReport {
    pub decay: DecayFit,
    /// `ln ‖ġ_s‖_∞` against `s`.
    pub sup_fit: LineFit,
    /// `ln ‖ġ_s‖_{L¹}` against `s`, weighted with `e^{c(2^s|x|)^δ}`.
    pub l1_fit: LineFit,
    /// `(s, ‖ġ_s‖_∞, ‖ġ_s‖_{L¹})`.
    pub norms: Vec<(f64, f64, f64)>,
}

pub fn kernel_report(
    sched: &LatticeSchedule,
    scales: &[f64],
    c: f64,
    core: f64,
) -> Result<KernelReport> {
    let geom = sched.geometry();
    let delta = sched.cutoffs().delta;
    let half: Vec<usize> = (0..geom.n_sites())
        .filter(|&i| {
            geom.wrapped(i).iter().all(|&x| x >= 0)
                && geom.wrapped(i).iter().skip(1).all(|&x| x == 0)
        })
        .collect();
    let mut samples = Vec::new();
    let mut norms = Vec::new();
    for &s in scales {
        let k = sched.rate_kernel(s);
        samples.push((
            s,
            half.iter()
                .map(|&i| (geom.norm(i), k[i]))
                .collect::<Vec<_>>(),
        ));
        norms.push((
            s,
            weighted_lp_norm(geom, &k, s, delta, c, f64::INFINITY),
            weighted_lp_norm(geom, &k, s, delta, c, 1.0),
        ));
    }
    let decay = decay_exponent_fit(&samples, delta, core)?;
    let xs: Vec<f64> = norms.iter().map(|n| n.0).collect();
    let sup_fit = line_fit(&xs, &norms.iter().map(|n| n.1.ln()).collect::<Vec<_>>());
    let l1_fit = line_fit(&xs, &norms.iter().map(|n| n.2.ln()).collect::<Vec<_>>());
    Ok(KernelReport {
        decay,
        sup_fit,
        l1_fit,
        norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::Algebra;
    use crate::numerics::adaptive_simpson;
    use crate::scale::compatibility_defect;

    fn schedule(d: usize, l: usize, eps: f64, gamma: f64) -> LatticeSchedule {
        LatticeSchedule::new(
            Geometry::build(d, l, eps).unwrap(),
            Cutoffs::default(),
            gamma,
        )
        .unwrap()
    }

    #[test]
    fn geometry_counts() {
        let g = Geometry::build(1, 4, 1.0).unwrap();
        assert_eq!((g.n_sites(), g.momenta().len()), (4, 4));
        assert_eq!(Geometry::build(2, 2, 0.5).unwrap().n_sites(), 16);
        assert_eq!(Geometry::build(1, 1, 1.0).unwrap().n_sites(), 1);
        assert!(matches!(
            Geometry::build(1, 4, 0.3),
            Err(Error::Configuration(_))
        ));
        assert!(matches!(
            Geometry::build(1, 4, 2.0),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn identity_symbol_is_scaled_kronecker() {
        for (d, l, eps) in [(1, 4, 0.5), (2, 2, 0.5), (1, 3, 1.0), (3, 2, 1.0)] {
            let g = Geometry::build(d, l, eps).unwrap();
            let k = g.inverse_transform(&vec![1.0; g.n_sites()]);
            for (i, v) in k.iter().enumerate() {
                let expect = if i == 0 { eps.powi(-(d as i32)) } else { 0.0 };
                assert!((v - expect).abs() < 1e-9, "{d} {l} {eps} site {i}");
            }
        }
    }

    #[test]
    fn cutoff_shapes() {
        let c = Cutoffs::default();
        assert_eq!(c.phi(0.0), 1.0);
        assert_eq!(c.phi(PI - 1.0), 1.0);
        assert_eq!(c.phi(PI), 0.0);
        assert_eq!(c.phi(4.0), 0.0);
        let grid: Vec<f64> = (0..=200).map(|i| PI - 1.0 + i as f64 / 200.0).collect();
        assert!(grid.windows(2).all(|w| c.phi(w[1]) <= c.phi(w[0])));
        for r in [0.1, 0.3, 0.5, 0.77] {
            assert!((c.step_down(r) + c.step_down(1.0 - r) - 1.0).abs() < 1e-15);
        }
        let eps = 0.25;
        assert_eq!(c.min_eps(eps, 3.0), 3.0);
        assert_eq!(c.min_eps(eps, 4.0), 4.0);
        assert_eq!(c.min_eps(eps, 5.0), 4.5);
        assert_eq!(c.min_eps(eps, 50.0), 4.5);
        let grid: Vec<f64> = (0..=300).map(|i| 3.5 + i as f64 / 200.0).collect();
        assert!(grid
            .windows(2)
            .all(|w| c.min_eps(eps, w[1]) >= c.min_eps(eps, w[0])));
        assert_eq!(c.chi(1.0, 3.0, 0.99), 0.0);
        assert_eq!(c.chi(1.0, 3.0, 2.0), 1.0);
        assert_eq!(c.chi(1.0, 3.0, 3.2), 0.0);
        assert!(Cutoffs::new(1.0).is_err());
    }

    #[test]
    fn incomplete_gamma_matches_quadrature() {
        // Q(a, x) Γ(a) = ∫_x^∞ ζ^{a-1} e^{-ζ} dζ, substituted ζ = x + u/(1-u)
        for (a, x) in [(0.3, 0.25), (0.3, 1.7), (0.5, 0.05), (1.3, 2.0), (0.8, 9.0)] {
            let f = |u: f64| {
                if u >= 1.0 {
                    return 0.0;
                }
                let z = x + u / (1.0 - u);
                z.powf(a - 1.0) * (-z).exp() / ((1.0 - u) * (1.0 - u))
            };
            let quad = adaptive_simpson(&f, 0.0, 1.0, 1e-13);
            let closed = gamma_ur(a, x) * gamma(a);
            assert!((quad - closed).abs() / closed < 1e-10, "a={a} x={x}");
        }
    }

    #[test]
    fn kernel_basics() {
        let s = schedule(1, 4, 0.5, 0.2);
        assert!(s.kernel(0.0).iter().all(|&v| v == 0.0));
        let g = s.gram(1.7);
        assert!((&g + g.transpose()).iter().all(|z| z.norm() < 1e-12));
        assert!(matches!(
            LatticeSchedule::new(Geometry::build(1, 2, 1.0).unwrap(), Cutoffs::default(), 0.5),
            Err(Error::Configuration(_))
        ));
        // single-site torus: one momentum, kernel = symbol / L
        let one = schedule(1, 1, 1.0, 0.2);
        assert!((one.kernel(0.5)[0] - one.symbol(0.5, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn symbol_approaches_fractional_resolvent() {
        // 1 − Q(a, x) ≤ x^a / Γ(a + 1)
        let mut prev = f64::INFINITY;
        for n in [4, 10, 20] {
            let eps = 2f64.powi(-n);
            let s = schedule(1, 1, eps, 0.2);
            let mut worst: f64 = 0.0;
            for k in [0.0f64, 1.0, 3.0] {
                let m = k * k + 1.0;
                let exact = m.powf(0.2 - 0.5);
                let got = s.symbol(s.t_max(), k * k);
                let bound = (s.tau(s.t_max()) * m).powf(0.3) / gamma(1.3);
                assert!(
                    got <= exact && exact - got <= bound * exact,
                    "eps={eps} k={k}"
                );
                worst = worst.max((exact - got) / exact);
            }
            assert!(worst < prev);
            prev = worst;
        }
    }

    #[test]
    fn rate_matches_finite_difference() {
        let s = schedule(1, 4, 0.125, 0.2);
        for t in [0.5, 1.5, 2.5, 3.05] {
            for k2 in [0.0, 2.0, 40.0] {
                let h = 1e-5;
                let fd = (s.symbol(t + h, k2) - s.symbol(t - h, k2)) / (2.0 * h);
                let r = s.rate_symbol(t, k2);
                assert!(
                    (fd - r).abs() <= 1e-6 * r.abs().max(1e-12),
                    "t={t} k2={k2} fd={fd} r={r}"
                );
            }
        }
        assert!(s.rate_symbols(s.t_max() + 0.1).iter().all(|&v| v == 0.0));
        assert!(compatibility_defect(&s, 0.0, s.t_max(), 1e-9).unwrap() < 1e-9);
    }

    #[test]
    fn rate_is_positive_and_commutes() {
        let s = schedule(2, 2, 0.5, 0.3);
        for t in [0.3, 1.2, 1.5] {
            assert!(s.rate_symbols(t).iter().all(|&v| v >= 0.0));
            let c = s.sqrt_rate_kernel(t).unwrap();
            let cg = s.geometry().gram_from_kernel(&c);
            // 𝔠 acts identically on both species and both spins, so it commutes with U and Θ
            let n = s.dim();
            let mut u = DMatrix::<Complex64>::zeros(n, n);
            let mut theta = DMatrix::<Complex64>::zeros(n, n);
            for i in 0..n {
                let f = FieldIndex::from_flat(i);
                u[(i, i)] = Complex64::new(if f.species == 0 { 1.0 } else { -1.0 }, 0.0);
                theta[(
                    i,
                    FieldIndex {
                        species: 1 - f.species,
                        ..f
                    }
                    .flat(),
                )] = Complex64::new(1.0, 0.0);
            }
            let c_op = DMatrix::from_fn(n, n, |i, j| {
                let (a, b) = (FieldIndex::from_flat(i), FieldIndex::from_flat(j));
                if a.component() == b.component() {
                    Complex64::new(c[s.geometry().difference(a.site, b.site)], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            });
            assert!((&c_op * &u - &u * &c_op).iter().all(|z| z.norm() < 1e-12));
            assert!((&c_op * &theta - &theta * &c_op)
                .iter()
                .all(|z| z.norm() < 1e-12));
            // Θ 𝔠² U reproduces the rate Gram
            let rebuilt = &theta * (&c_op * &c_op).scale(s.geometry().cell()) * &u;
            let rate = s.rate_gram(t);
            assert!((rebuilt - &rate).iter().all(|z| z.norm() < 1e-10));
            assert!(cg.iter().all(|z| z.re.is_finite()));
        }
    }

    #[test]
    fn periodised_propagator_properties() {
        let s = schedule(1, 4, 0.5, 0.2);
        let g = s.geometry().clone();
        let k = s.kernel(1.3);
        for x in 0..g.n_sites() {
            for y in 0..g.n_sites() {
                let shifted = g.difference(g.shift(x, &[8]), y);
                assert_eq!(k[g.difference(x, y)], k[shifted]);
                assert!((k[g.difference(x, y)] - k[g.difference(y, x)]).abs() < 1e-14);
            }
        }
        let blocks = s.periodised_propagator(1.3);
        let gram = s.gram(1.3);
        for x in 0..g.n_sites() {
            for mu in 0..COMPONENTS {
                for nu in 0..COMPONENTS {
                    let m = gram[(x * COMPONENTS + mu, nu)].re;
                    assert_eq!(blocks[x][mu][nu], m);
                }
            }
        }
    }

    #[test]
    fn masked_rates() {
        let s = schedule(1, 4, 1.0, 0.2);
        let n = s.geometry().n_sites();
        let full = vec![true; n];
        let masked = s.masked_rate(0.5, &full, &full).unwrap();
        assert!((masked - s.rate_gram(0.5)).iter().all(|z| z.norm() < 1e-12));
        let left: Vec<bool> = (0..n).map(|i| i < 2).collect();
        let right: Vec<bool> = (0..n).map(|i| i >= 2).collect();
        assert!(s
            .masked_rate(0.5, &left, &right)
            .unwrap()
            .iter()
            .all(|z| z.norm() == 0.0));
        let part =
            s.masked_rate(0.5, &left, &left).unwrap() + s.masked_rate(0.5, &right, &right).unwrap();
        assert!((part - s.rate_gram(0.5)).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn single_site_quartic() {
        let g = Geometry::build(1, 1, 1.0).unwrap();
        let alg = Algebra::new(4).unwrap();
        let fields: Vec<Element> = (0..4).map(|j| alg.generator(j)).collect();
        assert!(interaction_potential(&g, 0.0, 0.0, &fields)
            .unwrap()
            .is_zero());
        let sq = site_square(&fields, 0);
        let four = &sq * &sq;
        let expect = Element::monomial(alg, &[0, 1, 2, 3]).scale(&Complex64::new(2.0, 0.0));
        assert_eq!(four, expect);
        let v = interaction_potential(&g, 0.05, 0.1, &fields).unwrap();
        assert!(v.is_even());
        assert!((0..4).all(|j| v.derivative(j).is_odd()));
    }

    #[test]
    fn kernel_decay_diagnostics() {
        let s = schedule(1, 16, 1.0 / 64.0, 0.25);
        let g = s.geometry();
        let half = g.n_sites() / 2;
        let samples: Vec<(f64, Vec<(f64, f64)>)> = (1..=4)
            .map(|sc| {
                let t = sc as f64;
                let k = s.rate_kernel(t);
                (
                    t,
                    (0..=half).step_by(4).map(|i| (g.norm(i), k[i])).collect(),
                )
            })
            .collect();
        let fit = decay_exponent_fit(&samples, 0.5, 1.0).unwrap();
        assert!(fit.stretched_decay_ok, "{fit:?}");
        assert!(fit.scaling_slope > 0.0);
        assert!(decay_exponent_fit(&samples[..2], 0.5, 1.0).is_err());
    }

    #[test]
    fn kernel_report_and_eps_differences() {
        let s = schedule(1, 4, 1.0 / 64.0, 0.2);
        let r = kernel_report(&s, &[1.0, 2.0, 3.0, 4.0, 5.0], 0.0, 1.0).unwrap();
        assert!(r.decay.stretched_decay_ok);
        assert!(r.sup_fit.slope > 0.0 && r.l1_fit.slope < 0.0);
        // the mass term e^{-2^{-2s}} steepens both slopes by the same amount
        let shift = |fit: &LineFit, target: f64| fit.slope - target;
        let a = shift(&r.sup_fit, 0.4 * LN_2);
        let b = shift(&r.l1_fit, -0.6 * LN_2);
        assert!(a > 0.0 && (a - b).abs() < 0.01, "{a} {b}");
        let e = eps_difference_fit(1, 4, 0.2, &[0.25, 0.125, 0.0625], &[1.0, 3.0]).unwrap();
        assert_eq!(e.samples.len(), 6);
        assert!(e.samples.iter().all(|x| x.2 >= 0.0));
        // well inside the cutoff the two lattices produce the same kernel
        assert!(e
            .samples
            .iter()
            .filter(|x| x.0 * 2f64.powf(x.1) <= 0.25)
            .all(|x| x.2 < EPS_DIFFERENCE_FLOOR));
        assert!(eps_difference_fit(1, 4, 0.2, &[0.25], &[1.0]).is_err());
    }
}
