//! Grassmann SDE and FBSDE solvers on a time grid.
//!
//! Two engines share the drift families. The path engine realises every
//! noise increment by fresh generators and runs Picard iteration on the
//! discretised integral equation. The transfer engine never builds the
//! path: it propagates functions of the current state backwards with
//! `Φ_k = exp(½D²_{B_k}) Φ_{k+1} ∘ (ψ + h A_k G_k(ψ))`, which keeps the
//! algebra at the size of the field.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::algebra::{bits, Algebra, Element};
use crate::error::{usage, Error, Result};
use crate::flow::{KernelFamily, NormParams};
use crate::gaussian::{gaussian_expectation, GibbsState};
use crate::lattice::{interaction_potential, FieldIndex, Geometry, LatticeSchedule};
use crate::numerics::{gauss_legendre, line_fit, LineFit};
use crate::scale::{
    apply_rate, conditional_expectation, contraction, effective_force, effective_potential,
    gradient, CovarianceSchedule,
};

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn add(a: &[Element], b: &[Element]) -> Vec<Element> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn scaled(a: &[Element], s: f64) -> Vec<Element> {
    a.iter().map(|x| x.scale(&c(s))).collect()
}

fn max_dist(a: &[Element], b: &[Element]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dist(y)).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- configuration

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 {
            return usage("a time grid starts at 0 and has at least one step");
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return usage("time grid nodes must increase strictly");
        }
        Ok(Self { nodes })
    }

    pub fn uniform(t_max: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(t_max > 0.0) {
            return usage("uniform grid needs t_max > 0 and at least one step");
        }
        Self::new(
            (0..=steps)
                .map(|k| {
                    if k == steps {
                        t_max
                    } else {
                        t_max * k as f64 / steps as f64
                    }
                })
                .collect(),
        )
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn t_max(&self) -> f64 {
        self.nodes[self.steps()]
    }

    pub fn h(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    pub fn refined(&self) -> Self {
        let mut nodes = Vec::with_capacity(2 * self.nodes.len());
        for w in self.nodes.windows(2) {
            nodes.push(w[0]);
            nodes.push(0.5 * (w[0] + w[1]));
        }
        nodes.push(self.t_max());
        Self { nodes }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Midpoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    /// `D` of the pair norm.
    pub d_norm: f64,
    pub a: f64,
    pub b: f64,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    pub integrator: Integrator,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            d_norm: 4.0,
            a: 0.0,
            b: 0.0,
            picard_tol: 1e-13,
            picard_max_iters: 200,
            integrator: Integrator::Euler,
        }
    }
}

impl SolverConfig {
    /// `a = γ + θ`, `b = d − 2γ − α + β`, `θ = (β − γ)/2`.
    pub fn for_exponents(gamma: f64, d: usize, params: &NormParams) -> Self {
        let theta = (params.beta - gamma) / 2.0;
        Self {
            a: gamma + theta,
            b: d as f64 - 2.0 * gamma - params.alpha + params.beta,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.picard_tol > 0.0) || self.picard_max_iters == 0 {
            return usage("picard_tol must be positive and picard_max_iters nonzero");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- drift families

/// A force `F_t` together with its flow defect `H_t = ∂F + ½D²_{Ġ}F + ⟨ĠF, DF⟩`.
pub trait DriftFamily {
    fn algebra(&self) -> Algebra;
    fn force(&self, t: f64) -> Result<Vec<Element>>;
    fn source(&self, t: f64) -> Result<Vec<Element>>;
    /// Potential whose gradient is the force at `t_max`.
    fn terminal_potential(&self) -> Result<Element>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilyKind {
    Exact,
    WickOrdered,
    FlowTruncated,
}

/// `F_t = DV_t` with `V_t` the effective potential.
pub struct ExactFamily<'a> {
    sched: &'a dyn CovarianceSchedule,
    v_final: Element,
}

impl<'a> ExactFamily<'a> {
    pub fn new(sched: &'a dyn CovarianceSchedule, v_final: Element) -> Self {
        Self { sched, v_final }
    }
}

impl DriftFamily for ExactFamily<'_> {
    fn algebra(&self) -> Algebra {
        self.v_final.algebra()
    }

    fn force(&self, t: f64) -> Result<Vec<Element>> {
        effective_force(self.sched, &self.v_final, t)
    }

    /// Evaluated with the analytic scale derivative `∂U = −½D²_{Ġ}U` of `U = e^{V_t}`.
    fn source(&self, t: f64) -> Result<Vec<Element>> {
        let rate = self.sched.rate(t)?;
        let u = conditional_expectation(self.sched, &self.v_final.exp()?, t, self.sched.t_max())?;
        let du = u.laplacian(&rate)?.scale(&c(-0.5));
        let u_inv = (-&u.ln()?).exp()?;
        let dv = &du * &u_inv;
        let f = gradient(&u.ln()?);
        let df = gradient(&dv);
        let quad = contraction(rate.gram(), &f, &f)?;
        let mut out = Vec::with_capacity(f.len());
        for j in 0..f.len() {
            let lap = f[j].laplacian(&rate)?.scale(&c(0.5));
            out.push(&(&df[j] + &lap) + &quad[j]);
        }
        Ok(out)
    }

    fn terminal_potential(&self) -> Result<Element> {
        Ok(self.v_final.clone())
    }
}

/// `F_t = exp(½D²_{G_{t,T}}) DV_T`, whose defect is the full quadratic term.
pub struct WickFamily<'a> {
    sched: &'a dyn CovarianceSchedule,
    v_final: Element,
    grad: Vec<Element>,
}

impl<'a> WickFamily<'a> {
    pub fn new(sched: &'a dyn CovarianceSchedule, v_final: Element) -> Self {
        let grad = gradient(&v_final);
        Self {
            sched,
            v_final,
            grad,
        }
    }
}

impl DriftFamily for WickFamily<'_> {
    fn algebra(&self) -> Algebra {
        self.v_final.algebra()
    }

    fn force(&self, t: f64) -> Result<Vec<Element>> {
        self.grad
            .iter()
            .map(|g| conditional_expectation(self.sched, g, t, self.sched.t_max()))
            .collect()
    }

    fn source(&self, t: f64) -> Result<Vec<Element>> {
        let f = self.force(t)?;
        contraction(&self.sched.rate_gram(t), &f, &f)
    }

    fn terminal_potential(&self) -> Result<Element> {
        Ok(self.v_final.clone())
    }
}

/// Truncated flow levels with the remainder source `H_{>n}`.
pub struct FlowFamily<'a> {
    sched: &'a dyn CovarianceSchedule,
    family: &'a KernelFamily,
}

impl<'a> FlowFamily<'a> {
    pub fn new(sched: &'a dyn CovarianceSchedule, family: &'a KernelFamily) -> Result<Self> {
        if (sched.t_max() - family.t_max()).abs() > 1e-12
            || sched.dim() != family.geometry().n_fields()
        {
            return usage("flow family and schedule disagree on t_max or field count");
        }
        Ok(Self { sched, family })
    }
}

impl DriftFamily for FlowFamily<'_> {
    fn algebra(&self) -> Algebra {
        self.family.algebra()
    }

    fn force(&self, t: f64) -> Result<Vec<Element>> {
        self.family.force_at(t)
    }

    fn source(&self, t: f64) -> Result<Vec<Element>> {
        self.family.remainder_source_at(self.sched, t)
    }

    fn terminal_potential(&self) -> Result<Element> {
        self.family.terminal_potential()
    }
}

// ---------------------------------------------------------------- transfer engine

struct MidpointData {
    /// Heat over the late half, map on `(ψ, ξ)`, and the ξ-block Gram of the early half.
    late: DMatrix<Complex64>,
    early: DMatrix<Complex64>,
    map: Vec<Element>,
}

/// Backward transfer operators of a solved Markov discretisation.
pub struct MarkovSolution {
    alg: Algebra,
    grid: TimeGrid,
    increments: Vec<DMatrix<Complex64>>,
    maps: Vec<Vec<Element>>,
    midpoint: Vec<MidpointData>,
    remainder: Vec<Vec<Element>>,
    picard_iterations: usize,
}

fn generators(alg: Algebra) -> Vec<Element> {
    (0..alg.dim()).map(|j| Element::generator(alg, j)).collect()
}

/// Euler step map `ψ + h A (F + ρ)(ψ)`.
fn euler_map(alg: Algebra, h: f64, rate: &DMatrix<Complex64>, drift: &[Element]) -> Vec<Element> {
    add(&generators(alg), &scaled(&apply_rate(rate, drift), h))
}

/// Builds the transfer operators for the exact-HJB route or any drift family without remainder.
pub fn solve_markov(
    grid: &TimeGrid,
    sched: &dyn CovarianceSchedule,
    family: &dyn DriftFamily,
    config: &SolverConfig,
) -> Result<MarkovSolution> {
    config.check()?;
    let alg = family.algebra();
    let n = alg.dim();
    if n != sched.dim() {
        return usage(format!(
            "family has {n} generators, schedule {}",
            sched.dim()
        ));
    }
    check_grid(grid, sched)?;
    let m = grid.steps();
    let mut increments = Vec::with_capacity(m);
    let mut maps = Vec::with_capacity(m);
    let mut midpoint = Vec::new();
    for k in 0..m {
        let (t, h) = (grid.nodes()[k], grid.h(k));
        increments.push(sched.increment(t, t + h)?.gram().clone());
        let rate = sched.rate_gram(t);
        let f = family.force(t)?;
        match config.integrator {
            Integrator::Euler => maps.push(euler_map(alg, h, &rate, &f)),
            Integrator::Midpoint => midpoint.push(midpoint_data(sched, family, t, h, &rate, &f)?),
        }
    }
    let remainder = vec![vec![Element::zero(alg); n]; m + 1];
    Ok(MarkovSolution {
        alg,
        grid: grid.clone(),
        increments,
        maps,
        midpoint,
        remainder,
        picard_iterations: 0,
    })
}

fn check_grid(grid: &TimeGrid, sched: &dyn CovarianceSchedule) -> Result<()> {
    if grid.t_max() > sched.t_max() + 1e-12 {
        return usage(format!(
            "grid ends at {} beyond t_max = {}",
            grid.t_max(),
            sched.t_max()
        ));
    }
    Ok(())
}

fn midpoint_data(
    sched: &dyn CovarianceSchedule,
    family: &dyn DriftFamily,
    t: f64,
    h: f64,
    rate: &DMatrix<Complex64>,
    f: &[Element],
) -> Result<MidpointData> {
    let n = f.len();
    let doubled = Algebra::new(2 * n)?;
    let psi: Vec<usize> = (0..n).collect();
    let lift = |p: &Element| p.embed(doubled, &psi);
    let gens = generators(doubled);
    let tm = t + 0.5 * h;
    let f_lift: Vec<Element> = f.iter().map(lift).collect::<Result<_>>()?;
    let drift0 = apply_rate(rate, &f_lift);
    let inner: Vec<Element> = (0..n)
        .map(|j| &(&gens[j] + &drift0[j].scale(&c(0.5 * h))) + &gens[n + j])
        .collect();
    let f_mid: Vec<Element> = family
        .force(tm)?
        .iter()
        .map(|p| p.compose(&inner))
        .collect::<Result<_>>()?;
    let drift_mid = apply_rate(&sched.rate_gram(tm), &f_mid);
    let map: Vec<Element> = (0..n)
        .map(|j| &(&gens[j] + &gens[n + j]) + &drift_mid[j].scale(&c(h)))
        .collect();
    let b1 = sched.increment(t, tm)?.gram().clone();
    let mut early = DMatrix::zeros(2 * n, 2 * n);
    early.view_mut((n, n), (n, n)).copy_from(&b1);
    let late = sched.increment(tm, t + h)?.gram().clone();
    Ok(MidpointData { late, early, map })
}

impl MarkovSolution {
    pub fn algebra(&self) -> Algebra {
        self.alg
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `ρ_k` as functions of the state, `ρ_M = 0`.
    pub fn remainder(&self) -> &[Vec<Element>] {
        &self.remainder
    }

    pub fn picard_iterations(&self) -> usize {
        self.picard_iterations
    }

    /// `ψ ↦ ω(P(Ψ_M) | Ψ_k = ψ)`.
    pub fn conditional(&self, k: usize, p: &Element) -> Result<Element> {
        let mut phi = self.relabel(p)?;
        for j in (k..self.grid.steps()).rev() {
            phi = self.step_back(j, &phi)?;
        }
        Ok(phi)
    }

    /// Observables over another algebra of the same size are relabelled generator by generator.
    fn relabel(&self, p: &Element) -> Result<Element> {
        let a = p.algebra();
        if a.id() == self.alg.id() {
            return Ok(p.clone());
        }
        if a.dim() != self.alg.dim() {
            return usage(format!(
                "observable over {} generators, state over {}",
                a.dim(),
                self.alg.dim()
            ));
        }
        p.embed(self.alg, &(0..a.dim()).collect::<Vec<_>>())
    }

    fn step_back(&self, k: usize, phi: &Element) -> Result<Element> {
        if self.midpoint.is_empty() {
            return phi.heat(&self.increments[k])?.compose(&self.maps[k]);
        }
        let md = &self.midpoint[k];
        let n = self.alg.dim();
        let lifted = phi.heat(&md.late)?.compose(&md.map)?.heat(&md.early)?;
        let mut back = generators(self.alg);
        back.extend((0..n).map(|_| Element::zero(self.alg)));
        lifted.compose(&back)
    }

    /// `ω(P(Ψ_{t_max}))` from `Ψ_0 = 0`.
    pub fn expectation(&self, p: &Element) -> Result<Complex64> {
        Ok(self.conditional(0, p)?.body())
    }
}

/// Pair system `ρ_k = h(H_k + ⟨A_k ρ_k, DF_k⟩) + exp(½D²_{B_k})ρ_{k+1} ∘ (ψ + hA_k(F_k + ρ_k))`, solved backwards with Picard per step.
pub fn solve_pair_system(
    grid: &TimeGrid,
    sched: &dyn CovarianceSchedule,
    family: &dyn DriftFamily,
    config: &SolverConfig,
) -> Result<MarkovSolution> {
    let increments: Vec<DMatrix<Complex64>> = (0..grid.steps())
        .map(|k| {
            sched
                .increment(grid.nodes()[k], grid.nodes()[k + 1])
                .map(|c| c.gram().clone())
        })
        .collect::<Result<_>>()?;
    solve_pair_with_noise(grid, sched, family, &increments, config)
}

/// Pair system with caller-supplied increment Grams, e.g. those of a masked noise.
pub fn solve_pair_with_noise(
    grid: &TimeGrid,
    sched: &dyn CovarianceSchedule,
    family: &dyn DriftFamily,
    increments: &[DMatrix<Complex64>],
    config: &SolverConfig,
) -> Result<MarkovSolution> {
    config.check()?;
    if config.integrator != Integrator::Euler {
        return usage("the pair system is discretised with the Euler scheme only");
    }
    check_grid(grid, sched)?;
    let alg = family.algebra();
    let n = alg.dim();
    let m = grid.steps();
    if increments.len() != m {
        return usage(format!(
            "{} increment Grams for {m} steps",
            increments.len()
        ));
    }
    let mut remainder = vec![vec![Element::zero(alg); n]; m + 1];
    let mut maps = vec![Vec::new(); m];
    let mut iterations = 0usize;
    for k in (0..m).rev() {
        let (t, h) = (grid.nodes()[k], grid.h(k));
        let rate = sched.rate_gram(t);
        let f = family.force(t)?;
        let src = family.source(t)?;
        let heated: Vec<Element> = remainder[k + 1]
            .iter()
            .map(|r| r.heat(&increments[k]))
            .collect::<Result<_>>()?;
        let mut rho = vec![Element::zero(alg); n];
        let mut history: Vec<f64> = Vec::new();
        let mut converged = false;
        for _ in 0..config.picard_max_iters {
            iterations += 1;
            let map = euler_map(alg, h, &rate, &add(&f, &rho));
            let feedback = contraction(&rate, &f, &rho)?;
            let mut next = Vec::with_capacity(n);
            for j in 0..n {
                let local = (&src[j] + &feedback[j]).scale(&c(h));
                next.push(&local + &heated[j].compose(&map)?);
            }
            let change = max_dist(&next, &rho);
            rho = next;
            history.push(change);
            if change < config.picard_tol {
                converged = true;
                break;
            }
            let l = history.len();
            if l >= 4
                && history[l - 1] > history[l - 2]
                && history[l - 2] > history[l - 3]
                && history[l - 3] > history[l - 4]
            {
                return Err(Error::Convergence(format!(
                    "pair system iterates grow at step {k} (changes {:?}); reduce the coupling",
                    &history[l - 4..]
                )));
            }
        }
        if !converged {
            return Err(Error::Convergence(format!(
                "pair system did not settle at step {k} within {} iterations, last change {:e}",
                config.picard_max_iters,
                history.last().copied().unwrap_or(f64::NAN)
            )));
        }
        maps[k] = euler_map(alg, h, &rate, &add(&f, &rho));
        remainder[k] = rho;
    }
    Ok(MarkovSolution {
        alg,
        grid: grid.clone(),
        increments: increments.to_vec(),
        maps,
        midpoint: Vec::new(),
        remainder,
        picard_iterations: iterations,
    })
}

/// Largest residual of the pair recursion at a converged solution.
pub fn pair_residual(
    sol: &MarkovSolution,
    sched: &dyn CovarianceSchedule,
    family: &dyn DriftFamily,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..sol.grid.steps() {
        let (t, h) = (sol.grid.nodes()[k], sol.grid.h(k));
        let rate = sched.rate_gram(t);
        let f = family.force(t)?;
        let src = family.source(t)?;
        let rho = &sol.remainder[k];
        let feedback = contraction(&rate, &f, rho)?;
        for j in 0..rho.len() {
            let want = &(&src[j] + &feedback[j]).scale(&c(h))
                + &sol.remainder[k + 1][j]
                    .heat(&sol.increments[k])?
                    .compose(&sol.maps[k])?;
            worst = worst.max(want.dist(&rho[j]));
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------- path engine

/// Path algebras are dense in the worst case; beyond this many generators they do not fit in memory.
pub const PATH_GENERATOR_LIMIT: usize = 20;

fn path_algebra(total: usize) -> Result<Algebra> {
    if total > PATH_GENERATOR_LIMIT {
        return Err(Error::Capacity(format!(
            "{total} increment generators exceed the path limit of {PATH_GENERATOR_LIMIT}; use fewer steps or the transfer engine"
        )));
    }
    Algebra::new(total)
}

/// Path realised over fresh increment generators.
#[derive(Clone, Debug)]
pub struct PathSolution {
    pub alg: Algebra,
    pub grid: TimeGrid,
    /// `Ψ` at every node.
    pub psi: Vec<Vec<Element>>,
    /// `R = ρ(Ψ)` at every node.
    pub remainder: Vec<Vec<Element>>,
    /// Block-diagonal Gram of all increment generators.
    pub increments_cov: DMatrix<Complex64>,
    /// Generators introduced in each step.
    pub step_masks: Vec<u64>,
    pub iterations: usize,
    pub history: Vec<f64>,
}

impl PathSolution {
    /// `ω(P(Ψ_k))`.
    pub fn expectation_at(&self, k: usize, p: &Element) -> Result<Complex64> {
        gaussian_expectation(&self.increments_cov, &p.compose(&self.psi[k])?)
    }

    pub fn expectation(&self, p: &Element) -> Result<Complex64> {
        self.expectation_at(self.grid.steps(), p)
    }
}

/// Picard iteration on the discretised SDE `dΨ = Ġ(F + ρ)(Ψ) dt + dX`, `Ψ_0 = 0`.
pub fn simulate_sde(
    grid: &TimeGrid,
    sched: &dyn CovarianceSchedule,
    family: &dyn DriftFamily,
    remainder: Option<&[Vec<Element>]>,
    config: &SolverConfig,
) -> Result<PathSolution> {
    config.check()?;
    check_grid(grid, sched)?;
    let n = family.algebra().dim();
    let m = grid.steps();
    let halves = if config.integrator == Integrator::Midpoint {
        2
    } else {
        1
    };
    let total = n * m * halves;
    let alg = path_algebra(total)?;
    // noise: block per (step, half)
    let mut cov = DMatrix::zeros(total, total);
    for k in 0..m {
        let (t, h) = (grid.nodes()[k], grid.h(k));
        let cuts: Vec<f64> = if halves == 2 {
            vec![t, t + 0.5 * h, t + h]
        } else {
            vec![t, t + h]
        };
        for (q, w) in cuts.windows(2).enumerate() {
            let g = sched.increment(w[0], w[1])?.gram().clone();
            let off = (k * halves + q) * n;
            cov.view_mut((off, off), (n, n)).copy_from(&g);
        }
    }
    let noise = |k: usize, q: usize| -> Vec<Element> {
        (0..n)
            .map(|j| Element::generator(alg, (k * halves + q) * n + j))
            .collect()
    };
    let step_masks: Vec<u64> = (0..m)
        .map(|k| (0..n * halves).fold(0u64, |acc, j| acc | 1u64 << (k * halves * n + j)))
        .collect();
    let lift = |fs: &[Element], psi: &[Element]| -> Result<Vec<Element>> {
        fs.iter().map(|p| p.compose(psi)).collect()
    };

    let mut forces = Vec::with_capacity(m);
    let mut rates = Vec::with_capacity(m);
    for k in 0..m {
        let t = grid.nodes()[k];
        let mut f = family.force(t)?;
        if let Some(r) = remainder {
            f = add(&f, &r[k]);
        }
        forces.push(f);
        rates.push(sched.rate_gram(t));
    }
    let mid: Vec<(Vec<Element>, DMatrix<Complex64>)> = if halves == 2 {
        (0..m)
            .map(|k| {
                let tm = grid.nodes()[k] + 0.5 * grid.h(k);
                Ok((family.force(tm)?, sched.rate_gram(tm)))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let zero = vec![Element::zero(alg); n];
    let mut psi: Vec<Vec<Element>> = vec![zero.clone(); m + 1];
    // start from the pure noise path
    for k in 0..m {
        let mut next = psi[k].clone();
        for q in 0..halves {
            next = add(&next, &noise(k, q));
        }
        psi[k + 1] = next;
    }
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut fresh = vec![zero.clone(); m + 1];
        for k in 0..m {
            let h = grid.h(k);
            let drift = if halves == 1 {
                apply_rate(&rates[k], &lift(&forces[k], &psi[k])?)
            } else {
                let early = apply_rate(&rates[k], &lift(&forces[k], &psi[k])?);
                let half = add(&add(&psi[k], &scaled(&early, 0.5 * h)), &noise(k, 0));
                apply_rate(&mid[k].1, &lift(&mid[k].0, &half)?)
            };
            let mut next = add(&fresh[k], &scaled(&drift, h));
            for q in 0..halves {
                next = add(&next, &noise(k, q));
            }
            fresh[k + 1] = next;
        }
        let change = (0..=m)
            .map(|k| max_dist(&fresh[k], &psi[k]))
            .fold(0.0, f64::max);
        psi = fresh;
        history.push(change);
        if change < config.picard_tol {
            break;
        }
        if iterations >= config.picard_max_iters {
            return Err(Error::Convergence(format!(
                "Picard iteration did not settle, changes {history:?}"
            )));
        }
    }
    let rem = match remainder {
        Some(r) => (0..=m)
            .map(|k| lift(&r[k], &psi[k]))
            .collect::<Result<_>>()?,
        None => vec![zero; m + 1],
    };
    Ok(PathSolution {
        alg,
        grid: grid.clone(),
        psi,
        remainder: rem,
        increments_cov: cov,
        step_masks,
        iterations,
        history,
    })
}

/// Operator-norm majorant `Σ |c| Π ν_g` with `ν_g = √(2|B(g, g')|)`, `g'` the opposite-species partner of `g`.
pub fn majorant_norm(path: &PathSolution, p: &Element) -> f64 {
    let n = path.increments_cov.nrows();
    let nu: Vec<f64> = (0..n)
        .map(|g| {
            let partner = g ^ 1;
            if partner < n {
                (2.0 * path.increments_cov[(g, partner)].norm()).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    p.terms()
        .iter()
        .map(|(m, v)| v.norm() * bits(*m).iter().map(|&g| nu[g]).product::<f64>())
        .sum()
}

/// `D⁻¹ max_k 2^{−a t_k} ‖Ψ_k‖ + Σ_k h_k 2^{−b t_k} ‖R_k‖`, field norms as the largest component majorant.
pub fn pair_norm(path: &PathSolution, config: &SolverConfig) -> f64 {
    let field = |v: &[Element]| v.iter().map(|p| majorant_norm(path, p)).fold(0.0, f64::max);
    let nodes = path.grid.nodes();
    let sup = (0..nodes.len())
        .map(|k| 2f64.powf(-config.a * nodes[k]) * field(&path.psi[k]))
        .fold(0.0, f64::max);
    let integral: f64 = (0..path.grid.steps())
        .map(|k| path.grid.h(k) * 2f64.powf(-config.b * nodes[k]) * field(&path.remainder[k]))
        .sum();
    sup / config.d_norm + integral
}

// ---------------------------------------------------------------- moment ODE

/// `P_α(s) = ω(v_α(Ψ_s))` on every node for the requested basis monomials.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTable {
    pub nodes: Vec<f64>,
    pub basis: Vec<u64>,
    pub values: Vec<Vec<Complex64>>,
}

const MOMENT_BLOWUP: f64 = 1e12;

/// Forward RK4 on `dP/ds = C(s)P`, `C(s)` the matrix of `½D²_{Ġ} + ⟨ĠF_s, D·⟩` on monomials.
pub fn moment_ode(
    grid: &TimeGrid,
    sched: &dyn CovarianceSchedule,
    v_final: &Element,
    basis: &[u64],
) -> Result<MomentTable> {
    let alg = v_final.algebra();
    let n = alg.dim();
    if n > 12 {
        return Err(Error::Capacity(format!(
            "moment system over {n} generators has 2^{n} unknowns"
        )));
    }
    check_grid(grid, sched)?;
    let mut g = grid.clone();
    for _ in 0..4 {
        match moment_run(&g, sched, v_final, basis) {
            Ok(mut table) => {
                if g.steps() != grid.steps() {
                    let stride = g.steps() / grid.steps();
                    table.nodes = table.nodes.iter().step_by(stride).copied().collect();
                    table.values = table.values.into_iter().step_by(stride).collect();
                }
                return Ok(table);
            }
            Err(Error::Singularity(_)) => g = g.refined(),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Convergence(
        "moment system blows up after three step halvings".into(),
    ))
}

fn generator_matrix(
    sched: &dyn CovarianceSchedule,
    v_final: &Element,
    t: f64,
) -> Result<DMatrix<Complex64>> {
    let alg = v_final.algebra();
    let dim = 1usize << alg.dim();
    let rate = sched.rate(t)?;
    let drift = apply_rate(rate.gram(), &effective_force(sched, v_final, t)?);
    let mut cmat = DMatrix::zeros(dim, dim);
    for alpha in 0..dim {
        let v = Element::monomial(alg, &bits(alpha as u64));
        let lv = &v.laplacian(&rate)?.scale(&c(0.5)) + &Element::pairing(&drift, &v)?;
        for (mask, coef) in lv.terms() {
            cmat[(alpha, *mask as usize)] = *coef;
        }
    }
    Ok(cmat)
}

fn moment_run(
    grid: &TimeGrid,
    sched: &dyn CovarianceSchedule,
    v_final: &Element,
    basis: &[u64],
) -> Result<MomentTable> {
    let dim = 1usize << v_final.algebra().dim();
    // d/ds ω(v_α(Ψ_s)) = Σ_β C_αβ ω(v_β(Ψ_s))
    let mut p = nalgebra::DVector::<Complex64>::zeros(dim);
    p[0] = c(1.0);
    let pick =
        |p: &nalgebra::DVector<Complex64>| basis.iter().map(|&b| p[b as usize]).collect::<Vec<_>>();
    let mut values = vec![pick(&p)];
    for k in 0..grid.steps() {
        let (t, h) = (grid.nodes()[k], grid.h(k));
        let c0 = generator_matrix(sched, v_final, t)?;
        let cm = generator_matrix(sched, v_final, t + 0.5 * h)?;
        let c1 = generator_matrix(sched, v_final, t + h - 1e-13)?;
        let hc = c(h);
        let k1 = &c0 * &p;
        let k2 = &cm * (&p + &k1 * (hc * 0.5));
        let k3 = &cm * (&p + &k2 * (hc * 0.5));
        let k4 = &c1 * (&p + &k3 * hc);
        p += (k1 + k2 * c(2.0) + k3 * c(2.0) + k4) * (hc / 6.0);
        if p.iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite() || z.norm() > MOMENT_BLOWUP)
        {
            return Err(Error::Singularity(format!(
                "moment system blows up at s = {}",
                t + h
            )));
        }
        values.push(pick(&p));
    }
    Ok(MomentTable {
        nodes: grid.nodes().to_vec(),
        basis: basis.to_vec(),
        values,
    })
}

/// `ω(v(X_s) e^{V_s(X_s)}) / ω(e^{V_s(X_s)})` with `X_s` of covariance `G_s`.
pub fn target_ratio(
    sched: &dyn CovarianceSchedule,
    v_final: &Element,
    s: f64,
    p: &Element,
) -> Result<Complex64> {
    let vs = effective_potential(sched, v_final, s)?;
    GibbsState::new(sched.gram(s), &vs)?.expectation(p)
}

// ---------------------------------------------------------------- checks

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    ExactHjb,
    PairSystem(FamilyKind),
    MomentOde,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservableCheck {
    pub lhs: Complex64,
    pub rhs: Complex64,
    pub abs_err: f64,
}

/// Both sides of the quantisation identity at `t_max` for each observable.
pub fn quantisation_check(
    grid: &TimeGrid,
    sched: &dyn CovarianceSchedule,
    v_final: &Element,
    observables: &[Element],
    route: Route,
    config: &SolverConfig,
) -> Result<Vec<ObservableCheck>> {
    let lhs: Vec<Complex64> = match route {
        Route::ExactHjb => {
            let sol = solve_markov(
                grid,
                sched,
                &ExactFamily::new(sched, v_final.clone()),
                config,
            )?;
            observables
                .iter()
                .map(|p| sol.expectation(p))
                .collect::<Result<_>>()?
        }
        Route::PairSystem(kind) => {
            let sol = match kind {
                FamilyKind::Exact => solve_pair_system(
                    grid,
                    sched,
                    &ExactFamily::new(sched, v_final.clone()),
                    config,
                )?,
                FamilyKind::WickOrdered => solve_pair_system(
                    grid,
                    sched,
                    &WickFamily::new(sched, v_final.clone()),
                    config,
                )?,
                FamilyKind::FlowTruncated => {
                    return usage(
                        "flow families carry their own terminal potential; use family_check",
                    )
                }
            };
            observables
                .iter()
                .map(|p| sol.expectation(p))
                .collect::<Result<_>>()?
        }
        Route::MomentOde => {
            let basis: Vec<u64> = (0..1u64 << v_final.algebra().dim()).collect();
            let table = moment_ode(grid, sched, v_final, &basis)?;
            let last = table.values.last().expect("nonempty");
            observables
                .iter()
                .map(|p| p.terms().iter().map(|(m, v)| v * last[*m as usize]).sum())
                .collect()
        }
    };
    let gibbs = GibbsState::new(sched.gram(grid.t_max()), v_final)?;
    observables
        .iter()
        .zip(lhs)
        .map(|(p, l)| {
            let r = gibbs.expectation(p)?;
            Ok(ObservableCheck {
                lhs: l,
                rhs: r,
                abs_err: (l - r).norm(),
            })
        })
        .collect()
}

/// Quantisation identity for a pair system driven by an arbitrary family.
pub fn family_check(
    grid: &TimeGrid,
    sched: &dyn CovarianceSchedule,
    family: &dyn DriftFamily,
    observables: &[Element],
    config: &SolverConfig,
) -> Result<Vec<ObservableCheck>> {
    let sol = solve_pair_system(grid, sched, family, config)?;
    let gibbs = GibbsState::new(sched.gram(grid.t_max()), &family.terminal_potential()?)?;
    observables
        .iter()
        .map(|p| {
            let q = sol.relabel(p)?;
            let l = sol.expectation(&q)?;
            let r = gibbs.expectation(&q)?;
            Ok(ObservableCheck {
                lhs: l,
                rhs: r,
                abs_err: (l - r).norm(),
            })
        })
        .collect()
}

/// Largest `|ω_s(DV_T(Ψ_T)) − DV_s(Ψ_s)|` over nodes, as functions of the state at `s`.
pub fn drift_martingale_check(
    grid: &TimeGrid,
    sched: &dyn CovarianceSchedule,
    v_final: &Element,
    config: &SolverConfig,
) -> Result<f64> {
    let family = ExactFamily::new(sched, v_final.clone());
    let sol = solve_markov(grid, sched, &family, config)?;
    let terminal = gradient(v_final);
    let mut worst = 0.0f64;
    for k in 0..=grid.steps() {
        let want = family.force(grid.nodes()[k])?;
        for (j, g) in terminal.iter().enumerate() {
            worst = worst.max(sol.conditional(k, g)?.dist(&want[j]));
        }
    }
    Ok(worst)
}

/// Every monomial of degree at most `max_degree`, ascending masks.
pub fn monomial_battery(alg: Algebra, max_degree: usize) -> Vec<Element> {
    (0..1u64 << alg.dim())
        .filter(|m| m.count_ones() as usize <= max_degree)
        .map(|m| Element::monomial(alg, &bits(m)))
        .collect()
}

/// `max |v_M − v_{2M}|` and the error ratio between `M` and `2M` against an exact answer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Refinement {
    pub err_coarse: f64,
    pub err_fine: f64,
    pub ratio: f64,
}

pub fn refinement(coarse: &[ObservableCheck], fine: &[ObservableCheck]) -> Refinement {
    let ec = coarse.iter().map(|o| o.abs_err).fold(0.0, f64::max);
    let ef = fine.iter().map(|o| o.abs_err).fold(0.0, f64::max);
    Refinement {
        err_coarse: ec,
        err_fine: ef,
        ratio: ef / ec,
    }
}

// ---------------------------------------------------------------- decay experiment

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoPointRow {
    pub separation: f64,
    pub cov: Complex64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseGapRow {
    pub site: usize,
    pub distance: f64,
    /// Upper bound on `‖(X − X^{(i)})(δ_x)‖`.
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayTable {
    pub two_point: Vec<TwoPointRow>,
    /// Fit of `ln|cov|` against separation.
    pub fit: LineFit,
    /// Largest entry of `ω(X^{(1)}_T X^{(2)}_T)`.
    pub cross_covariance: f64,
    pub noise_gap: [Vec<NoiseGapRow>; 2],
}

fn check_masks(geom: &Geometry, masks: [&[bool]; 2]) -> Result<()> {
    let n = geom.n_sites();
    if masks.iter().any(|m| m.len() != n) {
        return usage(format!("masks need one entry per site ({n})"));
    }
    if (0..n).any(|x| masks[0][x] && masks[1][x]) {
        return usage("masks overlap");
    }
    Ok(())
}

/// `∫_0^T masked_rate` by Gauss–Legendre panels cut at the schedule breakpoints.
fn integrated_masked_rate(
    sched: &LatticeSchedule,
    mi: &[bool],
    mj: &[bool],
) -> Result<DMatrix<Complex64>> {
    let n = sched.dim();
    let mut acc = DMatrix::zeros(n, n);
    let mut cuts = vec![0.0];
    cuts.extend(
        sched
            .breakpoints()
            .into_iter()
            .filter(|&b| b > 0.0 && b < sched.t_max()),
    );
    cuts.push(sched.t_max());
    let nodes = gauss_legendre(12);
    for w in cuts.windows(2) {
        let panels = (((w[1] - w[0]) / 0.125).ceil() as usize).max(1);
        let h = (w[1] - w[0]) / panels as f64;
        for p in 0..panels {
            let mid = w[0] + (p as f64 + 0.5) * h;
            for (x, wt) in &nodes {
                acc += sched.masked_rate(mid + 0.5 * h * x, mi, mj)? * c(0.5 * h * wt);
            }
        }
    }
    Ok(acc)
}

/// Exact Gibbs two-point function, cross-covariance of disjointly masked noises, and the noise gap column.
pub fn coupled_decay_experiment(
    sched: &LatticeSchedule,
    masks: [&[bool]; 2],
    lambda: f64,
    mu: f64,
) -> Result<DecayTable> {
    let geom = sched.geometry();
    check_masks(geom, masks)?;
    let alg = Algebra::new(geom.n_fields())?;
    let fields = generators(alg);
    let v = interaction_potential(geom, lambda, mu, &fields)?;
    let gibbs = GibbsState::new(sched.gram(sched.t_max()), &v)?;
    let origin_plus = FieldIndex {
        site: 0,
        spin: 0,
        species: 0,
    }
    .flat();
    let mut two_point = Vec::new();
    for x in 0..geom.n_sites() {
        let w = geom.wrapped(x);
        if w.iter().any(|&c| c < 0) || w.iter().skip(1).any(|&c| c != 0) {
            continue;
        }
        let xm = FieldIndex {
            site: x,
            spin: 0,
            species: 1,
        }
        .flat();
        let cov = gibbs.expectation(&(&fields[xm] * &fields[origin_plus]))?;
        two_point.push(TwoPointRow {
            separation: geom.dist(x, 0),
            cov,
        });
    }
    let pts: Vec<&TwoPointRow> = two_point.iter().filter(|r| r.cov.norm() > 0.0).collect();
    let fit = line_fit(
        &pts.iter().map(|r| r.separation).collect::<Vec<_>>(),
        &pts.iter().map(|r| r.cov.norm().ln()).collect::<Vec<_>>(),
    );
    let cross = integrated_masked_rate(sched, masks[0], masks[1])?;
    let cross_covariance = cross.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut gaps: [Vec<NoiseGapRow>; 2] = [Vec::new(), Vec::new()];
    for (i, mask) in masks.iter().enumerate() {
        let complement: Vec<bool> = mask.iter().map(|b| !b).collect();
        if complement.iter().all(|b| !b) {
            gaps[i] = (0..geom.n_sites())
                .map(|x| NoiseGapRow {
                    site: x,
                    distance: f64::INFINITY,
                    norm: 0.0,
                })
                .collect();
            continue;
        }
        let outside = integrated_masked_rate(sched, &complement, &complement)?;
        for x in (0..geom.n_sites()).filter(|&x| mask[x]) {
            let distance = (0..geom.n_sites())
                .filter(|&z| complement[z])
                .map(|z| geom.dist(x, z))
                .fold(f64::INFINITY, f64::min);
            let xm = FieldIndex {
                site: x,
                spin: 0,
                species: 1,
            }
            .flat();
            let norm = (2.0
                * outside[(
                    xm,
                    FieldIndex {
                        site: x,
                        spin: 0,
                        species: 0,
                    }
                    .flat(),
                )]
                    .norm())
            .sqrt();
            gaps[i].push(NoiseGapRow {
                site: x,
                distance,
                norm,
            });
        }
        gaps[i].sort_by(|a, b| a.distance.total_cmp(&b.distance));
    }
    Ok(DecayTable {
        two_point,
        fit,
        cross_covariance,
        noise_gap: gaps,
    })
}

/// Whether the noise gap decreases strictly across distinct distances (ties averaged).
pub fn gap_decreases(rows: &[NoiseGapRow]) -> bool {
    let mut groups: Vec<(f64, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.distance.is_finite()) {
        match groups.last_mut() {
            Some(g) if (g.0 - r.distance).abs() < 1e-12 => {
                g.1 += r.norm;
                g.2 += 1;
            }
            _ => groups.push((r.distance, r.norm, 1)),
        }
    }
    groups
        .windows(2)
        .all(|w| w[1].1 / (w[1].2 as f64) < w[0].1 / (w[0].2 as f64))
}

/// `(Ψ, Ψ^{(1)}, Ψ^{(2)})` driven by one set of site white-noise generators.
#[derive(Clone, Debug)]
pub struct CoupledPaths {
    pub paths: [PathSolution; 3],
    /// `‖(Ψ_T − Ψ_T^{(i)})(δ_x)‖` majorants for `i = 1, 2`, per field index.
    pub gaps: [Vec<f64>; 2],
}

/// Three pair systems whose noises share per-step site generators `w`:
/// `ΔX^{(i)}(x) = Σ_{z∈𝒟_i} C_k(x, z) w_k(z)` with `C_k` the square root of the increment kernel.
pub fn coupled_pair_paths(
    sched: &LatticeSchedule,
    family: &dyn DriftFamily,
    masks: [&[bool]; 2],
    grid: &TimeGrid,
    config: &SolverConfig,
) -> Result<CoupledPaths> {
    let geom = sched.geometry();
    check_masks(geom, masks)?;
    let n = geom.n_fields();
    let sites = geom.n_sites();
    let m = grid.steps();
    let total = n * m;
    let alg = path_algebra(total)?;
    let full = vec![true; sites];
    let all_masks: [&[bool]; 3] = [&full, masks[0], masks[1]];
    // square roots of the per-step increment site kernels
    let mut roots = Vec::with_capacity(m);
    for k in 0..m {
        let g = sched.increment(grid.nodes()[k], grid.nodes()[k + 1])?;
        let mut kmat = DMatrix::<f64>::zeros(sites, sites);
        for x in 0..sites {
            for y in 0..sites {
                kmat[(x, y)] = g.gram()[(
                    FieldIndex {
                        site: x,
                        spin: 0,
                        species: 1,
                    }
                    .flat(),
                    FieldIndex {
                        site: y,
                        spin: 0,
                        species: 0,
                    }
                    .flat(),
                )]
                    .re;
            }
        }
        let eig = nalgebra::SymmetricEigen::new(kmat);
        let sq = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        roots.push(&eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose());
    }
    let mut cov = DMatrix::zeros(total, total);
    for k in 0..m {
        for x in 0..sites {
            for spin in 0..2 {
                let p = k * n
                    + FieldIndex {
                        site: x,
                        spin,
                        species: 0,
                    }
                    .flat();
                let q = k * n
                    + FieldIndex {
                        site: x,
                        spin,
                        species: 1,
                    }
                    .flat();
                cov[(q, p)] = c(1.0);
                cov[(p, q)] = c(-1.0);
            }
        }
    }
    let mut paths = Vec::with_capacity(3);
    for mask in all_masks {
        // masked increment Grams C 1_D C for the remainder equation
        let incs: Vec<DMatrix<Complex64>> = roots
            .iter()
            .map(|r| {
                geom.gram_from_sites(&|x, y| {
                    (0..sites)
                        .filter(|&z| mask[z])
                        .map(|z| r[(x, z)] * r[(z, y)])
                        .sum()
                })
            })
            .collect();
        let sol = solve_pair_with_noise(grid, sched, family, &incs, config)?;
        let noise = |k: usize| -> Vec<Element> {
            (0..n)
                .map(|i| {
                    let fi = FieldIndex::from_flat(i);
                    let terms = (0..sites)
                        .filter(|&z| mask[z] && roots[k][(fi.site, z)] != 0.0)
                        .map(|z| {
                            (
                                1u64 << (k * n + FieldIndex { site: z, ..fi }.flat()),
                                c(roots[k][(fi.site, z)]),
                            )
                        })
                        .collect();
                    Element::from_terms(alg, terms)
                })
                .collect()
        };
        let mut psi = vec![vec![Element::zero(alg); n]; m + 1];
        let mut rem = vec![vec![Element::zero(alg); n]; m + 1];
        for k in 0..m {
            let t = grid.nodes()[k];
            let drift_f = add(&family.force(t)?, &sol.remainder()[k]);
            let at: Vec<Element> = drift_f
                .iter()
                .map(|p| p.compose(&psi[k]))
                .collect::<Result<_>>()?;
            rem[k] = sol.remainder()[k]
                .iter()
                .map(|p| p.compose(&psi[k]))
                .collect::<Result<_>>()?;
            let drift = apply_rate(&sched.rate_gram(t), &at);
            psi[k + 1] = add(&add(&psi[k], &scaled(&drift, grid.h(k))), &noise(k));
        }
        let step_masks = (0..m)
            .map(|k| (0..n).fold(0u64, |a, j| a | 1u64 << (k * n + j)))
            .collect();
        paths.push(PathSolution {
            alg,
            grid: grid.clone(),
            psi,
            remainder: rem,
            increments_cov: cov.clone(),
            step_masks,
            iterations: sol.picard_iterations(),
            history: Vec::new(),
        });
    }
    let paths: [PathSolution; 3] = paths
        .try_into()
        .map_err(|_| Error::Internal("three paths expected".into()))?;
    let gaps = [1usize, 2].map(|i| {
        (0..n)
            .map(|j| majorant_norm(&paths[0], &(&paths[0].psi[m][j] - &paths[i].psi[m][j])))
            .collect::<Vec<f64>>()
    });
    Ok(CoupledPaths { paths, gaps })
}
