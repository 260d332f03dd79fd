//! Scale-indexed Gaussian calculus: covariance schedules, heat operators,
//! effective potentials and residuals of the backward Kolmogorov and HJB
//! equations.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::algebra::Element;
use crate::error::{usage, Error, Result};
use crate::gaussian::Covariance;
use crate::numerics::gauss_legendre;

/// `t ↦ G_t` as antisymmetric Gram matrices over a fixed field basis.
pub trait CovarianceSchedule: Send + Sync {
    fn dim(&self) -> usize;

    fn t_max(&self) -> f64;

    /// Gram matrix of `G_t`.
    fn gram(&self, t: f64) -> DMatrix<Complex64>;

    /// Gram matrix of `Ġ_t`.
    fn rate_gram(&self, t: f64) -> DMatrix<Complex64>;

    /// Scales where the rate may jump.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    fn covariance(&self, t: f64) -> Result<Covariance> {
        Covariance::new(self.gram(t))
    }

    fn rate(&self, t: f64) -> Result<Covariance> {
        Covariance::new(self.rate_gram(t))
    }

    /// Gram of `G_{s,t} = G_t − G_s`.
    fn increment(&self, s: f64, t: f64) -> Result<Covariance> {
        if s > t {
            return usage(format!("increment requested with s = {s} > t = {t}"));
        }
        if s == t {
            return Ok(Covariance::zeros(self.dim()));
        }
        Covariance::new(self.gram(t) - self.gram(s))
    }
}

/// `G_t = t·B` up to `t_max`; the simplest schedule, used for tests and toy models.
#[derive(Clone, Debug)]
pub struct LinearSchedule {
    base: DMatrix<Complex64>,
    t_max: f64,
}

impl LinearSchedule {
    pub fn new(base: DMatrix<Complex64>, t_max: f64) -> Result<Self> {
        Covariance::new(base.clone())?;
        Ok(Self { base, t_max })
    }
}

impl CovarianceSchedule for LinearSchedule {
    fn dim(&self) -> usize {
        self.base.nrows()
    }
    fn t_max(&self) -> f64 {
        self.t_max
    }
    fn gram(&self, t: f64) -> DMatrix<Complex64> {
        self.base.scale(t.min(self.t_max))
    }
    fn rate_gram(&self, t: f64) -> DMatrix<Complex64> {
        if t < self.t_max {
            self.base.clone()
        } else {
            DMatrix::zeros(self.dim(), self.dim())
        }
    }
    fn breakpoints(&self) -> Vec<f64> {
        vec![self.t_max]
    }
}

/// `max |G_t − G_s − ∫_s^t Ġ|`, Gauss–Legendre panels of width `2⁻²` halved until `tol` is met.
pub fn compatibility_defect(
    sched: &dyn CovarianceSchedule,
    s: f64,
    t: f64,
    tol: f64,
) -> Result<f64> {
    let inc = sched.increment(s, t)?;
    let mut cuts = vec![s];
    cuts.extend(sched.breakpoints().into_iter().filter(|&b| b > s && b < t));
    cuts.push(t);
    let n = sched.dim();
    let nodes = gauss_legendre(16);
    let mut width = 0.25;
    let mut last = f64::INFINITY;
    for _ in 0..8 {
        let mut integral = DMatrix::<Complex64>::zeros(n, n);
        for w in cuts.windows(2) {
            let panels = ((w[1] - w[0]) / width).ceil().max(1.0) as usize;
            let h = (w[1] - w[0]) / panels as f64;
            for p in 0..panels {
                let mid = w[0] + (p as f64 + 0.5) * h;
                for (x, wt) in &nodes {
                    integral +=
                        sched.rate_gram(mid + 0.5 * h * x) * Complex64::new(0.5 * h * wt, 0.0);
                }
            }
        }
        last = (inc.gram() - integral)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if last < tol {
            return Ok(last);
        }
        width *= 0.5;
    }
    Ok(last)
}

/// `ω_s(F(ψ + X_{s,T})) = exp(½D²_{G_{s,T}}) F`.
pub fn conditional_expectation(
    sched: &dyn CovarianceSchedule,
    f: &Element,
    s: f64,
    t: f64,
) -> Result<Element> {
    if s == t {
        return Ok(f.clone());
    }
    f.heat(&sched.increment(s, t)?)
}

pub const BODY_FLOOR: f64 = 1e-12;

/// `V_t = log ω_t(e^{V_T(ψ + X_{t,T})})`.
pub fn effective_potential(
    sched: &dyn CovarianceSchedule,
    v_final: &Element,
    t: f64,
) -> Result<Element> {
    let u = conditional_expectation(sched, &v_final.exp()?, t, sched.t_max())?;
    if u.body().norm() < BODY_FLOOR {
        return Err(Error::DegenerateNormalisation(u.body().norm()));
    }
    u.ln()
}

pub fn gradient(v: &Element) -> Vec<Element> {
    (0..v.algebra().dim()).map(|j| v.derivative(j)).collect()
}

/// `F_t = DV_t`.
pub fn effective_force(
    sched: &dyn CovarianceSchedule,
    v_final: &Element,
    t: f64,
) -> Result<Vec<Element>> {
    Ok(gradient(&effective_potential(sched, v_final, t)?))
}

/// `(A F)_j = Σ_i A_ji F_i`, the drift built from a rate Gram and a force.
pub fn apply_rate(a: &DMatrix<Complex64>, force: &[Element]) -> Vec<Element> {
    let n = force.len();
    (0..n)
        .map(|j| {
            let mut acc = Element::zero(force[j].algebra());
            for (i, fi) in force.iter().enumerate() {
                let c = a[(j, i)];
                if c.norm() != 0.0 && !fi.is_zero() {
                    acc = &acc + &fi.scale(&c);
                }
            }
            acc
        })
        .collect()
}

/// `⟨A K'', DK⟩` componentwise: the bilinear term of the HJB equation for forces.
pub fn contraction(a: &DMatrix<Complex64>, k: &[Element], k2: &[Element]) -> Result<Vec<Element>> {
    let drift = apply_rate(a, k2);
    k.iter().map(|kj| Element::pairing(&drift, kj)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdeResiduals {
    pub kolmogorov: f64,
    pub hjb: f64,
}

/// Central-difference residuals of `∂U + ½D²U = 0` and `∂F + ½D²F + ⟨ĠF, DF⟩ = 0`.
pub fn pde_residuals(
    sched: &dyn CovarianceSchedule,
    v_final: &Element,
    t: f64,
    dt: f64,
) -> Result<PdeResiduals> {
    if t - dt < 0.0 || t + dt > sched.t_max() {
        return usage(format!(
            "stencil [{}, {}] leaves [0, {}]",
            t - dt,
            t + dt,
            sched.t_max()
        ));
    }
    let t_end = sched.t_max();
    let weight = v_final.exp()?;
    let u = |r: f64| conditional_expectation(sched, &weight, r, t_end);
    let (up, u0, um) = (u(t + dt)?, u(t)?, u(t - dt)?);
    let rate = sched.rate(t)?;
    let dudt = (&up - &um).scale(&Complex64::new(0.5 / dt, 0.0));
    let kol = &dudt + &u0.laplacian(&rate)?.scale(&Complex64::new(0.5, 0.0));
    let force = |r: f64| effective_force(sched, v_final, r);
    let (fp, f0, fm) = (force(t + dt)?, force(t)?, force(t - dt)?);
    let quad = contraction(rate.gram(), &f0, &f0)?;
    let mut hjb = 0.0f64;
    for j in 0..f0.len() {
        let dfdt = (&fp[j] - &fm[j]).scale(&Complex64::new(0.5 / dt, 0.0));
        let lap = f0[j].laplacian(&rate)?.scale(&Complex64::new(0.5, 0.0));
        let r = &(&dfdt + &lap) + &quad[j];
        hjb = hjb.max(r.max_abs());
    }
    Ok(PdeResiduals {
        kolmogorov: kol.max_abs(),
        hjb,
    })
}
