//! Invariant suite across the library modules, reported as JSON.

use grassq::algebra::antisymmetry_defect;
use grassq::fbsde::{
    monomial_battery, quantisation_check, solve_pair_system, ExactFamily, Integrator, Route,
    SolverConfig, TimeGrid,
};
use grassq::flow::{admissible, constraint_margins, integrate_certified};
use grassq::fock::{crosscheck_state, FockGbm};
use grassq::gaussian::{cumulant, pf};
use grassq::lattice::{interaction_potential, Geometry, LatticeSchedule};
use grassq::scale::{compatibility_defect, conditional_expectation, CovarianceSchedule};
use grassq::{Algebra, Element, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, Fault};

#[derive(Clone, Debug, Serialize)]
pub struct Invariant {
    pub module: &'static str,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub seed: u64,
    pub invariants: Vec<Invariant>,
}

fn below(module: &'static str, name: &str, measured: f64, tolerance: f64) -> Invariant {
    Invariant {
        module,
        name: name.into(),
        measured,
        tolerance,
        pass: measured <= tolerance,
    }
}

fn random_element(
    alg: Algebra,
    terms: usize,
    parity: Option<u32>,
    rng: &mut ChaCha8Rng,
) -> Element {
    let full = alg.full_mask();
    let terms = (0..terms)
        .filter_map(|_| {
            let m = rng.random_range(0..=full);
            let keep = parity.is_none_or(|p| m.count_ones() % 2 == p);
            keep.then(|| {
                (
                    m,
                    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                )
            })
        })
        .collect();
    Element::from_terms(alg, terms)
}

fn algebra_checks(alg: Algebra, rng: &mut ChaCha8Rng) -> Vec<Invariant> {
    let n = alg.dim();
    let gens: Vec<Element> = (0..n).map(|j| alg.generator(j)).collect();
    let mut anti = 0.0f64;
    for a in &gens {
        for b in &gens {
            anti = anti.max((&(a * b) + &(b * a)).max_abs());
        }
    }
    let (mut assoc, mut nil, mut leibniz) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..16 {
        let (a, b, c) = (
            random_element(alg, 8, None, rng),
            random_element(alg, 8, None, rng),
            random_element(alg, 8, None, rng),
        );
        assoc = assoc.max((&(&a * &b) * &c).dist(&(&a * &(&b * &c))));
        let odd = random_element(alg, 8, Some(1), rng);
        nil = nil.max((&odd * &odd).max_abs());
        let even = random_element(alg, 8, Some(0), rng);
        let j = rng.random_range(0..n);
        let lhs = (&even * &b).derivative(j);
        let rhs = &(&even.derivative(j) * &b) + &(&even * &b.derivative(j));
        leibniz = leibniz.max(lhs.dist(&rhs));
    }
    vec![
        below("exterior_algebra", "generators anticommute", anti, 0.0),
        below("exterior_algebra", "product is associative", assoc, 1e-12),
        below(
            "exterior_algebra",
            "odd elements square to zero",
            nil,
            1e-12,
        ),
        below(
            "exterior_algebra",
            "derivative obeys the graded Leibniz rule",
            leibniz,
            1e-12,
        ),
    ]
}

fn gaussian_checks(sched: &LatticeSchedule, rng: &mut ChaCha8Rng) -> Result<Vec<Invariant>> {
    let mut pf_err = 0.0f64;
    for n in (2..=10).step_by(2) {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                m[(i, j)] = z;
                m[(j, i)] = -z;
            }
        }
        let p = pf(&m)?;
        let det = m.clone().determinant();
        pf_err = pf_err.max((p * p - det).norm() / det.norm().max(f64::MIN_POSITIVE));
    }
    let g = sched.gram(sched.t_max());
    let n = g.nrows();
    let mut cum = 0.0f64;
    for _ in 0..8 {
        let idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..n)).collect();
        cum = cum.max(cumulant(&g, &idx)?.norm());
    }
    Ok(vec![
        below(
            "gaussian_state",
            "Pfaffian squares to the determinant",
            pf_err,
            1e-10,
        ),
        below("gaussian_state", "fourth cumulant vanishes", cum, 1e-12),
    ])
}

fn scale_checks(sched: &LatticeSchedule, rng: &mut ChaCha8Rng) -> Result<Vec<Invariant>> {
    let t_max = sched.t_max();
    let compat = compatibility_defect(sched, 0.0, t_max, 1e-10)?;
    let alg = Algebra::new(sched.dim())?;
    let mut tower = 0.0f64;
    for _ in 0..8 {
        let g = random_element(alg, 12, None, rng);
        let (a, b) = (
            rng.random_range(0.0..0.5 * t_max),
            rng.random_range(0.5 * t_max..t_max),
        );
        let two =
            conditional_expectation(sched, &conditional_expectation(sched, &g, b, t_max)?, a, b)?;
        tower = tower.max(two.dist(&conditional_expectation(sched, &g, a, t_max)?));
    }
    Ok(vec![
        below(
            "scale_calculus",
            "covariance is the integral of its rate",
            compat,
            1e-8,
        ),
        below(
            "scale_calculus",
            "conditional expectations compose",
            tower,
            1e-12,
        ),
    ])
}

fn lattice_checks(sched: &LatticeSchedule, fault: Option<Fault>) -> Vec<Invariant> {
    let mut g = sched.gram(sched.t_max());
    if fault == Some(Fault::SymmetriseCovariance) {
        for i in 0..g.nrows() {
            for j in 0..i {
                g[(i, j)] = g[(j, i)];
            }
        }
    }
    let defect = (0..g.nrows())
        .flat_map(|i| (0..g.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| (g[(i, j)] + g[(j, i)]).norm())
        .fold(0.0, f64::max);
    let geom = sched.geometry();
    let k = sched.kernel(sched.t_max());
    let refl = (0..geom.n_sites())
        .map(|i| (k[i] - k[geom.reflect(i)]).abs())
        .fold(0.0, f64::max);
    vec![
        Invariant {
            module: "lattice_model",
            name: "covariance is antisymmetric".into(),
            measured: defect,
            tolerance: 0.0,
            pass: antisymmetry_defect(&g).is_ok(),
        },
        below(
            "lattice_model",
            "kernel is reflection symmetric",
            refl,
            1e-12,
        ),
    ]
}

fn flow_checks(cfg: &ExperimentConfig, sched: &LatticeSchedule) -> Result<Vec<Invariant>> {
    let params = cfg.norm_params()?;
    let (gamma, d) = (cfg.model.gamma, cfg.model.d);
    let margins = constraint_margins(gamma, d, params.alpha, params.beta, params.kappa);
    let margin = margins[1..].iter().copied().fold(params.kappa, f64::min);
    let (_, residual) = integrate_certified(sched, &cfg.flow_config(&params), 1e-7)?;
    Ok(vec![
        Invariant {
            module: "flow_engine",
            name: "norm exponents are admissible".into(),
            measured: margin,
            tolerance: 0.0,
            pass: admissible(gamma, d, params.alpha, params.beta, params.kappa),
        },
        below("flow_engine", "flow step-halving residual", residual, 1e-7),
    ])
}

fn solver_checks(cfg: &ExperimentConfig, sched: &LatticeSchedule) -> Result<Vec<Invariant>> {
    let params = cfg.norm_params()?;
    let solver = SolverConfig {
        integrator: Integrator::Euler,
        ..cfg.solver_config(&params)
    };
    let alg = Algebra::new(sched.dim())?;
    let fields: Vec<Element> = (0..sched.dim()).map(|j| alg.generator(j)).collect();
    let v = interaction_potential(sched.geometry(), cfg.model.lambda, 0.0, &fields)?;
    let grid = TimeGrid::uniform(sched.t_max(), cfg.solver.m)?;
    let sol = solve_pair_system(&grid, sched, &ExactFamily::new(sched, v.clone()), &solver)?;
    let sup = sol
        .remainder()
        .iter()
        .flatten()
        .map(|r| r.max_abs())
        .fold(0.0, f64::max);
    let obs = monomial_battery(alg, 2);
    let err = quantisation_check(&grid, sched, &v, &obs, Route::ExactHjb, &solver)?
        .iter()
        .map(|o| o.abs_err)
        .fold(0.0, f64::max);
    Ok(vec![
        below(
            "fbsde_solver",
            "exact family leaves no remainder",
            sup,
            10.0 * solver.picard_tol,
        ),
        below(
            "fbsde_solver",
            "quantisation identity holds to discretisation accuracy",
            err,
            1e-3,
        ),
    ])
}

fn fock_checks(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Invariant>> {
    let sched = LatticeSchedule::new(
        Geometry::build(cfg.model.d, 1, 1.0)?,
        cfg.cutoffs()?,
        cfg.model.gamma,
    )?;
    let t = sched.t_max();
    let gbm = FockGbm::new(&sched, &[0.0, t / 3.0, 2.0 * t / 3.0, t])?;
    let report = crosscheck_state(&gbm, &sched, 6, 16, seed)?;
    Ok(report
        .checks
        .iter()
        .map(|c| Invariant {
            module: "fock_oracle",
            name: format!("operator route agrees: {}", c.name),
            measured: c.max_abs_err,
            tolerance: 1e-9,
            pass: c.pass,
        })
        .collect())
}

pub fn run(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sched = cfg.schedule(None, None)?;
    let alg = Algebra::new(sched.dim())?;
    let mut invariants = algebra_checks(alg, &mut rng);
    invariants.extend(gaussian_checks(&sched, &mut rng)?);
    invariants.extend(scale_checks(&sched, &mut rng)?);
    invariants.extend(lattice_checks(&sched, cfg.experiment.verify.fault));
    invariants.extend(flow_checks(cfg, &sched)?);
    invariants.extend(solver_checks(cfg, &sched)?);
    invariants.extend(fock_checks(cfg, cfg.seed)?);
    Ok(VerifyReport {
        passed: invariants.iter().all(|i| i.pass),
        seed: cfg.seed,
        invariants,
    })
}
