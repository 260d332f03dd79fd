//! The flow, quantise, decay, kernels and refine experiments.

use std::f64::consts::LN_2;

use grassq::fbsde::*;
use grassq::flow::{integrate_certified, integrate_flow, FlowConfig, KernelFamily};
use grassq::lattice::{
    default_t_max, eps_difference_fit, interaction_potential, kernel_report, Geometry,
    LatticeSchedule, COMPONENTS, SPECIES,
};
use grassq::numerics::line_fit;
use grassq::scale::CovarianceSchedule;
use grassq::{Algebra, Element, Error, Result};
use num_complex::Complex64;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::output::{num, par_map, Sink, Table};

/// Most increment generators a quantisation run may hold at once.
pub const QUANTISE_GENERATOR_LIMIT: usize = 40;

/// Step-halving tolerance of the flow certification.
const FLOW_CERTIFICATE_TOL: f64 = 1e-7;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub pass: bool,
}

fn check(name: &str, value: f64, pass: bool) -> Check {
    Check {
        name: name.into(),
        value,
        pass,
    }
}

pub struct Outcome {
    pub checks: Vec<Check>,
    pub summary: Value,
}

fn potential(sched: &LatticeSchedule, alg: Algebra, lambda: f64) -> Result<Element> {
    let fields: Vec<Element> = (0..sched.dim()).map(|j| alg.generator(j)).collect();
    interaction_potential(sched.geometry(), lambda, 0.0, &fields)
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn flow(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Outcome> {
    let params = cfg.norm_params()?;
    let fc = cfg.flow_config(&params);
    let sched = cfg.schedule(None, None)?;
    let (family, residual) = integrate_certified(&sched, &fc, FLOW_CERTIFICATE_TOL)?;
    let n = family.truncation().max(1);

    let mut table = Table::new(&["t", "ell", "k", "norm", "mu_t"])?;
    for r in family.report(params.c_ell(0, n), params.delta)? {
        table.row([
            num(r.t),
            r.ell.to_string(),
            r.k.to_string(),
            num(r.weighted_norm),
            num(r.mu_t),
        ])?;
    }
    sink.table("flow.csv", table)?;

    let mut mu = Table::new(&["t", "mu_t"])?;
    for (node, &t) in family.grid().iter().enumerate() {
        mu.row([num(t), num(family.chemical_potential(node))])?;
    }
    sink.table("flow_mu.csv", mu)?;

    let mut ansatz = Table::new(&["ell", "k", "constant"])?;
    let constants = family.ansatz_constants(&params)?;
    for ((ell, k), c) in &constants {
        ansatz.row([ell.to_string(), k.to_string(), num(*c)])?;
    }
    sink.table("ansatz.csv", ansatz)?;

    Ok(Outcome {
        checks: vec![check(
            "step-halving residual within tolerance",
            residual,
            residual <= FLOW_CERTIFICATE_TOL,
        )],
        summary: json!({
            "truncation": family.truncation(),
            "step": fc.step,
            "t_max": family.t_max(),
            "nodes": family.grid().len(),
            "mu_t_max": family.renormalised_chemical_potential(),
            "largest_ansatz_constant": constants.iter().map(|c| c.1).fold(0.0, f64::max),
            "alpha": params.alpha,
            "beta": params.beta,
            "kappa": params.kappa,
        }),
    })
}

#[derive(Clone, Copy)]
struct RouteSpec {
    name: &'static str,
    route: Route,
    integrator: Integrator,
}

impl RouteSpec {
    fn scheme(&self) -> &'static str {
        match (self.route, self.integrator) {
            (Route::MomentOde, _) => "rk4",
            (_, Integrator::Euler) => "euler",
            (_, Integrator::Midpoint) => "midpoint",
        }
    }
}

pub fn quantise(cfg: &ExperimentConfig, sink: &mut Sink, threads: usize) -> Result<Outcome> {
    let params = cfg.norm_params()?;
    let solver = cfg.solver_config(&params);
    let sched = cfg.schedule(None, None)?;
    let per_step = if solver.integrator == Integrator::Midpoint {
        2
    } else {
        1
    };
    let generators = sched.dim() * per_step;
    if generators > QUANTISE_GENERATOR_LIMIT {
        return Err(Error::Configuration(format!(
            "{generators} increment generators exceed the limit of {QUANTISE_GENERATOR_LIMIT}"
        )));
    }
    let alg = Algebra::new(sched.dim())?;
    let v = potential(&sched, alg, cfg.model.lambda)?;
    let obs = monomial_battery(alg, cfg.experiment.quantise.max_degree);
    let routes = [
        RouteSpec {
            name: "exact_hjb",
            route: Route::ExactHjb,
            integrator: solver.integrator,
        },
        // the pair system is discretised with the Euler scheme only
        RouteSpec {
            name: "pair_system",
            route: Route::PairSystem(FamilyKind::Exact),
            integrator: Integrator::Euler,
        },
        RouteSpec {
            name: "moment_ode",
            route: Route::MomentOde,
            integrator: solver.integrator,
        },
    ];
    let m = cfg.solver.m;
    let jobs: Vec<(RouteSpec, usize)> =
        routes.iter().flat_map(|r| [(*r, m), (*r, 2 * m)]).collect();
    let results = par_map(&jobs, threads, |(r, steps)| {
        let grid = TimeGrid::uniform(sched.t_max(), *steps)?;
        quantisation_check(
            &grid,
            &sched,
            &v,
            &obs,
            r.route,
            &SolverConfig {
                integrator: r.integrator,
                ..solver
            },
        )
    });
    let results: Vec<Vec<ObservableCheck>> = results.into_iter().collect::<Result<_>>()?;

    let mut table = Table::new(&[
        "route",
        "integrator",
        "M",
        "observable",
        "degree",
        "lhs_re",
        "lhs_im",
        "rhs_re",
        "rhs_im",
        "abs_err",
        "order",
    ])?;
    let mut per_route = Vec::new();
    for (ri, r) in routes.iter().enumerate() {
        let (coarse, fine) = (&results[2 * ri], &results[2 * ri + 1]);
        for (steps, rows, other) in [(m, coarse, Some(fine)), (2 * m, fine, None)] {
            for (i, o) in rows.iter().enumerate() {
                let order = other.and_then(|f| {
                    let (a, b) = (o.abs_err, f[i].abs_err);
                    (a > 1e-14 && b > 1e-14).then(|| (a / b).log2())
                });
                let mask = obs[i].terms()[0].0;
                table.row([
                    r.name.to_string(),
                    r.scheme().to_string(),
                    steps.to_string(),
                    mask.to_string(),
                    mask.count_ones().to_string(),
                    num(o.lhs.re),
                    num(o.lhs.im),
                    num(o.rhs.re),
                    num(o.rhs.im),
                    num(o.abs_err),
                    opt_num(order),
                ])?;
            }
        }
        let rf = refinement(coarse, fine);
        per_route.push(json!({
            "route": r.name,
            "integrator": r.scheme(),
            "max_err_M": rf.err_coarse,
            "max_err_2M": rf.err_fine,
            "order": if rf.err_coarse > 1e-14 && rf.err_fine > 1e-14 { Some(-rf.ratio.log2()) } else { None },
        }));
    }
    sink.table("quantise.csv", table)?;

    // routes agree when their gap is within three times the larger step-halving change
    let mut worst = 0.0f64;
    for a in 0..routes.len() {
        for b in a + 1..routes.len() {
            for i in 0..obs.len() {
                let da = (results[2 * a][i].lhs - results[2 * a + 1][i].lhs).norm();
                let db = (results[2 * b][i].lhs - results[2 * b + 1][i].lhs).norm();
                let gap = (results[2 * a][i].lhs - results[2 * b][i].lhs).norm();
                worst = worst.max(gap / (3.0 * da.max(db) + 1e-14));
            }
        }
    }
    Ok(Outcome {
        checks: vec![check(
            "routes agree within three discretisation errors",
            worst,
            worst <= 1.0,
        )],
        summary: json!({ "M": m, "observables": obs.len(), "increment_generators": generators, "routes": per_route }),
    })
}

pub fn decay(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Outcome> {
    let opts = &cfg.experiment.decay;
    if !(1..=2).contains(&cfg.model.d) {
        return Err(Error::Configuration(format!(
            "decay runs in dimension 1 or 2, not {}",
            cfg.model.d
        )));
    }
    let sched = cfg.schedule(Some(opts.l), None)?;
    let geom = sched.geometry();
    if opts.split >= geom.side() {
        return Err(Error::Configuration(format!(
            "decay split {} must be below the side length {}",
            opts.split,
            geom.side()
        )));
    }
    let first: Vec<bool> = (0..geom.n_sites())
        .map(|i| (geom.coords(i)[0] as usize) < opts.split)
        .collect();
    let second: Vec<bool> = first.iter().map(|b| !b).collect();
    let table = coupled_decay_experiment(&sched, [&first, &second], cfg.model.lambda, 0.0)?;

    let mut two = Table::new(&["separation", "cov_re", "cov_im", "abs_cov"])?;
    for r in &table.two_point {
        two.row([
            num(r.separation),
            num(r.cov.re),
            num(r.cov.im),
            num(r.cov.norm()),
        ])?;
    }
    sink.table("decay.csv", two)?;

    let mut gaps = Table::new(&["mask", "site", "distance", "norm", "weighted_norm"])?;
    let mut weighted = [0.0f64; 2];
    for (i, rows) in table.noise_gap.iter().enumerate() {
        for r in rows {
            let w = if r.distance.is_finite() {
                (opts.xi * r.distance).exp() * r.norm
            } else {
                f64::NAN
            };
            if w.is_finite() {
                weighted[i] = weighted[i].max(w);
            }
            gaps.row([
                (i + 1).to_string(),
                r.site.to_string(),
                num(r.distance),
                num(r.norm),
                num(w),
            ])?;
        }
    }
    sink.table("noise_gap.csv", gaps)?;

    let decreasing = [
        gap_decreases(&table.noise_gap[0]),
        gap_decreases(&table.noise_gap[1]),
    ];
    Ok(Outcome {
        checks: vec![
            check(
                "disjoint masks have zero cross-covariance",
                table.cross_covariance,
                table.cross_covariance == 0.0,
            ),
            check(
                "noise gap decreases with distance",
                f64::from(u8::from(decreasing[0])),
                decreasing[0],
            ),
        ],
        summary: json!({
            "L": opts.l,
            "split": opts.split,
            "rate": -table.fit.slope,
            "intercept": table.fit.intercept,
            "r2": table.fit.r2,
            "cross_covariance": table.cross_covariance,
            "gap_decreasing": decreasing,
            "xi": opts.xi,
            "weighted_gap_norm": weighted,
        }),
    })
}

pub fn kernels(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Outcome> {
    let opts = &cfg.experiment.kernels;
    let (d, gamma) = (cfg.model.d, cfg.model.gamma);
    let sched = LatticeSchedule::new(Geometry::build(d, opts.l, opts.eps)?, cfg.cutoffs()?, gamma)?;
    let report = kernel_report(&sched, &opts.scales, opts.weight, opts.core)?;
    let eps = eps_difference_fit(d, opts.l, gamma, &opts.eps_values, &opts.eps_scales)?;

    let mut table = Table::new(&["s", "sup_norm", "l1_norm", "stretched_slope"])?;
    for (i, (s, sup, l1)) in report.norms.iter().enumerate() {
        table.row([
            num(*s),
            num(*sup),
            num(*l1),
            opt_num(report.decay.stretched_slopes.get(i).copied()),
        ])?;
    }
    sink.table("kernels.csv", table)?;

    let mut diffs = Table::new(&["eps", "s", "difference"])?;
    for (e, s, v) in &eps.samples {
        diffs.row([num(*e), num(*s), num(*v)])?;
    }
    sink.table("eps_difference.csv", diffs)?;

    let sup_target = 2.0 * gamma * LN_2;
    let l1_target = (2.0 * gamma - d as f64) * LN_2;
    Ok(Outcome {
        checks: Vec::new(),
        summary: json!({
            "sup_slope": report.sup_fit.slope,
            "sup_target": sup_target,
            "sup_r2": report.sup_fit.r2,
            "l1_slope": report.l1_fit.slope,
            "l1_target": l1_target,
            "l1_r2": report.l1_fit.r2,
            "scaling_slope": report.decay.scaling_slope,
            "stretched_decay_monotone": report.decay.stretched_decay_ok,
            "eps_exponents": eps.exponents,
            "eps_exponent": if eps.exponent.is_finite() { Some(eps.exponent) } else { None },
        }),
    })
}

/// Smooth test functions on the torus: the constant and the first Fourier pair along the first axis.
fn test_functions(geom: &Geometry) -> Vec<Vec<f64>> {
    let k = 2.0 * std::f64::consts::PI / geom.l as f64;
    let x: Vec<f64> = (0..geom.n_sites())
        .map(|i| geom.coords(i)[0] as f64 * geom.eps)
        .collect();
    vec![
        vec![1.0; x.len()],
        x.iter().map(|x| (k * x).cos()).collect(),
        x.iter().map(|x| (k * x).sin()).collect(),
    ]
}

/// `Σ_x ε^d f(x) ψ_{x,comp}`.
fn smeared(alg: Algebra, geom: &Geometry, comp: usize, f: &[f64]) -> Element {
    let cell = geom.cell();
    let terms = f
        .iter()
        .enumerate()
        .map(|(x, v)| {
            (
                1u64 << (x * COMPONENTS + comp),
                Complex64::new(cell * v, 0.0),
            )
        })
        .collect();
    Element::from_terms(alg, terms)
}

/// Two-point functions of smeared `+`/`−` fields of equal spin, for every pair of test functions.
fn smeared_pairs(alg: Algebra, geom: &Geometry) -> Vec<Element> {
    let fs = test_functions(geom);
    let mut out = Vec::new();
    for spin in 0..COMPONENTS / SPECIES {
        for f in &fs {
            for g in &fs {
                out.push(
                    &smeared(alg, geom, spin * SPECIES, f)
                        * &smeared(alg, geom, spin * SPECIES + 1, g),
                );
            }
        }
    }
    out
}

/// Zero-momentum quartic vertex `ε^{-d} Σ_{y,z,w} F_{0↑+}[ψ_{y↑−} ψ_{z↓+} ψ_{w↓−}]` of a force.
fn quartic_vertex(geom: &Geometry, force: &[Element]) -> f64 {
    let mut acc = 0.0;
    for (mask, v) in force[0].homogeneous_part(3).terms() {
        let bits: Vec<usize> = (0..64).filter(|b| mask >> b & 1 == 1).collect();
        let mut slot = [usize::MAX; 3];
        for &b in &bits {
            let comp = b % COMPONENTS;
            if comp >= 1 {
                slot[comp - 1] = b;
            }
        }
        if slot.contains(&usize::MAX) {
            continue;
        }
        let inversions = (0..3)
            .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
            .filter(|&(i, j)| slot[i] > slot[j])
            .count();
        acc += if inversions % 2 == 0 { v.re } else { -v.re };
    }
    acc / geom.cell()
}

struct RefineRun {
    sched: LatticeSchedule,
    family: KernelFamily,
}

pub fn refine(cfg: &ExperimentConfig, sink: &mut Sink, threads: usize) -> Result<Outcome> {
    let params = cfg.norm_params()?;
    let opts = &cfg.experiment.refine;
    let fc = FlowConfig {
        truncation: opts.n,
        ..cfg.flow_config(&params)
    };
    let solver = SolverConfig {
        integrator: Integrator::Euler,
        ..cfg.solver_config(&params)
    };
    let t_max = opts
        .eps
        .iter()
        .map(|&e| default_t_max(e))
        .fold(0.0, f64::max);
    let grid = TimeGrid::uniform(t_max, opts.m)?;

    let mut distinct: Vec<f64> = opts.eps.clone();
    distinct.dedup();
    let runs = par_map(&distinct, threads, |&eps| -> Result<RefineRun> {
        let geom = Geometry::build(cfg.model.d, cfg.model.l, eps)?;
        let sched = LatticeSchedule::with_t_max(geom, cfg.cutoffs()?, cfg.model.gamma, t_max)?;
        let family = integrate_flow(&sched, &fc)?;
        Ok(RefineRun { sched, family })
    });
    let runs: Vec<RefineRun> = runs.into_iter().collect::<Result<_>>()?;
    let run_of = |eps: f64| {
        &runs[distinct
            .iter()
            .position(|&e| e == eps)
            .expect("ε was solved")]
    };

    let pairs: Vec<(f64, f64)> = opts.eps.windows(2).map(|w| (w[0], w[1])).collect();
    let deviations = par_map(&pairs, threads, |&(ec, ef)| -> Result<(f64, f64)> {
        let (c, f) = (run_of(ec), run_of(ef));
        let (gc, gf) = (c.sched.geometry(), f.sched.geometry());
        let mut flow_dev = 0.0f64;
        for (node, &t) in c.family.grid().iter().enumerate() {
            if let Some(other) = f.family.node_of(t) {
                flow_dev = flow_dev.max(
                    (quartic_vertex(gc, &c.family.force(node))
                        - quartic_vertex(gf, &f.family.force(other)))
                    .abs(),
                );
            }
        }
        let oc = smeared_pairs(c.family.algebra(), gc);
        let of = smeared_pairs(f.family.algebra(), gf);
        let sc = solve_pair_system(
            &grid,
            &c.sched,
            &FlowFamily::new(&c.sched, &c.family)?,
            &solver,
        )?;
        let sf = solve_pair_system(
            &grid,
            &f.sched,
            &FlowFamily::new(&f.sched, &f.family)?,
            &solver,
        )?;
        let mut path_dev = 0.0f64;
        for (p, q) in oc.iter().zip(&of) {
            let diff: Complex64 = sc.expectation(p)? - sf.expectation(q)?;
            path_dev = path_dev.max(diff.norm());
        }
        Ok((flow_dev, path_dev))
    });
    let deviations: Vec<(f64, f64)> = deviations.into_iter().collect::<Result<_>>()?;

    let mut table = Table::new(&["eps", "eps_fine", "flow_deviation", "path_deviation"])?;
    for ((ec, ef), (fd, pd)) in pairs.iter().zip(&deviations) {
        table.row([num(*ec), num(*ef), num(*fd), num(*pd)])?;
    }
    sink.table("refine.csv", table)?;

    let fit = |pick: fn(&(f64, f64)) -> f64| -> Option<f64> {
        let pts: Vec<(f64, f64)> = pairs
            .iter()
            .zip(&deviations)
            .filter(|(_, d)| pick(d) > 0.0)
            .map(|(p, d)| (p.0.ln(), pick(d).ln()))
            .collect();
        (pts.len() >= 2).then(|| {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            line_fit(&x, &y).slope
        })
    };
    let flow_rate = fit(|d| d.0);
    let path_rate = fit(|d| d.1);
    let theta = cfg.experiment.decay.theta;
    let monotone = deviations.windows(2).all(|w| w[1].1 <= w[0].1);
    let mut checks = vec![check(
        "path deviation decreases with eps",
        f64::from(u8::from(monotone)),
        monotone,
    )];
    if let Some(rate) = flow_rate {
        checks.push(check(
            "flow deviation exponent reaches theta - 0.2",
            rate,
            rate >= theta - 0.2,
        ));
    }
    Ok(Outcome {
        checks,
        summary: json!({
            "t_max": t_max,
            "M": opts.m,
            "theta": theta,
            "flow_rate": flow_rate,
            "path_rate": path_rate,
        }),
    })
}
