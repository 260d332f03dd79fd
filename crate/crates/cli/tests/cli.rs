use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use grassq::lattice::{Cutoffs, Geometry, LatticeSchedule};
use grassq::numerics::line_fit;
use grassq::scale::CovarianceSchedule;
use serde_json::Value;
use tempfile::TempDir;

struct Run {
    out: Output,
    dir: PathBuf,
}

impl Run {
    fn code(&self) -> i32 {
        self.out.status.code().expect("exit code")
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.dir.join(name)).unwrap()).unwrap()
    }

    fn csv(&self, name: &str) -> Vec<Vec<String>> {
        let mut r = csv::Reader::from_path(self.dir.join(name)).unwrap();
        r.records()
            .map(|rec| rec.unwrap().iter().map(String::from).collect())
            .collect()
    }

    fn bytes(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.dir.join(name)).unwrap()
    }
}

fn grassq(tmp: &TempDir, tag: &str, config: &str, args: &[&str]) -> Run {
    let dir = tmp.path().join(tag);
    let cfg = tmp.path().join(format!("{tag}.toml"));
    std::fs::write(&cfg, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_grassq"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .env_remove("GRASSQ_OUTPUT_DIR")
        .output()
        .unwrap();
    Run { out, dir }
}

fn f(x: &Value) -> f64 {
    x.as_f64().unwrap()
}

fn col(rows: &[Vec<String>], i: usize) -> Vec<f64> {
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

#[test]
fn verify_passes_and_detects_a_symmetrised_covariance() {
    let tmp = TempDir::new().unwrap();
    let ok = grassq(&tmp, "ok", "", &["verify"]);
    assert_eq!(ok.code(), 0, "{}", String::from_utf8_lossy(&ok.out.stdout));
    let report = ok.json("verify.json");
    assert_eq!(report["passed"], true);
    let names: Vec<&str> = report["invariants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["module"].as_str().unwrap())
        .collect();
    for module in [
        "exterior_algebra",
        "gaussian_state",
        "scale_calculus",
        "lattice_model",
        "flow_engine",
        "fbsde_solver",
        "fock_oracle",
    ] {
        assert!(names.contains(&module), "{module} missing");
    }

    let bad = grassq(
        &tmp,
        "bad",
        "[experiment.verify]\nfault = \"symmetrise_covariance\"\n",
        &["verify"],
    );
    assert_eq!(bad.code(), 1);
    let failed: Vec<String> = bad.json("verify.json")["invariants"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|i| i["pass"] == false)
        .map(|i| i["name"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(failed, ["covariance is antisymmetric"]);
}

#[test]
fn verify_pass_set_does_not_depend_on_the_seed() {
    let tmp = TempDir::new().unwrap();
    let pass_set = |run: &Run| -> Vec<(String, bool)> {
        run.json("verify.json")["invariants"]
            .as_array()
            .unwrap()
            .iter()
            .map(|i| {
                (
                    i["name"].as_str().unwrap().to_string(),
                    i["pass"].as_bool().unwrap(),
                )
            })
            .collect()
    };
    let a = grassq(&tmp, "a", "", &["verify", "--seed", "1"]);
    let b = grassq(&tmp, "b", "", &["verify", "--seed", "987654321"]);
    assert_eq!(pass_set(&a), pass_set(&b));
    assert_eq!(a.json("verify.json")["seed"], 1);
}

#[test]
fn flow_chemical_potential() {
    let tmp = TempDir::new().unwrap();
    let free = grassq(&tmp, "free", "[model]\nlambda = 0.0\n", &["flow"]);
    assert_eq!(free.code(), 0);
    assert!(col(&free.csv("flow_mu.csv"), 1).iter().all(|&m| m == 0.0));

    let mu = |tag: &str, cfg: &str| {
        let run = grassq(&tmp, tag, cfg, &["flow"]);
        assert_eq!(run.code(), 0);
        f(&run.json("flow_summary.json")["results"]["mu_t_max"])
    };
    let (m1, m2) = (
        mu("l1", "[model]\nlambda = 5e-4\n"),
        mu("l2", "[model]\nlambda = 1e-3\n"),
    );
    assert!((m2 / m1 - 2.0).abs() < 0.02, "ratio {}", m2 / m1);

    let fine = mu("fine", "[model]\nlambda = 1e-3\n[flow]\nstep = 0.0078125\n");
    assert!((fine - m2).abs() < 1e-8, "{fine} vs {m2}");
}

#[test]
fn quantise_errors_and_orders() {
    let tmp = TempDir::new().unwrap();
    let run = grassq(&tmp, "q", "", &["quantise", "--threads", "3"]);
    assert_eq!(run.code(), 0);
    let rows = run.csv("quantise.csv");
    let worst = |route: &str, m: &str| {
        rows.iter()
            .filter(|r| r[0] == route && r[2] == m)
            .map(|r| r[9].parse::<f64>().unwrap())
            .fold(0.0, f64::max)
    };
    let (e32, e64) = (worst("exact_hjb", "32"), worst("exact_hjb", "64"));
    assert!(e32 < 6.9e-6, "{e32}");
    assert!((0.4..=0.6).contains(&(e64 / e32)));
    assert_eq!(rows.len(), 3 * 2 * 16);
    // first order on the observables carrying the leading error
    let leading: Vec<f64> = rows
        .iter()
        .filter(|r| r[0] == "exact_hjb" && r[2] == "32" && r[9].parse::<f64>().unwrap() == e32)
        .map(|r| r[10].parse().unwrap())
        .collect();
    assert!(!leading.is_empty() && leading.iter().all(|o| (o - 1.0).abs() < 0.05));

    let serial = grassq(&tmp, "serial", "", &["quantise"]);
    assert_eq!(serial.bytes("quantise.csv"), run.bytes("quantise.csv"));

    let free = grassq(&tmp, "free", "[model]\nlambda = 0.0\n", &["quantise"]);
    assert!(col(&free.csv("quantise.csv"), 9).iter().all(|&e| e < 1e-12));
}

#[test]
fn quantise_capacity_gate() {
    let tmp = TempDir::new().unwrap();
    let big = grassq(
        &tmp,
        "big",
        "[model]\neps = 0.125\n[solver]\nintegrator = \"midpoint\"\n",
        &["quantise"],
    );
    assert_eq!(big.code(), 2);
    assert!(String::from_utf8_lossy(&big.out.stderr).contains("exceed the limit of 40"));
    assert!(!big.dir.join("quantise.csv").exists());
}

#[test]
fn decay_matches_the_free_covariance_at_zero_coupling() {
    let tmp = TempDir::new().unwrap();
    let run = grassq(&tmp, "d", "", &["decay"]);
    assert_eq!(run.code(), 0);
    let s = run.json("decay_summary.json");
    assert!(f(&s["results"]["r2"]) > 0.95);
    assert_eq!(f(&s["results"]["cross_covariance"]), 0.0);

    let free = grassq(&tmp, "free", "[model]\nlambda = 0.0\n", &["decay"]);
    let rate = f(&free.json("decay_summary.json")["results"]["rate"]);
    // fit ⟨ψ_{x↑−} ψ_{0↑+}⟩ read off the free Gram, field index 4x + 2σ + species
    let sched =
        LatticeSchedule::new(Geometry::build(1, 8, 1.0).unwrap(), Cutoffs::default(), 0.2).unwrap();
    let g = sched.gram(sched.t_max());
    let geom = sched.geometry();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for x in 0..=geom.n_sites() / 2 {
        xs.push(x as f64);
        ys.push(g[(4 * x + 1, 0)].norm().ln());
    }
    let oracle = -line_fit(&xs, &ys).slope;
    assert!(
        (rate - oracle).abs() < 1e-9 * oracle.abs(),
        "{rate} vs {oracle}"
    );
}

#[test]
fn kernels_report() {
    let tmp = TempDir::new().unwrap();
    let run = grassq(&tmp, "k", "", &["kernels"]);
    assert_eq!(run.code(), 0);
    assert_eq!(run.csv("kernels.csv").len(), 5);
    assert_eq!(run.csv("eps_difference.csv").len(), 16);
    let s = &run.json("kernels_summary.json")["results"];
    assert_eq!(s["stretched_decay_monotone"], true);
    assert!(f(&s["sup_slope"]) > 0.0 && f(&s["l1_slope"]) < 0.0);
}

#[test]
fn refine_identical_pair_and_default_path_deviation() {
    let tmp = TempDir::new().unwrap();
    let same = grassq(
        &tmp,
        "same",
        "[experiment.refine]\neps = [0.5, 0.5]\n",
        &["refine"],
    );
    let row = &same.csv("refine.csv")[0];
    assert_eq!(
        (
            row[2].parse::<f64>().unwrap(),
            row[3].parse::<f64>().unwrap()
        ),
        (0.0, 0.0)
    );

    let run = grassq(&tmp, "default", "", &["refine", "--threads", "2"]);
    assert!([0, 1].contains(&run.code()));
    let path = col(&run.csv("refine.csv"), 3);
    assert_eq!(path.len(), 2);
    assert!(path[1] < path[0]);
}

#[test]
fn configuration_and_convergence_exit_codes() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(
        grassq(&tmp, "gamma", "[model]\ngamma = 0.3\n", &["flow"]).code(),
        2
    );
    assert_eq!(
        grassq(&tmp, "key", "[model]\nlamda = 0.1\n", &["flow"]).code(),
        2
    );
    assert_eq!(grassq(&tmp, "none", "", &[]).code(), 2);
    assert_eq!(
        grassq(&tmp, "threads", "", &["flow", "--threads", "0"]).code(),
        2
    );
    assert_eq!(
        grassq(&tmp, "run", "[experiment]\nrun = \"decay\"\n", &[]).code(),
        0
    );
    let coarse = grassq(
        &tmp,
        "coarse",
        "[model]\neps = 0.25\n[flow]\nn = 1\nstep = 0.125\n",
        &["flow"],
    );
    assert_eq!(
        coarse.code(),
        3,
        "{}",
        String::from_utf8_lossy(&coarse.out.stderr)
    );
}

#[test]
fn output_dir_resolution_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!("output_dir = {:?}\n", tmp.path().join("from_file")),
    )
    .unwrap();
    let run = |env: Option<&Path>, out: Option<&Path>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_grassq"));
        cmd.arg("flow")
            .arg("--config")
            .arg(&cfg)
            .env_remove("GRASSQ_OUTPUT_DIR");
        if let Some(e) = env {
            cmd.env("GRASSQ_OUTPUT_DIR", e);
        }
        if let Some(o) = out {
            cmd.arg("--out").arg(o);
        }
        assert!(cmd.status().unwrap().success());
    };
    run(None, None);
    assert!(tmp.path().join("from_file/flow.csv").exists());
    run(Some(&tmp.path().join("from_env")), None);
    assert!(tmp.path().join("from_env/flow.csv").exists());
    run(
        Some(&tmp.path().join("ignored")),
        Some(&tmp.path().join("from_flag")),
    );
    assert!(tmp.path().join("from_flag/flow.csv").exists() && !tmp.path().join("ignored").exists());
    let a = std::fs::read(tmp.path().join("from_file/flow.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("from_flag/flow.csv")).unwrap();
    assert_eq!(a, b);
}
