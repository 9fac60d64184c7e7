//! Acceptance run: one line per criterion, nonzero exit if any fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use serde_json::{json, Value};
use svelift::coefficients::{CoefficientSpec, DiffusionSpec, DriftSpec};
use svelift::config::ExperimentConfig;
use svelift::discretize::ApproximatingComponent;
use svelift::dynamics::{
    forcing_term, l2_gap, simulate_lifted, simulate_volterra_direct, ComponentKernels, DirectWeights, Record,
};
use svelift::experiments::{run, Outcome};
use svelift::kernelbasis::make_expsum_basis;
use svelift::noise::NoisePlan;
use svelift::Error;

const CONFIGS: [&str; 12] = [
    "coupling_linear",
    "coupling_two_atoms",
    "ergodic_double_well",
    "ergodic_ou",
    "ipm_tf",
    "kernel_error_tf",
    "lift_independence",
    "lyapunov_atom",
    "lyapunov_tf",
    "simulate_ou",
    "stationarity_ou",
    "stationarity_transient",
];

struct Harness {
    pool: rayon::ThreadPool,
    outcomes: BTreeMap<&'static str, (Outcome, Duration)>,
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"))
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn load_value(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(config_path(name)).unwrap()).unwrap()
}

impl Harness {
    fn outcome(&mut self, name: &'static str) -> (Outcome, Duration) {
        if !self.outcomes.contains_key(name) {
            let cfg = load(name);
            let t0 = Instant::now();
            let o = self.pool.install(|| run(&cfg)).unwrap_or_else(|e| panic!("{name}: {e}"));
            self.outcomes.insert(name, (o, t0.elapsed()));
        }
        self.outcomes[name].clone()
    }

    fn run_json(&self, v: &Value) -> svelift::Result<Outcome> {
        let cfg = ExperimentConfig::from_json(&v.to_string())?;
        cfg.validate()?;
        self.pool.install(|| run(&cfg))
    }
}

type Check = (bool, String);

fn list(xs: &[f64], prec: usize) -> String {
    let items: Vec<String> = xs.iter().map(|x| format!("{x:.prec$e}")).collect();
    format!("[{}]", items.join(", "))
}

fn c1(h: &mut Harness) -> Check {
    let (o, dt) = h.outcome("kernel_error_tf");
    let d = o.verdict["max_rel_err"]["drift"].as_f64().unwrap();
    let s = o.verdict["max_rel_err"]["diffusion"].as_f64().unwrap();
    let ok = d <= 1e-2 && s <= 1e-2 && dt.as_secs_f64() < 10.0;
    (ok, format!("max rel err drift {d:.3e}, diffusion {s:.3e}, {:.2}s (run includes the ladder)", dt.as_secs_f64()))
}

fn c2(h: &mut Harness) -> Check {
    let (o, dt) = h.outcome("kernel_error_tf");
    let values: Vec<f64> = o.verdict["epsilon"]["values"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let decreasing = values.windows(2).all(|w| w[1] < w[0]) && values.len() == 5;
    let dt = dt.as_secs_f64();
    let mut v = load_value("kernel_error_tf");
    v["basis"] = json!({"expsum": {"terms": [
        {"rate": 0.5, "Mb": 1.0, "Ms": 2.0},
        {"rate": 3.0, "Mb": 0.5, "Ms": 1.0},
        {"rate": 40.0, "Mb": 2.0, "Ms": 0.25}]}});
    v["experiment"]["ladder"] = json!([4, 16, 64]);
    v["output"] = json!({"dir": "unused"});
    let pure = h.run_json(&v).unwrap();
    let zeros = pure.verdict["epsilon"]["values"].as_array().unwrap().iter().all(|x| x.as_f64() == Some(0.0));
    (
        decreasing && zeros && dt < 30.0,
        format!("eps ladder {}, expsum eps all exactly 0: {zeros}, {dt:.2}s", list(&values, 3)),
    )
}

fn c3(_: &mut Harness) -> Check {
    let h = 0.1;
    let rates = [0.0, 1.0, 3.5, 1e4];
    let terms: Vec<_> = rates
        .iter()
        .map(|&a| (a, DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)))
        .collect();
    let basis = Arc::new(make_expsum_basis(&terms).unwrap());
    let c = ApproximatingComponent::from_atoms(&basis).unwrap();
    let model = CoefficientSpec {
        drift: DriftSpec::Linear { beta: 0.0, c: None },
        diffusion: DiffusionSpec::Constant { s: 0.0 },
        truncation: None,
    }
    .build(1)
    .unwrap();
    let z0: Vec<f64> = (0..c.len()).map(|i| 1.0 + i as f64 * 0.75).collect();
    let nodes = c.nodes();
    let plan = NoisePlan::new(5, h, 20.0, 1).unwrap();
    let path = simulate_lifted(&c, &model, &z0, &plan, 0, Record { every: 1, states: true }).unwrap();
    let mut worst: f64 = 0.0;
    let mut zeros_exact = true;
    for (t, z) in path.times.iter().zip(path.states.as_ref().unwrap()) {
        for i in 0..c.len() {
            let exact = (-nodes[i] * t).exp() * z0[i];
            if exact == 0.0 {
                zeros_exact &= z[i] == 0.0;
            } else {
                worst = worst.max(((z[i] - exact) / exact).abs());
            }
        }
    }
    let stiff = nodes.iter().fold(0.0f64, |m, a| m.max(a * h));
    let ok = worst <= 10.0 * f64::EPSILON && zeros_exact;
    (ok, format!("worst relative error {worst:.2e} (limit {:.2e}), max a*h = {stiff:.0}, underflowed states exact: {zeros_exact}", 10.0 * f64::EPSILON))
}

fn c4(h: &mut Harness) -> Check {
    let (o, dt) = h.outcome("simulate_ou");
    let t = &o.verdict["terminal"][0];
    let (var, se) = (t["var"].as_f64().unwrap(), t["se_var"].as_f64().unwrap());
    let ok = (var - 0.5).abs() <= 3.0 * se && dt.as_secs_f64() < 120.0;
    (ok, format!("variance {var:.4} ± {se:.4} vs 0.5, {:.2}s", dt.as_secs_f64()))
}

fn c5(h: &mut Harness) -> Check {
    let terms = [
        (1.0, DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)),
        (4.0, DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 0.75)),
    ];
    let basis = Arc::new(make_expsum_basis(&terms).unwrap());
    let c = ApproximatingComponent::from_atoms(&basis).unwrap();
    let model = CoefficientSpec {
        drift: DriftSpec::Tanh { beta: 1.0, amp: 1.0 },
        diffusion: DiffusionSpec::Modulated { s0: 1.0, s1: 0.25 },
        truncation: None,
    }
    .build(1)
    .unwrap();
    let z0 = vec![0.5; c.len()];
    let gap = |step: f64| {
        let plan = NoisePlan::new(21, step, 2.0, 1).unwrap();
        let w = DirectWeights::new(&ComponentKernels(&c), step, plan.steps()).unwrap();
        let sq: Vec<f64> = h.pool.install(|| {
            use rayon::prelude::*;
            (0..32u64)
                .into_par_iter()
                .map(|tr| {
                    let lifted = simulate_lifted(&c, &model, &z0, &plan, tr, Record::default()).unwrap();
                    let direct =
                        simulate_volterra_direct(&w, &model, &|t| forcing_term(&c, &z0, t), &plan, tr).unwrap();
                    l2_gap(&lifted.x, &direct).powi(2)
                })
                .collect()
        });
        (sq.iter().sum::<f64>() / 32.0).sqrt()
    };
    let gaps: Vec<f64> = (4..=7).map(|p| gap(0.5f64.powi(p))).collect();
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.iter().all(|r| *r >= 1.2);
    (ok, format!("gaps {}, halving ratios {ratios:.3?}", list(&gaps, 3)))
}

fn c6(h: &mut Harness) -> Check {
    let (o, _) = h.outcome("coupling_two_atoms");
    let eps = o.verdict["constants"]["epsilon"].as_f64().unwrap();
    let certified = o.verdict["constants"]["certified"].as_bool().unwrap();
    let contraction = o.verdict["bounds"]["contraction"] == "pass";
    let kl = o.verdict["bounds"]["kl"] == "pass";
    let (lin, _) = h.outcome("coupling_linear");
    let r = lin.verdict["r_hat"].as_f64().unwrap();
    let rate = lin.verdict["rate_check"].as_bool().unwrap();
    let ok = certified && eps <= 0.5 && contraction && kl && rate;
    (ok, format!("epsilon {eps:.3e}, envelope {contraction}, KL {kl}; linear r_hat {r:.5} vs 3 within 1%: {rate}"))
}

fn c7(h: &mut Harness) -> Check {
    let (o, _) = h.outcome("ergodic_ou");
    let r = o.verdict["r_hat"].as_f64().unwrap();
    let se = o.verdict["r_se"].as_f64().unwrap();
    let ou = (r - 1.0).abs() <= 3.0 * se;
    let (dw, _) = h.outcome("ergodic_double_well");
    let lyap = dw.verdict["lyapunov_pass"].as_bool().unwrap();
    let rd = dw.verdict["r_hat"].as_f64().unwrap();
    let below = dw.verdict["final_below_floor"].as_bool().unwrap();
    let ok = ou && lyap && rd > 0.0 && below;
    (
        ok,
        format!(
            "OU r_hat {r:.4} ± {se:.4}; double well lyapunov {lyap}, r_hat {rd:.4}, final W1 {:.3e} vs floor {:.3e}",
            dw.verdict["final_w1"].as_f64().unwrap(),
            dw.verdict["final_floor"].as_f64().unwrap()
        ),
    )
}

fn c8(h: &mut Harness) -> Check {
    let (atom, _) = h.outcome("lyapunov_atom");
    let i_atom = atom.verdict["I"].as_f64().unwrap();
    let pass_half = atom.pass;
    let mut v = load_value("lyapunov_atom");
    v["coefficients"]["drift"]["beta"] = json!(-1.0);
    let one = h.run_json(&v).unwrap();
    let (tf, _) = h.outcome("lyapunov_tf");
    let i_tf = tf.verdict["I"].as_f64().unwrap();
    let target = 2f64.powf(-0.5);
    let ok = i_atom == 1.0 && pass_half && !one.pass && (i_tf - target).abs() <= 1e-6;
    (
        ok,
        format!(
            "atom I = {i_atom}, gamma 0.5 pass {pass_half}, gamma 1 pass {}; TF I = {i_tf:.10} vs {target:.10}",
            one.pass
        ),
    )
}

fn c9(h: &mut Harness) -> Check {
    let base = load_value("stationarity_ou");
    let mut rejected = 0;
    let seeds = 100;
    for s in 0..seeds {
        let mut v = base.clone();
        v["rng"] = json!({"seed": 1000 + s, "trajectories": 2048});
        if !h.run_json(&v).unwrap().pass {
            rejected += 1;
        }
    }
    let rate = rejected as f64 / seeds as f64;
    let (tr, _) = h.outcome("stationarity_transient");
    let ok = rate <= 0.05 && !tr.pass;
    (ok, format!("false positives {rejected}/{seeds} at N = 2048; transient start rejected: {}", !tr.pass))
}

fn c10(h: &mut Harness) -> Check {
    let (o, _) = h.outcome("lift_independence");
    let r = &o.verdict["report"];
    let (w1, floor, bias) = (r["w1"].as_f64().unwrap(), r["null"]["floor"].as_f64().unwrap(), r["bias"].as_f64().unwrap());
    let mut v = load_value("lift_independence");
    v["experiment"]["basis_b"] = json!({"expsum": {"terms": [{"rate": 2.0, "Mb": 1.0, "Ms": 1.0}]}});
    let mismatch = h.run_json(&v);
    let rejected = matches!(&mismatch, Err(Error::Invalid { field, .. }) if field == "basis_b");
    let ok = o.pass && w1 <= floor + bias && rejected;
    (ok, format!("W1 {w1:.3e} <= floor {floor:.3e} + bias {bias:.3e}; mismatched kernel rejected: {rejected}"))
}

fn c11(h: &mut Harness) -> Check {
    let (o, dt) = h.outcome("ipm_tf");
    let r = &o.verdict["report"];
    let rho = r["spearman"].as_f64().unwrap_or(f64::NAN);
    let coarse = r["coarse_above_floor"].as_bool().unwrap();
    let ok = o.pass && rho > 0.0 && coarse && dt.as_secs_f64() < 900.0;
    (ok, format!("Spearman {rho:.3}, coarsest above floor {coarse}, {:.2}s", dt.as_secs_f64()))
}

fn c12(h: &mut Harness) -> Check {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut differing = vec![];
    let mut compared = 0;
    for name in CONFIGS {
        let reference = h.outcome(name).0.files;
        let cfg = load(name);
        let again = single.install(|| run(&cfg)).unwrap();
        for ((fa, ca), (fb, cb)) in reference.iter().zip(&again.files) {
            compared += 1;
            if fa != fb || ca != cb {
                differing.push(format!("{name}/{fa}"));
            }
        }
        if reference.len() != again.files.len() {
            differing.push(format!("{name}: file count"));
        }
    }
    (differing.is_empty(), format!("{compared} result files compared at 1 vs 3 threads, differing: {differing:?}"))
}

fn main() {
    let mut h = Harness {
        pool: rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap(),
        outcomes: BTreeMap::new(),
    };
    let checks: [(&str, fn(&mut Harness) -> Check); 12] = [
        ("kernel reconstruction", c1),
        ("epsilon ladder", c2),
        ("integrator exactness", c3),
        ("OU stationary variance", c4),
        ("lift vs direct Volterra", c5),
        ("coupling contraction and KL", c6),
        ("ergodic decay", c7),
        ("Lyapunov ground truth", c8),
        ("stationarity calibration", c9),
        ("lift independence", c10),
        ("IPM convergence trend", c11),
        ("thread determinism", c12),
    ];
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let t0 = Instant::now();
        let (ok, detail) = f(&mut h);
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<28} {}  {detail} [{:.1}s]",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{} passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
