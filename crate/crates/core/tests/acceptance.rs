//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p gmfc-core --test acceptance`.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gmfc_core::cli::{run, Cli};
use gmfc_core::controls::{InteractionControl, PairActions, Phi, RelaxedInteractionControl};
use gmfc_core::dynamics::{
    build_interaction_sets, simulate, Controls, InitSpec, ModelSpec, ParticleEnsemble, SimConfig,
};
use gmfc_core::experiments::{
    convergence_sweep, example1_sweep, jensen_gap, run_example1, run_example2, Example1Spec, Example2Spec, Verdict,
};
use gmfc_core::kernels::{
    cut_distance, cut_norm_exact, cut_norm_lower_bound, sample_from_graphon, AnalyticGraphon, CutMethod, MarkSpace,
    StepKernel, WeightedStepKernel,
};
use gmfc_core::metrics::{mc_summary, min_cost_assignment, w1_assignment, w1_sorted, EmpiricalMeasure};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, elapsed: Duration, o: &Outcome) {
    println!(
        "{} [{id}] {name}: {} ({:.2}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
}

fn cut_norm_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut agree, mut exceed) = (0, 0);
    for k in 0..200 {
        let n = rng.random_range(2..=12);
        let values: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = WeightedStepKernel::uniform(n, values).expect("valid kernel");
        let exact = cut_norm_exact(&m).expect("below cap");
        let lower = cut_norm_lower_bound(&m, 32, k);
        if lower > exact + 1e-12 {
            exceed += 1;
        }
        if (lower - exact).abs() <= 1e-12 {
            agree += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        agree >= 190 && exceed == 0 && secs < 10.0,
        format!("agree {agree}/200 (need 190), exceed {exceed}, {secs:.2}s of 10s"),
    )
}

fn kernel_convergence() -> Outcome {
    let start = Instant::now();
    let g = AnalyticGraphon::product();
    let reference = sample_from_graphon(&g, 128).expect("sampled");
    let mut values = Vec::new();
    let mut ok = true;
    for n in [4, 8, 16, 32, 64] {
        let k = sample_from_graphon(&g, n).expect("sampled");
        let c = cut_distance(&k, &reference, &|x: &[f64]| x[0]);
        ok &= c.method == CutMethod::Exact && c.value <= 2.0 / n as f64;
        if let Some(&prev) = values.last() {
            ok &= c.value < prev;
        }
        values.push(c.value);
    }
    let secs = start.elapsed().as_secs_f64();
    let shown: Vec<String> = values.iter().map(|v| format!("{v:.5}")).collect();
    outcome(
        ok && secs < 5.0,
        format!("distances [{}] vs 2/n, {secs:.2}s of 5s", shown.join(", ")),
    )
}

fn interaction_measures() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut failures = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=3);
        let e = rng.random_range(1..=2);
        let states: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ens = ParticleEnsemble::new(d, states, 0.25).expect("ensemble");
        let marks: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| (0..e).map(|_| rng.random_range(0.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let kernel = StepKernel::from_matrix(&marks, MarkSpace::new(vec![0.0; e], vec![1.0; e]).expect("space"))
            .expect("kernel");
        let actions: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let pairs = PairActions::from_fn(n, |i, j| actions[i * n + j]);
        let sets = build_interaction_sets(&ens, &pairs, &kernel).expect("sets");
        let labels: Vec<f64> = (0..n).map(|j| ens.label(j)).collect();
        for (i, s) in sets.iter().enumerate() {
            let row: Vec<f64> = (0..n).flat_map(|j| kernel.mark(i, j).to_vec()).collect();
            let out_actions: Vec<f64> = (0..n).map(|j| actions[i * n + j]).collect();
            let in_actions: Vec<f64> = (0..n).map(|j| actions[j * n + i]).collect();
            let good = [&s.outgoing, &s.incoming]
                .iter()
                .all(|m| m.state.as_slice() == ens.states() && m.label == labels && m.mark == row)
                && s.outgoing.action == out_actions
                && s.incoming.action == in_actions;
            if !good {
                failures += 1;
            }
        }
    }
    outcome(
        failures == 0,
        format!("{failures} agent measures differ across 100 ensembles"),
    )
}

fn brownian_sanity() -> Outcome {
    let start = Instant::now();
    let model = ModelSpec::brownian(1);
    let gamma = InteractionControl::constant(0.0, model.int_box.clone()).expect("control");
    let controls = Controls::interaction_only(gamma, &model);
    let kernel = sample_from_graphon(&AnalyticGraphon::constant(1.0), 256).expect("kernel");
    let cfg = SimConfig::new(256, 1.0, 0.01, 64, 5);
    let out = simulate(&model, &controls, &kernel, &InitSpec::Dirac(vec![0.0]), &cfg).expect("simulated");
    // agents are independent, so per-replication means are i.i.d.
    let per_rep: Vec<f64> = out
        .trajectories
        .iter()
        .map(|t| t.final_states().iter().map(|x| x * x).sum::<f64>() / 256.0)
        .collect();
    let s = mc_summary(&per_rep);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        (s.mean - 1.0).abs() <= 4.0 * s.stderr && secs < 30.0,
        format!("mean X_T^2 = {:.5} +- {:.5}, {secs:.2}s of 30s", s.mean, s.stderr),
    )
}

fn propagation_of_chaos() -> Outcome {
    let start = Instant::now();
    let spec = example1_sweep(vec![50, 100, 200, 400], 3200);
    let cfg = SimConfig::new(50, 1.0, 0.01, 32, 0);
    let r = convergence_sweep(&spec, &cfg).expect("sweep");
    let dist = r.column("distance").expect("distance");
    let gap = r.column("abs_J_diff").expect("gap");
    let secs = start.elapsed().as_secs_f64();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    outcome(
        r.verdict == Verdict::Pass && secs < 600.0,
        format!(
            "W1 [{}], |J_n - J_ref| [{}], verdict {}, {secs:.1}s of 600s",
            fmt(&dist),
            fmt(&gap),
            r.verdict
        ),
    )
}

fn bang_bang_optimality() -> Outcome {
    let start = Instant::now();
    let cfg = SimConfig::new(200, 1.0, 0.01, 64, 0);
    let init = InitSpec::Gaussian { mean: 0.0, std: 1.0 };
    let r = run_example1(&Example1Spec::new(Phi::TanhDiff { scale: 1.0 }, init.clone()), &cfg).expect("example 1");
    let j = |row: &str| r.value(row, "J_mean").expect("row");
    let se = |row: &str| r.value(row, "diff_stderr").expect("row");
    let best = j("bang_bang");
    let baselines = ["zero", "one", "flipped", "random_pair"];
    let dominates = baselines.iter().all(|b| best >= j(b) - 3.0 * se(b));
    let degenerate = run_example1(&Example1Spec::new(Phi::Constant(-1.0), init), &cfg).expect("example 1");
    let equal = degenerate.value("bang_bang", "J_mean") == degenerate.value("zero", "J_mean")
        && degenerate
            .rows
            .iter()
            .any(|row| row[0] == "zero" && row.last().is_some_and(|v| v == "true"));
    let secs = start.elapsed().as_secs_f64();
    let shown: Vec<String> = baselines.iter().map(|b| format!("{b} {:.4}", j(b))).collect();
    outcome(
        dominates && equal && secs < 300.0,
        format!(
            "J(bang_bang) {best:.4} vs {}; Phi=-1 equal to zero control: {equal}; {secs:.1}s of 300s",
            shown.join(", ")
        ),
    )
}

fn jensen_projection() -> Outcome {
    let start = Instant::now();
    let cfg = SimConfig::new(100, 1.0, 0.01, 64, 0);
    let run = |linear: f64, quadratic: f64| {
        let model = ModelSpec::example2(linear, quadratic, 1.0);
        let gbar = RelaxedInteractionControl::from_params("echo_v", &[], model.int_box.clone()).expect("gbar");
        let r = run_example2(&Example2Spec::new(model, gbar), &cfg).expect("example 2");
        (
            r.value("gap", "value").expect("gap"),
            r.value("gap", "stderr").expect("gap"),
        )
    };
    // one step of the oracle: V ~ U[0,1], L(e) = -e^2, so L(E V) - E L(V) = -1/4 + 1/3
    let closed_form = 1.0 / 12.0;
    let quadrature = jensen_gap(&|e| -e * e, 0.0, 1.0, 1.0, 4096);
    let (g, se) = run(0.0, 1.0);
    let (g_lin, se_lin) = run(1.0, 0.0);
    let secs = start.elapsed().as_secs_f64();
    let ok = g > 0.0
        && (g - closed_form).abs() <= 3.0 * se
        && (quadrature - closed_form).abs() < 1e-6
        && g_lin.abs() <= 3.0 * se_lin
        && secs < 120.0;
    outcome(
        ok,
        format!(
            "concave gap {g:.5} +- {se:.5} vs {closed_form:.5}; linear gap {g_lin:.5} +- {se_lin:.5}; {secs:.1}s of 120s"
        ),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let cli = Cli::try_parse_from(args).expect("arguments parse");
    run(&cli, &mut Vec::new(), &mut Vec::new())
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("readable").flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                let rel = p.strip_prefix(dir).expect("inside").display().to_string();
                out.push((rel, fs::read(&p).expect("readable")));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tmp.path().join("config.toml");
    fs::write(
        &config,
        "seed = 42\n[model]\nid = \"example1\"\n[sim]\nn = 40\nT = 0.5\ndt = 0.02\nreps = 8\nstore_stride = 5\n\
         [init]\nfamily = \"gaussian\"\nparams = [0.0, 1.0]\n[sweep]\nns = [10, 20]\nref_n = 80\n",
    )
    .expect("write config");
    let config2 = tmp.path().join("config2.toml");
    fs::write(
        &config2,
        "seed = 42\n[model]\nid = \"example2\"\n[sim]\nn = 30\nT = 0.5\ndt = 0.02\nreps = 8\n",
    )
    .expect("write config");
    let mut outputs = Vec::new();
    for workers in ["1", "4"] {
        let out = tmp.path().join(format!("w{workers}"));
        let o = out.to_str().expect("utf-8");
        let c = config.to_str().expect("utf-8");
        let c2 = config2.to_str().expect("utf-8");
        let mut codes = vec![run_cli(&[
            "gmfc",
            "--config",
            c,
            "--out",
            o,
            "--workers",
            workers,
            "simulate",
        ])];
        for id in ["example1", "converge"] {
            codes.push(run_cli(&[
                "gmfc",
                "--config",
                c,
                "--out",
                o,
                "--workers",
                workers,
                "experiment",
                id,
            ]));
        }
        codes.push(run_cli(&[
            "gmfc",
            "--config",
            c2,
            "--out",
            o,
            "--workers",
            workers,
            "experiment",
            "example2",
        ]));
        outputs.push((codes, csv_files(&out)));
    }
    let same = outputs[0] == outputs[1];
    let files = outputs[0].1.len();
    outcome(
        same && files >= 6,
        format!(
            "{files} CSV files, exit codes {:?} / {:?}, identical: {same}",
            outputs[0].0, outputs[1].0
        ),
    )
}

fn brute_force_w1(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, best: &mut f64, cost: &dyn Fn(&[usize]) -> f64) {
        if k == perm.len() {
            *best = best.min(cost(perm));
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(k + 1, perm, best, cost);
            perm.swap(k, i);
        }
    }
    let m = a.len();
    let dist = |i: usize, j: usize| -> f64 {
        a.atom(i)
            .iter()
            .zip(b.atom(j))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut best = f64::INFINITY;
    let mut perm: Vec<usize> = (0..m).collect();
    permute(0, &mut perm, &mut best, &|p: &[usize]| {
        p.iter().enumerate().map(|(i, &j)| dist(i, j)).sum::<f64>() / m as f64
    });
    best
}

fn wasserstein_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut worst, mut sorted_mismatch, mut hungarian_1d) = (0.0f64, 0, 0.0f64);
    for _ in 0..100 {
        let m = rng.random_range(1..=8);
        let d = rng.random_range(1..=3);
        let xs: Vec<f64> = (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = EmpiricalMeasure::new(d, xs.clone()).expect("measure");
        let b = EmpiricalMeasure::new(d, ys.clone()).expect("measure");
        let w = w1_assignment(&a, &b).expect("w1");
        worst = worst.max((w - brute_force_w1(&a, &b)).abs());
        if d == 1 {
            if w != w1_sorted(&xs, &ys).expect("w1") {
                sorted_mismatch += 1;
            }
            // the matching solver on its own, without the 1-d dispatch
            let cost: Vec<f64> = (0..m * m).map(|k| (xs[k / m] - ys[k % m]).abs()).collect();
            let p = min_cost_assignment(&cost, m);
            let h = (0..m).map(|i| cost[i * m + p[i]]).sum::<f64>() / m as f64;
            hungarian_1d = hungarian_1d.max((h - w).abs());
        }
    }
    outcome(
        worst <= 1e-10 && sorted_mismatch == 0 && hungarian_1d <= 1e-12,
        format!(
            "max |assignment - brute force| {worst:.2e}; 1-d mismatches vs sorted {sorted_mismatch}; \
             matching solver on 1-d within {hungarian_1d:.2e}"
        ),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 9] = [
        ("cut norm lower bound vs exact enumeration", cut_norm_oracle),
        ("step-kernel convergence for the product graphon", kernel_convergence),
        (
            "interaction measures match the population and kernel rows",
            interaction_measures,
        ),
        ("Brownian second moment", brownian_sanity),
        ("propagation of chaos sweep", propagation_of_chaos),
        ("bang-bang optimality against baselines", bang_bang_optimality),
        ("Jensen gain of the barycentric projection", jensen_projection),
        ("byte-identical CSVs at 1 and 4 workers", determinism),
        ("W1 assignment vs brute force", wasserstein_oracle),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        report(k + 1, name, start.elapsed(), &o);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
