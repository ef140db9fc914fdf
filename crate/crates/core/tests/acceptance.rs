//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use robust_surv::cli;
use robust_surv::data::{load_csv, stratified_split};
use robust_surv::eval::aggregate::{friedman_test, BlockTable, Metric};
use robust_surv::eval::sweep::{attack_sweep, censoring_km, Attack, MetricRecord, SweepConfig};
use robust_surv::nn::Network;
use robust_surv::objectives::{certified_upper_loss, combined_loss, Batch, LossParams};
use robust_surv::selftest::{self, random_net};
use robust_surv::survival::SurvRecord;
use robust_surv::trainer::{eps_schedule, train, Method, TrainConfig, TrainReport};

struct Outcome {
    passed: bool,
    detail: String,
}

fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(format!("{name}.csv"))
}

// ---- 1 & 2: bound soundness and tightness ----

fn bounds(seed: u64) -> (Outcome, Outcome) {
    let started = Instant::now();
    // split the 1000 networks over threads; each chunk has its own stream
    let parts: Vec<_> = (0..10u64)
        .into_par_iter()
        .map(|k| selftest::bound_stats(seed * 1000 + k, 100, 101))
        .collect();
    let secs = started.elapsed().as_secs_f64();
    let balls: usize = parts.iter().map(|p| p.balls).sum();
    let violations: usize = parts.iter().map(|p| p.violations).sum();
    let looser: usize = parts.iter().map(|p| p.looser).sum();
    let (sound, tight) = (violations == 0, looser == 0);
    let detail = |what: String| format!("{balls} balls (1000 nets x 3 radii), 101x101 grid incl. corners: {what}; {secs:.1}s");
    (
        Outcome {
            passed: sound && secs < 120.0,
            detail: detail(format!("{violations} containment violations")),
        },
        Outcome {
            passed: tight,
            detail: detail(format!("{looser} balls with CROWN-IBP wider than IBP")),
        },
    )
}

// ---- 3: certified loss dominance ----

fn corner(center: &[f64], eps: f64, mask: u64) -> Vec<f64> {
    center
        .iter()
        .enumerate()
        .map(|(k, &c)| if mask >> k & 1 == 1 { c + eps } else { c - eps })
        .collect()
}

fn dominance(seed: u64) -> Outcome {
    let started = Instant::now();
    let results: Vec<(usize, f64)> = (0..50u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t << 8));
            let n = rng.gen_range(2..=4);
            let d = rng.gen_range(1..=3);
            let net = random_net(&[d, 8, 8, 1], &mut rng);
            let records: Vec<SurvRecord> = (0..n)
                .map(|_| {
                    SurvRecord::new(
                        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        rng.gen_range(0.1..3.0),
                        rng.gen_bool(0.6),
                    )
                    .unwrap()
                })
                .collect();
            let batch = Batch::from_records(&records).unwrap();
            let eps = rng.gen_range(0.01..0.5);
            let params = LossParams::for_batch_size(n);
            let bound = certified_upper_loss(&net, &batch, eps, params).unwrap().value;
            let flat: Vec<f64> = (0..n).flat_map(|i| batch.row(i).to_vec()).collect();
            let eval = |x: &[f64]| {
                let mut b = batch.clone();
                for i in 0..n {
                    b.row_mut(i).copy_from_slice(&x[i * d..(i + 1) * d]);
                }
                combined_loss(&net, &b, params).unwrap()
            };
            let mut violations = 0;
            let mut worst_gap = f64::INFINITY;
            let mut check = |x: &[f64]| {
                let v = eval(x);
                worst_gap = worst_gap.min(bound - v);
                violations += usize::from(v > bound);
            };
            for _ in 0..10_000 {
                let x: Vec<f64> = flat.iter().map(|c| c + rng.gen_range(-eps..=eps)).collect();
                check(&x);
            }
            for mask in 0..1u64 << (n * d) {
                check(&corner(&flat, eps, mask));
            }
            (violations, worst_gap)
        })
        .collect();
    let violations: usize = results.iter().map(|r| r.0).sum();
    let gap = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        passed: violations == 0 && secs < 120.0,
        detail: format!("50 triples, 10^4 samples + all corners each: {violations} violations, smallest margin {gap:.3e}; {secs:.1}s"),
    }
}

// ---- 4 & 5: gradients and metric oracles ----

fn gradients(seed: u64) -> Outcome {
    let r = selftest::gradient_agreement(seed, 100);
    Outcome {
        passed: r.passed,
        detail: format!("100 instances x 5 methods: {}", r.detail),
    }
}

fn metric_oracles(seed: u64) -> Outcome {
    let checks = [
        selftest::concordance_oracle(seed, 50),
        selftest::km_fixture(),
        selftest::brier_fixture(),
        selftest::ibs_fixture(),
    ];
    Outcome {
        passed: checks.iter().all(|c| c.passed),
        detail: checks
            .iter()
            .map(|c| format!("{} {}", c.name, if c.passed { "ok" } else { "FAILED" }))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

// ---- training runs shared by 6, 7 and 8 ----

struct Run {
    dataset: String,
    method: Method,
    config: TrainConfig,
    report: TrainReport,
    records: Vec<MetricRecord>,
}

fn train_and_sweep(dataset: &str, method: Method, seed: u64, eps_grid: &[f64]) -> Run {
    let raw = load_csv(data_path(dataset)).unwrap();
    let config = TrainConfig {
        method,
        seed,
        ..TrainConfig::default()
    };
    let split = stratified_split(&raw, seed, config.normalize_all).unwrap();
    let (net, report): (Network, TrainReport) = train(&config, &split).unwrap();
    let km = censoring_km(&split.train).unwrap();
    let cfg = SweepConfig {
        dataset: dataset.into(),
        method: method.as_str().into(),
        seed,
        loss_params: config.loss_params(),
        step_rule: config.step_rule(),
        curves: false,
    };
    let records = attack_sweep(&net, &split.test, &km, Attack::WorstCase, eps_grid, &cfg)
        .unwrap()
        .records;
    Run {
        dataset: dataset.into(),
        method,
        config,
        report,
        records,
    }
}

fn value(run: &Run, eps: f64, metric: Metric) -> f64 {
    let r = run.records.iter().find(|r| r.eps == eps).unwrap();
    metric.score(r)
}

fn reproduction(runs: &[Run], secs: f64) -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let get = |m: Method| {
            runs.iter()
                .find(|r| r.dataset == "retinopathy" && r.method == m && r.config.seed == seed)
                .unwrap()
        };
        let (b, s) = (get(Method::Baseline), get(Method::Sawar));
        let ci = (value(b, 0.0, Metric::Ci), value(s, 0.0, Metric::Ci));
        let ibs = (value(b, 0.5, Metric::Ibs), value(s, 0.5, Metric::Ibs));
        let nll = (value(b, 1.0, Metric::Negll), value(s, 1.0, Metric::Negll));
        let pass = (0.60..=0.70).contains(&ci.0)
            && (0.60..=0.70).contains(&ci.1)
            && ibs.0 - ibs.1 >= 0.15
            && nll.1 < 2e3
            && nll.0 > 5e3;
        ok &= pass;
        lines.push(format!(
            "seed {seed}: CI {:.3}/{:.3}, IBS@0.5 {:.3}/{:.3}, NegLL@1 {:.3e}/{:.3e}{}",
            ci.0,
            ci.1,
            ibs.0,
            ibs.1,
            nll.0,
            nll.1,
            if pass { "" } else { " (miss)" }
        ));
    }
    Outcome {
        passed: ok && secs < 600.0,
        detail: format!("baseline/sawar on retinopathy, {secs:.0}s: {}", lines.join("; ")),
    }
}

fn rank_direction(runs: &[Run]) -> Outcome {
    let records: Vec<MetricRecord> = runs
        .iter()
        .filter(|r| r.config.seed == 0)
        .flat_map(|r| r.records.iter().cloned())
        .collect();
    let table = BlockTable::build(&records).unwrap();
    let eps = [0.3, 0.5, 0.7];
    let sawar = table.methods.iter().position(|m| m == "sawar").unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for metric in [Metric::Ibs, Metric::Negll] {
        let blocks = table.oriented_blocks(Attack::WorstCase, metric, Some(&eps));
        let ranks = BlockTable::mean_ranks(&blocks);
        let best_other = ranks
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != sawar)
            .map(|(_, r)| *r)
            .fold(f64::INFINITY, f64::min);
        let friedman = friedman_test(&blocks).unwrap();
        let pass = ranks[sawar] < best_other && friedman.p_value < 0.05;
        ok &= pass;
        let listing: Vec<String> = table
            .methods
            .iter()
            .zip(&ranks)
            .map(|(m, r)| format!("{m} {r:.2}"))
            .collect();
        parts.push(format!(
            "{} over {} blocks: {} (Friedman p = {:.2e})",
            metric.as_str(),
            blocks.len(),
            listing.join(", "),
            friedman.p_value
        ));
    }
    Outcome {
        passed: ok && table.datasets().len() >= 3,
        detail: parts.join("; "),
    }
}

fn scheduler(runs: &[Run]) -> Outcome {
    let cfg = TrainConfig::default();
    let w = cfg.warmup_epochs;
    let anchors = eps_schedule(&cfg, w) == 0.0
        && eps_schedule(&cfg, w + 30) == 0.5
        && eps_schedule(&cfg, w + 15) == 0.25
        && (0..w).all(|e| eps_schedule(&cfg, e) == 0.0)
        && (w + 30..cfg.max_epochs).all(|e| eps_schedule(&cfg, e) == 0.5);
    let early = runs
        .iter()
        .filter(|r| {
            r.report.best_epoch < r.config.first_full_eps_epoch()
                || r.report.rows[r.report.best_epoch].eps != r.config.eps_max
                || r.report.rows.iter().any(|row| row.eligible && row.eps != r.config.eps_max)
        })
        .count();
    Outcome {
        passed: anchors && early == 0,
        detail: format!(
            "anchors {}; {} of {} runs selected a checkpoint before eps_max",
            if anchors { "exact" } else { "WRONG" },
            early,
            runs.len()
        ),
    }
}

// ---- 9: determinism through the command-line entry point ----

fn run_cli(args: &[&str]) -> i32 {
    cli::run(std::iter::once("robust-surv").chain(args.iter().copied()))
}

fn read(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_default()
}

fn determinism() -> Outcome {
    let selftest_same = selftest::run_all(0) == selftest::run_all(0);
    let data = data_path("retinopathy");
    let data = data.to_str().unwrap();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let model_dir = dir.path().join("m");
        let eval_dir = dir.path().join("e");
        let m = model_dir.to_str().unwrap();
        let e = eval_dir.to_str().unwrap();
        let model = model_dir.join("model.json");
        let codes = [
            run_cli(&["train", "--dataset", data, "--method", "sawar", "--seed", "7", "--out", m]),
            run_cli(&[
                "evaluate", "--model", model.to_str().unwrap(), "--dataset", data,
                "--attack", "fgsm,worstcase", "--out", e, "--jobs", "3",
            ]),
        ];
        let mut files = vec![model_dir.join("model.json"), model_dir.join("train_report.csv"), eval_dir.join("metrics.csv")];
        let mut curves: Vec<PathBuf> = std::fs::read_dir(eval_dir.join("curves"))
            .map(|d| d.map(|f| f.unwrap().path()).collect())
            .unwrap_or_default();
        curves.sort();
        files.extend(curves);
        let bytes: Vec<(String, Vec<u8>)> = files
            .iter()
            .map(|f| (f.strip_prefix(dir.path()).unwrap().display().to_string(), read(f)))
            .collect();
        outputs.push((codes, bytes));
    }
    let codes_ok = outputs.iter().all(|(c, _)| c.iter().all(|&c| c == 0));
    let same = outputs[0].1 == outputs[1].1 && outputs[0].1.iter().all(|(_, b)| !b.is_empty());
    Outcome {
        passed: selftest_same && codes_ok && same,
        detail: format!(
            "selftest {}; train + fgsm/worstcase sweep: {} files {}",
            if selftest_same { "identical" } else { "differs" },
            outputs[0].1.len(),
            if same && codes_ok { "byte-identical" } else { "differ or missing" }
        ),
    }
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();

    let (c1, c2) = bounds(1);
    results.push((1, "bound soundness", c1));
    results.push((2, "tightness ordering", c2));
    results.push((3, "certified-loss dominance", dominance(3)));
    results.push((4, "gradient correctness", gradients(4)));
    results.push((5, "metric oracles", metric_oracles(5)));

    let eps_grid = [0.0, 0.3, 0.5, 0.7, 1.0];
    let started = Instant::now();
    let mut jobs: Vec<(&str, Method, u64)> = (0..3)
        .flat_map(|s| [("retinopathy", Method::Baseline, s), ("retinopathy", Method::Sawar, s)])
        .collect();
    let repro_jobs = jobs.len();
    for d in ["retinopathy", "stagec", "zinc"] {
        for m in Method::ALL {
            if !(d == "retinopathy" && matches!(m, Method::Baseline | Method::Sawar)) {
                jobs.push((d, m, 0));
            }
        }
    }
    let repro: Vec<Run> = jobs[..repro_jobs]
        .par_iter()
        .map(|&(d, m, s)| train_and_sweep(d, m, s, &eps_grid))
        .collect();
    let repro_secs = started.elapsed().as_secs_f64();
    let mut runs: Vec<Run> = jobs[repro_jobs..]
        .par_iter()
        .map(|&(d, m, s)| train_and_sweep(d, m, s, &eps_grid))
        .collect();
    runs.extend(repro);

    results.push((6, "retinopathy reproduction", reproduction(&runs, repro_secs)));
    results.push((7, "rank direction", rank_direction(&runs)));
    results.push((8, "scheduler and guard", scheduler(&runs)));
    results.push((9, "determinism", determinism()));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n} {}: {name} — {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.0}s)",
        results.len() - failed,
        total.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
