//! One test per acceptance criterion. Each prints a PASS/FAIL line to the
//! process stdout (outside the test harness capture) before asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use snows::newton::{NewtonConfig, StepStatus};
use snows::oracles::suite::{self, Check, Suite};
use snows::pipeline::{layer_task, MaskSpec, PruneConfig};
use snows::studies::{self, Bench, SgdSettings, ToyCnnBench};

fn report(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} | {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn suite_criterion(n: u32, s: Suite, limit: Duration, extra: impl Fn(&[Check]) -> Option<String>) {
    let started = Instant::now();
    let checks = suite::run(s).unwrap();
    let took = started.elapsed();
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed).collect();
    let worst = checks
        .iter()
        .filter(|c| c.tolerance > 0.0)
        .map(|c| c.measured / c.tolerance)
        .fold(0.0, f64::max);
    let problem = extra(&checks);
    let ok = failed.is_empty() && took < limit && problem.is_none();
    report(
        n,
        ok,
        &format!(
            "{s}: {} checks, {} failed, worst measured/tolerance {worst:.2e}, {:.2}s (limit {}s){}",
            checks.len(),
            failed.len(),
            took.as_secs_f64(),
            limit.as_secs(),
            problem.map(|p| format!(", {p}")).unwrap_or_default()
        ),
    );
    if !ok {
        eprintln!("{}", suite::render_table(&checks));
    }
    assert!(ok);
}

#[test]
fn criterion_01_toy_quadratic() {
    suite_criterion(1, Suite::ToyQuadratic, Duration::from_secs(1), |_| None);
}

#[test]
fn criterion_02_hvp_oracle() {
    suite_criterion(2, Suite::Hvp, Duration::from_secs(60), |checks| {
        let tasks = checks.iter().filter(|c| c.name.contains('#')).count();
        (tasks < 20).then(|| format!("only {tasks} tasks"))
    });
}

#[test]
fn criterion_03_cg_vs_direct() {
    suite_criterion(3, Suite::Cg, Duration::from_secs(60), |_| None);
}

#[test]
fn criterion_04_k0_closed_form() {
    suite_criterion(4, Suite::K0, Duration::from_secs(10), |_| None);
}

#[test]
fn criterion_05_gradient_checks() {
    suite_criterion(5, Suite::Gradients, Duration::from_secs(60), |_| None);
}

#[test]
fn criterion_06_invariants() {
    suite_criterion(6, Suite::Invariants, Duration::from_secs(60), |_| None);
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| ToyCnnBench::default().build().unwrap())
}

/// 2:4 everywhere, K = 3, default damping and CG tolerance, full-batch
/// Newton steps.
fn end_to_end_config(b: &Bench) -> PruneConfig {
    let mut cfg = PruneConfig::uniform(b.dense.manifest(), MaskSpec::NOfM { n: 2, m: 4 }, 3);
    cfg.newton.batch_size = b.calib.shape()[0];
    cfg.newton.max_epochs = 4;
    cfg
}

#[test]
fn criterion_07_end_to_end() {
    let started = Instant::now();
    let b = bench();
    let cfg = end_to_end_config(b);
    assert_eq!(cfg.newton.cg.lambda, 1e-4);
    assert_eq!(cfg.newton.cg.tol, 1e-3);
    let cmp = studies::compare_with_magnitude(&b.dense, &cfg, &b.calib, &b.test).unwrap();
    let took = started.elapsed();
    let params = studies::param_count(&b.dense);
    let lower = cmp.snows_losses.iter().zip(&cmp.magnitude_losses).all(|(s, m)| s < m);
    let ok = params <= 100_000
        && b.train_report.train_accuracy >= 0.9
        && lower
        && cmp.snows_accuracy >= cmp.magnitude_accuracy
        && took < Duration::from_secs(15 * 60);
    let pairs: Vec<String> = cmp
        .snows
        .report
        .layers
        .iter()
        .zip(cmp.snows_losses.iter().zip(&cmp.magnitude_losses))
        .map(|(l, (s, m))| format!("{} {s:.4e} < {m:.4e}", l.name))
        .collect();
    report(
        7,
        ok,
        &format!(
            "{params} params, train acc {:.3}; K-step loss SNOWS vs MP: {}; test acc dense {:.3}, MP {:.3}, SNOWS {:.3}; {:.1}s",
            b.train_report.train_accuracy,
            pairs.join(", "),
            cmp.dense_accuracy,
            cmp.magnitude_accuracy,
            cmp.snows_accuracy,
            took.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_sgd_vs_newton() {
    let started = Instant::now();
    let b = bench();
    let masks = studies::layer_masks(&b.dense, "conv1.w", &MaskSpec::NOfM { n: 2, m: 4 }).unwrap();
    let task = layer_task(&b.dense, "conv1.w", masks, 3, &b.calib).unwrap();
    let newton = NewtonConfig {
        batch_size: b.calib.shape()[0],
        max_epochs: 10,
        ..NewtonConfig::default()
    };
    let (rows, s) = studies::sgd_vs_newton(&task, &newton, &[1e-3, 1e-2, 1e-1], &SgdSettings::default(), 8).unwrap();
    let took = started.elapsed();
    let best = s.best_sgd();
    let ok = s.newton_steps <= 10
        && best.is_some_and(|r| s.newton_loss <= r.loss_final)
        && !rows.is_empty()
        && took < Duration::from_secs(5 * 60);
    let sgd: Vec<String> = s
        .sgd
        .iter()
        .map(|r| if r.diverged { format!("lr {:e} diverged", r.lr) } else { format!("lr {:e} {:.4e}", r.lr, r.loss_final) })
        .collect();
    report(
        8,
        ok,
        &format!(
            "conv1.w 2:4 K=3: loss {:.4e} at start, Newton {:.4e} after {} steps ({:.2}s); SGD 2000 steps: {} ({:.2}s)",
            s.loss_init,
            s.newton_loss,
            s.newton_steps,
            s.newton_seconds,
            sgd.join(", "),
            s.sgd_seconds
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_determinism() {
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || {
        pool.install(|| {
            let b = ToyCnnBench::default().build().unwrap();
            let cfg = end_to_end_config(&b);
            let cmp = studies::compare_with_magnitude(&b.dense, &cfg, &b.calib, &b.test).unwrap();
            let json = |r| serde_json::to_vec_pretty(r).unwrap();
            (json(&cmp.snows.report), json(&cmp.magnitude.report), cmp.snows.graph)
        })
    };
    let (a_snows, a_mp, a_graph) = run();
    let (b_snows, b_mp, b_graph) = run();
    let ok = a_snows == b_snows && a_mp == b_mp && a_graph.weights() == b_graph.weights();
    report(
        9,
        ok,
        &format!(
            "two single-threaded f64 runs: SNOWS report {} bytes {}, MP report {}, weights {}; {:.1}s",
            a_snows.len(),
            if a_snows == b_snows { "identical" } else { "differ" },
            if a_mp == b_mp { "identical" } else { "differ" },
            if a_graph.weights() == b_graph.weights() { "identical" } else { "differ" },
            started.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_fisher_descent() {
    let b = bench();
    let masks = studies::layer_masks(&b.dense, "conv1.w", &MaskSpec::NOfM { n: 2, m: 4 }).unwrap();
    let task = layer_task(&b.dense, "conv1.w", masks, 1, &b.calib).unwrap();
    let cfg = NewtonConfig {
        batch_size: 128,
        max_epochs: 2,
        ..NewtonConfig::default()
    };
    let (rows, s) = studies::fisher_vs_newton(&task, &cfg, 4).unwrap();
    let fisher: Vec<_> = rows.iter().filter(|r| r.method == "fisher").collect();
    let mut csv = Vec::new();
    studies::write_csv(&rows, &mut csv).unwrap();
    let lines = String::from_utf8(csv).unwrap().lines().count();
    let descent = fisher.iter().all(|r| match r.status {
        StepStatus::Accepted => r.loss_post <= r.loss_pre && r.alpha > 0.0,
        _ => r.loss_post == r.loss_pre,
    });
    let accepted = fisher.iter().filter(|r| r.status == StepStatus::Accepted).count();
    let ok = !fisher.is_empty() && lines == rows.len() + 1 && descent && accepted > 0;
    report(
        10,
        ok,
        &format!(
            "{} Fisher steps ({accepted} accepted), all non-increasing: {descent}; full loss {:.4e} -> Fisher {:.4e} in {:.2}s, Newton {:.4e} in {:.2}s (reported, not asserted)",
            fisher.len(),
            s.loss_init,
            s.fisher_loss,
            s.fisher_seconds,
            s.newton_loss,
            s.newton_seconds
        ),
    );
    assert!(ok);
}
