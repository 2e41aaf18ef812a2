//! Acceptance checks. Every test prints one `criterion N: PASS|FAIL` line
//! before asserting, so `cargo test --test acceptance -- --nocapture`
//! doubles as a report.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Weibull};

use weidetect_core::aggregation::{
    coord_median, fedavg, krum, krum_select, multi_krum_select, trimmed_mean, AggregatorKind,
    AggregatorSpec,
};
use weidetect_core::attacks::{fgsm, label_flip, pgd, poison_count, AttackKind};
use weidetect_core::config::ExperimentConfig;
use weidetect_core::data::Dataset;
use weidetect_core::nn::{backward, init_params, loss, Batch, Matrix, MlpArchitecture, ParamVector};
use weidetect_core::orchestrator::{time_aggregation, Federation, RoundReport};
use weidetect_core::report::{run_to_dir, RunPaths};
use weidetect_core::weidetect::{fit_weibull, select_by_weibull, weibull_cdf, ValidationScores, WeibullFit};

const DESK_SCENARIO: &str = include_str!("../../../configs/desk_label_flip.toml");

fn verdict(n: u32, ok: bool, detail: &str) {
    println!("criterion {n}: {} - {detail}", if ok { "PASS" } else { "FAIL" });
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_arch(r: &mut ChaCha8Rng) -> MlpArchitecture {
    loop {
        let depth = r.random_range(0..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(1..=4)).collect();
        let arch = MlpArchitecture::new(r.random_range(1..=4), hidden, r.random_range(2..=4)).unwrap();
        if arch.param_count() <= 50 {
            return arch;
        }
    }
}

#[test]
fn criterion_01_gradient_matches_finite_differences() {
    let start = Instant::now();
    let mut r = rng(101);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..20 {
        let arch = random_arch(&mut r);
        let values: Vec<f64> = (0..arch.param_count()).map(|_| r.random_range(-1.0..1.0)).collect();
        let params = ParamVector::from_values(arch.clone(), values).unwrap();
        let rows = 5;
        let x: Vec<f64> = (0..rows * arch.input_dim()).map(|_| r.random_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..rows).map(|_| r.random_range(0..arch.output_dim())).collect();
        let batch = Batch::new(&x, &y, arch.input_dim()).unwrap();
        let (_, grad) = backward(&params, &batch).unwrap();
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let numeric = (loss(&plus, &batch).unwrap() - loss(&minus, &batch).unwrap()) / (2.0 * h);
            let analytic = grad.values()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-4 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        ok,
        &format!("{checked} coordinates, worst relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

/// Weibull log-likelihood written out term by term.
fn oracle_log_likelihood(xs: &[f64], shape: f64, scale: f64) -> f64 {
    xs.iter()
        .map(|&x| {
            (shape / scale).ln() + (shape - 1.0) * (x / scale).ln() - (x / scale).powf(shape)
        })
        .sum()
}

#[test]
fn criterion_02_weibull_mle_recovers_parameters() {
    let start = Instant::now();
    let dist = Weibull::new(1.0, 2.0).unwrap();
    let mut r = rng(202);
    let xs: Vec<f64> = (0..10_000).map(|_| dist.sample(&mut r)).collect();
    let fit = fit_weibull(&xs, 0.0).unwrap();
    let best = oracle_log_likelihood(&xs, fit.shape, fit.scale);
    let mut grid_max = f64::NEG_INFINITY;
    for i in 0..100 {
        for j in 0..100 {
            let shape = fit.shape * (0.9 + 0.2 * (i as f64 + 0.5) / 100.0);
            let scale = fit.scale * (0.9 + 0.2 * (j as f64 + 0.5) / 100.0);
            grid_max = grid_max.max(oracle_log_likelihood(&xs, shape, scale));
        }
    }
    let elapsed = start.elapsed();
    let ok = fit.converged
        && (1.9..=2.1).contains(&fit.shape)
        && (0.98..=1.02).contains(&fit.scale)
        && best >= grid_max
        && elapsed < Duration::from_secs(5);
    verdict(
        2,
        ok,
        &format!(
            "shape {:.4}, scale {:.4}, loglik {best:.3} vs grid max {grid_max:.3}, {:.2}s",
            fit.shape,
            fit.scale,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_03_cdf_identities() {
    let mut r = rng(303);
    let mut failures = Vec::new();
    for case in 0..50 {
        let fit = WeibullFit {
            shape: r.random_range(0.5..5.0),
            scale: r.random_range(0.1..10.0),
            floc: r.random_range(0.0..0.5),
            converged: true,
            cdf_values: Vec::new(),
        };
        let at_loc = weibull_cdf(fit.floc, &fit).unwrap();
        let at_scale = weibull_cdf(fit.floc + fit.scale, &fit).unwrap();
        let expected = 1.0 - (-1.0f64).exp();
        if at_loc != 0.0 {
            failures.push(format!("case {case}: F(floc) = {at_loc}"));
        }
        if (at_scale - expected).abs() > 1e-9 {
            failures.push(format!("case {case}: F(floc + scale) = {at_scale}"));
        }
        let grid: Vec<f64> = (0..=200)
            .map(|i| weibull_cdf(fit.floc + 2.0 * fit.scale * i as f64 / 200.0, &fit).unwrap())
            .collect();
        if let Some(w) = grid.windows(2).position(|w| w[1] <= w[0]) {
            failures.push(format!("case {case}: not strictly increasing at grid point {w}"));
        }
    }
    let ok = failures.is_empty();
    verdict(3, ok, &format!("50 parameter pairs, {} violations", failures.len()));
    assert!(ok, "{failures:?}");
}

#[test]
fn criterion_04_cdf_ranking_equals_score_ranking() {
    let mut r = rng(404);
    let n = 20;
    let (mut cases, mut attempts, mut mismatches) = (0, 0, 0);
    while cases < 1000 && attempts < 5000 {
        attempts += 1;
        let lo = r.random_range(0.0..0.8);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(lo..1.0)).collect();
        if !fit_weibull(&scores, 0.0).unwrap().converged {
            continue;
        }
        cases += 1;
        let top_t = r.random_range(1..=n);
        let vs = ValidationScores::from_pairs(scores.iter().copied().enumerate());
        let (fit, sel) = select_by_weibull(&vs, top_t, 0.0).unwrap();
        assert!(fit.converged);
        let mut by_score: Vec<usize> = (0..n).collect();
        by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut expected = by_score[..top_t].to_vec();
        expected.sort_unstable();
        let mut got = sel.benign_ids.clone();
        got.sort_unstable();
        if got != expected {
            mismatches += 1;
        }
    }
    let ok = cases == 1000 && mismatches == 0;
    verdict(
        4,
        ok,
        &format!("{cases} converged score vectors ({attempts} drawn), {mismatches} mismatches"),
    );
    assert!(ok);
}

fn param_vectors(rows: &[Vec<f64>]) -> Vec<ParamVector> {
    let arch = MlpArchitecture::new(rows[0].len() - 1, vec![], 1).unwrap();
    rows.iter()
        .map(|r| ParamVector::from_values(arch.clone(), r.clone()).unwrap())
        .collect()
}

/// Krum score by enumerating every neighbour subset of the required size.
fn brute_force_krum_scores(rows: &[Vec<f64>], f: usize) -> Vec<f64> {
    let n = rows.len();
    let k = n - f - 2;
    (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << others.len()) {
                if mask.count_ones() as usize != k {
                    continue;
                }
                let total: f64 = others
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| mask & (1 << b) != 0)
                    .map(|(_, &j)| rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .sum();
                best = best.min(total);
            }
            best
        })
        .collect()
}

fn brute_force_ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

fn sorted_column(rows: &[Vec<f64>], c: usize) -> Vec<f64> {
    let mut col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
    col.sort_by(f64::total_cmp);
    col
}

#[test]
fn criterion_05_aggregators_match_oracles() {
    let mut r = rng(505);
    let mut failures = Vec::new();
    for case in 0..200 {
        let n = r.random_range(3..=6);
        let d = r.random_range(2..=5);
        let f = r.random_range(0..=(n - 3) / 2);
        // Small integers keep every distance exact and force score ties.
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.random_range(-3i32..=3) as f64).collect())
            .collect();
        let updates = param_vectors(&rows);

        let ranking = brute_force_ranking(&brute_force_krum_scores(&rows, f));
        if krum_select(&updates, f).unwrap() != ranking[0] {
            failures.push(format!("case {case}: krum selection"));
        }
        if krum(&updates, f).unwrap().values() != rows[ranking[0]].as_slice() {
            failures.push(format!("case {case}: krum output"));
        }
        let m = r.random_range(1..=n);
        let mut expected = ranking[..m].to_vec();
        expected.sort_unstable();
        if multi_krum_select(&updates, f, m).unwrap() != expected {
            failures.push(format!("case {case}: multi-krum selection (m = {m})"));
        }

        let median = coord_median(&updates).unwrap();
        let trim = r.random_range(0..=(n - 1) / 2);
        let trimmed = trimmed_mean(&updates, trim).unwrap();
        for c in 0..d {
            let col = sorted_column(&rows, c);
            let med = if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / 2.0
            };
            if median.values()[c] != med {
                failures.push(format!("case {case}: median coordinate {c}"));
            }
            let kept = &col[trim..n - trim];
            let mean = kept.iter().sum::<f64>() / kept.len() as f64;
            if trimmed.values()[c] != mean {
                failures.push(format!("case {case}: trimmed mean coordinate {c}"));
            }
        }
    }
    let mut worst_identity: f64 = 0.0;
    for _ in 0..50 {
        let d = r.random_range(2..=50);
        let row: Vec<f64> = (0..d).map(|_| r.random_range(-1e3..1e3)).collect();
        let avg = fedavg(&param_vectors(&vec![row.clone(); r.random_range(1..=20)])).unwrap();
        for (a, b) in avg.values().iter().zip(&row) {
            worst_identity = worst_identity.max((a - b).abs());
        }
    }
    if worst_identity > 1e-12 {
        failures.push(format!("fedavg identity off by {worst_identity:e}"));
    }
    let ok = failures.is_empty();
    verdict(
        5,
        ok,
        &format!("200 instances, {} mismatches, fedavg identity error {worst_identity:.1e}", failures.len()),
    );
    assert!(ok, "{failures:?}");
}

#[test]
fn criterion_06_attack_contracts() {
    let mut r = rng(606);
    let dim = 8;
    let arch = MlpArchitecture::new(dim, vec![6], 3).unwrap();
    let params = init_params(&arch, 6);
    let eps = 0.35;
    let samples = 100_000;
    let (mut bound_violations, mut clip_violations, mut pgd_mismatches) = (0, 0, 0);
    for i in 0..samples {
        let x: Vec<f64> = (0..dim).map(|_| r.random_range(0.0..=1.0)).collect();
        let y = r.random_range(0..3);
        let adv_fgsm = fgsm(&params, &x, y, eps).unwrap();
        let adv_pgd = pgd(&params, &x, y, eps, eps / 4.0, if i % 10 == 0 { 10 } else { 3 }).unwrap();
        for adv in [&adv_fgsm, &adv_pgd] {
            for (a, b) in adv.iter().zip(&x) {
                if (a - b).abs() > eps {
                    bound_violations += 1;
                }
                if !(0.0..=1.0).contains(a) {
                    clip_violations += 1;
                }
            }
        }
        let one_step = pgd(&params, &x, y, eps, eps, 1).unwrap();
        if one_step != adv_fgsm {
            pgd_mismatches += 1;
        }
    }

    let mut histogram_failures = 0;
    for case in 0..200u64 {
        let classes = r.random_range(2..=5);
        let rows = r.random_range(1..=200);
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
        let features = Matrix::new(rows, 1, vec![0.5; rows]).unwrap();
        let shard = Dataset::new("flip", features, labels, classes).unwrap();
        let src = r.random_range(0..classes);
        let dst = (src + r.random_range(1..classes)) % classes;
        let ratio = r.random_range(0.0..=1.0);
        let before = shard.class_histogram();
        let flipped = label_flip(&shard, &[(src, dst)], ratio, case).unwrap();
        let after = flipped.data.class_histogram();
        let k = poison_count(before[src], ratio);
        let mut expected = before.clone();
        expected[src] -= k;
        expected[dst] += k;
        if after != expected || flipped.audit.poisoned_indices.len() != k {
            histogram_failures += 1;
        }
    }
    let ok = bound_violations == 0 && clip_violations == 0 && pgd_mismatches == 0 && histogram_failures == 0;
    verdict(
        6,
        ok,
        &format!(
            "{samples} samples: {bound_violations} bound, {clip_violations} clip, \
             {pgd_mismatches} pgd/fgsm mismatches; {histogram_failures} histogram failures"
        ),
    );
    assert!(ok);
}

const SCENARIO_SEEDS: [u64; 3] = [1, 2, 3];

fn scenario_config(seed: u64, defense: AggregatorKind, attack: AttackKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(DESK_SCENARIO).unwrap();
    cfg.seeds.master = seed;
    cfg.defense.kind = defense;
    cfg.attack.kind = attack;
    cfg
}

struct SeedRuns {
    clean: Vec<RoundReport>,
    fedavg: Vec<RoundReport>,
    weidetect: Vec<RoundReport>,
    adversaries: Vec<usize>,
}

struct Scenario {
    seeds: Vec<SeedRuns>,
    elapsed: Duration,
}

fn run(cfg: &ExperimentConfig) -> (Vec<RoundReport>, Vec<usize>) {
    let fed = Federation::prepare(cfg).unwrap();
    let (reports, _) = fed.run(|_, _| Ok(())).unwrap();
    (reports, fed.adversary_ids.clone())
}

fn scenario() -> &'static Scenario {
    static SCENARIO: OnceLock<Scenario> = OnceLock::new();
    SCENARIO.get_or_init(|| {
        let start = Instant::now();
        let seeds = SCENARIO_SEEDS
            .iter()
            .map(|&s| {
                let (clean, _) = run(&scenario_config(s, AggregatorKind::FedAvg, AttackKind::None));
                let (fedavg, _) = run(&scenario_config(s, AggregatorKind::FedAvg, AttackKind::LabelFlip));
                let (weidetect, adversaries) =
                    run(&scenario_config(s, AggregatorKind::WeiDetect, AttackKind::LabelFlip));
                SeedRuns {
                    clean,
                    fedavg,
                    weidetect,
                    adversaries,
                }
            })
            .collect();
        Scenario {
            seeds,
            elapsed: start.elapsed(),
        }
    })
}

fn tail_mean(reports: &[RoundReport], metric: impl Fn(&RoundReport) -> f64) -> f64 {
    let tail = &reports[reports.len() - 5..];
    tail.iter().map(metric).sum::<f64>() / tail.len() as f64
}

fn seed_mean(runs: &[SeedRuns], pick: impl Fn(&SeedRuns) -> f64) -> f64 {
    runs.iter().map(pick).sum::<f64>() / runs.len() as f64
}

#[test]
fn criterion_07_defense_preserves_target_recall() {
    let s = scenario();
    let tcr = |r: &RoundReport| r.tcr.expect("single target");
    let clean = seed_mean(&s.seeds, |x| tail_mean(&x.clean, tcr));
    let fedavg = seed_mean(&s.seeds, |x| tail_mean(&x.fedavg, tcr));
    let weidetect = seed_mean(&s.seeds, |x| tail_mean(&x.weidetect, tcr));
    let fedavg_f1 = seed_mean(&s.seeds, |x| tail_mean(&x.fedavg, |r| r.global_f1));
    let weidetect_f1 = seed_mean(&s.seeds, |x| tail_mean(&x.weidetect, |r| r.global_f1));

    let a = fedavg <= clean - 0.30;
    let b = weidetect >= clean - 0.10;
    let c = weidetect_f1 >= fedavg_f1;
    let fast = s.elapsed < Duration::from_secs(300);
    let ok = a && b && c && fast;
    verdict(
        7,
        ok,
        &format!(
            "TCR clean {clean:.3}, fedavg {fedavg:.3} (a: {}), weidetect {weidetect:.3} (b: {}); \
             F1 weidetect {weidetect_f1:.3} vs fedavg {fedavg_f1:.3} (c: {}); {:.0}s for 9 runs",
            pass(a),
            pass(b),
            pass(c),
            s.elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

fn pass(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "fail"
    }
}

#[test]
fn criterion_08_adversaries_rejected() {
    let s = scenario();
    let mut details = Vec::new();
    let mut ok = true;
    for (seed, runs) in SCENARIO_SEEDS.iter().zip(&s.seeds) {
        let after: Vec<&RoundReport> = runs.weidetect.iter().filter(|r| r.round > 5).collect();
        let caught = after
            .iter()
            .filter(|r| runs.adversaries.iter().all(|a| r.rejected_ids.contains(a)))
            .count();
        let rate = caught as f64 / after.len() as f64;
        ok &= runs.adversaries.len() == 3 && rate >= 0.9;
        details.push(format!("seed {seed}: {caught}/{}", after.len()));
    }
    verdict(
        8,
        ok,
        &format!("rounds after 5 rejecting all 3 adversaries: {}", details.join(", ")),
    );
    assert!(ok);
}

#[test]
fn criterion_09_rerun_is_byte_identical() {
    let cfg = scenario_config(SCENARIO_SEEDS[0], AggregatorKind::WeiDetect, AttackKind::LabelFlip);
    let tmp = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let dir = tmp.path().join(name);
        run_to_dir(&cfg, &dir).unwrap();
        std::fs::read(RunPaths::new(&dir).rounds()).unwrap()
    };
    let first = read("first");
    let second = read("second");
    let ok = first == second && !first.is_empty();
    verdict(9, ok, &format!("rounds.csv {} bytes, identical: {}", first.len(), first == second));
    assert!(ok);
}

#[test]
fn criterion_10_multi_krum_slower_than_median() {
    let arch = MlpArchitecture::new(100, vec![64, 10], 4).unwrap();
    assert!(arch.param_count() >= 7000);
    let updates: Vec<ParamVector> = (0..20).map(|i| init_params(&arch, i)).collect();
    let median_of = |kind: AggregatorKind| {
        let spec = AggregatorSpec::new(kind);
        let mut times: Vec<f64> = (0..7).map(|_| time_aggregation(&spec, &updates).unwrap()).collect();
        times.sort_by(f64::total_cmp);
        times[times.len() / 2]
    };
    let mkrum = median_of(AggregatorKind::MultiKrum);
    let median = median_of(AggregatorKind::Median);
    let ok = mkrum > median;
    verdict(
        10,
        ok,
        &format!(
            "{} params x 20 clients: multi-krum {:.3} ms, median {:.3} ms",
            arch.param_count(),
            mkrum * 1e3,
            median * 1e3
        ),
    );
    assert!(ok);
}
