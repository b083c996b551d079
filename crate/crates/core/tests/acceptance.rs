//! One test per acceptance criterion. Each prints a single `PASS`/`FAIL`
//! line with the measured value and the tolerance it is held to.
//!
//! The training-based criteria use the lab bench protocol and take minutes
//! each in a release-profile test build.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use infotok::dtf::{self, DtfConfig};
use infotok::imagegrid;
use infotok::infotheory::{self, DiscreteJoint, RateDistortionQuery};
use infotok::labbench::{self, data, ExperimentKind, ExperimentSpec, MetricRow, Protocol};
use infotok::nanonet::checkpoint::Checkpoint;
use infotok::nanonet::ModelConfig;
use infotok::pipeline::stream::{DtfSummary, PatchEntry, StreamHeader};
use infotok::pipeline::train::{self, Optimizer};
use infotok::pipeline::{Lambdas, Selection, TokenStream, Tokenizer, TrainConfig};

/// Writes straight to stderr so the line shows up without `--nocapture`.
fn verdict(name: &str, passed: bool, detail: &str) {
    let _ = writeln!(std::io::stderr(), "{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "{name}: {detail}");
}

#[test]
fn dtf_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let started = Instant::now();
    let cases = 500;
    let mut mismatches = 0;
    for case in 0..cases {
        let m = rng.gen_range(1..=16);
        let scores: Vec<f64> = if case % 2 == 0 {
            (0..m).map(|_| rng.gen_range(0..5) as f64).collect()
        } else {
            (0..m).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen::<f64>() * 3.0 }).collect()
        };
        let total: f64 = scores.iter().sum();
        let tau = if case % 2 == 0 {
            rng.gen_range(0..=total as usize + 2) as f64
        } else {
            rng.gen_range(0.0..=total * 1.1 + 0.1)
        };
        let order = dtf::rank_tokens(&scores).unwrap();
        let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let prefix = dtf::select_min_prefix(&sorted, tau).unwrap();
        let agrees = match dtf::brute_force_min_subset(&scores, tau).unwrap() {
            None => prefix.infeasible,
            Some(n) => !prefix.infeasible && prefix.count == n,
        };
        mismatches += usize::from(!agrees);
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "dtf_optimality",
        mismatches == 0 && secs < 10.0,
        &format!("{mismatches}/{cases} mismatches against exhaustive search in {secs:.2}s [0 mismatches, < 10 s]"),
    );
}

#[test]
fn gaussian_rate_distortion() {
    let r = |d0: f64| {
        infotheory::rate_distortion(RateDistortionQuery {
            sigma2: 1.0,
            d0,
            pixel_count: 1,
        })
        .unwrap()
    };
    let grid: Vec<f64> = (1..=100).map(|i| i as f64 * 0.02).collect();
    let values: Vec<f64> = grid.iter().map(|&d| r(d)).collect();
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    let (one, zero) = (r(0.25), r(1.0));
    verdict(
        "gaussian_rate_distortion",
        one == 1.0 && zero == 0.0 && monotone,
        &format!("R(0.25) = {one}, R(1) = {zero}, nonincreasing over 100 points: {monotone} [exactly 1, exactly 0, monotone]"),
    );
}

fn random_joint(rng: &mut ChaCha8Rng, vars: usize) -> DiscreteJoint {
    let dims: Vec<usize> = (0..vars).map(|_| rng.gen_range(2..=4)).collect();
    let cells: usize = dims.iter().product();
    let weights = (0..cells)
        .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    DiscreteJoint::from_weights(dims, weights).unwrap()
}

/// `I(A;B)` for a two-variable joint, summed cell by cell.
fn pairwise_mi(dims: (usize, usize), p: impl Fn(usize, usize) -> f64) -> f64 {
    let pa: Vec<f64> = (0..dims.0).map(|a| (0..dims.1).map(|b| p(a, b)).sum()).collect();
    let pb: Vec<f64> = (0..dims.1).map(|b| (0..dims.0).map(|a| p(a, b)).sum()).collect();
    let mut mi = 0.0;
    for a in 0..dims.0 {
        for b in 0..dims.1 {
            let pab = p(a, b);
            if pab > 0.0 {
                mi += pab * (pab / (pa[a] * pb[b])).log2();
            }
        }
    }
    mi
}

#[test]
fn exact_mutual_information_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut chain_gap, mut dpi_excess, mut oracle_gap) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..200 {
        let vars = rng.gen_range(3..=4);
        let j = random_joint(&mut rng, vars);
        let g: Vec<usize> = (2..vars).collect();
        let zg: Vec<usize> = (1..vars).collect();
        let lhs = infotheory::exact_mi(&j, &[0], &zg, &[]).unwrap();
        let rhs = infotheory::exact_mi(&j, &[0], &[1], &[]).unwrap() + infotheory::exact_mi(&j, &[0], &g, &[1]).unwrap();
        chain_gap = chain_gap.max((lhs - rhs).abs());

        let pair = random_joint(&mut rng, 2);
        let (da, db) = (pair.dims()[0], pair.dims()[1]);
        let out_size = rng.gen_range(1..=4);
        let f: Vec<usize> = (0..db).map(|_| rng.gen_range(0..out_size)).collect();
        let before = infotheory::exact_mi(&pair, &[0], &[1], &[]).unwrap();
        let after = infotheory::exact_mi(&pair.push_forward(1, out_size, &f).unwrap(), &[0], &[1], &[]).unwrap();
        dpi_excess = dpi_excess.max(after - before);

        let p = pair.probs();
        let direct = pairwise_mi((da, db), |a, b| p[a * db + b]);
        let pushed = pairwise_mi((da, out_size), |a, c| (0..db).filter(|&b| f[b] == c).map(|b| p[a * db + b]).sum());
        oracle_gap = oracle_gap.max((direct - before).abs()).max((pushed - after).abs());
    }
    verdict(
        "exact_mi_identities",
        chain_gap <= 1e-12 && dpi_excess <= 1e-12 && oracle_gap <= 1e-12,
        &format!(
            "200 joints: chain-rule gap {chain_gap:.2e}, max I(A;f(B)) - I(A;B) = {dpi_excess:.2e}, \
             gap to cell-sum oracle {oracle_gap:.2e} [all <= 1e-12]"
        ),
    );
}

#[test]
fn distortion_bound_under_rate_increase() {
    let grid: Vec<f64> = (0..200).map(|i| i as f64 * 0.025).collect();
    let values: Vec<f64> = grid.iter().map(|&r| infotheory::rate_gain_distortion_bound(0.3, r).unwrap()).collect();
    let decreasing = values.windows(2).all(|w| w[1] < w[0]);
    let half = infotheory::rate_gain_distortion_bound(0.3, 0.5).unwrap();
    verdict(
        "distortion_bound",
        decreasing && half == 0.15,
        &format!("strictly decreasing over 200 increments: {decreasing}; bound(0.3, 0.5) = {half} [exactly 0.15]"),
    );
}

#[test]
fn redundancy_estimator() {
    let (m, d, seeds) = (5000, 4, 10);
    let mut lines = Vec::new();
    let mut passed = true;
    for n in [2usize, 4] {
        let (mut independent, mut duplicated) = (0.0, 0.0);
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let iid = Array3::from_shape_fn((m, n, d), |_| rng.sample::<f64, _>(StandardNormal));
            independent += infotheory::redundancy(&iid).unwrap() / seeds as f64;
            let base = Array3::from_shape_fn((m, 1, d), |_| rng.sample::<f64, _>(StandardNormal));
            let dup = Array3::from_shape_fn((m, n, d), |(s, _, j)| base[(s, 0, j)]);
            duplicated += infotheory::redundancy(&dup).unwrap() / seeds as f64;
        }
        let target = (n - 1) as f64 / n as f64;
        passed &= independent.abs() < 0.05 && (duplicated - target).abs() <= 0.05;
        lines.push(format!("n={n}: independent {independent:.4}, duplicated {duplicated:.4} (target {target:.4})"));
    }
    verdict(
        "redundancy_estimator",
        passed,
        &format!("{} [|independent| < 0.05, duplicated within 0.05]", lines.join("; ")),
    );
}

#[test]
fn gradient_check() {
    let (ck, img, sel) = infotok::cli::gradient_check_fixture().unwrap();
    let lambdas = Lambdas { commit: 0.7, glob: 0.4 };
    let r = train::grad_check(&ck, &img, &sel, lambdas, 1e-5).unwrap();
    verdict(
        "gradient_check",
        r.max_relative_error < 1e-4,
        &format!(
            "{} parameters, max relative error {:.3e} at {}[{}] [< 1e-4]",
            r.checked, r.max_relative_error, r.worst.0, r.worst.1
        ),
    );
}

#[test]
fn shannon_bound_during_training() {
    let sigma = 0.1;
    let model = ModelConfig {
        num_global: 4,
        ..ModelConfig::default()
    };
    let size = model.image_height;
    let train_set = data::gaussian_dataset(16, size, sigma, 11).unwrap();
    let test_set = data::gaussian_dataset(4, size, sigma, 12).unwrap();
    let n0 = model.layout().unwrap().patch_count();
    let mut cfg = TrainConfig::new(Selection::TopRanked(n0 - model.num_global));
    cfg.steps = 500;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 2;
    cfg.optimizer = Optimizer::adam();
    cfg.lambdas = Lambdas { commit: 0.001, glob: 0.001 };
    let dtf_cfg = DtfConfig::new(model.layout().unwrap().pixel_count());
    let mut checks = 0;
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    let mut observe = |step: usize, ck: &Checkpoint| -> infotok::Result<()> {
        let tok = Tokenizer::new(ck);
        for img in &test_set {
            let (recon, enc) = tok.round_trip(img, &Selection::Dtf(dtf_cfg.clone()))?;
            let s = &enc.stream;
            let rate = infotheory::code_rate(s.num_global() + s.num_patch(), model.codebook_size, size, size, 1)?;
            let bound = infotheory::gaussian_distortion_bound(sigma * sigma, rate);
            let mse = recon.mse(img)?;
            worst = worst.min(mse / bound);
            violations += usize::from(mse < bound);
            checks += 1;
        }
        let _ = step;
        Ok(())
    };
    observe(0, &Checkpoint::init(&model).unwrap()).unwrap();
    train::train_observed(&train_set, Checkpoint::init(&model).unwrap(), &cfg, 50, &mut observe).unwrap();
    verdict(
        "shannon_bound",
        violations == 0 && checks == 11 * test_set.len(),
        &format!("{checks} round trips over 11 checkpoints, {violations} below the bound, min MSE/bound = {worst:.2} [never below]"),
    );
}

fn mean_over(rows: &[MetricRow], keep: impl Fn(&MetricRow) -> bool) -> f64 {
    labbench::mean_mse(rows, keep).unwrap_or(f64::NAN)
}

#[test]
fn global_token_sweep_trend() {
    let mut spec = ExperimentSpec::new(ExperimentKind::GlobalSweep);
    spec.sweep = vec![0.0, 16.0, 32.0];
    spec.seeds = vec![0, 1, 2];
    let started = Instant::now();
    let rows = labbench::exp_global_sweep(&spec).unwrap();
    let per_seed = started.elapsed().as_secs_f64() / spec.seeds.len() as f64;
    let at = |label: &str, k: f64| mean_over(&rows, |r| r.label == label && r.param == k);
    let (k0, k16) = (at("setting1", 0.0), at("setting1", 16.0));
    let reduction = 1.0 - k16 / k0;
    let mut ordered = true;
    let mut pairs = Vec::new();
    for k in [16.0, 32.0] {
        let (s1, s2) = (at("setting1", k), at("setting2", k));
        ordered &= s1 <= s2;
        pairs.push(format!("k={k}: {s1:.5} vs {s2:.5}"));
    }
    verdict(
        "global_token_sweep",
        reduction >= 0.10 && ordered && per_seed < 1800.0,
        &format!(
            "MSE k=0 {k0:.5}, k=16 {k16:.5} ({:.1}% lower); setting1 vs setting2 {}; {per_seed:.0}s per seed \
             [>= 10% lower, setting1 <= setting2, < 30 min per seed]",
            100.0 * reduction,
            pairs.join(", ")
        ),
    );
}

#[test]
fn truncation_trend() {
    let protocol = Protocol::default();
    let n0 = protocol.model.layout().unwrap().patch_count();
    let mut spec = ExperimentSpec::new(ExperimentKind::Truncation);
    let mild = (0.48 * n0 as f64).floor() as usize;
    spec.sweep = vec![0.0, 8.0, 16.0, 24.0, mild as f64, (n0 - 1) as f64];
    let mut rows = Vec::new();
    for seed in [0u64, 1, 2] {
        let ck = labbench::train_reference(&protocol, 0, protocol.train.selection.clone(), seed).unwrap();
        spec.seeds = vec![seed];
        rows.extend(labbench::exp_truncation(&spec, &ck).unwrap());
    }
    let baseline = mean_over(&rows, |r| r.param == 0.0);
    let mut worst_mild = (0.0f64, String::new());
    let mut weakest_collapse = (f64::INFINITY, String::new());
    for strategy in ["start", "end", "random"] {
        for &d in spec.sweep.iter().filter(|&&d| d > 0.0 && d <= mild as f64) {
            let ratio = mean_over(&rows, |r| r.label == strategy && r.param == d) / baseline;
            if ratio > worst_mild.0 {
                worst_mild = (ratio, format!("{strategy} d={d}"));
            }
        }
        let ratio = mean_over(&rows, |r| r.label == strategy && r.param == (n0 - 1) as f64) / baseline;
        if ratio < weakest_collapse.0 {
            weakest_collapse = (ratio, strategy.to_string());
        }
    }
    let mut table = BTreeMap::new();
    for r in &rows {
        table.entry((r.label.clone(), r.param as usize)).or_insert_with(Vec::new).push(r.mse);
    }
    for ((label, d), v) in &table {
        println!("  truncation {label} d={d}: mean MSE {:.5}", v.iter().sum::<f64>() / v.len() as f64);
    }
    verdict(
        "truncation_trend",
        weakest_collapse.0 > 10.0 && worst_mild.0 <= 1.25,
        &format!(
            "baseline {baseline:.5}; at {} deletions the weakest collapse is {:.2}x ({}); worst mild-deletion ratio {:.3}x ({}) \
             [> 10x, <= 1.25x up to {mild} deletions]",
            n0 - 1,
            weakest_collapse.0,
            weakest_collapse.1,
            worst_mild.0,
            worst_mild.1
        ),
    );
}

#[test]
fn baseline_ordering() {
    let protocol = Protocol::default();
    let k = protocol.model.num_global;
    let mut spec = ExperimentSpec::new(ExperimentKind::Baselines);
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let ck = labbench::train_reference(&protocol, k, protocol.train.selection.clone(), seed).unwrap();
        spec.seeds = vec![seed];
        rows.extend(labbench::exp_baselines(&spec, &ck).unwrap());
    }
    let dtf = mean_over(&rows, |r| r.label == "dtf");
    let mut best = f64::INFINITY;
    let mut effects = Vec::new();
    for b in labbench::Baseline::ALL {
        let m = mean_over(&rows, |r| r.label == b.name());
        best = best.min(m);
        effects.push(format!("{} {m:.5} ({:+.1}%)", b.name(), 100.0 * (m - dtf) / dtf));
    }
    verdict(
        "baseline_ordering",
        dtf <= best + 1e-6,
        &format!("DTF {dtf:.5}; {} [DTF <= min(baselines) + 1e-6]", effects.join(", ")),
    );
}

#[test]
fn epsilon_monotonicity() {
    let protocol = Protocol::default();
    let mut spec = ExperimentSpec::new(ExperimentKind::EpsilonSweep);
    spec.protocol.test_images = 64;
    spec.seeds = vec![0, 1];
    let mut images = 0;
    let mut violations = 0;
    for model_seed in 0..3u64 {
        let ck = Checkpoint::init(&ModelConfig {
            seed: model_seed,
            ..protocol.model
        })
        .unwrap();
        let rows = labbench::exp_epsilon_sweep(&spec, &ck).unwrap();
        let mut per_image: BTreeMap<(u64, usize), BTreeMap<u64, usize>> = BTreeMap::new();
        for r in &rows {
            per_image
                .entry((r.seed, r.image.unwrap()))
                .or_default()
                .insert((r.param * 100.0).round() as u64, r.tokens_used);
        }
        for counts in per_image.values() {
            images += 1;
            let n = |e: u64| counts[&e];
            violations += usize::from(!(n(15) <= n(10) && n(10) <= n(5)));
        }
    }
    verdict(
        "epsilon_monotonicity",
        violations == 0 && images > 0,
        &format!("{violations} of {images} images violate N(0.15) <= N(0.10) <= N(0.05) [0 violations]"),
    );
}

fn random_stream(rng: &mut ChaCha8Rng) -> TokenStream {
    loop {
        let height = rng.gen_range(1..=64u32);
        let width = rng.gen_range(1..=64u32);
        let patch_size = rng.gen_range(1..=height.min(width).min(8));
        let overlap_rate = [0.0, 0.25, 0.5][rng.gen_range(0..3)];
        let Ok((rows, cols)) = imagegrid::patch_count(height as usize, width as usize, patch_size as usize, overlap_rate) else {
            continue;
        };
        let n0 = rows * cols;
        let codebook_size = rng.gen_range(2..=65536u32);
        let header = StreamHeader {
            height,
            width,
            channels: rng.gen_range(1..=3),
            patch_size,
            overlap_rate,
            codebook_size,
            model_checksum: rng.gen(),
        };
        let globals = (0..rng.gen_range(0..=32)).map(|_| rng.gen_range(0..codebook_size) as u16).collect();
        let mut positions: Vec<usize> = (0..n0).filter(|_| rng.gen_bool(0.5)).collect();
        positions.sort_unstable();
        let patch_entries = positions
            .into_iter()
            .map(|p| PatchEntry {
                position: p as u16,
                index: rng.gen_range(0..codebook_size) as u16,
            })
            .collect();
        return TokenStream {
            header,
            global_indices: globals,
            patch_entries,
            summary: DtfSummary {
                epsilon: rng.gen_range(0.0..1.0),
                threshold: rng.gen_range(0.0..1e3),
                h_total: rng.gen_range(0.0..1e3),
                infeasible: rng.gen(),
                capped: rng.gen(),
            },
        };
    }
}

fn mutate(bytes: &mut Vec<u8>, rng: &mut ChaCha8Rng) {
    for _ in 0..rng.gen_range(1..=4) {
        if bytes.is_empty() {
            bytes.push(rng.gen());
            continue;
        }
        let at = rng.gen_range(0..bytes.len());
        match rng.gen_range(0..5) {
            0 => bytes[at] ^= 1 << rng.gen_range(0..8),
            1 => bytes[at] = rng.gen(),
            2 => bytes.truncate(at),
            3 => bytes.insert(at, rng.gen()),
            _ => {
                bytes.remove(at);
            }
        }
    }
}

#[test]
fn stream_serialization() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut exact = 0;
    let mut corpus = Vec::new();
    for _ in 0..1000 {
        let s = random_stream(&mut rng);
        let bytes = s.to_bytes().unwrap();
        let back = TokenStream::from_bytes(&bytes).unwrap();
        if back == s && back.to_bytes().unwrap() == bytes {
            exact += 1;
        }
        corpus.push(bytes);
    }
    let (mut rejected, mut accepted, mut faults) = (0, 0, 0);
    for i in 0..1000 {
        let mut bytes = corpus[i].clone();
        mutate(&mut bytes, &mut rng);
        match catch_unwind(AssertUnwindSafe(|| TokenStream::from_bytes(&bytes))) {
            Ok(Ok(s)) => {
                accepted += 1;
                if s.validate().is_err() || s.to_bytes().is_err() {
                    faults += 1;
                }
            }
            Ok(Err(_)) => rejected += 1,
            Err(_) => faults += 1,
        }
    }
    verdict(
        "stream_serialization",
        exact == 1000 && faults == 0,
        &format!(
            "{exact}/1000 bit-exact round trips; mutated: {rejected} rejected, {accepted} parsed, {faults} faults \
             [1000 exact, 0 faults]"
        ),
    );
}
