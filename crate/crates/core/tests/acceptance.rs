//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! Positional numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 3 11`.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::process::Command;
use std::time::Instant;

use olive::aggregation::{
    average_and_perturb, random_input, sparse_k, AggregationInput, Aggregator, DenseAggregate, SparseGradient,
};
use olive::attack::{
    build_teachers, evaluate_attack, run_attack, score_jac, AttackConfig, Concat, UserView,
};
use olive::cli::{check_pairs, CheckArgs, ShapeArgs};
use olive::flcore::config::FlConfig;
use olive::flcore::{l2_clip, topk_sparsify, train, Federation};
use olive::oram::{OramConfig, PathOram};
use olive::osort::{bitonic_sort, comparator_count, SortKeyOrder};
use olive::primitives::{CtWord, SENTINEL_INDEX};
use olive::trace::{leaked_indices, AccessTrace, LeakLayout, NullSink, Region, TracedArray};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Attack thresholds on the reference synthetic benchmark. The pilot sweep
/// (5 seeds, k-means extraction) measured top1 = 1.0 and all = 0.908.
const REF_TOP1: f64 = 0.8;
const REF_ALL: f64 = 0.5;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = (bool, String);

fn shape(algo: &str, c: Option<usize>, h: Option<usize>) -> ShapeArgs {
    ShapeArgs {
        algo: algo.into(),
        n: 32,
        d: 256,
        alpha: None,
        k: Some(16),
        c,
        h,
        bucket_size: 4,
        stash_size: 20,
        seed: 7,
    }
}

fn c1_obliviousness() -> Outcome {
    let cases = [
        ("baseline", Some(1), None),
        ("baseline", Some(8), None),
        ("baseline", Some(16), None),
        ("advanced", None, None),
        ("grouped", None, Some(1)),
        ("grouped", None, Some(3)),
        ("grouped", None, Some(32)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (algo, c, h) in cases {
        let args = CheckArgs { shape: shape(algo, c, h), pairs: 100, granularity: None };
        match check_pairs(&args) {
            Ok(r) => {
                ok &= r.ok && r.equal_traces == r.pairs && r.pairs >= 100;
                parts.push(format!("{algo}{}={}/{}", c.or(h).map(|p| format!("({p})")).unwrap_or_default(), r.equal_traces, r.pairs));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{algo}: {}", e.message));
            }
        }
    }
    (ok, format!("equal traces {}", parts.join(" ")))
}

fn c2_leakage() -> Outcome {
    let r = match check_pairs(&CheckArgs { shape: shape("linear", None, None), pairs: 100, granularity: None }) {
        Ok(r) => r,
        Err(e) => return (false, e.message),
    };
    let distinguish_ok = r.differing_inputs >= 100 && r.distinguishable * 100 >= r.differing_inputs * 99;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut exact = 0;
    let trials = 100;
    for _ in 0..trials {
        let (n, k, d) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(16..=256));
        let input = random_input(&mut rng, n, k, d).unwrap();
        let sink = RefCell::new(AccessTrace::new());
        Aggregator::Linear.run(&input, &mut rng, &sink).unwrap();
        let got = leaked_indices(&sink.into_inner(), LeakLayout { n, k, d, granularity: 1 }).unwrap();
        let want: Vec<BTreeSet<u64>> =
            (0..n).map(|i| input.client(i).iter().map(|c| c.index() as u64).collect()).collect();
        exact += (got == want) as usize;
    }
    (
        distinguish_ok && exact == trials,
        format!(
            "distinguishable {}/{} differing pairs; leaked_indices exact on {exact}/{trials}",
            r.distinguishable, r.differing_inputs
        ),
    )
}

/// Random instance with some clients padded by sentinel cells.
fn padded_instance(rng: &mut ChaCha8Rng) -> AggregationInput {
    let n = rng.gen_range(1..=64);
    let d = rng.gen_range(1..=256);
    let k = rng.gen_range(1..=32.min(d));
    let mut cells = Vec::with_capacity(n * k);
    for _ in 0..n {
        let real = if rng.gen_bool(0.3) { rng.gen_range(0..=k) } else { k };
        let idx = rand::seq::index::sample(rng, d, real);
        for i in idx {
            cells.push(CtWord::pack(i as u32, rng.gen_range(-1.0f32..=1.0)));
        }
        cells.extend(std::iter::repeat(CtWord::SENTINEL).take(k - real));
    }
    AggregationInput::new(cells, n, k, d).unwrap()
}

/// Naive scatter-add in input order.
fn scatter_add(input: &AggregationInput) -> Vec<f32> {
    let mut out = vec![0.0f32; input.d()];
    for c in input.cells() {
        let (i, v) = c.unpack();
        if i != SENTINEL_INDEX {
            out[i as usize] += v;
        }
    }
    out
}

fn close(got: &[f32], want: &[f32]) -> bool {
    got.len() == want.len()
        && got.iter().zip(want).all(|(&g, &w)| (g - w).abs() <= (1e-5 * w.abs()).max(1e-6))
}

fn bitwise(got: &[f32], want: &[f32]) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(g, w)| g.to_bits() == w.to_bits())
}

fn c3_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names = ["linear", "baseline", "advanced", "grouped", "oram"];
    let mut failures = [0usize; 5];
    let instances = 200;
    for _ in 0..instances {
        let input = padded_instance(&mut rng);
        let want = scatter_add(&input);
        let c = rng.gen_range(1..=16);
        let h = rng.gen_range(1..=input.n());
        let aggs = [
            Aggregator::Linear,
            Aggregator::Baseline { cacheline_c: c },
            Aggregator::Advanced,
            Aggregator::Grouped { h },
            Aggregator::Oram { bucket_size: 4, stash_size: 20 },
        ];
        for (slot, agg) in aggs.iter().enumerate() {
            let got = agg.run(&input, &mut rng, &RefCell::new(NullSink)).map(|a| a.values);
            let good = match got {
                Ok(v) if slot < 2 => bitwise(&v, &want),
                Ok(v) => close(&v, &want),
                Err(_) => false,
            };
            failures[slot] += (!good) as usize;
        }
    }
    let detail = names.iter().zip(failures).map(|(n, f)| format!("{n} {}/{instances}", instances - f)).collect::<Vec<_>>();
    (failures.iter().all(|&f| f == 0), format!("matching instances: {}", detail.join(", ")))
}

fn time_once(agg: &Aggregator, input: &AggregationInput, seed: u64) -> (f64, DenseAggregate) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let out = agg.run(input, &mut rng, &RefCell::new(NullSink)).unwrap();
    (start.elapsed().as_secs_f64(), out)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn median_time(agg: &Aggregator, n: usize, k: usize, d: usize, reps: u64) -> f64 {
    median(
        (0..reps)
            .map(|r| {
                let input = random_input(&mut ChaCha8Rng::seed_from_u64(400 + r), n, k, d).unwrap();
                time_once(agg, &input, r).0
            })
            .collect(),
    )
}

fn c4_complexity() -> Outcome {
    let (n, d) = (100, 100_000);
    let k = sparse_k(0.01, d);
    let adv = median_time(&Aggregator::Advanced, n, k, d, 5);
    let base = median_time(&Aggregator::Baseline { cacheline_c: 16 }, n, k, d, 5);
    let oram = median_time(&Aggregator::Oram { bucket_size: 4, stash_size: 20 }, n, k, d, 5);
    (
        adv < base / 3.0 && adv < oram / 3.0,
        format!("median s: advanced {adv:.3}, baseline(c=16) {base:.3}, oram {oram:.3}"),
    )
}

fn c5_grouping() -> Outcome {
    let (n, d) = (2000, 50_000);
    let k = sparse_k(0.1, d);
    let input = random_input(&mut ChaCha8Rng::seed_from_u64(5), n, k, d).unwrap();
    let (t_adv, reference) = time_once(&Aggregator::Advanced, &input, 0);
    let mut outputs_equal = true;
    let mut scan = Vec::new();
    for h in [50, 100, 200, 500, 1000, 2000] {
        let (t, out) = time_once(&Aggregator::Grouped { h }, &input, 0);
        outputs_equal &= close(&out.values, &reference.values);
        scan.push((h, t));
    }
    // Confirm the best candidate with medians of three.
    let &(best_h, t_best) = scan.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let again = |agg: Aggregator, first: f64| {
        median(vec![first, time_once(&agg, &input, 1).0, time_once(&agg, &input, 2).0])
    };
    let adv = again(Aggregator::Advanced, t_adv);
    let grouped = again(Aggregator::Grouped { h: best_h }, t_best);
    let ratio = grouped / adv;
    let scan_text = scan.iter().map(|(h, t)| format!("h={h}:{t:.2}s")).collect::<Vec<_>>().join(" ");
    (
        ratio <= 0.9 && outputs_equal,
        format!(
            "advanced {adv:.2}s; scan {scan_text}; best h={best_h} ratio {ratio:.3}; outputs within 1e-5: {outputs_equal}"
        ),
    )
}

fn benchmark(seed: u64) -> FlConfig {
    FlConfig { aggregator: Aggregator::Linear, seed, ..FlConfig::default() }
}

fn jac_config(seed: u64) -> AttackConfig {
    AttackConfig { seed, ..AttackConfig::default() }
}

struct BenchRun {
    top1: f64,
    all: f64,
    /// Round-0 Jac scores per observed user.
    first_round: BTreeMap<u32, Vec<f64>>,
}

fn run_benchmark(fl: &FlConfig) -> BenchRun {
    let fed = Federation::build(fl).unwrap();
    let out = train(fl, &fed).unwrap();
    let models: BTreeMap<u64, Vec<f32>> =
        out.checkpoints.iter().enumerate().map(|(t, th)| (t as u64, th.clone())).collect();
    let cfg = jac_config(fl.seed);
    let results = run_attack(&out.leaks, &models, &fed.mlp, &fed.test, fl.classes(), fl.alpha, &fed.truth(), &cfg)
        .unwrap();
    let (all, top1) = evaluate_attack(&results).unwrap();

    let mut first_round = BTreeMap::new();
    if let Some(leak) = out.leaks.iter().find(|l| l.round == 0) {
        let by_label: Vec<_> = (0..fl.classes()).map(|l| fed.test.filter_label(l)).collect();
        let m0: BTreeMap<u64, Vec<f32>> = [(0, models[&0].clone())].into();
        let teachers = build_teachers(&m0, &fed.mlp, &by_label, fl.alpha, 1, 0, fl.seed).unwrap();
        for (&user, set) in &leak.entries {
            let view: UserView = [(0, set.clone())].into();
            first_round.insert(user, score_jac(&view, &teachers, Concat::RoundPairs).unwrap().scores);
        }
    }
    BenchRun { top1, all, first_round }
}

fn averaged(runs: &[BenchRun]) -> (f64, f64) {
    let n = runs.len() as f64;
    (runs.iter().map(|r| r.top1).sum::<f64>() / n, runs.iter().map(|r| r.all).sum::<f64>() / n)
}

fn sweep(adjust: impl Fn(&mut FlConfig)) -> Vec<BenchRun> {
    SEEDS
        .iter()
        .map(|&s| {
            let mut fl = benchmark(s);
            adjust(&mut fl);
            run_benchmark(&fl)
        })
        .collect()
}

fn c6_attack(reference: &[BenchRun]) -> Outcome {
    let (top1, all) = averaged(reference);
    (
        top1 >= REF_TOP1 && all >= REF_ALL,
        format!("top1 {top1:.3} (>= {REF_TOP1}), all {all:.3} (>= {REF_ALL}) over {} seeds", reference.len()),
    )
}

fn c7_sparsity() -> Outcome {
    let (sparse, _) = averaged(&sweep(|f| f.alpha = 0.05));
    let (dense, _) = averaged(&sweep(|f| f.alpha = 0.5));
    (sparse >= dense - 0.05, format!("top1 alpha=0.05 {sparse:.3}, alpha=0.5 {dense:.3}"))
}

fn c8_noise(reference: &[BenchRun]) -> Outcome {
    let quiet = sweep(|f| f.sigma = 0.0);
    let (noisy_top1, _) = averaged(reference);
    let (quiet_top1, _) = averaged(&quiet);
    let mut compared = 0;
    let mut identical = true;
    for (a, b) in reference.iter().zip(&quiet) {
        identical &= a.first_round.keys().eq(b.first_round.keys());
        for (user, sa) in &a.first_round {
            let Some(sb) = b.first_round.get(user) else { continue };
            identical &= sa.len() == sb.len() && sa.iter().zip(sb).all(|(x, y)| x.to_bits() == y.to_bits());
            compared += 1;
        }
    }
    (
        noisy_top1 >= quiet_top1 - 0.1 && identical && compared > 0,
        format!(
            "top1 sigma=1.12 {noisy_top1:.3}, sigma=0 {quiet_top1:.3}; round-1 scores identical for {compared} users: {identical}"
        ),
    )
}

fn c9_defense() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fl = FlConfig { aggregator: Aggregator::Advanced, ..benchmark(0) };
    let config = dir.path().join("advanced.conf");
    std::fs::write(&config, fl.to_text()).unwrap();
    let run = dir.path().join("run");
    let olive = |args: &[&std::ffi::OsStr]| {
        Command::new(env!("CARGO_BIN_EXE_olive")).args(args).env_remove("OLIVE_SEED").output().unwrap()
    };
    let train = olive(&["fl-train".as_ref(), "--config".as_ref(), config.as_os_str(), "--out-dir".as_ref(), run.as_os_str()]);
    let leaks = run.join("leaks.jsonl");
    let log = std::fs::read_to_string(&leaks).unwrap_or_else(|_| "<missing>".into());
    let attack = olive(&[
        "attack".as_ref(),
        "--leaks".as_ref(),
        leaks.as_os_str(),
        "--checkpoints".as_ref(),
        run.as_os_str(),
        "--config".as_ref(),
        config.as_os_str(),
    ]);
    let stderr = String::from_utf8_lossy(&attack.stderr);
    let ok = train.status.success() && log.is_empty() && attack.status.code() == Some(1)
        && stderr.contains("user never observed");
    (
        ok,
        format!(
            "fl-train exit {:?}, leak log {} bytes, attack exit {:?}: {}",
            train.status.code(),
            log.len(),
            attack.status.code(),
            stderr.trim()
        ),
    )
}

fn c10_dp() -> Outcome {
    let (sigma, clip) = (1.12, 1.0);
    let target = sigma * clip;
    let d = 100_000;
    let n_expected = 30.0;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let agg: Vec<f32> = (0..d).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
    let out = average_and_perturb(
        DenseAggregate { values: agg.clone() },
        n_expected,
        target,
        &mut rng,
        &RefCell::new(NullSink),
    )
    .unwrap();
    let z: Vec<f64> = out.values.iter().zip(&agg).map(|(&o, &a)| o as f64 * n_expected - a as f64).collect();
    let mean = z.iter().sum::<f64>() / d as f64;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d - 1) as f64).sqrt();
    let std_ok = (std - target).abs() <= 0.01 * target;

    let mut worst = 0.0f64;
    let mut untouched_ok = true;
    for _ in 0..10_000 {
        let dim = rng.gen_range(1..=512);
        let scale = 10f32.powf(rng.gen_range(-3.0..2.0));
        let delta: Vec<f32> = (0..dim).map(|_| rng.gen_range(-scale..=scale)).collect();
        let sparse = topk_sparsify(&delta, rng.gen_range(0.01..=1.0));
        let before = sparse.l2_norm();
        let clipped: SparseGradient = l2_clip(sparse.clone(), clip);
        let after = clipped.l2_norm();
        worst = worst.max(after);
        if before <= clip {
            untouched_ok &= clipped == sparse;
        }
    }
    let norm_ok = worst <= clip + 1e-4 && untouched_ok;
    (
        std_ok && norm_ok,
        format!(
            "noise std {std:.5} vs {target} ({:+.3}%); max clipped norm {worst:.6} over 10^4 updates",
            100.0 * (std - target) / target
        ),
    )
}

fn c11_oram() -> Outcome {
    let capacity = 256;
    let cfg = OramConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut oram = PathOram::new(capacity, cfg, &mut rng).unwrap();
    let mut shadow = vec![0.0f32; capacity];
    let mut counts = vec![0u64; oram.leaf_count()];
    let ops = 100_000;
    let mut mismatches = 0;
    let mut errors = 0;
    let mut overflows_at_1e4 = None;
    for op in 0..ops {
        let addr = rng.gen_range(0..capacity as u32);
        if rng.gen_bool(0.5) {
            match oram.read(addr, &mut rng, &mut NullSink) {
                Ok(v) => mismatches += (v.to_bits() != shadow[addr as usize].to_bits()) as usize,
                Err(_) => errors += 1,
            }
        } else {
            let delta = rng.gen_range(-1.0f32..=1.0);
            match oram.write_add(addr, delta, &mut rng, &mut NullSink) {
                Ok(()) => shadow[addr as usize] += delta,
                Err(_) => errors += 1,
            }
        }
        counts[oram.last_leaf() as usize] += 1;
        if op + 1 == 10_000 {
            overflows_at_1e4 = Some(oram.overflow_count());
        }
    }
    let expected = ops as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = (counts.len() - 1) as f64;
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
    let overflows = overflows_at_1e4.unwrap_or(u64::MAX);
    (
        mismatches == 0 && errors == 0 && p >= 0.001 && overflows == 0,
        format!(
            "{ops} ops: {mismatches} mismatches, {errors} errors; leaf chi2 {chi2:.1} on {dof} dof, p = {p:.4}; \
             overflows after 10^4 accesses {overflows} (Z={}, S={})",
            cfg.bucket_size, cfg.stash_size
        ),
    )
}

fn sort_cells(cells: Vec<CtWord>) -> (Vec<CtWord>, AccessTrace) {
    let sink = RefCell::new(AccessTrace::new());
    let mut arr = TracedArray::new(Region::WORK, cells, &sink);
    bitonic_sort(&mut arr, SortKeyOrder::ByIndex).unwrap();
    let out = arr.into_inner();
    (out, sink.into_inner())
}

fn c12_sort() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let arrays = 10_000;
    let mut correct = 0;
    let mut traces: BTreeMap<usize, AccessTrace> = BTreeMap::new();
    let mut traces_equal = true;
    for _ in 0..arrays {
        let len = 1usize << rng.gen_range(0..=7);
        let span = rng.gen_range(1..=2 * len as u32);
        let cells: Vec<CtWord> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    CtWord::SENTINEL
                } else {
                    CtWord::pack(rng.gen_range(0..span), rng.gen_range(-1.0f32..=1.0))
                }
            })
            .collect();
        let mut reference = cells.clone();
        reference.sort_by_key(|c| c.bits());
        let (sorted, trace) = sort_cells(cells);
        let ordered = sorted.windows(2).all(|w| w[0].index() <= w[1].index());
        let mut multiset = sorted.clone();
        multiset.sort_by_key(|c| c.bits());
        correct += (ordered && multiset == reference) as usize;
        match traces.get(&len) {
            Some(t) => traces_equal &= *t == trace,
            None => {
                traces.insert(len, trace);
            }
        }
    }
    let comparators = comparator_count(8);
    (
        correct == arrays && comparators == 24 && traces_equal,
        format!(
            "sorted {correct}/{arrays}; comparators(n=8) = {comparators}; traces equal per length: {traces_equal}"
        ),
    )
}

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    // Shared by criteria 6 and 8; built by whichever runs first.
    let reference = std::cell::OnceCell::new();
    let reference = || reference.get_or_init(|| sweep(|_| {})).as_slice();

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "obliviousness", Box::new(c1_obliviousness)),
        (2, "leakage witness", Box::new(c2_leakage)),
        (3, "correctness oracle", Box::new(c3_correctness)),
        (4, "complexity trend", Box::new(c4_complexity)),
        (5, "grouping optimization", Box::new(c5_grouping)),
        (6, "attack efficacy", Box::new(|| c6_attack(reference()))),
        (7, "sparsity trend", Box::new(c7_sparsity)),
        (8, "noise robustness", Box::new(|| c8_noise(reference()))),
        (9, "defense completeness", Box::new(c9_defense)),
        (10, "dp calibration", Box::new(c10_dp)),
        (11, "oram", Box::new(c11_oram)),
        (12, "sorting network", Box::new(c12_sort)),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria.iter().filter(|(n, ..)| want(*n)) {
        let start = Instant::now();
        let (ok, detail) = check();
        failed += (!ok) as usize;
        println!(
            "{} criterion {n:>2} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
