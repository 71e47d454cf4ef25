//! Acceptance gate: one PASS/FAIL line per headline criterion, on the
//! desk-scale synthetic protocol (toy LM L=4, d=64, 8 classes, 160 train /
//! 200 test per class, 512-token sequences, INTER k=3).
//!
//! Runs without the libtest harness so every line reaches the console.
//! The heavy protocol takes roughly half an hour on one core.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use probekit::activation_io::{read_dump, write_dump, ActivationTensor, HEADER_LEN};
use probekit::config::RunConfig;
use probekit::extraction::{select, ExtractedRep, ExtractionSpec, Strategy};
use probekit::filter::{embed, evaluate, train_filter};
use probekit::infometrics::{mi_cc, mi_dc, rank_strategies, MiEstimatorConfig, Selection};
use probekit::numerics::Rng;
use probekit::par::Parallelism;
use probekit::pipeline::{build_corpus, build_lm, evaluate_probe, extract_all, prefill_all, run_mixtures, Sample};
use probekit::probe::{backward, forward, infer, loss_ce, train, ParamGroup, ProbeDims, ProbeParams};

const MODE: Parallelism = Parallelism::Parallel;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn protocol(seed: u64) -> RunConfig {
    RunConfig { seed, ..RunConfig::default() }.effective()
}

fn tokens(set: &[Sample]) -> Vec<&[u32]> {
    set.iter().map(|s| s.tokens.as_slice()).collect()
}

fn labelled(reps: &[ExtractedRep], set: &[Sample]) -> Vec<(ExtractedRep, usize)> {
    reps.iter()
        .zip(set)
        .filter(|(_, s)| s.label >= 0)
        .map(|(r, s)| (r.clone(), s.label as usize))
        .collect()
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let d = ProbeDims { layers: 3, k: 2, dims: 4, fusion: 5, hidden: 6, cls_hidden: 7, classes: 3 };
    let (mut worst, mut tiny_worst, mut checked): (f64, f64, usize) = (0.0, 0.0, 0);
    for seed in 0..5 {
        let mut rng = Rng::new(7000 + seed);
        let mut p = ProbeParams::init(d, true, &mut rng);
        for v in p.values_mut() {
            *v += 0.1 * rng.normal();
        }
        let values = (0..d.layers * d.k * d.dims).map(|_| rng.normal()).collect();
        let rep = ExtractedRep::from_block(d.layers, d.k, d.dims, values).unwrap();
        let label = rng.below(d.classes);
        let grad = backward(&p, &forward(&p, &rep).unwrap().1, label).unwrap();
        let loss = |q: &ProbeParams| loss_ce(&infer(q, &rep).unwrap(), label).unwrap();
        let eps = 1e-5;
        for g in ParamGroup::ALL {
            for i in d.range(g) {
                let (mut plus, mut minus) = (p.clone(), p.clone());
                plus.values_mut()[i] += eps;
                minus.values_mut()[i] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let diff = (fd - grad[i]).abs();
                let scale = fd.abs().max(grad[i].abs());
                if scale >= 1e-6 {
                    worst = worst.max(diff / scale);
                    checked += 1;
                } else {
                    tiny_worst = tiny_worst.max(diff);
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        "gradient correctness",
        worst <= 1e-4 && tiny_worst <= 1e-9 && secs < 60.0,
        format!(
            "max relative error {worst:.2e} (<= 1e-4) over {checked} gradients, \
             max absolute error {tiny_worst:.1e} on near-zero ones, 5 seeds in {secs:.1} s (< 60 s)"
        ),
    )
}

fn mi_calibration() -> Outcome {
    let cfg = MiEstimatorConfig::default();
    let n = 2000;
    let mut rng = Rng::new(31);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for rho in [0.0f64, 0.5, 0.9] {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let (x, z) = (rng.normal(), rng.normal());
            a.push(vec![x]);
            b.push(vec![rho * x + (1.0 - rho * rho).sqrt() * z]);
        }
        let est = mi_cc(&a, &b, &cfg, MODE).unwrap();
        let truth = -0.5 * (1.0 - rho * rho).ln();
        worst = worst.max((est - truth).abs());
        parts.push(format!("rho={rho}: {est:.3} vs {truth:.3}"));
    }
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let samples: Vec<Vec<f64>> = labels.iter().map(|&c| vec![10.0 * c as f64 + rng.normal()]).collect();
    let dc = mi_dc(&labels, &samples, &cfg, MODE).unwrap();
    let dc_err = (dc - std::f64::consts::LN_2).abs();
    report(
        "MI estimator calibration",
        worst <= 0.1 && dc_err <= 0.05,
        format!("{}; max error {worst:.3} (<= 0.1); separable mi_dc {dc:.3} vs ln 2 (error {dc_err:.3} <= 0.05)", parts.join(", ")),
    )
}

fn extraction_exhaustive() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut cases = 0;
    let mut bad = Vec::new();
    for n in 1..=16 {
        for k in 1..=n {
            for t in [common::random_tensor(&mut rng, 3, n, 4), common::tie_heavy_tensor(&mut rng, 3, n, 4)] {
                for strategy in Strategy::ALL {
                    cases += 1;
                    let got = select(&t, &ExtractionSpec { strategy, k }).unwrap();
                    let want = match strategy {
                        Strategy::Inter => vec![common::inter_oracle(n, k); 3],
                        Strategy::Var => common::var_oracle(&t, k),
                        Strategy::AVar => vec![common::avar_oracle(&t, k); 3],
                    };
                    let distinct = got.iter().all(|s| s.len() == k && s.windows(2).all(|w| w[0] < w[1]) && s.iter().all(|&i| i < n));
                    if got != want || !distinct {
                        bad.push(format!("{strategy:?} n={n} k={k}"));
                    }
                }
            }
        }
    }
    report(
        "extraction exhaustive correctness",
        bad.is_empty(),
        format!("{cases} cases (n <= 16, k <= n, 3 strategies), {} mismatches {:?}", bad.len(), bad.iter().take(3).collect::<Vec<_>>()),
    )
}

fn io_roundtrip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(99);
    let mut exact = 0;
    for i in 0..200 {
        let (l, n, d) = (1 + rng.below(5), 1 + rng.below(40), 1 + rng.below(24));
        let t = common::random_tensor(&mut rng, l, n, d);
        let path = dir.path().join(format!("{i}.iprb"));
        write_dump(&t, &path).unwrap();
        let back = read_dump(&path).unwrap();
        let bits = |x: &ActivationTensor| x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        exact += usize::from(bits(&back) == bits(&t) && back.tokens() == n && back.dims() == d);
    }
    let bytes = common::random_tensor(&mut rng, 3, 5, 7).to_bytes();
    let (mut flips, mut caught) = (0, 0);
    for pos in 0..HEADER_LEN {
        for mask in 1..=255u8 {
            let mut b = bytes.clone();
            b[pos] ^= mask;
            flips += 1;
            caught += usize::from(ActivationTensor::from_bytes(&b, Path::new("fuzz")).is_err());
        }
    }
    report(
        "I/O roundtrip and header fuzzing",
        exact == 200 && caught == flips,
        format!("{exact}/200 tensors bit-exact; {caught}/{flips} single-byte header corruptions detected"),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.json");
    std::fs::write(&cfg, common::TINY_CONFIG).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let codes: Vec<i32> = common::run_pipeline(&cfg, &a).into_iter().chain(common::run_pipeline(&cfg, &b)).collect();
    let diff = common::differing_outputs(&a, &b);
    report(
        "determinism",
        codes.iter().all(|&c| c == 0) && diff.is_empty(),
        format!("{} commands run twice, exit codes {:?}, differing outputs {diff:?}", common::PIPELINE.len(), codes),
    )
}

fn covariance_checks() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut errors = Vec::new();
    let mut mha: Vec<Vec<f64>> = Vec::new();
    let mut ffn: Vec<Vec<f64>> = Vec::new();
    for seed in SEEDS {
        let dir = tmp.path().join(seed.to_string());
        let args = ["probekit", "--seed", &seed.to_string(), "--output", dir.to_str().unwrap(), "causality"];
        assert_eq!(probekit::cli::run_from(args), 0);
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("causality.json")).unwrap()).unwrap();
        errors.push(v["propagation"]["relative_error"].as_f64().unwrap());
        for (l, layer) in v["layers"].as_array().unwrap().iter().enumerate() {
            if mha.len() <= l {
                mha.push(Vec::new());
                ffn.push(Vec::new());
            }
            mha[l].push(layer["mha_off_diag_mass"].as_f64().unwrap());
            ffn[l].push(layer["ffn_off_diag_mass"].as_f64().unwrap());
        }
    }
    let err = median(errors);
    let pairs: Vec<(f64, f64)> = mha.into_iter().zip(ffn).map(|(m, f)| (median(m), median(f))).collect();
    let ordered = pairs.iter().all(|(m, f)| f < m);
    report(
        "covariance propagation and precision diagonality",
        err <= 0.05 && ordered,
        format!(
            "median relative error {err:.4} (<= 0.05) at N=10000; per-layer median off-diagonal mass MHA/FFN {}",
            pairs.iter().map(|(m, f)| format!("{m:.3}/{f:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

/// Everything measured on one seed of the standard protocol.
struct SeedRun {
    accuracy: f64,
    seconds: f64,
}

fn standard_seed(seed: u64, extras: &mut Vec<Outcome>) -> SeedRun {
    let t = Instant::now();
    let cfg = protocol(seed);
    let corpus = build_corpus(&cfg, MODE).unwrap();
    let lm = build_lm(&cfg).unwrap();
    let train_reps = extract_all(&lm, &tokens(&corpus.train), &cfg.extraction, MODE).unwrap();
    // Seed 0 keeps the full test activations for the K_IB comparison.
    let test_acts = (seed == 0).then(|| prefill_all(&lm, &corpus.test, MODE).unwrap());
    let test_reps = match &test_acts {
        Some(acts) => acts.iter().map(|a| probekit::extraction::extract(a, &cfg.extraction).unwrap()).collect(),
        None => extract_all(&lm, &tokens(&corpus.test), &cfg.extraction, MODE).unwrap(),
    };
    let (params, _) = train(&cfg.probe, &labelled(&train_reps, &corpus.train), &mut Rng::new(cfg.probe.seed), MODE).unwrap();
    let labels: Vec<usize> = corpus.test.iter().map(|s| s.label as usize).collect();
    let accuracy = evaluate_probe(&params, &test_reps, &labels, MODE).unwrap().accuracy;
    let seconds = t.elapsed().as_secs_f64();
    println!("  seed {seed}: held-out accuracy {accuracy:.4}, end-to-end {seconds:.0} s");

    if let Some(acts) = test_acts {
        let mix = run_mixtures(&cfg, &corpus.spec, &lm, &params, MODE).unwrap();
        extras.push(report(
            "mixture task",
            mix.mse <= 0.05,
            format!("mean MSE {:.4} over {} mixtures at 15/15/70 (<= 0.05)", mix.mse, mix.samples.len()),
        ));

        let data: Vec<(ActivationTensor, usize)> = acts.into_iter().zip(&labels).map(|(a, &l)| (a, l)).collect();
        let k = cfg.extraction.k;
        let selections = [Selection::Extract(ExtractionSpec { strategy: Strategy::Inter, k }), Selection::Noise { k }];
        let kib = rank_strategies(&data, &selections, &cfg.infometrics, MODE).unwrap();
        drop(data);
        let score = |name: &str| kib.rows.iter().find(|r| r.strategy == name).unwrap().total;
        let (inter, noise) = (score("inter"), score("noise"));
        extras.push(report(
            "K_IB ordering",
            inter > noise,
            format!("K_IB inter {inter:.4} vs noise {noise:.4} (inter must be higher)"),
        ));

        extras.push(filter_run(&corpus.train, &train_reps, &test_reps));
    }
    SeedRun { accuracy, seconds }
}

/// Classes 6 and 7 become non-copyrighted; the same token sequences are
/// reused, only the labels change.
fn filter_run(all_train: &[Sample], train_reps: &[ExtractedRep], test_reps: &[ExtractedRep]) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.corpus.held_out_classes = vec![6, 7];
    cfg.probe.classes = 6;
    let cfg = cfg.effective();
    cfg.validate().unwrap();
    let corpus = build_corpus(&cfg, MODE).unwrap();
    assert!(corpus.train.iter().zip(all_train).all(|(a, b)| a.tokens == b.tokens));
    let lm = build_lm(&cfg).unwrap();
    let (probe, _) = train(&cfg.probe, &labelled(train_reps, &corpus.train), &mut Rng::new(cfg.probe.seed), MODE).unwrap();
    let data: Vec<(Vec<u32>, i64)> = corpus.train.iter().filter(|s| s.label >= 0).map(|s| (s.tokens.clone(), s.label)).collect();
    let (state, log) = train_filter(&cfg.filter, &probe, &cfg.extraction, &lm, &data, MODE).unwrap();
    let samples: Vec<(String, i64, Vec<f64>)> = corpus
        .test
        .iter()
        .zip(test_reps)
        .map(|(s, r)| (s.id.clone(), s.label, embed(&state, &probe, r).unwrap()))
        .collect();
    let r = evaluate(&state, &samples).unwrap();
    report(
        "filter with two held-out classes",
        r.auc >= 0.95 && log.training_tpr >= 0.95,
        format!(
            "AUC {:.4} (>= 0.95); training TPR at threshold {:.4} (>= 0.95); test TPR {:.4}, FPR {:.4}",
            r.auc, log.training_tpr, r.tpr, r.fpr
        ),
    )
}

fn no_signal_control() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.corpus.separability = 0.0;
    let cfg = cfg.effective();
    let corpus = build_corpus(&cfg, MODE).unwrap();
    let lm = build_lm(&cfg).unwrap();
    let train_reps = extract_all(&lm, &tokens(&corpus.train), &cfg.extraction, MODE).unwrap();
    let test_reps = extract_all(&lm, &tokens(&corpus.test), &cfg.extraction, MODE).unwrap();
    let (params, _) = train(&cfg.probe, &labelled(&train_reps, &corpus.train), &mut Rng::new(cfg.probe.seed), MODE).unwrap();
    let labels: Vec<usize> = corpus.test.iter().map(|s| s.label as usize).collect();
    let acc = evaluate_probe(&params, &test_reps, &labels, MODE).unwrap().accuracy;
    report(
        "no-signal control",
        (acc - 0.125).abs() <= 0.03,
        format!("accuracy {acc:.4} at separability 0 (within 0.03 of 0.125)"),
    )
}

fn main() -> ExitCode {
    probekit::par::init_thread_pool();
    let mut outcomes = vec![
        gradient_check(),
        mi_calibration(),
        extraction_exhaustive(),
        io_roundtrip(),
        determinism(),
        covariance_checks(),
    ];
    let mut extras = Vec::new();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| standard_seed(s, &mut extras)).collect();
    let acc = median(runs.iter().map(|r| r.accuracy).collect());
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    outcomes.push(report(
        "contribution analysis accuracy",
        acc >= 0.90 && slowest <= 600.0,
        format!(
            "3-seed median held-out accuracy {acc:.4} (>= 0.90); slowest seed end-to-end {slowest:.0} s (<= 600 s, {} threads)",
            threads()
        ),
    ));
    outcomes.extend(extras);
    outcomes.push(no_signal_control());

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!("\n{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    for o in &failed {
        println!("  failed: {} ({})", o.name, o.detail);
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
