use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{write_json, write_text, Command, Outcome};
use crate::activation_io::{
    load_dataset, read_dump, write_dump, write_manifest, ActivationTensor, DatasetReader,
    SampleManifest,
};
use crate::causality::{check_cov_propagation, diagonality_contrast, matrix_csv};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::extraction::{extract, ExtractedRep, ExtractionSpec, Strategy};
use crate::filter::{self, read_filter, write_filter};
use crate::infometrics::{rank_strategies, Selection};
use crate::numerics::{Rng, Tensor};
use crate::par::{self, Parallelism};
use crate::pipeline::{self, Sample};
use crate::probe::{self, read_params, write_params, write_training_log, ProbeParams};
use crate::toy_lm::{Prefiller, ToyLm};

const MODE: Parallelism = Parallelism::Parallel;
const SPLITS: [&str; 2] = ["train", "test"];

fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("manifest_{split}.tsv"))
}

fn tokens_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("tokens_{split}.tsv"))
}

pub(super) fn run(cmd: &Command, cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let report = match cmd {
        Command::Gen => gen(cfg, dir)?,
        Command::Extract => extract_cmd(cfg, dir)?,
        Command::TrainProbe => train_probe(cfg, dir)?,
        Command::EvalProbe { k_sweep } => eval_probe(cfg, dir, k_sweep)?,
        Command::Mixture => mixture(cfg, dir)?,
        Command::TrainFilter => train_filter(cfg, dir)?,
        Command::EvalFilter => eval_filter(cfg, dir)?,
        Command::Kib { with_noise } => kib(cfg, dir, *with_noise)?,
        Command::Causality => causality(cfg, dir)?,
        Command::ValidateDump { .. } => unreachable!("handled before config resolution"),
    };
    Ok(Outcome::Report(report))
}

fn write_tokens(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut text = String::from("# sample_id\tlabel\tclass\ttokens\n");
    for s in samples {
        let toks: Vec<String> = s.tokens.iter().map(u32::to_string).collect();
        let _ = writeln!(text, "{}\t{}\t{}\t{}", s.id, s.label, s.class, toks.join(" "));
    }
    write_text(path, &text)
}

fn read_tokens(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| Error::Dataset {
            message: format!("{} line {}: {m}", path.display(), i + 1),
            sample_ids: vec![f[0].to_string()],
        };
        if f.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let tokens = f[3]
            .split(' ')
            .map(str::parse)
            .collect::<std::result::Result<Vec<u32>, _>>()
            .map_err(|_| bad("bad token id"))?;
        out.push(Sample {
            id: f[0].to_string(),
            label: f[1].parse().map_err(|_| bad("bad label"))?,
            class: f[2].parse().map_err(|_| bad("bad class"))?,
            tokens,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct GenReport {
    classes: usize,
    held_out_classes: Vec<usize>,
    train_samples: usize,
    test_samples: usize,
    seq_len: usize,
    layers: usize,
    dims: usize,
}

fn gen(cfg: &RunConfig, dir: &Path) -> Result<serde_json::Value> {
    let corpus = pipeline::build_corpus(cfg, MODE)?;
    let lm = pipeline::build_lm(cfg)?;
    let dumps = dir.join("dumps");
    std::fs::create_dir_all(&dumps).map_err(|e| Error::io(&dumps, e))?;
    for (split, samples) in SPLITS.iter().zip([&corpus.train, &corpus.test]) {
        let records = par::try_map_range(MODE, samples.len(), |i| -> Result<SampleManifest> {
            let s = &samples[i];
            let file = format!("{}.iprb", s.id);
            write_dump(&lm.prefill(&s.tokens)?, &dumps.join(&file))?;
            Ok(SampleManifest {
                sample_id: s.id.clone(),
                class_label: s.label,
                token_count: s.tokens.len(),
                source_tag: format!("toy_lm:mha_post_proj:class{}", s.class),
                dump_filename: file,
            })
        })?;
        write_manifest(&records, &manifest_path(dir, split))?;
        write_tokens(&tokens_path(dir, split), samples)?;
    }
    println!(
        "generated {} train and {} test dumps",
        corpus.train.len(),
        corpus.test.len()
    );
    write_json(
        &dir.join("gen.json"),
        &GenReport {
            classes: cfg.corpus.classes,
            held_out_classes: cfg.corpus.held_out_classes.clone(),
            train_samples: corpus.train.len(),
            test_samples: corpus.test.len(),
            seq_len: cfg.corpus.seq_len,
            layers: cfg.toy_lm.layers,
            dims: cfg.toy_lm.hidden,
        },
    )
}

/// Extracted representations of one split, with the manifest records.
fn load_reps(
    cfg: &RunConfig,
    dir: &Path,
    split: &str,
    spec: &ExtractionSpec,
    copyrighted_only: bool,
) -> Result<(Vec<ExtractedRep>, Vec<SampleManifest>)> {
    let reader = DatasetReader::open(
        &manifest_path(dir, split),
        &dir.join("dumps"),
        Some(cfg.probe.classes),
    )?;
    let mut reps = Vec::new();
    let mut records = Vec::new();
    for item in reader {
        let (t, rec) = item?;
        if copyrighted_only && rec.class_label < 0 {
            continue;
        }
        reps.push(extract(&t, spec)?);
        records.push(rec);
    }
    Ok((reps, records))
}

fn labels_of(records: &[SampleManifest]) -> Vec<usize> {
    records.iter().map(|r| r.class_label as usize).collect()
}

fn extract_cmd(cfg: &RunConfig, dir: &Path) -> Result<serde_json::Value> {
    let out = dir.join("extracted");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut counts = Vec::new();
    for split in SPLITS {
        let (reps, records) = load_reps(cfg, dir, split, &cfg.extraction, false)?;
        let mut rows = Vec::with_capacity(reps.len());
        for (rep, rec) in reps.iter().zip(&records) {
            write_dump(&rep.to_activation()?, &out.join(&rec.dump_filename))?;
            rows.push(SampleManifest {
                token_count: rep.k,
                source_tag: format!("extracted:{}:k{}", cfg.extraction.strategy, rep.k),
                ..rec.clone()
            });
        }
        write_manifest(&rows, &dir.join(format!("manifest_extracted_{split}.tsv")))?;
        counts.push(rows.len());
    }
    write_json(
        &dir.join("extract.json"),
        &serde_json::json!({
            "strategy": cfg.extraction.strategy.name(),
            "k": cfg.extraction.k,
            "train_samples": counts[0],
            "test_samples": counts[1],
        }),
    )
}

fn fit_probe(cfg: &RunConfig, reps: Vec<ExtractedRep>, labels: &[usize]) -> Result<(ProbeParams, probe::TrainingLog)> {
    let data: Vec<(ExtractedRep, usize)> = reps.into_iter().zip(labels.iter().copied()).collect();
    probe::train(&cfg.probe, &data, &mut Rng::new(cfg.probe.seed), MODE)
}

fn train_probe(cfg: &RunConfig, dir: &Path) -> Result<serde_json::Value> {
    let (reps, records) = load_reps(cfg, dir, "train", &cfg.extraction, true)?;
    let n = reps.len();
    let (params, log) = fit_probe(cfg, reps, &labels_of(&records))?;
    write_params(&params, &dir.join("probe.ippm"))?;
    write_training_log(&log, &dir.join("training_log.csv"))?;
    let last = log.epochs.last();
    write_json(
        &dir.join("train_probe.json"),
        &serde_json::json!({
            "samples": n,
            "strategy": cfg.extraction.strategy.name(),
            "k": cfg.extraction.k,
            "epochs": log.epochs.len(),
            "selected_epoch": log.selected_epoch,
            "final_loss": last.map(|e| e.loss),
            "train_accuracy": last.map(|e| e.accuracy),
        }),
    )
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    accuracy: f64,
}

fn eval_probe(cfg: &RunConfig, dir: &Path, k_sweep: &[usize]) -> Result<serde_json::Value> {
    let params = read_params(&dir.join("probe.ippm"))?;
    let (reps, records) = load_reps(cfg, dir, "test", &cfg.extraction, true)?;
    let eval = pipeline::evaluate_probe(&params, &reps, &labels_of(&records), MODE)?;
    let mut sweep = Vec::new();
    for &k in k_sweep {
        if k == 0 || k > cfg.corpus.seq_len {
            return Err(Error::config("/extraction/k", format!("k-sweep value {k} outside 1..=seq_len")));
        }
        let spec = ExtractionSpec {
            strategy: cfg.extraction.strategy,
            k,
        };
        let (train, train_rec) = load_reps(cfg, dir, "train", &spec, true)?;
        let (p, _) = fit_probe(cfg, train, &labels_of(&train_rec))?;
        let (test, test_rec) = load_reps(cfg, dir, "test", &spec, true)?;
        let e = pipeline::evaluate_probe(&p, &test, &labels_of(&test_rec), MODE)?;
        sweep.push(SweepRow { k, accuracy: e.accuracy });
    }
    if !sweep.is_empty() {
        let mut csv = String::from("k,accuracy\n");
        for r in &sweep {
            let _ = writeln!(csv, "{},{}", r.k, r.accuracy);
        }
        write_text(&dir.join("k_sweep.csv"), &csv)?;
    }
    println!("accuracy {:.4} over {} samples", eval.accuracy, eval.samples);
    write_json(
        &dir.join("eval_probe.json"),
        &serde_json::json!({
            "strategy": cfg.extraction.strategy.name(),
            "k": cfg.extraction.k,
            "samples": eval.samples,
            "accuracy": eval.accuracy,
            "per_class_accuracy": eval.per_class_accuracy,
            "confusion": eval.confusion,
            "k_sweep": sweep,
        }),
    )
}

fn mixture(cfg: &RunConfig, dir: &Path) -> Result<serde_json::Value> {
    let params = read_params(&dir.join("probe.ippm"))?;
    let spec = pipeline::corpus_spec(cfg)?;
    let lm = pipeline::build_lm(cfg)?;
    let report = pipeline::run_mixtures(cfg, &spec, &lm, &params, MODE)?;
    println!("mixture MSE {:.4} over {} samples", report.mse, report.samples.len());
    write_json(&dir.join("mixture.json"), &report)
}

fn train_filter(cfg: &RunConfig, dir: &Path) -> Result<serde_json::Value> {
    let params = read_params(&dir.join("probe.ippm"))?;
    let lm = pipeline::build_lm(cfg)?;
    let data: Vec<(Vec<u32>, i64)> = read_tokens(&tokens_path(dir, "train"))?
        .into_iter()
        .filter(|s| s.label >= 0)
        .map(|s| (s.tokens, s.label))
        .collect();
    let (state, log) = filter::train_filter(&cfg.filter, &params, &cfg.extraction, &lm, &data, MODE)?;
    write_filter(&state, &dir.join("filter.ipfs"))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in log.epoch_loss.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", e + 1, l);
    }
    write_text(&dir.join("filter_log.csv"), &csv)?;
    write_json(
        &dir.join("train_filter.json"),
        &serde_json::json!({
            "samples": data.len(),
            "epochs": log.epoch_loss.len(),
            "final_loss": log.epoch_loss.last(),
            "positive_similarity": log.positive_similarity,
            "negative_similarity": log.negative_similarity,
            "threshold": state.threshold,
            "training_tpr": log.training_tpr,
        }),
    )
}

fn eval_filter(cfg: &RunConfig, dir: &Path) -> Result<serde_json::Value> {
    let params = read_params(&dir.join("probe.ippm"))?;
    let state = read_filter(&dir.join("filter.ipfs"))?;
    state.check_probe(&params)?;
    let (reps, records) = load_reps(cfg, dir, "test", &cfg.extraction, false)?;
    let embedded = par::try_map_range(MODE, reps.len(), |i| filter::embed(&state, &params, &reps[i]))?;
    let samples: Vec<(String, i64, Vec<f64>)> = records
        .iter()
        .zip(embedded)
        .map(|(r, e)| (r.sample_id.clone(), r.class_label, e))
        .collect();
    let report = filter::evaluate(&state, &samples)?;
    println!("filter AUC {:.4}, TPR {:.4}, FPR {:.4}", report.auc, report.tpr, report.fpr);
    write_json(&dir.join("eval_filter.json"), &report)
}

fn kib(cfg: &RunConfig, dir: &Path, with_noise: bool) -> Result<serde_json::Value> {
    let data: Vec<(ActivationTensor, usize)> = load_dataset(
        &manifest_path(dir, "test"),
        &dir.join("dumps"),
        Some(cfg.probe.classes),
    )?
    .into_iter()
    .filter(|(_, r)| r.class_label >= 0)
    .map(|(t, r)| (t, r.class_label as usize))
    .collect();
    let k = cfg.extraction.k;
    let mut selections: Vec<Selection> = Strategy::ALL
        .iter()
        .map(|&strategy| Selection::Extract(ExtractionSpec { strategy, k }))
        .collect();
    if with_noise {
        selections.push(Selection::Noise { k });
    }
    let report = rank_strategies(&data, &selections, &cfg.infometrics, MODE)?;
    for row in &report.rows {
        println!("{:>6}  K_IB {:.4}", row.strategy, row.total);
    }
    write_json(&dir.join("kib.json"), &report)
}

#[derive(Serialize)]
struct LayerMass {
    layer: usize,
    mha_off_diag_mass: f64,
    ffn_off_diag_mass: f64,
}

fn causality(cfg: &RunConfig, dir: &Path) -> Result<serde_json::Value> {
    let lm: ToyLm = pipeline::build_lm(cfg)?;
    let z = &cfg.causality;
    let alphabet = cfg.toy_lm.vocab - 1;
    let mut rng = Rng::derived(cfg.seed, &[0xCA05]);
    let probe_tokens: Vec<u32> = (0..z.seq_len).map(|_| rng.below(alphabet) as u32).collect();
    let a = lm.attention_matrix(&probe_tokens, 0, 0)?;
    let v = Tensor::new(
        vec![z.propagation_samples, z.seq_len],
        (0..z.propagation_samples * z.seq_len).map(|_| rng.normal()).collect(),
    )?;
    let prop = check_cov_propagation(&a, &v, &Tensor::identity(z.seq_len))?;
    write_text(&dir.join("cov_analytic.csv"), &matrix_csv(&prop.analytic))?;
    write_text(&dir.join("cov_empirical.csv"), &matrix_csv(&prop.empirical))?;

    let sequences: Vec<Vec<u32>> = (0..z.samples)
        .map(|_| (0..z.seq_len).map(|_| rng.below(alphabet) as u32).collect())
        .collect();
    let reports = diagonality_contrast(&lm, &sequences, MODE)?;
    let mut layers = Vec::new();
    for (mha, ffn) in &reports {
        for r in [mha, ffn] {
            if let Some(p) = &r.precision {
                let side = serde_json::to_value(r.side).expect("side serializes");
                let name = format!("precision_{}_l{}.csv", side.as_str().unwrap_or("x"), r.layer);
                write_text(&dir.join(name), &matrix_csv(p))?;
            }
        }
        layers.push(LayerMass {
            layer: mha.layer,
            mha_off_diag_mass: mha.off_diag_mass,
            ffn_off_diag_mass: ffn.off_diag_mass,
        });
    }
    let contrast = layers.iter().all(|l| l.ffn_off_diag_mass < l.mha_off_diag_mass);
    println!(
        "propagation error {:.4}; FFN below MHA at every layer: {contrast}",
        prop.relative_error
    );
    write_json(
        &dir.join("causality.json"),
        &serde_json::json!({
            "propagation": {
                "layer": 0,
                "head": 0,
                "seq_len": z.seq_len,
                "samples": z.propagation_samples,
                "relative_error": prop.relative_error,
            },
            "diagonality_samples": z.samples,
            "layers": layers,
            "ffn_below_mha_all_layers": if contrast { 1.0 } else { 0.0 },
        }),
    )
}

pub(super) fn validate_dump(files: &[PathBuf], manifest: Option<&Path>, dumps: Option<&Path>) -> Result<Outcome> {
    if files.is_empty() && manifest.is_none() {
        return Err(Error::Input("validate-dump needs dump files or --manifest".into()));
    }
    let mut invalid = 0;
    for f in files {
        match read_dump(f) {
            Ok(t) => println!("ok\t{}\t{}x{}x{}", f.display(), t.layers(), t.tokens(), t.dims()),
            Err(e) => {
                invalid += 1;
                println!("invalid\t{}\t{e}", f.display());
            }
        }
    }
    if let Some(m) = manifest {
        let base = dumps
            .map(Path::to_path_buf)
            .or_else(|| m.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        match load_dataset(m, &base, None) {
            Ok(rows) => println!("ok\t{}\t{} samples", m.display(), rows.len()),
            Err(Error::Dataset { message, sample_ids }) => {
                invalid += sample_ids.len().max(1);
                println!("invalid\t{}\t{message}: {}", m.display(), sample_ids.join(", "));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Outcome::Invalid(invalid))
}
