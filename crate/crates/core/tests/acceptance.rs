//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p nri-core --test acceptance` evaluates every criterion that
//! fits in a few minutes on one core and marks the training-heavy ones
//! (5, 6, 7, 10, 11) as SKIP. `cargo test -p nri-core --test acceptance --
//! --ignored` runs all twelve at full desk scale (many CPU-hours).

mod common;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nri_core::config::RunConfig;
use nri_core::evalsuite::{
    baseline_corr_path, empty_graph_test, evaluate_checkpoint, run_variant, Accuracy, Variant,
};
use nri_core::gradsuite::run_suite;
use nri_core::noise::Stream;
use nri_core::sim::{generate_dataset, write_dataset};
use nri_core::train::{train_run, TrainOutcome};
use nri_core::{Checkpoint, Dataset, NriModel, TrainConfig};

const DESK_COUNTS: &str = "10000, 2000, 2000";

/// Criteria whose stated threshold cannot be met by a correct
/// implementation; they are reported but do not fail the run.
const UNATTAINABLE: &[(u32, &str)] = &[(
    4,
    "a relaxed sample is ≥ 0.99 one-hot only when the Gumbel-perturbed logit gap exceeds τ·ln 99; \
     at τ = 0.01 that misses ≈ 2% of draws for these logits (closed form agrees)",
)];

#[derive(Clone, Debug)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: u32,
    title: &'static str,
    status: Status,
    detail: String,
}

fn emit(line: &Line) {
    let tag = match line.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    // Written past the test harness's capture so the lines always show.
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "criterion {:>2} [{tag}] {}: {}",
        line.id, line.title, line.detail
    )
    .unwrap();
    out.flush().unwrap();
}

fn judged(pass: bool) -> Status {
    if pass {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn criterion_1() -> (Status, String) {
    let start = Instant::now();
    let results = run_suite(None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    let detail = format!(
        "{} checks, worst rel. error {worst:.2e}, {secs:.1}s{}",
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failing: {failed:?}")
        }
    );
    (judged(failed.is_empty() && secs < 60.0), detail)
}

fn criterion_2() -> (Status, String) {
    let start = Instant::now();
    let drift = common::springs_energy_drift(10);
    let omega = common::two_body_frequency();
    let omega_err = (omega - 2f64.sqrt()).abs() / 2f64.sqrt();
    let phase_err = common::kuramoto_uncoupled_error(5);
    let (force, clip) = common::charged_max_pair_force(5);
    let secs = start.elapsed().as_secs_f64();
    let pass = drift < 1e-4 && omega_err < 1e-3 && phase_err < 1e-8 && force <= clip && secs < 60.0;
    let detail = format!(
        "energy drift {drift:.1e}, two-body ω {omega:.6} (rel. err {omega_err:.1e}), \
         uncoupled phase err {phase_err:.1e}, max pair force {force} ≤ {clip}, {secs:.1}s"
    );
    (judged(pass), detail)
}

fn criterion_3() -> (Status, String) {
    let err = common::vectorization_error(2..=8);
    (
        judged(err < 1e-12),
        format!("max |vectorized − naive| {err:.1e} over N = 2..8"),
    )
}

fn criterion_4() -> (Status, String) {
    let start = Instant::now();
    let cases = [
        vec![0.7f64.ln(), 0.3f64.ln()],
        vec![0.1f64.ln(), 0.2f64.ln(), 0.3f64.ln(), 0.4f64.ln()],
    ];
    let mut marginal_err: f64 = 0.0;
    let mut sharp_min: f64 = 1.0;
    for (i, logits) in cases.iter().enumerate() {
        let (freq, _) = common::concrete_statistics(logits, 0.5, 100_000, 40 + i as u64, 0.99);
        for (f, p) in freq.iter().zip(common::softmax(logits)) {
            marginal_err = marginal_err.max((f - p).abs());
        }
        let (_, sharp) = common::concrete_statistics(logits, 0.01, 100_000, 50 + i as u64, 0.99);
        sharp_min = sharp_min.min(sharp);
    }
    let gap = (0.7f64 / 0.3).ln();
    let predicted = 1.0 - common::two_type_blur_probability(gap, 0.01, 0.99);
    let secs = start.elapsed().as_secs_f64();
    let pass = marginal_err < 0.01 && sharp_min >= 0.99 && secs < 60.0;
    let detail = format!(
        "τ=0.5 argmax marginals within {:.2}% (need < 1%); τ=0.01 max entry > 0.99 in {:.2}% of draws \
         (need ≥ 99%; closed form for the two-type case {:.2}%), {secs:.1}s",
        100.0 * marginal_err,
        100.0 * sharp_min,
        100.0 * predicted
    );
    (judged(pass), detail)
}

fn criterion_8(data: &Dataset) -> (Status, String) {
    let r = baseline_corr_path(&[&data.train, &data.valid], &data.test).unwrap();
    let detail = format!(
        "{:.2}% on {} test trajectories ({} correlation, threshold {:.3}); target 52.4 ± 5",
        r.accuracy,
        data.test.len(),
        if r.absolute { "absolute" } else { "signed" },
        r.threshold
    );
    (judged((r.accuracy - 52.4).abs() <= 5.0), detail)
}

fn criterion_9() -> (Status, String) {
    let (min_kl, at_prior, one_hot) = common::kl_properties(10_000);
    let pass = min_kl >= 0.0 && at_prior <= 1e-12 && one_hot <= 1e-12;
    (
        judged(pass),
        format!(
            "min KL {min_kl:.2e} ≥ 0, |KL at prior| {at_prior:.1e}, |one-hot − ln K| {one_hot:.1e}"
        ),
    )
}

fn same_files(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    let mut count = 0;
    for path in names {
        let rel = path.strip_prefix(a).unwrap();
        if path.is_dir() {
            count += same_files(&path, &b.join(rel))?;
            continue;
        }
        let (x, y) = (
            std::fs::read(&path).unwrap(),
            std::fs::read(b.join(rel)).map_err(|e| e.to_string())?,
        );
        if x != y {
            return Err(format!("{} differs", rel.display()));
        }
        count += 1;
    }
    Ok(count)
}

fn criterion_12() -> (Status, String) {
    let cfg = RunConfig::parse(
        "system = springs\nn_objects = 3\ncounts = 12, 4, 4\nseed = 3\nepochs = 2\nbatch_size = 4\n\
         encoder_hidden = 16\ndecoder_hidden = 16\n",
    )
    .unwrap();
    let run = |dir: &Path| -> Vec<u8> {
        let data = generate_dataset(&cfg.system, cfg.counts, cfg.seed).unwrap();
        std::fs::create_dir_all(dir.join("data")).unwrap();
        write_dataset(&dir.join("data"), &data).unwrap();
        let model = NriModel::new(cfg.model.clone()).unwrap();
        let train = TrainConfig {
            checkpoint_dir: Some(dir.join("run")),
            ..cfg.train.clone()
        };
        let out = train_run(&model, &data, &train).unwrap();
        let (row, _) = evaluate_checkpoint(
            &out.best,
            "NRI (learned)",
            &data.test,
            cfg.burn_in,
            &cfg.horizons,
            4,
        )
        .unwrap();
        let mut bits = Vec::new();
        for (_, mse) in row.mse {
            bits.extend(mse.to_bits().to_le_bytes());
        }
        bits
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    match same_files(a.path(), b.path()) {
        Ok(n) if ra == rb => (
            Status::Pass,
            format!("{n} artifacts and evaluation metrics byte-identical across two runs"),
        ),
        Ok(_) => (Status::Fail, "evaluation metrics differ".into()),
        Err(e) => (Status::Fail, e),
    }
}

fn desk_config(extra: &str) -> RunConfig {
    RunConfig::parse(&format!(
        "system = springs\nn_objects = 5\ncounts = {DESK_COUNTS}\nseed = 1\nepochs = 200\nbatch_size = 128\n{extra}"
    ))
    .unwrap()
}

struct DeskRun {
    cfg: RunConfig,
    data: Dataset,
    out: TrainOutcome,
    accuracy: Accuracy,
    mse: Vec<(usize, f64)>,
}

fn train_and_evaluate(cfg: RunConfig, data: Dataset) -> DeskRun {
    let model = NriModel::new(cfg.model.clone()).unwrap();
    let out = train_run(&model, &data, &cfg.train).unwrap();
    let (row, acc) = evaluate_checkpoint(
        &out.best,
        "NRI (learned)",
        &data.test,
        cfg.burn_in,
        &cfg.horizons,
        128,
    )
    .unwrap();
    DeskRun {
        cfg,
        data,
        out,
        accuracy: acc.unwrap(),
        mse: row.mse,
    }
}

fn mse_at(rows: &[(usize, f64)], h: usize) -> f64 {
    rows.iter()
        .find(|r| r.0 == h)
        .map(|r| r.1)
        .unwrap_or(f64::NAN)
}

fn best(ckpt: &Checkpoint) -> String {
    format!("best epoch {}", ckpt.epoch)
}

fn run(full: bool) {
    // Start on a fresh line after the harness's "test acceptance ..." prefix.
    writeln!(std::io::stdout().lock()).unwrap();
    let mut lines = Vec::new();
    let mut push = |id: u32, title: &'static str, (status, detail): (Status, String)| {
        let line = Line {
            id,
            title,
            status,
            detail,
        };
        emit(&line);
        lines.push(line);
    };
    let skip = || {
        (
            Status::Skip,
            "training-heavy; run with `-- --ignored`".to_string(),
        )
    };

    push(1, "gradient suite", criterion_1());
    push(2, "simulator physics", criterion_2());
    push(3, "vectorization oracle", criterion_3());
    push(4, "Gumbel-softmax correctness", criterion_4());

    let cfg = desk_config("");
    let data = generate_dataset(&cfg.system, cfg.counts, cfg.seed).unwrap();
    let desk = full.then(|| train_and_evaluate(cfg.clone(), data.clone()));

    push(
        5,
        "desk-scale springs recovery",
        match &desk {
            Some(d) => {
                let first_90 = d
                    .out
                    .curve
                    .iter()
                    .find(|r| r.val_acc > 90.0)
                    .map(|r| r.epoch);
                (
                    judged(d.accuracy.percent >= 95.0),
                    format!(
                        "test edge accuracy {:.2}% (need ≥ 95), {}, validation > 90% first at epoch {first_90:?}",
                        d.accuracy.percent,
                        best(&d.out.best)
                    ),
                )
            }
            None => skip(),
        },
    );
    push(
        6,
        "supervised gold standard",
        match &desk {
            Some(d) => {
                let train = TrainConfig {
                    epochs: 50,
                    ..d.cfg.train.clone()
                };
                let row = run_variant(
                    Variant::Supervised,
                    &d.cfg.model,
                    &d.data,
                    &train,
                    d.cfg.burn_in,
                    &d.cfg.horizons,
                )
                .unwrap();
                let acc = row.accuracy.unwrap_or(f64::NAN);
                (
                    judged(acc >= 98.0),
                    format!("test edge accuracy {acc:.2}% after 50 epochs (need ≥ 98)"),
                )
            }
            None => skip(),
        },
    );
    push(
        7,
        "prediction ordering",
        match &desk {
            Some(d) => {
                let variant = |v| {
                    run_variant(
                        v,
                        &d.cfg.model,
                        &d.data,
                        &d.cfg.train,
                        d.cfg.burn_in,
                        &d.cfg.horizons,
                    )
                    .unwrap()
                    .mse
                };
                let (full_graph, true_graph) =
                    (variant(Variant::FullGraph), variant(Variant::TrueGraph));
                let (learned20, full20) = (mse_at(&d.mse, 20), mse_at(&full_graph, 20));
                let (learned1, true1) = (mse_at(&d.mse, 1), mse_at(&true_graph, 1));
                (
                    judged(10.0 * learned20 <= full20 && true1 <= learned1),
                    format!(
                        "20-step MSE learned {learned20:.3e} vs full graph {full20:.3e}; \
                         1-step true graph {true1:.3e} vs learned {learned1:.3e}"
                    ),
                )
            }
            None => skip(),
        },
    );
    push(8, "correlation baseline", criterion_8(&data));
    push(9, "KL properties", criterion_9());
    push(
        10,
        "empty-graph generalization",
        match &desk {
            Some(d) => {
                let rate = empty_graph_test(
                    &d.out.best,
                    &d.cfg.system,
                    &d.accuracy.permutation,
                    1000,
                    Stream::new(d.cfg.seed).split("empty"),
                    128,
                )
                .unwrap();
                (
                    judged(rate >= 90.0),
                    format!("{rate:.2}% of pairs classified as no-edge (need ≥ 90)"),
                )
            }
            None => skip(),
        },
    );
    drop(desk);
    push(
        11,
        "three-type springs",
        if full {
            let cfg = desk_config("spring_constants = 0, 0.5, 1\nspring_probabilities = 0.3333333333333333, 0.3333333333333333, 0.3333333333333334\n");
            let data = generate_dataset(&cfg.system, cfg.counts, cfg.seed).unwrap();
            let d = train_and_evaluate(cfg, data);
            (
                judged(d.accuracy.percent >= 85.0),
                format!(
                    "permuted test edge accuracy {:.2}% (need ≥ 85), {}",
                    d.accuracy.percent,
                    best(&d.out.best)
                ),
            )
        } else {
            skip()
        },
    );
    push(12, "reproducibility", criterion_12());

    let unexpected: Vec<u32> = lines
        .iter()
        .filter(|l| matches!(l.status, Status::Fail))
        .map(|l| l.id)
        .filter(|id| !UNATTAINABLE.iter().any(|(u, _)| u == id))
        .collect();
    for (id, why) in UNATTAINABLE {
        if lines
            .iter()
            .any(|l| l.id == *id && matches!(l.status, Status::Fail))
        {
            writeln!(
                std::io::stdout().lock(),
                "note: criterion {id} is not attainable as stated: {why}"
            )
            .unwrap();
        }
    }
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}

#[test]
fn acceptance() {
    run(false);
}

#[test]
#[ignore = "desk-scale training runs take many CPU-hours"]
fn acceptance_full() {
    run(true);
}
