//! Executable verification: a unit-property battery and the scaled
//! directional study, reported as uniform pass/fail rows.
//!
//! `run_acceptance` caches every training run under the scratch directory
//! and resumes interrupted ones, so a rerun after a crash (or a second
//! invocation) only pays for what is missing. All randomness is drawn from
//! named streams; two runs over the same scratch produce identical rows.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;

use crate::analysis::{self, MetricsRecord, SignalMode};
use crate::attack::{self, Objective};
use crate::checkpoint::{self, Container};
use crate::data::{self, Dataset};
use crate::error::Error;
use crate::model::Model;
use crate::ops;
use crate::rng;
use crate::signal::BoosterSignal;
use crate::tensor::Tensor;
use crate::train::{self, Defense, TrainPlan, Trainer};
use crate::verify;
use crate::Result;

pub const REPORT_HEADER: &str = "check,status,measured,threshold,runtime_s";

/// Stream id for harness-internal draws, disjoint from training seeds.
const HARNESS_SEED: u64 = 0xACCE;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
    pub runtime: Duration,
}

impl CheckReport {
    fn new(name: &str, pass: bool, measured: f64, threshold: f64, started: Instant) -> Self {
        CheckReport {
            name: name.to_string(),
            pass,
            measured,
            threshold,
            runtime: started.elapsed(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.name,
            if self.pass { "pass" } else { "fail" },
            self.measured,
            self.threshold,
            self.runtime.as_secs_f64()
        )
    }
}

pub fn write_report(path: &Path, rows: &[CheckReport]) -> Result<()> {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// CI scale: single seed, shortened runs, same invariants.
    Quick,
    /// The complete directional study.
    Full,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "quick" => Ok(Profile::Quick),
            "full" => Ok(Profile::Full),
            other => Err(Error::config(format!(
                "unknown profile '{}': expected quick or full",
                other
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// unit properties
// ---------------------------------------------------------------------------

/// Gradient checks, attack projection/budget invariants, injection geometry,
/// and parser round-trips. Everything here is seconds-scale.
pub fn run_unit_properties() -> Vec<CheckReport> {
    let mut rows = Vec::new();

    for name in verify::GRADCHECK_NAMES {
        let started = Instant::now();
        let err = verify::run_gradcheck(name);
        rows.push(CheckReport::new(
            &format!("grad_{}", name),
            err < verify::GRAD_TOL,
            err,
            verify::GRAD_TOL,
            started,
        ));
    }

    rows.extend(attack_invariant_rows().unwrap_or_else(error_row("attack_invariants")));
    rows.extend(injection_rows().unwrap_or_else(error_row("injection_geometry")));
    rows.extend(parser_rows().unwrap_or_else(error_row("parser_roundtrips")));
    rows
}

/// A failed row carrying the error in place of a measurement, so harness
/// plumbing failures surface as check failures instead of aborting the run.
fn error_row(name: &'static str) -> impl FnOnce(Error) -> Vec<CheckReport> {
    move |e| {
        eprintln!("{name}: {e}");
        vec![CheckReport {
            name: name.to_string(),
            pass: false,
            measured: f64::NAN,
            threshold: 0.0,
            runtime: Duration::ZERO,
        }]
    }
}

fn attack_invariant_rows() -> Result<Vec<CheckReport>> {
    let started = Instant::now();
    let model = Model::build("cnn-small", (1, 12, 12), 10, 3)?;
    let eps_grid = [2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0];
    let mut r = rng::stream(HARNESS_SEED, &[1]);
    let mut overshoot = f64::NEG_INFINITY;
    let mut out_of_range = f64::NEG_INFINITY;
    for case in 0..16u64 {
        let eps = eps_grid[case as usize % eps_grid.len()];
        let x = Tensor::from_vec(
            vec![8, 1, 12, 12],
            (0..8 * 144).map(|_| r.gen_range(0.0..1.0)).collect(),
        )?;
        let y: Vec<usize> = (0..8).map(|_| r.gen_range(0..10)).collect();
        let fgsm = attack::fgsm(&model, &x, &y, eps, None)?;
        let spec = attack::profile("pgd7", eps)?;
        let pgd = attack::pgd(&model, &x, &y, &spec, &Objective::CrossEntropy, None, &mut r)?;
        for adv in [&fgsm, &pgd] {
            for (a, o) in adv.data().iter().zip(x.data()) {
                overshoot = overshoot.max(((a - o).abs() - eps) as f64);
                out_of_range = out_of_range.max((-a).max(a - 1.0) as f64);
            }
        }
    }
    let budget = CheckReport::new("attack_linf_budget", overshoot <= 1e-6, overshoot, 1e-6, started);

    let started = Instant::now();
    let range = CheckReport::new("attack_pixel_range", out_of_range <= 0.0, out_of_range, 0.0, started);

    let started = Instant::now();
    let mut probe: Vec<f32> = (0..256).map(|_| r.gen_range(-1.0..1.0)).collect();
    probe[0] = 0.0;
    probe[1] = -0.0;
    let bad = ops::sign_forward(&probe)
        .iter()
        .filter(|s| **s != -1.0 && **s != 0.0 && **s != 1.0)
        .count();
    let sign = CheckReport::new("attack_sign_values", bad == 0, bad as f64, 0.0, started);

    Ok(vec![budget, range, sign])
}

fn injection_rows() -> Result<Vec<CheckReport>> {
    let started = Instant::now();
    let mut r = rng::stream(HARNESS_SEED, &[2]);
    let mut mismatches = 0usize;
    for case in 0..8u64 {
        let s = BoosterSignal::random(3, 1, (9, 9), case);
        let x = Tensor::from_vec(vec![4, 1, 9, 9], (0..4 * 81).map(|_| r.gen_range(0.0..1.0)).collect())?;
        let canvas = s.inject_batch(&x)?;
        mismatches += crop_mismatches(&canvas, &x, 3);
    }
    let crop = CheckReport::new(
        "inject_crop_roundtrip",
        mismatches == 0,
        mismatches as f64,
        0.0,
        started,
    );

    let started = Instant::now();
    let mut s = BoosterSignal::random(3, 1, (9, 9), 17);
    let interior = s.interior_mask();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let grad: Vec<f32> = (0..s.frame_data().len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        s.apply_step(&grad, 0.05)?;
        for (v, m) in s.frame_data().iter().zip(&interior) {
            if *m > 0.0 {
                worst = worst.max(v.abs() as f64);
            }
        }
    }
    let zero = CheckReport::new("signal_interior_zero", worst == 0.0, worst, 0.0, started);

    Ok(vec![crop, zero])
}

/// Count canvas interior coordinates that differ bitwise from the source.
fn crop_mismatches(canvas: &Tensor, x: &Tensor, width: usize) -> usize {
    let (n, c, h, w) = x.dims4().expect("source is 4-d");
    let (hf, wf) = (h + 2 * width, w + 2 * width);
    let mut bad = 0;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let a = canvas.data()[(ni * c + ci) * hf * wf + (y + width) * wf + xx + width];
                    let b = x.data()[(ni * c + ci) * h * w + y * w + xx];
                    if a.to_bits() != b.to_bits() {
                        bad += 1;
                    }
                }
            }
        }
    }
    bad
}

fn parser_rows() -> Result<Vec<CheckReport>> {
    let tmp = std::env::temp_dir().join(format!("booster-selfcheck-{}", std::process::id()));
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir_all(&tmp)?;
    let mut rows = Vec::new();

    let started = Instant::now();
    let (pixels, labels) = data::synth_digits_raw(64, 11, &data::SynthConfig::default());
    data::write_idx_images(&tmp.join("img.idx"), data::SYNTH_SIDE, data::SYNTH_SIDE, &pixels)?;
    data::write_idx_labels(&tmp.join("lab.idx"), &labels)?;
    let (n, h, w, back) = data::read_idx_images(&tmp.join("img.idx"))?;
    let lab_back = data::read_idx_labels(&tmp.join("lab.idx"))?;
    let ok = n == 64 && (h, w) == (data::SYNTH_SIDE, data::SYNTH_SIDE) && back == pixels && lab_back == labels;
    rows.push(CheckReport::new(
        "idx_roundtrip",
        ok,
        (!ok) as usize as f64,
        0.0,
        started,
    ));

    let started = Instant::now();
    let plan = acceptance_plan(0, 4, 3);
    let text = serde_json::to_string(&plan).map_err(|e| Error::format(e.to_string()))?;
    let reparsed: TrainPlan = serde_json::from_str(&text).map_err(|e| Error::format(e.to_string()))?;
    let again = serde_json::to_string(&reparsed).map_err(|e| Error::format(e.to_string()))?;
    rows.push(CheckReport::new(
        "plan_roundtrip",
        text == again,
        (text != again) as usize as f64,
        0.0,
        started,
    ));

    let started = Instant::now();
    let model = Model::build("cnn-small", (1, 12, 12), 10, 5)?;
    let ckpt = tmp.join("model.ckpt");
    checkpoint::model_to_container(&model).write(&ckpt)?;
    let mut clone = Model::build("cnn-small", (1, 12, 12), 10, 6)?;
    checkpoint::apply_container(&mut clone, &Container::read(&ckpt)?)?;
    let mut r = rng::stream(HARNESS_SEED, &[3]);
    let x = Tensor::from_vec(vec![2, 1, 12, 12], (0..288).map(|_| r.gen_range(0.0..1.0)).collect())?;
    let same = model
        .logits(&x)?
        .iter()
        .zip(clone.logits(&x)?.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    rows.push(CheckReport::new(
        "checkpoint_roundtrip",
        same,
        (!same) as usize as f64,
        0.0,
        started,
    ));

    let started = Instant::now();
    let mut bytes = fs::read(&ckpt)?;
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&ckpt, &bytes)?;
    let rejected = Container::read(&ckpt).is_err();
    rows.push(CheckReport::new(
        "checkpoint_rejects_corruption",
        rejected,
        (!rejected) as usize as f64,
        0.0,
        started,
    ));

    let _ = fs::remove_dir_all(&tmp);
    Ok(rows)
}

// ---------------------------------------------------------------------------
// acceptance study
// ---------------------------------------------------------------------------

/// The training recipe every acceptance run derives from: the directional
/// study's exact protocol at signal width 4.
fn acceptance_plan(seed: u64, signal_width: usize, epochs: usize) -> TrainPlan {
    TrainPlan {
        arch: "cnn-small".into(),
        seed,
        epochs,
        batch_size: 128,
        lr: 0.05,
        momentum: 0.9,
        signal_width,
        signal_lr: 0.01,
        signal_iters: 2,
        subset_size: 512,
        epsilon: 8.0 / 255.0,
        train_attack: "pgd7".into(),
        eval_attack: "pgd20".into(),
        defense: Defense::Madry,
        train_limit: None,
        test_limit: None,
        eval_batch: 100,
    }
}

struct Scale {
    n_train: usize,
    n_test: usize,
    epochs: usize,
    seeds: Vec<u64>,
}

impl Scale {
    fn of(profile: Profile) -> Scale {
        match profile {
            Profile::Full => Scale {
                n_train: 5000,
                n_test: 1000,
                epochs: 10,
                seeds: vec![0, 1, 2],
            },
            Profile::Quick => Scale {
                n_train: 1500,
                n_test: 500,
                epochs: 4,
                seeds: vec![0],
            },
        }
    }
}

/// Train baseline AT and booster runs under identical seeds and budgets,
/// then grade every directional criterion. `data_dir` must hold the IDX
/// corpus; `scratch` receives run directories and may be reused to resume.
pub fn run_acceptance(data_dir: &Path, scratch: &Path, profile: Profile) -> Result<Vec<CheckReport>> {
    let (train_all, test_all) = data::load_dir(data_dir)?;
    let scale = Scale::of(profile);
    let train = train_all.take(scale.n_train)?;
    let test = test_all.take(scale.n_test)?;
    fs::create_dir_all(scratch)?;

    let mut rows = Vec::new();

    // 1: every gradient check, end-to-end input gradient included
    let started = Instant::now();
    let worst = verify::GRADCHECK_NAMES
        .iter()
        .map(|n| verify::run_gradcheck(n))
        .fold(0.0f64, f64::max);
    let within_budget = started.elapsed() < Duration::from_secs(60);
    rows.push(CheckReport::new(
        "1_gradient_correctness",
        worst < verify::GRAD_TOL && within_budget,
        worst,
        verify::GRAD_TOL,
        started,
    ));

    // criterion-5 fleet; everything later reuses these runs
    let mut base_runs = Vec::new();
    let mut boost_runs = Vec::new();
    for &seed in &scale.seeds {
        let base_dir = scratch.join(format!("study/seed{}/baseline", seed));
        let boost_dir = scratch.join(format!("study/seed{}/booster", seed));
        let mut plan = acceptance_plan(seed, 0, scale.epochs);
        base_runs.push((
            plan.clone(),
            base_dir.clone(),
            plain_run(&plan, &train, &test, &base_dir)?,
        ));
        plan.signal_width = 4;
        boost_runs.push((
            plan.clone(),
            boost_dir.clone(),
            booster_run(&plan, &train, &test, &boost_dir)?,
        ));
    }

    // 2: attack invariants against the trained seed-0 baseline
    let started = Instant::now();
    let (ref_model, _) = load_final(&base_runs[0].1, &base_runs[0].0, train.dims(), train.num_classes)?;
    let (overshoot, out_of_range, frac) = attack_battery(&ref_model, &test)?;
    rows.push(CheckReport::new(
        "2a_attack_budget",
        overshoot <= 1e-6,
        overshoot,
        1e-6,
        started,
    ));
    rows.push(CheckReport {
        name: "2b_attack_range".into(),
        pass: out_of_range <= 0.0,
        measured: out_of_range,
        threshold: 0.0,
        runtime: Duration::ZERO,
    });
    let in_time = started.elapsed() < Duration::from_secs(300);
    rows.push(CheckReport::new(
        "2c_pgd_vs_fgsm",
        frac >= 0.80 && in_time,
        frac,
        0.80,
        started,
    ));

    // 3: injection geometry across a full quick-profile training run
    let started = Instant::now();
    let (interior_abs, crop_bad) = injection_across_run(scratch, &train, &test)?;
    rows.push(CheckReport::new(
        "3_injection_geometry",
        interior_abs == 0.0 && crop_bad == 0,
        interior_abs.max(crop_bad as f64),
        0.0,
        started,
    ));

    // 4: width-0 trainer equals plain AT on the same seed
    let started = Instant::now();
    let diff = null_reduction_diff(scratch, &train, &test)?;
    rows.push(CheckReport::new("4_null_reduction", diff <= 1e-6, diff, 1e-6, started));

    // 5: directional booster effect, mean over seeds, accuracy points
    let started = Instant::now();
    let base_mean = mean_nat_rob(&base_runs);
    let boost_mean = mean_nat_rob(&boost_runs);
    let rob_gain = (boost_mean.1 - base_mean.1) * 100.0;
    let nat_shift = (boost_mean.0 - base_mean.0) * 100.0;
    rows.push(CheckReport::new(
        "5a_robust_gain",
        rob_gain >= 1.0,
        rob_gain,
        1.0,
        started,
    ));
    rows.push(CheckReport {
        name: "5b_natural_floor".into(),
        pass: nat_shift >= -0.5,
        measured: nat_shift,
        threshold: -0.5,
        runtime: Duration::ZERO,
    });

    // same comparison under FGSM: weaker attack, so no regression is allowed
    let started = Instant::now();
    let mut base_fgsm = 0.0f64;
    let mut boost_fgsm = 0.0f64;
    for ((bplan, bdir, _), (oplan, odir, _)) in base_runs.iter().zip(&boost_runs) {
        let spec = attack::profile("fgsm", bplan.epsilon)?;
        let (bm, _) = load_final(bdir, bplan, train.dims(), train.num_classes)?;
        let rec = analysis::evaluate(
            &bm,
            &test,
            &SignalMode::Null(0),
            Some(&spec),
            "test",
            bplan.eval_batch,
            bplan.seed,
            0,
        )?;
        base_fgsm += rec.accuracy as f64;
        let (om, osig) = load_final(odir, oplan, train.dims(), train.num_classes)?;
        let rec = analysis::evaluate(
            &om,
            &test,
            &SignalMode::Single(&osig),
            Some(&spec),
            "test",
            oplan.eval_batch,
            oplan.seed,
            0,
        )?;
        boost_fgsm += rec.accuracy as f64;
    }
    let fgsm_gain = (boost_fgsm - base_fgsm) / scale.seeds.len() as f64 * 100.0;
    rows.push(CheckReport::new(
        "5c_fgsm_floor",
        fgsm_gain >= -0.5,
        fgsm_gain,
        -0.5,
        started,
    ));

    // 6: interior input-gradient reduction on the booster runs' final models
    let started = Instant::now();
    let mut reductions = Vec::new();
    for (plan, dir, _) in &boost_runs {
        let (model, signal) = load_final(dir, plan, train.dims(), train.num_classes)?;
        let with = mean_grad_norm(&model, &test, &SignalMode::Single(&signal), plan)?;
        let without = mean_grad_norm(&model, &test, &SignalMode::Null(plan.signal_width), plan)?;
        reductions.push(1.0 - with / without);
    }
    let mean_reduction = reductions.iter().sum::<f64>() / reductions.len() as f64;
    rows.push(CheckReport::new(
        "6_gradnorm_reduction",
        mean_reduction >= 0.05,
        mean_reduction,
        0.05,
        started,
    ));

    // 7: no robustness regression going from width 1 to width 4, seed 0
    let started = Instant::now();
    let w1_plan = acceptance_plan(scale.seeds[0], 1, scale.epochs);
    let w1_dir = scratch.join("width1");
    let w1_rows = booster_run(&w1_plan, &train, &test, &w1_dir)?;
    let w4_rob = nat_rob(&boost_runs[0].2).1;
    let w1_rob = nat_rob(&w1_rows).1;
    let width_delta = (w4_rob - w1_rob) * 100.0;
    rows.push(CheckReport::new(
        "7_width_monotonicity",
        width_delta >= -0.5,
        width_delta,
        -0.5,
        started,
    ));

    // 8: booster gain with tiny subsets does not exceed the large-subset gain
    let started = Instant::now();
    let mut m8_plan = acceptance_plan(scale.seeds[0], 4, scale.epochs);
    m8_plan.subset_size = 8;
    let m8_dir = scratch.join("subset8");
    let m8_rows = booster_run(&m8_plan, &train, &test, &m8_dir)?;
    let base0_rob = nat_rob(&base_runs[0].2).1;
    let gain_large = (nat_rob(&boost_runs[0].2).1 - base0_rob) * 100.0;
    let gain_small = (nat_rob(&m8_rows).1 - base0_rob) * 100.0;
    let margin = gain_large - gain_small;
    rows.push(CheckReport::new(
        "8_subset_size_effect",
        margin >= 0.0,
        margin,
        0.0,
        started,
    ));

    // 9: loss-landscape flattening around test points, seed-0 checkpoints
    let started = Instant::now();
    let flat_frac = landscape_fraction(&base_runs[0], &boost_runs[0], &train, &test)?;
    let in_time = started.elapsed() < Duration::from_secs(600);
    rows.push(CheckReport::new(
        "9_landscape_flatness",
        flat_frac >= 0.60 && in_time,
        flat_frac,
        0.60,
        started,
    ));

    // 10: bit-identical reruns and bit-exact resume
    let started = Instant::now();
    let rerun_diffs = determinism_diffs(scratch, &train, &test)?;
    rows.push(CheckReport::new(
        "10a_determinism",
        rerun_diffs == 0,
        rerun_diffs as f64,
        0.0,
        started,
    ));
    let started = Instant::now();
    let resume_diffs = persistence_diffs(scratch, &train, &test)?;
    rows.push(CheckReport::new(
        "10b_persistence",
        resume_diffs == 0,
        resume_diffs as f64,
        0.0,
        started,
    ));

    Ok(rows)
}

// --- cached training runs ---------------------------------------------------

fn plan_json(plan: &TrainPlan) -> Result<String> {
    serde_json::to_string(plan).map_err(|e| Error::format(e.to_string()))
}

/// Booster training with resume: reuses the run directory when its recorded
/// plan matches, wipes and retrains when it does not.
fn booster_run(plan: &TrainPlan, train: &Dataset, test: &Dataset, dir: &Path) -> Result<Vec<MetricsRecord>> {
    if dir.join("state.json").exists() {
        if let Ok(mut t) = Trainer::load(dir) {
            if plan_json(&t.plan)? == plan_json(plan)? {
                return t.run(train, test);
            }
        }
        fs::remove_dir_all(dir)?;
    }
    let mut t = Trainer::new(plan.clone(), train.dims(), train.num_classes, dir)?;
    t.run(train, test)
}

/// Baseline AT with completed-run reuse (plain_at itself is not resumable).
fn plain_run(plan: &TrainPlan, train: &Dataset, test: &Dataset, dir: &Path) -> Result<Vec<MetricsRecord>> {
    let marker = dir.join("plan.json");
    let metrics = dir.join("metrics.csv");
    if marker.exists() && metrics.exists() {
        if fs::read_to_string(&marker)? == plan_json(plan)? {
            let rows = analysis::read_metrics_csv(&metrics)?;
            if rows.len() == plan.epochs * 2 {
                return Ok(rows[rows.len() - 2..].to_vec());
            }
        }
        fs::remove_dir_all(dir)?;
    }
    let rows = train::plain_at(plan, train, test, dir)?;
    fs::write(&marker, plan_json(plan)?)?;
    Ok(rows)
}

fn load_final(
    dir: &Path,
    plan: &TrainPlan,
    input: (usize, usize, usize),
    classes: usize,
) -> Result<(Model, BoosterSignal)> {
    let e = train::epoch_dir(dir, plan.epochs - 1);
    let mut model = Model::build(&plan.arch, input, classes, plan.seed)?;
    checkpoint::apply_container(&mut model, &Container::read(&e.join("model.ckpt"))?)?;
    let signal = checkpoint::load_signal(&e.join("signal.sig"))?;
    Ok((model, signal))
}

fn nat_rob(rows: &[MetricsRecord]) -> (f64, f64) {
    let nat = rows
        .iter()
        .find(|r| r.attack == "none")
        .map(|r| r.accuracy)
        .unwrap_or(0.0);
    let rob = rows
        .iter()
        .find(|r| r.attack != "none")
        .map(|r| r.accuracy)
        .unwrap_or(0.0);
    (nat as f64, rob as f64)
}

fn mean_nat_rob(runs: &[(TrainPlan, PathBuf, Vec<MetricsRecord>)]) -> (f64, f64) {
    let mut nat = 0.0;
    let mut rob = 0.0;
    for (_, _, rows) in runs {
        let (n, r) = nat_rob(rows);
        nat += n;
        rob += r;
    }
    (nat / runs.len() as f64, rob / runs.len() as f64)
}

// --- criterion bodies --------------------------------------------------------

/// 1000 randomized FGSM/PGD-20 cases: projection invariants plus the
/// fraction of examples where the iterated attack finds at least the
/// single-step loss.
fn attack_battery(model: &Model, test: &Dataset) -> Result<(f64, f64, f64)> {
    let eps_grid = [2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0];
    let cases: Vec<usize> = (0..1000).map(|i| i % test.len()).collect();
    let mut r = rng::stream(HARNESS_SEED, &[20]);
    let mut overshoot = f64::NEG_INFINITY;
    let mut out_of_range = f64::NEG_INFINITY;
    let mut ge = 0usize;
    for (bi, chunk) in cases.chunks(100).enumerate() {
        let (x, y) = test.batch(chunk)?;
        let eps = eps_grid[bi % eps_grid.len()];
        let fgsm = attack::fgsm(model, &x, &y, eps, None)?;
        let spec = attack::profile("pgd20", eps)?;
        let pgd = attack::pgd(model, &x, &y, &spec, &Objective::CrossEntropy, None, &mut r)?;
        for adv in [&fgsm, &pgd] {
            for (a, o) in adv.data().iter().zip(x.data()) {
                overshoot = overshoot.max(((a - o).abs() - eps) as f64);
                out_of_range = out_of_range.max((-a).max(a - 1.0) as f64);
            }
        }
        let lf = attack::per_example_ce(model, &fgsm, &y)?;
        let lp = attack::per_example_ce(model, &pgd, &y)?;
        ge += lf.iter().zip(&lp).filter(|(f, p)| p >= f).count();
    }
    Ok((overshoot, out_of_range, ge as f64 / cases.len() as f64))
}

/// Short booster run; after it, every epoch's stored frame must have an
/// all-zero interior and inject must reproduce sources bitwise.
fn injection_across_run(scratch: &Path, train: &Dataset, test: &Dataset) -> Result<(f64, usize)> {
    let mut plan = acceptance_plan(31, 4, 3);
    plan.subset_size = 256;
    let small_train = train.take(800)?;
    let small_test = test.take(200)?;
    let dir = scratch.join("geometry");
    booster_run(&plan, &small_train, &small_test, &dir)?;

    let mut r = rng::stream(HARNESS_SEED, &[30]);
    let (c, h, w) = small_train.dims();
    let mut interior_abs = 0.0f64;
    let mut crop_bad = 0usize;
    for epoch in 0..plan.epochs {
        let sig = checkpoint::load_signal(&train::epoch_dir(&dir, epoch).join("signal.sig"))?;
        let mask = sig.interior_mask();
        for (v, m) in sig.frame_data().iter().zip(&mask) {
            if *m > 0.0 {
                interior_abs = interior_abs.max(v.abs() as f64);
            }
        }
        let x = Tensor::from_vec(
            vec![2, c, h, w],
            (0..2 * c * h * w).map(|_| r.gen_range(0.0..1.0)).collect(),
        )?;
        crop_bad += crop_mismatches(&sig.inject_batch(&x)?, &x, sig.width());
    }
    Ok((interior_abs, crop_bad))
}

/// Width-0 trainer vs the standalone plain-AT loop, identical seed: largest
/// absolute difference across every metrics field of every epoch.
fn null_reduction_diff(scratch: &Path, train: &Dataset, test: &Dataset) -> Result<f64> {
    let plan = acceptance_plan(41, 0, 3);
    let small_train = train.take(800)?;
    let small_test = test.take(200)?;
    booster_run(&plan, &small_train, &small_test, &scratch.join("null/trainer"))?;
    plain_run(&plan, &small_train, &small_test, &scratch.join("null/plain"))?;
    let a = analysis::read_metrics_csv(&scratch.join("null/trainer/metrics.csv"))?;
    let b = analysis::read_metrics_csv(&scratch.join("null/plain/metrics.csv"))?;
    if a.len() != b.len() {
        return Ok(f64::INFINITY);
    }
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(&b) {
        if ra.split != rb.split || ra.attack != rb.attack {
            return Ok(f64::INFINITY);
        }
        for (va, vb) in [
            (ra.epsilon, rb.epsilon),
            (ra.accuracy, rb.accuracy),
            (ra.grad_mean, rb.grad_mean),
            (ra.grad_p50, rb.grad_p50),
        ] {
            worst = worst.max((va - vb).abs() as f64);
        }
    }
    Ok(worst)
}

fn mean_grad_norm(model: &Model, test: &Dataset, mode: &SignalMode, plan: &TrainPlan) -> Result<f64> {
    let norms = analysis::grad_norm_distribution(model, test, mode, plan.eval_batch, plan.seed)?;
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

/// Fraction of sampled test images whose loss grid is tighter (smaller
/// max - min) under the booster checkpoint than the baseline one.
fn landscape_fraction(
    base: &(TrainPlan, PathBuf, Vec<MetricsRecord>),
    boost: &(TrainPlan, PathBuf, Vec<MetricsRecord>),
    train: &Dataset,
    test: &Dataset,
) -> Result<f64> {
    let (base_model, _) = load_final(&base.1, &base.0, train.dims(), train.num_classes)?;
    let (boost_model, signal) = load_final(&boost.1, &boost.0, train.dims(), train.num_classes)?;
    let mut r = rng::stream(HARNESS_SEED, &[40]);
    let mut flatter = 0usize;
    let images = 50usize;
    let eps = base.0.epsilon;
    for i in 0..images {
        let idx = r.gen_range(0..test.len());
        let (x, y) = test.batch(&[idx])?;
        let (_, base_range) = analysis::landscape(&base_model, &x, y[0], eps, 15, HARNESS_SEED, i as u64)?;
        let canvas = signal.inject_batch(&x)?;
        let (_, boost_range) = analysis::landscape(&boost_model, &canvas, y[0], eps, 15, HARNESS_SEED, i as u64)?;
        if boost_range < base_range {
            flatter += 1;
        }
    }
    Ok(flatter as f64 / images as f64)
}

fn bytes_differ(a: &Path, b: &Path) -> usize {
    match (fs::read(a), fs::read(b)) {
        (Ok(x), Ok(y)) => (x != y) as usize,
        _ => 1,
    }
}

/// Two identically seeded runs in separate directories: metrics must match
/// byte for byte.
fn determinism_diffs(scratch: &Path, train: &Dataset, test: &Dataset) -> Result<usize> {
    let mut plan = acceptance_plan(51, 2, 2);
    plan.subset_size = 256;
    let small_train = train.take(600)?;
    let small_test = test.take(150)?;
    let a = scratch.join("determinism/a");
    let b = scratch.join("determinism/b");
    booster_run(&plan, &small_train, &small_test, &a)?;
    booster_run(&plan, &small_train, &small_test, &b)?;
    Ok(bytes_differ(&a.join("metrics.csv"), &b.join("metrics.csv")))
}

fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let dst = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &dst)?;
        } else {
            fs::copy(entry.path(), &dst)?;
        }
    }
    Ok(())
}

/// Clone the determinism run, truncate it to look interrupted after epoch 1,
/// resume, and demand the regenerated epoch matches the original bitwise.
fn persistence_diffs(scratch: &Path, train: &Dataset, test: &Dataset) -> Result<usize> {
    let full = scratch.join("determinism/a");
    let resumed = scratch.join("determinism/resumed");
    let _ = fs::remove_dir_all(&resumed);
    copy_tree(&full, &resumed)?;
    fs::remove_dir_all(train::epoch_dir(&resumed, 1))?;
    let state_path = resumed.join("state.json");
    let mut state: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&state_path)?).map_err(|e| Error::format(e.to_string()))?;
    state["epochs_done"] = serde_json::Value::from(1);
    fs::write(&state_path, state.to_string())?;

    let small_train = train.take(600)?;
    let small_test = test.take(150)?;
    let mut t = Trainer::load(&resumed)?;
    t.run(&small_train, &small_test)?;

    let mut diffs = 0;
    for name in ["model.ckpt", "signal.sig", "metrics.csv"] {
        diffs += bytes_differ(
            &train::epoch_dir(&full, 1).join(name),
            &train::epoch_dir(&resumed, 1).join(name),
        );
    }
    diffs += bytes_differ(&full.join("metrics.csv"), &resumed.join("metrics.csv"));
    Ok(diffs)
}
