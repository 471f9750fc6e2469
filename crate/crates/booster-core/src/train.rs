//! Co-training of the classifier and the frame signal.
//!
//! Each epoch runs four phases:
//!   1. adversarial training against the zero-frame canvas (classifier only)
//!   2. per-subset descent on the frame against clean boosted inputs
//!   3. per-subset alternation: attack the boosted inputs, then one frame
//!      update on the perturbed batch
//!   4. adversarial training against the current frame (classifier only)
//!
//! With the signal disabled (width 0) only phase 1 runs, which is exactly
//! `plain_at`; the two paths must produce bit-identical metrics.
//!
//! Randomness is drawn from streams keyed on (seed, purpose, epoch, ...), so
//! resuming from a checkpoint needs no RNG serialization: epoch e consumes
//! the same draws whether or not the process restarted before it.

use crate::analysis::{self, MetricsRecord, SignalMode};
use crate::attack::{self, AttackSpec, Objective};
use crate::checkpoint::{self, Container, VELOCITY_PREFIX};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::ops::Reduction;
use crate::optim::Sgd;
use crate::rng::{self, tag};
use crate::signal::BoosterSignal;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Defense {
    #[default]
    Madry,
    Trades {
        beta: f32,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub arch: String,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f32,
    #[serde(default = "d_momentum")]
    pub momentum: f32,
    /// Frame width in pixels; 0 disables signal training entirely.
    #[serde(default)]
    pub signal_width: usize,
    #[serde(default = "d_signal_lr")]
    pub signal_lr: f32,
    /// Visits per subset in phases 2 and 3.
    #[serde(default = "d_signal_iters")]
    pub signal_iters: usize,
    #[serde(default = "d_subset")]
    pub subset_size: usize,
    #[serde(default = "d_eps")]
    pub epsilon: f32,
    #[serde(default = "d_train_attack")]
    pub train_attack: String,
    #[serde(default = "d_eval_attack")]
    pub eval_attack: String,
    #[serde(default)]
    pub defense: Defense,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default = "d_eval_batch")]
    pub eval_batch: usize,
}

fn d_batch() -> usize {
    128
}
fn d_lr() -> f32 {
    0.05
}
fn d_momentum() -> f32 {
    0.9
}
fn d_signal_lr() -> f32 {
    0.01
}
fn d_signal_iters() -> usize {
    5
}
fn d_subset() -> usize {
    512
}
fn d_eps() -> f32 {
    8.0 / 255.0
}
fn d_train_attack() -> String {
    "pgd7".into()
}
fn d_eval_attack() -> String {
    "pgd20".into()
}
fn d_eval_batch() -> usize {
    100
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            arch: "cnn-small".into(),
            seed: 0,
            epochs: 1,
            batch_size: d_batch(),
            lr: d_lr(),
            momentum: d_momentum(),
            signal_width: 0,
            signal_lr: d_signal_lr(),
            signal_iters: d_signal_iters(),
            subset_size: d_subset(),
            epsilon: d_eps(),
            train_attack: d_train_attack(),
            eval_attack: d_eval_attack(),
            defense: Defense::default(),
            train_limit: None,
            test_limit: None,
            eval_batch: d_eval_batch(),
        }
    }
}

impl TrainPlan {
    pub fn from_json_file(path: &Path) -> Result<TrainPlan> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {}", path.display(), e)))?;
        let plan: TrainPlan =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e)))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("plan: batch sizes must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!("plan: epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.signal_width > 0 && (self.signal_iters == 0 || self.subset_size == 0) {
            return Err(Error::config(
                "plan: signal training needs signal_iters and subset_size >= 1",
            ));
        }
        attack::profile(&self.train_attack, self.epsilon)?;
        attack::profile(&self.eval_attack, self.epsilon)?;
        if let Defense::Trades { beta } = self.defense {
            if beta <= 0.0 {
                return Err(Error::config("plan: trades beta must be > 0"));
            }
        }
        Ok(())
    }

    /// Frame learning rate, cosine-decayed over the full epoch budget.
    pub fn eta_at(&self, epoch: usize) -> f32 {
        let t = epoch as f32 / self.epochs.max(1) as f32;
        self.signal_lr * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

#[derive(Serialize, Deserialize)]
struct RunState {
    epochs_done: usize,
    input: [usize; 3],
    num_classes: usize,
    plan: TrainPlan,
}

const STEP1: u64 = 1;
const STEP3: u64 = 3;
const STEP4: u64 = 4;

pub struct Trainer {
    pub plan: TrainPlan,
    model: Model,
    signal: BoosterSignal,
    opt: Sgd,
    epochs_done: usize,
    input: (usize, usize, usize),
    num_classes: usize,
    out: PathBuf,
}

impl Trainer {
    pub fn new(plan: TrainPlan, input: (usize, usize, usize), num_classes: usize, out: &Path) -> Result<Trainer> {
        plan.validate()?;
        let (c, h, w) = input;
        let wd = plan.signal_width;
        let canvas = (c, h + 2 * wd, w + 2 * wd);
        let model = Model::build(&plan.arch, canvas, num_classes, plan.seed)?;
        let signal = if wd > 0 {
            BoosterSignal::random(wd, c, (h, w), plan.seed)
        } else {
            BoosterSignal::null(0, c, (h, w))
        };
        let opt = Sgd::new(plan.lr, plan.momentum);
        fs::create_dir_all(out)?;
        Ok(Trainer {
            plan,
            model,
            signal,
            opt,
            epochs_done: 0,
            input,
            num_classes,
            out: out.to_path_buf(),
        })
    }

    /// Reopen a run directory and continue where it left off.
    pub fn load(out: &Path) -> Result<Trainer> {
        let state_path = out.join("state.json");
        let text =
            fs::read_to_string(&state_path).map_err(|e| Error::config(format!("{}: {}", state_path.display(), e)))?;
        let state: RunState =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {}", state_path.display(), e)))?;
        let input = (state.input[0], state.input[1], state.input[2]);
        let mut t = Trainer::new(state.plan, input, state.num_classes, out)?;
        if state.epochs_done > 0 {
            let dir = epoch_dir(out, state.epochs_done - 1);
            // state.json claims this epoch exists, so absent members mean a
            // mangled run directory, not a fresh one
            for member in ["model.ckpt", "signal.sig"] {
                if !dir.join(member).exists() {
                    return Err(Error::corruption(format!("{}: missing {}", dir.display(), member)));
                }
            }
            let container = Container::read(&dir.join("model.ckpt"))?;
            checkpoint::apply_container(&mut t.model, &container)?;
            let mut velocity = Vec::with_capacity(t.model.params().len());
            for name in t.model.param_names() {
                let e = container
                    .get(&format!("{}{}", VELOCITY_PREFIX, name))
                    .ok_or_else(|| Error::format(format!("checkpoint is missing optimizer state for '{}'", name)))?;
                velocity.push(e.data.clone());
            }
            t.opt.load_velocity(velocity);
            t.signal = checkpoint::load_signal(&dir.join("signal.sig"))?;
        }
        t.epochs_done = state.epochs_done;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn signal(&self) -> &BoosterSignal {
        &self.signal
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    fn check_data(&self, train: &Dataset, test: &Dataset) -> Result<()> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::data("training requires non-empty train and test splits"));
        }
        if train.dims() != self.input || test.dims() != self.input {
            return Err(Error::data(format!(
                "dataset dims {:?}/{:?} do not match run input {:?}",
                train.dims(),
                test.dims(),
                self.input
            )));
        }
        if train.num_classes != self.num_classes {
            return Err(Error::data("dataset class count changed between runs"));
        }
        Ok(())
    }

    /// Train remaining epochs; returns the final epoch's metrics rows.
    pub fn run(&mut self, train: &Dataset, test: &Dataset) -> Result<Vec<MetricsRecord>> {
        self.check_data(train, test)?;
        if self.epochs_done == 0 {
            // Initial state before any epoch, so epochs=0 still leaves a
            // loadable run directory behind.
            checkpoint::model_to_container(&self.model).write(&self.out.join("model.ckpt"))?;
            checkpoint::save_signal(&self.out.join("signal.sig"), &self.signal)?;
            self.write_state()?;
        }
        let mut last = self.read_last_metrics()?;
        for epoch in self.epochs_done..self.plan.epochs {
            self.run_epoch(epoch, train)?;
            let rows = self.eval_epoch(epoch, test)?;
            self.save_epoch(epoch, &rows)?;
            self.epochs_done = epoch + 1;
            self.write_state()?;
            self.rebuild_run_metrics()?;
            last = rows;
        }
        Ok(last)
    }

    fn read_last_metrics(&self) -> Result<Vec<MetricsRecord>> {
        if self.epochs_done == 0 {
            return Ok(Vec::new());
        }
        let path = epoch_dir(&self.out, self.epochs_done - 1).join("metrics.csv");
        analysis::read_metrics_csv(&path)
    }

    fn run_epoch(&mut self, epoch: usize, train: &Dataset) -> Result<()> {
        let width = self.plan.signal_width;
        let null_sig = BoosterSignal::null(width, self.input.0, (self.input.1, self.input.2));

        self.at_pass(epoch, STEP1, &null_sig, train)?;
        if width == 0 {
            return Ok(());
        }

        let eta = self.plan.eta_at(epoch);
        let k = self.plan.signal_iters;
        let subsets = make_subsets(train.len(), self.plan.subset_size, self.plan.seed, epoch);

        // phase 2: fit the frame to clean boosted inputs
        for subset in &subsets {
            for _ in 0..k {
                let g = self.signal_ce_grad(train, subset, None)?;
                self.signal.apply_step(&g, eta)?;
            }
        }

        // phase 3: harden the frame against per-example attacks
        let spec = attack::profile(&self.plan.train_attack, self.plan.epsilon)?;
        for (si, subset) in subsets.iter().enumerate() {
            for round in 0..k {
                let p = self.subset_perturbations(train, subset, &spec, epoch, si as u64, round as u64)?;
                let g = self.signal_ce_grad(train, subset, Some(&p))?;
                self.signal.apply_step(&g, eta)?;
            }
        }

        // phase 4: adapt the classifier to the hardened frame
        let sig = self.signal.clone();
        self.at_pass(epoch, STEP4, &sig, train)?;
        Ok(())
    }

    /// One adversarial-training sweep over the data with the given frame.
    fn at_pass(&mut self, epoch: usize, step: u64, sig: &BoosterSignal, train: &Dataset) -> Result<()> {
        let plan = self.plan.clone();
        let spec = attack::profile(&plan.train_attack, plan.epsilon)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = rng::stream(plan.seed, &[tag::BATCH_ORDER, epoch as u64, step]);
        order.shuffle(&mut shuffle_rng);
        for (bi, chunk) in order.chunks(plan.batch_size).enumerate() {
            let (x, y) = train.batch(chunk)?;
            let canvas = sig.inject_batch(&x)?;
            let mut arng = rng::stream(plan.seed, &[tag::ATTACK, epoch as u64, step, bi as u64]);
            let adv = match plan.defense {
                Defense::Madry => attack::pgd(
                    &self.model,
                    &canvas,
                    &y,
                    &spec,
                    &Objective::CrossEntropy,
                    None,
                    &mut arng,
                )?,
                Defense::Trades { .. } => {
                    let r = self.model.logits(&canvas)?;
                    attack::pgd(
                        &self.model,
                        &canvas,
                        &y,
                        &spec,
                        &Objective::KlFromRef(&r),
                        None,
                        &mut arng,
                    )?
                }
            };
            self.defense_step(&canvas, &adv, &y, plan.defense)?;
        }
        Ok(())
    }

    /// One classifier update from a clean/adversarial batch pair.
    fn defense_step(&mut self, canvas: &Tensor, adv: &Tensor, labels: &[usize], defense: Defense) -> Result<()> {
        let mut g = Graph::new();
        match defense {
            Defense::Madry => {
                let av = g.leaf_from(adv.shape().to_vec(), adv.data().to_vec(), false)?;
                let (logits, vars) = self.model.forward_graph(&mut g, av, true)?;
                let loss = g.softmax_cross_entropy(logits, labels, Reduction::Mean)?;
                g.backward(loss)?;
                self.model.absorb_grads(&g, &vars)?;
            }
            Defense::Trades { beta } => {
                let cv = g.leaf_from(canvas.shape().to_vec(), canvas.data().to_vec(), false)?;
                let av = g.leaf_from(adv.shape().to_vec(), adv.data().to_vec(), false)?;
                let (clean_logits, vars) = self.model.forward_graph(&mut g, cv, true)?;
                let adv_logits = self.model.forward_graph_with(&mut g, av, &vars)?;
                let ce = g.softmax_cross_entropy(clean_logits, labels, Reduction::Mean)?;
                let kl = g.kl_divergence(adv_logits, clean_logits)?;
                let scaled = g.scale(kl, beta)?;
                let loss = g.add(ce, scaled)?;
                g.backward(loss)?;
                self.model.absorb_grads(&g, &vars)?;
            }
        }
        self.opt.step(self.model.params_mut())
    }

    /// Mean-CE gradient w.r.t. the frame over a subset, optionally with a
    /// fixed additive perturbation on the canvas. Chunked with sum-reduction
    /// so the result is independent of chunk size.
    fn signal_ce_grad(&self, train: &Dataset, subset: &[usize], perturb: Option<&[f32]>) -> Result<Vec<f32>> {
        let width = self.signal.width();
        let (c, hf, wf) = self.signal.canvas_dims();
        let per = c * hf * wf;
        let mut total = vec![0.0f32; per];
        for (ci, chunk) in subset.chunks(self.plan.batch_size).enumerate() {
            let (x, y) = train.batch(chunk)?;
            let mut g = Graph::new();
            let xv = g.leaf_from(x.shape().to_vec(), x.data().to_vec(), false)?;
            let fv = g.leaf_from(vec![c, hf, wf], self.signal.frame_data().to_vec(), true)?;
            let mut canvas = g.inject(xv, fv, width)?;
            if let Some(p) = perturb {
                let start = ci * self.plan.batch_size * per;
                let slice = &p[start..start + chunk.len() * per];
                let pv = g.leaf_from(vec![chunk.len(), c, hf, wf], slice.to_vec(), false)?;
                canvas = g.add(canvas, pv)?;
            }
            let (logits, _) = self.model.forward_graph(&mut g, canvas, false)?;
            let loss = g.softmax_cross_entropy(logits, &y, Reduction::Sum)?;
            g.backward(loss)?;
            let gf = g.grad(fv).expect("frame requires grad");
            for (t, v) in total.iter_mut().zip(gf) {
                *t += v;
            }
        }
        let scale = 1.0 / subset.len() as f32;
        for t in &mut total {
            *t *= scale;
        }
        Ok(total)
    }

    /// Attack every subset example against the current frame; returns the
    /// perturbations (adv - canvas) concatenated in subset order.
    fn subset_perturbations(
        &self,
        train: &Dataset,
        subset: &[usize],
        spec: &AttackSpec,
        epoch: usize,
        subset_idx: u64,
        round: u64,
    ) -> Result<Vec<f32>> {
        let (c, hf, wf) = self.signal.canvas_dims();
        let per = c * hf * wf;
        let mut out = Vec::with_capacity(subset.len() * per);
        for (ci, chunk) in subset.chunks(self.plan.batch_size).enumerate() {
            let (x, y) = train.batch(chunk)?;
            let canvas = self.signal.inject_batch(&x)?;
            let mut arng = rng::stream(
                self.plan.seed,
                &[tag::ATTACK, epoch as u64, STEP3, subset_idx, round, ci as u64],
            );
            let adv = attack::pgd(
                &self.model,
                &canvas,
                &y,
                spec,
                &Objective::CrossEntropy,
                None,
                &mut arng,
            )?;
            out.extend(adv.data().iter().zip(canvas.data()).map(|(a, b)| a - b));
        }
        Ok(out)
    }

    fn eval_epoch(&self, epoch: usize, test: &Dataset) -> Result<Vec<MetricsRecord>> {
        let mode = if self.plan.signal_width > 0 {
            SignalMode::Single(&self.signal)
        } else {
            SignalMode::Null(0)
        };
        let natural = analysis::evaluate(
            &self.model,
            test,
            &mode,
            None,
            "test",
            self.plan.eval_batch,
            self.plan.seed,
            epoch as u64,
        )?;
        let spec = attack::profile(&self.plan.eval_attack, self.plan.epsilon)?;
        let robust = analysis::evaluate(
            &self.model,
            test,
            &mode,
            Some(&spec),
            "test",
            self.plan.eval_batch,
            self.plan.seed,
            epoch as u64,
        )?;
        Ok(vec![natural, robust])
    }

    fn save_epoch(&self, epoch: usize, rows: &[MetricsRecord]) -> Result<()> {
        let dir = epoch_dir(&self.out, epoch);
        fs::create_dir_all(&dir)?;
        let mut container = checkpoint::model_to_container(&self.model);
        for ((name, p), v) in self
            .model
            .param_names()
            .iter()
            .zip(self.model.params())
            .zip(self.opt.velocity())
        {
            container.push(format!("{}{}", VELOCITY_PREFIX, name), p.shape().to_vec(), v.clone());
        }
        container.write(&dir.join("model.ckpt"))?;
        checkpoint::save_signal(&dir.join("signal.sig"), &self.signal)?;
        analysis::write_metrics_csv(&dir.join("metrics.csv"), rows)?;
        Ok(())
    }

    fn write_state(&self) -> Result<()> {
        let state = RunState {
            epochs_done: self.epochs_done,
            input: [self.input.0, self.input.1, self.input.2],
            num_classes: self.num_classes,
            plan: self.plan.clone(),
        };
        let text =
            serde_json::to_string_pretty(&state).map_err(|e| Error::format(format!("state serialization: {}", e)))?;
        fs::write(self.out.join("state.json"), text)?;
        Ok(())
    }

    /// The run-level metrics file is the epoch files concatenated; rebuilt
    /// from scratch so interrupted and resumed runs converge on the same bytes.
    fn rebuild_run_metrics(&self) -> Result<()> {
        let mut s = String::from(analysis::METRICS_HEADER);
        s.push('\n');
        for e in 0..self.epochs_done {
            let text = fs::read_to_string(epoch_dir(&self.out, e).join("metrics.csv"))?;
            for line in text.lines().skip(1) {
                s.push_str(line);
                s.push('\n');
            }
        }
        fs::write(self.out.join("metrics.csv"), s)?;
        Ok(())
    }
}

pub fn epoch_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{:03}", epoch + 1))
}

fn make_subsets(n: usize, m: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[tag::SUBSETS, epoch as u64]);
    idx.shuffle(&mut r);
    idx.chunks(m.max(1)).map(|c| c.to_vec()).collect()
}

/// Standard adversarial training, written as its own loop on purpose: the
/// signal-disabled path of `Trainer::run` must reproduce these metrics
/// bit-for-bit, and that check is only meaningful if the code is separate.
pub fn plain_at(plan: &TrainPlan, train: &Dataset, test: &Dataset, out: &Path) -> Result<Vec<MetricsRecord>> {
    plan.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::data("training requires non-empty train and test splits"));
    }
    let (c, h, w) = train.dims();
    let mut model = Model::build(&plan.arch, (c, h, w), train.num_classes, plan.seed)?;
    let mut opt = Sgd::new(plan.lr, plan.momentum);
    let spec = attack::profile(&plan.train_attack, plan.epsilon)?;
    let eval_spec = attack::profile(&plan.eval_attack, plan.epsilon)?;
    fs::create_dir_all(out)?;

    let mut all_rows = Vec::new();
    let mut last = Vec::new();
    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = rng::stream(plan.seed, &[tag::BATCH_ORDER, epoch as u64, STEP1]);
        order.shuffle(&mut shuffle_rng);
        for (bi, chunk) in order.chunks(plan.batch_size).enumerate() {
            let (x, y) = train.batch(chunk)?;
            let mut arng = rng::stream(plan.seed, &[tag::ATTACK, epoch as u64, STEP1, bi as u64]);
            let adv = match plan.defense {
                Defense::Madry => attack::pgd(&model, &x, &y, &spec, &Objective::CrossEntropy, None, &mut arng)?,
                Defense::Trades { .. } => {
                    let r = model.logits(&x)?;
                    attack::pgd(&model, &x, &y, &spec, &Objective::KlFromRef(&r), None, &mut arng)?
                }
            };
            let mut g = Graph::new();
            match plan.defense {
                Defense::Madry => {
                    let av = g.leaf_from(adv.shape().to_vec(), adv.data().to_vec(), false)?;
                    let (logits, vars) = model.forward_graph(&mut g, av, true)?;
                    let loss = g.softmax_cross_entropy(logits, &y, Reduction::Mean)?;
                    g.backward(loss)?;
                    model.absorb_grads(&g, &vars)?;
                }
                Defense::Trades { beta } => {
                    let cv = g.leaf_from(x.shape().to_vec(), x.data().to_vec(), false)?;
                    let av = g.leaf_from(adv.shape().to_vec(), adv.data().to_vec(), false)?;
                    let (clean_logits, vars) = model.forward_graph(&mut g, cv, true)?;
                    let adv_logits = model.forward_graph_with(&mut g, av, &vars)?;
                    let ce = g.softmax_cross_entropy(clean_logits, &y, Reduction::Mean)?;
                    let kl = g.kl_divergence(adv_logits, clean_logits)?;
                    let scaled = g.scale(kl, beta)?;
                    let loss = g.add(ce, scaled)?;
                    g.backward(loss)?;
                    model.absorb_grads(&g, &vars)?;
                }
            }
            opt.step(model.params_mut())?;
        }

        let natural = analysis::evaluate(
            &model,
            test,
            &SignalMode::Null(0),
            None,
            "test",
            plan.eval_batch,
            plan.seed,
            epoch as u64,
        )?;
        let robust = analysis::evaluate(
            &model,
            test,
            &SignalMode::Null(0),
            Some(&eval_spec),
            "test",
            plan.eval_batch,
            plan.seed,
            epoch as u64,
        )?;
        let rows = vec![natural, robust];
        let dir = epoch_dir(out, epoch);
        fs::create_dir_all(&dir)?;
        let mut container = checkpoint::model_to_container(&model);
        for ((name, p), v) in model.param_names().iter().zip(model.params()).zip(opt.velocity()) {
            container.push(format!("{}{}", VELOCITY_PREFIX, name), p.shape().to_vec(), v.clone());
        }
        container.write(&dir.join("model.ckpt"))?;
        checkpoint::save_signal(&dir.join("signal.sig"), &BoosterSignal::null(0, c, (h, w)))?;
        analysis::write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
        all_rows.extend(rows.clone());
        analysis::write_metrics_csv(&out.join("metrics.csv"), &all_rows)?;
        last = rows;
    }
    Ok(last)
}

/// Train one run per width value; returns (label, natural, robust) per run.
pub fn sweep_width(
    base: &TrainPlan,
    widths: &[usize],
    train: &Dataset,
    test: &Dataset,
    out: &Path,
) -> Result<Vec<(String, f32, f32)>> {
    let mut rows = Vec::new();
    for w in widths {
        let mut plan = base.clone();
        plan.signal_width = *w;
        let dir = out.join(format!("width_{}", w));
        let mut t = Trainer::new(plan, train.dims(), train.num_classes, &dir)?;
        let last = t.run(train, test)?;
        rows.push(summary_row(format!("{}", w), &last)?);
    }
    Ok(rows)
}

/// Train one run per subset size.
pub fn sweep_subset(
    base: &TrainPlan,
    sizes: &[usize],
    train: &Dataset,
    test: &Dataset,
    out: &Path,
) -> Result<Vec<(String, f32, f32)>> {
    let mut rows = Vec::new();
    for m in sizes {
        let mut plan = base.clone();
        plan.subset_size = *m;
        let dir = out.join(format!("subset_{}", m));
        let mut t = Trainer::new(plan, train.dims(), train.num_classes, &dir)?;
        let last = t.run(train, test)?;
        rows.push(summary_row(format!("{}", m), &last)?);
    }
    Ok(rows)
}

fn summary_row(label: String, rows: &[MetricsRecord]) -> Result<(String, f32, f32)> {
    let nat = rows
        .iter()
        .find(|r| r.attack == "none")
        .ok_or_else(|| Error::config("run produced no natural-accuracy row"))?;
    let rob = rows
        .iter()
        .find(|r| r.attack != "none")
        .ok_or_else(|| Error::config("run produced no robust-accuracy row"))?;
    Ok((label, nat.accuracy, rob.accuracy))
}

pub fn write_sweep_csv(path: &Path, rows: &[(String, f32, f32)]) -> Result<()> {
    let mut s = String::from("value,natural_accuracy,robust_accuracy\n");
    for (v, n, r) in rows {
        s.push_str(&format!("{},{},{}\n", v, n, r));
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, SynthConfig};

    fn tiny_data() -> (Dataset, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        data::write_synth_corpus(dir.path(), 60, 30, 11, &SynthConfig::default()).unwrap();
        data::load_dir(dir.path()).unwrap()
    }

    fn tiny_plan() -> TrainPlan {
        TrainPlan {
            arch: "cnn-small".into(),
            seed: 21,
            epochs: 1,
            batch_size: 30,
            lr: 0.05,
            momentum: 0.9,
            signal_width: 2,
            signal_lr: 0.05,
            signal_iters: 1,
            subset_size: 30,
            epsilon: 8.0 / 255.0,
            train_attack: "fgsm".into(), // cheap inner max for unit tests
            eval_attack: "fgsm".into(),
            defense: Defense::Madry,
            train_limit: None,
            test_limit: None,
            eval_batch: 30,
        }
    }

    #[test]
    fn epoch_produces_artifacts_and_moves_signal() {
        let (train, test) = tiny_data();
        let out = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_plan(), train.dims(), 10, out.path()).unwrap();
        let before = t.signal().frame_data().to_vec();
        let rows = t.run(&train, &test).unwrap();
        assert_eq!(rows.len(), 2);
        assert_ne!(t.signal().frame_data(), before.as_slice());
        assert!(out.path().join("epoch_001/model.ckpt").exists());
        assert!(out.path().join("epoch_001/signal.sig").exists());
        assert!(out.path().join("metrics.csv").exists());
        assert!(out.path().join("state.json").exists());
    }

    #[test]
    fn load_flags_missing_epoch_member_as_corruption() {
        let (train, test) = tiny_data();
        let out = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_plan(), train.dims(), 10, out.path()).unwrap();
        t.run(&train, &test).unwrap();
        fs::remove_file(out.path().join("epoch_001/signal.sig")).unwrap();
        assert!(matches!(Trainer::load(out.path()), Err(Error::Corruption(_))));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (train, test) = tiny_data();
        let mut plan = tiny_plan();
        plan.epochs = 2;

        let full = tempfile::tempdir().unwrap();
        let mut t1 = Trainer::new(plan.clone(), train.dims(), 10, full.path()).unwrap();
        t1.run(&train, &test).unwrap();

        let split = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(plan.clone(), train.dims(), 10, split.path()).unwrap();
        first.plan.epochs = 1;
        first.run(&train, &test).unwrap();
        // rewrite state with the full plan, as the CLI resume path would see it
        let mut resumed = Trainer::load(split.path()).unwrap();
        resumed.plan.epochs = 2;
        resumed.run(&train, &test).unwrap();

        let a = fs::read_to_string(full.path().join("metrics.csv")).unwrap();
        let b = fs::read_to_string(split.path().join("metrics.csv")).unwrap();
        assert_eq!(a, b);
        let ca = fs::read(full.path().join("epoch_002/model.ckpt")).unwrap();
        let cb = fs::read(split.path().join("epoch_002/model.ckpt")).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn disabled_signal_equals_plain_at() {
        let (train, test) = tiny_data();
        let mut plan = tiny_plan();
        plan.signal_width = 0;
        plan.epochs = 2;

        let a = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(plan.clone(), train.dims(), 10, a.path()).unwrap();
        t.run(&train, &test).unwrap();

        let b = tempfile::tempdir().unwrap();
        plain_at(&plan, &train, &test, b.path()).unwrap();

        let ma = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
        let mb = fs::read_to_string(b.path().join("metrics.csv")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn eta_decays_to_near_zero() {
        let mut plan = tiny_plan();
        plan.epochs = 10;
        plan.signal_lr = 0.04;
        assert_eq!(plan.eta_at(0), 0.04);
        assert!(plan.eta_at(9) < 0.002);
        for e in 1..10 {
            assert!(plan.eta_at(e) < plan.eta_at(e - 1));
        }
    }

    #[test]
    fn bad_plan_is_config_error() {
        let mut plan = tiny_plan();
        plan.epsilon = 2.0;
        assert!(matches!(plan.validate(), Err(Error::Config(_))));
    }
}
