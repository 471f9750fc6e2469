//! Evaluation and diagnostics: accuracy under attack, input-gradient
//! statistics, loss-surface probes, robustness curves.
//!
//! CSV floats are written with `Display`, which emits the shortest string
//! that round-trips, so fixed-seed runs produce byte-identical files.

use crate::attack::{self, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::ops::Reduction;
use crate::rng::{self, tag};
use crate::signal::{self, BoosterSignal};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const METRICS_HEADER: &str = "split,attack,signal_mode,epsilon,accuracy,grad_mean,grad_p50";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub split: String,
    pub attack: String,
    pub signal_mode: String,
    pub epsilon: f32,
    pub accuracy: f32,
    pub grad_mean: f32,
    pub grad_p50: f32,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.split, self.attack, self.signal_mode, self.epsilon, self.accuracy, self.grad_mean, self.grad_p50
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => return Err(Error::format(format!("{}: not a metrics file", path.display()))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(Error::format(format!("{}: row {} malformed", path.display(), i + 2)));
        }
        let num = |s: &str| {
            s.parse::<f32>()
                .map_err(|_| Error::format(format!("{}: bad number '{}'", path.display(), s)))
        };
        rows.push(MetricsRecord {
            split: cells[0].into(),
            attack: cells[1].into(),
            signal_mode: cells[2].into(),
            epsilon: num(cells[3])?,
            accuracy: num(cells[4])?,
            grad_mean: num(cells[5])?,
            grad_p50: num(cells[6])?,
        });
    }
    Ok(rows)
}

/// How eval composes the model input from raw images.
pub enum SignalMode<'a> {
    /// Zero frame of the given width (width 0 feeds images through unchanged).
    Null(usize),
    Single(&'a BoosterSignal),
    /// One frame drawn per example.
    Pool(&'a [BoosterSignal]),
}

impl SignalMode<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            SignalMode::Null(_) => "null",
            SignalMode::Single(_) => "booster",
            SignalMode::Pool(_) => "pool",
        }
    }

    fn width(&self) -> usize {
        match self {
            SignalMode::Null(w) => *w,
            SignalMode::Single(s) => s.width(),
            SignalMode::Pool(p) => p.first().map(|s| s.width()).unwrap_or(0),
        }
    }

    fn compose(&self, x: &Tensor, rng: &mut impl rand::Rng) -> Result<Tensor> {
        match self {
            SignalMode::Null(w) => {
                let (_, c, h, wd) = x.dims4()?;
                BoosterSignal::null(*w, c, (h, wd)).inject_batch(x)
            }
            SignalMode::Single(s) => s.inject_batch(x),
            SignalMode::Pool(p) => signal::inject_batch_pooled(x, p, rng),
        }
    }
}

fn interior_mask_for(width: usize, dims: (usize, usize, usize)) -> Vec<f32> {
    let (c, h, w) = dims;
    BoosterSignal::null(width, c, (h, w)).interior_mask()
}

/// Per-example L2 norm of the loss gradient over interior coordinates.
/// Sum-reduction keeps rows independent of batch size.
pub fn interior_grad_norms(model: &Model, canvas: &Tensor, labels: &[usize], interior: &[f32]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.leaf_from(canvas.shape().to_vec(), canvas.data().to_vec(), true)?;
    let (logits, _) = model.forward_graph(&mut g, xv, false)?;
    let loss = g.softmax_cross_entropy(logits, labels, Reduction::Sum)?;
    g.backward(loss)?;
    let grad = g.grad(xv).expect("canvas requires grad");
    let n = canvas.shape()[0];
    let per = canvas.numel() / n;
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = 0.0f64;
        for j in 0..per {
            let v = (grad[i * per + j] * interior[j]) as f64;
            acc += v * v;
        }
        norms.push(acc.sqrt());
    }
    Ok(norms)
}

fn median(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    sorted[(sorted.len() - 1) / 2]
}

/// One metrics row: accuracy of the (optionally attacked) composed inputs
/// plus interior input-gradient stats on the inputs actually scored.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    mode: &SignalMode,
    spec: Option<&AttackSpec>,
    split: &str,
    eval_batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<MetricsRecord> {
    if data.is_empty() {
        return Err(Error::data("evaluate: empty dataset"));
    }
    let (c, h, w) = data.dims();
    let width = mode.width();
    let interior = interior_mask_for(width, (c, h, w));
    let mut pool_rng = rng::stream(seed, &[tag::POOL_CHOICE, epoch]);

    let mut hits = 0usize;
    let mut norms: Vec<f64> = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for (bi, chunk) in idx.chunks(eval_batch.max(1)).enumerate() {
        let (x, y) = data.batch(chunk)?;
        let canvas = mode.compose(&x, &mut pool_rng)?;
        let scored = match spec {
            None => canvas,
            Some(sp) => {
                let mut arng = rng::stream(seed, &[tag::EVAL, epoch, bi as u64]);
                attack::run_attack(model, &canvas, &y, sp, Some(&interior), &mut arng)?
            }
        };
        let pred = model.predict(&scored)?;
        hits += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
        norms.extend(interior_grad_norms(model, &scored, &y, &interior)?);
    }
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    Ok(MetricsRecord {
        split: split.to_string(),
        attack: spec.map(attack_name).unwrap_or_else(|| "none".into()),
        signal_mode: mode.label().to_string(),
        epsilon: spec.map(|s| s.epsilon).unwrap_or(0.0),
        accuracy: hits as f32 / data.len() as f32,
        grad_mean: mean as f32,
        grad_p50: median(&norms) as f32,
    })
}

fn attack_name(s: &AttackSpec) -> String {
    match s.kind {
        attack::AttackKind::Fgsm => "fgsm".into(),
        attack::AttackKind::Pgd => format!("pgd{}", s.steps),
        attack::AttackKind::CwL2 => format!("cw{}", s.steps),
    }
}

// ---------------------------------------------------------------------------
// loss surface probe
// ---------------------------------------------------------------------------

/// (a, b, loss) grid rows, a-major.
pub type LossGrid = Vec<(f32, f32, f32)>;

/// Cross-entropy over a 2D slice through one composed input: a walks a
/// random sign direction, b the gradient sign direction, both scaled by eps.
/// Returns the grid and its max-min range.
pub fn landscape(
    model: &Model,
    canvas1: &Tensor, // [1, c, h, w]
    label: usize,
    eps: f32,
    grid: usize,
    seed: u64,
    image_tag: u64,
) -> Result<(LossGrid, f32)> {
    if canvas1.shape()[0] != 1 {
        return Err(Error::shape("landscape probes one example at a time"));
    }
    let n = canvas1.numel();
    let mut r = rng::stream(seed, &[tag::LANDSCAPE, image_tag]);
    let u: Vec<f32> = (0..n)
        .map(|_| if rand::Rng::gen_bool(&mut r, 0.5) { 1.0 } else { -1.0 })
        .collect();
    let (_, grad) = model.input_gradient(canvas1, &[label])?;
    let v = crate::ops::sign_forward(&grad);

    let mut rows = Vec::with_capacity(grid * grid);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for ai in 0..grid {
        let a = -1.0 + 2.0 * ai as f32 / (grid - 1) as f32;
        for bi in 0..grid {
            let b = -1.0 + 2.0 * bi as f32 / (grid - 1) as f32;
            let probe: Vec<f32> = canvas1
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| (x + eps * (a * u[i] + b * v[i])).clamp(0.0, 1.0))
                .collect();
            let t = Tensor::from_vec(canvas1.shape().to_vec(), probe)?;
            let logits = model.logits(&t)?;
            let loss = crate::ops::softmax_ce_forward(&logits, 1, model.num_classes(), &[label], Reduction::Sum);
            lo = lo.min(loss);
            hi = hi.max(loss);
            rows.push((a, b, loss));
        }
    }
    Ok((rows, hi - lo))
}

pub fn write_landscape_csv(path: &Path, rows: &[(f32, f32, f32)]) -> Result<()> {
    let mut s = String::from("a,b,loss\n");
    for (a, b, l) in rows {
        let _ = writeln!(s, "{},{},{}", a, b, l);
    }
    fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradient-norm histogram
// ---------------------------------------------------------------------------

pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let mut b = ((v - lo) / span * bins as f64) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1;
    }
    (0..bins)
        .map(|b| {
            (
                lo + span * b as f64 / bins as f64,
                lo + span * (b + 1) as f64 / bins as f64,
                counts[b],
            )
        })
        .collect()
}

pub fn write_histogram_csv(path: &Path, rows: &[(f64, f64, usize)]) -> Result<()> {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (lo, hi, c) in rows {
        let _ = writeln!(s, "{},{},{}", lo, hi, c);
    }
    fs::write(path, s)?;
    Ok(())
}

/// Gradient-norm distribution for a whole split under one signal mode.
pub fn grad_norm_distribution(
    model: &Model,
    data: &Dataset,
    mode: &SignalMode,
    eval_batch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (c, h, w) = data.dims();
    let interior = interior_mask_for(mode.width(), (c, h, w));
    let mut pool_rng = rng::stream(seed, &[tag::POOL_CHOICE]);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut norms = Vec::with_capacity(data.len());
    for chunk in idx.chunks(eval_batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let canvas = mode.compose(&x, &mut pool_rng)?;
        norms.extend(interior_grad_norms(model, &canvas, &y, &interior)?);
    }
    Ok(norms)
}

// ---------------------------------------------------------------------------
// robustness curve
// ---------------------------------------------------------------------------

/// Accuracy as epsilon grows, fixed attack family.
#[allow(clippy::too_many_arguments)]
pub fn robustness_curve(
    model: &Model,
    data: &Dataset,
    mode: &SignalMode,
    profile_name: &str,
    epsilons: &[f32],
    eval_batch: usize,
    seed: u64,
) -> Result<Vec<(f32, f32)>> {
    let mut out = Vec::with_capacity(epsilons.len());
    for (i, eps) in epsilons.iter().enumerate() {
        if *eps == 0.0 {
            let rec = evaluate(model, data, mode, None, "test", eval_batch, seed, i as u64)?;
            out.push((0.0, rec.accuracy));
            continue;
        }
        let spec = attack::profile(profile_name, *eps)?;
        let rec = evaluate(model, data, mode, Some(&spec), "test", eval_batch, seed, i as u64)?;
        out.push((*eps, rec.accuracy));
    }
    Ok(out)
}

pub fn write_curve_csv(path: &Path, rows: &[(f32, f32)]) -> Result<()> {
    let mut s = String::from("epsilon,accuracy\n");
    for (e, a) in rows {
        let _ = writeln!(s, "{},{}", e, a);
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Model, Dataset) {
        let model = Model::build("cnn-small", (1, 10, 10), 10, 5).unwrap();
        let mut r = rng::stream(0, &[tag::EVAL]);
        let images = Tensor::rand_uniform(vec![6, 1, 8, 8], 0.0, 1.0, &mut r);
        let data = Dataset::new(images, vec![0, 1, 2, 3, 4, 5], 10).unwrap();
        (model, data)
    }

    #[test]
    fn evaluate_null_mode_widens_canvas() {
        let (model, data) = toy();
        // model wants 10x10; null signal of width 1 pads the 8x8 images up
        let rec = evaluate(&model, &data, &SignalMode::Null(1), None, "test", 4, 1, 0).unwrap();
        assert_eq!(rec.signal_mode, "null");
        assert_eq!(rec.attack, "none");
        assert!(rec.accuracy >= 0.0 && rec.accuracy <= 1.0);
        assert!(rec.grad_mean >= 0.0);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let (model, data) = toy();
        let spec = attack::profile("pgd7", 0.05).unwrap();
        let a = evaluate(&model, &data, &SignalMode::Null(1), Some(&spec), "test", 4, 9, 2).unwrap();
        let b = evaluate(&model, &data, &SignalMode::Null(1), Some(&spec), "test", 4, 9, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_floats_round_trip() {
        let rec = MetricsRecord {
            split: "test".into(),
            attack: "pgd20".into(),
            signal_mode: "booster".into(),
            epsilon: 8.0 / 255.0,
            accuracy: 0.12345678,
            grad_mean: 1.5e-7,
            grad_p50: 0.25,
        };
        let row = rec.csv_row();
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[3].parse::<f32>().unwrap(), 8.0 / 255.0);
        assert_eq!(cells[4].parse::<f32>().unwrap(), 0.12345678);
        assert_eq!(cells[5].parse::<f32>().unwrap(), 1.5e-7);
    }

    #[test]
    fn histogram_covers_all_values() {
        let vals = [0.0, 0.1, 0.5, 0.9, 1.0, 1.0];
        let h = histogram(&vals, 4);
        assert_eq!(h.len(), 4);
        assert_eq!(h.iter().map(|(_, _, c)| c).sum::<usize>(), vals.len());
        assert_eq!(h[3].2, 3); // 0.9 and the two 1.0s land in the top bin
    }

    #[test]
    fn landscape_grid_shape_and_determinism() {
        let (model, data) = toy();
        let one = data.gather(&[0]).unwrap();
        let canvas = BoosterSignal::null(1, 1, (8, 8)).inject_batch(&one.images).unwrap();
        let (rows, range) = landscape(&model, &canvas, one.labels[0], 0.05, 5, 3, 0).unwrap();
        assert_eq!(rows.len(), 25);
        assert!(range >= 0.0);
        let (rows2, range2) = landscape(&model, &canvas, one.labels[0], 0.05, 5, 3, 0).unwrap();
        assert_eq!(range, range2);
        assert_eq!(rows, rows2);
    }
}
