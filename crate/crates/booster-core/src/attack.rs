//! White-box attacks in pixel space.
//!
//! All attacks take the model's actual input batch (the frame canvas when a
//! signal is in play) and return adversarial inputs of the same shape. The
//! two L-inf attacks promise `|adv - x|_inf <= eps` and `adv in [0,1]`
//! coordinate-wise; the L2 attack promises only the pixel range.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::ops::{self, Reduction};
use crate::optim::Adam;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    CwL2,
}

/// Which canvas coordinates the adversary may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    #[default]
    Full,
    Interior,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f32,
    pub steps: usize,
    pub alpha: f32,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub kappa: f32,
    #[serde(default = "default_cw_c")]
    pub c: f32,
    #[serde(default = "default_cw_lr")]
    pub cw_lr: f32,
    #[serde(default)]
    pub region: Region,
}

fn default_true() -> bool {
    true
}
fn default_cw_c() -> f32 {
    1.0
}
fn default_cw_lr() -> f32 {
    0.01
}

/// Named presets; step sizes follow the usual eps fractions.
pub fn profile(name: &str, epsilon: f32) -> Result<AttackSpec> {
    let base = AttackSpec {
        kind: AttackKind::Fgsm,
        epsilon,
        steps: 1,
        alpha: epsilon,
        random_start: false,
        kappa: 0.0,
        c: default_cw_c(),
        cw_lr: default_cw_lr(),
        region: Region::Full,
    };
    match name {
        "fgsm" => Ok(base),
        "pgd20" => Ok(AttackSpec {
            kind: AttackKind::Pgd,
            steps: 20,
            alpha: epsilon / 10.0,
            random_start: true,
            ..base
        }),
        "pgd7" => Ok(AttackSpec {
            kind: AttackKind::Pgd,
            steps: 7,
            alpha: epsilon / 4.0,
            random_start: true,
            ..base
        }),
        "cw200" => Ok(AttackSpec {
            kind: AttackKind::CwL2,
            steps: 200,
            ..base
        }),
        other => Err(Error::config(format!(
            "unknown attack profile '{}'; expected fgsm, pgd20, pgd7, cw200",
            other
        ))),
    }
}

/// Clip to the eps-ball around `origin`, then to the pixel range.
pub fn project_linf(adv: &mut [f32], origin: &[f32], eps: f32) {
    debug_assert_eq!(adv.len(), origin.len());
    for (a, o) in adv.iter_mut().zip(origin) {
        *a = (*a).clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

/// What the inner maximization climbs.
pub enum Objective<'a> {
    CrossEntropy,
    /// KL(f(adv) || reference) with fixed reference logits, [n, k].
    KlFromRef(&'a [f32]),
}

fn input_grad(model: &Model, x: &Tensor, labels: &[usize], obj: &Objective) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let xv = g.leaf_from(x.shape().to_vec(), x.data().to_vec(), true)?;
    let (logits, _) = model.forward_graph(&mut g, xv, false)?;
    let loss = match obj {
        Objective::CrossEntropy => g.softmax_cross_entropy(logits, labels, Reduction::Mean)?,
        Objective::KlFromRef(r) => {
            let n = x.shape()[0];
            let k = model.num_classes();
            let rv = g.leaf_from(vec![n, k], r.to_vec(), false)?;
            g.kl_divergence(logits, rv)?
        }
    };
    g.backward(loss)?;
    Ok(g.grad(xv).expect("input leaf requires grad").to_vec())
}

fn apply_plane_mask(buf: &mut [f32], mask: &[f32]) {
    // mask is one canvas plane [c,h,w]; broadcast over the batch
    for chunk in buf.chunks_exact_mut(mask.len()) {
        for (v, m) in chunk.iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

/// Single sign step of size eps from the clean input.
pub fn fgsm(model: &Model, x: &Tensor, labels: &[usize], eps: f32, mask: Option<&[f32]>) -> Result<Tensor> {
    let grad = input_grad(model, x, labels, &Objective::CrossEntropy)?;
    let mut step = ops::sign_forward(&grad);
    if let Some(m) = mask {
        apply_plane_mask(&mut step, m);
    }
    let mut adv: Vec<f32> = x.data().iter().zip(&step).map(|(v, s)| v + eps * s).collect();
    project_linf(&mut adv, x.data(), eps);
    Tensor::from_vec(x.shape().to_vec(), adv)
}

/// Iterated sign ascent with projection after every step.
#[allow(clippy::too_many_arguments)]
pub fn pgd(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    obj: &Objective,
    mask: Option<&[f32]>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let eps = spec.epsilon;
    let mut adv = x.data().to_vec();
    // eps = 0 leaves nothing to sample and projection pins adv to x anyway
    if spec.random_start && eps > 0.0 {
        let mut noise: Vec<f32> = (0..adv.len()).map(|_| rng.gen_range(-eps..eps)).collect();
        if let Some(m) = mask {
            apply_plane_mask(&mut noise, m);
        }
        for (a, n) in adv.iter_mut().zip(&noise) {
            *a += n;
        }
        project_linf(&mut adv, x.data(), eps);
    }
    for _ in 0..spec.steps {
        let cur = Tensor::from_vec(x.shape().to_vec(), adv.clone())?;
        let grad = input_grad(model, &cur, labels, obj)?;
        let mut step = ops::sign_forward(&grad);
        if let Some(m) = mask {
            apply_plane_mask(&mut step, m);
        }
        for (a, s) in adv.iter_mut().zip(&step) {
            *a += spec.alpha * s;
        }
        project_linf(&mut adv, x.data(), eps);
    }
    Tensor::from_vec(x.shape().to_vec(), adv)
}

/// L2 attack in tanh space: minimize |adv-x|_2^2 + c * margin, keeping the
/// smallest-norm iterate that flips each example.
pub fn cw_l2(model: &Model, x: &Tensor, labels: &[usize], spec: &AttackSpec, mask: Option<&[f32]>) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let n = shape[0];
    let numel = x.numel();
    let per = numel / n;

    // w = atanh(2x - 1), nudged off the rails where atanh diverges
    let w0: Vec<f32> = x
        .data()
        .iter()
        .map(|v| {
            let t = (2.0 * v - 1.0).clamp(-0.999_999, 0.999_999);
            t.atanh()
        })
        .collect();
    let mut w = Tensor::from_vec(shape.clone(), w0)?.with_requires_grad(true);
    let mut opt = Adam::new(spec.cw_lr);

    let full_mask: Option<Vec<f32>> = mask.map(|m| {
        let mut out = Vec::with_capacity(numel);
        for _ in 0..n {
            out.extend_from_slice(m);
        }
        out
    });

    let mut best = x.data().to_vec();
    let mut best_l2 = vec![f64::INFINITY; n];

    for _ in 0..spec.steps {
        let mut g = Graph::new();
        let wv = g.leaf_from(shape.clone(), w.data().to_vec(), true)?;
        let xv = g.leaf_from(shape.clone(), x.data().to_vec(), false)?;
        let th = g.tanh(wv)?;
        let shifted = g.add_scalar(th, 1.0)?;
        let mut adv = g.scale(shifted, 0.5)?;
        if let Some(fm) = &full_mask {
            // adv = mask*adv + (1-mask)*x keeps untouchable coords bit-equal to x
            let mv = g.leaf_from(shape.clone(), fm.clone(), false)?;
            let inv: Vec<f32> = fm.iter().map(|v| 1.0 - v).collect();
            let iv = g.leaf_from(shape.clone(), inv, false)?;
            let a = g.mul(adv, mv)?;
            let b = g.mul(xv, iv)?;
            adv = g.add(a, b)?;
        }
        let diff = g.sub(adv, xv)?;
        let sq = g.mul(diff, diff)?;
        let l2 = g.sum(sq)?;
        let (logits, _) = model.forward_graph(&mut g, adv, false)?;
        let margin = g.cw_margin(logits, labels, spec.kappa)?;
        let weighted = g.scale(margin, spec.c)?;
        let loss = g.add(l2, weighted)?;
        g.backward(loss)?;

        // bookkeeping on the current iterate before stepping
        let adv_now = g.value(adv).to_vec();
        let logit_vals = g.value(logits);
        let k = model.num_classes();
        for i in 0..n {
            let row = &logit_vals[i * k..(i + 1) * k];
            let pred = argmax(row);
            if pred != labels[i] {
                let mut l2i = 0.0f64;
                for j in 0..per {
                    let d = (adv_now[i * per + j] - x.data()[i * per + j]) as f64;
                    l2i += d * d;
                }
                if l2i < best_l2[i] {
                    best_l2[i] = l2i;
                    best[i * per..(i + 1) * per].copy_from_slice(&adv_now[i * per..(i + 1) * per]);
                }
            }
        }

        w.set_grad(g.grad(wv).expect("w requires grad").to_vec())?;
        opt.step(std::slice::from_mut(&mut w))?;
    }

    // examples that never flipped keep the final iterate
    let final_adv = {
        let th = ops::tanh_forward(w.data());
        let mut a: Vec<f32> = th.iter().map(|v| (v + 1.0) * 0.5).collect();
        if let Some(fm) = &full_mask {
            for i in 0..numel {
                if fm[i] == 0.0 {
                    a[i] = x.data()[i];
                }
            }
        }
        a
    };
    for i in 0..n {
        if best_l2[i].is_infinite() {
            best[i * per..(i + 1) * per].copy_from_slice(&final_adv[i * per..(i + 1) * per]);
        }
    }
    Tensor::from_vec(shape, best)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// Dispatch on the spec. `interior_mask` is consulted only for
/// `Region::Interior` and must be one canvas plane.
pub fn run_attack(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    interior_mask: Option<&[f32]>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mask = match spec.region {
        Region::Full => None,
        Region::Interior => {
            Some(interior_mask.ok_or_else(|| Error::config("interior attack region requested but no mask supplied"))?)
        }
    };
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, x, labels, spec.epsilon, mask),
        AttackKind::Pgd => pgd(model, x, labels, spec, &Objective::CrossEntropy, mask, rng),
        AttackKind::CwL2 => cw_l2(model, x, labels, spec, mask),
    }
}

/// Per-example cross-entropy, used to compare attack strength.
pub fn per_example_ce(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Vec<f32>> {
    let logits = model.logits(x)?;
    let k = model.num_classes();
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let row = &logits[i * k..(i + 1) * k];
            ops::softmax_ce_forward(row, 1, k, &[*y], Reduction::Sum)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, tag};

    fn setup() -> (Model, Tensor, Vec<usize>) {
        let model = Model::build("cnn-small", (1, 10, 10), 10, 42).unwrap();
        let mut r = rng::stream(1, &[tag::EVAL]);
        let x = Tensor::rand_uniform(vec![4, 1, 10, 10], 0.0, 1.0, &mut r);
        (model, x, vec![0, 1, 2, 3])
    }

    fn check_budget(adv: &Tensor, x: &Tensor, eps: f32) {
        for (a, o) in adv.data().iter().zip(x.data()) {
            assert!((a - o).abs() <= eps + 1e-6, "linf violated: {} vs {}", a, o);
            assert!(*a >= 0.0 && *a <= 1.0, "pixel range violated: {}", a);
        }
    }

    #[test]
    fn fgsm_budget_and_range() {
        let (model, x, labels) = setup();
        let adv = fgsm(&model, &x, &labels, 0.1, None).unwrap();
        check_budget(&adv, &x, 0.1);
        assert!(adv.data().iter().zip(x.data()).any(|(a, o)| a != o));
    }

    #[test]
    fn pgd_budget_and_range() {
        let (model, x, labels) = setup();
        let spec = profile("pgd7", 8.0 / 255.0).unwrap();
        let mut r = rng::stream(2, &[tag::ATTACK]);
        let adv = pgd(&model, &x, &labels, &spec, &Objective::CrossEntropy, None, &mut r).unwrap();
        check_budget(&adv, &x, spec.epsilon);
    }

    #[test]
    fn pgd_zero_budget_returns_input_bits() {
        let (model, x, labels) = setup();
        // random_start stays on: the degenerate budget must not panic or drift
        let spec = profile("pgd7", 0.0).unwrap();
        let mut r = rng::stream(4, &[tag::ATTACK]);
        let adv = pgd(&model, &x, &labels, &spec, &Objective::CrossEntropy, None, &mut r).unwrap();
        for (a, o) in adv.data().iter().zip(x.data()) {
            assert_eq!(a.to_bits(), o.to_bits());
        }
    }

    #[test]
    fn pgd_is_deterministic_per_stream() {
        let (model, x, labels) = setup();
        let spec = profile("pgd7", 0.03).unwrap();
        let a = {
            let mut r = rng::stream(9, &[tag::ATTACK, 0]);
            pgd(&model, &x, &labels, &spec, &Objective::CrossEntropy, None, &mut r).unwrap()
        };
        let b = {
            let mut r = rng::stream(9, &[tag::ATTACK, 0]);
            pgd(&model, &x, &labels, &spec, &Objective::CrossEntropy, None, &mut r).unwrap()
        };
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn interior_mask_pins_border() {
        let (model, x, labels) = setup();
        // mask: only the top-left quadrant is attackable
        let mut mask = vec![0.0f32; 100];
        for y in 0..5 {
            for xx in 0..5 {
                mask[y * 10 + xx] = 1.0;
            }
        }
        let spec = profile("pgd7", 0.1).unwrap();
        let mut r = rng::stream(3, &[tag::ATTACK]);
        let adv = pgd(
            &model,
            &x,
            &labels,
            &spec,
            &Objective::CrossEntropy,
            Some(&mask),
            &mut r,
        )
        .unwrap();
        for i in 0..4 * 100 {
            if mask[i % 100] == 0.0 {
                assert_eq!(adv.data()[i].to_bits(), x.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn cw_stays_in_pixel_range_and_masks_exactly() {
        let (model, x, labels) = setup();
        let mut spec = profile("cw200", 0.0).unwrap();
        spec.steps = 5; // enough to move w; this test is about invariants
        let mut mask = vec![1.0f32; 100];
        mask[..10].fill(0.0); // first row untouchable
        let adv = cw_l2(&model, &x, &labels, &spec, Some(&mask)).unwrap();
        for (i, (a, o)) in adv.data().iter().zip(x.data()).enumerate() {
            assert!(*a >= 0.0 && *a <= 1.0);
            if mask[i % 100] == 0.0 {
                assert_eq!(a.to_bits(), o.to_bits());
            }
        }
    }

    #[test]
    fn cw_with_zero_margin_weight_stays_at_input() {
        let (model, x, labels) = setup();
        let mut spec = profile("cw200", 0.0).unwrap();
        spec.c = 0.0;
        spec.steps = 50;
        // objective collapses to |adv - x|^2, whose optimum is the clean input;
        // only tanh-space roundoff and Adam settling noise remain
        let adv = cw_l2(&model, &x, &labels, &spec, None).unwrap();
        let worst = adv
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, o)| (a - o).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-2, "c=0 drifted {worst} from the input");
    }

    #[test]
    fn unknown_profile_is_config_error() {
        assert!(matches!(profile("pgd1000", 0.1), Err(Error::Config(_))));
    }
}
