//! Labeled weighted cross-entropy and the pluggable unlabeled losses.
//!
//! Every unlabeled loss is split in two: [`prepare_unlabeled`] draws the
//! random views and computes every gradient-detached target with the current
//! model, and [`UnlabeledObjective::build`] adds the differentiable part to a
//! graph. Holding a prepared objective fixed freezes all randomness, which is
//! what the finite-difference checks rely on.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{sharpen, AugmentPolicy};
use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

/// Per-class labeled-loss weights, `ω_c ∝ 1/N_c`, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    /// `ω_c = Π_{k≠c} N_k / Σ_j Π_{k≠j} N_k`.
    ///
    /// The product form is exact for integer counts whose products stay
    /// below 2⁵³; larger problems fall back to normalized reciprocals.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.len() < 2 {
            return Err(invalid("class weights need at least 2 classes"));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(invalid(format!("class {c} has no labeled examples")));
        }
        let leave_one_out: Vec<f64> = (0..counts.len())
            .map(|c| {
                counts
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != c)
                    .map(|(_, &n)| n as f64)
                    .product()
            })
            .collect();
        let total: f64 = leave_one_out.iter().sum();
        let w = if total.is_finite() && total < 9.007_199_254_740_992e15 {
            leave_one_out.iter().map(|p| p / total).collect()
        } else {
            let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
            let s: f64 = inv.iter().sum();
            inv.iter().map(|v| v / s).collect()
        };
        Ok(Self(w))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_targets(probs_shape: &[usize], targets: &Tensor, w: &ClassWeights) -> Result<()> {
    if probs_shape != targets.shape() || probs_shape.last() != Some(&w.len()) {
        return Err(Error::ShapeMismatch {
            op: "weighted_ce",
            lhs: probs_shape.to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    Ok(())
}

/// Weighted cross-entropy against probability-row targets, averaged over
/// the batch: `-(1/n) Σ_i Σ_c C·ω_c·t_ic·log p_ic`.
///
/// Weights are rescaled by the class count `C` so they average to one;
/// uniform weights then reproduce plain cross-entropy.
pub fn weighted_ce(g: &mut Graph, probs: Var, targets: &Tensor, w: &ClassWeights) -> Result<Var> {
    check_targets(g.shape(probs), targets, w)?;
    let n = targets.rows().max(1);
    let c = w.len() as f64;
    let mut weighted = targets.clone();
    for row in weighted.values_mut().chunks_mut(w.len()) {
        row.iter_mut().zip(w.as_slice()).for_each(|(t, wc)| *t *= c * wc);
    }
    let wt = g.constant(&weighted);
    let lp = g.log(probs);
    let prod = g.mul(lp, wt)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Value-only [`weighted_ce`].
pub fn weighted_ce_value(probs: &Tensor, targets: &Tensor, w: &ClassWeights) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs);
    let l = weighted_ce(&mut g, p, targets, w)?;
    Ok(g.scalar(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodId {
    Pi,
    Pseudo,
    MeanTeacher,
    Vat,
    Fixmatch,
}

impl MethodId {
    pub const ALL: [MethodId; 5] = [
        MethodId::Pi,
        MethodId::Pseudo,
        MethodId::MeanTeacher,
        MethodId::Vat,
        MethodId::Fixmatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Pi => "pi",
            MethodId::Pseudo => "pseudo",
            MethodId::MeanTeacher => "mean-teacher",
            MethodId::Vat => "vat",
            MethodId::Fixmatch => "fixmatch",
        }
    }
}

impl std::str::FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Base-method hyperparameters. Defaults follow the CIFAR-10 settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseMethodConfig {
    pub method: MethodId,
    pub pseudo_threshold: f64,
    pub vat_xi: f64,
    pub vat_eps: f64,
    pub fixmatch_threshold: f64,
    pub fixmatch_temperature: f64,
    /// Teacher EMA decay for Mean Teacher.
    pub ema_decay: f64,
}

impl Default for BaseMethodConfig {
    fn default() -> Self {
        Self {
            method: MethodId::Pi,
            pseudo_threshold: 0.95,
            vat_xi: 1e-6,
            vat_eps: 6.0,
            fixmatch_threshold: 0.95,
            fixmatch_temperature: 1.0,
            ema_decay: 0.999,
        }
    }
}

impl BaseMethodConfig {
    pub fn for_method(method: MethodId) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("pseudo_threshold", self.pseudo_threshold),
            ("fixmatch_threshold", self.fixmatch_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid(format!("{name} must be in [0, 1], got {t}")));
            }
        }
        if !(self.vat_xi > 0.0 && self.vat_eps > 0.0) {
            return Err(invalid("VAT ξ and ε must be positive"));
        }
        if !(self.fixmatch_temperature > 0.0) {
            return Err(invalid("FixMatch temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid("EMA decay must be in [0, 1)"));
        }
        Ok(())
    }
}

/// An unlabeled loss with all randomness drawn and all detached targets
/// computed.
#[derive(Debug, Clone, PartialEq)]
pub enum UnlabeledObjective {
    /// MSE between predictions on two independent views.
    Pi { view1: Tensor, view2: Tensor },
    /// Masked CE against the model's own confident argmax labels.
    Pseudo { x: Tensor, targets: Tensor },
    /// MSE between student predictions and detached teacher predictions.
    MeanTeacher { student_view: Tensor, teacher_probs: Tensor },
    /// KL between detached clean predictions and predictions at `x + r_adv`.
    Vat { perturbed: Tensor, clean_probs: Tensor },
    /// Masked CE of the strong view against weak-view pseudo-labels.
    Fixmatch { strong: Tensor, targets: Tensor },
    /// No unlabeled examples: the loss is identically zero.
    Empty,
}

impl UnlabeledObjective {
    /// Add the differentiable loss to `g` for a model bound as `params`.
    pub fn build(&self, g: &mut Graph, model: &Classifier, params: &[Var]) -> Result<Option<Var>> {
        Ok(Some(match self {
            UnlabeledObjective::Pi { view1, view2 } => {
                let a = g.constant(view1);
                let b = g.constant(view2);
                let pa = model.probs(g, params, a)?;
                let pb = model.probs(g, params, b)?;
                g.mse(pa, pb)?
            }
            UnlabeledObjective::Pseudo { x, targets } => {
                let xv = g.constant(x);
                let p = model.probs(g, params, xv)?;
                masked_ce(g, p, targets)?
            }
            UnlabeledObjective::MeanTeacher {
                student_view,
                teacher_probs,
            } => {
                let xv = g.constant(student_view);
                let p = model.probs(g, params, xv)?;
                let t = g.constant(teacher_probs);
                g.mse(p, t)?
            }
            UnlabeledObjective::Vat {
                perturbed,
                clean_probs,
            } => {
                let xv = g.constant(perturbed);
                let q = model.probs(g, params, xv)?;
                let p = g.constant(clean_probs);
                g.kl_div(p, q)?
            }
            UnlabeledObjective::Fixmatch { strong, targets } => {
                let xv = g.constant(strong);
                let p = model.probs(g, params, xv)?;
                masked_ce(g, p, targets)?
            }
            UnlabeledObjective::Empty => return Ok(None),
        }))
    }

    /// Loss value at the model's current parameters.
    pub fn value(&self, model: &Classifier) -> Result<f64> {
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        Ok(self.build(&mut g, model, &p)?.map_or(0.0, |l| g.scalar(l)))
    }

    /// Every input tensor the loss feeds through the model.
    pub fn inputs(&self) -> Vec<&Tensor> {
        match self {
            UnlabeledObjective::Pi { view1, view2 } => vec![view1, view2],
            UnlabeledObjective::Pseudo { x, .. } => vec![x],
            UnlabeledObjective::MeanTeacher { student_view, .. } => vec![student_view],
            UnlabeledObjective::Vat { perturbed, .. } => vec![perturbed],
            UnlabeledObjective::Fixmatch { strong, .. } => vec![strong],
            UnlabeledObjective::Empty => Vec::new(),
        }
    }

    /// Rows that contribute to a thresholded loss, `None` for unmasked losses.
    pub fn confident_rows(&self) -> Option<Vec<usize>> {
        match self {
            UnlabeledObjective::Pseudo { targets, .. } | UnlabeledObjective::Fixmatch { targets, .. } => Some(
                targets
                    .iter_rows()
                    .enumerate()
                    .filter(|(_, r)| r.iter().any(|&v| v > 0.0))
                    .map(|(i, _)| i)
                    .collect(),
            ),
            _ => None,
        }
    }
}

/// `-(1/n) Σ_i Σ_c t_ic log p_ic` with rows of `targets` either one-hot or zero.
fn masked_ce(g: &mut Graph, probs: Var, targets: &Tensor) -> Result<Var> {
    let n = targets.rows().max(1);
    let t = g.constant(targets);
    let lp = g.log(probs);
    let prod = g.mul(lp, t)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// One-hot rows for predictions whose top probability reaches `threshold`,
/// zero rows otherwise.
pub fn confident_targets(probs: &Tensor, threshold: f64) -> Tensor {
    let c = probs.row_len();
    let mut t = Tensor::zeros(probs.shape().to_vec());
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let (arg, &top) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |best, (k, v)| if *v > *best.1 { (k, v) } else { best });
        if top >= threshold {
            t.values_mut()[i * c + arg] = 1.0;
        }
    }
    t
}

pub fn prepare_pi(xu: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> UnlabeledObjective {
    UnlabeledObjective::Pi {
        view1: policy.apply_batch(xu, rng),
        view2: policy.apply_batch(xu, rng),
    }
}

pub fn prepare_pseudo(model: &Classifier, xu: &Tensor, threshold: f64) -> Result<UnlabeledObjective> {
    let probs = model.predict_proba(xu)?;
    Ok(UnlabeledObjective::Pseudo {
        x: xu.clone(),
        targets: confident_targets(&probs, threshold),
    })
}

pub fn prepare_mean_teacher(
    teacher: &Classifier,
    xu: &Tensor,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<UnlabeledObjective> {
    let student_view = policy.apply_batch(xu, rng);
    let teacher_view = policy.apply_batch(xu, rng);
    Ok(UnlabeledObjective::MeanTeacher {
        student_view,
        teacher_probs: teacher.predict_proba(&teacher_view)?,
    })
}

/// Random unit direction per row.
pub fn random_unit_rows(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape.to_vec());
    for i in 0..t.rows() {
        let row = t.row_mut(i);
        loop {
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }
    t
}

/// One power-iteration step from the direction `d0` (unit rows):
/// `r_adv = ε·g/‖g‖` with `g = ∇_r KL(p(x) ‖ p(x + ξ·d0))`, per row. A row
/// whose `g` vanishes falls back to `d0`.
pub fn prepare_vat_with_direction(
    model: &Classifier,
    xu: &Tensor,
    d0: &Tensor,
    xi: f64,
    eps: f64,
) -> Result<UnlabeledObjective> {
    if d0.shape() != xu.shape() {
        return Err(Error::ShapeMismatch {
            op: "vat direction",
            lhs: xu.shape().to_vec(),
            rhs: d0.shape().to_vec(),
        });
    }
    let clean_probs = model.predict_proba(xu)?;
    let mut g = Graph::new();
    let params = model.bind_frozen(&mut g);
    let x = g.constant(xu);
    let mut r0 = d0.clone();
    r0.values_mut().iter_mut().for_each(|v| *v *= xi);
    let r = g.variable(&r0);
    let xr = g.add(x, r)?;
    let q = model.probs(&mut g, &params, xr)?;
    let p = g.constant(&clean_probs);
    let kl = g.kl_div(p, q)?;
    g.backward(kl)?;
    let grad = g.grad_or_zeros(r)?;
    let mut perturbed = xu.clone();
    let d = xu.row_len();
    for i in 0..xu.rows() {
        let gi = &grad[i * d..(i + 1) * d];
        let norm = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir: Vec<f64> = if norm > 0.0 && norm.is_finite() {
            gi.iter().map(|v| v / norm).collect()
        } else {
            d0.row(i).to_vec()
        };
        for (o, u) in perturbed.row_mut(i).iter_mut().zip(dir) {
            *o += eps * u;
        }
    }
    Ok(UnlabeledObjective::Vat {
        perturbed,
        clean_probs,
    })
}

pub fn prepare_vat(
    model: &Classifier,
    xu: &Tensor,
    xi: f64,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<UnlabeledObjective> {
    let d0 = random_unit_rows(xu.shape(), rng);
    prepare_vat_with_direction(model, xu, &d0, xi, eps)
}

/// Pseudo-label the weak view (sharpened by `temperature`, kept where the
/// top probability reaches `threshold`) and train the strong view on it.
pub fn prepare_fixmatch_views(
    model: &Classifier,
    weak: &Tensor,
    strong: Tensor,
    threshold: f64,
    temperature: f64,
) -> Result<UnlabeledObjective> {
    let mut probs = model.predict_proba(weak)?;
    let c = probs.row_len();
    for i in 0..probs.rows() {
        let s = sharpen(probs.row(i), temperature)?;
        probs.row_mut(i)[..c].copy_from_slice(&s);
    }
    Ok(UnlabeledObjective::Fixmatch {
        strong,
        targets: confident_targets(&probs, threshold),
    })
}

/// Inputs shared by every base method when preparing its objective.
pub struct UnlabeledContext<'a> {
    pub model: &'a Classifier,
    pub teacher: Option<&'a Classifier>,
    pub weak: &'a AugmentPolicy,
    pub strong: &'a AugmentPolicy,
    /// A weak view already drawn elsewhere in the step (FixMatch reuses it).
    pub weak_view: Option<&'a Tensor>,
}

/// Draw views and compute detached targets for `cfg.method` on batch `xu`.
pub fn prepare_unlabeled(
    cfg: &BaseMethodConfig,
    ctx: &UnlabeledContext<'_>,
    xu: &Tensor,
    rng: &mut impl Rng,
) -> Result<UnlabeledObjective> {
    if xu.rows() == 0 {
        return Ok(UnlabeledObjective::Empty);
    }
    match cfg.method {
        MethodId::Pi => Ok(prepare_pi(xu, ctx.weak, rng)),
        MethodId::Pseudo => prepare_pseudo(ctx.model, xu, cfg.pseudo_threshold),
        MethodId::MeanTeacher => {
            let teacher = ctx
                .teacher
                .ok_or_else(|| invalid("mean-teacher needs a teacher model"))?;
            prepare_mean_teacher(teacher, xu, ctx.weak, rng)
        }
        MethodId::Vat => prepare_vat(ctx.model, xu, cfg.vat_xi, cfg.vat_eps, rng),
        MethodId::Fixmatch => {
            let weak = match ctx.weak_view {
                Some(v) => v.clone(),
                None => ctx.weak.apply_batch(xu, rng),
            };
            let strong = ctx.strong.apply_batch(xu, rng);
            prepare_fixmatch_views(
                ctx.model,
                &weak,
                strong,
                cfg.fixmatch_threshold,
                cfg.fixmatch_temperature,
            )
        }
    }
}

/// Pi-model loss value on fresh views.
pub fn pi_loss(model: &Classifier, xu: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<f64> {
    prepare_pi(xu, policy, rng).value(model)
}

pub fn pseudo_label_loss(model: &Classifier, xu: &Tensor, threshold: f64) -> Result<f64> {
    prepare_pseudo(model, xu, threshold)?.value(model)
}

pub fn mean_teacher_loss(
    student: &Classifier,
    teacher: &Classifier,
    xu: &Tensor,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<f64> {
    prepare_mean_teacher(teacher, xu, policy, rng)?.value(student)
}

pub fn vat_loss(model: &Classifier, xu: &Tensor, xi: f64, eps: f64, rng: &mut impl Rng) -> Result<f64> {
    prepare_vat(model, xu, xi, eps, rng)?.value(model)
}

pub fn fixmatch_loss(
    model: &Classifier,
    xu: &Tensor,
    threshold: f64,
    temperature: f64,
    weak: &AugmentPolicy,
    strong: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<f64> {
    let w = weak.apply_batch(xu, rng);
    let s = strong.apply_batch(xu, rng);
    prepare_fixmatch_views(model, &w, s, threshold, temperature)?.value(model)
}
