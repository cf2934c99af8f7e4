//! Schedules, the gradient gate, optimizers and the Fix-A-Step training step.

use serde::{Deserialize, Serialize};

use crate::augment::{aug_and_soft_label, build_pool, mixmatch_aug, AugmentPolicy, AugmentedPair, FeatureKind};
use crate::autodiff::{Graph, Var};
use crate::data::LabeledBatch;
use crate::error::{invalid, Error, Result};
use crate::losses::{prepare_unlabeled, weighted_ce, BaseMethodConfig, ClassWeights, MethodId, UnlabeledContext, UnlabeledObjective};
use crate::model::Classifier;
use crate::rng::{stream, Stream};
use crate::tensor::{ParamVector, Tensor};

/// `base·cos(7πi / 16I)`; the rate at `i = I` is `base·cos(7π/16) ≈ 0.195·base`.
pub fn cosine_lr(base: f64, i: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (7.0 * std::f64::consts::PI * i as f64 / (16.0 * total as f64)).cos()
}

/// Linear warmup of the unlabeled-loss weight: `λ_max·min(1, i/warmup)`.
pub fn lambda_schedule(lambda_max: f64, i: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        return lambda_max;
    }
    lambda_max * (i as f64 / warmup as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Drop the unlabeled gradient when it opposes the labeled gradient.
    #[default]
    Drop,
    /// Remove only the component of the unlabeled gradient along the
    /// labeled gradient (A-GEM style).
    Project,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub direction: ParamVector,
    pub dot: f64,
    pub used_unlabeled: bool,
    pub projected: bool,
}

/// Combine labeled and unlabeled gradients. A zero dot product counts as
/// agreement.
pub fn gate(gl: &ParamVector, gu: &ParamVector, mode: GateMode) -> Result<GateOutcome> {
    let dot = gl.dot(gu)?;
    if !dot.is_finite() {
        return Err(Error::NonFinite("gradient dot product".into()));
    }
    if dot >= 0.0 {
        return Ok(GateOutcome {
            direction: gl.add(gu)?,
            dot,
            used_unlabeled: true,
            projected: false,
        });
    }
    Ok(match mode {
        GateMode::Drop => GateOutcome {
            direction: gl.clone(),
            dot,
            used_unlabeled: false,
            projected: false,
        },
        GateMode::Project => {
            let gu_proj = gu.axpy(-dot / gl.norm_sq(), gl)?;
            GateOutcome {
                direction: gl.add(&gu_proj)?,
                dot,
                used_unlabeled: true,
                projected: true,
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    Sgd { momentum: f64, nesterov: bool },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd_nesterov() -> Self {
        OptimizerConfig::Sgd {
            momentum: 0.9,
            nesterov: true,
        }
    }

    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam()
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Descend along `d` in place.
    pub fn step(&mut self, params: &mut ParamVector, d: &ParamVector, lr: f64) -> Result<()> {
        if !params.same_layout(d) || d.len() != self.m.len() {
            return Err(Error::LayoutMismatch);
        }
        self.t += 1;
        let p = params.entries_mut();
        match self.config {
            OptimizerConfig::Sgd { momentum, nesterov } => {
                for (k, &g) in d.entries().iter().enumerate() {
                    if momentum == 0.0 {
                        p[k] -= lr * g;
                        continue;
                    }
                    self.m[k] = momentum * self.m[k] + g;
                    let u = if nesterov { g + momentum * self.m[k] } else { self.m[k] };
                    p[k] -= lr * u;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (k, &g) in d.entries().iter().enumerate() {
                    self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                    self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                    let mh = self.m[k] / c1;
                    let vh = self.v[k] / c2;
                    p[k] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerConfig,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lambda_max: f64,
    pub warmup: u64,
    /// MixUp Beta shape.
    pub alpha: f64,
    /// Sharpening temperature for soft labels.
    pub tau: f64,
    /// MixMatch-style labeled transformation with unlabeled soft labels.
    pub use_aug: bool,
    /// Gradient gate on the unlabeled term.
    pub use_gate: bool,
    pub gate_mode: GateMode,
    /// `None` trains on the labeled loss only.
    pub base: Option<BaseMethodConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 3e-3,
            schedule: LrSchedule::Constant,
            optimizer: OptimizerConfig::adam(),
            labeled_batch: 64,
            unlabeled_batch: 64,
            lambda_max: 1.0,
            warmup: 0,
            alpha: 0.5,
            tau: 0.5,
            use_aug: true,
            use_gate: true,
            gate_mode: GateMode::Drop,
            base: Some(BaseMethodConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.labeled_batch == 0 {
            return Err(invalid("labeled batch size must be positive"));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(invalid("lambda_max must be finite and non-negative"));
        }
        if !(self.alpha > 0.0) {
            return Err(invalid("alpha must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(invalid("tau must be positive"));
        }
        if let Some(b) = &self.base {
            b.validate()?;
        }
        Ok(())
    }
}

/// Everything the step decided, for logging and analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecision {
    pub iteration: u64,
    pub lr: f64,
    pub lambda: f64,
    pub labeled_loss: f64,
    /// Unweighted unlabeled loss; `None` when it was not evaluated.
    pub unlabeled_loss: Option<f64>,
    /// `⟨gL, gU⟩`; `None` when there was no unlabeled gradient.
    pub dot_product: Option<f64>,
    pub used_unlabeled: bool,
    pub projected: bool,
    /// `‖d‖`.
    pub step_norm: f64,
    /// `⟨gL, d⟩`.
    pub labeled_alignment: f64,
    /// `‖gL‖²`.
    pub labeled_grad_sq: f64,
}

/// Both gradients of one step, before gating.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub labeled_loss: f64,
    pub g_labeled: ParamVector,
    pub unlabeled_loss: Option<f64>,
    /// `∇(λ·ℓU)`, `None` when there was no unlabeled term.
    pub g_unlabeled: Option<ParamVector>,
    pub lambda: f64,
}

/// Owns the student (and, for Mean Teacher, the teacher) and runs the step.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: Classifier,
    teacher: Option<Classifier>,
    optimizer: Optimizer,
    weights: ClassWeights,
    weak: AugmentPolicy,
    strong: AugmentPolicy,
    seed: u64,
    iteration: u64,
}

impl Trainer {
    pub fn new(model: Classifier, config: TrainConfig, weights: ClassWeights, kind: FeatureKind, seed: u64) -> Result<Self> {
        config.validate()?;
        if weights.len() != model.num_classes() {
            return Err(invalid(format!(
                "{} class weights for a {}-class model",
                weights.len(),
                model.num_classes()
            )));
        }
        let teacher = match &config.base {
            Some(b) if b.method == MethodId::MeanTeacher => Some(model.clone()),
            _ => None,
        };
        let optimizer = Optimizer::new(config.optimizer, model.param_count());
        Ok(Self {
            config,
            model,
            teacher,
            optimizer,
            weights,
            weak: AugmentPolicy::weak(kind),
            strong: AugmentPolicy::strong(kind),
            seed,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn teacher(&self) -> Option<&Classifier> {
        self.teacher.as_ref()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn into_model(self) -> Classifier {
        self.model
    }

    pub fn lr_at(&self, i: u64) -> f64 {
        match self.config.schedule {
            LrSchedule::Constant => self.config.lr,
            LrSchedule::Cosine => cosine_lr(self.config.lr, i, self.config.iterations),
        }
    }

    pub fn lambda_at(&self, i: u64) -> f64 {
        lambda_schedule(self.config.lambda_max, i, self.config.warmup)
    }

    /// The labeled batch actually trained on at the current iteration:
    /// weak augmentation, then (with `use_aug`) MixUp against a pool of the
    /// labeled batch and two soft-labeled unlabeled views. Also returns those
    /// views.
    pub fn transform_labeled(&self, labeled: &LabeledBatch, xu: &Tensor) -> Result<(LabeledBatch, Option<AugmentedPair>)> {
        let mut rng = stream(self.seed, self.iteration, Stream::LabeledAug);
        let base = LabeledBatch {
            x: self.weak.apply_batch(&labeled.x, &mut rng),
            y: labeled.y.clone(),
        };
        if !self.config.use_aug {
            return Ok((base, None));
        }
        if xu.rows() == 0 {
            let mixed = mixmatch_aug(&base, &base, self.config.alpha, &mut rng)?;
            return Ok((mixed, None));
        }
        let pair = aug_and_soft_label(&self.model, xu, self.config.tau, &self.weak, &mut rng)?;
        let pool = build_pool(&base, &pair)?;
        let mixed = mixmatch_aug(&base, &pool, self.config.alpha, &mut rng)?;
        Ok((mixed, Some(pair)))
    }

    /// Unlabeled objective at the current iteration, `None` without a base method.
    pub fn unlabeled_objective(&self, xu: &Tensor, pair: Option<&AugmentedPair>) -> Result<Option<UnlabeledObjective>> {
        let Some(base) = &self.config.base else {
            return Ok(None);
        };
        if xu.rows() == 0 {
            return Ok(None);
        }
        let mut rng = stream(self.seed, self.iteration, Stream::UnlabeledLoss);
        let ctx = UnlabeledContext {
            model: &self.model,
            teacher: self.teacher.as_ref(),
            weak: &self.weak,
            strong: &self.strong,
            weak_view: pair.map(|p| &p.x1),
        };
        prepare_unlabeled(base, &ctx, xu, &mut rng).map(Some)
    }

    /// `ℓL = weighted CE + (wd/2)‖w‖²` on bound parameters.
    pub fn build_labeled_loss(&self, g: &mut Graph, params: &[Var], batch: &LabeledBatch) -> Result<Var> {
        let x = g.constant(&batch.x);
        let p = self.model.probs(g, params, x)?;
        let ce = weighted_ce(g, p, &batch.y, &self.weights)?;
        match self.model.weight_decay_loss(g, params)? {
            Some(wd) => g.add(ce, wd),
            None => Ok(ce),
        }
    }

    /// `λ·ℓU` on bound parameters; also returns the unweighted loss node.
    pub fn build_unlabeled_loss(
        &self,
        g: &mut Graph,
        params: &[Var],
        objective: &UnlabeledObjective,
        lambda: f64,
    ) -> Result<Option<(Var, Var)>> {
        Ok(objective
            .build(g, &self.model, params)?
            .map(|l| (g.scale(l, lambda), l)))
    }

    /// Labeled and unlabeled gradients at the current parameters and iteration.
    pub fn gradients(&self, labeled: &LabeledBatch, xu: &Tensor) -> Result<StepGradients> {
        let i = self.iteration;
        let lambda = self.lambda_at(i);
        let (batch, pair) = self.transform_labeled(labeled, xu)?;

        let mut g = Graph::new();
        let p = self.model.bind(&mut g);
        let ll = self.build_labeled_loss(&mut g, &p, &batch)?;
        g.backward(ll)?;
        let labeled_loss = g.scalar(ll);
        let g_labeled = collect_grads(&g, &p, &self.model)?;
        check_finite("labeled loss", labeled_loss, &g_labeled)?;

        let mut unlabeled_loss = None;
        let mut g_unlabeled = None;
        if let Some(obj) = self.unlabeled_objective(xu, pair.as_ref())? {
            let mut g = Graph::new();
            let p = self.model.bind(&mut g);
            if let Some((scaled, raw)) = self.build_unlabeled_loss(&mut g, &p, &obj, lambda)? {
                g.backward(scaled)?;
                let v = g.scalar(raw);
                let gu = collect_grads(&g, &p, &self.model)?;
                check_finite("unlabeled loss", v, &gu)?;
                unlabeled_loss = Some(v);
                g_unlabeled = Some(gu);
            }
        }
        Ok(StepGradients {
            labeled_loss,
            g_labeled,
            unlabeled_loss,
            g_unlabeled,
            lambda,
        })
    }

    /// Install updated parameters and advance to the next iteration
    /// (updating the Mean-Teacher EMA).
    pub fn commit(&mut self, params: &ParamVector) -> Result<()> {
        self.model.load_flat(params)?;
        if let (Some(t), Some(b)) = (self.teacher.as_mut(), &self.config.base) {
            t.ema_update(&self.model, b.ema_decay)?;
        }
        self.iteration += 1;
        Ok(())
    }

    /// One training step on a labeled batch and an unlabeled batch (which
    /// may be empty). On error the parameters are left untouched.
    pub fn step(&mut self, labeled: &LabeledBatch, xu: &Tensor) -> Result<StepDecision> {
        let i = self.iteration;
        let grads = self.gradients(labeled, xu)?;
        let gl = &grads.g_labeled;
        let (direction, dot, used, projected) = match &grads.g_unlabeled {
            None => (gl.clone(), None, false, false),
            Some(gu) if self.config.use_gate => {
                let o = gate(gl, gu, self.config.gate_mode)?;
                (o.direction, Some(o.dot), o.used_unlabeled, o.projected)
            }
            Some(gu) => (gl.add(gu)?, Some(gl.dot(gu)?), true, false),
        };
        if !direction.is_finite() {
            return Err(Error::NonFinite(format!("update direction at iteration {i}")));
        }
        let lr = self.lr_at(i);
        let mut params = self.model.flat_params();
        self.optimizer.step(&mut params, &direction, lr)?;
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after iteration {i}")));
        }
        self.commit(&params)?;
        Ok(StepDecision {
            iteration: i,
            lr,
            lambda: grads.lambda,
            labeled_loss: grads.labeled_loss,
            unlabeled_loss: grads.unlabeled_loss,
            dot_product: dot,
            used_unlabeled: used,
            projected,
            step_norm: direction.norm_sq().sqrt(),
            labeled_alignment: gl.dot(&direction)?,
            labeled_grad_sq: gl.norm_sq(),
        })
    }
}

fn collect_grads(g: &Graph, params: &[Var], model: &Classifier) -> Result<ParamVector> {
    let mut flat = Vec::with_capacity(model.param_count());
    for &v in params {
        flat.extend(g.grad_or_zeros(v)?);
    }
    ParamVector::new(model.layout().clone(), flat)
}

fn check_finite(what: &str, loss: f64, grad: &ParamVector) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{what} = {loss}")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient of {what}")));
    }
    Ok(())
}
