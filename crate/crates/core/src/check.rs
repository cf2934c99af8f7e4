//! The invariant and gradient property suite behind `fixastep check`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{sample_mix_coeff, sharpen, AugmentPolicy, FeatureKind};
use crate::autodiff::{finite_diff_check, Graph, Var};
use crate::data::{build_splits, BatchCycler, DatasetSpec, LabeledBatch, MismatchSpec};
use crate::error::Result;
use crate::losses::{
    prepare_fixmatch_views, prepare_mean_teacher, prepare_pi, prepare_pseudo, prepare_vat, weighted_ce, BaseMethodConfig,
    ClassWeights, MethodId, UnlabeledObjective,
};
use crate::model::{Classifier, ClassifierConfig};
use crate::optim::{cosine_lr, Optimizer, StepDecision, TrainConfig, Trainer};
use crate::rng::Stream;
use crate::tensor::{ParamVector, Tensor};

/// Relative tolerance for analytic vs finite-difference gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Smallest distance of any first-layer pre-activation from the ReLU kink
/// over the rows of `inputs`. Finite differences are only meaningful when
/// the perturbation cannot cross a kink.
pub fn relu_margin(model: &Classifier, inputs: &[&Tensor]) -> f64 {
    let w = &model.params()[0].tensor;
    let b = &model.params()[1].tensor;
    let width = b.len();
    let mut margin = f64::INFINITY;
    for x in inputs {
        for row in x.iter_rows() {
            for j in 0..width {
                let pre = b.values()[j] + row.iter().enumerate().map(|(k, v)| v * w.values()[k * width + j]).sum::<f64>();
                margin = margin.min(pre.abs());
            }
        }
    }
    margin
}

/// Required [`relu_margin`] before a sample point is used.
pub const KINK_MARGIN: f64 = 1e-3;

struct GradientCase {
    model: Classifier,
    labeled: LabeledBatch,
    objectives: Vec<UnlabeledObjective>,
}

fn gradient_case(seed: u64, attempt: u64) -> Result<GradientCase> {
    let kind = FeatureKind::Vector { dim: 4 };
    let weak = AugmentPolicy::weak(kind);
    let strong = AugmentPolicy::strong(kind);
    let model = Classifier::init(ClassifierConfig::mlp(4, vec![8], 3).with_weight_decay(1e-3), seed)?;
    let teacher = Classifier::init(ClassifierConfig::mlp(4, vec![8], 3), seed + 1_000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(seed, &[attempt]));
    let sample = |rng: &mut ChaCha8Rng, n: usize| {
        Tensor::new(vec![n, 4], (0..n * 4).map(|_| rand::Rng::random_range(rng, -2.0..2.0)).collect())
    };
    let xl = sample(&mut rng, 6)?;
    let xu = sample(&mut rng, 6)?;
    let mut soft = Vec::new();
    for _ in 0..6 {
        let raw: Vec<f64> = (0..3).map(|_| rand::Rng::random_range(&mut rng, 0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        soft.extend(raw.iter().map(|v| v / s));
    }
    let labeled = LabeledBatch {
        x: xl,
        y: Tensor::new(vec![6, 3], soft)?,
    };
    let weak_view = weak.apply_batch(&xu, &mut rng);
    let objectives = vec![
        prepare_pi(&xu, &weak, &mut rng),
        prepare_pseudo(&model, &xu, 0.0)?,
        prepare_mean_teacher(&teacher, &xu, &weak, &mut rng)?,
        prepare_vat(&model, &xu, 1e-6, 1.0, &mut rng)?,
        prepare_fixmatch_views(&model, &weak_view, strong.apply_batch(&xu, &mut rng), 0.0, 1.0)?,
    ];
    Ok(GradientCase {
        model,
        labeled,
        objectives,
    })
}

/// Worst relative gradient error per loss over `seeds` seeds on a 2-layer
/// MLP, in the order weighted CE, Pi, pseudo-label, Mean Teacher, VAT,
/// FixMatch. Sample points within [`KINK_MARGIN`] of a ReLU kink are
/// redrawn.
pub fn gradient_errors(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    let names = ["weighted-ce", "pi", "pseudo", "mean-teacher", "vat", "fixmatch"];
    let mut worst = vec![0.0f64; names.len()];
    for seed in 0..seeds {
        let mut attempt = 0;
        let case = loop {
            let c = gradient_case(seed, attempt)?;
            let mut inputs = vec![&c.labeled.x];
            inputs.extend(c.objectives.iter().flat_map(|o| o.inputs()));
            if relu_margin(&c.model, &inputs) > KINK_MARGIN {
                break c;
            }
            attempt += 1;
        };
        let model = &case.model;
        let weights = ClassWeights::from_counts(&[5, 9, 14])?;
        let tensors: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
        let ce = |g: &mut Graph, p: &[Var]| -> Result<Var> {
            let x = g.constant(&case.labeled.x);
            let probs = model.probs(g, p, x)?;
            let l = weighted_ce(g, probs, &case.labeled.y, &weights)?;
            match model.weight_decay_loss(g, p)? {
                Some(w) => g.add(l, w),
                None => Ok(l),
            }
        };
        worst[0] = worst[0].max(finite_diff_check(ce, &tensors, FD_EPS)?);
        for (k, obj) in case.objectives.iter().enumerate() {
            let f = |g: &mut Graph, p: &[Var]| -> Result<Var> {
                Ok(obj.build(g, model, p)?.expect("non-empty batch"))
            };
            worst[k + 1] = worst[k + 1].max(finite_diff_check(f, &tensors, FD_EPS)?);
        }
    }
    Ok(names.into_iter().zip(worst).collect())
}

/// Blob data and a trainer for short desk runs.
pub struct DeskRun {
    pub trainer: Trainer,
    labeled: crate::data::LabeledSplit,
    unlabeled: Tensor,
    lcycle: BatchCycler,
    ucycle: BatchCycler,
    num_classes: usize,
}

impl DeskRun {
    pub fn new(train: TrainConfig, zeta: u32, seed: u64) -> Result<Self> {
        let spec = DatasetSpec::blobs_default();
        let bundle = build_splits(&spec, &MismatchSpec::new(zeta, 4)?, seed)?;
        let c = bundle.num_classes;
        let model = Classifier::init(
            crate::harness::ModelSpec::default().classifier(&spec.kind, c),
            seed,
        )?;
        let weights = ClassWeights::from_counts(&bundle.labeled.class_counts(c))?;
        let trainer = Trainer::new(model, train, weights, bundle.kind, seed)?;
        let unlabeled = bundle.unlabeled.features().clone();
        Ok(Self {
            trainer,
            lcycle: BatchCycler::new(bundle.labeled.len(), seed, Stream::LabeledOrder),
            ucycle: BatchCycler::new(unlabeled.rows(), seed, Stream::UnlabeledOrder),
            labeled: bundle.labeled,
            unlabeled,
            num_classes: c,
        })
    }

    /// The next (labeled, unlabeled) minibatch pair.
    pub fn next_batches(&mut self) -> Result<(LabeledBatch, Tensor)> {
        let cfg = self.trainer.config();
        let (bl, bu) = (cfg.labeled_batch, cfg.unlabeled_batch);
        let lb = self.labeled.batch(&self.lcycle.next_batch(bl), self.num_classes)?;
        let xu = self.unlabeled.select_rows(&self.ucycle.next_batch(bu));
        Ok((lb, xu))
    }

    pub fn step(&mut self) -> Result<StepDecision> {
        let (lb, xu) = self.next_batches()?;
        self.trainer.step(&lb, &xu)
    }
}

/// Violations of the gate invariants over a run, as messages.
pub fn gate_violations(decisions: &[StepDecision], tol: f64) -> Vec<String> {
    let mut out = Vec::new();
    for d in decisions {
        let Some(dot) = d.dot_product else {
            out.push(format!("step {}: no unlabeled gradient recorded", d.iteration));
            continue;
        };
        if d.labeled_alignment < d.labeled_grad_sq - tol {
            out.push(format!(
                "step {}: <gL,d> = {} < |gL|^2 = {}",
                d.iteration, d.labeled_alignment, d.labeled_grad_sq
            ));
        }
        if d.used_unlabeled != (dot >= 0.0) {
            out.push(format!("step {}: used_unlabeled = {} with dot {dot}", d.iteration, d.used_unlabeled));
        }
    }
    out
}

/// Direction of a whole step built as one graph: the labeled and unlabeled
/// losses are attached to separate copies of the parameters, summed, and
/// differentiated once; the two gradients are then added. With gate and
/// augmentation disabled this is the plain base-method update.
pub fn joint_graph_direction(trainer: &Trainer, labeled: &LabeledBatch, xu: &Tensor) -> Result<ParamVector> {
    let lambda = trainer.lambda_at(trainer.iteration());
    let (batch, pair) = trainer.transform_labeled(labeled, xu)?;
    let objective = trainer.unlabeled_objective(xu, pair.as_ref())?;
    let model = trainer.model();
    let mut g = Graph::new();
    let pl = model.bind(&mut g);
    let pu = model.bind(&mut g);
    let ll = trainer.build_labeled_loss(&mut g, &pl, &batch)?;
    let total = match &objective {
        Some(o) => match trainer.build_unlabeled_loss(&mut g, &pu, o, lambda)? {
            Some((scaled, _)) => g.add(ll, scaled)?,
            None => ll,
        },
        None => ll,
    };
    g.backward(total)?;
    let mut a = Vec::with_capacity(model.param_count());
    let mut b = Vec::with_capacity(model.param_count());
    for (&l, &u) in pl.iter().zip(&pu) {
        a.extend(g.grad_or_zeros(l)?);
        b.extend(g.grad_or_zeros(u)?);
    }
    let ga = ParamVector::new(model.layout().clone(), a)?;
    let gb = ParamVector::new(model.layout().clone(), b)?;
    ga.add(&gb)
}

fn bits(v: &ParamVector) -> Vec<u64> {
    v.entries().iter().map(|x| x.to_bits()).collect()
}

/// Off-the-shelf steps compared bitwise against [`joint_graph_direction`]
/// updates for `steps` steps; returns the first mismatching step.
pub fn off_the_shelf_identity(method: MethodId, steps: usize, seed: u64) -> Result<Option<usize>> {
    let train = TrainConfig {
        use_aug: false,
        use_gate: false,
        base: Some(BaseMethodConfig::for_method(method)),
        lambda_max: crate::harness::default_lambda_max(method),
        ..TrainConfig::default()
    };
    let mut run = DeskRun::new(train, 50, seed)?;
    let mut reference = run.trainer.clone();
    let mut opt = Optimizer::new(reference.config().optimizer, reference.model().param_count());
    for k in 0..steps {
        let (lb, xu) = run.next_batches()?;
        let d = joint_graph_direction(&reference, &lb, &xu)?;
        let mut params = reference.model().flat_params();
        opt.step(&mut params, &d, reference.lr_at(reference.iteration()))?;
        reference.commit(&params)?;
        run.trainer.step(&lb, &xu)?;
        if bits(&run.trainer.model().flat_params()) != bits(&reference.model().flat_params()) {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Fix-A-Step with `λ_max = 0` against supervised training on the same
/// augmented pipeline; returns the first mismatching step.
pub fn zero_lambda_identity(method: MethodId, steps: usize, seed: u64) -> Result<Option<usize>> {
    let fix = TrainConfig {
        lambda_max: 0.0,
        base: Some(BaseMethodConfig::for_method(method)),
        ..TrainConfig::default()
    };
    let sup = TrainConfig {
        base: None,
        ..fix.clone()
    };
    let mut a = DeskRun::new(fix, 50, seed)?;
    let mut b = DeskRun::new(sup, 50, seed)?;
    for k in 0..steps {
        a.step()?;
        b.step()?;
        if bits(&a.trainer.model().flat_params()) != bits(&b.trainer.model().flat_params()) {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Smallest folded MixUp weight over `draws` draws at shape `alpha`.
pub fn min_mix_coefficient(alpha: f64, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lo = f64::INFINITY;
    for _ in 0..draws {
        lo = lo.min(sample_mix_coeff(alpha, &mut rng)?.beta());
    }
    Ok(lo)
}

/// Run the whole suite. `quick` shortens the long runs.
pub fn run_all(quick: bool) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let seeds = if quick { 5 } else { 20 };
    for (name, err) in gradient_errors(seeds)? {
        out.push(CheckOutcome::new(
            &format!("gradient {name}"),
            err < GRAD_TOL,
            format!("max relative error {err:.2e} over {seeds} seeds"),
        ));
    }

    let steps = if quick { 200 } else { 2000 };
    let train = TrainConfig {
        lambda_max: crate::harness::default_lambda_max(MethodId::Pi),
        base: Some(BaseMethodConfig::for_method(MethodId::Pi)),
        ..TrainConfig::default()
    };
    let mut run = DeskRun::new(train, 100, 0)?;
    let decisions: Vec<StepDecision> = (0..steps).map(|_| run.step()).collect::<Result<_>>()?;
    let bad = gate_violations(&decisions, 1e-9);
    let kept = decisions.iter().filter(|d| d.used_unlabeled).count();
    out.push(CheckOutcome::new(
        "gate safety",
        bad.is_empty(),
        match bad.first() {
            Some(b) => format!("{} violations, first: {b}", bad.len()),
            None => format!("{steps} steps, unlabeled gradient kept on {kept}"),
        },
    ));

    let id_steps = if quick { 5 } else { 20 };
    for m in MethodId::ALL {
        let a = zero_lambda_identity(m, id_steps, 1)?;
        out.push(CheckOutcome::new(
            &format!("zero-lambda identity {m}"),
            a.is_none(),
            a.map_or(format!("{id_steps} steps bitwise equal"), |k| format!("diverged at step {k}")),
        ));
        let b = off_the_shelf_identity(m, id_steps, 2)?;
        out.push(CheckOutcome::new(
            &format!("off-the-shelf identity {m}"),
            b.is_none(),
            b.map_or(format!("{id_steps} steps bitwise equal"), |k| format!("diverged at step {k}")),
        ));
    }

    let p = [0.7, 0.2, 0.1];
    out.push(CheckOutcome::new("sharpen tau=1", sharpen(&p, 1.0)? == p, "returns its input"));
    let draws = if quick { 100_000 } else { 1_000_000 };
    for alpha in [0.5, 0.75] {
        let lo = min_mix_coefficient(alpha, draws, 3)?;
        out.push(CheckOutcome::new(
            &format!("mix coefficient alpha={alpha}"),
            lo >= 0.5,
            format!("min over {draws} draws = {lo}"),
        ));
    }

    let w = ClassWeights::from_counts(&[10, 30])?;
    out.push(CheckOutcome::new(
        "class weights [10,30]",
        w.as_slice() == [0.75, 0.25],
        format!("{:?}", w.as_slice()),
    ));
    let lr = cosine_lr(0.03, 500, 500);
    let want = 0.03 * (7.0 * std::f64::consts::PI / 16.0).cos();
    out.push(CheckOutcome::new(
        "cosine lr endpoint",
        (lr - want).abs() < 1e-12,
        format!("{lr} vs {want}"),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let out = run_all(true).unwrap();
        for o in &out {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
        assert!(out.len() >= 20);
    }

    #[test]
    fn gate_violations_flag_bad_decisions() {
        let d = StepDecision {
            iteration: 0,
            lr: 0.1,
            lambda: 1.0,
            labeled_loss: 1.0,
            unlabeled_loss: Some(1.0),
            dot_product: Some(-1.0),
            used_unlabeled: true,
            projected: false,
            step_norm: 1.0,
            labeled_alignment: 0.5,
            labeled_grad_sq: 1.0,
        };
        assert_eq!(gate_violations(&[d], 1e-9).len(), 2);
    }
}
