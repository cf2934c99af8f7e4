//! Acceptance gate. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-4 and 7 are exact and fail the run when violated. Criteria 5
//! and 6 compare seed-averaged accuracies on a small synthetic problem; they
//! are always reported, and fail the run only with
//! `FIXASTEP_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use fixastep::augment::{sample_mix_coeff, sharpen, AugmentPolicy};
use fixastep::autodiff::{Graph, Var};
use fixastep::check::{gradient_errors, DeskRun, GRAD_TOL};
use fixastep::data::{build_splits, DatasetSpec, LabeledBatch, MismatchSpec};
use fixastep::harness::{default_lambda_max, run_experiment, ExperimentConfig, Mode};
use fixastep::losses::{prepare_unlabeled, weighted_ce, BaseMethodConfig, ClassWeights, MethodId, UnlabeledContext};
use fixastep::model::Classifier;
use fixastep::optim::{cosine_lr, OptimizerConfig, TrainConfig};
use fixastep::rng::{stream, Stream};
use fixastep::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Line {
    id: u32,
    name: &'static str,
    passed: bool,
    enforced: bool,
    detail: String,
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn criterion_gradients() -> Line {
    let t = Instant::now();
    let errs = gradient_errors(20).expect("gradient suite");
    let secs = t.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Line {
        id: 1,
        name: "gradient suite, 20 seeds",
        passed: worst < GRAD_TOL && secs < 60.0,
        enforced: true,
        detail: format!("{detail}; {secs:.1}s"),
    }
}

/// The gate is recomputed here from the raw gradients of each step and
/// checked against what the trainer reports.
fn criterion_gate() -> Line {
    let train = TrainConfig {
        lambda_max: default_lambda_max(MethodId::Pi),
        base: Some(BaseMethodConfig::for_method(MethodId::Pi)),
        iterations: 2000,
        ..TrainConfig::default()
    };
    let mut run = DeskRun::new(train, 100, 0).unwrap();
    let mut bad = Vec::new();
    let mut kept = 0;
    for _ in 0..2000 {
        let (lb, xu) = run.next_batches().unwrap();
        let g = run.trainer.gradients(&lb, &xu).unwrap();
        let gl = g.g_labeled.entries();
        let gu = g.g_unlabeled.as_ref().expect("unlabeled gradient").entries();
        let dot: f64 = gl.iter().zip(gu).map(|(a, b)| a * b).sum();
        let add = dot >= 0.0;
        let d: Vec<f64> = gl.iter().zip(gu).map(|(a, b)| if add { a + b } else { *a }).collect();
        let align: f64 = gl.iter().zip(&d).map(|(a, b)| a * b).sum();
        let sq: f64 = gl.iter().map(|a| a * a).sum();
        let dec = run.trainer.step(&lb, &xu).unwrap();
        if align < sq - 1e-9 || dec.labeled_alignment < dec.labeled_grad_sq - 1e-9 {
            bad.push(format!("step {}: alignment below |gL|^2", dec.iteration));
        }
        if dec.used_unlabeled != add {
            bad.push(format!("step {}: used={} but dot={dot}", dec.iteration, dec.used_unlabeled));
        }
        kept += usize::from(dec.used_unlabeled);
    }
    Line {
        id: 2,
        name: "gate safety, 2000 steps",
        passed: bad.is_empty(),
        enforced: true,
        detail: match bad.first() {
            Some(b) => format!("{} violations, first {b}", bad.len()),
            None => format!("0 violations; unlabeled gradient kept on {kept} steps"),
        },
    }
}

/// Plain base-method SGD written out directly: both losses on fresh graphs,
/// gradients summed, `p - lr·(gL + gU)`.
struct ReferenceSgd {
    model: Classifier,
    teacher: Option<Classifier>,
    base: BaseMethodConfig,
    weights: ClassWeights,
    lambda: f64,
    lr: f64,
    seed: u64,
    weak: AugmentPolicy,
    strong: AugmentPolicy,
}

impl ReferenceSgd {
    fn grads(&self, f: impl FnOnce(&mut Graph, &[Var]) -> Option<Var>) -> Vec<f64> {
        let mut g = Graph::new();
        let p = self.model.bind(&mut g);
        let mut out = Vec::new();
        if let Some(loss) = f(&mut g, &p) {
            g.backward(loss).unwrap();
            for &v in &p {
                out.extend(g.grad_or_zeros(v).unwrap());
            }
        }
        out
    }

    fn step(&mut self, i: u64, labeled: &LabeledBatch, xu: &Tensor) {
        let mut rng = stream(self.seed, i, Stream::LabeledAug);
        let x = self.weak.apply_batch(&labeled.x, &mut rng);
        let gl = self.grads(|g, p| {
            let xv = g.constant(&x);
            let probs = self.model.probs(g, p, xv).unwrap();
            let ce = weighted_ce(g, probs, &labeled.y, &self.weights).unwrap();
            Some(match self.model.weight_decay_loss(g, p).unwrap() {
                Some(wd) => g.add(ce, wd).unwrap(),
                None => ce,
            })
        });
        let ctx = UnlabeledContext {
            model: &self.model,
            teacher: self.teacher.as_ref(),
            weak: &self.weak,
            strong: &self.strong,
            weak_view: None,
        };
        let mut rng = stream(self.seed, i, Stream::UnlabeledLoss);
        let obj = prepare_unlabeled(&self.base, &ctx, xu, &mut rng).unwrap();
        let gu = self.grads(|g, p| obj.build(g, &self.model, p).unwrap().map(|l| g.scale(l, self.lambda)));
        let mut flat = self.model.flat_params();
        for (k, w) in flat.entries_mut().iter_mut().enumerate() {
            let d = if gu.is_empty() { gl[k] } else { gl[k] + gu[k] };
            *w -= self.lr * d;
        }
        self.model.load_flat(&flat).unwrap();
        if let Some(t) = self.teacher.as_mut() {
            t.ema_update(&self.model, self.base.ema_decay).unwrap();
        }
    }
}

fn off_the_shelf_matches_reference(method: MethodId, steps: u64, seed: u64) -> Option<u64> {
    let zeta = 50;
    let lr = 0.05;
    let base = BaseMethodConfig::for_method(method);
    let train = TrainConfig {
        use_aug: false,
        use_gate: false,
        lambda_max: default_lambda_max(method),
        lr,
        optimizer: OptimizerConfig::Sgd {
            momentum: 0.0,
            nesterov: false,
        },
        base: Some(base.clone()),
        ..TrainConfig::default()
    };
    let mut run = DeskRun::new(train, zeta, seed).unwrap();
    let spec = DatasetSpec::blobs_default();
    let bundle = build_splits(&spec, &MismatchSpec::new(zeta, 4).unwrap(), seed).unwrap();
    let weights = ClassWeights::from_counts(&bundle.labeled.class_counts(bundle.num_classes)).unwrap();
    let model = run.trainer.model().clone();
    let mut reference = ReferenceSgd {
        teacher: (method == MethodId::MeanTeacher).then(|| model.clone()),
        model,
        base,
        weights,
        lambda: default_lambda_max(method),
        lr,
        seed,
        weak: AugmentPolicy::weak(spec.kind.feature_kind()),
        strong: AugmentPolicy::strong(spec.kind.feature_kind()),
    };
    for i in 0..steps {
        let (lb, xu) = run.next_batches().unwrap();
        reference.step(i, &lb, &xu);
        run.trainer.step(&lb, &xu).unwrap();
        if bits(run.trainer.model().flat_params().entries()) != bits(reference.model.flat_params().entries()) {
            return Some(i);
        }
    }
    None
}

fn zero_lambda_matches_supervised(method: MethodId, steps: u64, seed: u64) -> Option<u64> {
    let fix = TrainConfig {
        lambda_max: 0.0,
        base: Some(BaseMethodConfig::for_method(method)),
        ..TrainConfig::default()
    };
    let sup = TrainConfig { base: None, ..fix.clone() };
    let mut a = DeskRun::new(fix, 50, seed).unwrap();
    let mut b = DeskRun::new(sup, 50, seed).unwrap();
    for i in 0..steps {
        let da = a.step().unwrap();
        b.step().unwrap();
        assert_eq!(da.dot_product, Some(0.0), "zero weight gives a zero unlabeled gradient");
        if bits(a.trainer.model().flat_params().entries()) != bits(b.trainer.model().flat_params().entries()) {
            return Some(i);
        }
    }
    None
}

fn criterion_identities() -> Line {
    let t = Instant::now();
    let mut fails = Vec::new();
    for m in MethodId::ALL {
        if let Some(k) = zero_lambda_matches_supervised(m, 25, 1) {
            fails.push(format!("(a) {m} diverged at step {k}"));
        }
        if let Some(k) = off_the_shelf_matches_reference(m, 25, 2) {
            fails.push(format!("(b) {m} diverged at step {k}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(2..12);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-12).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        if bits(&sharpen(&p, 1.0).unwrap()) != bits(&p) {
            fails.push(format!("(c) sharpen changed {p:?}"));
            break;
        }
    }
    let mut mins = Vec::new();
    for (alpha, seed) in [(0.5, 3), (0.75, 4)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lo = f64::INFINITY;
        for _ in 0..1_000_000 {
            lo = lo.min(sample_mix_coeff(alpha, &mut rng).unwrap().beta());
        }
        if lo < 0.5 {
            fails.push(format!("(d) alpha {alpha}: min beta {lo}"));
        }
        mins.push(format!("alpha {alpha} min beta {lo:.4}"));
    }
    let secs = t.elapsed().as_secs_f64();
    Line {
        id: 3,
        name: "algorithm identities",
        passed: fails.is_empty() && secs < 120.0,
        enforced: true,
        detail: if fails.is_empty() {
            format!("(a),(b) bitwise for 5 methods x 25 steps; (c) 1000 vectors; (d) {}; {secs:.1}s", mins.join(", "))
        } else {
            fails.join("; ")
        },
    }
}

fn criterion_composition() -> Line {
    let spec = DatasetSpec::blobs_default();
    let expected_ood = [0usize, 1, 2, 3, 4];
    let mut fails = Vec::new();
    let mut sizes = Vec::new();
    for (zeta, want) in [0u32, 25, 50, 75, 100].into_iter().zip(expected_ood) {
        let b = build_splits(&spec, &MismatchSpec::new(zeta, 4).unwrap(), 0).unwrap();
        let hidden = b.unlabeled.hidden_labels_for_analysis();
        let mut ood: Vec<usize> = hidden.iter().copied().filter(|c| spec.ood_classes.contains(c)).collect();
        ood.sort_unstable();
        ood.dedup();
        let mut all: Vec<usize> = hidden.to_vec();
        all.sort_unstable();
        all.dedup();
        if ood.len() != want || all.len() != 4 {
            fails.push(format!("zeta {zeta}: {} OOD of {} classes", ood.len(), all.len()));
        }
        sizes.push(b.unlabeled.len());
    }
    let constant = sizes.windows(2).all(|w| w[0] == w[1]);
    Line {
        id: 4,
        name: "mismatch composition",
        passed: fails.is_empty() && constant,
        enforced: true,
        detail: if fails.is_empty() {
            format!("OOD slots [0,1,2,3,4] at zeta [0,25,50,75,100]; sizes {sizes:?}")
        } else {
            fails.join("; ")
        },
    }
}

/// Mean selected test accuracy in points per (method, mode).
fn desk_means(methods: Vec<MethodId>) -> (BTreeMap<(String, &'static str), f64>, f64) {
    let cfg = ExperimentConfig {
        zetas: vec![100],
        methods,
        modes: vec![Mode::LabeledOnly, Mode::OffTheShelf, Mode::Fixastep, Mode::AugOnly, Mode::GateOnly],
        seeds: (0..5).collect(),
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    let results = run_experiment(&cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let mut groups: BTreeMap<(String, &'static str), Vec<f64>> = BTreeMap::new();
    for r in &results {
        assert!(r.failure.is_none(), "{:?} failed: {:?}", r.cell(), r.failure);
        let method = r.method.map_or("none".to_string(), |m| m.to_string());
        groups
            .entry((method, r.mode.name()))
            .or_default()
            .push(100.0 * r.selected_test_accuracy().unwrap());
    }
    let means = groups
        .into_iter()
        .map(|(k, v)| {
            assert_eq!(v.len(), 5);
            (k, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    (means, secs)
}

fn get(means: &BTreeMap<(String, &'static str), f64>, method: &str, mode: &'static str) -> f64 {
    means[&(method.to_string(), mode)]
}

fn criteria_desk(strict: bool) -> Vec<Line> {
    let (means, secs) = desk_means(vec![MethodId::Pi]);
    let lo = get(&means, "none", "labeled-only");
    let off = get(&means, "pi", "off-the-shelf");
    let fas = get(&means, "pi", "fixastep");
    let (i, ii, iii) = (off <= lo + 1.0, fas >= off, fas >= lo - 0.5);
    let mut out = vec![Line {
        id: 5,
        name: "desk mismatch replication, pi, zeta 100",
        passed: i && ii && iii && secs < 1800.0,
        enforced: strict,
        detail: format!(
            "labeled-only {lo:.2}, off-the-shelf {off:.2}, fixastep {fas:.2}; (i) {} (ii) {} (iii) {}; {secs:.0}s",
            pf(i),
            pf(ii),
            pf(iii)
        ),
    }];

    let ordering = |m: &str, means: &BTreeMap<(String, &'static str), f64>| {
        let off = get(means, m, "off-the-shelf");
        let a = get(means, m, "aug-only");
        let g = get(means, m, "gate-only");
        let ag = get(means, m, "fixastep");
        let best = a.max(g);
        let ok = off <= best + 0.5 && best <= ag + 0.5;
        (ok, format!("{m}: off {off:.2}, +A {a:.2}, +G {g:.2}, +A&G {ag:.2}"))
    };
    let (mut ok, mut detail) = ordering("pi", &means);
    if !ok {
        let (fm, _) = desk_means(vec![MethodId::Fixmatch]);
        let (ok2, d2) = ordering("fixmatch", &fm);
        ok = ok2;
        detail = format!("{detail}; {d2}");
    }
    out.push(Line {
        id: 6,
        name: "ablation ordering, 0.5 slack",
        passed: ok,
        enforced: strict,
        detail,
    });
    out
}

fn pf(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "fail"
    }
}

fn criterion_formulas() -> Line {
    // Product-form weights: w_c ∝ Π_{k≠c} n_k, so [10,30] gives [30,10]/40.
    let w = ClassWeights::from_counts(&[10, 30]).unwrap();
    let weights_ok = w.as_slice() == [0.75, 0.25];
    let eta = 0.03;
    let total = 1000;
    let lr = cosine_lr(eta, total, total);
    let want = eta * (7.0 * std::f64::consts::PI / 16.0).cos();
    let lr_ok = (lr - want).abs() <= 1e-12;
    Line {
        id: 7,
        name: "class weights and cosine endpoint",
        passed: weights_ok && lr_ok,
        enforced: true,
        detail: format!("weights {:?}; lr {lr:.15} vs {want:.15}", w.as_slice()),
    }
}

fn main() -> ExitCode {
    // Accept and ignore libtest-style flags passed through by `cargo test`.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let strict = std::env::var("FIXASTEP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut lines = vec![
        criterion_gradients(),
        criterion_gate(),
        criterion_identities(),
        criterion_composition(),
    ];
    lines.extend(criteria_desk(strict));
    lines.push(criterion_formulas());

    let mut blocking = 0;
    for l in &lines {
        let tag = match (l.passed, l.enforced) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (reported)",
        };
        println!("[{tag}] criterion {}: {} -- {}", l.id, l.name, l.detail);
        if !l.passed && l.enforced {
            blocking += 1;
        }
    }
    let passed = lines.iter().filter(|l| l.passed).count();
    println!("{passed}/{} criteria passed", lines.len());
    if blocking > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
