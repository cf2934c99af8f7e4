//! Labeled-batch transformation: stochastic augmentation, sharpening,
//! two-view soft pseudo-labels, and MixUp against the combined pool.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::error::{invalid, Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

/// What one example's features look like.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureKind {
    Vector { dim: usize },
    /// Single-channel `side × side` image stored row-major.
    Image { side: usize },
}

impl FeatureKind {
    pub fn len(&self) -> usize {
        match *self {
            FeatureKind::Vector { dim } => dim,
            FeatureKind::Image { side } => side * side,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters of one stochastic augmentation.
///
/// Vectors get additive Gaussian noise. Images get zero-pad-and-crop, a
/// horizontal flip with probability ½ and, for the strong variant, a cutout
/// square and a brightness shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub kind: FeatureKind,
    pub noise_sigma: f64,
    pub pad: usize,
    pub flip: bool,
    /// Side of the cutout square, 0 for none.
    pub cutout: usize,
    /// Brightness shift drawn from `U(-b, b)`.
    pub brightness: f64,
}

pub const WEAK_NOISE_SIGMA: f64 = 0.1;
pub const IMAGE_PAD: usize = 2;
pub const STRONG_BRIGHTNESS: f64 = 0.3;

impl AugmentPolicy {
    pub fn identity(kind: FeatureKind) -> Self {
        Self {
            kind,
            noise_sigma: 0.0,
            pad: 0,
            flip: false,
            cutout: 0,
            brightness: 0.0,
        }
    }

    /// The basic augmentation applied to labeled data and consistency views.
    pub fn weak(kind: FeatureKind) -> Self {
        match kind {
            FeatureKind::Vector { .. } => Self {
                noise_sigma: WEAK_NOISE_SIGMA,
                ..Self::identity(kind)
            },
            FeatureKind::Image { .. } => Self {
                pad: IMAGE_PAD,
                flip: true,
                ..Self::identity(kind)
            },
        }
    }

    /// The FixMatch strong view.
    pub fn strong(kind: FeatureKind) -> Self {
        match kind {
            FeatureKind::Vector { .. } => Self {
                noise_sigma: 3.0 * WEAK_NOISE_SIGMA,
                ..Self::identity(kind)
            },
            FeatureKind::Image { side } => Self {
                cutout: (side / 4).max(1),
                brightness: STRONG_BRIGHTNESS,
                ..Self::weak(kind)
            },
        }
    }

    pub fn is_identity(&self) -> bool {
        self.noise_sigma == 0.0 && self.pad == 0 && !self.flip && self.cutout == 0 && self.brightness == 0.0
    }

    /// Augment one example.
    pub fn apply(&self, x: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let mut out = x.to_vec();
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("positive sigma");
            out.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        if let FeatureKind::Image { side } = self.kind {
            if self.pad > 0 {
                let dx = rng.random_range(0..=2 * self.pad);
                let dy = rng.random_range(0..=2 * self.pad);
                out = pad_crop(&out, side, self.pad, dx, dy);
            }
            if self.flip && rng.random_bool(0.5) {
                out = hflip(&out, side);
            }
            if self.cutout > 0 {
                let cx = rng.random_range(0..side);
                let cy = rng.random_range(0..side);
                cutout(&mut out, side, cx, cy, self.cutout);
            }
            if self.brightness > 0.0 {
                let b = rng.random_range(-self.brightness..=self.brightness);
                out.iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    /// Augment every row of a batch independently.
    pub fn apply_batch(&self, x: &Tensor, rng: &mut impl Rng) -> Tensor {
        let mut out = x.clone();
        for i in 0..x.rows() {
            let a = self.apply(x.row(i), rng);
            out.row_mut(i).copy_from_slice(&a);
        }
        out
    }
}

/// Same as [`AugmentPolicy::apply`] with the weak policy for `kind`.
pub fn basic_augment(x: &[f64], kind: FeatureKind, rng: &mut impl Rng) -> Vec<f64> {
    AugmentPolicy::weak(kind).apply(x, rng)
}

/// Mirror an image left to right.
pub fn hflip(img: &[f64], side: usize) -> Vec<f64> {
    let mut out = img.to_vec();
    for row in out.chunks_mut(side) {
        row.reverse();
    }
    out
}

/// Zero-pad by `pad` on each side, then crop a `side × side` window whose
/// top-left corner sits at `(dx, dy)` in padded coordinates. `dx = dy = pad`
/// is the identity.
pub fn pad_crop(img: &[f64], side: usize, pad: usize, dx: usize, dy: usize) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        let sy = (y + dy) as isize - pad as isize;
        if sy < 0 || sy >= side as isize {
            continue;
        }
        for x in 0..side {
            let sx = (x + dx) as isize - pad as isize;
            if sx < 0 || sx >= side as isize {
                continue;
            }
            out[y * side + x] = img[sy as usize * side + sx as usize];
        }
    }
    out
}

/// Zero a `size × size` square centred at `(cx, cy)`, clipped to the image.
pub fn cutout(img: &mut [f64], side: usize, cx: usize, cy: usize, size: usize) {
    let half = size / 2;
    let x0 = cx.saturating_sub(half);
    let y0 = cy.saturating_sub(half);
    for y in y0..(y0 + size).min(side) {
        for x in x0..(x0 + size).min(side) {
            img[y * side + x] = 0.0;
        }
    }
}

/// `q_c = p_c^{1/τ} / Σ_j p_j^{1/τ}`, evaluated in log space so small τ
/// cannot underflow every entry. At `τ = 1` the input is returned as is.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(invalid(format!("sharpening temperature must be > 0, got {temperature}")));
    }
    if temperature == 1.0 {
        return Ok(p.to_vec());
    }
    let inv = 1.0 / temperature;
    let logs: Vec<f64> = p
        .iter()
        .map(|&v| if v > 0.0 { inv * v.ln() } else { f64::NEG_INFINITY })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(invalid("cannot sharpen an all-zero row"));
    }
    let mut q: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= s);
    Ok(q)
}

/// Two augmented views of an unlabeled batch and their shared soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub x1: Tensor,
    pub x2: Tensor,
    pub soft_labels: Tensor,
}

/// Augment each unlabeled example twice, average the two predicted
/// distributions and sharpen the average. The model pass is detached.
pub fn aug_and_soft_label(
    model: &Classifier,
    xu: &Tensor,
    temperature: f64,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<AugmentedPair> {
    let mut x1 = xu.clone();
    let mut x2 = xu.clone();
    for i in 0..xu.rows() {
        let a = policy.apply(xu.row(i), rng);
        let b = policy.apply(xu.row(i), rng);
        x1.row_mut(i).copy_from_slice(&a);
        x2.row_mut(i).copy_from_slice(&b);
    }
    let p1 = model.predict_proba(&x1)?;
    let p2 = model.predict_proba(&x2)?;
    let c = model.num_classes();
    let mut soft = Vec::with_capacity(xu.rows() * c);
    for (r1, r2) in p1.iter_rows().zip(p2.iter_rows()).take(xu.rows()) {
        let avg: Vec<f64> = r1.iter().zip(r2).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        soft.extend(sharpen(&avg, temperature)?);
    }
    Ok(AugmentedPair {
        x1,
        x2,
        soft_labels: Tensor::new(vec![xu.rows(), c], soft)?,
    })
}

/// MixUp weight, always in `[0.5, 1]` so the mixed example stays closer to
/// the labeled one.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MixCoefficient(f64);

impl MixCoefficient {
    /// Fold a raw `Beta(α, α)` draw onto `[0.5, 1]`.
    pub fn from_draw(raw: f64) -> Self {
        Self(raw.max(1.0 - raw))
    }

    pub fn beta(self) -> f64 {
        self.0
    }
}

pub fn sample_mix_coeff(alpha: f64, rng: &mut impl Rng) -> Result<MixCoefficient> {
    let dist = beta_dist(alpha)?;
    Ok(MixCoefficient::from_draw(dist.sample(rng)))
}

fn beta_dist(alpha: f64) -> Result<Beta<f64>> {
    if !(alpha > 0.0) {
        return Err(invalid(format!("Beta shape must be > 0, got {alpha}")));
    }
    Beta::new(alpha, alpha).map_err(|e| invalid(e.to_string()))
}

/// The MixUp pool: labeled batch followed by both unlabeled views, the views
/// carrying the shared soft labels.
pub fn build_pool(labeled: &LabeledBatch, pair: &AugmentedPair) -> Result<LabeledBatch> {
    Ok(LabeledBatch {
        x: Tensor::concat_rows(&[&labeled.x, &pair.x1, &pair.x2])?,
        y: Tensor::concat_rows(&[&labeled.y, &pair.soft_labels, &pair.soft_labels])?,
    })
}

/// Mix labeled example `i` with pool entry `picks[i]` using `betas[i]`.
pub fn mix_with(
    labeled: &LabeledBatch,
    pool: &LabeledBatch,
    picks: &[usize],
    betas: &[MixCoefficient],
) -> Result<LabeledBatch> {
    if labeled.x.row_shape() != pool.x.row_shape() {
        return Err(Error::ShapeMismatch {
            op: "mixup features",
            lhs: labeled.x.shape().to_vec(),
            rhs: pool.x.shape().to_vec(),
        });
    }
    if labeled.y.row_shape() != pool.y.row_shape() {
        return Err(Error::ShapeMismatch {
            op: "mixup labels",
            lhs: labeled.y.shape().to_vec(),
            rhs: pool.y.shape().to_vec(),
        });
    }
    let mut out = labeled.clone();
    for (i, (&j, b)) in picks.iter().zip(betas).enumerate().take(labeled.len()) {
        let b = b.beta();
        for (o, p) in out.x.row_mut(i).iter_mut().zip(pool.x.row(j)) {
            *o = b * *o + (1.0 - b) * p;
        }
        for (o, p) in out.y.row_mut(i).iter_mut().zip(pool.y.row(j)) {
            *o = b * *o + (1.0 - b) * p;
        }
    }
    Ok(out)
}

/// For each labeled example draw one pool entry uniformly with replacement
/// and one mixing weight, then mix. The pool is never modified.
pub fn mixmatch_aug(
    labeled: &LabeledBatch,
    pool: &LabeledBatch,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<LabeledBatch> {
    let dist = beta_dist(alpha)?;
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let n = labeled.len();
    let mut picks = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    for _ in 0..n {
        picks.push(rng.random_range(0..pool.len()));
        betas.push(MixCoefficient::from_draw(dist.sample(rng)));
    }
    mix_with(labeled, pool, &picks, &betas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClassifierConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(side: usize) -> Vec<f64> {
        (0..side * side).map(|i| i as f64).collect()
    }

    fn one_hot(c: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; k];
        v[c] = 1.0;
        v
    }

    #[test]
    fn flip_is_an_involution() {
        let img = image(5);
        assert_eq!(hflip(&hflip(&img, 5), 5), img);
        assert_ne!(hflip(&img, 5), img);
    }

    #[test]
    fn centred_crop_and_zero_noise_are_identity() {
        let img = image(6);
        assert_eq!(pad_crop(&img, 6, 2, 2, 2), img);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = vec![0.5, -1.0, 2.0];
        let kind = FeatureKind::Vector { dim: 3 };
        assert_eq!(AugmentPolicy::identity(kind).apply(&v, &mut rng), v);
    }

    #[test]
    fn pad_crop_shifts() {
        let img = image(4);
        let shifted = pad_crop(&img, 4, 1, 2, 1);
        // content moves one pixel left; the right column is padding
        assert_eq!(&shifted[0..4], &[1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn augment_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [FeatureKind::Vector { dim: 7 }, FeatureKind::Image { side: 16 }] {
            let x: Vec<f64> = (0..kind.len()).map(|i| (i as f64).sin()).collect();
            for policy in [AugmentPolicy::weak(kind), AugmentPolicy::strong(kind)] {
                assert_eq!(policy.apply(&x, &mut rng).len(), x.len());
            }
            assert_eq!(basic_augment(&x, kind, &mut rng).len(), x.len());
        }
    }

    #[test]
    fn strong_image_policy_has_quarter_cutout() {
        let p = AugmentPolicy::strong(FeatureKind::Image { side: 16 });
        assert_eq!(p.cutout, 4);
        assert_eq!(p.brightness, 0.3);
        let v = AugmentPolicy::strong(FeatureKind::Vector { dim: 3 });
        assert!((v.noise_sigma - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sharpen_examples() {
        assert_eq!(sharpen(&[0.5, 0.5], 0.5).unwrap(), vec![0.5, 0.5]);
        let q = sharpen(&[0.9, 0.1], 0.5).unwrap();
        // 0.81 / 0.82, 0.01 / 0.82
        assert!((q[0] - 0.987_804_878_048_780_5).abs() < 1e-12);
        assert!((q[1] - 0.012_195_121_951_219_5).abs() < 1e-12);
        assert_eq!(sharpen(&[0.2, 0.3, 0.5], 1.0).unwrap(), vec![0.2, 0.3, 0.5]);
        assert!(sharpen(&[0.5, 0.5], 0.0).is_err());
        assert!(sharpen(&[0.5, 0.5], -1.0).is_err());
    }

    #[test]
    fn sharpen_small_temperature_does_not_underflow() {
        let q = sharpen(&[1e-200, 1e-250], 0.01).unwrap();
        assert_eq!(q, vec![1.0, 0.0]);
    }

    #[test]
    fn mix_coefficient_folds() {
        assert!((MixCoefficient::from_draw(0.3).beta() - 0.7).abs() < 1e-15);
        assert_eq!(MixCoefficient::from_draw(0.8).beta(), 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mix_coeff(0.0, &mut rng).is_err());
        assert!(sample_mix_coeff(-1.0, &mut rng).is_err());
    }

    /// `E[max(B, 1-B)]` for `B ~ Beta(a, a)` by midpoint quadrature of the
    /// density, with the endpoint singularities removed by `u = t²`.
    fn expected_folded_beta(a: f64) -> f64 {
        use statrs_free::ln_beta;
        let n = 200_000;
        let norm = (-ln_beta(a, a)).exp();
        // ∫_0^1 max(x,1-x) x^{a-1}(1-x)^{a-1} dx = 2 ∫_{1/2}^1 x·x^{a-1}(1-x)^{a-1} dx
        // substitute 1-x = s², dx = -2s ds, s ∈ (0, √½)
        let top = 0.5f64.sqrt();
        let h = top / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let s = (i as f64 + 0.5) * h;
            let x = 1.0 - s * s;
            acc += x.powf(a) * s.powf(2.0 * (a - 1.0)) * 2.0 * s * h;
        }
        2.0 * norm * acc
    }

    mod statrs_free {
        /// ln B(a, a) via Lanczos log-gamma.
        pub fn ln_beta(a: f64, b: f64) -> f64 {
            ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
        }

        fn ln_gamma(x: f64) -> f64 {
            const G: [f64; 9] = [
                0.999_999_999_999_809_9,
                676.520_368_121_885_1,
                -1_259.139_216_722_402_8,
                771.323_428_777_653_1,
                -176.615_029_162_140_6,
                12.507_343_278_686_905,
                -0.138_571_095_265_720_12,
                9.984_369_578_019_572e-6,
                1.505_632_735_149_311_6e-7,
            ];
            if x < 0.5 {
                let pi = std::f64::consts::PI;
                return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
            }
            let x = x - 1.0;
            let mut a = G[0];
            let t = x + 7.5;
            for (i, g) in G.iter().enumerate().skip(1) {
                a += g / (x + i as f64);
            }
            0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
        }
    }

    #[test]
    fn folded_beta_mean_matches_quadrature() {
        // Beta(0.5, 0.5) is the arcsine law: E[max] = 1/2 + 1/π
        let exact = 0.5 + 1.0 / std::f64::consts::PI;
        let quad = expected_folded_beta(0.5);
        assert!((quad - exact).abs() < 1e-4, "{quad} vs {exact}");

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_mix_coeff(0.5, &mut rng).unwrap().beta())
            .sum::<f64>()
            / n as f64;
        // sd of max(B,1-B) is about 0.15, so the standard error is ~5e-4
        assert!((mean - quad).abs() < 3e-3, "{mean} vs {quad}");
    }

    fn labeled(xs: &[&[f64]], ys: &[Vec<f64>]) -> LabeledBatch {
        LabeledBatch {
            x: Tensor::from_rows(xs, xs[0].len()).unwrap(),
            y: Tensor::from_rows(ys, ys[0].len()).unwrap(),
        }
    }

    #[test]
    fn mix_examples() {
        let l = labeled(&[&[1.0, 0.0]], &[one_hot(0, 2)]);
        let pool = labeled(&[&[0.0, 1.0]], &[one_hot(1, 2)]);
        let out = mix_with(&l, &pool, &[0], &[MixCoefficient::from_draw(0.3)]).unwrap();
        assert!((out.y.row(0)[0] - 0.7).abs() < 1e-15);
        assert!((out.y.row(0)[1] - 0.3).abs() < 1e-15);
        assert!((out.x.row(0)[0] - 0.7).abs() < 1e-15);

        let same = mix_with(&l, &pool, &[0], &[MixCoefficient::from_draw(1.0)]).unwrap();
        assert_eq!(same, l);
    }

    #[test]
    fn mix_rejects_empty_pool() {
        let l = labeled(&[&[1.0, 0.0]], &[one_hot(0, 2)]);
        let pool = LabeledBatch {
            x: Tensor::empty_rows(&[2]),
            y: Tensor::empty_rows(&[2]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(mixmatch_aug(&l, &pool, 0.5, &mut rng), Err(Error::EmptyPool)));
    }

    #[test]
    fn soft_labels_collapse_with_identity_augment() {
        let kind = FeatureKind::Vector { dim: 3 };
        let m = Classifier::init(ClassifierConfig::mlp(3, vec![5], 4), 2).unwrap();
        let xu = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = aug_and_soft_label(&m, &xu, 0.5, &AugmentPolicy::identity(kind), &mut rng).unwrap();
        assert_eq!(pair.x1, pair.x2);
        assert_eq!(pair.x1.rows(), 4);
        assert_eq!(pair.soft_labels.shape(), &[4, 4]);
        let p = m.predict_proba(&xu).unwrap();
        for (row, pr) in pair.soft_labels.iter_rows().zip(p.iter_rows()) {
            let want = sharpen(pr, 0.5).unwrap();
            for (a, b) in row.iter().zip(&want) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uniform_model_gives_uniform_soft_labels() {
        let kind = FeatureKind::Vector { dim: 3 };
        let mut m = Classifier::init(ClassifierConfig::mlp(3, vec![5], 4), 2).unwrap();
        let n = m.params().len();
        for p in &mut m.params_mut()[n - 2..] {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let xu = Tensor::new(vec![3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in [0.1, 0.5, 2.0] {
            let pair = aug_and_soft_label(&m, &xu, t, &AugmentPolicy::weak(kind), &mut rng).unwrap();
            assert!(pair.soft_labels.values().iter().all(|v| (v - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn soft_labels_are_detached_from_later_param_changes() {
        let kind = FeatureKind::Vector { dim: 3 };
        let mut m = Classifier::init(ClassifierConfig::mlp(3, vec![5], 4), 2).unwrap();
        let xu = Tensor::new(vec![3, 3], (0..9).map(|i| i as f64 * 0.2).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = aug_and_soft_label(&m, &xu, 0.5, &AugmentPolicy::weak(kind), &mut rng).unwrap();
        let before = pair.soft_labels.clone();
        for p in m.params_mut() {
            p.tensor.values_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        assert_eq!(pair.soft_labels, before);
    }

    proptest! {
        #[test]
        fn sharpen_properties(raw in prop::collection::vec(0.01f64..1.0, 2..6), t in 0.05f64..1.0) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let q = sharpen(&p, t).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            let pmax = p.iter().copied().fold(0.0, f64::max);
            let qmax = q.iter().copied().fold(0.0, f64::max);
            // ties in p make argmax ambiguous; only compare when unique
            if p.iter().filter(|&&v| (v - pmax).abs() < 1e-12).count() == 1 {
                prop_assert_eq!(argmax(&p), argmax(&q));
            }
            prop_assert!(qmax >= pmax - 1e-12);
            let h = |v: &[f64]| -v.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            prop_assert!(h(&q) <= h(&p) + 1e-12);
            let id = sharpen(&p, 1.0).unwrap();
            for (a, b) in id.iter().zip(&p) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn mixed_labels_stay_valid_and_favour_labeled_class(seed in 0u64..500, alpha in 0.05f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 3;
            let l = labeled(&[&[0.0], &[1.0], &[2.0]], &[one_hot(0, c), one_hot(1, c), one_hot(2, c)]);
            let soft = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]];
            let pool = LabeledBatch {
                x: Tensor::concat_rows(&[&l.x, &Tensor::from_rows(&[[5.0], [6.0]], 1).unwrap()]).unwrap(),
                y: Tensor::concat_rows(&[&l.y, &Tensor::from_rows(&soft, c).unwrap()]).unwrap(),
            };
            let out = mixmatch_aug(&l, &pool, alpha, &mut rng).unwrap();
            prop_assert_eq!(out.len(), l.len());
            for i in 0..out.len() {
                let row = out.y.row(i);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row[i] >= 0.5);
            }
        }
    }
}
